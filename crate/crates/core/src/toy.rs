//! Deterministic stand-in for a target language model.
//!
//! Each token embeds to a seeded, hash-derived unit vector confined to the
//! first `base_dim` coordinates. Trigger rules add a fixed unit direction
//! whenever a token fully matches their pattern. Running the embedding
//! through an SAE encoder gives per-token feature activations without any
//! model weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::profile::{ActivationProfile, FeatureRef};
use crate::sae::{self, Matrix, SaeParams};

const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriggerRule {
    /// Regex matched against the whole token (case-insensitive).
    pub pattern: String,
    pub direction: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ToyModelFile", into = "ToyModelFile")]
pub struct ToyTargetModel {
    pub vocab_hash_seed: u64,
    pub embed_dim: usize,
    /// Hash-base vectors occupy coordinates `0..base_dim`.
    pub base_dim: usize,
    rules: Vec<TriggerRule>,
    compiled: Vec<Regex>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ToyModelFile {
    vocab_hash_seed: u64,
    embed_dim: usize,
    #[serde(default)]
    base_dim: Option<usize>,
    trigger_rules: Vec<TriggerRule>,
}

impl TryFrom<ToyModelFile> for ToyTargetModel {
    type Error = Error;

    fn try_from(f: ToyModelFile) -> Result<Self> {
        ToyTargetModel::new(
            f.vocab_hash_seed,
            f.embed_dim,
            f.base_dim.unwrap_or(f.embed_dim),
            f.trigger_rules,
        )
    }
}

impl From<ToyTargetModel> for ToyModelFile {
    fn from(m: ToyTargetModel) -> Self {
        ToyModelFile {
            vocab_hash_seed: m.vocab_hash_seed,
            embed_dim: m.embed_dim,
            base_dim: Some(m.base_dim),
            trigger_rules: m.rules,
        }
    }
}

impl ToyTargetModel {
    pub fn new(
        vocab_hash_seed: u64,
        embed_dim: usize,
        base_dim: usize,
        trigger_rules: Vec<TriggerRule>,
    ) -> Result<Self> {
        if embed_dim == 0 {
            return Err(Error::input("embed_dim must be positive"));
        }
        if base_dim > embed_dim {
            return Err(Error::input("base_dim exceeds embed_dim"));
        }
        let mut compiled = Vec::with_capacity(trigger_rules.len());
        for rule in &trigger_rules {
            if rule.direction.len() != embed_dim {
                return Err(Error::input(format!(
                    "trigger direction for {:?} has length {}, expected {embed_dim}",
                    rule.pattern,
                    rule.direction.len()
                )));
            }
            let norm = rule.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::input(format!(
                    "trigger direction for {:?} has norm {norm}, expected 1",
                    rule.pattern
                )));
            }
            let re = Regex::new(&format!("(?i)^(?:{})$", rule.pattern))
                .map_err(|e| Error::input(format!("bad trigger pattern {:?}: {e}", rule.pattern)))?;
            compiled.push(re);
        }
        Ok(Self {
            vocab_hash_seed,
            embed_dim,
            base_dim,
            rules: trigger_rules,
            compiled,
        })
    }

    pub fn trigger_rules(&self) -> &[TriggerRule] {
        &self.rules
    }

    /// Hash-derived unit vector for a token, zero outside `0..base_dim`.
    pub fn base_embedding(&self, token: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.embed_dim];
        if self.base_dim == 0 {
            return out;
        }
        let mut hasher = Sha256::new();
        hasher.update(self.vocab_hash_seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        loop {
            for v in out.iter_mut().take(self.base_dim) {
                *v = rng.random_range(-1.0..1.0);
            }
            let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-6 {
                out.iter_mut().for_each(|v| *v /= norm);
                return out;
            }
        }
    }

    pub fn embed(&self, token: &str) -> Vec<f64> {
        let mut e = self.base_embedding(token);
        for (rule, re) in self.rules.iter().zip(&self.compiled) {
            if re.is_match(token) {
                e.iter_mut().zip(&rule.direction).for_each(|(a, d)| *a += d);
            }
        }
        e
    }

    pub fn matches_any(&self, token: &str) -> bool {
        self.compiled.iter().any(|re| re.is_match(token))
    }
}

/// Splits on whitespace and peels leading/trailing punctuation into
/// separate tokens. Apostrophes inside words are kept (`can't` is one token).
pub fn tokenize(text: &str) -> Vec<String> {
    const PUNCT: &[char] = &['.', ',', '!', '?', ';', ':', '"', '(', ')', '[', ']', '{', '}'];
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let start = word.find(|c: char| !PUNCT.contains(&c)).unwrap_or(word.len());
        let end = word
            .rfind(|c: char| !PUNCT.contains(&c))
            .map_or(start, |i| i + word[i..].chars().next().map_or(1, char::len_utf8));
        out.extend(word[..start].chars().map(String::from));
        if start < end {
            out.push(word[start..end].to_string());
        }
        if end < word.len() && end >= start {
            out.extend(word[end..].chars().map(String::from));
        }
    }
    out
}

/// Feature activation per token: encode the toy embedding and keep one latent.
pub fn toy_activations(
    model: &ToyTargetModel,
    params: &SaeParams,
    tokens: &[String],
    feature_index: usize,
) -> Result<ActivationProfile> {
    if tokens.is_empty() {
        return Err(Error::input("empty token list"));
    }
    if feature_index >= params.d_sae {
        return Err(Error::input(format!(
            "feature index {feature_index} out of range for d_sae = {}",
            params.d_sae
        )));
    }
    if model.embed_dim != params.d_model {
        return Err(Error::input(format!(
            "toy embed_dim {} does not match SAE d_model {}",
            model.embed_dim, params.d_model
        )));
    }
    let activations = tokens
        .iter()
        .map(|t| sae::pre_activation(params, &model.embed(t), feature_index).max(0.0))
        .collect();
    ActivationProfile::new(FeatureRef::toy(feature_index as u32), tokens.to_vec(), activations)
}

/// One feature to plant in a toy fixture: each `(pattern, strength)` rule
/// drives the feature's pre-activation to `strength` on matching tokens.
#[derive(Debug, Clone)]
pub struct PlantedFeature {
    pub feature_index: usize,
    pub rules: Vec<(String, f64)>,
}

impl PlantedFeature {
    pub fn new(feature_index: usize, rules: &[(&str, f64)]) -> Self {
        Self {
            feature_index,
            rules: rules.iter().map(|(p, s)| (p.to_string(), *s)).collect(),
        }
    }
}

/// Builds a toy model and SAE where each planted rule owns one reserved axis
/// beyond `base_dim`. Planted encoder rows are zero on the base coordinates,
/// so unmatched tokens give exactly zero activation on those features.
/// Other latents get seeded random weights over the base coordinates.
pub fn planted_fixture(
    d_model: usize,
    d_sae: usize,
    base_dim: usize,
    seed: u64,
    features: &[PlantedFeature],
) -> Result<(ToyTargetModel, SaeParams)> {
    let n_rules: usize = features.iter().map(|f| f.rules.len()).sum();
    if base_dim + n_rules > d_model {
        return Err(Error::input(format!(
            "need base_dim + rules = {} <= d_model = {d_model}",
            base_dim + n_rules
        )));
    }
    let mut params = SaeParams::zeros(d_model, d_sae);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planted: Vec<usize> = features.iter().map(|f| f.feature_index).collect();
    for j in 0..d_sae {
        if planted.contains(&j) {
            continue;
        }
        let row = params.enc_weights.row_mut(j);
        for v in row.iter_mut().take(base_dim) {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    let mut rules = Vec::with_capacity(n_rules);
    let mut axis = base_dim;
    for feat in features {
        if feat.feature_index >= d_sae {
            return Err(Error::input("planted feature index out of range"));
        }
        for (pattern, strength) in &feat.rules {
            let mut direction = vec![0.0; d_model];
            direction[axis] = 1.0;
            rules.push(TriggerRule {
                pattern: pattern.clone(),
                direction,
            });
            params.enc_weights.set(feat.feature_index, axis, *strength);
            axis += 1;
        }
    }
    let mut dec = Matrix::zeros(d_model, d_sae);
    for j in 0..d_sae {
        for i in 0..d_model {
            dec.set(i, j, params.enc_weights.get(j, i));
        }
    }
    params.dec_weights = dec;
    params.validate()?;
    let model = ToyTargetModel::new(seed, d_model, base_dim, rules)?;
    Ok((model, params))
}
