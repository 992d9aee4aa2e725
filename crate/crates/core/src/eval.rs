//! Explanation scoring.
//!
//! Generative accuracy asks an LLM for sentences written from the
//! explanation alone and counts how many push the feature's peak above half
//! of the exemplar maximum. Predictive accuracy has a simulator LLM guess a
//! 0-10 activation level for every token of held-out texts and correlates
//! the expected level with the true (normalized) activations.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::llm::{ChatMessage, ChatRequest, LlmClient};
use crate::agents::prompts::{template, TemplateName, SYSTEM_PROMPT};
use crate::agents::{parse, CallCtx, PromptLog, PromptRecord, Stage};
use crate::backend::{ActivationBackend, DashboardEntry};
use crate::error::{Error, Result};
use crate::profile::{canonical_text, ActivationProfile, Exemplar, FeatureRef};

/// Fraction of the exemplar maximum a generated sentence must exceed.
pub const GEN_THRESHOLD_FRAC: f64 = 0.5;
pub const DEFAULT_N_SENTENCES: usize = 10;
pub const SIMULATOR_LEVELS: u32 = 10;
pub const GENERATOR_TEMPERATURE: f64 = 0.7;
const SIMULATOR_TOP_LOGPROBS: u8 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    High,
    Medium,
    Low,
}

/// Thirds of the exemplar maximum: high `[2/3, inf)`, medium `[1/3, 2/3)`,
/// low `[0, 1/3)`.
pub fn stratum_of(peak: f64, exemplar_max: f64) -> Stratum {
    if exemplar_max <= 0.0 {
        return Stratum::Low;
    }
    let r = peak / exemplar_max;
    if r >= 2.0 / 3.0 {
        Stratum::High
    } else if r >= 1.0 / 3.0 {
        Stratum::Medium
    } else {
        Stratum::Low
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceResult {
    pub text: String,
    pub max_activation: Option<f64>,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenEvalReport {
    pub explanation: String,
    /// Sentences that were measured successfully.
    pub n_sentences: usize,
    pub n_errored: usize,
    pub threshold: f64,
    pub per_sentence: Vec<SentenceResult>,
    pub accuracy: f64,
}

fn user_call(
    llm: &dyn LlmClient,
    log: Option<&PromptLog>,
    ctx: CallCtx,
    req: ChatRequest,
) -> Result<crate::agents::llm::ChatResponse> {
    let resp = llm.complete(&req)?;
    if let Some(log) = log {
        log.push(PromptRecord {
            ctx,
            attempt: 0,
            messages: req.messages,
            completion: resp.text.clone(),
        });
    }
    Ok(resp)
}

/// Asks the generator for `n` sentences (one reprompt if it returns fewer).
pub fn generate_sentences(
    explanation: &str,
    n: usize,
    llm: &dyn LlmClient,
    log: Option<&PromptLog>,
) -> Result<Vec<String>> {
    let mut b = BTreeMap::new();
    b.insert("explanation", explanation.to_string());
    b.insert("n_sentences", n.to_string());
    let prompt = template(TemplateName::Generate).render(&b)?;
    let tmp;
    let log = match log {
        Some(l) => l,
        None => {
            tmp = PromptLog::default();
            &tmp
        }
    };
    crate::agents::call_structured(
        llm,
        log,
        &CallCtx::new(Stage::Generate, 0, ""),
        prompt,
        GENERATOR_TEMPERATURE,
        |out| {
            let s = parse::parse_sentence_list(out);
            if s.len() < n {
                Err(Error::protocol(format!("expected {n} numbered sentences, found {}", s.len())))
            } else {
                Ok(s.into_iter().take(n).collect())
            }
        },
    )
}

/// Scores already-generated sentences against the backend.
pub fn score_generated(
    explanation: &str,
    sentences: &[String],
    feature: &FeatureRef,
    exemplar_max: f64,
    backend: &dyn ActivationBackend,
) -> Result<GenEvalReport> {
    if exemplar_max <= 0.0 {
        return Err(Error::input("exemplar_max must be positive"));
    }
    if sentences.is_empty() {
        return Err(Error::input("no sentences to score"));
    }
    let threshold = GEN_THRESHOLD_FRAC * exemplar_max;
    let measured: Vec<Result<ActivationProfile>> = std::thread::scope(|s| {
        let handles: Vec<_> = sentences
            .iter()
            .map(|t| s.spawn(move || backend.measure(feature, t)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("measure thread panicked")).collect()
    });
    let per_sentence: Vec<SentenceResult> = sentences
        .iter()
        .zip(measured)
        .map(|(text, r)| match r {
            Ok(p) => SentenceResult {
                text: text.clone(),
                max_activation: Some(p.max_activation),
                pass: p.max_activation > threshold,
                error: None,
            },
            Err(e) => {
                tracing::warn!(sentence = %text, error = %e, "measurement failed; excluding sentence");
                SentenceResult {
                    text: text.clone(),
                    max_activation: None,
                    pass: false,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    let n_errored = per_sentence.iter().filter(|s| s.error.is_some()).count();
    let n_ok = per_sentence.len() - n_errored;
    if n_ok == 0 {
        return Err(Error::Evaluation("every generated sentence failed to measure".into()));
    }
    let passes = per_sentence.iter().filter(|s| s.pass).count();
    Ok(GenEvalReport {
        explanation: explanation.to_string(),
        n_sentences: n_ok,
        n_errored,
        threshold,
        per_sentence,
        accuracy: passes as f64 / n_ok as f64,
    })
}

pub fn generative_accuracy(
    explanation: &str,
    feature: &FeatureRef,
    exemplar_max: f64,
    n: usize,
    llm: &dyn LlmClient,
    backend: &dyn ActivationBackend,
    log: Option<&PromptLog>,
) -> Result<GenEvalReport> {
    if n == 0 {
        return Err(Error::input("N must be >= 1"));
    }
    if exemplar_max <= 0.0 {
        return Err(Error::input("exemplar_max must be positive"));
    }
    let sentences = generate_sentences(explanation, n, llm, log)?;
    score_generated(explanation, &sentences, feature, exemplar_max, backend)
}

/// Draws `per_stratum` held-out texts from each activation third, excluding
/// any text that is also one of the explanation exemplars.
pub fn sample_held_out(
    backend: &dyn ActivationBackend,
    feature: &FeatureRef,
    exemplars: &[Exemplar],
    per_stratum: usize,
    seed: u64,
) -> Result<Vec<ActivationProfile>> {
    if per_stratum == 0 {
        return Err(Error::input("per_stratum must be >= 1"));
    }
    let exemplar_max = crate::backend::exemplar_max(exemplars);
    let excluded: std::collections::HashSet<String> =
        exemplars.iter().map(|e| canonical_text(&e.text)).collect();
    let mut pool: BTreeMap<String, DashboardEntry> = BTreeMap::new();
    for e in backend.dashboard(feature)? {
        let key = canonical_text(&e.text);
        if !excluded.contains(&key) {
            pool.entry(key).or_insert(e);
        }
    }
    let mut strata: [Vec<ActivationProfile>; 3] = Default::default();
    for e in pool.values() {
        let p = e.to_profile(feature)?;
        let slot = match stratum_of(p.max_activation, exemplar_max) {
            Stratum::High => 0,
            Stratum::Medium => 1,
            Stratum::Low => 2,
        };
        strata[slot].push(p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(3 * per_stratum);
    for (bucket, name) in strata.iter_mut().zip(["high", "medium", "low"]) {
        if bucket.len() < per_stratum {
            return Err(Error::InsufficientData(format!(
                "{feature}: {} distinct {name}-activation texts outside the exemplars, {per_stratum} needed",
                bucket.len()
            )));
        }
        bucket.shuffle(&mut rng);
        out.extend(bucket.drain(..per_stratum));
    }
    Ok(out)
}

/// Expected level `sum v * p(v)` over the digit strings "0".."10", with
/// probabilities renormalized over whichever of them appear. `None` when
/// no digit string is among the alternatives.
pub fn expected_level(alternatives: &[(String, f64)]) -> Option<f64> {
    let mut mass = [0.0f64; SIMULATOR_LEVELS as usize + 1];
    let mut seen = false;
    for (token, logprob) in alternatives {
        if let Ok(v) = token.trim().parse::<u32>() {
            if v <= SIMULATOR_LEVELS && token.trim() == v.to_string() {
                mass[v as usize] += logprob.exp();
                seen = true;
            }
        }
    }
    let total: f64 = mass.iter().sum();
    if !seen || total <= 0.0 {
        return None;
    }
    Some(mass.iter().enumerate().map(|(v, p)| v as f64 * p).sum::<f64>() / total)
}

fn token_listing(tokens: &[String]) -> String {
    tokens
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{i}: {t:?}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Simulated activation level per token; `None` marks positions where the
/// simulator offered no digit alternatives.
pub fn simulate_token_activations(
    explanation: &str,
    tokens: &[String],
    llm: &dyn LlmClient,
    log: Option<&PromptLog>,
    scope: &str,
) -> Result<Vec<Option<f64>>> {
    if tokens.is_empty() {
        return Err(Error::input("no tokens to simulate"));
    }
    let listing = token_listing(tokens);
    let tmpl = template(TemplateName::Simulate);
    let prompts = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut b = BTreeMap::new();
            b.insert("explanation", explanation.to_string());
            b.insert("token_listing", listing.clone());
            b.insert("target_index", i.to_string());
            b.insert("target_token", format!("{t:?}"));
            tmpl.render(&b)
        })
        .collect::<Result<Vec<_>>>()?;
    std::thread::scope(|s| {
        let handles: Vec<_> = prompts
            .into_iter()
            .enumerate()
            .map(|(i, prompt)| {
                s.spawn(move || -> Result<Option<f64>> {
                    let mut req = ChatRequest::new(
                        vec![ChatMessage::system(SYSTEM_PROMPT), ChatMessage::user(prompt)],
                        0.0,
                    );
                    req.max_tokens = Some(1);
                    req.top_logprobs = Some(SIMULATOR_TOP_LOGPROBS);
                    let ctx = CallCtx::new(Stage::Simulate, 0, format!("{scope}/{i:04}"));
                    let resp = user_call(llm, log, ctx, req)?;
                    let alts: Vec<(String, f64)> = resp
                        .logprobs
                        .as_ref()
                        .and_then(|l| l.first())
                        .map(|first| {
                            first
                                .top_logprobs
                                .iter()
                                .map(|a| (a.token.clone(), a.logprob))
                                .collect()
                        })
                        .unwrap_or_default();
                    Ok(expected_level(&alts))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulator thread panicked"))
            .collect()
    })
}

/// Pearson correlation; `None` when either side has zero variance or the
/// inputs are shorter than two.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Maps raw activations onto the simulator's 0-10 scale.
pub fn normalize_activations(acts: &[f64], exemplar_max: f64) -> Vec<f64> {
    acts.iter()
        .map(|a| {
            if exemplar_max > 0.0 {
                f64::from(SIMULATOR_LEVELS) * (a / exemplar_max).min(1.0)
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumCounts {
    pub high: usize,
    pub medium: usize,
    pub low: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredEvalReport {
    pub explanation: String,
    pub held_out: Vec<ActivationProfile>,
    pub predicted: Vec<Vec<Option<f64>>>,
    /// `None` where the correlation is undefined.
    pub per_example_rho: Vec<Option<f64>>,
    pub mean_rho: Option<f64>,
    pub n_undefined: usize,
    pub stratum_counts: StratumCounts,
}

/// Correlates simulator predictions with normalized truth per example.
pub fn score_predictions(
    explanation: &str,
    held_out: Vec<ActivationProfile>,
    predicted: Vec<Vec<Option<f64>>>,
    exemplar_max: f64,
) -> Result<PredEvalReport> {
    if held_out.is_empty() {
        return Err(Error::input("held-out set is empty"));
    }
    if held_out.len() != predicted.len() {
        return Err(Error::input("one prediction vector per held-out example required"));
    }
    let mut counts = StratumCounts { high: 0, medium: 0, low: 0 };
    let per_example_rho: Vec<Option<f64>> = held_out
        .iter()
        .zip(&predicted)
        .map(|(p, pred)| {
            match stratum_of(p.max_activation, exemplar_max) {
                Stratum::High => counts.high += 1,
                Stratum::Medium => counts.medium += 1,
                Stratum::Low => counts.low += 1,
            }
            let truth = normalize_activations(&p.activations, exemplar_max);
            let (t, s): (Vec<f64>, Vec<f64>) = truth
                .iter()
                .zip(pred)
                .filter_map(|(t, s)| s.map(|s| (*t, s)))
                .unzip();
            pearson(&s, &t)
        })
        .collect();
    let defined: Vec<f64> = per_example_rho.iter().flatten().copied().collect();
    let n_undefined = per_example_rho.len() - defined.len();
    let mean_rho = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(PredEvalReport {
        explanation: explanation.to_string(),
        held_out,
        predicted,
        per_example_rho,
        mean_rho,
        n_undefined,
        stratum_counts: counts,
    })
}

pub fn predictive_accuracy(
    explanation: &str,
    held_out: Vec<ActivationProfile>,
    exemplar_max: f64,
    llm: &dyn LlmClient,
    log: Option<&PromptLog>,
) -> Result<PredEvalReport> {
    if held_out.is_empty() {
        return Err(Error::input("held-out set is empty"));
    }
    let predicted = held_out
        .iter()
        .enumerate()
        .map(|(i, p)| simulate_token_activations(explanation, &p.tokens, llm, log, &format!("ex{i:03}")))
        .collect::<Result<Vec<_>>>()?;
    score_predictions(explanation, held_out, predicted, exemplar_max)
}
