use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifies one SAE latent on one model layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureRef {
    pub model_id: String,
    pub sae_id: String,
    pub layer: u32,
    pub feature_index: u32,
}

impl FeatureRef {
    pub fn new(
        model_id: impl Into<String>,
        sae_id: impl Into<String>,
        layer: u32,
        feature_index: u32,
    ) -> Self {
        Self {
            model_id: model_id.into(),
            sae_id: sae_id.into(),
            layer,
            feature_index,
        }
    }

    /// Reference used for profiles produced directly by the toy model.
    pub fn toy(feature_index: u32) -> Self {
        Self::new("toy", "toy-sae", 0, feature_index)
    }
}

impl fmt::Display for FeatureRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}",
            self.model_id, self.sae_id, self.layer, self.feature_index
        )
    }
}

/// Per-token activation of one feature on one text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationProfile {
    pub tokens: Vec<String>,
    pub activations: Vec<f64>,
    pub max_activation: f64,
    pub feature_ref: FeatureRef,
}

impl ActivationProfile {
    pub fn new(feature_ref: FeatureRef, tokens: Vec<String>, activations: Vec<f64>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::input("activation profile has no tokens"));
        }
        if tokens.len() != activations.len() {
            return Err(Error::input(format!(
                "{} tokens but {} activations",
                tokens.len(),
                activations.len()
            )));
        }
        if activations.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::input("activations must be finite and nonnegative"));
        }
        let max_activation = activations.iter().copied().fold(0.0, f64::max);
        Ok(Self {
            tokens,
            activations,
            max_activation,
            feature_ref,
        })
    }

    /// Text reconstructed by joining tokens with single spaces.
    pub fn joined_text(&self) -> String {
        self.tokens.join(" ")
    }

    /// Index of the first token carrying the peak activation.
    pub fn peak_index(&self) -> usize {
        self.activations
            .iter()
            .position(|a| *a == self.max_activation)
            .unwrap_or(0)
    }
}

/// One of the top-k activating corpus texts for a feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub text: String,
    pub profile: ActivationProfile,
    /// 1-based position in descending activation order.
    pub rank: usize,
}

/// Collapses runs of whitespace and trims, for exact text comparisons.
pub fn canonical_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_invariants() {
        let f = FeatureRef::toy(1);
        let p = ActivationProfile::new(f.clone(), vec!["a".into(), "b".into()], vec![0.5, 2.0]).unwrap();
        assert_eq!(p.max_activation, 2.0);
        assert_eq!(p.peak_index(), 1);
        assert!(ActivationProfile::new(f.clone(), vec![], vec![]).is_err());
        assert!(ActivationProfile::new(f.clone(), vec!["a".into()], vec![]).is_err());
        assert!(ActivationProfile::new(f, vec!["a".into()], vec![-1.0]).is_err());
    }

    #[test]
    fn canonical_text_collapses_whitespace() {
        assert_eq!(canonical_text("  She  can't\tswim. \n"), "She can't swim.");
    }
}
