//! "Run text through the target model and read one SAE latent."
//!
//! Two implementations sit behind [`ActivationBackend`]: [`ToyBackend`]
//! computes activations offline from a planted toy model, and
//! [`RemoteBackend`] speaks JSON over HTTP to a dashboard-style service
//! (optionally through a record/replay cassette).

mod remote;
mod toy;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::{ActivationProfile, Exemplar, FeatureRef};

pub use remote::{
    exemplars_path, ActivationRequest, ActivationResponse, ExemplarsResponse, RemoteBackend, ACTIVATION_PATH,
};
pub use toy::{ToyBackend, ToyWorld};

/// Default number of top exemplars fetched per feature.
pub const DEFAULT_TOP_K: usize = 10;

pub trait ActivationBackend: Send + Sync {
    fn measure(&self, feature: &FeatureRef, text: &str) -> Result<ActivationProfile>;

    /// Every recorded corpus entry for the feature, in no particular order.
    fn dashboard(&self, feature: &FeatureRef) -> Result<Vec<DashboardEntry>>;

    fn fetch_top_exemplars(&self, feature: &FeatureRef, k: usize) -> Result<Vec<Exemplar>> {
        select_top_exemplars(feature, self.dashboard(feature)?, k)
    }
}

/// One corpus text with its per-token activations, as stored on a dashboard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DashboardEntry {
    pub text: String,
    pub tokens: Vec<String>,
    pub activations: Vec<f64>,
}

impl DashboardEntry {
    pub fn to_profile(&self, feature: &FeatureRef) -> Result<ActivationProfile> {
        ActivationProfile::new(feature.clone(), self.tokens.clone(), self.activations.clone())
    }

    pub fn from_profile(text: impl Into<String>, profile: &ActivationProfile) -> Self {
        Self {
            text: text.into(),
            tokens: profile.tokens.clone(),
            activations: profile.activations.clone(),
        }
    }
}

/// Reads a dashboard fixture: a JSON list of `{text, tokens, activations}`.
pub fn load_dashboard(path: &Path) -> Result<Vec<DashboardEntry>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Picks the `k` entries with the highest peak activation, descending.
/// Ties keep their input order.
pub fn select_top_exemplars(
    feature: &FeatureRef,
    entries: Vec<DashboardEntry>,
    k: usize,
) -> Result<Vec<Exemplar>> {
    if k == 0 {
        return Err(Error::input("k must be >= 1"));
    }
    if entries.is_empty() {
        return Err(Error::NotFound(format!("no exemplars recorded for {feature}")));
    }
    if entries.len() < k {
        return Err(Error::InsufficientData(format!(
            "{feature} has {} exemplars, {k} requested",
            entries.len()
        )));
    }
    let mut scored = entries
        .into_iter()
        .map(|e| {
            let profile = e.to_profile(feature)?;
            Ok((e.text, profile))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.max_activation.total_cmp(&a.1.max_activation));
    Ok(scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (text, profile))| Exemplar {
            text,
            profile,
            rank: i + 1,
        })
        .collect())
}

/// Largest peak activation among the exemplars; the reference scale for
/// acceptance gating and evaluation thresholds.
pub fn exemplar_max(exemplars: &[Exemplar]) -> f64 {
    exemplars
        .iter()
        .map(|e| e.profile.max_activation)
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(text: &str, peak: f64) -> DashboardEntry {
        DashboardEntry {
            text: text.into(),
            tokens: vec!["a".into(), "b".into()],
            activations: vec![peak / 2.0, peak],
        }
    }

    #[test]
    fn top_ten_of_twenty_descending() {
        let f = FeatureRef::toy(0);
        let entries: Vec<_> = (0..20).map(|i| entry(&format!("t{i}"), ((i * 7) % 20) as f64)).collect();
        let ex = select_top_exemplars(&f, entries, DEFAULT_TOP_K).unwrap();
        assert_eq!(ex.len(), 10);
        let peaks: Vec<f64> = ex.iter().map(|e| e.profile.max_activation).collect();
        assert_eq!(peaks, (10..20).rev().map(f64::from).collect::<Vec<_>>());
        assert_eq!(ex.iter().map(|e| e.rank).collect::<Vec<_>>(), (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn errors() {
        let f = FeatureRef::toy(0);
        assert!(matches!(select_top_exemplars(&f, vec![], 3), Err(Error::NotFound(_))));
        assert!(matches!(
            select_top_exemplars(&f, vec![entry("a", 1.0)], 3),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(select_top_exemplars(&f, vec![entry("a", 1.0)], 0), Err(Error::Input(_))));
    }

    #[test]
    fn default_top_k_is_ten() {
        assert_eq!(DEFAULT_TOP_K, 10);
    }
}
