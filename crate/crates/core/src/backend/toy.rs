use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ActivationBackend, DashboardEntry};
use crate::error::{Error, Result};
use crate::profile::{ActivationProfile, FeatureRef};
use crate::sae::SaeParams;
use crate::toy::{tokenize, toy_activations, ToyTargetModel};

/// Everything the offline backend needs, loadable from one JSON file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyWorld {
    pub model_id: String,
    pub sae_id: String,
    /// Layers this world answers for; empty means any.
    #[serde(default)]
    pub layers: Vec<u32>,
    pub sae: SaeParams,
    pub model: ToyTargetModel,
    /// Texts measured to build each feature's dashboard.
    #[serde(default)]
    pub corpus: Vec<String>,
    /// Recorded dashboards keyed by feature index; these take precedence
    /// over measuring the corpus.
    #[serde(default)]
    pub dashboards: BTreeMap<u32, Vec<DashboardEntry>>,
}

impl ToyWorld {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

pub struct ToyBackend {
    world: ToyWorld,
}

impl ToyBackend {
    pub fn new(world: ToyWorld) -> Result<Self> {
        world.sae.validate()?;
        if world.model.embed_dim != world.sae.d_model {
            return Err(Error::input("toy model embed_dim must equal SAE d_model"));
        }
        Ok(Self { world })
    }

    pub fn world(&self) -> &ToyWorld {
        &self.world
    }

    fn check(&self, feature: &FeatureRef) -> Result<()> {
        let w = &self.world;
        let layer_ok = w.layers.is_empty() || w.layers.contains(&feature.layer);
        if feature.model_id != w.model_id
            || feature.sae_id != w.sae_id
            || !layer_ok
            || feature.feature_index as usize >= w.sae.d_sae
        {
            return Err(Error::NotFound(format!("toy world has no feature {feature}")));
        }
        Ok(())
    }
}

impl ActivationBackend for ToyBackend {
    fn measure(&self, feature: &FeatureRef, text: &str) -> Result<ActivationProfile> {
        self.check(feature)?;
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::input("cannot measure empty text"));
        }
        let mut profile = toy_activations(
            &self.world.model,
            &self.world.sae,
            &tokens,
            feature.feature_index as usize,
        )?;
        profile.feature_ref = feature.clone();
        Ok(profile)
    }

    fn dashboard(&self, feature: &FeatureRef) -> Result<Vec<DashboardEntry>> {
        self.check(feature)?;
        if let Some(entries) = self.world.dashboards.get(&feature.feature_index) {
            return Ok(entries.clone());
        }
        self.world
            .corpus
            .iter()
            .map(|text| {
                let p = self.measure(feature, text)?;
                Ok(DashboardEntry::from_profile(text.clone(), &p))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{planted_fixture, PlantedFeature};

    fn world() -> ToyWorld {
        let (model, sae) =
            planted_fixture(8, 16, 6, 11, &[PlantedFeature::new(3, &[("can't", 6.0)])]).unwrap();
        ToyWorld {
            model_id: "toy-lm".into(),
            sae_id: "toy-sae".into(),
            layers: vec![3],
            sae,
            model,
            corpus: vec!["I can't go".into(), "We went".into(), "can't can't".into()],
            dashboards: BTreeMap::new(),
        }
    }

    #[test]
    fn measures_only_trigger_position() {
        let b = ToyBackend::new(world()).unwrap();
        let f = FeatureRef::new("toy-lm", "toy-sae", 3, 3);
        let p = b.measure(&f, "I can't go").unwrap();
        assert_eq!(p.tokens, vec!["I", "can't", "go"]);
        assert_eq!(p.feature_ref, f);
        let nonzero: Vec<usize> = (0..3).filter(|&i| p.activations[i] > 1e-6).collect();
        assert_eq!(nonzero, vec![1]);
        assert!(b.measure(&f, "nothing to see here").unwrap().max_activation < 1e-6);
    }

    #[test]
    fn unknown_feature_and_empty_text() {
        let b = ToyBackend::new(world()).unwrap();
        assert!(matches!(
            b.measure(&FeatureRef::new("other", "toy-sae", 3, 3), "x"),
            Err(Error::NotFound(_))
        ));
        assert!(matches!(
            b.measure(&FeatureRef::new("toy-lm", "toy-sae", 5, 3), "x"),
            Err(Error::NotFound(_))
        ));
        assert!(matches!(
            b.measure(&FeatureRef::new("toy-lm", "toy-sae", 3, 99), "x"),
            Err(Error::NotFound(_))
        ));
        assert!(matches!(
            b.measure(&FeatureRef::new("toy-lm", "toy-sae", 3, 3), "  "),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn world_json_round_trip() {
        let w = world();
        let s = serde_json::to_string(&w).unwrap();
        let back: ToyWorld = serde_json::from_str(&s).unwrap();
        let f = FeatureRef::new("toy-lm", "toy-sae", 3, 3);
        let a = ToyBackend::new(w).unwrap().measure(&f, "can't we").unwrap();
        let b = ToyBackend::new(back).unwrap().measure(&f, "can't we").unwrap();
        assert_eq!(a, b);
    }
}
