use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ActivationBackend, DashboardEntry};
use crate::error::{Error, Result};
use crate::profile::{ActivationProfile, FeatureRef};
use crate::transport::{call_json, HttpRequest, Transport};

/// Body of `POST /api/activation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRequest {
    pub model_id: String,
    pub sae_id: String,
    pub layer: u32,
    pub feature_index: u32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationResponse {
    pub tokens: Vec<String>,
    pub activations: Vec<f64>,
}

/// Body returned by `GET /api/features/{model}/{sae}/{layer}/{index}/exemplars`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarsResponse {
    pub exemplars: Vec<DashboardEntry>,
}

pub const ACTIVATION_PATH: &str = "/api/activation";

pub fn exemplars_path(f: &FeatureRef) -> String {
    format!(
        "/api/features/{}/{}/{}/{}/exemplars",
        f.model_id, f.sae_id, f.layer, f.feature_index
    )
}

pub struct RemoteBackend {
    transport: Arc<dyn Transport>,
}

impl RemoteBackend {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        Self { transport }
    }
}

impl ActivationBackend for RemoteBackend {
    fn measure(&self, feature: &FeatureRef, text: &str) -> Result<ActivationProfile> {
        if text.trim().is_empty() {
            return Err(Error::input("cannot measure empty text"));
        }
        let body = serde_json::to_value(ActivationRequest {
            model_id: feature.model_id.clone(),
            sae_id: feature.sae_id.clone(),
            layer: feature.layer,
            feature_index: feature.feature_index,
            text: text.to_string(),
        })?;
        let value = call_json(self.transport.as_ref(), &HttpRequest::post(ACTIVATION_PATH, body))?;
        let resp: ActivationResponse = serde_json::from_value(value)
            .map_err(|e| Error::transport(format!("malformed activation response: {e}"), false))?;
        ActivationProfile::new(feature.clone(), resp.tokens, resp.activations)
    }

    fn dashboard(&self, feature: &FeatureRef) -> Result<Vec<DashboardEntry>> {
        let value = call_json(self.transport.as_ref(), &HttpRequest::get(exemplars_path(feature)))?;
        let resp: ExemplarsResponse = serde_json::from_value(value)
            .map_err(|e| Error::transport(format!("malformed exemplars response: {e}"), false))?;
        Ok(resp.exemplars)
    }
}
