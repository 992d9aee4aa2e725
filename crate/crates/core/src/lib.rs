//! Agentic explanation of sparse-autoencoder features.
//!
//! A set of LLM agents proposes hypotheses about what a feature detects,
//! designs test sentences, reads the measured activations and accepts,
//! rejects, refines or re-probes each hypothesis until the evidence settles.
//! Explanations are then scored by generative and predictive accuracy.
//!
//! The crate runs fully offline against a planted toy model ([`toy`],
//! [`backend::ToyBackend`]) with scripted agents ([`agents::mock`]), or
//! against HTTP services through [`transport`], with record/replay cassettes.

pub mod agents;
pub mod backend;
pub mod demo;
pub mod engine;
pub mod error;
pub mod eval;
pub mod hypothesis;
pub mod pipeline;
pub mod profile;
pub mod report;
pub mod sae;
pub mod stub;
pub mod toy;
pub mod transport;

pub use agents::{AgentSet, ExplanationStatus, Facet, FinalExplanation};
pub use backend::{ActivationBackend, DashboardEntry, RemoteBackend, ToyBackend, ToyWorld};
pub use engine::{run_feature, Ledger, LoopConfig};
pub use error::{Error, Result};
pub use hypothesis::{EvidenceRecord, Hypothesis, Status, Verdict, VerdictKind};
pub use profile::{ActivationProfile, Exemplar, FeatureRef};
pub use sae::{decode, encode, sae_loss, SaeParams};
