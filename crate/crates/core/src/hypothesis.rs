use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::ActivationProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Status {
    Active,
    Accepted,
    Rejected,
}

impl Status {
    pub fn is_terminal(self) -> bool {
        !matches!(self, Status::Active)
    }
}

/// A candidate explanation under test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub id: String,
    pub text: String,
    pub status: Status,
    pub consecutive_failures: u32,
    pub created_turn: u32,
}

impl Hypothesis {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            status: Status::Active,
            consecutive_failures: 0,
            created_turn: 0,
        }
    }

    pub fn is_active(&self) -> bool {
        self.status == Status::Active
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VerdictKind {
    Accept,
    Reject,
    Refine,
    Refute,
}

impl VerdictKind {
    pub fn keyword(self) -> &'static str {
        match self {
            VerdictKind::Accept => "ACCEPT",
            VerdictKind::Reject => "REJECT",
            VerdictKind::Refine => "REFINE",
            VerdictKind::Refute => "REFUTE",
        }
    }

    pub fn from_keyword(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ACCEPT" => Some(VerdictKind::Accept),
            "REJECT" => Some(VerdictKind::Reject),
            "REFINE" => Some(VerdictKind::Refine),
            "REFUTE" => Some(VerdictKind::Refute),
            _ => None,
        }
    }
}

impl fmt::Display for VerdictKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

/// The analyzer's call on one test. `refined_text` is present exactly for
/// `Refine`, `next_test_hint` exactly for `Refute`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub kind: VerdictKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_test_hint: Option<String>,
    pub rationale: String,
}

impl Verdict {
    pub fn accept(rationale: impl Into<String>) -> Self {
        Self::plain(VerdictKind::Accept, rationale)
    }

    pub fn reject(rationale: impl Into<String>) -> Self {
        Self::plain(VerdictKind::Reject, rationale)
    }

    pub fn refine(refined: impl Into<String>, rationale: impl Into<String>) -> Self {
        Self {
            kind: VerdictKind::Refine,
            refined_text: Some(refined.into()),
            next_test_hint: None,
            rationale: rationale.into(),
        }
    }

    pub fn refute(hint: impl Into<String>, rationale: impl Into<String>) -> Self {
        Self {
            kind: VerdictKind::Refute,
            refined_text: None,
            next_test_hint: Some(hint.into()),
            rationale: rationale.into(),
        }
    }

    fn plain(kind: VerdictKind, rationale: impl Into<String>) -> Self {
        Self {
            kind,
            refined_text: None,
            next_test_hint: None,
            rationale: rationale.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonblank = |o: &Option<String>| o.as_deref().is_some_and(|s| !s.trim().is_empty());
        match self.kind {
            VerdictKind::Refine if !nonblank(&self.refined_text) => {
                Err(Error::protocol("REFINE verdict without refined text"))
            }
            VerdictKind::Refute if !nonblank(&self.next_test_hint) => {
                Err(Error::protocol("REFUTE verdict without a next-test hint"))
            }
            VerdictKind::Refine if self.next_test_hint.is_some() => {
                Err(Error::protocol("only REFUTE carries a next-test hint"))
            }
            VerdictKind::Refute if self.refined_text.is_some() => {
                Err(Error::protocol("only REFINE carries refined text"))
            }
            VerdictKind::Accept | VerdictKind::Reject
                if self.refined_text.is_some() || self.next_test_hint.is_some() =>
            {
                Err(Error::protocol(format!("{} carries conditional fields", self.kind)))
            }
            _ => Ok(()),
        }
    }
}

/// One (hypothesis, test text, activation) observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub id: String,
    pub turn: u32,
    pub hypothesis_id: String,
    /// Hypothesis text at the time the test ran.
    pub hypothesis_text: String,
    pub test_text: String,
    pub profile: ActivationProfile,
    /// Verdict as proposed by the analyzer, before quantitative gating.
    pub verdict: Verdict,
    /// Status of the hypothesis after this record was applied.
    pub status_after: Status,
    /// Audit trail of gate decisions applied on top of the verdict.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub gate_note: String,
}

impl EvidenceRecord {
    pub fn make_id(turn: u32, hypothesis_id: &str) -> String {
        format!("T{turn}-{hypothesis_id}")
    }
}
