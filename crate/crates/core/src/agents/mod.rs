//! The four LLM roles: explainer, designer, analyzer and reviewer.
//!
//! Each role renders its template, calls a [`LlmClient`], and parses the
//! structured reply. A malformed reply gets one reprompt that quotes the
//! parse error back to the model; a second failure is a protocol error.

pub mod llm;
pub mod mock;
pub mod openai;
pub mod parse;
pub mod prompts;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypothesis::{EvidenceRecord, Hypothesis, Status, Verdict};
use crate::profile::{ActivationProfile, Exemplar, FeatureRef};
use llm::{ChatMessage, ChatRequest, LlmClient};
use parse::{DesignedTest, ReviewerDecision};
use prompts::{template, TemplateName, SYSTEM_PROMPT};

pub const EXPLAINER_TEMPERATURE: f64 = 0.7;
pub const DESIGNER_TEMPERATURE: f64 = 0.7;
pub const ANALYZER_TEMPERATURE: f64 = 0.0;
pub const REVIEWER_TEMPERATURE: f64 = 0.0;

/// Reprompts allowed after a malformed reply.
pub const REPROMPTS: usize = 1;

/// Review rounds before the reviewer must conclude.
pub const MAX_REVIEW_ROUNDS: u32 = 3;

/// Marker rendered in the designer prompt on the first turn.
pub const NO_EVIDENCE_MARKER: &str = "(no prior evidence)";

const EVIDENCE_SUMMARY_LIMIT: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Design,
    Analyze,
    Review,
    Generate,
    Simulate,
}

/// Where a prompt was issued from; used to order the audit log.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CallCtx {
    pub turn: u32,
    pub stage: Stage,
    pub scope: String,
}

impl CallCtx {
    pub fn new(stage: Stage, turn: u32, scope: impl Into<String>) -> Self {
        Self {
            turn,
            stage,
            scope: scope.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    #[serde(flatten)]
    pub ctx: CallCtx,
    pub attempt: u32,
    pub messages: Vec<ChatMessage>,
    pub completion: String,
}

/// Every prompt and completion issued during a run.
#[derive(Debug, Default)]
pub struct PromptLog {
    records: Mutex<Vec<PromptRecord>>,
}

impl PromptLog {
    pub fn push(&self, rec: PromptRecord) {
        self.records.lock().unwrap().push(rec);
    }

    /// Records in a deterministic order independent of thread scheduling.
    pub fn sorted(&self) -> Vec<PromptRecord> {
        let mut v = self.records.lock().unwrap().clone();
        v.sort_by(|a, b| {
            (&a.ctx, a.attempt)
                .cmp(&(&b.ctx, b.attempt))
                .then_with(|| a.completion.cmp(&b.completion))
        });
        v
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sends `prompt`, parses the reply, and reprompts on protocol errors.
pub fn call_structured<T>(
    llm: &dyn LlmClient,
    log: &PromptLog,
    ctx: &CallCtx,
    prompt: String,
    temperature: f64,
    parse: impl Fn(&str) -> Result<T>,
) -> Result<T> {
    let mut messages = vec![ChatMessage::system(SYSTEM_PROMPT), ChatMessage::user(prompt)];
    let mut last_err = None;
    for attempt in 0..=REPROMPTS {
        let req = ChatRequest::new(messages.clone(), temperature);
        let resp = llm.complete(&req)?;
        log.push(PromptRecord {
            ctx: ctx.clone(),
            attempt: attempt as u32,
            messages: messages.clone(),
            completion: resp.text.clone(),
        });
        match parse(&resp.text) {
            Ok(v) => return Ok(v),
            Err(Error::Protocol(reason)) => {
                tracing::debug!(?ctx, attempt, %reason, "malformed agent reply");
                messages.push(ChatMessage::assistant(resp.text));
                messages.push(ChatMessage::user(format!(
                    "Your previous reply did not follow the required format: {reason}. \
                     Reply again using exactly the required output format."
                )));
                last_err = Some(Error::Protocol(reason));
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::protocol("no reply")))
}

/// LLM handles for each role. By default all roles share one client.
#[derive(Clone)]
pub struct AgentSet {
    pub explainer: Arc<dyn LlmClient>,
    pub designer: Arc<dyn LlmClient>,
    pub analyzer: Arc<dyn LlmClient>,
    pub reviewer: Arc<dyn LlmClient>,
    pub log: Arc<PromptLog>,
}

impl AgentSet {
    pub fn shared(llm: Arc<dyn LlmClient>) -> Self {
        Self {
            explainer: llm.clone(),
            designer: llm.clone(),
            analyzer: llm.clone(),
            reviewer: llm,
            log: Arc::new(PromptLog::default()),
        }
    }

    pub fn generate_initial_hypotheses(
        &self,
        exemplars: &[Exemplar],
        n: usize,
    ) -> Result<Vec<Hypothesis>> {
        if n == 0 {
            return Err(Error::input("need at least one hypothesis"));
        }
        if exemplars.is_empty() {
            return Err(Error::input("no exemplars to explain"));
        }
        let mut b = BTreeMap::new();
        b.insert("exemplars_summary", exemplars_summary(exemplars));
        b.insert("n_hypotheses", n.to_string());
        b.insert("hypothesis_slots", hypothesis_slots(n));
        let prompt = template(TemplateName::Init).render(&b)?;
        let parsed = call_structured(
            self.explainer.as_ref(),
            &self.log,
            &CallCtx::new(Stage::Init, 0, ""),
            prompt,
            EXPLAINER_TEMPERATURE,
            |out| {
                let h = parse::parse_hypotheses(out);
                if h.len() < n {
                    Err(Error::protocol(format!(
                        "expected {n} 'Hypothesis_<number>:' lines, found {}",
                        h.len()
                    )))
                } else {
                    Ok(h)
                }
            },
        )?;
        Ok(parsed
            .into_iter()
            .take(n)
            .enumerate()
            .map(|(i, (_, text))| Hypothesis::new(format!("H{}", i + 1), text))
            .collect())
    }

    pub fn design_test_text(
        &self,
        h: &Hypothesis,
        evidence: &[EvidenceRecord],
        refute_hint: Option<&str>,
        turn: u32,
    ) -> Result<DesignedTest> {
        if !h.is_active() {
            return Err(Error::input(format!("{} is not active", h.id)));
        }
        let mut b = BTreeMap::new();
        b.insert("hypothesis_id", h.id.clone());
        b.insert("hypothesis", h.text.clone());
        b.insert("turn", turn.to_string());
        b.insert("evidence_summary", evidence_summary(evidence));
        b.insert("refute_hint", refute_hint.unwrap_or("(none)").to_string());
        let prompt = template(TemplateName::Test).render(&b)?;
        call_structured(
            self.designer.as_ref(),
            &self.log,
            &CallCtx::new(Stage::Design, turn, &h.id),
            prompt,
            DESIGNER_TEMPERATURE,
            parse::parse_designed_test,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn analyze_activation(
        &self,
        h: &Hypothesis,
        test: &str,
        prediction: Option<&str>,
        profile: &ActivationProfile,
        exemplar_max: f64,
        turn: u32,
    ) -> Result<Verdict> {
        if profile.tokens.is_empty() {
            return Err(Error::input("empty activation profile"));
        }
        let mut b = BTreeMap::new();
        b.insert("hypothesis_id", h.id.clone());
        b.insert("hypothesis", h.text.clone());
        b.insert("test_text", test.to_string());
        b.insert("prediction", prediction.unwrap_or("(none given)").to_string());
        b.insert("token_activations", token_listing(profile));
        b.insert("peak", format!("{:.3}", profile.max_activation));
        b.insert("exemplar_max", format!("{exemplar_max:.3}"));
        let prompt = template(TemplateName::Analyze).render(&b)?;
        call_structured(
            self.analyzer.as_ref(),
            &self.log,
            &CallCtx::new(Stage::Analyze, turn, &h.id),
            prompt,
            ANALYZER_TEMPERATURE,
            parse::parse_verdict,
        )
    }

    /// One review round. A reply with no decision line after the reprompt is
    /// treated as `NO` so that synthesis can still proceed.
    pub fn review(
        &self,
        hypotheses: &[Hypothesis],
        ledger: &[EvidenceRecord],
        round: u32,
        turn: u32,
    ) -> Result<ReviewerDecision> {
        let mut b = BTreeMap::new();
        b.insert("hypotheses_summary", hypotheses_summary(hypotheses, ledger));
        b.insert("review_round", round.to_string());
        b.insert("max_review_rounds", MAX_REVIEW_ROUNDS.to_string());
        let prompt = template(TemplateName::Synthesize).render(&b)?;
        let res = call_structured(
            self.reviewer.as_ref(),
            &self.log,
            &CallCtx::new(Stage::Review, turn, format!("round{round}")),
            prompt,
            REVIEWER_TEMPERATURE,
            parse::parse_review,
        );
        match res {
            Err(Error::Protocol(reason)) => {
                tracing::warn!(%reason, "reviewer reply unusable, concluding");
                Ok(ReviewerDecision {
                    need_more_testing: false,
                    suggested_tests: vec![],
                    summary: String::new(),
                    final_explanation: None,
                })
            }
            other => other,
        }
    }

    /// Final review round plus synthesis of the explanation.
    pub fn review_and_synthesize(
        &self,
        feature: &FeatureRef,
        hypotheses: &[Hypothesis],
        ledger: &[EvidenceRecord],
        round: u32,
        turn: u32,
    ) -> Result<(ReviewerDecision, FinalExplanation)> {
        let decision = self.review(hypotheses, ledger, round.min(MAX_REVIEW_ROUNDS), turn)?;
        let fin = synthesize(feature, hypotheses, ledger, &decision, round);
        Ok((decision, fin))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplanationStatus {
    Resolved,
    Unresolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Facet {
    pub hypothesis_id: String,
    pub text: String,
    /// Ids of the ledger records supporting this facet, strongest first.
    pub evidence_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalExplanation {
    pub feature: FeatureRef,
    pub facets: Vec<Facet>,
    pub status: ExplanationStatus,
    pub summary: String,
    pub review_rounds: u32,
}

const FACET_EVIDENCE_LIMIT: usize = 3;

/// One facet per accepted hypothesis, citing its highest-activation tests.
pub fn synthesize(
    feature: &FeatureRef,
    hypotheses: &[Hypothesis],
    ledger: &[EvidenceRecord],
    decision: &ReviewerDecision,
    review_rounds: u32,
) -> FinalExplanation {
    let facets: Vec<Facet> = hypotheses
        .iter()
        .filter(|h| h.status == Status::Accepted)
        .map(|h| {
            let mut recs: Vec<&EvidenceRecord> =
                ledger.iter().filter(|r| r.hypothesis_id == h.id).collect();
            recs.sort_by(|a, b| {
                b.profile
                    .max_activation
                    .total_cmp(&a.profile.max_activation)
                    .then(a.turn.cmp(&b.turn))
            });
            Facet {
                hypothesis_id: h.id.clone(),
                text: h.text.clone(),
                evidence_ids: recs
                    .iter()
                    .take(FACET_EVIDENCE_LIMIT)
                    .map(|r| r.id.clone())
                    .collect(),
            }
        })
        .collect();
    let status = if facets.is_empty() {
        ExplanationStatus::Unresolved
    } else {
        ExplanationStatus::Resolved
    };
    let summary = match (&decision.final_explanation, status) {
        (_, ExplanationStatus::Unresolved) => {
            "unresolved: no hypothesis was accepted".to_string()
        }
        (Some(text), _) => text.clone(),
        (None, _) => facets
            .iter()
            .map(|f| f.text.as_str())
            .collect::<Vec<_>>()
            .join("; "),
    };
    FinalExplanation {
        feature: feature.clone(),
        facets,
        status,
        summary,
        review_rounds,
    }
}

fn quote(s: &str) -> String {
    format!("{s:?}")
}

pub fn exemplars_summary(exemplars: &[Exemplar]) -> String {
    let mut out = String::new();
    for ex in exemplars {
        let p = &ex.profile;
        let mut top: Vec<(usize, f64)> = p
            .activations
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, a)| *a > 0.0)
            .collect();
        top.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let peaks = top
            .iter()
            .take(3)
            .map(|(i, a)| format!("{}={a:.2}", quote(&p.tokens[*i])))
            .collect::<Vec<_>>()
            .join(", ");
        out.push_str(&format!(
            "#{} max={:.2}\n  text: {}\n  peak tokens: {}\n",
            ex.rank,
            p.max_activation,
            ex.text,
            if peaks.is_empty() { "(none)".to_string() } else { peaks }
        ));
    }
    out
}

fn hypothesis_slots(n: usize) -> String {
    let negative = if n >= 2 { Some(n.min(3)) } else { None };
    (1..=n)
        .map(|i| {
            let hint = match i {
                _ if Some(i) == negative => {
                    "<negative control: a pattern this feature should NOT respond to>"
                }
                1 => "<specific, testable claim grounded in the exemplars>",
                2 => "<an alternative account of the same exemplars>",
                _ => "<a hypothesis covering a different aspect>",
            };
            format!("Hypothesis_{i}: {hint}")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn evidence_summary(evidence: &[EvidenceRecord]) -> String {
    if evidence.is_empty() {
        return NO_EVIDENCE_MARKER.to_string();
    }
    let skip = evidence.len().saturating_sub(EVIDENCE_SUMMARY_LIMIT);
    evidence[skip..]
        .iter()
        .map(|r| {
            let p = &r.profile;
            format!(
                "- [turn {}] {} {} -> peak {:.2} on {} ({})",
                r.turn,
                r.hypothesis_id,
                quote(&r.test_text),
                p.max_activation,
                quote(&p.tokens[p.peak_index()]),
                r.verdict.kind
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn token_listing(p: &ActivationProfile) -> String {
    p.tokens
        .iter()
        .zip(&p.activations)
        .map(|(t, a)| format!("{} : {a:.3}", quote(t)))
        .collect::<Vec<_>>()
        .join("\n")
}

fn hypotheses_summary(hypotheses: &[Hypothesis], ledger: &[EvidenceRecord]) -> String {
    let mut out = String::new();
    for h in hypotheses {
        out.push_str(&format!("{} [{:?}] {}\n", h.id, h.status, h.text));
        let tests: Vec<&EvidenceRecord> = ledger.iter().filter(|r| r.hypothesis_id == h.id).collect();
        if tests.is_empty() {
            out.push_str("  (not tested)\n");
        }
        for r in tests {
            out.push_str(&format!(
                "  turn {}: {} -> peak {:.2}, verdict {}\n",
                r.turn,
                quote(&r.test_text),
                r.profile.max_activation,
                r.verdict.kind
            ));
        }
    }
    out
}
