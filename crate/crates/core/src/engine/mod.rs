//! Multi-turn hypothesis testing loop.
//!
//! Each turn, every active hypothesis gets one test sentence (from the
//! designer, or from a reviewer suggestion), the sentence is measured, the
//! analyzer proposes a verdict, and the engine applies it after
//! quantitative gating. The loop ends when no hypothesis is active or the
//! turn budget is spent; the reviewer may then queue extra tests, which run
//! as further turns, for at most [`MAX_REVIEW_ROUNDS`] rounds.

pub mod ledger;

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::agents::parse::{DesignedTest, ReviewerDecision};
use crate::agents::{synthesize, AgentSet, FinalExplanation, MAX_REVIEW_ROUNDS};
use crate::backend::{exemplar_max, ActivationBackend};
use crate::error::{Error, Result};
use crate::hypothesis::{EvidenceRecord, Hypothesis, Status, Verdict, VerdictKind};
use crate::profile::{ActivationProfile, Exemplar, FeatureRef};
pub use ledger::Ledger;

/// Rationale attached to verdicts synthesized for unparseable agent output.
pub const PARSE_FAILURE: &str = "parse-failure";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub n_initial: usize,
    pub top_k: usize,
    pub max_turns: u32,
    /// Accept requires peak >= strong_frac * exemplar_max.
    pub strong_frac: f64,
    /// A test fails when peak < meaningful_frac * exemplar_max.
    pub meaningful_frac: f64,
    pub reject_after_failures: u32,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            n_initial: 4,
            top_k: 10,
            max_turns: 8,
            strong_frac: 0.5,
            meaningful_frac: 0.1,
            reject_after_failures: 2,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.meaningful_frac
            && self.meaningful_frac < self.strong_frac
            && self.strong_frac <= 1.0)
        {
            return Err(Error::Config(format!(
                "need 0 < meaningful_frac ({}) < strong_frac ({}) <= 1",
                self.meaningful_frac, self.strong_frac
            )));
        }
        if self.n_initial == 0 || self.top_k == 0 || self.max_turns == 0 || self.reject_after_failures == 0 {
            return Err(Error::Config("loop counts must all be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub hypothesis: Hypothesis,
    /// Effective verdict after gating.
    pub effective: VerdictKind,
    /// Empty unless a gate changed the analyzer's verdict.
    pub gate_note: String,
}

/// Applies an analyzer verdict to an active hypothesis.
///
/// The verdict is gated: `Accept` below `strong_frac * exemplar_max`
/// becomes `Refine` with the text unchanged, and a hypothesis that reaches
/// `reject_after_failures` consecutive weak tests is rejected whatever the
/// analyzer said (short of an accepted `Accept`).
pub fn transition(
    h: &Hypothesis,
    profile: &ActivationProfile,
    verdict: &Verdict,
    cfg: &LoopConfig,
    exemplar_max: f64,
) -> Result<Transition> {
    if !h.is_active() {
        return Err(Error::input(format!("{} is {:?}, not active", h.id, h.status)));
    }
    verdict.validate()?;
    let peak = profile.max_activation;
    let strong = cfg.strong_frac * exemplar_max;
    let meaningful = cfg.meaningful_frac * exemplar_max;
    let failing = peak < meaningful;
    let mut notes = Vec::new();
    let mut kind = verdict.kind;
    if kind == VerdictKind::Accept && peak < strong {
        kind = VerdictKind::Refine;
        notes.push(format!(
            "ACCEPT downgraded to REFINE: peak {peak:.4} < strong threshold {strong:.4}"
        ));
    }
    let mut next = h.clone();
    next.consecutive_failures = if failing { h.consecutive_failures + 1 } else { 0 };
    match kind {
        VerdictKind::Accept => next.status = Status::Accepted,
        VerdictKind::Reject => next.status = Status::Rejected,
        VerdictKind::Refine => {
            if verdict.kind == VerdictKind::Refine {
                next.text = verdict.refined_text.clone().unwrap_or_default();
            }
        }
        VerdictKind::Refute => {}
    }
    if next.status == Status::Active && next.consecutive_failures >= cfg.reject_after_failures {
        notes.push(format!(
            "{kind} overridden to REJECT after {} consecutive tests below {meaningful:.4}",
            next.consecutive_failures
        ));
        next.status = Status::Rejected;
        next.text = h.text.clone();
        kind = VerdictKind::Reject;
    }
    Ok(Transition {
        hypothesis: next,
        effective: kind,
        gate_note: notes.join("; "),
    })
}

/// Appends one record to the ledger, enforcing turn order.
pub fn append_evidence(mut ledger: Ledger, record: EvidenceRecord) -> Result<Ledger> {
    ledger.append(record)?;
    Ok(ledger)
}

/// Everything needed to continue a run after the last completed turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub feature: FeatureRef,
    pub turn: u32,
    pub exemplar_max: f64,
    pub hypotheses: Vec<Hypothesis>,
    #[serde(default)]
    pub refute_hints: BTreeMap<String, String>,
    #[serde(default)]
    pub pending_tests: BTreeMap<String, VecDeque<String>>,
    #[serde(default)]
    pub reviews: Vec<ReviewerDecision>,
    #[serde(default)]
    pub protocol_errors: Vec<String>,
    pub ledger_len: usize,
    #[serde(default)]
    pub finished: bool,
}

impl RunState {
    fn any_active(&self) -> bool {
        self.hypotheses.iter().any(Hypothesis::is_active)
    }

    fn any_pending(&self) -> bool {
        self.pending_tests.values().any(|q| !q.is_empty())
    }
}

#[derive(Debug, Clone)]
pub struct FeatureOutcome {
    pub explanation: FinalExplanation,
    pub ledger: Ledger,
    pub state: RunState,
    pub exemplars: Vec<Exemplar>,
}

/// Called after initialization, after every turn and after every review
/// round, with the records added since the previous call.
pub trait Checkpoint {
    fn save(&mut self, state: &RunState, new_records: &[EvidenceRecord]) -> Result<()>;
}

impl<F> Checkpoint for F
where
    F: FnMut(&RunState, &[EvidenceRecord]) -> Result<()>,
{
    fn save(&mut self, state: &RunState, new_records: &[EvidenceRecord]) -> Result<()> {
        self(state, new_records)
    }
}

struct NoCheckpoint;

impl Checkpoint for NoCheckpoint {
    fn save(&mut self, _: &RunState, _: &[EvidenceRecord]) -> Result<()> {
        Ok(())
    }
}

pub fn run_feature(
    feature: &FeatureRef,
    cfg: &LoopConfig,
    agents: &AgentSet,
    backend: &dyn ActivationBackend,
) -> Result<FeatureOutcome> {
    run_feature_resumable(feature, cfg, agents, backend, None, &mut NoCheckpoint)
}

/// Runs (or resumes) the loop for one feature. `resume` carries a saved
/// state and the ledger recorded up to it.
pub fn run_feature_resumable(
    feature: &FeatureRef,
    cfg: &LoopConfig,
    agents: &AgentSet,
    backend: &dyn ActivationBackend,
    resume: Option<(RunState, Ledger)>,
    checkpoint: &mut dyn Checkpoint,
) -> Result<FeatureOutcome> {
    cfg.validate()?;
    let exemplars = backend.fetch_top_exemplars(feature, cfg.top_k)?;
    let (mut state, mut ledger) = match resume {
        Some((state, mut ledger)) => {
            if &state.feature != feature {
                return Err(Error::input(format!(
                    "resume state is for {}, not {feature}",
                    state.feature
                )));
            }
            ledger.truncate(state.ledger_len);
            (state, ledger)
        }
        None => {
            let hypotheses = agents.generate_initial_hypotheses(&exemplars, cfg.n_initial)?;
            let state = RunState {
                feature: feature.clone(),
                turn: 0,
                exemplar_max: exemplar_max(&exemplars),
                hypotheses,
                refute_hints: BTreeMap::new(),
                pending_tests: BTreeMap::new(),
                reviews: Vec::new(),
                protocol_errors: Vec::new(),
                ledger_len: 0,
                finished: false,
            };
            checkpoint.save(&state, &[])?;
            (state, Ledger::new())
        }
    };

    while !state.finished {
        while state.turn < cfg.max_turns && (state.any_active() || state.any_pending()) {
            let before = ledger.len();
            run_turn(&mut state, &mut ledger, feature, cfg, agents, backend)?;
            checkpoint.save(&state, &ledger.records()[before..])?;
        }
        let round = state.reviews.len() as u32 + 1;
        let decision = agents.review(&state.hypotheses, ledger.records(), round, state.turn)?;
        let wants_more = decision.need_more_testing
            && round < MAX_REVIEW_ROUNDS
            && state.turn < cfg.max_turns;
        if wants_more {
            let mut queued = 0;
            for t in &decision.suggested_tests {
                if state.hypotheses.iter().any(|h| h.id == t.hypothesis_id) {
                    state
                        .pending_tests
                        .entry(t.hypothesis_id.clone())
                        .or_default()
                        .push_back(t.sentence.clone());
                    queued += 1;
                } else {
                    tracing::warn!(id = %t.hypothesis_id, "reviewer suggested a test for an unknown hypothesis");
                }
            }
            state.finished = queued == 0;
        } else {
            state.finished = true;
        }
        state.reviews.push(decision);
        checkpoint.save(&state, &[])?;
    }

    let last = state.reviews.last().cloned().unwrap_or(ReviewerDecision {
        need_more_testing: false,
        suggested_tests: vec![],
        summary: String::new(),
        final_explanation: None,
    });
    let explanation = synthesize(
        feature,
        &state.hypotheses,
        ledger.records(),
        &last,
        state.reviews.len() as u32,
    );
    Ok(FeatureOutcome {
        explanation,
        ledger,
        state,
        exemplars,
    })
}

enum TestSource {
    Reviewer(String),
    Designer(Option<String>),
}

enum Probe {
    Measured {
        test: DesignedTest,
        profile: ActivationProfile,
        verdict: Verdict,
    },
    DesignFailed(String),
}

fn probe(
    h: &Hypothesis,
    source: TestSource,
    turn: u32,
    exemplar_max: f64,
    feature: &FeatureRef,
    evidence: &[EvidenceRecord],
    agents: &AgentSet,
    backend: &dyn ActivationBackend,
) -> Result<Probe> {
    let test = match source {
        TestSource::Reviewer(sentence) => DesignedTest {
            sentence,
            prediction: None,
        },
        TestSource::Designer(hint) => {
            match agents.design_test_text(h, evidence, hint.as_deref(), turn) {
                Ok(t) => t,
                Err(Error::Protocol(reason)) => return Ok(Probe::DesignFailed(reason)),
                Err(e) => return Err(e),
            }
        }
    };
    let profile = backend.measure(feature, &test.sentence)?;
    let verdict = match agents.analyze_activation(
        h,
        &test.sentence,
        test.prediction.as_deref(),
        &profile,
        exemplar_max,
        turn,
    ) {
        Ok(v) => v,
        Err(Error::Protocol(reason)) => {
            tracing::warn!(hypothesis = %h.id, turn, %reason, "analyzer output unparseable");
            Verdict::reject(PARSE_FAILURE)
        }
        Err(e) => return Err(e),
    };
    Ok(Probe::Measured {
        test,
        profile,
        verdict,
    })
}

fn run_turn(
    state: &mut RunState,
    ledger: &mut Ledger,
    feature: &FeatureRef,
    cfg: &LoopConfig,
    agents: &AgentSet,
    backend: &dyn ActivationBackend,
) -> Result<()> {
    let turn = state.turn + 1;
    let mut jobs = Vec::new();
    for (idx, h) in state.hypotheses.iter().enumerate() {
        let queued = state.pending_tests.get_mut(&h.id).and_then(VecDeque::pop_front);
        let source = match queued {
            Some(sentence) => TestSource::Reviewer(sentence),
            None if h.is_active() => TestSource::Designer(state.refute_hints.get(&h.id).cloned()),
            None => continue,
        };
        jobs.push((idx, source));
    }
    state.pending_tests.retain(|_, q| !q.is_empty());

    let evidence = ledger.records();
    let hyps = &state.hypotheses;
    let exemplar_max = state.exemplar_max;
    let results: Vec<(usize, Result<Probe>)> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .into_iter()
            .map(|(idx, source)| {
                let h = &hyps[idx];
                let handle = s.spawn(move || {
                    probe(h, source, turn, exemplar_max, feature, evidence, agents, backend)
                });
                (idx, handle)
            })
            .collect();
        handles
            .into_iter()
            .map(|(idx, handle)| (idx, handle.join().expect("probe thread panicked")))
            .collect()
    });

    // Apply in hypothesis order so the ledger is independent of scheduling.
    for (idx, result) in results {
        let h = state.hypotheses[idx].clone();
        match result? {
            Probe::DesignFailed(reason) => {
                state.protocol_errors.push(format!("turn {turn} {}: designer: {reason}", h.id));
                if h.is_active() {
                    let hyp = &mut state.hypotheses[idx];
                    hyp.status = Status::Rejected;
                    state.refute_hints.remove(&h.id);
                }
            }
            Probe::Measured {
                test,
                profile,
                verdict,
            } => {
                if verdict.rationale == PARSE_FAILURE {
                    state.protocol_errors.push(format!("turn {turn} {}: analyzer: {PARSE_FAILURE}", h.id));
                }
                let (status_after, gate_note) = if h.is_active() {
                    let tr = transition(&h, &profile, &verdict, cfg, state.exemplar_max)?;
                    match (tr.effective, &verdict.next_test_hint) {
                        (VerdictKind::Refute, Some(hint)) => {
                            state.refute_hints.insert(h.id.clone(), hint.clone());
                        }
                        _ => {
                            state.refute_hints.remove(&h.id);
                        }
                    }
                    let status = tr.hypothesis.status;
                    state.hypotheses[idx] = tr.hypothesis;
                    (status, tr.gate_note)
                } else {
                    (h.status, "hypothesis already terminal; recorded only".to_string())
                };
                ledger.append(EvidenceRecord {
                    id: EvidenceRecord::make_id(turn, &h.id),
                    turn,
                    hypothesis_id: h.id.clone(),
                    hypothesis_text: h.text.clone(),
                    test_text: test.sentence,
                    profile,
                    verdict,
                    status_after,
                    gate_note,
                })?;
            }
        }
    }
    // A turn that only rejected hypotheses for design failures leaves no
    // evidence; keep its number free so ledger turns stay contiguous.
    if ledger.max_turn() == turn {
        state.turn = turn;
    }
    state.ledger_len = ledger.len();
    Ok(())
}
