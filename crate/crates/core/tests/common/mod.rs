//! Oracles and run-invariant checks shared by the property and acceptance
//! targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use hypoprobe::agents::llm::{ChatRequest, ChatResponse, LlmClient};
use hypoprobe::agents::mock::ChaosLlm;
use hypoprobe::agents::{AgentSet, ExplanationStatus, MAX_REVIEW_ROUNDS};
use hypoprobe::engine::{run_feature_resumable, FeatureOutcome, RunState};
use hypoprobe::sae::Matrix;
use hypoprobe::{demo, EvidenceRecord, FeatureRef, LoopConfig, SaeParams, Status, ToyBackend, VerdictKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---- SAE oracle: plain index loops, no shared helpers with the crate ----

pub fn oracle_encode(p: &SaeParams, x: &[f64]) -> Vec<f64> {
    let mut f = vec![0.0; p.d_sae];
    for j in 0..p.d_sae {
        let mut z = p.enc_bias[j];
        for i in 0..p.d_model {
            z += p.enc_weights.get(j, i) * (x[i] - p.pre_bias[i]);
        }
        f[j] = if z > 0.0 { z } else { 0.0 };
    }
    f
}

pub fn oracle_decode(p: &SaeParams, f: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; p.d_model];
    for i in 0..p.d_model {
        let mut v = p.dec_bias[i];
        for j in 0..p.d_sae {
            v += p.dec_weights.get(i, j) * f[j];
        }
        x[i] = v;
    }
    x
}

pub fn oracle_loss(p: &SaeParams, x: &[f64]) -> f64 {
    let f = oracle_encode(p, x);
    let xh = oracle_decode(p, &f);
    let mut recon = 0.0;
    for i in 0..p.d_model {
        recon += (x[i] - xh[i]) * (x[i] - xh[i]);
    }
    let mut l1 = 0.0;
    for v in &f {
        l1 += v.abs();
    }
    recon + p.sparsity_coeff * l1
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Random SAE with `d_model <= 16`, `d_model <= d_sae <= 64`.
pub fn random_sae(rng: &mut ChaCha8Rng) -> SaeParams {
    let d_model = rng.random_range(1..=16);
    let d_sae = rng.random_range(d_model..=64);
    let mut p = SaeParams::zeros(d_model, d_sae);
    let mut fill = |m: &mut Matrix| {
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                m.set(r, c, rng.random_range(-2.0..2.0));
            }
        }
    };
    fill(&mut p.enc_weights);
    fill(&mut p.dec_weights);
    p.pre_bias = (0..d_model).map(|_| rng.random_range(-1.0..1.0)).collect();
    p.enc_bias = (0..d_sae).map(|_| rng.random_range(-1.0..1.0)).collect();
    p.dec_bias = (0..d_model).map(|_| rng.random_range(-1.0..1.0)).collect();
    p.sparsity_coeff = rng.random_range(0.0..1.0);
    p
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

// ---- Pearson oracle: mean product of z-scores ----

pub fn oracle_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let sd = |v: &[f64], m: f64| (v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n).sqrt();
    let (mx, my) = (mean(x), mean(y));
    let (sx, sy) = (sd(x, mx), sd(y, my));
    if sx == 0.0 || sy == 0.0 {
        return None;
    }
    let mut acc = 0.0;
    for i in 0..x.len() {
        acc += ((x[i] - mx) / sx) * ((y[i] - my) / sy);
    }
    Some(acc / n)
}

// ---- Loop runs ----

pub fn backend() -> &'static ToyBackend {
    static B: OnceLock<ToyBackend> = OnceLock::new();
    B.get_or_init(|| ToyBackend::new(demo::world().unwrap()).unwrap())
}

pub fn cant() -> FeatureRef {
    demo::feature(demo::CANT, 3)
}

pub struct Trace {
    pub outcome: FeatureOutcome,
    /// Every checkpoint, with the records it added.
    pub snapshots: Vec<(RunState, Vec<EvidenceRecord>)>,
}

pub fn run_traced(cfg: &LoopConfig, llm: Arc<dyn LlmClient>, feature: &FeatureRef) -> hypoprobe::Result<Trace> {
    let agents = AgentSet::shared(llm);
    let mut snapshots = Vec::new();
    let mut cp = |s: &RunState, r: &[EvidenceRecord]| -> hypoprobe::Result<()> {
        snapshots.push((s.clone(), r.to_vec()));
        Ok(())
    };
    let outcome = run_feature_resumable(feature, cfg, &agents, backend(), None, &mut cp)?;
    Ok(Trace { outcome, snapshots })
}

/// Random loop settings and a chaos agent for run `i`.
pub fn chaos_case(i: u64) -> (LoopConfig, Arc<dyn LlmClient>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ i);
    let cfg = LoopConfig {
        n_initial: rng.random_range(1..=5),
        max_turns: rng.random_range(1..=8),
        reject_after_failures: rng.random_range(1..=3),
        ..LoopConfig::default()
    };
    let garbage = [0.0, 0.1, 0.3, 0.8][rng.random_range(0..4)];
    (cfg, Arc::new(ChaosLlm::new(i, garbage)))
}

/// Checks the state-machine invariants of one traced run.
pub fn check_invariants(cfg: &LoopConfig, t: &Trace) -> Result<(), String> {
    let out = &t.outcome;
    let records = out.ledger.records();

    // Checkpoints only ever append.
    let appended: Vec<&EvidenceRecord> = t.snapshots.iter().flat_map(|(_, r)| r).collect();
    if appended.len() != records.len() || appended.iter().zip(records).any(|(a, b)| *a != b) {
        return Err("checkpointed records differ from the final ledger".into());
    }

    // Turns are contiguous from 1 and every turn adds evidence.
    let mut expected_turn = 0;
    for (state, added) in &t.snapshots {
        if added.is_empty() {
            continue;
        }
        expected_turn += 1;
        if added.iter().any(|r| r.turn != expected_turn) || state.turn != expected_turn {
            return Err(format!("turn {expected_turn} checkpoint has turns {:?}", added.iter().map(|r| r.turn).collect::<Vec<_>>()));
        }
    }
    if out.state.turn != expected_turn || out.ledger.max_turn() != expected_turn {
        return Err(format!("final turn {} but {expected_turn} evidence turns", out.state.turn));
    }

    // Termination within budget; anything still active used the whole budget.
    if out.state.turn > cfg.max_turns {
        return Err(format!("turn {} exceeds max_turns {}", out.state.turn, cfg.max_turns));
    }
    if out.state.hypotheses.iter().any(|h| h.is_active()) && out.state.turn != cfg.max_turns {
        return Err("active hypothesis left before the turn budget ran out".into());
    }
    if !out.state.finished || out.state.reviews.len() as u32 > MAX_REVIEW_ROUNDS {
        return Err(format!("{} review rounds, finished={}", out.state.reviews.len(), out.state.finished));
    }

    // Terminal states are absorbing.
    let mut terminal: BTreeMap<String, Status> = BTreeMap::new();
    for (state, _) in &t.snapshots {
        for h in &state.hypotheses {
            match terminal.get(&h.id) {
                Some(s) if *s != h.status => {
                    return Err(format!("{} left terminal state {s:?} for {:?}", h.id, h.status));
                }
                None if h.status.is_terminal() => {
                    terminal.insert(h.id.clone(), h.status);
                }
                _ => {}
            }
        }
    }
    let mut seen: BTreeMap<&str, Status> = BTreeMap::new();
    for r in records {
        if let Some(prev) = seen.get(r.hypothesis_id.as_str()) {
            if prev.is_terminal() && r.status_after != *prev {
                return Err(format!("{} moved {prev:?} -> {:?}", r.id, r.status_after));
            }
        }
        seen.insert(&r.hypothesis_id, r.status_after);
    }

    // Only a REFINE verdict changes the hypothesis text.
    for (state, added) in &t.snapshots {
        for r in added {
            let h = state.hypotheses.iter().find(|h| h.id == r.hypothesis_id).ok_or("unknown hypothesis")?;
            let refined = r.verdict.kind == VerdictKind::Refine
                && r.status_after == Status::Active
                && r.gate_note.is_empty();
            if !refined && h.text != r.hypothesis_text {
                return Err(format!("{}: {} changed text without REFINE", r.id, r.verdict.kind));
            }
            if refined && Some(&h.text) != r.verdict.refined_text.as_ref() {
                return Err(format!("{}: REFINE text not applied", r.id));
            }
        }
    }

    // Facets come from accepted hypotheses only.
    let accepted: Vec<&str> = out
        .state
        .hypotheses
        .iter()
        .filter(|h| h.status == Status::Accepted)
        .map(|h| h.id.as_str())
        .collect();
    let facet_ids: Vec<&str> = out.explanation.facets.iter().map(|f| f.hypothesis_id.as_str()).collect();
    if facet_ids != accepted {
        return Err(format!("facets {facet_ids:?} vs accepted {accepted:?}"));
    }
    let want = if accepted.is_empty() { ExplanationStatus::Unresolved } else { ExplanationStatus::Resolved };
    if out.explanation.status != want {
        return Err("explanation status disagrees with accepted set".into());
    }
    Ok(())
}

/// Replies keyed by request kind, for hand-built scenarios.
pub fn by_stage(
    init: &'static str,
    design: &'static str,
    analyze: &'static str,
    review: &'static str,
) -> Arc<dyn LlmClient> {
    Arc::new(move |req: &ChatRequest| -> hypoprobe::Result<ChatResponse> {
        let t = req.transcript();
        let text = if t.contains("[HYPOTHESIS LIST]") {
            init
        } else if t.contains("Need more testing: [YES / NO]") {
            review
        } else if t.contains("TEST SENTENCE:") {
            analyze
        } else {
            design
        };
        Ok(ChatResponse::text(text))
    })
}

pub const FOUR_HYPOTHESES: &str = "Hypothesis_1: the token can't\nHypothesis_2: negation words\n\
Hypothesis_3: modal verbs\nHypothesis_4: not punctuation";
pub const REVIEW_NO: &str = "REVIEW SUMMARY:\nok\n\nNeed more testing: [NO]\nFINAL EXPLANATION: done";
