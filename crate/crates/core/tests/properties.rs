mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use approx::assert_relative_eq;
use common::*;
use hypoprobe::agents::mock::ScriptedLlm;
use hypoprobe::agents::parse::*;
use hypoprobe::agents::prompts::{template, TemplateName};
use hypoprobe::backend::ActivationBackend;
use hypoprobe::engine::transition;
use hypoprobe::eval::{pearson, sample_held_out};
use hypoprobe::profile::canonical_text;
use hypoprobe::sae::Matrix;
use hypoprobe::{decode, demo, encode, run_feature, sae_loss, ActivationProfile, AgentSet, Hypothesis, LoopConfig, SaeParams, Status, Verdict, VerdictKind};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sae_and_input(seed: u64) -> (SaeParams, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_sae(&mut rng);
    let x = random_vec(&mut rng, p.d_model, 3.0);
    (p, x)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn encode_is_nonnegative(seed in any::<u64>()) {
        let (p, x) = sae_and_input(seed);
        prop_assert!(encode(&p, &x).unwrap().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn forward_pass_matches_oracle(seed in any::<u64>()) {
        let (p, x) = sae_and_input(seed);
        let f = encode(&p, &x).unwrap();
        for (a, b) in f.iter().zip(oracle_encode(&p, &x)) {
            prop_assert!(rel_err(*a, b) <= 1e-9);
        }
        for (a, b) in decode(&p, &f).unwrap().iter().zip(oracle_decode(&p, &f)) {
            prop_assert!(rel_err(*a, b) <= 1e-9);
        }
        prop_assert!(rel_err(sae_loss(&p, &x).unwrap(), oracle_loss(&p, &x)) <= 1e-9);
    }
}

proptest! {
    #[test]
    fn loss_is_monotone_in_lambda(seed in any::<u64>(), l1 in 0.0f64..5.0, dl in 0.0f64..5.0) {
        let (mut p, x) = sae_and_input(seed);
        p.sparsity_coeff = l1;
        let a = sae_loss(&p, &x).unwrap();
        p.sparsity_coeff = l1 + dl;
        prop_assert!(sae_loss(&p, &x).unwrap() >= a);
    }

    #[test]
    fn split_sign_sae_reconstructs_exactly(
        x in proptest::collection::vec(-5.0f64..5.0, 1..12),
        lambda in 0.0f64..2.0,
    ) {
        // f = [relu(x - b), relu(b - x)], x_hat = f+ - f- + b = x
        let d = x.len();
        let b: Vec<f64> = (0..d).map(|i| i as f64 * 0.25 - 1.0).collect();
        let mut p = SaeParams::zeros(d, 2 * d);
        let mut we = Matrix::zeros(2 * d, d);
        let mut wd = Matrix::zeros(d, 2 * d);
        for i in 0..d {
            we.set(i, i, 1.0);
            we.set(d + i, i, -1.0);
            wd.set(i, i, 1.0);
            wd.set(i, d + i, -1.0);
        }
        p.enc_weights = we;
        p.dec_weights = wd;
        p.pre_bias = b.clone();
        p.dec_bias = b.clone();
        p.sparsity_coeff = lambda;
        let x_hat = decode(&p, &encode(&p, &x).unwrap()).unwrap();
        for (a, e) in x_hat.iter().zip(&x) {
            prop_assert!((a - e).abs() <= 1e-12);
        }
        let l1: f64 = x.iter().zip(&b).map(|(a, c)| (a - c).abs()).sum();
        prop_assert!((sae_loss(&p, &x).unwrap() - lambda * l1).abs() <= 1e-9 * l1.max(1.0));
    }

    #[test]
    fn pearson_is_bounded_and_affine_invariant(
        xy in proptest::collection::vec((0.0f64..10.0, 0.0f64..10.0), 2..40),
        a in 0.1f64..10.0,
        c in -5.0f64..5.0,
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
        if let Some(r) = pearson(&x, &y) {
            prop_assert!((-1.0..=1.0).contains(&r));
            let scaled: Vec<f64> = x.iter().map(|v| a * v + c).collect();
            let flipped: Vec<f64> = x.iter().map(|v| -a * v + c).collect();
            assert_relative_eq!(pearson(&scaled, &y).unwrap(), r, epsilon = 1e-9);
            assert_relative_eq!(pearson(&flipped, &y).unwrap(), -r, epsilon = 1e-9);
        }
    }

    #[test]
    fn transition_rules(
        failures in 0u32..3,
        peak in 0.0f64..10.0,
        which in 0usize..4,
        terminal in any::<bool>(),
    ) {
        let cfg = LoopConfig::default();
        let mut h = Hypothesis::new("H1", "original text");
        h.consecutive_failures = failures;
        let v = match which {
            0 => Verdict::accept("r"),
            1 => Verdict::reject("r"),
            2 => Verdict::refine("new text", "r"),
            _ => Verdict::refute("probe", "r"),
        };
        let p = ActivationProfile::new(cant(), vec!["a".into(), "b".into()], vec![0.0, peak]).unwrap();
        if terminal {
            h.status = Status::Accepted;
            prop_assert!(transition(&h, &p, &v, &cfg, 8.0).is_err());
            return Ok(());
        }
        let t = transition(&h, &p, &v, &cfg, 8.0).unwrap();
        let failing = peak < cfg.meaningful_frac * 8.0;
        prop_assert_eq!(t.hypothesis.consecutive_failures, if failing { failures + 1 } else { 0 });
        if t.effective != VerdictKind::Refine || v.kind != VerdictKind::Refine {
            prop_assert_eq!(t.hypothesis.text.as_str(), "original text");
        }
        if t.hypothesis.status == Status::Accepted {
            prop_assert!(peak >= cfg.strong_frac * 8.0);
        }
        if t.hypothesis.consecutive_failures >= cfg.reject_after_failures {
            prop_assert_eq!(t.hypothesis.status, Status::Rejected);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chaos_runs_keep_invariants(i in any::<u64>()) {
        let (cfg, llm) = chaos_case(i);
        let t = run_traced(&cfg, llm, &cant()).unwrap();
        if let Err(e) = check_invariants(&cfg, &t) {
            prop_assert!(false, "case {i}: {e}");
        }
    }

    #[test]
    fn chaos_runs_are_deterministic(i in any::<u64>()) {
        let (cfg, llm) = chaos_case(i);
        let a = run_traced(&cfg, llm.clone(), &cant()).unwrap();
        let b = run_traced(&cfg, llm, &cant()).unwrap();
        prop_assert_eq!(a.outcome.ledger.records(), b.outcome.ledger.records());
        prop_assert_eq!(a.outcome.explanation, b.outcome.explanation);
    }

    #[test]
    fn held_out_excludes_exemplars(top_k in 1usize..12, per_stratum in 1usize..3, seed in any::<u64>(), which in 0usize..3) {
        let f = demo::features()[which].clone();
        let ex = backend().fetch_top_exemplars(&f, top_k).unwrap();
        let excluded: Vec<String> = ex.iter().map(|e| canonical_text(&e.text)).collect();
        if let Ok(held) = sample_held_out(backend(), &f, &ex, per_stratum, seed) {
            prop_assert_eq!(held.len(), 3 * per_stratum);
            for p in &held {
                prop_assert!(!excluded.contains(&canonical_text(&p.joined_text())));
            }
        }
    }
}

fn line_text() -> impl Strategy<Value = String> {
    "[A-Za-z][A-Za-z0-9 ,.'-]{0,40}[A-Za-z0-9.]".prop_map(|s| s.split_whitespace().collect::<Vec<_>>().join(" "))
}

proptest! {
    #[test]
    fn hypotheses_round_trip(items in proptest::collection::vec(line_text(), 1..6)) {
        let h: Vec<(u32, String)> = items.into_iter().enumerate().map(|(i, t)| (i as u32 + 1, t)).collect();
        prop_assert_eq!(parse_hypotheses(&render_hypotheses(&h)), h);
    }

    #[test]
    fn verdicts_round_trip(which in 0usize..4, a in line_text(), r in line_text()) {
        let v = match which {
            0 => Verdict::accept(r),
            1 => Verdict::reject(r),
            2 => Verdict::refine(a, r),
            _ => Verdict::refute(a, r),
        };
        prop_assert_eq!(parse_verdict(&render_verdict(&v)).unwrap(), v);
    }

    #[test]
    fn designed_tests_round_trip(s in line_text(), p in proptest::option::of(line_text())) {
        let t = DesignedTest { sentence: s, prediction: p };
        prop_assert_eq!(parse_designed_test(&render_designed_test(&t)).unwrap(), t);
    }

    #[test]
    fn reviews_round_trip(
        tests in proptest::collection::vec((1u32..6, proptest::option::of("[A-Za-z ]{1,12}[a-z]"), line_text()), 0..4),
        summary in line_text(),
        fin in proptest::option::of(line_text()),
    ) {
        let suggested: Vec<SuggestedTest> = tests
            .into_iter()
            .map(|(k, label, s)| SuggestedTest {
                hypothesis_id: format!("H{k}"),
                label: label.map(|l| l.trim().to_string()).unwrap_or_default(),
                sentence: s.replace('"', ""),
            })
            .filter(|t| !t.sentence.is_empty())
            .collect();
        let d = ReviewerDecision {
            need_more_testing: !suggested.is_empty(),
            suggested_tests: suggested,
            summary,
            final_explanation: fin,
        };
        prop_assert_eq!(parse_review(&render_review(&d)).unwrap(), d);
    }

    #[test]
    fn parse_render_parse_is_stable(raw in "(Hypothesis_[0-9]: [a-z ]{0,20}\n|VERDICT: (ACCEPT|REFINE|REFUTE|MAYBE)\n|REFINED: [a-z ]{0,10}\n|NEXT_TEST: [a-z ]{0,10}\n|RATIONALE: [a-z]{0,8}\n|TEST: [a-z ]{0,12}\n|Need more testing: \\[?(YES|NO)\\]?\n|- H[0-9]: [a-z ]{0,8}: \"[a-z ]{0,12}\"\n|[a-z ]{0,10}\n){0,8}") {
        let h = parse_hypotheses(&raw);
        prop_assert_eq!(parse_hypotheses(&render_hypotheses(&h)), h);
        if let Ok(v) = parse_verdict(&raw) {
            prop_assert_eq!(parse_verdict(&render_verdict(&v)).unwrap(), v);
        }
        if let Ok(t) = parse_designed_test(&raw) {
            prop_assert_eq!(parse_designed_test(&render_designed_test(&t)).unwrap(), t);
        }
        if let Ok(d) = parse_review(&raw) {
            prop_assert_eq!(parse_review(&render_review(&d)).unwrap(), d);
        }
    }

    #[test]
    fn rendered_prompts_have_no_open_slots(value in "[^{}]{0,30}") {
        for name in [TemplateName::Init, TemplateName::Test, TemplateName::Analyze, TemplateName::Synthesize, TemplateName::Generate, TemplateName::Simulate] {
            let t = template(name);
            let b: BTreeMap<&str, String> = t.required_placeholders().iter().map(|k| (k.as_str(), value.clone())).collect();
            let out = t.render(&b).unwrap();
            for k in t.required_placeholders() {
                let slot = format!("{{{k}}}");
                prop_assert!(!out.contains(&slot), "{name:?} left {slot}");
            }
            if let Some(first) = t.required_placeholders().iter().next() {
                let mut partial = b.clone();
                partial.remove(first.as_str());
                prop_assert!(t.render(&partial).is_err());
            }
        }
    }
}

#[test]
fn scripted_demo_runs_are_deterministic() {
    let llm = Arc::new(ScriptedLlm::new(demo::script()).unwrap());
    let cfg = LoopConfig::default();
    for f in demo::features() {
        let (ga, gb) = (AgentSet::shared(llm.clone()), AgentSet::shared(llm.clone()));
        let a = run_feature(&f, &cfg, &ga, backend()).unwrap();
        let b = run_feature(&f, &cfg, &gb, backend()).unwrap();
        assert_eq!(a.ledger.records(), b.ledger.records());
        assert_eq!(a.explanation, b.explanation);
        assert_eq!(ga.log.sorted(), gb.log.sorted());
    }
}
