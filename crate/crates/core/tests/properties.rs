use proptest::prelude::*;

use tracevote_core::metrics::{auroc, confidence_histogram};
use tracevote_core::orchestrator::replay_trace;
use tracevote_core::trace::{write_trace_log, QuestionBundle};
use tracevote_core::*;

fn trace_strategy(id: usize) -> impl Strategy<Value = TraceRecord> {
    let turn = prop::collection::vec(0.0f64..3.0, 1..12);
    (
        prop::collection::vec(turn.clone(), 0..3),
        turn,
        prop::sample::select(vec!["A", "B", "C", "D"]),
    )
        .prop_map(move |(mining, reasoning, answer)| {
            let toks = |h: &[f64]| h.iter().map(|&h| TokenInfo::from_entropy(h)).collect();
            let mut turns: Vec<Turn> = mining
                .iter()
                .map(|m| Turn::mining(toks(m), BBox::new(1.0, 1.0, 50.0, 40.0)))
                .collect();
            let text = format!("answer: \\boxed{{{answer}}}");
            turns.push(Turn::reasoning(toks(&reasoning), text.clone()));
            TraceRecord::new("q", format!("t{id:02}"), turns, text).unwrap()
        })
}

fn bundle_strategy(max_traces: usize) -> impl Strategy<Value = QuestionBundle> {
    (1..=max_traces)
        .prop_flat_map(|n| (0..n).map(trace_strategy).collect::<Vec<_>>())
        .prop_map(|traces| {
            let mut b = QuestionBundle::new("q", traces);
            b.ground_truth = Some("A".into());
            b
        })
}

fn scaled(bundle: &QuestionBundle, c: f64) -> QuestionBundle {
    let mut b = bundle.clone();
    for t in &mut b.traces {
        for turn in &mut t.turns {
            for tok in &mut turn.tokens {
                tok.entropy = tok.entropy.map(|h| h * c);
            }
        }
    }
    b
}

fn stage_scores(bundle: &QuestionBundle, k: usize) -> Vec<StageScore> {
    bundle
        .traces
        .iter()
        .map(|t| score_trace(&StageEntropies::from_segments(&t.segment()).unwrap(), k).unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn log_round_trip(b in bundle_strategy(6)) {
        let mut buf = Vec::new();
        write_trace_log(&mut buf, std::slice::from_ref(&b)).unwrap();
        let parsed = parse_trace_log(&buf[..]).unwrap();
        prop_assert_eq!(parsed.len(), 1);
        prop_assert_eq!(&parsed[0].traces, &b.traces);
        prop_assert_eq!(&parsed[0].ground_truth, &b.ground_truth);
    }

    #[test]
    fn segments_cover_every_token(b in bundle_strategy(4)) {
        for t in &b.traces {
            let s = segment_stages(t);
            prop_assert_eq!(s.mining_tokens.len() + s.reasoning_tokens.len(), t.total_tokens);
        }
    }

    #[test]
    fn extraction_is_idempotent(text in "[ -~]{0,40}") {
        if let Some(a) = extract_answer(&text) {
            prop_assert_eq!(extract_answer(&format!("\\boxed{{{a}}}")), Some(a));
        }
    }

    #[test]
    fn reliability_is_nonpositive_and_order_free(
        h in prop::collection::vec(0.0f64..5.0, 1..40),
        k in 1usize..50,
        seed in any::<u64>(),
    ) {
        let w = stage_reliability(&h, k).unwrap();
        prop_assert!(w <= 0.0);
        let mut shuffled = h.clone();
        // deterministic rotation plus reversal is enough to break order
        shuffled.rotate_left((seed as usize) % h.len());
        shuffled.reverse();
        prop_assert_eq!(stage_reliability(&shuffled, k).unwrap().to_bits(), w.to_bits());
    }

    #[test]
    fn reliability_is_homogeneous(
        h in prop::collection::vec(0.0f64..5.0, 1..40),
        k in 1usize..50,
        c in prop::sample::select(vec![0.5, 2.0, 10.0]),
    ) {
        let scaled: Vec<f64> = h.iter().map(|x| x * c).collect();
        let a = stage_reliability(&scaled, k).unwrap();
        let b = c * stage_reliability(&h, k).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }

    #[test]
    fn running_stat_is_monotone_and_exact(
        h in prop::collection::vec(0.0f64..5.0, 1..80),
        k in 1usize..20,
    ) {
        let mut stat = RunningTurnStat::new(k);
        let mut prev = f64::INFINITY;
        for &x in &h {
            let r = stat.push(x);
            if stat.n_seen() >= k {
                prop_assert!(r <= prev);
                prev = r;
            }
        }
        prop_assert_eq!(stat.reliability().to_bits(), stage_reliability(&h, k).unwrap().to_bits());
    }

    #[test]
    fn filter_keeps_enough(b in bundle_strategy(20), alpha in 0.0f64..0.95, k in 1usize..8) {
        let scores = stage_scores(&b, k);
        let n = scores.len();
        let ids: Vec<String> = b.traces.iter().map(|t| t.trace_id.clone()).collect();
        let pairs = || ids.iter().map(String::as_str).zip(scores.iter());

        let all = dual_stage_filter(pairs(), &ThresholdSet::estimate(&scores, 0.0, k).unwrap());
        prop_assert_eq!(all.kept.len(), n);

        let t = ThresholdSet::estimate(&scores, alpha, k).unwrap();
        let out = dual_stage_filter(pairs(), &t);
        let drop = (alpha * n as f64).floor() as usize;
        prop_assert!(out.kept.len() + 2 * drop >= n);
        prop_assert_eq!(out.kept.len() + out.rejected.len(), n);
    }

    #[test]
    fn vote_is_order_free(
        entries in prop::collection::vec(
            (prop::sample::select(vec!["A", "B", "C"]), 0.001f64..1000.0), 1..30),
        seed in any::<u64>(),
    ) {
        let a = weighted_vote(&entries).unwrap();
        let mut shuffled = entries.clone();
        shuffled.rotate_left((seed as usize) % entries.len());
        shuffled.reverse();
        prop_assert_eq!(weighted_vote(&shuffled).unwrap(), a);
    }

    #[test]
    fn uniform_weights_are_majority(answers in prop::collection::vec(
        prop::sample::select(vec!["A", "B", "C", "D"]), 1..30)) {
        let entries: Vec<(&str, f64)> = answers.iter().map(|a| (*a, 1.0)).collect();
        prop_assert_eq!(weighted_vote(&entries).unwrap(), majority_vote(&answers).unwrap());
    }

    #[test]
    fn huge_temperature_is_majority(b in bundle_strategy(12)) {
        let answers: Vec<&str> = b.traces.iter().filter_map(|t| t.answer.as_deref()).collect();
        let majority = majority_vote(&answers).unwrap();
        let top = majority.totals[&majority.chosen];
        prop_assume!(majority.totals.values().filter(|v| **v == top).count() == 1);
        let cfg = RunConfig { alpha: 0.0, tau: 1e12, ..RunConfig::default() };
        let r = run_offline(&b, &cfg).unwrap();
        prop_assert_eq!(r.chosen, Some(majority.chosen));
    }

    #[test]
    fn scaling_entropies_changes_nothing(
        b in bundle_strategy(10),
        c in prop::sample::select(vec![0.5, 2.0, 10.0]),
        online in any::<bool>(),
    ) {
        let cfg = RunConfig {
            warmup: Some(b.traces.len().min(4)),
            budget: b.traces.len(),
            mode: if online { Mode::Online } else { Mode::Offline },
            ..RunConfig::default()
        };
        let cfg = RunConfig { warmup: online.then_some(cfg.warmup.unwrap()), ..cfg };
        let base = tracevote_core::orchestrator::run_question(&b, &cfg).unwrap();
        let other = tracevote_core::orchestrator::run_question(&scaled(&b, c), &cfg).unwrap();
        prop_assert_eq!(&base.chosen, &other.chosen);
        prop_assert_eq!(&base.kept_trace_ids, &other.kept_trace_ids);
        prop_assert_eq!(base.traces.len(), other.traces.len());
        for (x, y) in base.traces.iter().zip(&other.traces) {
            prop_assert_eq!(x.aborted, y.aborted);
            match (x.weight, y.weight) {
                (Some(p), Some(q)) => prop_assert!((p - q).abs() <= 1e-9 * p.abs().max(q.abs())),
                (p, q) => prop_assert_eq!(p, q),
            }
        }
    }

    #[test]
    fn tokens_used_grow_with_beta(b in bundle_strategy(16)) {
        let mut last = 0;
        for beta in [0.3, 0.5, 0.7, 0.9, 0.95, 1.0] {
            let cfg = RunConfig {
                beta,
                budget: b.traces.len(),
                warmup: Some(b.traces.len().min(3)),
                ..RunConfig::online()
            };
            let r = run_online_replay(&b, &cfg).unwrap();
            prop_assert!(r.tokens_used >= last);
            prop_assert!(r.tokens_used <= r.tokens_full);
            last = r.tokens_used;
        }
    }

    #[test]
    fn aborted_traces_never_vote(b in bundle_strategy(16), beta in 0.5f64..=1.0) {
        let cfg = RunConfig {
            beta,
            budget: b.traces.len(),
            warmup: Some(b.traces.len().min(3)),
            ..RunConfig::online()
        };
        let r = run_online_replay(&b, &cfg).unwrap();
        for t in &r.traces {
            if t.aborted {
                prop_assert!(!t.kept && t.weight.is_none());
                prop_assert!(!r.kept_trace_ids.contains(&t.trace_id));
            }
        }
    }

    #[test]
    fn online_without_stopping_matches_offline(b in bundle_strategy(12)) {
        let n = b.traces.len();
        let online = RunConfig {
            beta: 1.0,
            budget: n,
            warmup: Some(n),
            online_abort: false,
            ..RunConfig::online()
        };
        let offline = RunConfig { mode: Mode::Offline, ..online.clone() };
        prop_assert_eq!(
            run_online_replay(&b, &online).unwrap().chosen,
            run_offline(&b, &offline).unwrap().chosen
        );
    }

    #[test]
    fn replay_abort_matches_turn_check(
        turns in prop::collection::vec(prop::collection::vec(0.0f64..3.0, 1..30), 1..4),
        k in 1usize..10,
        eta in -3.0f64..0.0,
    ) {
        let out = replay_trace(&turns, k, eta);
        match out.aborted {
            Some(p) => {
                let turn = &turns[p.turn - 1];
                prop_assert!(p.token + 1 >= k.min(turn.len()));
                // the finished turn fails the post-hoc check as well
                prop_assert!(stage_reliability(turn, k).unwrap() < eta);
            }
            None => {
                for t in &turns {
                    if t.len() >= k {
                        prop_assert!(stage_reliability(t, k).unwrap() >= eta);
                    }
                }
                prop_assert_eq!(out.tokens_consumed, turns.iter().map(Vec::len).sum::<usize>());
            }
        }
    }

    #[test]
    fn auroc_is_antisymmetric(pairs in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..60)) {
        let (s, l): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
        prop_assume!(l.iter().any(|x| *x) && l.iter().any(|x| !*x));
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        let sum = auroc(&s, &l).unwrap() + auroc(&neg, &l).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_conserves_counts(entries in prop::collection::vec((1e-6f64..1e6, any::<bool>()), 0..60)) {
        let rows = confidence_histogram(&entries, 4);
        let correct: usize = rows.iter().map(|r| r.count_correct).sum();
        let incorrect: usize = rows.iter().map(|r| r.count_incorrect).sum();
        prop_assert_eq!(correct, entries.iter().filter(|e| e.1).count());
        prop_assert_eq!(correct + incorrect, entries.len());
    }
}

#[test]
fn benchmark_is_deterministic_across_execution_modes() {
    let d = synth::generate_synthetic_dataset(40, 12, &synth::NoiseProfile::default(), 3).unwrap();
    for cfg in [RunConfig::default(), RunConfig::online()] {
        let a = orchestrator::run_benchmark_with(&d.bundles, &cfg, Execution::Parallel).unwrap();
        let b = orchestrator::run_benchmark_with(&d.bundles, &cfg, Execution::Sequential).unwrap();
        let c = run_benchmark(&d.bundles, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }
}

#[test]
fn corpus_tsr_is_recomputable() {
    let d = synth::generate_synthetic_dataset(30, 16, &synth::NoiseProfile::default(), 11).unwrap();
    let r = run_benchmark(&d.bundles, &RunConfig::online()).unwrap();
    let used: usize = r.per_question.iter().map(|q| q.tokens_used).sum();
    let full: usize = r.per_question.iter().map(|q| q.tokens_full).sum();
    let full_direct: usize = d.bundles.iter().map(|b| b.traces.iter().map(|t| t.total_tokens).sum::<usize>()).sum();
    assert_eq!(full, full_direct);
    assert_eq!(r.corpus.tsr, Some(1.0 - used as f64 / full as f64));
}
