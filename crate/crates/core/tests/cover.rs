mod common;

use std::collections::BTreeMap;

use cover_decode::baseline::{dcbs_calibrate, dcbs_decode};
use cover_decode::clustering::{Cluster, ClusterAssignment, ClusteringConfig};
use cover_decode::cover::*;
use cover_decode::expand::{decode_with_rule, DEFAULT_MAX_NODES};
use cover_decode::scorer::{make_longtail_model, sample_dataset, LongTailConfig, Scorer};
use cover_decode::{ScoreTrace, Token};
use proptest::prelude::*;

fn trace(id: &str, tokens: &[u32], scores: &[f64]) -> ScoreTrace {
    ScoreTrace::new(id, tokens.iter().map(|&t| Token(t)).collect(), scores.to_vec()).unwrap()
}

/// Two clusters at every step: token 0 -> group 1, token 1 -> group 2.
fn two_cluster_assignment(max_len: usize) -> ClusterAssignment {
    let map: BTreeMap<Token, Cluster> = [(Token(0), Cluster::Group(0)), (Token(1), Cluster::Group(1))].into();
    ClusterAssignment {
        clusters: 2,
        bucket_width: 1,
        max_len,
        buckets: vec![map; max_len],
    }
}

#[test]
fn cluster_quantile_examples() {
    let traces: Vec<ScoreTrace> = (1..=10).map(|i| trace(&i.to_string(), &[0], &[i as f64 / 10.0])).collect();
    let refs: Vec<&ScoreTrace> = traces.iter().collect();
    let a = two_cluster_assignment(1);
    let index = CalibrationIndex::new(&refs, &a);
    let mut beta = BetaMatrix::filled(3, 1, 1, 0.5);
    assert_eq!(cluster_quantile(&beta, 1, Cluster::Group(0), &index), 0.5);
    beta.set_coord(0, 0, 0.0);
    assert_eq!(cluster_quantile(&beta, 1, Cluster::Group(0), &index), 0.1);
    beta.set_coord(0, 0, 1.0);
    assert_eq!(cluster_quantile(&beta, 1, Cluster::Group(0), &index), 1.0);
    // No member carries token 1, so group 2 has no scores.
    assert_eq!(cluster_quantile(&beta, 1, Cluster::Group(1), &index), f64::INFINITY);
    // Null draws from every step-1 score.
    beta.set_coord(2, 0, 0.5);
    assert_eq!(cluster_quantile(&beta, 1, Cluster::Null, &index), 0.5);
}

#[test]
fn coverage_indicator_cases() {
    let t = trace("a", &[0, 1, 0], &[0.5, 0.3, 0.1]);
    let a = two_cluster_assignment(3);
    let open = ThresholdTable::filled(3, 3, f64::NEG_INFINITY);
    let rule = ClusterRule {
        thresholds: &open,
        assignment: &a,
    };
    let rec = coverage_indicator(&t, &rule, &a);
    assert!(rec.covered && rec.first_failure.is_none());

    let mut th = open.clone();
    th.set(1, 0, 0.6);
    let rule = ClusterRule {
        thresholds: &th,
        assignment: &a,
    };
    let rec = coverage_indicator(&t, &rule, &a);
    assert!(!rec.covered);
    assert_eq!(rec.first_failure, Some(FirstFailure { step: 1, cluster: Cluster::Group(0) }));
    assert!(rec.steps.iter().all(|s| !s.passed));

    let mut th = open;
    th.set(2, 1, 0.3);
    th.set(3, 0, 0.2);
    let rule = ClusterRule {
        thresholds: &th,
        assignment: &a,
    };
    let rec = coverage_indicator(&t, &rule, &a);
    assert_eq!(rec.first_failure, Some(FirstFailure { step: 3, cluster: Cluster::Group(0) }));
    assert_eq!(rec.steps.iter().map(|s| s.passed).collect::<Vec<_>>(), vec![true, true, false]);
}

fn sampled(seed: u64, n: usize) -> (cover_decode::TabularARModel, Vec<ScoreTrace>) {
    let model = make_longtail_model(&LongTailConfig::standard(8, 4, 4, 0.2, seed)).unwrap();
    let traces = sample_dataset(&model, n, seed + 100).unwrap();
    (model, traces)
}

fn small_config(seed: u64) -> CoverConfig {
    CoverConfig {
        alpha: 0.1,
        max_len: 4,
        budget: 300,
        clustering: ClusteringConfig {
            clusters: 2,
            min_count: 10,
            bucket_width: 2,
            seed,
            restarts: 3,
            ..ClusteringConfig::default()
        },
        split_seed: seed,
        optimizer_seed: seed,
        ..CoverConfig::default()
    }
}

#[test]
fn zero_levels_prune_nothing_on_calibration_data() {
    let (_, traces) = sampled(1, 400);
    let refs: Vec<&ScoreTrace> = traces.iter().collect();
    let a = ClusterAssignment::single(1, 4, (0..8).map(Token));
    let index = CalibrationIndex::new(&refs, &a);
    let beta = BetaMatrix::filled(2, 1, 4, 0.0);
    let thresholds = index.thresholds(&beta);
    let (covered, cells) = index.tally(&thresholds);
    assert_eq!(covered, traces.len());
    assert!(cells.iter().all(|c| c.failures == 0));

    let lambda0 = objective(&beta, &index, &LambdaSchedule::Uniform(0.0));
    let finite: f64 = (1..=4)
        .flat_map(|l| (0..2).map(move |r| (l, r)))
        .map(|(l, r)| thresholds.get(l, r))
        .filter(|q| q.is_finite())
        .sum();
    assert_eq!(lambda0.value, finite);
    assert_eq!(lambda0.penalty, 0.0);
}

#[test]
fn pair_errors_match_record_recount() {
    let (_, traces) = sampled(2, 600);
    let cal = calibrate(&traces, &small_config(2)).unwrap();
    let d2 = cal.split.calibration_set(&traces);
    let records = evaluate_paths(&d2, &cal.model.rule(), &cal.model.assignment);
    let rows = cal.model.assignment.rows();
    let tallies = pair_errors(&records, rows, 4);
    let index = CalibrationIndex::new(&d2, &cal.model.assignment);
    let (covered, cells) = index.tally(&cal.model.thresholds);
    assert_eq!(tallies, cells);
    assert_eq!(covered, records.iter().filter(|r| r.covered).count());
    for l in 1..=4 {
        for row in 0..rows {
            let m = Cluster::from_row(row, rows - 1);
            assert_eq!(empirical_cluster_error(l, m, &records), tallies[(l - 1) * rows + row]);
            // Failures at (l, m) are exactly the first failures there.
            let first = records
                .iter()
                .filter(|r| r.first_failure == Some(FirstFailure { step: l, cluster: m }))
                .count();
            assert_eq!(first, tallies[(l - 1) * rows + row].failures);
        }
    }
}

#[test]
fn budget_zero_returns_phase_one_point() {
    let (_, traces) = sampled(3, 800);
    let mut cfg = small_config(3);
    cfg.budget = 0;
    let cal = calibrate(&traces, &cfg).unwrap();
    assert!(cal.outcome.log.is_empty());
    let n = cal.model.counts.calibration;
    assert!(cal.outcome.phase1_covered as f64 >= n as f64 * 0.9 - 1e-9);
    let (row, bucket) = cal.outcome.anchor;
    for r in 0..cal.model.beta.rows() {
        for b in 0..cal.model.beta.buckets() {
            let expect = if (r, b) == (row, bucket) {
                (1.0 - cal.outcome.phase1_steps as f64 / n as f64).max(0.0)
            } else {
                0.0
            };
            assert_eq!(cal.model.beta.coord(r, b), expect);
        }
    }
}

#[test]
fn optimizer_log_replays_cleanly() {
    for rule in [TradeoffRule::RaiseOnly, TradeoffRule::AnchorTransfer] {
        let (_, traces) = sampled(4, 1000);
        let mut cfg = small_config(4);
        cfg.rule = rule;
        cfg.lambda = LambdaSchedule::Uniform(0.0);
        let cal = calibrate(&traces, &cfg).unwrap();
        let d2 = cal.split.calibration_set(&traces);
        let index = CalibrationIndex::new(&d2, &cal.model.assignment);
        let opt = OptimizerConfig {
            alpha: cfg.alpha,
            lambda: cfg.lambda,
            budget: cfg.budget,
            increment: None,
            init_coord: None,
            seed: cfg.optimizer_seed,
            rule,
        };
        let summary = replay_audit(&index, 2, &opt, &cal.outcome).unwrap();
        assert_eq!(summary.records, 300);
        assert!(summary.final_objective >= cal.outcome.phase1_objective);
        assert!(cal.model.thresholds_consistent(&d2));

        // A tampered log is caught.
        let mut bad = cal.outcome.clone();
        if let Some(r) = bad.log.iter_mut().find(|r| r.accepted) {
            r.objective_after += 1.0;
            assert!(replay_audit(&index, 2, &opt, &bad).is_err());
        }
    }
}

#[test]
fn infeasible_when_even_zero_levels_fail() {
    // Traces longer than max_len can never be covered.
    let traces: Vec<ScoreTrace> = (0..50).map(|i| trace(&i.to_string(), &[0, 0, 0], &[0.5, 0.4, 0.3])).collect();
    let refs: Vec<&ScoreTrace> = traces.iter().collect();
    let a = ClusterAssignment::single(1, 2, [Token(0)]);
    let index = CalibrationIndex::new(&refs, &a);
    let err = optimize(&index, 1, &OptimizerConfig::default()).unwrap_err();
    assert!(matches!(err, cover_decode::Error::Infeasible(_)));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn single_cluster_with_dcbs_thresholds_matches_dcbs() {
    let (model, traces) = sampled(5, 500);
    let dcbs = dcbs_calibrate(&traces, 0.1, 4).unwrap();
    let a = ClusterAssignment::single(1, 4, (0..8).map(Token));
    let mut th = ThresholdTable::filled(2, 4, f64::INFINITY);
    for l in 1..=4 {
        th.set(l, 0, dcbs.threshold(l));
    }
    let rule = ClusterRule {
        thresholds: &th,
        assignment: &a,
    };
    let ours = decode_with_rule(&model, &rule, 4, DEFAULT_MAX_NODES).unwrap();
    assert_eq!(ours, dcbs_decode(&model, &dcbs, 4, DEFAULT_MAX_NODES).unwrap());
}

#[test]
fn infinite_cluster_threshold_bans_its_tokens() {
    let (model, traces) = sampled(6, 800);
    let cal = calibrate(&traces, &small_config(6)).unwrap();
    let mut m = cal.model.clone();
    let banned_row = 0;
    for l in 1..=4 {
        m.thresholds.set(l, banned_row, f64::INFINITY);
    }
    let set = cover_decode(&model, &m, 4, DEFAULT_MAX_NODES).unwrap();
    for s in &set.sequences {
        for (i, t) in s.iter().enumerate() {
            assert_ne!(m.assignment.cluster_of(i + 1, *t).row(m.assignment.clusters), banned_row);
        }
    }
}

#[test]
fn model_document_round_trip() {
    let (_, traces) = sampled(7, 600);
    let cal = calibrate(&traces, &small_config(7)).unwrap();
    let text = cal.model.to_json().unwrap();
    let back = CalibratedModel::from_json(&text).unwrap();
    assert_eq!(back, cal.model);
    assert_eq!(back.to_json().unwrap(), text);
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in ["alpha", "lambda", "bucket_width", "tau_grid", "M", "min_count", "assignment", "beta", "thresholds", "seeds", "counts"] {
        assert!(doc.get(key).is_some(), "missing {key}");
    }
    assert!(doc["thresholds"].get("1:null").is_some());
}

#[test]
fn calibration_is_deterministic() {
    let (_, traces) = sampled(8, 600);
    let a = calibrate(&traces, &small_config(8)).unwrap();
    let b = calibrate(&traces, &small_config(8)).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.outcome, b.outcome);
}

#[test]
fn count_scaled_lambda_uses_member_share() {
    let (_, traces) = sampled(9, 300);
    let refs: Vec<&ScoreTrace> = traces.iter().collect();
    let a = ClusterAssignment::single(1, 4, (0..8).map(Token));
    let index = CalibrationIndex::new(&refs, &a);
    let table = LambdaSchedule::CountScaled(2.0).table(&index);
    assert_eq!(table[0], 2.0 * index.member_count(1, 0) as f64 / 300.0);
    assert!(LambdaSchedule::Uniform(3.0).table(&index).iter().all(|&x| x == 3.0));
}

#[test]
fn cover_decode_matches_exhaustive_filter() {
    for seed in 0..10 {
        let model = common::random_model(4, 1, 3, seed);
        let traces = sample_dataset(&model, 400, seed + 7).unwrap();
        let mut cfg = small_config(seed);
        cfg.max_len = 3;
        cfg.clustering.bucket_width = 1;
        let cal = calibrate(&traces, &cfg).unwrap();
        let rule = cal.model.rule();
        let set = cover_decode(&model, &cal.model, 3, DEFAULT_MAX_NODES).unwrap();
        use cover_decode::expand::StepRule;
        assert_eq!(set.sequences, common::brute_force_set(&model, 3, |l, a| rule.threshold(l, a)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Raising one level never adds a sequence to the set.
    #[test]
    fn raising_a_level_shrinks_the_set(seed in 0u64..1000, row in 0usize..3, bucket in 0usize..2, bump in 0.01f64..0.5) {
        let model = common::random_model(5, 1, 4, seed);
        let traces = sample_dataset(&model, 200, seed).unwrap();
        let refs: Vec<&ScoreTrace> = traces.iter().collect();
        let a = ClusterAssignment {
            clusters: 2,
            bucket_width: 2,
            max_len: 4,
            buckets: vec![(0..5u32).map(|t| (Token(t), Cluster::from_row((t % 3) as usize, 2))).collect(); 2],
        };
        let index = CalibrationIndex::new(&refs, &a);
        let mut beta = BetaMatrix::filled(3, 2, 4, 0.1);
        let before = index.thresholds(&beta);
        let base = decode_with_rule(&model, &ClusterRule { thresholds: &before, assignment: &a }, 4, DEFAULT_MAX_NODES).unwrap();
        beta.set_coord(row, bucket, 0.1 + bump);
        let after = index.thresholds(&beta);
        let raised = decode_with_rule(&model, &ClusterRule { thresholds: &after, assignment: &a }, 4, DEFAULT_MAX_NODES).unwrap();
        prop_assert!(raised.sequences.iter().all(|s| base.contains(s)));
        let (c0, _) = index.tally(&before);
        let (c1, _) = index.tally(&after);
        prop_assert!(c1 <= c0);
    }

    /// The optimizer result satisfies the calibration constraint.
    #[test]
    fn optimizer_keeps_coverage(seed in 0u64..500, alpha in 0.05f64..0.3, lambda in 0.0f64..2.0) {
        let model = common::random_model(5, 1, 3, seed);
        let traces = sample_dataset(&model, 300, seed).unwrap();
        let refs: Vec<&ScoreTrace> = traces.iter().collect();
        let a = ClusterAssignment {
            clusters: 2,
            bucket_width: 1,
            max_len: 3,
            buckets: vec![(0..5u32).map(|t| (Token(t), Cluster::from_row((t % 3) as usize, 2))).collect(); 3],
        };
        let index = CalibrationIndex::new(&refs, &a);
        let cfg = OptimizerConfig { alpha, lambda: LambdaSchedule::Uniform(lambda), budget: 100, seed, ..OptimizerConfig::default() };
        let out = optimize(&index, 1, &cfg).unwrap();
        let beta = out.beta.clone().unwrap();
        let (covered, _) = index.tally(&index.thresholds(&beta));
        prop_assert!(covered as f64 >= 300.0 * (1.0 - alpha) - 1e-9);
        prop_assert!(replay_audit(&index, 1, &cfg, &out).is_ok());
    }
}

#[test]
fn scorer_is_usable_as_trait_object() {
    let (model, _) = sampled(10, 10);
    let s: &dyn Scorer = &model;
    assert_eq!(s.vocab_size(), 8);
}
