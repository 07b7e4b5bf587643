//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a criterion fails that is not a documented infeasibility.

mod common;

use std::collections::BTreeSet;
use std::time::Instant;

use cover_decode::cover::{calibrate, evaluate_paths, replay_audit, CalibrationIndex, CoverConfig, OptimizerConfig, TradeoffRule};
use cover_decode::expand::{StepRule, DEFAULT_MAX_NODES};
use cover_decode::harness::{min_paths_for_mass, run_experiment, EvalReport, ExperimentConfig, Method, MethodOutput};
use cover_decode::pac::{self, BoundVariant, HoeffdingSampleSize};
use cover_decode::scorer::{make_longtail_model, sample_dataset, LongTailConfig, Scorer};
use cover_decode::{cover_decode, quantile, LambdaSchedule, ScoreTrace, TabularARModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

#[derive(Default)]
struct Suite {
    failed: Vec<String>,
    waived: Vec<String>,
}

impl Suite {
    fn check(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(name.into());
        }
    }

    /// A failing line for a target that no method can meet; `proof` must hold.
    fn infeasible(&mut self, name: &str, pass: bool, detail: String, proof: bool) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            if proof {
                self.waived.push(name.into());
            } else {
                self.failed.push(name.into());
            }
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn long_tail(seed: u64) -> (LongTailConfig, TabularARModel) {
    let mut cfg = LongTailConfig::standard(20, 4, 8, 0.05, seed);
    cfg.head_skew = 3.0;
    let model = make_longtail_model(&cfg).unwrap();
    (cfg, model)
}

fn long_tail_config(method: Method, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        method,
        alpha: 0.1,
        lambda: LambdaSchedule::Uniform(1.0),
        clusters: 4,
        bucket_width: 4,
        max_len: 8,
        seed,
        ..ExperimentConfig::default()
    }
}

fn split_cp(s: &mut Suite) {
    let t = Instant::now();
    let model = make_longtail_model(&LongTailConfig::standard(10, 4, 1, 0.1, 0)).unwrap();
    let calib = sample_dataset(&model, 2000, 1).unwrap();
    let eval = sample_dataset(&model, 2000, 2).unwrap();
    let cfg = ExperimentConfig {
        method: Method::Split,
        alpha: 0.1,
        max_len: 1,
        ..ExperimentConfig::default()
    };
    let (_, r) = run_experiment(&cfg, &model, &calib, &eval, None, &BTreeSet::new()).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let bar = 0.9 - 3.0 * (0.09f64 / 2000.0).sqrt();
    s.check(
        "split CP coverage (V=10, L=1, alpha=0.1)",
        r.coverage >= bar && secs < 5.0,
        format!("coverage {:.4} >= {bar:.4}, {secs:.2}s < 5s", r.coverage),
    );
}

fn dcbs(s: &mut Suite) {
    let t = Instant::now();
    let model = make_longtail_model(&LongTailConfig::standard(10, 4, 5, 0.1, 0)).unwrap();
    let calib = sample_dataset(&model, 5000, 11).unwrap();
    let eval = sample_dataset(&model, 5000, 12).unwrap();
    let cfg = ExperimentConfig {
        method: Method::Dcbs,
        alpha: 0.05,
        max_len: 5,
        ..ExperimentConfig::default()
    };
    let (_, r) = run_experiment(&cfg, &model, &calib, &eval, None, &BTreeSet::new()).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let p = 0.95f64.powi(5);
    let bar = p - 3.0 * (p * (1.0 - p) / 5000.0).sqrt();
    s.check(
        "DCBS coverage (V=10, L=5, alpha=0.05)",
        r.coverage >= bar && secs < 30.0,
        format!("coverage {:.4} >= {bar:.4}, {secs:.2}s < 30s", r.coverage),
    );
}

struct Pair {
    dcbs: EvalReport,
    cover: EvalReport,
    cover_secs: f64,
    min_paths: Option<usize>,
}

fn long_tail_pair(seed: u64) -> Pair {
    let (cfg, model) = long_tail(seed);
    let calib = sample_dataset(&model, 5000, 1000 + seed).unwrap();
    let eval = sample_dataset(&model, 5000, 2000 + seed).unwrap();
    let (_, dcbs) = run_experiment(&long_tail_config(Method::Dcbs, seed), &model, &calib, &eval, None, &cfg.tail_tokens).unwrap();
    let t = Instant::now();
    let (_, cover) = run_experiment(&long_tail_config(Method::Cover, seed), &model, &calib, &eval, None, &cfg.tail_tokens).unwrap();
    Pair {
        dcbs,
        cover,
        cover_secs: t.elapsed().as_secs_f64(),
        min_paths: min_paths_for_mass(&model, 0.88, 8, 5_000_000).unwrap(),
    }
}

fn cover_and_retention(s: &mut Suite) {
    let runs: Vec<Pair> = (0..10).map(long_tail_pair).collect();
    let first = &runs[0];
    s.check(
        "CoVeR full-path coverage (V=20, L=8, w=4, M=4, alpha=0.1)",
        first.cover.coverage >= 0.88 && first.cover_secs < 120.0 && !first.cover.truncated,
        format!(
            "coverage {:.4} >= 0.88 (DCBS in the same run {:.4}, (1-alpha)^L = {:.4}), {:.1}s < 120s",
            first.cover.coverage,
            first.dcbs.coverage,
            0.9f64.powi(8),
            first.cover_secs
        ),
    );

    let cov_all: Vec<f64> = runs.iter().map(|r| r.cover.coverage).collect();
    println!(
        "  info: CoVeR coverage over 10 seeds min {:.4} mean {:.4}",
        cov_all.iter().cloned().fold(1.0, f64::min),
        mean(&cov_all)
    );

    let tail_c = mean(&runs.iter().map(|r| r.cover.tail_step_coverage).collect::<Vec<_>>());
    let tail_d = mean(&runs.iter().map(|r| r.dcbs.tail_step_coverage).collect::<Vec<_>>());
    s.check(
        "long-tail retention: tail step-coverage CoVeR > DCBS (10 seeds, lambda=1)",
        tail_c > tail_d,
        format!("CoVeR {tail_c:.4} vs DCBS {tail_d:.4}"),
    );

    let nodes_c = mean(&runs.iter().map(|r| r.cover.expanded_nodes as f64).collect::<Vec<_>>());
    let nodes_d = mean(&runs.iter().map(|r| r.dcbs.expanded_nodes as f64).collect::<Vec<_>>());
    // Any set covering 88% of fresh sequences holds at least `min_paths`
    // complete sequences, and each one is a kept node.
    let lower = mean(&runs.iter().map(|r| r.min_paths.map_or(5e6, |p| p as f64)).collect::<Vec<_>>());
    let proof = lower > 3.0 * nodes_d;
    s.infeasible(
        "long-tail retention: CoVeR mean expanded nodes <= 3x DCBS",
        nodes_c <= 3.0 * nodes_d,
        format!(
            "CoVeR {nodes_c:.0} vs 3x DCBS {:.0}; unattainable at coverage 0.88: every such set needs >= {lower:.0} nodes (mean over seeds)",
            3.0 * nodes_d
        ),
        proof,
    );
    s.check(
        "node-ratio infeasibility certificate",
        proof,
        format!("min paths for 0.88 mass {lower:.0} > 3x DCBS nodes {:.0}", 3.0 * nodes_d),
    );
}

fn decomposition(s: &mut Suite) {
    let mut violations = 0;
    let mut checked = 0;
    for seed in 0..100u64 {
        let model = make_longtail_model(&LongTailConfig::standard(10, 4, 4, 0.1, seed)).unwrap();
        let calib = sample_dataset(&model, 1000, 3 * seed + 1).unwrap();
        let eval = sample_dataset(&model, 1000, 3 * seed + 2).unwrap();
        let cfg = ExperimentConfig {
            method: Method::Cover,
            clusters: 2,
            bucket_width: 2,
            max_len: 4,
            budget: 200,
            seed,
            ..ExperimentConfig::default()
        };
        let (output, report) = run_experiment(&cfg, &model, &calib, &eval, None, &BTreeSet::new()).unwrap();
        let MethodOutput::Cover(m) = output else { unreachable!() };
        let refs: Vec<&ScoreTrace> = eval.iter().collect();
        let records = evaluate_paths(&refs, &m.rule(), &m.assignment);
        match pac::decomposition_audit(&records) {
            Ok(a) => {
                let sum: usize = a.first_failures.values().sum();
                if sum != a.not_covered || a.covered != report.covered || a.first_failures != report.first_failures {
                    violations += 1;
                }
            }
            Err(_) => violations += 1,
        }
        checked += 1;
    }
    s.check(
        "decomposition identity (100 seeds, exact)",
        violations == 0,
        format!("{violations} violations in {checked} runs"),
    );
}

fn optimizer_audit(s: &mut Suite) {
    let (_, model) = long_tail(0);
    let traces = sample_dataset(&model, 5000, 1000).unwrap();
    let mut details = Vec::new();
    let mut ok = true;
    for rule in [TradeoffRule::RaiseOnly, TradeoffRule::AnchorTransfer] {
        let mut cfg = long_tail_config(Method::Cover, 0).cover_config();
        cfg.rule = rule;
        let cal = calibrate(&traces, &cfg).unwrap();
        let d2 = cal.split.calibration_set(&traces);
        let index = CalibrationIndex::new(&d2, &cal.model.assignment);
        let opt = optimizer_config(&cfg);
        match replay_audit(&index, cfg.clustering.bucket_width, &opt, &cal.outcome) {
            Ok(r) => details.push(format!("{rule:?}: {} steps replayed, {} accepted", r.records, r.accepted)),
            Err(e) => {
                ok = false;
                details.push(format!("{rule:?}: {e}"));
            }
        }
        ok &= cal.outcome.phase1_covered >= cal.outcome.required_covered;
    }
    s.check("optimizer invariants (audit-log replay)", ok, details.join("; "));
}

fn optimizer_config(cfg: &CoverConfig) -> OptimizerConfig {
    OptimizerConfig {
        alpha: cfg.alpha,
        lambda: cfg.lambda,
        budget: cfg.budget,
        increment: cfg.increment,
        init_coord: cfg.init_coord,
        seed: cfg.optimizer_seed,
        rule: cfg.rule,
    }
}

fn bound_validity(s: &mut Suite) {
    let t = Instant::now();
    let model = make_longtail_model(&LongTailConfig::standard(6, 3, 3, 0.2, 7)).unwrap();
    let cfg = CoverConfig {
        alpha: 0.1,
        max_len: 3,
        budget: 500,
        clustering: cover_decode::ClusteringConfig {
            clusters: 2,
            bucket_width: 1,
            min_count: 20,
            ..Default::default()
        },
        ..CoverConfig::default()
    };
    let runs = 200u64;
    let (mut fail_app, mut fail_main) = (0, 0);
    let (mut bounds, mut truths) = (Vec::new(), Vec::new());
    for r in 0..runs {
        let traces = sample_dataset(&model, 8000, 10_000 + r).unwrap();
        let cfg = CoverConfig {
            split_seed: r,
            optimizer_seed: r,
            clustering: cover_decode::ClusteringConfig {
                seed: r,
                ..cfg.clustering.clone()
            },
            ..cfg.clone()
        };
        let cal = calibrate(&traces, &cfg).unwrap();
        let set = cover_decode(&model, &cal.model, 3, DEFAULT_MAX_NODES).unwrap();
        let mass: f64 = set.sequences.iter().map(|q| model.sequence_score(q).unwrap()).sum();
        let truth = 1.0 - mass;
        let d2 = cal.split.calibration_set(&traces);
        let records = evaluate_paths(&d2, &cal.model.rule(), &cal.model.assignment);
        let stats = pac::pair_stats_from_records(&records, cal.model.assignment.clusters, 3, 0.05, 0.05).unwrap();
        let app = pac::full_path_bound(&stats, pac::empirical_noncoverage(&records), BoundVariant::Appendix, HoeffdingSampleSize::PerPair).unwrap();
        let main = pac::full_path_bound(&stats, cfg.alpha, BoundVariant::Main, HoeffdingSampleSize::PerPair).unwrap();
        fail_app += (truth > app.aggregate) as usize;
        fail_main += (truth > main.aggregate) as usize;
        bounds.push(app.aggregate);
        truths.push(truth);
    }
    let secs = t.elapsed().as_secs_f64();
    let frac = fail_app as f64 / runs as f64;
    s.check(
        "bound validity (200 resamples, delta=zeta=0.05, appendix variant)",
        frac <= 0.10 && secs < 300.0,
        format!(
            "violation fraction {frac:.3} <= 0.10 (main variant {:.3}); mean bound {:.4}, mean true non-coverage {:.4}; {secs:.1}s < 300s",
            fail_main as f64 / runs as f64,
            mean(&bounds),
            mean(&truths)
        ),
    );
}

fn oracles(s: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut bad = 0;
    for _ in 0..10_000 {
        let n = rng.random_range(1..60);
        let values: Vec<f64> = (0..n).map(|_| (rng.random_range(0..40) as f64) / 8.0).collect();
        let tau: f64 = if rng.random_bool(0.2) {
            rng.random_range(0..=(n + 1)) as f64 / (n + 1) as f64
        } else {
            rng.random()
        };
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let mut k = 1;
        while k < n && ((k + 1) as f64) <= (n + 1) as f64 * tau + 1e-9 {
            k += 1;
        }
        if quantile(tau, &values).unwrap() != sorted[k - 1] {
            bad += 1;
        }
    }
    s.check("oracle: quantile vs sort (10^4 cases)", bad == 0, format!("{bad} mismatches"));

    let mut bad = 0;
    for seed in 0..50u64 {
        let model = common::random_model(4, 1, 3, seed);
        let traces = sample_dataset(&model, 600, seed + 500).unwrap();
        let cfg = CoverConfig {
            max_len: 3,
            budget: 300,
            split_seed: seed,
            optimizer_seed: seed,
            clustering: cover_decode::ClusteringConfig {
                clusters: 2,
                bucket_width: 1,
                min_count: 10,
                seed,
                ..Default::default()
            },
            ..CoverConfig::default()
        };
        let cal = calibrate(&traces, &cfg).unwrap();
        let rule = cal.model.rule();
        let set = cover_decode(&model, &cal.model, 3, DEFAULT_MAX_NODES).unwrap();
        if set.sequences != common::brute_force_set(&model, 3, |l, a| rule.threshold(l, a)) {
            bad += 1;
        }
    }
    s.check("oracle: cover_decode vs exhaustive filter (V=4, L=3, 50 seeds)", bad == 0, format!("{bad} mismatches"));

    let mut worst: f64 = 0.0;
    for &(delta, a, b) in &[(0.05, 50.0, 10.0), (0.5, 2.0, 5.0), (0.95, 3.0, 1.5), (0.1, 1.0, 1.0), (0.01, 200.0, 3.0)] {
        let dist = Beta::new(a, b).unwrap();
        let mut draws: Vec<f64> = (0..1_000_000).map(|_| dist.sample(&mut rng)).collect();
        draws.sort_by(f64::total_cmp);
        let mc = draws[((delta * draws.len() as f64).ceil() as usize).saturating_sub(1)];
        worst = worst.max((pac::beta_quantile(delta, a, b).unwrap() - mc).abs());
    }
    s.check("oracle: beta_quantile vs Monte Carlo (10^6 draws)", worst <= 2e-3, format!("max |error| {worst:.2e} <= 2e-3"));
}

fn main() {
    let mut s = Suite::default();
    split_cp(&mut s);
    dcbs(&mut s);
    cover_and_retention(&mut s);
    decomposition(&mut s);
    optimizer_audit(&mut s);
    bound_validity(&mut s);
    oracles(&mut s);
    if !s.waived.is_empty() {
        println!("infeasible targets (certificate holds): {}", s.waived.join(", "));
    }
    if !s.failed.is_empty() {
        println!("failed: {}", s.failed.join(", "));
        std::process::exit(1);
    }
}
