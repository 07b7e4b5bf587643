//! Cluster-step conformal calibration.
//!
//! Every (step, cluster) pair gets its own quantile level `beta[m, l]` and the
//! threshold `Q_l(m)` is the conformal quantile of the calibration scores of
//! the tokens in that cluster at that step. A sequence is kept at step `l` iff
//! its prefix score reaches the threshold of the cluster its step-`l` token
//! belongs to. Quantile levels are chosen by a greedy trade-off search that
//! keeps the full-path calibration coverage at or above `1 - alpha` while
//! maximizing `sum Q_l(m) - lambda[l, m] * err[l, m]`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{bucket_of, bucket_steps, cluster_tokens, BucketClustering, Cluster, ClusterAssignment, ClusteringConfig};
use crate::error::{Error, Result};
use crate::expand::{decode_with_rule, ConformalSet, StepRule};
use crate::scorer::Scorer;
use crate::serde_ext;
use crate::trace::{quantile_sorted, split_dataset, CalibrationSplit, ScoreTrace, Token};

/// Coverage comparisons are done on counts; this absorbs rounding in
/// `n * (1 - alpha)`.
const COUNT_SLACK: f64 = 1e-9;

/// Quantile levels, one per (cluster row, step bucket). All steps of a bucket
/// share a level; rows are the `M` groups followed by null.
#[derive(Clone, Debug, PartialEq)]
pub struct BetaMatrix {
    rows: usize,
    bucket_width: usize,
    max_len: usize,
    values: Vec<f64>,
}

impl BetaMatrix {
    pub fn filled(rows: usize, bucket_width: usize, max_len: usize, value: f64) -> Self {
        let buckets = max_len.div_ceil(bucket_width.max(1));
        BetaMatrix {
            rows,
            bucket_width: bucket_width.max(1),
            max_len,
            values: vec![value.clamp(0.0, 1.0); rows * buckets],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, bucket_width: usize, max_len: usize) -> Result<Self> {
        let buckets = max_len.div_ceil(bucket_width.max(1));
        if rows.iter().any(|r| r.len() != buckets) {
            return Err(Error::invalid(format!("beta rows must have {buckets} bucket entries")));
        }
        if rows.iter().flatten().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::invalid("beta entries must lie in [0, 1]"));
        }
        Ok(BetaMatrix {
            rows: rows.len(),
            bucket_width: bucket_width.max(1),
            max_len,
            values: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn buckets(&self) -> usize {
        self.values.len() / self.rows.max(1)
    }

    pub fn bucket_width(&self) -> usize {
        self.bucket_width
    }

    /// Level for row `row` at 1-based step `l`.
    pub fn get(&self, row: usize, l: usize) -> f64 {
        self.coord(row, bucket_of(l, self.bucket_width))
    }

    pub fn coord(&self, row: usize, bucket: usize) -> f64 {
        self.values[row * self.buckets() + bucket]
    }

    pub fn set_coord(&mut self, row: usize, bucket: usize, value: f64) {
        let b = self.buckets();
        self.values[row * b + bucket] = value.clamp(0.0, 1.0);
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.buckets()).map(<[f64]>::to_vec).collect()
    }

    /// Steps covered by `bucket`.
    pub fn steps(&self, bucket: usize) -> std::ops::RangeInclusive<usize> {
        let start = bucket * self.bucket_width + 1;
        start..=(start + self.bucket_width - 1).min(self.max_len)
    }
}

/// Thresholds `Q_l(m)` indexed by 1-based step and cluster row.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdTable {
    rows: usize,
    max_len: usize,
    values: Vec<f64>,
}

impl ThresholdTable {
    pub fn filled(rows: usize, max_len: usize, value: f64) -> Self {
        ThresholdTable {
            rows,
            max_len,
            values: vec![value; rows * max_len],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn get(&self, l: usize, row: usize) -> f64 {
        if l == 0 || l > self.max_len {
            return f64::INFINITY;
        }
        self.values[(l - 1) * self.rows + row]
    }

    pub fn set(&mut self, l: usize, row: usize, value: f64) {
        self.values[(l - 1) * self.rows + row] = value;
    }

    /// `"l:m"` keyed map used in persisted models.
    pub fn to_map(&self) -> BTreeMap<String, f64> {
        let m = self.rows - 1;
        let mut out = BTreeMap::new();
        for l in 1..=self.max_len {
            for row in 0..self.rows {
                out.insert(pair_key(l, Cluster::from_row(row, m)), self.get(l, row));
            }
        }
        out
    }
}

pub fn pair_key(l: usize, cluster: Cluster) -> String {
    format!("{l}:{cluster}")
}

fn parse_pair_key(key: &str) -> Result<(usize, Cluster)> {
    let (l, m) = key
        .split_once(':')
        .ok_or_else(|| Error::invalid(format!("bad pair key `{key}`")))?;
    let l = l
        .parse::<usize>()
        .map_err(|_| Error::invalid(format!("bad step in `{key}`")))?;
    Ok((l, Cluster::parse(m)?))
}

/// Thresholds combined with the cluster map that selects them.
#[derive(Clone, Copy)]
pub struct ClusterRule<'a> {
    pub thresholds: &'a ThresholdTable,
    pub assignment: &'a ClusterAssignment,
}

impl StepRule for ClusterRule<'_> {
    fn threshold(&self, l: usize, token: Token) -> f64 {
        let row = self.assignment.cluster_of(l, token).row(self.assignment.clusters);
        self.thresholds.get(l, row)
    }
}

/// One evaluated step of a trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepEval {
    pub step: usize,
    pub cluster: Cluster,
    pub score: f64,
    #[serde(with = "serde_ext::float")]
    pub threshold: f64,
    /// The length-`step` prefix is in the conformal set. False for every step
    /// after the first failure.
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstFailure {
    pub step: usize,
    pub cluster: Cluster,
}

/// Step-by-step evaluation of one trace against a decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathEvalRecord {
    pub id: String,
    pub steps: Vec<StepEval>,
    pub first_failure: Option<FirstFailure>,
    pub covered: bool,
}

/// Full-path coverage indicator of `trace` under `rule`, with clusters taken
/// from `assignment` for bookkeeping.
pub fn coverage_indicator(trace: &ScoreTrace, rule: &dyn StepRule, assignment: &ClusterAssignment) -> PathEvalRecord {
    let mut steps = Vec::with_capacity(trace.len());
    let mut first_failure = None;
    for l in 1..=trace.len() {
        let token = trace.token_at(l);
        let cluster = assignment.cluster_of(l, token);
        let threshold = rule.threshold(l, token);
        let score = trace.score_at(l);
        let ok = score >= threshold;
        if !ok && first_failure.is_none() {
            first_failure = Some(FirstFailure { step: l, cluster });
        }
        steps.push(StepEval {
            step: l,
            cluster,
            score,
            threshold,
            passed: ok && first_failure.is_none(),
        });
    }
    PathEvalRecord {
        id: trace.id.clone(),
        steps,
        covered: first_failure.is_none(),
        first_failure,
    }
}

pub fn evaluate_paths(traces: &[&ScoreTrace], rule: &dyn StepRule, assignment: &ClusterAssignment) -> Vec<PathEvalRecord> {
    traces
        .par_iter()
        .map(|t| coverage_indicator(t, rule, assignment))
        .collect()
}

/// Survivor-conditioned error of one (step, cluster) pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    /// Traces whose step-`l` token is in the cluster and whose first `l - 1`
    /// prefixes were kept.
    pub survivors: usize,
    /// Those among them whose length-`l` prefix was dropped.
    pub failures: usize,
}

impl PairError {
    pub fn rate(&self) -> f64 {
        if self.survivors == 0 {
            0.0
        } else {
            self.failures as f64 / self.survivors as f64
        }
    }
}

/// Survivor and failure tallies for every (step, row) pair, replayed from
/// evaluation records.
pub fn pair_errors(records: &[PathEvalRecord], rows: usize, max_len: usize) -> Vec<PairError> {
    let m = rows - 1;
    let mut out = vec![PairError::default(); rows * max_len];
    for rec in records {
        for s in &rec.steps {
            if s.step > max_len {
                break;
            }
            let cell = &mut out[(s.step - 1) * rows + s.cluster.row(m)];
            cell.survivors += 1;
            if !s.passed {
                cell.failures += 1;
                break;
            }
        }
    }
    out
}

/// Empirical error `err[l, m]` from evaluation records.
pub fn empirical_cluster_error(l: usize, cluster: Cluster, records: &[PathEvalRecord]) -> PairError {
    let mut cell = PairError::default();
    for rec in records {
        let Some(s) = rec.steps.get(l - 1) else { continue };
        let survived = rec.steps[..l - 1].iter().all(|p| p.passed);
        if survived && s.cluster == cluster {
            cell.survivors += 1;
            if !s.passed {
                cell.failures += 1;
            }
        }
    }
    cell
}

/// Cached view of the proper calibration set: per trace the (row, score) of
/// each step, and per (step, row) the members and the sorted scores the
/// threshold is taken from. The null row's threshold uses every step-`l`
/// score.
#[derive(Clone, Debug)]
pub struct CalibrationIndex {
    rows: usize,
    max_len: usize,
    n: usize,
    steps: Vec<Vec<(usize, f64)>>,
    sorted: Vec<Vec<f64>>,
    members: Vec<Vec<u32>>,
}

impl CalibrationIndex {
    pub fn new(traces: &[&ScoreTrace], assignment: &ClusterAssignment) -> Self {
        let rows = assignment.rows();
        let m = assignment.clusters;
        let max_len = assignment.max_len;
        let mut sorted = vec![Vec::new(); rows * max_len];
        let mut members = vec![Vec::new(); rows * max_len];
        let mut steps = Vec::with_capacity(traces.len());
        for (i, t) in traces.iter().enumerate() {
            let mut s = Vec::with_capacity(t.len());
            for l in 1..=t.len().min(max_len) {
                let row = assignment.cluster_of(l, t.token_at(l)).row(m);
                let score = t.score_at(l);
                s.push((row, score));
                members[(l - 1) * rows + row].push(i as u32);
                if row != m {
                    sorted[(l - 1) * rows + row].push(score);
                }
                sorted[(l - 1) * rows + m].push(score);
            }
            // Steps past max_len have no threshold and always fail.
            if t.len() > max_len {
                s.push((m, f64::NEG_INFINITY));
            }
            steps.push(s);
        }
        for v in &mut sorted {
            v.sort_by(f64::total_cmp);
        }
        CalibrationIndex {
            rows,
            max_len,
            n: traces.len(),
            steps,
            sorted,
            members,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// `|I_2^l(m)|`: traces whose step-`l` token maps to `row`.
    pub fn member_count(&self, l: usize, row: usize) -> usize {
        self.members[(l - 1) * self.rows + row].len()
    }

    /// Scores the `(l, row)` threshold is computed from, ascending.
    pub fn threshold_scores(&self, l: usize, row: usize) -> &[f64] {
        &self.sorted[(l - 1) * self.rows + row]
    }

    pub fn quantile(&self, beta: &BetaMatrix, l: usize, row: usize) -> f64 {
        quantile_sorted(beta.get(row, l), self.threshold_scores(l, row))
    }

    pub fn thresholds(&self, beta: &BetaMatrix) -> ThresholdTable {
        let mut table = ThresholdTable::filled(self.rows, self.max_len, f64::INFINITY);
        for l in 1..=self.max_len {
            for row in 0..self.rows {
                table.set(l, row, self.quantile(beta, l, row));
            }
        }
        table
    }

    /// Covered count and per-pair error tallies under `thresholds`.
    pub fn tally(&self, thresholds: &ThresholdTable) -> (usize, Vec<PairError>) {
        let mut cells = vec![PairError::default(); self.rows * self.max_len];
        let mut covered = 0;
        for steps in &self.steps {
            let mut ok = true;
            for (l0, &(row, score)) in steps.iter().enumerate() {
                if l0 >= self.max_len {
                    ok = false;
                    break;
                }
                let cell = &mut cells[l0 * self.rows + row];
                cell.survivors += 1;
                if score < thresholds.get(l0 + 1, row) {
                    cell.failures += 1;
                    ok = false;
                    break;
                }
            }
            covered += ok as usize;
        }
        (covered, cells)
    }
}

/// `Q_l(m; beta)` on the calibration set.
pub fn cluster_quantile(beta: &BetaMatrix, l: usize, cluster: Cluster, index: &CalibrationIndex) -> f64 {
    index.quantile(beta, l, cluster.row(index.rows - 1))
}

/// Regularization weights `lambda[l, m]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum LambdaSchedule {
    /// Same weight for every pair.
    Uniform(f64),
    /// `c * |I_2^l(m)| / |I_2|`, which turns the penalty into `c` times the
    /// pair's share of calibration failures.
    CountScaled(f64),
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        LambdaSchedule::Uniform(1.0)
    }
}

impl LambdaSchedule {
    pub fn table(&self, index: &CalibrationIndex) -> Vec<f64> {
        let mut out = vec![0.0; index.rows * index.max_len];
        for l in 1..=index.max_len {
            for row in 0..index.rows {
                out[(l - 1) * index.rows + row] = match *self {
                    LambdaSchedule::Uniform(c) => c,
                    LambdaSchedule::CountScaled(c) => {
                        if index.n == 0 {
                            0.0
                        } else {
                            c * index.member_count(l, row) as f64 / index.n as f64
                        }
                    }
                };
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    /// `sum Q - lambda * err` over pairs with a finite threshold.
    pub value: f64,
    pub threshold_sum: f64,
    pub penalty: f64,
    pub covered: usize,
    pub n: usize,
}

impl ObjectiveValue {
    pub fn coverage(&self) -> f64 {
        if self.n == 0 {
            1.0
        } else {
            self.covered as f64 / self.n as f64
        }
    }
}

fn objective_from(thresholds: &ThresholdTable, cells: &[PairError], covered: usize, n: usize, lambda: &[f64]) -> ObjectiveValue {
    let mut threshold_sum = 0.0;
    let mut penalty = 0.0;
    for (i, &q) in thresholds.values.iter().enumerate() {
        // Pairs without calibration data sit at +inf and carry no signal.
        if q.is_finite() {
            threshold_sum += q;
            penalty += lambda[i] * cells[i].rate();
        }
    }
    ObjectiveValue {
        value: threshold_sum - penalty,
        threshold_sum,
        penalty,
        covered,
        n,
    }
}

/// Objective of `beta`, plus the calibration coverage it achieves.
pub fn objective(beta: &BetaMatrix, index: &CalibrationIndex, lambda: &LambdaSchedule) -> ObjectiveValue {
    let thresholds = index.thresholds(beta);
    let (covered, cells) = index.tally(&thresholds);
    objective_from(&thresholds, &cells, covered, index.n, &lambda.table(index))
}

/// How a phase-2 trial moves the levels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TradeoffRule {
    /// Raise the sampled level by the increment while coverage stays strictly
    /// above target; the anchor level is left unchanged.
    #[default]
    RaiseOnly,
    /// Lower the anchor level in increments until coverage is strictly above
    /// target (or the anchor reaches 0), then raise the sampled level as in
    /// `RaiseOnly`.
    AnchorTransfer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub alpha: f64,
    pub lambda: LambdaSchedule,
    /// Trade-off budget `B`.
    pub budget: usize,
    /// Trade-off increment; `1 / |I_2|` when unset.
    pub increment: Option<f64>,
    /// Anchor `(row, bucket)`; the pair with the most members when unset.
    pub init_coord: Option<(usize, usize)>,
    pub seed: u64,
    pub rule: TradeoffRule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            alpha: 0.1,
            lambda: LambdaSchedule::default(),
            budget: 2000,
            increment: None,
            init_coord: None,
            seed: 0,
            rule: TradeoffRule::default(),
        }
    }
}

/// One phase-2 trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRecord {
    pub iter: usize,
    pub row: usize,
    pub bucket: usize,
    pub anchor_level: f64,
    pub from: f64,
    pub to: f64,
    pub objective_before: f64,
    pub objective_after: f64,
    pub covered_after: usize,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationOutcome {
    #[serde(skip)]
    pub beta: Option<BetaMatrix>,
    pub anchor: (usize, usize),
    pub increment: f64,
    pub phase1_steps: usize,
    pub phase1_covered: usize,
    pub phase1_objective: f64,
    pub final_objective: ObjectiveValue,
    /// Minimum covered count that satisfies the constraint.
    pub required_covered: usize,
    pub log: Vec<TradeoffRecord>,
}

/// Incrementally maintained coverage of the calibration set.
struct CoverageState<'a> {
    index: &'a CalibrationIndex,
    thresholds: ThresholdTable,
    failing_steps: Vec<u32>,
    covered: usize,
}

impl<'a> CoverageState<'a> {
    fn new(index: &'a CalibrationIndex, beta: &BetaMatrix) -> Self {
        let thresholds = index.thresholds(beta);
        let failing_steps: Vec<u32> = index
            .steps
            .iter()
            .map(|steps| {
                steps
                    .iter()
                    .enumerate()
                    .filter(|(l0, &(row, score))| score < thresholds.get(l0 + 1, row))
                    .count() as u32
            })
            .collect();
        let covered = failing_steps.iter().filter(|&&f| f == 0).count();
        CoverageState {
            index,
            thresholds,
            failing_steps,
            covered,
        }
    }

    fn set_threshold(&mut self, l: usize, row: usize, new: f64) {
        let old = self.thresholds.get(l, row);
        if old == new {
            return;
        }
        self.thresholds.set(l, row, new);
        for &i in &self.index.members[(l - 1) * self.index.rows + row] {
            let score = self.index.steps[i as usize][l - 1].1;
            let (was, now) = (score >= old, score >= new);
            let f = &mut self.failing_steps[i as usize];
            match (was, now) {
                (true, false) => {
                    if *f == 0 {
                        self.covered -= 1;
                    }
                    *f += 1;
                }
                (false, true) => {
                    *f -= 1;
                    if *f == 0 {
                        self.covered += 1;
                    }
                }
                _ => {}
            }
        }
    }

    fn apply(&mut self, beta: &BetaMatrix, row: usize, bucket: usize) {
        for l in beta.steps(bucket) {
            let q = self.index.quantile(beta, l, row);
            self.set_threshold(l, row, q);
        }
    }

    fn objective(&self, lambda: &[f64]) -> ObjectiveValue {
        let (covered, cells) = self.index.tally(&self.thresholds);
        debug_assert_eq!(covered, self.covered);
        objective_from(&self.thresholds, &cells, covered, self.index.n, lambda)
    }
}

struct Constraint {
    target: f64,
}

impl Constraint {
    fn satisfied(&self, covered: usize) -> bool {
        covered as f64 >= self.target - COUNT_SLACK
    }

    fn strict(&self, covered: usize) -> bool {
        covered as f64 > self.target + COUNT_SLACK
    }

    fn with_margin(&self, covered: usize) -> bool {
        covered as f64 >= self.target + 1.0 - COUNT_SLACK
    }
}

/// Pair with the most calibration members, summed over the bucket.
pub fn default_anchor(index: &CalibrationIndex, bucket_width: usize) -> (usize, usize) {
    let buckets = bucket_steps(index.max_len, bucket_width).unwrap_or_default();
    let mut best = ((0, 0), 0usize);
    for (b, steps) in buckets.iter().enumerate() {
        for row in 0..index.rows {
            let count: usize = steps.clone().map(|l| index.member_count(l, row)).sum();
            if count > best.1 {
                best = ((row, b), count);
            }
        }
    }
    best.0
}

/// Greedy trade-off search for the quantile levels.
///
/// Phase 1 starts from all levels at 0 except the anchor at 1 and lowers the
/// anchor by `1/|I_2|` until calibration coverage reaches `1 - alpha + 1/|I_2|`.
/// Phase 2 runs `budget` trials on uniformly drawn non-anchor coordinates; a
/// trial is kept only when it strictly improves the objective. Coverage never
/// drops below `1 - alpha` along the way.
pub fn optimize(index: &CalibrationIndex, bucket_width: usize, config: &OptimizerConfig) -> Result<OptimizationOutcome> {
    let alpha = config.alpha;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if index.is_empty() {
        return Err(Error::invalid("optimizer needs calibration traces"));
    }
    let n = index.n;
    let step = 1.0 / n as f64;
    let increment = config.increment.unwrap_or(step);
    if !(increment > 0.0) {
        return Err(Error::invalid("trade-off increment must be positive"));
    }
    let constraint = Constraint {
        target: n as f64 * (1.0 - alpha),
    };
    let lambda = config.lambda.table(index);

    let mut beta = BetaMatrix::filled(index.rows, bucket_width, index.max_len, 0.0);
    let buckets = beta.buckets();
    let anchor = config.init_coord.unwrap_or_else(|| default_anchor(index, bucket_width));
    if anchor.0 >= index.rows || anchor.1 >= buckets {
        return Err(Error::invalid(format!("anchor {anchor:?} outside the level matrix")));
    }
    beta.set_coord(anchor.0, anchor.1, 1.0);
    let mut state = CoverageState::new(index, &beta);

    let mut phase1_steps = 0;
    let mut level = 1.0;
    while !constraint.with_margin(state.covered) && level > 0.0 {
        phase1_steps += 1;
        level = (1.0 - phase1_steps as f64 / n as f64).max(0.0);
        beta.set_coord(anchor.0, anchor.1, level);
        state.apply(&beta, anchor.0, anchor.1);
    }
    if !constraint.satisfied(state.covered) {
        return Err(Error::Infeasible(format!(
            "calibration coverage {}/{} below 1 - alpha with every level at 0",
            state.covered, n
        )));
    }
    let phase1_covered = state.covered;
    let mut current = state.objective(&lambda);
    let phase1_objective = current.value;

    let coords: Vec<(usize, usize)> = (0..index.rows)
        .flat_map(|r| (0..buckets).map(move |b| (r, b)))
        .filter(|&c| c != anchor)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::with_capacity(config.budget);

    for iter in 1..=config.budget {
        if coords.is_empty() {
            break;
        }
        let (row, bucket) = coords[rng.random_range(0..coords.len())];
        let from = beta.coord(row, bucket);
        let anchor_from = beta.coord(anchor.0, anchor.1);
        let mut trial = beta.clone();

        if config.rule == TradeoffRule::AnchorTransfer {
            let mut lowered = 0usize;
            while !constraint.strict(state.covered) && trial.coord(anchor.0, anchor.1) > 0.0 {
                lowered += 1;
                trial.set_coord(anchor.0, anchor.1, anchor_from - lowered as f64 * increment);
                state.apply(&trial, anchor.0, anchor.1);
            }
        }
        let mut raised = 0usize;
        loop {
            if !constraint.strict(state.covered) {
                break;
            }
            let cur = trial.coord(row, bucket);
            let cand = (from + (raised + 1) as f64 * increment).min(1.0);
            if cand <= cur {
                break;
            }
            trial.set_coord(row, bucket, cand);
            state.apply(&trial, row, bucket);
            if !constraint.satisfied(state.covered) {
                trial.set_coord(row, bucket, cur);
                state.apply(&trial, row, bucket);
                break;
            }
            raised += 1;
        }

        let changed = trial != beta;
        let candidate = if changed { state.objective(&lambda) } else { current };
        let accepted = changed && constraint.satisfied(state.covered) && candidate.value > current.value;
        log.push(TradeoffRecord {
            iter,
            row,
            bucket,
            anchor_level: trial.coord(anchor.0, anchor.1),
            from,
            to: trial.coord(row, bucket),
            objective_before: current.value,
            objective_after: candidate.value,
            covered_after: candidate.covered,
            accepted,
        });
        if accepted {
            beta = trial;
            current = candidate;
        } else if changed {
            state.apply(&beta, row, bucket);
            state.apply(&beta, anchor.0, anchor.1);
        }
    }

    let required_covered = (constraint.target - COUNT_SLACK).ceil().max(0.0) as usize;
    Ok(OptimizationOutcome {
        beta: Some(beta),
        anchor,
        increment,
        phase1_steps,
        phase1_covered,
        phase1_objective,
        final_objective: current,
        required_covered,
        log,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverConfig {
    pub alpha: f64,
    /// Fraction of the calibration traces used for clustering.
    pub gamma: f64,
    pub lambda: LambdaSchedule,
    pub clustering: ClusteringConfig,
    pub budget: usize,
    pub increment: Option<f64>,
    pub init_coord: Option<(usize, usize)>,
    pub rule: TradeoffRule,
    pub split_seed: u64,
    pub optimizer_seed: u64,
    pub max_len: usize,
}

impl Default for CoverConfig {
    fn default() -> Self {
        CoverConfig {
            alpha: 0.1,
            gamma: 0.5,
            lambda: LambdaSchedule::default(),
            clustering: ClusteringConfig::default(),
            budget: 2000,
            increment: None,
            init_coord: None,
            rule: TradeoffRule::default(),
            split_seed: 0,
            optimizer_seed: 0,
            max_len: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub split: u64,
    pub clustering: u64,
    pub optimizer: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    pub clustering: usize,
    pub calibration: usize,
    pub calibration_covered: usize,
    pub budget: usize,
    pub accepted_tradeoffs: usize,
    pub anchor: (usize, usize),
}

/// Everything needed to decode with calibrated cluster-step thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibratedModel {
    pub alpha: f64,
    pub lambda_schedule: LambdaSchedule,
    /// `lambda[l, m]` as used by the optimizer, `"l:m"` keyed.
    pub lambda: BTreeMap<String, f64>,
    pub clustering: ClusteringConfig,
    pub rule: TradeoffRule,
    pub max_len: usize,
    pub assignment: ClusterAssignment,
    pub beta: BetaMatrix,
    pub thresholds: ThresholdTable,
    pub seeds: Seeds,
    pub counts: Counts,
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    alpha: f64,
    lambda: BTreeMap<String, f64>,
    lambda_schedule: LambdaSchedule,
    bucket_width: usize,
    tau_grid: Vec<f64>,
    #[serde(rename = "M")]
    clusters: usize,
    min_count: usize,
    max_len: usize,
    tradeoff_rule: TradeoffRule,
    assignment: BTreeMap<usize, BTreeMap<Token, Cluster>>,
    beta: Vec<Vec<f64>>,
    #[serde(with = "serde_ext::float_map")]
    thresholds: BTreeMap<String, f64>,
    seeds: Seeds,
    counts: Counts,
    clustering_restarts: usize,
    clustering_max_iters: usize,
}

impl CalibratedModel {
    pub fn rule(&self) -> ClusterRule<'_> {
        ClusterRule {
            thresholds: &self.thresholds,
            assignment: &self.assignment,
        }
    }

    pub fn threshold(&self, l: usize, cluster: Cluster) -> f64 {
        self.thresholds.get(l, cluster.row(self.assignment.clusters))
    }

    /// Recomputes thresholds from `beta` on `calibration` and compares them
    /// bit for bit with the stored ones.
    pub fn thresholds_consistent(&self, calibration: &[&ScoreTrace]) -> bool {
        let index = CalibrationIndex::new(calibration, &self.assignment);
        index.thresholds(&self.beta) == self.thresholds
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDocument {
            alpha: self.alpha,
            lambda: self.lambda.clone(),
            lambda_schedule: self.lambda_schedule,
            bucket_width: self.assignment.bucket_width,
            tau_grid: self.clustering.tau_grid.clone(),
            clusters: self.assignment.clusters,
            min_count: self.clustering.min_count,
            max_len: self.max_len,
            tradeoff_rule: self.rule,
            assignment: self.assignment.buckets.iter().cloned().enumerate().collect(),
            beta: self.beta.to_rows(),
            thresholds: self.thresholds.to_map(),
            seeds: self.seeds.clone(),
            counts: self.counts.clone(),
            clustering_restarts: self.clustering.restarts,
            clustering_max_iters: self.clustering.max_iters,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        let buckets = doc.max_len.div_ceil(doc.bucket_width.max(1));
        if doc.assignment.len() != buckets || doc.assignment.keys().enumerate().any(|(i, &k)| i != k) {
            return Err(Error::invalid(format!("assignment must list buckets 0..{buckets}")));
        }
        let assignment = ClusterAssignment {
            clusters: doc.clusters,
            bucket_width: doc.bucket_width,
            max_len: doc.max_len,
            buckets: doc.assignment.into_values().collect(),
        };
        if doc.beta.len() != assignment.rows() {
            return Err(Error::invalid("beta needs one row per cluster plus null"));
        }
        let beta = BetaMatrix::from_rows(doc.beta, doc.bucket_width, doc.max_len)?;
        let mut thresholds = ThresholdTable::filled(assignment.rows(), doc.max_len, f64::INFINITY);
        let mut seen = 0;
        for (key, value) in &doc.thresholds {
            let (l, cluster) = parse_pair_key(key)?;
            let row = cluster.row(doc.clusters);
            if l == 0 || l > doc.max_len || row >= assignment.rows() {
                return Err(Error::invalid(format!("threshold key `{key}` out of range")));
            }
            thresholds.set(l, row, *value);
            seen += 1;
        }
        if seen != assignment.rows() * doc.max_len {
            return Err(Error::invalid("threshold table is incomplete"));
        }
        Ok(CalibratedModel {
            alpha: doc.alpha,
            lambda_schedule: doc.lambda_schedule,
            lambda: doc.lambda,
            clustering: ClusteringConfig {
                clusters: doc.clusters,
                min_count: doc.min_count,
                bucket_width: doc.bucket_width,
                tau_grid: doc.tau_grid,
                seed: doc.seeds.clustering,
                restarts: doc.clustering_restarts,
                max_iters: doc.clustering_max_iters,
            },
            rule: doc.tradeoff_rule,
            max_len: doc.max_len,
            assignment,
            beta,
            thresholds,
            seeds: doc.seeds,
            counts: doc.counts,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Result of the full calibration pipeline.
#[derive(Clone, Debug)]
pub struct Calibration {
    pub model: CalibratedModel,
    pub split: CalibrationSplit,
    pub outcome: OptimizationOutcome,
    pub bucket_fits: Vec<BucketClustering>,
}

/// Split, cluster on the first part, optimize levels on the second part.
pub fn calibrate(traces: &[ScoreTrace], config: &CoverConfig) -> Result<Calibration> {
    if config.max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {}", config.alpha)));
    }
    let split = split_dataset(traces, config.gamma, config.split_seed)?;
    let d1 = split.clustering_set(traces);
    let d2 = split.calibration_set(traces);
    if d2.is_empty() {
        return Err(Error::invalid("gamma leaves no traces for threshold calibration"));
    }
    let (assignment, bucket_fits) = cluster_tokens(&d1, config.max_len, &config.clustering)?;
    let index = CalibrationIndex::new(&d2, &assignment);
    let opt = OptimizerConfig {
        alpha: config.alpha,
        lambda: config.lambda,
        budget: config.budget,
        increment: config.increment,
        init_coord: config.init_coord,
        seed: config.optimizer_seed,
        rule: config.rule,
    };
    let outcome = optimize(&index, config.clustering.bucket_width, &opt)?;
    let beta = outcome.beta.clone().expect("optimizer returns levels");
    let thresholds = index.thresholds(&beta);
    let lambda_table = config.lambda.table(&index);
    let m = assignment.clusters;
    let mut lambda = BTreeMap::new();
    for l in 1..=config.max_len {
        for row in 0..assignment.rows() {
            lambda.insert(pair_key(l, Cluster::from_row(row, m)), lambda_table[(l - 1) * assignment.rows() + row]);
        }
    }
    let model = CalibratedModel {
        alpha: config.alpha,
        lambda_schedule: config.lambda,
        lambda,
        clustering: config.clustering.clone(),
        rule: config.rule,
        max_len: config.max_len,
        counts: Counts {
            total: traces.len(),
            clustering: d1.len(),
            calibration: d2.len(),
            calibration_covered: outcome.final_objective.covered,
            budget: config.budget,
            accepted_tradeoffs: outcome.log.iter().filter(|r| r.accepted).count(),
            anchor: outcome.anchor,
        },
        assignment,
        beta,
        thresholds,
        seeds: Seeds {
            split: config.split_seed,
            clustering: config.clustering.seed,
            optimizer: config.optimizer_seed,
        },
    };
    Ok(Calibration {
        model,
        split,
        outcome,
        bucket_fits,
    })
}

/// Conformal set under the calibrated cluster-step thresholds.
pub fn cover_decode(scorer: &dyn Scorer, model: &CalibratedModel, max_len: usize, max_nodes: usize) -> Result<ConformalSet> {
    decode_with_rule(scorer, &model.rule(), max_len, max_nodes)
}

/// Result of replaying an optimizer log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplaySummary {
    pub records: usize,
    pub accepted: usize,
    pub phase1_covered: usize,
    pub final_objective: f64,
}

fn replay_error(rec: &TradeoffRecord, m: usize, message: String) -> Error {
    Error::Audit {
        step: rec.bucket,
        cluster: Cluster::from_row(rec.row, m).label(),
        message: format!("iteration {}: {message}", rec.iter),
    }
}

/// Rebuilds the phase-1 point, re-applies every accepted trade-off from the
/// log and recomputes objective and coverage from scratch at each step. Fails
/// on the first record whose stored values disagree, whose acceptance did not
/// strictly improve the objective, or that breaks the coverage constraint.
pub fn replay_audit(index: &CalibrationIndex, bucket_width: usize, config: &OptimizerConfig, outcome: &OptimizationOutcome) -> Result<ReplaySummary> {
    let n = index.len();
    let m = index.rows() - 1;
    let constraint = Constraint {
        target: n as f64 * (1.0 - config.alpha),
    };
    let mut beta = BetaMatrix::filled(index.rows(), bucket_width, index.max_len(), 0.0);
    let (ar, ab) = outcome.anchor;
    beta.set_coord(ar, ab, (1.0 - outcome.phase1_steps as f64 / n as f64).max(0.0));
    let mut current = objective(&beta, index, &config.lambda);
    if current.covered != outcome.phase1_covered || !constraint.satisfied(current.covered) {
        return Err(Error::Audit {
            step: ab,
            cluster: Cluster::from_row(ar, m).label(),
            message: format!("phase-1 coverage {} does not match the log or the constraint", current.covered),
        });
    }
    if current.value != outcome.phase1_objective {
        return Err(Error::Audit {
            step: ab,
            cluster: Cluster::from_row(ar, m).label(),
            message: "phase-1 objective does not match the log".into(),
        });
    }
    let mut accepted = 0;
    for rec in &outcome.log {
        if rec.objective_before != current.value {
            return Err(replay_error(rec, m, "objective_before differs from the replayed objective".into()));
        }
        if !rec.accepted {
            continue;
        }
        accepted += 1;
        beta.set_coord(ar, ab, rec.anchor_level);
        beta.set_coord(rec.row, rec.bucket, rec.to);
        let next = objective(&beta, index, &config.lambda);
        if next.value != rec.objective_after || next.covered != rec.covered_after {
            return Err(replay_error(rec, m, "stored objective or coverage differs from recomputation".into()));
        }
        if !(next.value > current.value) {
            return Err(replay_error(rec, m, "accepted trade-off did not improve the objective".into()));
        }
        if !constraint.satisfied(next.covered) {
            return Err(replay_error(rec, m, format!("coverage {}/{n} below target", next.covered)));
        }
        current = next;
    }
    if outcome.beta.as_ref().is_some_and(|b| *b != beta) || current != outcome.final_objective {
        return Err(Error::Audit {
            step: ab,
            cluster: Cluster::from_row(ar, m).label(),
            message: "replayed levels differ from the returned ones".into(),
        });
    }
    Ok(ReplaySummary {
        records: outcome.log.len(),
        accepted,
        phase1_covered: outcome.phase1_covered,
        final_objective: current.value,
    })
}
