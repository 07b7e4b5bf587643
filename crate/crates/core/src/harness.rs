//! Experiment plumbing: calibrate a method, evaluate it on fresh traces,
//! compare methods and write reports.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{beam_search, beam_subgroup_calibrate, dcbs_calibrate, split_cp_calibrate, BeamSet, BeamSubgroupCalibration, DCBSCalibration};
use crate::clustering::{Cluster, ClusterAssignment, ClusteringConfig};
use crate::cover::{self, evaluate_paths, pair_errors, CalibratedModel, CoverConfig, FirstFailure, LambdaSchedule, PathEvalRecord, StepEval, TradeoffRule};
use crate::error::{Error, Result};
use crate::expand::{decode_with_rule, ConformalSet, PerStepRule, StepRule, DEFAULT_MAX_NODES};
use crate::pac::decomposition_audit;
use crate::scorer::Scorer;
use crate::trace::{ScoreTrace, Token};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Split,
    BeamSubgroup,
    Dcbs,
    Cover,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Split => "split",
            Method::BeamSubgroup => "beam-subgroup",
            Method::Dcbs => "dcbs",
            Method::Cover => "cover",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split" => Ok(Method::Split),
            "beam-subgroup" => Ok(Method::BeamSubgroup),
            "dcbs" => Ok(Method::Dcbs),
            "cover" => Ok(Method::Cover),
            other => Err(Error::invalid(format!("unknown method `{other}`"))),
        }
    }
}

/// Method parameters for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub alpha: f64,
    pub gamma: f64,
    pub lambda: LambdaSchedule,
    #[serde(rename = "M")]
    pub clusters: usize,
    pub min_count: usize,
    pub bucket_width: usize,
    pub tau_grid: Vec<f64>,
    pub budget: usize,
    pub increment: Option<f64>,
    pub tradeoff_rule: TradeoffRule,
    pub beam_width: usize,
    pub max_len: usize,
    pub max_nodes: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let c = CoverConfig::default();
        ExperimentConfig {
            method: Method::Cover,
            alpha: c.alpha,
            gamma: c.gamma,
            lambda: c.lambda,
            clusters: c.clustering.clusters,
            min_count: c.clustering.min_count,
            bucket_width: c.clustering.bucket_width,
            tau_grid: c.clustering.tau_grid,
            budget: c.budget,
            increment: None,
            tradeoff_rule: TradeoffRule::default(),
            beam_width: 8,
            max_len: c.max_len,
            max_nodes: DEFAULT_MAX_NODES,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if self.max_len == 0 || self.bucket_width == 0 || self.clusters == 0 || self.beam_width == 0 {
            return Err(Error::invalid("max_len, bucket_width, M and beam_width must be positive"));
        }
        if self.tau_grid.is_empty() || self.tau_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::invalid("tau_grid must be a non-empty list of levels in [0, 1]"));
        }
        Ok(())
    }

    pub fn cover_config(&self) -> CoverConfig {
        CoverConfig {
            alpha: self.alpha,
            gamma: self.gamma,
            lambda: self.lambda,
            clustering: ClusteringConfig {
                clusters: self.clusters,
                min_count: self.min_count,
                bucket_width: self.bucket_width,
                tau_grid: self.tau_grid.clone(),
                seed: self.seed,
                ..ClusteringConfig::default()
            },
            budget: self.budget,
            increment: self.increment,
            init_coord: None,
            rule: self.tradeoff_rule,
            split_seed: self.seed,
            optimizer_seed: self.seed,
            max_len: self.max_len,
        }
    }
}

/// A calibrated decoder of any supported method.
#[derive(Clone, Debug)]
pub enum MethodOutput {
    Split { alpha: f64, threshold: f64, max_len: usize },
    BeamSubgroup { calibration: BeamSubgroupCalibration, beam: BeamSet },
    Dcbs(DCBSCalibration),
    Cover(Box<CalibratedModel>),
}

impl MethodOutput {
    pub fn method(&self) -> Method {
        match self {
            MethodOutput::Split { .. } => Method::Split,
            MethodOutput::BeamSubgroup { .. } => Method::BeamSubgroup,
            MethodOutput::Dcbs(_) => Method::Dcbs,
            MethodOutput::Cover(_) => Method::Cover,
        }
    }
}

/// Calibrates `config.method` on `traces`. Beam search runs on `scorer`.
pub fn calibrate_method(config: &ExperimentConfig, scorer: &dyn Scorer, traces: &[ScoreTrace]) -> Result<MethodOutput> {
    config.validate()?;
    if traces.is_empty() {
        return Err(Error::invalid("calibration needs at least one trace"));
    }
    Ok(match config.method {
        Method::Split => {
            let finals: Vec<f64> = traces.iter().map(|t| t.score_at(t.len())).collect();
            MethodOutput::Split {
                alpha: config.alpha,
                threshold: split_cp_calibrate(&finals, config.alpha)?,
                max_len: config.max_len,
            }
        }
        Method::BeamSubgroup => {
            let beam = beam_search(scorer, config.beam_width, config.max_len)?;
            let calibration = beam_subgroup_calibrate(traces, &beam, config.alpha)?;
            MethodOutput::BeamSubgroup { calibration, beam }
        }
        Method::Dcbs => MethodOutput::Dcbs(dcbs_calibrate(traces, config.alpha, config.max_len)?),
        Method::Cover => MethodOutput::Cover(Box::new(cover::calibrate(traces, &config.cover_config())?.model)),
    })
}

/// Survivor-conditioned tallies of one (step, cluster) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCell {
    pub l: usize,
    pub m: Cluster,
    /// Traces whose step-`l` token is in `m`.
    pub members: usize,
    pub survivors: usize,
    pub failures: usize,
    /// `1 - failures / survivors`; 1 when there are no survivors.
    pub step_coverage: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub decode_secs: f64,
    pub evaluate_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub n: usize,
    pub covered: usize,
    pub coverage: f64,
    /// Complete sequences in the prediction set.
    pub path_count: usize,
    pub expanded_nodes: usize,
    pub nodes_per_step: Vec<usize>,
    pub truncated: bool,
    /// The toy scorer is input-free, so each run yields a single set and the
    /// mean and median coincide with `path_count`.
    pub mean_set_size: f64,
    pub median_set_size: f64,
    pub pairs: Vec<PairCell>,
    /// Non-zero first-failure counts keyed `"l:m"`.
    pub first_failures: BTreeMap<String, usize>,
    /// (trace, step) pairs whose step token is a tail token.
    pub tail_steps: usize,
    /// Of those, the ones whose prefix is kept.
    pub tail_steps_covered: usize,
    pub tail_step_coverage: f64,
    /// Order-independent digest of the evaluation trace ids.
    pub eval_digest: String,
    pub config: Option<ExperimentConfig>,
    pub timing: Timing,
}

impl EvalReport {
    /// Equality ignoring wall-clock timing.
    pub fn same_results(&self, other: &EvalReport) -> bool {
        let strip = |r: &EvalReport| EvalReport {
            timing: Timing::default(),
            ..r.clone()
        };
        strip(self) == strip(other)
    }
}

/// Evaluation-time context shared by all methods.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    /// Clusters used for the per-pair table. CoVeR runs use their own map
    /// when this is `None`; other methods fall back to a single cluster.
    pub assignment: Option<&'a ClusterAssignment>,
    pub tail_tokens: &'a BTreeSet<Token>,
    pub max_len: usize,
    pub max_nodes: usize,
}

/// Fails when any evaluation id also appears among the calibration ids.
pub fn check_disjoint(calibration: &[ScoreTrace], eval: &[ScoreTrace]) -> Result<()> {
    let ids: HashSet<&str> = calibration.iter().map(|t| t.id.as_str()).collect();
    match eval.iter().find(|t| ids.contains(t.id.as_str())) {
        Some(t) => Err(Error::Overlap(t.id.clone())),
        None => Ok(()),
    }
}

/// FNV-1a over the sorted ids.
pub fn eval_digest(traces: &[ScoreTrace]) -> String {
    let mut ids: Vec<&str> = traces.iter().map(|t| t.id.as_str()).collect();
    ids.sort_unstable();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for id in ids {
        for b in id.bytes().chain(std::iter::once(0xff)) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Step records for an explicit set: step `l` passes iff the length-`l`
/// prefix extends to a member, and the last step iff the trace is a member.
pub fn set_records(set: &[Vec<Token>], traces: &[ScoreTrace], assignment: &ClusterAssignment) -> Vec<PathEvalRecord> {
    let members: HashSet<&[Token]> = set.iter().map(Vec::as_slice).collect();
    let prefixes: HashSet<&[Token]> = set.iter().flat_map(|s| (1..=s.len()).map(move |l| &s[..l])).collect();
    traces
        .par_iter()
        .map(|t| {
            let mut first_failure = None;
            let steps = (1..=t.len())
                .map(|l| {
                    let cluster = assignment.cluster_of(l, t.token_at(l));
                    let prefix = &t.tokens[..l];
                    let ok = if l == t.len() { members.contains(prefix) } else { prefixes.contains(prefix) };
                    if !ok && first_failure.is_none() {
                        first_failure = Some(FirstFailure { step: l, cluster });
                    }
                    StepEval {
                        step: l,
                        cluster,
                        score: t.score_at(l),
                        threshold: f64::NAN,
                        passed: first_failure.is_none(),
                    }
                })
                .collect();
            PathEvalRecord {
                id: t.id.clone(),
                steps,
                covered: first_failure.is_none(),
                first_failure,
            }
        })
        .collect()
}

fn vocab_assignment(scorer: &dyn Scorer, max_len: usize) -> ClusterAssignment {
    ClusterAssignment::single(max_len, max_len, (0..scorer.vocab_size() as u32).map(Token))
}

/// Runs the calibrated decoder and scores it on `eval`.
pub fn evaluate(
    output: &MethodOutput,
    scorer: &dyn Scorer,
    eval: &[ScoreTrace],
    calibration: &[ScoreTrace],
    ctx: &EvalContext<'_>,
) -> Result<EvalReport> {
    check_disjoint(calibration, eval)?;
    if eval.is_empty() {
        return Err(Error::invalid("evaluation needs at least one trace"));
    }
    let fallback;
    let assignment = match (ctx.assignment, output) {
        (Some(a), _) => a,
        (None, MethodOutput::Cover(m)) => &m.assignment,
        (None, _) => {
            fallback = vocab_assignment(scorer, ctx.max_len);
            &fallback
        }
    };
    let refs: Vec<&ScoreTrace> = eval.iter().collect();

    let start = Instant::now();
    let (set, records) = match output {
        MethodOutput::Split { threshold, max_len, .. } => {
            // Prefix scores never increase, so a constant per-step cutoff
            // keeps exactly the sequences whose full score clears it.
            let rule = PerStepRule(vec![*threshold; *max_len]);
            step_rule_run(scorer, &rule, &refs, assignment, ctx)?
        }
        MethodOutput::Dcbs(c) => step_rule_run(scorer, c, &refs, assignment, ctx)?,
        MethodOutput::Cover(m) => step_rule_run(scorer, &m.rule(), &refs, assignment, ctx)?,
        MethodOutput::BeamSubgroup { calibration, beam } => {
            let sequences = {
                let mut s = calibration.predict(beam);
                s.sort();
                s
            };
            let prefixes: BTreeSet<&[Token]> = sequences.iter().flat_map(|s| (1..=s.len()).map(move |l| &s[..l])).collect();
            let mut nodes_per_step = vec![0; ctx.max_len];
            for p in &prefixes {
                if p.len() <= ctx.max_len {
                    nodes_per_step[p.len() - 1] += 1;
                }
            }
            let records = set_records(&sequences, eval, assignment);
            let set = ConformalSet {
                expanded_nodes: prefixes.len(),
                sequences,
                nodes_per_step,
                truncated: false,
            };
            (set, records)
        }
    };
    let decode_secs = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let audit = decomposition_audit(&records)?;
    let rows = assignment.rows();
    let max_len = ctx.max_len;
    let errors = pair_errors(&records, rows, max_len);
    let mut member_counts = vec![0usize; rows * max_len];
    let mut tail_steps = 0;
    let mut tail_steps_covered = 0;
    for (t, rec) in eval.iter().zip(&records) {
        for s in &rec.steps {
            if s.step <= max_len {
                member_counts[(s.step - 1) * rows + s.cluster.row(assignment.clusters)] += 1;
            }
            if ctx.tail_tokens.contains(&t.token_at(s.step)) {
                tail_steps += 1;
                tail_steps_covered += s.passed as usize;
            }
        }
    }
    let pairs = (1..=max_len)
        .flat_map(|l| (0..rows).map(move |row| (l, row)))
        .map(|(l, row)| {
            let e = errors[(l - 1) * rows + row];
            PairCell {
                l,
                m: Cluster::from_row(row, assignment.clusters),
                members: member_counts[(l - 1) * rows + row],
                survivors: e.survivors,
                failures: e.failures,
                step_coverage: 1.0 - e.rate(),
            }
        })
        .collect();
    let n = eval.len();
    let path_count = set.len();
    let report = EvalReport {
        method: output.method(),
        n,
        covered: audit.covered,
        coverage: audit.covered as f64 / n as f64,
        path_count,
        expanded_nodes: set.expanded_nodes,
        nodes_per_step: set.nodes_per_step,
        truncated: set.truncated,
        mean_set_size: path_count as f64,
        median_set_size: path_count as f64,
        pairs,
        first_failures: audit.first_failures,
        tail_steps,
        tail_steps_covered,
        tail_step_coverage: if tail_steps == 0 { 1.0 } else { tail_steps_covered as f64 / tail_steps as f64 },
        eval_digest: eval_digest(eval),
        config: None,
        timing: Timing {
            decode_secs,
            evaluate_secs: start.elapsed().as_secs_f64(),
        },
    };
    Ok(report)
}

fn step_rule_run(
    scorer: &dyn Scorer,
    rule: &dyn StepRule,
    eval: &[&ScoreTrace],
    assignment: &ClusterAssignment,
    ctx: &EvalContext<'_>,
) -> Result<(ConformalSet, Vec<PathEvalRecord>)> {
    let set = decode_with_rule(scorer, rule, ctx.max_len, ctx.max_nodes)?;
    let records = evaluate_paths(eval, &LimitRule { inner: rule, max_len: ctx.max_len }, assignment);
    Ok((set, records))
}

/// Blocks every step past `max_len`, matching what expansion can produce.
struct LimitRule<'a> {
    inner: &'a dyn StepRule,
    max_len: usize,
}

impl StepRule for LimitRule<'_> {
    fn threshold(&self, l: usize, token: Token) -> f64 {
        if l > self.max_len {
            f64::INFINITY
        } else {
            self.inner.threshold(l, token)
        }
    }
}

/// Calibrates and evaluates one configuration.
pub fn run_experiment(
    config: &ExperimentConfig,
    scorer: &dyn Scorer,
    calibration: &[ScoreTrace],
    eval: &[ScoreTrace],
    assignment: Option<&ClusterAssignment>,
    tail_tokens: &BTreeSet<Token>,
) -> Result<(MethodOutput, EvalReport)> {
    check_disjoint(calibration, eval)?;
    let output = calibrate_method(config, scorer, calibration)?;
    let ctx = EvalContext {
        assignment,
        tail_tokens,
        max_len: config.max_len,
        max_nodes: config.max_nodes,
    };
    let mut report = evaluate(&output, scorer, eval, calibration, &ctx)?;
    report.config = Some(config.clone());
    Ok((output, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodDelta {
    pub method: Method,
    /// Difference to the first report.
    pub tail_step_coverage: f64,
    pub mean_set_size: f64,
    pub expanded_nodes: f64,
    pub coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub reports: Vec<EvalReport>,
    pub deltas: Vec<MethodDelta>,
}

/// Side-by-side reports with deltas to the first one. All reports must come
/// from the same evaluation traces.
pub fn compare(reports: Vec<EvalReport>) -> Result<ComparisonReport> {
    let Some(first) = reports.first() else {
        return Err(Error::invalid("nothing to compare"));
    };
    if let Some(r) = reports.iter().find(|r| r.eval_digest != first.eval_digest) {
        return Err(Error::invalid(format!(
            "evaluation sets differ between {} and {}",
            first.method.name(),
            r.method.name()
        )));
    }
    let deltas = reports
        .iter()
        .map(|r| MethodDelta {
            method: r.method,
            tail_step_coverage: r.tail_step_coverage - first.tail_step_coverage,
            mean_set_size: r.mean_set_size - first.mean_set_size,
            expanded_nodes: r.expanded_nodes as f64 - first.expanded_nodes as f64,
            coverage: r.coverage - first.coverage,
        })
        .collect();
    Ok(ComparisonReport { reports, deltas })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::invalid(format!("unknown report format `{other}`"))),
        }
    }
}

/// One CSV line: a pair cell or the run summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub row: String,
    pub method: String,
    pub l: Option<usize>,
    pub m: Option<String>,
    pub members: Option<usize>,
    pub survivors: Option<usize>,
    pub failures: Option<usize>,
    pub step_coverage: Option<f64>,
    pub n: Option<usize>,
    pub covered: Option<usize>,
    pub coverage: Option<f64>,
    pub path_count: Option<usize>,
    pub expanded_nodes: Option<usize>,
    pub tail_step_coverage: Option<f64>,
}

pub fn csv_rows(report: &EvalReport) -> Vec<CsvRow> {
    let method = report.method.name().to_string();
    let empty = CsvRow {
        row: String::new(),
        method: method.clone(),
        l: None,
        m: None,
        members: None,
        survivors: None,
        failures: None,
        step_coverage: None,
        n: None,
        covered: None,
        coverage: None,
        path_count: None,
        expanded_nodes: None,
        tail_step_coverage: None,
    };
    let mut rows: Vec<CsvRow> = report
        .pairs
        .iter()
        .map(|p| CsvRow {
            row: "pair".into(),
            l: Some(p.l),
            m: Some(p.m.label()),
            members: Some(p.members),
            survivors: Some(p.survivors),
            failures: Some(p.failures),
            step_coverage: Some(p.step_coverage),
            ..empty.clone()
        })
        .collect();
    rows.push(CsvRow {
        row: "summary".into(),
        n: Some(report.n),
        covered: Some(report.covered),
        coverage: Some(report.coverage),
        path_count: Some(report.path_count),
        expanded_nodes: Some(report.expanded_nodes),
        tail_step_coverage: Some(report.tail_step_coverage),
        ..empty
    });
    rows
}

fn write_csv(rows: &[CsvRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_report(report: &EvalReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    match format {
        ReportFormat::Json => fs::write(path, serde_json::to_string_pretty(report)? + "\n")?,
        ReportFormat::Csv => write_csv(&csv_rows(report), path.as_ref())?,
    }
    Ok(())
}

pub fn emit_comparison(report: &ComparisonReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    match format {
        ReportFormat::Json => fs::write(path, serde_json::to_string_pretty(report)? + "\n")?,
        ReportFormat::Csv => {
            let rows: Vec<CsvRow> = report.reports.iter().flat_map(csv_rows).collect();
            write_csv(&rows, path.as_ref())?
        }
    }
    Ok(())
}

pub fn load_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Smallest number of complete sequences whose total probability reaches
/// `mass`, found by best-first enumeration. Any prediction set covering a
/// fraction `mass` of fresh sequences has at least this many paths in
/// expectation, which makes it a lower bound for every method. Returns `None`
/// when more than `max_paths` sequences would be needed.
pub fn min_paths_for_mass(scorer: &dyn Scorer, mass: f64, max_len: usize, max_paths: usize) -> Result<Option<usize>> {
    use std::cmp::Ordering;
    use std::collections::BinaryHeap;

    struct Entry(f64, Vec<Token>);
    impl PartialEq for Entry {
        fn eq(&self, o: &Self) -> bool {
            self.cmp(o) == Ordering::Equal
        }
    }
    impl Eq for Entry {}
    impl PartialOrd for Entry {
        fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
            Some(self.cmp(o))
        }
    }
    impl Ord for Entry {
        fn cmp(&self, o: &Self) -> Ordering {
            self.0.total_cmp(&o.0).then_with(|| o.1.cmp(&self.1))
        }
    }

    let max_len = max_len.min(scorer.max_len());
    let terminator = scorer.terminator();
    let mut heap = BinaryHeap::from([Entry(1.0, Vec::new())]);
    let (mut covered, mut paths) = (0.0, 0usize);
    while let Some(Entry(p, seq)) = heap.pop() {
        let complete = !seq.is_empty() && (seq.len() == max_len || seq.last().copied() == terminator);
        if complete {
            covered += p;
            paths += 1;
            if covered >= mass {
                return Ok(Some(paths));
            }
            if paths >= max_paths {
                return Ok(None);
            }
            continue;
        }
        for (a, s) in scorer.next_token_scores(&seq)?.into_iter().enumerate() {
            if s > 0.0 {
                let mut child = seq.clone();
                child.push(Token(a as u32));
                heap.push(Entry(s, child));
            }
        }
    }
    Ok(if covered >= mass { Some(paths) } else { None })
}
