//! Finite-sample bound calculators and the non-coverage decomposition audit.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::clustering::Cluster;
use crate::cover::PathEvalRecord;
use crate::error::{Error, Result};
use crate::serde_ext;

fn check_level(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must lie in (0, 1), got {v}")))
    }
}

/// `mean + sqrt(2 var ln(3/delta) / n) + 3 ln(3/delta) / n`.
pub fn empirical_bernstein(mean: f64, var: f64, n: usize, delta: f64) -> Result<f64> {
    check_level("delta", delta)?;
    if n == 0 {
        return Err(Error::invalid("empirical Bernstein needs n >= 1"));
    }
    if var < 0.0 || !var.is_finite() || !mean.is_finite() {
        return Err(Error::invalid("mean and variance must be finite, variance non-negative"));
    }
    let log = (3.0 / delta).ln();
    let n = n as f64;
    Ok(mean + (2.0 * var * log / n).sqrt() + 3.0 * log / n)
}

/// `p_hat + sqrt(ln(2/zeta) / (2n))`, capped at 1.
pub fn hoeffding_upper(p_hat: f64, n: usize, zeta: f64) -> Result<f64> {
    check_level("zeta", zeta)?;
    if n == 0 {
        return Err(Error::invalid("Hoeffding bound needs n >= 1"));
    }
    Ok((p_hat + hoeffding_slack(n, zeta)).min(1.0))
}

fn hoeffding_slack(n: usize, zeta: f64) -> f64 {
    ((2.0 / zeta).ln() / (2.0 * n as f64)).sqrt()
}

/// `delta`-quantile of `Beta(a, b)` by bisection on the regularized
/// incomplete beta function.
pub fn beta_quantile(delta: f64, a: f64, b: f64) -> Result<f64> {
    check_level("delta", delta)?;
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
        return Err(Error::invalid(format!("beta parameters must be positive, got ({a}, {b})")));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if beta_reg(a, b, mid) < delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Statistics of one (step, cluster) pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub l: usize,
    pub m: Cluster,
    /// Traces that reached step `l` in the set with their step-`l` token in `m`.
    pub n_lm: usize,
    pub eps_hat: f64,
    pub v_hat: f64,
    /// Fraction of all traces whose step-`l` token is in `m`.
    pub p_hat: f64,
    /// Number of traces `p_hat` is computed from.
    pub n_total: usize,
    pub delta_lm: f64,
    pub zeta_lm: f64,
}

impl PairStats {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid(format!("pair ({}, {}): {msg}", self.l, self.m)));
        if !(0.0..=1.0).contains(&self.eps_hat) || !(0.0..=1.0).contains(&self.p_hat) {
            return bad("eps_hat and p_hat must lie in [0, 1]");
        }
        let cap = self.eps_hat * (1.0 - self.eps_hat) + if self.n_lm > 0 { 1.0 / self.n_lm as f64 } else { 0.0 };
        if self.v_hat < 0.0 || self.v_hat > cap + 1e-12 {
            return bad("v_hat out of range");
        }
        if self.n_total == 0 {
            return bad("n_total must be positive");
        }
        check_level("delta_lm", self.delta_lm)?;
        check_level("zeta_lm", self.zeta_lm)
    }

    /// Bernstein upper bound minus `eps_hat`, or `None` when `n_lm = 0`.
    pub fn bernstein_slack(&self) -> Result<Option<f64>> {
        if self.n_lm == 0 {
            return Ok(None);
        }
        Ok(Some(empirical_bernstein(self.eps_hat, self.v_hat, self.n_lm, self.delta_lm)? - self.eps_hat))
    }
}

/// Per-pair output of [`pair_failure_bound`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairBound {
    /// Hoeffding-inflated frequency, clipped to `[0, 1]`.
    pub frequency: f64,
    /// Bernstein-inflated conditional error, clipped to `[0, 1]`; 1 when the
    /// pair has no survivors.
    pub conditional: f64,
    pub bound: f64,
    /// Set when `n_lm = 0` made the conditional factor vacuous.
    pub vacuous: bool,
}

/// `(p_hat + Hoeffding slack) * (eps_hat + Bernstein slacks)`.
pub fn pair_failure_bound(stats: &PairStats) -> Result<PairBound> {
    stats.validate()?;
    let frequency = hoeffding_upper(stats.p_hat, stats.n_total, stats.zeta_lm)?.clamp(0.0, 1.0);
    let (conditional, vacuous) = match stats.n_lm {
        0 => (1.0, true),
        n => (empirical_bernstein(stats.eps_hat, stats.v_hat, n, stats.delta_lm)?.clamp(0.0, 1.0), false),
    };
    Ok(PairBound {
        frequency,
        conditional,
        bound: frequency * conditional,
        vacuous,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundVariant {
    /// Base term is the target level `alpha`.
    #[default]
    Main,
    /// Base term is the empirical full-path non-coverage.
    Appendix,
}

/// Sample size inside the frequency slack `sqrt(ln(2/zeta) / 2n)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoeffdingSampleSize {
    /// `n_lm` of the pair.
    #[default]
    PerPair,
    /// Total number of traces.
    Total,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairTerm {
    pub stats: PairStats,
    pub pair: PairBound,
    /// `p_hat * (Bernstein slack)`; `p_hat` when the pair has no survivors.
    pub error_slack_term: f64,
    /// `eps_hat * sqrt(ln(2/zeta) / 2 n_h)`, the root capped at 1.
    pub frequency_slack_term: f64,
}

impl PairTerm {
    pub fn contribution(&self) -> f64 {
        self.error_slack_term + self.frequency_slack_term
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub variant: BoundVariant,
    pub hoeffding_n: HoeffdingSampleSize,
    pub base: f64,
    pub pairs: Vec<PairTerm>,
    /// `base + sum of pair contributions`, unclipped.
    #[serde(with = "serde_ext::float")]
    pub aggregate: f64,
    pub aggregate_clipped: f64,
    /// `sum(delta_lm + zeta_lm)`.
    pub total_confidence: f64,
    pub vacuous_pairs: usize,
}

impl BoundReport {
    /// Recomputes the aggregate from the stored terms.
    pub fn recompute(&self) -> f64 {
        self.base + self.pairs.iter().map(PairTerm::contribution).sum::<f64>()
    }
}

/// Full-path non-coverage bound: `base + sum p_hat * (Bernstein slack) +
/// sum eps_hat * sqrt(ln(2/zeta) / 2 n_h)`.
pub fn full_path_bound(stats: &[PairStats], base: f64, variant: BoundVariant, hoeffding_n: HoeffdingSampleSize) -> Result<BoundReport> {
    if !(0.0..=1.0).contains(&base) {
        return Err(Error::invalid(format!("base term must lie in [0, 1], got {base}")));
    }
    let mut seen = BTreeSet::new();
    let mut pairs = Vec::with_capacity(stats.len());
    let mut total_confidence = 0.0;
    for s in stats {
        if !seen.insert((s.l, s.m)) {
            return Err(Error::invalid(format!("pair ({}, {}) listed twice", s.l, s.m)));
        }
        let pair = pair_failure_bound(s)?;
        total_confidence += s.delta_lm + s.zeta_lm;
        let error_slack_term = match s.bernstein_slack()? {
            Some(slack) => s.p_hat * slack,
            None => s.p_hat,
        };
        let n_h = match hoeffding_n {
            HoeffdingSampleSize::PerPair => s.n_lm,
            HoeffdingSampleSize::Total => s.n_total,
        };
        // eps_hat is 0 whenever n_lm is, so an empty pair adds nothing here.
        let frequency_slack_term = if s.eps_hat == 0.0 || n_h == 0 {
            0.0
        } else {
            s.eps_hat * hoeffding_upper(0.0, n_h, s.zeta_lm)?
        };
        pairs.push(PairTerm {
            stats: *s,
            pair,
            error_slack_term,
            frequency_slack_term,
        });
    }
    if total_confidence >= 1.0 {
        return Err(Error::invalid(format!("total confidence budget {total_confidence} must stay below 1")));
    }
    let vacuous_pairs = pairs.iter().filter(|p| p.pair.vacuous).count();
    let mut report = BoundReport {
        variant,
        hoeffding_n,
        base,
        pairs,
        aggregate: 0.0,
        aggregate_clipped: 0.0,
        total_confidence,
        vacuous_pairs,
    };
    report.aggregate = report.recompute();
    report.aggregate_clipped = report.aggregate.min(1.0);
    Ok(report)
}

/// Pair statistics from evaluation records over `rows` clusters and steps
/// `1..=max_len`. `delta` and `zeta` are split evenly across all pairs.
pub fn pair_stats_from_records(records: &[PathEvalRecord], clusters: usize, max_len: usize, delta: f64, zeta: f64) -> Result<Vec<PairStats>> {
    check_level("delta", delta)?;
    check_level("zeta", zeta)?;
    if records.is_empty() {
        return Err(Error::invalid("bounds need at least one evaluated trace"));
    }
    let rows = clusters + 1;
    let pairs = rows * max_len;
    let errors = crate::cover::pair_errors(records, rows, max_len);
    let mut members = vec![0usize; pairs];
    for rec in records {
        for s in rec.steps.iter().take(max_len) {
            members[(s.step - 1) * rows + s.cluster.row(clusters)] += 1;
        }
    }
    let n = records.len();
    let mut out = Vec::with_capacity(pairs);
    for l in 1..=max_len {
        for row in 0..rows {
            let i = (l - 1) * rows + row;
            let e = errors[i];
            let eps = e.rate();
            out.push(PairStats {
                l,
                m: Cluster::from_row(row, clusters),
                n_lm: e.survivors,
                eps_hat: eps,
                v_hat: eps * (1.0 - eps),
                p_hat: members[i] as f64 / n as f64,
                n_total: n,
                delta_lm: delta / pairs as f64,
                zeta_lm: zeta / pairs as f64,
            });
        }
    }
    Ok(out)
}

/// Empirical full-path non-coverage of a run.
pub fn empirical_noncoverage(records: &[PathEvalRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| !r.covered).count() as f64 / records.len() as f64
}

/// Exact tallies of first-failure events.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompositionAudit {
    pub n: usize,
    pub covered: usize,
    pub not_covered: usize,
    /// First-failure counts keyed `"l:m"`, non-zero cells only.
    pub first_failures: BTreeMap<String, usize>,
}

impl DecompositionAudit {
    pub fn total_failures(&self) -> usize {
        self.first_failures.values().sum()
    }
}

/// Checks that every trace is either covered or has exactly one first
/// failure, that the first failure agrees with its step records, and that the
/// per-pair first-failure tallies equal the failures among survivors.
pub fn decomposition_audit(records: &[PathEvalRecord]) -> Result<DecompositionAudit> {
    let mut first_failures: BTreeMap<(usize, Cluster), usize> = BTreeMap::new();
    let mut survivors_failed: BTreeMap<(usize, Cluster), usize> = BTreeMap::new();
    let mut covered = 0;
    for rec in records {
        let first_bad = rec.steps.iter().position(|s| !s.passed);
        let mut failed = false;
        for (i, s) in rec.steps.iter().enumerate() {
            if s.step != i + 1 {
                return Err(Error::Audit {
                    step: s.step,
                    cluster: s.cluster.label(),
                    message: format!("trace {} has out-of-order steps", rec.id),
                });
            }
            if failed && s.passed {
                return Err(Error::Audit {
                    step: s.step,
                    cluster: s.cluster.label(),
                    message: format!("trace {} passes after failing", rec.id),
                });
            }
            if !s.passed && !failed {
                *survivors_failed.entry((s.step, s.cluster)).or_default() += 1;
                failed = true;
            }
        }
        let indicator = match (&rec.first_failure, first_bad) {
            (None, None) => {
                if !rec.covered {
                    return Err(Error::Validation {
                        id: rec.id.clone(),
                        message: "uncovered trace without a first failure".into(),
                    });
                }
                covered += 1;
                0
            }
            (Some(f), Some(i)) if rec.steps[i].step == f.step && rec.steps[i].cluster == f.cluster && !rec.covered => {
                *first_failures.entry((f.step, f.cluster)).or_default() += 1;
                1
            }
            (f, _) => {
                let (step, cluster) = f.as_ref().map_or((0, String::new()), |f| (f.step, f.cluster.label()));
                return Err(Error::Audit {
                    step,
                    cluster,
                    message: format!("trace {} has an inconsistent first failure", rec.id),
                });
            }
        };
        debug_assert_eq!(indicator + rec.covered as usize, 1);
    }
    for (key, &count) in &first_failures {
        if survivors_failed.get(key).copied().unwrap_or(0) != count {
            return Err(Error::Audit {
                step: key.0,
                cluster: key.1.label(),
                message: "first-failure tally disagrees with survivor failures".into(),
            });
        }
    }
    if survivors_failed.len() != first_failures.len() {
        let (step, cluster) = survivors_failed
            .keys()
            .find(|k| !first_failures.contains_key(k))
            .copied()
            .unwrap_or((0, Cluster::Null));
        return Err(Error::Audit {
            step,
            cluster: cluster.label(),
            message: "survivor failure without a first failure".into(),
        });
    }
    let n = records.len();
    let audit = DecompositionAudit {
        n,
        covered,
        not_covered: n - covered,
        first_failures: first_failures
            .into_iter()
            .map(|((l, m), c)| (crate::cover::pair_key(l, m), c))
            .collect(),
    };
    if audit.total_failures() != audit.not_covered {
        return Err(Error::Audit {
            step: 0,
            cluster: String::new(),
            message: format!("{} first failures for {} uncovered traces", audit.total_failures(), audit.not_covered),
        });
    }
    Ok(audit)
}
