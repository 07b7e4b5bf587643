//! Reference conformal decoders: split conformal prediction, beam search with
//! in-beam calibration, and dynamic conformal beam search (DCBS).

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expand::{decode_with_rule, ConformalSet, StepRule};
use crate::pac::beta_quantile;
use crate::scorer::Scorer;
use crate::serde_ext;
use crate::trace::{order_rank, quantile, removal_count, ScoreTrace, Token};

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Split conformal threshold: the `floor((N + 1) alpha)`-th smallest score.
/// Sets keep every candidate scoring at least the threshold.
pub fn split_cp_calibrate(scores: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::invalid("split conformal calibration needs scores"));
    }
    quantile(alpha, scores)
}

/// Single-step prediction set `{a : score(a) >= threshold}`.
pub fn split_cp_set(scorer: &dyn Scorer, threshold: f64) -> Result<Vec<Token>> {
    let scores = crate::scorer::next_token_scores(scorer, &[])?;
    Ok(scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= threshold)
        .map(|(a, _)| Token(a as u32))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamCandidate {
    pub tokens: Vec<Token>,
    /// Scorer output for the whole candidate.
    pub score: f64,
}

/// Beam search output, best candidate first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamSet {
    pub candidates: Vec<BeamCandidate>,
    pub width: usize,
}

impl BeamSet {
    pub fn contains(&self, seq: &[Token]) -> bool {
        self.candidates.iter().any(|c| c.tokens == seq)
    }
}

fn rank(a: &BeamCandidate, b: &BeamCandidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Standard beam search. Finished candidates stay in the pool and compete with
/// fresh expansions; ties go to the lexicographically smaller sequence.
pub fn beam_search(scorer: &dyn Scorer, width: usize, max_len: usize) -> Result<BeamSet> {
    if width < 1 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    if !scorer.supports_expansion() {
        return Err(Error::Unsupported("beam search needs an expandable scorer"));
    }
    let max_len = max_len.min(scorer.max_len());
    let terminator = scorer.terminator();
    let is_done = |c: &BeamCandidate| c.tokens.len() >= max_len || c.tokens.last().copied() == terminator.filter(|_| !c.tokens.is_empty());

    let mut beam = vec![BeamCandidate {
        tokens: Vec::new(),
        score: f64::INFINITY,
    }];
    for _ in 0..max_len {
        let mut pool = Vec::new();
        for cand in &beam {
            if !cand.tokens.is_empty() && is_done(cand) {
                pool.push(cand.clone());
                continue;
            }
            let scores = scorer.next_token_scores(&cand.tokens)?;
            for (a, s) in scores.into_iter().enumerate() {
                let mut tokens = cand.tokens.clone();
                tokens.push(Token(a as u32));
                pool.push(BeamCandidate { tokens, score: s });
            }
        }
        pool.sort_by(rank);
        pool.truncate(width);
        beam = pool;
        if beam.iter().all(is_done) {
            break;
        }
    }
    Ok(BeamSet {
        candidates: beam,
        width,
    })
}

/// Split conformal calibration restricted to calibration traces whose full
/// sequence was proposed by beam search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamSubgroupCalibration {
    #[serde(with = "serde_ext::float")]
    pub threshold: f64,
    pub alpha: f64,
    /// `|B|`, calibration traces inside the beam.
    pub in_beam: usize,
    /// `N`, all calibration traces.
    pub total: usize,
    /// Set when no calibration trace fell inside the beam.
    pub empty_subgroup: bool,
}

impl BeamSubgroupCalibration {
    /// Calibration points excluded by the beam.
    pub fn excluded(&self) -> usize {
        self.total - self.in_beam
    }

    /// `(1 - alpha) * B(delta; |B|, N + 1 - |B|)`. The second Beta parameter
    /// is the Clopper-Pearson one; counting `N_beta` as the excluded points
    /// instead gives `B(delta; |B|, |B| + 1)`, which sits near 1/2 whatever
    /// the beam's mass and is not a lower bound.
    pub fn coverage_lower_bound(&self, delta: f64) -> Result<f64> {
        if self.in_beam == 0 {
            return Ok(0.0);
        }
        let b = (self.total + 1 - self.in_beam) as f64;
        Ok((1.0 - self.alpha) * beta_quantile(delta, self.in_beam as f64, b)?)
    }

    /// Prediction set: beam candidates scoring at least the threshold.
    pub fn predict(&self, beam: &BeamSet) -> Vec<Vec<Token>> {
        let mut out: Vec<Vec<Token>> = beam
            .candidates
            .iter()
            .filter(|c| c.score >= self.threshold)
            .map(|c| c.tokens.clone())
            .collect();
        out.sort();
        out
    }
}

/// The toy scorers are unconditional, so one beam serves every trace.
pub fn beam_subgroup_calibrate(
    traces: &[ScoreTrace],
    beam: &BeamSet,
    alpha: f64,
) -> Result<BeamSubgroupCalibration> {
    check_alpha(alpha)?;
    let members: HashSet<&[Token]> = beam.candidates.iter().map(|c| c.tokens.as_slice()).collect();
    let scores: Vec<f64> = traces
        .iter()
        .filter(|t| !t.is_empty() && members.contains(t.tokens.as_slice()))
        .map(|t| t.score_at(t.len()))
        .collect();
    let empty_subgroup = scores.is_empty();
    if empty_subgroup {
        log::warn!("no calibration trace falls inside the beam; threshold is +inf");
    }
    Ok(BeamSubgroupCalibration {
        threshold: if empty_subgroup { f64::INFINITY } else { quantile(alpha, &scores)? },
        alpha,
        in_beam: scores.len(),
        total: traces.len(),
        empty_subgroup,
    })
}

/// Per-step thresholds of dynamic conformal beam search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DCBSCalibration {
    pub alpha: f64,
    /// `thresholds[l - 1]` is the step-`l` cutoff.
    #[serde(with = "serde_ext::float_vec")]
    pub thresholds: Vec<f64>,
    /// Surviving traces still alive at each step (the step-`l` pool).
    pub pool_sizes: Vec<usize>,
    /// `k` removed at each step, `floor((pool + 1) alpha)`.
    pub removed: Vec<usize>,
    /// `N_0 = |D|`, then `N_l = pool_l - k_l`.
    pub surviving_counts: Vec<usize>,
    /// First step whose pool was empty, if any.
    pub exhausted_at: Option<usize>,
}

impl DCBSCalibration {
    pub fn max_len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn threshold(&self, l: usize) -> f64 {
        self.thresholds.get(l - 1).copied().unwrap_or(f64::INFINITY)
    }
}

/// At step `l`, sorts surviving traces that reach `l` by their length-`l`
/// score, takes `Q_l` as the `k`-th smallest with `k = floor((n + 1) alpha)`
/// (clamped to at least 1), and drops the `k` lowest.
pub fn dcbs_calibrate(traces: &[ScoreTrace], alpha: f64, max_len: usize) -> Result<DCBSCalibration> {
    check_alpha(alpha)?;
    let mut survivors: Vec<usize> = (0..traces.len()).collect();
    let mut out = DCBSCalibration {
        alpha,
        thresholds: Vec::with_capacity(max_len),
        pool_sizes: Vec::with_capacity(max_len),
        removed: Vec::with_capacity(max_len),
        surviving_counts: vec![traces.len()],
        exhausted_at: None,
    };
    for l in 1..=max_len {
        let mut pool: Vec<usize> = survivors.iter().copied().filter(|&i| traces[i].len() >= l).collect();
        let n = pool.len();
        out.pool_sizes.push(n);
        if n == 0 {
            if out.exhausted_at.is_none() {
                log::warn!("DCBS calibration ran out of traces at step {l}; later thresholds are +inf");
                out.exhausted_at = Some(l);
            }
            out.thresholds.push(f64::INFINITY);
            out.removed.push(0);
            out.surviving_counts.push(0);
            survivors.clear();
            continue;
        }
        pool.sort_by(|&a, &b| {
            traces[a]
                .score_at(l)
                .total_cmp(&traces[b].score_at(l))
                .then(a.cmp(&b))
        });
        let k = removal_count(alpha, n);
        let idx = order_rank(alpha, n);
        out.thresholds.push(traces[pool[idx - 1]].score_at(l));
        out.removed.push(k);
        survivors = pool.split_off(k);
        out.surviving_counts.push(survivors.len());
    }
    Ok(out)
}

impl StepRule for DCBSCalibration {
    fn threshold(&self, l: usize, _token: Token) -> f64 {
        DCBSCalibration::threshold(self, l)
    }
}

pub fn dcbs_decode(scorer: &dyn Scorer, calib: &DCBSCalibration, max_len: usize, max_nodes: usize) -> Result<ConformalSet> {
    decode_with_rule(scorer, calib, max_len, max_nodes)
}
