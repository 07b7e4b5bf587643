//! Score traces, the calibration split, and the order-statistic quantile rule
//! shared by every calibrator in the crate.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vocabulary index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u32);

impl Token {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One calibration or evaluation example: the observed token sequence and the
/// conformity score of every prefix. `prefix_scores[l - 1]` scores
/// `tokens[..l]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrace {
    pub id: String,
    pub tokens: Vec<Token>,
    pub prefix_scores: Vec<f64>,
}

impl ScoreTrace {
    pub fn new(id: impl Into<String>, tokens: Vec<Token>, prefix_scores: Vec<f64>) -> Result<Self> {
        let trace = ScoreTrace {
            id: id.into(),
            tokens,
            prefix_scores,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.prefix_scores.len() {
            return Err(Error::Validation {
                id: self.id.clone(),
                message: format!(
                    "{} tokens but {} prefix scores",
                    self.tokens.len(),
                    self.prefix_scores.len()
                ),
            });
        }
        if let Some(pos) = self.prefix_scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Validation {
                id: self.id.clone(),
                message: format!("non-finite prefix score at step {}", pos + 1),
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token at 1-based step `l`.
    pub fn token_at(&self, l: usize) -> Token {
        self.tokens[l - 1]
    }

    /// Score of the length-`l` prefix (1-based).
    pub fn score_at(&self, l: usize) -> f64 {
        self.prefix_scores[l - 1]
    }

    /// True when scores never increase along the trace, which holds for
    /// probability-product scores.
    pub fn is_non_increasing(&self) -> bool {
        self.prefix_scores.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Slack used when flooring `(n + 1) * tau`, so that levels built from repeated
/// `1/n` steps land on the intended order statistic.
const RANK_GUARD: f64 = 1e-9;

/// 1-based rank `k = clamp(floor((n + 1) * tau), 1, n)` for a set of size `n >= 1`.
pub fn order_rank(tau: f64, n: usize) -> usize {
    debug_assert!(n >= 1);
    let raw = ((n as f64 + 1.0) * tau + RANK_GUARD).floor();
    if raw < 1.0 {
        1
    } else if raw >= n as f64 {
        n
    } else {
        raw as usize
    }
}

/// Unclamped `floor((n + 1) * level)`, the removal count used by step-wise
/// calibration.
pub fn removal_count(level: f64, n: usize) -> usize {
    let raw = ((n as f64 + 1.0) * level + RANK_GUARD).floor();
    if raw <= 0.0 {
        0
    } else {
        (raw as usize).min(n)
    }
}

/// Quantile of an already ascending slice; `+inf` for an empty slice.
pub fn quantile_sorted(tau: f64, sorted: &[f64]) -> f64 {
    if sorted.is_empty() {
        return f64::INFINITY;
    }
    sorted[order_rank(tau, sorted.len()) - 1]
}

/// The `k`-th smallest element of `values` with
/// `k = clamp(floor((|values| + 1) * tau), 1, |values|)`, or `+inf` when
/// `values` is empty.
pub fn quantile(tau: f64, values: &[f64]) -> Result<f64> {
    if tau.is_nan() {
        return Err(Error::invalid("quantile level is NaN"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("quantile input contains NaN"));
    }
    if values.is_empty() {
        return Ok(f64::INFINITY);
    }
    let k = order_rank(tau, values.len());
    let mut scratch = values.to_vec();
    let (_, kth, _) = scratch.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

/// Random partition of a calibration set into a clustering part and a proper
/// calibration part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSplit {
    /// Indices used to build the clustering (ascending).
    pub clustering: Vec<usize>,
    /// Indices used to fit thresholds (ascending).
    pub calibration: Vec<usize>,
    pub gamma: f64,
    pub seed: u64,
}

impl CalibrationSplit {
    pub fn clustering_set<'a>(&self, traces: &'a [ScoreTrace]) -> Vec<&'a ScoreTrace> {
        self.clustering.iter().map(|&i| &traces[i]).collect()
    }

    pub fn calibration_set<'a>(&self, traces: &'a [ScoreTrace]) -> Vec<&'a ScoreTrace> {
        self.calibration.iter().map(|&i| &traces[i]).collect()
    }
}

/// Shuffles indices with a seeded ChaCha stream and takes the first
/// `floor(gamma * N)` for clustering.
pub fn split_dataset(traces: &[ScoreTrace], gamma: f64, seed: u64) -> Result<CalibrationSplit> {
    if traces.is_empty() {
        return Err(Error::invalid("cannot split an empty trace set"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let n = traces.len();
    let n1 = ((gamma * n as f64) + RANK_GUARD).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut clustering = order[..n1].to_vec();
    let mut calibration = order[n1..].to_vec();
    clustering.sort_unstable();
    calibration.sort_unstable();
    Ok(CalibrationSplit {
        clustering,
        calibration,
        gamma,
        seed,
    })
}

/// Reads a line-delimited trace file. Blank lines are skipped; ids must be
/// unique.
pub fn load_traces(path: impl AsRef<Path>) -> Result<Vec<ScoreTrace>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut traces = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let trace: ScoreTrace = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        trace.validate()?;
        if !seen.insert(trace.id.clone()) {
            return Err(Error::DuplicateId(trace.id));
        }
        traces.push(trace);
    }
    Ok(traces)
}

pub fn save_traces(path: impl AsRef<Path>, traces: &[ScoreTrace]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for trace in traces {
        serde_json::to_writer(&mut out, trace)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(id: &str, n: usize) -> ScoreTrace {
        ScoreTrace::new(id, vec![Token(0); n], vec![0.5; n]).unwrap()
    }

    #[test]
    fn median_of_three() {
        assert_eq!(quantile(0.5, &[3.0, 1.0, 2.0]).unwrap(), 2.0);
    }

    #[test]
    fn zero_level_clamps_to_minimum() {
        assert_eq!(quantile(0.0, &[9.0, 5.0]).unwrap(), 5.0);
    }

    #[test]
    fn empty_set_is_infinite() {
        assert_eq!(quantile(0.3, &[]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn nan_rejected() {
        assert!(quantile(0.5, &[1.0, f64::NAN]).is_err());
        assert!(quantile(f64::NAN, &[1.0]).is_err());
    }

    #[test]
    fn tenth_of_hundred_uniforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let values: Vec<f64> = (0..100).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(quantile(0.1, &values).unwrap(), sorted[9]);
    }

    #[test]
    fn levels_above_one_clamp_to_maximum() {
        assert_eq!(quantile(1.3, &[1.0, 4.0, 2.0]).unwrap(), 4.0);
        assert_eq!(quantile(-0.2, &[1.0, 4.0, 2.0]).unwrap(), 1.0);
    }

    #[test]
    fn removal_count_recurrence() {
        assert_eq!(removal_count(0.1, 100), 10);
        assert_eq!(removal_count(0.1, 90), 9);
        assert_eq!(removal_count(0.1, 81), 8);
        assert_eq!(removal_count(0.001, 100), 0);
    }

    #[test]
    fn split_sizes() {
        let traces: Vec<_> = (0..10).map(|i| trace(&i.to_string(), 2)).collect();
        let s = split_dataset(&traces, 0.5, 7).unwrap();
        assert_eq!(s.clustering.len(), 5);
        assert_eq!(s.calibration.len(), 5);
        assert!(s.clustering.iter().all(|i| !s.calibration.contains(i)));
        assert_eq!(s, split_dataset(&traces, 0.5, 7).unwrap());

        let s0 = split_dataset(&traces, 0.0, 7).unwrap();
        assert!(s0.clustering.is_empty());
        assert_eq!(s0.calibration, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn split_rejects_empty_and_bad_gamma() {
        assert!(split_dataset(&[], 0.5, 1).is_err());
        assert!(split_dataset(&[trace("a", 1)], 1.5, 1).is_err());
    }

    #[test]
    fn length_mismatch_names_record() {
        let err = ScoreTrace::new("bad-1", vec![Token(1), Token(2)], vec![0.1]).unwrap_err();
        assert!(err.to_string().contains("bad-1"));
    }

    #[test]
    fn load_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let traces = vec![
            ScoreTrace::new("a", vec![Token(1)], vec![0.25]).unwrap(),
            ScoreTrace::new("b", vec![Token(1), Token(3)], vec![0.25, 0.1 + 0.2]).unwrap(),
            ScoreTrace::new("c", vec![], vec![]).unwrap(),
        ];
        save_traces(&path, &traces).unwrap();
        assert_eq!(load_traces(&path).unwrap(), traces);

        std::fs::write(&path, "").unwrap();
        assert!(load_traces(&path).unwrap().is_empty());

        std::fs::write(
            &path,
            "{\"id\":\"x\",\"tokens\":[1],\"prefix_scores\":[0.5]}\n{\"id\":\"y\",\"tokens\":[1,2],\"prefix_scores\":[0.5]}\n",
        )
        .unwrap();
        let err = load_traces(&path).unwrap_err();
        assert!(matches!(err, Error::Validation { ref id, .. } if id == "y"));

        std::fs::write(&path, "{\"id\":\"x\",\"tokens\":[1],\"prefix_scores\":[0.5]}\nnot json\n").unwrap();
        let err = load_traces(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));

        std::fs::write(
            &path,
            "{\"id\":\"x\",\"tokens\":[1],\"prefix_scores\":[0.5]}\n{\"id\":\"x\",\"tokens\":[1],\"prefix_scores\":[0.5]}\n",
        )
        .unwrap();
        assert!(matches!(load_traces(&path).unwrap_err(), Error::DuplicateId(_)));
    }

    proptest! {
        #[test]
        fn quantile_monotone_in_level(
            values in prop::collection::vec(-1e3f64..1e3, 1..60),
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let q_lo = quantile(lo, &values).unwrap();
            let q_hi = quantile(hi, &values).unwrap();
            prop_assert!(q_lo <= q_hi);
            prop_assert!(values.contains(&q_lo));
        }

        #[test]
        fn split_is_a_partition(n in 1usize..80, gamma in 0.0f64..=1.0, seed in any::<u64>()) {
            let traces: Vec<_> = (0..n).map(|i| trace(&i.to_string(), 1)).collect();
            let s = split_dataset(&traces, gamma, seed).unwrap();
            let mut all: Vec<_> = s.clustering.iter().chain(&s.calibration).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(s.clustering.len(), (gamma * n as f64 + 1e-9).floor() as usize);
        }
    }
}
