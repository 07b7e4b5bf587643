//! Distribution-aware token clustering: per step bucket, each token is
//! embedded by quantiles of its prefix-score distribution, and embeddings are
//! grouped by weighted k-means. Tokens with too few samples go to the null
//! cluster.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::trace::{quantile_sorted, ScoreTrace, Token};

/// Cluster id: a regular group `0..M` (shown 1-based) or the null cluster.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Cluster {
    Group(u32),
    Null,
}

impl Cluster {
    /// Row in an `(M + 1)`-row table; null is the last row.
    pub fn row(self, m: usize) -> usize {
        match self {
            Cluster::Group(g) => g as usize,
            Cluster::Null => m,
        }
    }

    pub fn from_row(row: usize, m: usize) -> Self {
        if row >= m {
            Cluster::Null
        } else {
            Cluster::Group(row as u32)
        }
    }

    pub fn label(self) -> String {
        self.to_string()
    }

    pub fn parse(label: &str) -> Result<Self> {
        if label == "null" {
            return Ok(Cluster::Null);
        }
        match label.parse::<u32>() {
            Ok(g) if g >= 1 => Ok(Cluster::Group(g - 1)),
            _ => Err(Error::invalid(format!("bad cluster label `{label}`"))),
        }
    }
}

impl fmt::Display for Cluster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cluster::Group(g) => write!(f, "{}", g + 1),
            Cluster::Null => f.write_str("null"),
        }
    }
}

impl Serialize for Cluster {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Cluster::Group(g) => s.serialize_some(&(g + 1)),
            Cluster::Null => s.serialize_none(),
        }
    }
}

impl<'de> Deserialize<'de> for Cluster {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match Option::<u32>::deserialize(d)? {
            None => Ok(Cluster::Null),
            Some(0) => Err(serde::de::Error::custom("cluster ids are 1-based")),
            Some(g) => Ok(Cluster::Group(g - 1)),
        }
    }
}

/// Consecutive fixed-width groups of 1-based steps covering `1..=max_len`.
pub fn bucket_steps(max_len: usize, width: usize) -> Result<Vec<RangeInclusive<usize>>> {
    if width == 0 {
        return Err(Error::invalid("bucket width must be at least 1"));
    }
    Ok((1..=max_len)
        .step_by(width)
        .map(|start| start..=(start + width - 1).min(max_len))
        .collect())
}

/// Bucket index (0-based) of 1-based step `l`.
pub fn bucket_of(l: usize, width: usize) -> usize {
    (l - 1) / width
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileEmbedding {
    pub token: Token,
    pub bucket: usize,
    pub vector: Vec<f64>,
    /// Number of (trace, step) samples behind the embedding.
    pub support: usize,
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("quantile grid is empty"));
    }
    if grid.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(Error::invalid("quantile grid levels must lie in (0, 1)"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("quantile grid must be strictly increasing"));
    }
    Ok(())
}

/// Quantiles of `{score(1..=l) : token at step l == token, l in steps}`; `None`
/// when the token never appears in those steps.
pub fn quantile_embedding(
    traces: &[&ScoreTrace],
    token: Token,
    bucket: usize,
    steps: RangeInclusive<usize>,
    grid: &[f64],
) -> Result<Option<QuantileEmbedding>> {
    check_grid(grid)?;
    let mut scores: Vec<f64> = traces
        .iter()
        .flat_map(|t| {
            steps
                .clone()
                .filter(move |&l| l <= t.len() && t.token_at(l) == token)
                .map(move |l| t.score_at(l))
        })
        .collect();
    if scores.is_empty() {
        return Ok(None);
    }
    scores.sort_by(f64::total_cmp);
    Ok(Some(QuantileEmbedding {
        token,
        bucket,
        vector: grid.iter().map(|&tau| quantile_sorted(tau, &scores)).collect(),
        support: scores.len(),
    }))
}

/// Embeddings of every token observed in each bucket, ordered by token.
pub fn build_embeddings(
    traces: &[&ScoreTrace],
    buckets: &[RangeInclusive<usize>],
    grid: &[f64],
) -> Result<Vec<Vec<QuantileEmbedding>>> {
    check_grid(grid)?;
    Ok(buckets
        .par_iter()
        .enumerate()
        .map(|(b, steps)| {
            let mut by_token: BTreeMap<Token, Vec<f64>> = BTreeMap::new();
            for t in traces {
                for l in steps.clone().filter(|&l| l <= t.len()) {
                    by_token.entry(t.token_at(l)).or_default().push(t.score_at(l));
                }
            }
            by_token
                .into_iter()
                .map(|(token, mut scores)| {
                    scores.sort_by(f64::total_cmp);
                    QuantileEmbedding {
                        token,
                        bucket: b,
                        vector: grid.iter().map(|&tau| quantile_sorted(tau, &scores)).collect(),
                        support: scores.len(),
                    }
                })
                .collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansOptions {
    pub restarts: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions {
            restarts: 10,
            max_iters: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    /// Cluster of each point, `0..centroids.len()`.
    pub labels: Vec<usize>,
    /// Non-empty clusters sorted by centroid.
    pub centroids: Vec<Vec<f64>>,
    /// Weighted within-cluster sum of squares.
    pub objective: f64,
    /// Objective after each Lloyd iteration of the winning restart.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn pick_weighted<R: Rng>(rng: &mut R, weights: &[f64]) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return None;
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc && *w > 0.0 {
            return Some(i);
        }
    }
    weights.iter().rposition(|w| *w > 0.0)
}

fn plus_plus_init<R: Rng>(rng: &mut R, points: &[Vec<f64>], weights: &[f64], k: usize) -> Vec<Vec<f64>> {
    let first = pick_weighted(rng, weights).unwrap_or(0);
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let scores: Vec<f64> = d2.iter().zip(weights).map(|(d, w)| d * w).collect();
        // All remaining mass sits on existing centroids: duplicate the first.
        let next = pick_weighted(rng, &scores).unwrap_or(first);
        centroids.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[next]));
        }
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], weights: &[f64], mut centroids: Vec<Vec<f64>>, max_iters: usize) -> (Vec<usize>, Vec<Vec<f64>>, Vec<f64>) {
    let dim = points[0].len();
    let mut labels = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        let mut objective = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            objective += weights[i] * d;
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        history.push(objective);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut mass = vec![0.0; centroids.len()];
        for (i, p) in points.iter().enumerate() {
            mass[labels[i]] += weights[i];
            for (s, x) in sums[labels[i]].iter_mut().zip(p) {
                *s += weights[i] * x;
            }
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            if mass[c] > 0.0 {
                *centroid = sums[c].iter().map(|s| s / mass[c]).collect();
            }
        }
    }
    (labels, centroids, history)
}

/// Weighted k-means with seeded k-means++ starts; the restart with the lowest
/// objective wins (earliest on ties). Labels are renumbered by ascending
/// centroid so that output does not depend on initialization order.
pub fn weighted_kmeans(points: &[Vec<f64>], weights: &[f64], k: usize, opts: &KMeansOptions) -> Result<KMeansFit> {
    if points.is_empty() {
        return Err(Error::invalid("k-means needs at least one point"));
    }
    if points.len() != weights.len() {
        return Err(Error::invalid("one weight per point required"));
    }
    if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(Error::invalid("k-means weights must be positive"));
    }
    let k = k.clamp(1, points.len());
    let runs: Vec<(Vec<usize>, Vec<Vec<f64>>, Vec<f64>)> = (0..opts.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(r as u64);
            let init = plus_plus_init(&mut rng, points, weights, k);
            lloyd(points, weights, init, opts.max_iters)
        })
        .collect();
    let (labels, centroids, history) = runs
        .into_iter()
        .reduce(|best, run| {
            if run.2.last().unwrap() < best.2.last().unwrap() {
                run
            } else {
                best
            }
        })
        .unwrap();

    let mut used: Vec<usize> = labels.clone();
    used.sort_unstable();
    used.dedup();
    used.sort_by(|&a, &b| {
        centroids[a]
            .iter()
            .zip(&centroids[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut remap = vec![usize::MAX; centroids.len()];
    for (new, &old) in used.iter().enumerate() {
        remap[old] = new;
    }
    let labels: Vec<usize> = labels.iter().map(|&l| remap[l]).collect();
    let centroids: Vec<Vec<f64>> = used.iter().map(|&old| centroids[old].clone()).collect();
    let objective = points
        .iter()
        .zip(weights)
        .zip(&labels)
        .map(|((p, w), &l)| w * sq_dist(p, &centroids[l]))
        .sum();
    Ok(KMeansFit {
        labels,
        centroids,
        objective,
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringConfig {
    pub clusters: usize,
    pub min_count: usize,
    pub bucket_width: usize,
    pub tau_grid: Vec<f64>,
    pub seed: u64,
    pub restarts: usize,
    pub max_iters: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        ClusteringConfig {
            clusters: 4,
            min_count: 20,
            bucket_width: 1,
            tau_grid: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            seed: 0,
            restarts: 10,
            max_iters: 100,
        }
    }
}

/// Clustering of one bucket.
#[derive(Clone, Debug, PartialEq)]
pub struct BucketClustering {
    pub map: BTreeMap<Token, Cluster>,
    /// Groups actually formed (at most the requested M).
    pub effective_clusters: usize,
    /// Set when fewer eligible tokens than requested clusters existed.
    pub reduced: bool,
    pub objective: f64,
    pub history: Vec<f64>,
}

/// Tokens with `support < min_count` go to null; the rest are clustered with
/// weights `sqrt(support)`.
pub fn cluster_bucket(embeddings: &[QuantileEmbedding], clusters: usize, min_count: usize, opts: &KMeansOptions) -> Result<BucketClustering> {
    if clusters == 0 {
        return Err(Error::invalid("need at least one cluster"));
    }
    let mut map = BTreeMap::new();
    let mut eligible = Vec::new();
    for e in embeddings {
        if e.support < min_count || e.support == 0 {
            map.insert(e.token, Cluster::Null);
        } else {
            eligible.push(e);
        }
    }
    if eligible.is_empty() {
        return Ok(BucketClustering {
            map,
            effective_clusters: 0,
            reduced: true,
            objective: 0.0,
            history: vec![],
        });
    }
    let reduced = eligible.len() < clusters;
    if reduced {
        log::warn!(
            "only {} eligible tokens for {} clusters; reducing M",
            eligible.len(),
            clusters
        );
    }
    let points: Vec<Vec<f64>> = eligible.iter().map(|e| e.vector.clone()).collect();
    let weights: Vec<f64> = eligible.iter().map(|e| (e.support as f64).sqrt()).collect();
    let fit = weighted_kmeans(&points, &weights, clusters.min(eligible.len()), opts)?;
    for (e, &label) in eligible.iter().zip(&fit.labels) {
        map.insert(e.token, Cluster::Group(label as u32));
    }
    Ok(BucketClustering {
        map,
        effective_clusters: fit.centroids.len(),
        reduced,
        objective: fit.objective,
        history: fit.history,
    })
}

/// Per-bucket token-to-cluster maps. Unknown tokens and steps past `max_len`
/// map to null.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    /// Requested number of regular clusters `M`.
    pub clusters: usize,
    pub bucket_width: usize,
    pub max_len: usize,
    pub buckets: Vec<BTreeMap<Token, Cluster>>,
}

impl ClusterAssignment {
    /// Everything in one cluster per bucket.
    pub fn single(bucket_width: usize, max_len: usize, tokens: impl IntoIterator<Item = Token> + Clone) -> Self {
        let n = bucket_steps(max_len, bucket_width).map(|b| b.len()).unwrap_or(0);
        ClusterAssignment {
            clusters: 1,
            bucket_width,
            max_len,
            buckets: (0..n)
                .map(|_| tokens.clone().into_iter().map(|t| (t, Cluster::Group(0))).collect())
                .collect(),
        }
    }

    pub fn cluster_of(&self, l: usize, token: Token) -> Cluster {
        if l == 0 || l > self.max_len {
            return Cluster::Null;
        }
        self.buckets
            .get(bucket_of(l, self.bucket_width))
            .and_then(|m| m.get(&token))
            .copied()
            .unwrap_or(Cluster::Null)
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }

    /// Rows in cluster-indexed tables (`M` groups plus null).
    pub fn rows(&self) -> usize {
        self.clusters + 1
    }
}

/// Builds the assignment from the clustering part of the calibration data.
pub fn cluster_tokens(traces: &[&ScoreTrace], max_len: usize, config: &ClusteringConfig) -> Result<(ClusterAssignment, Vec<BucketClustering>)> {
    let buckets = bucket_steps(max_len, config.bucket_width)?;
    let embeddings = build_embeddings(traces, &buckets, &config.tau_grid)?;
    let fits: Vec<BucketClustering> = embeddings
        .iter()
        .enumerate()
        .map(|(b, emb)| {
            let opts = KMeansOptions {
                restarts: config.restarts,
                max_iters: config.max_iters,
                seed: config.seed.wrapping_add(b as u64),
            };
            cluster_bucket(emb, config.clusters, config.min_count, &opts)
        })
        .collect::<Result<_>>()?;
    let assignment = ClusterAssignment {
        clusters: config.clusters,
        bucket_width: config.bucket_width,
        max_len,
        buckets: fits.iter().map(|f| f.map.clone()).collect(),
    };
    Ok((assignment, fits))
}
