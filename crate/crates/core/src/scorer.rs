//! Next-token scorers: the abstraction used by the decoders, a tabular Markov
//! language model that backs every simulation, and a synthetic long-tail
//! generator.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{ScoreTrace, Token};

const SUM_TOLERANCE: f64 = 1e-9;

/// Source of conformity scores for prefixes. Higher scores are more conforming.
pub trait Scorer: Sync {
    fn vocab_size(&self) -> usize;

    fn max_len(&self) -> usize;

    /// Token that ends a sequence, if the scorer has one.
    fn terminator(&self) -> Option<Token>;

    /// Whether `next_token_scores` can enumerate continuations.
    fn supports_expansion(&self) -> bool;

    fn sequence_score(&self, prefix: &[Token]) -> Result<f64>;

    /// Entry `a` is `sequence_score(prefix ++ [a])`.
    fn next_token_scores(&self, prefix: &[Token]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextRow {
    pub ctx: Vec<u32>,
    pub probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    #[serde(rename = "V")]
    vocab_size: usize,
    order: usize,
    #[serde(rename = "L")]
    max_len: usize,
    terminator: u32,
    contexts: Vec<ContextRow>,
}

/// Order-`k` Markov model over a finite vocabulary. The conditional
/// distribution of the next token depends on the last `k` emitted tokens (or
/// the whole prefix while it is shorter than `k`). Sequences stop at the
/// terminator or after `max_len` tokens.
#[derive(Clone, Debug)]
pub struct TabularARModel {
    vocab_size: usize,
    order: usize,
    max_len: usize,
    terminator: Token,
    table: HashMap<Vec<u32>, usize>,
    probs: Vec<Vec<f64>>,
    log_probs: Vec<Vec<f64>>,
    cumulative: Vec<Vec<f64>>,
}

impl TabularARModel {
    pub fn new(
        vocab_size: usize,
        order: usize,
        max_len: usize,
        terminator: Token,
        contexts: Vec<ContextRow>,
    ) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::invalid("vocabulary needs at least two tokens"));
        }
        if max_len == 0 {
            return Err(Error::invalid("max_len must be at least 1"));
        }
        if terminator.index() >= vocab_size {
            return Err(Error::invalid("terminator outside the vocabulary"));
        }
        let mut table = HashMap::with_capacity(contexts.len());
        let mut probs = Vec::with_capacity(contexts.len());
        for row in contexts {
            if row.ctx.len() > order {
                return Err(Error::invalid(format!("context {:?} longer than order {order}", row.ctx)));
            }
            if row.ctx.iter().any(|&t| t as usize >= vocab_size || t == terminator.0) {
                return Err(Error::invalid(format!("context {:?} has an invalid token", row.ctx)));
            }
            if row.probs.len() != vocab_size {
                return Err(Error::invalid(format!(
                    "context {:?}: expected {vocab_size} probabilities, got {}",
                    row.ctx,
                    row.probs.len()
                )));
            }
            if row.probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::invalid(format!("context {:?}: negative or non-finite probability", row.ctx)));
            }
            let total: f64 = row.probs.iter().sum();
            if (total - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::invalid(format!("context {:?}: probabilities sum to {total}", row.ctx)));
            }
            if row.probs[terminator.index()] <= 0.0 {
                return Err(Error::invalid(format!("context {:?}: terminator has zero mass", row.ctx)));
            }
            if table.insert(row.ctx.clone(), probs.len()).is_some() {
                return Err(Error::invalid(format!("context {:?} listed twice", row.ctx)));
            }
            probs.push(row.probs);
        }
        let log_probs = probs
            .iter()
            .map(|p| p.iter().map(|x| x.ln()).collect())
            .collect();
        let cumulative = probs
            .iter()
            .map(|p| {
                let mut acc = 0.0;
                p.iter()
                    .map(|x| {
                        acc += x;
                        acc
                    })
                    .collect()
            })
            .collect();
        let model = TabularARModel {
            vocab_size,
            order,
            max_len,
            terminator,
            table,
            probs,
            log_probs,
            cumulative,
        };
        model.check_complete()?;
        Ok(model)
    }

    /// Context-free uniform model.
    pub fn uniform(vocab_size: usize, max_len: usize, terminator: Token) -> Result<Self> {
        let p = 1.0 / vocab_size as f64;
        Self::new(
            vocab_size,
            0,
            max_len,
            terminator,
            vec![ContextRow {
                ctx: vec![],
                probs: vec![p; vocab_size],
            }],
        )
    }

    fn check_complete(&self) -> Result<()> {
        let live: Vec<u32> = (0..self.vocab_size as u32)
            .filter(|&t| t != self.terminator.0)
            .collect();
        let mut frontier: Vec<Vec<u32>> = vec![vec![]];
        for depth in 0..=self.order.min(self.max_len.saturating_sub(1)) {
            for ctx in &frontier {
                if !self.table.contains_key(ctx) {
                    return Err(Error::invalid(format!("missing context {ctx:?} (depth {depth})")));
                }
            }
            if depth == self.order {
                break;
            }
            frontier = frontier
                .iter()
                .flat_map(|ctx| {
                    live.iter().map(move |&t| {
                        let mut next = ctx.clone();
                        next.push(t);
                        next
                    })
                })
                .collect();
        }
        Ok(())
    }

    pub fn order(&self) -> usize {
        self.order
    }

    fn row_for(&self, prefix: &[Token]) -> Result<usize> {
        let start = prefix.len().saturating_sub(self.order);
        let key: Vec<u32> = prefix[start..].iter().map(|t| t.0).collect();
        self.table
            .get(&key)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no distribution for context {key:?}")))
    }

    /// Conditional distribution of the next token after `prefix`.
    pub fn conditional(&self, prefix: &[Token]) -> Result<&[f64]> {
        Ok(&self.probs[self.row_for(prefix)?])
    }

    fn check_prefix(&self, prefix: &[Token]) -> Result<()> {
        if prefix.len() > self.max_len {
            return Err(Error::invalid(format!(
                "prefix length {} exceeds max_len {}",
                prefix.len(),
                self.max_len
            )));
        }
        for (i, t) in prefix.iter().enumerate() {
            if t.index() >= self.vocab_size {
                return Err(Error::invalid(format!("token {t} outside vocabulary")));
            }
            if *t == self.terminator && i + 1 != prefix.len() {
                return Err(Error::invalid("terminator before the end of the prefix"));
            }
        }
        Ok(())
    }

    /// Sum of conditional log-probabilities along `prefix`.
    pub fn log_score(&self, prefix: &[Token]) -> Result<f64> {
        self.check_prefix(prefix)?;
        let mut acc = 0.0;
        for l in 0..prefix.len() {
            acc += self.log_probs[self.row_for(&prefix[..l])?][prefix[l].index()];
        }
        Ok(acc)
    }

    /// All contexts with their distributions, sorted by context.
    pub fn contexts(&self) -> Vec<ContextRow> {
        let mut rows: Vec<ContextRow> = self
            .table
            .iter()
            .map(|(ctx, &i)| ContextRow {
                ctx: ctx.clone(),
                probs: self.probs[i].clone(),
            })
            .collect();
        rows.sort_by(|a, b| a.ctx.len().cmp(&b.ctx.len()).then_with(|| a.ctx.cmp(&b.ctx)));
        rows
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDocument {
            vocab_size: self.vocab_size,
            order: self.order,
            max_len: self.max_len,
            terminator: self.terminator.0,
            contexts: self.contexts(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        Self::new(doc.vocab_size, doc.order, doc.max_len, Token(doc.terminator), doc.contexts)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Draws one sequence with the given generator.
    pub fn sample_sequence<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<Token>, Vec<f64>) {
        let mut tokens = Vec::new();
        let mut scores = Vec::new();
        let mut log_acc = 0.0;
        while tokens.len() < self.max_len {
            let row = self
                .row_for(&tokens)
                .expect("complete model covers every reachable context");
            let u: f64 = rng.random();
            let cum = &self.cumulative[row];
            let mut next = cum.partition_point(|&c| c <= u).min(self.vocab_size - 1);
            // Skip zero-mass tokens that tie with the cumulative boundary.
            while self.probs[row][next] == 0.0 && next > 0 {
                next -= 1;
            }
            log_acc += self.log_probs[row][next];
            tokens.push(Token(next as u32));
            scores.push(log_acc.exp());
            if next == self.terminator.index() {
                break;
            }
        }
        (tokens, scores)
    }
}

impl Scorer for TabularARModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn terminator(&self) -> Option<Token> {
        Some(self.terminator)
    }

    fn supports_expansion(&self) -> bool {
        true
    }

    fn sequence_score(&self, prefix: &[Token]) -> Result<f64> {
        if prefix.is_empty() {
            return Err(Error::invalid("sequence_score needs a non-empty prefix"));
        }
        Ok(self.log_score(prefix)?.exp())
    }

    fn next_token_scores(&self, prefix: &[Token]) -> Result<Vec<f64>> {
        if prefix.len() >= self.max_len {
            return Err(Error::invalid("prefix already at max_len"));
        }
        if prefix.last() == Some(&self.terminator) {
            return Err(Error::invalid("prefix already terminated"));
        }
        let base = self.log_score(prefix)?;
        let row = self.row_for(prefix)?;
        Ok(self.log_probs[row].iter().map(|lp| (base + lp).exp()).collect())
    }
}

/// Scorer backed by recorded traces: it can report the scores it has seen but
/// cannot enumerate continuations.
#[derive(Clone, Debug)]
pub struct TraceScorer {
    vocab_size: usize,
    max_len: usize,
    scores: HashMap<Vec<Token>, f64>,
}

impl TraceScorer {
    pub fn new(vocab_size: usize, max_len: usize, traces: &[ScoreTrace]) -> Self {
        let mut scores = HashMap::new();
        for t in traces {
            for l in 1..=t.len() {
                scores.insert(t.tokens[..l].to_vec(), t.score_at(l));
            }
        }
        TraceScorer {
            vocab_size,
            max_len,
            scores,
        }
    }
}

impl Scorer for TraceScorer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn terminator(&self) -> Option<Token> {
        None
    }

    fn supports_expansion(&self) -> bool {
        false
    }

    fn sequence_score(&self, prefix: &[Token]) -> Result<f64> {
        if prefix.len() > self.max_len {
            return Err(Error::invalid("prefix longer than max_len"));
        }
        self.scores
            .get(prefix)
            .copied()
            .ok_or_else(|| Error::invalid("prefix not present in the recorded traces"))
    }

    fn next_token_scores(&self, _prefix: &[Token]) -> Result<Vec<f64>> {
        Err(Error::Unsupported("next-token expansion on a trace-backed scorer"))
    }
}

/// Convenience wrapper over [`Scorer::sequence_score`].
pub fn sequence_score(scorer: &dyn Scorer, prefix: &[Token]) -> Result<f64> {
    scorer.sequence_score(prefix)
}

pub fn next_token_scores(scorer: &dyn Scorer, prefix: &[Token]) -> Result<Vec<f64>> {
    if !scorer.supports_expansion() {
        return Err(Error::Unsupported("next-token expansion on a trace-backed scorer"));
    }
    scorer.next_token_scores(prefix)
}

/// Samples `n` traces. Trace `i` uses ChaCha stream `i` of `seed`, so the
/// output does not depend on the number of worker threads.
pub fn sample_dataset(model: &TabularARModel, n: usize, seed: u64) -> Result<Vec<ScoreTrace>> {
    if n == 0 {
        return Err(Error::invalid("sample_dataset needs n >= 1"));
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let (tokens, prefix_scores) = model.sample_sequence(&mut rng);
            ScoreTrace {
                id: format!("{seed:x}-{i}"),
                tokens,
                prefix_scores,
            }
        })
        .collect())
}

fn default_head_skew() -> f64 {
    1.0
}

/// Recipe for a Markov model whose per-step mass is split between a frequent
/// head vocabulary and a rare tail vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongTailConfig {
    pub vocab_size: usize,
    pub order: usize,
    pub max_len: usize,
    /// Must belong to `head_tokens`.
    pub terminator: Token,
    pub head_tokens: BTreeSet<Token>,
    pub tail_tokens: BTreeSet<Token>,
    /// Probability routed to the tail vocabulary in every context.
    pub tail_mass: f64,
    /// Relative jitter in `[0, 1)` applied to token weights within a group.
    pub noise: f64,
    /// Zipf exponent over a per-context random ranking of head tokens.
    #[serde(default = "default_head_skew")]
    pub head_skew: f64,
    pub seed: u64,
}

impl LongTailConfig {
    /// `head` head tokens (terminator last among them) followed by the rest of
    /// the vocabulary as tail tokens.
    pub fn standard(vocab_size: usize, head: usize, max_len: usize, tail_mass: f64, seed: u64) -> Self {
        let terminator = Token(head as u32 - 1);
        LongTailConfig {
            vocab_size,
            order: 1,
            max_len,
            terminator,
            head_tokens: (0..head as u32).map(Token).collect(),
            tail_tokens: (head as u32..vocab_size as u32).map(Token).collect(),
            tail_mass,
            noise: 0.3,
            head_skew: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tail_mass > 0.0 && self.tail_mass < 0.5) {
            return Err(Error::invalid(format!("tail_mass must lie in (0, 0.5), got {}", self.tail_mass)));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::invalid("noise must lie in [0, 1)"));
        }
        if !(self.head_skew >= 0.0 && self.head_skew.is_finite()) {
            return Err(Error::invalid("head_skew must be finite and non-negative"));
        }
        if self.head_tokens.is_empty() || self.tail_tokens.is_empty() {
            return Err(Error::invalid("head and tail vocabularies must be non-empty"));
        }
        if self.head_tokens.intersection(&self.tail_tokens).next().is_some() {
            return Err(Error::invalid("head and tail vocabularies overlap"));
        }
        if self
            .head_tokens
            .iter()
            .chain(&self.tail_tokens)
            .any(|t| t.index() >= self.vocab_size)
        {
            return Err(Error::invalid("token outside the vocabulary"));
        }
        if !self.head_tokens.contains(&self.terminator) {
            return Err(Error::invalid("terminator must be a head token"));
        }
        Ok(())
    }
}

/// Builds a long-tail model. Within each context the tail vocabulary shares
/// exactly `tail_mass`; head tokens share the rest with Zipf-shaped weights,
/// flattened as far as needed so that every head token is at least as likely
/// as every tail token.
pub fn make_longtail_model(config: &LongTailConfig) -> Result<TabularARModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let head: Vec<Token> = config.head_tokens.iter().copied().collect();
    let tail: Vec<Token> = config.tail_tokens.iter().copied().collect();
    let live: Vec<u32> = (0..config.vocab_size as u32)
        .filter(|&t| t != config.terminator.0)
        .collect();

    let mut contexts = Vec::new();
    let mut frontier: Vec<Vec<u32>> = vec![vec![]];
    for depth in 0..=config.order {
        for ctx in &frontier {
            let probs = longtail_row(config, &head, &tail, &mut rng)?;
            contexts.push(ContextRow { ctx: ctx.clone(), probs });
        }
        if depth == config.order {
            break;
        }
        frontier = frontier
            .iter()
            .flat_map(|ctx| {
                live.iter().map(move |&t| {
                    let mut next = ctx.clone();
                    next.push(t);
                    next
                })
            })
            .collect();
    }
    TabularARModel::new(config.vocab_size, config.order, config.max_len, config.terminator, contexts)
}

fn jitter<R: Rng>(rng: &mut R, noise: f64) -> f64 {
    1.0 + noise * (2.0 * rng.random::<f64>() - 1.0)
}

fn longtail_row<R: Rng>(config: &LongTailConfig, head: &[Token], tail: &[Token], rng: &mut R) -> Result<Vec<f64>> {
    let mut probs = vec![0.0; config.vocab_size];

    let tail_w: Vec<f64> = tail.iter().map(|_| jitter(rng, config.noise)).collect();
    let tail_total: f64 = tail_w.iter().sum();
    let mut tail_max: f64 = 0.0;
    for (t, w) in tail.iter().zip(&tail_w) {
        let p = config.tail_mass * w / tail_total;
        probs[t.index()] = p;
        tail_max = tail_max.max(p);
    }

    let head_mass = 1.0 - config.tail_mass;
    let mut ranks: Vec<usize> = (0..head.len()).collect();
    ranks.shuffle(rng);
    let raw: Vec<f64> = ranks
        .iter()
        .map(|&r| (r as f64 + 1.0).powf(-config.head_skew) * jitter(rng, config.noise))
        .collect();
    let raw_total: f64 = raw.iter().sum();
    let shares: Vec<f64> = raw.iter().map(|w| w / raw_total).collect();

    // Mix towards uniform just enough to keep head >= tail everywhere.
    let uniform = 1.0 / head.len() as f64;
    let floor = tail_max / head_mass;
    if floor > uniform + 1e-15 {
        return Err(Error::invalid(
            "tail tokens too heavy: no head distribution dominates them",
        ));
    }
    let mix = shares
        .iter()
        .filter(|&&z| z < floor)
        .map(|&z| (floor - z) / (uniform - z))
        .fold(0.0f64, f64::max)
        .min(1.0);
    for (t, z) in head.iter().zip(&shares) {
        probs[t.index()] = head_mass * ((1.0 - mix) * z + mix * uniform);
    }

    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    Ok(probs)
}
