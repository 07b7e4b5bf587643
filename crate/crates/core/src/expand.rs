//! Frontier expansion shared by the step-wise conformal decoders.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorer::Scorer;
use crate::trace::Token;

/// Default cap on kept prefixes before an expansion gives up.
pub const DEFAULT_MAX_NODES: usize = 2_000_000;

/// Output of a step-wise conformal decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConformalSet {
    /// Complete sequences (terminated, or of maximal length), sorted
    /// lexicographically.
    pub sequences: Vec<Vec<Token>>,
    /// Number of prefixes kept across all steps.
    pub expanded_nodes: usize,
    /// Kept prefixes per step (index 0 is step 1).
    pub nodes_per_step: Vec<usize>,
    /// Set when `max_nodes` was hit; the set is then incomplete.
    pub truncated: bool,
}

impl ConformalSet {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn contains(&self, seq: &[Token]) -> bool {
        self.sequences
            .binary_search_by(|s| s.as_slice().cmp(seq))
            .is_ok()
    }
}

/// Expands prefixes step by step, keeping child `prefix ++ [a]` at step `l`
/// iff `keep(l, a, score)` holds. Terminated children are frozen.
pub fn expand<F>(scorer: &dyn Scorer, max_len: usize, max_nodes: usize, keep: F) -> Result<ConformalSet>
where
    F: Fn(usize, Token, f64) -> bool + Sync,
{
    if !scorer.supports_expansion() {
        return Err(Error::Unsupported("conformal expansion needs an expandable scorer"));
    }
    let max_len = max_len.min(scorer.max_len());
    let terminator = scorer.terminator();
    let mut frontier: Vec<Vec<Token>> = vec![Vec::new()];
    let mut sequences = Vec::new();
    let mut nodes_per_step = Vec::with_capacity(max_len);
    let mut expanded = 0usize;
    let mut truncated = false;

    for l in 1..=max_len {
        if frontier.is_empty() {
            break;
        }
        let children: Vec<Vec<Token>> = frontier
            .par_iter()
            .map(|prefix| -> Result<Vec<Vec<Token>>> {
                let scores = scorer.next_token_scores(prefix)?;
                Ok(scores
                    .iter()
                    .enumerate()
                    .filter(|&(a, &s)| keep(l, Token(a as u32), s))
                    .map(|(a, _)| {
                        let mut child = Vec::with_capacity(prefix.len() + 1);
                        child.extend_from_slice(prefix);
                        child.push(Token(a as u32));
                        child
                    })
                    .collect())
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();

        expanded += children.len();
        nodes_per_step.push(children.len());
        let mut next = Vec::new();
        for child in children {
            if l == max_len || Some(*child.last().unwrap()) == terminator {
                sequences.push(child);
            } else {
                next.push(child);
            }
        }
        frontier = next;
        if expanded > max_nodes {
            truncated = !frontier.is_empty();
            break;
        }
    }
    sequences.sort();
    Ok(ConformalSet {
        sequences,
        expanded_nodes: expanded,
        nodes_per_step,
        truncated,
    })
}

/// Per-step keep rule: a candidate `prefix ++ [token]` survives step `l` iff
/// its score is at least `threshold(l, token)`.
pub trait StepRule: Sync {
    fn threshold(&self, l: usize, token: Token) -> f64;
}

/// Expands under a [`StepRule`].
pub fn decode_with_rule(scorer: &dyn Scorer, rule: &dyn StepRule, max_len: usize, max_nodes: usize) -> Result<ConformalSet> {
    expand(scorer, max_len, max_nodes, |l, a, s| s >= rule.threshold(l, a))
}

/// Same cutoff for every token at a step; `thresholds[l - 1]` is step `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerStepRule(pub Vec<f64>);

impl StepRule for PerStepRule {
    fn threshold(&self, l: usize, _token: Token) -> f64 {
        self.0.get(l - 1).copied().unwrap_or(f64::INFINITY)
    }
}
