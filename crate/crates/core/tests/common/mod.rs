#![allow(dead_code)]

use cover_decode::scorer::{ContextRow, Scorer, TabularARModel};
use cover_decode::Token;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random order-`order` model; every conditional keeps some terminator mass.
pub fn random_model(vocab: usize, order: usize, max_len: usize, seed: u64) -> TabularARModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let terminator = Token(vocab as u32 - 1);
    let live: Vec<u32> = (0..vocab as u32 - 1).collect();
    let mut contexts = vec![vec![]];
    let mut level = vec![vec![]];
    for _ in 0..order {
        level = level
            .iter()
            .flat_map(|c: &Vec<u32>| {
                live.iter().map(move |&t| {
                    let mut n = c.clone();
                    n.push(t);
                    n
                })
            })
            .collect();
        contexts.extend(level.iter().cloned());
    }
    let rows = contexts
        .into_iter()
        .map(|ctx| {
            let w: Vec<f64> = (0..vocab).map(|_| rng.random::<f64>() + 0.05).collect();
            let total: f64 = w.iter().sum();
            ContextRow {
                ctx,
                probs: w.iter().map(|x| x / total).collect(),
            }
        })
        .collect();
    TabularARModel::new(vocab, order, max_len, terminator, rows).unwrap()
}

/// Every complete sequence (terminated, or of length `max_len`).
pub fn all_sequences(scorer: &dyn Scorer, max_len: usize) -> Vec<Vec<Token>> {
    let term = scorer.terminator();
    let mut out = Vec::new();
    let mut frontier = vec![vec![]];
    for l in 1..=max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for a in 0..scorer.vocab_size() as u32 {
                let mut c: Vec<Token> = p.clone();
                c.push(Token(a));
                if l == max_len || Some(Token(a)) == term {
                    out.push(c);
                } else {
                    next.push(c);
                }
            }
        }
        frontier = next;
    }
    out.sort();
    out
}

/// Brute-force filter: keep a sequence iff each of its prefixes clears the
/// threshold returned by `rule(l, token)`.
pub fn brute_force_set(scorer: &dyn Scorer, max_len: usize, rule: impl Fn(usize, Token) -> f64) -> Vec<Vec<Token>> {
    all_sequences(scorer, max_len)
        .into_iter()
        .filter(|s| (1..=s.len()).all(|l| scorer.sequence_score(&s[..l]).unwrap() >= rule(l, s[l - 1])))
        .collect()
}
