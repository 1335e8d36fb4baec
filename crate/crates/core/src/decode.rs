//! Autoregressive search over any next-token scorer.
//!
//! A scorer maps prefixes (each starting with BOS) to log-probabilities over
//! the whole vocabulary. PAD, BOS and UNK are never emitted.

use std::cmp::Ordering;

use crate::data::{BOS, EOS, PAD, UNK};
use crate::error::{contract, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub k: usize,
    /// Maximum number of generated tokens, EOS included.
    pub max_len: usize,
    /// Final ranking uses `logp / len^alpha`.
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens without BOS; ends with EOS when `finished`.
    pub tokens: Vec<u32>,
    /// Sum of per-token log-probabilities.
    pub logp: f64,
    /// Ranking score, `logp / len^alpha`.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Caption words: the tokens with the closing EOS removed.
    pub fn words(&self) -> &[u32] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    /// Decoder inputs reproducing this hypothesis under teacher forcing:
    /// BOS followed by every generated token but the last.
    pub fn teacher_inputs(&self) -> Vec<u32> {
        let mut v = vec![BOS];
        v.extend_from_slice(&self.tokens[..self.tokens.len() - 1]);
        v
    }
}

pub fn emittable(token: u32) -> bool {
    !matches!(token, PAD | BOS | UNK)
}

fn check_row(row: &[f64], vocab: usize) -> Result<()> {
    if row.len() != vocab {
        return contract(format!("scorer returned {} scores for vocabulary {vocab}", row.len()));
    }
    Ok(())
}

/// Repeated argmax over emittable tokens (lowest id wins ties).
pub fn greedy<F>(vocab: usize, max_len: usize, mut score: F) -> Result<Vec<u32>>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>>,
{
    if max_len == 0 {
        return contract("max_len must be at least 1");
    }
    let mut seq = vec![BOS];
    for _ in 0..max_len {
        let row = score(&seq)?;
        check_row(&row, vocab)?;
        let mut best: Option<(u32, f64)> = None;
        for (t, &lp) in row.iter().enumerate() {
            let t = t as u32;
            if emittable(t) && best.is_none_or(|(_, b)| lp > b) {
                best = Some((t, lp));
            }
        }
        let (t, _) = best.expect("EOS is always emittable");
        seq.push(t);
        if t == EOS {
            break;
        }
    }
    seq.remove(0);
    Ok(seq)
}

struct Cand {
    parent: usize,
    token: u32,
    logp: f64,
}

/// Beam search returning up to `k` hypotheses ranked best first.
///
/// Each step expands every live hypothesis by every emittable token and
/// orders the candidates by log-probability (ties: earlier parent, then
/// lower token id). EOS candidates among the top `k` retire to the finished
/// pool; the first `k` non-EOS candidates stay live. Search stops once the
/// pool holds `k` hypotheses that no live one can overtake, or when
/// `max_len` tokens have been generated, at which point the top `k`
/// candidates of the last step join the pool.
pub fn beam_search<F>(vocab: usize, cfg: &BeamConfig, mut score: F) -> Result<Vec<Hypothesis>>
where
    F: FnMut(&[Vec<u32>]) -> Result<Vec<Vec<f64>>>,
{
    let k = cfg.k;
    if k == 0 {
        return contract("beam width must be at least 1");
    }
    if k > vocab {
        return contract(format!("beam width {k} exceeds vocabulary size {vocab}"));
    }
    if cfg.max_len == 0 {
        return contract("max_len must be at least 1");
    }
    if !(cfg.alpha >= 0.0) {
        return contract(format!("length penalty alpha must be non-negative, got {}", cfg.alpha));
    }
    let rank = |logp: f64, len: usize| {
        if cfg.alpha == 0.0 {
            logp
        } else {
            logp / (len as f64).powf(cfg.alpha)
        }
    };
    let mut alive: Vec<(Vec<u32>, f64)> = vec![(vec![BOS], 0.0)];
    let mut pool: Vec<Hypothesis> = Vec::new();
    for step in 1..=cfg.max_len {
        let prefixes: Vec<Vec<u32>> = alive.iter().map(|(p, _)| p.clone()).collect();
        let rows = score(&prefixes)?;
        if rows.len() != prefixes.len() {
            return contract("scorer returned the wrong number of rows");
        }
        let mut cands = Vec::new();
        for (parent, row) in rows.iter().enumerate() {
            check_row(row, vocab)?;
            for (t, &lp) in row.iter().enumerate() {
                if emittable(t as u32) {
                    cands.push(Cand {
                        parent,
                        token: t as u32,
                        logp: alive[parent].1 + lp,
                    });
                }
            }
        }
        cands.sort_by(|a, b| {
            b.logp
                .partial_cmp(&a.logp)
                .unwrap_or(Ordering::Equal)
                .then(a.parent.cmp(&b.parent))
                .then(a.token.cmp(&b.token))
        });
        let extend = |c: &Cand| {
            let mut toks = alive[c.parent].0.clone();
            toks.push(c.token);
            toks
        };
        let finish = |toks: Vec<u32>, logp: f64| {
            let finished = toks.last() == Some(&EOS);
            let tokens = toks[1..].to_vec();
            Hypothesis {
                score: rank(logp, tokens.len()),
                tokens,
                logp,
                finished,
            }
        };
        if step == cfg.max_len {
            for c in cands.iter().take(k) {
                pool.push(finish(extend(c), c.logp));
            }
            break;
        }
        let mut next = Vec::with_capacity(k);
        for (i, c) in cands.iter().enumerate() {
            if c.token == EOS {
                if i < k {
                    pool.push(finish(extend(c), c.logp));
                }
            } else if next.len() < k {
                next.push((extend(c), c.logp));
            }
            if i >= k && next.len() == k {
                break;
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
        if pool.len() >= k {
            if cfg.alpha > 0.0 {
                break;
            }
            let mut best: Vec<f64> = pool.iter().map(|h| h.logp).collect();
            best.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
            if alive[0].1 <= best[k - 1] {
                break;
            }
        }
    }
    pool.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    pool.truncate(k);
    Ok(pool)
}
