//! Seeded synthetic training corpus: an order-2 Markov chain over the token
//! vocabulary, plus window sampling and held-out splitting helpers.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

const SUCCESSORS: usize = 4;
// cumulative over [0.55, 0.25, 0.15, 0.05]
const CUM_PROBS: [f64; SUCCESSORS] = [0.55, 0.80, 0.95, 1.0];

/// Generate `len` tokens from a seeded order-2 Markov chain over `vocab`.
pub fn synthetic_corpus(seed: u64, len: usize, vocab: usize) -> Result<Vec<u32>> {
    if vocab < 2 || len < 2 {
        return Err(Error::Config("need vocab >= 2 and len >= 2".into()));
    }
    let mut table_rng = SeededRng::derive(seed, 0xC0DE_7AB1);
    let mut table = Vec::with_capacity(vocab * vocab * SUCCESSORS);
    for _ in 0..vocab * vocab {
        for _ in 0..SUCCESSORS {
            table.push(table_rng.below(vocab) as u32);
        }
    }
    let mut rng = SeededRng::derive(seed, 0xC0DE);
    let mut out = Vec::with_capacity(len);
    out.push(rng.below(vocab) as u32);
    out.push(rng.below(vocab) as u32);
    while out.len() < len {
        let a = out[out.len() - 2] as usize;
        let b = out[out.len() - 1] as usize;
        let u = rng.uniform();
        let mut pick = SUCCESSORS - 1;
        for (i, &c) in CUM_PROBS.iter().enumerate() {
            if u < c {
                pick = i;
                break;
            }
        }
        out.push(table[(a * vocab + b) * SUCCESSORS + pick]);
    }
    Ok(out)
}

/// Split into held-in (train) and held-out parts; `holdout_frac` of the tail
/// is held out.
pub fn split(corpus: &[u32], holdout_frac: f64) -> (&[u32], &[u32]) {
    let cut = ((corpus.len() as f64) * (1.0 - holdout_frac)) as usize;
    let cut = cut.clamp(1, corpus.len().saturating_sub(1));
    (&corpus[..cut], &corpus[cut..])
}

/// Sample `count` seeded windows of `window` tokens.
pub fn sample_windows(corpus: &[u32], window: usize, count: usize, rng: &mut SeededRng) -> Result<Vec<Vec<u32>>> {
    if corpus.len() < window {
        return Err(Error::Config("corpus shorter than one window".into()));
    }
    let span = corpus.len() - window + 1;
    Ok((0..count)
        .map(|_| {
            let at = rng.below(span);
            corpus[at..at + window].to_vec()
        })
        .collect())
}

/// Deterministic evenly spaced windows (for held-out evaluation).
pub fn fixed_windows(corpus: &[u32], window: usize, count: usize) -> Result<Vec<Vec<u32>>> {
    if corpus.len() < window {
        return Err(Error::Config("corpus shorter than one window".into()));
    }
    let span = corpus.len() - window;
    let count = count.max(1);
    Ok((0..count)
        .map(|i| {
            let at = if count == 1 { 0 } else { span * i / (count - 1) };
            corpus[at..at + window].to_vec()
        })
        .collect())
}
