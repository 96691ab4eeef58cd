//! Acceptance rules for drafted tokens.

use rand::Rng;

use crate::error::{Error, Result};

/// Number of leading drafted tokens kept given each token's `p/q` ratio
/// and its uniform draw: the index of the first draw exceeding its ratio,
/// or all of them.
pub fn count_accepted(ratios: &[f64], draws: &[f64]) -> usize {
    ratios
        .iter()
        .zip(draws)
        .position(|(ratio, r)| r > ratio)
        .unwrap_or(ratios.len().min(draws.len()))
}

/// Inverse-CDF draw from a normalized distribution. Falls back to the
/// last index with positive mass when rounding leaves `u` uncovered.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u32
}

/// `norm(max(0, p - q))`. When `p <= q` everywhere the target alone is
/// returned; that only happens when `p == q`, where rejection cannot occur.
pub fn residual(p: &[f64], q: &[f64]) -> Vec<f64> {
    let diff: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).max(0.0)).collect();
    let sum: f64 = diff.iter().sum();
    if sum > 0.0 {
        diff.into_iter().map(|d| d / sum).collect()
    } else {
        p.to_vec()
    }
}

/// Rejection sampling over a drafted run. `p` holds `gamma + 1` target
/// distributions, `q` the `gamma` draft distributions the tokens came from.
pub fn verify_and_accept<R: Rng + ?Sized>(
    p: &[Vec<f64>],
    q: &[Vec<f64>],
    drafted: &[u32],
    rng: &mut R,
) -> Result<(usize, u32)> {
    let gamma = drafted.len();
    if gamma == 0 {
        return Err(Error::EmptySpeculation);
    }
    if q.len() != gamma || p.len() != gamma + 1 {
        return Err(Error::ShapeMismatch {
            expected: gamma + 1,
            actual: p.len(),
        });
    }
    for (i, &x) in drafted.iter().enumerate() {
        let qx = q[i][x as usize];
        assert!(qx > 0.0, "drafted token {x} has zero draft probability");
        let ratio = p[i][x as usize] / qx;
        let r: f64 = rng.random();
        if r > ratio {
            let next = sample_index(&residual(&p[i], &q[i]), rng);
            return Ok((i, next));
        }
    }
    Ok((gamma, sample_index(&p[gamma], rng)))
}

/// Longest prefix of `drafted` matching the target's own picks, plus the
/// target's pick right after it.
pub fn greedy_verify(target_argmax: &[u32], drafted: &[u32]) -> Result<(usize, u32)> {
    if target_argmax.len() != drafted.len() + 1 {
        return Err(Error::ShapeMismatch {
            expected: drafted.len() + 1,
            actual: target_argmax.len(),
        });
    }
    let n = drafted
        .iter()
        .zip(target_argmax)
        .take_while(|(d, t)| d == t)
        .count();
    Ok((n, target_argmax[n]))
}
