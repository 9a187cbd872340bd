// Brute-force reference implementations of the attack-loss pieces,
// written independently of the library code so the two can check each
// other. Everything here favors obviousness over speed.

#![allow(dead_code)]

use trap_lab::attack::{AggregatorMode, PatchSpec};
use trap_lab::diffmath::Array;

/// Top-m selection per row by exhaustive sort of (score, index) pairs.
pub fn oracle_tail_mask(clean: &Array, q: f64) -> Vec<Vec<f64>> {
    let (b, k) = (clean.shape()[0], clean.shape()[1]);
    let mut m = (q * k as f64).ceil() as usize;
    if m < 1 {
        m = 1;
    }
    if m > k {
        m = k;
    }
    let mut out = vec![vec![0.0; k]; b];
    for (bi, row) in out.iter_mut().enumerate() {
        let mut pairs: Vec<(f64, usize)> = (0..k).map(|ki| (clean.at2(bi, ki), ki)).collect();
        // highest score first; equal scores keep the lower index first
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for (_, ki) in pairs.into_iter().take(m) {
            row[ki] = 1.0;
        }
    }
    out
}

pub fn oracle_tail_score(dj: &[f64], mask: &[f64], eps_stab: f64) -> f64 {
    let mut num = 0.0;
    let mut den = eps_stab;
    for i in 0..dj.len() {
        num += mask[i] * dj[i];
        den += mask[i];
    }
    num / den
}

pub fn oracle_aggregate(s: &[f64], tau: f64, mode: AggregatorMode) -> f64 {
    match mode {
        AggregatorMode::Mean => s.iter().sum::<f64>() / s.len() as f64,
        AggregatorMode::Max => {
            let mut best = s[0];
            for v in &s[1..] {
                if *v > best {
                    best = *v;
                }
            }
            best
        }
        AggregatorMode::SoftHardest | AggregatorMode::SoftminLiteral => {
            let sign = if matches!(mode, AggregatorMode::SoftHardest) {
                1.0
            } else {
                -1.0
            };
            let shift = s
                .iter()
                .map(|v| sign * v / tau)
                .fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = s.iter().map(|v| (sign * v / tau - shift).exp()).collect();
            let total: f64 = weights.iter().sum();
            s.iter().zip(&weights).map(|(v, w)| v * w / total).sum()
        }
    }
}

pub fn oracle_sign_gate(dj: &Array) -> f64 {
    let mut acc = 0.0;
    for d in dj.data() {
        if *d > 0.0 {
            acc += d * d;
        }
    }
    acc / dj.len() as f64
}

pub fn oracle_magnitude_gate(dj: &Array, beta: f64) -> f64 {
    let mut acc = 0.0;
    for d in dj.data() {
        if *d < -beta {
            acc += (d + beta) * (d + beta);
        }
    }
    acc / dj.len() as f64
}

/// TV and L2 of δ = ε·tanh(ρ), recomputing δ from scratch with scalar
/// ops (including the strict-interior tanh clamp the library uses).
pub fn oracle_regularizers(patch: &PatchSpec) -> (f64, f64) {
    let (h, w) = patch.size;
    let bound = 1.0 - f64::EPSILON / 2.0;
    let delta = |i: usize, j: usize, c: usize| -> f64 {
        let rho = patch.rho.data()[(i * w + j) * 3 + c];
        patch.epsilon * rho.tanh().clamp(-bound, bound)
    };
    let mut tv = 0.0;
    let mut l2 = 0.0;
    for c in 0..3 {
        for i in 0..h {
            for j in 0..w {
                l2 += delta(i, j, c) * delta(i, j, c);
                if j + 1 < w {
                    tv += (delta(i, j + 1, c) - delta(i, j, c)).abs();
                }
                if i + 1 < h {
                    tv += (delta(i + 1, j, c) - delta(i, j, c)).abs();
                }
            }
        }
    }
    (tv, l2)
}
