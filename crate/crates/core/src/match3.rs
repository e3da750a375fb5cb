//! Match3 via sum-of-determinant attention.
//!
//! A single head with 7-dimensional embeddings: the first six coordinates
//! hold two 3-chunks whose determinants add up to
//! `c·cos(2π(x_i + x_j1 + x_j2)/M)`, the seventh selects a "blank" pair that
//! always scores `c` and carries value 0. Every regular pair carries
//! value 1, so the attention output is ~`β/(β+1)` where `β` counts the
//! matching pairs, and thresholding near 1/2 recovers the Match3 bit.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometric::det3;

pub const EMBED_DIM: usize = 7;
pub const BLANK_KEY: [f64; EMBED_DIM] = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
/// Target bound on the spurious softmax mass used to pick `c`.
pub const EPS_TARGET: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Match3Instance {
    modulus: u32,
    x: Vec<u32>,
    c: f64,
}

impl Match3Instance {
    /// Instance with the default scaling constant [`default_c`].
    pub fn new(modulus: u32, x: Vec<u32>) -> Result<Self> {
        let c = if x.is_empty() || modulus == 0 { 1.0 } else { default_c(x.len(), modulus) };
        Self::with_c(modulus, x, c)
    }

    pub fn with_c(modulus: u32, x: Vec<u32>, c: f64) -> Result<Self> {
        if modulus == 0 {
            return Err(Error::domain("modulus must be positive"));
        }
        if x.is_empty() {
            return Err(Error::domain("sequence must be non-empty"));
        }
        if let Some(&bad) = x.iter().find(|&&v| v >= modulus) {
            return Err(Error::domain(format!("token {bad} outside [0, {modulus})")));
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::domain(format!("scaling constant must be positive, got {c}")));
        }
        Ok(Match3Instance { modulus, x, c })
    }

    pub fn random<R: Rng + ?Sized>(n: usize, modulus: u32, rng: &mut R) -> Result<Self> {
        if modulus == 0 {
            return Err(Error::domain("modulus must be positive"));
        }
        Self::new(modulus, (0..n).map(|_| rng.random_range(0..modulus)).collect())
    }

    pub fn modulus(&self) -> u32 {
        self.modulus
    }
    pub fn tokens(&self) -> &[u32] {
        &self.x
    }
    pub fn c(&self) -> f64 {
        self.c
    }
    pub fn len(&self) -> usize {
        self.x.len()
    }
    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    fn theta(&self, t: usize) -> f64 {
        2.0 * PI * self.x[t] as f64 / self.modulus as f64
    }

    /// Gap between a match and the best non-match, per unit of `c`.
    fn gap(&self) -> f64 {
        1.0 - (2.0 * PI / self.modulus as f64).cos()
    }
}

/// `⌈2·ln(n²/ε)/(1 − cos(2π/M))⌉` with `ε = EPS_TARGET`.
///
/// For `M <= 2` every residue is a match or the cosine gap is 2, so the
/// formula stays finite; `M = 1` makes every triple match and any `c` works.
pub fn default_c(n: usize, modulus: u32) -> f64 {
    let gap = 1.0 - (2.0 * PI / modulus as f64).cos();
    let n2 = (n * n) as f64;
    let gap = if gap <= 0.0 { 2.0 } else { gap };
    (2.0 * (n2 / EPS_TARGET).ln().max(1.0) / gap).ceil()
}

/// Bound on the attention mass that leaks onto non-matching pairs:
/// `n²·exp(−c·(1 − cos(2π/M)))`.
pub fn eps_margin(inst: &Match3Instance) -> f64 {
    let n2 = (inst.len() * inst.len()) as f64;
    if inst.modulus == 1 {
        return 0.0;
    }
    n2 * (-inst.c * inst.gap()).exp()
}

/// Decision threshold applied to the attention output.
///
/// With exact arithmetic a match gives output `β/(β+1) >= 1/2` (leaked mass
/// only adds value-1 pairs), but the matching scores are computed through
/// cosines and land a rounding error below `c`, so `β = 1` can fall a hair
/// under 1/2. The cut is lowered by `2·eps_margin` plus the output shift a
/// score error of `16·c·ε_mach` can cause (`β = 1` gives `1/(1 + e^δ)`, so
/// at most `δ/4`), which stays far above the no-match output
/// (at most `eps_margin`).
pub fn threshold(inst: &Match3Instance) -> f64 {
    let rounding = 4.0 * inst.c * f64::EPSILON;
    0.5 - 2.0 * eps_margin(inst) - rounding
}

/// Brute force: bit `i` is set iff some `(j1, j2)`, unrestricted, has
/// `x_i + x_j1 + x_j2 ≡ 0 (mod M)`.
pub fn match3_oracle(inst: &Match3Instance) -> Vec<bool> {
    let m = inst.modulus as u64;
    inst.x
        .iter()
        .map(|&xi| inst.x.iter().any(|&a| inst.x.iter().any(|&b| (xi as u64 + a as u64 + b as u64).is_multiple_of(m))))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Match3Embeddings {
    pub q: Vec<[f64; EMBED_DIM]>,
    pub k: Vec<[f64; EMBED_DIM]>,
    pub k2: Vec<[f64; EMBED_DIM]>,
    pub blank_key: [f64; EMBED_DIM],
    /// per-token `V` and `V'` scalars
    pub v: Vec<f64>,
    pub v2: Vec<f64>,
    pub blank_value: f64,
}

pub fn build_embeddings(inst: &Match3Instance) -> Match3Embeddings {
    let c = inst.c;
    let n = inst.len();
    let mut q = Vec::with_capacity(n);
    let mut k = Vec::with_capacity(n);
    let mut k2 = Vec::with_capacity(n);
    for t in 0..n {
        let (s, co) = inst.theta(t).sin_cos();
        q.push([c * co, c * s, 0.0, -c * s, c * co, 0.0, c]);
        k.push([s, co, 0.0, -s, -co, 0.0, 0.0]);
        k2.push([0.0, 0.0, co, 0.0, 0.0, -s, 0.0]);
    }
    Match3Embeddings { q, k, k2, blank_key: BLANK_KEY, v: vec![1.0; n], v2: vec![1.0; n], blank_value: 0.0 }
}

fn chunk(v: &[f64; EMBED_DIM], at: usize) -> [f64; 3] {
    [v[at], v[at + 1], v[at + 2]]
}

/// Score of a regular pair: the two chunk determinants over the first six
/// coordinates.
pub fn pair_score(emb: &Match3Embeddings, i: usize, j1: usize, j2: usize) -> f64 {
    let (q, k, k2) = (&emb.q[i], &emb.k[j1], &emb.k2[j2]);
    det3(&chunk(q, 0), &chunk(k, 0), &chunk(k2, 0)) + det3(&chunk(q, 3), &chunk(k, 3), &chunk(k2, 3))
}

pub fn blank_score(emb: &Match3Embeddings, i: usize) -> f64 {
    emb.q[i].iter().zip(&emb.blank_key).map(|(a, b)| a * b).sum()
}

/// Per query `i`: `n²` regular scores in `(j1, j2)` row-major order,
/// followed by the blank score.
pub fn match3_attention_scores(emb: &Match3Embeddings) -> Vec<Vec<f64>> {
    let n = emb.q.len();
    (0..n)
        .map(|i| {
            let mut s = Vec::with_capacity(n * n + 1);
            for j1 in 0..n {
                for j2 in 0..n {
                    s.push(pair_score(emb, i, j1, j2));
                }
            }
            s.push(blank_score(emb, i));
            s
        })
        .collect()
}

/// Attention output per query before thresholding.
pub fn match3_outputs(inst: &Match3Instance) -> Vec<f64> {
    let emb = build_embeddings(inst);
    let n = inst.len();
    match3_attention_scores(&emb)
        .into_iter()
        .map(|s| {
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut num = 0.0;
            let mut den = 0.0;
            for (idx, &a) in s.iter().enumerate() {
                let w = (a - m).exp();
                let value = if idx == n * n { emb.blank_value } else { emb.v[idx / n] * emb.v2[idx % n] };
                num += w * value;
                den += w;
            }
            num / den
        })
        .collect()
}

pub fn match3_transformer(inst: &Match3Instance) -> Vec<bool> {
    let cut = threshold(inst);
    match3_outputs(inst).into_iter().map(|z| z >= cut).collect()
}

/// Runs every sequence of length `n` over `[0, M)`; returns
/// `(instances, mismatches)`.
pub fn exhaustive_sweep(n: usize, modulus: u32) -> Result<(u64, u64)> {
    let total = (modulus as u64).checked_pow(n as u32).ok_or_else(|| Error::domain("sweep too large"))?;
    let mut mismatches = 0;
    let mut x = vec![0u32; n];
    for code in 0..total {
        let mut r = code;
        for t in x.iter_mut() {
            *t = (r % modulus as u64) as u32;
            r /= modulus as u64;
        }
        let inst = Match3Instance::new(modulus, x.clone())?;
        if match3_transformer(&inst) != match3_oracle(&inst) {
            mismatches += 1;
        }
    }
    Ok((total, mismatches))
}
