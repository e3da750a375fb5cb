//! Blocked online-softmax engine.
//!
//! Forward: for each query tile, a scalar loop over `K` positions merges
//! `q ∘ k_j` into one operand so the logits against a `K'` tile are a rank-d
//! contraction; running `(m, l, acc)` statistics fold in one `K'` tile at a
//! time. The backward pass is split in two: [`backward_kv1`] owns `dK`/`dV`
//! and iterates per `K` tile, [`backward_kv2q_two_stage`] owns `dQ`, `dK'`,
//! `dV'` and runs even query tiles, then odd ones, so no two tiles of one
//! stage write the same `K'` rows.
//!
//! Probabilities are never stored; they are recomputed from the saved
//! log-sum-exp. Products of inputs are formed in the element type and every
//! reduction accumulates in `f64`.
//!
//! Sum-of-determinant logits are handled by concatenating the Sarrus terms
//! along the head dimension: `K` is stored as `[P_1 k, P_2 k]` and `K'` as
//! `[+R_1 k', -R_2 k']`, so one contraction of length `2d` yields the
//! determinant sum.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometric::{trilinear_terms, TrilinearTerm};
use crate::reference::{AttnOutput, GradBundle};
use crate::tensor::{AttnConfig, AttnInputs, Element, SeqTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileConfig {
    /// Query tile length.
    pub block_q: usize,
    /// `K'` tile length in the forward pass; `K` tile length in [`backward_kv1`].
    pub block_kv: usize,
    /// `K'` rows owned by one query tile in the two-stage backward; must be
    /// `block_q + w2`.
    pub block_kv2: usize,
}

impl TileConfig {
    /// Tiles for a given `w2`, with `block_kv2 = block_q + w2`.
    pub fn new(block_q: usize, block_kv: usize, w2: usize) -> Self {
        TileConfig { block_q, block_kv, block_kv2: block_q + w2 }
    }

    pub fn for_config(cfg: &AttnConfig) -> Self {
        let block_q = 64usize.max(cfg.w2);
        TileConfig::new(block_q, 32, cfg.w2)
    }

    fn validate(&self) -> Result<()> {
        if self.block_q == 0 || self.block_kv == 0 {
            return Err(Error::config("block_q and block_kv must be >= 1"));
        }
        Ok(())
    }

    /// Preconditions of [`backward_kv2q_two_stage`] (and so of
    /// [`backward_tiled`]).
    pub fn validate_two_stage(&self, cfg: &AttnConfig) -> Result<()> {
        self.validate()?;
        if self.block_kv2 != self.block_q + cfg.w2 {
            return Err(Error::config(format!(
                "two-stage backward requires block_kv2 == block_q + w2 ({} != {} + {})",
                self.block_kv2, self.block_q, cfg.w2
            )));
        }
        if cfg.w2 > self.block_q {
            return Err(Error::config(format!(
                "two-stage backward requires w2 <= block_q ({} > {})",
                cfg.w2, self.block_q
            )));
        }
        Ok(())
    }
}

/// Running softmax statistics for a block of query rows: max `m`,
/// normalizer `l` and the unnormalized output accumulator.
#[derive(Debug, Clone)]
pub struct RunningSoftmaxState {
    m: Vec<f64>,
    l: Vec<f64>,
    acc: Vec<f64>,
    d: usize,
}

impl RunningSoftmaxState {
    pub fn new(rows: usize, d: usize) -> Self {
        RunningSoftmaxState { m: vec![f64::NEG_INFINITY; rows], l: vec![0.0; rows], acc: vec![0.0; rows * d], d }
    }

    pub fn rows(&self) -> usize {
        self.m.len()
    }

    /// Folds one block of logits into row `r`: the running max is raised,
    /// `l` and `acc` are rescaled by `exp(m_old - m_new)`, and
    /// `probs[c] = exp(logits[c] - m_new)` is written for the caller to
    /// accumulate into [`Self::acc_mut`].
    #[inline(always)]
    pub fn absorb(&mut self, r: usize, logits: &[f64], probs: &mut [f64]) {
        let block_max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let m_old = self.m[r];
        let m_new = m_old.max(block_max);
        let mut sum = 0.0;
        for (p, &x) in probs.iter_mut().zip(logits) {
            *p = exp_nonpos(x - m_new);
        }
        for p in probs.iter() {
            sum += *p;
        }
        if m_new > m_old {
            let alpha = exp_nonpos(m_old - m_new);
            self.l[r] *= alpha;
            for a in &mut self.acc[r * self.d..(r + 1) * self.d] {
                *a *= alpha;
            }
            self.m[r] = m_new;
        }
        self.l[r] += sum;
    }

    #[inline]
    pub fn acc_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.acc[r * self.d..(r + 1) * self.d]
    }

    /// Normalized output of row `r` over everything absorbed so far.
    pub fn output(&self, r: usize) -> impl Iterator<Item = f64> + '_ {
        let l = self.l[r];
        self.acc[r * self.d..(r + 1) * self.d].iter().map(move |a| a / l)
    }

    pub fn lse(&self, r: usize) -> f64 {
        self.m[r] + self.l[r].ln()
    }
}

/// `exp(x)` for `x <= 0`, branch-free so it vectorizes. Arguments below
/// -708 are clamped (result ~1e-308, negligible against a normalizer >= 1).
/// Relative error is a few ulp.
#[inline(always)]
pub(crate) fn exp_nonpos(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const SHIFTER: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    let x = x.max(-708.0);
    let t = x * LOG2E + SHIFTER;
    let n = t - SHIFTER;
    let r = x - n * LN2_HI - n * LN2_LO;
    // Taylor series to r^13 on |r| <= ln2/2
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    let bits = (t.to_bits() as i64 - SHIFTER.to_bits() as i64 + 1023) << 52;
    p * f64::from_bits(bits as u64)
}

#[inline(always)]
fn dot<T: Element>(a: &[T], b: &[T]) -> f64 {
    let mut s = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        s[0] += x[0].to_f64() * y[0].to_f64();
        s[1] += x[1].to_f64() * y[1].to_f64();
        s[2] += x[2].to_f64() * y[2].to_f64();
        s[3] += x[3].to_f64() * y[3].to_f64();
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x.to_f64() * y.to_f64();
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

#[inline(always)]
fn axpy<T: Element>(alpha: f64, x: &[T], y: &mut [f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += alpha * x.to_f64();
    }
}

/// Inputs regrouped into contiguous per-head panels, with the logit form
/// expanded into concatenated trilinear terms.
struct Panels<T> {
    n: usize,
    d: usize,
    /// `terms * d`
    td: usize,
    q_heads: usize,
    kv_heads: usize,
    q: Vec<T>,
    kcat: Vec<T>,
    k2cat: Vec<T>,
    v: Vec<T>,
    v2: Vec<T>,
    terms: Vec<TrilinearTerm>,
}

impl<T: Element> Panels<T> {
    fn new(inputs: &AttnInputs<'_, T>, cfg: &AttnConfig) -> Self {
        let batch = inputs.batch();
        let (n, d) = (cfg.n, cfg.d);
        let terms = trilinear_terms(cfg.logit_form);
        let td = terms.len() * d;
        let (kb, vb) = (T::from_f64(cfg.k2_bias), T::from_f64(cfg.v2_bias));
        let mut q = Vec::with_capacity(batch * cfg.q_heads * n * d);
        for b in 0..batch {
            for h in 0..cfg.q_heads {
                for i in 0..n {
                    q.extend_from_slice(inputs.q.row(b, i, h));
                }
            }
        }
        let kv_len = batch * cfg.kv_heads * n;
        let mut kcat = vec![T::zero(); kv_len * td];
        let mut k2cat = vec![T::zero(); kv_len * td];
        let mut v = Vec::with_capacity(kv_len * d);
        let mut v2 = Vec::with_capacity(kv_len * d);
        let mut biased = vec![T::zero(); d];
        let mut row = 0;
        for b in 0..batch {
            for g in 0..cfg.kv_heads {
                for j in 0..n {
                    let k = inputs.k.row(b, j, g);
                    for (x, &y) in biased.iter_mut().zip(inputs.k2.row(b, j, g)) {
                        *x = y + kb;
                    }
                    for (t, term) in terms.iter().enumerate() {
                        let o = row * td + t * d;
                        term.perm_k.apply(k, &mut kcat[o..o + d]);
                        term.perm_k2.apply(&biased, &mut k2cat[o..o + d]);
                        if term.sign < 0.0 {
                            for x in &mut k2cat[o..o + d] {
                                *x = T::zero() - *x;
                            }
                        }
                    }
                    v.extend_from_slice(inputs.v.row(b, j, g));
                    v2.extend(inputs.v2.row(b, j, g).iter().map(|&x| x + vb));
                    row += 1;
                }
            }
        }
        Panels { n, d, td, q_heads: cfg.q_heads, kv_heads: cfg.kv_heads, q, kcat, k2cat, v, v2, terms }
    }

    #[inline(always)]
    fn q(&self, b: usize, h: usize, i: usize) -> &[T] {
        let o = ((b * self.q_heads + h) * self.n + i) * self.d;
        &self.q[o..o + self.d]
    }
    #[inline(always)]
    fn kv_row(&self, b: usize, g: usize, j: usize) -> usize {
        (b * self.kv_heads + g) * self.n + j
    }
    #[inline(always)]
    fn kcat(&self, b: usize, g: usize, j: usize) -> &[T] {
        let o = self.kv_row(b, g, j) * self.td;
        &self.kcat[o..o + self.td]
    }
    #[inline(always)]
    fn k2cat(&self, b: usize, g: usize, k: usize) -> &[T] {
        let o = self.kv_row(b, g, k) * self.td;
        &self.k2cat[o..o + self.td]
    }
    #[inline(always)]
    fn v(&self, b: usize, g: usize, j: usize) -> &[T] {
        let o = self.kv_row(b, g, j) * self.d;
        &self.v[o..o + self.d]
    }
    #[inline(always)]
    fn v2(&self, b: usize, g: usize, k: usize) -> &[T] {
        let o = self.kv_row(b, g, k) * self.d;
        &self.v2[o..o + self.d]
    }

    /// `dK = sum_t P_tᵀ dkcat_t` for one row.
    fn unpermute_k(&self, dkcat: &[f64], out: &mut [T]) {
        self.fold_terms(dkcat, out, |t| (1.0, t.perm_k))
    }

    /// `dK' = sum_t sign_t R_tᵀ dk2cat_t` for one row.
    fn unpermute_k2(&self, dk2cat: &[f64], out: &mut [T]) {
        self.fold_terms(dk2cat, out, |t| (t.sign, t.perm_k2))
    }

    fn fold_terms(
        &self,
        cat: &[f64],
        out: &mut [T],
        pick: impl Fn(&TrilinearTerm) -> (f64, crate::geometric::ChunkPerm),
    ) {
        let d = self.d;
        let mut sum = vec![0.0f64; d];
        let mut tmp = vec![0.0f64; d];
        for (t, term) in self.terms.iter().enumerate() {
            let (sign, perm) = pick(term);
            perm.inverse().apply(&cat[t * d..(t + 1) * d], &mut tmp);
            for (s, x) in sum.iter_mut().zip(&tmp) {
                *s += sign * x;
            }
        }
        for (o, s) in out.iter_mut().zip(sum) {
            *o = T::from_f64(s);
        }
    }
}

fn lse_index(cfg: &AttnConfig, b: usize, h: usize, i: usize) -> usize {
    (b * cfg.q_heads + h) * cfg.n + i
}

fn tile_starts(n: usize, block: usize) -> impl Iterator<Item = usize> + Clone {
    (0..n).step_by(block)
}

struct ForwardTile {
    b: usize,
    g: usize,
    ts: usize,
    te: usize,
    state: RunningSoftmaxState,
}

/// Key rows per register block.
const JB: usize = 8;
/// `K'` lanes per register block.
const KB: usize = 16;

/// Forward-only `f64` panels: `K'` (concatenated terms) transposed to
/// `[td][n + KB]` so a register block reads `KB` consecutive lanes; the tail
/// padding keeps partial blocks in bounds.
struct ForwardPanels {
    stride: usize,
    k2t: Vec<f64>,
    /// `d` rounded up to a multiple of `KB`
    dp: usize,
    v: Vec<f64>,
    v2: Vec<f64>,
}

impl ForwardPanels {
    fn new<T: Element>(p: &Panels<T>, batch: usize) -> Self {
        let (n, d, td) = (p.n, p.d, p.td);
        let stride = n + KB;
        let heads = batch * p.kv_heads;
        let mut k2t = vec![0.0; heads * td * stride];
        for head in 0..heads {
            for k in 0..n {
                let src = &p.k2cat[(head * n + k) * td..(head * n + k + 1) * td];
                for (l, x) in src.iter().enumerate() {
                    k2t[(head * td + l) * stride + k] = x.to_f64();
                }
            }
        }
        let dp = d.div_ceil(KB) * KB;
        let pad = |x: &[T]| {
            let mut out = vec![0.0; heads * n * dp];
            for (row, src) in x.chunks_exact(d).enumerate() {
                for (o, s) in out[row * dp..row * dp + d].iter_mut().zip(src) {
                    *o = s.to_f64();
                }
            }
            out
        };
        ForwardPanels { stride, k2t, dp, v: pad(&p.v), v2: pad(&p.v2) }
    }
}

/// Register-blocked `out[r][m] = sum_x a[r * sa + x] * b[x * sb + col + m]`
/// for `r < JB`, `m < KB`, `x < len`: the logit block `u · K'ᵀ`.
///
/// The portable path fuses multiply-adds exactly like the vector path, so
/// both produce the same bits.
#[inline(always)]
fn block_product(a: &[f64], sa: usize, b: &[f64], sb: usize, col: usize, len: usize) -> [[f64; KB]; JB] {
    assert!(len == 0 || ((JB - 1) * sa + len <= a.len() && (len - 1) * sb + col + KB <= b.len()));
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: feature detected; bounds asserted above.
            return unsafe { block_product_avx512(a, sa, b, sb, col, len) };
        }
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: as above.
            return unsafe { block_product_avx2(a, sa, b, sb, col, len) };
        }
    }
    block_product_portable(a, sa, b, sb, col, len)
}

#[inline(always)]
fn block_product_portable(a: &[f64], sa: usize, b: &[f64], sb: usize, col: usize, len: usize) -> [[f64; KB]; JB] {
    let mut acc = [[0.0f64; KB]; JB];
    for x in 0..len {
        let br = &b[x * sb + col..x * sb + col + KB];
        for (r, acc) in acc.iter_mut().enumerate() {
            let av = a[r * sa + x];
            for (o, &bv) in acc.iter_mut().zip(br) {
                *o = av.mul_add(bv, *o);
            }
        }
    }
    acc
}

/// `out[m] = sum_{r < rows} w[r * sw + col + m] * sum_x a[r * sa + x] * b[x * sb + col + m]`:
/// the value block `P · V'` weighted by `V` rows and summed over key rows.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn weighted_block(a: &[f64], sa: usize, b: &[f64], sb: usize, col: usize, len: usize, w: &[f64], sw: usize, rows: usize) -> [f64; KB] {
    assert!((1..=JB).contains(&rows) && (rows - 1) * sw + col + KB <= w.len());
    let blk = block_product(a, sa, b, sb, col, len);
    let mut out = [0.0f64; KB];
    for (r, br) in blk.iter().enumerate().take(rows) {
        for m in 0..KB {
            out[m] = br[m].mul_add(w[r * sw + col + m], out[m]);
        }
    }
    out
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn block_product_avx512(a: &[f64], sa: usize, b: &[f64], sb: usize, col: usize, len: usize) -> [[f64; KB]; JB] {
    use std::arch::x86_64::*;
    let (ap, bp) = (a.as_ptr(), b.as_ptr().add(col));
    let mut acc = [[_mm512_setzero_pd(); 2]; JB];
    for x in 0..len {
        let b0 = _mm512_loadu_pd(bp.add(x * sb));
        let b1 = _mm512_loadu_pd(bp.add(x * sb + 8));
        for (r, acc) in acc.iter_mut().enumerate() {
            let av = _mm512_set1_pd(*ap.add(r * sa + x));
            acc[0] = _mm512_fmadd_pd(av, b0, acc[0]);
            acc[1] = _mm512_fmadd_pd(av, b1, acc[1]);
        }
    }
    let mut out = [[0.0f64; KB]; JB];
    for (o, acc) in out.iter_mut().zip(&acc) {
        _mm512_storeu_pd(o.as_mut_ptr(), acc[0]);
        _mm512_storeu_pd(o.as_mut_ptr().add(8), acc[1]);
    }
    out
}

/// The same block as four 4 x 8 quadrants in 256-bit registers.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn block_product_avx2(a: &[f64], sa: usize, b: &[f64], sb: usize, col: usize, len: usize) -> [[f64; KB]; JB] {
    use std::arch::x86_64::*;
    let mut out = [[0.0f64; KB]; JB];
    for r0 in (0..JB).step_by(4) {
        for c0 in (0..KB).step_by(8) {
            let (ap, bp) = (a.as_ptr().add(r0 * sa), b.as_ptr().add(col + c0));
            let mut acc = [[_mm256_setzero_pd(); 2]; 4];
            for x in 0..len {
                let b0 = _mm256_loadu_pd(bp.add(x * sb));
                let b1 = _mm256_loadu_pd(bp.add(x * sb + 4));
                for (r, acc) in acc.iter_mut().enumerate() {
                    let av = _mm256_broadcast_sd(&*ap.add(r * sa + x));
                    acc[0] = _mm256_fmadd_pd(av, b0, acc[0]);
                    acc[1] = _mm256_fmadd_pd(av, b1, acc[1]);
                }
            }
            for (r, acc) in acc.iter().enumerate() {
                let o = out[r0 + r].as_mut_ptr().add(c0);
                _mm256_storeu_pd(o, acc[0]);
                _mm256_storeu_pd(o.add(4), acc[1]);
            }
        }
    }
    out
}

struct RowScratch {
    u: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
    w: Vec<f64>,
}

/// One query row `(b, h, i)`: key rows in blocks of `JB`, `K'` in tiles of
/// `block_kv`, each `JB x tile` block folded into the running state.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn forward_row<T: Element>(
    p: &Panels<T>,
    f: &ForwardPanels,
    cfg: &AttnConfig,
    block_kv: usize,
    (b, g, h, i): (usize, usize, usize, usize),
    state: &mut RunningSoftmaxState,
    r: usize,
    s: &mut RowScratch,
) {
    let (d, td) = (p.d, p.td);
    let scale = T::from_f64(cfg.scale);
    let head = b * p.kv_heads + g;
    let k2t = &f.k2t[head * td * f.stride..(head + 1) * td * f.stride];
    let q = p.q(b, h, i);
    let j_lo = (i + 1).saturating_sub(cfg.w1);
    let k_lo = (i + 1).saturating_sub(cfg.w2);
    let mut jc = j_lo;
    while jc <= i {
        let jn = JB.min(i + 1 - jc);
        for rr in 0..JB {
            let dst = &mut s.u[rr * td..(rr + 1) * td];
            if rr < jn {
                let kc = p.kcat(b, g, jc + rr);
                for (t, dc) in dst.chunks_exact_mut(d).enumerate() {
                    for ((x, &a), &c) in dc.iter_mut().zip(q).zip(&kc[t * d..(t + 1) * d]) {
                        *x = (a * c * scale).to_f64();
                    }
                }
            } else {
                dst.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let mut ks = k_lo;
        while ks <= i {
            let kt = block_kv.min(i + 1 - ks);
            let mut c0 = 0;
            while c0 < kt {
                let blk = block_product(&s.u, td, k2t, f.stride, ks + c0, td);
                let cn = KB.min(kt - c0);
                for rr in 0..jn {
                    s.logits[rr * kt + c0..rr * kt + c0 + cn].copy_from_slice(&blk[rr][..cn]);
                }
                c0 += KB;
            }
            let cells = jn * kt;
            state.absorb(r, &s.logits[..cells], &mut s.probs[..cells]);
            // block rows past jn hold stale data and are skipped below
            let dp = f.dp;
            let v2 = &f.v2[(head * p.n + ks) * dp..(head * p.n + ks + kt) * dp];
            let v1 = &f.v[(head * p.n + jc) * dp..];
            for col in (0..dp).step_by(KB) {
                let o = weighted_block(&s.probs, kt, v2, dp, col, kt, v1, dp, jn);
                s.w[col..col + KB].copy_from_slice(&o);
            }
            for (a, &x) in state.acc_mut(r).iter_mut().zip(&s.w[..d]) {
                *a += x;
            }
            ks += block_kv;
        }
        jc += JB;
    }
}

#[inline(always)]
fn forward_tile_body<T: Element>(
    p: &Panels<T>,
    f: &ForwardPanels,
    cfg: &AttnConfig,
    tiles: &TileConfig,
    (b, g, ts): (usize, usize, usize),
) -> ForwardTile {
    let te = (ts + tiles.block_q).min(cfg.n);
    let group = cfg.group_size();
    let mut state = RunningSoftmaxState::new((te - ts) * group, cfg.d);
    let cells = JB * tiles.block_kv;
    let mut s = RowScratch { u: vec![0.0; JB * p.td], logits: vec![0.0; cells], probs: vec![0.0; cells], w: vec![0.0; f.dp] };
    for i in ts..te {
        for hh in 0..group {
            let r = (i - ts) * group + hh;
            forward_row(p, f, cfg, tiles.block_kv, (b, g, g * group + hh, i), &mut state, r, &mut s);
        }
    }
    ForwardTile { b, g, ts, te, state }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn forward_tile_avx2<T: Element>(
    p: &Panels<T>,
    f: &ForwardPanels,
    cfg: &AttnConfig,
    tiles: &TileConfig,
    w: (usize, usize, usize),
) -> ForwardTile {
    forward_tile_body(p, f, cfg, tiles, w)
}

/// One query tile of one key/value group: rows are `(position, head in group)`.
/// Every lane keeps its own accumulator, so the vector width chosen at run
/// time does not change the result.
fn forward_tile<T: Element>(
    p: &Panels<T>,
    f: &ForwardPanels,
    cfg: &AttnConfig,
    tiles: &TileConfig,
    w: (usize, usize, usize),
) -> ForwardTile {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        // SAFETY: the required CPU features were detected above.
        return unsafe { forward_tile_avx2(p, f, cfg, tiles, w) };
    }
    forward_tile_body(p, f, cfg, tiles, w)
}

/// Tiled forward pass; returns the output and per-row log-sum-exp.
pub fn forward_tiled<T: Element>(inputs: &AttnInputs<'_, T>, cfg: &AttnConfig, tiles: &TileConfig) -> Result<AttnOutput<T>> {
    inputs.check(cfg)?;
    tiles.validate()?;
    let batch = inputs.batch();
    let panels = Panels::new(inputs, cfg);
    let fp = ForwardPanels::new(&panels, batch);
    let work: Vec<(usize, usize, usize)> = (0..batch)
        .flat_map(|b| (0..cfg.kv_heads).flat_map(move |g| tile_starts(cfg.n, tiles.block_q).map(move |ts| (b, g, ts))))
        .collect();
    let done: Vec<ForwardTile> = work.par_iter().map(|&w| forward_tile(&panels, &fp, cfg, tiles, w)).collect();

    let mut out = SeqTensor::<T>::zeros(cfg.q_shape(batch))?;
    let mut lse = vec![0.0; batch * cfg.q_heads * cfg.n];
    let group = cfg.group_size();
    for tile in &done {
        for i in tile.ts..tile.te {
            for hh in 0..group {
                let h = tile.g * group + hh;
                let r = (i - tile.ts) * group + hh;
                for (o, x) in out.row_mut(tile.b, i, h).iter_mut().zip(tile.state.output(r)) {
                    *o = T::from_f64(x);
                }
                lse[lse_index(cfg, tile.b, h, i)] = tile.state.lse(r);
            }
        }
    }
    Ok(AttnOutput { out, lse })
}

/// `D_i = sum_d dO_id O_id` per `(b, h, i)`, laid out like the lse.
pub fn backward_delta<T: Element>(out: &SeqTensor<T>, d_out: &SeqTensor<T>) -> Result<Vec<f64>> {
    if out.shape() != d_out.shape() {
        return Err(Error::config(format!("O has shape {} but dO has shape {}", out.shape(), d_out.shape())));
    }
    let s = out.shape();
    let mut delta = Vec::with_capacity(s.batch * s.heads * s.seq);
    for b in 0..s.batch {
        for h in 0..s.heads {
            for i in 0..s.seq {
                delta.push(dot(out.row(b, i, h), d_out.row(b, i, h)));
            }
        }
    }
    Ok(delta)
}

/// Saved forward statistics consumed by the backward kernels.
#[derive(Debug, Clone, Copy)]
pub struct BackwardStats<'a> {
    pub lse: &'a [f64],
    pub delta: &'a [f64],
}

impl BackwardStats<'_> {
    fn check(&self, cfg: &AttnConfig, batch: usize) -> Result<()> {
        let want = batch * cfg.q_heads * cfg.n;
        if self.lse.len() != want || self.delta.len() != want {
            return Err(Error::Usage(format!(
                "forward statistics missing: expected {want} lse / D entries, got {} / {}",
                self.lse.len(),
                self.delta.len()
            )));
        }
        Ok(())
    }
}

fn check_backward<T: Element>(inputs: &AttnInputs<'_, T>, d_out: &SeqTensor<T>, stats: &BackwardStats<'_>, cfg: &AttnConfig) -> Result<()> {
    inputs.check(cfg)?;
    let batch = inputs.batch();
    if d_out.shape() != cfg.q_shape(batch) {
        return Err(Error::config(format!("dO has shape {}, expected {}", d_out.shape(), cfg.q_shape(batch))));
    }
    stats.check(cfg, batch)
}

#[derive(Debug, Clone)]
pub struct Kv1Grads<T: Element> {
    pub dk: SeqTensor<T>,
    pub dv: SeqTensor<T>,
    /// Present when requested; accumulated across `K` tiles.
    pub dq: Option<SeqTensor<T>>,
}

struct Kv1Tile {
    b: usize,
    g: usize,
    js: usize,
    je: usize,
    dkcat: Vec<f64>,
    dv: Vec<f64>,
    /// rows `[js, dq_end)` × group × d
    dq: Option<Vec<f64>>,
    dq_end: usize,
}

fn kv1_tile<T: Element>(
    p: &Panels<T>,
    d_out: &SeqTensor<T>,
    stats: &BackwardStats<'_>,
    cfg: &AttnConfig,
    tiles: &TileConfig,
    compute_dq: bool,
    (b, g, js): (usize, usize, usize),
) -> Kv1Tile {
    let (n, d, td) = (cfg.n, cfg.d, p.td);
    let je = (js + tiles.block_kv).min(n);
    let blen = je - js;
    let group = cfg.group_size();
    let scale = cfg.scale;
    let scale_t = T::from_f64(scale);
    // i < j + w1 for some j in the tile
    let i_end = (je - 1 + cfg.w1).min(n);
    let mut dkcat = vec![0.0f64; blen * td];
    let mut dv = vec![0.0f64; blen * d];
    let mut dq = compute_dq.then(|| vec![0.0f64; (i_end - js) * group * d]);
    let mut k1k2 = vec![T::zero(); blen * td];
    let mut v1v2 = vec![T::zero(); blen * d];
    let mut k1k2_fold = vec![0.0f64; blen * d];
    let mut qk2 = vec![T::zero(); td];
    let mut dov2 = vec![0.0f64; d];

    // kv2 positions co-occurring with some j in the tile: j - w2 < k < j + w1
    for k in (js + 1).saturating_sub(cfg.w2)..i_end {
        // kv1 >= k is not required; only that some query sees both.
        let k2c = p.k2cat(b, g, k);
        let v2 = p.v2(b, g, k);
        for jj in 0..blen {
            let j = js + jj;
            for ((x, &a), &c) in k1k2[jj * td..(jj + 1) * td].iter_mut().zip(p.kcat(b, g, j)).zip(k2c) {
                *x = a * c;
            }
            for ((x, &a), &c) in v1v2[jj * d..(jj + 1) * d].iter_mut().zip(p.v(b, g, j)).zip(v2) {
                *x = a * c;
            }
            if compute_dq {
                let f = &mut k1k2_fold[jj * d..(jj + 1) * d];
                f.iter_mut().for_each(|x| *x = 0.0);
                for t in k1k2[jj * td..(jj + 1) * td].chunks_exact(d) {
                    for (x, y) in f.iter_mut().zip(t) {
                        *x += y.to_f64();
                    }
                }
            }
        }
        // queries i with i >= max(js, k), i < k + w2, i < je - 1 + w1
        let q_lo = js.max(k);
        let q_hi = i_end.min(k + cfg.w2);
        let mut qs = q_lo;
        while qs < q_hi {
            let qe = (qs + tiles.block_q).min(q_hi);
            for i in qs..qe {
                let j_lo = js.max((i + 1).saturating_sub(cfg.w1));
                let j_hi = je.min(i + 1);
                if j_lo >= j_hi {
                    continue;
                }
                for hh in 0..group {
                    let h = g * group + hh;
                    let li = lse_index(cfg, b, h, i);
                    let (m, delta) = (stats.lse[li], stats.delta[li]);
                    let q = p.q(b, h, i);
                    let d_o = d_out.row(b, i, h);
                    for t in 0..p.terms.len() {
                        for ((x, &a), &c) in qk2[t * d..(t + 1) * d].iter_mut().zip(q).zip(&k2c[t * d..(t + 1) * d]) {
                            *x = a * c * scale_t;
                        }
                    }
                    for ((x, &a), &c) in dov2.iter_mut().zip(d_o).zip(v2) {
                        *x = a.to_f64() * c.to_f64();
                    }
                    for j in j_lo..j_hi {
                        let jj = j - js;
                        let kk = &k1k2[jj * td..(jj + 1) * td];
                        let mut logit = 0.0;
                        for t in kk.chunks_exact(d) {
                            logit += dot(q, t);
                        }
                        let pr = (scale * logit - m).exp();
                        let dp = dot(d_o, &v1v2[jj * d..(jj + 1) * d]);
                        let ds = pr * (dp - delta);
                        for (x, &y) in dv[jj * d..(jj + 1) * d].iter_mut().zip(&dov2) {
                            *x += pr * y;
                        }
                        axpy(ds, &qk2, &mut dkcat[jj * td..(jj + 1) * td]);
                        if let Some(dq) = dq.as_mut() {
                            let o = ((i - js) * group + hh) * d;
                            for (x, &y) in dq[o..o + d].iter_mut().zip(&k1k2_fold[jj * d..(jj + 1) * d]) {
                                *x += ds * scale * y;
                            }
                        }
                    }
                }
            }
            qs = qe;
        }
    }
    Kv1Tile { b, g, js, je, dkcat, dv, dq, dq_end: i_end }
}

/// `dK` and `dV`, one work item per `(batch, kv head, K tile)`. With
/// `compute_dq`, per-tile `dQ` partials are also summed in tile order.
pub fn backward_kv1<T: Element>(
    inputs: &AttnInputs<'_, T>,
    d_out: &SeqTensor<T>,
    stats: &BackwardStats<'_>,
    cfg: &AttnConfig,
    tiles: &TileConfig,
    compute_dq: bool,
) -> Result<Kv1Grads<T>> {
    check_backward(inputs, d_out, stats, cfg)?;
    tiles.validate()?;
    let batch = inputs.batch();
    let panels = Panels::new(inputs, cfg);
    let work: Vec<(usize, usize, usize)> = (0..batch)
        .flat_map(|b| (0..cfg.kv_heads).flat_map(move |g| tile_starts(cfg.n, tiles.block_kv).map(move |js| (b, g, js))))
        .collect();
    let done: Vec<Kv1Tile> =
        work.par_iter().map(|&w| kv1_tile(&panels, d_out, stats, cfg, tiles, compute_dq, w)).collect();

    let d = cfg.d;
    let group = cfg.group_size();
    let mut dk = SeqTensor::<T>::zeros(cfg.kv_shape(batch))?;
    let mut dv = SeqTensor::<T>::zeros(cfg.kv_shape(batch))?;
    let mut dq_acc = compute_dq.then(|| vec![0.0f64; batch * cfg.q_heads * cfg.n * d]);
    for tile in &done {
        for j in tile.js..tile.je {
            let jj = j - tile.js;
            panels.unpermute_k(&tile.dkcat[jj * panels.td..(jj + 1) * panels.td], dk.row_mut(tile.b, j, tile.g));
            for (o, &x) in dv.row_mut(tile.b, j, tile.g).iter_mut().zip(&tile.dv[jj * d..(jj + 1) * d]) {
                *o = T::from_f64(x);
            }
        }
        if let (Some(acc), Some(part)) = (dq_acc.as_mut(), tile.dq.as_ref()) {
            for i in tile.js..tile.dq_end {
                for hh in 0..group {
                    let h = tile.g * group + hh;
                    let o = lse_index(cfg, tile.b, h, i) * d;
                    let s = ((i - tile.js) * group + hh) * d;
                    for (x, &y) in acc[o..o + d].iter_mut().zip(&part[s..s + d]) {
                        *x += y;
                    }
                }
            }
        }
    }
    let dq = match dq_acc {
        Some(acc) => {
            let mut dq = SeqTensor::<T>::zeros(cfg.q_shape(batch))?;
            for b in 0..batch {
                for h in 0..cfg.q_heads {
                    for i in 0..cfg.n {
                        let o = lse_index(cfg, b, h, i) * d;
                        for (x, &y) in dq.row_mut(b, i, h).iter_mut().zip(&acc[o..o + d]) {
                            *x = T::from_f64(y);
                        }
                    }
                }
            }
            Some(dq)
        }
        None => None,
    };
    Ok(Kv1Grads { dk, dv, dq })
}

/// Query rows of tile `t`.
fn q_tile_rows(t: usize, n: usize, block_q: usize) -> Range<usize> {
    t * block_q..((t + 1) * block_q).min(n)
}

/// `K'` rows receiving gradient from query tile `t`: `(ts - w2, te)` clamped.
fn kv2_write_range(rows: &Range<usize>, w2: usize) -> Range<usize> {
    (rows.start + 1).saturating_sub(w2)..rows.end
}

/// `K'` row ranges written by each query tile, grouped by stage
/// (`[even tiles, odd tiles]`).
pub fn stage_write_ranges(n: usize, block_q: usize, w2: usize) -> [Vec<Range<usize>>; 2] {
    let mut stages = [Vec::new(), Vec::new()];
    for t in 0..n.div_ceil(block_q) {
        stages[t % 2].push(kv2_write_range(&q_tile_rows(t, n, block_q), w2));
    }
    stages
}

/// True when no two ranges overlap.
pub fn ranges_disjoint(ranges: &[Range<usize>]) -> bool {
    let mut sorted: Vec<&Range<usize>> = ranges.iter().filter(|r| !r.is_empty()).collect();
    sorted.sort_by_key(|r| r.start);
    sorted.windows(2).all(|w| w[0].end <= w[1].start)
}

#[derive(Debug, Clone)]
pub struct Kv2qGrads<T: Element> {
    pub dq: SeqTensor<T>,
    pub dk2: SeqTensor<T>,
    pub dv2: SeqTensor<T>,
}

struct Kv2qTile {
    b: usize,
    g: usize,
    rows: Range<usize>,
    kv2: Range<usize>,
    dq: Vec<f64>,
    dk2cat: Vec<f64>,
    dv2: Vec<f64>,
}

fn kv2q_tile<T: Element>(
    p: &Panels<T>,
    d_out: &SeqTensor<T>,
    stats: &BackwardStats<'_>,
    cfg: &AttnConfig,
    tiles: &TileConfig,
    (b, g, t): (usize, usize, usize),
) -> Kv2qTile {
    let (d, td) = (cfg.d, p.td);
    let rows = q_tile_rows(t, cfg.n, tiles.block_q);
    let kv2 = kv2_write_range(&rows, cfg.w2);
    debug_assert!(kv2.len() <= tiles.block_kv2);
    let group = cfg.group_size();
    let scale = cfg.scale;
    let scale_t = T::from_f64(scale);
    let mut dq = vec![0.0f64; rows.len() * group * d];
    let mut dk2cat = vec![0.0f64; tiles.block_kv2 * td];
    let mut dv2 = vec![0.0f64; tiles.block_kv2 * d];
    let mut u = vec![T::zero(); td];
    let mut dov1 = vec![0.0f64; d];
    let mut rsum = vec![0.0f64; td];

    for j in (rows.start + 1).saturating_sub(cfg.w1)..rows.end {
        let kc = p.kcat(b, g, j);
        let v1 = p.v(b, g, j);
        for i in rows.start.max(j)..rows.end.min(j + cfg.w1) {
            let k_lo = (i + 1).saturating_sub(cfg.w2);
            for hh in 0..group {
                let h = g * group + hh;
                let li = lse_index(cfg, b, h, i);
                let (m, delta) = (stats.lse[li], stats.delta[li]);
                let q = p.q(b, h, i);
                let d_o = d_out.row(b, i, h);
                for (tt, uc) in u.chunks_exact_mut(d).enumerate() {
                    for ((x, &a), &c) in uc.iter_mut().zip(q).zip(&kc[tt * d..(tt + 1) * d]) {
                        *x = a * c * scale_t;
                    }
                }
                for ((x, &a), &c) in dov1.iter_mut().zip(d_o).zip(v1) {
                    *x = a.to_f64() * c.to_f64();
                }
                rsum.iter_mut().for_each(|x| *x = 0.0);
                for k in k_lo..=i {
                    let k2c = p.k2cat(b, g, k);
                    let v2 = p.v2(b, g, k);
                    let pr = (dot(&u, k2c) - m).exp();
                    let dp: f64 = dov1.iter().zip(v2).map(|(&x, &y)| x * y.to_f64()).sum();
                    let ds = pr * (dp - delta);
                    let kk = k - kv2.start;
                    for (x, &y) in dv2[kk * d..(kk + 1) * d].iter_mut().zip(&dov1) {
                        *x += pr * y;
                    }
                    axpy(ds, &u, &mut dk2cat[kk * td..(kk + 1) * td]);
                    axpy(ds, k2c, &mut rsum);
                }
                // dq_i += scale * sum_t kcat_t ∘ (sum_k ds k2cat_k)_t
                let o = ((i - rows.start) * group + hh) * d;
                for (tt, r) in rsum.chunks_exact(d).enumerate() {
                    for ((x, &y), &c) in dq[o..o + d].iter_mut().zip(r).zip(&kc[tt * d..(tt + 1) * d]) {
                        *x += scale * y * c.to_f64();
                    }
                }
            }
        }
    }
    Kv2qTile { b, g, rows, kv2, dq, dk2cat, dv2 }
}

/// `dQ`, `dK'`, `dV'` without overlapping writes: stage 0 runs the even
/// query tiles and stores their `K'` partials, stage 1 runs the odd tiles
/// and adds onto what stage 0 stored. Rows of `dQ` belong to exactly one
/// tile and are written once.
pub fn backward_kv2q_two_stage<T: Element>(
    inputs: &AttnInputs<'_, T>,
    d_out: &SeqTensor<T>,
    stats: &BackwardStats<'_>,
    cfg: &AttnConfig,
    tiles: &TileConfig,
) -> Result<Kv2qGrads<T>> {
    check_backward(inputs, d_out, stats, cfg)?;
    tiles.validate_two_stage(cfg)?;
    let batch = inputs.batch();
    let panels = Panels::new(inputs, cfg);
    let (d, td) = (cfg.d, panels.td);
    let group = cfg.group_size();
    let n_tiles = cfg.n.div_ceil(tiles.block_q);

    let mut dq = SeqTensor::<T>::zeros(cfg.q_shape(batch))?;
    let kv_rows = batch * cfg.kv_heads * cfg.n;
    let mut dk2cat = vec![0.0f64; kv_rows * td];
    let mut dv2 = vec![0.0f64; kv_rows * d];

    for stage in 0..2 {
        let work: Vec<(usize, usize, usize)> = (0..batch)
            .flat_map(|b| (0..cfg.kv_heads).flat_map(move |g| (stage..n_tiles).step_by(2).map(move |t| (b, g, t))))
            .collect();
        let done: Vec<Kv2qTile> =
            work.par_iter().map(|&w| kv2q_tile(&panels, d_out, stats, cfg, tiles, w)).collect();
        // barrier: every tile of this stage is finished before any write
        for tile in &done {
            for i in tile.rows.clone() {
                for hh in 0..group {
                    let o = ((i - tile.rows.start) * group + hh) * d;
                    for (x, &y) in dq.row_mut(tile.b, i, tile.g * group + hh).iter_mut().zip(&tile.dq[o..o + d]) {
                        *x = T::from_f64(y);
                    }
                }
            }
            for k in tile.kv2.clone() {
                let kk = k - tile.kv2.start;
                let row = panels.kv_row(tile.b, tile.g, k);
                let (gk, lk) = (&mut dk2cat[row * td..(row + 1) * td], &tile.dk2cat[kk * td..(kk + 1) * td]);
                let (gv, lv) = (&mut dv2[row * d..(row + 1) * d], &tile.dv2[kk * d..(kk + 1) * d]);
                if stage == 0 {
                    gk.copy_from_slice(lk);
                    gv.copy_from_slice(lv);
                } else {
                    gk.iter_mut().zip(lk).for_each(|(x, y)| *x += y);
                    gv.iter_mut().zip(lv).for_each(|(x, y)| *x += y);
                }
            }
        }
    }

    let mut dk2 = SeqTensor::<T>::zeros(cfg.kv_shape(batch))?;
    let mut dv2_out = SeqTensor::<T>::zeros(cfg.kv_shape(batch))?;
    for b in 0..batch {
        for g in 0..cfg.kv_heads {
            for k in 0..cfg.n {
                let row = panels.kv_row(b, g, k);
                panels.unpermute_k2(&dk2cat[row * td..(row + 1) * td], dk2.row_mut(b, k, g));
                for (x, &y) in dv2_out.row_mut(b, k, g).iter_mut().zip(&dv2[row * d..(row + 1) * d]) {
                    *x = T::from_f64(y);
                }
            }
        }
    }
    Ok(Kv2qGrads { dq, dk2, dv2: dv2_out })
}

/// Full tiled backward: `D` from the forward output, then both kernels.
pub fn backward_tiled<T: Element>(
    inputs: &AttnInputs<'_, T>,
    d_out: &SeqTensor<T>,
    fwd: &AttnOutput<T>,
    cfg: &AttnConfig,
    tiles: &TileConfig,
) -> Result<GradBundle<T>> {
    let delta = backward_delta(&fwd.out, d_out)?;
    let stats = BackwardStats { lse: &fwd.lse, delta: &delta };
    let kv1 = backward_kv1(inputs, d_out, &stats, cfg, tiles, false)?;
    let kv2q = backward_kv2q_two_stage(inputs, d_out, &stats, cfg, tiles)?;
    Ok(GradBundle { dq: kv2q.dq, dk: kv1.dk, dk2: kv2q.dk2, dv: kv1.dv, dv2: kv2q.dv2 })
}
