//! Dense reference implementation of 2-simplicial attention.
//!
//! Materializes the full windowed logit tensor `[batch, heads, n, w1, w2]`
//! in double precision, applies the joint `(j, k)` softmax and contracts
//! against `v_j ∘ v'_k`. The backward pass evaluates the analytic gradient
//! formulas cell by cell. Everything here is single-threaded and written
//! for clarity; it is the oracle the tiled engine is checked against.

use crate::error::{Error, Result};
use crate::geometric;
use crate::tensor::{AttnConfig, AttnInputs, Element, LogitForm, SeqTensor};

/// Value stored in masked cells; `exp` of it underflows to zero.
pub const MASK_VALUE: f64 = -1.0e38;

/// Dense windowed logits (or probabilities).
///
/// Cell `(b, h, i, a, c)` holds the entry for key position `j = i - a` and
/// second-key position `k = i - c`; it is valid iff both are `>= 0`, which
/// is exactly `i - w1 < j <= i` and `i - w2 < k <= i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitTensor {
    values: Vec<f64>,
    valid: Vec<bool>,
    batch: usize,
    heads: usize,
    n: usize,
    w1: usize,
    w2: usize,
    /// Whether `cfg.scale` has been folded into the values.
    pub scaled: bool,
}

impl LogitTensor {
    /// Evaluates `cell(b, h, i, j, k)` on every valid cell; invalid cells get
    /// [`MASK_VALUE`].
    pub fn from_cells(
        cfg: &AttnConfig,
        batch: usize,
        scaled: bool,
        mut cell: impl FnMut(usize, usize, usize, usize, usize) -> f64,
    ) -> Self {
        let (n, w1, w2, heads) = (cfg.n, cfg.w1, cfg.w2, cfg.q_heads);
        let len = batch * heads * n * w1 * w2;
        let mut values = vec![MASK_VALUE; len];
        let mut valid = vec![false; len];
        let mut idx = 0;
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..n {
                    for a in 0..w1 {
                        for c in 0..w2 {
                            if a <= i && c <= i {
                                values[idx] = cell(b, h, i, i - a, i - c);
                                valid[idx] = true;
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
        LogitTensor { values, valid, batch, heads, n, w1, w2, scaled }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        (self.batch, self.heads, self.n, self.w1, self.w2)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    fn row_len(&self) -> usize {
        self.w1 * self.w2
    }

    fn row_index(&self, b: usize, h: usize, i: usize) -> usize {
        (b * self.heads + h) * self.n + i
    }

    /// All `w1 * w2` cells of query row `(b, h, i)`, with their validity.
    pub fn row(&self, b: usize, h: usize, i: usize) -> (&[f64], &[bool]) {
        let r = self.row_index(b, h, i) * self.row_len();
        (&self.values[r..r + self.row_len()], &self.valid[r..r + self.row_len()])
    }

    /// Entry for absolute positions `(i, j, k)`; `None` when masked.
    pub fn get(&self, b: usize, h: usize, i: usize, j: usize, k: usize) -> Option<f64> {
        if j > i || k > i || i - j >= self.w1 || i - k >= self.w2 {
            return None;
        }
        let r = self.row_index(b, h, i) * self.row_len() + (i - j) * self.w2 + (i - k);
        self.valid[r].then_some(self.values[r])
    }

    pub fn num_rows(&self) -> usize {
        self.batch * self.heads * self.n
    }
}

/// Attention output plus the per-row log-sum-exp of the masked logits,
/// indexed `[(b * heads + h) * n + i]`.
#[derive(Debug, Clone)]
pub struct AttnOutput<T: Element> {
    pub out: SeqTensor<T>,
    pub lse: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GradBundle<T: Element> {
    pub dq: SeqTensor<T>,
    pub dk: SeqTensor<T>,
    pub dk2: SeqTensor<T>,
    pub dv: SeqTensor<T>,
    pub dv2: SeqTensor<T>,
}

impl<T: Element> GradBundle<T> {
    pub fn named(&self) -> [(&'static str, &SeqTensor<T>); 5] {
        [("dQ", &self.dq), ("dK", &self.dk), ("dK'", &self.dk2), ("dV", &self.dv), ("dV'", &self.dv2)]
    }
}

/// Probabilities from [`masked_softmax_jk`] together with the row statistics.
#[derive(Debug, Clone)]
pub struct AttnWeights {
    pub probs: LogitTensor,
    pub lse: Vec<f64>,
}

/// Inputs promoted to `f64` with the additive `K'`/`V'` biases applied.
pub(crate) struct DoubleInputs {
    pub q: SeqTensor<f64>,
    pub k: SeqTensor<f64>,
    pub k2: SeqTensor<f64>,
    pub v: SeqTensor<f64>,
    pub v2: SeqTensor<f64>,
}

impl DoubleInputs {
    pub(crate) fn new<T: Element>(inputs: &AttnInputs<'_, T>, cfg: &AttnConfig) -> Self {
        let (kb, vb) = (cfg.k2_bias, cfg.v2_bias);
        DoubleInputs {
            q: inputs.q.to_f64(),
            k: inputs.k.to_f64(),
            k2: inputs.k2.map(|x| x.to_f64() + kb),
            v: inputs.v.to_f64(),
            v2: inputs.v2.map(|x| x.to_f64() + vb),
        }
    }
}

/// Scaled trilinear logits `scale * sum_l q_il k_jl k'_kl` on the window.
pub fn trilinear_logits<T: Element>(inputs: &AttnInputs<'_, T>, cfg: &AttnConfig) -> Result<LogitTensor> {
    inputs.check(cfg)?;
    let x = DoubleInputs::new(inputs, cfg);
    Ok(LogitTensor::from_cells(cfg, inputs.batch(), true, |b, h, i, j, k| {
        let g = cfg.kv_head_for(h);
        let (q, k1, k2) = (x.q.row(b, i, h), x.k.row(b, j, g), x.k2.row(b, k, g));
        let mut s = 0.0;
        for l in 0..cfg.d {
            s += q[l] * k1[l] * k2[l];
        }
        cfg.scale * s
    }))
}

/// Logits for whichever form `cfg.logit_form` selects.
pub fn logits<T: Element>(inputs: &AttnInputs<'_, T>, cfg: &AttnConfig) -> Result<LogitTensor> {
    match cfg.logit_form {
        LogitForm::Trilinear => trilinear_logits(inputs, cfg),
        LogitForm::SumOfDeterminants => geometric::det_logits(inputs, cfg),
    }
}

/// Softmax over the joint `(j, k)` axis of every query row.
pub fn masked_softmax_jk(mut a: LogitTensor) -> AttnWeights {
    let row_len = a.row_len();
    let mut lse = Vec::with_capacity(a.num_rows());
    for (vals, valid) in a.values.chunks_mut(row_len).zip(a.valid.chunks(row_len)) {
        let m = vals
            .iter()
            .zip(valid)
            .filter(|(_, &ok)| ok)
            .fold(f64::NEG_INFINITY, |m, (&v, _)| m.max(v));
        let mut sum = 0.0;
        for (v, &ok) in vals.iter_mut().zip(valid) {
            *v = if ok { (*v - m).exp() } else { 0.0 };
            sum += *v;
        }
        for v in vals.iter_mut() {
            *v /= sum;
        }
        lse.push(m + sum.ln());
    }
    AttnWeights { probs: a, lse }
}

/// `out_i = sum_{jk} S_ijk (v_j ∘ v'_k)`; `v2_bias` is added to `V'` first.
pub fn attn_output<T: Element>(
    s: &AttnWeights,
    v: &SeqTensor<T>,
    v2: &SeqTensor<T>,
    cfg: &AttnConfig,
) -> Result<AttnOutput<f64>> {
    let batch = v.shape().batch;
    let (nb, nh, nn, w1, w2) = s.probs.dims();
    if (nb, nh, nn, w1, w2) != (batch, cfg.q_heads, cfg.n, cfg.w1, cfg.w2) {
        return Err(Error::config("probability tensor does not match configuration"));
    }
    if v.shape() != cfg.kv_shape(batch) || v2.shape() != cfg.kv_shape(batch) {
        return Err(Error::config("V/V' shapes do not match configuration"));
    }
    let v = v.to_f64();
    let v2 = v2.map(|x| x.to_f64() + cfg.v2_bias);
    let mut out = SeqTensor::<f64>::zeros(cfg.q_shape(batch))?;
    for b in 0..batch {
        for h in 0..cfg.q_heads {
            let g = cfg.kv_head_for(h);
            for i in 0..cfg.n {
                let mut acc = vec![0.0; cfg.d];
                for j in cfg.window_k(i).range() {
                    for k in cfg.window_k2(i).range() {
                        let p = s.probs.get(b, h, i, j, k).unwrap_or(0.0);
                        let (vj, vk) = (v.row(b, j, g), v2.row(b, k, g));
                        for l in 0..cfg.d {
                            acc[l] += p * vj[l] * vk[l];
                        }
                    }
                }
                out.row_mut(b, i, h).copy_from_slice(&acc);
            }
        }
    }
    Ok(AttnOutput { out, lse: s.lse.clone() })
}

pub fn forward<T: Element>(inputs: &AttnInputs<'_, T>, cfg: &AttnConfig) -> Result<AttnOutput<f64>> {
    let weights = masked_softmax_jk(logits(inputs, cfg)?);
    attn_output(&weights, inputs.v, inputs.v2, cfg)
}

/// Partial derivatives of the unscaled logit with respect to `q`, `k`, `k'`.
fn logit_partials(form: LogitForm, q: &[f64], k: &[f64], k2: &[f64], gq: &mut [f64], gk: &mut [f64], gk2: &mut [f64]) {
    match form {
        LogitForm::Trilinear => {
            for l in 0..q.len() {
                gq[l] = k[l] * k2[l];
                gk[l] = q[l] * k2[l];
                gk2[l] = q[l] * k[l];
            }
        }
        LogitForm::SumOfDeterminants => {
            for c in (0..q.len()).step_by(3) {
                let a = [q[c], q[c + 1], q[c + 2]];
                let bb = [k[c], k[c + 1], k[c + 2]];
                let cc = [k2[c], k2[c + 1], k2[c + 2]];
                gq[c..c + 3].copy_from_slice(&geometric::cross(&bb, &cc));
                gk[c..c + 3].copy_from_slice(&geometric::cross(&cc, &a));
                gk2[c..c + 3].copy_from_slice(&geometric::cross(&a, &bb));
            }
        }
    }
}

/// Analytic gradients of `<dO, O>` with respect to all five inputs.
///
/// `lse` must be the statistics returned by [`forward`] for the same inputs;
/// probabilities are recomputed from it. Gradients are taken with respect to
/// the pre-bias `K'`/`V'`.
pub fn backward<T: Element>(
    inputs: &AttnInputs<'_, T>,
    d_out: &SeqTensor<T>,
    lse: &[f64],
    cfg: &AttnConfig,
) -> Result<GradBundle<f64>> {
    inputs.check(cfg)?;
    let batch = inputs.batch();
    if d_out.shape() != cfg.q_shape(batch) {
        return Err(Error::config(format!("dO has shape {}, expected {}", d_out.shape(), cfg.q_shape(batch))));
    }
    if lse.len() != batch * cfg.q_heads * cfg.n {
        return Err(Error::Usage(format!(
            "forward statistics missing: expected {} lse entries, got {}",
            batch * cfg.q_heads * cfg.n,
            lse.len()
        )));
    }
    let x = DoubleInputs::new(inputs, cfg);
    let a = logits(inputs, cfg)?;
    let d_out = d_out.to_f64();
    let d = cfg.d;

    let mut dq = SeqTensor::<f64>::zeros(cfg.q_shape(batch))?;
    let mut dk = SeqTensor::<f64>::zeros(cfg.kv_shape(batch))?;
    let mut dk2 = SeqTensor::<f64>::zeros(cfg.kv_shape(batch))?;
    let mut dv = SeqTensor::<f64>::zeros(cfg.kv_shape(batch))?;
    let mut dv2 = SeqTensor::<f64>::zeros(cfg.kv_shape(batch))?;
    let (mut gq, mut gk, mut gk2) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);

    for b in 0..batch {
        for h in 0..cfg.q_heads {
            let g = cfg.kv_head_for(h);
            for i in 0..cfg.n {
                let row_lse = lse[(b * cfg.q_heads + h) * cfg.n + i];
                let d_o = d_out.row(b, i, h);
                let cells: Vec<(usize, usize, f64, f64)> = cfg
                    .window_k(i)
                    .range()
                    .flat_map(|j| cfg.window_k2(i).range().map(move |k| (j, k)))
                    .map(|(j, k)| {
                        let s = (a.get(b, h, i, j, k).expect("cell inside window") - row_lse).exp();
                        let (vj, vk) = (x.v.row(b, j, g), x.v2.row(b, k, g));
                        let dp: f64 = (0..d).map(|l| d_o[l] * vj[l] * vk[l]).sum();
                        (j, k, s, dp)
                    })
                    .collect();
                let delta: f64 = cells.iter().map(|&(_, _, s, dp)| s * dp).sum();
                for &(j, k, s, dp) in &cells {
                    let ds = s * (dp - delta);
                    let (qi, kj, kk) = (x.q.row(b, i, h), x.k.row(b, j, g), x.k2.row(b, k, g));
                    let (vj, vk) = (x.v.row(b, j, g).to_vec(), x.v2.row(b, k, g).to_vec());
                    logit_partials(cfg.logit_form, qi, kj, kk, &mut gq, &mut gk, &mut gk2);
                    let w = cfg.scale * ds;
                    for l in 0..d {
                        dq.row_mut(b, i, h)[l] += w * gq[l];
                        dk.row_mut(b, j, g)[l] += w * gk[l];
                        dk2.row_mut(b, k, g)[l] += w * gk2[l];
                        dv.row_mut(b, j, g)[l] += s * d_o[l] * vk[l];
                        dv2.row_mut(b, k, g)[l] += s * d_o[l] * vj[l];
                    }
                }
            }
        }
    }
    Ok(GradBundle { dq, dk, dk2, dv, dv2 })
}
