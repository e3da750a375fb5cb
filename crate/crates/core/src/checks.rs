//! Seeded comparison runs shared by the CLI and the test suites.
//!
//! Relative error throughout is `max|a − r| / max|r|` over a whole tensor,
//! falling back to the absolute error when the reference is identically
//! zero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::reference::{self, AttnOutput, GradBundle};
use crate::tensor::{AttnConfig, AttnTensors, Element, Precision, SeqTensor};
use crate::tiled::{self, TileConfig};

pub fn rel_err(a: impl IntoIterator<Item = f64>, r: impl IntoIterator<Item = f64>) -> f64 {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (x, y) in a.into_iter().zip(r) {
        num = num.max((x - y).abs());
        den = den.max(y.abs());
    }
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

pub fn tensor_rel_err<A: Element, B: Element>(a: &SeqTensor<A>, r: &SeqTensor<B>) -> f64 {
    rel_err(a.data().iter().map(|x| x.to_f64()), r.data().iter().map(|x| x.to_f64()))
}

/// Which (if any) deliberate error to inject into the engine results; a
/// negative control for the checking pipeline itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Perturbs one output element and one gradient element by 1e-3 of
    /// their tensor's scale.
    Perturb,
}

/// Errors of one seeded instance, engine vs reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivalenceErrors {
    pub out: f64,
    pub lse: f64,
    /// `[dQ, dK, dK', dV, dV']`; `None` when the backward pass was skipped.
    pub grads: Option<[f64; 5]>,
}

impl EquivalenceErrors {
    pub fn max(&self) -> f64 {
        let g = self.grads.map_or(0.0, |g| g.iter().copied().fold(0.0, f64::max));
        self.out.max(self.lse).max(g)
    }
}

/// Tolerance the engine must meet at `precision`.
pub fn tolerance(precision: Precision) -> f64 {
    match precision {
        Precision::Single => 1e-5,
        Precision::Double => 1e-11,
    }
}

/// Standard-normal inputs and upstream gradient for `seed`.
pub fn random_instance(cfg: &AttnConfig, batch: usize, seed: u64) -> Result<(AttnTensors<f64>, SeqTensor<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = AttnTensors::random(cfg, batch, &mut rng)?;
    let d_o = SeqTensor::random(cfg.q_shape(batch), &mut rng)?;
    Ok((t, d_o))
}

fn perturb<T: Element>(x: &mut SeqTensor<T>) {
    let bump = 1e-3 * x.max_abs().max(1.0);
    if let Some(v) = x.data_mut().first_mut() {
        *v = T::from_f64(v.to_f64() + bump);
    }
}

fn engine_run<T: Element>(
    t: &AttnTensors<T>,
    d_o: &SeqTensor<T>,
    cfg: &AttnConfig,
    tiles: &TileConfig,
    with_backward: bool,
    fault: Fault,
) -> Result<(AttnOutput<T>, Option<GradBundle<T>>)> {
    let mut fwd = tiled::forward_tiled(&t.inputs(), cfg, tiles)?;
    let mut grads = if with_backward { Some(tiled::backward_tiled(&t.inputs(), d_o, &fwd, cfg, tiles)?) } else { None };
    if fault == Fault::Perturb {
        perturb(&mut fwd.out);
        if let Some(g) = grads.as_mut() {
            perturb(&mut g.dk2);
        }
    }
    Ok((fwd, grads))
}

fn compare<T: Element>(
    fwd: &AttnOutput<T>,
    grads: Option<&GradBundle<T>>,
    r: &AttnOutput<f64>,
    rg: Option<&GradBundle<f64>>,
) -> EquivalenceErrors {
    let grads = grads.zip(rg).map(|(g, rg)| {
        let mut e = [0.0; 5];
        for (slot, ((_, a), (_, b))) in e.iter_mut().zip(g.named().into_iter().zip(rg.named())) {
            *slot = tensor_rel_err(a, b);
        }
        e
    });
    EquivalenceErrors {
        out: tensor_rel_err(&fwd.out, &r.out),
        lse: rel_err(fwd.lse.iter().copied(), r.lse.iter().copied()),
        grads,
    }
}

/// The tiled engine at `cfg.precision` against the double-precision
/// reference on the same (rounded) inputs.
pub fn equivalence_instance(
    cfg: &AttnConfig,
    tiles: &TileConfig,
    batch: usize,
    seed: u64,
    with_backward: bool,
    fault: Fault,
) -> Result<EquivalenceErrors> {
    let (t, d_o) = random_instance(cfg, batch, seed)?;
    fn go<T: Element>(
        t: &AttnTensors<f64>,
        d_o: &SeqTensor<f64>,
        cfg: &AttnConfig,
        tiles: &TileConfig,
        with_backward: bool,
        fault: Fault,
    ) -> Result<EquivalenceErrors> {
        let (t, d_o) = (t.cast::<T>(), d_o.cast::<T>());
        let (fwd, grads) = engine_run(&t, &d_o, cfg, tiles, with_backward, fault)?;
        let r = reference::forward(&t.inputs(), cfg)?;
        let rg = if with_backward { Some(reference::backward(&t.inputs(), &d_o, &r.lse, cfg)?) } else { None };
        Ok(compare(&fwd, grads.as_ref(), &r, rg.as_ref()))
    }
    match cfg.precision {
        Precision::Single => go::<f32>(&t, &d_o, cfg, tiles, with_backward, fault),
        Precision::Double => go::<f64>(&t, &d_o, cfg, tiles, with_backward, fault),
    }
}

/// Which implementation supplies the analytic gradients in [`fd_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradSource {
    Reference,
    Tiled,
}

/// Central differences of `<dO, O>` (step `h`, double precision) against
/// the analytic gradients; returns the relative error per input
/// `[Q, K, K', V, V']`.
pub fn fd_check(cfg: &AttnConfig, batch: usize, seed: u64, h: f64, source: GradSource) -> Result<[f64; 5]> {
    let (t, d_o) = random_instance(cfg, batch, seed)?;
    let analytic = match source {
        GradSource::Reference => {
            let r = reference::forward(&t.inputs(), cfg)?;
            reference::backward(&t.inputs(), &d_o, &r.lse, cfg)?
        }
        GradSource::Tiled => {
            let tiles = TileConfig::new(cfg.w2.max(2), 2, cfg.w2);
            let fwd = tiled::forward_tiled(&t.inputs(), cfg, &tiles)?;
            tiled::backward_tiled(&t.inputs(), &d_o, &fwd, cfg, &tiles)?
        }
    };
    let loss = |x: &AttnTensors<f64>| -> Result<f64> {
        let o = reference::forward(&x.inputs(), cfg)?;
        Ok(o.out.data().iter().zip(d_o.data()).map(|(a, b)| a * b).sum())
    };
    let mut errs = [0.0; 5];
    for (slot, which) in errs.iter_mut().zip(0..5) {
        let len = pick(&t, which).data().len();
        let mut fd = Vec::with_capacity(len);
        for idx in 0..len {
            let mut plus = t.clone();
            pick_mut(&mut plus, which).data_mut()[idx] += h;
            let mut minus = t.clone();
            pick_mut(&mut minus, which).data_mut()[idx] -= h;
            fd.push((loss(&plus)? - loss(&minus)?) / (2.0 * h));
        }
        let g = analytic.named()[which].1;
        *slot = rel_err(g.data().iter().copied(), fd);
    }
    Ok(errs)
}

fn pick(t: &AttnTensors<f64>, which: usize) -> &SeqTensor<f64> {
    [&t.q, &t.k, &t.k2, &t.v, &t.v2][which]
}

fn pick_mut(t: &mut AttnTensors<f64>, which: usize) -> &mut SeqTensor<f64> {
    match which {
        0 => &mut t.q,
        1 => &mut t.k,
        2 => &mut t.k2,
        3 => &mut t.v,
        _ => &mut t.v2,
    }
}
