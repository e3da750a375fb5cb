//! C ABI over `simplex-attn`.
//!
//! Every function returns an [`SaStatus`]; results go through out-pointers.
//! On failure, [`sa_last_error`] copies the message for the calling thread.
//! Attention configurations live behind an opaque [`SaAttention`] handle
//! that the caller creates with [`sa_attention_new`] and releases with
//! [`sa_attention_free`].
//!
//! Tensors are dense row-major `[batch, n, heads, d]` buffers: queries and
//! outputs use `q_heads`, the four key/value tensors use `kv_heads`. The
//! `lse` buffer holds `batch * q_heads * n` entries.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use simplex_attn::match3::{self, Match3Instance};
use simplex_attn::scaling::{self, ScalingPoint};
use simplex_attn::{reference, tiled, AttnConfig, AttnOutput, Element, Error, LogitForm, SeqTensor, Shape, TileConfig};

/// Status codes; `SA_OK` is zero.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaStatus {
    SaOk = 0,
    SaNullPointer = 1,
    SaInvalidConfig = 2,
    SaInputDomain = 3,
    SaUsage = 4,
    SaDegenerateFit = 5,
    SaZeroBaseline = 6,
    SaPanic = 7,
    SaInternal = 8,
}

/// `SaAttnParams::logit_form` values.
pub const SA_LOGIT_TRILINEAR: u32 = 0;
pub const SA_LOGIT_DET: u32 = 1;

/// Plain-data attention parameters.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SaAttnParams {
    pub n: usize,
    pub d: usize,
    pub q_heads: usize,
    pub kv_heads: usize,
    pub w1: usize,
    pub w2: usize,
    /// `SA_LOGIT_TRILINEAR` or `SA_LOGIT_DET`
    pub logit_form: u32,
    /// Logit scale; `0` selects `1/sqrt(d)`.
    pub scale: f64,
    pub k2_bias: f64,
    pub v2_bias: f64,
    /// Query tile length, at least `w2`; `0` picks a default.
    pub block_q: usize,
    /// Key tile length; `0` picks a default.
    pub block_kv: usize,
}

/// Opaque attention configuration.
pub struct SaAttention {
    cfg: AttnConfig,
    tiles: TileConfig,
}

/// Power-law fit `-ln L = alpha ln N + beta`; `r2` is NaN when undefined.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SaScalingFit {
    pub alpha: f64,
    pub beta: f64,
    pub r2: f64,
    pub residual: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: SaStatus, msg: impl Into<String>) -> SaStatus {
    set_error(msg.into());
    status
}

fn status_of(e: &Error) -> SaStatus {
    match e {
        Error::Config(_) => SaStatus::SaInvalidConfig,
        Error::InputDomain(_) => SaStatus::SaInputDomain,
        Error::Usage(_) => SaStatus::SaUsage,
        Error::DegenerateFit(_) => SaStatus::SaDegenerateFit,
        Error::ZeroBaseline => SaStatus::SaZeroBaseline,
        Error::Parse { .. } | Error::Io(_) => SaStatus::SaInternal,
    }
}

/// Runs `f`, mapping library errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), SaStatus>) -> SaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SaStatus::SaOk,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(SaStatus::SaPanic, msg)
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, SaStatus>;
}

impl<T> OrStatus<T> for simplex_attn::Result<T> {
    fn or_status(self) -> Result<T, SaStatus> {
        self.map_err(|e| fail(status_of(&e), e.to_string()))
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), SaStatus> {
    if p.is_null() {
        Err(fail(SaStatus::SaNullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be valid for `len` reads.
unsafe fn input<T: Element>(p: *const T, shape: Shape, name: &str) -> Result<SeqTensor<T>, SaStatus> {
    non_null(p, name)?;
    let data = unsafe { std::slice::from_raw_parts(p, shape.numel()) }.to_vec();
    SeqTensor::from_vec(shape, data).or_status()
}

/// # Safety
/// `p` must be valid for `src.len()` writes.
unsafe fn output<T: Copy>(p: *mut T, src: &[T], name: &str) -> Result<(), SaStatus> {
    non_null(p, name)?;
    unsafe { ptr::copy_nonoverlapping(src.as_ptr(), p, src.len()) };
    Ok(())
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length
/// excluding the terminator, or 0 when there is none.
///
/// # Safety
/// `buf` must be null or valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn sa_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            unsafe {
                ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// Validates `params` and stores a new handle in `*out`.
///
/// # Safety
/// `params` must point to a valid `SaAttnParams`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sa_attention_new(params: *const SaAttnParams, out: *mut *mut SaAttention) -> SaStatus {
    guard(|| {
        non_null(params, "params")?;
        non_null(out, "out")?;
        let p = unsafe { *params };
        let form = match p.logit_form {
            SA_LOGIT_TRILINEAR => LogitForm::Trilinear,
            SA_LOGIT_DET => LogitForm::SumOfDeterminants,
            other => return Err(fail(SaStatus::SaInvalidConfig, format!("unknown logit form {other}"))),
        };
        let mut cfg = AttnConfig::new(p.n, p.d, p.w1, p.w2)
            .with_heads(p.q_heads, p.kv_heads)
            .with_logit_form(form)
            .with_biases(p.k2_bias, p.v2_bias);
        if p.scale != 0.0 {
            cfg = cfg.with_scale(p.scale);
        }
        cfg.validate().or_status()?;
        let mut tiles = TileConfig::for_config(&cfg);
        if p.block_q != 0 || p.block_kv != 0 {
            let bq = if p.block_q == 0 { tiles.block_q } else { p.block_q };
            let bkv = if p.block_kv == 0 { tiles.block_kv } else { p.block_kv };
            tiles = TileConfig::new(bq, bkv, cfg.w2);
        }
        tiles.validate_two_stage(&cfg).or_status()?;
        unsafe { *out = Box::into_raw(Box::new(SaAttention { cfg, tiles })) };
        Ok(())
    })
}

/// Releases a handle from [`sa_attention_new`]; null is a no-op.
///
/// # Safety
/// `h` must be null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sa_attention_free(h: *mut SaAttention) {
    if !h.is_null() {
        drop(unsafe { Box::from_raw(h) });
    }
}

/// Element counts of the query-side and key/value-side buffers for `batch`.
///
/// # Safety
/// `h` must be a live handle; the out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn sa_attention_sizes(h: *const SaAttention, batch: usize, q_len: *mut usize, kv_len: *mut usize, lse_len: *mut usize) -> SaStatus {
    guard(|| {
        non_null(h, "handle")?;
        let cfg = unsafe { &(*h).cfg };
        for (p, v, name) in [
            (q_len, cfg.q_shape(batch).numel(), "q_len"),
            (kv_len, cfg.kv_shape(batch).numel(), "kv_len"),
            (lse_len, batch * cfg.q_heads * cfg.n, "lse_len"),
        ] {
            non_null(p, name)?;
            unsafe { *p = v };
        }
        Ok(())
    })
}

#[derive(Clone, Copy)]
enum Engine {
    Tiled,
    Reference,
}

unsafe fn forward_impl<T: Element>(
    h: *const SaAttention,
    batch: usize,
    ptrs: [*const T; 5],
    out: *mut T,
    lse: *mut f64,
    engine: Engine,
) -> SaStatus {
    guard(|| {
        non_null(h, "handle")?;
        if batch == 0 {
            return Err(fail(SaStatus::SaInvalidConfig, "batch must be >= 1"));
        }
        let SaAttention { cfg, tiles } = unsafe { &*h };
        let (qs, kvs) = (cfg.q_shape(batch), cfg.kv_shape(batch));
        let names = ["q", "k", "k2", "v", "v2"];
        let mut t = Vec::with_capacity(5);
        for (i, p) in ptrs.into_iter().enumerate() {
            t.push(unsafe { input(p, if i == 0 { qs } else { kvs }, names[i]) }?);
        }
        let inputs = simplex_attn::AttnInputs::new(&t[0], &t[1], &t[2], &t[3], &t[4]);
        let res: AttnOutput<T> = match engine {
            Engine::Tiled => tiled::forward_tiled(&inputs, cfg, tiles).or_status()?,
            Engine::Reference => {
                let r = reference::forward(&inputs, cfg).or_status()?;
                AttnOutput { out: r.out.cast(), lse: r.lse }
            }
        };
        unsafe { output(out, res.out.data(), "out")? };
        if !lse.is_null() {
            unsafe { output(lse, &res.lse, "lse")? };
        }
        Ok(())
    })
}

/// Tiled forward pass in double precision. `lse` may be null.
///
/// # Safety
/// Input pointers must be valid for the lengths reported by
/// [`sa_attention_sizes`]; `out` and (if non-null) `lse` for writes.
#[no_mangle]
pub unsafe extern "C" fn sa_attention_forward(
    h: *const SaAttention,
    batch: usize,
    q: *const f64,
    k: *const f64,
    k2: *const f64,
    v: *const f64,
    v2: *const f64,
    out: *mut f64,
    lse: *mut f64,
) -> SaStatus {
    unsafe { forward_impl(h, batch, [q, k, k2, v, v2], out, lse, Engine::Tiled) }
}

/// Tiled forward pass in single precision (accumulation is in double).
///
/// # Safety
/// As [`sa_attention_forward`].
#[no_mangle]
pub unsafe extern "C" fn sa_attention_forward_f32(
    h: *const SaAttention,
    batch: usize,
    q: *const f32,
    k: *const f32,
    k2: *const f32,
    v: *const f32,
    v2: *const f32,
    out: *mut f32,
    lse: *mut f64,
) -> SaStatus {
    unsafe { forward_impl(h, batch, [q, k, k2, v, v2], out, lse, Engine::Tiled) }
}

/// Dense reference forward pass (materializes every logit; small inputs only).
///
/// # Safety
/// As [`sa_attention_forward`].
#[no_mangle]
pub unsafe extern "C" fn sa_attention_reference_forward(
    h: *const SaAttention,
    batch: usize,
    q: *const f64,
    k: *const f64,
    k2: *const f64,
    v: *const f64,
    v2: *const f64,
    out: *mut f64,
    lse: *mut f64,
) -> SaStatus {
    unsafe { forward_impl(h, batch, [q, k, k2, v, v2], out, lse, Engine::Reference) }
}

/// Tiled backward pass: gradients of `<d_out, O>` with respect to all five
/// inputs. `out` and `lse` must come from [`sa_attention_forward`] on the
/// same inputs.
///
/// # Safety
/// Input pointers valid for reads, gradient pointers for writes, with the
/// lengths reported by [`sa_attention_sizes`].
#[no_mangle]
pub unsafe extern "C" fn sa_attention_backward(
    h: *const SaAttention,
    batch: usize,
    q: *const f64,
    k: *const f64,
    k2: *const f64,
    v: *const f64,
    v2: *const f64,
    out: *const f64,
    lse: *const f64,
    d_out: *const f64,
    dq: *mut f64,
    dk: *mut f64,
    dk2: *mut f64,
    dv: *mut f64,
    dv2: *mut f64,
) -> SaStatus {
    guard(|| {
        non_null(h, "handle")?;
        if batch == 0 {
            return Err(fail(SaStatus::SaInvalidConfig, "batch must be >= 1"));
        }
        let SaAttention { cfg, tiles } = unsafe { &*h };
        let (qs, kvs) = (cfg.q_shape(batch), cfg.kv_shape(batch));
        let ins = unsafe {
            [input(q, qs, "q")?, input(k, kvs, "k")?, input(k2, kvs, "k2")?, input(v, kvs, "v")?, input(v2, kvs, "v2")?]
        };
        non_null(lse, "lse")?;
        let fwd = AttnOutput {
            out: unsafe { input(out, qs, "out")? },
            lse: unsafe { std::slice::from_raw_parts(lse, batch * cfg.q_heads * cfg.n) }.to_vec(),
        };
        let d_o = unsafe { input(d_out, qs, "d_out")? };
        let inputs = simplex_attn::AttnInputs::new(&ins[0], &ins[1], &ins[2], &ins[3], &ins[4]);
        let g = tiled::backward_tiled(&inputs, &d_o, &fwd, cfg, tiles).or_status()?;
        unsafe {
            output(dq, g.dq.data(), "dq")?;
            output(dk, g.dk.data(), "dk")?;
            output(dk2, g.dk2.data(), "dk2")?;
            output(dv, g.dv.data(), "dv")?;
            output(dv2, g.dv2.data(), "dv2")?;
        }
        Ok(())
    })
}

/// Match3 decision bits from the attention construction (`bits[i]` is 0/1).
///
/// # Safety
/// `tokens` valid for `n` reads, `bits` for `n` writes.
#[no_mangle]
pub unsafe extern "C" fn sa_match3(modulus: u32, tokens: *const u32, n: usize, bits: *mut u8) -> SaStatus {
    unsafe { match3_impl(modulus, tokens, n, bits, match3::match3_transformer) }
}

/// Brute-force Match3 bits.
///
/// # Safety
/// As [`sa_match3`].
#[no_mangle]
pub unsafe extern "C" fn sa_match3_oracle(modulus: u32, tokens: *const u32, n: usize, bits: *mut u8) -> SaStatus {
    unsafe { match3_impl(modulus, tokens, n, bits, match3::match3_oracle) }
}

unsafe fn match3_impl(modulus: u32, tokens: *const u32, n: usize, bits: *mut u8, f: fn(&Match3Instance) -> Vec<bool>) -> SaStatus {
    guard(|| {
        non_null(tokens, "tokens")?;
        let x = unsafe { std::slice::from_raw_parts(tokens, n) }.to_vec();
        let inst = Match3Instance::new(modulus, x).or_status()?;
        let b: Vec<u8> = f(&inst).into_iter().map(u8::from).collect();
        unsafe { output(bits, &b, "bits") }
    })
}

/// Context length at which windowed 2-simplicial and dense dot-product
/// attention cost the same FLOPs: `3·w1·w2`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sa_breakeven(w1: u64, w2: u64, out: *mut u64) -> SaStatus {
    guard(|| {
        let v = scaling::breakeven(w1, w2).or_status()?;
        unsafe { output(out, &[v], "out") }
    })
}

/// Model FLOPs `6·n·w1·w2`; `SA_INPUT_DOMAIN` if it does not fit in 64 bits.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sa_flops_2s(n: u64, w1: u64, w2: u64, out: *mut u64) -> SaStatus {
    guard(|| {
        let v = scaling::flops_2s(n, w1, w2).or_status()?;
        let v = u64::try_from(v).map_err(|_| fail(SaStatus::SaInputDomain, "FLOP count exceeds 64 bits"))?;
        unsafe { output(out, &[v], "out") }
    })
}

/// OLS fit of `-ln nll` on `ln params` over `len` points.
///
/// # Safety
/// `params` and `nll` valid for `len` reads; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sa_fit_power_law(params: *const f64, nll: *const f64, len: usize, out: *mut SaScalingFit) -> SaStatus {
    guard(|| {
        non_null(params, "params")?;
        non_null(nll, "nll")?;
        let (ns, ls) = unsafe { (std::slice::from_raw_parts(params, len), std::slice::from_raw_parts(nll, len)) };
        let pts = ns.iter().zip(ls).map(|(&n, &l)| ScalingPoint::new(n, l)).collect::<simplex_attn::Result<Vec<_>>>().or_status()?;
        let f = scaling::fit_power_law(&pts).or_status()?;
        let fit = SaScalingFit { alpha: f.alpha, beta: f.beta, r2: f.r2.unwrap_or(f64::NAN), residual: f.residual };
        unsafe { output(out, &[fit], "out") }
    })
}
