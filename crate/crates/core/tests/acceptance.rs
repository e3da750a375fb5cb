//! Acceptance suite: one PASS/FAIL line per criterion. Oracles that the
//! library also implements (windowed dot-product attention, finite
//! differences, determinants, Match3 brute force) are re-derived here.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use simplex_attn::checks::{rel_err, tensor_rel_err};
use simplex_attn::cli::{parse_scaling_csv, TABLE2_CSV};
use simplex_attn::geometric::{self, Rotation3};
use simplex_attn::match3::{self, Match3Instance};
use simplex_attn::reference;
use simplex_attn::scaling::{self, ScalingPoint, PUBLISHED_COEFFICIENTS};
use simplex_attn::tiled::{self, BackwardStats, TileConfig};
use simplex_attn::{AttnConfig, AttnTensors, Element, LogitForm, Precision, SeqTensor};

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

/// Bytes allocated above the level at entry while `f` runs.
fn peak_during<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let base = CURRENT.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let r = f();
    (r, PEAK.load(Ordering::Relaxed).saturating_sub(base))
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Res = Result<Outcome, Box<dyn std::error::Error>>;
type Criterion = (&'static str, fn() -> Res, Option<u64>);

fn instance(cfg: &AttnConfig, batch: usize, rng: &mut ChaCha8Rng) -> (AttnTensors<f64>, SeqTensor<f64>) {
    let t = AttnTensors::random(cfg, batch, rng).unwrap();
    let d_o = SeqTensor::random(cfg.q_shape(batch), rng).unwrap();
    (t, d_o)
}

fn engine_vs_reference<T: Element>(t: &AttnTensors<f64>, cfg: &AttnConfig, tiles: &TileConfig) -> Result<f64, simplex_attn::Error> {
    let t = t.cast::<T>();
    let fwd = tiled::forward_tiled(&t.inputs(), cfg, tiles)?;
    let r = reference::forward(&t.inputs(), cfg)?;
    Ok(tensor_rel_err(&fwd.out, &r.out).max(rel_err(fwd.lse.iter().copied(), r.lse.iter().copied())))
}

fn c1_engine_equivalence() -> Res {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_s, mut worst_d) = (0.0f64, 0.0f64);
    let configs = 200;
    // Dense reference cost scales with heads·n·w1·w2; keep the sum bounded.
    const CELL_BUDGET: usize = 1 << 20;
    for c in 0..configs {
        let ratio = [1, 4, 64][c % 3];
        let kv_heads = if ratio == 64 { 1 } else { rng.random_range(1..=2) };
        let q_heads = ratio * kv_heads;
        let d = [16, 32][rng.random_range(0..2)];
        let mut n = match c % 10 {
            0 => rng.random_range(1..=8),
            _ => rng.random_range(1..=512),
        };
        let mut w1 = rng.random_range(1..=n.min(128));
        let mut w2 = rng.random_range(1..=n.min(32));
        if c % 7 == 0 {
            (w1, w2) = (n.min(128), n.min(32));
        }
        while q_heads * n * w1 * w2 > CELL_BUDGET {
            n = (n / 2).max(1);
            w1 = w1.min(n);
            w2 = w2.min(n);
        }
        let cfg = AttnConfig::new(n, d, w1, w2).with_heads(q_heads, kv_heads);
        let tiles = TileConfig::new([8, 16, 32, 64][rng.random_range(0..4)], [4, 8, 16, 32][rng.random_range(0..4)], w2);
        let batch = if c % 5 == 0 { 2 } else { 1 };
        let (t, _) = instance(&cfg, batch, &mut rng);
        worst_s = worst_s.max(engine_vs_reference::<f32>(&t, &cfg.clone().with_precision(Precision::Single), &tiles)?);
        worst_d = worst_d.max(engine_vs_reference::<f64>(&t, &cfg, &tiles)?);
    }
    Ok(outcome(
        worst_s <= 1e-5 && worst_d <= 1e-11,
        format!("{configs} configs; max rel err single {worst_s:.2e} (tol 1e-5), double {worst_d:.2e} (tol 1e-11)"),
    ))
}

fn inner(a: &SeqTensor<f64>, b: &SeqTensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn field(x: &mut AttnTensors<f64>, which: usize) -> &mut SeqTensor<f64> {
    match which {
        0 => &mut x.q,
        1 => &mut x.k,
        2 => &mut x.k2,
        3 => &mut x.v,
        _ => &mut x.v2,
    }
}

fn c2_backward_fd() -> Res {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut count = 0;
    for c in 0..24 {
        let form = if c % 2 == 0 { LogitForm::Trilinear } else { LogitForm::SumOfDeterminants };
        let n = rng.random_range(1..=6);
        let d = if form == LogitForm::Trilinear { rng.random_range(1..=4) } else { 3 };
        let (q_heads, kv_heads) = if c % 3 == 0 { (2, 1) } else { (1, 1) };
        let cfg = AttnConfig::new(n, d, rng.random_range(1..=n), rng.random_range(1..=n))
            .with_heads(q_heads, kv_heads)
            .with_logit_form(form);
        let (t, d_o) = instance(&cfg, 1, &mut rng);
        let r = reference::forward(&t.inputs(), &cfg)?;
        let g_ref = reference::backward(&t.inputs(), &d_o, &r.lse, &cfg)?;
        let tiles = TileConfig::new(cfg.w2.max(2), 2, cfg.w2);
        let fwd = tiled::forward_tiled(&t.inputs(), &cfg, &tiles)?;
        let g_tiled = tiled::backward_tiled(&t.inputs(), &d_o, &fwd, &cfg, &tiles)?;
        let loss = |x: &AttnTensors<f64>| inner(&reference::forward(&x.inputs(), &cfg).unwrap().out, &d_o);
        for which in 0..5 {
            let len = field(&mut t.clone(), which).data().len();
            let mut fd = Vec::with_capacity(len);
            for idx in 0..len {
                let mut plus = t.clone();
                field(&mut plus, which).data_mut()[idx] += h;
                let mut minus = t.clone();
                field(&mut minus, which).data_mut()[idx] -= h;
                fd.push((loss(&plus) - loss(&minus)) / (2.0 * h));
            }
            for g in [&g_ref, &g_tiled] {
                let analytic = g.named()[which].1;
                worst = worst.max(rel_err(analytic.data().iter().copied(), fd.iter().copied()));
            }
        }
        count += 1;
    }
    Ok(outcome(worst <= 1e-6, format!("{count} instances, both logit forms, reference and tiled backward; max rel err {worst:.2e} (tol 1e-6)")))
}

fn c3_two_stage() -> Res {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut ranges_ok = true;
    let mut rejects = true;
    let cases = [(32, 8, 1, 1), (64, 16, 2, 1), (32, 32, 4, 1), (64, 32, 4, 2), (48, 17, 1, 1)];
    for &(bq, w2, qh, kvh) in &cases {
        let n = 256;
        let cfg = AttnConfig::new(n, 16, 64, w2).with_heads(qh, kvh).with_precision(Precision::Single);
        let tiles = TileConfig::new(bq, 16, w2);
        assert_eq!(tiles.block_kv2, bq + w2);
        let (t, d_o) = instance(&cfg, 1, &mut rng);
        let (t, d_o) = (t.cast::<f32>(), d_o.cast::<f32>());
        let fwd = tiled::forward_tiled(&t.inputs(), &cfg, &tiles)?;
        let delta = tiled::backward_delta(&fwd.out, &d_o)?;
        let stats = BackwardStats { lse: &fwd.lse, delta: &delta };
        let g = tiled::backward_kv2q_two_stage(&t.inputs(), &d_o, &stats, &cfg, &tiles)?;
        let r = reference::forward(&t.inputs(), &cfg)?;
        let rg = reference::backward(&t.inputs(), &d_o, &r.lse, &cfg)?;
        worst = worst.max(tensor_rel_err(&g.dq, &rg.dq)).max(tensor_rel_err(&g.dk2, &rg.dk2)).max(tensor_rel_err(&g.dv2, &rg.dv2));

        let stages = tiled::stage_write_ranges(n, bq, w2);
        ranges_ok &= stages.iter().all(|s| tiled::ranges_disjoint(s));
        // Every K' row some query can see is covered by a write range.
        let covered = |k: usize| stages.iter().flatten().any(|r| r.contains(&k));
        ranges_ok &= (0..n).all(covered);

        let mut wrong = tiles;
        wrong.block_kv2 += 1;
        rejects &= tiled::backward_kv2q_two_stage(&t.inputs(), &d_o, &stats, &cfg, &wrong).is_err();
    }
    Ok(outcome(
        worst <= 1e-5 && ranges_ok && rejects,
        format!(
            "{} n=256 single instances; max rel err dQ/dK'/dV' {worst:.2e} (tol 1e-5); stage ranges disjoint: {ranges_ok}; block_kv2 != block_q + w2 rejected: {rejects}",
            cases.len()
        ),
    ))
}

/// Causal windowed softmax attention `softmax_j(scale·q_i·k_j) v_j` over `i - w < j <= i`.
fn windowed_dot_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize, w: usize, scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let lo = (i + 1).saturating_sub(w);
        let s: Vec<f64> = (lo..=i).map(|j| scale * (0..d).map(|l| q[i * d + l] * k[j * d + l]).sum::<f64>()).collect();
        let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for (p, j) in e.iter().zip(lo..=i) {
            for l in 0..d {
                out[i * d + l] += p / z * v[j * d + l];
            }
        }
    }
    out
}

fn c4_collapse() -> Res {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(1..=96);
        let d = rng.random_range(1..=24);
        let cfg = AttnConfig::new(n, d, rng.random_range(1..=n), rng.random_range(1..=n));
        let (mut t, _) = instance(&cfg, 1, &mut rng);
        t.k2 = SeqTensor::filled(cfg.kv_shape(1), 1.0)?;
        t.v2 = SeqTensor::filled(cfg.kv_shape(1), 1.0)?;
        let want = windowed_dot_attention(t.q.data(), t.k.data(), t.v.data(), n, d, cfg.w1, 1.0 / (d as f64).sqrt());
        let r = reference::forward(&t.inputs(), &cfg)?;
        let tiles = TileConfig::new(16, 8, cfg.w2);
        let f = tiled::forward_tiled(&t.inputs(), &cfg, &tiles)?;
        worst = worst
            .max(rel_err(r.out.data().iter().copied(), want.iter().copied()))
            .max(rel_err(f.out.data().iter().copied(), want.iter().copied()));
    }
    Ok(outcome(worst <= 1e-12, format!("50 instances, reference and tiled vs windowed dot-product attention; max rel err {worst:.2e} (tol 1e-12)")))
}

/// Cofactor expansion along the first column.
fn det_cofactor(a: &[f64; 3], b: &[f64; 3], c: &[f64; 3]) -> f64 {
    a[0] * (b[1] * c[2] - b[2] * c[1]) - b[0] * (a[1] * c[2] - a[2] * c[1]) + c[0] * (a[1] * b[2] - a[2] * b[1])
}

fn c5_rotation() -> Res {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut det_gap = 0.0f64;
    let mut tri_gap = f64::INFINITY;
    for _ in 0..10 {
        let n = rng.random_range(4..=24);
        let d = 3 * rng.random_range(1..=4);
        let cfg = AttnConfig::new(n, d, rng.random_range(1..=n), rng.random_range(1..=n)).with_logit_form(LogitForm::SumOfDeterminants);
        let (t, _) = instance(&cfg, 1, &mut rng);
        let rs: Vec<Rotation3> = (0..d / 3).map(|_| Rotation3::random(&mut rng)).collect();
        let mut rt = t.clone();
        rt.q = geometric::apply_chunk_rotations(&rs, &t.q)?;
        rt.k = geometric::apply_chunk_rotations(&rs, &t.k)?;
        rt.k2 = geometric::apply_chunk_rotations(&rs, &t.k2)?;
        let a = geometric::det_logits(&t.inputs(), &cfg)?;
        let b = geometric::det_logits(&rt.inputs(), &cfg)?;
        det_gap = det_gap.max(rel_err(b.values().iter().copied(), a.values().iter().copied()));
        let tiles = TileConfig::new(8, 4, cfg.w2);
        let fa = tiled::forward_tiled(&t.inputs(), &cfg, &tiles)?;
        let fb = tiled::forward_tiled(&rt.inputs(), &cfg, &tiles)?;
        det_gap = det_gap.max(tensor_rel_err(&fb.out, &fa.out));

        let tri_cfg = cfg.clone().with_logit_form(LogitForm::Trilinear);
        let ta = reference::trilinear_logits(&t.inputs(), &tri_cfg)?;
        let tb = reference::trilinear_logits(&rt.inputs(), &tri_cfg)?;
        let gap = ta.values().iter().zip(tb.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        tri_gap = tri_gap.min(gap);
    }

    let mut sarrus = 0.0f64;
    for _ in 0..10_000 {
        let v = |rng: &mut ChaCha8Rng| -> [f64; 3] { std::array::from_fn(|_| rng.sample(StandardNormal)) };
        let (a, b, c) = (v(&mut rng), v(&mut rng), v(&mut rng));
        let (t1, t2) = geometric::sarrus_split(&a, &b, &c);
        let want = det_cofactor(&a, &b, &c);
        sarrus = sarrus.max((t1 - t2 - want).abs() / want.abs().max(1.0));
    }

    let mut cos_err = 0.0f64;
    for _ in 0..1000 {
        let [x, y, z]: [f64; 3] = std::array::from_fn(|_| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
        let (lhs, rhs) = geometric::cos_sum_identity(x, y, z);
        let direct = (x + y + z).cos();
        cos_err = cos_err.max((lhs - rhs).abs()).max((rhs - direct).abs());
    }
    Ok(outcome(
        det_gap <= 1e-11 && tri_gap >= 1e-3 && sarrus <= 1e-14 && cos_err <= 1e-12,
        format!(
            "det logits/output under chunk rotations {det_gap:.2e} (tol 1e-11); smallest trilinear gap {tri_gap:.2e} (need >= 1e-3); Sarrus vs cofactor {sarrus:.2e} (tol 1e-14); cos identity {cos_err:.2e} (tol 1e-12)"
        ),
    ))
}

fn match3_brute(x: &[u32], m: u32) -> Vec<bool> {
    let mut present = vec![false; m as usize];
    for &v in x {
        present[v as usize] = true;
    }
    // Residues r reachable as x_j1 + x_j2.
    let mut sums = vec![false; m as usize];
    for a in 0..m {
        for b in 0..m {
            if present[a as usize] && present[b as usize] {
                sums[((a + b) % m) as usize] = true;
            }
        }
    }
    x.iter().map(|&xi| sums[((m - xi % m) % m) as usize]).collect()
}

fn c6_match3() -> Res {
    let mut total = 0u64;
    let mut bad = 0u64;
    for m in 3..=8u32 {
        let n = 4;
        for code in 0..m.pow(n as u32) {
            let x: Vec<u32> = (0..n).map(|t| code / m.pow(t as u32) % m).collect();
            let inst = Match3Instance::new(m, x.clone())?;
            total += 1;
            bad += u64::from(match3::match3_transformer(&inst) != match3_brute(&x, m));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let inst = Match3Instance::random(8, 12, &mut rng)?;
        total += 1;
        bad += u64::from(match3::match3_transformer(&inst) != match3_brute(inst.tokens(), 12));
    }
    Ok(outcome(bad == 0, format!("{total} instances (n=4 exhaustive for M=3..8, 1000 random n=8 M=12); mismatches {bad}")))
}

fn c7_scaling() -> Res {
    let rows = parse_scaling_csv(TABLE2_CSV)?;
    let series = scaling::fit_series(rows.iter().map(|r| (r.model.as_str(), r.benchmark.as_str(), ScalingPoint { n: r.active_params, nll: r.nll })));
    let mut ordered = true;
    let mut delta_ok = true;
    let mut min_r2 = f64::INFINITY;
    let mut deltas = Vec::new();
    for s in &series {
        min_r2 = min_r2.min(s.fit.as_ref().ok().and_then(|f| f.r2).unwrap_or(f64::NEG_INFINITY));
    }
    for p in PUBLISHED_COEFFICIENTS {
        let (bench, published) = (p.benchmark, p.delta_percent);
        let alpha = |model: &str| series.iter().find(|s| s.model == model && s.benchmark == bench).and_then(|s| s.fit.as_ref().ok()).map(|f| f.alpha);
        let (Some(t), Some(s)) = (alpha("Transformer"), alpha("2-simplicial")) else {
            return Ok(outcome(false, format!("missing series for {bench}")));
        };
        ordered &= s > t;
        let delta = 100.0 * (s - t) / t;
        delta_ok &= (delta - published).abs() <= 3.0;
        deltas.push(format!("{bench} {delta:.2}/{published}"));
    }
    let (a, b) = (0.137, -1.9);
    let pts: Vec<ScalingPoint> = [1e8, 4e8, 1e9, 3e9, 1e10].iter().map(|&n: &f64| ScalingPoint { n, nll: (-(a * n.ln() + b)).exp() }).collect();
    let fit = scaling::fit_power_law(&pts)?;
    let synth = (fit.alpha - a).abs();
    Ok(outcome(
        ordered && delta_ok && min_r2 >= 0.99 && synth <= 1e-10,
        format!(
            "alpha ordering {ordered}; delta% (fit/published) {}; within 3pp {delta_ok}; min R2 {min_r2:.5}; synthetic |alpha err| {synth:.1e}",
            deltas.join(", ")
        ),
    ))
}

fn c8_flops() -> Res {
    let n = scaling::breakeven(512, 32)?;
    let dot = scaling::flops_dot(n)?;
    let two = scaling::flops_2s(n, 512, 32)?;
    // Independent arithmetic: 2n² = 6·n·w1·w2 at n = 3·w1·w2.
    let n_star = 3u128 * 512 * 32;
    let ok = n == 49152 && dot == two && dot == 2 * n_star * n_star && two == 6 * n_star * 512 * 32;
    Ok(outcome(ok, format!("breakeven(512, 32) = {n}; flops_dot = {dot}; flops_2s = {two}")))
}

fn c9_performance() -> Res {
    let cfg = AttnConfig::new(4096, 32, 256, 32);
    let tiles = TileConfig::for_config(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (t, _) = instance(&cfg, 1, &mut rng);
    let time = |f: &dyn Fn()| {
        let mut best = Duration::MAX;
        for _ in 0..2 {
            let s = Instant::now();
            f();
            best = best.min(s.elapsed());
        }
        best
    };
    let tiled_t = time(&|| {
        std::hint::black_box(tiled::forward_tiled(&t.inputs(), &cfg, &tiles).unwrap());
    });
    let ref_t = time(&|| {
        std::hint::black_box(reference::forward(&t.inputs(), &cfg).unwrap());
    });
    let speedup = ref_t.as_secs_f64() / tiled_t.as_secs_f64();

    let (_, peak) = peak_during(|| tiled::forward_tiled(&t.inputs(), &cfg, &tiles).unwrap());
    let full = cfg.n * cfg.w1 * cfg.w2 * std::mem::size_of::<f64>();
    // Panels and output are a few n·d arrays; scratch is per tile.
    let bound = 16 * cfg.n * (cfg.d + tiles.block_kv2) * std::mem::size_of::<f64>();
    Ok(outcome(
        speedup >= 5.0 && peak <= bound,
        format!(
            "n=4096 d=32 w1=256 w2=32 double: tiled {:.3}s, reference {:.3}s, speedup {speedup:.1}x (need >= 5); tiled peak {:.1} MiB (bound {:.1} MiB; full logit tensor {:.0} MiB)",
            tiled_t.as_secs_f64(),
            ref_t.as_secs_f64(),
            peak as f64 / (1 << 20) as f64,
            bound as f64 / (1 << 20) as f64,
            full as f64 / (1 << 20) as f64
        ),
    ))
}

fn main() {
    // (name, check, time budget in seconds)
    let criteria: [Criterion; 9] = [
        ("1 engine equivalence", c1_engine_equivalence, Some(120)),
        ("2 backward vs finite differences", c2_backward_fd, Some(60)),
        ("3 two-stage backward", c3_two_stage, None),
        ("4 collapse to bilinear attention", c4_collapse, None),
        ("5 rotation invariance", c5_rotation, None),
        ("6 Match3 construction", c6_match3, Some(180)),
        ("7 scaling-law fits", c7_scaling, None),
        ("8 FLOPs model", c8_flops, None),
        ("9 performance and memory", c9_performance, None),
    ];
    // Optional positional filters select criteria by number, e.g. `-- 1 9`.
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f, limit) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.split(' ').next() == Some(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = f().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        let secs = start.elapsed().as_secs_f64();
        let in_time = limit.is_none_or(|l| secs <= l as f64);
        let pass = o.pass && in_time;
        failed += usize::from(!pass);
        let budget = limit.map_or(String::new(), |l| format!(", budget {l}s"));
        println!("{} criterion {name}: {} [{secs:.1}s{budget}]", if pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
