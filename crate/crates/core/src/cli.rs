//! Command implementations behind the `simplex-attn` binary.
//!
//! Every command builds a [`Report`]: a markdown document whose body is a
//! pure function of the flags (timestamps live only in the header) plus a
//! CSV rendering of the same rows. Exit codes: 0 when every check passes,
//! 1 when a check fails, 2 for usage, parse or I/O errors.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::checks::{self, Fault, GradSource};
use crate::error::{Error, Result};
use crate::match3::{self, Match3Instance};
use crate::scaling::{self, ScalingPoint, PUBLISHED_COEFFICIENTS};
use crate::tensor::{AttnConfig, AttnTensors, Element, LogitForm, Precision};
use crate::tiled::{self, TileConfig};

/// Table 2 negative log-likelihoods, one row per (model, benchmark, size).
pub const TABLE2_CSV: &str = include_str!("../data/table2.csv");

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "simplex-attn", version, about = "2-simplicial attention: engine checks, benchmarks, Match3 and scaling fits")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tiled engine vs dense reference: forward output, lse and all five gradients.
    Equivalence(EquivalenceArgs),
    /// Analytic gradients vs central finite differences (double precision).
    CheckGrad(CheckGradArgs),
    /// Tiled forward latency over a (w1, w2) sweep.
    Bench(BenchArgs),
    /// Power-law fits of NLL against active parameters.
    FitScaling(FitScalingArgs),
    /// Match3 construction vs brute-force oracle.
    Match3(Match3Args),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    Single,
    Double,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Single => Precision::Single,
            PrecisionArg::Double => Precision::Double,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogitFormArg {
    Trilinear,
    Det,
}

impl From<LogitFormArg> for LogitForm {
    fn from(f: LogitFormArg) -> Self {
        match f {
            LogitFormArg::Trilinear => LogitForm::Trilinear,
            LogitFormArg::Det => LogitForm::SumOfDeterminants,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Write the CSV rendering of the report here
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Write the markdown report here (it is always printed to stdout)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EquivalenceArgs {
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub kv_heads: usize,
    #[arg(long, default_value_t = 64)]
    pub w1: usize,
    #[arg(long, default_value_t = 16)]
    pub w2: usize,
    #[arg(long, default_value_t = 32)]
    pub block_q: usize,
    #[arg(long, default_value_t = 16)]
    pub block_kv: usize,
    #[arg(long, value_enum, default_value_t = PrecisionArg::Single)]
    pub precision: PrecisionArg,
    #[arg(long, value_enum, default_value_t = LogitFormArg::Trilinear)]
    pub logit_form: LogitFormArg,
    /// First seed; instance r uses seed + r
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of random instances
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    /// Test hook: perturb the engine results so the check must fail
    #[arg(long, hide = true)]
    pub inject_fault: bool,
    #[command(flatten)]
    pub report: ReportArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CheckGradArgs {
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub dim: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub kv_heads: usize,
    #[arg(long, default_value_t = 3)]
    pub w1: usize,
    #[arg(long, default_value_t = 2)]
    pub w2: usize,
    /// Only double precision is accepted
    #[arg(long, value_enum, default_value_t = PrecisionArg::Double)]
    pub precision: PrecisionArg,
    #[arg(long, value_enum, default_value_t = LogitFormArg::Trilinear)]
    pub logit_form: LogitFormArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of random instances
    #[arg(long, default_value_t = 2)]
    pub reps: usize,
    #[command(flatten)]
    pub report: ReportArgs,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 2048)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub kv_heads: usize,
    /// Single configuration; together with --w2 replaces the sweep
    #[arg(long, requires = "w2")]
    pub w1: Option<usize>,
    #[arg(long, requires = "w1")]
    pub w2: Option<usize>,
    /// Comma-separated W1xW2 list (default: the seven Table 1 combinations)
    #[arg(long, conflicts_with = "w1")]
    pub sweep: Option<String>,
    /// Query tile length; raised to w2 when smaller
    #[arg(long, default_value_t = 64)]
    pub block_q: usize,
    #[arg(long, default_value_t = 32)]
    pub block_kv: usize,
    #[arg(long, value_enum, default_value_t = PrecisionArg::Double)]
    pub precision: PrecisionArg,
    #[arg(long, value_enum, default_value_t = LogitFormArg::Trilinear)]
    pub logit_form: LogitFormArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Timed repetitions per configuration
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[command(flatten)]
    pub report: ReportArgs,
}

#[derive(Debug, Clone, Args)]
pub struct FitScalingArgs {
    /// Input CSV `model,benchmark,active_params,nll` (default: bundled Table 2)
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Markdown report path; the CSV report goes next to it with a .csv extension
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Baseline model for the Δα% column
    #[arg(long, default_value = "Transformer")]
    pub baseline: String,
    /// Compared model for the Δα% column
    #[arg(long, default_value = "2-simplicial")]
    pub compare: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Match3Mode {
    /// All M^n sequences
    Exhaustive,
    /// `--reps` random sequences
    Random,
}

#[derive(Debug, Clone, Args)]
pub struct Match3Args {
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub modulus: u32,
    #[arg(long, value_enum, default_value_t = Match3Mode::Exhaustive)]
    pub mode: Match3Mode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Instances in random mode
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    #[command(flatten)]
    pub report: ReportArgs,
}

/// Outcome of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub title: String,
    /// Run metadata, including anything time-dependent.
    pub header: Vec<String>,
    /// Deterministic markdown body.
    pub body: String,
    pub csv: String,
    pub passed: bool,
}

impl Report {
    pub fn markdown(&self) -> String {
        let mut s = format!("# {}\n\n", self.title);
        for h in &self.header {
            let _ = writeln!(s, "- {h}");
        }
        s.push('\n');
        s.push_str(&self.body);
        s
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed {
            EXIT_OK
        } else {
            EXIT_CHECK_FAILED
        }
    }
}

fn header(command: &str) -> Vec<String> {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    vec![format!("command: {command}"), format!("generated: {secs} (unix time)")]
}

fn md_table(head: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = format!("| {} |\n|{}\n", head.join(" | "), "---|".repeat(head.len()));
    for r in rows {
        let _ = writeln!(s, "| {} |", r.join(" | "));
    }
    s
}

fn csv_table(head: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(head).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

fn sci(x: f64) -> String {
    format!("{x:.3e}")
}

fn verdict(ok: bool) -> String {
    if ok { "pass" } else { "FAIL" }.to_string()
}

pub fn cmd_equivalence(a: &EquivalenceArgs) -> Result<Report> {
    let cfg = AttnConfig::new(a.n, a.dim, a.w1, a.w2)
        .with_heads(a.heads, a.kv_heads)
        .with_logit_form(a.logit_form.into())
        .with_precision(a.precision.into());
    cfg.validate()?;
    let tiles = TileConfig::new(a.block_q, a.block_kv, a.w2);
    let tol = checks::tolerance(cfg.precision);
    let fault = if a.inject_fault { Fault::Perturb } else { Fault::None };
    let mut rows = Vec::new();
    let mut passed = true;
    for r in 0..a.reps {
        let seed = a.seed + r as u64;
        let e = checks::equivalence_instance(&cfg, &tiles, 1, seed, true, fault)?;
        let ok = e.max() <= tol;
        passed &= ok;
        let g = e.grads.unwrap_or_default();
        let mut row = vec![seed.to_string(), sci(e.out), sci(e.lse)];
        row.extend(g.iter().map(|&x| sci(x)));
        row.push(verdict(ok));
        rows.push(row);
    }
    let head = ["seed", "out", "lse", "dQ", "dK", "dK'", "dV", "dV'", "status"];
    let mut body = format!(
        "Configuration: n={} d={} heads={}/{} w1={} w2={} block_q={} block_kv={} precision={} logits={}\n\n",
        cfg.n, cfg.d, cfg.q_heads, cfg.kv_heads, cfg.w1, cfg.w2, tiles.block_q, tiles.block_kv, cfg.precision, cfg.logit_form
    );
    let _ = writeln!(body, "Max relative error vs the double-precision reference (tolerance {tol:e}):\n");
    body.push_str(&md_table(&head, &rows));
    Ok(Report { title: "Engine equivalence".into(), header: header("equivalence"), body, csv: csv_table(&head, &rows)?, passed })
}

pub fn cmd_check_grad(a: &CheckGradArgs) -> Result<Report> {
    if a.precision != PrecisionArg::Double {
        return Err(Error::Usage("check-grad runs in double precision only".into()));
    }
    let cfg = AttnConfig::new(a.n, a.dim, a.w1, a.w2).with_heads(a.heads, a.kv_heads).with_logit_form(a.logit_form.into());
    cfg.validate()?;
    const H: f64 = 1e-4;
    const TOL: f64 = 1e-6;
    let mut rows = Vec::new();
    let mut passed = true;
    for r in 0..a.reps {
        let seed = a.seed + r as u64;
        for (name, src) in [("reference", GradSource::Reference), ("tiled", GradSource::Tiled)] {
            let e = checks::fd_check(&cfg, 1, seed, H, src)?;
            let ok = e.iter().all(|&x| x <= TOL);
            passed &= ok;
            let mut row = vec![seed.to_string(), name.to_string()];
            row.extend(e.iter().map(|&x| sci(x)));
            row.push(verdict(ok));
            rows.push(row);
        }
    }
    let head = ["seed", "backward", "dQ", "dK", "dK'", "dV", "dV'", "status"];
    let mut body = format!(
        "Configuration: n={} d={} heads={}/{} w1={} w2={} logits={}; central differences of <dO, O> with h={H:e}\n\n",
        cfg.n, cfg.d, cfg.q_heads, cfg.kv_heads, cfg.w1, cfg.w2, cfg.logit_form
    );
    let _ = writeln!(body, "Relative error per gradient (tolerance {TOL:e}):\n");
    body.push_str(&md_table(&head, &rows));
    Ok(Report { title: "Gradient check".into(), header: header("check-grad"), body, csv: csv_table(&head, &rows)?, passed })
}

/// The seven `(w1, w2)` combinations of the paper's latency table.
pub const TABLE1_SWEEP: [(usize, usize); 7] = [(1024, 32), (512, 64), (128, 128), (256, 64), (512, 32), (1024, 16), (256, 32)];

fn parse_sweep(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|item| {
            let (a, b) = item
                .trim()
                .split_once(['x', 'X'])
                .ok_or_else(|| Error::Usage(format!("sweep entry `{item}` is not W1xW2")))?;
            let p = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::Usage(format!("bad number in sweep entry `{item}`")));
            Ok((p(a)?, p(b)?))
        })
        .collect()
}

/// Multiply-adds actually executed by the engine, times two.
fn engine_flops(cfg: &AttnConfig) -> f64 {
    let terms = match cfg.logit_form {
        LogitForm::Trilinear => 1,
        LogitForm::SumOfDeterminants => 2,
    };
    let cells: f64 = (0..cfg.n).map(|i| (cfg.window_k(i).len() * cfg.window_k2(i).len()) as f64).sum();
    2.0 * cells * ((terms + 1) * cfg.d) as f64 * cfg.q_heads as f64
}

fn time_forward<T: Element>(t: &AttnTensors<T>, cfg: &AttnConfig, tiles: &TileConfig, reps: usize) -> Result<Vec<f64>> {
    (0..reps)
        .map(|_| {
            let start = Instant::now();
            std::hint::black_box(tiled::forward_tiled(&t.inputs(), cfg, tiles)?);
            Ok(start.elapsed().as_secs_f64() * 1e3)
        })
        .collect()
}

pub fn cmd_bench(a: &BenchArgs) -> Result<Report> {
    let sweep = match (&a.sweep, a.w1, a.w2) {
        (Some(s), _, _) => parse_sweep(s)?,
        (None, Some(w1), Some(w2)) => vec![(w1, w2)],
        _ => TABLE1_SWEEP.to_vec(),
    };
    if a.reps == 0 {
        return Err(Error::Usage("--reps must be at least 1".into()));
    }
    let mut rows = Vec::new();
    let mut timing_rows = Vec::new();
    for &(w1, w2) in &sweep {
        let cfg = AttnConfig::new(a.n, a.dim, w1, w2)
            .with_heads(a.heads, a.kv_heads)
            .with_logit_form(a.logit_form.into())
            .with_precision(a.precision.into());
        cfg.validate()?;
        let tiles = TileConfig::new(a.block_q.max(w2), a.block_kv, w2);
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let t = AttnTensors::<f64>::random(&cfg, 1, &mut rng)?;
        let ms = match cfg.precision {
            Precision::Single => time_forward(&t.cast::<f32>(), &cfg, &tiles, a.reps)?,
            Precision::Double => time_forward(&t, &cfg, &tiles, a.reps)?,
        };
        let mean = ms.iter().sum::<f64>() / ms.len() as f64;
        let var = ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / ms.len() as f64;
        let model = scaling::flops_2s(a.n as u64, w1 as u64, w2 as u64)?;
        rows.push(vec![(w1 * w2).to_string(), w1.to_string(), w2.to_string(), model.to_string()]);
        timing_rows.push(vec![
            (w1 * w2).to_string(),
            w1.to_string(),
            w2.to_string(),
            format!("{mean:.2}"),
            format!("{:.2}", var.sqrt()),
            format!("{:.2}", engine_flops(&cfg) / (mean * 1e-3) / 1e9),
            model.to_string(),
        ]);
    }
    let mut body = format!(
        "Tiled forward, n={} d={} heads={}/{} precision={} logits={}, {} repetitions\n\n",
        a.n,
        a.dim,
        a.heads,
        a.kv_heads,
        Precision::from(a.precision),
        LogitForm::from(a.logit_form),
        a.reps
    );
    body.push_str("Model FLOPs (`6·n·w1·w2`):\n\n");
    body.push_str(&md_table(&["w1*w2", "w1", "w2", "model_flops"], &rows));
    body.push_str("\nMeasured latency:\n\n");
    let head = ["w1*w2", "w1", "w2", "latency_ms", "std_ms", "gflops", "model_flops"];
    body.push_str(&md_table(&head, &timing_rows));
    body.push_str("\nCPU desk-scale timings; the published GPU latencies are not a reproduction target.\n");
    Ok(Report { title: "Latency sweep".into(), header: header("bench"), body, csv: csv_table(&head, &timing_rows)?, passed: true })
}

/// One row of the scaling CSV.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ScalingCsvRow {
    pub model: String,
    pub benchmark: String,
    pub active_params: f64,
    pub nll: f64,
}

/// Parses `model,benchmark,active_params,nll` with a header row. Errors
/// carry the 1-based line number.
pub fn parse_scaling_csv(text: &str) -> Result<Vec<ScalingCsvRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?.clone();
    let want = ["model", "benchmark", "active_params", "nll"];
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(Error::Parse { line: 1, msg: format!("expected header `{}`", want.join(",")) });
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let row: ScalingCsvRow = rec.deserialize(Some(&headers)).map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if !(row.active_params > 0.0 && row.nll > 0.0) {
            return Err(Error::Parse { line, msg: "active_params and nll must be positive".into() });
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn cmd_fit_scaling(a: &FitScalingArgs) -> Result<Report> {
    let text = match &a.csv {
        Some(p) => std::fs::read_to_string(p)?,
        None => TABLE2_CSV.to_string(),
    };
    let rows = parse_scaling_csv(&text)?;
    let series = scaling::fit_series(
        rows.iter().map(|r| (r.model.as_str(), r.benchmark.as_str(), ScalingPoint { n: r.active_params, nll: r.nll })),
    );
    let published = |bench: &str, model: &str| {
        PUBLISHED_COEFFICIENTS.iter().find(|p| p.benchmark == bench).and_then(|p| match model {
            "Transformer" => Some(p.transformer),
            "2-simplicial" => Some(p.simplicial),
            _ => None,
        })
    };
    let opt = |x: Option<f64>, f: fn(f64) -> String| x.map_or("-".to_string(), f);
    let fit_rows: Vec<Vec<String>> = series
        .iter()
        .map(|s| {
            let pub_ab = published(&s.benchmark, &s.model);
            match &s.fit {
                Ok(f) => vec![
                    s.model.clone(),
                    s.benchmark.clone(),
                    s.points.len().to_string(),
                    format!("{:.4}", f.alpha),
                    format!("{:.4}", f.beta),
                    format!("{:.4}", f.beta_log10()),
                    opt(f.r2, |r| format!("{r:.5}")),
                    sci(f.residual),
                    opt(pub_ab.map(|p| p.0), |x| format!("{x:.4}")),
                    opt(pub_ab.map(|p| p.1), |x| format!("{x:.4}")),
                    if f.r2.is_some() { "ok" } else { "r2 undefined" }.to_string(),
                ],
                Err(e) => {
                    let mut r = vec![s.model.clone(), s.benchmark.clone(), s.points.len().to_string()];
                    r.extend(std::iter::repeat_n("-".to_string(), 7));
                    r.push(format!("degenerate: {e}"));
                    r
                }
            }
        })
        .collect();
    let deltas = scaling::pairwise_deltas(&series, &a.baseline, &a.compare);
    let delta_rows: Vec<Vec<String>> = deltas
        .iter()
        .map(|(b, d)| {
            let paper = PUBLISHED_COEFFICIENTS.iter().find(|p| p.benchmark == b).map(|p| p.delta_percent);
            vec![
                b.clone(),
                d.as_ref().map_or_else(|e| format!("error: {e}"), |x| format!("{x:.2}")),
                opt(paper, |x| format!("{x:.1}")),
                match (d, paper) {
                    (Ok(x), Some(p)) => format!("{:+.2}", x - p),
                    _ => "-".into(),
                },
            ]
        })
        .collect();

    let fit_head = ["model", "benchmark", "points", "alpha", "beta", "beta_log10", "r2", "residual", "published_alpha", "published_beta", "status"];
    let delta_head = ["benchmark", "delta_alpha_pct", "published_delta_pct", "difference_pp"];
    let mut body = String::from("Fit of `-ln L = alpha * ln N + beta` by ordinary least squares (natural logs).\n\n");
    body.push_str(&md_table(&fit_head, &fit_rows));
    let _ = writeln!(body, "\nSlope change of {} relative to {}:\n", a.compare, a.baseline);
    body.push_str(&md_table(&delta_head, &delta_rows));
    body.push_str(
        "\nAbsolute alpha depends on the exact active-parameter counts, which are only given approximately; the published values are listed for comparison only.\n",
    );

    let mut csv = csv_table(&fit_head, &fit_rows)?;
    csv.push('\n');
    csv.push_str(&csv_table(&delta_head, &delta_rows)?);
    Ok(Report { title: "Scaling-law fits".into(), header: header("fit-scaling"), body, csv, passed: true })
}

pub fn cmd_match3(a: &Match3Args) -> Result<Report> {
    if a.n == 0 || a.modulus == 0 {
        return Err(Error::Usage("--n and --modulus must be positive".into()));
    }
    let (count, mismatches) = match a.mode {
        Match3Mode::Exhaustive => {
            if (a.modulus as f64).powi(a.n as i32) > 1e7 {
                return Err(Error::Usage(format!("M^n = {}^{} is too large for an exhaustive sweep", a.modulus, a.n)));
            }
            match3::exhaustive_sweep(a.n, a.modulus)?
        }
        Match3Mode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let mut bad = 0;
            for _ in 0..a.reps {
                let inst = Match3Instance::random(a.n, a.modulus, &mut rng)?;
                if match3::match3_transformer(&inst) != match3::match3_oracle(&inst) {
                    bad += 1;
                }
            }
            (a.reps as u64, bad)
        }
    };
    let c = match3::default_c(a.n, a.modulus);
    let mode = match a.mode {
        Match3Mode::Exhaustive => "exhaustive",
        Match3Mode::Random => "random",
    };
    let head = ["n", "modulus", "mode", "instances", "mismatches", "c", "status"];
    let rows = vec![vec![
        a.n.to_string(),
        a.modulus.to_string(),
        mode.to_string(),
        count.to_string(),
        mismatches.to_string(),
        format!("{c}"),
        verdict(mismatches == 0),
    ]];
    let mut body = String::from("Sum-of-determinant attention with the blank pair vs brute-force Match3.\n\n");
    body.push_str(&md_table(&head, &rows));
    Ok(Report {
        title: "Match3 verification".into(),
        header: header("match3"),
        body,
        csv: csv_table(&head, &rows)?,
        passed: mismatches == 0,
    })
}

pub fn run(cli: &Cli) -> Result<Report> {
    match &cli.command {
        Command::Equivalence(a) => cmd_equivalence(a),
        Command::CheckGrad(a) => cmd_check_grad(a),
        Command::Bench(a) => cmd_bench(a),
        Command::FitScaling(a) => cmd_fit_scaling(a),
        Command::Match3(a) => cmd_match3(a),
    }
}

fn outputs(cli: &Cli) -> (Option<PathBuf>, Option<PathBuf>) {
    match &cli.command {
        Command::Equivalence(a) => (a.report.out.clone(), a.report.csv.clone()),
        Command::CheckGrad(a) => (a.report.out.clone(), a.report.csv.clone()),
        Command::Bench(a) => (a.report.out.clone(), a.report.csv.clone()),
        Command::Match3(a) => (a.report.out.clone(), a.report.csv.clone()),
        Command::FitScaling(a) => (a.out.clone(), a.out.as_deref().map(|p: &Path| p.with_extension("csv"))),
    }
}

/// Parses `args`, runs the command, writes any requested files and returns
/// `(exit code, stdout text)`. Diagnostics go to stderr.
pub fn run_args<I, T>(args: I) -> (i32, String)
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // --help and --version are not errors
            if !e.use_stderr() {
                return (EXIT_OK, e.render().to_string());
            }
            eprint!("{}", e.render());
            return (EXIT_USAGE, String::new());
        }
    };
    let report = match run(&cli) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return (EXIT_USAGE, String::new());
        }
    };
    let md = report.markdown();
    let (out, csv) = outputs(&cli);
    for (path, text) in [(out, md.as_str()), (csv, report.csv.as_str())] {
        if let Some(p) = path {
            if let Err(e) = std::fs::write(&p, text) {
                eprintln!("error: writing {}: {e}", p.display());
                return (EXIT_USAGE, String::new());
            }
        }
    }
    (report.exit_code(), md)
}
