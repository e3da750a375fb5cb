//! Power-law fits of benchmark NLL against active parameters, and the
//! attention FLOPs model.
//!
//! With the data term dropped (all models see the same tokens), the loss
//! `L(N) = E' + A/N^α` linearizes to `−ln L = α·ln N + β`, which is fitted
//! by ordinary least squares.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Published power-law coefficients for one benchmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublishedCoefficients {
    pub benchmark: &'static str,
    /// Transformer `(α, β)`
    pub transformer: (f64, f64),
    /// 2-simplicial `(α, β)`
    pub simplicial: (f64, f64),
    /// reported Δα%
    pub delta_percent: f64,
}

const fn published(benchmark: &'static str, transformer: (f64, f64), simplicial: (f64, f64), delta_percent: f64) -> PublishedCoefficients {
    PublishedCoefficients { benchmark, transformer, simplicial, delta_percent }
}

pub const PUBLISHED_COEFFICIENTS: [PublishedCoefficients; 4] = [
    published("GSM8k", (0.1420, -1.8280), (0.1683, -2.3939), 18.5),
    published("MMLU", (0.1256, -2.1606), (0.1364, -2.3960), 8.5),
    published("MMLU-pro", (0.0901, -1.7289), (0.1083, -2.1181), 20.2),
    published("MBPP", (0.1720, -2.2569), (0.1837, -2.5201), 6.8),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingPoint {
    /// active parameter count
    pub n: f64,
    /// negative log-likelihood in nats
    pub nll: f64,
}

impl ScalingPoint {
    pub fn new(n: f64, nll: f64) -> Result<Self> {
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::domain(format!("active parameter count must be positive, got {n}")));
        }
        if !(nll > 0.0 && nll.is_finite()) {
            return Err(Error::domain(format!("nll must be positive, got {nll}")));
        }
        Ok(ScalingPoint { n, nll })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingFit {
    pub alpha: f64,
    pub beta: f64,
    /// `None` when every `−ln L` is equal (R² undefined).
    pub r2: Option<f64>,
    pub residual: f64,
}

impl ScalingFit {
    /// Intercept expressed for base-10 logs on both axes. The slope does not
    /// depend on the base.
    pub fn beta_log10(&self) -> f64 {
        self.beta / std::f64::consts::LN_10
    }
}

fn ols(xy: &[(f64, f64)]) -> Result<(f64, f64)> {
    let mut distinct: Vec<f64> = xy.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::DegenerateFit(format!("{} distinct N values; need at least 2", distinct.len())));
    }
    let k = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / k;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

fn log_pairs(points: &[ScalingPoint], log: fn(f64) -> f64) -> Vec<(f64, f64)> {
    points.iter().map(|p| (log(p.n), -log(p.nll))).collect()
}

/// OLS of `y = −ln L` on `x = ln N`.
pub fn fit_power_law(points: &[ScalingPoint]) -> Result<ScalingFit> {
    let (alpha, beta) = ols(&log_pairs(points, f64::ln))?;
    let mut fit = ScalingFit { alpha, beta, r2: None, residual: 0.0 };
    let (r2, residual) = goodness_of_fit(points, &fit);
    fit.r2 = r2;
    fit.residual = residual;
    Ok(fit)
}

/// The same regression with `log10` on both axes.
pub fn fit_power_law_log10(points: &[ScalingPoint]) -> Result<(f64, f64)> {
    ols(&log_pairs(points, f64::log10))
}

/// `(R², SS_res)` on the `(ln N, −ln L)` pairs; R² is `None` when
/// `SS_tot = 0`.
pub fn goodness_of_fit(points: &[ScalingPoint], fit: &ScalingFit) -> (Option<f64>, f64) {
    let xy = log_pairs(points, f64::ln);
    let my = xy.iter().map(|p| p.1).sum::<f64>() / xy.len() as f64;
    let ss_res: f64 = xy.iter().map(|&(x, y)| (y - fit.alpha * x - fit.beta).powi(2)).sum();
    let ss_tot: f64 = xy.iter().map(|&(_, y)| (y - my).powi(2)).sum();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    (r2, ss_res)
}

/// `100·(α_b − α_a)/α_a`.
pub fn delta_percent(a: &ScalingFit, b: &ScalingFit) -> Result<f64> {
    if a.alpha == 0.0 {
        return Err(Error::ZeroBaseline);
    }
    Ok(100.0 * (b.alpha - a.alpha) / a.alpha)
}

/// One `(model, benchmark)` series, fitted or flagged degenerate.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFit {
    pub model: String,
    pub benchmark: String,
    pub points: Vec<ScalingPoint>,
    pub fit: Result<ScalingFit>,
}

/// Groups labelled points by `(model, benchmark)` and fits each series.
/// Series come back sorted by benchmark, then model.
pub fn fit_series<'a>(rows: impl IntoIterator<Item = (&'a str, &'a str, ScalingPoint)>) -> Vec<SeriesFit> {
    let mut groups: BTreeMap<(String, String), Vec<ScalingPoint>> = BTreeMap::new();
    for (model, bench, p) in rows {
        groups.entry((bench.to_string(), model.to_string())).or_default().push(p);
    }
    groups
        .into_iter()
        .map(|((benchmark, model), points)| {
            let fit = fit_power_law(&points);
            SeriesFit { model, benchmark, points, fit }
        })
        .collect()
}

/// Δα% for every benchmark that has a fitted `baseline` and `other` series.
pub fn pairwise_deltas(series: &[SeriesFit], baseline: &str, other: &str) -> Vec<(String, Result<f64>)> {
    let find = |m: &str, b: &str| series.iter().find(|s| s.model == m && s.benchmark == b);
    let mut benches: Vec<&str> = series.iter().map(|s| s.benchmark.as_str()).collect();
    benches.dedup();
    benches
        .into_iter()
        .filter_map(|b| {
            let (sa, sb) = (find(baseline, b)?, find(other, b)?);
            let d = match (&sa.fit, &sb.fit) {
                (Ok(fa), Ok(fb)) => delta_percent(fa, fb),
                (Err(e), _) | (_, Err(e)) => Err(e.clone()),
            };
            Some((b.to_string(), d))
        })
        .collect()
}

/// Attention FLOPs at context length `n` with windows `w1`, `w2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopsModel {
    pub n: u64,
    pub w1: u64,
    pub w2: u64,
}

impl FlopsModel {
    pub fn new(n: u64, w1: u64, w2: u64) -> Result<Self> {
        if n == 0 || w1 == 0 || w2 == 0 {
            return Err(Error::domain(format!("n, w1, w2 must be positive (got {n}, {w1}, {w2})")));
        }
        Ok(FlopsModel { n, w1, w2 })
    }

    pub fn dot(&self) -> u128 {
        2 * self.n as u128 * self.n as u128
    }

    pub fn two_simplicial(&self) -> u128 {
        6 * self.n as u128 * self.w1 as u128 * self.w2 as u128
    }
}

/// Causal dot-product attention logits: `2n²`.
pub fn flops_dot(n: u64) -> Result<u128> {
    Ok(FlopsModel::new(n, 1, 1)?.dot())
}

/// Windowed trilinear logits: `6·n·w1·w2`.
pub fn flops_2s(n: u64, w1: u64, w2: u64) -> Result<u128> {
    Ok(FlopsModel::new(n, w1, w2)?.two_simplicial())
}

/// Context length where both costs meet: `2n² = 6n·w1·w2 ⇒ n = 3·w1·w2`.
pub fn breakeven(w1: u64, w2: u64) -> Result<u64> {
    FlopsModel::new(1, w1, w2)?;
    3u64.checked_mul(w1).and_then(|x| x.checked_mul(w2)).ok_or_else(|| Error::domain("breakeven overflows u64"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(f64, f64)]) -> Vec<ScalingPoint> {
        v.iter().map(|&(n, l)| ScalingPoint::new(n, l).unwrap()).collect()
    }

    const NS: [f64; 3] = [1.0e9, 2.0e9, 3.5e9];

    #[test]
    fn synthetic_recovery() {
        let p: Vec<ScalingPoint> = NS.iter().map(|&n| ScalingPoint::new(n, (-(0.15 * n.ln() - 2.0)).exp()).unwrap()).collect();
        let f = fit_power_law(&p).unwrap();
        assert!((f.alpha - 0.15).abs() < 1e-10);
        assert!((f.beta + 2.0).abs() < 1e-10);
        assert!((f.r2.unwrap() - 1.0).abs() < 1e-12);
        assert!(f.residual < 1e-20);
    }

    #[test]
    fn gsm8k_pair() {
        let t = fit_power_law(&pts(&[(1.0e9, 0.3277), (2.0e9, 0.2987), (3.5e9, 0.2781)])).unwrap();
        let s = fit_power_law(&pts(&[(1.0e9, 0.3302), (2.0e9, 0.2942), (3.5e9, 0.2718)])).unwrap();
        assert!((t.alpha - 0.1311).abs() < 5e-5);
        assert!((s.alpha - 0.1558).abs() < 5e-5);
        let d = delta_percent(&t, &s).unwrap();
        assert!((d - 18.83).abs() < 0.01, "{d}");
        assert!(t.r2.unwrap() >= 0.99);
    }

    #[test]
    fn base_and_scale_invariance() {
        let p = pts(&[(1.0e9, 0.6411), (2.0e9, 0.5932), (3.5e9, 0.5543)]);
        let f = fit_power_law(&p).unwrap();
        let (a10, b10) = fit_power_law_log10(&p).unwrap();
        assert!((a10 - f.alpha).abs() < 1e-12);
        assert!((b10 - f.beta_log10()).abs() < 1e-12);
        let scaled: Vec<ScalingPoint> = p.iter().map(|q| ScalingPoint::new(q.n * 7.0, q.nll).unwrap()).collect();
        let g = fit_power_law(&scaled).unwrap();
        assert!((g.alpha - f.alpha).abs() < 1e-12);
        assert!((g.beta - (f.beta - f.alpha * 7f64.ln())).abs() < 1e-10);
    }

    #[test]
    fn degenerate_cases() {
        assert!(matches!(fit_power_law(&pts(&[(1e9, 0.3)])), Err(Error::DegenerateFit(_))));
        assert!(matches!(fit_power_law(&pts(&[(1e9, 0.3), (1e9, 0.2)])), Err(Error::DegenerateFit(_))));
        let two = fit_power_law(&pts(&[(1e9, 0.3), (2e9, 0.2)])).unwrap();
        assert_eq!(two.r2, Some(1.0));
        let flat = fit_power_law(&pts(&[(1e9, 0.3), (2e9, 0.3)])).unwrap();
        assert_eq!(flat.r2, None);
        assert!(ScalingPoint::new(0.0, 0.3).is_err() && ScalingPoint::new(1.0, 0.0).is_err());
    }

    #[test]
    fn delta_examples() {
        let f = |a| ScalingFit { alpha: a, beta: 0.0, r2: None, residual: 0.0 };
        assert_eq!(delta_percent(&f(0.1), &f(0.1)).unwrap(), 0.0);
        assert!((delta_percent(&f(0.10), &f(0.12)).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(delta_percent(&f(0.0), &f(0.1)), Err(Error::ZeroBaseline));
    }

    #[test]
    fn series_grouping() {
        let rows = vec![
            ("a", "x", ScalingPoint::new(1e9, 0.5).unwrap()),
            ("a", "x", ScalingPoint::new(2e9, 0.4).unwrap()),
            ("b", "x", ScalingPoint::new(1e9, 0.5).unwrap()),
            ("b", "x", ScalingPoint::new(2e9, 0.3).unwrap()),
            ("b", "y", ScalingPoint::new(2e9, 0.3).unwrap()),
        ];
        let s = fit_series(rows);
        assert_eq!(s.len(), 3);
        assert!(s.iter().find(|s| s.benchmark == "y").unwrap().fit.is_err());
        let d = pairwise_deltas(&s, "a", "b");
        assert_eq!(d.len(), 1);
        assert!(d[0].1.as_ref().unwrap() > &0.0);
    }

    #[test]
    fn flops_examples() {
        let n = breakeven(512, 32).unwrap();
        assert_eq!(n, 49152);
        assert_eq!(flops_dot(n).unwrap(), 4_831_838_208);
        assert_eq!(flops_2s(n, 512, 32).unwrap(), 4_831_838_208);
        let m = 32768;
        assert_eq!(flops_2s(m, 256, 128).unwrap(), 3 * flops_dot(m).unwrap());
        assert!(flops_2s(10, 4, 0).is_err() && breakeven(0, 3).is_err() && flops_dot(0).is_err());
        assert_eq!(flops_2s(8192, 512, 32).unwrap(), 2 * flops_2s(8192, 256, 32).unwrap());
    }
}
