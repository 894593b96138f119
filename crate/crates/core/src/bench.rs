//! Wall-clock and allocation measurements of single attention blocks.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{block_forward, flop_estimate, BlockParams, Ctx, Variant};
use crate::error::{Error, Result};
use crate::numerics::{memtrack, Graph, ParamStore, Tensor};
use crate::patching::TokenDims;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Forward,
    ForwardBackward,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub variant: Variant,
    pub n_vars: usize,
    pub n_patches: usize,
    pub d_model: usize,
    pub heads: usize,
    pub reps: usize,
    pub mode: BenchMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub variant: Variant,
    pub n_vars: usize,
    pub n_patches: usize,
    pub d_model: usize,
    pub heads: usize,
    pub reps: usize,
    pub median_ms: f64,
    pub peak_bytes: u64,
    pub flops: u64,
}

pub const CSV_HEADER: &str = "variant,D,N,d_model,heads,median_ms,peak_bytes,flops";

impl BenchPoint {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.variant, self.n_vars, self.n_patches, self.d_model, self.heads, self.median_ms, self.peak_bytes, self.flops
        )
    }
}

/// Rough upper bound on tensor bytes held by one recorded block pass.
pub fn estimate_bytes(variant: Variant, n_vars: usize, n_patches: usize, d_model: usize, heads: usize) -> u64 {
    let (dv, n, d, h) = (n_vars as u64, n_patches as u64, d_model as u64, heads as u64);
    let tokens = dv * n;
    let score_entries = match variant {
        Variant::Sensor => 2 * dv * tokens,
        Variant::SensorOnly => dv * tokens,
        Variant::PureCross => tokens * tokens,
        Variant::ChannelIndependent => dv * n * n,
    };
    8 * (3 * h * score_entries + 40 * tokens * d)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Times one block of `spec.variant` on random tokens. One warm-up pass is
/// discarded and also provides the peak byte count. Fails without running
/// when the estimated footprint exceeds `budget_bytes`.
pub fn time_forward(spec: &BenchSpec, budget_bytes: Option<u64>) -> Result<BenchPoint> {
    if spec.reps < 3 {
        return Err(Error::Config("reps must be at least 3".into()));
    }
    let flops = flop_estimate(spec.variant, spec.n_vars, spec.n_patches, spec.d_model, spec.heads)?.total();
    let estimate = estimate_bytes(spec.variant, spec.n_vars, spec.n_patches, spec.d_model, spec.heads);
    if let Some(budget) = budget_bytes {
        if estimate > budget {
            return Err(Error::Contract(format!("estimated {estimate} bytes exceeds budget of {budget}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xBE7C);
    let mut store = ParamStore::new();
    let block = BlockParams::init(&mut store, "bench", spec.variant, spec.d_model, spec.heads, &mut rng)?;
    let dims = TokenDims {
        n_vars: spec.n_vars,
        n_patches: spec.n_patches,
        d_model: spec.d_model,
    };
    let tokens = Tensor::new(
        &[dims.rows(), spec.d_model],
        (0..dims.rows() * spec.d_model).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let run = || -> Result<()> {
        let mut g = Graph::with_params(&store);
        let x = g.input(tokens.clone());
        let y = block_forward(&mut g, spec.variant, x, dims, &block, &mut Ctx::eval())?;
        if spec.mode == BenchMode::ForwardBackward {
            let s = g.sum(y);
            g.backward(s)?;
        }
        Ok(())
    };
    let (warm, peak_bytes) = memtrack::measure_peak(run);
    warm?;
    let mut times = Vec::with_capacity(spec.reps);
    for _ in 0..spec.reps {
        let t0 = Instant::now();
        run()?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok(BenchPoint {
        variant: spec.variant,
        n_vars: spec.n_vars,
        n_patches: spec.n_patches,
        d_model: spec.d_model,
        heads: spec.heads,
        reps: spec.reps,
        median_ms: median(&mut times),
        peak_bytes,
        flops,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Contract("slope fit needs at least two paired points".into()));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Numeric("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Numeric("all x values are equal".into()));
    }
    Ok(sxy / sxx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedPoint {
    pub variant: Variant,
    pub n_patches: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<BenchPoint>,
    pub skipped: Vec<SkippedPoint>,
    /// Fitted time-vs-N slope per variant, when at least two points ran.
    pub slopes: Vec<(Variant, f64)>,
}

impl SweepResult {
    pub fn slope(&self, variant: Variant) -> Option<f64> {
        self.slopes.iter().find(|s| s.0 == variant).map(|s| s.1)
    }

    pub fn point(&self, variant: Variant, n_patches: usize) -> Option<&BenchPoint> {
        self.points.iter().find(|p| p.variant == variant && p.n_patches == n_patches)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for p in &self.points {
            s.push_str(&p.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn slopes_csv(&self) -> String {
        let mut s = String::from("variant,slope\n");
        for (v, k) in &self.slopes {
            let _ = writeln!(s, "{v},{k}");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub variants: Vec<Variant>,
    pub n_grid: Vec<usize>,
    pub n_vars: usize,
    pub d_model: usize,
    pub heads: usize,
    pub reps: usize,
    pub mode: BenchMode,
    pub budget_bytes: Option<u64>,
}

/// Times every variant at every `N`; points over budget are recorded as
/// skipped and the sweep continues.
pub fn scaling_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    let mut slopes = Vec::new();
    for &variant in &cfg.variants {
        let mut ns = Vec::new();
        let mut ts = Vec::new();
        for &n in &cfg.n_grid {
            let spec = BenchSpec {
                variant,
                n_vars: cfg.n_vars,
                n_patches: n,
                d_model: cfg.d_model,
                heads: cfg.heads,
                reps: cfg.reps,
                mode: cfg.mode,
            };
            match time_forward(&spec, cfg.budget_bytes) {
                Ok(p) => {
                    ns.push(n as f64);
                    ts.push(p.median_ms);
                    points.push(p);
                }
                Err(e @ (Error::Contract(_) | Error::Numeric(_))) => skipped.push(SkippedPoint {
                    variant,
                    n_patches: n,
                    reason: e.to_string(),
                }),
                Err(e) => return Err(e),
            }
        }
        if ns.len() >= 2 {
            slopes.push((variant, fit_loglog_slope(&ns, &ts)?));
        }
    }
    Ok(SweepResult { points, skipped, slopes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slopes_of_exact_power_laws() {
        let xs = [16.0, 32.0, 64.0, 128.0];
        let lin: Vec<f64> = xs.iter().map(|x| 3.0 * x).collect();
        let quad: Vec<f64> = xs.iter().map(|x| 0.5 * x * x).collect();
        assert!((fit_loglog_slope(&xs, &lin).unwrap() - 1.0).abs() < 1e-12);
        assert!((fit_loglog_slope(&xs, &quad).unwrap() - 2.0).abs() < 1e-12);
        assert!(fit_loglog_slope(&[1.0], &[1.0]).is_err());
        assert!(fit_loglog_slope(&[1.0, 2.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn minimal_point() {
        let spec = BenchSpec {
            variant: Variant::Sensor,
            n_vars: 3,
            n_patches: 4,
            d_model: 8,
            heads: 2,
            reps: 3,
            mode: BenchMode::ForwardBackward,
        };
        let p = time_forward(&spec, None).unwrap();
        assert_eq!(p.flops, flop_estimate(Variant::Sensor, 3, 4, 8, 2).unwrap().total());
        assert!(p.median_ms >= 0.0 && p.peak_bytes > 0);
        assert!(p.csv_row().starts_with("sensor,3,4,8,2,"));
        assert!(time_forward(&BenchSpec { reps: 2, ..spec }, None).is_err());
    }

    #[test]
    fn over_budget_points_are_skipped() {
        let cfg = SweepConfig {
            variants: vec![Variant::PureCross],
            n_grid: vec![2, 64],
            n_vars: 4,
            d_model: 8,
            heads: 2,
            reps: 3,
            mode: BenchMode::Forward,
            budget_bytes: Some(estimate_bytes(Variant::PureCross, 4, 2, 8, 2)),
        };
        let r = scaling_sweep(&cfg).unwrap();
        assert_eq!(r.points.len(), 1);
        assert_eq!(r.skipped.len(), 1);
        assert!(r.slope(Variant::PureCross).is_none());
        assert_eq!(r.to_csv().lines().next(), Some(CSV_HEADER));
    }

    #[test]
    fn sensor_flops_shrink_relative_to_pure() {
        let ratio = |n| {
            let s = flop_estimate(Variant::Sensor, 8, n, 16, 2).unwrap().total() as f64;
            let p = flop_estimate(Variant::PureCross, 8, n, 16, 2).unwrap().total() as f64;
            s / p
        };
        assert!(ratio(1024) < ratio(256) && ratio(256) < ratio(64));
    }
}
