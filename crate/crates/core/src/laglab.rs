//! Patch-level lag analysis between variables.
//!
//! For an ordered pair `(i, j)` the middle patch of `i` is correlated with
//! every patch of `j`; the offset of the best match from the middle is the
//! lag of that pair. A pair counts as lagged when that offset is non-zero.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultivariateSeries;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numerics::Tensor;
use crate::patching::{patches_from_window, PatchConfig, PatchSet};

const DEGENERATE_STD: f64 = 1e-12;
const TIE_TOLERANCE: f64 = 1e-12;

/// Pearson correlation; 0 when either input is (numerically) constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("pearson", &[a.len()], &[b.len()]));
    }
    if a.len() < 2 {
        return Err(Error::Contract("pearson needs at least two points".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    let (sa, sb) = ((va / n).sqrt(), (vb / n).sqrt());
    if sa < DEGENERATE_STD || sb < DEGENERATE_STD {
        return Ok(0.0);
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PccProfile {
    pub var_i: usize,
    pub base: usize,
    pub var_j: usize,
    pub pcc: Vec<f64>,
}

/// Correlation of patch `b` of variable `i` with every patch of variable `j`.
pub fn pcc_profile(patches: &PatchSet, i: usize, b: usize, j: usize) -> Result<PccProfile> {
    let (d, n) = (patches.n_vars(), patches.n_patches);
    if i >= d || j >= d || b >= n {
        return Err(Error::Contract(format!("profile ({i}, {b}, {j}) outside {d} variables × {n} patches")));
    }
    let base = patches.patch(i, b);
    let pcc = (0..n).map(|k| pearson(base, patches.patch(j, k))).collect::<Result<_>>()?;
    Ok(PccProfile {
        var_i: i,
        base: b,
        var_j: j,
        pcc,
    })
}

/// Middle patch: `N/2 − 1` for even `N`, `⌊N/2⌋` for odd `N`.
pub fn base_index(n_patches: usize) -> usize {
    if n_patches.is_multiple_of(2) {
        (n_patches / 2).saturating_sub(1)
    } else {
        n_patches / 2
    }
}

/// Index of the largest entry. Near-ties prefer `base`, then the smallest
/// distance from it, then the smaller index.
pub fn argmax_from(values: &[f64], base: usize) -> usize {
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..values.len())
        .filter(|&k| values[k] >= best - TIE_TOLERANCE)
        .min_by_key(|&k| (k.abs_diff(base), k))
        .unwrap_or(base)
}

/// Signed lag `argmax − base` of every ordered pair `i ≠ j`.
pub fn pair_lags(window: &Tensor, cfg: &PatchConfig) -> Result<Vec<(usize, usize, i64)>> {
    if window.shape().len() != 2 || window.cols() < 2 {
        return Err(Error::Contract("lag analysis needs at least two variables".into()));
    }
    let patches = patches_from_window(window, cfg)?;
    let base = base_index(patches.n_patches);
    let d = patches.n_vars();
    let mut out = Vec::with_capacity(d * (d - 1));
    for i in 0..d {
        for j in (0..d).filter(|&j| j != i) {
            let profile = pcc_profile(&patches, i, base, j)?;
            let k = argmax_from(&profile.pcc, base);
            out.push((i, j, k as i64 - base as i64));
        }
    }
    Ok(out)
}

/// Lag proportion and mean absolute lag over the ordered pairs of a window.
pub fn lag_stats(window: &Tensor, cfg: &PatchConfig) -> Result<(f64, f64)> {
    let lags = pair_lags(window, cfg)?;
    let n = lags.len() as f64;
    let lagged = lags.iter().filter(|l| l.2 != 0).count() as f64;
    let distance = lags.iter().map(|l| l.2.unsigned_abs() as f64).sum::<f64>();
    Ok((lagged / n, distance / n))
}

/// Fraction of ordered variable pairs whose best-matching patch is not
/// aligned with the base patch.
pub fn lag_proportion(window: &Tensor, cfg: &PatchConfig) -> Result<f64> {
    Ok(lag_stats(window, cfg)?.0)
}

/// Mean `|argmax − base|` in patches over ordered pairs.
pub fn lag_distance(window: &Tensor, cfg: &PatchConfig) -> Result<f64> {
    Ok(lag_stats(window, cfg)?.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorLag {
    pub tensor_id: usize,
    pub start: usize,
    pub proportion: f64,
    pub avg_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagReport {
    pub tensors: Vec<TensorLag>,
    pub mean_proportion: f64,
    pub mean_distance: f64,
    pub seed: u64,
}

impl LagReport {
    /// `tensor_id,proportion,avg_distance`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tensor_id,proportion,avg_distance\n");
        for t in &self.tensors {
            let _ = writeln!(s, "{},{},{}", t.tensor_id, t.proportion, t.avg_distance);
        }
        s
    }
}

/// Lag statistics of `n_tensors` lookback windows drawn uniformly (seeded)
/// from the series.
pub fn lag_report(series: &MultivariateSeries, cfg: &PatchConfig, n_tensors: usize, seed: u64, exec: Exec) -> Result<LagReport> {
    if n_tensors == 0 {
        return Err(Error::Config("n_tensors must be at least 1".into()));
    }
    let l = cfg.lookback;
    if series.len() < l {
        return Err(Error::Contract(format!("series of {} rows is shorter than lookback {l}", series.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Vec<usize> = (0..n_tensors).map(|_| rng.random_range(0..=series.len() - l)).collect();
    let stats = exec.map(&starts, |_, &s| -> Result<(f64, f64)> {
        let window = series.slice_rows(s..s + l)?;
        lag_stats(&window.values, cfg)
    });
    let mut tensors = Vec::with_capacity(n_tensors);
    for (id, (r, &start)) in stats.into_iter().zip(&starts).enumerate() {
        let (proportion, avg_distance) = r?;
        tensors.push(TensorLag {
            tensor_id: id,
            start,
            proportion,
            avg_distance,
        });
    }
    let n = n_tensors as f64;
    Ok(LagReport {
        mean_proportion: tensors.iter().map(|t| t.proportion).sum::<f64>() / n,
        mean_distance: tensors.iter().map(|t| t.avg_distance).sum::<f64>() / n,
        tensors,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_lagged, LagSpec};

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 3.0];
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        // r = Σdxdy / sqrt(Σdx² Σdy²) = 3 / sqrt(2 · 14/3)
        let r = pearson(&a, &[1.0, 2.0, 4.0]).unwrap();
        assert!((r - 3.0 / (2.0f64 * 14.0 / 3.0).sqrt()).abs() < 1e-12);
        assert!((r - 0.9819805).abs() < 1e-6);
        assert_eq!(pearson(&a, &[5.0, 5.0, 5.0]).unwrap(), 0.0);
        assert!(pearson(&a, &[1.0]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn base_index_rule() {
        assert_eq!(base_index(10), 4);
        assert_eq!(base_index(9), 4);
        assert_eq!(base_index(1), 0);
    }

    #[test]
    fn ties_prefer_base_then_nearest_then_lower() {
        assert_eq!(argmax_from(&[1.0, 1.0, 1.0], 1), 1);
        assert_eq!(argmax_from(&[1.0, 0.0, 0.5, 1.0], 1), 0);
        assert_eq!(argmax_from(&[1.0, 0.0, 1.0], 1), 0);
        assert_eq!(argmax_from(&[0.2, 0.9, 0.3], 0), 1);
    }

    fn cfg() -> PatchConfig {
        PatchConfig {
            lookback: 96,
            patch_len: 32,
            stride: 8,
            d_model: 16,
        }
    }

    fn shifted_window(delay: usize, seed: u64) -> Tensor {
        let spec = LagSpec::parse_edges(&format!("0>1:{delay}"), 0.0).unwrap();
        synth_lagged(2, 96, &spec, seed).unwrap().0.values
    }

    #[test]
    fn identical_variables_have_no_lag() {
        let w = shifted_window(0, 3);
        assert_eq!(lag_stats(&w, &cfg()).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn two_patch_shift_is_recovered() {
        let w = shifted_window(16, 5);
        let patches = patches_from_window(&w, &cfg()).unwrap();
        let p = pcc_profile(&patches, 0, 4, 1).unwrap();
        assert_eq!(argmax_from(&p.pcc, 4), 6);
        let same = pcc_profile(&patches, 0, 4, 0).unwrap();
        assert!((same.pcc[4] - 1.0).abs() < 1e-12);
        assert_eq!(lag_stats(&w, &cfg()).unwrap(), (1.0, 2.0));
    }

    #[test]
    fn constant_target_gives_zero_profile() {
        let mut w = shifted_window(8, 1);
        for t in 0..96 {
            w.data_mut()[t * 2 + 1] = 2.5;
        }
        let patches = patches_from_window(&w, &cfg()).unwrap();
        assert!(pcc_profile(&patches, 0, 4, 1).unwrap().pcc.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_variable_is_rejected() {
        let w = Tensor::filled(&[96, 1], 1.0).unwrap();
        assert!(lag_proportion(&w, &cfg()).is_err());
    }

    #[test]
    fn report_rows_and_reproducibility() {
        let spec = LagSpec::parse_edges("0>1:8", 0.05).unwrap();
        let (s, _) = synth_lagged(3, 500, &spec, 2).unwrap();
        let r = lag_report(&s, &cfg(), 1, 7, Exec::Sequential).unwrap();
        assert_eq!(r.tensors.len(), 1);
        let a = lag_report(&s, &cfg(), 6, 7, Exec::Parallel).unwrap();
        assert_eq!(a, lag_report(&s, &cfg(), 6, 7, Exec::Sequential).unwrap());
        assert_eq!(a.to_csv().lines().count(), 7);
    }
}
