//! Losses, metrics, the mini-batch training loop and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Ctx;
use crate::data::{chronological_split, make_windows, MultivariateSeries, SplitSpec, Standardizer, WindowSample};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{build_model, Model, ModelConfig};
use crate::numerics::{AdamState, Graph, ParamGrads, Tensor};

/// Samples whose gradients are held in memory at once during a batch.
const GRAD_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Print a progress line every this many epochs; 0 disables it.
    pub report_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-4,
            seed: 2021,
            report_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mse: f64,
    pub mae: f64,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Mean squared error over all entries.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same("mse", pred, target)?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(s / pred.numel() as f64)
}

/// Mean absolute error over all entries.
pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same("mae", pred, target)?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(p, t)| (p - t).abs()).sum();
    Ok(s / pred.numel() as f64)
}

/// Repeats the last row of `x_his` `horizon` times.
pub fn persistence_baseline(x_his: &Tensor, horizon: usize) -> Result<Tensor> {
    if x_his.rows() == 0 || horizon == 0 {
        return Err(Error::Empty("persistence needs history and a horizon".into()));
    }
    let last = x_his.row(x_his.rows() - 1);
    Tensor::new(&[horizon, x_his.cols()], last.repeat(horizon))
}

/// Reduces per-window `(squared, absolute)` error sums in window order.
/// `col_scale` multiplies each variable's error before summing.
fn reduce_errors<F>(windows: &[WindowSample], exec: Exec, col_scale: Option<&[f64]>, predict: F) -> Result<EvalMetrics>
where
    F: Fn(&WindowSample) -> Result<Tensor> + Sync + Send,
{
    if windows.is_empty() {
        return Err(Error::Empty("no windows to evaluate".into()));
    }
    let per_window = exec.map(windows, |_, w| -> Result<(f64, f64, usize)> {
        let pred = predict(w)?;
        check_same("evaluate", &pred, &w.x_future)?;
        let d = pred.cols();
        if let Some(s) = col_scale {
            if s.len() != d {
                return Err(Error::dim("metric scale", &[s.len()], &[d]));
            }
        }
        let (mut sq, mut ab) = (0.0, 0.0);
        for (k, (p, t)) in pred.data().iter().zip(w.x_future.data()).enumerate() {
            let e = (p - t) * col_scale.map_or(1.0, |s| s[k % d]);
            sq += e * e;
            ab += e.abs();
        }
        Ok((sq, ab, pred.numel()))
    });
    let (mut sq, mut ab, mut n) = (0.0, 0.0, 0usize);
    for r in per_window {
        let (s, a, c) = r?;
        sq += s;
        ab += a;
        n += c;
    }
    Ok(EvalMetrics {
        mse: sq / n as f64,
        mae: ab / n as f64,
        count: windows.len(),
    })
}

/// Mean MSE and MAE of the model over `windows`.
pub fn evaluate(model: &Model, windows: &[WindowSample], exec: Exec) -> Result<EvalMetrics> {
    reduce_errors(windows, exec, None, |w| model.forward(&w.x_his))
}

/// Like [`evaluate`] with errors mapped back through a per-variable scale,
/// e.g. the standard deviations of a [`Standardizer`].
pub fn evaluate_scaled(model: &Model, windows: &[WindowSample], exec: Exec, col_scale: &[f64]) -> Result<EvalMetrics> {
    reduce_errors(windows, exec, Some(col_scale), |w| model.forward(&w.x_his))
}

/// Metrics of the last-value predictor.
pub fn persistence_metrics(windows: &[WindowSample], exec: Exec) -> Result<EvalMetrics> {
    reduce_errors(windows, exec, None, |w| persistence_baseline(&w.x_his, w.x_future.rows()))
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the dropout stream of one sample of one batch.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| mix(acc ^ mix(p)))
}

fn sample_grads(model: &Model, sample: &WindowSample, seed: u64) -> Result<(f64, ParamGrads)> {
    let mut g = Graph::with_params(&model.store);
    let mut ctx = Ctx::train(model.config.dropout, ChaCha8Rng::seed_from_u64(seed));
    let pred = model.forward_graph(&mut g, &sample.x_his, model.config.variant, &mut ctx)?;
    let loss = g.mse(pred, &sample.x_future)?;
    let value = g.value(loss).data()[0];
    Ok((value, g.backward(loss)?.param_grads()))
}

fn diverged(model: &Model, epoch: usize, batch: usize, what: &str) -> Error {
    let mut diagnostic = format!("{what}; parameter norms:");
    for (name, n) in model.store.norms() {
        let _ = write!(diagnostic, " {name}={n:.4e}");
    }
    Error::Diverged { epoch, batch, diagnostic }
}

/// Trains with Adam on shuffled mini-batches and evaluates on `val` after
/// every epoch. Per-sample gradients are summed in sample order, so the
/// result does not depend on `exec`.
pub fn train(
    model: &mut Model,
    train_set: &[WindowSample],
    val_set: &[WindowSample],
    tcfg: &TrainConfig,
    exec: Exec,
) -> Result<Vec<EpochRecord>> {
    train_with(model, train_set, val_set, tcfg, exec, |_| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with(
    model: &mut Model,
    train_set: &[WindowSample],
    val_set: &[WindowSample],
    tcfg: &TrainConfig,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    tcfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training split has no windows".into()));
    }
    let mut adam = AdamState::new(&model.store, tcfg.lr);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[tcfg.seed, u64::MAX]));
    let mut history = Vec::with_capacity(tcfg.epochs);
    for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (batch, idx) in order.chunks(tcfg.batch_size).enumerate() {
            let mut total = ParamGrads::empty(model.store.len());
            let mut batch_loss = 0.0;
            for (c, chunk) in idx.chunks(GRAD_CHUNK).enumerate() {
                let m = &*model;
                let results = exec.map(chunk, |k, &i| {
                    let pos = (c * GRAD_CHUNK + k) as u64;
                    sample_grads(m, &train_set[i], derive_seed(&[tcfg.seed, epoch as u64, batch as u64, pos]))
                });
                for r in results {
                    let (l, gr) = r?;
                    batch_loss += l;
                    total.add_assign(&gr);
                }
            }
            if !batch_loss.is_finite() {
                return Err(diverged(model, epoch, batch, "non-finite loss"));
            }
            total.scale(1.0 / idx.len() as f64);
            if !total.all_finite() {
                return Err(diverged(model, epoch, batch, "non-finite gradient"));
            }
            model.store.accumulate(&total)?;
            adam.step(&mut model.store)?;
            loss_sum += batch_loss;
        }
        let (val_mse, val_mae) = if val_set.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let m = evaluate(model, val_set, exec)?;
            (m.mse, m.mae)
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_mse,
            val_mae,
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(history)
}

/// Train, validation and test windows cut from one series, with the
/// standardiser fitted on the training rows.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    pub scaler: Standardizer,
}

/// Splits, standardises with training statistics and windows the series.
/// Training windows start every `train_stride` rows; validation and test
/// windows every row.
pub fn prepare_data(
    series: &MultivariateSeries,
    split: &SplitSpec,
    lookback: usize,
    horizon: usize,
    train_stride: usize,
) -> Result<PreparedData> {
    split.check(lookback, horizon)?;
    let (train, val, test) = chronological_split(series, split)?;
    let scaler = Standardizer::fit(&train);
    Ok(PreparedData {
        train: make_windows(&scaler.transform(&train)?, lookback, horizon, train_stride)?,
        val: make_windows(&scaler.transform(&val)?, lookback, horizon, 1)?,
        test: make_windows(&scaler.transform(&test)?, lookback, horizon, 1)?,
        scaler,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub test: EvalMetrics,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedSummary {
    pub runs: Vec<SeedRun>,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Trains and tests one fresh model per seed. The seed drives both the
/// initialisation and the batch order.
pub fn multi_seed_run(
    model_cfg: &ModelConfig,
    tcfg: &TrainConfig,
    data: &PreparedData,
    seeds: &[u64],
    exec: Exec,
) -> Result<MultiSeedSummary> {
    if seeds.is_empty() {
        return Err(Error::Empty("no seeds".into()));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut model = build_model(&ModelConfig { seed, ..model_cfg.clone() })?;
        let history = train(&mut model, &data.train, &data.val, &TrainConfig { seed, ..tcfg.clone() }, exec)?;
        let test = evaluate(&model, &data.test, exec)?;
        runs.push(SeedRun { seed, test, history });
    }
    let (mse_mean, mse_std) = mean_std(&runs.iter().map(|r| r.test.mse).collect::<Vec<_>>());
    let (mae_mean, mae_std) = mean_std(&runs.iter().map(|r| r.test.mae).collect::<Vec<_>>());
    Ok(MultiSeedSummary {
        runs,
        mse_mean,
        mse_std,
        mae_mean,
        mae_std,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `epoch,train_loss,val_mse,val_mae`
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_mse,val_mae\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_mse, r.val_mae);
    }
    s
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    write_text(path, &history_csv(history))
}

/// One-line JSON record of test metrics.
pub fn metrics_json(metrics: &EvalMetrics) -> Result<String> {
    Ok(serde_json::to_string(metrics)?)
}

/// `seed,mse,mae` per run followed by `mean` and `std` rows.
pub fn multi_seed_csv(summary: &MultiSeedSummary) -> String {
    let mut s = String::from("seed,mse,mae\n");
    for r in &summary.runs {
        let _ = writeln!(s, "{},{},{}", r.seed, r.test.mse, r.test.mae);
    }
    let _ = writeln!(s, "mean,{},{}", summary.mse_mean, summary.mae_mean);
    let _ = writeln!(s, "std,{},{}", summary.mse_std, summary.mae_std);
    s
}

/// `window_id,step,variable,y_true,y_pred` for the first `max_windows` windows.
pub fn write_predictions(path: &Path, model: &Model, windows: &[WindowSample], max_windows: usize, exec: Exec) -> Result<()> {
    let take = &windows[..windows.len().min(max_windows)];
    let preds = model.predict_batch(take, exec)?;
    let mut s = String::from("window_id,step,variable,y_true,y_pred\n");
    for (w, p) in take.iter().zip(&preds) {
        for step in 0..p.rows() {
            for v in 0..p.cols() {
                let _ = writeln!(s, "{},{},{},{},{}", w.start, step, v, w.x_future.at(step, v), p.at(step, v));
            }
        }
    }
    write_text(path, &s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::patching::PatchConfig;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn loss_examples() {
        let a = rand_tensor(&[4, 3], 1);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let b = Tensor::new(&[4, 3], a.data().iter().map(|v| v + 2.0).collect()).unwrap();
        assert!((mse(&b, &a).unwrap() - 4.0).abs() < 1e-12);
        let c = Tensor::new(&[4, 3], a.data().iter().map(|v| v - 3.0).collect()).unwrap();
        assert!((mae(&c, &a).unwrap() - 3.0).abs() < 1e-12);
        assert!(mse(&a, &rand_tensor(&[3, 4], 1)).is_err());
    }

    #[test]
    fn losses_match_scalar_oracle_and_are_symmetric() {
        let (a, b) = (rand_tensor(&[5, 4], 2), rand_tensor(&[5, 4], 3));
        let (mut sq, mut ab) = (0.0, 0.0);
        for i in 0..5 {
            for j in 0..4 {
                let e = a.at(i, j) - b.at(i, j);
                sq += e * e;
                ab += e.abs();
            }
        }
        assert!((mse(&a, &b).unwrap() - sq / 20.0).abs() < 1e-12);
        assert!((mae(&a, &b).unwrap() - ab / 20.0).abs() < 1e-12);
        assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
    }

    #[test]
    fn persistence_on_a_ramp() {
        let slope = 0.5;
        let (l, h) = (10, 6);
        let x = Tensor::new(&[l, 1], (0..l).map(|t| slope * t as f64).collect()).unwrap();
        let future = Tensor::new(&[h, 1], (l..l + h).map(|t| slope * t as f64).collect()).unwrap();
        let p = persistence_baseline(&x, h).unwrap();
        let expected = slope * slope * (1..=h).map(|k| (k * k) as f64).sum::<f64>() / h as f64;
        assert!((mse(&p, &future).unwrap() - expected).abs() < 1e-12);
        let flat = Tensor::filled(&[l, 2], 3.0).unwrap();
        let p = persistence_baseline(&flat, h).unwrap();
        assert_eq!(mse(&p, &Tensor::filled(&[h, 2], 3.0).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn persistence_on_random_walk_matches_step_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let rows = 20_000;
        let mut x = 0.0;
        let walk: Vec<f64> = (0..rows)
            .map(|_| {
                x += rand_distr::Distribution::sample(&normal, &mut rng);
                x
            })
            .collect();
        let series = MultivariateSeries::new(vec!["w".into()], Tensor::new(&[rows, 1], walk).unwrap(), None).unwrap();
        let h = 4;
        let w = make_windows(&series, 8, h, 1).unwrap();
        let m = persistence_metrics(&w, Exec::Sequential).unwrap();
        // E[(x_{t+k} - x_t)^2] = k, averaged over k = 1..h
        let bound = (1..=h).sum::<usize>() as f64 / h as f64;
        assert!((m.mse - bound).abs() / bound < 0.05, "{} vs {bound}", m.mse);
    }

    fn tiny_cfg(seed: u64) -> ModelConfig {
        ModelConfig {
            patch: PatchConfig {
                lookback: 16,
                patch_len: 8,
                stride: 4,
                d_model: 8,
            },
            horizon: 4,
            blocks: 1,
            heads: 2,
            variant: Variant::Sensor,
            dropout: 0.1,
            normalize_window: true,
            seed,
        }
    }

    fn tiny_windows(n: usize, seed: u64) -> Vec<WindowSample> {
        (0..n)
            .map(|k| WindowSample {
                x_his: rand_tensor(&[16, 3], seed + k as u64),
                x_future: rand_tensor(&[4, 3], seed + 1000 + k as u64),
                start: k,
            })
            .collect()
    }

    #[test]
    fn perfect_predictor_scores_zero() {
        let w = tiny_windows(3, 1);
        let m = reduce_errors(&w, Exec::Sequential, None, |s| Ok(s.x_future.clone())).unwrap();
        assert_eq!((m.mse, m.mae, m.count), (0.0, 0.0, 3));
    }

    #[test]
    fn training_is_deterministic_and_independent_of_exec() {
        let (tr, va) = (tiny_windows(10, 10), tiny_windows(3, 50));
        let tcfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            lr: 1e-3,
            seed: 9,
            report_every: 0,
        };
        let run = |exec| {
            let mut m = build_model(&tiny_cfg(1)).unwrap();
            let h = train(&mut m, &tr, &va, &tcfg, exec).unwrap();
            (h, m.to_checkpoint_string())
        };
        let a = run(Exec::Sequential);
        assert_eq!(a, run(Exec::Sequential));
        assert_eq!(a, run(Exec::Parallel));
        assert_eq!(a.0.len(), 2);
    }

    #[test]
    fn evaluate_is_pure() {
        let m = build_model(&tiny_cfg(2)).unwrap();
        let w = tiny_windows(5, 3);
        let a = evaluate(&m, &w, Exec::Parallel).unwrap();
        assert_eq!(a, evaluate(&m, &w, Exec::Sequential).unwrap());
        let scaled = evaluate_scaled(&m, &w, Exec::Sequential, &[2.0, 2.0, 2.0]).unwrap();
        assert!((scaled.mse - 4.0 * a.mse).abs() < 1e-12);
        assert!(evaluate(&m, &[], Exec::Sequential).is_err());
    }

    #[test]
    fn empty_training_split_is_an_error() {
        let mut m = build_model(&tiny_cfg(2)).unwrap();
        assert!(matches!(
            train(&mut m, &[], &[], &TrainConfig::default(), Exec::Sequential),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn nan_loss_aborts_with_norms() {
        let mut m = build_model(&tiny_cfg(2)).unwrap();
        let mut w = tiny_windows(2, 1);
        w[0].x_future.data_mut()[0] = f64::NAN;
        match train(&mut m, &w, &[], &TrainConfig::default(), Exec::Sequential) {
            Err(Error::Diverged { epoch, diagnostic, .. }) => {
                assert_eq!(epoch, 1);
                assert!(diagnostic.contains("head.weight"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn identical_seeds_have_zero_spread() {
        let data = PreparedData {
            train: tiny_windows(6, 1),
            val: tiny_windows(2, 20),
            test: tiny_windows(3, 40),
            scaler: Standardizer {
                mean: vec![0.0; 3],
                std: vec![1.0; 3],
            },
        };
        let tcfg = TrainConfig {
            epochs: 1,
            batch_size: 3,
            lr: 1e-3,
            seed: 0,
            report_every: 0,
        };
        let s = multi_seed_run(&tiny_cfg(0), &tcfg, &data, &[5, 5], Exec::Sequential).unwrap();
        assert_eq!(s.mse_std, 0.0);
        assert!(multi_seed_csv(&s).lines().count() == 5);
        let s = multi_seed_run(&tiny_cfg(0), &tcfg, &data, &[1, 2, 3], Exec::Sequential).unwrap();
        assert!(s.mse_std >= 0.0);
    }

    #[test]
    fn artifacts_have_expected_headers() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_model(&tiny_cfg(2)).unwrap();
        let w = tiny_windows(3, 1);
        let p = dir.path().join("pred.csv");
        write_predictions(&p, &m, &w, 2, Exec::Sequential).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("window_id,step,variable,y_true,y_pred\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 4 * 3);
        let h = history_csv(&[EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            val_mse: 0.25,
            val_mae: 0.4,
        }]);
        assert_eq!(h, "epoch,train_loss,val_mse,val_mae\n1,0.5,0.25,0.4\n");
        let j = metrics_json(&EvalMetrics {
            mse: 0.5,
            mae: 0.25,
            count: 7,
        })
        .unwrap();
        assert_eq!(j, r#"{"mse":0.5,"mae":0.25,"count":7}"#);
    }
}
