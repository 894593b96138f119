mod common;

use proptest::prelude::*;
use sensorformer::data::{load_csv, make_windows, window_count, write_csv, MultivariateSeries};
use sensorformer::exec::Exec;
use sensorformer::laglab::{lag_stats, pearson};
use sensorformer::model::{build_model, ModelConfig, Variant};
use sensorformer::numerics::{softmax_rows, Tensor};
use sensorformer::patching::PatchConfig;
use sensorformer::training::{mae, mse};

use common::{random_rows, rng, to_tensor};

fn small_config(variant: Variant, seed: u64) -> ModelConfig {
    ModelConfig {
        patch: PatchConfig {
            lookback: 32,
            patch_len: 8,
            stride: 4,
            d_model: 8,
        },
        horizon: 6,
        blocks: 2,
        heads: 2,
        variant,
        dropout: 0.1,
        normalize_window: true,
        seed,
    }
}

fn random_window(l: usize, d: usize, seed: u64) -> Tensor {
    to_tensor(&random_rows(l, d, &mut rng(seed)))
}

fn permute_cols(x: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..x.rows()).map(|r| perm.iter().map(|&c| x.row(r)[c]).collect()).collect();
    to_tensor(&rows)
}

fn series(rows: &[Vec<f64>]) -> MultivariateSeries {
    let names = (0..rows[0].len()).map(|j| format!("v{j}")).collect();
    MultivariateSeries::new(names, to_tensor(&rows.to_vec()), None).unwrap()
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pearson_is_symmetric_and_scale_free(
        a in prop::collection::vec(-10.0f64..10.0, 8),
        b in prop::collection::vec(-10.0f64..10.0, 8),
        s in 0.1f64..20.0,
        t in -50.0f64..50.0,
    ) {
        let r = pearson(&a, &b).unwrap();
        prop_assert!((r - pearson(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        let scaled: Vec<f64> = a.iter().map(|v| s * v + t).collect();
        prop_assert!((r - pearson(&scaled, &b).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in prop::collection::vec(prop::collection::vec(-300.0f64..300.0, 5), 1..6)) {
        let p = softmax_rows(&to_tensor(&rows)).unwrap();
        for i in 0..p.rows() {
            prop_assert!(p.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lag_stats_ignore_positive_affine_rescaling(
        seed in 0u64..1000,
        scales in prop::collection::vec(0.5f64..3.0, 3),
        shifts in prop::collection::vec(-5.0f64..5.0, 3),
    ) {
        let cfg = PatchConfig { lookback: 48, patch_len: 8, stride: 8, d_model: 8 };
        let x = random_window(48, 3, seed);
        let rows: Vec<Vec<f64>> = (0..48)
            .map(|r| (0..3).map(|c| scales[c] * x.row(r)[c] + shifts[c]).collect())
            .collect();
        let (p0, d0) = lag_stats(&x, &cfg).unwrap();
        let (p1, d1) = lag_stats(&to_tensor(&rows), &cfg).unwrap();
        prop_assert_eq!(p0, p1);
        prop_assert_eq!(d0, d1);
        prop_assert!((0.0..=1.0).contains(&p0));
    }

    #[test]
    fn metrics_are_shift_invariant_and_ordered(
        a in prop::collection::vec(-5.0f64..5.0, 12),
        b in prop::collection::vec(-5.0f64..5.0, 12),
        t in -100.0f64..100.0,
    ) {
        let pa = Tensor::new(&[4, 3], a.clone()).unwrap();
        let pb = Tensor::new(&[4, 3], b.clone()).unwrap();
        let sa = Tensor::new(&[4, 3], a.iter().map(|v| v + t).collect()).unwrap();
        let sb = Tensor::new(&[4, 3], b.iter().map(|v| v + t).collect()).unwrap();
        let (m, e) = (mse(&pa, &pb).unwrap(), mae(&pa, &pb).unwrap());
        prop_assert!((m - mse(&sa, &sb).unwrap()).abs() < 1e-9 * (1.0 + m));
        prop_assert!((e - mae(&sa, &sb).unwrap()).abs() < 1e-9 * (1.0 + e));
        prop_assert!(e * e <= m + 1e-12);
    }

    #[test]
    fn windows_line_up_with_rows(rows in 20usize..60, l in 1usize..10, h in 1usize..8, stride in 1usize..5) {
        let data: Vec<Vec<f64>> = (0..rows).map(|r| vec![r as f64, -(r as f64)]).collect();
        let w = make_windows(&series(&data), l, h, stride).unwrap();
        let count = window_count(rows, l, h).unwrap();
        prop_assert_eq!(count, rows - l - h + 1);
        prop_assert_eq!(w.len(), count.div_ceil(stride));
        for s in &w {
            prop_assert_eq!(s.x_his.row(0)[0], s.start as f64);
            prop_assert_eq!(s.x_future.row(0)[0], (s.start + l) as f64);
            prop_assert_eq!(s.x_future.row(h - 1)[1], -((s.start + l + h - 1) as f64));
        }
    }

    #[test]
    fn csv_round_trip_is_exact(values in prop::collection::vec(prop::num::f64::NORMAL, 12)) {
        let rows: Vec<Vec<f64>> = values.chunks(3).map(|c| c.to_vec()).collect();
        let s = series(&rows);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        write_csv(&s, &path).unwrap();
        let back = load_csv(&path).unwrap();
        prop_assert_eq!(back.names, s.names);
        prop_assert_eq!(back.values.data(), s.values.data());
    }
}

#[test]
fn forecasts_follow_a_permutation_of_variables() {
    let model = build_model(&small_config(Variant::Sensor, 5)).unwrap();
    let x = random_window(32, 4, 9);
    let perm = [2, 0, 3, 1];
    let y = model.forward(&x).unwrap();
    let yp = model.forward(&permute_cols(&x, &perm)).unwrap();
    assert!(close(&yp, &permute_cols(&y, &perm), 1e-10));
}

#[test]
fn window_normalisation_makes_forecasts_affine_equivariant() {
    let model = build_model(&small_config(Variant::Sensor, 6)).unwrap();
    let x = random_window(32, 3, 10);
    let (a, b) = (3.5, -12.0);
    let shifted = Tensor::new(x.shape(), x.data().iter().map(|v| a * v + b).collect()).unwrap();
    let y = model.forward(&x).unwrap();
    let expected = Tensor::new(y.shape(), y.data().iter().map(|v| a * v + b).collect()).unwrap();
    assert!(close(&model.forward(&shifted).unwrap(), &expected, 1e-9));
}

#[test]
fn batch_prediction_matches_single_forecasts() {
    let model = build_model(&small_config(Variant::Sensor, 7)).unwrap();
    let rows = random_rows(80, 3, &mut rng(11));
    let windows = make_windows(&series(&rows), 32, 6, 5).unwrap();
    for exec in [Exec::Sequential, Exec::Parallel] {
        let batch = model.predict_batch(&windows, exec).unwrap();
        assert_eq!(batch.len(), windows.len());
        for (p, w) in batch.iter().zip(&windows) {
            assert_eq!(p.data(), model.forward(&w.x_his).unwrap().data());
        }
    }
}

#[test]
fn single_variable_cross_attention_is_channel_independent() {
    let model = build_model(&small_config(Variant::PureCross, 8)).unwrap();
    let x = random_window(32, 1, 12);
    assert!(close(&model.forward(&x).unwrap(), &model.channel_independent_forward(&x).unwrap(), 1e-12));
}

#[test]
fn variants_share_shapes_but_not_values() {
    let x = random_window(32, 3, 13);
    let outs: Vec<Tensor> = Variant::ALL
        .iter()
        .map(|&v| build_model(&small_config(v, 14)).unwrap().forward(&x).unwrap())
        .collect();
    for o in &outs {
        assert_eq!(o.shape(), &[6, 3]);
    }
    assert!(!close(&outs[0], &outs[1], 1e-6));
}
