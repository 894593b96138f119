//! Scalar reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sensorformer::attention::{MhaParams, MlpParams, NormParams, StageParams};
use sensorformer::numerics::{ParamId, ParamStore, Tensor};

pub type Rows = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rows(r: usize, c: usize, rng: &mut impl Rng) -> Rows {
    (0..r).map(|_| (0..c).map(|_| rng.random_range(-1.5..1.5)).collect()).collect()
}

pub fn to_tensor(rows: &Rows) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

pub fn to_rows(t: &Tensor) -> Rows {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn max_diff(a: &Rows, b: &Rows) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

fn weights(store: &ParamStore, id: ParamId) -> Rows {
    let t = &store.get(id).tensor;
    if t.shape().len() == 1 {
        vec![t.data().to_vec()]
    } else {
        to_rows(t)
    }
}

pub fn matmul(a: &Rows, b: &Rows) -> Rows {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

/// `softmax(q·kᵀ / √d)·v` with `d` the column count of `q`.
pub fn naive_attention(q: &Rows, k: &Rows, v: &Rows) -> Rows {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len())
                .map(|c| e.iter().zip(v).map(|(w, vj)| w / z * vj[c]).sum())
                .collect()
        })
        .collect()
}

fn columns(x: &Rows, c0: usize, c1: usize) -> Rows {
    x.iter().map(|r| r[c0..c1].to_vec()).collect()
}

pub fn mha(store: &ParamStore, p: &MhaParams, q: &Rows, kv: &Rows) -> Rows {
    let d = q[0].len();
    let dh = d / p.heads;
    let qp = matmul(q, &weights(store, p.wq));
    let kp = matmul(kv, &weights(store, p.wk));
    let vp = matmul(kv, &weights(store, p.wv));
    let mut cat = vec![Vec::with_capacity(d); q.len()];
    for h in 0..p.heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let head = naive_attention(&columns(&qp, c0, c1), &columns(&kp, c0, c1), &columns(&vp, c0, c1));
        for (row, part) in cat.iter_mut().zip(head) {
            row.extend(part);
        }
    }
    matmul(&cat, &weights(store, p.wo))
}

pub fn layer_norm(store: &ParamStore, p: &NormParams, x: &Rows) -> Rows {
    let gamma = &weights(store, p.gamma)[0];
    let beta = &weights(store, p.beta)[0];
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            r.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) * inv * gamma[c] + beta[c])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn mlp(store: &ParamStore, p: &MlpParams, x: &Rows) -> Rows {
    let b1 = &weights(store, p.b1)[0];
    let b2 = &weights(store, p.b2)[0];
    let h: Rows = matmul(x, &weights(store, p.w1))
        .into_iter()
        .map(|r| r.iter().zip(b1).map(|(v, b)| gelu(v + b)).collect())
        .collect();
    matmul(&h, &weights(store, p.w2))
        .into_iter()
        .map(|r| r.iter().zip(b2).map(|(v, b)| v + b).collect())
        .collect()
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// `Z = LN(Q + MHA(Q, KV, KV))`; output `LN(Z + MLP(Z))`.
pub fn stage(store: &ParamStore, p: &StageParams, q: &Rows, kv: &Rows) -> Rows {
    let z = layer_norm(store, &p.norm1, &add(q, &mha(store, &p.mha, q, kv)));
    layer_norm(store, &p.norm2, &add(&z, &mlp(store, &p.mlp, &z)))
}

/// First stage on `tokens[i][j]` (variable `i`, patch `j`): the last patch of
/// every variable queries all patches.
pub fn stage1(store: &ParamStore, p: &StageParams, tokens: &[Rows]) -> Rows {
    let query: Rows = tokens.iter().map(|var| var.last().unwrap().clone()).collect();
    let kv: Rows = tokens.iter().flatten().cloned().collect();
    stage(store, p, &query, &kv)
}

/// Second stage: every patch queries the sensor rows.
pub fn stage2(store: &ParamStore, p: &StageParams, tokens: &[Rows], sensor: &Rows) -> Rows {
    let query: Rows = tokens.iter().flatten().cloned().collect();
    stage(store, p, &query, sensor)
}
