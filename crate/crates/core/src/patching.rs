//! Patch extraction and token embedding.
//!
//! Each variable's lookback is padded with `stride` copies of its last value,
//! then cut into `N = (L - P) / S + 2` windows of length `P` starting at
//! `j * S`. Patches are mapped to `d_model` tokens by one linear layer shared
//! by every variable and position, plus a sinusoidal positional encoding
//! that depends only on the patch index.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Patch geometry and token width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub lookback: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub d_model: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            lookback: 96,
            patch_len: 32,
            stride: 8,
            d_model: 256,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 || self.patch_len > self.lookback {
            return Err(Error::Config(format!(
                "patch length {} must be in 1..={}",
                self.patch_len, self.lookback
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!("d_model {} must be even and positive", self.d_model)));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> Result<usize> {
        patch_count(self.lookback, self.patch_len, self.stride)
    }
}

/// Number of patches cut from a lookback of length `l`.
pub fn patch_count(l: usize, p: usize, s: usize) -> Result<usize> {
    if p == 0 || p > l {
        return Err(Error::Config(format!("patch length {p} must be in 1..={l}")));
    }
    if s == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    Ok((l - p) / s + 2)
}

/// Appends `s` copies of the last value.
pub fn pad_series(x: &[f64], s: usize) -> Result<Vec<f64>> {
    let last = *x.last().ok_or_else(|| Error::Empty("series to pad".into()))?;
    let mut out = Vec::with_capacity(x.len() + s);
    out.extend_from_slice(x);
    out.extend(std::iter::repeat_n(last, s));
    Ok(out)
}

/// Patches of every variable, shape `D×N×P`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub values: Tensor,
    pub n_patches: usize,
}

impl PatchSet {
    pub fn n_vars(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn patch_len(&self) -> usize {
        self.values.shape()[2]
    }

    /// Values of patch `j` of variable `i`.
    pub fn patch(&self, i: usize, j: usize) -> &[f64] {
        self.values.row(i * self.n_patches + j)
    }
}

/// Cuts a variable-major `D×L` series into patches.
pub fn extract_patches(series: &Tensor, cfg: &PatchConfig) -> Result<PatchSet> {
    if series.shape().len() != 2 {
        return Err(Error::dim("extract_patches", series.shape(), &[2]));
    }
    let (d, l) = (series.shape()[0], series.shape()[1]);
    if l != cfg.lookback {
        return Err(Error::dim("extract_patches", series.shape(), &[d, cfg.lookback]));
    }
    let n = patch_count(l, cfg.patch_len, cfg.stride)?;
    let p = cfg.patch_len;
    let mut out = Vec::with_capacity(d * n * p);
    for i in 0..d {
        let padded = pad_series(series.row(i), cfg.stride)?;
        for j in 0..n {
            let start = j * cfg.stride;
            out.extend_from_slice(&padded[start..start + p]);
        }
    }
    Ok(PatchSet {
        values: Tensor::new(&[d, n, p], out)?,
        n_patches: n,
    })
}

/// Same as [`extract_patches`] for a time-major `L×D` window.
pub fn patches_from_window(window: &Tensor, cfg: &PatchConfig) -> Result<PatchSet> {
    extract_patches(&window.transpose()?, cfg)
}

/// Sinusoidal encoding, `N×d_model`.
pub fn positional_encoding(n: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::Config(format!("d_model {d_model} must be even and positive")));
    }
    let mut out = vec![0.0; n * d_model];
    for pos in 0..n {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            out[pos * d_model + 2 * i] = angle.sin();
            out[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(&[n, d_model], out)
}

/// Embedded tokens, `D×N×d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct EPatches {
    pub tokens: Tensor,
}

impl EPatches {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.shape().len() != 3 {
            return Err(Error::dim("EPatches", tokens.shape(), &[3]));
        }
        Ok(EPatches { tokens })
    }

    pub fn dims(&self) -> TokenDims {
        let s = self.tokens.shape();
        TokenDims {
            n_vars: s[0],
            n_patches: s[1],
            d_model: s[2],
        }
    }

    /// Flattened `(D·N)×d_model` copy, row index `i·N + j`.
    pub fn flat(&self) -> Tensor {
        let d = self.dims();
        self.tokens
            .clone()
            .reshape(&[d.n_vars * d.n_patches, d.d_model])
            .expect("same element count")
    }
}

/// Layout of a flattened token matrix on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenDims {
    pub n_vars: usize,
    pub n_patches: usize,
    pub d_model: usize,
}

impl TokenDims {
    pub fn rows(&self) -> usize {
        self.n_vars * self.n_patches
    }
}

/// Shared patch embedding: `P×d_model` weight and bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Embedding {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Embedding {
    pub fn init(store: &mut ParamStore, cfg: &PatchConfig, rng: &mut impl Rng) -> Result<Self> {
        let p = cfg.patch_len;
        Ok(Embedding {
            weight: store.add_uniform("embed.weight", &[p, cfg.d_model], p, rng)?,
            bias: store.add_uniform("embed.bias", &[cfg.d_model], p, rng)?,
        })
    }

    /// Embeds a patch set onto the tape as a `(D·N)×d_model` matrix.
    pub fn forward(&self, g: &mut Graph<'_>, patches: &PatchSet, pe: &Tensor) -> Result<(Var, TokenDims)> {
        let (d, n, p) = (patches.n_vars(), patches.n_patches, patches.patch_len());
        let w = g.param(self.weight)?;
        let d_model = g.value(w).cols();
        if g.value(w).rows() != p {
            return Err(Error::dim("embed_patches", patches.values.shape(), g.shape(w)));
        }
        if pe.shape() != [n, d_model] {
            return Err(Error::dim("embed_patches", pe.shape(), &[n, d_model]));
        }
        let x = g.constant(patches.values.clone().reshape(&[d * n, p])?);
        let b = g.param(self.bias)?;
        let y = g.linear(x, w, Some(b))?;
        let mut tiled = Vec::with_capacity(d * n * d_model);
        for _ in 0..d {
            tiled.extend_from_slice(pe.data());
        }
        let y = g.add_const(y, &Tensor::new(&[d * n, d_model], tiled)?)?;
        Ok((
            y,
            TokenDims {
                n_vars: d,
                n_patches: n,
                d_model,
            },
        ))
    }
}

/// Eager embedding: `tokens[i, j, :] = patches[i, j, :] · W + b + pe[j, :]`.
pub fn embed_patches(store: &ParamStore, emb: &Embedding, patches: &PatchSet) -> Result<EPatches> {
    let d_model = store.get(emb.weight).tensor.cols();
    let pe = positional_encoding(patches.n_patches, d_model)?;
    let mut g = Graph::with_params(store);
    let (y, dims) = emb.forward(&mut g, patches, &pe)?;
    EPatches::new(g.value(y).clone().reshape(&[dims.n_vars, dims.n_patches, d_model])?)
}
