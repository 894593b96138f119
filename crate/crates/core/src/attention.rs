//! Multi-head attention and the sensor attention block.
//!
//! Stage one uses the last patch token of each variable as queries against
//! every token of every variable, producing one compressed "sensor" vector
//! per variable. Stage two lets every token query those `D` sensor vectors.
//! Both stages are `LayerNorm(x + MHA(x, kv, kv))` followed by
//! `LayerNorm(z + MLP(z))`.
//!
//! Ablations share the same stage structure:
//! - pure cross-patch: every token attends to every token (one stage)
//! - sensor only: stage one, then each sensor vector is repeated `N` times
//! - channel independent: every token attends to its own variable's tokens

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::patching::{EPatches, TokenDims};

pub const LN_EPS: f64 = 1e-5;

/// Which block structure the model stacks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Sensor,
    PureCross,
    SensorOnly,
    ChannelIndependent,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Sensor,
        Variant::PureCross,
        Variant::SensorOnly,
        Variant::ChannelIndependent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sensor => "sensor",
            Variant::PureCross => "pure_cross",
            Variant::SensorOnly => "sensor_only",
            Variant::ChannelIndependent => "channel_independent",
        }
    }

    fn has_stage1(self) -> bool {
        matches!(self, Variant::Sensor | Variant::SensorOnly)
    }

    fn has_stage2(self) -> bool {
        !matches!(self, Variant::SensorOnly)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sensor" | "full" => Ok(Variant::Sensor),
            "pure_cross" | "pure" => Ok(Variant::PureCross),
            "sensor_only" => Ok(Variant::SensorOnly),
            "channel_independent" | "ci" => Ok(Variant::ChannelIndependent),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

/// Projection weights of one multi-head attention module. Head `h` uses
/// columns `h·d_head..(h+1)·d_head` of the query, key and value projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MhaParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

impl MhaParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide d_model {d_model}")));
        }
        let sq = [d_model, d_model];
        Ok(MhaParams {
            wq: store.add_uniform(format!("{prefix}.wq"), &sq, d_model, rng)?,
            wk: store.add_uniform(format!("{prefix}.wk"), &sq, d_model, rng)?,
            wv: store.add_uniform(format!("{prefix}.wv"), &sq, d_model, rng)?,
            wo: store.add_uniform(format!("{prefix}.wo"), &sq, d_model, rng)?,
            heads,
        })
    }
}

/// Two-layer GELU perceptron with hidden width `2·d_model`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MlpParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d_model: usize, rng: &mut impl Rng) -> Result<Self> {
        let hidden = 2 * d_model;
        Ok(MlpParams {
            w1: store.add_uniform(format!("{prefix}.w1"), &[d_model, hidden], d_model, rng)?,
            b1: store.add_uniform(format!("{prefix}.b1"), &[hidden], d_model, rng)?,
            w2: store.add_uniform(format!("{prefix}.w2"), &[hidden, d_model], hidden, rng)?,
            b2: store.add_uniform(format!("{prefix}.b2"), &[d_model], hidden, rng)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d_model: usize) -> Result<Self> {
        Ok(NormParams {
            gamma: store.add_filled(format!("{prefix}.gamma"), &[d_model], 1.0)?,
            beta: store.add_filled(format!("{prefix}.beta"), &[d_model], 0.0)?,
        })
    }
}

/// One attention stage: MHA, residual norm, MLP, residual norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageParams {
    pub mha: MhaParams,
    pub mlp: MlpParams,
    pub norm1: NormParams,
    pub norm2: NormParams,
}

impl StageParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(StageParams {
            mha: MhaParams::init(store, &format!("{prefix}.mha"), d_model, heads, rng)?,
            mlp: MlpParams::init(store, &format!("{prefix}.mlp"), d_model, rng)?,
            norm1: NormParams::init(store, &format!("{prefix}.norm1"), d_model)?,
            norm2: NormParams::init(store, &format!("{prefix}.norm2"), d_model)?,
        })
    }
}

/// Parameters of one block. Pure cross-patch and channel-independent blocks
/// only carry `stage2`; sensor-only blocks only carry `stage1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockParams {
    pub stage1: Option<StageParams>,
    pub stage2: Option<StageParams>,
}

impl BlockParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        variant: Variant,
        d_model: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let stage1 = if variant.has_stage1() {
            Some(StageParams::init(store, &format!("{prefix}.stage1"), d_model, heads, rng)?)
        } else {
            None
        };
        let stage2 = if variant.has_stage2() {
            Some(StageParams::init(store, &format!("{prefix}.stage2"), d_model, heads, rng)?)
        } else {
            None
        };
        Ok(BlockParams { stage1, stage2 })
    }

    fn stage1(&self) -> Result<&StageParams> {
        self.stage1
            .as_ref()
            .ok_or_else(|| Error::Contract("block has no first-stage parameters".into()))
    }

    fn stage2(&self) -> Result<&StageParams> {
        self.stage2
            .as_ref()
            .ok_or_else(|| Error::Contract("block has no second-stage parameters".into()))
    }
}

/// Attention weights of one head, kept for inspection.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub label: String,
    pub head: usize,
    pub weights: Tensor,
}

/// Per-forward state: dropout source and optional weight capture.
pub struct Ctx {
    dropout: f64,
    rng: Option<ChaCha8Rng>,
    capture: Option<Vec<AttentionRecord>>,
    label: String,
}

impl Ctx {
    /// Inference: no dropout, nothing captured.
    pub fn eval() -> Self {
        Ctx {
            dropout: 0.0,
            rng: None,
            capture: None,
            label: String::new(),
        }
    }

    pub fn train(dropout: f64, rng: ChaCha8Rng) -> Self {
        Ctx {
            dropout,
            rng: Some(rng),
            capture: None,
            label: String::new(),
        }
    }

    /// Inference that records every attention matrix.
    pub fn capturing() -> Self {
        Ctx {
            capture: Some(Vec::new()),
            ..Ctx::eval()
        }
    }

    pub fn set_label(&mut self, label: impl Into<String>) {
        self.label = label.into();
    }

    pub fn take_records(&mut self) -> Vec<AttentionRecord> {
        self.capture.take().unwrap_or_default()
    }

    fn dropout(&mut self, g: &mut Graph<'_>, x: Var) -> Var {
        match &mut self.rng {
            Some(rng) if self.dropout > 0.0 => g.dropout(x, self.dropout, rng),
            _ => x,
        }
    }
}

/// Multi-head attention. Per head, `softmax(Q·Kᵀ/√d_head)·V` on projected
/// inputs; heads are concatenated and mapped back by `W_O`.
pub fn mha(g: &mut Graph<'_>, query: Var, key: Var, value: Var, p: &MhaParams, ctx: &mut Ctx) -> Result<Var> {
    let d = g.value(query).cols();
    if g.value(key).rows() != g.value(value).rows() {
        return Err(Error::dim("mha key/value", g.shape(key), g.shape(value)));
    }
    if g.value(key).cols() != d || g.value(value).cols() != d {
        return Err(Error::dim("mha", g.shape(query), g.shape(key)));
    }
    if p.heads == 0 || !d.is_multiple_of(p.heads) {
        return Err(Error::Config(format!("{} heads do not divide d_model {d}", p.heads)));
    }
    let dh = d / p.heads;
    let (wq, wk, wv, wo) = (g.param(p.wq)?, g.param(p.wk)?, g.param(p.wv)?, g.param(p.wo)?);
    let qp = g.matmul(query, wq)?;
    let kp = g.matmul(key, wk)?;
    let vp = g.matmul(value, wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (qp, kp, vp)
        } else {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            (g.slice_cols(qp, c0, c1)?, g.slice_cols(kp, c0, c1)?, g.slice_cols(vp, c0, c1)?)
        };
        let scores = g.matmul_nt(qh, kh, scale)?;
        let w = g.softmax_rows(scores)?;
        if let Some(records) = &mut ctx.capture {
            records.push(AttentionRecord {
                label: ctx.label.clone(),
                head: h,
                weights: g.value(w).clone(),
            });
        }
        let w = ctx.dropout(g, w);
        outs.push(g.matmul(w, vh)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    g.matmul(cat, wo)
}

fn mlp(g: &mut Graph<'_>, x: Var, p: &MlpParams, ctx: &mut Ctx) -> Result<Var> {
    let (w1, b1, w2, b2) = (g.param(p.w1)?, g.param(p.b1)?, g.param(p.w2)?, g.param(p.b2)?);
    let h = g.linear(x, w1, Some(b1))?;
    let h = g.gelu(h);
    let o = g.linear(h, w2, Some(b2))?;
    Ok(ctx.dropout(g, o))
}

fn norm(g: &mut Graph<'_>, x: Var, p: &NormParams) -> Result<Var> {
    let (gamma, beta) = (g.param(p.gamma)?, g.param(p.beta)?);
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// `Z = LN(Q + MHA(Q, KV, KV))`, then `LN(Z + MLP(Z))`.
pub fn attend(g: &mut Graph<'_>, query: Var, kv: Var, p: &StageParams, ctx: &mut Ctx) -> Result<Var> {
    let a = mha(g, query, kv, kv, &p.mha, ctx)?;
    let r = g.add(query, a)?;
    let z = norm(g, r, &p.norm1)?;
    let m = mlp(g, z, &p.mlp, ctx)?;
    let r = g.add(z, m)?;
    norm(g, r, &p.norm2)
}

fn check_tokens(g: &Graph<'_>, tokens: Var, dims: TokenDims) -> Result<()> {
    if g.shape(tokens) != [dims.rows(), dims.d_model] {
        return Err(Error::dim("tokens", g.shape(tokens), &[dims.rows(), dims.d_model]));
    }
    Ok(())
}

/// First stage: the last token of each variable queries all `D·N` tokens.
/// Returns the `D×d_model` sensor.
pub fn stage1_compress(g: &mut Graph<'_>, tokens: Var, dims: TokenDims, p: &StageParams, ctx: &mut Ctx) -> Result<Var> {
    check_tokens(g, tokens, dims)?;
    let n = dims.n_patches;
    let last: Vec<usize> = (0..dims.n_vars).map(|i| i * n + n - 1).collect();
    let query = g.gather_rows(tokens, &last)?;
    attend(g, query, tokens, p, ctx)
}

/// Second stage: every token queries the `D` sensor vectors.
pub fn stage2_expand(
    g: &mut Graph<'_>,
    tokens: Var,
    sensor: Var,
    dims: TokenDims,
    p: &StageParams,
    ctx: &mut Ctx,
) -> Result<Var> {
    check_tokens(g, tokens, dims)?;
    if g.shape(sensor) != [dims.n_vars, dims.d_model] {
        return Err(Error::dim("stage2 sensor", g.shape(sensor), &[dims.n_vars, dims.d_model]));
    }
    attend(g, tokens, sensor, p, ctx)
}

/// Runs one block of the given variant on `(D·N)×d_model` tokens.
pub fn block_forward(
    g: &mut Graph<'_>,
    variant: Variant,
    tokens: Var,
    dims: TokenDims,
    block: &BlockParams,
    ctx: &mut Ctx,
) -> Result<Var> {
    check_tokens(g, tokens, dims)?;
    let base = ctx.label.clone();
    let with_label = |ctx: &mut Ctx, stage: &str| ctx.set_label(format!("{base}{stage}"));
    let out = match variant {
        Variant::Sensor => {
            with_label(ctx, "stage1");
            let sensor = stage1_compress(g, tokens, dims, block.stage1()?, ctx)?;
            with_label(ctx, "stage2");
            stage2_expand(g, tokens, sensor, dims, block.stage2()?, ctx)?
        }
        Variant::PureCross => {
            with_label(ctx, "pure_cross");
            attend(g, tokens, tokens, block.stage2()?, ctx)?
        }
        Variant::SensorOnly => {
            with_label(ctx, "stage1");
            let sensor = stage1_compress(g, tokens, dims, block.stage1()?, ctx)?;
            let idx: Vec<usize> = (0..dims.n_vars)
                .flat_map(|i| std::iter::repeat_n(i, dims.n_patches))
                .collect();
            g.gather_rows(sensor, &idx)?
        }
        Variant::ChannelIndependent => {
            let n = dims.n_patches;
            let mut parts = Vec::with_capacity(dims.n_vars);
            for i in 0..dims.n_vars {
                with_label(ctx, &format!("channel{i}"));
                let idx: Vec<usize> = (i * n..(i + 1) * n).collect();
                let own = g.gather_rows(tokens, &idx)?;
                parts.push(attend(g, own, own, block.stage2()?, ctx)?);
            }
            g.concat_rows(&parts)?
        }
    };
    ctx.set_label(base);
    Ok(out)
}

/// Compressed per-variable representation, `D×d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sensor {
    pub vectors: Tensor,
}

/// Eager multi-head attention on plain tensors.
pub fn mha_eval(store: &ParamStore, p: &MhaParams, query: &Tensor, key: &Tensor, value: &Tensor) -> Result<Tensor> {
    let mut g = Graph::with_params(store);
    let (q, k, v) = (g.constant(query.clone()), g.constant(key.clone()), g.constant(value.clone()));
    let out = mha(&mut g, q, k, v, p, &mut Ctx::eval())?;
    Ok(g.value(out).clone())
}

/// Eager first stage.
pub fn stage1_eval(store: &ParamStore, p: &StageParams, e: &EPatches) -> Result<Sensor> {
    let dims = e.dims();
    let mut g = Graph::with_params(store);
    let t = g.constant(e.flat());
    let s = stage1_compress(&mut g, t, dims, p, &mut Ctx::eval())?;
    Ok(Sensor {
        vectors: g.value(s).clone(),
    })
}

/// Eager second stage.
pub fn stage2_eval(store: &ParamStore, p: &StageParams, e: &EPatches, sensor: &Sensor) -> Result<EPatches> {
    let dims = e.dims();
    let mut g = Graph::with_params(store);
    let t = g.constant(e.flat());
    let s = g.constant(sensor.vectors.clone());
    let out = stage2_expand(&mut g, t, s, dims, p, &mut Ctx::eval())?;
    EPatches::new(g.value(out).clone().reshape(e.tokens.shape())?)
}

/// Eager block of any variant.
pub fn block_eval(store: &ParamStore, variant: Variant, block: &BlockParams, e: &EPatches) -> Result<EPatches> {
    let dims = e.dims();
    let mut g = Graph::with_params(store);
    let t = g.constant(e.flat());
    let out = block_forward(&mut g, variant, t, dims, block, &mut Ctx::eval())?;
    EPatches::new(g.value(out).clone().reshape(e.tokens.shape())?)
}

/// Multiply-add counts of one block, by component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct FlopBreakdown {
    /// Q, K, V and output projections.
    pub projections: u64,
    /// `Q·Kᵀ` across all heads.
    pub scores: u64,
    /// Attention-weighted sum of values across all heads.
    pub mix: u64,
    pub mlp: u64,
}

impl FlopBreakdown {
    /// Score and mix terms, the part whose growth distinguishes the variants.
    pub fn attention_core(&self) -> u64 {
        self.scores + self.mix
    }

    pub fn total(&self) -> u64 {
        self.projections + self.scores + self.mix + self.mlp
    }

    fn add_stage(&mut self, queries: u64, keys: u64, d: u64) {
        self.projections += 2 * queries * d * d + 2 * keys * d * d;
        self.scores += queries * keys * d;
        self.mix += queries * keys * d;
        self.mlp += 4 * queries * d * d;
    }
}

/// Closed-form multiply-add count of one block. Head count does not change
/// the total since each head works on `d_model / heads` columns.
pub fn flop_estimate(variant: Variant, n_vars: usize, n_patches: usize, d_model: usize, heads: usize) -> Result<FlopBreakdown> {
    if heads == 0 || !d_model.is_multiple_of(heads) {
        return Err(Error::Config(format!("{heads} heads do not divide d_model {d_model}")));
    }
    let (dv, n, d) = (n_vars as u64, n_patches as u64, d_model as u64);
    let mut f = FlopBreakdown::default();
    match variant {
        Variant::Sensor => {
            f.add_stage(dv, dv * n, d);
            f.add_stage(dv * n, dv, d);
        }
        Variant::PureCross => f.add_stage(dv * n, dv * n, d),
        Variant::SensorOnly => f.add_stage(dv, dv * n, d),
        Variant::ChannelIndependent => {
            for _ in 0..dv {
                f.add_stage(n, n, d);
            }
        }
    }
    Ok(f)
}

/// Writes each record as a `query×key` matrix to `<dir>/<label>_head<h>.csv`.
pub fn write_attention_csvs(dir: &Path, records: &[AttentionRecord]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(records.len());
    for (k, r) in records.iter().enumerate() {
        let label = if r.label.is_empty() { format!("attn{k}") } else { r.label.replace('.', "_") };
        let path = dir.join(format!("{label}_head{}.csv", r.head));
        let mut w = csv::Writer::from_path(&path)?;
        let cols = r.weights.cols();
        w.write_record((0..cols).map(|c| format!("k{c}")))?;
        for q in 0..r.weights.rows() {
            w.write_record(r.weights.row(q).iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
