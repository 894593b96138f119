//! The forecaster: patch embedding, a stack of attention blocks and a linear
//! head shared by all variables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use crate::attention::Variant;
use crate::attention::{block_forward, AttentionRecord, BlockParams, Ctx};
use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::patching::{patches_from_window, positional_encoding, Embedding, PatchConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch: PatchConfig,
    pub horizon: usize,
    pub blocks: usize,
    pub heads: usize,
    pub variant: Variant,
    pub dropout: f64,
    pub normalize_window: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch: PatchConfig::default(),
            horizon: 96,
            blocks: 2,
            heads: 2,
            variant: Variant::Sensor,
            dropout: 0.1,
            normalize_window: true,
            seed: 2021,
        }
    }
}

impl ModelConfig {
    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.patch.validate() {
            problems.push(e.to_string());
        }
        if self.horizon == 0 {
            problems.push("horizon must be at least 1".to_string());
        }
        if self.blocks == 0 {
            problems.push("blocks must be at least 1".to_string());
        }
        if self.heads == 0 || !self.patch.d_model.is_multiple_of(self.heads) {
            problems.push(format!("{} heads do not divide d_model {}", self.heads, self.patch.d_model));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Per-variable mean and std of one lookback window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl WindowNorm {
    /// Statistics of a time-major `L×D` window; zero-spread variables get std 1.
    pub fn fit(window: &Tensor) -> Self {
        let (l, d) = (window.rows(), window.cols());
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for j in 0..d {
            let m = (0..l).map(|t| window.at(t, j)).sum::<f64>() / l as f64;
            let v = (0..l).map(|t| (window.at(t, j) - m).powi(2)).sum::<f64>() / l as f64;
            mean[j] = m;
            std[j] = if v.sqrt() > 1e-8 { v.sqrt() } else { 1.0 };
        }
        WindowNorm { mean, std }
    }

    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, |v, m, s| v * s + m)
    }

    fn apply(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let d = x.cols();
        if d != self.mean.len() {
            return Err(Error::dim("window norm", x.shape(), &[self.mean.len()]));
        }
        let data = x
            .data()
            .chunks(d)
            .flat_map(|row| (0..d).map(|j| f(row[j], self.mean[j], self.std[j])).collect::<Vec<_>>())
            .collect();
        Tensor::new(x.shape(), data)
    }
}

/// A built forecaster. Parameters live in `store`; the other fields index it.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedding: Embedding,
    pub blocks: Vec<BlockParams>,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
    n_patches: usize,
    pe: Tensor,
}

/// Builds a model with seeded initialisation; the same config always yields
/// bit-identical parameters.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let d = cfg.patch.d_model;
    let n = cfg.patch.n_patches()?;
    let embedding = Embedding::init(&mut store, &cfg.patch, &mut rng)?;
    let blocks = (0..cfg.blocks)
        .map(|b| BlockParams::init(&mut store, &format!("block{b}"), cfg.variant, d, cfg.heads, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let fan_in = n * d;
    let head_weight = store.add_uniform("head.weight", &[fan_in, cfg.horizon], fan_in, &mut rng)?;
    let head_bias = store.add_uniform("head.bias", &[cfg.horizon], fan_in, &mut rng)?;
    Ok(Model {
        config: cfg.clone(),
        store,
        embedding,
        blocks,
        head_weight,
        head_bias,
        n_patches: n,
        pe: positional_encoding(n, d)?,
    })
}

impl Model {
    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    /// Number of scalar parameters; depends on the config only.
    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.rows() != self.config.patch.lookback {
            return Err(Error::dim("forward input", x.shape(), &[self.config.patch.lookback]));
        }
        if !x.all_finite() {
            return Err(Error::Numeric("non-finite value in lookback window".into()));
        }
        Ok(())
    }

    /// Records the forward pass on `g` and returns the `H×D` prediction in
    /// the scale of `x_his`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<'_>,
        x_his: &Tensor,
        variant: Variant,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        self.check_input(x_his)?;
        let norm = self.config.normalize_window.then(|| WindowNorm::fit(x_his));
        let window = match &norm {
            Some(n) => n.normalize(x_his)?,
            None => x_his.clone(),
        };
        let patches = patches_from_window(&window, &self.config.patch)?;
        let (mut tokens, dims) = self.embedding.forward(g, &patches, &self.pe)?;
        for (b, block) in self.blocks.iter().enumerate() {
            ctx.set_label(format!("block{b}."));
            tokens = block_forward(g, variant, tokens, dims, block, ctx)?;
        }
        ctx.set_label("");
        let per_var = g.reshape(tokens, &[dims.n_vars, dims.n_patches * dims.d_model])?;
        let (w, b) = (g.param(self.head_weight)?, g.param(self.head_bias)?);
        let out = g.linear(per_var, w, Some(b))?;
        let out = g.transpose(out)?;
        match &norm {
            Some(n) => g.col_scale_shift(out, &n.std, &n.mean),
            None => Ok(out),
        }
    }

    /// Inference forecast, `H×D`.
    pub fn forward(&self, x_his: &Tensor) -> Result<Tensor> {
        self.forward_as(x_his, self.config.variant)
    }

    fn forward_as(&self, x_his: &Tensor, variant: Variant) -> Result<Tensor> {
        let mut g = Graph::with_params(&self.store);
        let out = self.forward_graph(&mut g, x_his, variant, &mut Ctx::eval())?;
        Ok(g.value(out).clone())
    }

    /// Forecast plus every attention matrix computed along the way.
    pub fn forward_with_attention(&self, x_his: &Tensor) -> Result<(Tensor, Vec<AttentionRecord>)> {
        let mut g = Graph::with_params(&self.store);
        let mut ctx = Ctx::capturing();
        let out = self.forward_graph(&mut g, x_his, self.config.variant, &mut ctx)?;
        Ok((g.value(out).clone(), ctx.take_records()))
    }

    /// Runs the blocks with attention restricted to each variable's own
    /// patches, using the second-stage parameters of every block.
    pub fn channel_independent_forward(&self, x_his: &Tensor) -> Result<Tensor> {
        self.forward_as(x_his, Variant::ChannelIndependent)
    }

    /// Forecasts for a batch of windows; equal to calling [`Model::forward`]
    /// on each.
    pub fn predict_batch(&self, batch: &[WindowSample], exec: Exec) -> Result<Vec<Tensor>> {
        if let Some(first) = batch.first() {
            let shape = first.x_his.shape();
            if batch.iter().any(|s| s.x_his.shape() != shape) {
                return Err(Error::Contract("ragged batch".into()));
            }
        }
        exec.map(batch, |_, s| self.forward(&s.x_his)).into_iter().collect()
    }

    /// Writes config and parameters as checksummed text.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Model::from_checkpoint_str(&text)
    }

    /// Checkpoint layout, one item per line:
    ///
    /// ```text
    /// sensorformer-checkpoint 1
    /// key=value               (config fields)
    /// params=<count>
    /// param <name> <dim,dim,...>
    /// <values, space separated, shortest round-trip form>
    /// ...
    /// checksum=<sha256 of all preceding bytes>
    /// ```
    ///
    /// Parameters appear in build order.
    pub fn to_checkpoint_string(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        s.push_str(CHECKPOINT_MAGIC);
        s.push('\n');
        for (k, v) in [
            ("lookback", c.patch.lookback.to_string()),
            ("patch_len", c.patch.patch_len.to_string()),
            ("stride", c.patch.stride.to_string()),
            ("d_model", c.patch.d_model.to_string()),
            ("horizon", c.horizon.to_string()),
            ("blocks", c.blocks.to_string()),
            ("heads", c.heads.to_string()),
            ("variant", c.variant.to_string()),
            ("dropout", format!("{:e}", c.dropout)),
            ("normalize_window", c.normalize_window.to_string()),
            ("seed", c.seed.to_string()),
            ("params", self.store.len().to_string()),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        for (_, p) in self.store.iter() {
            let dims: Vec<String> = p.tensor.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(s, "param {} {}", p.name, dims.join(","));
            let vals: Vec<String> = p.tensor.data().iter().map(|v| format!("{v:e}")).collect();
            s.push_str(&vals.join(" "));
            s.push('\n');
        }
        let digest = hex(&Sha256::digest(s.as_bytes()));
        let _ = writeln!(s, "checksum={digest}");
        s
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Model> {
        let body_end = text
            .rfind("checksum=")
            .ok_or_else(|| Error::Checkpoint("missing checksum line".into()))?;
        let (body, tail) = text.split_at(body_end);
        let stored = tail.trim_start_matches("checksum=").trim();
        if hex(&Sha256::digest(body.as_bytes())) != stored {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut lines = body.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(Error::Checkpoint("unrecognised header".into()));
        }
        let mut kv = std::collections::HashMap::new();
        for _ in 0..12 {
            let line = lines.next().ok_or_else(|| Error::Checkpoint("truncated config".into()))?;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad config line '{line}'")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Checkpoint(format!("missing key {k}")));
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad value for {k}")))
        };
        let cfg = ModelConfig {
            patch: PatchConfig {
                lookback: num("lookback")?,
                patch_len: num("patch_len")?,
                stride: num("stride")?,
                d_model: num("d_model")?,
            },
            horizon: num("horizon")?,
            blocks: num("blocks")?,
            heads: num("heads")?,
            variant: get("variant")?.parse()?,
            dropout: get("dropout")?.parse().map_err(|_| Error::Checkpoint("bad dropout".into()))?,
            normalize_window: get("normalize_window")?
                .parse()
                .map_err(|_| Error::Checkpoint("bad normalize_window".into()))?,
            seed: get("seed")?.parse().map_err(|_| Error::Checkpoint("bad seed".into()))?,
        };
        let mut model = build_model(&cfg)?;
        if num("params")? != model.store.len() {
            return Err(Error::Checkpoint("parameter count does not match config".into()));
        }
        for p in model.store.iter_mut() {
            let header = lines.next().ok_or_else(|| Error::Checkpoint("truncated parameters".into()))?;
            let mut parts = header.split(' ');
            let (tag, name, dims) = (parts.next(), parts.next(), parts.next());
            if tag != Some("param") || name != Some(p.name.as_str()) {
                return Err(Error::Checkpoint(format!("expected parameter {}, found '{header}'", p.name)));
            }
            let shape: Vec<String> = p.tensor.shape().iter().map(usize::to_string).collect();
            if dims != Some(shape.join(",").as_str()) {
                return Err(Error::Checkpoint(format!("shape mismatch for {}", p.name)));
            }
            let values = lines.next().ok_or_else(|| Error::Checkpoint("truncated values".into()))?;
            let parsed: Vec<f64> = values
                .split(' ')
                .map(|v| v.parse().map_err(|_| Error::Checkpoint(format!("bad number in {}", p.name))))
                .collect::<Result<_>>()?;
            if parsed.len() != p.tensor.numel() {
                return Err(Error::Checkpoint(format!("wrong value count for {}", p.name)));
            }
            p.tensor.data_mut().copy_from_slice(&parsed);
        }
        Ok(model)
    }
}

const CHECKPOINT_MAGIC: &str = "sensorformer-checkpoint 1";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            patch: PatchConfig {
                lookback: 24,
                patch_len: 8,
                stride: 4,
                d_model: 8,
            },
            horizon: 6,
            blocks: 2,
            heads: 2,
            variant,
            dropout: 0.0,
            normalize_window: true,
            seed: 3,
        }
    }

    fn window(l: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[l, d], (0..l * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn default_config_builds_with_ten_patches() {
        let m = build_model(&ModelConfig::default()).unwrap();
        assert_eq!(m.n_patches(), 10);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(&small_cfg(Variant::Sensor)).unwrap();
        let b = build_model(&small_cfg(Variant::Sensor)).unwrap();
        for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(p.tensor, q.tensor);
        }
    }

    #[test]
    fn invalid_config_lists_every_problem() {
        let mut cfg = small_cfg(Variant::Sensor);
        cfg.horizon = 0;
        cfg.blocks = 0;
        cfg.heads = 3;
        let msg = build_model(&cfg).unwrap_err().to_string();
        assert!(msg.contains("horizon") && msg.contains("blocks") && msg.contains("heads"), "{msg}");
    }

    #[test]
    fn output_shape_and_input_checks() {
        let m = build_model(&small_cfg(Variant::Sensor)).unwrap();
        let y = m.forward(&window(24, 5, 1)).unwrap();
        assert_eq!(y.shape(), &[6, 5]);
        assert!(m.forward(&window(20, 5, 1)).is_err());
        let mut bad = window(24, 5, 1);
        bad.data_mut()[3] = f64::NAN;
        assert!(matches!(m.forward(&bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn constant_input_gives_finite_output() {
        for normalize in [true, false] {
            let mut cfg = small_cfg(Variant::Sensor);
            cfg.normalize_window = normalize;
            let m = build_model(&cfg).unwrap();
            let y = m.forward(&Tensor::filled(&[24, 3], 4.0).unwrap()).unwrap();
            assert_eq!(y.shape(), &[6, 3]);
            assert!(y.all_finite());
        }
    }

    #[test]
    fn window_norm_round_trip() {
        let x = window(24, 4, 9);
        let n = WindowNorm::fit(&x);
        let back = n.denormalize(&n.normalize(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
        let flat = Tensor::filled(&[10, 1], 2.0).unwrap();
        assert_eq!(WindowNorm::fit(&flat).std, vec![1.0]);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = build_model(&small_cfg(Variant::PureCross)).unwrap();
        let text = m.to_checkpoint_string();
        let back = Model::from_checkpoint_str(&text).unwrap();
        assert_eq!(back.config, m.config);
        for ((_, p), (_, q)) in m.store.iter().zip(back.store.iter()) {
            assert_eq!(p.tensor.data(), q.tensor.data());
        }
        assert_eq!(back.to_checkpoint_string(), text);
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let m = build_model(&small_cfg(Variant::Sensor)).unwrap();
        let text = m.to_checkpoint_string().replacen("param head.bias", "param head.bias ", 1);
        assert!(matches!(Model::from_checkpoint_str(&text), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn parameter_count_ignores_variable_count() {
        let m = build_model(&small_cfg(Variant::Sensor)).unwrap();
        let count = m.param_count();
        for d in [7, 21, 321] {
            assert!(m.forward(&window(24, d, d as u64)).is_ok());
            assert_eq!(m.param_count(), count);
        }
    }
}
