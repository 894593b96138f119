//! Flat `key=value` run configuration with command-line overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sensorformer::model::{ModelConfig, Variant};
use sensorformer::patching::PatchConfig;
use sensorformer::training::TrainConfig;

pub const OUT_ENV: &str = "SENSORFORMER_OUT";

pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self> {
                s.trim().parse().map_err(|e| anyhow::anyhow!("'{s}': {e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(usize, u64, f64, bool, String, Variant);

impl ConfigValue for Option<PathBuf> {
    fn parse_value(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok((!s.is_empty()).then(|| PathBuf::from(s)))
    }
    fn render(&self) -> String {
        self.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
    }
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse_value(s: &str) -> Result<Self> {
        s.split(',').map(str::trim).filter(|v| !v.is_empty()).map(T::parse_value).collect()
    }
    fn render(&self) -> String {
        self.iter().map(ConfigValue::render).collect::<Vec<_>>().join(",")
    }
}

macro_rules! run_config {
    ($( #[doc = $doc:expr] $field:ident : $ty:ty = $default:expr ; )*) => {
        /// Every setting of every subcommand.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( #[doc = $doc] pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $( $field: $default, )* }
            }
        }

        impl RunConfig {
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key.trim().replace('-', "_").as_str() {
                    $( stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse_value(value)
                            .with_context(|| format!("invalid value for {key}"))?;
                    } )*
                    other => bail!("unknown config key '{other}'"),
                }
                Ok(())
            }

            /// All keys in declaration order, one `key=value` per line.
            pub fn to_kv(&self) -> String {
                let mut s = String::new();
                $( let _ = writeln!(s, "{}={}", stringify!($field), self.$field.render()); )*
                s
            }
        }

        /// Overrides for any config key; unset flags keep the file or default value.
        #[derive(clap::Args, Clone, Debug, Default)]
        pub struct Overrides {
            $( #[doc = $doc] #[arg(long, value_name = "VALUE")] pub $field: Option<String>, )*
        }

        impl Overrides {
            pub fn pairs(&self) -> Vec<(&'static str, &str)> {
                let mut v = Vec::new();
                $( if let Some(x) = &self.$field { v.push((stringify!($field), x.as_str())); } )*
                v
            }
        }
    };
}

run_config! {
    /// Input CSV (train, eval, lag, sweep)
    data: Option<PathBuf> = None;
    /// Dataset name selecting fixed split borders; defaults to the file stem
    dataset: String = String::new();
    /// Output root; runs go to <out>/<hash>-s<seed> [default: $SENSORFORMER_OUT or "runs"]
    out: Option<PathBuf> = None;
    /// Lookback window L [default: 96]
    lookback: usize = 96;
    /// Patch length P [default: 32]
    patch_len: usize = 32;
    /// Patch stride S [default: 8]
    stride: usize = 8;
    /// Token width [default: 256]
    d_model: usize = 256;
    /// Forecast horizon H [default: 96]
    horizon: usize = 96;
    /// Attention blocks [default: 2]
    blocks: usize = 2;
    /// Attention heads [default: 2]
    heads: usize = 2;
    /// sensor | pure_cross | sensor_only | channel_independent [default: sensor]
    variant: Variant = Variant::Sensor;
    /// Dropout rate [default: 0.1]
    dropout: f64 = 0.1;
    /// Standardise each lookback window per variable [default: true]
    normalize_window: bool = true;
    /// Seed for initialisation, shuffling and sampling [default: 2021]
    seed: u64 = 2021;
    /// Training epochs [default: 10]
    epochs: usize = 10;
    /// Mini-batch size [default: 32]
    batch_size: usize = 32;
    /// Adam learning rate [default: 1e-4]
    lr: f64 = 1e-4;
    /// Progress line every this many epochs, 0 for none [default: 1]
    report_every: usize = 1;
    /// Start a training window every this many rows [default: 1]
    train_stride: usize = 1;
    /// Also train one model per listed seed and report mean ± std
    seeds: Vec<u64> = Vec::new();
    /// Report metrics on the original data scale [default: false]
    raw_metrics: bool = false;
    /// Windows written to predictions.csv [default: 16]
    prediction_windows: usize = 16;
    /// Use the rayon pool for batch work [default: true]
    parallel: bool = true;
    /// Checkpoint to evaluate (eval)
    checkpoint: Option<PathBuf> = None;
    /// Split to evaluate: train | val | test [default: test]
    split: String = "test".to_string();
    /// Windows sampled by lag [default: 10]
    n_tensors: usize = 10;
    /// Variants timed by bench [default: sensor,pure_cross]
    bench_variants: Vec<Variant> = vec![Variant::Sensor, Variant::PureCross];
    /// Patch counts timed by bench [default: 16,32,64,128]
    bench_patches: Vec<usize> = vec![16, 32, 64, 128];
    /// Variables in bench inputs [default: 32]
    bench_vars: usize = 32;
    /// Token width in bench inputs [default: 64]
    bench_d_model: usize = 64;
    /// Timed repetitions per point [default: 3]
    bench_reps: usize = 3;
    /// Time the backward pass as well [default: false]
    bench_backward: bool = false;
    /// Skip points estimated above this many MiB [default: 3072]
    bench_budget_mb: u64 = 3072;
    /// Variables generated by synth [default: 4]
    synth_vars: usize = 4;
    /// Rows generated by synth [default: 4000]
    synth_rows: usize = 4000;
    /// Lag edges src>dst:delay[:gain[:jitter]] [default: 0>2:16,1>3:24]
    synth_edges: String = "0>2:16,1>3:24".to_string();
    /// Noise std of lagged variables [default: 0.05]
    synth_noise: f64 = 0.05;
    /// Axes swept: patch_len, stride, d_model [default: all three]
    sweep_axes: Vec<String> = vec!["patch_len".into(), "stride".into(), "d_model".into()];
    /// Patch lengths swept [default: 8,16,32,64]
    sweep_patch_len: Vec<usize> = vec![8, 16, 32, 64];
    /// Strides swept [default: 8,16,32,64]
    sweep_stride: Vec<usize> = vec![8, 16, 32, 64];
    /// Token widths swept [default: 64,128,256,512]
    sweep_d_model: Vec<usize> = vec![64, 128, 256, 512];
}

impl RunConfig {
    /// Defaults, then `file`, then command-line overrides.
    pub fn load(file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
        }
        for (k, v) in overrides.pairs() {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Applies `key=value` lines; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected key=value", n + 1))?;
            self.set(k, v).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    pub fn patch(&self) -> PatchConfig {
        PatchConfig {
            lookback: self.lookback,
            patch_len: self.patch_len,
            stride: self.stride,
            d_model: self.d_model,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            patch: self.patch(),
            horizon: self.horizon,
            blocks: self.blocks,
            heads: self.heads,
            variant: self.variant,
            dropout: self.dropout,
            normalize_window: self.normalize_window,
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            report_every: self.report_every,
        }
    }

    pub fn out_root(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}
