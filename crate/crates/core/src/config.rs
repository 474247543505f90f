//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` are comments; trailing `# ...` after a value is
//! also stripped. Unknown keys are a hard error. [`RunConfig::to_text`]
//! writes every key, so an echoed config reproduces a run on its own.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SplitRatios;
use crate::dyngraph::HopEstimator;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

macro_rules! run_config {
    ($( $key:ident : $ty:ty = $default:expr, $doc:literal; )*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( #[doc = $doc] pub $key: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $( $key: $default, )* }
            }
        }

        impl RunConfig {
            /// Every key with its one-line description, in file order.
            pub const KEYS: &'static [(&'static str, &'static str)] = &[ $( (stringify!($key), $doc), )* ];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($key) => {
                        self.$key = parse_value::<$ty>(key, value)?;
                        Ok(())
                    } )*
                    other => Err(Error::config(format!("unknown config key {other:?}"))),
                }
            }

            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(
                    let _ = writeln!(out, "# {}", $doc);
                    let _ = writeln!(out, "{} = {}", stringify!($key), ConfigValue::render(&self.$key));
                )*
                out
            }
        }
    };
}

run_config! {
    edges: PathBuf = PathBuf::from("data/edges.csv"), "road network edge list (`from,to`)";
    flows: PathBuf = PathBuf::from("data/flow.csv"), "flow matrix, one row per 5-minute step";
    out_dir: PathBuf = PathBuf::from("out"), "directory for checkpoints, histories and exports";
    nodes: usize = 0, "sensor count; 0 infers it from the flow file";
    input_len: usize = 12, "input window length T'";
    horizon: usize = 12, "prediction horizon T";
    train_ratio: f64 = 0.6, "chronological train share";
    val_ratio: f64 = 0.2, "chronological validation share";
    test_ratio: f64 = 0.2, "chronological test share";
    per_sensor_scaler: bool = true, "z-score each sensor separately (false: one global mean/std)";
    embed_dim: usize = 8, "node embedding width d";
    hop_embed_dim: usize = 8, "hop embedding width m";
    proj_dim: usize = 4, "width of the flow projection fed to the embedding GRUs";
    hidden: usize = 64, "channel width D of the spatio-temporal blocks";
    diffusion_steps: usize = 2, "diffusion steps K";
    kernel_size: usize = 2, "temporal kernel width Ks";
    n_blocks: usize = 3, "number of spatio-temporal blocks";
    hop_group: usize = 5, "structure information group size L";
    alpha: f64 = 1.0, "std of the normalised edge logits";
    tau: f64 = 1.0, "Gumbel-softmax temperature";
    gamma: f64 = 0.3, "edge keep probability during training";
    dropout: f64 = 0.1, "dropout after every temporal layer";
    learning_rate: f64 = 0.005, "Adam step size";
    batch_size: usize = 64, "windows per optimiser step";
    max_epochs: usize = 200, "upper bound on training epochs";
    patience: usize = 15, "epochs without validation improvement before stopping";
    seed: u64 = 0, "single source of all randomness";
    threads: usize = 0, "worker threads; 0 uses all cores (results do not depend on it)";
    eval_sampling_override: bool = false, "keep edge sampling on at evaluation";
    symmetrize_hops: bool = false, "count hops on the undirected road network";
    normalized_loss: bool = false, "train on z-scored values instead of original units";
    mape_threshold: f64 = 1.0, "targets with |y| below this are left out of MAPE";
    max_train_windows: usize = 0, "cap on training windows (first ones kept); 0 keeps all";
}

/// Conversion between config text and typed values.
pub trait ConfigValue: Sized {
    fn parse_text(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_text(s: &str) -> Option<Self> {
                <$t>::from_str(s).ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(usize, u64, f64);

impl ConfigValue for bool {
    fn parse_text(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "true" | "yes" | "1" | "on" => Some(true),
            "false" | "no" | "0" | "off" => Some(false),
            _ => None,
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for PathBuf {
    fn parse_text(s: &str) -> Option<Self> {
        Some(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

fn parse_value<T: ConfigValue>(key: &str, value: &str) -> Result<T> {
    T::parse_text(value.trim())
        .ok_or_else(|| Error::config(format!("bad value {value:?} for key {key:?}")))
}

impl RunConfig {
    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = match line.find('#') {
                Some(i) => &line[..i],
                None => line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got {line:?}", lineno + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::config(format!("line {}: {}", lineno + 1, e.message())))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Applies a `key=value` command-line override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn ratios(&self) -> SplitRatios {
        SplitRatios { train: self.train_ratio, val: self.val_ratio, test: self.test_ratio }
    }

    pub fn model_config(&self, nodes: usize) -> ModelConfig {
        ModelConfig {
            nodes,
            input_len: self.input_len,
            horizon: self.horizon,
            features: 1,
            embed_dim: self.embed_dim,
            hop_embed_dim: self.hop_embed_dim,
            proj_dim: self.proj_dim,
            hidden: self.hidden,
            diffusion_steps: self.diffusion_steps,
            kernel_size: self.kernel_size,
            n_blocks: self.n_blocks,
            hop_group: self.hop_group,
            alpha: self.alpha,
            tau: self.tau,
            gamma: self.gamma,
            dropout: self.dropout,
            eval_sampling: self.eval_sampling_override,
            symmetrize_hops: self.symmetrize_hops,
            hop_estimator: HopEstimator::StraightThrough,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            normalized_loss: self.normalized_loss,
            mape_threshold: self.mape_threshold,
            max_train_windows: self.max_train_windows,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let mut cfg = RunConfig::default();
        cfg.gamma = 0.05;
        cfg.out_dir = PathBuf::from("runs/a b");
        cfg.alpha = 0.1 + 0.2;
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = RunConfig::from_text("# header\n\nseed = 7  # trailing\nsymmetrize_hops=yes\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert!(cfg.symmetrize_hops);
        let mut cfg = cfg;
        cfg.apply_override("hidden=16").unwrap();
        assert_eq!(cfg.hidden, 16);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        let err = RunConfig::from_text("lerning_rate = 0.1").unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("lerning_rate")), "{err}");
        assert!(RunConfig::from_text("seed = -1").is_err());
        assert!(RunConfig::from_text("seed 1").is_err());
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_override("gamma").is_err());
    }

    #[test]
    fn every_key_is_documented_and_settable() {
        let text = RunConfig::default().to_text();
        for (key, doc) in RunConfig::KEYS {
            assert!(!doc.is_empty());
            assert!(text.contains(&format!("\n{key} = ")) || text.contains(&format!("{key} = ")));
        }
    }
}
