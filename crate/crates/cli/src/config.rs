//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Absent keys take their
//! defaults; unknown keys, repeated keys and malformed values are errors that
//! name the offending line. [`CliConfig::echo`] writes every key in a fixed
//! order and parses back to the same configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fmamba_core::fusion::FmbConfig;
use fmamba_core::{Error, Result};
use fmamba_detector::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub train: TrainConfig,
    /// Synthetic training samples, used when `train_dir` is unset.
    pub n_train: usize,
    /// Synthetic test samples, used when `test_dir` is unset.
    pub n_test: usize,
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    /// Checkpoint directory for `eval` and `heatmap`; defaults to `<out>/checkpoint`.
    pub checkpoint: Option<PathBuf>,
    pub heatmap_stage: usize,
    /// Index into the test set.
    pub heatmap_sample: usize,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            train: TrainConfig::default(),
            n_train: 200,
            n_test: 50,
            train_dir: None,
            test_dir: None,
            checkpoint: None,
            heatmap_stage: 5,
            heatmap_sample: 0,
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "epochs",
    "batch_size",
    "learning_rate",
    "momentum",
    "weight_decay",
    "lambda_coord",
    "grad_clip",
    "image_size",
    "n_classes",
    "n_sscs",
    "n_dssf",
    "use_sscs",
    "use_dssf",
    "stages",
    "rgb_cross",
    "ir_cross",
    "gate_silu_twice",
    "expansion",
    "state_dim",
    "zero_skip",
    "n_train",
    "n_test",
    "train_dir",
    "test_dir",
    "checkpoint",
    "heatmap_stage",
    "heatmap_sample",
];

fn value<T: FromStr>(v: &str, what: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("`{v}` is not a valid {what}"))
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{v}` is not `true` or `false`")),
    }
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn stage_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(|s| value(s.trim(), "stage number")).collect()
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl CliConfig {
    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        let f: &mut FmbConfig = &mut t.fmb;
        match key {
            "seed" => t.seed = value(v, "integer")?,
            "epochs" => t.epochs = value(v, "integer")?,
            "batch_size" => t.batch_size = value(v, "integer")?,
            "learning_rate" => t.learning_rate = value(v, "number")?,
            "momentum" => t.momentum = value(v, "number")?,
            "weight_decay" => t.weight_decay = value(v, "number")?,
            "lambda_coord" => t.lambda_coord = value(v, "number")?,
            "grad_clip" => t.grad_clip = value(v, "number")?,
            "image_size" => t.image_size = value(v, "integer")?,
            "n_classes" => t.n_classes = value(v, "integer")?,
            "n_sscs" => f.n_sscs = value(v, "integer")?,
            "n_dssf" => f.n_dssf = value(v, "integer")?,
            "use_sscs" => f.use_sscs = flag(v)?,
            "use_dssf" => f.use_dssf = flag(v)?,
            "stages" => f.stages = stage_list(v)?,
            "rgb_cross" => f.dual.rgb_cross = flag(v)?,
            "ir_cross" => f.dual.ir_cross = flag(v)?,
            "gate_silu_twice" => f.gate_silu_twice = flag(v)?,
            "expansion" => f.expansion = value(v, "integer")?,
            "state_dim" => f.state_dim = value(v, "integer")?,
            "zero_skip" => f.zero_skip = flag(v)?,
            "n_train" => self.n_train = value(v, "integer")?,
            "n_test" => self.n_test = value(v, "integer")?,
            "train_dir" => self.train_dir = path(v),
            "test_dir" => self.test_dir = path(v),
            "checkpoint" => self.checkpoint = path(v),
            "heatmap_stage" => self.heatmap_stage = value(v, "integer")?,
            "heatmap_sample" => self.heatmap_sample = value(v, "integer")?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses configuration text; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<CliConfig> {
        let mut cfg = CliConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let bad = |msg: String| Error::Format {
                path: origin.to_path_buf(),
                msg: format!("line {}: {msg}", i + 1),
            };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `key=value`, got `{line}`")))?;
            let (key, v) = (key.trim(), v.trim());
            if seen.iter().any(|k| k == key) {
                return Err(bad(format!("key `{key}` given twice")));
            }
            cfg.set(key, v).map_err(|m| bad(format!("{key}: {m}")))?;
            seen.push(key.to_string());
        }
        cfg.validate().map_err(|e| Error::Format {
            path: origin.to_path_buf(),
            msg: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CliConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        CliConfig::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("n_train and n_test must be positive".into()));
        }
        Ok(())
    }

    /// The resolved configuration, one `key=value` per line in [`KEYS`] order.
    pub fn echo(&self) -> String {
        let t = &self.train;
        let f = &t.fmb;
        let stages: Vec<String> = f.stages.iter().map(|s| s.to_string()).collect();
        let values: Vec<String> = vec![
            t.seed.to_string(),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.learning_rate.to_string(),
            t.momentum.to_string(),
            t.weight_decay.to_string(),
            t.lambda_coord.to_string(),
            t.grad_clip.to_string(),
            t.image_size.to_string(),
            t.n_classes.to_string(),
            f.n_sscs.to_string(),
            f.n_dssf.to_string(),
            f.use_sscs.to_string(),
            f.use_dssf.to_string(),
            stages.join(","),
            f.dual.rgb_cross.to_string(),
            f.dual.ir_cross.to_string(),
            f.gate_silu_twice.to_string(),
            f.expansion.to_string(),
            f.state_dim.to_string(),
            f.zero_skip.to_string(),
            self.n_train.to_string(),
            self.n_test.to_string(),
            show(&self.train_dir),
            show(&self.test_dir),
            show(&self.checkpoint),
            self.heatmap_stage.to_string(),
            self.heatmap_sample.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }

    /// Seed of the synthetic test split, distinct from the training split.
    pub fn test_seed(&self) -> u64 {
        self.train.seed.wrapping_add(TEST_SEED_OFFSET)
    }
}

const TEST_SEED_OFFSET: u64 = 1_000_003;
