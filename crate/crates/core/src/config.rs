//! Experiment configuration: a flat `key = value` text format with
//! `[section]` headers, chosen so experiment settings stay greppable and
//! diffable without pulling in a config-language dependency.
//!
//! Three sections are recognized. `[dataset]` fills a [`DatasetSpec`],
//! `[train]` a [`TrainConfig`], and `[experiment]` the protocol-level fields
//! (bias mode, repetitions, base seed, output directory). Every key is
//! optional; omitted keys keep their documented defaults, so an empty file
//! parses to the default configuration. Lines starting with `#` or `;` are
//! comments. Unknown sections or keys are hard errors with the offending
//! line number — silently ignoring a typo like `alhpa = 5` would change an
//! experiment's meaning.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DatasetSpec;
use crate::train::{BiasCapturingMode, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value` or `[section]`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown section `[{name}]` (expected dataset, train, or experiment)")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: key `{key}` appears before any `[section]` header")]
    KeyOutsideSection { line: usize, key: String },
    #[error("line {line}: unknown key `{key}` in section `[{section}]`")]
    UnknownKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("line {line}: bad value `{value}` for `{key}`: expected {expected}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read config file: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, ConfigError>;

/// Everything one experiment needs: what data to synthesize, how to train,
/// and how the comparison protocol repeats and persists its runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    /// How the bias-capturing encoder is obtained for the FLAC runs.
    pub bias_mode: BiasCapturingMode,
    /// Number of protocol repetitions; repetition `i` runs with seed
    /// `base_seed + i` (driving both data synthesis and training).
    pub repetitions: usize,
    pub base_seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::default(),
            train: TrainConfig::default(),
            bias_mode: BiasCapturingMode::AttributeSupervised,
            repetitions: 5,
            base_seed: 0,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.repetitions < 1 {
            return Err(ConfigError::Invalid(
                "repetitions must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        parse(&std::fs::read_to_string(path)?)
    }
}

fn parse_num<T: FromStr>(line: usize, key: &str, value: &str, expected: &'static str) -> Result<T> {
    value.parse().map_err(|_| ConfigError::BadValue {
        line,
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

/// Parse configuration text into an [`ExperimentConfig`], starting from
/// defaults and overriding field by field. Validates the result.
pub fn parse(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut section: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with(';') {
            continue;
        }
        if let Some(name) = trimmed.strip_prefix('[') {
            let Some(name) = name.strip_suffix(']') else {
                return Err(ConfigError::Syntax {
                    line,
                    text: trimmed.to_string(),
                });
            };
            let name = name.trim();
            if !matches!(name, "dataset" | "train" | "experiment") {
                return Err(ConfigError::UnknownSection {
                    line,
                    name: name.to_string(),
                });
            }
            section = Some(name.to_string());
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(ConfigError::Syntax {
                line,
                text: trimmed.to_string(),
            });
        };
        let key = key.trim();
        let value = value.trim();
        let Some(section) = section.as_deref() else {
            return Err(ConfigError::KeyOutsideSection {
                line,
                key: key.to_string(),
            });
        };
        match section {
            "dataset" => match key {
                "n_classes" => {
                    cfg.dataset.n_classes = parse_num(line, key, value, "an integer ≥ 2")?
                }
                "grid" => cfg.dataset.grid = parse_num(line, key, value, "a positive integer")?,
                "q" => cfg.dataset.q = parse_num(line, key, value, "a float in [0, 1]")?,
                "n_per_class" => {
                    cfg.dataset.n_per_class = parse_num(line, key, value, "a positive integer")?
                }
                "seed" => {
                    cfg.dataset.seed = parse_num(line, key, value, "a 64-bit unsigned integer")?
                }
                "noise_std" => cfg.dataset.noise_std = parse_num(line, key, value, "a float ≥ 0")?,
                _ => return Err(unknown_key(line, section, key)),
            },
            "train" => match key {
                "alpha" => cfg.train.alpha = parse_num(line, key, value, "a float ≥ 0")?,
                "epochs" => cfg.train.epochs = parse_num(line, key, value, "a positive integer")?,
                "batch_size" => {
                    cfg.train.batch_size = parse_num(line, key, value, "an integer ≥ 2")?
                }
                "lr" => cfg.train.lr = parse_num(line, key, value, "a positive float")?,
                "weight_decay" => {
                    cfg.train.weight_decay = parse_num(line, key, value, "a float ≥ 0")?
                }
                "task_loss" => {
                    cfg.train.task_loss = parse_num(line, key, value, "`ce` or `supcon`")?
                }
                "temperature" => {
                    cfg.train.temperature = parse_num(line, key, value, "a positive float")?
                }
                "kernel" => {
                    cfg.train.kernel =
                        parse_num(line, key, value, "`student_t`, `rbf`, or `cosine`")?
                }
                "divergence" => {
                    cfg.train.divergence =
                        parse_num(line, key, value, "`jeffreys`, `kl`, or `mse`")?
                }
                "condition" => {
                    cfg.train.condition =
                        parse_num(line, key, value, "`full`, `a10_only`, or `a01_only`")?
                }
                "seed" => {
                    cfg.train.seed = parse_num(line, key, value, "a 64-bit unsigned integer")?
                }
                _ => return Err(unknown_key(line, section, key)),
            },
            "experiment" => match key {
                "bias_mode" => {
                    cfg.bias_mode =
                        parse_num(line, key, value, "`attribute_supervised` or `vanilla_task`")?;
                }
                "repetitions" => cfg.repetitions = parse_num(line, key, value, "an integer ≥ 1")?,
                "base_seed" => {
                    cfg.base_seed = parse_num(line, key, value, "a 64-bit unsigned integer")?
                }
                "output_dir" => cfg.output_dir = PathBuf::from(value),
                _ => return Err(unknown_key(line, section, key)),
            },
            _ => unreachable!("section names are validated at the header"),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn unknown_key(line: usize, section: &str, key: &str) -> ConfigError {
    ConfigError::UnknownKey {
        line,
        section: section.to_string(),
        key: key.to_string(),
    }
}

/// Render a configuration back to the text format `parse` reads. Floats use
/// Rust's shortest round-trip formatting, so `parse(render(c)) == c` exactly.
pub fn render(cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    let mut push = |s: &str| {
        out.push_str(s);
        out.push('\n');
    };
    push("[dataset]");
    push(&format!("n_classes = {}", cfg.dataset.n_classes));
    push(&format!("grid = {}", cfg.dataset.grid));
    push(&format!("q = {}", cfg.dataset.q));
    push(&format!("n_per_class = {}", cfg.dataset.n_per_class));
    push(&format!("seed = {}", cfg.dataset.seed));
    push(&format!("noise_std = {}", cfg.dataset.noise_std));
    push("");
    push("[train]");
    push(&format!("alpha = {}", cfg.train.alpha));
    push(&format!("epochs = {}", cfg.train.epochs));
    push(&format!("batch_size = {}", cfg.train.batch_size));
    push(&format!("lr = {}", cfg.train.lr));
    push(&format!("weight_decay = {}", cfg.train.weight_decay));
    push(&format!("task_loss = {}", cfg.train.task_loss));
    push(&format!("temperature = {}", cfg.train.temperature));
    push(&format!("kernel = {}", cfg.train.kernel));
    push(&format!("divergence = {}", cfg.train.divergence));
    push(&format!("condition = {}", cfg.train.condition));
    push(&format!("seed = {}", cfg.train.seed));
    push("");
    push("[experiment]");
    push(&format!("bias_mode = {}", cfg.bias_mode));
    push(&format!("repetitions = {}", cfg.repetitions));
    push(&format!("base_seed = {}", cfg.base_seed));
    push(&format!("output_dir = {}", cfg.output_dir.display()));
    out
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render(self))
    }
}
