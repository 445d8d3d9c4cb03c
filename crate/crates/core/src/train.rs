//! Training loops: bias-capturing encoders and the main debiased model.
//!
//! The main loop minimizes `task + α · matching` per batch, where the
//! matching term compares the model's representation similarities against a
//! frozen bias encoder's. The bias encoder runs outside the tape, so it can
//! never receive gradient. With `α = 0` the loop is bitwise-identical to
//! plain task training.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::data::ColorGridDataset;
use crate::flac::{flac_loss, ConditionMode, DivergenceKind, FlacConfig, FlacError, KernelKind};
use crate::losses::{cross_entropy, supcon_loss, LossError};
use crate::model::{Mlp, MlpConfig, ModelError};
use crate::optim::{lr_at, Adam, AdamConfig, OptimError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("alpha > 0 requires a bias encoder")]
    MissingBiasEncoder,
    #[error("non-finite {component} loss at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        component: &'static str,
    },
    #[error("checkpoint does not start with the FLCK magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Flac(#[from] FlacError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Which objective drives the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskLossKind {
    /// Cross-entropy on the logits.
    Ce,
    /// Supervised contrastive on the representations. The linear head is
    /// trained alongside on detached representations so that predictions
    /// stay meaningful without touching the encoder's dynamics.
    SupCon,
}

impl std::fmt::Display for TaskLossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskLossKind::Ce => "ce",
            TaskLossKind::SupCon => "supcon",
        })
    }
}

impl FromStr for TaskLossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ce" => Ok(TaskLossKind::Ce),
            "supcon" => Ok(TaskLossKind::SupCon),
            other => Err(format!(
                "unknown task loss {other:?} (expected ce or supcon)"
            )),
        }
    }
}

/// Everything one training run needs to know.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the probability-matching term; 0 disables it entirely.
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub task_loss: TaskLossKind,
    /// Temperature for the supervised contrastive loss.
    pub temperature: f64,
    pub kernel: KernelKind,
    pub divergence: DivergenceKind,
    pub condition: ConditionMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.0,
            epochs: 10,
            batch_size: 128,
            lr: 1e-3,
            weight_decay: 1e-4,
            task_loss: TaskLossKind::Ce,
            temperature: 0.1,
            kernel: KernelKind::StudentT,
            divergence: DivergenceKind::Jeffreys,
            condition: ConditionMode::Full,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "alpha must be finite and ≥ 0, got {}",
                self.alpha
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be ≥ 1".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig(format!(
                "batch_size must be ≥ 2 (pairs require it), got {}",
                self.batch_size
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "lr must be finite and > 0, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "weight_decay must be finite and ≥ 0, got {}",
                self.weight_decay
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "temperature must be finite and > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    fn flac(&self) -> FlacConfig {
        FlacConfig {
            kernel: self.kernel,
            divergence: self.divergence,
            condition: self.condition,
        }
    }
}

/// How the bias-capturing encoder is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasCapturingMode {
    /// Trained to predict the protected attribute on a split disjoint from
    /// the main training data.
    AttributeSupervised,
    /// Trained on the task labels only; under strong bias it learns the
    /// shortcut and thereby captures the attribute.
    VanillaTask,
}

impl std::fmt::Display for BiasCapturingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BiasCapturingMode::AttributeSupervised => "attribute_supervised",
            BiasCapturingMode::VanillaTask => "vanilla_task",
        })
    }
}

impl FromStr for BiasCapturingMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "attribute_supervised" => Ok(BiasCapturingMode::AttributeSupervised),
            "vanilla_task" => Ok(BiasCapturingMode::VanillaTask),
            other => Err(format!(
                "unknown bias-capturing mode {other:?} (expected attribute_supervised or vanilla_task)"
            )),
        }
    }
}

/// A trained encoder whose weights can no longer be touched: only plain
/// forward passes are exposed, so downstream training cannot leak gradient
/// into it.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    mlp: Mlp,
}

impl FrozenEncoder {
    pub fn new(mlp: Mlp) -> Self {
        FrozenEncoder { mlp }
    }

    /// Representations for a pixel batch, as a constant tensor.
    ///
    /// Returns the classifier's softmax output rather than the raw
    /// penultimate activations. The matching loss needs bias features whose
    /// kernel similarity behaves like an indicator of "same captured label":
    /// close to 1 whenever two samples get the same prediction and bounded
    /// well away from 1 otherwise. Raw hidden activations of a shallow
    /// encoder fail that — their distances keep tracking incidental input
    /// detail (two images of one color still sit far apart), which starves
    /// the pair sampler of the cross-class pairs it must flag. Confident
    /// probability vectors collapse onto the simplex corners, so the kernel
    /// over them approximates exactly that indicator.
    pub fn representations(&self, x: &Tensor) -> Result<Tensor> {
        let (_, logits) = self.mlp.forward_infer(x)?;
        let n = logits.shape[0];
        let c = logits.shape[1];
        let mut probs = logits.data;
        for row in probs.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Tensor::new(vec![n, c], probs).map_err(Into::into)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.mlp.predict(x)?)
    }

    pub fn config(&self) -> &MlpConfig {
        &self.mlp.config
    }

    /// Flattened parameter snapshot, for freeze-contract checks.
    pub fn parameter_snapshot(&self) -> Vec<f64> {
        self.mlp
            .params()
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }
}

/// One row of the per-epoch training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lr: f64,
    /// Mean task loss over the epoch's steps.
    pub task_loss: f64,
    /// Mean matching loss over the epoch's steps (0 when alpha = 0).
    pub flac_loss: f64,
    /// Running accuracy over the training batches as they were seen.
    pub train_acc: f64,
    /// Accuracy on the unbiased evaluation split (NaN if none given).
    pub unbiased_acc: f64,
    /// Accuracy on the bias-conflicting evaluation split (NaN if none given).
    pub conflict_acc: f64,
}

impl HistoryRow {
    pub const CSV_HEADER: &'static str =
        "epoch,lr,task_loss,flac_loss,train_acc,unbiased_acc,conflict_acc";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.task_loss,
            self.flac_loss,
            self.train_acc,
            self.unbiased_acc,
            self.conflict_acc
        )
    }
}

/// Write a history table as CSV.
pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut out = String::from(HistoryRow::CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv_row());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Per-step loss record, for decomposition checks and divergence forensics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub task: f64,
    pub flac: f64,
    /// The optimized combined value `task + alpha · flac`.
    pub total: f64,
}

/// Data a training run consumes: the training split plus optional held-out
/// splits that are only ever used for per-epoch accuracy logging.
#[derive(Debug, Clone, Copy)]
pub struct TrainSets<'a> {
    pub train: &'a ColorGridDataset,
    pub eval_unbiased: Option<&'a ColorGridDataset>,
    pub eval_conflict: Option<&'a ColorGridDataset>,
}

impl<'a> TrainSets<'a> {
    pub fn train_only(train: &'a ColorGridDataset) -> Self {
        TrainSets {
            train,
            eval_unbiased: None,
            eval_conflict: None,
        }
    }
}

/// A finished training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Mlp,
    pub history: Vec<HistoryRow>,
    pub steps: Vec<StepLog>,
}

const SHUFFLE_TAG: u64 = 0x7368_7566_666c_6521;

/// Which labels a run trains against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TargetKind {
    Task,
    Attribute,
}

/// Train the bias-capturing encoder. `attribute_supervised` fits the
/// protected attribute on `data` (which must be disjoint from the main
/// training split — the main loop later sees only this encoder's outputs,
/// never these labels); `vanilla_task` fits the task labels with plain
/// cross-entropy and relies on shortcut learning to pick up the bias.
pub fn train_bias_capturing(
    mode: BiasCapturingMode,
    data: &ColorGridDataset,
    config: &TrainConfig,
) -> Result<FrozenEncoder> {
    let mut cfg = *config;
    cfg.alpha = 0.0;
    cfg.task_loss = TaskLossKind::Ce;
    let target = match mode {
        BiasCapturingMode::AttributeSupervised => TargetKind::Attribute,
        BiasCapturingMode::VanillaTask => TargetKind::Task,
    };
    let outcome = run_training(&cfg, TrainSets::train_only(data), None, target)?;
    Ok(FrozenEncoder::new(outcome.model))
}

/// Train the main model: task loss plus `alpha` times the probability-
/// matching penalty against the frozen `bias` encoder's similarity
/// structure. With `alpha = 0` the penalty branch is never entered and the
/// run is bitwise-identical to plain task training.
pub fn train_main(
    config: &TrainConfig,
    sets: TrainSets<'_>,
    bias: Option<&FrozenEncoder>,
) -> Result<TrainOutcome> {
    if config.alpha > 0.0 && bias.is_none() {
        return Err(TrainError::MissingBiasEncoder);
    }
    run_training(config, sets, bias, TargetKind::Task)
}

fn run_training(
    config: &TrainConfig,
    sets: TrainSets<'_>,
    bias: Option<&FrozenEncoder>,
    target: TargetKind,
) -> Result<TrainOutcome> {
    config.validate()?;
    let ds = sets.train;
    if ds.is_empty() {
        return Err(TrainError::InvalidConfig("training split is empty".into()));
    }

    let n = ds.len();
    let mlp_config = MlpConfig::new(ds.input_dim(), ds.n_classes);
    let mut model = Mlp::new(mlp_config, config.seed)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        },
        &model.params().iter().map(|t| t.numel()).collect::<Vec<_>>(),
    );
    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(config.seed ^ SHUFFLE_TAG);
    let flac_cfg = config.flac();

    let all_targets: Vec<usize> = {
        let idx: Vec<usize> = (0..n).collect();
        match target {
            TargetKind::Task => ds.targets(&idx),
            TargetKind::Attribute => ds.attributes(&idx),
        }
    };

    let mut history = Vec::with_capacity(config.epochs);
    let mut steps = Vec::new();
    let mut indices: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        let lr = lr_at(config.lr, config.epochs, epoch)?;
        indices.shuffle(&mut shuffle_rng);

        let mut task_sum = 0.0;
        let mut flac_sum = 0.0;
        let mut n_steps = 0usize;
        let mut seen = 0usize;
        let mut correct = 0usize;

        for (step, batch) in indices.chunks(config.batch_size).enumerate() {
            let x = ds.feature_matrix(batch);
            let y: Vec<usize> = batch.iter().map(|&i| all_targets[i]).collect();

            let mut tape = Tape::new();
            let x_var = tape.constant(x.clone());
            let vars = model.forward_tape(&mut tape, x_var)?;

            let task = match config.task_loss {
                TaskLossKind::Ce => cross_entropy(&mut tape, vars.logits, &y)?,
                TaskLossKind::SupCon => supcon_loss(&mut tape, vars.repr, &y, config.temperature)?,
            };
            let task_v = tape.value(task).data[0];
            if !task_v.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step,
                    component: "task",
                });
            }

            let (objective, flac_v) = if config.alpha > 0.0 {
                let encoder = bias.expect("checked above");
                let b = encoder.representations(&x)?;
                let matching = flac_loss(&mut tape, vars.repr, &b, &y, &flac_cfg)?;
                let flac_v = tape.value(matching.loss).data[0];
                if !flac_v.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        step,
                        component: "matching",
                    });
                }
                let weighted = tape.mul_scalar(matching.loss, config.alpha)?;
                (tape.add(task, weighted)?, flac_v)
            } else {
                (task, 0.0)
            };

            // SupCon leaves the linear head untouched; fit it on detached
            // representations so evaluation stays meaningful. The extra term
            // reaches only the head parameters, which the encoder losses
            // never touch, so encoder dynamics are unchanged.
            let objective = if config.task_loss == TaskLossKind::SupCon {
                let repr_const = tape.constant(tape.value(vars.repr).clone());
                let head_w = vars.params[vars.params.len() - 2];
                let head_b = vars.params[vars.params.len() - 1];
                let z = tape.matmul(repr_const, head_w)?;
                let head_logits = tape.add(z, head_b)?;
                let head_ce = cross_entropy(&mut tape, head_logits, &y)?;
                tape.add(objective, head_ce)?
            } else {
                objective
            };

            let total_v = task_v + config.alpha * flac_v;
            if !total_v.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step,
                    component: "total",
                });
            }

            let grad_map = tape.backward(objective)?;
            let grads = model.collect_grads(&vars, &grad_map);
            let mut params = model.params_mut();
            adam.step(lr, &mut params, &grads)?;

            // running train accuracy from the logits already computed
            let logits = tape.value(vars.logits);
            let c = logits.shape[1];
            for (row, &label) in y.iter().enumerate() {
                let slice = &logits.data[row * c..(row + 1) * c];
                let mut best = 0;
                for (k, &v) in slice.iter().enumerate() {
                    if v > slice[best] {
                        best = k;
                    }
                }
                if best == label {
                    correct += 1;
                }
            }
            seen += y.len();

            task_sum += task_v;
            flac_sum += flac_v;
            n_steps += 1;
            steps.push(StepLog {
                epoch,
                step,
                task: task_v,
                flac: flac_v,
                total: total_v,
            });
        }

        let eval_acc = |split: Option<&ColorGridDataset>| -> Result<f64> {
            match split {
                None => Ok(f64::NAN),
                Some(s) => {
                    let idx: Vec<usize> = (0..s.len()).collect();
                    let labels = s.targets(&idx);
                    let mut hits = 0usize;
                    for chunk in idx.chunks(512) {
                        let x = s.feature_matrix(chunk);
                        let pred = model.predict(&x)?;
                        hits += chunk
                            .iter()
                            .zip(&pred)
                            .filter(|&(&i, &p)| labels[i] == p)
                            .count();
                    }
                    Ok(hits as f64 / s.len() as f64)
                }
            }
        };

        history.push(HistoryRow {
            epoch,
            lr,
            task_loss: task_sum / n_steps as f64,
            flac_loss: flac_sum / n_steps as f64,
            train_acc: correct as f64 / seen as f64,
            unbiased_acc: eval_acc(sets.eval_unbiased)?,
            conflict_acc: eval_acc(sets.eval_conflict)?,
        });
    }

    Ok(TrainOutcome {
        model,
        history,
        steps,
    })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FLCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: MlpConfig,
    train: TrainConfig,
}

/// Save a model plus the config that produced it.
pub fn save_checkpoint(path: &Path, model: &Mlp, config: &TrainConfig) -> Result<()> {
    let header = serde_json::to_vec(&CheckpointHeader {
        model: model.config.clone(),
        train: *config,
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    let params = model.params();
    let n_values: usize = params.iter().map(|t| t.numel()).sum();
    out.extend_from_slice(&(n_values as u64).to_le_bytes());
    for t in params {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Load a checkpoint back into a model and its training config.
pub fn load_checkpoint(path: &Path) -> Result<(Mlp, TrainConfig)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(TrainError::Corrupt(format!("truncated at byte {}", *pos)));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
        return Err(TrainError::BadMagic);
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")) as usize;
    let header: CheckpointHeader = serde_json::from_slice(take(&mut pos, header_len)?)?;
    let n_values = u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")) as usize;

    let mut model = Mlp::new(header.model, 0)?;
    let expected: usize = model.params().iter().map(|t| t.numel()).sum();
    if n_values != expected {
        return Err(TrainError::Corrupt(format!(
            "parameter count {n_values} does not match config ({expected})"
        )));
    }
    let raw = take(&mut pos, n_values * 8)?.to_vec();
    if pos != bytes.len() {
        return Err(TrainError::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - pos
        )));
    }
    let mut offset = 0usize;
    for t in model.params_mut() {
        for v in &mut t.data {
            *v = f64::from_le_bytes(raw[offset..offset + 8].try_into().expect("8 bytes"));
            offset += 8;
        }
    }
    Ok((model, header.train))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, split_for_protocol, DatasetSpec};
    use crate::metrics::silhouette_score;

    fn tiny_spec() -> DatasetSpec {
        DatasetSpec {
            n_classes: 3,
            grid: 4,
            q: 0.8,
            n_per_class: 20,
            seed: 7,
            noise_std: 0.05,
        }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 16,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn flat_params(m: &Mlp) -> Vec<f64> {
        m.params()
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }

    // bit-exact history comparison (NaN-valued eval columns compare equal)
    fn history_bits(rows: &[HistoryRow]) -> Vec<[u64; 7]> {
        rows.iter()
            .map(|r| {
                [
                    r.epoch as u64,
                    r.lr.to_bits(),
                    r.task_loss.to_bits(),
                    r.flac_loss.to_bits(),
                    r.train_acc.to_bits(),
                    r.unbiased_acc.to_bits(),
                    r.conflict_acc.to_bits(),
                ]
            })
            .collect()
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let base = tiny_config();
        for bad in [
            TrainConfig {
                alpha: -1.0,
                ..base
            },
            TrainConfig {
                alpha: f64::NAN,
                ..base
            },
            TrainConfig { epochs: 0, ..base },
            TrainConfig {
                batch_size: 1,
                ..base
            },
            TrainConfig { lr: 0.0, ..base },
            TrainConfig {
                weight_decay: -0.5,
                ..base
            },
            TrainConfig {
                temperature: 0.0,
                ..base
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?} should be rejected");
        }
        assert!(base.validate().is_ok());
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let ds = generate(&tiny_spec()).unwrap();
        let cfg = tiny_config();
        let a = train_main(&cfg, TrainSets::train_only(&ds), None).unwrap();
        let b = train_main(&cfg, TrainSets::train_only(&ds), None).unwrap();
        assert_eq!(history_bits(&a.history), history_bits(&b.history));
        assert_eq!(a.steps, b.steps);
        assert_eq!(flat_params(&a.model), flat_params(&b.model));
    }

    #[test]
    fn alpha_zero_is_bitwise_vanilla_regardless_of_bias_encoder() {
        let ds = generate(&tiny_spec()).unwrap();
        let cfg = tiny_config();
        let bias_cfg = TrainConfig {
            epochs: 1,
            seed: 99,
            ..cfg
        };
        let encoder =
            train_bias_capturing(BiasCapturingMode::AttributeSupervised, &ds, &bias_cfg).unwrap();

        let without = train_main(&cfg, TrainSets::train_only(&ds), None).unwrap();
        let with = train_main(&cfg, TrainSets::train_only(&ds), Some(&encoder)).unwrap();
        assert_eq!(flat_params(&without.model), flat_params(&with.model));
        assert_eq!(history_bits(&without.history), history_bits(&with.history));
    }

    #[test]
    fn alpha_positive_without_encoder_is_rejected() {
        let ds = generate(&tiny_spec()).unwrap();
        let cfg = TrainConfig {
            alpha: 1.0,
            ..tiny_config()
        };
        assert!(matches!(
            train_main(&cfg, TrainSets::train_only(&ds), None),
            Err(TrainError::MissingBiasEncoder)
        ));
    }

    #[test]
    fn recorded_totals_decompose_into_task_plus_alpha_matching() {
        let ds = generate(&tiny_spec()).unwrap();
        let cfg = TrainConfig {
            alpha: 0.7,
            ..tiny_config()
        };
        let bias_cfg = TrainConfig {
            epochs: 1,
            seed: 5,
            ..tiny_config()
        };
        let encoder =
            train_bias_capturing(BiasCapturingMode::AttributeSupervised, &ds, &bias_cfg).unwrap();
        let out = train_main(&cfg, TrainSets::train_only(&ds), Some(&encoder)).unwrap();
        assert!(!out.steps.is_empty());
        for s in &out.steps {
            assert!((s.total - (s.task + 0.7 * s.flac)).abs() <= 1e-9, "{s:?}");
            assert!(s.flac >= 0.0);
        }
    }

    #[test]
    fn bias_encoder_parameters_never_move_during_main_training() {
        let ds = generate(&tiny_spec()).unwrap();
        let bias_cfg = TrainConfig {
            epochs: 1,
            seed: 3,
            ..tiny_config()
        };
        let encoder =
            train_bias_capturing(BiasCapturingMode::AttributeSupervised, &ds, &bias_cfg).unwrap();
        let before = encoder.parameter_snapshot();
        let cfg = TrainConfig {
            alpha: 2.0,
            ..tiny_config()
        };
        train_main(&cfg, TrainSets::train_only(&ds), Some(&encoder)).unwrap();
        assert_eq!(before, encoder.parameter_snapshot());
    }

    #[test]
    fn training_reduces_loss_and_learns_the_tiny_task() {
        let spec = DatasetSpec {
            n_per_class: 60,
            ..tiny_spec()
        };
        let ds = generate(&spec).unwrap();
        let cfg = TrainConfig {
            epochs: 8,
            ..tiny_config()
        };
        let out = train_main(&cfg, TrainSets::train_only(&ds), None).unwrap();
        let first = out.history.first().unwrap();
        let last = out.history.last().unwrap();
        assert!(
            last.task_loss < first.task_loss,
            "{} -> {}",
            first.task_loss,
            last.task_loss
        );
        assert!(last.train_acc > 0.8, "train accuracy {}", last.train_acc);
    }

    #[test]
    fn supcon_training_still_produces_a_usable_head() {
        let spec = DatasetSpec {
            n_per_class: 60,
            ..tiny_spec()
        };
        let ds = generate(&spec).unwrap();
        let cfg = TrainConfig {
            epochs: 24,
            task_loss: TaskLossKind::SupCon,
            ..tiny_config()
        };
        let out = train_main(&cfg, TrainSets::train_only(&ds), None).unwrap();
        assert!(
            out.history.last().unwrap().train_acc > 0.7,
            "{}",
            out.history.last().unwrap().train_acc
        );
    }

    #[test]
    fn history_tracks_eval_splits_when_given() {
        let spec = tiny_spec();
        let ds = generate(&spec).unwrap();
        let splits = split_for_protocol(&spec).unwrap();
        let sets = TrainSets {
            train: &ds,
            eval_unbiased: Some(&splits.test_unbiased),
            eval_conflict: Some(&splits.test_bias_conflict),
        };
        let out = train_main(&tiny_config(), sets, None).unwrap();
        for row in &out.history {
            assert!(row.unbiased_acc.is_finite());
            assert!(row.conflict_acc.is_finite());
        }
        let no_eval = train_main(&tiny_config(), TrainSets::train_only(&ds), None).unwrap();
        assert!(no_eval.history[0].unbiased_acc.is_nan());
    }

    #[test]
    fn attribute_supervised_encoder_predicts_colors_on_held_out_data() {
        let spec = DatasetSpec {
            n_classes: 4,
            grid: 6,
            q: 0.9,
            n_per_class: 150,
            seed: 21,
            noise_std: 0.05,
        };
        let train_ds = generate(&spec).unwrap();
        let held_out = generate(&DatasetSpec { seed: 22, ..spec }).unwrap();
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 64,
            seed: 1,
            ..TrainConfig::default()
        };
        let encoder =
            train_bias_capturing(BiasCapturingMode::AttributeSupervised, &train_ds, &cfg).unwrap();

        let idx: Vec<usize> = (0..held_out.len()).collect();
        let t = held_out.attributes(&idx);
        let pred = encoder.predict(&held_out.feature_matrix(&idx)).unwrap();
        let acc = pred.iter().zip(&t).filter(|(a, b)| a == b).count() as f64 / t.len() as f64;
        assert!(acc > 0.95, "attribute accuracy {acc}");
    }

    #[test]
    fn vanilla_encoder_under_extreme_bias_learns_the_color_shortcut() {
        let spec = DatasetSpec {
            n_classes: 5,
            grid: 6,
            q: 1.0,
            n_per_class: 120,
            seed: 33,
            noise_std: 0.05,
        };
        let splits = split_for_protocol(&spec).unwrap();
        let cfg = TrainConfig {
            epochs: 8,
            batch_size: 64,
            seed: 2,
            ..TrainConfig::default()
        };
        let encoder =
            train_bias_capturing(BiasCapturingMode::VanillaTask, &splits.train, &cfg).unwrap();

        // on unbiased data the shortcut transfers poorly to the real task...
        let idx: Vec<usize> = (0..splits.test_unbiased.len()).collect();
        let x = splits.test_unbiased.feature_matrix(&idx);
        let y = splits.test_unbiased.targets(&idx);
        let t = splits.test_unbiased.attributes(&idx);
        let pred = encoder.predict(&x).unwrap();
        let task_acc = pred.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
        assert!(
            task_acc < 0.6,
            "task accuracy {task_acc} should be far below biased-split accuracy"
        );

        // ...because its representations cluster by color, not by class
        let reprs = encoder.representations(&x).unwrap();
        let sil_t = silhouette_score(&reprs, &t).unwrap();
        let sil_y = silhouette_score(&reprs, &y).unwrap();
        assert!(
            sil_t > sil_y,
            "attribute silhouette {sil_t} should exceed target silhouette {sil_y}"
        );
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let ds = generate(&tiny_spec()).unwrap();
        let cfg = tiny_config();
        let out = train_main(&cfg, TrainSets::train_only(&ds), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.flck");
        save_checkpoint(&path, &out.model, &cfg).unwrap();
        let (loaded, loaded_cfg) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_cfg, cfg);
        assert_eq!(loaded.config, out.model.config);
        assert_eq!(flat_params(&loaded), flat_params(&out.model));
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let ds = generate(&tiny_spec()).unwrap();
        let cfg = tiny_config();
        let out = train_main(&cfg, TrainSets::train_only(&ds), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.flck");
        save_checkpoint(&path, &out.model, &cfg).unwrap();

        let bytes = fs::read(&path).unwrap();
        let bad_magic = dir.path().join("bad.flck");
        let mut corrupted = bytes.clone();
        corrupted[0] = b'X';
        fs::write(&bad_magic, &corrupted).unwrap();
        assert!(matches!(
            load_checkpoint(&bad_magic),
            Err(TrainError::BadMagic)
        ));

        let truncated = dir.path().join("short.flck");
        fs::write(&truncated, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            load_checkpoint(&truncated),
            Err(TrainError::Corrupt(_))
        ));
    }

    #[test]
    fn history_csv_has_expected_shape() {
        let ds = generate(&tiny_spec()).unwrap();
        let out = train_main(&tiny_config(), TrainSets::train_only(&ds), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        write_history(&path, &out.history).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], HistoryRow::CSV_HEADER);
        assert_eq!(lines.len(), 1 + out.history.len());
        assert!(lines[1].starts_with("0,0.001,"));
    }
}
