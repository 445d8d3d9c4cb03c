//! Fairness-aware representation learning on synthetic biased data.
//!
//! The crate trains a small MLP classifier while penalizing, via a
//! probability-matching loss, any similarity structure that a pretrained
//! bias-capturing model can see in the learned representations. Everything
//! needed to reproduce the pipeline at desk scale lives here: a reverse-mode
//! autodiff tape, the pairing/kernel/divergence machinery of the loss, a
//! procedurally generated biased image benchmark, training loops, and
//! fairness diagnostics (quadratic mutual information, disparate-impact and
//! disparate-mistreatment metrics).

pub mod autodiff;
pub mod config;
pub mod data;
pub mod experiment;
pub mod flac;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod train;

pub use autodiff::{gradient_check, GradCheckReport, GradientMap, Tape, Tensor, Var};
pub use config::{ConfigError, ExperimentConfig};
pub use data::{generate, split_for_protocol, ColorGridDataset, ColorGridSample, DatasetSpec};
pub use experiment::{
    ablate, ablate_q_sweep, gridsearch_alpha, run_protocol, run_to_dir, run_variant, AblationSuite,
    AblationTable, ExperimentError, GridSearchOutcome, ProtocolOutput, RepRow, RunRecord, Stats,
    SummaryRow,
};
pub use flac::{
    build_pair_sets, divergence, flac_loss, infer_attribute_equality, kernel_similarity,
    pairwise_kernel_matrix, ConditionMode, DivergenceKind, FlacConfig, FlacLossOutput, KernelKind,
    PairSets,
};
pub use losses::{cross_entropy, supcon_loss};
pub use metrics::{
    accuracy, dfpr_dfnr, evaluate, p_rule, qmi, unbiased_accuracy, EvalReport, GroupedPredictions,
    QmiConfig,
};
pub use model::{Mlp, MlpConfig};
pub use optim::{lr_at, Adam, AdamConfig};
pub use train::{
    load_checkpoint, save_checkpoint, train_bias_capturing, train_main, BiasCapturingMode,
    FrozenEncoder, HistoryRow, TaskLossKind, TrainConfig, TrainOutcome, TrainSets,
};
