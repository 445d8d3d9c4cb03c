//! The comparison protocol: train a bias-capturing encoder, then a Vanilla
//! (α = 0) and a matching-loss model per repetition, evaluate each on the
//! unbiased test split, and aggregate mean ± std rows the way debiasing
//! papers report them. Also hosts the ablation suites (condition terms,
//! kernels, divergences, α grid, q sweep) and the α grid search.
//!
//! Everything here is deterministic given the configuration: repetition `i`
//! derives its data and training seeds from `base_seed + i`, so a record can
//! be re-executed independently from the seed list its rows carry.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::config::{self, ConfigError, ExperimentConfig};
use crate::data::{generate, split_for_protocol, DataError, DatasetSpec};
use crate::flac::{ConditionMode, DivergenceKind, KernelKind};
use crate::metrics::{evaluate, EvalReport, MetricsError, QmiConfig};
use crate::model::Mlp;
use crate::train::{
    save_checkpoint, train_bias_capturing, train_main, write_history, BiasCapturingMode,
    FrozenEncoder, HistoryRow, TaskLossKind, TrainConfig, TrainError, TrainSets,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown ablation suite `{0}` (expected condition_terms, kernels, divergences, alpha_grid, or q_sweep)")]
    UnknownSuite(String),
    #[error("{file}:{line}: {msg}")]
    Csv {
        file: String,
        line: usize,
        msg: String,
    },
}

impl ExperimentError {
    /// Process exit code this failure maps to: 2 for configuration errors,
    /// 3 for training divergence, 4 for I/O trouble, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::UnknownSuite(_) => 2,
            ExperimentError::Data(
                DataError::Io(_)
                | DataError::BadMagic(_)
                | DataError::UnsupportedVersion(_)
                | DataError::Corrupt(_),
            ) => 4,
            ExperimentError::Data(_) => 2,
            ExperimentError::Train(TrainError::InvalidConfig(_))
            | ExperimentError::Train(TrainError::MissingBiasEncoder) => 2,
            ExperimentError::Train(TrainError::NonFiniteLoss { .. }) => 3,
            ExperimentError::Train(_) => 4,
            ExperimentError::Metrics(_) => 1,
            ExperimentError::Io(_) | ExperimentError::Csv { .. } => 4,
        }
    }
}

type Result<T> = std::result::Result<T, ExperimentError>;

/// Bias-split generation seed tag ("bias" in ASCII), xored with the
/// repetition seed so the attribute-labeled split never overlaps the
/// training data's sample seeds.
const BIAS_SPLIT_TAG: u64 = 0x6269_6173;
/// Encoder training seed tag ("enc"), keeping the encoder's shuffling
/// decoupled from the main model's.
const ENCODER_SEED_TAG: u64 = 0x65_6e_63;
/// Epochs for the bias-capturing encoder: color prediction saturates in a
/// couple of epochs at every scale this toolkit targets.
const BIAS_ENCODER_EPOCHS: usize = 3;

/// Per-class size of the attribute-labeled split: a quarter of the training
/// allocation, floored so tiny smoke configs still train a usable encoder.
fn bias_split_per_class(train_per_class: usize) -> usize {
    (train_per_class / 4).max(20)
}

pub const CONFIG_ECHO_FILE: &str = "config.ini";
pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_TABLE_FILE: &str = "summary.txt";

/// One repetition of one variant: which seed it ran under and what the
/// trained model scored on the unbiased test split.
#[derive(Debug, Clone, Serialize)]
pub struct RepRow {
    pub variant: String,
    pub repetition: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub report: EvalReport,
}

impl RepRow {
    pub const CSV_HEADER: &'static str = "variant,repetition,seed,acc_overall,acc_unbiased,acc_bias_conflict,qmi,p_rule,dfpr,dfnr,mistreatment";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.variant,
            self.repetition,
            self.seed,
            self.report.to_csv_row()
        )
    }

    pub fn from_csv_fields(fields: &[&str]) -> Option<RepRow> {
        if fields.len() != 11 {
            return None;
        }
        Some(RepRow {
            variant: fields[0].to_string(),
            repetition: fields[1].parse().ok()?,
            seed: fields[2].parse().ok()?,
            report: EvalReport::from_csv_fields(&fields[3..])?,
        })
    }
}

/// Mean and population standard deviation over repetitions.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
}

pub fn stats(values: &[f64]) -> Stats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Stats {
        mean,
        std: var.sqrt(),
    }
}

/// One aggregate line of the summary table, carrying the exact seeds used so
/// the row can be re-executed independently.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub variant: String,
    pub task_loss: TaskLossKind,
    pub q: f64,
    pub acc_unbiased: Stats,
    pub acc_conflict: Stats,
    pub qmi: Stats,
    pub p_rule: Stats,
    pub mistreatment: Stats,
    pub seeds: Vec<u64>,
}

impl SummaryRow {
    pub const CSV_HEADER: &'static str = "variant,task_loss,q,acc_unbiased_mean,acc_unbiased_std,acc_conflict_mean,acc_conflict_std,qmi_mean,qmi_std,p_rule_mean,p_rule_std,mistreatment_mean,mistreatment_std,seeds";

    fn aggregate(variant: &str, task_loss: TaskLossKind, q: f64, rows: &[RepRow]) -> SummaryRow {
        let pick = |f: fn(&EvalReport) -> f64| -> Stats {
            stats(&rows.iter().map(|r| f(&r.report)).collect::<Vec<_>>())
        };
        SummaryRow {
            variant: variant.to_string(),
            task_loss,
            q,
            acc_unbiased: pick(|r| r.acc_unbiased),
            acc_conflict: pick(|r| r.acc_bias_conflict),
            qmi: pick(|r| r.qmi),
            p_rule: pick(|r| r.p_rule),
            mistreatment: pick(|r| r.mistreatment),
            seeds: rows.iter().map(|r| r.seed).collect(),
        }
    }

    pub fn to_csv_row(&self) -> String {
        let seeds = self
            .seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join("|");
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.variant,
            self.task_loss,
            self.q,
            self.acc_unbiased.mean,
            self.acc_unbiased.std,
            self.acc_conflict.mean,
            self.acc_conflict.std,
            self.qmi.mean,
            self.qmi.std,
            self.p_rule.mean,
            self.p_rule.std,
            self.mistreatment.mean,
            self.mistreatment.std,
            seeds
        )
    }

    pub fn from_csv_fields(fields: &[&str]) -> Option<SummaryRow> {
        if fields.len() != 14 {
            return None;
        }
        let num = |i: usize| -> Option<f64> { fields[i].parse().ok() };
        let pair = |i: usize| -> Option<Stats> {
            Some(Stats {
                mean: num(i)?,
                std: num(i + 1)?,
            })
        };
        let seeds = if fields[13].is_empty() {
            Vec::new()
        } else {
            fields[13]
                .split('|')
                .map(|s| s.parse().ok())
                .collect::<Option<Vec<u64>>>()?
        };
        Some(SummaryRow {
            variant: fields[0].to_string(),
            task_loss: fields[1].parse().ok()?,
            q: num(2)?,
            acc_unbiased: pair(3)?,
            acc_conflict: pair(5)?,
            qmi: pair(7)?,
            p_rule: pair(9)?,
            mistreatment: pair(11)?,
            seeds,
        })
    }
}

/// Everything a protocol run produced: config echo, per-repetition rows, and
/// the aggregate summary. The persisted CSVs round-trip back into this
/// structure exactly.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub rows: Vec<RepRow>,
    pub summary: Vec<SummaryRow>,
}

impl RunRecord {
    /// Human-readable aligned summary table (the CSVs carry full precision).
    pub fn summary_table(&self) -> String {
        render_table(&self.summary)
    }

    pub fn results_csv(&self) -> String {
        let mut out = String::from(RepRow::CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.to_csv_row());
            out.push('\n');
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        summary_csv(&self.summary)
    }

    /// Persist the record (config echo, per-repetition results, summary CSV
    /// and text table) into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_ECHO_FILE), config::render(&self.config))?;
        fs::write(dir.join(RESULTS_FILE), self.results_csv())?;
        fs::write(dir.join(SUMMARY_FILE), self.summary_csv())?;
        fs::write(dir.join(SUMMARY_TABLE_FILE), self.summary_table())?;
        Ok(())
    }

    /// Rebuild a record from a directory `write_to` populated.
    pub fn read_from(dir: &Path) -> Result<RunRecord> {
        let config = ExperimentConfig::from_file(&dir.join(CONFIG_ECHO_FILE))?;
        let rows = read_csv(&dir.join(RESULTS_FILE), RepRow::CSV_HEADER, |fields| {
            RepRow::from_csv_fields(fields)
        })?;
        let summary = read_csv(&dir.join(SUMMARY_FILE), SummaryRow::CSV_HEADER, |fields| {
            SummaryRow::from_csv_fields(fields)
        })?;
        Ok(RunRecord {
            config,
            rows,
            summary,
        })
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SummaryRow::CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv_row());
        out.push('\n');
    }
    out
}

fn read_csv<T>(
    path: &Path,
    expected_header: &str,
    parse_row: impl Fn(&[&str]) -> Option<T>,
) -> Result<Vec<T>> {
    let file = fs::File::open(path)?;
    let name = path.display().to_string();
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if idx == 0 {
            if line != expected_header {
                return Err(ExperimentError::Csv {
                    file: name,
                    line: 1,
                    msg: format!("unexpected header `{line}`"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match parse_row(&fields) {
            Some(row) => rows.push(row),
            None => {
                return Err(ExperimentError::Csv {
                    file: name,
                    line: idx + 1,
                    msg: format!("malformed row `{line}`"),
                })
            }
        }
    }
    Ok(rows)
}

/// Trained model plus the exact config it ran under, so checkpoints echo the
/// per-repetition seed rather than the base config's.
#[derive(Debug)]
pub struct TrainedVariant {
    pub label: String,
    pub model: Mlp,
    pub train_config: TrainConfig,
    pub history: Vec<HistoryRow>,
}

/// A protocol run's full output: the record plus per-repetition artifacts
/// (histories and trained models) for persistence.
#[derive(Debug)]
pub struct ProtocolOutput {
    pub record: RunRecord,
    pub artifacts: Vec<TrainedVariant>,
}

impl ProtocolOutput {
    /// Write the record and every artifact (history CSVs, checkpoints) into
    /// the config's output directory.
    pub fn write_all(&self) -> Result<()> {
        let dir = &self.record.config.output_dir;
        self.record.write_to(dir)?;
        for artifact in &self.artifacts {
            write_history(
                &dir.join(format!("history_{}.csv", artifact.label)),
                &artifact.history,
            )?;
            save_checkpoint(
                &dir.join(format!("checkpoint_{}.flck", artifact.label)),
                &artifact.model,
                &artifact.train_config,
            )?;
        }
        Ok(())
    }
}

/// Train the bias-capturing encoder a repetition needs: either an attribute
/// classifier on a freshly synthesized disjoint split carrying `t` labels,
/// or a task classifier on the training split itself.
fn bias_encoder_for(
    cfg: &ExperimentConfig,
    rep_spec: &DatasetSpec,
    train_split: &crate::data::ColorGridDataset,
) -> Result<FrozenEncoder> {
    let encoder_cfg = TrainConfig {
        alpha: 0.0,
        epochs: BIAS_ENCODER_EPOCHS,
        task_loss: TaskLossKind::Ce,
        seed: rep_spec.seed ^ ENCODER_SEED_TAG,
        ..cfg.train
    };
    match cfg.bias_mode {
        BiasCapturingMode::AttributeSupervised => {
            let bias_spec = DatasetSpec {
                seed: rep_spec.seed ^ BIAS_SPLIT_TAG,
                n_per_class: bias_split_per_class(rep_spec.n_per_class),
                ..rep_spec.clone()
            };
            let bias_ds = generate(&bias_spec)?;
            Ok(train_bias_capturing(cfg.bias_mode, &bias_ds, &encoder_cfg)?)
        }
        BiasCapturingMode::VanillaTask => Ok(train_bias_capturing(
            cfg.bias_mode,
            train_split,
            &encoder_cfg,
        )?),
    }
}

/// Run `cfg.repetitions` repetitions of a single variant. Repetition `i`
/// synthesizes data and trains with seed `base_seed + i`; models are scored
/// on the unbiased test split.
pub fn run_variant(
    cfg: &ExperimentConfig,
    variant: &str,
    train_template: &TrainConfig,
) -> Result<(Vec<RepRow>, Vec<TrainedVariant>)> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(cfg.repetitions);
    let mut artifacts = Vec::with_capacity(cfg.repetitions);
    for rep in 0..cfg.repetitions {
        let seed = cfg.base_seed + rep as u64;
        let rep_spec = DatasetSpec {
            seed,
            ..cfg.dataset.clone()
        };
        let splits = split_for_protocol(&rep_spec)?;
        let encoder = if train_template.alpha > 0.0 {
            Some(bias_encoder_for(cfg, &rep_spec, &splits.train)?)
        } else {
            None
        };
        let train_config = TrainConfig {
            seed,
            ..*train_template
        };
        let sets = TrainSets {
            train: &splits.train,
            eval_unbiased: Some(&splits.test_unbiased),
            eval_conflict: Some(&splits.test_bias_conflict),
        };
        let outcome = train_main(&train_config, sets, encoder.as_ref())?;
        let report = evaluate(&outcome.model, &splits.test_unbiased, &QmiConfig::default())?;
        log::info!(
            "{variant} rep {rep} (seed {seed}): unbiased {:.3}, conflict {:.3}, qmi {:.4}",
            report.acc_unbiased,
            report.acc_bias_conflict,
            report.qmi
        );
        rows.push(RepRow {
            variant: variant.to_string(),
            repetition: rep,
            seed,
            report,
        });
        artifacts.push(TrainedVariant {
            label: format!("{variant}_rep{rep}"),
            model: outcome.model,
            train_config,
            history: outcome.history,
        });
    }
    Ok((rows, artifacts))
}

/// The full comparison protocol: a Vanilla (α = 0) variant and a matching
/// variant at the configured α, aggregated into summary rows.
pub fn run_protocol(cfg: &ExperimentConfig) -> Result<ProtocolOutput> {
    let vanilla_template = TrainConfig {
        alpha: 0.0,
        ..cfg.train
    };
    let (mut rows, mut artifacts) = run_variant(cfg, "vanilla", &vanilla_template)?;
    let (flac_rows, flac_artifacts) = run_variant(cfg, "flac", &cfg.train)?;
    rows.extend(flac_rows);
    artifacts.extend(flac_artifacts);
    let summary = summarize(cfg, &rows);
    Ok(ProtocolOutput {
        record: RunRecord {
            config: cfg.clone(),
            rows,
            summary,
        },
        artifacts,
    })
}

/// Group rows by variant (in first-appearance order) and aggregate each
/// group into a summary row.
pub fn summarize(cfg: &ExperimentConfig, rows: &[RepRow]) -> Vec<SummaryRow> {
    let mut order: Vec<&str> = Vec::new();
    for row in rows {
        if !order.contains(&row.variant.as_str()) {
            order.push(&row.variant);
        }
    }
    order
        .into_iter()
        .map(|variant| {
            let group: Vec<RepRow> = rows
                .iter()
                .filter(|r| r.variant == variant)
                .cloned()
                .collect();
            SummaryRow::aggregate(variant, cfg.train.task_loss, cfg.dataset.q, &group)
        })
        .collect()
}

/// Run the protocol and persist everything into `cfg.output_dir`.
pub fn run_to_dir(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let output = run_protocol(cfg)?;
    output.write_all()?;
    Ok(output.record)
}

const TABLE_COLUMNS: [&str; 8] = [
    "variant",
    "task_loss",
    "q",
    "acc_unbiased",
    "acc_conflict",
    "qmi",
    "p_rule",
    "mistreat",
];

/// Fixed-width text rendering of summary rows, mean ± std for the accuracy
/// columns and means elsewhere.
pub fn render_table(rows: &[SummaryRow]) -> String {
    let cells: Vec<[String; 8]> = rows
        .iter()
        .map(|r| {
            [
                r.variant.clone(),
                r.task_loss.to_string(),
                format!("{:.4}", r.q),
                format!("{:.3} ± {:.3}", r.acc_unbiased.mean, r.acc_unbiased.std),
                format!("{:.3} ± {:.3}", r.acc_conflict.mean, r.acc_conflict.std),
                format!("{:.4}", r.qmi.mean),
                format!("{:.3}", r.p_rule.mean),
                format!("{:.3}", r.mistreatment.mean),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = TABLE_COLUMNS.iter().map(|c| c.len()).collect();
    for row in &cells {
        for (w, cell) in widths.iter_mut().zip(row.iter()) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let mut emit = |row: &[String]| {
        let line = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect::<Vec<_>>()
            .join("  ");
        let _ = writeln!(out, "{}", line.trim_end());
    };
    emit(&TABLE_COLUMNS.map(String::from));
    emit(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>());
    for row in &cells {
        emit(row);
    }
    out
}

/// Ablation suites: each runs the repetition protocol for a family of
/// configuration variants and lines their summaries up in one table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationSuite {
    ConditionTerms,
    Kernels,
    Divergences,
    AlphaGrid,
    QSweep,
}

impl std::fmt::Display for AblationSuite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            AblationSuite::ConditionTerms => "condition_terms",
            AblationSuite::Kernels => "kernels",
            AblationSuite::Divergences => "divergences",
            AblationSuite::AlphaGrid => "alpha_grid",
            AblationSuite::QSweep => "q_sweep",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for AblationSuite {
    type Err = ExperimentError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "condition_terms" => Ok(AblationSuite::ConditionTerms),
            "kernels" => Ok(AblationSuite::Kernels),
            "divergences" => Ok(AblationSuite::Divergences),
            "alpha_grid" => Ok(AblationSuite::AlphaGrid),
            "q_sweep" => Ok(AblationSuite::QSweep),
            _ => Err(ExperimentError::UnknownSuite(s.to_string())),
        }
    }
}

pub const DEFAULT_ALPHA_GRID: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
pub const DEFAULT_Q_GRID: [f64; 3] = [0.9, 0.99, 0.995];

/// A comparative table: per-variant repetition rows plus their aggregates.
#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub suite: String,
    pub rows: Vec<RepRow>,
    pub summary: Vec<SummaryRow>,
}

impl AblationTable {
    pub fn table(&self) -> String {
        render_table(&self.summary)
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut results = String::from(RepRow::CSV_HEADER);
        results.push('\n');
        for row in &self.rows {
            results.push_str(&row.to_csv_row());
            results.push('\n');
        }
        fs::write(
            dir.join(format!("ablate_{}_results.csv", self.suite)),
            results,
        )?;
        fs::write(
            dir.join(format!("ablate_{}_summary.csv", self.suite)),
            summary_csv(&self.summary),
        )?;
        fs::write(
            dir.join(format!("ablate_{}_table.txt", self.suite)),
            self.table(),
        )?;
        Ok(())
    }
}

/// Run one ablation suite against a base configuration.
pub fn ablate(suite: AblationSuite, base: &ExperimentConfig) -> Result<AblationTable> {
    let mut rows: Vec<RepRow> = Vec::new();
    let mut summary: Vec<SummaryRow> = Vec::new();
    let push = |cfg: &ExperimentConfig,
                variant: &str,
                template: &TrainConfig,
                rows: &mut Vec<RepRow>,
                summary: &mut Vec<SummaryRow>|
     -> Result<()> {
        let (variant_rows, _) = run_variant(cfg, variant, template)?;
        summary.push(SummaryRow::aggregate(
            variant,
            template.task_loss,
            cfg.dataset.q,
            &variant_rows,
        ));
        rows.extend(variant_rows);
        Ok(())
    };
    match suite {
        AblationSuite::ConditionTerms => {
            for condition in [
                ConditionMode::Full,
                ConditionMode::A10Only,
                ConditionMode::A01Only,
            ] {
                let template = TrainConfig {
                    condition,
                    ..base.train
                };
                push(
                    base,
                    &condition.to_string(),
                    &template,
                    &mut rows,
                    &mut summary,
                )?;
            }
        }
        AblationSuite::Kernels => {
            for kernel in [
                KernelKind::StudentT,
                KernelKind::Rbf { sigma: 1.0 },
                KernelKind::Cosine,
            ] {
                let template = TrainConfig {
                    kernel,
                    ..base.train
                };
                push(
                    base,
                    &kernel.to_string(),
                    &template,
                    &mut rows,
                    &mut summary,
                )?;
            }
        }
        AblationSuite::Divergences => {
            for divergence in [
                DivergenceKind::Jeffreys,
                DivergenceKind::Kl,
                DivergenceKind::Mse,
            ] {
                let template = TrainConfig {
                    divergence,
                    ..base.train
                };
                push(
                    base,
                    &divergence.to_string(),
                    &template,
                    &mut rows,
                    &mut summary,
                )?;
            }
        }
        AblationSuite::AlphaGrid => {
            for &alpha in &DEFAULT_ALPHA_GRID {
                let template = TrainConfig {
                    alpha,
                    ..base.train
                };
                push(
                    base,
                    &format!("alpha={alpha}"),
                    &template,
                    &mut rows,
                    &mut summary,
                )?;
            }
        }
        AblationSuite::QSweep => return ablate_q_sweep(base, &DEFAULT_Q_GRID),
    }
    Ok(AblationTable {
        suite: suite.to_string(),
        rows,
        summary,
    })
}

/// The q sweep with an explicit list of bias strengths: one (Vanilla,
/// matching) pair of summary rows per q.
pub fn ablate_q_sweep(base: &ExperimentConfig, qs: &[f64]) -> Result<AblationTable> {
    if qs.is_empty() {
        return Err(ExperimentError::Config(ConfigError::Invalid(
            "q list must be nonempty".into(),
        )));
    }
    let mut rows: Vec<RepRow> = Vec::new();
    let mut summary: Vec<SummaryRow> = Vec::new();
    for &q in qs {
        let cfg = ExperimentConfig {
            dataset: DatasetSpec {
                q,
                ..base.dataset.clone()
            },
            ..base.clone()
        };
        let vanilla = TrainConfig {
            alpha: 0.0,
            ..base.train
        };
        for (variant, template) in [("vanilla", vanilla), ("flac", base.train)] {
            let (variant_rows, _) = run_variant(&cfg, variant, &template)?;
            summary.push(SummaryRow::aggregate(
                variant,
                template.task_loss,
                q,
                &variant_rows,
            ));
            rows.extend(variant_rows);
        }
    }
    Ok(AblationTable {
        suite: AblationSuite::QSweep.to_string(),
        rows,
        summary,
    })
}

/// Grid-search outcome: the comparative table plus the winning α.
#[derive(Debug, Clone, Serialize)]
pub struct GridSearchOutcome {
    pub table: AblationTable,
    pub best_alpha: f64,
}

/// Try each α in `grid` under the full repetition protocol (plus a Vanilla
/// reference row) and pick the α with the highest mean unbiased accuracy;
/// ties go to the smaller α.
pub fn gridsearch_alpha(base: &ExperimentConfig, grid: &[f64]) -> Result<GridSearchOutcome> {
    if grid.is_empty() {
        return Err(ExperimentError::Config(ConfigError::Invalid(
            "alpha grid must be nonempty".into(),
        )));
    }
    let mut rows: Vec<RepRow> = Vec::new();
    let mut summary: Vec<SummaryRow> = Vec::new();
    let vanilla = TrainConfig {
        alpha: 0.0,
        ..base.train
    };
    let (vanilla_rows, _) = run_variant(base, "vanilla", &vanilla)?;
    summary.push(SummaryRow::aggregate(
        "vanilla",
        vanilla.task_loss,
        base.dataset.q,
        &vanilla_rows,
    ));
    rows.extend(vanilla_rows);
    let mut best = (f64::NEG_INFINITY, f64::INFINITY);
    for &alpha in grid {
        let template = TrainConfig {
            alpha,
            ..base.train
        };
        let variant = format!("alpha={alpha}");
        let (variant_rows, _) = run_variant(base, &variant, &template)?;
        let row =
            SummaryRow::aggregate(&variant, template.task_loss, base.dataset.q, &variant_rows);
        if row.acc_unbiased.mean > best.0 || (row.acc_unbiased.mean == best.0 && alpha < best.1) {
            best = (row.acc_unbiased.mean, alpha);
        }
        summary.push(row);
        rows.extend(variant_rows);
    }
    Ok(GridSearchOutcome {
        table: AblationTable {
            suite: "alpha_gridsearch".into(),
            rows,
            summary,
        },
        best_alpha: best.1,
    })
}
