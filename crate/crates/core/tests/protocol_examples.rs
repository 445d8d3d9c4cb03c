//! End-to-end checks of the comparison protocol's operating contract beyond
//! the acceptance gate: a smoke-scale full run finishes fast with every
//! report field populated, the q sweep lays out one (vanilla, flac) pair per
//! bias strength, and the divergence suite ranks Jeffreys at or above MSE at
//! benchmark scale.

use std::time::{Duration, Instant};

use flac_core::config::ExperimentConfig;
use flac_core::data::DatasetSpec;
use flac_core::experiment::{ablate, ablate_q_sweep, run_protocol, AblationSuite};
use flac_core::train::TrainConfig;

/// One repetition at one tenth of benchmark size: 2000 samples total, five
/// epochs.
fn smoke_config() -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec {
            n_classes: 10,
            grid: 8,
            q: 0.99,
            n_per_class: 200,
            seed: 0,
            noise_std: 0.05,
        },
        train: TrainConfig {
            alpha: 1.0,
            epochs: 5,
            ..TrainConfig::default()
        },
        repetitions: 1,
        base_seed: 3,
        ..ExperimentConfig::default()
    }
}

#[test]
fn smoke_run_completes_quickly_with_fully_populated_summary() {
    let started = Instant::now();
    let output = run_protocol(&smoke_config()).expect("smoke protocol run");
    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(60),
        "smoke run took {elapsed:?}"
    );

    let record = output.record;
    assert_eq!(
        record.rows.len(),
        2,
        "one repetition each of vanilla and flac"
    );
    for row in &record.rows {
        let r = &row.report;
        for (name, value) in [
            ("acc_overall", r.acc_overall),
            ("acc_unbiased", r.acc_unbiased),
            ("acc_bias_conflict", r.acc_bias_conflict),
            ("qmi", r.qmi),
            ("p_rule", r.p_rule),
            ("dfpr", r.dfpr),
            ("dfnr", r.dfnr),
            ("mistreatment", r.mistreatment),
        ] {
            assert!(
                value.is_finite(),
                "{} {name} not populated: {value}",
                row.variant
            );
        }
    }
    assert_eq!(record.summary.len(), 2);
    for s in &record.summary {
        assert!(!s.seeds.is_empty(), "{} summary lists no seeds", s.variant);
        for (name, st) in [
            ("acc_unbiased", &s.acc_unbiased),
            ("acc_conflict", &s.acc_conflict),
            ("qmi", &s.qmi),
            ("p_rule", &s.p_rule),
            ("mistreatment", &s.mistreatment),
        ] {
            assert!(
                st.mean.is_finite() && st.std.is_finite(),
                "{} {name} not populated: {st:?}",
                s.variant
            );
        }
    }
    println!("PASS smoke run: 2 summary rows fully populated in {elapsed:.2?} (< 60s)");
}

#[test]
fn q_sweep_emits_one_vanilla_flac_pair_per_q() {
    let cfg = ExperimentConfig {
        dataset: DatasetSpec {
            n_classes: 3,
            grid: 4,
            q: 0.95,
            n_per_class: 60,
            seed: 0,
            noise_std: 0.05,
        },
        train: TrainConfig {
            alpha: 0.5,
            epochs: 2,
            batch_size: 32,
            ..TrainConfig::default()
        },
        repetitions: 1,
        base_seed: 1,
        ..ExperimentConfig::default()
    };

    let table = ablate_q_sweep(&cfg, &[0.9, 0.99]).expect("q sweep");
    let layout: Vec<(&str, f64)> = table
        .summary
        .iter()
        .map(|s| (s.variant.as_str(), s.q))
        .collect();
    assert_eq!(
        layout,
        vec![
            ("vanilla", 0.9),
            ("flac", 0.9),
            ("vanilla", 0.99),
            ("flac", 0.99)
        ],
        "expected one (vanilla, flac) pair per q"
    );
    assert_eq!(table.rows.len(), 4);
    assert_eq!(table.suite, AblationSuite::QSweep.to_string());
    println!("PASS q sweep: 2 qs -> 2 (vanilla, flac) pairs");
}

#[test]
fn divergence_suite_ranks_jeffreys_at_least_mse_on_unbiased_accuracy() {
    let cfg = ExperimentConfig {
        dataset: DatasetSpec {
            n_classes: 10,
            grid: 8,
            q: 0.99,
            n_per_class: 2000,
            seed: 0,
            noise_std: 0.05,
        },
        train: TrainConfig {
            alpha: 1.0,
            epochs: 8,
            ..TrainConfig::default()
        },
        repetitions: 3,
        base_seed: 3,
        ..ExperimentConfig::default()
    };

    let table = ablate(AblationSuite::Divergences, &cfg).expect("divergence suite");
    assert_eq!(table.summary.len(), 3, "one summary row per divergence");
    let mean = |name: &str| {
        table
            .summary
            .iter()
            .find(|s| s.variant == name)
            .unwrap_or_else(|| panic!("missing {name} row"))
            .acc_unbiased
            .mean
    };
    let jeffreys = mean("jeffreys");
    let mse = mean("mse");
    assert!(
        jeffreys >= mse,
        "jeffreys unbiased accuracy {jeffreys:.3} below mse {mse:.3}"
    );
    println!(
        "PASS divergence suite: jeffreys {jeffreys:.3} >= mse {mse:.3} (kl {:.3})",
        mean("kl")
    );
}
