//! Task losses: multi-class cross-entropy and the supervised contrastive
//! objective, both recorded on the tape.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("logits must be [N, C], got {0:?}")]
    BadShape(Vec<usize>),
    #[error("batch size mismatch: {labels} labels vs {rows} rows")]
    BatchMismatch { labels: usize, rows: usize },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Mean negative log-softmax probability of the true class.
///
/// Numerically stabilized by subtracting each row's max as a constant; the
/// shift cancels identically in the loss value, so gradients are exact.
pub fn cross_entropy(tape: &mut Tape, logits: Var, y: &[usize]) -> Result<Var> {
    let shape = tape.value(logits).shape.clone();
    let [n, c] = shape[..] else {
        return Err(LossError::BadShape(shape));
    };
    if y.len() != n {
        return Err(LossError::BatchMismatch {
            labels: y.len(),
            rows: n,
        });
    }
    for (row, &label) in y.iter().enumerate() {
        if label >= c {
            return Err(LossError::LabelOutOfRange {
                row,
                label,
                classes: c,
            });
        }
    }

    let row_max: Vec<f64> = (0..n)
        .map(|i| {
            tape.value(logits).data[i * c..(i + 1) * c]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let mut max_full = Vec::with_capacity(n * c);
    for &m in &row_max {
        max_full.extend(std::iter::repeat_n(m, c));
    }
    let max_const = tape.constant(Tensor::new(vec![n, c], max_full)?);
    let shifted = tape.sub(logits, max_const)?;

    let exp = tape.exp(shifted)?;
    let ones = tape.constant(Tensor::ones(vec![c, 1]));
    let row_sums = tape.matmul(exp, ones)?; // [n, 1]
    let log_z = tape.log(row_sums)?;
    let log_z_flat = tape.index_select(log_z, &(0..n).collect::<Vec<_>>())?;

    let true_idx: Vec<usize> = y
        .iter()
        .enumerate()
        .map(|(i, &label)| i * c + label)
        .collect();
    let true_shifted = tape.index_select(shifted, &true_idx)?;

    let log_prob = tape.sub(true_shifted, log_z_flat)?;
    let mean = tape.mean(log_prob)?;
    Ok(tape.neg(mean)?)
}

/// Supervised contrastive loss over L2-normalized representations.
///
/// For each anchor with at least one same-label partner, the positives' mean
/// log-probability against all other samples is maximized (temperature-scaled
/// cosine similarities). Anchors without positives are skipped; a batch with
/// no valid anchor yields a constant zero.
pub fn supcon_loss(tape: &mut Tape, repr: Var, y: &[usize], temperature: f64) -> Result<Var> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(LossError::BadTemperature(temperature));
    }
    let shape = tape.value(repr).shape.clone();
    let [n, d] = shape[..] else {
        return Err(LossError::BadShape(shape));
    };
    if y.len() != n {
        return Err(LossError::BatchMismatch {
            labels: y.len(),
            rows: n,
        });
    }

    let valid_anchors: Vec<usize> = (0..n)
        .filter(|&i| y.iter().enumerate().any(|(j, &yj)| j != i && yj == y[i]))
        .collect();
    if valid_anchors.is_empty() {
        return Ok(tape.scalar_const(0.0));
    }

    // Unit-normalize rows, then sim(i, j) = 1 − ‖ẑi − ẑj‖²/2.
    let sq = tape.mul(repr, repr)?;
    let ones_col = tape.constant(Tensor::ones(vec![d, 1]));
    let row_sumsq = tape.matmul(sq, ones_col)?;
    let guarded = tape.add_scalar(row_sumsq, 1e-24)?;
    let norms = tape.sqrt(guarded)?;
    let ones_row = tape.constant(Tensor::ones(vec![1, d]));
    let norm_mat = tape.matmul(norms, ones_row)?;
    let unit = tape.div(repr, norm_mat)?;
    let dist = tape.l2_distance_rowpairs(unit, unit)?;
    let dist_sq = tape.mul(dist, dist)?;
    let neg_half = tape.mul_scalar(dist_sq, -0.5)?;
    let sims = tape.add_scalar(neg_half, 1.0)?;
    let scaled = tape.mul_scalar(sims, 1.0 / temperature)?; // [n, n]
    let exp_scaled = tape.exp(scaled)?;

    let mut anchor_terms = Vec::with_capacity(valid_anchors.len());
    for &i in &valid_anchors {
        let others: Vec<usize> = (0..n).filter(|&j| j != i).map(|j| i * n + j).collect();
        let denom_terms = tape.index_select(exp_scaled, &others)?;
        let denom = tape.sum(denom_terms)?;
        let log_denom = tape.log(denom)?;

        let positives: Vec<usize> = (0..n)
            .filter(|&j| j != i && y[j] == y[i])
            .map(|j| i * n + j)
            .collect();
        let pos_logits = tape.index_select(scaled, &positives)?;
        let log_probs = tape.sub(pos_logits, log_denom)?;
        let mean_log_prob = tape.mean(log_probs)?;
        anchor_terms.push(mean_log_prob);
    }
    let stacked = tape.concat(&anchor_terms)?;
    let mean_over_anchors = tape.mean(stacked)?;
    Ok(tape.neg(mean_over_anchors)?)
}
