//! Evaluation and fairness diagnostics.
//!
//! Accuracy comes in three flavors (overall, group-balanced, and over
//! bias-conflicting samples only). Representation–attribute dependence is
//! measured by a kernel estimate of quadratic mutual information built from
//! three information potentials; prediction-level fairness by the p% rule
//! and by differences in false-positive/false-negative rates.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::data::{linked_color, ColorGridDataset};
use crate::flac::{kernel_similarity, KernelKind};
use crate::model::{Mlp, ModelError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no samples to evaluate")]
    EmptyInput,
    #[error("prediction/label/attribute lengths differ: {0}, {1}, {2}")]
    LengthMismatch(usize, usize, usize),
    #[error("representations must be [N, d], got {0:?}")]
    NotAMatrix(Vec<usize>),
    #[error("attribute has a single class; mutual information is undefined")]
    SingleAttributeClass,
    #[error("{what} must be binary (0/1), found value {value}")]
    NotBinary { what: &'static str, value: usize },
    #[error("both groups have zero positive-prediction rate")]
    BothGroupRatesZero,
    #[error("conditioning cell (y={y}, t={t}) is empty")]
    EmptyCell { y: usize, t: usize },
    #[error(transparent)]
    Kernel(#[from] crate::flac::FlacError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Per-sample evaluation triples: prediction, target, protected attribute.
#[derive(Debug, Clone)]
pub struct GroupedPredictions {
    pub yhat: Vec<usize>,
    pub y: Vec<usize>,
    pub t: Vec<usize>,
}

impl GroupedPredictions {
    pub fn new(yhat: Vec<usize>, y: Vec<usize>, t: Vec<usize>) -> Result<Self> {
        if yhat.is_empty() {
            return Err(MetricsError::EmptyInput);
        }
        if yhat.len() != y.len() || y.len() != t.len() {
            return Err(MetricsError::LengthMismatch(yhat.len(), y.len(), t.len()));
        }
        Ok(GroupedPredictions { yhat, y, t })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Fraction of correct predictions.
pub fn accuracy(preds: &GroupedPredictions) -> f64 {
    let correct = preds
        .yhat
        .iter()
        .zip(&preds.y)
        .filter(|(a, b)| a == b)
        .count();
    correct as f64 / preds.len() as f64
}

/// Unweighted mean of per-(y, t)-cell accuracies over all cells that contain
/// samples, so over-represented groups cannot dominate the score.
pub fn unbiased_accuracy(preds: &GroupedPredictions) -> f64 {
    let mut cells: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    for i in 0..preds.len() {
        let cell = cells.entry((preds.y[i], preds.t[i])).or_insert((0, 0));
        cell.1 += 1;
        if preds.yhat[i] == preds.y[i] {
            cell.0 += 1;
        }
    }
    let n_y = preds.y.iter().collect::<BTreeSet<_>>().len();
    let n_t = preds.t.iter().collect::<BTreeSet<_>>().len();
    if cells.len() < n_y * n_t {
        warn!(
            "unbiased accuracy: {} of {} (y, t) cells are empty and excluded",
            n_y * n_t - cells.len(),
            n_y * n_t
        );
    }
    let sum: f64 = cells.values().map(|&(c, n)| c as f64 / n as f64).sum();
    sum / cells.len() as f64
}

/// Accuracy over the bias-conflicting subset (`t ≠ linked(y)`), if any.
pub fn bias_conflict_accuracy(preds: &GroupedPredictions) -> Option<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for i in 0..preds.len() {
        if preds.t[i] != linked_color(preds.y[i]) {
            total += 1;
            if preds.yhat[i] == preds.y[i] {
                correct += 1;
            }
        }
    }
    (total > 0).then(|| correct as f64 / total as f64)
}

/// How quadratic mutual information is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct QmiConfig {
    /// Drop k = l terms from the potentials. The estimator sums them as
    /// written by default; the flag exists to test the pair-counting reading.
    pub exclude_diagonal: bool,
    /// Seed for the down-sampling used to balance unequal attribute groups.
    pub balance_seed: u64,
}

/// Kernel estimate of the quadratic mutual information between
/// representations and a discrete attribute: `V_IN + V_ALL − 2·V_BTW` over
/// student-t kernel values, computed on attribute-balanced data
/// (down-sampling with a seeded shuffle when the groups are unequal).
pub fn qmi(h: &Tensor, t: &[usize], cfg: &QmiConfig) -> Result<f64> {
    let [n_rows, _] = h.shape[..] else {
        return Err(MetricsError::NotAMatrix(h.shape.clone()));
    };
    if n_rows != t.len() {
        return Err(MetricsError::LengthMismatch(n_rows, t.len(), t.len()));
    }
    if n_rows == 0 {
        return Err(MetricsError::EmptyInput);
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &ti) in t.iter().enumerate() {
        groups.entry(ti).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(MetricsError::SingleAttributeClass);
    }

    let min_count = groups.values().map(|g| g.len()).min().expect("nonempty");
    let balanced = groups.values().all(|g| g.len() == min_count);
    let selected: Vec<usize> = if balanced {
        (0..n_rows).collect()
    } else {
        warn!("attribute groups are unbalanced; down-sampling every group to {min_count}");
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.balance_seed);
        let mut keep = Vec::with_capacity(min_count * groups.len());
        for members in groups.values() {
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut rng);
            keep.extend_from_slice(&shuffled[..min_count]);
        }
        keep.sort_unstable();
        keep
    };

    let d = h.shape[1];
    let n = selected.len();
    let row = |i: usize| &h.data[selected[i] * d..selected[i] * d + d];
    let mut kernel = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let k = kernel_similarity(KernelKind::StudentT, row(i), row(j))?;
            kernel[i * n + j] = k;
            kernel[j * n + i] = k;
        }
    }

    let members_of: BTreeMap<usize, Vec<usize>> = {
        let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (pos, &orig) in selected.iter().enumerate() {
            m.entry(t[orig]).or_default().push(pos);
        }
        m
    };

    let nf = n as f64;
    let skip = |a: usize, b: usize| cfg.exclude_diagonal && a == b;

    let mut v_in = 0.0;
    for members in members_of.values() {
        for &k in members {
            for &l in members {
                if !skip(k, l) {
                    v_in += kernel[k * n + l];
                }
            }
        }
    }
    v_in /= nf * nf;

    let mut total = 0.0;
    for k in 0..n {
        for l in 0..n {
            if !skip(k, l) {
                total += kernel[k * n + l];
            }
        }
    }
    let mut v_all = 0.0;
    for members in members_of.values() {
        let jp = members.len() as f64;
        v_all += (jp / nf) * (jp / nf) * total;
    }
    v_all /= nf * nf;

    let mut v_btw = 0.0;
    for members in members_of.values() {
        let jp = members.len() as f64;
        let mut class_sum = 0.0;
        for &j in members {
            for k in 0..n {
                if !skip(j, k) {
                    class_sum += kernel[j * n + k];
                }
            }
        }
        v_btw += (jp / nf) * class_sum;
    }
    v_btw /= nf * nf;

    Ok(v_in + v_all - 2.0 * v_btw)
}

/// p% rule: the smaller of the two ratios of positive-prediction rates
/// between the binary attribute groups. 1 means parity; the classical
/// fairness bound asks for ≥ 0.8.
pub fn p_rule(preds: &GroupedPredictions, positive_class: usize) -> Result<f64> {
    let rate = |group: usize| -> Result<f64> {
        let mut pos = 0usize;
        let mut total = 0usize;
        for i in 0..preds.len() {
            match preds.t[i] {
                g if g == group => {
                    total += 1;
                    if preds.yhat[i] == positive_class {
                        pos += 1;
                    }
                }
                0 | 1 => {}
                other => {
                    return Err(MetricsError::NotBinary {
                        what: "attribute",
                        value: other,
                    })
                }
            }
        }
        if total == 0 {
            return Err(MetricsError::EmptyCell {
                y: positive_class,
                t: group,
            });
        }
        Ok(pos as f64 / total as f64)
    };
    let r0 = rate(0)?;
    let r1 = rate(1)?;
    if r0 == 0.0 && r1 == 0.0 {
        return Err(MetricsError::BothGroupRatesZero);
    }
    if r0 == 0.0 || r1 == 0.0 {
        return Ok(0.0);
    }
    Ok((r0 / r1).min(r1 / r0))
}

/// Differences in false-positive and false-negative rates across the binary
/// attribute, plus their combined magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Mistreatment {
    pub dfpr: f64,
    pub dfnr: f64,
    /// `|dfpr| + |dfnr|`.
    pub mistreatment: f64,
}

pub fn dfpr_dfnr(preds: &GroupedPredictions) -> Result<Mistreatment> {
    for i in 0..preds.len() {
        if preds.y[i] > 1 {
            return Err(MetricsError::NotBinary {
                what: "target",
                value: preds.y[i],
            });
        }
        if preds.t[i] > 1 {
            return Err(MetricsError::NotBinary {
                what: "attribute",
                value: preds.t[i],
            });
        }
    }
    // rate of predicting `predicted` within the (y, t) cell
    let cell_rate = |y: usize, t: usize, predicted: usize| -> Result<f64> {
        let mut hit = 0usize;
        let mut total = 0usize;
        for i in 0..preds.len() {
            if preds.y[i] == y && preds.t[i] == t {
                total += 1;
                if (preds.yhat[i] == 1) == (predicted == 1) {
                    hit += 1;
                }
            }
        }
        if total == 0 {
            return Err(MetricsError::EmptyCell { y, t });
        }
        Ok(hit as f64 / total as f64)
    };
    let fpr0 = cell_rate(0, 0, 1)?;
    let fpr1 = cell_rate(0, 1, 1)?;
    let fnr0 = cell_rate(1, 0, 0)?;
    let fnr1 = cell_rate(1, 1, 0)?;
    let dfpr = fpr1 - fpr0;
    let dfnr = fnr1 - fnr0;
    Ok(Mistreatment {
        dfpr,
        dfnr,
        mistreatment: dfpr.abs() + dfnr.abs(),
    })
}

/// Collapse a multi-class label to binary: 1 iff the label is in the upper
/// half of the class range.
pub fn binarize(labels: &[usize], n_classes: usize) -> Vec<usize> {
    labels
        .iter()
        .map(|&l| usize::from(l >= n_classes.div_ceil(2)))
        .collect()
}

/// Mean silhouette coefficient of a labeling over representations: how much
/// more tightly each point sits inside its own cluster than next to the
/// nearest other cluster, averaged. Near 1 means the labeling matches the
/// geometry; near 0 means it does not. Singleton clusters score 0 by
/// convention.
pub fn silhouette_score(h: &Tensor, labels: &[usize]) -> Result<f64> {
    let [n, d] = h.shape[..] else {
        return Err(MetricsError::NotAMatrix(h.shape.clone()));
    };
    if n != labels.len() {
        return Err(MetricsError::LengthMismatch(n, labels.len(), labels.len()));
    }
    if n == 0 {
        return Err(MetricsError::EmptyInput);
    }
    let clusters: BTreeSet<usize> = labels.iter().copied().collect();
    if clusters.len() < 2 {
        return Err(MetricsError::SingleAttributeClass);
    }
    let dist = |i: usize, j: usize| -> f64 {
        let (a, b) = (&h.data[i * d..i * d + d], &h.data[j * d..j * d + d]);
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (j, &lj) in labels.iter().enumerate() {
            if i != j {
                let e = sums.entry(lj).or_insert((0.0, 0));
                e.0 += dist(i, j);
                e.1 += 1;
            }
        }
        let own = sums.get(&labels[i]).copied();
        let Some((own_sum, own_count)) = own else {
            continue; // singleton cluster contributes 0
        };
        let a = own_sum / own_count as f64;
        let b = sums
            .iter()
            .filter(|&(&l, _)| l != labels[i])
            .map(|(_, &(s, c))| s / c as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Everything measured when one model meets one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub acc_overall: f64,
    pub acc_unbiased: f64,
    pub acc_bias_conflict: f64,
    pub qmi: f64,
    pub p_rule: f64,
    pub dfpr: f64,
    pub dfnr: f64,
    pub mistreatment: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "acc_overall,acc_unbiased,acc_bias_conflict,qmi,p_rule,dfpr,dfnr,mistreatment";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.acc_overall,
            self.acc_unbiased,
            self.acc_bias_conflict,
            self.qmi,
            self.p_rule,
            self.dfpr,
            self.dfnr,
            self.mistreatment
        )
    }

    pub fn from_csv_fields(fields: &[&str]) -> Option<Self> {
        if fields.len() != 8 {
            return None;
        }
        let mut vals = [0.0; 8];
        for (slot, field) in vals.iter_mut().zip(fields) {
            *slot = field.parse().ok()?;
        }
        Some(EvalReport {
            acc_overall: vals[0],
            acc_unbiased: vals[1],
            acc_bias_conflict: vals[2],
            qmi: vals[3],
            p_rule: vals[4],
            dfpr: vals[5],
            dfnr: vals[6],
            mistreatment: vals[7],
        })
    }
}

/// Run a model over a dataset and measure everything: accuracies on the raw
/// labels, QMI between representations and the attribute, and binarized
/// prediction fairness (labels collapsed to upper/lower half).
pub fn evaluate(model: &Mlp, ds: &ColorGridDataset, qmi_cfg: &QmiConfig) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let indices: Vec<usize> = (0..ds.len()).collect();
    let y = ds.targets(&indices);
    let t = ds.attributes(&indices);

    // chunked inference to keep peak memory flat on large splits
    let c = model.config.n_classes;
    let mut yhat = Vec::with_capacity(ds.len());
    let mut reprs = Vec::with_capacity(ds.len() * model.config.repr_dim);
    for chunk in indices.chunks(512) {
        let x = ds.feature_matrix(chunk);
        let (repr, logits) = model.forward_infer(&x)?;
        reprs.extend_from_slice(&repr.data);
        for i in 0..chunk.len() {
            let row = &logits.data[i * c..(i + 1) * c];
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            yhat.push(best);
        }
    }
    let repr = Tensor::new(vec![ds.len(), model.config.repr_dim], reprs).expect("repr rows");

    let preds = GroupedPredictions::new(yhat, y, t)?;
    let qmi_value = qmi(&repr, &preds.t, qmi_cfg)?;

    let bin = GroupedPredictions::new(
        binarize(&preds.yhat, ds.n_classes),
        binarize(&preds.y, ds.n_classes),
        binarize(&preds.t, ds.n_classes),
    )?;
    // A model that never predicts the positive half for either group has no
    // meaningful rate ratio; report NaN rather than failing the whole report.
    let p = match p_rule(&bin, 1) {
        Ok(v) => v,
        Err(MetricsError::BothGroupRatesZero) => {
            log::warn!("both binarized groups have zero positive rate; p_rule undefined");
            f64::NAN
        }
        Err(e) => return Err(e),
    };
    let m = dfpr_dfnr(&bin)?;

    Ok(EvalReport {
        acc_overall: accuracy(&preds),
        acc_unbiased: unbiased_accuracy(&preds),
        acc_bias_conflict: bias_conflict_accuracy(&preds).unwrap_or(f64::NAN),
        qmi: qmi_value,
        p_rule: p,
        dfpr: m.dfpr,
        dfnr: m.dfnr,
        mistreatment: m.mistreatment,
    })
}
