//! Bias mitigation by probability matching.
//!
//! Given representations `H` from the model being trained and representations
//! `B` from a frozen bias-capturing encoder, the loss pushes the per-anchor
//! similarity distribution of `H` toward the per-anchor *dissimilarity*
//! distribution of `B`, but only over pairs where similarity structure is
//! evidence of bias: same target with differing protected attribute (`a10`)
//! or differing target with the same attribute (`a01`). Attribute equality is
//! never read from labels at training time; it is inferred from `B` via a
//! kernel threshold.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

/// Floor applied to distribution numerators/denominators before division and
/// logarithms so the loss stays finite on degenerate batches.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FlacError {
    #[error("kernel inputs have mismatched dimensions: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("pairwise kernel matrix needs at least 2 rows, got {0}")]
    TooFewSamples(usize),
    #[error("rbf sigma must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("representation matrix must be [N, d], got shape {0:?}")]
    NotAMatrix(Vec<usize>),
    #[error("batch size mismatch: {labels} labels vs {rows} representation rows")]
    BatchMismatch { labels: usize, rows: usize },
    #[error("distribution supports differ: {0} vs {1} entries")]
    MismatchedSupports(usize, usize),
    #[error("pair ({i}, {j}) out of range for batch of {n}")]
    PairOutOfRange { i: usize, j: usize, n: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, FlacError>;

/// Similarity kernel mapping a pair of real vectors into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// `1 / (1 + ‖a − b‖₂)`: heavy-tailed, parameter-free, the default.
    StudentT,
    /// `exp(−‖a − b‖² / (2σ²))`.
    Rbf { sigma: f64 },
    /// Cosine similarity rescaled to `[0, 1]` as `(1 + cos) / 2`.
    Cosine,
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelKind::StudentT => write!(f, "student_t"),
            KernelKind::Rbf { sigma } => write!(f, "rbf:{sigma}"),
            KernelKind::Cosine => write!(f, "cosine"),
        }
    }
}

impl FromStr for KernelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "student_t" => Ok(KernelKind::StudentT),
            "cosine" => Ok(KernelKind::Cosine),
            "rbf" => Ok(KernelKind::Rbf { sigma: 1.0 }),
            other => {
                if let Some(sig) = other.strip_prefix("rbf:") {
                    let sigma: f64 = sig.parse().map_err(|_| format!("bad rbf sigma: {sig:?}"))?;
                    if sigma <= 0.0 {
                        return Err(format!("rbf sigma must be positive, got {sigma}"));
                    }
                    Ok(KernelKind::Rbf { sigma })
                } else {
                    Err(format!(
                        "unknown kernel {other:?} (expected student_t, rbf, rbf:<sigma>, or cosine)"
                    ))
                }
            }
        }
    }
}

impl KernelKind {
    fn validate(&self) -> Result<()> {
        if let KernelKind::Rbf { sigma } = self {
            if sigma.is_nan() || *sigma <= 0.0 {
                return Err(FlacError::InvalidSigma(*sigma));
            }
        }
        Ok(())
    }
}

/// Divergence used to match the two per-anchor distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    /// Symmetrized KL: `Σ (p_b − p_h)(ln p_b − ln p_h)`.
    Jeffreys,
    /// `Σ p_b (ln p_b − ln p_h)`.
    Kl,
    /// `Σ (p_b − p_h)²`.
    Mse,
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DivergenceKind::Jeffreys => "jeffreys",
            DivergenceKind::Kl => "kl",
            DivergenceKind::Mse => "mse",
        };
        f.write_str(s)
    }
}

impl FromStr for DivergenceKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "jeffreys" => Ok(DivergenceKind::Jeffreys),
            "kl" => Ok(DivergenceKind::Kl),
            "mse" => Ok(DivergenceKind::Mse),
            other => Err(format!(
                "unknown divergence {other:?} (expected jeffreys, kl, or mse)"
            )),
        }
    }
}

/// Which slice of the qualifying pairs the loss acts on. `Full` is the
/// method; the single-set variants exist for the condition-term ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    Full,
    A10Only,
    A01Only,
}

impl fmt::Display for ConditionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ConditionMode::Full => "full",
            ConditionMode::A10Only => "a10_only",
            ConditionMode::A01Only => "a01_only",
        };
        f.write_str(s)
    }
}

impl FromStr for ConditionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(ConditionMode::Full),
            "a10_only" | "a10" => Ok(ConditionMode::A10Only),
            "a01_only" | "a01" => Ok(ConditionMode::A01Only),
            other => Err(format!(
                "unknown condition mode {other:?} (expected full, a10_only, or a01_only)"
            )),
        }
    }
}

/// Square boolean matrix, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMat {
    n: usize,
    data: Vec<bool>,
}

impl BoolMat {
    pub fn new_false(n: usize) -> Self {
        BoolMat {
            n,
            data: vec![false; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn at(&self, i: usize, j: usize) -> bool {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.n + j] = v;
    }
}

/// Attribute-equality matrix built directly from labels. This is the oracle
/// counterpart of [`infer_attribute_equality`], for tests and diagnostics.
pub fn attribute_equality_from_labels(t: &[usize]) -> BoolMat {
    let n = t.len();
    let mut m = BoolMat::new_false(n);
    for i in 0..n {
        for j in 0..n {
            m.set(i, j, t[i] == t[j]);
        }
    }
    m
}

/// Kernel similarity between two vectors, in `[0, 1]`.
pub fn kernel_similarity(kind: KernelKind, a: &[f64], b: &[f64]) -> Result<f64> {
    kind.validate()?;
    if a.len() != b.len() {
        return Err(FlacError::DimensionMismatch(a.len(), b.len()));
    }
    let sq_dist: f64 = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    Ok(match kind {
        KernelKind::StudentT => 1.0 / (1.0 + sq_dist.sqrt()),
        KernelKind::Rbf { sigma } => (-sq_dist / (2.0 * sigma * sigma)).exp(),
        KernelKind::Cosine => {
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
            let cos = (dot / (na.max(PROB_FLOOR) * nb.max(PROB_FLOOR))).clamp(-1.0, 1.0);
            (1.0 + cos) / 2.0
        }
    })
}

/// All pairwise kernel similarities between rows of `x` (`[N, d]`, N ≥ 2).
pub fn pairwise_kernel_matrix(kind: KernelKind, x: &Tensor) -> Result<Tensor> {
    kind.validate()?;
    let [n, d] = x.shape[..] else {
        return Err(FlacError::NotAMatrix(x.shape.clone()));
    };
    if n < 2 {
        return Err(FlacError::TooFewSamples(n));
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let ri = &x.data[i * d..(i + 1) * d];
        for j in 0..=i {
            let rj = &x.data[j * d..(j + 1) * d];
            let k = kernel_similarity(kind, ri, rj)?;
            out[i * n + j] = k;
            out[j * n + i] = k;
        }
    }
    Ok(Tensor::new(vec![n, n], out).expect("square shape"))
}

/// Result of thresholding a bias-representation kernel matrix into pairwise
/// attribute-equality decisions.
#[derive(Debug, Clone)]
pub struct AttributeEquality {
    pub eq: BoolMat,
    /// Midpoint of the off-diagonal kernel range used as the decision
    /// boundary (meaningless when `degenerate`).
    pub threshold: f64,
    /// All off-diagonal kernel values coincide: no structure to threshold.
    /// The matrix is then all-false off the diagonal.
    pub degenerate: bool,
}

/// Decide which sample pairs share a protected attribute, given only kernel
/// similarities `Kb` over bias-capturing representations. A pair is inferred
/// equal iff its similarity strictly exceeds the midpoint of the observed
/// off-diagonal range. The diagonal is always true.
pub fn infer_attribute_equality(kb: &Tensor) -> Result<AttributeEquality> {
    let [n, n2] = kb.shape[..] else {
        return Err(FlacError::NotAMatrix(kb.shape.clone()));
    };
    if n != n2 || n < 2 {
        return Err(FlacError::TooFewSamples(n.min(n2)));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let v = kb.at2(i, j);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    let mut eq = BoolMat::new_false(n);
    for i in 0..n {
        eq.set(i, i, true);
    }
    if hi - lo < 1e-9 {
        warn!("attribute-equality threshold is degenerate (off-diagonal kernel range {lo}..{hi}); treating all pairs as attribute-unequal");
        return Ok(AttributeEquality {
            eq,
            threshold: (hi + lo) / 2.0,
            degenerate: true,
        });
    }
    let threshold = (hi + lo) / 2.0;
    for i in 0..n {
        for j in 0..n {
            if i != j && kb.at2(i, j) > threshold {
                eq.set(i, j, true);
            }
        }
    }
    Ok(AttributeEquality {
        eq,
        threshold,
        degenerate: false,
    })
}

/// The four ordered-pair sets partitioning `{(i, j) : i ≠ j}` by whether the
/// targets and the protected attributes match. The loss acts on
/// `s = a10 ∪ a01`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairSets {
    /// Same target, differing attribute.
    pub a10: Vec<(usize, usize)>,
    /// Differing target, same attribute.
    pub a01: Vec<(usize, usize)>,
    /// Same target, same attribute.
    pub a11: Vec<(usize, usize)>,
    /// Differing target, differing attribute.
    pub a00: Vec<(usize, usize)>,
}

impl PairSets {
    /// Qualifying pairs: `a10` then `a01`.
    pub fn s(&self) -> Vec<(usize, usize)> {
        let mut s = Vec::with_capacity(self.a10.len() + self.a01.len());
        s.extend_from_slice(&self.a10);
        s.extend_from_slice(&self.a01);
        s
    }

    pub fn select(&self, mode: ConditionMode) -> Vec<(usize, usize)> {
        match mode {
            ConditionMode::Full => self.s(),
            ConditionMode::A10Only => self.a10.clone(),
            ConditionMode::A01Only => self.a01.clone(),
        }
    }

    pub fn counts(&self) -> [usize; 4] {
        [
            self.a10.len(),
            self.a01.len(),
            self.a11.len(),
            self.a00.len(),
        ]
    }
}

/// Classify every ordered pair `(i, j)`, `i ≠ j`, by target equality and the
/// supplied attribute-equality matrix (ground truth or inferred).
pub fn build_pair_sets(y: &[usize], t_equal: &BoolMat) -> Result<PairSets> {
    let n = y.len();
    if t_equal.n() != n {
        return Err(FlacError::BatchMismatch {
            labels: n,
            rows: t_equal.n(),
        });
    }
    let mut sets = PairSets::default();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let same_y = y[i] == y[j];
            let same_t = t_equal.at(i, j);
            match (same_y, same_t) {
                (true, false) => sets.a10.push((i, j)),
                (false, true) => sets.a01.push((i, j)),
                (true, true) => sets.a11.push((i, j)),
                (false, false) => sets.a00.push((i, j)),
            }
        }
    }
    Ok(sets)
}

// Positions of each anchor's pairs within `s`, keyed by anchor `j`, plus the
// partner index `i` of each pair. BTreeMap keeps anchor order deterministic.
fn group_by_anchor(s: &[(usize, usize)]) -> BTreeMap<usize, Vec<(usize, usize)>> {
    let mut groups: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (pos, &(i, j)) in s.iter().enumerate() {
        groups.entry(j).or_default().push((pos, i));
    }
    groups
}

fn check_pairs(n: usize, s: &[(usize, usize)]) -> Result<()> {
    for &(i, j) in s {
        if i >= n || j >= n {
            return Err(FlacError::PairOutOfRange { i, j, n });
        }
    }
    Ok(())
}

/// Per-anchor similarity distribution over `s`: entry for `(i, j)` is
/// `Kh(i, j)` normalized over all pairs in `s` sharing the anchor `j`.
/// Returned values align with the order of `s`.
pub fn similarity_distribution(kh: &Tensor, s: &[(usize, usize)]) -> Result<Vec<f64>> {
    per_anchor_normalized(kh, s, |v| v, "similarity")
}

/// Per-anchor dissimilarity distribution over `s`: as above with numerator
/// `1 − Kb(i, j)`.
pub fn dissimilarity_distribution(kb: &Tensor, s: &[(usize, usize)]) -> Result<Vec<f64>> {
    per_anchor_normalized(kb, s, |v| 1.0 - v, "dissimilarity")
}

fn per_anchor_normalized(
    k: &Tensor,
    s: &[(usize, usize)],
    numerator: impl Fn(f64) -> f64,
    what: &str,
) -> Result<Vec<f64>> {
    let [n, n2] = k.shape[..] else {
        return Err(FlacError::NotAMatrix(k.shape.clone()));
    };
    if n != n2 {
        return Err(FlacError::NotAMatrix(k.shape.clone()));
    }
    check_pairs(n, s)?;
    let mut out = vec![0.0; s.len()];
    for (pos, &(i, j)) in s.iter().enumerate() {
        out[pos] = numerator(k.at2(i, j));
    }
    for (anchor, members) in group_by_anchor(s) {
        let mut denom: f64 = members.iter().map(|&(pos, _)| out[pos]).sum();
        if denom < PROB_FLOOR {
            warn!("{what} distribution for anchor {anchor} has near-zero total mass {denom}; clamping");
            denom = PROB_FLOOR;
        }
        for &(pos, _) in &members {
            out[pos] /= denom;
        }
    }
    Ok(out)
}

/// Divergence between a constant distribution `p_b` and an on-tape
/// distribution `p_h` (1-D, same length). Both are floored at [`PROB_FLOOR`]
/// before differences and logarithms; gradients flow only through `p_h`.
pub fn divergence(tape: &mut Tape, kind: DivergenceKind, p_b: &[f64], p_h: Var) -> Result<Var> {
    let ph_len = tape.value(p_h).numel();
    if p_b.len() != ph_len {
        return Err(FlacError::MismatchedSupports(p_b.len(), ph_len));
    }
    let pb_clamped: Vec<f64> = p_b.iter().map(|&v| v.max(PROB_FLOOR)).collect();
    let pb = tape.constant(Tensor::new(vec![pb_clamped.len()], pb_clamped.clone())?);
    let ph = tape.clamp_min(p_h, PROB_FLOOR)?;
    let out = match kind {
        DivergenceKind::Jeffreys => {
            let diff = tape.sub(pb, ph)?;
            let log_pb = tape.constant(Tensor::new(
                vec![pb_clamped.len()],
                pb_clamped.iter().map(|v| v.ln()).collect(),
            )?);
            let log_ph = tape.log(ph)?;
            let log_diff = tape.sub(log_pb, log_ph)?;
            let terms = tape.mul(diff, log_diff)?;
            tape.sum(terms)?
        }
        DivergenceKind::Kl => {
            let log_pb = tape.constant(Tensor::new(
                vec![pb_clamped.len()],
                pb_clamped.iter().map(|v| v.ln()).collect(),
            )?);
            let log_ph = tape.log(ph)?;
            let log_diff = tape.sub(log_pb, log_ph)?;
            let terms = tape.mul(pb, log_diff)?;
            tape.sum(terms)?
        }
        DivergenceKind::Mse => {
            let diff = tape.sub(pb, ph)?;
            let sq = tape.mul(diff, diff)?;
            tape.sum(sq)?
        }
    };
    Ok(out)
}

/// All pairwise kernel similarities over the rows of on-tape representations
/// `h` (`[N, d]`), differentiable, as `[N, N]`.
pub fn kernel_matrix_on_tape(tape: &mut Tape, kind: KernelKind, h: Var) -> Result<Var> {
    kind.validate()?;
    let [_, d] = tape.value(h).shape[..] else {
        return Err(FlacError::NotAMatrix(tape.value(h).shape.clone()));
    };
    Ok(match kind {
        KernelKind::StudentT => {
            let dist = tape.l2_distance_rowpairs(h, h)?;
            let denom = tape.add_scalar(dist, 1.0)?;
            let one = tape.scalar_const(1.0);
            tape.div(one, denom)?
        }
        KernelKind::Rbf { sigma } => {
            let dist = tape.l2_distance_rowpairs(h, h)?;
            let sq = tape.mul(dist, dist)?;
            let scaled = tape.mul_scalar(sq, -1.0 / (2.0 * sigma * sigma))?;
            tape.exp(scaled)?
        }
        KernelKind::Cosine => {
            // Normalize rows, then use ‖ẑi − ẑj‖² = 2 − 2 cos to get
            // (1 + cos)/2 = 1 − ‖ẑi − ẑj‖²/4 from the distance primitive.
            let sq = tape.mul(h, h)?;
            let ones_col = tape.constant(Tensor::ones(vec![d, 1]));
            let row_sumsq = tape.matmul(sq, ones_col)?;
            let guarded = tape.add_scalar(row_sumsq, 1e-24)?;
            let norms = tape.sqrt(guarded)?;
            let ones_row = tape.constant(Tensor::ones(vec![1, d]));
            let norm_mat = tape.matmul(norms, ones_row)?;
            let unit = tape.div(h, norm_mat)?;
            let dist = tape.l2_distance_rowpairs(unit, unit)?;
            let dist_sq = tape.mul(dist, dist)?;
            let neg_quarter = tape.mul_scalar(dist_sq, -0.25)?;
            tape.add_scalar(neg_quarter, 1.0)?
        }
    })
}

/// The realized per-pair distributions of one loss evaluation, aligned entry
/// by entry: `pairs[k]` received probability `p_h[k]` under the model and
/// `p_b[k]` under the bias encoder.
#[derive(Debug, Clone, Default)]
pub struct PairDistributions {
    pub pairs: Vec<(usize, usize)>,
    pub p_h: Vec<f64>,
    pub p_b: Vec<f64>,
}

/// Everything one loss evaluation produced, with the scalar loss still on
/// tape.
#[derive(Debug)]
pub struct FlacLossOutput {
    pub loss: Var,
    /// Pairs the divergence acted on (|s| after condition-mode selection).
    pub n_pairs: usize,
    pub n_anchors: usize,
    /// Counts of [a10, a01, a11, a00] as inferred for this batch.
    pub pair_counts: [usize; 4],
    /// Attribute-equality thresholding hit the degenerate all-equal case.
    pub degenerate_threshold: bool,
    pub distributions: PairDistributions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlacConfig {
    pub kernel: KernelKind,
    pub divergence: DivergenceKind,
    pub condition: ConditionMode,
}

impl Default for FlacConfig {
    fn default() -> Self {
        FlacConfig {
            kernel: KernelKind::StudentT,
            divergence: DivergenceKind::Jeffreys,
            condition: ConditionMode::Full,
        }
    }
}

/// The full probability-matching loss: infer attribute equality from the
/// bias representations, build pair sets against the targets, and penalize
/// divergence between the model's similarity distribution and the bias
/// encoder's dissimilarity distribution. `bias_reprs` never enters the tape,
/// so no gradient can reach the bias encoder. An empty qualifying set yields
/// a constant zero loss.
pub fn flac_loss(
    tape: &mut Tape,
    h: Var,
    bias_reprs: &Tensor,
    y: &[usize],
    cfg: &FlacConfig,
) -> Result<FlacLossOutput> {
    let n = y.len();
    if n < 2 {
        return Ok(empty_output(tape));
    }
    let kb = pairwise_kernel_matrix(cfg.kernel, bias_reprs)?;
    let inferred = infer_attribute_equality(&kb)?;
    if inferred.degenerate {
        // The bias encoder sees no structure at all (all pairwise kernels
        // coincide), so the dissimilarity side has no mass to match against;
        // no pair qualifies and the loss is a constant zero.
        let mut out = empty_output(tape);
        out.degenerate_threshold = true;
        return Ok(out);
    }
    let mut out = flac_loss_with_equality(tape, h, &kb, &inferred.eq, y, cfg)?;
    out.degenerate_threshold = inferred.degenerate;
    Ok(out)
}

/// [`flac_loss`] with the attribute-equality matrix supplied by the caller
/// (ground-truth labels in oracle mode, or a precomputed inference). `kb` is
/// still needed for the dissimilarity side.
pub fn flac_loss_with_equality(
    tape: &mut Tape,
    h: Var,
    kb: &Tensor,
    t_equal: &BoolMat,
    y: &[usize],
    cfg: &FlacConfig,
) -> Result<FlacLossOutput> {
    let n = y.len();
    let h_shape = tape.value(h).shape.clone();
    let [h_rows, _] = h_shape[..] else {
        return Err(FlacError::NotAMatrix(h_shape));
    };
    if h_rows != n {
        return Err(FlacError::BatchMismatch {
            labels: n,
            rows: h_rows,
        });
    }
    let sets = build_pair_sets(y, t_equal)?;
    let s = sets.select(cfg.condition);
    if s.is_empty() {
        let mut out = empty_output(tape);
        out.pair_counts = sets.counts();
        return Ok(out);
    }

    let p_b = dissimilarity_distribution(kb, &s)?;
    let kh = kernel_matrix_on_tape(tape, cfg.kernel, h)?;

    // Assemble p_h anchor by anchor: gather each anchor's kernel entries,
    // normalize by their (floored) sum, and concatenate. The concatenation
    // order is anchor-grouped, so p_b is re-ordered to match.
    let groups = group_by_anchor(&s);
    let mut anchor_parts = Vec::with_capacity(groups.len());
    let mut pb_grouped = Vec::with_capacity(s.len());
    let mut pairs_grouped = Vec::with_capacity(s.len());
    for (anchor, members) in &groups {
        let flat: Vec<usize> = members.iter().map(|&(_, i)| i * n + anchor).collect();
        let gathered = tape.index_select(kh, &flat)?;
        let total = tape.sum(gathered)?;
        if tape.value(total).data[0] < PROB_FLOOR {
            warn!("similarity distribution for anchor {anchor} has near-zero total mass; clamping");
        }
        let total_c = tape.clamp_min(total, PROB_FLOOR)?;
        let normalized = tape.div(gathered, total_c)?;
        anchor_parts.push(normalized);
        for &(pos, i) in members {
            pb_grouped.push(p_b[pos]);
            pairs_grouped.push((i, *anchor));
        }
    }
    let p_h = tape.concat(&anchor_parts)?;
    let loss = divergence(tape, cfg.divergence, &pb_grouped, p_h)?;

    let p_h_values = tape.value(p_h).data.clone();
    Ok(FlacLossOutput {
        loss,
        n_pairs: s.len(),
        n_anchors: groups.len(),
        pair_counts: sets.counts(),
        degenerate_threshold: false,
        distributions: PairDistributions {
            pairs: pairs_grouped,
            p_h: p_h_values,
            p_b: pb_grouped,
        },
    })
}

fn empty_output(tape: &mut Tape) -> FlacLossOutput {
    FlacLossOutput {
        loss: tape.scalar_const(0.0),
        n_pairs: 0,
        n_anchors: 0,
        pair_counts: [0; 4],
        degenerate_threshold: false,
        distributions: PairDistributions::default(),
    }
}

/// Summary of kernel values restricted to one pair set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetStats {
    pub count: usize,
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

/// Kernel-value statistics per pair set: how similar the model currently
/// makes each category of pair. Empty sets report `count == 0` and no stats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSetStats {
    pub a10: SetStats,
    pub a01: SetStats,
    pub a11: SetStats,
    pub a00: SetStats,
}

pub fn pair_set_similarity_stats(kh: &Tensor, sets: &PairSets) -> Result<PairSetStats> {
    let stats_of = |pairs: &[(usize, usize)]| -> Result<SetStats> {
        if pairs.is_empty() {
            return Ok(SetStats {
                count: 0,
                mean: None,
                min: None,
                max: None,
            });
        }
        check_pairs(kh.shape[0], pairs)?;
        let mut sum = 0.0;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &(i, j) in pairs {
            let v = kh.at2(i, j);
            sum += v;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        Ok(SetStats {
            count: pairs.len(),
            mean: Some(sum / pairs.len() as f64),
            min: Some(lo),
            max: Some(hi),
        })
    };
    Ok(PairSetStats {
        a10: stats_of(&sets.a10)?,
        a01: stats_of(&sets.a01)?,
        a11: stats_of(&sets.a11)?,
        a00: stats_of(&sets.a00)?,
    })
}
