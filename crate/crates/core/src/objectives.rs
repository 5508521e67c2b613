//! Distillation objectives and their closed-form logit gradients.
//!
//! Every objective exists twice: as a differentiable loss recorded on a
//! [`Graph`] (used for training) and as a closed-form gradient with respect
//! to the student logits (used for diagnostics and as an independent check
//! on the autodiff engine).
//!
//! Batch convention: losses are means over the `b` rows of a batch, so the
//! autodiff gradient of `kd_loss` is `(q − p) / (b·T)` while
//! [`kd_gradient`] returns the per-sample `q − p`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, argmax, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectiveKind {
    /// Label cross-entropy only.
    #[serde(rename = "ce")]
    Ce,
    /// Cross-entropy against the teacher distribution only.
    #[serde(rename = "kd")]
    Kd,
    /// Teacher cross-entropy plus weighted label cross-entropy.
    #[serde(rename = "kd+l")]
    KdPlusLabel,
    /// Label cross-entropy with per-sample weights from the teacher's max output.
    #[serde(rename = "cwtm")]
    Cwtm,
    /// Teacher cross-entropy against targets whose non-max values are permuted.
    #[serde(rename = "dkpp")]
    Dkpp,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 5] = [
        ObjectiveKind::Ce,
        ObjectiveKind::Kd,
        ObjectiveKind::KdPlusLabel,
        ObjectiveKind::Cwtm,
        ObjectiveKind::Dkpp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::Ce => "ce",
            ObjectiveKind::Kd => "kd",
            ObjectiveKind::KdPlusLabel => "kd+l",
            ObjectiveKind::Cwtm => "cwtm",
            ObjectiveKind::Dkpp => "dkpp",
        }
    }

    pub fn needs_teacher(self) -> bool {
        self != ObjectiveKind::Ce
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(ObjectiveKind::Ce),
            "kd" => Ok(ObjectiveKind::Kd),
            "kd+l" | "kd_plus_label" | "ban+l" => Ok(ObjectiveKind::KdPlusLabel),
            "cwtm" => Ok(ObjectiveKind::Cwtm),
            "dkpp" => Ok(ObjectiveKind::Dkpp),
            other => Err(Error::Config(format!(
                "unknown objective {other:?}; expected ce, kd, kd+l, cwtm or dkpp"
            ))),
        }
    }
}

fn default_one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillObjective {
    pub kind: ObjectiveKind,
    #[serde(default = "default_one")]
    pub temperature: f64,
    /// Weight of the label term; only read by `kd+l`.
    #[serde(default = "default_one")]
    pub label_weight: f64,
    /// Seed for the permutation stream; only read by `dkpp`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation_seed: Option<u64>,
}

impl DistillObjective {
    pub fn new(kind: ObjectiveKind) -> Self {
        DistillObjective {
            kind,
            temperature: 1.0,
            label_weight: 1.0,
            permutation_seed: None,
        }
    }

    pub fn ce() -> Self {
        Self::new(ObjectiveKind::Ce)
    }

    pub fn kd() -> Self {
        Self::new(ObjectiveKind::Kd)
    }

    pub fn kd_plus_label(label_weight: f64) -> Self {
        DistillObjective {
            label_weight,
            ..Self::new(ObjectiveKind::KdPlusLabel)
        }
    }

    pub fn cwtm() -> Self {
        Self::new(ObjectiveKind::Cwtm)
    }

    pub fn dkpp(permutation_seed: u64) -> Self {
        DistillObjective {
            permutation_seed: Some(permutation_seed),
            ..Self::new(ObjectiveKind::Dkpp)
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "objective.temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.label_weight >= 0.0) || !self.label_weight.is_finite() {
            return Err(Error::Config(format!(
                "objective.label_weight must be nonnegative, got {}",
                self.label_weight
            )));
        }
        Ok(())
    }
}

/// Teacher distribution `p` and ground-truth labels `y` for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillTargets<F: Real = f64> {
    probs: Tensor<F>,
    labels: Vec<usize>,
}

impl<F: Real> DistillTargets<F> {
    pub fn new(probs: Tensor<F>, labels: Vec<usize>) -> Result<Self> {
        if probs.shape().len() != 2 {
            return Err(Error::Target(format!(
                "teacher probabilities must be [b, n], got {:?}",
                probs.shape()
            )));
        }
        let (b, n) = (probs.rows(), probs.cols());
        if labels.len() != b {
            return Err(Error::Target(format!("{} labels for batch of {b}", labels.len())));
        }
        if let Some((s, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= n) {
            return Err(Error::Target(format!("label {y} of sample {s} outside [0, {n})")));
        }
        for s in 0..b {
            let row = probs.row(s);
            if row.iter().any(|&v| !(v >= F::zero()) || !v.is_finite()) {
                return Err(Error::Target(format!("row {s} has a negative or non-finite entry")));
            }
            let total: f64 = row.iter().map(|v| v.as_f64()).sum();
            if (total - 1.0).abs() > F::SUM_TOLERANCE {
                return Err(Error::Target(format!("row {s} sums to {total}, not 1")));
            }
        }
        Ok(DistillTargets { probs, labels })
    }

    /// Targets whose teacher distribution is the one-hot label.
    pub fn one_hot(labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.is_empty() || classes == 0 {
            return Err(Error::Target("empty batch or zero classes".into()));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Argument(format!("label {y} outside [0, {classes})")));
        }
        let probs = one_hot(&labels, classes);
        Ok(DistillTargets { probs, labels })
    }

    pub fn probs(&self) -> &Tensor<F> {
        &self.probs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn batch(&self) -> usize {
        self.probs.rows()
    }

    pub fn classes(&self) -> usize {
        self.probs.cols()
    }
}

pub(crate) fn one_hot<F: Real>(labels: &[usize], classes: usize) -> Tensor<F> {
    let mut data = vec![F::zero(); labels.len() * classes];
    for (s, &y) in labels.iter().enumerate() {
        data[s * classes + y] = F::one();
    }
    Tensor::new(vec![labels.len(), classes], data).expect("one-hot shape")
}

fn check_logits<F: Real>(logits: &Tensor<F>, b: usize, n: usize) -> Result<()> {
    if logits.shape() != [b, n] {
        return Err(Error::shape(
            "objective",
            format!("logits {:?} vs targets [{b}, {n}]", logits.shape()),
        ));
    }
    Ok(())
}

fn check_labels(labels: &[usize], b: usize, n: usize) -> Result<()> {
    if labels.len() != b {
        return Err(Error::Argument(format!("{} labels for batch of {b}", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::Argument(format!("label {y} outside [0, {n})")));
    }
    Ok(())
}

/// Batch mean of `−Σᵢ pᵢ log softmax(z/T)ᵢ`.
pub fn kd_loss<F: Real>(logits: &Tensor<F>, targets: &DistillTargets<F>, temperature: F) -> Result<F> {
    check_logits(logits, targets.batch(), targets.classes())?;
    let lp = tensor::log_softmax(logits, temperature)?;
    let total: F = lp.data().iter().zip(targets.probs.data()).map(|(&l, &p)| p * l).sum();
    Ok(-total / F::of(targets.batch() as f64))
}

/// Batch mean of `−log softmax(z)_y`.
pub fn ce_loss<F: Real>(logits: &Tensor<F>, labels: &[usize]) -> Result<F> {
    let (b, n) = (logits.rows(), logits.cols());
    check_labels(labels, b, n)?;
    let lp = tensor::log_softmax(logits, F::one())?;
    let total: F = labels.iter().enumerate().map(|(s, &y)| lp.row(s)[y]).sum();
    Ok(-total / F::of(b as f64))
}

/// Per-sample gradient `q − p` with `q = softmax(z/T)`.
pub fn kd_gradient<F: Real>(logits: &Tensor<F>, targets: &DistillTargets<F>, temperature: F) -> Result<Tensor<F>> {
    check_logits(logits, targets.batch(), targets.classes())?;
    let q = tensor::softmax(logits, temperature)?;
    q.zip_map(&targets.probs, |a, b| a - b)
}

/// Per-sample gradient `q − onehot(y)` at unit temperature.
pub fn ce_gradient<F: Real>(logits: &Tensor<F>, labels: &[usize]) -> Result<Tensor<F>> {
    let (b, n) = (logits.rows(), logits.cols());
    check_labels(labels, b, n)?;
    let mut q = tensor::softmax(logits, F::one())?;
    for (s, &y) in labels.iter().enumerate() {
        q.data_mut()[s * n + y] = q.data()[s * n + y] - F::one();
    }
    Ok(q)
}

/// The distillation gradient split into the ground-truth column and the
/// remaining (dark-knowledge) columns.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientDecomposition<F: Real = f64> {
    /// `q − p` for every sample and class.
    pub total: Tensor<F>,
    /// `q[s, y_s] − p[s, y_s]`, length `b`.
    pub ground_truth_term: Vec<F>,
    /// `q − p` with the ground-truth column zeroed.
    pub dark_knowledge_term: Tensor<F>,
    /// `p[s, y_s]`, the teacher confidence that rescales the label gradient.
    pub implied_weights: Vec<F>,
    pub labels: Vec<usize>,
}

impl<F: Real> GradientDecomposition<F> {
    /// Scatters the ground-truth term back into its column and adds the dark
    /// term.
    pub fn reassemble(&self) -> Tensor<F> {
        let n = self.total.cols();
        let mut out = self.dark_knowledge_term.clone();
        for (s, (&y, &gt)) in self.labels.iter().zip(&self.ground_truth_term).enumerate() {
            out.data_mut()[s * n + y] = out.data()[s * n + y] + gt;
        }
        out
    }
}

/// Splits the unit-temperature distillation gradient per sample.
pub fn decompose_batch_gradient<F: Real>(
    logits: &Tensor<F>,
    targets: &DistillTargets<F>,
) -> Result<GradientDecomposition<F>> {
    let total = kd_gradient(logits, targets, F::one())?;
    let n = total.cols();
    let mut dark = total.clone();
    let mut gt = Vec::with_capacity(targets.batch());
    let mut weights = Vec::with_capacity(targets.batch());
    for (s, &y) in targets.labels.iter().enumerate() {
        gt.push(total.data()[s * n + y]);
        weights.push(targets.probs.data()[s * n + y]);
        dark.data_mut()[s * n + y] = F::zero();
    }
    Ok(GradientDecomposition {
        total,
        ground_truth_term: gt,
        dark_knowledge_term: dark,
        implied_weights: weights,
        labels: targets.labels.clone(),
    })
}

/// Largest teacher probability of each row.
pub fn teacher_max<F: Real>(probs: &Tensor<F>) -> Vec<F> {
    (0..probs.rows())
        .map(|s| probs.row(s).iter().copied().fold(F::neg_infinity(), F::max))
        .collect()
}

/// `w_s = max p[s,·] / Σ_u max p[u,·]`, normalized within the batch.
pub fn cwtm_weights<F: Real>(probs: &Tensor<F>) -> Result<Vec<F>> {
    if probs.shape().len() != 2 {
        return Err(Error::Target(format!("expected [b, n], got {:?}", probs.shape())));
    }
    if !probs.all_finite() || probs.data().iter().any(|&v| v < F::zero()) {
        return Err(Error::Target(
            "teacher probabilities must be finite and nonnegative".into(),
        ));
    }
    let maxes = teacher_max(probs);
    if let Some(s) = maxes.iter().position(|&m| m <= F::zero()) {
        return Err(Error::Target(format!("row {s} is all zeros")));
    }
    let total: F = maxes.iter().copied().sum();
    Ok(maxes.into_iter().map(|m| m / total).collect())
}

/// Gradient of the confidence-weighted label loss: row `s` is
/// `w_s · (q_s − onehot(y_s))`. Ground-truth labels are used even where the
/// teacher's argmax disagrees with them.
pub fn cwtm_gradient<F: Real>(logits: &Tensor<F>, labels: &[usize], teacher_probs: &Tensor<F>) -> Result<Tensor<F>> {
    let w = cwtm_weights(teacher_probs)?;
    if teacher_probs.shape() != logits.shape() {
        return Err(Error::shape(
            "cwtm_gradient",
            format!("logits {:?} vs teacher {:?}", logits.shape(), teacher_probs.shape()),
        ));
    }
    let mut g = ce_gradient(logits, labels)?;
    let n = g.cols();
    for (i, v) in g.data_mut().iter_mut().enumerate() {
        *v = *v * w[i / n];
    }
    Ok(g)
}

/// Position of one permutation draw in the training stream: one independent
/// permutation per (epoch, batch, sample).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DkppKey {
    pub seed: u64,
    pub epoch: u64,
    pub batch: u64,
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl DkppKey {
    pub fn sample_rng(&self, sample: usize) -> ChaCha8Rng {
        let mut h = splitmix64(self.seed);
        h = splitmix64(h ^ self.epoch);
        h = splitmix64(h ^ self.batch);
        h = splitmix64(h ^ sample as u64);
        ChaCha8Rng::seed_from_u64(h)
    }
}

/// Permuted-prediction target for one row: the row max goes to the
/// ground-truth index and the other `n − 1` values (everything but the first
/// occurrence of the max) are shuffled over the remaining indices.
pub fn dkpp_row<F: Real>(row: &[F], label: usize, rng: &mut ChaCha8Rng) -> Vec<F> {
    let m = argmax(row);
    let mut rest: Vec<F> = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != m)
        .map(|(_, &v)| v)
        .collect();
    rest.shuffle(rng);
    let mut out = vec![F::zero(); row.len()];
    out[label] = row[m];
    let mut it = rest.into_iter();
    for (i, slot) in out.iter_mut().enumerate() {
        if i != label {
            *slot = it.next().expect("n - 1 values for n - 1 slots");
        }
    }
    out
}

pub fn dkpp_targets<F: Real>(teacher_probs: &Tensor<F>, labels: &[usize], key: DkppKey) -> Result<Tensor<F>> {
    let (b, n) = (teacher_probs.rows(), teacher_probs.cols());
    if teacher_probs.shape().len() != 2 || n < 2 {
        return Err(Error::Target(format!(
            "permuted targets need [b, n>=2], got {:?}",
            teacher_probs.shape()
        )));
    }
    check_labels(labels, b, n)?;
    let mut data = Vec::with_capacity(b * n);
    for (s, &y) in labels.iter().enumerate() {
        let mut rng = key.sample_rng(s);
        data.extend(dkpp_row(teacher_probs.row(s), y, &mut rng));
    }
    Tensor::new(vec![b, n], data)
}

fn require_key(objective: &DistillObjective, key: Option<DkppKey>) -> Result<DkppKey> {
    key.ok_or_else(|| Error::Argument(format!("{} objective needs a permutation key", objective.kind)))
}

/// Records the training loss for `objective` on `graph`.
pub fn combined_loss<F: Real>(
    graph: &mut Graph<F>,
    objective: &DistillObjective,
    logits: Var,
    targets: &DistillTargets<F>,
    key: Option<DkppKey>,
) -> Result<Var> {
    objective.validate()?;
    let (b, n) = (targets.batch(), targets.classes());
    if graph.shape(logits) != [b, n] {
        return Err(Error::shape(
            "combined_loss",
            format!("logits {:?} vs targets [{b}, {n}]", graph.shape(logits)),
        ));
    }
    let t = F::of(objective.temperature);
    let ones = vec![F::one(); b];
    let label_loss = |g: &mut Graph<F>, weights: &[F]| -> Result<Var> {
        let lp = g.log_softmax(logits, F::one())?;
        g.weighted_nll(lp, &one_hot(targets.labels(), n), weights)
    };
    match objective.kind {
        ObjectiveKind::Ce => label_loss(graph, &ones),
        ObjectiveKind::Kd => {
            let lp = graph.log_softmax(logits, t)?;
            graph.weighted_nll(lp, targets.probs(), &ones)
        }
        ObjectiveKind::KdPlusLabel => {
            let lp = graph.log_softmax(logits, t)?;
            let kd = graph.weighted_nll(lp, targets.probs(), &ones)?;
            let ce = label_loss(graph, &ones)?;
            let ce = graph.scale(ce, F::of(objective.label_weight))?;
            graph.add(kd, ce)
        }
        ObjectiveKind::Cwtm => {
            let bf = F::of(b as f64);
            let w: Vec<F> = cwtm_weights(targets.probs())?.into_iter().map(|w| w * bf).collect();
            label_loss(graph, &w)
        }
        ObjectiveKind::Dkpp => {
            let key = require_key(objective, key)?;
            let permuted = dkpp_targets(targets.probs(), targets.labels(), key)?;
            let lp = graph.log_softmax(logits, t)?;
            graph.weighted_nll(lp, &permuted, &ones)
        }
    }
}

/// Closed-form value of the loss recorded by [`combined_loss`].
pub fn objective_value<F: Real>(
    objective: &DistillObjective,
    logits: &Tensor<F>,
    targets: &DistillTargets<F>,
    key: Option<DkppKey>,
) -> Result<F> {
    objective.validate()?;
    let t = F::of(objective.temperature);
    match objective.kind {
        ObjectiveKind::Ce => ce_loss(logits, targets.labels()),
        ObjectiveKind::Kd => kd_loss(logits, targets, t),
        ObjectiveKind::KdPlusLabel => {
            Ok(kd_loss(logits, targets, t)? + F::of(objective.label_weight) * ce_loss(logits, targets.labels())?)
        }
        ObjectiveKind::Cwtm => {
            let w = cwtm_weights(targets.probs())?;
            let lp = tensor::log_softmax(logits, F::one())?;
            Ok(-targets
                .labels()
                .iter()
                .enumerate()
                .map(|(s, &y)| w[s] * lp.row(s)[y])
                .sum::<F>())
        }
        ObjectiveKind::Dkpp => {
            let key = require_key(objective, key)?;
            let permuted = dkpp_targets(targets.probs(), targets.labels(), key)?;
            let permuted = DistillTargets {
                probs: permuted,
                labels: targets.labels.clone(),
            };
            kd_loss(logits, &permuted, t)
        }
    }
}

/// Closed-form gradient of [`combined_loss`] with respect to the logits.
pub fn closed_form_gradient<F: Real>(
    objective: &DistillObjective,
    logits: &Tensor<F>,
    targets: &DistillTargets<F>,
    key: Option<DkppKey>,
) -> Result<Tensor<F>> {
    objective.validate()?;
    let b = F::of(targets.batch() as f64);
    let t = F::of(objective.temperature);
    let mean = |g: Tensor<F>, scale: F| g.map(|v| v / (b * scale));
    match objective.kind {
        ObjectiveKind::Ce => Ok(mean(ce_gradient(logits, targets.labels())?, F::one())),
        ObjectiveKind::Kd => Ok(mean(kd_gradient(logits, targets, t)?, t)),
        ObjectiveKind::KdPlusLabel => {
            let kd = mean(kd_gradient(logits, targets, t)?, t);
            let ce = mean(ce_gradient(logits, targets.labels())?, F::one());
            let lambda = F::of(objective.label_weight);
            kd.zip_map(&ce, |a, c| a + lambda * c)
        }
        ObjectiveKind::Cwtm => cwtm_gradient(logits, targets.labels(), targets.probs()),
        ObjectiveKind::Dkpp => {
            let key = require_key(objective, key)?;
            let permuted = DistillTargets {
                probs: dkpp_targets(targets.probs(), targets.labels(), key)?,
                labels: targets.labels.clone(),
            };
            Ok(mean(kd_gradient(logits, &permuted, t)?, t))
        }
    }
}

/// One row of the per-sample gradient diagnostic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub sample_index: usize,
    pub true_class: usize,
    pub teacher_max: f64,
    pub teacher_prob_true: f64,
    pub gt_term: f64,
    pub dark_term_l1: f64,
    /// `|gt_term + Σ dark − Σ total|` for the sample.
    pub row_sum_check: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSummary {
    pub samples: usize,
    /// Mean teacher probability on the ground-truth class.
    pub mean_teacher_prob_true: f64,
    /// Fraction of samples whose teacher argmax equals the label.
    pub teacher_correct_fraction: f64,
    /// `Σ‖dark‖₁ / Σ(|gt| + ‖dark‖₁)` over the split; zero when the total
    /// gradient vanishes.
    pub dark_term_share: f64,
    /// Mean teacher probability mass off the ground-truth class.
    pub teacher_dark_mass: f64,
    /// Mean `Σ|q − p|` per sample.
    pub mean_total_l1: f64,
    pub max_row_sum_check: f64,
}

/// Per-sample diagnostic rows for a decomposition. `offset` is added to the
/// sample indices so batches can be concatenated.
pub fn diagnostic_rows<F: Real>(
    decomposition: &GradientDecomposition<F>,
    teacher_probs: &Tensor<F>,
    offset: usize,
) -> Vec<DiagnosticRow> {
    let maxes = teacher_max(teacher_probs);
    decomposition
        .labels
        .iter()
        .enumerate()
        .map(|(s, &y)| {
            let dark = decomposition.dark_knowledge_term.row(s);
            let gt = decomposition.ground_truth_term[s].as_f64();
            let dark_sum: f64 = dark.iter().map(|v| v.as_f64()).sum();
            let total_sum: f64 = decomposition.total.row(s).iter().map(|v| v.as_f64()).sum();
            DiagnosticRow {
                sample_index: offset + s,
                true_class: y,
                teacher_max: maxes[s].as_f64(),
                teacher_prob_true: decomposition.implied_weights[s].as_f64(),
                gt_term: gt,
                dark_term_l1: dark.iter().map(|v| v.as_f64().abs()).sum(),
                row_sum_check: (gt + dark_sum - total_sum).abs(),
            }
        })
        .collect()
}

pub fn summarize_diagnostics(rows: &[DiagnosticRow], teacher_correct: &[bool]) -> DiagnosticSummary {
    let n = rows.len().max(1) as f64;
    let dark: f64 = rows.iter().map(|r| r.dark_term_l1).sum();
    let gt: f64 = rows.iter().map(|r| r.gt_term.abs()).sum();
    DiagnosticSummary {
        samples: rows.len(),
        mean_teacher_prob_true: rows.iter().map(|r| r.teacher_prob_true).sum::<f64>() / n,
        teacher_correct_fraction: teacher_correct.iter().filter(|&&c| c).count() as f64 / n,
        dark_term_share: if dark + gt > 0.0 { dark / (dark + gt) } else { 0.0 },
        teacher_dark_mass: rows.iter().map(|r| 1.0 - r.teacher_prob_true).sum::<f64>() / n,
        mean_total_l1: (dark + gt) / n,
        max_row_sum_check: rows.iter().map(|r| r.row_sum_check).fold(0.0, f64::max),
    }
}

pub fn write_diagnostic_csv(path: &Path, rows: &[DiagnosticRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
    crate::pipeline::write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = Tensor<f64>;

    fn row(v: &[f64]) -> Tensor {
        T::from_rows(&[v.to_vec()]).unwrap()
    }

    fn targets(p: &[f64], y: usize) -> DistillTargets {
        DistillTargets::new(row(p), vec![y]).unwrap()
    }

    #[test]
    fn kd_loss_two_class_analytic() {
        let l = kd_loss(&row(&[0.0, 0.0]), &targets(&[0.75, 0.25], 0), 1.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn kd_loss_at_student_distribution_is_entropy() {
        let z = row(&[0.3, -1.0, 2.0]);
        let p = tensor::softmax(&z, 1.0).unwrap();
        let t = DistillTargets::new(p.clone(), vec![2]).unwrap();
        let entropy: f64 = -p.data().iter().map(|&v| v * v.ln()).sum::<f64>();
        assert!((kd_loss(&z, &t, 1.0).unwrap() - entropy).abs() < 1e-12);
        let g = kd_gradient(&z, &t, 1.0).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn kd_gradient_two_class_analytic() {
        let g = kd_gradient(&row(&[0.0, 0.0]), &targets(&[0.75, 0.25], 0), 1.0).unwrap();
        assert_eq!(g.data(), &[-0.25, 0.25]);
    }

    #[test]
    fn ce_gradient_cases() {
        let g = ce_gradient(&row(&[0.0, 0.0]), &[0]).unwrap();
        assert_eq!(g.data(), &[-0.5, 0.5]);
        assert!(matches!(ce_gradient(&row(&[0.0, 0.0]), &[2]), Err(Error::Argument(_))));
    }

    #[test]
    fn bad_teacher_rows_are_target_errors() {
        assert!(matches!(
            DistillTargets::new(row(&[0.5, 0.4]), vec![0]),
            Err(Error::Target(_))
        ));
        assert!(matches!(
            DistillTargets::new(row(&[1.2, -0.2]), vec![0]),
            Err(Error::Target(_))
        ));
        assert!(DistillTargets::new(row(&[0.5, 0.5]), vec![2]).is_err());
    }

    #[test]
    fn decomposition_three_class_example() {
        let d = decompose_batch_gradient(&row(&[0.0, 0.0, 0.0]), &targets(&[0.6, 0.3, 0.1], 0)).unwrap();
        assert!((d.ground_truth_term[0] - (1.0 / 3.0 - 0.6)).abs() < 1e-15);
        assert!((d.ground_truth_term[0] + 0.26667).abs() < 1e-5);
        let dark = d.dark_knowledge_term.data();
        assert_eq!(dark[0], 0.0);
        assert!((dark[1] - 0.03333).abs() < 1e-5);
        assert!((dark[2] - 0.23333).abs() < 1e-5);
        assert_eq!(d.implied_weights, vec![0.6]);
        assert_eq!(d.reassemble(), d.total);
    }

    #[test]
    fn cwtm_weight_examples() {
        let p = T::from_rows(&vec![vec![0.9, 0.05, 0.05]; 4]).unwrap();
        assert!(cwtm_weights(&p).unwrap().iter().all(|&w| (w - 0.25).abs() < 1e-15));
        let p = T::from_rows(&[vec![0.8, 0.2], vec![0.2, 0.2]]).unwrap();
        let w = cwtm_weights(&p).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-15 && (w[1] - 0.2).abs() < 1e-15);
        let z = T::zeros(&[2, 2]);
        assert!(matches!(cwtm_weights(&z), Err(Error::Target(_))));
    }

    #[test]
    fn cwtm_contribution_ratio_is_four_to_one() {
        // Row maxima 0.8 and 0.2; identical logits and labels isolate the weighting.
        let probs = T::from_rows(&[vec![0.8, 0.05, 0.05, 0.05, 0.05], vec![0.2; 5]]).unwrap();
        let logits = T::from_rows(&[vec![0.1, 0.4, -0.3, 0.0, 0.2], vec![0.1, 0.4, -0.3, 0.0, 0.2]]).unwrap();
        let g = cwtm_gradient(&logits, &[0, 0], &probs).unwrap();
        for i in 0..5 {
            assert!((g.row(0)[i] / g.row(1)[i] - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dkpp_examples() {
        let key = DkppKey {
            seed: 3,
            epoch: 0,
            batch: 0,
        };
        let p = row(&[0.7, 0.2, 0.1]);
        let t = dkpp_targets(&p, &[0], key).unwrap();
        let r = t.data();
        assert_eq!(r[0], 0.7);
        assert!(r[1..] == [0.2, 0.1] || r[1..] == [0.1, 0.2]);

        let p2 = row(&[0.35, 0.65]);
        let t2 = dkpp_targets(&p2, &[0], key).unwrap();
        assert_eq!(t2.data(), &[0.65, 0.35]);

        let p3 = row(&[0.2, 0.7, 0.1]);
        let t3 = dkpp_targets(&p3, &[0], key).unwrap();
        assert_eq!(t3.data()[0], 0.7);
        let mut rest = t3.data()[1..].to_vec();
        rest.sort_by(f64::total_cmp);
        assert_eq!(rest, vec![0.1, 0.2]);

        assert!(dkpp_targets(&T::ones(&[1, 1]), &[0], key).is_err());
    }

    #[test]
    fn dkpp_ties_resolve_to_lowest_index() {
        let mut rng = DkppKey {
            seed: 0,
            epoch: 0,
            batch: 0,
        }
        .sample_rng(0);
        let out = dkpp_row(&[0.1, 0.45, 0.45], 0, &mut rng);
        assert_eq!(out[0], 0.45);
        let mut rest = out[1..].to_vec();
        rest.sort_by(f64::total_cmp);
        assert_eq!(rest, vec![0.1, 0.45]);
    }

    #[test]
    fn dkpp_key_changes_draws() {
        let p = T::from_rows(&vec![vec![0.4, 0.1, 0.2, 0.15, 0.15, 0.0]; 1]).unwrap();
        let draws: std::collections::HashSet<Vec<u64>> = (0..40)
            .map(|e| {
                let key = DkppKey {
                    seed: 9,
                    epoch: e,
                    batch: 0,
                };
                dkpp_targets(&p, &[5], key)
                    .unwrap()
                    .data()
                    .iter()
                    .map(|v: &f64| v.to_bits())
                    .collect()
            })
            .collect();
        assert!(draws.len() > 10);
    }

    #[test]
    fn objective_kind_parsing() {
        for k in ObjectiveKind::ALL {
            assert_eq!(k.as_str().parse::<ObjectiveKind>().unwrap(), k);
        }
        assert!("xent".parse::<ObjectiveKind>().is_err());
        let json = serde_json::to_string(&DistillObjective::kd_plus_label(0.5)).unwrap();
        let back: DistillObjective = serde_json::from_str(&json).unwrap();
        assert_eq!(back, DistillObjective::kd_plus_label(0.5));
        let minimal: DistillObjective = serde_json::from_str(r#"{"kind":"kd"}"#).unwrap();
        assert_eq!(minimal, DistillObjective::kd());
    }

    #[test]
    fn dkpp_objective_requires_key() {
        let mut g = Graph::<f64>::new();
        let z = g.param("z", T::zeros(&[1, 3]));
        let t = targets(&[0.6, 0.3, 0.1], 0);
        assert!(combined_loss(&mut g, &DistillObjective::dkpp(1), z, &t, None).is_err());
    }
}
