//! Teacher training, born-again generation chains and ensembling.

mod ensemble;
mod eval;
mod run;

pub use ensemble::{ensemble_predict, mean_of, EnsembleMode, EnsemblePredictor};
pub use eval::{error_rate, evaluate, perplexity_from_nll, token_nll, Metric, Predictor};
pub use run::{read_metrics_csv, write_atomic, write_json_atomic, EpochMetrics, RunWriter};

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{augment_images, epoch_order, Input, Split, Splits};
use crate::error::{Error, Result};
use crate::models::{build, forward_bound, save_checkpoint, share_and_freeze, Model, ModelSpec, TeacherSnapshot};
use crate::objectives::{combined_loss, cwtm_weights, DistillObjective, DistillTargets, DkppKey, ObjectiveKind};
use crate::par;
use crate::tensor::{Real, Tensor};

/// Learning-rate policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// Multiply by `factor` at the start of each listed (0-based) epoch.
    Step { milestones: Vec<usize>, factor: f64 },
    /// Multiply by `factor` whenever the validation metric fails to improve
    /// on the previous epoch by more than `min_delta`.
    Adaptive {
        factor: f64,
        #[serde(default)]
        min_delta: f64,
    },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Step {
            milestones: Vec::new(),
            factor: 0.1,
        }
    }
}

impl LrSchedule {
    /// Step-rule rate for `epoch`; adaptive schedules return `base`.
    pub fn step_lr(&self, base: f64, epoch: usize) -> f64 {
        match self {
            LrSchedule::Step { milestones, factor } => {
                base * factor.powi(milestones.iter().filter(|&&m| m <= epoch).count() as i32)
            }
            LrSchedule::Adaptive { .. } => base,
        }
    }
}

fn default_objective() -> DistillObjective {
    DistillObjective::ce()
}

/// Optimization settings for one generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_objective")]
    pub objective: DistillObjective,
    #[serde(default)]
    pub metric: Metric,
    /// Precompute teacher probabilities once instead of per batch. Only
    /// equivalent when inputs are not augmented, so it is ignored otherwise.
    #[serde(default)]
    pub cache_teacher: bool,
    /// Pad-and-crop plus horizontal flip on image inputs.
    #[serde(default)]
    pub augment: bool,
    /// Copy the teacher's stem and head into each student and keep them fixed.
    #[serde(default)]
    pub freeze_shared: bool,
    /// Rescale gradients whose global L2 norm exceeds this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, lr: f64) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            lr,
            momentum: 0.9,
            weight_decay: 0.0,
            schedule: LrSchedule::default(),
            seed: 0,
            objective: DistillObjective::ce(),
            metric: Metric::ErrorRate,
            cache_teacher: false,
            augment: false,
            freeze_shared: false,
            max_grad_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("train.epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("train.lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("train.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad(format!(
                "train.weight_decay must be nonnegative, got {}",
                self.weight_decay
            ));
        }
        let factor = match &self.schedule {
            LrSchedule::Step { milestones, factor } => {
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return bad("train.schedule.milestones must be strictly increasing".into());
                }
                *factor
            }
            LrSchedule::Adaptive { factor, min_delta } => {
                if !(*min_delta >= 0.0) {
                    return bad("train.schedule.min_delta must be nonnegative".into());
                }
                *factor
            }
        };
        if !(factor > 0.0 && factor < 1.0) {
            return bad(format!("train.schedule.factor must lie in (0, 1), got {factor}"));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return bad(format!("train.max_grad_norm must be positive, got {c}"));
            }
        }
        self.objective.validate()
    }
}

/// Summary of one trained generation, serialized as `record.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    /// 0 for the teacher.
    pub generation: usize,
    pub seed: u64,
    pub objective: ObjectiveKind,
    pub spec: ModelSpec,
    /// Generation this one was distilled from.
    pub teacher_generation: Option<usize>,
    pub teacher_checksum: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub param_checksum: String,
    pub metric: Metric,
    pub epochs: usize,
    pub final_lr: f64,
    pub final_train_loss: f64,
    pub val_metric: f64,
    pub test_metric: f64,
    pub frozen: Vec<String>,
    /// Excluded from reproducibility comparisons.
    pub wall_clock_secs: f64,
}

/// A trained model and its record.
#[derive(Clone, Debug)]
pub struct TrainedGeneration<F: Real = f64> {
    pub record: GenerationRecord,
    pub model: Model<F>,
    pub history: Vec<EpochMetrics>,
}

impl<F: Real> TrainedGeneration<F> {
    pub fn snapshot(&self) -> TeacherSnapshot<F> {
        TeacherSnapshot::new(&self.model, self.record.generation)
    }
}

/// Where and as which generation a training run happens.
#[derive(Clone, Debug, Default)]
pub struct GenerationContext {
    pub generation: usize,
    /// Directory for checkpoint, metrics and record; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
}

struct Sgd<F: Real> {
    velocity: Vec<Tensor<F>>,
}

impl<F: Real> Sgd<F> {
    fn new(model: &Model<F>) -> Self {
        Sgd {
            velocity: model.params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Momentum SGD with L2 weight decay; frozen parameters are neither
    /// updated nor decayed.
    fn step(&mut self, model: &mut Model<F>, grads: &[Tensor<F>], frozen: &[bool], lr: f64, cfg: &TrainConfig) {
        let (lr, mu, wd) = (F::of(lr), F::of(cfg.momentum), F::of(cfg.weight_decay));
        let names: Vec<String> = model.params.names().map(str::to_string).collect();
        for (i, name) in names.iter().enumerate() {
            if frozen[i] {
                continue;
            }
            let theta = model.params.get_mut(name).expect("parameter");
            let v = self.velocity[i].data_mut();
            for ((t, vj), &g) in theta.data_mut().iter_mut().zip(v.iter_mut()).zip(grads[i].data()) {
                *vj = mu * *vj + g + wd * *t;
                *t = *t - lr * *vj;
            }
        }
    }
}

fn teacher_probs_cached<F: Real, S: Split>(
    teacher: &TeacherSnapshot<F>,
    split: &S,
    temperature: F,
    chunk: usize,
) -> Result<Vec<Tensor<F>>> {
    let n = split.len();
    let parts = par::map_range(n.div_ceil(chunk), |c| -> Result<Vec<Tensor<F>>> {
        let idx: Vec<usize> = (c * chunk..((c + 1) * chunk).min(n)).collect();
        let b = idx.len();
        let probs = teacher.probs(&split.batch::<F>(&idx).input, temperature)?;
        let rows = probs.rows() / b;
        let cols = probs.cols();
        Ok((0..b)
            .map(|i| {
                let data = (0..rows).flat_map(|t| probs.row(t * b + i).iter().copied()).collect();
                Tensor::new(vec![rows, cols], data).expect("cached rows")
            })
            .collect())
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Reassembles cached per-sample rows in the step-major batch layout.
fn gather_cached<F: Real>(cache: &[Tensor<F>], idx: &[usize]) -> Result<Tensor<F>> {
    let b = idx.len();
    let rows = cache[idx[0]].rows();
    let cols = cache[idx[0]].cols();
    let mut data = Vec::with_capacity(b * rows * cols);
    for t in 0..rows {
        for &i in idx {
            data.extend_from_slice(cache[i].row(t));
        }
    }
    Tensor::new(vec![b * rows, cols], data)
}

#[derive(Serialize)]
struct DivergenceReport<'a> {
    generation: usize,
    epoch: usize,
    batch: usize,
    loss: f64,
    detail: &'a str,
}

#[derive(Default)]
struct WeightStats {
    values: Vec<f64>,
}

impl WeightStats {
    fn row(&self, epoch: usize) -> [String; 5] {
        let n = self.values.len().max(1) as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        let var = self.values.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        [
            epoch.to_string(),
            min.to_string(),
            mean.to_string(),
            max.to_string(),
            var.sqrt().to_string(),
        ]
    }
}

/// Trains one generation to the end of its schedule. `teacher` is required
/// exactly when the objective reads teacher outputs.
pub fn train_generation<F: Real, S: Split>(
    spec: &ModelSpec,
    config: &TrainConfig,
    teacher: Option<&TeacherSnapshot<F>>,
    data: &Splits<S>,
    ctx: &GenerationContext,
) -> Result<TrainedGeneration<F>> {
    let started = Instant::now();
    config.validate()?;
    let objective = &config.objective;
    let needs = objective.kind.needs_teacher();
    let teacher = match (needs, teacher) {
        (true, None) => {
            return Err(Error::Config(format!("objective {} needs a teacher", objective.kind)));
        }
        (true, Some(t)) => Some(t),
        (false, _) => None,
    };
    if let Some(t) = teacher {
        if t.spec.num_classes != spec.num_classes {
            return Err(Error::Config(format!(
                "teacher has {} classes, student spec has {}",
                t.spec.num_classes, spec.num_classes
            )));
        }
    }
    if spec.num_classes != data.train.num_classes() {
        return Err(Error::Config(format!(
            "model has {} classes, data has {}",
            spec.num_classes,
            data.train.num_classes()
        )));
    }
    let n = data.train.len();
    if config.batch_size > n {
        return Err(Error::Config(format!(
            "train.batch_size {} exceeds {n} training samples",
            config.batch_size
        )));
    }

    let mut model: Model<F> = build(spec)?.cast();
    let frozen_names = match (config.freeze_shared, teacher, ctx.generation) {
        (true, Some(t), k) if k > 0 => share_and_freeze(&mut model, &t.params)?,
        _ => Vec::new(),
    };
    let frozen: Vec<bool> = model
        .params
        .names()
        .map(|n| frozen_names.iter().any(|f| f == n))
        .collect();
    let teacher_checksum = teacher.map(|t| t.params.checksum());

    let mut writer = match &ctx.out_dir {
        Some(dir) => Some(RunWriter::create(dir, objective.kind == ObjectiveKind::Cwtm)?),
        None => None,
    };
    let temperature = F::of(objective.temperature);
    let augment = config.augment && data.train.is_image();
    let cache = match teacher {
        Some(t) if config.cache_teacher && !augment => {
            Some(teacher_probs_cached(t, &data.train, temperature, config.batch_size)?)
        }
        _ => None,
    };
    let permutation_seed = objective.permutation_seed.unwrap_or(config.seed);

    let mut opt = Sgd::new(&model);
    let mut lr = config.lr;
    let mut prev_val: Option<f64> = None;
    let mut history = Vec::with_capacity(config.epochs);
    let eval_batch = config.batch_size.max(64);

    for epoch in 0..config.epochs {
        if let LrSchedule::Step { .. } = config.schedule {
            lr = config.schedule.step_lr(config.lr, epoch);
        }
        let order = epoch_order(n, config.seed, epoch);
        let mut loss_sum = 0.0;
        let mut weights = WeightStats::default();
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let mut batch = data.train.batch::<F>(idx);
            if augment {
                if let Input::Dense(x) = &batch.input {
                    batch.input = Input::Dense(augment_images(x, config.seed, epoch as u64, bi as u64)?);
                }
            }
            let targets = match (teacher, &cache) {
                (Some(_), Some(c)) => DistillTargets::new(gather_cached(c, idx)?, batch.labels.clone())?,
                (Some(t), None) => DistillTargets::new(t.probs(&batch.input, temperature)?, batch.labels.clone())?,
                (None, _) => DistillTargets::one_hot(batch.labels.clone(), spec.num_classes)?,
            };
            if objective.kind == ObjectiveKind::Cwtm {
                weights
                    .values
                    .extend(cwtm_weights(targets.probs())?.iter().map(|w| w.as_f64()));
            }
            let key = DkppKey {
                seed: permutation_seed,
                epoch: epoch as u64,
                batch: bi as u64,
            };
            let diverged = |loss: f64, detail: String| -> Error {
                if let Some(dir) = &ctx.out_dir {
                    let report = DivergenceReport {
                        generation: ctx.generation,
                        epoch,
                        batch: bi,
                        loss,
                        detail: &detail,
                    };
                    let _ = write_json_atomic(&dir.join("divergence.json"), &report);
                }
                Error::Divergence { epoch, batch: bi, loss }
            };
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g);
            let step = (|| -> Result<_> {
                let logits = forward_bound(spec, &mut g, &bound, &batch.input)?;
                let loss = combined_loss(&mut g, objective, logits, &targets, Some(key))?;
                let value = g.value(loss).item().as_f64();
                let grads = g.backward(loss)?;
                Ok((value, grads))
            })();
            let (loss, grads) = match step {
                Ok(v) => v,
                Err(Error::NumericDomain { op, detail }) => {
                    return Err(diverged(f64::NAN, format!("{op}: {detail}")));
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged(loss, "non-finite loss".into()));
            }
            let mut grads: Vec<Tensor<F>> = model
                .params
                .names()
                .map(|name| grads.get(name).cloned().expect("gradient for every parameter"))
                .collect();
            if let Some(limit) = config.max_grad_norm {
                let norm = grads
                    .iter()
                    .zip(&frozen)
                    .filter(|(_, &f)| !f)
                    .flat_map(|(g, _)| g.data().iter().map(|v| v.as_f64().powi(2)))
                    .sum::<f64>()
                    .sqrt();
                if norm > limit {
                    let s = F::of(limit / norm);
                    grads = grads.iter().map(|g| g.map(|v| v * s)).collect();
                }
            }
            opt.step(&mut model, &grads, &frozen, lr, config);
            loss_sum += loss * idx.len() as f64;
        }
        let train_loss = loss_sum / n as f64;
        let val_metric = evaluate(&model, &data.val, config.metric, eval_batch)?;
        let test_metric = evaluate(&model, &data.test, config.metric, eval_batch)?;
        let row = EpochMetrics {
            epoch,
            lr,
            train_loss,
            val_metric,
            test_metric,
        };
        if let Some(w) = writer.as_mut() {
            w.push_epoch(&row)?;
            if objective.kind == ObjectiveKind::Cwtm {
                w.push_weights(weights.row(epoch))?;
            }
        }
        history.push(row);
        if let LrSchedule::Adaptive { factor, min_delta } = config.schedule {
            if let Some(prev) = prev_val {
                if val_metric > prev - min_delta {
                    lr *= factor;
                }
            }
        }
        prev_val = Some(val_metric);
    }

    let last = history.last().expect("at least one epoch");
    let checkpoint = match &ctx.out_dir {
        Some(dir) => {
            let path = dir.join("checkpoint.banf");
            save_checkpoint(&path, spec, &model.params, ctx.generation as u32)?;
            Some(path)
        }
        None => None,
    };
    let record = GenerationRecord {
        generation: ctx.generation,
        seed: spec.seed,
        objective: objective.kind,
        spec: spec.clone(),
        teacher_generation: teacher.map(|t| t.generation),
        teacher_checksum,
        checkpoint,
        param_checksum: model.params.checksum(),
        metric: config.metric,
        epochs: config.epochs,
        final_lr: last.lr,
        final_train_loss: last.train_loss,
        val_metric: last.val_metric,
        test_metric: last.test_metric,
        frozen: frozen_names,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &ctx.out_dir {
        write_json_atomic(&dir.join("record.json"), &record)?;
    }
    Ok(TrainedGeneration { record, model, history })
}

/// A born-again chain: generation 0 trained with label cross-entropy,
/// generation `k` distilled from generation `k − 1`.
#[derive(Clone, Debug)]
pub struct BanPlan {
    /// One spec (every generation shares the architecture) or
    /// `generations + 1` specs (cross-architecture chain).
    pub specs: Vec<ModelSpec>,
    pub teacher_config: TrainConfig,
    /// Defaults to the teacher's configuration with the plan's objective.
    pub student_config: Option<TrainConfig>,
    /// Number of student generations after the teacher.
    pub generations: usize,
    /// Run directory; generation `k` writes to `<out_dir>/gen<k>`.
    pub out_dir: Option<PathBuf>,
}

impl BanPlan {
    pub fn new(spec: ModelSpec, config: TrainConfig, generations: usize) -> Self {
        BanPlan {
            specs: vec![spec],
            teacher_config: config,
            student_config: None,
            generations,
            out_dir: None,
        }
    }

    fn spec_for(&self, k: usize) -> &ModelSpec {
        if self.specs.len() == 1 {
            &self.specs[0]
        } else {
            &self.specs[k]
        }
    }
}

/// Generations completed so far and, if the chain stopped early, why.
#[derive(Debug)]
pub struct BanOutcome<F: Real = f64> {
    pub generations: Vec<TrainedGeneration<F>>,
    pub failure: Option<Error>,
}

impl<F: Real> BanOutcome<F> {
    pub fn records(&self) -> Vec<GenerationRecord> {
        self.generations.iter().map(|g| g.record.clone()).collect()
    }

    pub fn into_result(self) -> Result<Vec<TrainedGeneration<F>>> {
        match self.failure {
            Some(e) => Err(e),
            None => Ok(self.generations),
        }
    }
}

pub fn generation_dir(out_dir: &Path, k: usize) -> PathBuf {
    out_dir.join(format!("gen{k}"))
}

/// Runs the chain serially. Each generation uses seed `base_seed + k` for
/// both initialization and data order. A failing generation stops the chain;
/// earlier generations are kept (and already on disk when `out_dir` is set).
pub fn run_ban_sequence<F: Real, S: Split>(plan: &BanPlan, data: &Splits<S>) -> Result<BanOutcome<F>> {
    run_ban_from(plan, data, None)
}

/// Like [`run_ban_sequence`], but when `teacher` is given generation 0 is not
/// trained; the chain starts at generation 1 distilling from that snapshot.
/// The returned generations then start at 1.
pub fn run_ban_from<F: Real, S: Split>(
    plan: &BanPlan,
    data: &Splits<S>,
    teacher: Option<TeacherSnapshot<F>>,
) -> Result<BanOutcome<F>> {
    if plan.generations == 0 && plan.specs.len() != 1 {
        return Err(Error::Config("a chain needs at least one generation".into()));
    }
    if plan.specs.len() != 1 && plan.specs.len() != plan.generations + 1 {
        return Err(Error::Config(format!(
            "{} specs for {} generations: give one spec or generations + 1",
            plan.specs.len(),
            plan.generations
        )));
    }
    let student_base = plan
        .student_config
        .clone()
        .unwrap_or_else(|| plan.teacher_config.clone());
    student_base.validate()?;
    let base_seed = plan.teacher_config.seed;
    let first = if teacher.is_some() { 1 } else { 0 };
    let mut previous = teacher;
    let mut done: Vec<TrainedGeneration<F>> = Vec::new();
    for k in first..=plan.generations {
        let seed = base_seed.wrapping_add(k as u64);
        let spec = ModelSpec {
            seed,
            ..plan.spec_for(k).clone()
        };
        let config = if k == 0 {
            TrainConfig {
                seed,
                objective: DistillObjective {
                    kind: ObjectiveKind::Ce,
                    ..plan.teacher_config.objective.clone()
                },
                ..plan.teacher_config.clone()
            }
        } else {
            TrainConfig {
                seed,
                ..student_base.clone()
            }
        };
        let ctx = GenerationContext {
            generation: k,
            out_dir: plan.out_dir.as_ref().map(|d| generation_dir(d, k)),
        };
        match train_generation(&spec, &config, previous.as_ref(), data, &ctx) {
            Ok(g) => {
                previous = Some(g.snapshot());
                done.push(g);
            }
            Err(e) => {
                return Ok(BanOutcome {
                    generations: done,
                    failure: Some(e),
                })
            }
        }
    }
    Ok(BanOutcome {
        generations: done,
        failure: None,
    })
}
