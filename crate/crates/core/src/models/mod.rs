//! Model families used as teachers and students.
//!
//! Parameters are initialized uniformly in `[-a, a]` with a fan-in scale:
//! `a = sqrt(6 / fan_in)` for layers that feed a rectifier and
//! `a = sqrt(3 / fan_in)` for output heads, embeddings and LSTM matrices.
//! Biases start at zero except the LSTM forget gate, which starts at one.
//! The last convolution of each residual branch starts at zero, so every
//! residual unit is the identity at initialization.
//! Draws come from one ChaCha8 stream seeded by the spec, in parameter
//! declaration order, so equal specs give bit-identical parameters.

mod checkpoint;

pub use checkpoint::{
    decode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::Input;
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParameterSet};
use crate::tensor::{softmax, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Family {
    Mlp,
    ResblockNet,
    DenseblockNet,
    LstmLm,
}

fn default_compression() -> f64 {
    1.0
}

fn default_stages() -> usize {
    2
}

/// Architecture and initialization of one model.
///
/// * `Mlp`: `depth` hidden layers of `width` units.
/// * `ResblockNet`: `stages` stages of `depth` additive units at `width`
///   channels, halving resolution between stages.
/// * `DenseblockNet`: `stages` stages of `depth` concatenating units that
///   each add `width` (growth) channels; transitions compress channels by
///   `compression` and halve resolution.
/// * `LstmLm`: `depth` stacked LSTM layers of `width` units over a
///   vocabulary of `num_classes`, unrolled `input_shape[0]` steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub depth: usize,
    pub width: usize,
    #[serde(default = "default_compression")]
    pub compression: f64,
    #[serde(default = "default_stages")]
    pub stages: usize,
    /// Classes, or vocabulary size for language models.
    pub num_classes: usize,
    /// Per-sample input shape: `[features...]`, `[c, h, w]` or `[steps]`.
    pub input_shape: Vec<usize>,
    pub seed: u64,
    /// Number of 2×2 average pools applied to image inputs before the stem.
    #[serde(default)]
    pub input_pool: usize,
}

impl ModelSpec {
    pub fn mlp(input: usize, depth: usize, width: usize, classes: usize, seed: u64) -> Self {
        ModelSpec {
            family: Family::Mlp,
            depth,
            width,
            compression: 1.0,
            stages: 1,
            num_classes: classes,
            input_shape: vec![input],
            seed,
            input_pool: 0,
        }
    }

    pub fn resnet(
        input_shape: [usize; 3],
        stages: usize,
        depth: usize,
        width: usize,
        classes: usize,
        seed: u64,
    ) -> Self {
        ModelSpec {
            family: Family::ResblockNet,
            depth,
            width,
            compression: 1.0,
            stages,
            num_classes: classes,
            input_shape: input_shape.to_vec(),
            seed,
            input_pool: 0,
        }
    }

    pub fn densenet(
        input_shape: [usize; 3],
        stages: usize,
        depth: usize,
        growth: usize,
        compression: f64,
        classes: usize,
        seed: u64,
    ) -> Self {
        ModelSpec {
            family: Family::DenseblockNet,
            depth,
            width: growth,
            compression,
            stages,
            num_classes: classes,
            input_shape: input_shape.to_vec(),
            seed,
            input_pool: 0,
        }
    }

    pub fn lstm(vocab: usize, steps: usize, layers: usize, hidden: usize, seed: u64) -> Self {
        ModelSpec {
            family: Family::LstmLm,
            depth: layers,
            width: hidden,
            compression: 1.0,
            stages: 1,
            num_classes: vocab,
            input_shape: vec![steps],
            seed,
            input_pool: 0,
        }
    }

    fn spec_err(stage: impl Into<String>, detail: impl Into<String>) -> Error {
        Error::Spec {
            stage: stage.into(),
            detail: detail.into(),
        }
    }

    /// Per-sample activation shapes through the network, checking every
    /// stage's shape arithmetic.
    pub fn shape_trace(&self) -> Result<Vec<TraceEntry>> {
        if self.depth == 0 || self.width == 0 {
            return Err(Self::spec_err("spec", "depth and width must be at least 1"));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Self::spec_err(
                "spec",
                format!("compression {} outside (0, 1]", self.compression),
            ));
        }
        if self.num_classes < 2 {
            return Err(Self::spec_err(
                "head",
                format!("need at least 2 outputs, got {}", self.num_classes),
            ));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Self::spec_err(
                "input",
                format!("invalid input shape {:?}", self.input_shape),
            ));
        }
        let mut trace = vec![TraceEntry::new("input", self.input_shape.clone())];
        match self.family {
            Family::Mlp => {
                for i in 0..self.depth {
                    trace.push(TraceEntry::new(format!("layer{i}"), vec![self.width]));
                }
            }
            Family::LstmLm => {
                if self.input_shape.len() != 1 {
                    return Err(Self::spec_err("input", "language models take a [steps] input shape"));
                }
                trace.push(TraceEntry::new("embed", vec![self.input_shape[0], self.width]));
                for l in 0..self.depth {
                    trace.push(TraceEntry::new(
                        format!("lstm{l}"),
                        vec![self.input_shape[0], self.width],
                    ));
                }
            }
            Family::ResblockNet | Family::DenseblockNet => {
                if self.input_shape.len() != 3 {
                    return Err(Self::spec_err(
                        "input",
                        format!("image families need [c, h, w], got {:?}", self.input_shape),
                    ));
                }
                if self.stages == 0 {
                    return Err(Self::spec_err("spec", "stages must be at least 1"));
                }
                let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
                for p in 0..self.input_pool {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Self::spec_err(
                            format!("input_pool{p}"),
                            format!("cannot halve {h}x{w}"),
                        ));
                    }
                    h /= 2;
                    w /= 2;
                }
                let dense = self.family == Family::DenseblockNet;
                let mut c = if dense { 2 * self.width } else { self.width };
                trace.push(TraceEntry::new("stem", vec![c, h, w]));
                for s in 0..self.stages {
                    if s > 0 && !dense {
                        if h % 2 != 0 || w % 2 != 0 {
                            return Err(Self::spec_err(format!("stage{s}"), format!("cannot halve {h}x{w}")));
                        }
                        h /= 2;
                        w /= 2;
                    }
                    if dense {
                        c += self.depth * self.width;
                    }
                    trace.push(TraceEntry::new(format!("stage{s}"), vec![c, h, w]));
                    if dense && s + 1 < self.stages {
                        let out = (c as f64 * self.compression).floor() as usize;
                        if out == 0 {
                            return Err(Self::spec_err(
                                format!("stage{s}.transition"),
                                format!("compresses {c} channels to zero"),
                            ));
                        }
                        if h % 2 != 0 || w % 2 != 0 {
                            return Err(Self::spec_err(
                                format!("stage{s}.transition"),
                                format!("cannot halve {h}x{w}"),
                            ));
                        }
                        c = out;
                        h /= 2;
                        w /= 2;
                        trace.push(TraceEntry::new(format!("stage{s}.transition"), vec![c, h, w]));
                    }
                }
                trace.push(TraceEntry::new("pool", vec![c]));
            }
        }
        trace.push(TraceEntry::new("head", vec![self.num_classes]));
        Ok(trace)
    }
}

/// Activation shape after one named part of a network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub stage: String,
    pub shape: Vec<usize>,
}

impl TraceEntry {
    fn new(stage: impl Into<String>, shape: Vec<usize>) -> Self {
        TraceEntry {
            stage: stage.into(),
            shape,
        }
    }
}

struct Init {
    rng: ChaCha8Rng,
    params: ParameterSet<f64>,
}

impl Init {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<()> {
        let t = Tensor::from_fn(shape, |_| self.rng.random_range(-bound..=bound));
        self.params.insert(name, t)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> Result<()> {
        self.params.insert(name, Tensor::zeros(shape))
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        let fan_in = (cin * k * k) as f64;
        self.uniform(format!("{prefix}.weight"), &[cout, cin, k, k], (6.0 / fan_in).sqrt())?;
        self.zeros(format!("{prefix}.bias"), &[cout])
    }

    fn dense(&mut self, prefix: &str, fan_in: usize, out: usize, gain: f64) -> Result<()> {
        self.uniform(
            format!("{prefix}.weight"),
            &[fan_in, out],
            (gain / fan_in as f64).sqrt(),
        )?;
        self.zeros(format!("{prefix}.bias"), &[out])
    }
}

/// A model: its spec plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<F: Real = f64> {
    pub spec: ModelSpec,
    pub params: ParameterSet<F>,
}

/// Validates `spec` and initializes its parameters.
pub fn build(spec: &ModelSpec) -> Result<Model<f64>> {
    let trace = spec.shape_trace()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        params: ParameterSet::new(),
    };
    let w = spec.width;
    match spec.family {
        Family::Mlp => {
            let mut fan_in: usize = spec.input_shape.iter().product();
            for i in 0..spec.depth {
                init.dense(&format!("layer{i}"), fan_in, w, 6.0)?;
                fan_in = w;
            }
            init.dense("head", fan_in, spec.num_classes, 3.0)?;
        }
        Family::ResblockNet => {
            init.conv("stem", spec.input_shape[0], w, 3)?;
            for s in 0..spec.stages {
                for u in 0..spec.depth {
                    init.conv(&format!("stage{s}.unit{u}.conv1"), w, w, 3)?;
                    let name = format!("stage{s}.unit{u}.conv2");
                    init.zeros(format!("{name}.weight"), &[w, w, 3, 3])?;
                    init.zeros(format!("{name}.bias"), &[w])?;
                }
            }
            init.dense("head", w, spec.num_classes, 3.0)?;
        }
        Family::DenseblockNet => {
            let mut c = 2 * w;
            init.conv("stem", spec.input_shape[0], c, 3)?;
            for s in 0..spec.stages {
                for u in 0..spec.depth {
                    init.conv(&format!("stage{s}.unit{u}.conv"), c, w, 3)?;
                    c += w;
                }
                if s + 1 < spec.stages {
                    let out = (c as f64 * spec.compression).floor() as usize;
                    init.conv(&format!("stage{s}.transition"), c, out, 1)?;
                    c = out;
                }
            }
            debug_assert_eq!(trace[trace.len() - 2].shape, vec![c]);
            init.dense("head", c, spec.num_classes, 3.0)?;
        }
        Family::LstmLm => {
            let v = spec.num_classes;
            init.uniform("embed.weight".into(), &[v, w], (3.0 / w as f64).sqrt())?;
            let bound = (3.0 / w as f64).sqrt();
            for l in 0..spec.depth {
                init.uniform(format!("lstm{l}.wx"), &[w, 4 * w], bound)?;
                init.uniform(format!("lstm{l}.wh"), &[w, 4 * w], bound)?;
                let bias = Tensor::from_fn(&[4 * w], |i| if (w..2 * w).contains(&i) { 1.0 } else { 0.0 });
                init.params.insert(format!("lstm{l}.bias"), bias)?;
            }
            init.dense("head", w, v, 3.0)?;
        }
    }
    Ok(Model {
        spec: spec.clone(),
        params: init.params,
    })
}

impl<F: Real> Model<F> {
    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            spec: self.spec.clone(),
            params: self.params.cast(),
        }
    }

    /// Binds the parameters into `g` and returns the logits: `[b, n]` for
    /// classifiers, `[steps · b, vocab]` (step-major) for language models.
    pub fn forward(&self, g: &mut Graph<F>, input: &Input<F>) -> Result<Var> {
        let bound = self.params.bind(g);
        forward_bound(&self.spec, g, &bound, input)
    }

    /// Logits without recording gradients.
    pub fn logits(&self, input: &Input<F>) -> Result<Tensor<F>> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, input)?;
        Ok(g.value(out).clone())
    }
}

fn check_dense_input<F: Real>(spec: &ModelSpec, input: &Input<F>) -> Result<Tensor<F>> {
    match input {
        Input::Dense(t) if t.shape().len() >= 2 && t.shape()[1..] == spec.input_shape[..] => Ok(t.clone()),
        Input::Dense(t) => Err(Error::Argument(format!(
            "input shape {:?} does not match [b, {:?}]",
            t.shape(),
            spec.input_shape
        ))),
        Input::Tokens { .. } => Err(Error::Argument(format!(
            "{:?} expects dense inputs, got tokens",
            spec.family
        ))),
    }
}

/// Forward pass against parameters already bound into `g`.
pub fn forward_bound<F: Real>(spec: &ModelSpec, g: &mut Graph<F>, p: &BoundParams, input: &Input<F>) -> Result<Var> {
    match spec.family {
        Family::Mlp => {
            let x = check_dense_input(spec, input)?;
            let b = x.rows();
            let mut h = g.constant(x.reshape(&[b, x.cols()])?);
            for i in 0..spec.depth {
                h = g.linear(
                    h,
                    p.get(&format!("layer{i}.weight"))?,
                    p.get(&format!("layer{i}.bias"))?,
                )?;
                h = g.relu(h)?;
            }
            g.linear(h, p.get("head.weight")?, p.get("head.bias")?)
        }
        Family::ResblockNet | Family::DenseblockNet => {
            let x = check_dense_input(spec, input)?;
            let mut h = g.constant(x);
            for _ in 0..spec.input_pool {
                h = g.avgpool2(h)?;
            }
            h = conv(g, p, "stem", h)?;
            for s in 0..spec.stages {
                if s > 0 && spec.family == Family::ResblockNet {
                    h = g.avgpool2(h)?;
                }
                for u in 0..spec.depth {
                    h = unit_forward(spec, g, p, s, u, h)?;
                }
                if spec.family == Family::DenseblockNet && s + 1 < spec.stages {
                    h = g.relu(h)?;
                    h = conv(g, p, &format!("stage{s}.transition"), h)?;
                    h = g.avgpool2(h)?;
                }
            }
            h = g.relu(h)?;
            h = g.global_avgpool(h)?;
            g.linear(h, p.get("head.weight")?, p.get("head.bias")?)
        }
        Family::LstmLm => {
            let (ids, batch, steps) = match input {
                Input::Tokens { ids, batch, steps } => (ids, *batch, *steps),
                Input::Dense(_) => return Err(Error::Argument("LSTM_LM expects token inputs".into())),
            };
            if steps != spec.input_shape[0] || ids.len() != batch * steps || batch == 0 {
                return Err(Error::Argument(format!(
                    "token batch {batch}x{steps} ({} ids) does not match {} unrolled steps",
                    ids.len(),
                    spec.input_shape[0]
                )));
            }
            let w = spec.width;
            let embed = p.get("embed.weight")?;
            let mut hs = Vec::with_capacity(spec.depth);
            let mut cs = Vec::with_capacity(spec.depth);
            for _ in 0..spec.depth {
                hs.push(g.constant(Tensor::zeros(&[batch, w])));
                cs.push(g.constant(Tensor::zeros(&[batch, w])));
            }
            let (hw, hb) = (p.get("head.weight")?, p.get("head.bias")?);
            let mut outputs = Vec::with_capacity(steps);
            for t in 0..steps {
                let col: Vec<usize> = (0..batch).map(|i| ids[i * steps + t]).collect();
                let mut x = g.embedding(embed, &col)?;
                for l in 0..spec.depth {
                    let (h, c) = g.lstm_step(
                        x,
                        hs[l],
                        cs[l],
                        p.get(&format!("lstm{l}.wx"))?,
                        p.get(&format!("lstm{l}.wh"))?,
                        p.get(&format!("lstm{l}.bias"))?,
                    )?;
                    hs[l] = h;
                    cs[l] = c;
                    x = h;
                }
                outputs.push(g.linear(x, hw, hb)?);
            }
            g.concat_rows(&outputs)
        }
    }
}

fn conv<F: Real>(g: &mut Graph<F>, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let y = g.conv2d(x, p.get(&format!("{prefix}.weight"))?)?;
    g.add_bias(y, p.get(&format!("{prefix}.bias"))?)
}

/// One block: `x + branch(x)` for residual nets, `concat(x, branch(x))` for
/// dense nets.
pub fn unit_forward<F: Real>(
    spec: &ModelSpec,
    g: &mut Graph<F>,
    p: &BoundParams,
    stage: usize,
    unit: usize,
    x: Var,
) -> Result<Var> {
    let prefix = format!("stage{stage}.unit{unit}");
    match spec.family {
        Family::ResblockNet => {
            let a = g.relu(x)?;
            let a = conv(g, p, &format!("{prefix}.conv1"), a)?;
            let a = g.relu(a)?;
            let branch = conv(g, p, &format!("{prefix}.conv2"), a)?;
            g.add(x, branch)
        }
        Family::DenseblockNet => {
            let a = g.relu(x)?;
            let branch = conv(g, p, &format!("{prefix}.conv"), a)?;
            g.concat_channels(x, branch)
        }
        other => Err(Error::Argument(format!("{other:?} has no convolutional units"))),
    }
}

/// A frozen previous-generation model. Forward passes never record
/// gradients, so a snapshot can be shared across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSnapshot<F: Real = f64> {
    pub spec: ModelSpec,
    pub params: ParameterSet<F>,
    pub generation: usize,
}

impl<F: Real> TeacherSnapshot<F> {
    pub fn new(model: &Model<F>, generation: usize) -> Self {
        TeacherSnapshot {
            spec: model.spec.clone(),
            params: model.params.clone(),
            generation,
        }
    }

    pub fn logits(&self, input: &Input<F>) -> Result<Tensor<F>> {
        let mut g = Graph::inference();
        let bound = self.params.bind(&mut g);
        let out = forward_bound(&self.spec, &mut g, &bound, input)?;
        Ok(g.value(out).clone())
    }

    pub fn probs(&self, input: &Input<F>, temperature: F) -> Result<Tensor<F>> {
        softmax(&self.logits(input)?, temperature)
    }
}

/// Name prefixes of the layers shared with, and frozen to, the teacher.
pub const SHARED_PREFIXES: [&str; 2] = ["stem.", "head."];

/// Copies the teacher's first and last layers into `student` and returns
/// their names, which the trainer then leaves untouched.
pub fn share_and_freeze<F: Real>(student: &mut Model<F>, teacher: &ParameterSet<F>) -> Result<Vec<String>> {
    let mut frozen = Vec::new();
    let names: Vec<String> = student
        .params
        .names()
        .filter(|n| SHARED_PREFIXES.iter().any(|p| n.starts_with(p)))
        .map(str::to_string)
        .collect();
    for name in names {
        let src = teacher.get(&name).ok_or_else(|| Error::Spec {
            stage: name.clone(),
            detail: "teacher has no such layer to share".into(),
        })?;
        student.params.set(&name, src.clone()).map_err(|_| Error::Spec {
            stage: name.clone(),
            detail: format!(
                "teacher shape {:?} differs from student shape {:?}",
                src.shape(),
                student.params.get(&name).map(|t| t.shape().to_vec())
            ),
        })?;
        frozen.push(name);
    }
    Ok(frozen)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_seed_determinism() {
        let spec = ModelSpec::mlp(784, 1, 256, 10, 7);
        let a = build(&spec).unwrap();
        let b = build(&spec).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        assert_ne!(
            a.params.checksum(),
            build(&ModelSpec { seed: 8, ..spec }).unwrap().params.checksum()
        );
        assert_eq!(a.params.numel(), 784 * 256 + 256 + 256 * 10 + 10);
    }

    #[test]
    fn dense_transition_halves_channels() {
        let spec = ModelSpec::densenet([3, 8, 8], 3, 2, 4, 0.5, 10, 1);
        let trace = spec.shape_trace().unwrap();
        let find = |n: &str| trace.iter().find(|e| e.stage == n).unwrap().shape.clone();
        assert_eq!(find("stage0"), vec![16, 8, 8]);
        assert_eq!(find("stage0.transition"), vec![8, 4, 4]);
        assert_eq!(find("stage1"), vec![16, 4, 4]);
        assert_eq!(find("stage1.transition"), vec![8, 2, 2]);
        assert_eq!(find("pool"), vec![16]);
        build(&spec).unwrap();
    }

    #[test]
    fn res_params_grow_with_depth() {
        let small = build(&ModelSpec::resnet([3, 8, 8], 2, 1, 4, 10, 0)).unwrap();
        let large = build(&ModelSpec::resnet([3, 8, 8], 2, 4, 4, 10, 0)).unwrap();
        assert!(small.params.numel() < large.params.numel());
    }

    #[test]
    fn spec_errors_name_the_stage() {
        let err = ModelSpec::resnet([3, 6, 6], 3, 1, 4, 10, 0).shape_trace().unwrap_err();
        assert!(
            matches!(err, Error::Spec { ref stage, .. } if stage == "stage2"),
            "{err}"
        );
        let err = ModelSpec::densenet([3, 8, 8], 2, 1, 1, 0.1, 10, 0)
            .shape_trace()
            .unwrap_err();
        assert!(
            matches!(err, Error::Spec { ref stage, .. } if stage == "stage0.transition"),
            "{err}"
        );
        assert!(build(&ModelSpec::mlp(4, 0, 4, 2, 0)).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let mut m = build(&ModelSpec::mlp(3, 1, 5, 4, 2)).unwrap();
        m.params.set("head.weight", Tensor::zeros(&[5, 4])).unwrap();
        let x = Input::Dense(Tensor::from_fn(&[2, 3], |i| i as f64));
        let logits = m.logits(&x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let p = softmax(&logits, 1.0).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn identical_inputs_identical_rows() {
        let m = build(&ModelSpec::densenet([2, 4, 4], 2, 1, 2, 0.5, 3, 4)).unwrap();
        let one: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let data: Vec<f64> = one.iter().cycle().take(3 * 32).copied().collect();
        let logits = m
            .logits(&Input::Dense(Tensor::new(vec![3, 2, 4, 4], data).unwrap()))
            .unwrap();
        assert_eq!(logits.row(0), logits.row(1));
        assert_eq!(logits.row(0), logits.row(2));
    }

    #[test]
    fn lstm_emits_logits_every_step() {
        let m = build(&ModelSpec::lstm(6, 35, 1, 8, 0)).unwrap();
        let ids: Vec<usize> = (0..2 * 35).map(|i| i % 6).collect();
        let logits = m
            .logits(&Input::Tokens {
                ids,
                batch: 2,
                steps: 35,
            })
            .unwrap();
        assert_eq!(logits.shape(), &[70, 6]);
    }

    #[test]
    fn shape_mismatch_is_argument_error() {
        let m = build(&ModelSpec::mlp(3, 1, 5, 4, 2)).unwrap();
        let err = m.logits(&Input::Dense(Tensor::zeros(&[2, 4]))).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    fn probe(family: Family) -> (Vec<usize>, Vec<usize>, bool) {
        let spec = match family {
            Family::ResblockNet => ModelSpec::resnet([2, 4, 4], 1, 1, 3, 2, 0),
            _ => ModelSpec::densenet([2, 4, 4], 1, 1, 3, 1.0, 2, 0),
        };
        let mut m = build(&spec).unwrap();
        let zero_names: Vec<String> = m
            .params
            .names()
            .filter(|n| {
                n.ends_with("conv2.weight")
                    || n.ends_with("conv2.bias")
                    || n.ends_with("unit0.conv.weight")
                    || n.ends_with("unit0.conv.bias")
            })
            .map(str::to_string)
            .collect();
        for n in zero_names {
            let shape = m.params.get(&n).unwrap().shape().to_vec();
            m.params.set(&n, Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::inference();
        let p = m.params.bind(&mut g);
        let c = if family == Family::ResblockNet { 3 } else { 6 };
        let x = g.constant(Tensor::from_fn(&[1, c, 4, 4], |i| i as f64 - 20.0));
        let y = unit_forward(&spec, &mut g, &p, 0, 0, x).unwrap();
        let (xv, yv) = (g.value(x).clone(), g.value(y).clone());
        let prefix_same = yv.data()[..xv.len()] == *xv.data();
        (xv.shape().to_vec(), yv.shape().to_vec(), prefix_same)
    }

    #[test]
    fn residual_probe_is_identity_dense_probe_widens() {
        let (xs, ys, same) = probe(Family::ResblockNet);
        assert_eq!(xs, ys);
        assert!(same);
        let (xs, ys, same) = probe(Family::DenseblockNet);
        assert_eq!(ys[1], xs[1] + 3);
        assert!(same);
    }

    #[test]
    fn teacher_forward_is_pure() {
        let m = build(&ModelSpec::resnet([1, 4, 4], 2, 1, 2, 3, 9)).unwrap();
        let t = TeacherSnapshot::new(&m, 0);
        let x = Input::Dense(Tensor::from_fn(&[2, 1, 4, 4], |i| (i as f64).cos()));
        let a = t.probs(&x, 1.0).unwrap();
        let b = t.probs(&x, 1.0).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn share_and_freeze_copies_stem_and_head() {
        // stem 6 channels, stage0 9, transition 3, stage1 6: both ends match width 6
        let teacher = build(&ModelSpec::densenet([3, 8, 8], 2, 1, 3, 0.34, 5, 1)).unwrap();
        let mut student = build(&ModelSpec::resnet([3, 8, 8], 2, 1, 6, 5, 2)).unwrap();
        let frozen = share_and_freeze(&mut student, &teacher.params).unwrap();
        assert_eq!(frozen, vec!["stem.weight", "stem.bias", "head.weight", "head.bias"]);
        assert_eq!(student.params.get("stem.weight"), teacher.params.get("stem.weight"));
        let mut other = build(&ModelSpec::resnet([3, 8, 8], 2, 1, 3, 5, 2)).unwrap();
        assert!(matches!(
            share_and_freeze(&mut other, &teacher.params),
            Err(Error::Spec { .. })
        ));
    }
}
