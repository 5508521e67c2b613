//! Run manifest: a versioned JSON document describing data, architectures,
//! optimization and the distillation chain. Relative paths resolve against
//! the manifest's own directory.

use std::path::{Path, PathBuf};

use banforge::data::{
    load_char_corpus, load_cifar_file, make_blob_splits, stratified_subset, BlobSpec, CifarVariant, Dataset,
    SequenceSplit, SplitTag, Splits,
};
use banforge::models::{Family, ModelSpec};
use banforge::objectives::{DistillObjective, ObjectiveKind};
use banforge::pipeline::{LrSchedule, Metric, TrainConfig};
use banforge::Tensor;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub name: String,
    /// Every random choice in the run derives from this value.
    pub seed: u64,
    pub data: DataSource,
    /// Teacher architecture, and every student's unless `students` is given.
    pub model: ModelConfig,
    /// One architecture per student generation, for cross-architecture chains.
    #[serde(default)]
    pub students: Vec<ModelConfig>,
    pub train: TrainSection,
    #[serde(default)]
    pub objective: ObjectiveSection,
    #[serde(default = "one")]
    pub generations: usize,
    pub output_dir: PathBuf,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Gaussian clusters with optional label corruption.
    Blobs {
        classes: usize,
        dim: usize,
        noise: f64,
        #[serde(default)]
        label_flip: f64,
        train: usize,
        val: usize,
        test: usize,
    },
    /// CIFAR binary batches. The held-out file is subsampled and split
    /// one third validation, two thirds test.
    Cifar {
        #[serde(default)]
        variant: CifarChoice,
        train_files: Vec<PathBuf>,
        test_file: PathBuf,
        #[serde(default)]
        train_subset: Option<usize>,
        #[serde(default)]
        held_subset: Option<usize>,
    },
    /// Character-level text.
    Chars {
        path: PathBuf,
        steps: usize,
        #[serde(default = "default_fractions")]
        fractions: [f64; 3],
    },
}

fn default_fractions() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarChoice {
    #[default]
    Cifar10,
    Cifar100,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub depth: usize,
    pub width: usize,
    #[serde(default = "unit")]
    pub compression: f64,
    #[serde(default = "two")]
    pub stages: usize,
    #[serde(default)]
    pub input_pool: usize,
}

fn unit() -> f64 {
    1.0
}

fn two() -> usize {
    2
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub cache_teacher: bool,
    #[serde(default)]
    pub augment: bool,
    #[serde(default)]
    pub freeze_shared: bool,
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

fn default_momentum() -> f64 {
    0.9
}

/// Objective names accepted by the manifest and `--objective`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum ObjectiveName {
    #[serde(rename = "ce")]
    #[value(name = "ce")]
    Ce,
    #[default]
    #[serde(rename = "kd")]
    #[value(name = "kd")]
    Kd,
    #[serde(rename = "kd+l")]
    #[value(name = "kd+l")]
    KdPlusLabel,
    #[serde(rename = "cwtm")]
    #[value(name = "cwtm")]
    Cwtm,
    #[serde(rename = "dkpp")]
    #[value(name = "dkpp")]
    Dkpp,
}

impl ObjectiveName {
    pub fn kind(self) -> ObjectiveKind {
        match self {
            ObjectiveName::Ce => ObjectiveKind::Ce,
            ObjectiveName::Kd => ObjectiveKind::Kd,
            ObjectiveName::KdPlusLabel => ObjectiveKind::KdPlusLabel,
            ObjectiveName::Cwtm => ObjectiveKind::Cwtm,
            ObjectiveName::Dkpp => ObjectiveKind::Dkpp,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    #[serde(default)]
    pub kind: ObjectiveName,
    #[serde(default = "unit")]
    pub temperature: f64,
    #[serde(default = "unit")]
    pub label_weight: f64,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        ObjectiveSection {
            kind: ObjectiveName::Kd,
            temperature: 1.0,
            label_weight: 1.0,
        }
    }
}

/// A parsed manifest together with where it came from.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub manifest: Manifest,
    pub base_dir: PathBuf,
}

impl Loaded {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.manifest.output_dir)
    }
}

/// Reads and validates a manifest. Parse errors name the offending field
/// path and the line and column in the file.
pub fn load(path: &Path) -> Result<Loaded, CliError> {
    let raw = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let manifest = parse(&raw).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| PathBuf::from("."));
    let loaded = Loaded { manifest, base_dir };
    loaded.validate()?;
    Ok(loaded)
}

pub fn parse(raw: &[u8]) -> Result<Manifest, String> {
    let de = &mut serde_json::Deserializer::from_slice(raw);
    let manifest: Manifest = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        format!("field `{path}`: {inner}")
    })?;
    Ok(manifest)
}

impl Loaded {
    fn validate(&self) -> Result<(), CliError> {
        let m = &self.manifest;
        let bad = |s: String| Err(CliError::Config(s));
        if m.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version: expected {SCHEMA_VERSION}, found {}",
                m.schema_version
            ));
        }
        if m.generations == 0 {
            return bad("generations: must be at least 1".into());
        }
        if !m.students.is_empty() && m.students.len() != m.generations {
            return bad(format!(
                "students: {} architectures listed for {} generations",
                m.students.len(),
                m.generations
            ));
        }
        let must_exist = |field: &str, p: &Path| -> Result<(), CliError> {
            let full = self.resolve(p);
            if full.is_file() {
                Ok(())
            } else {
                Err(CliError::Config(format!("{field}: file not found: {}", full.display())))
            }
        };
        match &m.data {
            DataSource::Cifar {
                train_files, test_file, ..
            } => {
                if train_files.is_empty() {
                    return bad("data.train_files: at least one file is required".into());
                }
                for (i, f) in train_files.iter().enumerate() {
                    must_exist(&format!("data.train_files[{i}]"), f)?;
                }
                must_exist("data.test_file", test_file)?;
            }
            DataSource::Chars { path, .. } => must_exist("data.path", path)?,
            DataSource::Blobs { .. } => {}
        }
        self.train_config(0, ObjectiveName::Ce).validate()?;
        self.student_objective(None).validate()?;
        Ok(())
    }

    pub fn objective_name(&self, flag: Option<ObjectiveName>) -> ObjectiveName {
        flag.unwrap_or(self.manifest.objective.kind)
    }

    /// Student objective, with the permutation stream derived from the run seed.
    pub fn student_objective(&self, flag: Option<ObjectiveName>) -> DistillObjective {
        let o = &self.manifest.objective;
        let kind = self.objective_name(flag).kind();
        DistillObjective {
            kind,
            temperature: o.temperature,
            label_weight: o.label_weight,
            permutation_seed: (kind == ObjectiveKind::Dkpp).then_some(self.manifest.seed),
        }
    }

    pub fn train_config(&self, seed: u64, objective: ObjectiveName) -> TrainConfig {
        let t = &self.manifest.train;
        let mut objective_cfg = self.student_objective(Some(objective));
        if objective == ObjectiveName::Ce {
            objective_cfg.permutation_seed = None;
        }
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            schedule: t.schedule.clone(),
            seed,
            objective: objective_cfg,
            metric: Metric::ErrorRate,
            cache_teacher: t.cache_teacher,
            augment: t.augment,
            freeze_shared: t.freeze_shared,
            max_grad_norm: t.max_grad_norm,
        }
    }
}

/// Training data in either of the two split kinds the pipeline accepts.
pub enum RunData {
    Images(Splits<Dataset>),
    Text(Splits<SequenceSplit>),
}

impl RunData {
    pub fn metric(&self) -> Metric {
        match self {
            RunData::Images(_) => Metric::ErrorRate,
            RunData::Text(_) => Metric::Perplexity,
        }
    }

    pub fn num_classes(&self) -> usize {
        use banforge::data::Split;
        match self {
            RunData::Images(s) => s.train.num_classes(),
            RunData::Text(s) => s.train.num_classes(),
        }
    }

    pub fn train_len(&self) -> usize {
        use banforge::data::Split;
        match self {
            RunData::Images(s) => s.train.len(),
            RunData::Text(s) => s.train.len(),
        }
    }

    /// Per-sample input shape, as a model spec expects it.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            RunData::Images(s) => s.train.sample_shape().to_vec(),
            RunData::Text(s) => vec![s.train.steps()],
        }
    }

    pub fn describe(&self) -> String {
        use banforge::data::Split;
        let (kind, tr, va, te) = match self {
            RunData::Images(s) => ("samples", s.train.len(), s.val.len(), s.test.len()),
            RunData::Text(s) => ("sequences", s.train.len(), s.val.len(), s.test.len()),
        };
        format!(
            "{tr}/{va}/{te} train/val/test {kind}, {} classes, input {:?}",
            self.num_classes(),
            self.input_shape()
        )
    }
}

fn concat_datasets(parts: Vec<Dataset>) -> banforge::Result<Dataset> {
    let mut parts = parts.into_iter();
    let first = parts.next().expect("at least one part");
    let mut shape = first.inputs.shape().to_vec();
    let mut data = first.inputs.into_data();
    let mut labels = first.labels;
    for p in parts {
        shape[0] += p.labels.len();
        data.extend_from_slice(p.inputs.data());
        labels.extend(p.labels);
    }
    Dataset::new(Tensor::new(shape, data)?, labels, first.num_classes, SplitTag::Train)
}

pub fn load_data(loaded: &Loaded) -> banforge::Result<RunData> {
    let seed = loaded.manifest.seed;
    match &loaded.manifest.data {
        DataSource::Blobs {
            classes,
            dim,
            noise,
            label_flip,
            train,
            val,
            test,
        } => {
            let mut d = make_blob_splits(
                &BlobSpec::new(*classes, *dim, 0, *noise, *label_flip, seed),
                *train,
                *val,
                *test,
            )?;
            d.normalize_from_train()?;
            Ok(RunData::Images(d))
        }
        DataSource::Cifar {
            variant,
            train_files,
            test_file,
            train_subset,
            held_subset,
        } => {
            let v = match variant {
                CifarChoice::Cifar10 => CifarVariant::Cifar10,
                CifarChoice::Cifar100 => CifarVariant::Cifar100,
            };
            let parts = train_files
                .iter()
                .map(|f| load_cifar_file(&loaded.resolve(f), v, SplitTag::Train))
                .collect::<banforge::Result<Vec<_>>>()?;
            let mut train = concat_datasets(parts)?;
            if let Some(n) = train_subset {
                train = stratified_subset(&train, *n, seed)?;
            }
            let mut held = load_cifar_file(&loaded.resolve(test_file), v, SplitTag::Test)?;
            if let Some(n) = held_subset {
                held = stratified_subset(&held, *n, seed.wrapping_add(1))?;
            }
            let val: Vec<usize> = (0..held.labels.len()).filter(|i| i % 3 == 0).collect();
            let test: Vec<usize> = (0..held.labels.len()).filter(|i| i % 3 != 0).collect();
            let mut val = held.subset(&val)?;
            val.split = SplitTag::Val;
            let mut d = Splits {
                train,
                val,
                test: held.subset(&test)?,
            };
            d.normalize_from_train()?;
            Ok(RunData::Images(d))
        }
        DataSource::Chars { path, steps, fractions } => {
            let corpus = load_char_corpus(&loaded.resolve(path), *fractions)?;
            Ok(RunData::Text(Splits {
                train: corpus.sequences(SplitTag::Train, *steps)?,
                val: corpus.sequences(SplitTag::Val, *steps)?,
                test: corpus.sequences(SplitTag::Test, *steps)?,
            }))
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, data: &RunData) -> ModelSpec {
        ModelSpec {
            family: self.family,
            depth: self.depth,
            width: self.width,
            compression: self.compression,
            stages: if self.family == Family::Mlp || self.family == Family::LstmLm {
                1
            } else {
                self.stages
            },
            num_classes: data.num_classes(),
            input_shape: data.input_shape(),
            seed: 0,
            input_pool: self.input_pool,
        }
    }
}

impl Loaded {
    /// Architecture of generation `k`; the seed is filled in by the chain.
    pub fn spec_for(&self, k: usize, data: &RunData) -> ModelSpec {
        let m = &self.manifest;
        let cfg = if k == 0 || m.students.is_empty() {
            &m.model
        } else {
            &m.students[k - 1]
        };
        cfg.spec(data)
    }

    pub fn specs(&self, generations: usize, data: &RunData) -> Vec<ModelSpec> {
        if self.manifest.students.is_empty() {
            vec![self.spec_for(0, data)]
        } else {
            (0..=generations).map(|k| self.spec_for(k, data)).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "name": "blobs",
        "seed": 3,
        "data": {"kind": "blobs", "classes": 3, "dim": 4, "noise": 0.8, "train": 60, "val": 15, "test": 15},
        "model": {"family": "MLP", "depth": 1, "width": 8},
        "train": {"epochs": 2, "batch_size": 10, "lr": 0.05},
        "output_dir": "out"
    }"#;

    #[test]
    fn minimal_manifest_parses_with_defaults() {
        let m = parse(MINIMAL.as_bytes()).unwrap();
        assert_eq!(m.generations, 1);
        assert_eq!(m.objective.kind, ObjectiveName::Kd);
        assert_eq!(m.train.momentum, 0.9);
    }

    #[test]
    fn errors_name_the_field_and_line() {
        let broken = MINIMAL.replace("\"batch_size\": 10", "\"batch_size\": \"ten\"");
        let e = parse(broken.as_bytes()).unwrap_err();
        assert!(e.contains("train.batch_size"), "{e}");
        assert!(e.contains("line 7"), "{e}");
        let unknown = MINIMAL.replace("\"lr\": 0.05", "\"lr\": 0.05, \"lr_decay\": 1");
        assert!(parse(unknown.as_bytes()).unwrap_err().contains("lr_decay"));
    }

    #[test]
    fn objective_names_round_trip() {
        for (s, n) in [
            ("\"kd+l\"", ObjectiveName::KdPlusLabel),
            ("\"dkpp\"", ObjectiveName::Dkpp),
        ] {
            assert_eq!(serde_json::from_str::<ObjectiveName>(s).unwrap(), n);
        }
    }
}
