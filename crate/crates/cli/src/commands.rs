use std::path::{Path, PathBuf};

use banforge::data::{Split, SplitTag, Splits};
use banforge::models::{load_checkpoint, ModelSpec, TeacherSnapshot};
use banforge::objectives::{
    decompose_batch_gradient, diagnostic_rows, summarize_diagnostics, write_diagnostic_csv, DiagnosticSummary,
    DistillTargets, ObjectiveKind,
};
use banforge::pipeline::{
    evaluate, generation_dir, run_ban_from, write_atomic, write_json_atomic, BanOutcome, BanPlan, EnsembleMode,
    EnsemblePredictor, GenerationRecord, Metric, TrainedGeneration,
};
use banforge::tensor::argmax;
use clap::ValueEnum;
use serde::Serialize;

use crate::manifest::{load_data, Loaded, ObjectiveName, RunData};
use crate::CliError;

pub struct Options {
    pub force: bool,
    pub dry_run: bool,
    pub seed: Option<u64>,
}

fn apply_seed(loaded: &mut Loaded, seed: Option<u64>) {
    if let Some(s) = seed {
        loaded.manifest.seed = s;
    }
}

fn record_path(out: &Path, k: usize) -> PathBuf {
    generation_dir(out, k).join("record.json")
}

fn read_record(out: &Path, k: usize) -> Result<GenerationRecord, CliError> {
    let p = record_path(out, k);
    let bytes = std::fs::read(&p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
}

/// Refuses to touch existing generation directories unless forced; when
/// forced, clears them so no stale artifact survives.
fn claim_generations(out: &Path, range: std::ops::RangeInclusive<usize>, force: bool) -> Result<(), CliError> {
    let taken: Vec<PathBuf> = range.map(|k| generation_dir(out, k)).filter(|d| d.exists()).collect();
    if taken.is_empty() {
        return Ok(());
    }
    if !force {
        return Err(CliError::Config(format!(
            "{} already exists; pass --force to overwrite",
            taken[0].display()
        )));
    }
    for d in taken {
        std::fs::remove_dir_all(&d).map_err(|e| CliError::Io(format!("{}: {e}", d.display())))?;
    }
    Ok(())
}

/// The manifest as stored in the run directory: effective seed, absolute
/// data paths, so later commands can rebuild the data from the run alone.
fn normalized(loaded: &Loaded) -> crate::manifest::Manifest {
    use crate::manifest::DataSource;
    let mut m = loaded.manifest.clone();
    m.output_dir = absolute(&loaded.output_dir());
    match &mut m.data {
        DataSource::Cifar {
            train_files, test_file, ..
        } => {
            for f in train_files.iter_mut() {
                *f = absolute(&loaded.resolve(f));
            }
            *test_file = absolute(&loaded.resolve(test_file));
        }
        DataSource::Chars { path, .. } => *path = absolute(&loaded.resolve(path)),
        DataSource::Blobs { .. } => {}
    }
    m
}

fn copy_manifest(loaded: &Loaded, out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    write_json_atomic(&out.join("manifest.json"), &normalized(loaded))?;
    Ok(())
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Checks everything that can be checked without training, so a bad run
/// fails before it writes anything.
fn preflight(loaded: &Loaded, data: &RunData, generations: usize) -> Result<(), CliError> {
    for k in 0..=generations {
        loaded.spec_for(k, data).shape_trace()?;
    }
    let (bs, n) = (loaded.manifest.train.batch_size, data.train_len());
    if bs > n {
        return Err(CliError::Config(format!(
            "train.batch_size: {bs} exceeds the {n} training samples"
        )));
    }
    Ok(())
}

fn print_plan(loaded: &Loaded, data: &RunData, generations: usize, objective: ObjectiveName) -> Result<(), CliError> {
    let m = &loaded.manifest;
    println!("experiment {} (seed {})", m.name, m.seed);
    println!("data: {}", data.describe());
    for k in 0..=generations {
        let spec = ModelSpec {
            seed: m.seed.wrapping_add(k as u64),
            ..loaded.spec_for(k, data)
        };
        let trace = spec.shape_trace()?;
        let last = trace.last().map(|t| format!("{:?}", t.shape)).unwrap_or_default();
        let how = if k == 0 {
            "ce".to_string()
        } else {
            objective
                .to_possible_value()
                .map_or_else(String::new, |v| v.get_name().to_string())
        };
        println!(
            "gen{k}: {:?} depth {} width {} -> {last}, objective {how}, seed {}",
            spec.family, spec.depth, spec.width, spec.seed
        );
    }
    println!("output: {}", loaded.output_dir().display());
    Ok(())
}

fn run_chain(
    loaded: &Loaded,
    data: &RunData,
    generations: usize,
    objective: ObjectiveName,
    teacher: Option<TeacherSnapshot>,
) -> Result<BanOutcome, CliError> {
    let out = loaded.output_dir();
    let seed = loaded.manifest.seed;
    let mut teacher_config = loaded.train_config(seed, ObjectiveName::Ce);
    teacher_config.metric = data.metric();
    let mut student_config = loaded.train_config(seed, objective);
    student_config.metric = data.metric();
    let plan = BanPlan {
        specs: loaded.specs(generations, data),
        teacher_config,
        student_config: Some(student_config),
        generations,
        out_dir: Some(out),
    };
    Ok(match data {
        RunData::Images(d) => run_ban_from(&plan, d, teacher)?,
        RunData::Text(d) => run_ban_from(&plan, d, teacher)?,
    })
}

fn print_generation(g: &TrainedGeneration) {
    let r = &g.record;
    println!(
        "gen{}: {} val {} {:.4}, test {:.4}, final train loss {:.4} ({:.1}s)",
        r.generation,
        r.objective,
        r.metric.as_str(),
        r.val_metric,
        r.test_metric,
        r.final_train_loss,
        r.wall_clock_secs
    );
}

pub fn train(mut loaded: Loaded, opts: &Options) -> Result<(), CliError> {
    apply_seed(&mut loaded, opts.seed);
    let data = load_data(&loaded)?;
    preflight(&loaded, &data, 0)?;
    if opts.dry_run {
        return print_plan(&loaded, &data, 0, ObjectiveName::Ce);
    }
    let out = loaded.output_dir();
    claim_generations(&out, 0..=0, opts.force)?;
    copy_manifest(&loaded, &out)?;
    let outcome = run_chain(&loaded, &data, 0, ObjectiveName::Ce, None)?;
    outcome.generations.iter().for_each(print_generation);
    if let Some(e) = outcome.failure {
        return Err(e.into());
    }
    println!("run directory: {}", generation_dir(&out, 0).display());
    Ok(())
}

/// An existing teacher is reused when the run directory's manifest agrees
/// with this one on everything that shapes generation 0 (seed, data, teacher
/// architecture, optimization). Otherwise it is retrained with `--force`, or
/// the command refuses.
fn existing_teacher(loaded: &Loaded, force: bool) -> Result<Option<TeacherSnapshot>, CliError> {
    let out = loaded.output_dir();
    let ck_path = generation_dir(&out, 0).join("checkpoint.banf");
    if !ck_path.exists() {
        return Ok(None);
    }
    let fingerprint = |m: &crate::manifest::Manifest| {
        serde_json::to_value((&m.seed, &m.data, &m.model, &m.train)).expect("manifest serializes")
    };
    let stored = std::fs::read(out.join("manifest.json"))
        .ok()
        .and_then(|b| crate::manifest::parse(&b).ok());
    let compatible = stored.is_some_and(|s| fingerprint(&s) == fingerprint(&normalized(loaded)));
    if compatible {
        let ck = load_checkpoint(&ck_path)?;
        println!("reusing teacher checkpoint {}", ck_path.display());
        return Ok(Some(ck.into_snapshot()?));
    }
    if force {
        return Ok(None);
    }
    Err(CliError::Config(format!(
        "{} was trained under a different manifest; pass --force to retrain it",
        ck_path.display()
    )))
}

#[derive(Serialize)]
struct SummaryRow {
    generation: usize,
    objective: String,
    seed: u64,
    permutation_seed: Option<u64>,
    metric: &'static str,
    val_metric: f64,
    test_metric: f64,
    final_train_loss: f64,
}

fn write_summary(out: &Path, records: &[GenerationRecord], permutation_seed: Option<u64>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    println!(
        "{:>4} {:>6} {:>6} {:>10} {:>10}{}",
        "gen",
        "obj",
        "seed",
        "val",
        "test",
        if permutation_seed.is_some() { "  perm_seed" } else { "" }
    );
    for r in records {
        let perm = if r.objective == ObjectiveKind::Dkpp {
            permutation_seed
        } else {
            None
        };
        let row = SummaryRow {
            generation: r.generation,
            objective: r.objective.to_string(),
            seed: r.seed,
            permutation_seed: perm,
            metric: r.metric.as_str(),
            val_metric: r.val_metric,
            test_metric: r.test_metric,
            final_train_loss: r.final_train_loss,
        };
        println!(
            "{:>4} {:>6} {:>6} {:>10.4} {:>10.4}{}",
            row.generation,
            row.objective,
            row.seed,
            row.val_metric,
            row.test_metric,
            perm.map(|p| format!("  {p}")).unwrap_or_default()
        );
        w.serialize(&row).map_err(|e| CliError::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    write_atomic(&out.join("summary.csv"), &bytes)?;
    Ok(())
}

fn print_cwtm_weights(out: &Path, k: usize) {
    let path = generation_dir(out, k).join("cwtm_weights.csv");
    if let Ok(text) = std::fs::read_to_string(&path) {
        println!("gen{k} teacher-max weights per epoch (epoch,min,mean,max,std):");
        for line in text.lines().skip(1) {
            println!("  {line}");
        }
    }
}

pub fn ban(
    mut loaded: Loaded,
    opts: &Options,
    generations: Option<usize>,
    objective: Option<ObjectiveName>,
) -> Result<(), CliError> {
    apply_seed(&mut loaded, opts.seed);
    let k = generations.unwrap_or(loaded.manifest.generations);
    if k == 0 {
        return Err(CliError::Config("--generations must be at least 1".into()));
    }
    if !loaded.manifest.students.is_empty() && loaded.manifest.students.len() != k {
        return Err(CliError::Config(format!(
            "students: {} architectures listed for {k} generations",
            loaded.manifest.students.len()
        )));
    }
    let objective = loaded.objective_name(objective);
    if objective == ObjectiveName::Ce {
        return Err(CliError::Config(
            "objective: students need a distillation objective, not ce".into(),
        ));
    }
    loaded.student_objective(Some(objective)).validate()?;
    let data = load_data(&loaded)?;
    preflight(&loaded, &data, k)?;
    if opts.dry_run {
        return print_plan(&loaded, &data, k, objective);
    }
    let out = loaded.output_dir();
    let teacher = existing_teacher(&loaded, opts.force)?;
    let first = if teacher.is_some() { 1 } else { 0 };
    claim_generations(&out, first..=k, opts.force)?;
    copy_manifest(&loaded, &out)?;
    let outcome = run_chain(&loaded, &data, k, objective, teacher)?;
    outcome.generations.iter().for_each(print_generation);
    if objective == ObjectiveName::Cwtm {
        for g in &outcome.generations {
            print_cwtm_weights(&out, g.record.generation);
        }
    }
    let mut records = Vec::new();
    for j in 0..=k {
        if record_path(&out, j).exists() {
            records.push(read_record(&out, j)?);
        }
    }
    let perm = loaded.student_objective(Some(objective)).permutation_seed;
    write_summary(&out, &records, perm)?;
    if let Some(e) = outcome.failure {
        return Err(e.into());
    }
    Ok(())
}

/// Run directory: the positional argument, else the manifest's output directory.
pub fn run_dir(positional: Option<PathBuf>, config: Option<&Path>) -> Result<PathBuf, CliError> {
    match (positional, config) {
        (Some(d), _) => Ok(d),
        (None, Some(c)) => Ok(crate::manifest::load(c)?.output_dir()),
        (None, None) => Err(CliError::Config("give a run directory or --config".into())),
    }
}

fn load_run(dir: &Path) -> Result<(Loaded, RunData), CliError> {
    let loaded = crate::manifest::load(&dir.join("manifest.json"))?;
    let data = load_data(&loaded)?;
    Ok((loaded, data))
}

fn snapshot(dir: &Path, k: usize) -> Result<TeacherSnapshot, CliError> {
    let p = generation_dir(dir, k).join("checkpoint.banf");
    if !p.exists() {
        return Err(CliError::Config(format!(
            "generation {k} has no checkpoint at {}",
            p.display()
        )));
    }
    Ok(load_checkpoint(&p)?.into_snapshot()?)
}

/// Parses `gen1,gen2` or `1,2`.
pub fn parse_members(s: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.trim_start_matches("gen")
                .parse::<usize>()
                .map_err(|_| CliError::Config(format!("--members: `{t}` is not a generation")))
        })
        .collect()
}

fn available_students(dir: &Path) -> Vec<usize> {
    (1..)
        .take_while(|&k| generation_dir(dir, k).join("checkpoint.banf").exists())
        .collect()
}

#[derive(Serialize)]
struct MemberScore {
    generation: usize,
    val_metric: f64,
    test_metric: f64,
}

#[derive(Serialize)]
struct EnsembleReport {
    metric: Metric,
    mode: EnsembleMode,
    members: Vec<MemberScore>,
    ensemble: EnsembleScore,
}

#[derive(Serialize)]
struct EnsembleScore {
    generations: Vec<usize>,
    val_metric: f64,
    test_metric: f64,
}

fn score_split<P: banforge::pipeline::Predictor<f64>>(
    p: &P,
    data: &RunData,
    metric: Metric,
) -> Result<(f64, f64), CliError> {
    fn both<P: banforge::pipeline::Predictor<f64>, S: Split>(
        p: &P,
        d: &Splits<S>,
        m: Metric,
    ) -> banforge::Result<(f64, f64)> {
        Ok((evaluate(p, &d.val, m, 256)?, evaluate(p, &d.test, m, 256)?))
    }
    Ok(match data {
        RunData::Images(d) => both(p, d, metric)?,
        RunData::Text(d) => both(p, d, metric)?,
    })
}

pub fn ensemble(
    dir: &Path,
    members: Option<&str>,
    include_teacher: bool,
    mode: EnsembleMode,
    dry_run: bool,
) -> Result<(), CliError> {
    let mut gens = match members {
        Some(s) => parse_members(s)?,
        None => available_students(dir),
    };
    if include_teacher && !gens.contains(&0) {
        gens.insert(0, 0);
    }
    if gens.is_empty() {
        return Err(CliError::Config(format!(
            "no ensemble members found in {}",
            dir.display()
        )));
    }
    let snapshots = gens.iter().map(|&k| snapshot(dir, k)).collect::<Result<Vec<_>, _>>()?;
    if dry_run {
        println!("ensemble of generations {gens:?} ({mode:?}) from {}", dir.display());
        return Ok(());
    }
    let (_, data) = load_run(dir)?;
    let metric = data.metric();
    let mut scores = Vec::new();
    for s in &snapshots {
        let (val, test) = score_split(s, &data, metric)?;
        println!("gen{}: val {} {val:.4}, test {test:.4}", s.generation, metric.as_str());
        scores.push(MemberScore {
            generation: s.generation,
            val_metric: val,
            test_metric: test,
        });
    }
    let ens = EnsemblePredictor::new(snapshots, mode)?;
    let (val, test) = score_split(&ens, &data, metric)?;
    println!("ensemble {gens:?}: val {} {val:.4}, test {test:.4}", metric.as_str());
    let report = EnsembleReport {
        metric,
        mode,
        members: scores,
        ensemble: EnsembleScore {
            generations: gens,
            val_metric: val,
            test_metric: test,
        },
    };
    write_json_atomic(&dir.join("ensemble_report.json"), &report)?;
    Ok(())
}

#[derive(Serialize)]
struct DiagnoseReport<'a> {
    teacher: usize,
    student: usize,
    split: SplitTag,
    csv: &'a Path,
    summary: &'a DiagnosticSummary,
}

pub fn diagnose(dir: &Path, teacher: usize, student: usize, split: SplitTag, dry_run: bool) -> Result<(), CliError> {
    let t = snapshot(dir, teacher)?;
    let s = snapshot(dir, student)?;
    if t.spec.num_classes != s.spec.num_classes {
        return Err(CliError::Config(format!(
            "teacher has {} classes, student has {}",
            t.spec.num_classes, s.spec.num_classes
        )));
    }
    if dry_run {
        println!(
            "diagnose gen{student} against gen{teacher} on the {split:?} split of {}",
            dir.display()
        );
        return Ok(());
    }
    let (_, data) = load_run(dir)?;
    let (rows, correct) = match &data {
        RunData::Images(d) => decompose_split(&t, &s, pick(d, split))?,
        RunData::Text(d) => decompose_split(&t, &s, pick(d, split))?,
    };
    let summary = summarize_diagnostics(&rows, &correct);
    let out = dir.join("diagnostics");
    std::fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let stem = format!("gen{student}_from_gen{teacher}_{}", format!("{split:?}").to_lowercase());
    let csv_path = out.join(format!("{stem}.csv"));
    write_diagnostic_csv(&csv_path, &rows)?;
    let report = DiagnoseReport {
        teacher,
        student,
        split,
        csv: &csv_path,
        summary: &summary,
    };
    write_json_atomic(&out.join(format!("{stem}.json")), &report)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).map_err(|e| CliError::Io(e.to_string()))?
    );
    println!("per-sample rows: {}", csv_path.display());
    Ok(())
}

fn pick<S>(d: &Splits<S>, tag: SplitTag) -> &S {
    match tag {
        SplitTag::Train => &d.train,
        SplitTag::Val => &d.val,
        SplitTag::Test => &d.test,
    }
}

fn decompose_split<S: Split>(
    teacher: &TeacherSnapshot,
    student: &TeacherSnapshot,
    split: &S,
) -> banforge::Result<(Vec<banforge::objectives::DiagnosticRow>, Vec<bool>)> {
    let mut rows = Vec::new();
    let mut correct = Vec::new();
    let n = split.len();
    let bs = 256;
    for start in (0..n).step_by(bs) {
        let idx: Vec<usize> = (start..(start + bs).min(n)).collect();
        let batch = split.batch::<f64>(&idx);
        let probs = teacher.probs(&batch.input, 1.0)?;
        let logits = student.logits(&batch.input)?;
        let targets = DistillTargets::new(probs.clone(), batch.labels.clone())?;
        let d = decompose_batch_gradient(&logits, &targets)?;
        rows.extend(diagnostic_rows(&d, &probs, rows.len()));
        correct.extend(batch.labels.iter().enumerate().map(|(i, &y)| argmax(probs.row(i)) == y));
    }
    Ok((rows, correct))
}
