//! Dense-block teacher to residual student and the converse on a
//! 4000-image CIFAR-10-format subset.
//!
//! Reads `data_batch_1.bin` and `test_batch.bin` from `$BANFORGE_CIFAR_DIR`
//! when set; otherwise synthesizes records in the same binary layout.

use std::path::PathBuf;

use banforge::data::{load_cifar_file, stratified_subset, synthesize_cifar10, CifarVariant, SplitTag, Splits};
use banforge::models::ModelSpec;
use banforge::objectives::DistillObjective;
use banforge::pipeline::{run_ban_sequence, BanPlan, TrainConfig};

fn main() -> banforge::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let tmp = tempfile::tempdir().expect("temp dir");
    let (train_path, test_path) = match std::env::var_os("BANFORGE_CIFAR_DIR") {
        Some(d) => (
            PathBuf::from(&d).join("data_batch_1.bin"),
            PathBuf::from(&d).join("test_batch.bin"),
        ),
        None => {
            let a = tmp.path().join("train.bin");
            let b = tmp.path().join("test.bin");
            std::fs::write(&a, synthesize_cifar10(5000, 1)).expect("write");
            std::fs::write(&b, synthesize_cifar10(2000, 2)).expect("write");
            (a, b)
        }
    };
    let train = load_cifar_file(&train_path, CifarVariant::Cifar10, SplitTag::Train)?;
    let held = load_cifar_file(&test_path, CifarVariant::Cifar10, SplitTag::Test)?;
    let held = stratified_subset(&held, 1500, 7)?;
    let val_idx: Vec<usize> = (0..held.labels.len()).filter(|i| i % 3 == 0).collect();
    let test_idx: Vec<usize> = (0..held.labels.len()).filter(|i| i % 3 != 0).collect();
    let mut data = Splits {
        train: stratified_subset(&train, 4000, 3)?,
        val: held.subset(&val_idx)?,
        test: held.subset(&test_idx)?,
    };
    data.normalize_from_train()?;

    let dense = ModelSpec {
        input_pool: 1,
        ..ModelSpec::densenet([3, 32, 32], 2, 2, 4, 0.5, 10, 0)
    };
    let res = ModelSpec {
        input_pool: 1,
        ..ModelSpec::resnet([3, 32, 32], 2, 1, 8, 10, 0)
    };
    let mut cfg = TrainConfig::new(epochs, 32, 0.05);
    cfg.weight_decay = 1e-4;
    for (name, specs) in [
        ("dense->res", vec![dense.clone(), res.clone()]),
        ("res->dense", vec![res, dense]),
    ] {
        let t = std::time::Instant::now();
        let mut plan = BanPlan::new(specs[0].clone(), cfg.clone(), 1);
        plan.specs = specs;
        plan.student_config = Some(TrainConfig {
            objective: DistillObjective::kd(),
            ..cfg.clone()
        });
        let gens = run_ban_sequence::<f64, _>(&plan, &data)?.into_result()?;
        for g in &gens {
            let losses: Vec<String> = g.history.iter().map(|h| format!("{:.3}", h.train_loss)).collect();
            eprintln!("  gen{} train loss {}", g.record.generation, losses.join(" "));
        }
        println!(
            "{name}: teacher {:.4} student {:.4} ({:.1}s)",
            gens[0].record.test_metric,
            gens[1].record.test_metric,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
