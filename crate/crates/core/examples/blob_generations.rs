//! Teacher, two born-again generations and their ensemble on noisy blobs,
//! one line per seed.
//!
//! `cargo run --release -p banforge --example blob_generations -- [seeds] [noise] [epochs] [width] [train]`

use banforge::data::{make_blob_splits, BlobSpec};
use banforge::models::ModelSpec;
use banforge::objectives::DistillObjective;
use banforge::pipeline::{evaluate, run_ban_sequence, BanPlan, EnsembleMode, EnsemblePredictor, Metric, TrainConfig};

fn main() -> banforge::Result<()> {
    let arg = |i: usize, default: f64| std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default);
    let seeds = arg(1, 5.0) as u64;
    let noise = arg(2, 1.4);
    let epochs = arg(3, 60.0) as usize;
    let width = arg(4, 64.0) as usize;
    let train = arg(5, 600.0) as usize;
    for seed in 0..seeds {
        let mut data = make_blob_splits(&BlobSpec::new(5, 10, 0, noise, 0.2, 100 + seed), train, 300, 2000)?;
        data.normalize_from_train()?;
        let spec = ModelSpec::mlp(10, 2, width, 5, 0);
        let mut cfg = TrainConfig::new(epochs, 32, 0.05);
        cfg.seed = 1000 * seed;
        let mut plan = BanPlan::new(spec, cfg.clone(), 2);
        plan.student_config = Some(TrainConfig {
            objective: DistillObjective::kd(),
            ..cfg.clone()
        });
        let gens = run_ban_sequence::<f64, _>(&plan, &data)?.into_result()?;
        let errs: Vec<f64> = gens.iter().map(|g| g.record.test_metric).collect();
        let ens = EnsemblePredictor::new(
            gens[1..].iter().map(|g| g.snapshot()).collect(),
            EnsembleMode::Probabilities,
        )?;
        let ens_err = evaluate(&ens, &data.test, Metric::ErrorRate, 256)?;
        let mut plus_l = plan.clone();
        plus_l.generations = 1;
        plus_l.student_config = Some(TrainConfig {
            objective: DistillObjective::kd_plus_label(1.0),
            ..cfg
        });
        let banl = run_ban_sequence::<f64, _>(&plus_l, &data)?.into_result()?;
        println!(
            "seed {seed}: teacher {:.4} ban1 {:.4} ban2 {:.4} ens {:.4} ban+l {:.4}",
            errs[0], errs[1], errs[2], ens_err, banl[1].record.test_metric
        );
    }
    Ok(())
}
