//! Built-in numerical self-checks of the gradient machinery, run on random
//! batches drawn from a seeded generator.

use banforge::objectives::{
    ce_gradient, ce_loss, combined_loss, cwtm_gradient, decompose_batch_gradient, dkpp_targets, kd_gradient, kd_loss,
    DistillObjective, DistillTargets, DkppKey, ObjectiveKind,
};
use banforge::tensor::softmax;
use banforge::{finite_diff_check, FdConfig, ParameterSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Check {
    pub name: String,
    pub worst: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

fn logits(r: &mut ChaCha8Rng, b: usize, n: usize, scale: f64) -> Tensor {
    Tensor::from_fn(&[b, n], |_| r.random_range(-scale..scale))
}

fn batch(r: &mut ChaCha8Rng) -> (Tensor, DistillTargets) {
    let (b, n) = (r.random_range(1..=8), r.random_range(2..=10));
    let z = logits(r, b, n, 4.0);
    let probs = softmax(&logits(r, b, n, 3.0), 1.0).unwrap();
    let labels = (0..b).map(|_| r.random_range(0..n)).collect();
    (z, DistillTargets::new(probs, labels).unwrap())
}

fn track(worst: &mut f64, v: f64) {
    if v > *worst || v.is_nan() {
        *worst = if v.is_nan() { f64::INFINITY } else { v };
    }
}

pub fn run(seed: u64, instances: usize) -> banforge::Result<Vec<Check>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    for kind in ObjectiveKind::ALL {
        let mut worst = 0.0;
        for i in 0..instances {
            let (z, targets) = batch(&mut r);
            let objective = DistillObjective {
                kind,
                temperature: r.random_range(0.5..4.0),
                label_weight: r.random_range(0.0..2.0),
                permutation_seed: Some(seed),
            };
            let key = DkppKey {
                seed,
                epoch: i as u64,
                batch: 0,
            };
            let mut params = ParameterSet::new();
            params.insert("z", z)?;
            let report = finite_diff_check(
                move |g, p| combined_loss(g, &objective, p.get("z")?, &targets, Some(key)),
                &params,
                &FdConfig {
                    epsilon: 1e-4,
                    max_coords_per_param: 16,
                    seed: i as u64,
                },
            )?;
            track(&mut worst, report.max_rel_error);
        }
        checks.push(Check {
            name: format!("finite differences, {kind}"),
            worst,
            tolerance: 1e-4,
        });
    }

    let (mut decomposition, mut one_hot, mut cwtm, mut dkpp) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..instances {
        let (z, targets) = batch(&mut r);
        let d = decompose_batch_gradient(&z, &targets)?;
        track(
            &mut decomposition,
            d.reassemble().max_abs_diff(&kd_gradient(&z, &targets, 1.0)?),
        );

        let n = z.cols();
        let labels = targets.labels().to_vec();
        let hard = DistillTargets::one_hot(labels.clone(), n)?;
        track(&mut one_hot, (kd_loss(&z, &hard, 1.0)? - ce_loss(&z, &labels)?).abs());
        track(
            &mut one_hot,
            kd_gradient(&z, &hard, 1.0)?.max_abs_diff(&ce_gradient(&z, &labels)?),
        );

        // every teacher row with the same max gives uniform weights
        let flat = Tensor::full(&[z.rows(), n], 1.0 / n as f64);
        let plain = ce_gradient(&z, &labels)?.map(|v| v / z.rows() as f64);
        track(&mut cwtm, cwtm_gradient(&z, &labels, &flat)?.max_abs_diff(&plain));

        let permuted = dkpp_targets(
            targets.probs(),
            &labels,
            DkppKey {
                seed,
                epoch: 0,
                batch: i as u64,
            },
        )?;
        for s in 0..z.rows() {
            let mut a: Vec<u64> = targets.probs().row(s).iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u64> = permuted.row(s).iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            let m = targets.probs().row(s).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ok = a == b && permuted.row(s)[labels[s]] == m;
            track(&mut dkpp, if ok { 0.0 } else { 1.0 });
        }
    }
    checks.push(Check {
        name: "decomposition reassembly".into(),
        worst: decomposition,
        tolerance: 1e-12,
    });
    checks.push(Check {
        name: "one-hot kd equals ce".into(),
        worst: one_hot,
        tolerance: 1e-12,
    });
    checks.push(Check {
        name: "cwtm with equal maxima equals ce".into(),
        worst: cwtm,
        tolerance: 1e-10,
    });
    checks.push(Check {
        name: "dkpp multiset and label max (violations)".into(),
        worst: dkpp,
        tolerance: 0.0,
    });
    Ok(checks)
}
