//! Central finite-difference oracle for reverse-mode gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::par;
use crate::params::{BoundParams, ParameterSet};

#[derive(Clone, Debug)]
pub struct FdConfig {
    /// Perturbation size; must lie in `[1e-7, 1e-3]`.
    pub epsilon: f64,
    /// Parameters with more coordinates than this are subsampled.
    pub max_coords_per_param: usize,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            epsilon: 1e-5,
            max_coords_per_param: 24,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    /// `max |analytic − central| / max(|analytic|, |central|, 1e-8)` over
    /// the checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a perturbation moved a rectifier input
    /// across zero.
    pub excluded_kinks: usize,
    pub worst: Option<(String, usize)>,
}

/// Compares reverse-mode gradients of `loss_fn` against central differences.
///
/// `loss_fn` builds a scalar loss from bound parameters. A coordinate is
/// excluded when the rectifier sign pattern at `θ ± ε` differs from the one
/// at `θ`, since the loss is not differentiable across that kink.
pub fn finite_diff_check<L>(loss_fn: L, params: &ParameterSet<f64>, cfg: &FdConfig) -> Result<FdReport>
where
    L: Fn(&mut Graph<f64>, &BoundParams) -> Result<Var> + Sync + Send,
{
    if !(1e-7..=1e-3).contains(&cfg.epsilon) {
        return Err(Error::Argument(format!("epsilon {} outside [1e-7, 1e-3]", cfg.epsilon)));
    }
    let eval = |p: &ParameterSet<f64>| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let root = loss_fn(&mut g, &bound)?;
        if !g.value(root).is_scalar() {
            return Err(Error::Argument("loss_fn must return a scalar".into()));
        }
        Ok((g.value(root).item(), g.kink_signature()))
    };

    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let root = loss_fn(&mut g, &bound)?;
    let analytic = g.backward(root)?;
    let base_sig = g.kink_signature();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut coords: Vec<(String, usize)> = Vec::new();
    for (name, t) in params.iter() {
        if t.len() <= cfg.max_coords_per_param {
            coords.extend((0..t.len()).map(|i| (name.to_string(), i)));
        } else {
            let mut picks = rand::seq::index::sample(&mut rng, t.len(), cfg.max_coords_per_param).into_vec();
            picks.sort_unstable();
            coords.extend(picks.into_iter().map(|i| (name.to_string(), i)));
        }
    }

    let eps = cfg.epsilon;
    let outcomes = par::map_slice(&coords, |(name, i)| -> Result<Option<f64>> {
        let mut plus = params.clone();
        let mut minus = params.clone();
        plus.get_mut(name).expect("param").data_mut()[*i] += eps;
        minus.get_mut(name).expect("param").data_mut()[*i] -= eps;
        let (lp, sp) = eval(&plus)?;
        let (lm, sm) = eval(&minus)?;
        if sp != base_sig || sm != base_sig {
            return Ok(None);
        }
        let central = (lp - lm) / (2.0 * eps);
        let a = analytic.get(name).expect("gradient").data()[*i];
        let denom = a.abs().max(central.abs()).max(1e-8);
        Ok(Some((a - central).abs() / denom))
    });

    let mut report = FdReport::default();
    for (coord, outcome) in coords.into_iter().zip(outcomes) {
        match outcome? {
            None => report.excluded_kinks += 1,
            Some(err) => {
                report.checked += 1;
                if report.worst.is_none() || err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = Some(coord);
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::from_vec(vec![0.3, -1.7, 2.2, 0.01]).unwrap())
            .unwrap();
        let report = finite_diff_check(
            |g, b| {
                let w = b.get("w")?;
                let sq = g.mul(w, w)?;
                let s = g.sum(sq)?;
                g.scale(s, 1.5)
            },
            &p,
            &FdConfig::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 4);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn kink_coordinates_are_excluded() {
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::from_vec(vec![0.0, 1.0, -2.0]).unwrap()).unwrap();
        let report = finite_diff_check(
            |g, b| {
                let x = b.get("x")?;
                let y = g.relu(x)?;
                g.sum(y)
            },
            &p,
            &FdConfig::default(),
        )
        .unwrap();
        assert_eq!(report.excluded_kinks, 1);
        assert_eq!(report.checked, 2);
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn epsilon_range_enforced() {
        let p = ParameterSet::new();
        let cfg = FdConfig {
            epsilon: 1e-2,
            ..FdConfig::default()
        };
        assert!(finite_diff_check(|g, _| Ok(g.constant(Tensor::scalar(0.0))), &p, &cfg).is_err());
    }
}
