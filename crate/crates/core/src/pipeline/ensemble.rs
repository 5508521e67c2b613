use serde::{Deserialize, Serialize};

use super::eval::Predictor;
use crate::data::Input;
use crate::error::{Error, Result};
use crate::models::TeacherSnapshot;
use crate::par;
use crate::tensor::{softmax, Real, Tensor};

/// What the ensemble averages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// Mean of member softmax outputs.
    #[default]
    Probabilities,
    /// Softmax of the mean member logits.
    Logits,
}

/// Frozen generations whose predictions are averaged.
#[derive(Clone, Debug)]
pub struct EnsemblePredictor<F: Real = f64> {
    members: Vec<TeacherSnapshot<F>>,
    mode: EnsembleMode,
}

impl<F: Real> EnsemblePredictor<F> {
    pub fn new(members: Vec<TeacherSnapshot<F>>, mode: EnsembleMode) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Config("an ensemble needs at least one member".into()))?;
        let n = first.spec.num_classes;
        if let Some(m) = members.iter().find(|m| m.spec.num_classes != n) {
            return Err(Error::Config(format!(
                "ensemble member generation {} has {} classes, expected {n}",
                m.generation, m.spec.num_classes
            )));
        }
        Ok(EnsemblePredictor { members, mode })
    }

    pub fn members(&self) -> &[TeacherSnapshot<F>] {
        &self.members
    }

    pub fn mode(&self) -> EnsembleMode {
        self.mode
    }
}

/// Averages equally shaped tensors in the given order.
pub fn mean_of<F: Real>(parts: &[Tensor<F>]) -> Result<Tensor<F>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Argument("mean of no tensors".into()))?;
    let mut acc = first.clone();
    for p in &parts[1..] {
        acc = acc.zip_map(p, |a, b| a + b)?;
    }
    let k = F::of(parts.len() as f64);
    Ok(acc.map(|v| v / k))
}

/// Members are evaluated in parallel; their outputs are summed in member
/// order, so the result does not depend on the thread count.
pub fn ensemble_predict<F: Real>(ensemble: &EnsemblePredictor<F>, input: &Input<F>) -> Result<Tensor<F>> {
    let outputs: Vec<Tensor<F>> = par::map_slice(&ensemble.members, |m| match ensemble.mode {
        EnsembleMode::Probabilities => m.probs(input, F::one()),
        EnsembleMode::Logits => m.logits(input),
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mean = mean_of(&outputs)?;
    match ensemble.mode {
        EnsembleMode::Probabilities => Ok(mean),
        EnsembleMode::Logits => softmax(&mean, F::one()),
    }
}

impl<F: Real> Predictor<F> for EnsemblePredictor<F> {
    fn num_classes(&self) -> usize {
        self.members[0].spec.num_classes
    }

    fn predict(&self, input: &Input<F>) -> Result<Tensor<F>> {
        ensemble_predict(self, input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build, ModelSpec};

    fn member(seed: u64, classes: usize) -> TeacherSnapshot<f64> {
        TeacherSnapshot::new(&build(&ModelSpec::mlp(3, 1, 4, classes, seed)).unwrap(), seed as usize)
    }

    #[test]
    fn single_member_matches_its_softmax() {
        let m = member(1, 3);
        let x = Input::Dense(Tensor::from_fn(&[4, 3], |i| i as f64 * 0.1));
        let e = EnsemblePredictor::new(vec![m.clone()], EnsembleMode::Probabilities).unwrap();
        assert_eq!(ensemble_predict(&e, &x).unwrap(), m.probs(&x, 1.0).unwrap());
    }

    #[test]
    fn opposite_members_average_to_half() {
        let a = Tensor::<f64>::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Tensor::<f64>::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(mean_of(&[a, b]).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn mismatched_or_empty_members_rejected() {
        assert!(matches!(
            EnsemblePredictor::<f64>::new(vec![], EnsembleMode::Probabilities),
            Err(Error::Config(_))
        ));
        let r = EnsemblePredictor::new(vec![member(1, 3), member(2, 4)], EnsembleMode::Logits);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
