use serde::{Deserialize, Serialize};

use crate::data::{Input, Split};
use crate::error::{Error, Result};
use crate::models::{Model, TeacherSnapshot};
use crate::par;
use crate::tensor::{argmax, softmax, Real, Tensor};

/// How a split is scored. Both are lower-is-better.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    ErrorRate,
    Perplexity,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::ErrorRate => "error_rate",
            Metric::Perplexity => "perplexity",
        }
    }
}

/// Anything that maps a batch input to class probabilities.
pub trait Predictor<F: Real>: Sync {
    fn num_classes(&self) -> usize;

    fn predict(&self, input: &Input<F>) -> Result<Tensor<F>>;
}

impl<F: Real> Predictor<F> for Model<F> {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn predict(&self, input: &Input<F>) -> Result<Tensor<F>> {
        softmax(&self.logits(input)?, F::one())
    }
}

impl<F: Real> Predictor<F> for TeacherSnapshot<F> {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn predict(&self, input: &Input<F>) -> Result<Tensor<F>> {
        self.probs(input, F::one())
    }
}

/// Fraction of rows whose argmax (lowest index on ties) differs from the label.
pub fn error_rate<F: Real>(probs: &Tensor<F>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || probs.rows() != labels.len() {
        return Err(Error::Argument(format!(
            "{} prediction rows vs {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    let wrong = labels
        .iter()
        .enumerate()
        .filter(|&(s, &y)| argmax(probs.row(s)) != y)
        .count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// `exp` of the mean per-token negative log-likelihood.
pub fn perplexity_from_nll(nll: &[f64]) -> Result<f64> {
    if nll.is_empty() {
        return Err(Error::Argument("perplexity of zero tokens".into()));
    }
    Ok((nll.iter().sum::<f64>() / nll.len() as f64).exp())
}

/// Per-row `−ln p[label]`.
pub fn token_nll<F: Real>(probs: &Tensor<F>, labels: &[usize]) -> Result<Vec<f64>> {
    if probs.rows() != labels.len() {
        return Err(Error::Argument(format!(
            "{} prediction rows vs {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    Ok(labels
        .iter()
        .enumerate()
        .map(|(s, &y)| -probs.row(s)[y].as_f64().ln())
        .collect())
}

/// Scores `predictor` on `split` in batches of `batch_size`. Batches are
/// evaluated in parallel and combined in split order.
pub fn evaluate<F: Real, P: Predictor<F> + ?Sized, S: Split>(
    predictor: &P,
    split: &S,
    metric: Metric,
    batch_size: usize,
) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty split".into()));
    }
    if batch_size == 0 {
        return Err(Error::Argument("evaluation batch size must be positive".into()));
    }
    if predictor.num_classes() != split.num_classes() {
        return Err(Error::Config(format!(
            "predictor has {} classes, split has {}",
            predictor.num_classes(),
            split.num_classes()
        )));
    }
    let n = split.len();
    let chunks = n.div_ceil(batch_size);
    let parts = par::map_range(chunks, |c| -> Result<(usize, usize, Vec<f64>)> {
        let idx: Vec<usize> = (c * batch_size..((c + 1) * batch_size).min(n)).collect();
        let batch = split.batch::<F>(&idx);
        let probs = predictor.predict(&batch.input)?;
        if probs.rows() != batch.labels.len() {
            return Err(Error::shape(
                "evaluate",
                format!("{} prediction rows vs {} labels", probs.rows(), batch.labels.len()),
            ));
        }
        match metric {
            Metric::ErrorRate => {
                let wrong = batch
                    .labels
                    .iter()
                    .enumerate()
                    .filter(|&(s, &y)| argmax(probs.row(s)) != y)
                    .count();
                Ok((wrong, batch.labels.len(), Vec::new()))
            }
            Metric::Perplexity => Ok((0, batch.labels.len(), token_nll(&probs, &batch.labels)?)),
        }
    });
    let (mut wrong, mut rows, mut nll) = (0, 0, Vec::new());
    for part in parts {
        let (w, r, v) = part?;
        wrong += w;
        rows += r;
        nll.extend(v);
    }
    match metric {
        Metric::ErrorRate => Ok(wrong as f64 / rows as f64),
        Metric::Perplexity => perplexity_from_nll(&nll),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perplexity_analytic_cases() {
        let p = perplexity_from_nll(&[2f64.ln(), 8f64.ln()]).unwrap();
        assert!((p - 4.0).abs() < 1e-12);
        let v = 7;
        let uniform = Tensor::<f64>::full(&[5, v], 1.0 / v as f64);
        let nll = token_nll(&uniform, &[0, 1, 2, 3, 6]).unwrap();
        assert!((perplexity_from_nll(&nll).unwrap() - v as f64).abs() < 1e-12);
        let exact = Tensor::<f64>::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(perplexity_from_nll(&token_nll(&exact, &[1, 0]).unwrap()).unwrap(), 1.0);
        assert!(perplexity_from_nll(&[]).is_err());
    }

    #[test]
    fn error_rate_counts_argmax_misses() {
        let p = Tensor::<f64>::from_rows(&[vec![0.9, 0.1], vec![0.4, 0.6], vec![0.5, 0.5]]).unwrap();
        assert!((error_rate(&p, &[0, 0, 0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(error_rate(&p, &[0, 1, 0]).unwrap(), 0.0);
    }
}
