use std::path::Path;

use indexmap::IndexMap;

use super::{Batch, Input, Split, SplitTag};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// A byte-level character corpus with contiguous train/val/test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct CharCorpus {
    pub ids: Vec<usize>,
    /// Byte to id, in order of first appearance.
    pub vocab: IndexMap<u8, usize>,
    /// End of the train split and end of the val split.
    pub boundaries: [usize; 2],
}

/// Builds a corpus from raw text. `fractions` are the train, val and test
/// shares and are normalized by their sum.
pub fn parse_char_corpus(bytes: &[u8], fractions: [f64; 3]) -> Result<CharCorpus> {
    if bytes.is_empty() {
        return Err(Error::Format {
            offset: 0,
            detail: "corpus is empty".into(),
        });
    }
    if let Err(e) = std::str::from_utf8(bytes) {
        return Err(Error::Format {
            offset: e.valid_up_to() as u64,
            detail: "corpus is not valid UTF-8 text".into(),
        });
    }
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0) || !f.is_finite()) || !(total > 0.0) {
        return Err(Error::Argument(format!("invalid split fractions {fractions:?}")));
    }
    let mut vocab = IndexMap::new();
    let ids: Vec<usize> = bytes
        .iter()
        .map(|&b| {
            let next = vocab.len();
            *vocab.entry(b).or_insert(next)
        })
        .collect();
    let n = ids.len();
    let train_end = ((fractions[0] / total) * n as f64).floor() as usize;
    let val_end = (((fractions[0] + fractions[1]) / total) * n as f64).floor() as usize;
    Ok(CharCorpus {
        ids,
        vocab,
        boundaries: [train_end.min(n), val_end.min(n)],
    })
}

pub fn load_char_corpus(path: &Path, fractions: [f64; 3]) -> Result<CharCorpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_char_corpus(&bytes, fractions).map_err(|e| match e {
        Error::Format { offset, detail } => Error::Format {
            offset,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

impl CharCorpus {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn split_ids(&self, tag: SplitTag) -> &[usize] {
        let [a, b] = self.boundaries;
        match tag {
            SplitTag::Train => &self.ids[..a],
            SplitTag::Val => &self.ids[a..b],
            SplitTag::Test => &self.ids[b..],
        }
    }

    /// Non-overlapping windows of `steps` inputs (plus one shifted target)
    /// over one split.
    pub fn sequences(&self, tag: SplitTag, steps: usize) -> Result<SequenceSplit> {
        SequenceSplit::new(self.split_ids(tag).to_vec(), steps, self.vocab_size())
    }
}

/// Fixed-length next-token windows. Window `i` reads tokens
/// `i·steps .. i·steps + steps` and predicts each following token.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSplit {
    tokens: Vec<usize>,
    steps: usize,
    vocab: usize,
}

impl SequenceSplit {
    pub fn new(tokens: Vec<usize>, steps: usize, vocab: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Argument("sequence length must be positive".into()));
        }
        if tokens.len() < steps + 1 {
            return Err(Error::Argument(format!(
                "split of {} tokens is shorter than one window of {}",
                tokens.len(),
                steps + 1
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Argument(format!("token {t} outside vocabulary of {vocab}")));
        }
        Ok(SequenceSplit { tokens, steps, vocab })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }
}

impl Split for SequenceSplit {
    fn len(&self) -> usize {
        (self.tokens.len() - 1) / self.steps
    }

    fn num_classes(&self) -> usize {
        self.vocab
    }

    /// Labels come out step-major (`t·b + i`), the row order of the
    /// unrolled language model's logits.
    fn batch<F: Real>(&self, indices: &[usize]) -> Batch<F> {
        let (b, s) = (indices.len(), self.steps);
        let mut ids = Vec::with_capacity(b * s);
        for &w in indices {
            ids.extend_from_slice(&self.tokens[w * s..w * s + s]);
        }
        let mut labels = vec![0; b * s];
        for (i, &w) in indices.iter().enumerate() {
            for t in 0..s {
                labels[t * b + i] = self.tokens[w * s + t + 1];
            }
        }
        Batch {
            input: Input::Tokens {
                ids,
                batch: b,
                steps: s,
            },
            labels,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abab() {
        let c = parse_char_corpus(b"abab", [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(c.ids, vec![0, 1, 0, 1]);
        assert_eq!(c.vocab.get(&b'a'), Some(&0));
        assert_eq!(c.vocab.get(&b'b'), Some(&1));
    }

    #[test]
    fn empty_and_binary_rejected() {
        assert!(matches!(
            parse_char_corpus(b"", [1.0, 0.0, 0.0]),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            parse_char_corpus(&[b'a', 0xff, b'b'], [1.0, 0.0, 0.0]),
            Err(Error::Format { offset: 1, .. })
        ));
    }

    #[test]
    fn splits_are_contiguous() {
        let text = "the quick brown fox jumps over the lazy dog".repeat(3);
        let c = parse_char_corpus(text.as_bytes(), [0.8, 0.1, 0.1]).unwrap();
        let joined: Vec<usize> = [SplitTag::Train, SplitTag::Val, SplitTag::Test]
            .iter()
            .flat_map(|&t| c.split_ids(t).to_vec())
            .collect();
        assert_eq!(joined, c.ids);
        let distinct: std::collections::HashSet<_> = text.bytes().collect();
        assert!(c.vocab_size() <= distinct.len());
    }

    #[test]
    fn windows_and_step_major_labels() {
        let s = SequenceSplit::new((0..10).collect(), 3, 10).unwrap();
        assert_eq!(s.len(), 3);
        let b = s.batch::<f64>(&[0, 2]);
        match b.input {
            Input::Tokens { ids, batch, steps } => {
                assert_eq!((batch, steps), (2, 3));
                assert_eq!(ids, vec![0, 1, 2, 6, 7, 8]);
            }
            _ => panic!("expected tokens"),
        }
        assert_eq!(b.labels, vec![1, 7, 2, 8, 3, 9]);
    }
}
