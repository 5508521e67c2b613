//! Born-again self-distillation at desk scale.
//!
//! The crate trains a teacher with label cross-entropy, then a chain of
//! students ("generations") of the same or a different architecture against
//! the previous generation's output distribution, and averages generations
//! into ensembles. The objective module also exposes the split of the
//! distillation gradient into a ground-truth term and a dark-knowledge term,
//! plus the two ablations that isolate them: confidence-weighted label
//! training and permuted non-argmax teacher outputs.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod models;
pub mod objectives;
pub mod par;
pub mod params;
pub mod pipeline;
pub mod tensor;

pub use autodiff::{finite_diff_check, FdConfig, FdReport, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use params::{BoundParams, ParameterSet};
pub use tensor::{Real, Tensor};
