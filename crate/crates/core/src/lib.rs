//! Fairness-regularized classification for tabular data.
//!
//! Trains small MLP classifiers while penalizing the mutual information
//! between the learned representation and a joint sensitive attribute built
//! from one or more demographic columns, so statistical parity is pushed
//! toward the fine-grained intersectional groups rather than each attribute
//! separately. The penalty is optimized through a variational split of the
//! mutual information: a trainable group decoder supplies the conditional
//! likelihood term and a linear real-vs-generated discriminator supplies the
//! density-ratio term.
//!
//! Modules:
//! - [`tensor`] / [`tape`] / [`adam`]: a minimal f64 reverse-mode autodiff
//!   stack with Adam and decoupled weight decay.
//! - [`data`]: schema-checked CSV ingestion, one-hot encoding, joint-group
//!   indexing, seeded splits and batches.
//! - [`model`]: feature extractor, target head, group decoder with
//!   Gumbel-Softmax sampling, and the linear density-ratio scorer.
//! - [`train`]: the composite objective, its ablations, alternating updates,
//!   annealing, early stopping and model selection.
//! - [`metrics`]: micro/macro F1, imparity, reduction, equal-opportunity gap.
//! - [`oracle`]: exact discrete mutual-information computations that certify
//!   the identities the objective relies on.

pub mod adam;
pub mod check;
pub mod data;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod tape;
pub mod tensor;
pub mod train;

pub use tensor::{Tensor, TensorError};
