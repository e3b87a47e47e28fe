//! Bayesian tensor factorization linked to external data.
//!
//! A three-mode response tensor is modelled as a Tucker (or CP) product of
//! per-mode latent matrices, each of which is a noisy linear projection of
//! that mode's input features. Gamma priors on the precisions of the
//! projection matrices and the core give ARD-style sparsity, and training is
//! done with closed-form mean-field variational updates.
//!
//! Module map:
//! - [`tensor`]: dense three-mode storage and the Tucker kernel.
//! - [`state`]: q-distribution parameters, hyperparameters and moments.
//! - [`checkpoint`]: versioned binary checkpoint container.
//! - [`vb`]: coordinate updates, the evidence lower bound and the training loop.
//! - [`predict`]: warm-start imputation and the seven cold-start tasks.
//! - [`simulate`]: synthetic datasets and train/test splits.
//! - [`eval`]: metrics, the mean baseline, folds and the replicate harness.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod exec;
pub mod predict;
pub mod simulate;
pub mod state;
pub mod tensor;
pub mod vb;

#[cfg(test)]
pub(crate) mod testutil;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use error::{Error, Result};
pub use predict::{predict_cold, predict_warm, project_new, ColdQuery, ModeQuery};
pub use simulate::{CoreKind, SimConfig, SimDataset, TrainTestSplit};
pub use state::{Decomposition, Hyperparams, ModeHyper, ModelState};
pub use tensor::{FeatureMatrix, Mask3, Tensor3};
pub use vb::{train, Family, TrainConfig, TrainTrace};
