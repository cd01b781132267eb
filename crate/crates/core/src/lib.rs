//! Implicit-feedback matrix factorization with exact unlearning.
//!
//! Training is confidence-weighted alternating least squares ([`als`]).
//! Unlearning ([`unlearn`]) warm-starts ALS from the trained factors with the
//! removed cells' confidence pinned to zero, which optimizes the same
//! objective as retraining without them. [`eval`] measures held-out AUC and
//! [`audit`] measures membership-inference leakage of the results.

pub mod als;
pub mod audit;
pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model_io;
pub mod seeds;
pub mod unlearn;

pub use als::{
    als_loss, predict, train_als, ConfidencePolicy, ConfidenceScheme, FactorModel, Factors, Fit, Hyperparams,
    PassRecord, Solver,
};
pub use data::{Coord, DataSplit, InteractionMatrix, RemovalSet};
pub use error::{Error, Result};
pub use unlearn::{retrain_from_scratch, untrain_als, untrain_loss, UnlearnRequest, UnlearnSolver};
