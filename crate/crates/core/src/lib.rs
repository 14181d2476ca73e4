//! Mutual influence regression.
//!
//! Responses `Y_t` of `n` actors observed over `T` periods follow
//! `Y_t = (lambda_1 W_1^(t) + ... + lambda_d W_d^(t)) Y_t + eps_t`, where each
//! `W_k^(t)` is a row-normalized similarity matrix built from an observed
//! attribute. The crate covers weight construction ([`weights`]), the
//! likelihood ([`model`]), quasi-maximum likelihood estimation with sandwich
//! standard errors ([`estimate`]), EBIC subset selection ([`select`]), the
//! covariance adequacy test ([`gof`]), model variants with covariates, fixed
//! effects and endogenous weights ([`extensions`]) and a Monte Carlo harness
//! ([`simlab`]).

pub mod error;
pub mod estimate;
pub mod extensions;
pub mod gof;
pub mod io;
pub mod model;
pub mod optimize;
pub mod par;
pub mod select;
pub mod simlab;
pub mod weights;

mod profile;

pub use error::{MirError, Result};
pub use estimate::{fit_qmle, FitOptions, FitResult};
pub use gof::{influence_test, GofOptions, GofResult};
pub use model::{Feasibility, MirData, Theta};
pub use select::{select_subsets, SelectOptions, SelectionResult};

pub use weights::{AttributeKind, AttributePanel, WeightMatrix, WeightSet};
