//! Phase-type and inhomogeneous phase-type distributions for loss severity
//! modeling: maximum likelihood fitting by a generalized EM algorithm,
//! regression on the underlying Markov intensity, Wald inference for the
//! identifiable parameters, and PIT-based goodness-of-fit diagnostics.
//!
//! Module map:
//! - [`matexp`]: uniformization kernels (`exp(Ty)` and the Van Loan
//!   integral block) on which everything else is built
//! - [`phase`]: PH/IPH laws, Markov structures, inhomogeneity transforms,
//!   evaluation, sampling, tail behavior
//! - [`emfit`]: E- and M-steps plus the plain PH EM loop
//! - [`regression`]: the phase-type regression model and its generalized
//!   EM fitter, conditional means and quantiles
//! - [`inference`]: scores, Fisher information, Wald reports, PIT/KS
//! - [`simstudy`]: synthetic heterogeneous-severity generator and the
//!   model-comparison harness (including a Gamma GLM baseline)
//! - [`doc`]: serialization of fitted models and reports

pub mod doc;
pub mod emfit;
pub mod error;
pub mod inference;
pub mod matexp;
pub(crate) mod numeric;
pub mod phase;
pub mod regression;
pub mod simstudy;

pub use error::{Error, Result};
