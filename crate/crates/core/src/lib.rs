//! Exact coverage of the naive confidence interval for a linear contrast
//! after a preliminary F test in the linear regression model, with Monte
//! Carlo verifiers and an analysis-of-covariance front end.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ancova;
pub mod coverage;
pub mod distributions;
pub mod error;
pub mod kernel;
pub mod minimize;
pub mod oracle;
pub mod quadrature;

pub use coverage::{coverage_probability, Branch, CoverageResult, GammaZeroForm};
pub use distributions::{DegreesOfFreedom, Noncentrality};
pub use error::{Error, Result};
pub use kernel::{ParamPoint, RegressionDesign, Scenario};
pub use minimize::{min_coverage, min_coverage_curve, CurveRow, MinResult, MinimizeConfig};
pub use oracle::{OracleEstimate, ReducedModel};
pub use quadrature::{Estimate, OuterRule, QuadratureSpec};
