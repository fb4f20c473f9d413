//! Weighted-residual-process specification tests for parametric regression.
//!
//! The crate fits a parametric null model, builds a scalar weight function of
//! the predictors, and tests the null through the integrated squared norm of a
//! weighted residual empirical process, with a smooth residual bootstrap for
//! critical values. A classical ICM statistic with a wild bootstrap is
//! included as a baseline, along with generators and a parallel Monte Carlo
//! engine for size and power studies.

pub mod bootstrap;
pub mod error;
pub mod linalg;
pub mod model;
pub mod quadrature;
pub mod rng;
pub mod sim;
pub mod statistic;
pub mod weights;

pub use error::{Error, Result};
pub use model::{fit_least_squares, make_linear_model, standardize, Dataset, FittedModel, LeastSquares, ModelSpec};
pub use statistic::{
    alternative_drift, icm_statistic, m_phi_gaussian, plug_in_covariance, u_hat, wicm_statistic, DriftKind,
    IcmKernel, KernelWeight, PlugInCovariance, WeightSource, WeightVector,
};
pub use bootstrap::{
    smooth_residual_bootstrap, wild_bootstrap_icm, BootstrapConfig, SmoothBootstrap, TestMethod, TestOutcome,
};
pub use sim::{
    emit_table, generate, generate_local, run_study, run_study_with_workers, Cell, Dgp, Family, IndexChoice, Layout, Method,
    Shape, ShapeAlternative, Sigma, SimResult, SimStudyConfig, StudySpec,
};
pub use weights::{directional_weight, nonparametric_weight, sdr_weight, DirectionalAlternative, SdrEstimate};
