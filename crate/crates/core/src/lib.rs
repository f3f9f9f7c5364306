//! Analytics for speed-climbing competition results.
//!
//! The crate covers the full path from raw result sheets to fitted models:
//!
//! * [`data`] — typed records (climbers, events, attempts) and dataset validation,
//! * [`ingest`] — CSV readers/writers with all-errors-collected reporting,
//! * [`preprocess`] — skip-technique forward-fill, age and progression covariates,
//!   best times, descriptive statistics, and model-row construction,
//! * [`design`] — model specifications and dense/sparse design matrices,
//! * [`mixed`] — crossed random-effects linear mixed models fit by profiled
//!   deviance, a Laplace-approximated binomial GLMM, and model comparison,
//! * [`simulate`] — a seeded generative model for parameter-recovery studies,
//! * [`report`] — CSV tables, text summaries, and JSON documents for datasets,
//!   fits, and recovery studies.
//!
//! Numeric kernels ([`num`], [`linalg`], [`optim`], the estimators in [`mixed`])
//! are generic over the [`scalar::Scalar`] floating-point type; the data pipeline
//! runs at the default precision [`Real`].

pub mod data;
pub mod design;
pub mod ingest;
pub mod linalg;
pub mod mixed;
pub mod num;
pub mod optim;
pub mod preprocess;
pub mod report;
pub mod scalar;
pub mod simulate;

pub use scalar::Scalar;

/// Default scalar precision used by the data pipeline and the CLI.
pub type Real = f64;

/// Design matrices at default precision.
pub type Design = design::DesignMatrices<Real>;
/// Covariance parameters (relative Cholesky factors) at default precision.
pub type CovParams = mixed::CovParams<Real>;
/// Fitted linear mixed model at default precision.
pub type LmmFit = mixed::FittedLmm<Real>;
/// Fitted binomial mixed model at default precision.
pub type GlmmFit = mixed::FittedGlmm<Real>;
