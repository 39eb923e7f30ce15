//! Estimation of Markov chain transition matrices from noisy aggregate
//! count data.
//!
//! The observed data are per-state population counts over time — no
//! individual trajectories — optionally corrupted by an observation noise
//! process (undercounting, per-state detection, additive errors). The
//! central estimator recovers the latent first and lagged second moments of
//! the counts through the noise model's mean structure and reads the
//! transition matrix off a closed-form identity between those moments; it
//! stays consistent as observation time grows even though the noise is never
//! averaged away within any single step.
//!
//! Module map:
//! - [`linalg`]: dense matrix support sized for state-space dimensions.
//! - [`chain`]: transition matrices, stationary analysis, analytic count
//!   moments, autocovariance curves.
//! - [`simulate`]: seeded ensemble simulation and CSV/manifest round-trips.
//! - [`noise`]: observation noise models, their mean/covariance structure,
//!   moment recovery through them, and detection-parameter estimation.
//! - [`estimators`]: the moment estimator plus least-squares, marginal, and
//!   marginal-likelihood baselines, per-step variant, simplex projection,
//!   and error metrics.
//! - [`experiments`]: seeded sweep harness, record aggregation, convergence
//!   slope fits, and the CLI.

pub mod chain;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod linalg;
pub mod noise;
pub mod simulate;

pub use chain::{
    generate_random_chain, pairwise_marginal, AnalyticMoments, Marginals, TransitionMatrix,
};
pub use error::{Error, Result};
pub use estimators::{
    error_metric, estimate_cls, estimate_limle, estimate_mom, estimate_mom_nonstationary,
    estimate_naive, project_to_stochastic, stationary_error_metric, EstimatedTransition,
    EstimatorKind, MomentEstimates,
};
pub use experiments::{
    aggregate_by_tk, fit_loglog_slope, run_sweep, AggregateRow, ExperimentConfig, ExperimentRecord,
};
pub use linalg::Matrix;
pub use noise::{
    apply_noise_ensemble, estimate_binomial_params, BinomialParams, NoiseKind, NoiseModel,
    NoiseSpec,
};
pub use simulate::{
    read_ensemble, realization_rng, simulate_aggregate, simulate_ensemble, write_ensemble,
    CountSeries, Ensemble, EnsembleManifest,
};
