//! N-mixture abundance models for repeated count surveys.
//!
//! Latent abundance `N ~ Pois(λ)` or `NegBin(size θ, mean λ)` per row (site or
//! site-year), with replicated counts `y_j | N ~ Bin(N, p_j)`. The marginal
//! likelihood sums `N` out with a downward Horner recursion ([`likelihood`]),
//! which both the maximum-likelihood ([`fit_ml`]) and Laplace-approximation
//! ([`fit_bayes`]) engines build on. [`simulator`] generates synthetic survey
//! data and [`experiment`] drives the dataset and bias-study workflows used by
//! the `nmix` command-line tool.

pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod fit_bayes;
pub mod fit_ml;
pub mod likelihood;
pub mod model;
pub mod optim;
mod par;
pub mod simulator;

pub use error::{Error, ErrorKind, Result};
pub use fit_bayes::{
    fit_laplace, lambda_fitted, posterior_n, sample_posterior, LambdaFittedSummary,
    PosteriorSamples, PriorSpec, ThetaPrior,
};
pub use fit_ml::{fit_ml, summarize_fit, FitOptions, FitResult, FitSummary};
pub use likelihood::{
    row_loglik_bruteforce, row_loglik_recursive, table_loglik, RowLikelihoodInput,
    TruncationPolicy,
};
pub use model::{
    eval_lambda, eval_p, DesignMatrices, DetectionCovariate, MixtureFamily, ObservationTable,
    ParameterLayout, ParameterVector, RowLabel,
};
pub use simulator::{simulate, SimConfig, SimOutput};
