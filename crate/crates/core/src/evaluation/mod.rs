//! Evaluation protocol: dissent scores, per-component rating errors,
//! retrieval precision and log-normal fits.

pub mod dissent;
pub mod precision;
pub mod protocol;
pub mod stats;

pub use dissent::{algorithm_dissent, doctor_dissent, DissentSample, RandomBaseline, Subject};
pub use precision::{mean_precision_over_ks, retrieval_precision, ClassQuery, MeanPrecision, PRECISION_KS};
pub use protocol::{build_report, cross_validated_cbir_dissent, EvalConfig, Evaluation, EvaluationReport};
pub use stats::{lognormal_mle_fit, rating_rmse_std_per_component, LogNormalFit};
