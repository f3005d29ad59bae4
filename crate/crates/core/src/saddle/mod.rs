//! Convex-concave saddle-point estimation over learned feature classes,
//! with linear baselines.

mod baselines;
mod estimators;
mod problem;

pub use baselines::{baseline_fit, BaselineKind, LinearPredictor};
pub use estimators::{
    factored_dual, factored_primal_features, pcl_causal_effect, predict_factored, predict_factored_row, predict_iv,
    predict_structural, solve_factored, solve_iv_features, solve_iv_saddle, solve_ivoc_saddle, solve_pcl_saddle,
    FactoredSample, FactoredSolution, IvSolution, IvocSolution, PclSolution, Solution, MAX_FUNCTION_L2_DIM,
};
pub use problem::{
    Diagnostics, GdaConfig, Method, MomentProblem, RegularizerKind, RegularizerSpec, SolverConfig, JITTER,
};
