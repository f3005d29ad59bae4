//! Seeded synthetic generators and exact finite-instance oracles.

mod continuous;
mod dataset;
mod discrete;

pub use continuous::{
    demand_f, demand_h, demand_price, digit_index, gen_demand_design, gen_linear_gaussian_iv,
    linear_gaussian_ols_slope, DigitEmbedder, EMBED_DIM, EMBED_NOISE,
};
pub use dataset::{oos_mse, Dataset, DatasetMeta, Setting};
pub use discrete::{
    bridge_effects, discrete_ratio_oracle, gen_discrete_toy, gen_pcl_discrete, solve_bridge_exact, DiscreteJointSpec,
    IvocCell, IvocDiscreteSpec, LowRankIvModel, LowRankIvocModel, PclDiscreteSpec, PclTables,
};
