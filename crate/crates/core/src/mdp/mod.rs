//! Exact tabular machinery: finite MDPs, optimal values, bisimulation
//! metrics, ε-aggregation and the latent-MDP value bound.

mod aggregate;
mod metric;
mod tabular;
mod text;
mod transport;
mod value;

pub use aggregate::{
    aggregate_epsilon, build_latent_mdp, markov_error, verify_value_bound, Aggregation, BoundReport, BOUND_SLACK,
};
pub use metric::{
    action_max_metric, bisim_operator_mico, bisim_operator_wasserstein, greedy_policy_metric, solve_fixed_point,
    BisimOperator, FixedPoint, MetricKind, MetricMatrix,
};
pub use tabular::{Policy, TabularMdp};
pub use text::{read_mdp, write_mdp};
pub use transport::{optimal_transport, TransportPlan};
pub use value::{evaluate_policy, greedy_actions, value_iteration, value_iteration_capped, ValueSolution};
