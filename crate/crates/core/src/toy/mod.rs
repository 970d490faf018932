//! Desk-scale check of the reward and optimization design: a synthetic
//! multi-hop world, a linear softmax planner and a clipped-ratio trainer.

pub mod policy;
pub mod ppo;
pub mod train;
pub mod world;

pub use policy::{FeatureKind, FeatureMap, LinearPolicy, ValueHead};
pub use ppo::{
    clipped_objective, clipped_objective_grad, compute_gae, ppo_update, surrogate, Learner,
    OptimizerKind, PpoConfig, PpoDiagnostics, PpoError, PpoStep, ToyEpisode,
};
pub use train::{
    collect_episode, greedy_eval, pareto_sweep, summarize_sweep, sweep_runs, toy_reward_config,
    toy_reward_inputs, train,
    updates_to_fraction, GreedyEval, ParetoRow, ToyRewarder, TrainConfig, TrainResult, UpdateLog,
};
pub use world::{induced_trajectory, step_env, Action, StepInfo, ToyState, ToyWorld, WorldConfig};
