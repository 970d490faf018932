//! Search-planning agents with a frozen answer generator.
//!
//! A small planner model searches in several turns and then hands the
//! gathered evidence to a large frozen generator. This crate runs those
//! episodes against model and search services, scores them with an outcome
//! gain + process reward and a utility/cost trade-off, masks non-policy
//! tokens for training, validates the reward design with a desk-scale PPO
//! trainer, and evaluates planners against non-planning baselines.

pub mod clients;
pub mod config;
pub mod eval;
pub mod masking;
pub mod parallel;
pub mod prompt;
pub mod record;
pub mod reward;
pub mod rollout;
pub mod seed;
pub mod tokenize;
pub mod toy;
pub mod trajectory;
