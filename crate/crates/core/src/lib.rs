//! Desk-scale GUI agent workbench: an action language with a planner/grounder
//! split, a deterministic GUI simulator, linear softmax planners trained by
//! behavior cloning and KL-anchored actor-critic, a self-evolving task
//! curriculum, and an evaluation harness.

// `!(a < b)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod curriculum;
pub mod dsl;
pub mod grounder;
pub mod harness;
pub mod planner;
pub mod reward;
pub mod rl;
pub mod rollout;
pub mod seed;
pub mod sim;
pub mod text;
pub mod trajectory;
