//! Desk-scale laboratory for reinforcement learning with verifiable rewards.
//!
//! A tiny autoregressive policy solves synthetic modular-arithmetic tasks with
//! a rule-based verifier. Group-relative policy optimization (GRPO, GSPO,
//! DAPO, GMPO) trains the policy; an optional contrastive head embeds rollout
//! trajectories and reshapes rewards with a clipped contrastive bonus so that
//! successful reasoning paths cluster in embedding space.

pub mod checkpoint;
pub mod contrastive;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod objectives;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod selfcheck;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{CoreError, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
