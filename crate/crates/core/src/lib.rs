//! Shared-control navigation workbench built around imaginary
//! out-of-distribution actions (IODA).
//!
//! A user teleoperates some action axes of a goal-conditioned agent while its
//! policy drives the rest. When the user's input carries the agent into states
//! unlike anything in the set of rollouts the user has watched, the policy is
//! queried at the nearest watched state instead of the real one. The real
//! state is still what the transition starts from.
//!
//! ```no_run
//! use ioda_core::prelude::*;
//!
//! let cfg = ScenarioConfig::detour(EnvVariant::FreezeYOutside, true);
//! cmd_collect(&cfg)?;
//! let run = cmd_run(&cfg)?;
//! println!("success: {}", run.metrics.success());
//! # Ok::<(), ioda_core::Error>(())
//! ```

pub mod config;
pub mod control;
pub mod env;
pub mod error;
pub mod experiment;
pub mod index;
pub mod metric;
pub mod ood;
pub mod policy;
pub mod rollout;
pub mod session;
pub mod user;

pub use config::ScenarioConfig;
pub use control::{compose, Axis, AxisPartition, LoopMode, Pipeline, StepDecision, UserCommand};
pub use env::{in_workspace, Action, EnvVariant, NavEnv, State, Vec2, WorkspaceSpec};
pub use error::{Error, Result};
pub use index::{linear_scan, Nearest, StateIndex};
pub use metric::{Metric, MetricKind};
pub use ood::{DetectorModel, OodDetector};
pub use policy::{is_policy_optimal_rollout, Policy, PolicyKind, PolicySpec, ReferencePolicy};
pub use rollout::{RolloutMeta, RolloutSet, StepRecord};
pub use user::{ExpectationModel, PlanProgress, SimUser, SubgoalPlan};

pub mod prelude {
    pub use crate::config::ScenarioConfig;
    pub use crate::control::{
        compose, AxisPartition, LoopMode, Pipeline, StepDecision, UserCommand,
    };
    pub use crate::env::{Action, EnvVariant, NavEnv, State, Vec2};
    pub use crate::experiment::{cmd_collect, cmd_eval, cmd_run, run_episode, Assets, RunMetrics};
    pub use crate::index::StateIndex;
    pub use crate::metric::{Metric, MetricKind};
    pub use crate::ood::{DetectorModel, OodDetector};
    pub use crate::policy::{Policy, PolicyKind, PolicySpec, ReferencePolicy};
    pub use crate::rollout::RolloutSet;
    pub use crate::user::{ExpectationModel, SubgoalPlan};
}
