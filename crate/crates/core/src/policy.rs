//! Goal-conditioned reference policies.
//!
//! All three kinds share one proportional controller inside the workspace and
//! differ only once the agent has left it:
//!
//! * `ProportionalOptimal` keeps steering toward the goal.
//! * `VariantBSporadic` moves at full speed in a pseudo-random direction that
//!   is a pure function of `(noise_seed, state on a 0.01 grid)`.
//! * `VariantCFreeze` never moves in y and steers x back toward the workspace.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::env::{Action, NavEnv, State, Vec2, WorkspaceSpec};
use crate::error::{Error, Result};

/// Anything that maps a state to an action. Implementations must be pure.
pub trait Policy: Send + Sync {
    fn act(&self, s: &State) -> Result<Action>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    ProportionalOptimal,
    VariantBSporadic,
    VariantCFreeze,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [
        PolicyKind::ProportionalOptimal,
        PolicyKind::VariantBSporadic,
        PolicyKind::VariantCFreeze,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyKind::ProportionalOptimal => "proportional_optimal",
            PolicyKind::VariantBSporadic => "variant_b_sporadic",
            PolicyKind::VariantCFreeze => "variant_c_freeze",
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    pub gain: f64,
    pub noise_seed: u64,
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec {
            kind: PolicyKind::ProportionalOptimal,
            gain: 1.0,
            noise_seed: 0,
        }
    }
}

impl PolicySpec {
    pub fn new(kind: PolicyKind) -> Self {
        PolicySpec {
            kind,
            ..PolicySpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gain.is_finite() && self.gain > 0.0) {
            return Err(Error::Config(format!(
                "policy gain must be > 0, got {}",
                self.gain
            )));
        }
        Ok(())
    }
}

/// Grid used to quantize states before hashing the sporadic direction.
pub const SPORADIC_GRID: f64 = 0.01;

/// A [`PolicySpec`] bound to the geometry it acts in.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePolicy {
    spec: PolicySpec,
    workspace: WorkspaceSpec,
    a_max: f64,
}

impl ReferencePolicy {
    pub fn new(spec: PolicySpec, env: &NavEnv) -> Result<Self> {
        spec.validate()?;
        Ok(ReferencePolicy {
            spec,
            workspace: env.workspace,
            a_max: env.a_max,
        })
    }

    pub fn spec(&self) -> &PolicySpec {
        &self.spec
    }

    fn proportional(&self, s: &State) -> Action {
        let err = s.goal - s.agent;
        Action::saturate(
            Vec2::new(self.spec.gain * err.x, self.spec.gain * err.y),
            self.a_max,
        )
    }

    fn sporadic(&self, s: &State) -> Action {
        let theta = TAU * unit_from_hash(sporadic_hash(self.spec.noise_seed, s));
        Action::new(self.a_max * theta.cos(), self.a_max * theta.sin())
    }

    fn freeze(&self, s: &State) -> Action {
        let target = self.workspace.nearest_point(s.agent);
        let dx = (self.spec.gain * (target.x - s.agent.x)).clamp(-self.a_max, self.a_max);
        Action::new(dx, 0.0)
    }
}

impl Policy for ReferencePolicy {
    fn act(&self, s: &State) -> Result<Action> {
        if !s.is_finite() {
            return Err(Error::NonFinite("state"));
        }
        if self.workspace.contains(s.agent) {
            return Ok(self.proportional(s));
        }
        Ok(match self.spec.kind {
            PolicyKind::ProportionalOptimal => self.proportional(s),
            PolicyKind::VariantBSporadic => self.sporadic(s),
            PolicyKind::VariantCFreeze => self.freeze(s),
        })
    }
}

fn quantize(v: f64) -> i64 {
    (v / SPORADIC_GRID).floor() as i64
}

// splitmix64 finalizer; stable across platforms and releases.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash of `(seed, quantized state)` driving the sporadic direction.
pub fn sporadic_hash(seed: u64, s: &State) -> u64 {
    s.to_array()
        .into_iter()
        .fold(mix64(seed), |h, v| mix64(h ^ quantize(v) as u64))
}

fn unit_from_hash(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunOutcome {
    ReachedGoal,
    LeftWorkspace,
    EpisodeCap,
    /// The start state itself was invalid for an observed rollout.
    InvalidStart,
}

/// States visited by an autonomous run, each with the action taken there.
#[derive(Clone, Debug)]
pub struct AutonomousRun {
    pub steps: Vec<(State, Action)>,
    pub outcome: RunOutcome,
}

/// Run `policy` from `s0` with no user input until the goal tolerance is met,
/// the workspace is left, or the episode cap is exhausted. The terminal state
/// is recorded with the action the policy would take there.
pub fn run_autonomous(policy: &dyn Policy, env: &NavEnv, s0: &State) -> Result<AutonomousRun> {
    if !env.in_workspace(s0.agent) || !env.in_workspace(s0.goal) {
        return Ok(AutonomousRun {
            steps: Vec::new(),
            outcome: RunOutcome::InvalidStart,
        });
    }
    let mut steps = Vec::new();
    let mut s = *s0;
    loop {
        let a = policy.act(&s)?;
        steps.push((s, a));
        if env.reached_goal(&s) {
            return Ok(AutonomousRun {
                steps,
                outcome: RunOutcome::ReachedGoal,
            });
        }
        if steps.len() > env.episode_cap {
            return Ok(AutonomousRun {
                steps,
                outcome: RunOutcome::EpisodeCap,
            });
        }
        s = env.step(&s, &a)?;
        if !env.in_workspace(s.agent) {
            steps.push((s, policy.act(&s)?));
            return Ok(AutonomousRun {
                steps,
                outcome: RunOutcome::LeftWorkspace,
            });
        }
    }
}

/// True iff the policy, started at `s0`, reaches the goal within the episode
/// cap without ever leaving the workspace.
pub fn is_policy_optimal_rollout(policy: &dyn Policy, env: &NavEnv, s0: &State) -> bool {
    matches!(
        run_autonomous(policy, env, s0).map(|r| r.outcome),
        Ok(RunOutcome::ReachedGoal)
    )
}
