//! The shared-control tick.
//!
//! Each tick the robot's action comes from the policy, the user's command owns
//! a disjoint set of action axes, and the composed action is applied to the
//! real state. In IODA mode an out-of-distribution state is first replaced, for
//! the policy query only, by its nearest observed state.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::{Action, NavEnv, State};
use crate::error::{Error, Result};
use crate::index::StateIndex;
use crate::ood::OodDetector;
use crate::policy::Policy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X,
    Y,
}

/// Which action axes the user owns; the robot owns the complement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AxisPartition {
    user: [bool; 2],
}

impl Default for AxisPartition {
    fn default() -> Self {
        AxisPartition::user_x()
    }
}

impl AxisPartition {
    pub fn new(user_axes: &[Axis]) -> Self {
        let mut user = [false; 2];
        for a in user_axes {
            user[*a as usize] = true;
        }
        AxisPartition { user }
    }

    pub fn user_x() -> Self {
        AxisPartition::new(&[Axis::X])
    }

    pub fn user_owns(&self, axis: Axis) -> bool {
        self.user[axis as usize]
    }

    pub fn robot_owns(&self, axis: Axis) -> bool {
        !self.user_owns(axis)
    }

    pub fn user_axes(&self) -> Vec<Axis> {
        [Axis::X, Axis::Y]
            .into_iter()
            .filter(|a| self.user_owns(*a))
            .collect()
    }
}

impl std::fmt::Display for AxisPartition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<&str> = self
            .user_axes()
            .into_iter()
            .map(|a| match a {
                Axis::X => "x",
                Axis::Y => "y",
            })
            .collect();
        f.write_str(&names.join(","))
    }
}

impl std::str::FromStr for AxisPartition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut axes = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            axes.push(match part {
                "x" => Axis::X,
                "y" => Axis::Y,
                other => return Err(Error::Config(format!("unknown axis `{other}`"))),
            });
        }
        Ok(AxisPartition::new(&axes))
    }
}

/// The user's per-tick signal. Only user-owned axes may carry a value; a
/// user-owned axis without a value means zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UserCommand {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
}

impl UserCommand {
    pub fn x(v: f64) -> Self {
        UserCommand {
            x: Some(v),
            y: None,
        }
    }

    /// All user axes explicitly at zero.
    pub fn zero(p: &AxisPartition) -> Self {
        UserCommand {
            x: p.user_owns(Axis::X).then_some(0.0),
            y: p.user_owns(Axis::Y).then_some(0.0),
        }
    }

    pub fn get(&self, axis: Axis) -> Option<f64> {
        match axis {
            Axis::X => self.x,
            Axis::Y => self.y,
        }
    }

    pub fn validate(&self, p: &AxisPartition, a_max: f64) -> Result<()> {
        for axis in [Axis::X, Axis::Y] {
            let Some(v) = self.get(axis) else { continue };
            if p.robot_owns(axis) {
                return Err(Error::InvalidCommand(format!(
                    "{axis:?} is a robot-owned axis"
                )));
            }
            if !v.is_finite() || v.abs() > a_max {
                return Err(Error::InvalidCommand(format!(
                    "{axis:?} value {v} outside [-{a_max}, {a_max}]"
                )));
            }
        }
        Ok(())
    }

    /// The command as a full action (zero on robot axes).
    pub fn as_action(&self) -> Action {
        Action::new(self.x.unwrap_or(0.0), self.y.unwrap_or(0.0))
    }
}

/// Disjoint combination: user axes from `u`, robot axes from `a`.
pub fn compose(u: &UserCommand, a: &Action, p: &AxisPartition) -> Action {
    let pick = |axis: Axis, robot: f64| {
        if p.user_owns(axis) {
            u.get(axis).unwrap_or(0.0)
        } else {
            robot
        }
    };
    Action::new(pick(Axis::X, a.dx), pick(Axis::Y, a.dy))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopMode {
    #[default]
    Ioda,
    Baseline,
}

impl LoopMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LoopMode::Ioda => "ioda",
            LoopMode::Baseline => "baseline",
        }
    }

    pub fn from_enabled(ioda: bool) -> Self {
        if ioda {
            LoopMode::Ioda
        } else {
            LoopMode::Baseline
        }
    }
}

/// Audit record of one tick.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDecision {
    pub t: usize,
    pub input_state: State,
    pub ood: bool,
    pub imagined_state: Option<State>,
    pub robot_action: Action,
    pub user_command: UserCommand,
    pub composed_action: Action,
    pub next_state: State,
    pub reward: f64,
}

/// Everything one tick needs, assembled over a single observation set.
#[derive(Clone)]
pub struct Pipeline {
    pub env: NavEnv,
    pub partition: AxisPartition,
    policy: Arc<dyn Policy>,
    detector: Arc<dyn OodDetector>,
    index: Arc<StateIndex>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("env", &self.env)
            .field("partition", &self.partition)
            .field("index_len", &self.index.len())
            .finish_non_exhaustive()
    }
}

impl Pipeline {
    /// Fails unless the detector and the projection index cover the same
    /// states under the same metric.
    pub fn new(
        env: NavEnv,
        partition: AxisPartition,
        policy: Arc<dyn Policy>,
        detector: Arc<dyn OodDetector>,
        index: Arc<StateIndex>,
    ) -> Result<Self> {
        let reference = detector.reference();
        if !Arc::ptr_eq(reference, &index) {
            if reference.metric() != index.metric() {
                return Err(Error::Mismatch(
                    "detector and projection use different metrics".into(),
                ));
            }
            if reference.len() != index.len() || !reference.states().eq(index.states()) {
                return Err(Error::Mismatch(
                    "detector and projection were built over different observation sets".into(),
                ));
            }
        }
        Ok(Pipeline {
            env,
            partition,
            policy,
            detector,
            index,
        })
    }

    pub fn policy(&self) -> &Arc<dyn Policy> {
        &self.policy
    }

    pub fn detector(&self) -> &Arc<dyn OodDetector> {
        &self.detector
    }

    pub fn index(&self) -> &Arc<StateIndex> {
        &self.index
    }

    fn finish(
        &self,
        t: usize,
        s: &State,
        u: &UserCommand,
        ood: bool,
        imagined_state: Option<State>,
        robot_action: Action,
    ) -> Result<StepDecision> {
        let composed_action = compose(u, &robot_action, &self.partition);
        // The transition always starts from the real state.
        let next_state = self.env.step(s, &composed_action)?;
        let reward = self.env.reward(s, &composed_action)?;
        Ok(StepDecision {
            t,
            input_state: *s,
            ood,
            imagined_state,
            robot_action,
            user_command: *u,
            composed_action,
            next_state,
            reward,
        })
    }

    fn check_inputs(&self, s: &State, u: &UserCommand) -> Result<()> {
        if !s.is_finite() {
            return Err(Error::NonFinite("state"));
        }
        u.validate(&self.partition, self.env.a_max)
    }

    pub fn ioda_step(&self, t: usize, s: &State, u: &UserCommand) -> Result<StepDecision> {
        self.check_inputs(s, u)?;
        if self.detector.is_ood(s) {
            let imagined = self.index.nearest(s).state;
            let a = self.policy.act(&imagined)?;
            self.finish(t, s, u, true, Some(imagined), a)
        } else {
            let a = self.policy.act(s)?;
            self.finish(t, s, u, false, None, a)
        }
    }

    pub fn baseline_step(&self, t: usize, s: &State, u: &UserCommand) -> Result<StepDecision> {
        self.check_inputs(s, u)?;
        let a = self.policy.act(s)?;
        self.finish(t, s, u, false, None, a)
    }

    pub fn step(
        &self,
        mode: LoopMode,
        t: usize,
        s: &State,
        u: &UserCommand,
    ) -> Result<StepDecision> {
        match mode {
            LoopMode::Ioda => self.ioda_step(t, s, u),
            LoopMode::Baseline => self.baseline_step(t, s, u),
        }
    }

    /// Run `commands` tick by tick from `s0` in the given per-tick modes.
    pub fn replay(
        &self,
        s0: &State,
        ticks: impl IntoIterator<Item = (LoopMode, UserCommand)>,
    ) -> Result<Vec<StepDecision>> {
        let mut s = *s0;
        let mut out = Vec::new();
        for (t, (mode, u)) in ticks.into_iter().enumerate() {
            let d = self.step(mode, t, &s, &u)?;
            s = d.next_state;
            out.push(d);
        }
        Ok(out)
    }
}
