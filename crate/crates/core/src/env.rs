//! Planar point-mass goal-navigation task.
//!
//! The agent moves additively by at most `a_max` per axis per step and is
//! clamped to the world rectangle. The workspace is the closed rectangle in
//! which the reference policy was trained; leaving it is what produces
//! out-of-distribution states.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(&self, other: &Vec2) -> f64 {
        (*self - *other).norm()
    }

    /// Componentwise clamp into `[min, max]`.
    pub fn clamp(&self, min: Vec2, max: Vec2) -> Vec2 {
        Vec2::new(self.x.clamp(min.x, max.x), self.y.clamp(min.y, max.y))
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

/// Agent position plus goal position. This 4-vector is what the policy,
/// detector and projection all see.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub agent: Vec2,
    pub goal: Vec2,
}

impl State {
    pub const DIM: usize = 4;

    pub const fn new(agent: Vec2, goal: Vec2) -> Self {
        State { agent, goal }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        State::new(Vec2::new(v[0], v[1]), Vec2::new(v[2], v[3]))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.agent.x, self.agent.y, self.goal.x, self.goal.y]
    }

    pub fn is_finite(&self) -> bool {
        self.agent.is_finite() && self.goal.is_finite()
    }

    pub fn goal_distance(&self) -> f64 {
        self.agent.dist(&self.goal)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
}

impl Action {
    pub const ZERO: Action = Action { dx: 0.0, dy: 0.0 };

    pub const fn new(dx: f64, dy: f64) -> Self {
        Action { dx, dy }
    }

    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite()
    }

    pub fn to_array(&self) -> [f64; 2] {
        [self.dx, self.dy]
    }

    pub fn as_vec(&self) -> Vec2 {
        Vec2::new(self.dx, self.dy)
    }

    /// Saturate each component to `[-a_max, a_max]`.
    pub fn saturate(v: Vec2, a_max: f64) -> Action {
        Action::new(v.x.clamp(-a_max, a_max), v.y.clamp(-a_max, a_max))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceSpec {
    pub min: Vec2,
    pub max: Vec2,
    pub world_min: Vec2,
    pub world_max: Vec2,
}

impl Default for WorkspaceSpec {
    fn default() -> Self {
        WorkspaceSpec {
            min: Vec2::new(0.0, 0.0),
            max: Vec2::new(1.0, 1.0),
            world_min: Vec2::new(-0.5, -0.5),
            world_max: Vec2::new(1.5, 1.5),
        }
    }
}

impl WorkspaceSpec {
    pub fn validate(&self) -> Result<()> {
        let all = [self.min, self.max, self.world_min, self.world_max];
        if !all.iter().all(Vec2::is_finite) {
            return Err(Error::NonFinite("workspace"));
        }
        if !(self.min.x < self.max.x && self.min.y < self.max.y) {
            return Err(Error::Config("workspace min must be < max".into()));
        }
        let strictly_inside = self.world_min.x < self.min.x
            && self.world_min.y < self.min.y
            && self.max.x < self.world_max.x
            && self.max.y < self.world_max.y;
        if !strictly_inside {
            return Err(Error::Config(
                "workspace must lie strictly inside the world".into(),
            ));
        }
        Ok(())
    }

    /// Closed-rectangle membership: points on the edge are inside.
    pub fn contains(&self, p: Vec2) -> bool {
        self.min.x <= p.x && p.x <= self.max.x && self.min.y <= p.y && p.y <= self.max.y
    }

    pub fn in_world(&self, p: Vec2) -> bool {
        self.world_min.x <= p.x
            && p.x <= self.world_max.x
            && self.world_min.y <= p.y
            && p.y <= self.world_max.y
    }

    /// Closest point of the workspace rectangle to `p`.
    pub fn nearest_point(&self, p: Vec2) -> Vec2 {
        p.clamp(self.min, self.max)
    }

    pub fn center(&self) -> Vec2 {
        Vec2::new(
            0.5 * (self.min.x + self.max.x),
            0.5 * (self.min.y + self.max.y),
        )
    }
}

pub fn in_workspace(p: Vec2, w: &WorkspaceSpec) -> bool {
    w.contains(p)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvVariant {
    #[default]
    Unconstrained,
    LeavePenalty,
    FreezeYOutside,
}

impl EnvVariant {
    pub const ALL: [EnvVariant; 3] = [
        EnvVariant::Unconstrained,
        EnvVariant::LeavePenalty,
        EnvVariant::FreezeYOutside,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EnvVariant::Unconstrained => "unconstrained",
            EnvVariant::LeavePenalty => "leave_penalty",
            EnvVariant::FreezeYOutside => "freeze_y_outside",
        }
    }
}

impl std::fmt::Display for EnvVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EnvVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EnvVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown env variant `{s}`")))
    }
}

/// Environment constants plus the active reward variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavEnv {
    pub variant: EnvVariant,
    pub workspace: WorkspaceSpec,
    pub a_max: f64,
    pub episode_cap: usize,
    pub goal_tolerance: f64,
    pub c_leave: f64,
    pub c_ymove: f64,
}

impl Default for NavEnv {
    fn default() -> Self {
        NavEnv {
            variant: EnvVariant::Unconstrained,
            workspace: WorkspaceSpec::default(),
            a_max: 0.05,
            episode_cap: 400,
            goal_tolerance: 0.02,
            c_leave: 1.0,
            c_ymove: 10.0,
        }
    }
}

impl NavEnv {
    pub fn with_variant(variant: EnvVariant) -> Self {
        NavEnv {
            variant,
            ..NavEnv::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.workspace.validate()?;
        let positive = [self.a_max, self.goal_tolerance];
        if !positive.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::Config(
                "a_max and goal_tolerance must be positive".into(),
            ));
        }
        if !(self.c_leave >= 0.0 && self.c_ymove >= 0.0) {
            return Err(Error::Config("penalty constants must be >= 0".into()));
        }
        if self.episode_cap == 0 {
            return Err(Error::Config("episode_cap must be >= 1".into()));
        }
        Ok(())
    }

    pub fn in_workspace(&self, p: Vec2) -> bool {
        self.workspace.contains(p)
    }

    pub fn check_action(&self, a: &Action) -> Result<()> {
        if !a.is_finite() {
            return Err(Error::NonFinite("action"));
        }
        if a.dx.abs() > self.a_max || a.dy.abs() > self.a_max {
            return Err(Error::ActionTooLarge {
                dx: a.dx,
                dy: a.dy,
                a_max: self.a_max,
            });
        }
        Ok(())
    }

    /// Transition: add the action to the agent and clamp to the world.
    pub fn step(&self, s: &State, a: &Action) -> Result<State> {
        if !s.is_finite() {
            return Err(Error::NonFinite("state"));
        }
        self.check_action(a)?;
        let w = &self.workspace;
        let agent = (s.agent + a.as_vec()).clamp(w.world_min, w.world_max);
        Ok(State::new(agent, s.goal))
    }

    /// Negative Euclidean goal distance minus the variant's penalties, which
    /// apply while the agent of `s` is outside the workspace.
    pub fn reward(&self, s: &State, a: &Action) -> Result<f64> {
        if !s.is_finite() {
            return Err(Error::NonFinite("state"));
        }
        if !a.is_finite() {
            return Err(Error::NonFinite("action"));
        }
        let mut r = 0.0 - s.goal_distance();
        if !self.in_workspace(s.agent) {
            match self.variant {
                EnvVariant::Unconstrained => {}
                EnvVariant::LeavePenalty => r -= self.c_leave,
                EnvVariant::FreezeYOutside => r -= self.c_leave + self.c_ymove * a.dy.abs(),
            }
        }
        Ok(r)
    }

    pub fn reached_goal(&self, s: &State) -> bool {
        s.goal_distance() <= self.goal_tolerance
    }
}
