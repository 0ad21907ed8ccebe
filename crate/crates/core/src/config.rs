//! Scenario configuration.
//!
//! The on-disk format is flat `section.key = value` lines; `#` starts a
//! comment. Vectors are comma-separated (`0.1, 0.05`) and point lists are
//! `;`-separated vectors. Every key is optional and falls back to the default
//! scenario. [`ScenarioConfig::to_flat_string`] prints every key, and parsing
//! that output yields an equal config.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::control::AxisPartition;
use crate::env::{EnvVariant, NavEnv, State, Vec2};
use crate::error::{Error, Result};
use crate::metric::{Metric, MetricKind};
use crate::ood::DEFAULT_QUANTILE;
use crate::policy::{PolicyKind, PolicySpec};
use crate::user::SubgoalPlan;

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutConfig {
    pub count: usize,
    pub seed: u64,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub metric: Metric,
    pub quantile: f64,
    /// Fixed threshold; `None` calibrates from the data.
    pub epsilon: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSetup {
    pub start: Vec2,
    /// Half-width of the seeded uniform perturbation applied to `start`.
    pub start_jitter: f64,
    pub plan: SubgoalPlan,
    pub user_gain: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub env: NavEnv,
    pub policy: PolicySpec,
    pub rollouts: RolloutConfig,
    pub detector: DetectorConfig,
    pub partition: AxisPartition,
    pub ioda_enabled: bool,
    pub scenario: ScenarioSetup,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig::detour(EnvVariant::FreezeYOutside, true)
    }
}

impl ScenarioConfig {
    /// The two-subgoal detour scene: start low in the workspace, subgoals
    /// stacked to the left of it, primary goal near the top.
    pub fn detour(variant: EnvVariant, ioda_enabled: bool) -> Self {
        let kind = match variant {
            EnvVariant::Unconstrained => PolicyKind::ProportionalOptimal,
            EnvVariant::LeavePenalty => PolicyKind::VariantBSporadic,
            EnvVariant::FreezeYOutside => PolicyKind::VariantCFreeze,
        };
        ScenarioConfig {
            env: NavEnv::with_variant(variant),
            policy: PolicySpec::new(kind),
            rollouts: RolloutConfig {
                count: 1000,
                seed: 0,
                path: PathBuf::from(format!("out/{variant}/rollouts.jsonl")),
            },
            detector: DetectorConfig {
                metric: Metric::l1(),
                quantile: DEFAULT_QUANTILE,
                epsilon: None,
            },
            partition: AxisPartition::user_x(),
            ioda_enabled,
            scenario: ScenarioSetup {
                start: Vec2::new(0.1, 0.05),
                start_jitter: 0.02,
                plan: SubgoalPlan {
                    subgoals: vec![Vec2::new(-0.25, 0.45), Vec2::new(-0.25, 0.75)],
                    primary_goal: Vec2::new(0.2, 0.9),
                    reach_radius: 0.05,
                },
                user_gain: 1.0,
            },
            seed: 0,
            out_dir: PathBuf::from(format!(
                "out/{variant}/{}",
                if ioda_enabled { "ioda" } else { "baseline" }
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.policy.validate()?;
        self.detector.metric.validate()?;
        self.scenario.plan.validate()?;
        if self.rollouts.count == 0 {
            return Err(Error::Config("rollouts.count must be >= 1".into()));
        }
        let q = self.detector.quantile;
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::Config("detector.quantile must be in (0, 1]".into()));
        }
        if let Some(e) = self.detector.epsilon {
            if !(e.is_finite() && e > 0.0) {
                return Err(Error::Config("detector.epsilon must be > 0".into()));
            }
        }
        let sc = &self.scenario;
        if !(sc.start_jitter >= 0.0 && sc.user_gain > 0.0) {
            return Err(Error::Config(
                "plan.start_jitter must be >= 0 and plan.user_gain > 0".into(),
            ));
        }
        let w = &self.env.workspace;
        let lo = sc.start - Vec2::new(sc.start_jitter, sc.start_jitter);
        let hi = sc.start + Vec2::new(sc.start_jitter, sc.start_jitter);
        if !w.in_world(lo) || !w.in_world(hi) {
            return Err(Error::Config(
                "plan.start (with jitter) must lie in the world".into(),
            ));
        }
        if !w.contains(sc.plan.primary_goal) {
            return Err(Error::Config(
                "plan.primary_goal must lie in the workspace".into(),
            ));
        }
        if !sc.plan.subgoals.iter().all(|g| w.in_world(*g)) {
            return Err(Error::Config("subgoals must lie in the world".into()));
        }
        Ok(())
    }

    /// The nominal start state (before jitter).
    pub fn start_state(&self) -> State {
        State::new(self.scenario.start, self.scenario.plan.primary_goal)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = ScenarioConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| err(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Set one dotted key from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let w = &mut self.env.workspace;
        match key {
            "env.variant" => self.env.variant = v.parse()?,
            "env.workspace_min" => w.min = parse_vec2(v)?,
            "env.workspace_max" => w.max = parse_vec2(v)?,
            "env.world_min" => w.world_min = parse_vec2(v)?,
            "env.world_max" => w.world_max = parse_vec2(v)?,
            "env.a_max" => self.env.a_max = parse_num(v)?,
            "env.episode_cap" => self.env.episode_cap = parse_num(v)?,
            "env.goal_tolerance" => self.env.goal_tolerance = parse_num(v)?,
            "env.c_leave" => self.env.c_leave = parse_num(v)?,
            "env.c_ymove" => self.env.c_ymove = parse_num(v)?,
            "policy.kind" => self.policy.kind = v.parse()?,
            "policy.gain" => self.policy.gain = parse_num(v)?,
            "policy.noise_seed" => self.policy.noise_seed = parse_num(v)?,
            "rollouts.count" => self.rollouts.count = parse_num(v)?,
            "rollouts.seed" => self.rollouts.seed = parse_num(v)?,
            "rollouts.path" => self.rollouts.path = PathBuf::from(v),
            "detector.metric" => self.detector.metric.kind = v.parse::<MetricKind>()?,
            "detector.weights" => {
                let ws = parse_list(v)?;
                self.detector.metric.weights = ws
                    .try_into()
                    .map_err(|_| Error::Config("detector.weights needs 4 values".into()))?;
            }
            "detector.quantile" => self.detector.quantile = parse_num(v)?,
            "detector.epsilon" => {
                self.detector.epsilon = match v {
                    "auto" => None,
                    _ => Some(parse_num(v)?),
                }
            }
            "control.user_axes" => self.partition = v.parse()?,
            "control.ioda" => self.ioda_enabled = parse_switch(v)?,
            "plan.start" => self.scenario.start = parse_vec2(v)?,
            "plan.start_jitter" => self.scenario.start_jitter = parse_num(v)?,
            "plan.subgoals" => {
                self.scenario.plan.subgoals = v
                    .split(';')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(parse_vec2)
                    .collect::<Result<_>>()?
            }
            "plan.primary_goal" => self.scenario.plan.primary_goal = parse_vec2(v)?,
            "plan.reach_radius" => self.scenario.plan.reach_radius = parse_num(v)?,
            "plan.user_gain" => self.scenario.user_gain = parse_num(v)?,
            "run.seed" => self.seed = parse_num(v)?,
            "run.out" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn to_flat_string(&self) -> String {
        let w = &self.env.workspace;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("env.variant", self.env.variant.to_string());
        put("env.workspace_min", fmt_vec2(w.min));
        put("env.workspace_max", fmt_vec2(w.max));
        put("env.world_min", fmt_vec2(w.world_min));
        put("env.world_max", fmt_vec2(w.world_max));
        put("env.a_max", self.env.a_max.to_string());
        put("env.episode_cap", self.env.episode_cap.to_string());
        put("env.goal_tolerance", self.env.goal_tolerance.to_string());
        put("env.c_leave", self.env.c_leave.to_string());
        put("env.c_ymove", self.env.c_ymove.to_string());
        put("policy.kind", self.policy.kind.to_string());
        put("policy.gain", self.policy.gain.to_string());
        put("policy.noise_seed", self.policy.noise_seed.to_string());
        put("rollouts.count", self.rollouts.count.to_string());
        put("rollouts.seed", self.rollouts.seed.to_string());
        put("rollouts.path", self.rollouts.path.display().to_string());
        put("detector.metric", self.detector.metric.kind.to_string());
        put(
            "detector.weights",
            self.detector
                .metric
                .weights
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(", "),
        );
        put("detector.quantile", self.detector.quantile.to_string());
        put(
            "detector.epsilon",
            self.detector
                .epsilon
                .map_or_else(|| "auto".to_string(), |e| e.to_string()),
        );
        put("control.user_axes", self.partition.to_string());
        put(
            "control.ioda",
            (if self.ioda_enabled { "on" } else { "off" }).into(),
        );
        put("plan.start", fmt_vec2(self.scenario.start));
        put("plan.start_jitter", self.scenario.start_jitter.to_string());
        put(
            "plan.subgoals",
            self.scenario
                .plan
                .subgoals
                .iter()
                .map(|g| fmt_vec2(*g))
                .collect::<Vec<_>>()
                .join("; "),
        );
        put(
            "plan.primary_goal",
            fmt_vec2(self.scenario.plan.primary_goal),
        );
        put(
            "plan.reach_radius",
            self.scenario.plan.reach_radius.to_string(),
        );
        put("plan.user_gain", self.scenario.user_gain.to_string());
        put("run.seed", self.seed.to_string());
        put("run.out", self.out_dir.display().to_string());
        s
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid number `{v}`")))
}

fn parse_list(v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|p| parse_num(p.trim())).collect()
}

fn parse_vec2(v: &str) -> Result<Vec2> {
    match parse_list(v)?.as_slice() {
        [x, y] => Ok(Vec2::new(*x, *y)),
        _ => Err(Error::Config(format!("expected `x, y`, got `{v}`"))),
    }
}

fn fmt_vec2(v: Vec2) -> String {
    format!("{}, {}", v.x, v.y)
}

pub fn parse_switch(v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("expected on|off, got `{v}`"))),
    }
}
