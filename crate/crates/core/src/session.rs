//! Live teleoperation sessions.
//!
//! A session owns one episode at a time and advances exactly one control tick
//! per [`Session::tick`]. The transport (and its wall-clock pacing) lives in the
//! server; everything here is synchronous so sessions can be driven and
//! replayed deterministically in tests.
//!
//! Client messages:
//! `{"type":"cmd","axes":{"x":f}}`, `{"type":"toggle_ioda","on":b}`,
//! `{"type":"reset"}`, `{"type":"close"}`.
//!
//! Server messages: `{"type":"frame",...}` once per tick and
//! `{"type":"done","metrics":{...}}` when the episode ends.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;
use crate::control::{LoopMode, Pipeline, StepDecision, UserCommand};
use crate::env::{EnvVariant, State};
use crate::error::{Error, Result};
use crate::experiment::{start_for, Assets, EpisodeTracker, RunMetrics};
use crate::metric::MetricKind;
use crate::policy::PolicyKind;
use crate::user::{ExpectationModel, SimUser};

pub const DEFAULT_HOLD_TICKS: u32 = 10;
pub const DEFAULT_TICK_HZ: f64 = 20.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AxisValues {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Cmd { axes: AxisValues },
    ToggleIoda { on: bool },
    Reset,
    Close,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: usize,
    pub agent: [f64; 2],
    pub goal: [f64; 2],
    pub ood: bool,
    pub imagined: Option<[f64; 4]>,
    pub robot_action: [f64; 2],
    pub user_action: [f64; 2],
    pub composed: [f64; 2],
    pub reward: f64,
    pub mode: LoopMode,
    pub subgoals_reached: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Frame(Frame),
    Done { metrics: RunMetrics },
    Error { message: String },
}

impl Frame {
    fn initial(s: &State, mode: LoopMode) -> Self {
        Frame {
            t: 0,
            agent: [s.agent.x, s.agent.y],
            goal: [s.goal.x, s.goal.y],
            ood: false,
            imagined: None,
            robot_action: [0.0; 2],
            user_action: [0.0; 2],
            composed: [0.0; 2],
            reward: 0.0,
            mode,
            subgoals_reached: 0,
        }
    }

    fn from_decision(d: &StepDecision, mode: LoopMode, subgoals_reached: usize) -> Self {
        let s = &d.next_state;
        Frame {
            t: d.t + 1,
            agent: [s.agent.x, s.agent.y],
            goal: [s.goal.x, s.goal.y],
            ood: d.ood,
            imagined: d.imagined_state.map(|s| s.to_array()),
            robot_action: d.robot_action.to_array(),
            user_action: d.user_command.as_action().to_array(),
            composed: d.composed_action.to_array(),
            reward: d.reward,
            mode,
            subgoals_reached,
        }
    }
}

/// One live episode driven by an external user.
pub struct Session {
    pub id: u64,
    pub config: ScenarioConfig,
    pipeline: Pipeline,
    expectation: ExpectationModel,
    mode: LoopMode,
    start: State,
    state: State,
    /// Ticks since the session was created; survives resets.
    ticks: u64,
    held: Option<UserCommand>,
    held_age: u32,
    pub hold_ticks: u32,
    tracker: EpisodeTracker,
    /// Mode and command applied at each tick of the current episode.
    log: Vec<(LoopMode, UserCommand)>,
    trajectory: Vec<StepDecision>,
    done: bool,
    closed: bool,
}

impl Session {
    pub fn new(id: u64, config: ScenarioConfig, assets: &Assets) -> Result<Self> {
        let pipeline = assets.pipeline(&config, config.seed)?;
        let start = start_for(&config, config.seed);
        let mut tracker = EpisodeTracker::default();
        tracker.progress.advance(&config.scenario.plan, start.agent);
        Ok(Session {
            id,
            expectation: ExpectationModel::for_pipeline(&pipeline),
            pipeline,
            mode: LoopMode::from_enabled(config.ioda_enabled),
            start,
            state: start,
            ticks: 0,
            held: None,
            held_age: 0,
            hold_ticks: DEFAULT_HOLD_TICKS,
            tracker,
            log: Vec::new(),
            trajectory: Vec::new(),
            done: false,
            closed: false,
            config,
        })
    }

    pub fn initial_frame(&self) -> Frame {
        Frame::initial(&self.start, self.mode)
    }

    pub fn mode(&self) -> LoopMode {
        self.mode
    }

    pub fn state(&self) -> State {
        self.state
    }

    pub fn start(&self) -> State {
        self.start
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn command_log(&self) -> &[(LoopMode, UserCommand)] {
        &self.log
    }

    pub fn trajectory(&self) -> &[StepDecision] {
        &self.trajectory
    }

    pub fn metrics(&self) -> RunMetrics {
        self.tracker.metrics(&self.config)
    }

    /// Apply a client message. Returns a frame when the message restarts the
    /// episode.
    pub fn apply(&mut self, msg: ClientMessage) -> Result<Option<Frame>> {
        if self.closed {
            return Err(Error::SessionClosed(self.id));
        }
        match msg {
            ClientMessage::Cmd { axes } => {
                let u = UserCommand {
                    x: axes.x,
                    y: axes.y,
                };
                u.validate(&self.pipeline.partition, self.config.env.a_max)?;
                self.held = Some(u);
                self.held_age = 0;
            }
            ClientMessage::ToggleIoda { on } => self.mode = LoopMode::from_enabled(on),
            ClientMessage::Reset => {
                self.state = self.start;
                self.tracker = EpisodeTracker::default();
                self.tracker
                    .progress
                    .advance(&self.config.scenario.plan, self.start.agent);
                self.log.clear();
                self.trajectory.clear();
                self.held = None;
                self.held_age = 0;
                self.done = false;
                return Ok(Some(Frame::initial(&self.start, self.mode)));
            }
            ClientMessage::Close => self.closed = true,
        }
        Ok(None)
    }

    /// The command in force this tick: the latest one while it is fresh,
    /// zero once it is `hold_ticks` old.
    fn current_command(&mut self) -> UserCommand {
        let zero = UserCommand::zero(&self.pipeline.partition);
        let u = match self.held {
            Some(u) if self.held_age < self.hold_ticks => u,
            _ => zero,
        };
        self.held_age = self.held_age.saturating_add(1);
        // user-owned axes always carry a value so replays are explicit
        UserCommand {
            x: u.x.or(zero.x),
            y: u.y.or(zero.y),
        }
    }

    /// Advance one step. Returns the frame, followed by a `done` message when
    /// the episode ended on this tick.
    pub fn tick(&mut self) -> Result<Vec<ServerMessage>> {
        if self.closed {
            return Err(Error::SessionClosed(self.id));
        }
        if self.done {
            return Ok(Vec::new());
        }
        let u = self.current_command();
        let t = self.log.len();
        let d = self.pipeline.step(self.mode, t, &self.state, &u)?;
        let gap = self.expectation.predictability_gap(&d, &self.pipeline)?;
        let flagged = match self.mode {
            LoopMode::Ioda => d.ood,
            LoopMode::Baseline => self.pipeline.detector().is_ood(&d.input_state),
        };
        self.tracker.record(gap, flagged);
        self.ticks += 1;
        self.state = d.next_state;
        self.log.push((self.mode, u));
        self.trajectory.push(d);
        let plan = &self.config.scenario.plan;
        self.tracker.progress.advance(plan, self.state.agent);
        let mut out = vec![ServerMessage::Frame(Frame::from_decision(
            &d,
            self.mode,
            self.tracker.progress.subgoals_reached(plan),
        ))];
        if self.tracker.progress.primary_reached(plan)
            || self.log.len() >= self.config.env.episode_cap
        {
            self.done = true;
            out.push(ServerMessage::Done {
                metrics: self.metrics(),
            });
        }
        Ok(out)
    }

    /// Drive the session with the simulated user instead of a human.
    pub fn sim_user_command(&mut self) -> ClientMessage {
        let user = SimUser {
            gain: self.config.scenario.user_gain,
            a_max: self.config.env.a_max,
        };
        let mut progress = self.tracker.progress;
        let u = user.command(&self.state, &self.config.scenario.plan, &mut progress);
        ClientMessage::Cmd {
            axes: AxisValues { x: u.x, y: u.y },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct AssetKey {
    path: PathBuf,
    variant: EnvVariant,
    kind: PolicyKind,
    gain: u64,
    metric: MetricKind,
    weights: [u64; 4],
    quantile: u64,
    epsilon: Option<u64>,
}

impl AssetKey {
    fn of(cfg: &ScenarioConfig) -> Self {
        AssetKey {
            path: cfg.rollouts.path.clone(),
            variant: cfg.env.variant,
            kind: cfg.policy.kind,
            gain: cfg.policy.gain.to_bits(),
            metric: cfg.detector.metric.kind,
            weights: cfg.detector.metric.weights.map(f64::to_bits),
            quantile: cfg.detector.quantile.to_bits(),
            epsilon: cfg.detector.epsilon.map(f64::to_bits),
        }
    }
}

/// Concurrent session registry. Sessions over the same observation set share
/// one [`Assets`] instance.
#[derive(Default)]
pub struct SessionRegistry {
    next_id: AtomicU64,
    sessions: Mutex<HashMap<u64, Arc<Mutex<Session>>>>,
    assets: Mutex<HashMap<AssetKey, Arc<Assets>>>,
}

impl SessionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn assets_for(&self, cfg: &ScenarioConfig) -> Result<Arc<Assets>> {
        let key = AssetKey::of(cfg);
        if let Some(a) = self.assets.lock().expect("asset cache poisoned").get(&key) {
            return Ok(a.clone());
        }
        // Built outside the lock; a concurrent duplicate build is harmless.
        let built = Arc::new(Assets::load(cfg)?);
        let mut cache = self.assets.lock().expect("asset cache poisoned");
        Ok(cache.entry(key).or_insert(built).clone())
    }

    pub fn create(&self, cfg: ScenarioConfig) -> Result<(u64, Frame)> {
        cfg.validate()?;
        let assets = self.assets_for(&cfg)?;
        let id = self.next_id.fetch_add(1, Ordering::Relaxed) + 1;
        let session = Session::new(id, cfg, &assets)?;
        let frame = session.initial_frame();
        self.sessions
            .lock()
            .expect("session registry poisoned")
            .insert(id, Arc::new(Mutex::new(session)));
        Ok((id, frame))
    }

    pub fn get(&self, id: u64) -> Result<Arc<Mutex<Session>>> {
        self.sessions
            .lock()
            .expect("session registry poisoned")
            .get(&id)
            .cloned()
            .ok_or(Error::SessionNotFound(id))
    }

    pub fn close(&self, id: u64) -> Result<()> {
        let s = self
            .sessions
            .lock()
            .expect("session registry poisoned")
            .remove(&id)
            .ok_or(Error::SessionNotFound(id))?;
        s.lock().expect("session poisoned").closed = true;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sessions
            .lock()
            .expect("session registry poisoned")
            .len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Convenience wrapper: apply an optional message and advance one tick.
    pub fn session_tick(&self, id: u64, msg: Option<ClientMessage>) -> Result<Vec<ServerMessage>> {
        let s = self.get(id)?;
        let mut s = s.lock().expect("session poisoned");
        let mut out = Vec::new();
        if let Some(m) = msg {
            if let Some(f) = s.apply(m)? {
                out.push(ServerMessage::Frame(f));
            }
        }
        if !s.is_closed() {
            out.extend(s.tick()?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::cmd_collect;

    fn setup(dir: &std::path::Path) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::detour(EnvVariant::FreezeYOutside, true);
        cfg.rollouts.count = 300;
        cfg.rollouts.path = dir.join("d.jsonl");
        cmd_collect(&cfg).unwrap();
        cfg
    }

    fn frames(msgs: &[ServerMessage]) -> Vec<&Frame> {
        msgs.iter()
            .filter_map(|m| match m {
                ServerMessage::Frame(f) => Some(f),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn message_schema() {
        let m: ClientMessage = serde_json::from_str(r#"{"type":"cmd","axes":{"x":0.01}}"#).unwrap();
        assert_eq!(
            m,
            ClientMessage::Cmd {
                axes: AxisValues {
                    x: Some(0.01),
                    y: None
                }
            }
        );
        let m: ClientMessage =
            serde_json::from_str(r#"{"type":"toggle_ioda","on":false}"#).unwrap();
        assert_eq!(m, ClientMessage::ToggleIoda { on: false });
        assert_eq!(
            serde_json::from_str::<ClientMessage>(r#"{"type":"reset"}"#).unwrap(),
            ClientMessage::Reset
        );
        assert_eq!(
            serde_json::from_str::<ClientMessage>(r#"{"type":"close"}"#).unwrap(),
            ClientMessage::Close
        );
        let f = Frame::initial(
            &State::new(
                crate::env::Vec2::new(0.1, 0.2),
                crate::env::Vec2::new(0.3, 0.4),
            ),
            LoopMode::Ioda,
        );
        let text = serde_json::to_string(&ServerMessage::Frame(f)).unwrap();
        assert_eq!(
            text,
            r#"{"type":"frame","t":0,"agent":[0.1,0.2],"goal":[0.3,0.4],"ood":false,"imagined":null,"robot_action":[0.0,0.0],"user_action":[0.0,0.0],"composed":[0.0,0.0],"reward":0.0,"mode":"ioda","subgoals_reached":0}"#
        );
    }

    #[test]
    fn create_and_tick() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(dir.path());
        let reg = SessionRegistry::new();
        let (id, frame) = reg.create(cfg.clone()).unwrap();
        let start = start_for(&cfg, cfg.seed);
        assert_eq!(frame.agent, [start.agent.x, start.agent.y]);
        assert_eq!(frame.t, 0);
        let out = reg.session_tick(id, None).unwrap();
        assert_eq!(frames(&out)[0].t, 1);
        assert!(matches!(
            reg.session_tick(999, None),
            Err(Error::SessionNotFound(999))
        ));
    }

    #[test]
    fn missing_rollouts_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ScenarioConfig::default();
        cfg.rollouts.path = dir.path().join("none.jsonl");
        assert!(SessionRegistry::new().create(cfg).is_err());
    }

    #[test]
    fn sessions_share_assets_but_not_state() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(dir.path());
        let reg = SessionRegistry::new();
        let (a, _) = reg.create(cfg.clone()).unwrap();
        let (b, _) = reg.create(cfg.clone()).unwrap();
        assert_ne!(a, b);
        assert!(Arc::ptr_eq(
            reg.get(a).unwrap().lock().unwrap().pipeline().index(),
            reg.get(b).unwrap().lock().unwrap().pipeline().index()
        ));
        for _ in 0..5 {
            reg.session_tick(
                a,
                Some(ClientMessage::Cmd {
                    axes: AxisValues {
                        x: Some(-0.05),
                        y: None,
                    },
                }),
            )
            .unwrap();
        }
        let sa = reg.get(a).unwrap().lock().unwrap().state();
        let sb = reg.get(b).unwrap().lock().unwrap().state();
        assert_ne!(sa, sb);
        assert_eq!(sb, start_for(&cfg, cfg.seed));
    }

    #[test]
    fn held_command_expires() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(dir.path());
        let reg = SessionRegistry::new();
        let (id, _) = reg.create(cfg).unwrap();
        reg.session_tick(
            id,
            Some(ClientMessage::Cmd {
                axes: AxisValues {
                    x: Some(0.03),
                    y: None,
                },
            }),
        )
        .unwrap();
        for _ in 0..15 {
            reg.session_tick(id, None).unwrap();
        }
        let s = reg.get(id).unwrap();
        let s = s.lock().unwrap();
        let xs: Vec<f64> = s.command_log().iter().map(|(_, u)| u.x.unwrap()).collect();
        assert_eq!(&xs[..10], &[0.03; 10]);
        assert!(xs[10..].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn idle_session_runs_autonomously() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(dir.path());
        let reg = SessionRegistry::new();
        let (id, _) = reg.create(cfg).unwrap();
        let out = reg.session_tick(id, None).unwrap();
        let f = frames(&out)[0];
        assert_eq!(f.user_action, [0.0, 0.0]);
        assert_eq!(f.composed[0], 0.0);
    }

    #[test]
    fn toggle_switches_mode_and_keeps_trajectory_continuous() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(dir.path());
        let reg = SessionRegistry::new();
        let (id, _) = reg.create(cfg).unwrap();
        let left = || {
            Some(ClientMessage::Cmd {
                axes: AxisValues {
                    x: Some(-0.05),
                    y: None,
                },
            })
        };
        for _ in 0..8 {
            reg.session_tick(id, left()).unwrap();
        }
        let out = reg
            .session_tick(id, Some(ClientMessage::ToggleIoda { on: false }))
            .unwrap();
        assert_eq!(frames(&out)[0].mode, LoopMode::Baseline);
        let s = reg.get(id).unwrap();
        let s = s.lock().unwrap();
        let tr = s.trajectory();
        for w in tr.windows(2) {
            assert_eq!(w[0].next_state, w[1].input_state);
        }
        assert_eq!(s.command_log().last().unwrap().0, LoopMode::Baseline);
    }

    #[test]
    fn replay_reproduces_session() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(dir.path());
        let reg = SessionRegistry::new();
        let (id, _) = reg.create(cfg).unwrap();
        let s = reg.get(id).unwrap();
        let mut s = s.lock().unwrap();
        for k in 0..120 {
            if k % 3 == 0 {
                let m = s.sim_user_command();
                s.apply(m).unwrap();
            }
            if k == 40 {
                s.apply(ClientMessage::ToggleIoda { on: false }).unwrap();
            }
            if k == 60 {
                s.apply(ClientMessage::ToggleIoda { on: true }).unwrap();
            }
            s.tick().unwrap();
            if s.is_done() {
                break;
            }
        }
        let replayed = s
            .pipeline()
            .replay(&s.start(), s.command_log().iter().copied())
            .unwrap();
        assert_eq!(replayed.as_slice(), s.trajectory());
    }

    #[test]
    fn episode_cap_ends_with_done() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = setup(dir.path());
        cfg.env.episode_cap = 5;
        let reg = SessionRegistry::new();
        let (id, _) = reg.create(cfg).unwrap();
        let mut last = Vec::new();
        for _ in 0..5 {
            last = reg.session_tick(id, None).unwrap();
        }
        match last.last().unwrap() {
            ServerMessage::Done { metrics } => assert_eq!(metrics.steps, 5),
            other => panic!("expected done, got {other:?}"),
        }
        assert!(reg.session_tick(id, None).unwrap().is_empty());
        // reset restarts the episode
        let out = reg.session_tick(id, Some(ClientMessage::Reset)).unwrap();
        assert_eq!(frames(&out)[0].t, 0);
        assert_eq!(frames(&out)[1].t, 1);
        reg.close(id).unwrap();
        assert!(reg.session_tick(id, None).is_err());
    }
}
