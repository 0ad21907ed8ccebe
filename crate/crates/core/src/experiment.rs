//! Batch experiments: collect the observation set, run seeded scenarios in
//! either loop mode, and aggregate across seeds.
//!
//! Output files (all deterministic given config and seed):
//!
//! * `collect`: the rollout file at `rollouts.path` and a calibration
//!   summary `<stem>.calibration.json` next to it.
//! * `run`: `<out>/trajectory.jsonl` and `<out>/metrics.json`.
//! * `eval`: `<out>/eval.csv` plus per-seed `<out>/eval/<mode>/seed-<n>.json`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;
use crate::control::{LoopMode, Pipeline, StepDecision, UserCommand};
use crate::env::{Action, State, Vec2};
use crate::error::{Error, Result};
use crate::index::StateIndex;
use crate::metric::Metric;
use crate::ood::{DetectorModel, OodDetector};
use crate::policy::{PolicySpec, ReferencePolicy};
use crate::rollout::{self, RolloutMeta, RolloutSet, FORMAT_VERSION};
use crate::user::{ExpectationModel, PlanProgress, SimUser};

/// Observation set plus everything derived from it. Read-only once built and
/// shared by every run or session over the same set.
#[derive(Debug)]
pub struct Assets {
    pub meta: RolloutMeta,
    pub states: Vec<State>,
    pub n_rollouts: usize,
    pub index: Arc<StateIndex>,
    pub detector: Arc<DetectorModel>,
}

impl Assets {
    pub fn build(cfg: &ScenarioConfig, set: &RolloutSet) -> Result<Self> {
        check_compatible(cfg, &set.meta)?;
        let states = set.all_states();
        let index = StateIndex::shared(&states, cfg.detector.metric)?;
        let detector = match cfg.detector.epsilon {
            Some(eps) => DetectorModel::with_epsilon(index.clone(), eps)?,
            None => DetectorModel::calibrate_index(index.clone(), cfg.detector.quantile)?,
        };
        Ok(Assets {
            meta: set.meta.clone(),
            n_rollouts: set.n_rollouts(),
            states,
            index,
            detector: Arc::new(detector),
        })
    }

    /// Load the configured rollout file and build assets over it.
    pub fn load(cfg: &ScenarioConfig) -> Result<Self> {
        let path = &cfg.rollouts.path;
        let set = RolloutSet::load(path, &cfg.env)?;
        let cal_path = calibration_path(path);
        if cal_path.exists() {
            let text = fs::read_to_string(&cal_path).map_err(|e| Error::io(&cal_path, e))?;
            let cal: CalibrationSummary = serde_json::from_str(&text)?;
            if cal.metric != cfg.detector.metric {
                return Err(Error::Mismatch(format!(
                    "rollout file was calibrated with metric {} but the config asks for {}",
                    cal.metric.kind, cfg.detector.metric.kind
                )));
            }
        }
        Assets::build(cfg, &set)
    }

    pub fn calibration_summary(&self) -> CalibrationSummary {
        CalibrationSummary {
            metric: *self.index.metric(),
            epsilon: self.detector.epsilon,
            calibration: self.detector.calibration.clone(),
            n_states: self.states.len(),
            n_rollouts: self.n_rollouts,
        }
    }

    /// A pipeline for one run; the seed only perturbs the sporadic policy's
    /// noise, which never affects behavior inside the workspace.
    pub fn pipeline(&self, cfg: &ScenarioConfig, seed: u64) -> Result<Pipeline> {
        let spec = PolicySpec {
            noise_seed: run_noise_seed(cfg.policy.noise_seed, seed),
            ..cfg.policy
        };
        let policy = Arc::new(ReferencePolicy::new(spec, &cfg.env)?);
        Pipeline::new(
            cfg.env.clone(),
            cfg.partition,
            policy,
            self.detector.clone() as Arc<dyn OodDetector>,
            self.index.clone(),
        )
    }
}

fn check_compatible(cfg: &ScenarioConfig, meta: &RolloutMeta) -> Result<()> {
    if meta.variant != cfg.env.variant {
        return Err(Error::Mismatch(format!(
            "rollout file was collected under variant {} but the config runs {}",
            meta.variant, cfg.env.variant
        )));
    }
    if meta.policy.kind != cfg.policy.kind || meta.policy.gain != cfg.policy.gain {
        return Err(Error::Mismatch(format!(
            "rollout file policy {}/{} does not match config policy {}/{}",
            meta.policy.kind, meta.policy.gain, cfg.policy.kind, cfg.policy.gain
        )));
    }
    Ok(())
}

pub fn run_noise_seed(base: u64, run_seed: u64) -> u64 {
    base ^ run_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn calibration_path(rollout_path: &Path) -> PathBuf {
    let stem = rollout_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "rollouts".into());
    rollout_path.with_file_name(format!("{stem}.calibration.json"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub metric: Metric,
    pub epsilon: f64,
    pub calibration: crate::ood::Calibration,
    pub n_states: usize,
    pub n_rollouts: usize,
}

/// Start state for a seeded run: the nominal start plus uniform jitter.
pub fn start_for(cfg: &ScenarioConfig, seed: u64) -> State {
    let j = cfg.scenario.start_jitter;
    let mut start = cfg.scenario.start;
    if j > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        start = start + Vec2::new(rng.random_range(-j..=j), rng.random_range(-j..=j));
    }
    State::new(start, cfg.scenario.plan.primary_goal)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub subgoals_reached: usize,
    pub total_subgoals: usize,
    pub primary_goal_reached: bool,
    pub steps: usize,
    pub mean_gap: f64,
    pub max_gap: f64,
    /// Steps whose input state the detector flags, whatever the loop mode.
    pub ood_step_count: usize,
}

impl RunMetrics {
    pub fn success(&self) -> bool {
        self.primary_goal_reached && self.subgoals_reached == self.total_subgoals
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub seed: u64,
    pub start: State,
    pub modes: Vec<LoopMode>,
    pub decisions: Vec<StepDecision>,
    /// Predictability gap of each decision.
    pub gaps: Vec<f64>,
    /// Detector verdict on each decision's input state.
    pub flagged: Vec<bool>,
    pub metrics: RunMetrics,
}

/// Per-episode bookkeeping shared by batch runs and live sessions.
#[derive(Clone, Debug, Default)]
pub struct EpisodeTracker {
    pub progress: PlanProgress,
    gap_sum: f64,
    max_gap: f64,
    ood_steps: usize,
    steps: usize,
}

impl EpisodeTracker {
    pub fn record(&mut self, gap: f64, flagged: bool) {
        self.steps += 1;
        self.gap_sum += gap;
        self.max_gap = self.max_gap.max(gap);
        self.ood_steps += usize::from(flagged);
    }

    pub fn metrics(&self, cfg: &ScenarioConfig) -> RunMetrics {
        let plan = &cfg.scenario.plan;
        RunMetrics {
            subgoals_reached: self.progress.subgoals_reached(plan),
            total_subgoals: plan.total_subgoals(),
            primary_goal_reached: self.progress.primary_reached(plan),
            steps: self.steps,
            mean_gap: if self.steps == 0 {
                0.0
            } else {
                self.gap_sum / self.steps as f64
            },
            max_gap: self.max_gap,
            ood_step_count: self.ood_steps,
        }
    }
}

/// Run the simulated user against the pipeline until the primary goal is
/// reached or the episode cap runs out.
pub fn run_episode(
    cfg: &ScenarioConfig,
    assets: &Assets,
    seed: u64,
    mode: LoopMode,
) -> Result<RunResult> {
    let pipeline = assets.pipeline(cfg, seed)?;
    let w = ExpectationModel::for_pipeline(&pipeline);
    let user = SimUser {
        gain: cfg.scenario.user_gain,
        a_max: cfg.env.a_max,
    };
    let plan = &cfg.scenario.plan;
    let start = start_for(cfg, seed);
    let mut s = start;
    let mut tracker = EpisodeTracker::default();
    let mut decisions = Vec::new();
    let mut gaps = Vec::new();
    let mut flagged = Vec::new();
    for t in 0..cfg.env.episode_cap {
        let u = user.command(&s, plan, &mut tracker.progress);
        if tracker.progress.primary_reached(plan) {
            break;
        }
        let d = pipeline.step(mode, t, &s, &u)?;
        let gap = w.predictability_gap(&d, &pipeline)?;
        let ood = match mode {
            LoopMode::Ioda => d.ood,
            LoopMode::Baseline => pipeline.detector().is_ood(&s),
        };
        tracker.record(gap, ood);
        s = d.next_state;
        decisions.push(d);
        gaps.push(gap);
        flagged.push(ood);
    }
    tracker.progress.advance(plan, s.agent);
    Ok(RunResult {
        seed,
        start,
        modes: vec![mode; decisions.len()],
        decisions,
        gaps,
        flagged,
        metrics: tracker.metrics(cfg),
    })
}

#[derive(Serialize, Deserialize)]
struct TrajectoryHeader {
    meta: TrajectoryMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub kind: String,
    pub variant: crate::env::EnvVariant,
    pub policy: PolicySpec,
    pub seed: u64,
    pub start: [f64; 4],
    pub version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryLine {
    t: usize,
    mode: LoopMode,
    state: [f64; 4],
    ood: bool,
    imagined: Option<[f64; 4]>,
    robot_action: [f64; 2],
    user_command: UserCommand,
    composed: [f64; 2],
    next_state: [f64; 4],
    reward: f64,
}

impl TrajectoryLine {
    fn new(mode: LoopMode, d: &StepDecision) -> Self {
        TrajectoryLine {
            t: d.t,
            mode,
            state: d.input_state.to_array(),
            ood: d.ood,
            imagined: d.imagined_state.map(|s| s.to_array()),
            robot_action: d.robot_action.to_array(),
            user_command: d.user_command,
            composed: d.composed_action.to_array(),
            next_state: d.next_state.to_array(),
            reward: d.reward,
        }
    }

    fn into_decision(self) -> (LoopMode, StepDecision) {
        let act = |a: [f64; 2]| Action::new(a[0], a[1]);
        (
            self.mode,
            StepDecision {
                t: self.t,
                input_state: State::from_array(self.state),
                ood: self.ood,
                imagined_state: self.imagined.map(State::from_array),
                robot_action: act(self.robot_action),
                user_command: self.user_command,
                composed_action: act(self.composed),
                next_state: State::from_array(self.next_state),
                reward: self.reward,
            },
        )
    }
}

/// Line-delimited log of step decisions, one header line first.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryLog {
    pub meta: TrajectoryMeta,
    pub steps: Vec<(LoopMode, StepDecision)>,
}

impl TrajectoryLog {
    pub fn from_run(cfg: &ScenarioConfig, run: &RunResult) -> Self {
        TrajectoryLog {
            meta: TrajectoryMeta {
                kind: "trajectory".into(),
                variant: cfg.env.variant,
                policy: cfg.policy,
                seed: run.seed,
                start: run.start.to_array(),
                version: FORMAT_VERSION,
            },
            steps: run
                .modes
                .iter()
                .copied()
                .zip(run.decisions.iter().copied())
                .collect(),
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let io = |e| Error::io("<trajectory>", e);
        serde_json::to_writer(
            &mut w,
            &TrajectoryHeader {
                meta: self.meta.clone(),
            },
        )?;
        w.write_all(b"\n").map_err(io)?;
        for (mode, d) in &self.steps {
            serde_json::to_writer(&mut w, &TrajectoryLine::new(*mode, d))?;
            w.write_all(b"\n").map_err(io)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let header = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing header".into()))?
            .map_err(|e| Error::io(path, e))?;
        let header: TrajectoryHeader =
            serde_json::from_str(&header).map_err(|e| parse_err(1, e.to_string()))?;
        let mut steps = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let l: TrajectoryLine =
                serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e.to_string()))?;
            steps.push(l.into_decision());
        }
        Ok(TrajectoryLog {
            meta: header.meta,
            steps,
        })
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct CollectReport {
    pub rollout_path: PathBuf,
    pub calibration_path: PathBuf,
    pub summary: CalibrationSummary,
}

/// Collect the observation set, write it, and write the detector calibration.
pub fn cmd_collect(cfg: &ScenarioConfig) -> Result<CollectReport> {
    cfg.validate()?;
    let policy = ReferencePolicy::new(cfg.policy, &cfg.env)?;
    let set = rollout::collect(
        &policy,
        cfg.policy,
        &cfg.env,
        cfg.rollouts.count,
        cfg.rollouts.seed,
    )?;
    let path = cfg.rollouts.path.clone();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    set.save(&path)?;
    let summary = Assets::build(cfg, &set)?.calibration_summary();
    let cal = calibration_path(&path);
    write_json(&cal, &summary)?;
    Ok(CollectReport {
        rollout_path: path,
        calibration_path: cal,
        summary,
    })
}

/// Run one seeded scenario and write its trajectory and metrics.
pub fn cmd_run(cfg: &ScenarioConfig) -> Result<RunResult> {
    cfg.validate()?;
    let assets = Assets::load(cfg)?;
    let run = run_episode(
        cfg,
        &assets,
        cfg.seed,
        LoopMode::from_enabled(cfg.ioda_enabled),
    )?;
    ensure_dir(&cfg.out_dir)?;
    TrajectoryLog::from_run(cfg, &run).save(&cfg.out_dir.join("trajectory.jsonl"))?;
    write_json(&cfg.out_dir.join("metrics.json"), &run.metrics)?;
    Ok(run)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub condition: LoopMode,
    pub variant: crate::env::EnvVariant,
    pub seeds: usize,
    pub success_rate: f64,
    pub mean_subgoals_reached: f64,
    pub mean_steps: f64,
    pub mean_gap: f64,
    pub max_gap: f64,
    pub mean_ood_steps: f64,
}

impl EvalRow {
    pub fn aggregate(cfg: &ScenarioConfig, condition: LoopMode, runs: &[RunMetrics]) -> Self {
        let n = runs.len() as f64;
        let mean = |f: &dyn Fn(&RunMetrics) -> f64| runs.iter().map(f).sum::<f64>() / n;
        EvalRow {
            condition,
            variant: cfg.env.variant,
            seeds: runs.len(),
            success_rate: mean(&|m| f64::from(u8::from(m.success()))),
            mean_subgoals_reached: mean(&|m| m.subgoals_reached as f64),
            mean_steps: mean(&|m| m.steps as f64),
            mean_gap: mean(&|m| m.mean_gap),
            max_gap: runs.iter().map(|m| m.max_gap).fold(0.0, f64::max),
            mean_ood_steps: mean(&|m| m.ood_step_count as f64),
        }
    }
}

/// Run seeds `cfg.seed .. cfg.seed + n_seeds` under both loop modes in
/// parallel, in memory.
pub fn evaluate(
    cfg: &ScenarioConfig,
    assets: &Assets,
    n_seeds: usize,
) -> Result<Vec<(LoopMode, Vec<RunResult>)>> {
    if n_seeds == 0 {
        return Err(Error::Config("need at least one seed".into()));
    }
    [LoopMode::Ioda, LoopMode::Baseline]
        .into_iter()
        .map(|mode| {
            let runs = (0..n_seeds as u64)
                .into_par_iter()
                .map(|k| run_episode(cfg, assets, cfg.seed.wrapping_add(k), mode))
                .collect::<Result<Vec<_>>>()?;
            Ok((mode, runs))
        })
        .collect()
}

/// Aggregate table across seeds, written to `<out>/eval.csv`.
pub fn cmd_eval(cfg: &ScenarioConfig, n_seeds: usize) -> Result<Vec<EvalRow>> {
    cfg.validate()?;
    let assets = Assets::load(cfg)?;
    let results = evaluate(cfg, &assets, n_seeds)?;
    let mut rows = Vec::new();
    for (mode, runs) in &results {
        let dir = cfg.out_dir.join("eval").join(mode.as_str());
        ensure_dir(&dir)?;
        for r in runs {
            write_json(&dir.join(format!("seed-{}.json", r.seed)), &r.metrics)?;
        }
        let metrics: Vec<RunMetrics> = runs.iter().map(|r| r.metrics.clone()).collect();
        rows.push(EvalRow::aggregate(cfg, *mode, &metrics));
    }
    let path = cfg.out_dir.join("eval.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Config(e.to_string()))?;
    for row in &rows {
        w.serialize(row).map_err(|e| Error::Config(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}
