//! The observation set: autonomous rollouts the user has watched.
//!
//! On disk a rollout set is UTF-8 JSON lines: one header line
//! `{"meta":{"policy":..,"variant":..,"seed":..,"version":1}}` followed by one
//! line per step
//! `{"rollout_id":0,"t":0,"state":[x,y,gx,gy],"action":[dx,dy],"reward":r}`.
//! Floats are written in shortest round-trip form, so a load after a save is
//! bit-exact.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, EnvVariant, NavEnv, State, Vec2};
use crate::error::{Error, Result};
use crate::policy::{run_autonomous, Policy, PolicySpec, RunOutcome};

pub const FORMAT_VERSION: u32 = 1;

/// Minimum start-goal separation when sampling rollout endpoints.
pub const MIN_START_GOAL_SEPARATION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub rollout_id: usize,
    pub t: usize,
    pub state: State,
    pub action: Action,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutMeta {
    pub policy: PolicySpec,
    pub variant: EnvVariant,
    pub seed: u64,
    pub version: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutSet {
    pub meta: RolloutMeta,
    pub records: Vec<StepRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    meta: RolloutMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    rollout_id: usize,
    t: usize,
    state: [f64; 4],
    action: [f64; 2],
    reward: f64,
}

impl From<&StepRecord> for Line {
    fn from(r: &StepRecord) -> Self {
        Line {
            rollout_id: r.rollout_id,
            t: r.t,
            state: r.state.to_array(),
            action: r.action.to_array(),
            reward: r.reward,
        }
    }
}

impl From<Line> for StepRecord {
    fn from(l: Line) -> Self {
        StepRecord {
            rollout_id: l.rollout_id,
            t: l.t,
            state: State::from_array(l.state),
            action: Action::new(l.action[0], l.action[1]),
            reward: l.reward,
        }
    }
}

fn sample_endpoints(env: &NavEnv, rng: &mut ChaCha8Rng) -> State {
    let w = &env.workspace;
    let point = |rng: &mut ChaCha8Rng| {
        Vec2::new(
            rng.random_range(w.min.x..w.max.x),
            rng.random_range(w.min.y..w.max.y),
        )
    };
    loop {
        let start = point(rng);
        let goal = point(rng);
        if start.dist(&goal) >= MIN_START_GOAL_SEPARATION {
            return State::new(start, goal);
        }
    }
}

/// Roll the policy out from each given start, failing if any rollout leaves
/// the workspace or misses the goal.
pub fn collect_from_starts(
    policy: &dyn Policy,
    spec: PolicySpec,
    env: &NavEnv,
    starts: &[State],
    seed: u64,
) -> Result<RolloutSet> {
    let mut records = Vec::new();
    for (rollout_id, s0) in starts.iter().enumerate() {
        let run = run_autonomous(policy, env, s0)?;
        if run.outcome != RunOutcome::ReachedGoal {
            return Err(Error::NonOptimalRollout {
                rollout_id,
                reason: format!("{:?}", run.outcome),
            });
        }
        for (t, (state, action)) in run.steps.into_iter().enumerate() {
            records.push(StepRecord {
                rollout_id,
                t,
                state,
                action,
                reward: env.reward(&state, &action)?,
            });
        }
    }
    Ok(RolloutSet {
        meta: RolloutMeta {
            policy: spec,
            variant: env.variant,
            seed,
            version: FORMAT_VERSION,
        },
        records,
    })
}

/// Collect `n_rollouts` rollouts from seeded uniform in-workspace endpoints.
pub fn collect(
    policy: &dyn Policy,
    spec: PolicySpec,
    env: &NavEnv,
    n_rollouts: usize,
    seed: u64,
) -> Result<RolloutSet> {
    if n_rollouts == 0 {
        return Err(Error::Config("n_rollouts must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Vec<State> = (0..n_rollouts)
        .map(|_| sample_endpoints(env, &mut rng))
        .collect();
    collect_from_starts(policy, spec, env, &starts, seed)
}

impl RolloutSet {
    pub fn empty(meta: RolloutMeta) -> Self {
        RolloutSet {
            meta,
            records: Vec::new(),
        }
    }

    /// States in `(rollout_id, t)` order; this order breaks projection ties.
    pub fn all_states(&self) -> Vec<State> {
        self.records.iter().map(|r| r.state).collect()
    }

    pub fn n_rollouts(&self) -> usize {
        self.records.last().map_or(0, |r| r.rollout_id + 1)
    }

    /// Check ordering, finiteness, workspace membership and goal attainment.
    pub fn validate(&self, env: &NavEnv) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidRolloutSet(msg));
        let mut prev: Option<&StepRecord> = None;
        for (i, r) in self.records.iter().enumerate() {
            if !(r.state.is_finite() && r.action.is_finite() && r.reward.is_finite()) {
                return bad(format!("record {i}: non-finite field"));
            }
            let expected = match prev {
                None => (0, 0),
                Some(p) if r.rollout_id == p.rollout_id => (p.rollout_id, p.t + 1),
                Some(p) => (p.rollout_id + 1, 0),
            };
            if (r.rollout_id, r.t) != expected {
                return bad(format!(
                    "record {i}: expected rollout {} step {}, found rollout {} step {}",
                    expected.0, expected.1, r.rollout_id, r.t
                ));
            }
            if !env.in_workspace(r.state.agent) || !env.in_workspace(r.state.goal) {
                return bad(format!("record {i}: state outside workspace"));
            }
            if let Some(p) = prev {
                if p.rollout_id != r.rollout_id && !env.reached_goal(&p.state) {
                    return bad(format!("rollout {} did not reach its goal", p.rollout_id));
                }
            }
            prev = Some(r);
        }
        if let Some(p) = prev {
            if !env.reached_goal(&p.state) {
                return bad(format!("rollout {} did not reach its goal", p.rollout_id));
            }
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        serde_json::to_writer(
            &mut w,
            &Header {
                meta: self.meta.clone(),
            },
        )?;
        w.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
        for r in &self.records {
            serde_json::to_writer(&mut w, &Line::from(r))?;
            w.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Parse without geometric validation; ordering is still enforced.
    pub fn read_from(r: impl BufRead, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = r.lines().enumerate();
        let header: Header = match lines.next() {
            Some((_, Ok(l))) => {
                serde_json::from_str(&l).map_err(|e| parse_err(1, format!("bad header: {e}")))?
            }
            Some((_, Err(e))) => return Err(Error::io(path, e)),
            None => return Err(parse_err(1, "missing header".into())),
        };
        if header.meta.version != FORMAT_VERSION {
            return Err(parse_err(
                1,
                format!("unsupported version {}", header.meta.version),
            ));
        }
        let mut records: Vec<StepRecord> = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: StepRecord = serde_json::from_str::<Line>(&line)
                .map_err(|e| parse_err(line_no, e.to_string()))?
                .into();
            let expected = match records.last() {
                None => (0, 0),
                Some(p) if rec.rollout_id == p.rollout_id => (p.rollout_id, p.t + 1),
                Some(p) => (p.rollout_id + 1, 0),
            };
            if (rec.rollout_id, rec.t) != expected {
                return Err(parse_err(
                    line_no,
                    format!(
                        "non-contiguous record: expected rollout {} step {}, found rollout {} step {}",
                        expected.0, expected.1, rec.rollout_id, rec.t
                    ),
                ));
            }
            records.push(rec);
        }
        Ok(RolloutSet {
            meta: header.meta,
            records,
        })
    }

    /// Load and validate against `env`.
    pub fn load(path: impl AsRef<Path>, env: &NavEnv) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let set = Self::read_from(BufReader::new(file), path)?;
        set.validate(env)?;
        Ok(set)
    }
}
