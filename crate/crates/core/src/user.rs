//! Simulated user, the user's expectation model, and predictability metrics.
//!
//! The expectation model assumes that in an unfamiliar state the user expects
//! the robot to do what it would do in the closest state they have observed.
//! It therefore shares the projection index (and its tie-breaking) with the
//! control loop, which is what makes the IODA loop's behavior exactly match
//! it.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::control::{compose, Axis, Pipeline, StepDecision, UserCommand};
use crate::env::{State, Vec2};
use crate::error::{Error, Result};
use crate::index::StateIndex;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgoalPlan {
    pub subgoals: Vec<Vec2>,
    pub primary_goal: Vec2,
    pub reach_radius: f64,
}

impl SubgoalPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.reach_radius.is_finite() && self.reach_radius > 0.0) {
            return Err(Error::Config("reach_radius must be > 0".into()));
        }
        if !self.primary_goal.is_finite() || !self.subgoals.iter().all(Vec2::is_finite) {
            return Err(Error::NonFinite("subgoal plan"));
        }
        Ok(())
    }

    pub fn total_subgoals(&self) -> usize {
        self.subgoals.len()
    }
}

/// Index of the current target: `0..n` are subgoals, `n` is the primary goal,
/// and `n + 1` means the primary goal has been reached. Never decreases.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PlanProgress {
    target: usize,
}

impl PlanProgress {
    pub fn subgoals_reached(&self, plan: &SubgoalPlan) -> usize {
        self.target.min(plan.subgoals.len())
    }

    pub fn primary_reached(&self, plan: &SubgoalPlan) -> bool {
        self.target > plan.subgoals.len()
    }

    pub fn target_index(&self) -> usize {
        self.target
    }

    pub fn target(&self, plan: &SubgoalPlan) -> Vec2 {
        plan.subgoals
            .get(self.target)
            .copied()
            .unwrap_or(plan.primary_goal)
    }

    /// Advance past every target within `reach_radius` of `agent`.
    pub fn advance(&mut self, plan: &SubgoalPlan, agent: Vec2) {
        while !self.primary_reached(plan) && agent.dist(&self.target(plan)) <= plan.reach_radius {
            self.target += 1;
        }
    }
}

/// Proportional controller on the user's x axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimUser {
    pub gain: f64,
    pub a_max: f64,
}

impl SimUser {
    pub fn new(a_max: f64) -> Self {
        SimUser { gain: 1.0, a_max }
    }

    /// Advance `progress` on the current state, then steer x toward the
    /// current target.
    pub fn command(
        &self,
        s: &State,
        plan: &SubgoalPlan,
        progress: &mut PlanProgress,
    ) -> UserCommand {
        progress.advance(plan, s.agent);
        let target = progress.target(plan);
        UserCommand::x((self.gain * (target.x - s.agent.x)).clamp(-self.a_max, self.a_max))
    }
}

/// Closest-observed-state model of what the user expects the robot to do.
#[derive(Clone, Debug)]
pub struct ExpectationModel {
    index: Arc<StateIndex>,
}

impl ExpectationModel {
    pub fn new(index: Arc<StateIndex>) -> Self {
        ExpectationModel { index }
    }

    pub fn for_pipeline(p: &Pipeline) -> Self {
        ExpectationModel::new(p.index().clone())
    }

    fn check(&self, p: &Pipeline) -> Result<()> {
        if !Arc::ptr_eq(&self.index, p.index()) && self.index.metric() != p.index().metric() {
            return Err(Error::Mismatch(
                "expectation model and pipeline use different metrics".into(),
            ));
        }
        Ok(())
    }

    /// The user's predicted next state: the policy acting as in the closest
    /// observed state, composed with the user's own command, from the real state.
    pub fn expected_next(&self, s: &State, u: &UserCommand, p: &Pipeline) -> Result<State> {
        self.check(p)?;
        let proxy = self.index.nearest(s).state;
        let a = p.policy().act(&proxy)?;
        p.env.step(s, &compose(u, &a, &p.partition))
    }

    /// Distance between the predicted and the realized next state.
    pub fn predictability_gap(&self, d: &StepDecision, p: &Pipeline) -> Result<f64> {
        let expected = self.expected_next(&d.input_state, &d.user_command, p)?;
        Ok(self.index.metric().dist(&expected, &d.next_state))
    }

    /// Search `observed` for a proxy state `s'` whose outcome is at least as
    /// close to the user's prediction as acting on `s` directly. Returns the
    /// first minimizer of that distance (canonical order) if it satisfies the
    /// inequality.
    pub fn predictability_witness(
        &self,
        s: &State,
        u: &UserCommand,
        observed: &[State],
        p: &Pipeline,
    ) -> Result<Option<State>> {
        let metric = *self.index.metric();
        let predicted = self.expected_next(s, u, p)?;
        let outcome = |proxy: &State| -> Result<State> {
            let a = p.policy().act(proxy)?;
            p.env.step(s, &compose(u, &a, &p.partition))
        };
        let direct = metric.dist(&predicted, &outcome(s)?);
        let mut best: Option<(f64, State)> = None;
        for cand in observed {
            let d = metric.dist(&predicted, &outcome(cand)?);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, *cand));
                if d == 0.0 {
                    // distances are non-negative; nothing later can win the tie
                    break;
                }
            }
        }
        Ok(best.filter(|(d, _)| *d <= direct).map(|(_, s)| s))
    }
}

/// Both sides of the predictability inequality for a given proxy, computed
/// from scratch: `(d(W(s), T(s, u.pi(s))), d(W(s), T(s, u.pi(proxy))))`.
pub fn witness_sides(
    w: &ExpectationModel,
    s: &State,
    u: &UserCommand,
    proxy: &State,
    p: &Pipeline,
) -> Result<(f64, f64)> {
    let predicted = w.expected_next(s, u, p)?;
    let metric = p.index().metric();
    let via = |x: &State| -> Result<State> {
        p.env
            .step(s, &compose(u, &p.policy().act(x)?, &p.partition))
    };
    Ok((
        metric.dist(&predicted, &via(s)?),
        metric.dist(&predicted, &via(proxy)?),
    ))
}

/// Axis helper used by metrics: user-axis displacement of a decision.
pub fn user_axis_displacement(d: &StepDecision, axis: Axis) -> f64 {
    match axis {
        Axis::X => d.next_state.agent.x - d.input_state.agent.x,
        Axis::Y => d.next_state.agent.y - d.input_state.agent.y,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{AxisPartition, LoopMode};
    use crate::env::{EnvVariant, NavEnv};
    use crate::metric::Metric;
    use crate::ood::DetectorModel;
    use crate::policy::{PolicyKind, PolicySpec, ReferencePolicy};
    use crate::rollout::collect;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn st(ax: f64, ay: f64, gx: f64, gy: f64) -> State {
        State::new(Vec2::new(ax, ay), Vec2::new(gx, gy))
    }

    fn pipeline(kind: PolicyKind, variant: EnvVariant, n: usize) -> (Pipeline, Vec<State>) {
        let env = NavEnv::with_variant(variant);
        let spec = PolicySpec {
            kind,
            gain: 1.0,
            noise_seed: 77,
        };
        let policy = Arc::new(ReferencePolicy::new(spec, &env).unwrap());
        let set = collect(policy.as_ref(), spec, &env, n, 8).unwrap();
        let states = set.all_states();
        let index = StateIndex::shared(&states, Metric::l1()).unwrap();
        let det = Arc::new(DetectorModel::calibrate_index(index.clone(), 0.99).unwrap());
        (
            Pipeline::new(env, AxisPartition::user_x(), policy, det, index).unwrap(),
            states,
        )
    }

    fn plan() -> SubgoalPlan {
        SubgoalPlan {
            subgoals: vec![Vec2::new(-0.25, 0.45), Vec2::new(-0.25, 0.75)],
            primary_goal: Vec2::new(0.2, 0.9),
            reach_radius: 0.05,
        }
    }

    #[test]
    fn sim_user_commands() {
        let user = SimUser::new(0.05);
        let plan = SubgoalPlan {
            subgoals: vec![Vec2::new(1.3, 0.5)],
            primary_goal: Vec2::new(0.5, 0.5),
            reach_radius: 0.05,
        };
        let mut prog = PlanProgress::default();
        // clamp(1 * 1.1, +-0.05)
        assert_eq!(
            user.command(&st(0.2, 0.1, 0.5, 0.5), &plan, &mut prog).x,
            Some(0.05)
        );
        let mut prog = PlanProgress::default();
        assert_eq!(
            user.command(&st(1.3, 0.2, 0.5, 0.5), &plan, &mut prog).x,
            Some(0.0)
        );
        // reaching the only subgoal switches the target to the primary goal
        let mut prog = PlanProgress::default();
        let u = user.command(&st(1.3, 0.5, 0.5, 0.5), &plan, &mut prog);
        assert_eq!(prog.subgoals_reached(&plan), 1);
        assert_eq!(prog.target(&plan), plan.primary_goal);
        assert_eq!(u.x, Some(-0.05));
    }

    #[test]
    fn progress_is_monotone() {
        let plan = plan();
        let mut prog = PlanProgress::default();
        let path = [
            Vec2::new(-0.25, 0.45),
            Vec2::new(0.5, 0.5),
            Vec2::new(-0.25, 0.45),
            Vec2::new(-0.25, 0.76),
            Vec2::new(0.2, 0.88),
            Vec2::new(0.9, 0.1),
        ];
        let mut last = 0;
        for p in path {
            prog.advance(&plan, p);
            assert!(prog.target_index() >= last);
            last = prog.target_index();
        }
        assert!(prog.primary_reached(&plan));
        assert_eq!(prog.subgoals_reached(&plan), 2);
    }

    #[test]
    fn expected_next_on_member_matches_policy() {
        let (p, states) = pipeline(PolicyKind::VariantCFreeze, EnvVariant::FreezeYOutside, 200);
        let w = ExpectationModel::for_pipeline(&p);
        let u = UserCommand::x(0.01);
        for s in states.iter().step_by(53) {
            let direct = p
                .env
                .step(s, &compose(&u, &p.policy().act(s).unwrap(), &p.partition))
                .unwrap();
            assert_eq!(w.expected_next(s, &u, &p).unwrap(), direct);
            let d = p.ioda_step(0, s, &u).unwrap();
            assert_eq!(w.predictability_gap(&d, &p).unwrap(), 0.0);
            assert!(w
                .predictability_witness(s, &u, &states, &p)
                .unwrap()
                .is_some());
        }
    }

    #[test]
    fn member_certificate_is_first_zero() {
        let (p, states) = pipeline(PolicyKind::VariantCFreeze, EnvVariant::FreezeYOutside, 50);
        let w = ExpectationModel::for_pipeline(&p);
        let s = states[10];
        let u = UserCommand::x(0.0);
        let cert = w
            .predictability_witness(&s, &u, &states, &p)
            .unwrap()
            .unwrap();
        let (lhs, rhs) = witness_sides(&w, &s, &u, &cert, &p).unwrap();
        assert_eq!(rhs, 0.0);
        assert!(lhs >= rhs);
        let pos = states.iter().position(|x| *x == cert).unwrap();
        assert!(pos <= 10);
    }

    #[test]
    fn singleton_certificate() {
        let env = NavEnv::with_variant(EnvVariant::FreezeYOutside);
        let spec = PolicySpec::new(PolicyKind::VariantCFreeze);
        let policy = Arc::new(ReferencePolicy::new(spec, &env).unwrap());
        let only = st(0.1, 0.5, 0.2, 0.9);
        let index = StateIndex::shared(&[only], Metric::l1()).unwrap();
        let det = Arc::new(DetectorModel::with_epsilon(index.clone(), 0.1).unwrap());
        let p = Pipeline::new(env, AxisPartition::user_x(), policy, det, index).unwrap();
        let w = ExpectationModel::for_pipeline(&p);
        let s = st(-0.3, 0.5, 0.2, 0.9);
        let u = UserCommand::x(-0.05);
        let cert = w.predictability_witness(&s, &u, &[only], &p).unwrap();
        assert_eq!(cert, Some(only));
        let (lhs, rhs) = witness_sides(&w, &s, &u, &only, &p).unwrap();
        assert!(rhs < lhs);
    }

    #[test]
    fn ioda_gap_is_zero_and_baseline_gap_is_not() {
        let (p, states) = pipeline(PolicyKind::VariantCFreeze, EnvVariant::FreezeYOutside, 300);
        let w = ExpectationModel::for_pipeline(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut baseline_positive = 0;
        let n = 200;
        for _ in 0..n {
            let s = st(
                rng.random_range(-0.5..-0.2),
                rng.random_range(0.1..0.8),
                rng.random(),
                rng.random_range(0.9..1.0),
            );
            let u = UserCommand::x(rng.random_range(-0.05..0.05));
            let d = p.step(LoopMode::Ioda, 0, &s, &u).unwrap();
            assert!(d.ood && p.detector().is_ood(&s));
            assert_eq!(w.predictability_gap(&d, &p).unwrap(), 0.0);
            let b = p.step(LoopMode::Baseline, 0, &s, &u).unwrap();
            let gap = w.predictability_gap(&b, &p).unwrap();
            assert!(gap >= 0.0);
            if gap > 0.0 {
                baseline_positive += 1;
                let cert = w
                    .predictability_witness(&s, &u, &states, &p)
                    .unwrap()
                    .unwrap();
                let (lhs, rhs) = witness_sides(&w, &s, &u, &cert, &p).unwrap();
                assert!(rhs <= lhs);
            }
        }
        assert!(baseline_positive * 100 >= n * 95);
    }

    #[test]
    fn sporadic_baseline_gap_mostly_positive() {
        let (p, _) = pipeline(PolicyKind::VariantBSporadic, EnvVariant::LeavePenalty, 300);
        let w = ExpectationModel::for_pipeline(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 500;
        let mut positive = 0;
        for _ in 0..n {
            let s = st(
                rng.random_range(1.2..1.5),
                rng.random_range(-0.5..1.5),
                rng.random(),
                rng.random(),
            );
            assert!(p.detector().is_ood(&s));
            let u = UserCommand::x(rng.random_range(-0.05..0.05));
            let b = p.baseline_step(0, &s, &u).unwrap();
            if w.predictability_gap(&b, &p).unwrap() > 0.0 {
                positive += 1;
            }
        }
        assert!(positive * 100 >= n * 95, "{positive}/{n}");
    }
}
