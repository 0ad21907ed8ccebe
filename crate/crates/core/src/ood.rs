//! Out-of-distribution test against the observed states.
//!
//! The default detector thresholds the nearest-neighbor distance to the
//! observation set. The threshold is a quantile of the leave-one-out
//! nearest-neighbor distances inside the set, so it lives in the same metric
//! and the same index as the projection step.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::State;
use crate::error::{Error, Result};
use crate::index::StateIndex;
use crate::metric::Metric;

/// Floor applied to a calibrated threshold (all-duplicate sets give 0).
pub const EPSILON_FLOOR: f64 = 1e-6;

pub const DEFAULT_QUANTILE: f64 = 0.99;

pub trait OodDetector: Send + Sync {
    fn is_ood(&self, s: &State) -> bool;
    /// Index over the reference states the detector was built from.
    fn reference(&self) -> &Arc<StateIndex>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub quantile: f64,
    pub leave_one_out: bool,
    /// True when `epsilon` came from an explicit override rather than the data.
    pub overridden: bool,
    /// Selected order statistics of the LOO distances, `(q, value)`.
    pub quantiles: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct DetectorModel {
    index: Arc<StateIndex>,
    pub epsilon: f64,
    pub calibration: Calibration,
}

/// 1-based order statistic `ceil(q * n)` of sorted values.
fn order_statistic(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Leave-one-out nearest-neighbor distance of every indexed state.
pub fn loo_distances(index: &StateIndex) -> Vec<f64> {
    (0..index.len())
        .into_par_iter()
        .map(|pos| {
            index
                .nearest_excluding(&index.state(pos), pos)
                .map_or(0.0, |n| n.dist)
        })
        .collect()
}

impl DetectorModel {
    pub fn calibrate(states: &[State], metric: Metric, q: f64) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::TooFewStates(states.len()));
        }
        Self::calibrate_index(StateIndex::shared(states, metric)?, q)
    }

    /// Calibrate over an existing index so projection and detection share it.
    pub fn calibrate_index(index: Arc<StateIndex>, q: f64) -> Result<Self> {
        if index.len() < 2 {
            return Err(Error::TooFewStates(index.len()));
        }
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::Config(format!(
                "quantile must be in (0, 1], got {q}"
            )));
        }
        let mut d = loo_distances(&index);
        d.sort_by(f64::total_cmp);
        let epsilon = order_statistic(&d, q).max(EPSILON_FLOOR);
        let quantiles = [0.5, 0.9, 0.95, 0.99, 1.0]
            .into_iter()
            .map(|p| (p, order_statistic(&d, p)))
            .collect();
        Ok(DetectorModel {
            index,
            epsilon,
            calibration: Calibration {
                quantile: q,
                leave_one_out: true,
                overridden: false,
                quantiles,
            },
        })
    }

    pub fn with_epsilon(index: Arc<StateIndex>, epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {epsilon}")));
        }
        Ok(DetectorModel {
            index,
            epsilon,
            calibration: Calibration {
                quantile: 1.0,
                leave_one_out: false,
                overridden: true,
                quantiles: Vec::new(),
            },
        })
    }

    pub fn metric(&self) -> &Metric {
        self.index.metric()
    }

    pub fn nearest_distance(&self, s: &State) -> f64 {
        self.index.nearest(s).dist
    }
}

impl OodDetector for DetectorModel {
    /// OOD iff the nearest reference state is strictly farther than epsilon.
    fn is_ood(&self, s: &State) -> bool {
        self.nearest_distance(s) > self.epsilon
    }

    fn reference(&self) -> &Arc<StateIndex> {
        &self.index
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{NavEnv, Vec2};
    use crate::index::linear_scan;
    use crate::policy::{PolicyKind, PolicySpec, ReferencePolicy};
    use crate::rollout::collect;

    fn st(ax: f64, ay: f64, gx: f64, gy: f64) -> State {
        State::new(Vec2::new(ax, ay), Vec2::new(gx, gy))
    }

    fn grid_line() -> Vec<State> {
        // 0.25-spaced values are exact in binary, so every LOO distance is exactly 0.25.
        (0..9).map(|i| st(i as f64 * 0.25, 0.0, 0.5, 0.5)).collect()
    }

    #[test]
    fn grid_line_threshold() {
        let m = DetectorModel::calibrate(&grid_line(), Metric::l1(), 1.0).unwrap();
        assert_eq!(m.epsilon, 0.25);
        // 0.1-spaced line: every LOO distance is 0.1 up to rounding
        let states: Vec<State> = (0..11).map(|i| st(i as f64 * 0.1, 0.0, 0.5, 0.5)).collect();
        let m = DetectorModel::calibrate(&states, Metric::l1(), 1.0).unwrap();
        assert!((m.epsilon - 0.1).abs() < 1e-12);
    }

    #[test]
    fn duplicates_hit_floor() {
        let s = st(0.2, 0.2, 0.5, 0.5);
        let m = DetectorModel::calibrate(&[s, s], Metric::l1(), 0.99).unwrap();
        assert_eq!(m.epsilon, EPSILON_FLOOR);
        assert!(!m.is_ood(&s));
    }

    #[test]
    fn too_few_states() {
        assert!(matches!(
            DetectorModel::calibrate(&[st(0.0, 0.0, 0.0, 0.0)], Metric::l1(), 0.99),
            Err(Error::TooFewStates(1))
        ));
        assert!(DetectorModel::calibrate(&grid_line(), Metric::l1(), 0.0).is_err());
    }

    #[test]
    fn boundary_counts_in_distribution() {
        let m = DetectorModel::calibrate(&grid_line(), Metric::l1(), 1.0).unwrap();
        // exactly 0.25 from (2.0, 0)
        assert!(!m.is_ood(&st(2.0, 0.25, 0.5, 0.5)));
        assert!(m.is_ood(&st(2.0, 0.5, 0.5, 0.5)));
        for s in grid_line() {
            assert!(!m.is_ood(&s));
        }
    }

    #[test]
    fn quantile_is_order_statistic_over_rollouts() {
        let env = NavEnv::default();
        let spec = PolicySpec::new(PolicyKind::ProportionalOptimal);
        let p = ReferencePolicy::new(spec, &env).unwrap();
        let set = collect(&p, spec, &env, 1000, 17).unwrap();
        let states = set.all_states();
        let m = DetectorModel::calibrate(&states, Metric::l1(), 0.99).unwrap();

        // Oracle: brute-force LOO distances, sort, take rank ceil(0.99 n).
        let sample_oracle = |i: usize| {
            let mut others = states.clone();
            others.remove(i);
            linear_scan(&others, &Metric::l1(), &states[i])
                .unwrap()
                .dist
        };
        let loo = loo_distances(m.reference());
        for i in (0..states.len()).step_by(997) {
            assert_eq!(loo[i], sample_oracle(i));
        }
        let mut sorted = loo.clone();
        sorted.sort_by(f64::total_cmp);
        let rank = (0.99 * states.len() as f64).ceil() as usize;
        assert_eq!(m.epsilon, sorted[rank - 1]);

        let flagged = states.iter().filter(|s| m.is_ood(s)).count();
        assert!(flagged * 100 <= states.len());
    }

    #[test]
    fn far_states_are_ood() {
        let m = DetectorModel::calibrate(&grid_line(), Metric::l1(), 1.0).unwrap();
        assert!(m.is_ood(&st(1.0, 1.4, 0.5, 0.5)));
    }

    #[test]
    fn larger_epsilon_is_monotone() {
        let idx = StateIndex::shared(&grid_line(), Metric::l1()).unwrap();
        let small = DetectorModel::with_epsilon(idx.clone(), 0.1).unwrap();
        let large = DetectorModel::with_epsilon(idx, 0.3).unwrap();
        for i in 0..200 {
            let s = st(i as f64 * 0.011, (i % 7) as f64 * 0.05, 0.5, 0.5);
            if !small.is_ood(&s) {
                assert!(!large.is_ood(&s));
            }
        }
    }
}
