use serde::{Deserialize, Serialize};

use crate::env::State;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[default]
    L1,
    L2,
}

impl MetricKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::L1 => "l1",
            MetricKind::L2 => "l2",
        }
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" | "L1" => Ok(MetricKind::L1),
            "l2" | "L2" => Ok(MetricKind::L2),
            _ => Err(Error::Config(format!("unknown metric `{s}`"))),
        }
    }
}

/// Weighted L1 or L2 distance over the 4-D state `(ax, ay, gx, gy)`.
///
/// Every distance in the crate goes through [`Metric::dist_arrays`], and the
/// k-d tree lower bound uses the same per-axis accumulation order, so the bound
/// never exceeds a true distance even after rounding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub kind: MetricKind,
    pub weights: [f64; 4],
}

impl Default for Metric {
    fn default() -> Self {
        Metric::new(MetricKind::L1)
    }
}

impl Metric {
    pub const fn new(kind: MetricKind) -> Self {
        Metric {
            kind,
            weights: [1.0; 4],
        }
    }

    pub fn l1() -> Self {
        Metric::new(MetricKind::L1)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.weights.iter().all(|w| w.is_finite() && *w > 0.0) {
            return Err(Error::Config("metric weights must be positive".into()));
        }
        Ok(())
    }

    /// Accumulate per-axis non-negative gaps into a distance.
    #[inline]
    pub(crate) fn combine_gaps(&self, gaps: [f64; 4]) -> f64 {
        let w = &self.weights;
        match self.kind {
            MetricKind::L1 => {
                let mut acc = 0.0;
                for i in 0..4 {
                    acc += w[i] * gaps[i];
                }
                acc
            }
            MetricKind::L2 => {
                let mut acc = 0.0;
                for i in 0..4 {
                    let g = w[i] * gaps[i];
                    acc += g * g;
                }
                acc.sqrt()
            }
        }
    }

    #[inline]
    pub fn dist_arrays(&self, a: &[f64; 4], b: &[f64; 4]) -> f64 {
        let mut gaps = [0.0; 4];
        for i in 0..4 {
            gaps[i] = (a[i] - b[i]).abs();
        }
        self.combine_gaps(gaps)
    }

    pub fn dist(&self, a: &State, b: &State) -> f64 {
        self.dist_arrays(&a.to_array(), &b.to_array())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Vec2;

    #[test]
    fn l1_and_l2() {
        let a = State::new(Vec2::new(0.0, 0.0), Vec2::new(0.5, 0.5));
        let b = State::new(Vec2::new(0.3, 0.4), Vec2::new(0.5, 0.5));
        assert!((Metric::l1().dist(&a, &b) - 0.7).abs() < 1e-15);
        assert!((Metric::new(MetricKind::L2).dist(&a, &b) - 0.5).abs() < 1e-15);
        assert_eq!(Metric::l1().dist(&a, &a), 0.0);
    }

    #[test]
    fn weights_scale_axes() {
        let m = Metric {
            kind: MetricKind::L1,
            weights: [1.0, 1.0, 2.0, 2.0],
        };
        let a = State::new(Vec2::new(0.0, 0.0), Vec2::new(0.0, 0.0));
        let b = State::new(Vec2::new(0.0, 0.0), Vec2::new(0.25, 0.0));
        assert_eq!(m.dist(&a, &b), 0.5);
        assert!(Metric {
            kind: MetricKind::L1,
            weights: [1.0, 0.0, 1.0, 1.0]
        }
        .validate()
        .is_err());
    }
}
