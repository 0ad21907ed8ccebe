//! Exact nearest-state search over the observed rollout states.
//!
//! A bucketed k-d tree over the 4-D state. Each node stores the bounding box
//! of its points; a subtree is skipped only when the box lower bound is
//! strictly greater than the best distance found so far, so every point tied
//! with the best is still visited and ties resolve to the smallest canonical
//! position, exactly like a linear scan.

use std::sync::Arc;

use crate::env::State;
use crate::error::{Error, Result};
use crate::metric::Metric;

const LEAF_SIZE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nearest {
    pub state: State,
    pub dist: f64,
    /// Position in the canonical `(rollout_id, t)` order of the indexed set.
    pub canonical_pos: usize,
}

#[derive(Clone, Debug)]
struct Node {
    lo: [f64; 4],
    hi: [f64; 4],
    kind: NodeKind,
}

#[derive(Clone, Debug)]
enum NodeKind {
    Leaf { start: usize, end: usize },
    Split { left: usize, right: usize },
}

#[derive(Debug)]
pub struct StateIndex {
    points: Vec<[f64; 4]>,
    metric: Metric,
    /// Permutation of point positions; leaves own contiguous ranges.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl StateIndex {
    pub fn build(states: &[State], metric: Metric) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::EmptyIndex);
        }
        metric.validate()?;
        if !states.iter().all(State::is_finite) {
            return Err(Error::NonFinite("indexed state"));
        }
        let points: Vec<[f64; 4]> = states.iter().map(State::to_array).collect();
        let mut index = StateIndex {
            order: (0..points.len()).collect(),
            points,
            metric,
            nodes: Vec::new(),
        };
        let n = index.points.len();
        index.build_node(0, n);
        Ok(index)
    }

    pub fn shared(states: &[State], metric: Metric) -> Result<Arc<Self>> {
        Self::build(states, metric).map(Arc::new)
    }

    fn bounds(&self, start: usize, end: usize) -> ([f64; 4], [f64; 4]) {
        let mut lo = [f64::INFINITY; 4];
        let mut hi = [f64::NEG_INFINITY; 4];
        for &i in &self.order[start..end] {
            let p = &self.points[i];
            for d in 0..4 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        (lo, hi)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let (lo, hi) = self.bounds(start, end);
        let id = self.nodes.len();
        self.nodes.push(Node {
            lo,
            hi,
            kind: NodeKind::Leaf { start, end },
        });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let dim = (0..4)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        if hi[dim] == lo[dim] {
            // all points identical
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        // Tie-break on position so the structure is a pure function of input order.
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][dim].total_cmp(&points[b][dim]).then(a.cmp(&b))
        });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id].kind = NodeKind::Split { left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn metric(&self) -> &Metric {
        &self.metric
    }

    pub fn state(&self, pos: usize) -> State {
        State::from_array(self.points[pos])
    }

    pub fn states(&self) -> impl ExactSizeIterator<Item = State> + '_ {
        self.points.iter().map(|p| State::from_array(*p))
    }

    fn lower_bound(&self, node: &Node, q: &[f64; 4]) -> f64 {
        let mut gaps = [0.0; 4];
        for d in 0..4 {
            gaps[d] = if q[d] < node.lo[d] {
                node.lo[d] - q[d]
            } else if q[d] > node.hi[d] {
                q[d] - node.hi[d]
            } else {
                0.0
            };
        }
        self.metric.combine_gaps(gaps)
    }

    /// Nearest indexed state to `s`; ties go to the smallest canonical position.
    pub fn nearest(&self, s: &State) -> Nearest {
        self.nearest_filtered(s, |_| true)
            .expect("index is non-empty")
    }

    /// Nearest state whose canonical position is not `excluded`.
    pub fn nearest_excluding(&self, s: &State, excluded: usize) -> Option<Nearest> {
        self.nearest_filtered(s, |pos| pos != excluded)
    }

    fn nearest_filtered(&self, s: &State, keep: impl Fn(usize) -> bool) -> Option<Nearest> {
        let q = s.to_array();
        let mut best: Option<(f64, usize)> = None;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if let Some((bd, _)) = best {
                if self.lower_bound(node, &q) > bd {
                    continue;
                }
            }
            match node.kind {
                NodeKind::Leaf { start, end } => {
                    for &pos in &self.order[start..end] {
                        if !keep(pos) {
                            continue;
                        }
                        let d = self.metric.dist_arrays(&q, &self.points[pos]);
                        let better = match best {
                            None => true,
                            Some((bd, bp)) => d < bd || (d == bd && pos < bp),
                        };
                        if better {
                            best = Some((d, pos));
                        }
                    }
                }
                NodeKind::Split { left, right } => {
                    let dl = self.lower_bound(&self.nodes[left], &q);
                    let dr = self.lower_bound(&self.nodes[right], &q);
                    // Push the farther child first so the nearer one is popped next.
                    if dl <= dr {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
            }
        }
        best.map(|(dist, canonical_pos)| Nearest {
            state: self.state(canonical_pos),
            dist,
            canonical_pos,
        })
    }
}

/// Brute-force argmin with the same tie rule as [`StateIndex::nearest`].
pub fn linear_scan(states: &[State], metric: &Metric, s: &State) -> Option<Nearest> {
    let mut best: Option<Nearest> = None;
    for (pos, p) in states.iter().enumerate() {
        let d = metric.dist(s, p);
        if best.is_none_or(|b| d < b.dist) {
            best = Some(Nearest {
                state: *p,
                dist: d,
                canonical_pos: pos,
            });
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Vec2;
    use crate::metric::MetricKind;
    use proptest::prelude::*;

    fn st(ax: f64, ay: f64, gx: f64, gy: f64) -> State {
        State::new(Vec2::new(ax, ay), Vec2::new(gx, gy))
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(
            StateIndex::build(&[], Metric::l1()),
            Err(Error::EmptyIndex)
        ));
    }

    #[test]
    fn small_index_hand_checked() {
        let g = (0.5, 0.5);
        let d = [
            st(0.0, 0.0, g.0, g.1),
            st(1.0, 0.0, g.0, g.1),
            st(0.0, 1.0, g.0, g.1),
        ];
        let idx = StateIndex::build(&d, Metric::l1()).unwrap();
        assert_eq!(idx.len(), 3);
        let n = idx.nearest(&st(0.9, 0.2, g.0, g.1));
        assert_eq!(n.canonical_pos, 1);
        assert_eq!(n.state, d[1]);
        assert!((n.dist - 0.3).abs() < 1e-12);
        assert_eq!(n.dist, Metric::l1().dist(&st(0.9, 0.2, g.0, g.1), &d[1]));
    }

    #[test]
    fn member_query_returns_itself() {
        let d: Vec<State> = (0..50)
            .map(|i| st(i as f64 * 0.02, 0.1, 0.5, 0.5))
            .collect();
        let idx = StateIndex::build(&d, Metric::l1()).unwrap();
        for (i, s) in d.iter().enumerate() {
            let n = idx.nearest(s);
            assert_eq!((n.canonical_pos, n.dist), (i, 0.0));
        }
    }

    #[test]
    fn ties_resolve_to_smallest_position() {
        let d = [st(0.25, 0.5, 0.5, 0.5), st(0.75, 0.5, 0.5, 0.5)];
        let idx = StateIndex::build(&d, Metric::l1()).unwrap();
        let n = idx.nearest(&st(0.5, 0.5, 0.5, 0.5));
        assert_eq!(n.canonical_pos, 0);
        // reversed order flips the answer
        let idx = StateIndex::build(&[d[1], d[0]], Metric::l1()).unwrap();
        assert_eq!(idx.nearest(&st(0.5, 0.5, 0.5, 0.5)).canonical_pos, 0);
    }

    #[test]
    fn duplicates_retained() {
        let s = st(0.1, 0.2, 0.3, 0.4);
        let d = vec![s; 20];
        let idx = StateIndex::build(&d, Metric::l1()).unwrap();
        assert_eq!(idx.len(), 20);
        assert_eq!(idx.nearest(&s).canonical_pos, 0);
        let n = idx.nearest_excluding(&s, 0).unwrap();
        assert_eq!((n.canonical_pos, n.dist), (1, 0.0));
    }

    #[test]
    fn large_build() {
        let n = 100_000;
        let d: Vec<State> = (0..n)
            .map(|i| {
                let f = i as f64;
                st(
                    (f * 0.618).fract(),
                    (f * 0.414).fract(),
                    (f * 0.732).fract(),
                    (f * 0.236).fract(),
                )
            })
            .collect();
        let idx = StateIndex::build(&d, Metric::l1()).unwrap();
        assert_eq!(idx.len(), n);
        assert_eq!(idx.nearest(&d[777]).canonical_pos, 777);
    }

    fn arb_state() -> impl Strategy<Value = State> {
        // Coarse grid values force many exact ties.
        let c = prop_oneof![(-10i32..=30).prop_map(|v| v as f64 * 0.05), -0.5f64..1.5];
        [c.clone(), c.clone(), c.clone(), c].prop_map(State::from_array)
    }

    proptest! {
        #[test]
        fn matches_linear_scan(
            d in proptest::collection::vec(arb_state(), 1..200),
            qs in proptest::collection::vec(arb_state(), 1..30),
            l2 in any::<bool>(),
        ) {
            let metric = Metric::new(if l2 { MetricKind::L2 } else { MetricKind::L1 });
            let idx = StateIndex::build(&d, metric).unwrap();
            for q in &qs {
                let a = idx.nearest(q);
                let b = linear_scan(&d, &metric, q).unwrap();
                prop_assert_eq!(a.canonical_pos, b.canonical_pos);
                prop_assert_eq!(a.dist.to_bits(), b.dist.to_bits());
                prop_assert_eq!(a.dist, metric.dist(q, &a.state));
                // idempotence
                prop_assert_eq!(idx.nearest(&a.state).dist, 0.0);
            }
        }
    }
}
