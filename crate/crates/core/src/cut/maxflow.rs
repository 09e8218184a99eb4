//! Max-flow / min-cut on the source/sink-augmented pixel graph.
//!
//! Pixels on the source side of the minimum cut are foreground. Terminal
//! capacities are `source -> p = cost_bg(p)` and `p -> sink = cost_fg(p)`,
//! and every coherence edge gets `lambda * psi` in both directions, so the
//! capacity of a cut equals the energy of the labelling it induces.
//! Augmenting paths are found breadth-first (Edmonds-Karp).

use std::collections::VecDeque;

use super::graph::CoherenceGraph;
use super::objectness::ObjectnessField;
use crate::tensor_io::MaskImage;

/// Residual capacity at or below this is treated as saturated.
const SATURATED: f64 = 1e-12;

#[derive(Clone, Debug)]
struct Arc {
    to: usize,
    cap: f64,
}

/// Residual network; arc `i` and `i ^ 1` are reverses of each other.
#[derive(Clone, Debug)]
pub struct FlowNetwork {
    n: usize,
    arcs: Vec<Arc>,
    adj: Vec<Vec<usize>>,
    source: usize,
    sink: usize,
    /// Flow already routed by direct `source -> p -> sink` paths.
    presaturated: f64,
}

impl FlowNetwork {
    /// Build the network for `E(M) = sum unary + lambda * sum_{cut} psi`.
    pub fn from_energy(field: &ObjectnessField, graph: &CoherenceGraph, lambda: f64) -> Self {
        let pixels = field.len();
        assert_eq!(pixels, graph.width * graph.height, "field and graph disagree on grid size");
        let (source, sink) = (pixels, pixels + 1);
        let mut net = Self {
            n: pixels + 2,
            arcs: Vec::with_capacity(2 * (2 * pixels + graph.edges.len())),
            adj: vec![Vec::new(); pixels + 2],
            source,
            sink,
            presaturated: 0.0,
        };
        // Route the shared part of each pixel's two terminal capacities
        // straight through; these are the shortest augmenting paths.
        for p in 0..pixels {
            let (cs, ct) = (field.cost_bg[p], field.cost_fg[p]);
            debug_assert!(cs >= 0.0 && ct >= 0.0 && cs.is_finite() && ct.is_finite());
            let m = cs.min(ct);
            net.presaturated += m;
            if cs - m > 0.0 {
                net.add_arc(source, p, cs - m, 0.0);
            }
            if ct - m > 0.0 {
                net.add_arc(p, sink, ct - m, 0.0);
            }
        }
        if lambda > 0.0 {
            for &(p, q, psi) in &graph.edges {
                let c = lambda * psi;
                if c > 0.0 {
                    net.add_arc(p, q, c, c);
                }
            }
        }
        net
    }

    fn add_arc(&mut self, from: usize, to: usize, cap: f64, rev_cap: f64) {
        self.adj[from].push(self.arcs.len());
        self.arcs.push(Arc { to, cap });
        self.adj[to].push(self.arcs.len());
        self.arcs.push(Arc { to: from, cap: rev_cap });
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Run Edmonds-Karp to completion and return the total flow value.
    pub fn max_flow(&mut self) -> f64 {
        let mut flow = self.presaturated;
        let mut parent = vec![usize::MAX; self.n];
        let mut queue = VecDeque::with_capacity(self.n);
        loop {
            parent.fill(usize::MAX);
            queue.clear();
            queue.push_back(self.source);
            let mut reached = false;
            'bfs: while let Some(u) = queue.pop_front() {
                for &a in &self.adj[u] {
                    let Arc { to, cap } = self.arcs[a];
                    if cap > SATURATED && parent[to] == usize::MAX && to != self.source {
                        parent[to] = a;
                        if to == self.sink {
                            reached = true;
                            break 'bfs;
                        }
                        queue.push_back(to);
                    }
                }
            }
            if !reached {
                break;
            }
            let mut bottleneck = f64::INFINITY;
            let mut v = self.sink;
            while v != self.source {
                let a = parent[v];
                bottleneck = bottleneck.min(self.arcs[a].cap);
                v = self.arcs[a ^ 1].to;
            }
            let mut v = self.sink;
            while v != self.source {
                let a = parent[v];
                self.arcs[a].cap -= bottleneck;
                self.arcs[a ^ 1].cap += bottleneck;
                v = self.arcs[a ^ 1].to;
            }
            flow += bottleneck;
        }
        flow
    }

    /// Pixels reachable from the source in the residual network.
    pub fn source_side(&self) -> Vec<bool> {
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([self.source]);
        seen[self.source] = true;
        while let Some(u) = queue.pop_front() {
            for &a in &self.adj[u] {
                let Arc { to, cap } = self.arcs[a];
                if cap > SATURATED && !seen[to] {
                    seen[to] = true;
                    queue.push_back(to);
                }
            }
        }
        seen.truncate(self.n - 2);
        seen
    }
}

/// Energy of a labelling (`true` = foreground).
pub fn energy(field: &ObjectnessField, graph: &CoherenceGraph, lambda: f64, labels: &[bool]) -> f64 {
    let unary: f64 = labels
        .iter()
        .enumerate()
        .map(|(p, &fg)| if fg { field.cost_fg[p] } else { field.cost_bg[p] })
        .sum();
    let pairwise: f64 = graph
        .edges
        .iter()
        .filter(|&&(p, q, _)| labels[p] != labels[q])
        .map(|&(_, _, psi)| psi)
        .sum();
    unary + lambda * pairwise
}

#[derive(Clone, Debug)]
pub struct CutResult {
    pub labels: Vec<bool>,
    pub energy: f64,
    pub flow: f64,
}

impl CutResult {
    pub fn mask(&self, width: usize, height: usize) -> MaskImage {
        MaskImage::from_bools(width, height, &self.labels)
    }
}

/// Minimum-energy binary labelling via max-flow.
pub fn minimize_energy(field: &ObjectnessField, graph: &CoherenceGraph, lambda: f64) -> CutResult {
    let mut net = FlowNetwork::from_energy(field, graph, lambda.max(0.0));
    let flow = net.max_flow();
    let labels = net.source_side();
    let energy = energy(field, graph, lambda.max(0.0), &labels);
    CutResult { labels, energy, flow }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_pixel_example() {
        let field = ObjectnessField::from_costs(2, 1, vec![0.1, 2.0], vec![2.0, 0.1]);
        let graph = CoherenceGraph::from_edges(2, 1, vec![(0, 1, 0.5)]);
        let res = minimize_energy(&field, &graph, 0.1);
        assert_eq!(res.labels, vec![true, false]);
        assert!((res.energy - 0.25).abs() < 1e-12);
        assert!((res.flow - 0.25).abs() < 1e-12);
        let all = [
            (vec![false, false], 2.1),
            (vec![true, true], 2.1),
            (vec![false, true], 2.0 + 2.0 + 0.05),
        ];
        for (labels, e) in all {
            let got = energy(&field, &graph, 0.1, &labels);
            assert!((got - e).abs() < 1e-12, "{labels:?}: {got}");
            assert!(got > res.energy);
        }
    }

    #[test]
    fn zero_lambda_thresholds_pixels() {
        let s = [0.2, 0.7, 0.5, 0.9, 0.4, 0.51];
        let field = ObjectnessField::from_probability(3, 2, &s, 0.0);
        let graph = CoherenceGraph::from_edges(3, 2, vec![(0, 1, 5.0), (1, 2, 5.0)]);
        let res = minimize_energy(&field, &graph, 0.0);
        let expect: Vec<bool> = s.iter().map(|&v| v > 0.5).collect();
        assert_eq!(res.labels, expect);
    }

    #[test]
    fn strong_coupling_merges_labels() {
        let field = ObjectnessField::from_costs(3, 1, vec![0.1, 0.1, 0.6], vec![1.0, 1.0, 0.5]);
        let graph = CoherenceGraph::from_edges(3, 1, vec![(0, 1, 1.0), (1, 2, 1.0)]);
        let res = minimize_energy(&field, &graph, 10.0);
        assert_eq!(res.labels, vec![true, true, true]);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn problem() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<(usize, usize, f64)>, f64)> {
        (1usize..=4, 1usize..=4).prop_flat_map(|(w, h)| {
            let n = w * h;
            (
                Just(w),
                Just(h),
                prop::collection::vec(0.001f64..0.999, n),
                prop::collection::vec(0.0f64..3.0, n * n),
                0.0f64..2.0,
            )
                .prop_map(move |(w, h, s, weights, lambda)| {
                    let mut edges = Vec::new();
                    for p in 0..n {
                        for q in (p + 1)..n {
                            let (dx, dy) = ((p % w).abs_diff(q % w), (p / w).abs_diff(q / w));
                            if dx <= 1 && dy <= 1 {
                                edges.push((p, q, weights[p * n + q]));
                            }
                        }
                    }
                    (w, h, s, edges, lambda)
                })
        })
    }

    fn exhaustive_min(field: &ObjectnessField, graph: &CoherenceGraph, lambda: f64) -> f64 {
        let n = field.len();
        (0u32..1 << n)
            .map(|bits| {
                let labels: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
                energy(field, graph, lambda, &labels)
            })
            .fold(f64::INFINITY, f64::min)
    }

    proptest! {
        #[test]
        fn cut_is_optimal_and_matches_flow((w, h, s, edges, lambda) in problem()) {
            let field = ObjectnessField::from_probability(w, h, &s, 0.0);
            let graph = CoherenceGraph::from_edges(w, h, edges);
            let res = minimize_energy(&field, &graph, lambda);
            prop_assert!((res.energy - exhaustive_min(&field, &graph, lambda)).abs() < 1e-9);
            prop_assert!((res.flow - res.energy).abs() < 1e-9);
        }

        #[test]
        fn constant_cost_shift_keeps_the_argmin((w, h, s, edges, lambda) in problem(), c in 0.0f64..5.0) {
            let field = ObjectnessField::from_probability(w, h, &s, 0.0);
            let shifted = ObjectnessField::from_costs(
                w,
                h,
                field.cost_fg.iter().map(|v| v + c).collect(),
                field.cost_bg.iter().map(|v| v + c).collect(),
            );
            let graph = CoherenceGraph::from_edges(w, h, edges);
            let res = minimize_energy(&shifted, &graph, lambda);
            // still a minimiser of the original problem
            let e = energy(&field, &graph, lambda, &res.labels);
            prop_assert!((e - exhaustive_min(&field, &graph, lambda)).abs() < 1e-9);
            prop_assert!((res.energy - e - c * (w * h) as f64).abs() < 1e-9);
        }
    }
}
