use std::collections::BTreeSet;

use super::geodesic::{coherence_weight, color_distance};
use crate::tensor_io::RgbImage;

/// Undirected pairwise edges over an image grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CoherenceGraph {
    pub width: usize,
    pub height: usize,
    /// `(p, q, psi)` with `p < q`; no self-loops, no duplicates.
    pub edges: Vec<(usize, usize, f64)>,
    pub lambda_psi: f64,
}

/// Which coherence terms contribute to the pairwise weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoherenceTerms {
    /// Self-attention term on local edges and long-range edges.
    pub semantic: bool,
    /// `exp(-D)` term on local edges.
    pub spatial: bool,
}

impl CoherenceTerms {
    pub const ALL: Self = Self {
        semantic: true,
        spatial: true,
    };
    pub const NONE: Self = Self {
        semantic: false,
        spatial: false,
    };
}

impl CoherenceGraph {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            edges: Vec::new(),
            lambda_psi: 0.0,
        }
    }

    /// Build from explicit edges, normalising orientation and rejecting
    /// self-loops and duplicates.
    pub fn from_edges(width: usize, height: usize, edges: Vec<(usize, usize, f64)>) -> Self {
        let mut seen = BTreeSet::new();
        let edges = edges
            .into_iter()
            .map(|(p, q, w)| (p.min(q), p.max(q), w))
            .inspect(|&(p, q, w)| {
                assert!(p != q, "self-loop at {p}");
                assert!(q < width * height, "edge endpoint {q} out of range");
                assert!(w >= 0.0 && w.is_finite(), "bad weight {w}");
                assert!(seen.insert((p, q)), "duplicate edge ({p}, {q})");
            })
            .collect();
        Self {
            width,
            height,
            edges,
            lambda_psi: 0.0,
        }
    }

    /// 8-connected local edges carrying the full coherence weight, plus for
    /// every pixel its `long_range_k` strongest non-adjacent self-attention
    /// partners carrying the self-attention term alone.
    ///
    /// `a_s` is `N x N` over the grid and `image` has the grid's dimensions.
    pub fn build(
        a_s: &[f64],
        image: &RgbImage,
        lambda_psi: f64,
        long_range_k: usize,
        terms: CoherenceTerms,
    ) -> Self {
        let (w, h) = (image.width, image.height);
        let n = w * h;
        assert_eq!(a_s.len(), n * n, "self-attention does not match the grid");
        let mut edges = Vec::new();
        if terms.semantic || terms.spatial {
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    // forward half of the 8-neighbourhood
                    for (dx, dy) in [(1i64, 0i64), (-1, 1), (0, 1), (1, 1)] {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let q = ny as usize * w + nx as usize;
                        let sem = if terms.semantic { a_s[p * n + q] } else { 0.0 };
                        let weight = if terms.spatial {
                            coherence_weight(sem, color_distance(image, p, q), lambda_psi)
                        } else {
                            sem
                        };
                        edges.push((p.min(q), p.max(q), weight));
                    }
                }
            }
        }
        if terms.semantic && long_range_k > 0 {
            let mut long = BTreeSet::new();
            let mut candidates: Vec<usize> = Vec::with_capacity(n);
            for p in 0..n {
                let row = &a_s[p * n..(p + 1) * n];
                candidates.clear();
                let (px, py) = (p % w, p / w);
                // local neighbours (and p itself) are already covered
                candidates.extend((0..n).filter(|&q| (q % w).abs_diff(px) > 1 || (q / w).abs_diff(py) > 1));
                let k = long_range_k.min(candidates.len());
                if k == 0 {
                    continue;
                }
                let by_strength = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
                if k < candidates.len() {
                    candidates.select_nth_unstable_by(k - 1, by_strength);
                }
                for &q in &candidates[..k] {
                    if row[q] > 0.0 {
                        long.insert((p.min(q), p.max(q)));
                    }
                }
            }
            edges.extend(long.into_iter().map(|(p, q)| (p, q, a_s[p * n + q])));
        }
        Self {
            width: w,
            height: h,
            edges,
            lambda_psi,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn image(w: usize, h: usize) -> RgbImage {
        RgbImage::new(w, h, (0..3 * w * h).map(|i| (i % 7) as f32 / 7.0).collect())
    }

    #[test]
    fn local_edge_count() {
        let (w, h) = (4, 3);
        let a_s = vec![0.0; (w * h) * (w * h)];
        let g = CoherenceGraph::build(&a_s, &image(w, h), 2.5, 0, CoherenceTerms::ALL);
        // horizontal + vertical + two diagonals
        let expect = h * (w - 1) + w * (h - 1) + 2 * (w - 1) * (h - 1);
        assert_eq!(g.edges.len(), expect);
    }

    #[test]
    fn no_self_loops_or_duplicates() {
        let (w, h) = (5, 5);
        let n = w * h;
        let a_s: Vec<f64> = (0..n * n).map(|i| ((i * 31) % 17) as f64 / 17.0).collect();
        let mut sym = a_s.clone();
        for i in 0..n {
            for j in 0..n {
                sym[i * n + j] = 0.5 * (a_s[i * n + j] + a_s[j * n + i]);
            }
        }
        let g = CoherenceGraph::build(&sym, &image(w, h), 2.5, 8, CoherenceTerms::ALL);
        let mut seen = HashSet::new();
        for &(p, q, wgt) in &g.edges {
            assert!(p < q);
            assert!(wgt >= 0.0);
            assert!(seen.insert((p, q)));
        }
        assert!(g.edges.len() > 2 * (w - 1) * (h - 1) + h * (w - 1) + w * (h - 1));
    }

    #[test]
    fn spatial_only_has_no_long_range() {
        let (w, h) = (3, 3);
        let a_s = vec![1.0; 81];
        let g = CoherenceGraph::build(&a_s, &image(w, h), 2.5, 8, CoherenceTerms {
            semantic: false,
            spatial: true,
        });
        assert_eq!(g.edges.len(), 20);
        let none = CoherenceGraph::build(&a_s, &image(w, h), 2.5, 8, CoherenceTerms::NONE);
        assert!(none.edges.is_empty());
    }
}
