//! Geodesic distance on the image-intensity surface and the pairwise
//! coherence weight built from it.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::tensor_io::RgbImage;

/// 8-connected neighbour offsets.
pub const NEIGHBORS_8: [(i64, i64); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

/// Euclidean RGB distance between two pixels.
pub fn color_distance(image: &RgbImage, p: usize, q: usize) -> f64 {
    let (a, b) = (image.pixel(p), image.pixel(q));
    a.iter()
        .zip(&b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(PartialEq)]
struct State {
    dist: f64,
    node: usize,
}

impl Eq for State {}

impl Ord for State {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for State {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source shortest paths on the 8-connected grid with edge weight
/// `||I(p) - I(q)||_2`.
pub fn geodesic_distance_map(image: &RgbImage, source: usize) -> Vec<f64> {
    let (w, h) = (image.width, image.height);
    let mut dist = vec![f64::INFINITY; w * h];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(State {
        dist: 0.0,
        node: source,
    });
    while let Some(State { dist: d, node }) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        let (x, y) = ((node % w) as i64, (node / w) as i64);
        for (dx, dy) in NEIGHBORS_8 {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                continue;
            }
            let next = ny as usize * w + nx as usize;
            let nd = d + color_distance(image, node, next);
            if nd < dist[next] {
                dist[next] = nd;
                heap.push(State { dist: nd, node: next });
            }
        }
    }
    dist
}

/// `psi = a_s + lambda_psi * exp(-d)`.
pub fn coherence_weight(a_s: f64, d: f64, lambda_psi: f64) -> f64 {
    a_s + lambda_psi * (-d).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_zero_distance() {
        let img = RgbImage::new(5, 4, vec![0.3; 60]);
        assert!(geodesic_distance_map(&img, 7).iter().all(|&d| d == 0.0));
    }

    #[test]
    fn single_edge() {
        let img = RgbImage::new(2, 1, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let d = geodesic_distance_map(&img, 0);
        assert_eq!(d, vec![0.0, 1.0]);
    }

    #[test]
    fn coherence_examples() {
        assert!((coherence_weight(0.2, 0.0, 2.5) - 2.7).abs() < 1e-12);
        assert!((coherence_weight(0.0, 1.0, 2.5) - 0.9196986029286058).abs() < 1e-12);
        assert!((coherence_weight(0.3, 800.0, 2.5) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn coherence_is_monotone() {
        let mut prev = f64::INFINITY;
        for i in 0..100 {
            let v = coherence_weight(0.1, i as f64 * 0.1, 2.5);
            assert!(v <= prev);
            prev = v;
        }
        assert!(coherence_weight(0.2, 1.0, 2.5) >= coherence_weight(0.1, 1.0, 2.5));
    }
}
