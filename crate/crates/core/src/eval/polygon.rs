//! Outer contours, Douglas-Peucker simplification, and polygon statistics.

use super::components::{label_components, Connectivity};
use super::EvalError;
use crate::tensor_io::MaskImage;

/// Douglas-Peucker tolerance in unit-square coordinates.
pub const SIMPLIFY_TOLERANCE: f64 = 0.01;

pub type Point = [f64; 2];

/// Ordered vertices, normalised to the unit square.
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    pub points: Vec<Point>,
}

impl Polygon {
    /// Closed perimeter.
    pub fn perimeter(&self) -> f64 {
        let n = self.points.len();
        (0..n).map(|i| dist(self.points[i], self.points[(i + 1) % n])).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolygonStats {
    /// Shape complexity: vertex count after simplification.
    pub sc: usize,
    /// Polygon length: closed perimeter.
    pub pl: f64,
    pub polygon: Polygon,
}

// clockwise in image coordinates (y down), starting west
const DIRS: [(i64, i64); 8] = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)];

fn dir_index(dx: i64, dy: i64) -> usize {
    DIRS.iter().position(|&d| d == (dx, dy)).expect("unit offset")
}

/// Outer boundary pixels of the component containing `inside` pixels, in
/// tracing order (Moore neighbourhood, 8-connectivity). Tracing stops when
/// the start pixel is re-entered as it was first entered, or when leaving it
/// would repeat the first step.
pub fn trace_outer_contour(inside: &[bool], w: usize, h: usize) -> Vec<(usize, usize)> {
    let Some(start) = inside.iter().position(|&v| v) else {
        return Vec::new();
    };
    let fg = |x: i64, y: i64| x >= 0 && y >= 0 && x < w as i64 && y < h as i64 && inside[y as usize * w + x as usize];
    // Scan clockwise from the backtrack direction; return the next boundary
    // pixel and the direction from it back to the last background pixel seen.
    let step = |c: (i64, i64), back: usize| -> Option<((i64, i64), usize)> {
        (1..=8).find_map(|k| {
            let d = (back + k) % 8;
            let n = (c.0 + DIRS[d].0, c.1 + DIRS[d].1);
            fg(n.0, n.1).then(|| {
                let prev = (back + k - 1) % 8;
                let b = (c.0 + DIRS[prev].0, c.1 + DIRS[prev].1);
                (n, dir_index(b.0 - n.0, b.1 - n.1))
            })
        })
    };
    let s = ((start % w) as i64, (start / w) as i64);
    // the raster-first pixel always has background to its west
    let start_back = 0usize;
    let mut contour = vec![(s.0 as usize, s.1 as usize)];
    let Some(first) = step(s, start_back) else {
        return contour; // isolated pixel
    };
    let (mut c, mut back) = first;
    for _ in 0..(4 * w * h + 8) {
        if c == s {
            let repeats = step(s, back).is_some_and(|(n, _)| n == first.0);
            if back == start_back || repeats {
                break;
            }
        }
        contour.push((c.0 as usize, c.1 as usize));
        let (n, nb) = step(c, back).expect("a traced pixel has at least one neighbour");
        c = n;
        back = nb;
    }
    contour
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Distance from `p` to the segment `a-b`.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return dist(p, a);
    }
    let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0);
    dist(p, [a[0] + t * dx, a[1] + t * dy])
}

/// Douglas-Peucker on an open chain; the endpoints are always kept.
pub fn douglas_peucker(points: &[Point], tolerance: f64) -> Vec<Point> {
    if points.len() < 3 {
        return points.to_vec();
    }
    let mut keep = vec![false; points.len()];
    keep[0] = true;
    keep[points.len() - 1] = true;
    let mut stack = vec![(0, points.len() - 1)];
    while let Some((lo, hi)) = stack.pop() {
        let (mut worst, mut at) = (0.0, lo);
        for i in (lo + 1)..hi {
            let d = point_segment_distance(points[i], points[lo], points[hi]);
            if d > worst {
                worst = d;
                at = i;
            }
        }
        if worst > tolerance {
            keep[at] = true;
            stack.push((lo, at));
            stack.push((at, hi));
        }
    }
    points.iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| *p).collect()
}

/// Douglas-Peucker on a closed ring: split at the first vertex and the vertex
/// farthest from it, simplify both chains, and rejoin.
pub fn simplify_closed(points: &[Point], tolerance: f64) -> Vec<Point> {
    if points.len() <= 3 {
        return points.to_vec();
    }
    let far = (1..points.len())
        .max_by(|&a, &b| dist(points[0], points[a]).total_cmp(&dist(points[0], points[b])).then(b.cmp(&a)))
        .unwrap();
    let first = douglas_peucker(&points[..=far], tolerance);
    let mut second_chain = points[far..].to_vec();
    second_chain.push(points[0]);
    let second = douglas_peucker(&second_chain, tolerance);
    let mut out = first[..first.len() - 1].to_vec();
    out.extend_from_slice(&second[..second.len() - 1]);
    out
}

/// Normalise each axis to [0, 1] by its min and max; a zero-extent axis maps
/// to 0.
pub fn normalize_points(points: &[(usize, usize)]) -> Vec<Point> {
    let axis = |f: fn(&(usize, usize)) -> usize| {
        let lo = points.iter().map(f).min().unwrap_or(0) as f64;
        let hi = points.iter().map(f).max().unwrap_or(0) as f64;
        (lo, hi - lo)
    };
    let (x0, xs) = axis(|p| p.0);
    let (y0, ys) = axis(|p| p.1);
    let scale = |v: usize, lo: f64, span: f64| if span > 0.0 { (v as f64 - lo) / span } else { 0.0 };
    points.iter().map(|&(x, y)| [scale(x, x0, xs), scale(y, y0, ys)]).collect()
}

/// Contour of the largest component, normalised and simplified, with its
/// shape complexity and perimeter.
pub fn polygon_stats(mask: &MaskImage) -> Result<PolygonStats, EvalError> {
    let (w, h) = (mask.width(), mask.height());
    let comps = label_components(&mask.to_bools(), w, h, Connectivity::Eight);
    let target = comps.largest().ok_or(EvalError::EmptyMask)?;
    let inside: Vec<bool> = comps.labels.iter().map(|l| *l == Some(target)).collect();
    let contour = trace_outer_contour(&inside, w, h);
    let normalized = normalize_points(&contour);
    let simplified = simplify_closed(&normalized, SIMPLIFY_TOLERANCE);
    if simplified.len() < 3 {
        return Err(EvalError::DegeneratePolygon(simplified.len()));
    }
    let polygon = Polygon { points: simplified };
    Ok(PolygonStats {
        sc: polygon.points.len(),
        pl: polygon.perimeter(),
        polygon,
    })
}

/// Symmetric squared Chamfer distance between two point sets.
pub fn chamfer_distance(a: &[Point], b: &[Point]) -> f64 {
    let one_way = |from: &[Point], to: &[Point]| -> f64 {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum()
    };
    one_way(a, b) + one_way(b, a)
}

/// Mean Chamfer distance over all unordered pairs of polygons.
pub fn shape_diversity(polygons: &[Polygon]) -> Result<f64, EvalError> {
    if polygons.len() < 2 {
        return Err(EvalError::TooFewPolygons(polygons.len()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..polygons.len() {
        for j in (i + 1)..polygons.len() {
            total += chamfer_distance(&polygons[i].points, &polygons[j].points);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn points() -> impl Strategy<Value = Vec<Point>> {
        prop::collection::vec((0u8..20, 0u8..20).prop_map(|(x, y)| [x as f64 / 19.0, y as f64 / 19.0]), 1..12)
    }

    proptest! {
        #[test]
        fn chamfer_symmetric(a in points(), b in points()) {
            prop_assert_eq!(chamfer_distance(&a, &b), chamfer_distance(&b, &a));
        }

        #[test]
        fn chamfer_zero_iff_same_set(a in points(), b in points(), rot in 0usize..12) {
            // same set, different order and multiplicity
            let mut c = a.clone();
            c.rotate_left(rot % a.len());
            c.push(a[0]);
            prop_assert_eq!(chamfer_distance(&a, &c), 0.0);
            let same_set = a.iter().all(|p| b.contains(p)) && b.iter().all(|p| a.contains(p));
            prop_assert_eq!(chamfer_distance(&a, &b) == 0.0, same_set);
        }
    }
}
