//! Connected-component labelling of binary masks.

use std::collections::VecDeque;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

#[derive(Clone, Debug)]
pub struct Components {
    /// Component index per pixel, `None` for background.
    pub labels: Vec<Option<usize>>,
    pub areas: Vec<usize>,
}

impl Components {
    pub fn largest(&self) -> Option<usize> {
        // first component wins ties (raster order of its top-left pixel)
        self.areas
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
    }
}

/// Breadth-first flood labelling in raster order.
pub fn label_components(mask: &[bool], w: usize, h: usize, conn: Connectivity) -> Components {
    assert_eq!(mask.len(), w * h);
    let mut labels = vec![None; w * h];
    let mut areas = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask[start] || labels[start].is_some() {
            continue;
        }
        let id = areas.len();
        labels[start] = Some(id);
        queue.push_back(start);
        let mut area = 0;
        while let Some(p) = queue.pop_front() {
            area += 1;
            let (x, y) = ((p % w) as i64, (p / w) as i64);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if (dx == 0 && dy == 0) || (conn == Connectivity::Four && dx != 0 && dy != 0) {
                        continue;
                    }
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask[q] && labels[q].is_none() {
                        labels[q] = Some(id);
                        queue.push_back(q);
                    }
                }
            }
        }
        areas.push(area);
    }
    Components { labels, areas }
}
