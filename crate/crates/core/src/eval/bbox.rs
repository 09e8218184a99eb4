use super::components::{label_components, Components, Connectivity};
use crate::tensor_io::MaskImage;

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    /// Centre in normalised image coordinates, treating pixels as unit cells.
    pub fn center(&self, width: usize, height: usize) -> (f64, f64) {
        (
            (self.x0 + self.x1 + 1) as f64 / (2 * width) as f64,
            (self.y0 + self.y1 + 1) as f64 / (2 * height) as f64,
        )
    }
}

/// Tight box around each component, indexed by component label.
pub fn component_boxes(comps: &Components, width: usize) -> Vec<BoundingBox> {
    let mut boxes = vec![
        BoundingBox {
            x0: usize::MAX,
            y0: usize::MAX,
            x1: 0,
            y1: 0,
        };
        comps.areas.len()
    ];
    for (i, l) in comps.labels.iter().enumerate() {
        if let Some(c) = *l {
            let (x, y) = (i % width, i / width);
            let b = &mut boxes[c];
            b.x0 = b.x0.min(x);
            b.y0 = b.y0.min(y);
            b.x1 = b.x1.max(x);
            b.y1 = b.y1.max(y);
        }
    }
    boxes
}

/// Tight box around the largest 8-connected component, or `None` for an
/// empty mask.
pub fn mask_to_bbox(mask: &MaskImage) -> Option<BoundingBox> {
    let w = mask.width();
    let comps = label_components(&mask.to_bools(), w, mask.height(), Connectivity::Eight);
    let target = comps.largest()?;
    Some(component_boxes(&comps, w)[target])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(w: usize, h: usize, f: impl Fn(usize, usize) -> bool) -> MaskImage {
        let b: Vec<bool> = (0..w * h).map(|i| f(i % w, i / w)).collect();
        MaskImage::from_bools(w, h, &b)
    }

    #[test]
    fn full_mask() {
        let m = mask_from(7, 5, |_, _| true);
        assert_eq!(mask_to_bbox(&m), Some(BoundingBox { x0: 0, y0: 0, x1: 6, y1: 4 }));
    }

    #[test]
    fn single_pixel() {
        let m = mask_from(8, 8, |x, y| (x, y) == (3, 4));
        assert_eq!(mask_to_bbox(&m), Some(BoundingBox { x0: 3, y0: 4, x1: 3, y1: 4 }));
    }

    #[test]
    fn empty_mask_has_no_box() {
        assert_eq!(mask_to_bbox(&MaskImage::empty(4, 4)), None);
    }

    #[test]
    fn picks_larger_blob() {
        // a plus shape of area 5 and a 3x3 square of area 9
        let m = mask_from(12, 12, |x, y| {
            let plus = (x == 2 && (1..=3).contains(&y)) || (y == 2 && (1..=3).contains(&x));
            let square = (7..=9).contains(&x) && (6..=8).contains(&y);
            plus || square
        });
        assert_eq!(mask_to_bbox(&m), Some(BoundingBox { x0: 7, y0: 6, x1: 9, y1: 8 }));
    }

    #[test]
    fn center_convention() {
        let full = BoundingBox { x0: 0, y0: 0, x1: 9, y1: 9 };
        assert_eq!(full.center(10, 10), (0.5, 0.5));
        let quarter = BoundingBox { x0: 0, y0: 0, x1: 4, y1: 4 };
        assert_eq!(quarter.center(10, 10), (0.25, 0.25));
    }
}
