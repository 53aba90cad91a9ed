//! Small 2-D helpers shared by the renderer and the ROI pipeline.
//!
//! Coordinates are image pixels: `x` grows to the right, `y` grows down.

use serde::{Deserialize, Serialize};

pub type Point = [f64; 2];

/// Rotate `p` about `center` by `degrees` using `[[c, -s], [s, c]]`.
pub fn rotate_about(p: Point, center: Point, degrees: f64) -> Point {
    let (s, c) = degrees.to_radians().sin_cos();
    let dx = p[0] - center[0];
    let dy = p[1] - center[1];
    [center[0] + c * dx - s * dy, center[1] + s * dx + c * dy]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionKind {
    JointSpace,
    Osteophyte,
}

/// A planted-lesion rectangle, kept as four corners so it survives rigid
/// motions without inflating to a bounding box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionBox {
    pub kind: LesionKind,
    pub corners: [Point; 4],
}

impl LesionBox {
    pub fn axis_aligned(kind: LesionKind, x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            kind,
            corners: [[x0, y0], [x1, y0], [x1, y1], [x0, y1]],
        }
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Self {
        Self {
            kind: self.kind,
            corners: self.corners.map(f),
        }
    }

    /// `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.corners.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), p| (a.min(p[0]), b.min(p[1]), c.max(p[0]), d.max(p[1])),
        )
    }

    /// Point-in-convex-quadrilateral test; corner order may be either winding.
    pub fn contains(&self, p: Point) -> bool {
        let mut sign = 0.0f64;
        for i in 0..4 {
            let a = self.corners[i];
            let b = self.corners[(i + 1) % 4];
            let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
            if cross.abs() < 1e-12 {
                continue;
            }
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_of_vertical_vector() {
        let p = rotate_about([0.0, 1.0], [0.0, 0.0], 90.0);
        assert!((p[0] + 1.0).abs() < 1e-12 && p[1].abs() < 1e-12);
    }

    #[test]
    fn box_containment_survives_rotation() {
        let b = LesionBox::axis_aligned(LesionKind::Osteophyte, 0.0, 0.0, 4.0, 2.0);
        let r = b.map(|p| rotate_about(p, [2.0, 1.0], 30.0));
        assert!(r.contains([2.0, 1.0]));
        assert!(!r.contains([10.0, 1.0]));
        assert!(b.contains([3.9, 1.9]));
    }
}
