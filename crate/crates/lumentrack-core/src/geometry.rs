//! Planar geometry primitives shared by the tracker and the association
//! layer: axis-aligned boxes in raster (y-down) pixel coordinates, overlap
//! measures, and signed angles between 2D vectors.
//!
//! Angles are measured with `atan2` in raster coordinates, so a positive
//! angle is a counter-clockwise rotation in the (x right, y down) basis,
//! which appears clockwise when the image is displayed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Vectors shorter than this are rejected by [`signed_angle`].
pub const MIN_VECTOR_NORM: f64 = 1e-9;

/// Geometry failure cases.
#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    /// An angle was requested between vectors of (near-)zero length.
    #[error("degenerate vector: norm below {MIN_VECTOR_NORM}")]
    DegenerateVector,
}

/// A 2D point or direction in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Self) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3D cross product of the embedded vectors.
    pub fn cross(self, other: Self) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Unit vector in the same direction; `None` for near-zero input.
    pub fn normalized(self) -> Option<Self> {
        let n = self.norm();
        if n <= MIN_VECTOR_NORM {
            None
        } else {
            Some(Self::new(self.x / n, self.y / n))
        }
    }

    /// Rotate counter-clockwise (in the raster basis) by `angle` radians.
    pub fn rotated(self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

/// Axis-aligned box stored as center, width, and height, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn center(&self) -> Vec2 {
        Vec2::new(self.cx, self.cy)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Width / height ratio.
    pub fn aspect(&self) -> f64 {
        self.w / self.h
    }

    pub fn left(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn right(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn top(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn contains_point(&self, p: Vec2) -> bool {
        p.x >= self.left() && p.x <= self.right() && p.y >= self.top() && p.y <= self.bottom()
    }
}

/// Area of the intersection of two boxes (0 when disjoint or degenerate).
pub fn intersection_area(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.left().max(b.left())).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.top().max(b.top())).max(0.0);
    iw * ih
}

/// Intersection over union. Zero-area inputs yield 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        // Corner arithmetic can land a hair past 1 for (near-)identical
        // boxes; the ratio is 1 at most in exact arithmetic.
        (inter / union).min(1.0)
    }
}

/// Fraction of `inner`'s area covered by `outer`: |inner ∩ outer| / |inner|.
///
/// Returns 0 when `inner` has zero area.
pub fn containment(inner: &BoundingBox, outer: &BoundingBox) -> f64 {
    let area = inner.area();
    if area <= 0.0 {
        0.0
    } else {
        (intersection_area(inner, outer) / area).min(1.0)
    }
}

/// Signed angle that rotates `from` onto `to`, in `(-pi, pi]`.
///
/// Computed as `atan2(cross, dot)`; its absolute value equals the unsigned
/// angle `arccos(<from, to> / (|from||to|))`.
pub fn signed_angle(from: Vec2, to: Vec2) -> Result<f64, GeometryError> {
    if from.norm() <= MIN_VECTOR_NORM || to.norm() <= MIN_VECTOR_NORM {
        return Err(GeometryError::DegenerateVector);
    }
    let angle = from.cross(to).atan2(from.dot(to));
    // atan2 can return -pi for exactly opposite vectors; map it to +pi so the
    // result lies in the half-open interval (-pi, pi].
    if angle <= -std::f64::consts::PI {
        Ok(std::f64::consts::PI)
    } else {
        Ok(angle)
    }
}

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r = PI;
    }
    r
}
