//! Exact circle geometry: lens intersection area and circle IoU (cIoU).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A circle in level-0 slide pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Circle {
    /// Builds a circle, rejecting non-finite coordinates and non-positive radii.
    pub fn new(cx: f64, cy: f64, r: f64) -> Result<Self> {
        let c = Self { cx, cy, r };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::Validation(format!(
                "circle center ({}, {}) is not finite",
                self.cx, self.cy
            )));
        }
        if !(self.r.is_finite() && self.r > 0.0) {
            return Err(Error::Validation(format!(
                "circle radius {} must be a positive finite number",
                self.r
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        PI * self.r * self.r
    }

    pub fn center_distance(&self, other: &Circle) -> f64 {
        (self.cx - other.cx).hypot(self.cy - other.cy)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Circle {
        Circle {
            cx: self.cx + dx,
            cy: self.cy + dy,
            r: self.r,
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        dx * dx + dy * dy <= self.r * self.r
    }
}

/// Area of the lens shared by two circles.
pub fn intersection_area(a: &Circle, b: &Circle) -> f64 {
    let d = a.center_distance(b);
    let (ra, rb) = (a.r, b.r);
    if d >= ra + rb {
        return 0.0;
    }
    if d <= (ra - rb).abs() {
        let rmin = ra.min(rb);
        return PI * rmin * rmin;
    }

    // Two circular segments, one cut from each circle by the common chord.
    let ra2 = ra * ra;
    let rb2 = rb * rb;
    let cos_a = ((d * d + ra2 - rb2) / (2.0 * d * ra)).clamp(-1.0, 1.0);
    let cos_b = ((d * d + rb2 - ra2) / (2.0 * d * rb)).clamp(-1.0, 1.0);
    let half_a = cos_a.acos();
    let half_b = cos_b.acos();
    let kite = 0.5
        * ((-d + ra + rb) * (d + ra - rb) * (d - ra + rb) * (d + ra + rb))
            .max(0.0)
            .sqrt();
    let area = ra2 * half_a + rb2 * half_b - kite;
    area.clamp(0.0, PI * ra.min(rb).powi(2))
}

/// Circle intersection over union.
pub fn ciou(a: &Circle, b: &Circle) -> f64 {
    let inter = intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Cheap rejection test: true when the circles cannot overlap.
#[inline]
pub fn disjoint(a: &Circle, b: &Circle) -> bool {
    let dx = a.cx - b.cx;
    let dy = a.cy - b.cy;
    let rs = a.r + b.r;
    dx * dx + dy * dy >= rs * rs
}
