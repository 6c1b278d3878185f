//! Oriented-rectangle geometry.
//!
//! Coordinates follow raster conventions: +x right, +y down. A box angle
//! `theta` rotates the box's local +x axis toward +y, so a local point
//! `(u, v)` lands at `(cx + u cos θ - v sin θ, cy + u sin θ + v cos θ)`.
//!
//! Rotated IoU is computed by clipping the two corner polygons against each
//! other (Sutherland-Hodgman, both operands convex) and taking shoelace areas.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Intersections smaller than this (square pixels) are treated as empty.
pub const DEGENERATE_AREA: f64 = 1e-12;

/// Distance from `±π/2` within which a wrapped angle difference is snapped
/// onto the singular branch.
pub const SINGULAR_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid box (cx={cx}, cy={cy}, w={w}, h={h}, theta={theta}): {reason}")]
    InvalidBox {
        cx: f64,
        cy: f64,
        w: f64,
        h: f64,
        theta: f64,
        reason: &'static str,
    },
}

/// A rotated rectangle in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObbBox {
    pub cx: f64,
    pub cy: f64,
    /// Extent along the box's local x-axis.
    pub w: f64,
    /// Extent along the box's local y-axis.
    pub h: f64,
    /// Radians.
    pub theta: f64,
}

impl ObbBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Self {
        Self { cx, cy, w, h, theta }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let reason = if !(self.cx.is_finite() && self.cy.is_finite()) {
            Some("center must be finite")
        } else if !self.theta.is_finite() {
            Some("angle must be finite")
        } else if !(self.w.is_finite() && self.h.is_finite()) {
            Some("dimensions must be finite")
        } else if self.w <= 0.0 || self.h <= 0.0 {
            Some("dimensions must be positive")
        } else {
            None
        };
        match reason {
            None => Ok(()),
            Some(reason) => Err(GeometryError::InvalidBox {
                cx: self.cx,
                cy: self.cy,
                w: self.w,
                h: self.h,
                theta: self.theta,
                reason,
            }),
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// True when `w <= h` and `theta` lies in `[-π/2, π/2)`.
    pub fn is_canonical(&self) -> bool {
        self.w <= self.h && (-FRAC_PI_2..FRAC_PI_2).contains(&self.theta)
    }

    /// Unit vectors of the local x and y axes in image coordinates.
    pub fn axes(&self) -> ([f64; 2], [f64; 2]) {
        let (s, c) = self.theta.sin_cos();
        ([c, s], [-s, c])
    }
}

/// A 2-D point in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Ordered vertex list. Polygons built here are convex and wound
/// counter-clockwise as seen on screen (y-down), which is a negative
/// signed area in the usual shoelace convention.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Polygon {
    pub vertices: Vec<Point>,
}

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Self {
        Self { vertices }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.len() < 3
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    /// Shoelace sum `Σ (x_i y_{i+1} - x_{i+1} y_i) / 2`.
    pub fn signed_area(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let n = self.vertices.len();
        let twice: f64 = (0..n)
            .map(|i| {
                let a = self.vertices[i];
                let b = self.vertices[(i + 1) % n];
                a.x * b.y - b.x * a.y
            })
            .sum();
        0.5 * twice
    }
}

/// Wraps an angle into the canonical box range `[-π/2, π/2)`.
fn wrap_half_open(theta: f64) -> f64 {
    let n = (theta / PI).round();
    let mut r = theta - n * PI;
    if r >= FRAC_PI_2 {
        r = theta - (n + 1.0) * PI;
    } else if r < -FRAC_PI_2 {
        r = theta - (n - 1.0) * PI;
    }
    r
}

/// Returns the canonical representative of `b`: `w <= h`, `theta ∈ [-π/2, π/2)`.
///
/// Swapping `w` and `h` together with a quarter turn, or adding any multiple
/// of π to the angle, leaves the rectangle's point set unchanged.
pub fn canonicalize(b: &ObbBox) -> Result<ObbBox, GeometryError> {
    b.validate()?;
    if b.is_canonical() {
        return Ok(*b);
    }
    let (w, h, theta) = if b.w > b.h {
        (b.h, b.w, b.theta - FRAC_PI_2)
    } else {
        (b.w, b.h, b.theta)
    };
    Ok(ObbBox::new(b.cx, b.cy, w, h, wrap_half_open(theta)))
}

/// Result of wrapping an angle difference modulo π.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WrappedDelta {
    /// Representative in `(-π/2, π/2]`.
    pub value: f64,
    /// The input sat on `kπ + π/2`, where the wrap jumps. The value there is
    /// pinned to `+π/2` and callers must not propagate a gradient through it.
    pub singular: bool,
}

/// Wraps `delta` into `(-π/2, π/2]` modulo π, flagging the jump points.
///
/// The reduction subtracts an integer multiple of `f64` π, so shifting the
/// input by `k * PI` (when that sum is exactly representable) yields a
/// bit-identical result.
pub fn wrap_angle_delta_checked(delta: f64) -> WrappedDelta {
    let n = (delta / PI).round();
    let mut r = delta - n * PI;
    if r <= -FRAC_PI_2 {
        r = delta - (n - 1.0) * PI;
    } else if r > FRAC_PI_2 {
        r = delta - (n + 1.0) * PI;
    }
    if FRAC_PI_2 - r.abs() <= SINGULAR_TOLERANCE {
        WrappedDelta {
            value: FRAC_PI_2,
            singular: true,
        }
    } else {
        WrappedDelta {
            value: r,
            singular: false,
        }
    }
}

/// `arctan(sin Δ / cos Δ)`: the periodic angle difference in `(-π/2, π/2]`.
pub fn wrap_angle_delta(delta: f64) -> f64 {
    wrap_angle_delta_checked(delta).value
}

/// Corner polygon of `b`, counter-clockwise on screen.
pub fn obb_corners(b: &ObbBox) -> Polygon {
    let (ax, ay) = b.axes();
    let (hw, hh) = (0.5 * b.w, 0.5 * b.h);
    let local = [(-hw, -hh), (-hw, hh), (hw, hh), (hw, -hh)];
    Polygon::new(
        local
            .iter()
            .map(|&(u, v)| Point::new(b.cx + u * ax[0] + v * ay[0], b.cy + u * ax[1] + v * ay[1]))
            .collect(),
    )
}

/// Absolute shoelace area. Empty polygons have zero area.
pub fn polygon_area(p: &Polygon) -> f64 {
    p.signed_area().abs()
}

/// Sign of `(b - a) × (p - a)`, scaled by the clip polygon's winding so that
/// non-negative means "inside".
fn edge_side(a: Point, b: Point, p: Point, winding: f64) -> f64 {
    winding * ((b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x))
}

/// Intersection of two convex polygons by Sutherland-Hodgman clipping.
///
/// Works for either winding. Returns the empty polygon when the overlap has
/// area below [`DEGENERATE_AREA`].
pub fn convex_clip(subject: &Polygon, clip: &Polygon) -> Polygon {
    if subject.is_empty() || clip.is_empty() {
        return Polygon::empty();
    }
    let winding = if clip.signed_area() >= 0.0 { 1.0 } else { -1.0 };
    let mut output = subject.vertices.clone();
    let m = clip.vertices.len();
    for i in 0..m {
        if output.is_empty() {
            break;
        }
        let a = clip.vertices[i];
        let b = clip.vertices[(i + 1) % m];
        let input = std::mem::take(&mut output);
        let n = input.len();
        for j in 0..n {
            let s = input[j];
            let e = input[(j + 1) % n];
            let ds = edge_side(a, b, s, winding);
            let de = edge_side(a, b, e, winding);
            let s_in = ds >= 0.0;
            let e_in = de >= 0.0;
            if s_in {
                output.push(s);
            }
            if s_in != e_in {
                // ds and de have opposite signs, so the denominator is nonzero.
                let t = ds / (ds - de);
                output.push(Point::new(s.x + t * (e.x - s.x), s.y + t * (e.y - s.y)));
            }
        }
    }
    let result = Polygon::new(output);
    if polygon_area(&result) < DEGENERATE_AREA {
        Polygon::empty()
    } else {
        result
    }
}

fn box_key(b: &ObbBox) -> [u64; 5] {
    [b.cx, b.cy, b.w, b.h, b.theta].map(f64::to_bits)
}

/// Intersection over union of two rotated boxes, in `[0, 1]`.
pub fn rotated_iou(a: &ObbBox, b: &ObbBox) -> f64 {
    // Fixed operand order makes the result exactly symmetric.
    let (first, second) = if box_key(a) <= box_key(b) { (a, b) } else { (b, a) };
    let inter = polygon_area(&convex_clip(&obb_corners(first), &obb_corners(second)));
    let union = first.area() + second.area() - inter;
    if union <= 0.0 || inter <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}
