//! Rotated-box algebra.
//!
//! Boxes live in normalized image coordinates with `x` pointing right and `y`
//! pointing down. The rotation used everywhere is the row-vector product
//! `v * R^T(theta)` with `R(theta) = ((cos, -sin), (sin, cos))^T`, i.e.
//! `(x, y) -> (x cos t + y sin t, -x sin t + y cos t)`. Under this convention
//! `(1, 0)` rotated by `pi/2` becomes `(0, -1)`.

use std::f64::consts::{FRAC_PI_2, PI};

use log::warn;

use crate::error::{Error, Result};
pub use crate::numcore::Real;
use crate::numcore::{Graph, Var};

/// Boxes with area below this are treated as degenerate by [`rotated_iou`].
pub const DEGENERATE_AREA: f64 = 1e-12;

/// Oriented box `(cx, cy, w, h, theta)`; `theta` in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rbox<S> {
    pub cx: S,
    pub cy: S,
    pub w: S,
    pub h: S,
    pub theta: S,
}

pub type RotatedBox = Rbox<f64>;

/// Four corners in cyclic order, starting from local `(-w/2, -h/2)` and
/// continuing through `(+w/2, -h/2)`, `(+w/2, +h/2)`, `(-w/2, +h/2)`.
/// The shoelace area of this order is positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerQuad<S = f64>(pub [[S; 2]; 4]);

/// Angle range `A` of the normalized angle parameterization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleRange(f64);

impl Default for AngleRange {
    fn default() -> Self {
        AngleRange(PI)
    }
}

impl AngleRange {
    pub fn new(a: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::input(format!("angle range must be positive, got {a}")));
        }
        Ok(AngleRange(a))
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// `theta -> (theta + A/2) / A`.
    pub fn normalize(self, theta: f64) -> f64 {
        (theta + self.0 / 2.0) / self.0
    }

    pub fn denormalize(self, t: f64) -> f64 {
        t * self.0 - self.0 / 2.0
    }
}

impl<S: Real> Rbox<S> {
    pub fn map<T>(&self, f: impl Fn(S) -> T) -> Rbox<T> {
        Rbox {
            cx: f(self.cx),
            cy: f(self.cy),
            w: f(self.w),
            h: f(self.h),
            theta: f(self.theta),
        }
    }

    pub fn value(&self) -> RotatedBox {
        self.map(Real::val)
    }

    pub fn area(&self) -> S {
        self.w * self.h
    }

    pub fn corners(&self) -> CornerQuad<S> {
        let (s, c) = (self.theta.sin(), self.theta.cos());
        let hw = self.w * 0.5;
        let hh = self.h * 0.5;
        let local = [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)];
        CornerQuad(local.map(|(x, y)| [self.cx + x * c + y * s, self.cy - x * s + y * c]))
    }
}

impl RotatedBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        let b = Rbox { cx, cy, w, h, theta };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err(Error::input(format!(
                "box extents must be positive, got w={} h={}",
                self.w, self.h
            )));
        }
        if ![self.cx, self.cy, self.w, self.h, self.theta].iter().all(|v| v.is_finite()) {
            return Err(Error::input(format!("non-finite box {self:?}")));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.cx, self.cy, self.w, self.h, self.theta]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Rbox {
            cx: a[0],
            cy: a[1],
            w: a[2],
            h: a[3],
            theta: a[4],
        }
    }

    /// The same rectangle described with `w` and `h` exchanged and the angle
    /// shifted by a quarter turn.
    pub fn swapped_representation(&self) -> Self {
        Rbox {
            w: self.h,
            h: self.w,
            theta: self.theta - FRAC_PI_2,
            ..*self
        }
    }

    /// True when `(x, y)` lies in the closed rectangle, with slack `tol`.
    pub fn contains(&self, x: f64, y: f64, tol: f64) -> bool {
        let (lx, ly) = unrotate(x - self.cx, y - self.cy, self.theta);
        lx.abs() <= self.w / 2.0 + tol && ly.abs() <= self.h / 2.0 + tol
    }
}

/// Rotate the row vector `(x, y)` by `R^T(theta)`.
pub fn rotate_vec(x: f64, y: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (x * c + y * s, -x * s + y * c)
}

/// Inverse of [`rotate_vec`].
pub fn unrotate(x: f64, y: f64, theta: f64) -> (f64, f64) {
    rotate_vec(x, y, -theta)
}

/// Canonical form with `theta` in `[-pi/2, pi/2)`.
///
/// A half-turn maps a rectangle onto itself, so the angle is reduced modulo
/// `pi` with the extents unchanged; the point set is preserved exactly.
pub fn canonicalize(b: &RotatedBox) -> Result<RotatedBox> {
    b.validate()?;
    let mut theta = b.theta - PI * ((b.theta + FRAC_PI_2) / PI).floor();
    if theta >= FRAC_PI_2 {
        theta -= PI;
    }
    if theta < -FRAC_PI_2 {
        theta += PI;
    }
    Ok(Rbox { theta, ..*b })
}

pub fn box_to_corners(b: &RotatedBox) -> Result<CornerQuad> {
    b.validate()?;
    Ok(b.corners())
}

/// Rotate each row of `dp: [K, 2]` (or any `[.., 2]`) by `R^T(theta)` where
/// `theta` is a scalar variable. Differentiable in both.
pub fn rotate_offsets<'g>(dp: Var<'g>, theta: Var<'g>) -> Result<Var<'g>> {
    if theta.numel() != 1 {
        return Err(Error::dim("rotate_offsets takes one angle"));
    }
    dp.graph().rotate_rows(dp, theta)
}

impl<S: Real> CornerQuad<S> {
    pub fn value(&self) -> CornerQuad<f64> {
        CornerQuad(self.0.map(|p| [p[0].val(), p[1].val()]))
    }
}

impl CornerQuad<f64> {
    /// Largest |cos| between adjacent edges.
    pub fn max_adjacent_cosine(&self) -> f64 {
        (0..4)
            .map(|i| {
                let a = self.0[i];
                let b = self.0[(i + 1) % 4];
                let c = self.0[(i + 2) % 4];
                let e1 = [b[0] - a[0], b[1] - a[1]];
                let e2 = [c[0] - b[0], c[1] - b[1]];
                let dot = e1[0] * e2[0] + e1[1] * e2[1];
                dot.abs() / ((e1[0].hypot(e1[1])) * (e2[0].hypot(e2[1])))
            })
            .fold(0.0, f64::max)
    }
}

fn cross<S: Real>(o: [S; 2], a: [S; 2], b: [S; 2]) -> S {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Clip the convex `subject` polygon by every edge of the convex
/// positively-oriented `clip` polygon (Sutherland–Hodgman).
pub fn clip_polygon<S: Real>(subject: &[[S; 2]], clip: &[[S; 2]]) -> Vec<[S; 2]> {
    let mut output: Vec<[S; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (p1, p2) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let s = input[(j + input.len() - 1) % input.len()];
            let e = input[j];
            let ds = cross(p1, p2, s);
            let de = cross(p1, p2, e);
            let s_in = ds.val() >= 0.0;
            let e_in = de.val() >= 0.0;
            if e_in {
                if !s_in {
                    output.push(intersect(s, e, ds, de));
                }
                output.push(e);
            } else if s_in {
                output.push(intersect(s, e, ds, de));
            }
        }
    }
    output
}

fn intersect<S: Real>(s: [S; 2], e: [S; 2], ds: S, de: S) -> [S; 2] {
    let t = ds / (ds - de);
    [s[0] + (e[0] - s[0]) * t, s[1] + (e[1] - s[1]) * t]
}

/// Shoelace area (positive for the corner order of [`CornerQuad`]).
pub fn polygon_area<S: Real>(poly: &[[S; 2]]) -> Option<S> {
    if poly.len() < 3 {
        return None;
    }
    let mut acc = poly[0][0].lift(0.0);
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        acc = acc + (a[0] * b[1] - b[0] * a[1]);
    }
    Some(acc * 0.5)
}

pub fn intersection_area<S: Real>(a: &Rbox<S>, b: &Rbox<S>) -> S {
    let pa = a.corners().0;
    let pb = b.corners().0;
    let zero = a.cx.lift(0.0);
    match polygon_area(&clip_polygon(&pa, &pb)) {
        Some(area) if area.val() > 0.0 => area,
        _ => zero,
    }
}

/// Rotated IoU in `[0, 1]`, differentiable when `S` is a graph variable.
/// Degenerate boxes yield 0 and a logged warning.
pub fn rotated_iou_of<S: Real>(a: &Rbox<S>, b: &Rbox<S>) -> S {
    let area_a = a.area();
    let area_b = b.area();
    if area_a.val() < DEGENERATE_AREA || area_b.val() < DEGENERATE_AREA {
        warn!(
            "rotated_iou on degenerate box (areas {:.3e}, {:.3e}); returning 0",
            area_a.val(),
            area_b.val()
        );
        return a.cx.lift(0.0);
    }
    let inter = intersection_area(a, b);
    let union = area_a + area_b - inter;
    inter / union
}

pub fn rotated_iou(a: &RotatedBox, b: &RotatedBox) -> f64 {
    rotated_iou_of(a, b).clamp(0.0, 1.0)
}

/// Split a `[5]` variable into box fields.
pub fn box_from_var<'g>(v: Var<'g>) -> Result<Rbox<Var<'g>>> {
    if v.shape() != [5] {
        return Err(Error::dim(format!("box variable must be [5], got {:?}", v.shape())));
    }
    Ok(Rbox {
        cx: v.at(0)?,
        cy: v.at(1)?,
        w: v.at(2)?,
        h: v.at(3)?,
        theta: v.at(4)?,
    })
}

/// Constant box variable.
pub fn box_constant<'g>(g: &'g Graph, b: &RotatedBox) -> Rbox<Var<'g>> {
    b.map(|v| g.scalar(v))
}
