use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};

pub type Point = (f64, f64);

/// Rotated rectangle in the le90 convention: `w` runs along direction `theta`,
/// `h` along `theta + π/2`, with `theta ∈ [−π/2, π/2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

/// Wraps an angle into `[−π/2, π/2)`.
pub fn wrap_half_pi(theta: f64) -> f64 {
    if (-FRAC_PI_2..FRAC_PI_2).contains(&theta) {
        return theta;
    }
    let t = (theta + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
    if t >= FRAC_PI_2 {
        t - PI
    } else {
        t
    }
}

impl OrientedBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || ![cx, cy, w, h, theta].iter().all(|v| v.is_finite()) {
            return Err(Error::Argument(format!(
                "degenerate box w={w} h={h} (center {cx},{cy}, theta {theta})"
            )));
        }
        Ok(Self {
            cx,
            cy,
            w,
            h,
            theta: wrap_half_pi(theta),
        })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corners in counter-clockwise order (y axis up; clockwise on screen).
    pub fn corners(&self) -> [Point; 4] {
        let (s, c) = self.theta.sin_cos();
        let (ux, uy) = (c * self.w / 2.0, s * self.w / 2.0);
        let (vx, vy) = (-s * self.h / 2.0, c * self.h / 2.0);
        [
            (self.cx - ux - vx, self.cy - uy - vy),
            (self.cx + ux - vx, self.cy + uy - vy),
            (self.cx + ux + vx, self.cy + uy + vy),
            (self.cx - ux + vx, self.cy - uy + vy),
        ]
    }

    /// Whether the point lies inside (or on) the rectangle.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let along = dx * c + dy * s;
        let across = -dx * s + dy * c;
        along.abs() <= self.w / 2.0 && across.abs() <= self.h / 2.0
    }

    /// Axis-aligned extent `(xmin, ymin, xmax, ymax)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.corners().iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
        )
    }

    /// Same box after rotating the plane by `angle` about the origin and
    /// translating by `(tx, ty)`.
    pub fn rigid_motion(&self, angle: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            cx: c * self.cx - s * self.cy + tx,
            cy: s * self.cx + c * self.cy + ty,
            w: self.w,
            h: self.h,
            theta: wrap_half_pi(self.theta + angle),
        }
    }
}

pub fn polygon_area(poly: &[Point]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + 1) % poly.len()];
        acc += x1 * y2 - x2 * y1;
    }
    0.5 * acc.abs()
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn segment_line_intersection(p: Point, q: Point, a: Point, b: Point) -> Point {
    let d1 = cross(a, b, p);
    let d2 = cross(a, b, q);
    let t = d1 / (d1 - d2);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

/// Sutherland–Hodgman: clips `subject` against convex counter-clockwise `clip`.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(segment_line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

/// Intersection-over-union of two oriented boxes.
pub fn rotated_iou(a: &OrientedBox, b: &OrientedBox) -> Result<f64> {
    for bx in [a, b] {
        if !(bx.w > 0.0 && bx.h > 0.0) {
            return Err(Error::Argument(format!("degenerate box {bx:?}")));
        }
    }
    let inter = polygon_area(&clip_convex(&a.corners(), &b.corners()));
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}
