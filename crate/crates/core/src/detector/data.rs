//! Synthetic oriented-object scenes with a controlled domain shift.
//!
//! Two classes are rendered on a noisy background: solid rectangles (class 0)
//! and rectangle outlines (class 1). Domain `D2` differs from `D1` in four
//! fixed ways:
//!
//! | property      | D1                  | D2                          |
//! |---------------|---------------------|-----------------------------|
//! | angle         | `|θ| ≤ π/8`         | `π/6 ≤ |θ| ≤ 3π/8`          |
//! | aspect ratio  | 1.0 – 2.0           | 2.0 – 3.0                   |
//! | contrast      | amplitude 1.0       | amplitude 0.7               |
//! | noise σ       | 0.10                | 0.12                        |

use std::f64::consts::{FRAC_PI_6, FRAC_PI_8};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::detector::geometry::OrientedBox;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};

pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    D1,
    D2,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::D1 => "D1",
            Domain::D2 => "D2",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "D1" => Ok(Domain::D1),
            "D2" => Ok(Domain::D2),
            _ => Err(Error::Config(format!("unknown domain '{s}' (expected D1 or D2)"))),
        }
    }
}

struct DomainStyle {
    angle_lo: f64,
    angle_hi: f64,
    aspect: (f64, f64),
    amplitude: f64,
    background: f64,
    noise: f64,
}

impl Domain {
    fn style(self) -> DomainStyle {
        match self {
            Domain::D1 => DomainStyle {
                angle_lo: 0.0,
                angle_hi: FRAC_PI_8,
                aspect: (1.0, 2.0),
                amplitude: 1.0,
                background: 0.0,
                noise: 0.10,
            },
            Domain::D2 => DomainStyle {
                angle_lo: FRAC_PI_6,
                angle_hi: 3.0 * FRAC_PI_8,
                aspect: (2.0, 3.0),
                amplitude: 0.7,
                background: 0.0,
                noise: 0.12,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub image: Matrix,
    pub boxes: Vec<OrientedBox>,
    pub labels: Vec<usize>,
    pub domain: Domain,
}

/// Long side range of rendered objects, in pixels of a 64-pixel image;
/// other image sizes scale it proportionally.
pub const LONG_SIDE: (f64, f64) = (14.0, 24.0);
/// Smallest image side the generator accepts.
pub const MIN_IMAGE_SIZE: usize = 16;
const OUTLINE_WIDTH: f64 = 1.25;
const MAX_OBJECTS: usize = 3;

fn sample_box(rng: &mut Rng, style: &DomainStyle, size: f64) -> OrientedBox {
    loop {
        let long = rng.uniform_range(LONG_SIDE.0, LONG_SIDE.1) * (size / 64.0);
        let aspect = rng.uniform_range(style.aspect.0, style.aspect.1);
        let short = long / aspect;
        let mag = rng.uniform_range(style.angle_lo, style.angle_hi);
        let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        let theta = sign * mag;
        let cx = rng.uniform_range(0.0, size);
        let cy = rng.uniform_range(0.0, size);
        let b = OrientedBox::new(cx, cy, long, short, theta).expect("positive extents");
        let (x0, y0, x1, y1) = b.bounds();
        if x0 >= 1.0 && y0 >= 1.0 && x1 <= size - 1.0 && y1 <= size - 1.0 {
            return b;
        }
    }
}

fn overlaps(a: &OrientedBox, b: &OrientedBox) -> bool {
    let (ax0, ay0, ax1, ay1) = a.bounds();
    let (bx0, by0, bx1, by1) = b.bounds();
    ax0 < bx1 + 2.0 && bx0 < ax1 + 2.0 && ay0 < by1 + 2.0 && by0 < ay1 + 2.0
}

fn render(size: usize, boxes: &[OrientedBox], labels: &[usize], style: &DomainStyle, rng: &mut Rng) -> Matrix {
    let mut img = Matrix::from_fn(size, size, |_, _| 0.0);
    for v in img.data_mut() {
        *v = style.background + style.noise * rng.standard_normal();
    }
    for (b, &label) in boxes.iter().zip(labels) {
        let inner = OrientedBox {
            w: b.w - 2.0 * OUTLINE_WIDTH,
            h: b.h - 2.0 * OUTLINE_WIDTH,
            ..*b
        };
        let (x0, y0, x1, y1) = b.bounds();
        for y in (y0.floor().max(0.0) as usize)..(y1.ceil() as usize).min(size) {
            for x in (x0.floor().max(0.0) as usize)..(x1.ceil() as usize).min(size) {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let lit = b.contains(px, py) && (label == 0 || !inner.contains(px, py));
                if lit {
                    let v = img.get(y, x);
                    img.set(y, x, v + style.amplitude);
                }
            }
        }
    }
    img
}

/// One scene, fully determined by `(seed, domain, index)`.
///
/// # Panics
/// If `image_size` is below [`MIN_IMAGE_SIZE`].
pub fn synth_sample(seed: u64, domain: Domain, index: u64, image_size: usize) -> SceneSample {
    assert!(image_size >= MIN_IMAGE_SIZE, "image size {image_size} below {MIN_IMAGE_SIZE}");
    let mut rng = Rng::derive(seed, &format!("scene-{domain}"), index);
    let style = domain.style();
    let size = image_size as f64;
    let count = 1 + rng.below(MAX_OBJECTS);
    let mut boxes: Vec<OrientedBox> = Vec::with_capacity(count);
    let mut attempts = 0;
    while boxes.len() < count && attempts < 200 {
        attempts += 1;
        let b = sample_box(&mut rng, &style, size);
        if boxes.iter().all(|o| !overlaps(o, &b)) {
            boxes.push(b);
        }
    }
    let labels: Vec<usize> = boxes.iter().map(|_| rng.below(NUM_CLASSES)).collect();
    let image = render(image_size, &boxes, &labels, &style, &mut rng);
    SceneSample {
        image,
        boxes,
        labels,
        domain,
    }
}

/// `n` scenes from one domain; identical for identical `(seed, domain, n)`
/// regardless of worker count.
pub fn synth_dataset(seed: u64, domain: Domain, n: usize, image_size: usize) -> Result<Vec<SceneSample>> {
    if n == 0 {
        return Err(Error::Argument("dataset size must be at least 1".into()));
    }
    if image_size < MIN_IMAGE_SIZE {
        return Err(Error::Argument(format!("image size {image_size} below {MIN_IMAGE_SIZE}")));
    }
    Ok((0..n as u64)
        .into_par_iter()
        .map(|i| synth_sample(seed, domain, i, image_size))
        .collect())
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0_f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}
