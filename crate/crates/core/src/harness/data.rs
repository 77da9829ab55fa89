//! Procedural shape images used as the labeled source domain.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::ImageSample;

pub const SHAPE_NAMES: [&str; 8] = [
    "bar",
    "disk",
    "cross",
    "ring",
    "triangle",
    "checker",
    "gradient_blob",
    "corner",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            samples_per_class: 100,
            image_size: 32,
            seed: 0,
        }
    }
}

/// Coverage in `[0, 1]` of shape `class` at local coordinates `(x, y)`,
/// already rotated and divided by the shape scale.
fn coverage(class: usize, x: f64, y: f64) -> f64 {
    let r = (x * x + y * y).sqrt();
    let inside = |b: bool| if b { 1.0 } else { 0.0 };
    match class % SHAPE_NAMES.len() {
        0 => inside(x.abs() < 0.95 && y.abs() < 0.22),
        1 => inside(r < 0.8),
        2 => inside((x.abs() < 0.2 && y.abs() < 0.95) || (y.abs() < 0.2 && x.abs() < 0.95)),
        3 => inside(r > 0.55 && r < 0.95),
        4 => {
            // Equilateral triangle with circumradius 0.95.
            let verts: Vec<(f64, f64)> = (0..3)
                .map(|k| {
                    let a = PI / 2.0 + 2.0 * PI * k as f64 / 3.0;
                    (0.95 * a.cos(), 0.95 * a.sin())
                })
                .collect();
            let side = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
            let s0 = side(verts[0], verts[1]);
            let s1 = side(verts[1], verts[2]);
            let s2 = side(verts[2], verts[0]);
            inside(s0 >= 0.0 && s1 >= 0.0 && s2 >= 0.0)
        }
        5 => {
            let cell = ((x + 1.0) / 0.5).floor() as i64 + ((y + 1.0) / 0.5).floor() as i64;
            inside(x.abs() < 0.95 && y.abs() < 0.95 && cell % 2 == 0)
        }
        6 => (-(r * r) / 0.18).exp() * (0.6 + 0.4 * x.clamp(-1.0, 1.0)),
        _ => inside(
            (x > -0.95 && x < -0.5 && y.abs() < 0.95) || (y > 0.5 && y < 0.95 && x > -0.95 && x < 0.95),
        ),
    }
}

/// Renders one sample of `class` with pose drawn from `rng`.
pub fn render_shape<R: Rng + ?Sized>(class: usize, size: usize, rng: &mut R) -> ImageSample {
    let s = size as f64;
    let cx = s / 2.0 + rng.gen_range(-0.12..0.12) * s;
    let cy = s / 2.0 + rng.gen_range(-0.12..0.12) * s;
    let scale = rng.gen_range(0.26..0.38) * s;
    let theta = rng.gen_range(0.0..2.0 * PI);
    let background = rng.gen_range(0.1..0.2);
    let foreground = rng.gen_range(0.75..0.9);
    let tint: [f64; 3] = [
        rng.gen_range(0.9..1.0),
        rng.gen_range(0.9..1.0),
        rng.gen_range(0.9..1.0),
    ];
    let (sin, cos) = theta.sin_cos();
    let mut pixels = Vec::with_capacity(size * size * 3);
    for i in 0..size {
        for j in 0..size {
            // Two-by-two supersampling softens the edges.
            let mut cov = 0.0;
            for (di, dj) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let dx = j as f64 + dj - cx;
                let dy = i as f64 + di - cy;
                let x = (cos * dx + sin * dy) / scale;
                let y = (-sin * dx + cos * dy) / scale;
                cov += coverage(class, x, y) / 4.0;
            }
            let gray = background + (foreground - background) * cov;
            for t in tint {
                pixels.push((gray * t).clamp(0.0, 1.0));
            }
        }
    }
    ImageSample::new(size, size, 3, pixels)
        .expect("rendered image is valid")
        .with_label(class)
}

/// `classes × samples_per_class` labeled images, class-major, each drawn
/// from its own seeded generator.
pub fn generate_base_dataset(spec: &DatasetSpec) -> Result<Vec<ImageSample>> {
    if spec.classes < 2 || spec.classes > SHAPE_NAMES.len() {
        return Err(Error::Config(format!(
            "classes must be in 2..={}, got {}",
            SHAPE_NAMES.len(),
            spec.classes
        )));
    }
    if spec.image_size < 8 {
        return Err(Error::Config(format!("image size {} too small", spec.image_size)));
    }
    let mut out = Vec::with_capacity(spec.classes * spec.samples_per_class);
    for class in 0..spec.classes {
        for n in 0..spec.samples_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream((class * spec.samples_per_class + n) as u64);
            out.push(render_shape(class, spec.image_size, &mut rng));
        }
    }
    Ok(out)
}
