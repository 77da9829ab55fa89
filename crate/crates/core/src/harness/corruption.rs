//! Synthetic image corruptions with five severity levels.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::ImageSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    BoxBlur,
    Brightness,
    Contrast,
    /// Additive low-frequency field.
    Haze,
    Pixelate,
    BlockQuantize,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::BoxBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Haze,
        CorruptionKind::Pixelate,
        CorruptionKind::BlockQuantize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::BoxBlur => "box_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Haze => "haze",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::BlockQuantize => "block_quantize",
        }
    }

    /// Distortion magnitude at severity 1..=5.
    pub fn magnitude(self, severity: u8) -> Result<f64> {
        let table: [f64; 5] = match self {
            CorruptionKind::GaussianNoise => [0.04, 0.08, 0.12, 0.18, 0.26],
            CorruptionKind::ImpulseNoise => [0.03, 0.08, 0.15, 0.25, 0.4],
            CorruptionKind::BoxBlur => [1.0, 2.0, 3.0, 4.0, 5.0],
            CorruptionKind::Brightness => [0.1, 0.25, 0.4, 0.55, 0.7],
            CorruptionKind::Contrast => [0.75, 0.55, 0.4, 0.25, 0.12],
            CorruptionKind::Haze => [0.1, 0.25, 0.4, 0.6, 0.8],
            CorruptionKind::Pixelate => [2.0, 3.0, 4.0, 6.0, 8.0],
            CorruptionKind::BlockQuantize => [16.0, 10.0, 6.0, 4.0, 2.0],
        };
        match severity {
            1..=5 => Ok(table[severity as usize - 1]),
            s => Err(Error::Config(format!("severity {s} outside 1..=5"))),
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownCorruption(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    /// One of the names of [`CorruptionKind`].
    pub kind: String,
    #[serde(default = "default_severity")]
    pub severity: u8,
    #[serde(default)]
    pub seed: u64,
    /// Replaces the severity table entry when set.
    #[serde(default)]
    pub magnitude: Option<f64>,
}

fn default_severity() -> u8 {
    5
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Self {
        Self {
            kind: kind.name().to_string(),
            severity,
            seed,
            magnitude: None,
        }
    }

    pub fn kind(&self) -> Result<CorruptionKind> {
        self.kind.parse()
    }

    pub fn resolved_magnitude(&self) -> Result<f64> {
        match self.magnitude {
            Some(m) => Ok(m),
            None => self.kind()?.magnitude(self.severity),
        }
    }

    pub fn label(&self) -> String {
        format!("{}@{}", self.kind, self.severity)
    }
}

fn image_hash(img: &ImageSample) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in &img.pixels {
        for b in p.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Applies `spec` to `img`; randomness is seeded from the spec seed and
/// the image content, so the result depends only on `(img, spec)`.
/// `true_domain` is set to `domain`.
pub fn apply_corruption(img: &ImageSample, spec: &CorruptionSpec, domain: usize) -> Result<ImageSample> {
    img.validate()?;
    let kind = spec.kind()?;
    let mag = spec.resolved_magnitude()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ image_hash(img));
    let (h, w, c) = (img.height, img.width, img.channels);
    let idx = |i: usize, j: usize, ch: usize| (i * w + j) * c + ch;
    let src = &img.pixels;
    let mut out = src.clone();
    match kind {
        CorruptionKind::GaussianNoise => {
            if mag > 0.0 {
                let normal = Normal::new(0.0, mag).map_err(|e| Error::Config(e.to_string()))?;
                for p in &mut out {
                    *p += normal.sample(&mut rng);
                }
            }
        }
        CorruptionKind::ImpulseNoise => {
            for i in 0..h {
                for j in 0..w {
                    if rng.gen::<f64>() < mag {
                        let v = if rng.gen::<bool>() { 1.0 } else { 0.0 };
                        for ch in 0..c {
                            out[idx(i, j, ch)] = v;
                        }
                    }
                }
            }
        }
        CorruptionKind::BoxBlur => {
            let r = mag.round() as isize;
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        let mut sum = 0.0;
                        let mut n = 0.0;
                        for di in -r..=r {
                            for dj in -r..=r {
                                let (ii, jj) = (i as isize + di, j as isize + dj);
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    sum += src[idx(ii as usize, jj as usize, ch)];
                                    n += 1.0;
                                }
                            }
                        }
                        out[idx(i, j, ch)] = sum / n;
                    }
                }
            }
        }
        CorruptionKind::Brightness => out.iter_mut().for_each(|p| *p += mag),
        CorruptionKind::Contrast => {
            for ch in 0..c {
                let mean = (0..h * w).map(|k| src[k * c + ch]).sum::<f64>() / (h * w) as f64;
                for k in 0..h * w {
                    out[k * c + ch] = mean + (src[k * c + ch] - mean) * mag;
                }
            }
        }
        CorruptionKind::Haze => {
            // Sum of two random lowest-frequency plane waves, in [0, 1].
            let waves: Vec<(f64, f64, f64)> = (0..2)
                .map(|_| {
                    (
                        rng.gen_range(-1.0..=1.0_f64).round(),
                        rng.gen_range(0.0..=1.0_f64).round(),
                        rng.gen_range(0.0..2.0 * PI),
                    )
                })
                .collect();
            for i in 0..h {
                for j in 0..w {
                    let mut field = 0.0;
                    for &(fu, fv, phase) in &waves {
                        let arg = 2.0 * PI * (fu * i as f64 / h as f64 + fv * j as f64 / w as f64) + phase;
                        field += 0.25 * (1.0 + arg.cos());
                    }
                    for ch in 0..c {
                        out[idx(i, j, ch)] = src[idx(i, j, ch)] * (1.0 - mag) + mag * (0.6 + 0.4 * field);
                    }
                }
            }
        }
        CorruptionKind::Pixelate => {
            let b = (mag.round() as usize).max(1);
            for bi in (0..h).step_by(b) {
                for bj in (0..w).step_by(b) {
                    let (ei, ej) = ((bi + b).min(h), (bj + b).min(w));
                    for ch in 0..c {
                        let mut sum = 0.0;
                        for i in bi..ei {
                            for j in bj..ej {
                                sum += src[idx(i, j, ch)];
                            }
                        }
                        let mean = sum / ((ei - bi) * (ej - bj)) as f64;
                        for i in bi..ei {
                            for j in bj..ej {
                                out[idx(i, j, ch)] = mean;
                            }
                        }
                    }
                }
            }
        }
        CorruptionKind::BlockQuantize => {
            // Each 4×4 block keeps its mean; residuals snap to `mag` levels.
            let levels = mag.max(1.0);
            for bi in (0..h).step_by(4) {
                for bj in (0..w).step_by(4) {
                    let (ei, ej) = ((bi + 4).min(h), (bj + 4).min(w));
                    for ch in 0..c {
                        let mut sum = 0.0;
                        for i in bi..ei {
                            for j in bj..ej {
                                sum += src[idx(i, j, ch)];
                            }
                        }
                        let mean = sum / ((ei - bi) * (ej - bj)) as f64;
                        for i in bi..ei {
                            for j in bj..ej {
                                let resid = src[idx(i, j, ch)] - mean;
                                out[idx(i, j, ch)] = mean + (resid * levels).round() / levels;
                            }
                        }
                    }
                }
            }
        }
    }
    for p in &mut out {
        *p = p.clamp(0.0, 1.0);
    }
    Ok(ImageSample {
        height: h,
        width: w,
        channels: c,
        pixels: out,
        class_label: img.class_label,
        true_domain: Some(domain),
    })
}
