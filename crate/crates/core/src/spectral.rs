//! Low-frequency spectral descriptors of raw images.
//!
//! The pipeline is grayscale → 2-D DFT → shift DC to the centre →
//! magnitude → square crop of side `2r+1` around the centre → row-major
//! flatten. The DFT is evaluated separably (row transforms, then column
//! transforms) with precomputed twiddles; images here are at most a few
//! dozen pixels on a side.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// An `H×W×channels` image stored channel-interleaved, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
    pub class_label: Option<usize>,
    /// Simulation ground truth; never read by the adaptation path.
    pub true_domain: Option<usize>,
}

impl ImageSample {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        let img = Self {
            height,
            width,
            channels,
            pixels,
            class_label: None,
            true_domain: None,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidImage(format!("{} channels", self.channels)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidImage("zero-sized image".into()));
        }
        if self.pixels.len() != self.height * self.width * self.channels {
            return Err(Error::InvalidImage(format!(
                "{} pixels for {}x{}x{}",
                self.pixels.len(),
                self.height,
                self.width,
                self.channels
            )));
        }
        if let Some(p) = self.pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidImage(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(())
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.pixels[(row * self.width + col) * self.channels + channel]
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.class_label = Some(label);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralConfig {
    pub crop_radius: usize,
    /// Replace each magnitude `m` by `ln(1 + m)`.
    pub log_compress: bool,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            crop_radius: 3,
            log_compress: false,
        }
    }
}

impl SpectralConfig {
    pub fn dim(&self) -> usize {
        let side = 2 * self.crop_radius + 1;
        side * side
    }
}

/// Flattened `(2r+1)²` crop of the centred magnitude spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralDescriptor {
    pub crop_radius: usize,
    pub values: Vec<f64>,
}

impl SpectralDescriptor {
    pub fn side(&self) -> usize {
        2 * self.crop_radius + 1
    }
}

/// Channel mean per pixel.
pub fn to_grayscale(img: &ImageSample) -> Matrix {
    let c = img.channels;
    Matrix::from_fn(img.height, img.width, |i, j| {
        let base = (i * img.width + j) * c;
        img.pixels[base..base + c].iter().sum::<f64>() / c as f64
    })
}

fn twiddles(n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
        .collect()
}

fn dft_1d(input: &[Complex64], tw: &[Complex64], out: &mut [Complex64]) {
    let n = input.len();
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (m, x) in input.iter().enumerate() {
            acc += x * tw[(k * m) % n];
        }
        *o = acc;
    }
}

/// Row-major `H×W` complex spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Complex64>,
}

impl Spectrum {
    #[inline]
    pub fn at(&self, u: usize, v: usize) -> Complex64 {
        self.data[u * self.width + v]
    }
}

/// `F(u,v) = Σ_m Σ_n x(m,n)·exp(−j2π(um/H + vn/W))`, computed separably.
pub fn dft2d(gray: &Matrix) -> Spectrum {
    let (h, w) = gray.shape();
    let tw_w = twiddles(w);
    let tw_h = twiddles(h);
    let mut rows = vec![Complex64::new(0.0, 0.0); h * w];
    let mut buf_in = vec![Complex64::new(0.0, 0.0); w];
    for m in 0..h {
        for (b, &x) in buf_in.iter_mut().zip(gray.row(m)) {
            *b = Complex64::new(x, 0.0);
        }
        dft_1d(&buf_in, &tw_w, &mut rows[m * w..(m + 1) * w]);
    }
    let mut data = vec![Complex64::new(0.0, 0.0); h * w];
    let mut col_in = vec![Complex64::new(0.0, 0.0); h];
    let mut col_out = vec![Complex64::new(0.0, 0.0); h];
    for v in 0..w {
        for m in 0..h {
            col_in[m] = rows[m * w + v];
        }
        dft_1d(&col_in, &tw_h, &mut col_out);
        for u in 0..h {
            data[u * w + v] = col_out[u];
        }
    }
    Spectrum {
        height: h,
        width: w,
        data,
    }
}

/// Moves DC to `(⌊H/2⌋, ⌊W/2⌋)` and takes the modulus.
pub fn centered_magnitude(spectrum: &Spectrum) -> Matrix {
    let (h, w) = (spectrum.height, spectrum.width);
    let mut out = Matrix::zeros(h, w);
    for u in 0..h {
        for v in 0..w {
            out[((u + h / 2) % h, (v + w / 2) % w)] = spectrum.at(u, v).norm();
        }
    }
    out
}

pub fn extract_descriptor(img: &ImageSample, config: &SpectralConfig) -> Result<SpectralDescriptor> {
    let r = config.crop_radius;
    let side = 2 * r + 1;
    if side > img.height.min(img.width) {
        return Err(Error::CropExceedsSpectrum {
            radius: r,
            side,
            height: img.height,
            width: img.width,
        });
    }
    let mag = centered_magnitude(&dft2d(&to_grayscale(img)));
    let (cr, cc) = (img.height / 2, img.width / 2);
    let mut values = Vec::with_capacity(side * side);
    for i in cr - r..=cr + r {
        for j in cc - r..=cc + r {
            let m = mag[(i, j)];
            values.push(if config.log_compress { m.ln_1p() } else { m });
        }
    }
    Ok(SpectralDescriptor {
        crop_radius: r,
        values,
    })
}

/// Descriptors for a batch, in order.
pub fn extract_batch(images: &[ImageSample], config: &SpectralConfig) -> Result<Vec<Vec<f64>>> {
    images
        .iter()
        .map(|img| extract_descriptor(img, config).map(|d| d.values))
        .collect()
}
