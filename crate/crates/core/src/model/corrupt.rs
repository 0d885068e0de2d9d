//! Distribution-shift transforms: additive Gaussian noise, Gaussian blur
//! and rotation about the image centre.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::synth::Image;
use super::ModelError;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    GaussianNoise,
    Blur,
    Rotation,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 3] = [CorruptionKind::GaussianNoise, CorruptionKind::Blur, CorruptionKind::Rotation];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::Blur => "blur",
            CorruptionKind::Rotation => "rotation",
        }
    }

    /// Nonzero severities: noise σ, blur kernel size, rotation degrees.
    pub fn grid(self) -> [f64; 3] {
        match self {
            CorruptionKind::GaussianNoise => [0.1, 0.2, 0.4],
            CorruptionKind::Blur => [3.0, 5.0, 7.0],
            CorruptionKind::Rotation => [45.0, 90.0, 135.0],
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| ModelError::UnknownCorruption(s.to_string()))
    }
}

/// A kind together with a severity; severity 0 is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub severity: f64,
}

impl Corruption {
    pub fn new(kind: CorruptionKind, severity: f64) -> Result<Self, ModelError> {
        if severity != 0.0 && !kind.grid().contains(&severity) {
            return Err(ModelError::Severity { kind: kind.name(), severity });
        }
        Ok(Self { kind, severity })
    }

    /// Every grid cell, kind-major.
    pub fn full_grid() -> Vec<Corruption> {
        CorruptionKind::ALL.iter().flat_map(|&kind| kind.grid().map(|severity| Corruption { kind, severity })).collect()
    }

    pub fn label(&self) -> String {
        format!("{}:{}", self.kind, self.severity)
    }
}

/// Apply a corruption. `seed` only affects the noise kind.
pub fn corrupt(image: &Image, kind: CorruptionKind, severity: f64, seed: u64) -> Result<Image, ModelError> {
    let c = Corruption::new(kind, severity)?;
    if c.severity == 0.0 {
        return Ok(image.clone());
    }
    Ok(match kind {
        CorruptionKind::GaussianNoise => add_noise(image, severity, seed),
        CorruptionKind::Blur => blur(image, severity as usize),
        CorruptionKind::Rotation => rotate(image, severity),
    })
}

fn add_noise(image: &Image, sigma: f64, seed: u64) -> Image {
    let normal = Normal::new(0.0, sigma).expect("grid sigma is positive");
    let mut rng = seed::rng(seed);
    let mut out = image.clone();
    for v in &mut out.data {
        *v += normal.sample(&mut rng);
    }
    out
}

/// Normalised Gaussian taps with the conventional size-derived σ.
fn gaussian_kernel(size: usize) -> Vec<f64> {
    let sigma = 0.3 * ((size as f64 - 1.0) / 2.0 - 1.0) + 0.8;
    let half = (size / 2) as f64;
    let taps: Vec<f64> = (0..size).map(|i| (-(i as f64 - half).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable blur with replicated borders.
pub(crate) fn blur(image: &Image, size: usize) -> Image {
    let k = gaussian_kernel(size);
    let half = (size / 2) as isize;
    let (h, w) = (image.height as isize, image.width as isize);
    let at = |data: &[f64], r: isize, c: isize| data[(r.clamp(0, h - 1) * w + c.clamp(0, w - 1)) as usize];
    let mut tmp = vec![0.0; image.data.len()];
    for r in 0..h {
        for c in 0..w {
            tmp[(r * w + c) as usize] = k.iter().enumerate().map(|(i, t)| t * at(&image.data, r, c + i as isize - half)).sum();
        }
    }
    let mut out = vec![0.0; tmp.len()];
    for r in 0..h {
        for c in 0..w {
            out[(r * w + c) as usize] = k.iter().enumerate().map(|(i, t)| t * at(&tmp, r + i as isize - half, c)).sum();
        }
    }
    Image { height: image.height, width: image.width, data: out }
}

/// Counter-clockwise rotation about the centre. Quarter turns of square
/// images are exact index permutations; other angles use bilinear
/// sampling with zero outside the source.
fn rotate(image: &Image, degrees: f64) -> Image {
    let (h, w) = (image.height, image.width);
    let quarter = degrees / 90.0;
    if h == w && quarter.fract() == 0.0 {
        let mut out = image.clone();
        for _ in 0..(quarter as i64).rem_euclid(4) {
            let src = out.data.clone();
            for r in 0..h {
                for c in 0..w {
                    // ccw quarter turn: destination (r, c) reads source (c, w-1-r)
                    out.data[r * w + c] = src[c * w + (w - 1 - r)];
                }
            }
        }
        return out;
    }
    let (s, co) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let sample = |y: f64, x: f64| -> f64 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let mut acc = 0.0;
        for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
            for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                let (r, c) = (y0 + dy, x0 + dx);
                if r >= 0.0 && c >= 0.0 && (r as usize) < h && (c as usize) < w {
                    acc += wy * wx * image.data[r as usize * w + c as usize];
                }
            }
        }
        acc
    };
    let mut data = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (dy, dx) = (r as f64 - cy, c as f64 - cx);
            // inverse map of a ccw rotation (row axis points down)
            let sy = cy + co * dy + s * dx;
            let sx = cx - s * dy + co * dx;
            data[r * w + c] = sample(sy, sx);
        }
    }
    Image { height: h, width: w, data }
}
