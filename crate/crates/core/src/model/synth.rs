//! Synthetic ordinal imaging data.
//!
//! Each image is a stylised joint: two bright bone regions separated by a
//! dark horizontal gap. On the left (medial) half the gap narrows linearly
//! with a continuous latent severity; the right (lateral) half keeps a
//! constant gap. A marginal blob brightens with severity. Pixel edges are
//! anti-aliased, so the gap width is readable at sub-pixel precision and
//! the grade of a clean image can be recovered exactly by
//! [`SyntheticSpec::infer_grade`].

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::corrupt::blur;
use super::ModelError;
use crate::memory::NUM_GRADES;
use crate::par::Exec;
use crate::seed;

/// Bone intensity of a clean image.
pub const BONE_LEVEL: f64 = 0.8;

/// Square grayscale image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if data.len() != height * width || height == 0 || width == 0 {
            return Err(ModelError::Config(format!("image data of length {} does not fill {height}×{width}", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub size: usize,
    /// Medial gap width (pixels) at latent severity 0.
    pub gap_grade0: f64,
    /// Medial gap width (pixels) at latent severity 4.
    pub gap_grade4: f64,
    pub lateral_gap: f64,
    /// Blob amplitude at severity 4.
    pub osteophyte_max: f64,
    /// Pixel noise of a normal-quality image.
    pub noise_sigma: f64,
    /// Fraction of images acquired at poor quality.
    pub poor_fraction: f64,
    /// Noise multiplier for poor-quality images.
    pub poor_noise_factor: f64,
    /// Odd Gaussian kernel size blurring poor-quality images before noise
    /// is added; 1 disables the blur.
    pub poor_blur: usize,
    /// Poor-quality images keep the bone level but their dark structures
    /// are faded to this fraction of full contrast.
    pub poor_contrast: f64,
    /// Mean probability that a label is moved to an adjacent grade.
    pub flip_prob: f64,
    /// Concentrate flips near grade boundaries: the flip probability grows
    /// linearly with the latent offset from the grade centre (same mean).
    pub boundary_flips: bool,
    /// Latent severity is drawn uniformly from `grade ± latent_jitter`.
    pub latent_jitter: f64,
    /// Vertical joint-line jitter (pixels, ±).
    pub line_jitter: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            size: 32,
            gap_grade0: 7.0,
            gap_grade4: 1.0,
            lateral_gap: 7.0,
            osteophyte_max: 0.6,
            noise_sigma: 0.2,
            poor_fraction: 0.2,
            poor_noise_factor: 1.0,
            poor_blur: 7,
            poor_contrast: 0.25,
            flip_prob: 0.1,
            boundary_flips: true,
            latent_jitter: 0.45,
            line_jitter: 1.5,
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            seed: 20_240_607,
        }
    }
}

/// One generated example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    /// Observed (possibly flipped) label.
    pub grade: usize,
    /// Grade before label noise.
    pub true_grade: usize,
    pub latent: f64,
    /// Whether the image was degraded to poor quality.
    pub poor_quality: bool,
    pub image: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.size < 8 || self.size % 2 != 0 {
            return bad("image size must be even and at least 8");
        }
        if !(self.gap_grade0 > self.gap_grade4 && self.gap_grade4 > 0.0) {
            return bad("gap widths must be positive and strictly decreasing in grade");
        }
        if !(0.0..0.5).contains(&self.flip_prob) {
            return bad("flip probability must lie in [0, 0.5)");
        }
        if !(0.0..0.5).contains(&self.latent_jitter) {
            return bad("latent jitter must lie in [0, 0.5)");
        }
        if !(0.0..=1.0).contains(&self.poor_fraction) || !(self.poor_noise_factor >= 1.0) {
            return bad("poor-quality fraction must lie in [0, 1] and its noise factor be at least 1");
        }
        if !(self.poor_contrast > 0.0 && self.poor_contrast <= 1.0) {
            return bad("poor-quality contrast must lie in (0, 1]");
        }
        if self.poor_blur % 2 == 0 {
            return bad("poor-quality blur kernel must be odd");
        }
        if !(self.noise_sigma >= 0.0) || !(self.line_jitter >= 0.0) || !(self.osteophyte_max >= 0.0) {
            return bad("noise, line jitter and blob amplitude must be nonnegative");
        }
        let widest = self.medial_gap(-self.latent_jitter).max(self.lateral_gap);
        if widest + 2.0 * self.line_jitter + 4.0 > self.size as f64 {
            return bad("gap does not fit inside the image");
        }
        Ok(())
    }

    /// Medial gap width at a latent severity.
    pub fn medial_gap(&self, severity: f64) -> f64 {
        self.gap_grade0 - (self.gap_grade0 - self.gap_grade4) * severity / 4.0
    }

    /// Medial and lateral columns read by [`Self::infer_grade`]. Both are
    /// far from the marginal blob and from the compartment boundary.
    pub fn probe_columns(&self) -> (usize, usize) {
        (self.size / 2 - 4, self.size / 2 + 4)
    }

    /// Render a clean image for a latent severity and joint-line offset.
    pub fn render(&self, severity: f64, line_offset: f64) -> Image {
        let s = self.size;
        let centre = s as f64 / 2.0 + line_offset;
        let medial = self.medial_gap(severity);
        let blob_amp = self.osteophyte_max * (severity / 4.0).max(0.0);
        let (blob_r, blob_c, blob_sd) = (centre, 1.0, 1.5);
        let mut data = vec![0.0; s * s];
        for r in 0..s {
            for c in 0..s {
                let gap = if c < s / 2 { medial } else { self.lateral_gap };
                let dark = overlap(r as f64, r as f64 + 1.0, centre - gap / 2.0, centre + gap / 2.0);
                let mut v = BONE_LEVEL * (1.0 - dark);
                if c < s / 2 {
                    let dr = r as f64 + 0.5 - blob_r;
                    let dc = c as f64 + 0.5 - blob_c;
                    v += blob_amp * (-(dr * dr + dc * dc) / (2.0 * blob_sd * blob_sd)).exp();
                }
                data[r * s + c] = v;
            }
        }
        Image { height: s, width: s, data }
    }

    /// Invert the generator on a noiseless image: read the medial gap
    /// width from the medial probe column, using the lateral gap (of known
    /// width) to undo any contrast fading, and map it back to a grade.
    pub fn infer_grade(&self, image: &Image) -> usize {
        let (medial, lateral) = self.probe_columns();
        let darkness = |col: usize| -> f64 { (0..image.height).map(|r| (BONE_LEVEL - image.get(r, col)) / BONE_LEVEL).sum() };
        let contrast = darkness(lateral) / self.lateral_gap;
        let dark = darkness(medial) / contrast;
        let severity = 4.0 * (self.gap_grade0 - dark) / (self.gap_grade0 - self.gap_grade4);
        severity.round().clamp(0.0, (NUM_GRADES - 1) as f64) as usize
    }

    fn sample(&self, split: Split, index: usize) -> Sample {
        let mut rng = seed::rng(seed::derive_indexed(self.seed, &format!("gen/{}", split.name()), index as u64));
        let true_grade = index % NUM_GRADES;
        let offset = if self.latent_jitter > 0.0 {
            rng.random_range(-self.latent_jitter..self.latent_jitter)
        } else {
            0.0
        };
        let latent = true_grade as f64 + offset;
        let line = if self.line_jitter > 0.0 { rng.random_range(-self.line_jitter..self.line_jitter) } else { 0.0 };
        let mut image = self.render(latent, line);
        let poor = rng.random::<f64>() < self.poor_fraction;
        if poor {
            if self.poor_blur > 1 {
                image = blur(&image, self.poor_blur);
            }
            for v in &mut image.data {
                *v = BONE_LEVEL - self.poor_contrast * (BONE_LEVEL - *v);
            }
        }
        let sigma = if poor { self.noise_sigma * self.poor_noise_factor } else { self.noise_sigma };
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("valid sigma");
            for v in &mut image.data {
                *v += normal.sample(&mut rng);
            }
        }
        let flip: f64 = rng.random();
        let weight = if self.boundary_flips && self.latent_jitter > 0.0 {
            // Edge grades only have one neighbour, so only the offset toward
            // it counts; the factor 4 keeps the mean weight at 1.
            match true_grade {
                0 => 4.0 * offset.max(0.0) / self.latent_jitter,
                g if g == NUM_GRADES - 1 => 4.0 * (-offset).max(0.0) / self.latent_jitter,
                _ => 2.0 * offset.abs() / self.latent_jitter,
            }
        } else {
            1.0
        };
        let grade = if flip < self.flip_prob * weight {
            match true_grade {
                0 => 1,
                g if g == NUM_GRADES - 1 => g - 1,
                g if latent >= g as f64 => g + 1,
                g => g - 1,
            }
        } else {
            true_grade
        };
        Sample { id: index, grade, true_grade, latent, poor_quality: poor, image }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    /// Generate one split. Grades cycle `0,1,2,3,4,…` so every split is
    /// class-balanced; each item has its own derived seed.
    pub fn generate_split(&self, split: Split, exec: Exec) -> Result<Vec<Sample>, ModelError> {
        self.validate()?;
        Ok(exec.map_range(self.count(split), |i| self.sample(split, i)))
    }
}

/// Generate all three splits.
pub fn generate_dataset(spec: &SyntheticSpec, exec: Exec) -> Result<Dataset, ModelError> {
    Ok(Dataset {
        spec: spec.clone(),
        train: spec.generate_split(Split::Train, exec)?,
        val: spec.generate_split(Split::Val, exec)?,
        test: spec.generate_split(Split::Test, exec)?,
    })
}
