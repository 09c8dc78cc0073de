//! Sequential randomized augmentation: flip, crop, noise, affine, contrast.
//!
//! Every sampled parameter lives in an [`AugmentationRecipe`], so an output
//! image is a pure function of (input image, recipe).

mod materialize;
mod plan;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::imaging::PlanarImage;

pub use materialize::{materialize, AugmentReport, Materialized, DONE_JOURNAL, PLAN_JOURNAL};
pub use plan::{plan, Plan, PlanItem};

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("crop rectangle {0:?} leaves the unit square")]
    CropOutOfBounds(CropRect),
    #[error("image has zero width or height")]
    EmptyImage,
    #[error("existing plan journal at {0} belongs to a different plan")]
    JournalMismatch(std::path::PathBuf),
    #[error("journal line {line}: {source}")]
    Journal { line: usize, source: serde_json::Error },
    #[error("{path}: {source}")]
    Image { path: String, source: image::ImageError },
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = AugmentError> = std::result::Result<T, E>;

/// Parameter ranges and the deficiency rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    /// Classes with fewer training originals than this are topped up.
    pub class_threshold: usize,
    pub target_count: usize,
    pub flip_probability: f64,
    /// Fraction of the image area kept by the crop.
    pub crop_area: (f64, f64),
    /// Noise standard deviation on the 0-255 scale.
    pub noise_sigma: (f64, f64),
    pub max_rotation_deg: f64,
    /// Per-axis translation as a fraction of the image size.
    pub max_translation: f64,
    pub scale: (f64, f64),
    pub contrast: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            class_threshold: 100,
            target_count: 100,
            flip_probability: 0.5,
            crop_area: (0.8, 1.0),
            noise_sigma: (2.0, 12.0),
            max_rotation_deg: 15.0,
            max_translation: 0.1,
            scale: (0.9, 1.1),
            contrast: (0.7, 1.3),
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f64, f64), min: f64| {
            if !(lo >= min && lo <= hi && hi.is_finite()) {
                Err(AugmentError::Policy(format!("{name} range ({lo}, {hi}) is invalid")))
            } else {
                Ok(())
            }
        };
        if self.class_threshold == 0 {
            return Err(AugmentError::Policy("class_threshold must be at least 1".into()));
        }
        if self.target_count < self.class_threshold {
            return Err(AugmentError::Policy(format!(
                "target_count {} is below class_threshold {}",
                self.target_count, self.class_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(AugmentError::Policy("flip_probability outside [0, 1]".into()));
        }
        range("crop_area", self.crop_area, f64::MIN_POSITIVE)?;
        if self.crop_area.1 > 1.0 {
            return Err(AugmentError::Policy("crop_area above 1".into()));
        }
        range("noise_sigma", self.noise_sigma, 0.0)?;
        range("scale", self.scale, f64::MIN_POSITIVE)?;
        range("contrast", self.contrast, 0.0)?;
        range("rotation", (0.0, self.max_rotation_deg), 0.0)?;
        range("translation", (0.0, self.max_translation), 0.0)?;
        Ok(())
    }

    /// Draws one recipe from `rng`.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> AugmentationRecipe {
        let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if lo < hi { rng.random_range(lo..hi) } else { lo };
        let flip = rng.random_bool(self.flip_probability);
        let side = uniform(rng, self.crop_area).sqrt();
        let crop = CropRect {
            x: uniform(rng, (0.0, 1.0 - side)) as f32,
            y: uniform(rng, (0.0, 1.0 - side)) as f32,
            w: side as f32,
            h: side as f32,
        };
        let noise = NoiseSpec {
            sigma: uniform(rng, self.noise_sigma) as f32,
            seed: rng.random(),
        };
        let r = self.max_rotation_deg;
        let angle = uniform(rng, (-r, r)).to_radians();
        let t = self.max_translation;
        let (tx, ty) = (uniform(rng, (-t, t)), uniform(rng, (-t, t)));
        let s = uniform(rng, self.scale);
        let (sin, cos) = angle.sin_cos();
        let affine = [
            [(s * cos) as f32, (-s * sin) as f32, tx as f32],
            [(s * sin) as f32, (s * cos) as f32, ty as f32],
        ];
        AugmentationRecipe {
            flip,
            crop,
            noise,
            affine,
            contrast: uniform(rng, self.contrast) as f32,
        }
    }
}

/// Crop window in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl CropRect {
    pub const FULL: Self = Self {
        x: 0.0,
        y: 0.0,
        w: 1.0,
        h: 1.0,
    };

    fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x >= 0.0 && self.y >= 0.0 && self.x + self.w <= 1.0 + 1e-6 && self.y + self.h <= 1.0 + 1e-6
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f32,
    pub seed: u64,
}

/// Concrete parameters for one augmented image.
///
/// The affine matrix maps output to source-relative positions around the image
/// center: `[a b tx; c d ty]`, with the linear part in pixels and the
/// translation as a fraction of width and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecipe {
    pub flip: bool,
    pub crop: CropRect,
    pub noise: NoiseSpec,
    pub affine: [[f32; 3]; 2],
    pub contrast: f32,
}

pub const IDENTITY_AFFINE: [[f32; 3]; 2] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];

impl AugmentationRecipe {
    pub fn identity() -> Self {
        Self {
            flip: false,
            crop: CropRect::FULL,
            noise: NoiseSpec { sigma: 0.0, seed: 0 },
            affine: IDENTITY_AFFINE,
            contrast: 1.0,
        }
    }

    pub fn flip_only() -> Self {
        Self {
            flip: true,
            ..Self::identity()
        }
    }
}

fn flip(img: &mut PlanarImage) {
    let w = img.width();
    for c in 0..3 {
        for row in img.plane_mut(c).chunks_exact_mut(w) {
            row.reverse();
        }
    }
}

fn add_noise(img: &mut PlanarImage, spec: NoiseSpec) {
    let normal = Normal::new(0.0f32, spec.sigma).expect("finite sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for v in img.data_mut() {
        *v = (*v + normal.sample(&mut rng)).clamp(0.0, 255.0);
    }
}

fn affine(img: &PlanarImage, m: [[f32; 3]; 2]) -> PlanarImage {
    let (w, h) = (img.width(), img.height());
    let (a, b, c, d) = (m[0][0], m[0][1], m[1][0], m[1][1]);
    let det = a * d - b * c;
    let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
    let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
    let (tx, ty) = (m[0][2] * w as f32, m[1][2] * h as f32);
    let mut out = PlanarImage::new(w, h);
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let px = x as f32 + 0.5 - cx - tx;
                let py = y as f32 + 0.5 - cy - ty;
                let sx = ia * px + ib * py + cx - 0.5;
                let sy = ic * px + id * py + cy - 0.5;
                let v = img.sample(ch, sx, sy);
                out.plane_mut(ch)[y * w + x] = v;
            }
        }
    }
    out
}

fn contrast(img: &mut PlanarImage, factor: f32) {
    let n = img.data().len() as f64;
    let mean = (img.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n) as f32;
    for v in img.data_mut() {
        *v = (mean + (*v - mean) * factor).clamp(0.0, 255.0);
    }
}

/// Applies the recipe in the fixed order flip → crop → noise → affine →
/// contrast. Output keeps the input size; values are clamped to [0, 255].
pub fn apply(image: &RgbImage, recipe: &AugmentationRecipe) -> Result<RgbImage> {
    if image.width() == 0 || image.height() == 0 {
        return Err(AugmentError::EmptyImage);
    }
    if !recipe.crop.is_valid() {
        return Err(AugmentError::CropOutOfBounds(recipe.crop));
    }
    let mut img = PlanarImage::from_rgb(image);
    let (w, h) = (img.width(), img.height());
    if recipe.flip {
        flip(&mut img);
    }
    if recipe.crop != CropRect::FULL {
        let r = recipe.crop;
        let rect = (r.x * w as f32, r.y * h as f32, r.w * w as f32, r.h * h as f32);
        img = img.crop_resize(rect, w, h);
    }
    if recipe.noise.sigma > 0.0 {
        add_noise(&mut img, recipe.noise);
    }
    if recipe.affine != IDENTITY_AFFINE {
        img = affine(&img, recipe.affine);
    }
    if recipe.contrast != 1.0 {
        contrast(&mut img, recipe.contrast);
    }
    Ok(img.to_rgb())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 13 % 256) as u8, (y * 29 % 256) as u8, ((x + y) * 7 % 256) as u8]))
    }

    #[test]
    fn flip_is_an_involution() {
        let img = pattern(17, 9);
        let once = apply(&img, &AugmentationRecipe::flip_only()).unwrap();
        assert_ne!(once, img);
        assert_eq!(apply(&once, &AugmentationRecipe::flip_only()).unwrap(), img);
    }

    #[test]
    fn identity_recipe_is_identity() {
        let img = pattern(12, 20);
        assert_eq!(apply(&img, &AugmentationRecipe::identity()).unwrap(), img);
    }

    #[test]
    fn affine_identity_matrix_is_exact_even_when_evaluated() {
        let img = PlanarImage::from_rgb(&pattern(10, 7));
        assert_eq!(affine(&img, IDENTITY_AFFINE), img);
    }

    #[test]
    fn bad_crop_rejected() {
        let mut r = AugmentationRecipe::identity();
        r.crop = CropRect {
            x: 0.5,
            y: 0.0,
            w: 0.6,
            h: 0.5,
        };
        assert!(matches!(apply(&pattern(4, 4), &r), Err(AugmentError::CropOutOfBounds(_))));
        assert!(matches!(apply(&RgbImage::new(0, 3), &AugmentationRecipe::identity()), Err(AugmentError::EmptyImage)));
    }

    #[test]
    fn sampled_recipes_stay_in_range() {
        let p = AugmentationPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let r = p.sample(&mut rng);
            assert!(r.crop.is_valid());
            let area = f64::from(r.crop.w * r.crop.h);
            assert!((0.8 - 1e-5..=1.0 + 1e-5).contains(&area));
            assert!((2.0..=12.0).contains(&r.noise.sigma));
            assert!((0.7..=1.3).contains(&r.contrast));
            assert!(r.affine[0][2].abs() <= 0.1 && r.affine[1][2].abs() <= 0.1);
            let det = r.affine[0][0] * r.affine[1][1] - r.affine[0][1] * r.affine[1][0];
            assert!((0.81 - 1e-4..=1.21 + 1e-4).contains(&det));
        }
    }

    #[test]
    fn policy_validation() {
        assert!(AugmentationPolicy::default().validate().is_ok());
        let p = AugmentationPolicy {
            target_count: 50,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let p = AugmentationPolicy {
            class_threshold: 0,
            target_count: 0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
