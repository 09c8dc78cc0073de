//! Seeded synthetic food-photo corpus.
//!
//! Each visual prototype is a colored, striped texture with a bright blob;
//! images of a prototype differ by jitter and sensor-like noise. Raw labels
//! that consolidate together share a prototype, so they are near-duplicates
//! visually, as merged dishes are in real photos.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassTaxonomy, REFERENCE_RAW_LABELS};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthClass {
    pub raw_label: String,
    pub count: usize,
    pub prototype: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: Vec<SynthClass>,
    pub size: u32,
    pub seed: u64,
}

/// Deliberately small classes of the reference corpus.
pub const REFERENCE_SMALL_CLASSES: [(&str, usize); 5] =
    [("falafel", 25), ("hummus", 80), ("kabsa", 30), ("kofta", 60), ("mansaf", 45)];

/// Originals per final class outside the small ones: enough for 100+
/// training originals after a 90/10 split.
pub const REFERENCE_CLASS_SIZE: usize = 112;

impl SynthSpec {
    /// The 27 raw labels of the reference taxonomy. Every final class holds
    /// [`REFERENCE_CLASS_SIZE`] originals, split evenly over its raw labels,
    /// except the five in [`REFERENCE_SMALL_CLASSES`].
    pub fn reference(seed: u64) -> Self {
        let tax = ClassTaxonomy::reference();
        let finals = tax.final_labels();
        let mut groups: BTreeMap<String, Vec<&str>> = BTreeMap::new();
        for raw in REFERENCE_RAW_LABELS {
            groups.entry(tax.consolidate(raw)).or_default().push(raw);
        }
        let small: BTreeMap<&str, usize> = REFERENCE_SMALL_CLASSES.into_iter().collect();
        let mut classes = Vec::new();
        for (fin, raws) in &groups {
            let total = small.get(fin.as_str()).copied().unwrap_or(REFERENCE_CLASS_SIZE);
            let prototype = finals.iter().position(|f| f == fin).expect("final label");
            for (i, raw) in raws.iter().enumerate() {
                let count = total / raws.len() + usize::from(i < total % raws.len());
                classes.push(SynthClass {
                    raw_label: raw.to_string(),
                    count,
                    prototype,
                });
            }
        }
        classes.sort_by(|a, b| a.raw_label.cmp(&b.raw_label));
        Self { classes, size: 64, seed }
    }

    /// `counts` distinct classes, one prototype each.
    pub fn distinct(counts: &[(&str, usize)], size: u32, seed: u64) -> Self {
        Self {
            classes: counts
                .iter()
                .enumerate()
                .map(|(i, (l, n))| SynthClass {
                    raw_label: l.to_string(),
                    count: *n,
                    prototype: i,
                })
                .collect(),
            size,
            seed,
        }
    }

    pub fn total(&self) -> usize {
        self.classes.iter().map(|c| c.count).sum()
    }
}

struct Prototype {
    color: [f32; 3],
    stripe: [f32; 3],
    angle: f32,
    freq: f32,
    blob: (f32, f32),
}

fn prototype(p: usize) -> Prototype {
    // Hues walk the color wheel by the golden angle; everything else cycles
    // on small coprime periods so neighbouring prototypes differ on several
    // axes at once.
    let hue = (p as f32 * 137.508).rem_euclid(360.0);
    let light = [0.35, 0.55, 0.75][p % 3];
    let color = hsl(hue, 0.7, light);
    let stripe = hsl((hue + 180.0).rem_euclid(360.0), 0.6, 1.0 - light);
    Prototype {
        color,
        stripe,
        angle: (p % 4) as f32 * std::f32::consts::FRAC_PI_4,
        freq: [0.15, 0.3, 0.5, 0.8, 1.1][p % 5],
        blob: ([0.3, 0.5, 0.7][p % 3], [0.35, 0.65][p % 2]),
    }
}

fn hsl(h: f32, s: f32, l: f32) -> [f32; 3] {
    let c = (1.0 - (2.0 * l - 1.0).abs()) * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

/// One image of `class`, number `index`.
pub fn render(spec: &SynthSpec, class: &SynthClass, index: usize) -> RgbImage {
    let proto = prototype(class.prototype);
    let mut rng = seed::rng(spec.seed, &["synth", &class.raw_label, &index.to_string()]);
    let shade: f32 = rng.random_range(-18.0..18.0);
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let angle = proto.angle + rng.random_range(-0.15..0.15);
    let (bx, by) = (
        proto.blob.0 + rng.random_range(-0.08..0.08),
        proto.blob.1 + rng.random_range(-0.08..0.08),
    );
    let radius = rng.random_range(0.12..0.2f32);
    let noise = Normal::new(0.0f32, 6.0).expect("valid sigma");
    let n = spec.size as f32;
    let (sin, cos) = angle.sin_cos();
    RgbImage::from_fn(spec.size, spec.size, |x, y| {
        let (u, v) = (x as f32 / n, y as f32 / n);
        let t = 0.5 + 0.5 * ((u * cos + v * sin) * n * proto.freq + phase).sin();
        let d2 = (u - bx).powi(2) + (v - by).powi(2);
        let blob = (-d2 / (radius * radius)).exp();
        let mut px = [0u8; 3];
        for c in 0..3 {
            let base = proto.color[c] * (1.0 - t) + proto.stripe[c] * t;
            let val = base * (1.0 - blob) + 245.0 * blob + shade + noise.sample(&mut rng);
            px[c] = val.round().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    })
}

/// Writes `<root>/<raw_label>/<raw_label>_NNNN.png` for every class.
pub fn generate(root: impl AsRef<Path>, spec: &SynthSpec) -> std::io::Result<usize> {
    let root = root.as_ref();
    let mut written = 0;
    for class in &spec.classes {
        let dir = root.join(&class.raw_label);
        std::fs::create_dir_all(&dir)?;
        for i in 0..class.count {
            let img = render(spec, class, i);
            img.save_with_format(dir.join(format!("{}_{i:04}.png", class.raw_label)), image::ImageFormat::Png)
                .map_err(std::io::Error::other)?;
            written += 1;
        }
    }
    Ok(written)
}
