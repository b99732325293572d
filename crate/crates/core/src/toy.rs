//! Synthetic three-class shape dataset: circles, crosses and squares drawn
//! at random positions, sizes and colors on noisy backgrounds.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Image, Sample, Split};
use crate::error::Result;

pub const TOY_CLASSES: [&str; 3] = ["circle", "cross", "square"];

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    /// Total images over all classes and both splits.
    pub images: usize,
    pub size: usize,
    /// Fraction of each class held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            images: 600,
            size: 64,
            val_fraction: 0.2,
            seed: 7,
        }
    }
}

/// Draws one image of class `label`.
pub fn draw_shape<R: Rng>(label: usize, size: usize, rng: &mut R) -> Image {
    let bg = rng.random_range(0..80u8);
    let mut img = Image::filled(size, size, [bg, bg, bg]);
    for p in img.pixels.iter_mut() {
        *p = p.saturating_add(rng.random_range(0..24));
    }
    let s = size as f64;
    let radius = rng.random_range(0.18 * s..0.32 * s);
    let cx = rng.random_range(radius + 1.0..s - radius - 1.0);
    let cy = rng.random_range(radius + 1.0..s - radius - 1.0);
    let thick = rng.random_range(0.07 * s..0.12 * s);
    let color = [
        rng.random_range(140..=255u8),
        rng.random_range(140..=255u8),
        rng.random_range(140..=255u8),
    ];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let inside = match label {
                0 => (dx * dx + dy * dy).sqrt() <= radius,
                1 => (dx.abs() <= thick / 2.0 && dy.abs() <= radius) || (dy.abs() <= thick / 2.0 && dx.abs() <= radius),
                _ => dx.abs() <= radius * 0.8 && dy.abs() <= radius * 0.8,
            };
            if inside {
                img.put(x, y, color);
            }
        }
    }
    img
}

/// Generates both splits in memory, balanced across classes.
pub fn generate(cfg: &ToyConfig) -> (Dataset, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_class = cfg.images / TOY_CLASSES.len();
    let n_val = (per_class as f64 * cfg.val_fraction).round() as usize;
    let names: Vec<String> = TOY_CLASSES.iter().map(|s| s.to_string()).collect();
    let mut train = Dataset {
        samples: Vec::new(),
        class_names: names.clone(),
        split: Split::Train,
    };
    let mut val = Dataset {
        samples: Vec::new(),
        class_names: names,
        split: Split::Eval,
    };
    for (label, class) in TOY_CLASSES.iter().enumerate() {
        for i in 0..per_class {
            let image = draw_shape(label, cfg.size, &mut rng);
            let (set, dir) = if i < per_class - n_val { (&mut train, "train") } else { (&mut val, "val") };
            set.samples.push(Sample {
                image,
                label,
                path: format!("{dir}/{class}/{i:04}.rgb").into(),
            });
        }
    }
    (train, val)
}

/// Writes the dataset under `root/{train,val}/<class>/NNNN.rgb`.
pub fn write_toy(root: &Path, cfg: &ToyConfig) -> Result<(Dataset, Dataset)> {
    let (train, val) = generate(cfg);
    for s in train.samples.iter().chain(&val.samples) {
        let path = root.join(&s.path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        s.image.save_raw(&path)?;
    }
    Ok((train, val))
}
