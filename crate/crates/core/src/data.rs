//! Images, directory-per-class datasets and crop/flip preprocessing.
//!
//! Two codec-free image formats are read:
//!
//! * the raw container: `b"RGB8"`, width and height as little-endian
//!   `u32`, then `width·height·3` interleaved RGB bytes;
//! * binary PPM (`P6`) with a maximum value of at most 255.
//!
//! A dataset root holds one directory per split (`train`, `val`), each with
//! one directory per class. Classes and files are ordered
//! lexicographically; a class index is its rank.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RAW_MAGIC: &[u8; 4] = b"RGB8";
/// File extensions accepted by [`load_dataset`].
pub const IMAGE_EXTENSIONS: [&str; 2] = ["rgb", "ppm"];

/// ImageNet channel statistics.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// An 8-bit RGB image, interleaved, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        let expected = width
            .checked_mul(height)
            .and_then(|p| p.checked_mul(3))
            .ok_or(Error::ExtentOverflow([1, 3, height, width]))?;
        if pixels.len() != expected {
            return Err(Error::DataLength {
                shape: [1, 3, height, width],
                expected,
                got: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, pixels }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn encode_raw(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.pixels.len());
        out.extend_from_slice(RAW_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode_raw(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 12 || &bytes[..4] != RAW_MAGIC {
            return Err("not an RGB8 container".into());
        }
        let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let need = w
            .checked_mul(h)
            .and_then(|p| p.checked_mul(3))
            .ok_or("image extents overflow")?;
        let body = &bytes[12..];
        if body.len() != need {
            return Err(format!(
                "payload holds {} bytes, {w}x{h} needs {need}",
                body.len()
            ));
        }
        Ok(Self {
            width: w,
            height: h,
            pixels: body.to_vec(),
        })
    }

    pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated PPM header".into());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(format!("unsupported PPM magic `{}`", fields[0]));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PPM field `{s}`"));
        let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(format!("unsupported PPM maxval {maxval}"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let need = w.checked_mul(h).and_then(|p| p.checked_mul(3)).ok_or("image extents overflow")?;
        let body = bytes.get(pos..).unwrap_or(&[]);
        if body.len() < need {
            return Err(format!("payload holds {} bytes, {w}x{h} needs {need}", body.len()));
        }
        let pixels = body[..need]
            .iter()
            .map(|&v| if maxval == 255 { v } else { ((v as usize * 255 + maxval / 2) / maxval) as u8 })
            .collect();
        Ok(Self { width: w, height: h, pixels })
    }

    /// Reads a raw container or PPM file, chosen by its leading bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let decoded = if bytes.starts_with(RAW_MAGIC) {
            Self::decode_raw(&bytes)
        } else if bytes.starts_with(b"P6") {
            Self::decode_ppm(&bytes)
        } else {
            Err("unrecognized image format".into())
        };
        decoded.map_err(|msg| Error::Image {
            path: path.to_path_buf(),
            msg,
        })
    }

    pub fn save_raw(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_raw())?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    /// Directory name under a dataset root.
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir)? {
        out.push(e?.path());
    }
    out.sort();
    Ok(out)
}

/// Loads `root/<split>/<class>/<file>`. Files with other extensions are
/// skipped.
pub fn load_dataset(root: &Path, split: Split) -> Result<Dataset> {
    load_class_dirs(&root.join(split.dir_name()), split)
}

/// Loads a directory whose subdirectories are the classes.
pub fn load_class_dirs(dir: &Path, split: Split) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", dir.display())));
    }
    let mut class_names = Vec::new();
    let mut samples = Vec::new();
    for class_dir in sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()) {
        let label = class_names.len();
        let name = class_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let before = samples.len();
        for file in sorted_entries(&class_dir)? {
            let ext = file.extension().and_then(|e| e.to_str()).unwrap_or("");
            if !file.is_file() || !IMAGE_EXTENSIONS.contains(&ext) {
                continue;
            }
            samples.push(Sample {
                image: Image::load(&file)?,
                label,
                path: file,
            });
        }
        if samples.len() == before {
            return Err(Error::Dataset(format!("class directory {} holds no images", class_dir.display())));
        }
        class_names.push(name);
    }
    if class_names.is_empty() {
        return Err(Error::Dataset(format!("{} has no class directories", dir.display())));
    }
    Ok(Dataset {
        samples,
        class_names,
        split,
    })
}

/// Resize, crop, flip and normalization settings.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocess {
    /// Target length of the shorter side after resizing.
    pub resize: usize,
    pub crop: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            resize: 256,
            crop: 224,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

/// Keys read by [`Preprocess::from_config`].
pub const PREPROCESS_KEYS: [&str; 4] = ["resize", "crop", "mean", "std"];

impl Preprocess {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = Self::default();
        let triple = |key: &str, default: [f64; 3]| -> Result<[f64; 3]> {
            match cfg.floats(key)? {
                None => Ok(default),
                Some(v) if v.len() == 3 => Ok([v[0], v[1], v[2]]),
                Some(v) => Err(Error::Config(format!("`{key}` needs 3 values, got {}", v.len()))),
            }
        };
        let p = Self {
            resize: cfg.parse_or("resize", d.resize)?,
            crop: cfg.parse_or("crop", d.crop)?,
            mean: triple("mean", d.mean)?,
            std: triple("std", d.std)?,
        };
        if p.crop == 0 || p.resize < p.crop {
            return Err(Error::Config(format!("crop {} must be positive and at most resize {}", p.crop, p.resize)));
        }
        if p.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("std values must be positive".into()));
        }
        Ok(p)
    }

    /// One image as a `(1, 3, crop, crop)` tensor. Training draws a random
    /// crop and a horizontal flip with probability one half; evaluation
    /// takes the center crop.
    pub fn apply<R: Rng + ?Sized>(&self, image: &Image, split: Split, rng: &mut R) -> Result<Tensor<f32>> {
        let (w, h, planes) = resize_shorter(image, self.resize)?;
        if w < self.crop || h < self.crop {
            return Err(Error::Dataset(format!(
                "image {w}x{h} after resize is smaller than crop {}",
                self.crop
            )));
        }
        let (ox, oy, flip) = match split {
            Split::Train => (
                rng.random_range(0..=w - self.crop),
                rng.random_range(0..=h - self.crop),
                rng.random_bool(0.5),
            ),
            Split::Eval => ((w - self.crop) / 2, (h - self.crop) / 2, false),
        };
        let c = self.crop;
        let mut out = Tensor::zeros([1, 3, c, c]);
        let data = out.data_mut();
        for ch in 0..3 {
            let (m, s) = (self.mean[ch], self.std[ch]);
            for y in 0..c {
                for x in 0..c {
                    let sx = if flip { ox + c - 1 - x } else { ox + x };
                    let v = planes[ch][(oy + y) * w + sx] as f64 / 255.0;
                    data[(ch * c + y) * c + x] = ((v - m) / s) as f32;
                }
            }
        }
        Ok(out)
    }

    /// Maps a normalized tensor back to `[0, 1]` intensities.
    pub fn denormalize(&self, t: &Tensor<f32>) -> Tensor<f32> {
        let s = t.shape();
        let plane = s.plane();
        Tensor::from_fn(s, |i| {
            let ch = (i / plane) % s.c.max(1);
            let ch = ch.min(2);
            (t.data()[i] as f64 * self.std[ch] + self.mean[ch]) as f32
        })
    }
}

/// Bilinear resize so the shorter side equals `target`, with half-pixel
/// centers: output pixel `d` samples source coordinate
/// `(d + 0.5)·(in / out) − 0.5`, clamped to the image. Returns width,
/// height and three channel planes of unquantized intensities.
pub fn resize_shorter(image: &Image, target: usize) -> Result<(usize, usize, [Vec<f32>; 3])> {
    let (iw, ih) = (image.width, image.height);
    if iw == 0 || ih == 0 || target == 0 {
        return Err(Error::Dataset("cannot resize an empty image".into()));
    }
    let (ow, oh) = if iw <= ih {
        (target, ((ih as f64 * target as f64 / iw as f64).round() as usize).max(1))
    } else {
        (((iw as f64 * target as f64 / ih as f64).round() as usize).max(1), target)
    };
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let xs = taps(ow, iw);
    let ys = taps(oh, ih);
    let mut planes = [vec![0f32; ow * oh], vec![0f32; ow * oh], vec![0f32; ow * oh]];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let (a, b, c, d) = (image.get(x0, y0), image.get(x1, y0), image.get(x0, y1), image.get(x1, y1));
            for ch in 0..3 {
                let top = a[ch] as f32 * (1.0 - fx) + b[ch] as f32 * fx;
                let bot = c[ch] as f32 * (1.0 - fx) + d[ch] as f32 * fx;
                planes[ch][oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok((ow, oh, planes))
}

/// Stacks `(1, C, H, W)` tensors into one batch.
pub fn stack(items: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = items
        .first()
        .ok_or_else(|| Error::Dataset("cannot stack an empty batch".into()))?
        .shape();
    let mut data = Vec::with_capacity(first.len() * items.len());
    for t in items {
        t.expect_shape(first, "batch stacking")?;
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec([items.len(), first.c, first.h, first.w], data)
}
