//! Kernel ranking by weight magnitude and grid rendering.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const RANKING_HEADER: &str = "rank,kernel_index,aggregate_magnitude";

/// How a kernel's `k_i·f²` weights are reduced to one magnitude.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregate {
    #[default]
    L1,
    L2,
}

impl FromStr for Aggregate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Aggregate::L1),
            "l2" => Ok(Aggregate::L2),
            _ => Err(Error::Config(format!("unknown aggregate `{s}` (expected l1 or l2)"))),
        }
    }
}

impl fmt::Display for Aggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Aggregate::L1 => "l1",
            Aggregate::L2 => "l2",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelRanking {
    pub layer: String,
    pub aggregate: Aggregate,
    /// `(kernel index, magnitude)`, largest first, ties by ascending index.
    pub entries: Vec<(usize, f64)>,
}

impl KernelRanking {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{RANKING_HEADER}\n");
        for (rank, (k, m)) in self.entries.iter().enumerate() {
            s.push_str(&format!("{},{k},{m}\n", rank + 1));
        }
        s
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }
}

pub fn kernel_magnitude<T: Scalar>(weights: &[T], agg: Aggregate) -> f64 {
    match agg {
        Aggregate::L1 => weights.iter().map(|v| v.as_f64().abs()).sum(),
        Aggregate::L2 => weights.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt(),
    }
}

/// Ranks the kernels of a `(K, k_i, f, f)` tensor and keeps the first
/// `count` (all of them when fewer exist).
pub fn rank_kernels<T: Scalar>(layer: &str, kernels: &Tensor<T>, agg: Aggregate, count: usize) -> KernelRanking {
    let s = kernels.shape();
    let mut entries: Vec<(usize, f64)> = (0..s.n).map(|k| (k, kernel_magnitude(kernels.sample(k), agg))).collect();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    entries.truncate(count);
    KernelRanking {
        layer: layer.to_string(),
        aggregate: agg,
        entries,
    }
}

/// An 8-bit grayscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Binary PGM (`P5`).
    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_pgm())?;
        Ok(())
    }
}

/// Channel-summed `f×f` slice of one kernel, min-max scaled to `0..=255`.
/// A constant slice maps to 128.
pub fn kernel_tile<T: Scalar>(kernels: &Tensor<T>, k: usize) -> Vec<u8> {
    let s = kernels.shape();
    let plane = s.plane();
    let w = kernels.sample(k);
    let summed: Vec<f64> = (0..plane)
        .map(|i| (0..s.c).map(|c| w[c * plane + i].as_f64()).sum())
        .collect();
    let lo = summed.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = summed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; plane];
    }
    summed
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

/// Tiles the selected kernels row by row on a `⌈√count⌉`-square grid with
/// one-pixel black separators. Unused cells stay black.
pub fn kernel_grid<T: Scalar>(kernels: &Tensor<T>, indices: &[usize]) -> GrayImage {
    let s = kernels.shape();
    let side = (indices.len() as f64).sqrt().ceil() as usize;
    let side = side.max(1);
    let (fh, fw) = (s.h, s.w);
    let width = side * fw + side - 1;
    let height = side * fh + side - 1;
    let mut pixels = vec![0u8; width * height];
    for (slot, &k) in indices.iter().enumerate() {
        let (gy, gx) = (slot / side, slot % side);
        let tile = kernel_tile(kernels, k);
        for y in 0..fh {
            let row = (gy * (fh + 1) + y) * width + gx * (fw + 1);
            pixels[row..row + fw].copy_from_slice(&tile[y * fw..(y + 1) * fw]);
        }
    }
    GrayImage { width, height, pixels }
}
