//! Shared inputs for the kernel benchmarks.

use msshare_core::Tensor;

/// Deterministic values in `[-1, 1)` from a 64-bit LCG, so benchmark runs
/// see identical data without pulling in an RNG.
pub fn filled(shape: [usize; 4], seed: u64) -> Tensor<f32> {
    let mut s = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    Tensor::from_fn(shape, |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 40) as f32 / (1u32 << 24) as f32) * 2.0 - 1.0
    })
}

/// A mid-network block: batch 8, 64 channels, 28×28.
pub struct ConvCase {
    pub input: Tensor<f32>,
    pub kernels: Tensor<f32>,
    pub shared: Tensor<f32>,
}

impl ConvCase {
    pub fn new(channels: usize, size: usize) -> Self {
        Self {
            input: filled([8, channels, size, size], 1),
            kernels: filled([channels, channels, 3, 3], 2),
            shared: filled([channels / 2, channels, 3, 3], 3),
        }
    }
}

impl Default for ConvCase {
    fn default() -> Self {
        Self::new(64, 28)
    }
}
