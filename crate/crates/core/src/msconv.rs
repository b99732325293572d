//! Multi-scale convolution with kernels shared across dilation rates.
//!
//! One kernel tensor of `k_o / n` filters is applied at each rate in
//! `rates` (by default `1..=n`). The per-rate outputs are concatenated along
//! channels in the order of `rates`, so rate 1 owns the lowest channel
//! indices. The weight gradient used for the update is the arithmetic mean
//! of the per-rate gradients:
//!
//! ```text
//! out_k   = conv(input, w, rate = k)            k = 1..n
//! Δ_k     = ∂L/∂out_k · ∂out_k/∂w
//! Δ       = (1/n) · Σ_k Δ_k
//! w      ← w − η Δ
//! ```
//!
//! The mean is the tied-weight (summed) gradient scaled by `1/n`. Per-rate
//! padding `r·(f − 1)/2` keeps every branch at the same spatial size.

use crate::error::{Error, Result};
use crate::ops::{conv2d_backward, conv2d_forward, conv2d_macs, conv2d_output_shape};
use crate::tensor::{ConvGeometry, Scalar, Shape, Tensor};

/// Configuration of one multi-scale layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SharedMultiScaleConvSpec {
    pub in_channels: usize,
    /// Total output channels across all rates.
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Dilation rate of each branch, in channel order.
    pub rates: Vec<usize>,
}

impl SharedMultiScaleConvSpec {
    /// Spec with rates `1..=n`.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        n: usize,
        stride: usize,
    ) -> Result<Self> {
        Self::with_rates(in_channels, out_channels, kernel, stride, (1..=n).collect())
    }

    pub fn with_rates(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rates: Vec<usize>,
    ) -> Result<Self> {
        let n = rates.len();
        if n == 0 || rates.contains(&0) {
            return Err(Error::Arch(format!("invalid rate list {rates:?}")));
        }
        if !out_channels.is_multiple_of(n) {
            return Err(Error::IndivisibleChannels {
                k_o: out_channels,
                n,
            });
        }
        if kernel.is_multiple_of(2) || in_channels == 0 || out_channels == 0 || stride == 0 {
            return Err(Error::Arch(format!(
                "multi-scale conv needs odd kernel and positive extents \
                 (k_i={in_channels}, k_o={out_channels}, f={kernel}, s={stride})"
            )));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            rates,
        })
    }

    pub fn n(&self) -> usize {
        self.rates.len()
    }

    /// Filters per branch, `k_o / n`.
    pub fn branch_channels(&self) -> usize {
        self.out_channels / self.n()
    }

    pub fn padding_for(&self, rate: usize) -> usize {
        rate * (self.kernel - 1) / 2
    }

    pub fn geometry(&self, rate: usize) -> ConvGeometry {
        ConvGeometry::new(self.stride, self.padding_for(rate), rate)
    }

    /// Shape of the unique kernel tensor, `(k_o/n, k_i, f, f)`.
    pub fn kernel_shape(&self) -> Shape {
        Shape::new(self.branch_channels(), self.in_channels, self.kernel, self.kernel)
    }

    /// Number of unique weights, `k_o · k_i · f² / n`.
    pub fn shared_weight_count(&self) -> usize {
        self.kernel_shape().len()
    }

    /// Output shape, checking that every branch lands on the same grid.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let ks = self.kernel_shape();
        let mut extents = Vec::with_capacity(self.n());
        for &r in &self.rates {
            let s = conv2d_output_shape(input, ks, self.geometry(r))?;
            extents.push((s.h, s.w));
        }
        if extents.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::BranchMisaligned(extents));
        }
        let (h, w) = extents[0];
        Ok(Shape::new(input.n, self.out_channels, h, w))
    }

    /// Multiply-accumulates per forward pass: the sum over branches, equal to
    /// a dense `k_o`-filter convolution at the same resolution.
    pub fn macs(&self, input: Shape) -> Result<u64> {
        self.output_shape(input)?;
        let ks = self.kernel_shape();
        self.rates
            .iter()
            .try_fold(0u64, |acc, &r| Ok(acc + conv2d_macs(input, ks, self.geometry(r))?))
    }
}

/// Per-rate weight gradients and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedGradient<T = f32> {
    pub per_rate: Vec<Tensor<T>>,
    pub expected: Tensor<T>,
}

/// `(1/n) · Σ_k per_rate[k]`, folded in ascending branch order.
pub fn expected_gradient<T: Scalar>(per_rate: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = per_rate.first().ok_or_else(|| Error::Arch("no rate branches".into()))?;
    let mut sum = first.clone();
    for g in &per_rate[1..] {
        sum.add_assign(g)?;
    }
    let inv_n = T::one() / T::from_usize(per_rate.len());
    Ok(sum.scale(inv_n))
}

fn check_bias<T: Scalar>(bias: Option<&Tensor<T>>, spec: &SharedMultiScaleConvSpec) -> Result<()> {
    if let Some(b) = bias {
        b.expect_shape(Shape::new(spec.out_channels, 1, 1, 1), "multi-scale bias")?;
    }
    Ok(())
}

fn add_channel_bias<T: Scalar>(out: &mut Tensor<T>, bias: &Tensor<T>) {
    let s = out.shape();
    let plane = s.plane();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let b = bias.data()[i % s.c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let s = g.shape();
    let plane = s.plane();
    let mut out = Tensor::zeros([s.c, 1, 1, 1]);
    for (i, chunk) in g.data().chunks(plane).enumerate() {
        out.data_mut()[i % s.c] += chunk.iter().fold(T::zero(), |a, &v| a + v);
    }
    out
}

/// Channel slice `k` of `grad_out` for branch `k`.
fn branch_grad<T: Scalar>(
    grad_out: &Tensor<T>,
    spec: &SharedMultiScaleConvSpec,
    k: usize,
) -> Result<Tensor<T>> {
    let c = spec.branch_channels();
    grad_out.slice_channels(k * c, c)
}

/// Forward pass with one kernel tensor shared by every rate. An optional
/// `(k_o, 1, 1, 1)` bias is added per output channel.
pub fn smsc_forward<T: Scalar>(
    input: &Tensor<T>,
    shared: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &SharedMultiScaleConvSpec,
) -> Result<Tensor<T>> {
    shared.expect_shape(spec.kernel_shape(), "shared kernels")?;
    let per_rate = vec![shared; spec.n()];
    branch_forward(input, &per_rate, bias, spec)
}

/// Backward pass of [`smsc_forward`] (bias gradient excluded; see
/// [`msconv_bias_grad`]). Input adjoints of the branches are summed.
pub fn smsc_backward<T: Scalar>(
    input: &Tensor<T>,
    shared: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &SharedMultiScaleConvSpec,
) -> Result<(Tensor<T>, SharedGradient<T>)> {
    shared.expect_shape(spec.kernel_shape(), "shared kernels")?;
    let per_rate = vec![shared; spec.n()];
    let (grad_input, per_rate) = branch_backward(input, &per_rate, grad_out, spec)?;
    let expected = expected_gradient(&per_rate)?;
    Ok((grad_input, SharedGradient { per_rate, expected }))
}

/// Forward pass with independent weights per rate.
pub fn unshared_msconv_forward<T: Scalar>(
    input: &Tensor<T>,
    per_rate: &[Tensor<T>],
    bias: Option<&Tensor<T>>,
    spec: &SharedMultiScaleConvSpec,
) -> Result<Tensor<T>> {
    check_branch_weights(per_rate, spec)?;
    let refs: Vec<&Tensor<T>> = per_rate.iter().collect();
    branch_forward(input, &refs, bias, spec)
}

/// Backward pass with independent weights per rate: `n` separate weight
/// gradients, no averaging.
pub fn unshared_msconv_backward<T: Scalar>(
    input: &Tensor<T>,
    per_rate: &[Tensor<T>],
    grad_out: &Tensor<T>,
    spec: &SharedMultiScaleConvSpec,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    check_branch_weights(per_rate, spec)?;
    let refs: Vec<&Tensor<T>> = per_rate.iter().collect();
    branch_backward(input, &refs, grad_out, spec)
}

/// Gradient of the per-channel bias: channel sums of `grad_out`.
pub fn msconv_bias_grad<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    channel_sums(grad_out)
}

pub(crate) fn check_branch_weights<T: Scalar>(
    per_rate: &[Tensor<T>],
    spec: &SharedMultiScaleConvSpec,
) -> Result<()> {
    if per_rate.len() != spec.n() {
        return Err(Error::ShapeMismatch {
            context: "per-rate weights",
            expected: vec![spec.n()],
            got: vec![per_rate.len()],
        });
    }
    for w in per_rate {
        w.expect_shape(spec.kernel_shape(), "per-rate kernels")?;
    }
    Ok(())
}

pub(crate) fn branch_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &[&Tensor<T>],
    bias: Option<&Tensor<T>>,
    spec: &SharedMultiScaleConvSpec,
) -> Result<Tensor<T>> {
    spec.output_shape(input.shape())?;
    check_bias(bias, spec)?;
    let outs = spec
        .rates
        .iter()
        .zip(weights)
        .map(|(&r, w)| conv2d_forward(input, w, None, spec.geometry(r)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Tensor::concat_channels(&outs)?;
    if let Some(b) = bias {
        add_channel_bias(&mut out, b);
    }
    Ok(out)
}

pub(crate) fn branch_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &[&Tensor<T>],
    grad_out: &Tensor<T>,
    spec: &SharedMultiScaleConvSpec,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let out_shape = spec.output_shape(input.shape())?;
    grad_out.expect_shape(out_shape, "multi-scale grad_out")?;
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grads = Vec::with_capacity(spec.n());
    for (k, (&r, w)) in spec.rates.iter().zip(weights).enumerate() {
        let g = branch_grad(grad_out, spec, k)?;
        let gr = conv2d_backward(input, w, &g, spec.geometry(r), false)?;
        grad_input.add_assign(&gr.input)?;
        grads.push(gr.weights);
    }
    Ok((grad_input, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: [usize; 4], scale: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64) * scale).sin())
    }

    #[test]
    fn spec_validation() {
        assert!(matches!(
            SharedMultiScaleConvSpec::new(4, 5, 3, 2, 1),
            Err(Error::IndivisibleChannels { k_o: 5, n: 2 })
        ));
        let s = SharedMultiScaleConvSpec::new(4, 8, 3, 2, 1).unwrap();
        assert_eq!(s.rates, vec![1, 2]);
        assert_eq!(s.padding_for(1), 1);
        assert_eq!(s.padding_for(2), 2);
        assert_eq!(s.kernel_shape(), Shape::new(4, 4, 3, 3));
        assert_eq!(s.shared_weight_count(), 8 * 4 * 9 / 2);
    }

    #[test]
    fn per_rate_padding_aligns_branches_for_all_sizes() {
        for f in [1usize, 3, 5, 7] {
            for stride in [1usize, 2] {
                let s = SharedMultiScaleConvSpec::new(2, 6, f, 3, stride).unwrap();
                for h in 1..12 {
                    assert!(s.output_shape(Shape::new(1, 2, h, h + 1)).is_ok());
                }
            }
        }
    }

    #[test]
    fn constant_input_interior_is_rate_independent() {
        let c = 0.75;
        let ki = 3;
        let x = Tensor::<f64>::new([1, ki, 9, 9], c).unwrap();
        let spec = SharedMultiScaleConvSpec::new(ki, 4, 3, 2, 1).unwrap();
        let w = Tensor::new(spec.kernel_shape(), 1.0).unwrap();
        let y = smsc_forward(&x, &w, None, &spec).unwrap();
        // pixels at least 2 away from the border see no padding at rate 2
        for ch in 0..4 {
            for yy in 2..7 {
                for xx in 2..7 {
                    assert_eq!(y.at(0, ch, yy, xx), 9.0 * ki as f64 * c);
                }
            }
        }
    }

    #[test]
    fn zero_slice_on_second_branch() {
        let x = ramp([1, 2, 6, 6], 0.3);
        let spec = SharedMultiScaleConvSpec::new(2, 4, 3, 2, 1).unwrap();
        let w = ramp([2, 2, 3, 3], 0.7);
        let mut g = ramp([1, 4, 6, 6], 1.1);
        for ch in 2..4 {
            for p in 0..36 {
                g.set(0, ch, p / 6, p % 6, 0.0);
            }
        }
        let (gi, sg) = smsc_backward(&x, &w, &g, &spec).unwrap();
        assert!(sg.per_rate[1].data().iter().all(|&v| v == 0.0));
        assert_eq!(sg.expected, sg.per_rate[0].scale(0.5));
        let b1 = conv2d_backward(&x, &w, &g.slice_channels(0, 2).unwrap(), spec.geometry(1), false)
            .unwrap();
        assert_eq!(gi, b1.input);
    }

    #[test]
    fn unshared_with_tied_weights_equals_shared() {
        let x = ramp([2, 3, 7, 7], 0.21);
        let spec = SharedMultiScaleConvSpec::new(3, 4, 3, 2, 2).unwrap();
        let w = ramp([2, 3, 3, 3], 0.5);
        let shared = smsc_forward(&x, &w, None, &spec).unwrap();
        let unshared = unshared_msconv_forward(&x, &[w.clone(), w.clone()], None, &spec).unwrap();
        assert_eq!(shared, unshared);
    }

    #[test]
    fn bias_is_per_output_channel() {
        let x = Tensor::<f64>::zeros([1, 1, 4, 4]);
        let spec = SharedMultiScaleConvSpec::new(1, 4, 3, 2, 1).unwrap();
        let w = Tensor::zeros(spec.kernel_shape());
        let b = Tensor::from_vec([4, 1, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = smsc_forward(&x, &w, Some(&b), &spec).unwrap();
        for ch in 0..4 {
            assert_eq!(y.at(0, ch, 3, 3), (ch + 1) as f64);
        }
        let gb = msconv_bias_grad(&Tensor::<f64>::new(y.shape(), 1.0).unwrap());
        assert_eq!(gb.data(), &[16.0; 4]);
    }
}
