use crate::error::{Error, Result};
use crate::param::Param;
use crate::tensor::{Scalar, Shape, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

/// Per-channel batch normalization parameters and running statistics.
///
/// Vectors are stored as `(C, 1, 1, 1)` tensors.
#[derive(Clone, Debug)]
pub struct BatchNormState<T = f32> {
    pub scale: Param<T>,
    pub shift: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub eps: T,
}

/// Values saved by a training-mode forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        let mut scale = Param::zeros([channels, 1, 1, 1]);
        scale.value.fill(T::one());
        Self {
            scale,
            shift: Param::zeros([channels, 1, 1, 1]),
            running_mean: Tensor::zeros([channels, 1, 1, 1]),
            running_var: Tensor::new([channels, 1, 1, 1], T::one()).unwrap(),
            momentum: T::from_f64(BN_MOMENTUM),
            eps: T::from_f64(BN_EPSILON),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Training mode normalizes with batch statistics and folds them into
    /// the running averages (variance unbiased). Eval mode uses the running
    /// statistics and returns no cache.
    pub fn forward(
        &mut self,
        input: &Tensor<T>,
        training: bool,
    ) -> Result<(Tensor<T>, Option<BnCache<T>>)> {
        let Shape { n, c, h, w } = input.shape();
        if c != self.channels() {
            return Err(Error::ChannelMismatch {
                expected: self.channels(),
                got: c,
            });
        }
        if !training {
            let out = normalize(
                input,
                self.running_mean.data(),
                &self
                    .running_var
                    .data()
                    .iter()
                    .map(|&v| T::one() / (v + self.eps).sqrt())
                    .collect::<Vec<_>>(),
                self.scale.value.data(),
                self.shift.value.data(),
            );
            return Ok((out, None));
        }
        let m = n * h * w;
        if m < 2 {
            return Err(Error::BatchTooSmall(m));
        }
        let (mean, var) = channel_moments(input);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + self.eps).sqrt()).collect();
        let xhat = normalize(
            input,
            &mean,
            &inv_std,
            &vec![T::one(); c],
            &vec![T::zero(); c],
        );
        let out = affine(&xhat, self.scale.value.data(), self.shift.value.data());

        let mom = self.momentum;
        let unbias = T::from_usize(m) / T::from_usize(m - 1);
        for ch in 0..c {
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = (T::one() - mom) * *rm + mom * mean[ch];
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = (T::one() - mom) * *rv + mom * var[ch] * unbias;
        }
        Ok((out, Some(BnCache { xhat, inv_std })))
    }
}

/// Adjoint of the training-mode forward: returns
/// `(grad_input, grad_scale, grad_shift)`.
pub fn batchnorm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    scale: &Tensor<T>,
    cache: &BnCache<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let shape = cache.xhat.shape();
    grad_out.expect_shape(shape, "batchnorm grad_out")?;
    let Shape { n, c, .. } = shape;
    let plane = shape.plane();
    let m = T::from_usize(n * plane);
    let g = grad_out.data();
    let xh = cache.xhat.data();

    let mut gshift = vec![T::zero(); c];
    let mut gscale = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                gshift[ch] += g[i];
                gscale[ch] += g[i] * xh[i];
            }
        }
    }
    let mut gx = Tensor::zeros(shape);
    let out = gx.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let k = scale.data()[ch] * cache.inv_std[ch] / m;
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                out[i] = k * (m * g[i] - gshift[ch] - xh[i] * gscale[ch]);
            }
        }
    }
    Ok((
        gx,
        Tensor::from_vec([c, 1, 1, 1], gscale)?,
        Tensor::from_vec([c, 1, 1, 1], gshift)?,
    ))
}

/// Per-channel mean and biased variance.
fn channel_moments<T: Scalar>(input: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let Shape { n, c, .. } = input.shape();
    let plane = input.shape().plane();
    let m = T::from_usize(n * plane);
    let x = input.data();
    let mut mean = vec![T::zero(); c];
    for b in 0..n {
        for (ch, acc) in mean.iter_mut().enumerate() {
            let base = (b * c + ch) * plane;
            *acc += x[base..base + plane].iter().fold(T::zero(), |s, &v| s + v);
        }
    }
    mean.iter_mut().for_each(|v| *v = *v / m);
    let mut var = vec![T::zero(); c];
    for b in 0..n {
        for (ch, acc) in var.iter_mut().enumerate() {
            let base = (b * c + ch) * plane;
            *acc += x[base..base + plane].iter().fold(T::zero(), |s, &v| {
                let d = v - mean[ch];
                s + d * d
            });
        }
    }
    var.iter_mut().for_each(|v| *v = *v / m);
    (mean, var)
}

fn normalize<T: Scalar>(
    input: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    scale: &[T],
    shift: &[T],
) -> Tensor<T> {
    let Shape { c, .. } = input.shape();
    let plane = input.shape().plane();
    let mut out = input.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let ch = i % c;
        let (mu, is, g, b) = (mean[ch], inv_std[ch], scale[ch], shift[ch]);
        for v in chunk {
            *v = g * ((*v - mu) * is) + b;
        }
    }
    out
}

fn affine<T: Scalar>(xhat: &Tensor<T>, scale: &[T], shift: &[T]) -> Tensor<T> {
    let c = xhat.shape().c;
    let plane = xhat.shape().plane();
    let mut out = xhat.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let ch = i % c;
        for v in chunk {
            *v = scale[ch] * *v + shift[ch];
        }
    }
    out
}
