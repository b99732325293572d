//! Dilated 2-D cross-correlation, lowered to a matrix product.

use crate::error::{Error, Result};
use crate::tensor::{col2im, gemm, im2col, ConvGeometry, Matrix, Scalar, Shape, Tensor};

/// Gradients of [`conv2d_backward`].
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    /// Same shape as the kernels, `(k_o, k_i, f, f)`.
    pub weights: Tensor<T>,
    /// `(k_o, 1, 1, 1)`, present when requested.
    pub bias: Option<Tensor<T>>,
}

/// Output extents of a convolution, validating channels.
pub fn conv2d_output_shape(input: Shape, kernels: Shape, geom: ConvGeometry) -> Result<Shape> {
    if input.c != kernels.c {
        return Err(Error::ChannelMismatch {
            expected: kernels.c,
            got: input.c,
        });
    }
    let ho = geom.output_len(input.h, kernels.h)?;
    let wo = geom.output_len(input.w, kernels.w)?;
    Ok(Shape::new(input.n, kernels.n, ho, wo))
}

/// Multiply-accumulate count of one convolution over a batch of `input`.
pub fn conv2d_macs(input: Shape, kernels: Shape, geom: ConvGeometry) -> Result<u64> {
    let out = conv2d_output_shape(input, kernels, geom)?;
    Ok(out.len() as u64 * (kernels.c * kernels.h * kernels.w) as u64)
}

/// `out[n,o,y,x] = bias[o] + Σ_{c,u,v} in[n, c, y·s − p + u·r, x·s − p + v·r] · k[o,c,u,v]`
/// with out-of-range reads contributing zero.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let ks = kernels.shape();
    let out_shape = conv2d_output_shape(input.shape(), ks, geom)?;
    if let Some(b) = bias {
        b.expect_shape(Shape::new(ks.n, 1, 1, 1), "conv bias")?;
    }
    let cols = im2col(input, (ks.h, ks.w), geom)?;
    let k = ks.c * ks.h * ks.w;
    let np = cols.cols;
    let mut prod = vec![T::zero(); ks.n * np];
    gemm(kernels.data(), &cols.data, &mut prod, ks.n, k, np);

    let plane = out_shape.plane();
    let mut out = Tensor::zeros(out_shape);
    let data = out.data_mut();
    for o in 0..ks.n {
        let b = bias.map_or(T::zero(), |b| b.data()[o]);
        let row = &prod[o * np..(o + 1) * np];
        for n in 0..out_shape.n {
            let dst = &mut data[(n * ks.n + o) * plane..(n * ks.n + o + 1) * plane];
            let src = &row[n * plane..(n + 1) * plane];
            if bias.is_some() {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            } else {
                dst.copy_from_slice(src);
            }
        }
    }
    Ok(out)
}

/// Exact adjoint of [`conv2d_forward`] with respect to input, kernels and
/// (optionally) bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: ConvGeometry,
    with_bias: bool,
) -> Result<ConvGrads<T>> {
    let ks = kernels.shape();
    let out_shape = conv2d_output_shape(input.shape(), ks, geom)?;
    grad_out.expect_shape(out_shape, "conv grad_out")?;
    let cols = im2col(input, (ks.h, ks.w), geom)?;
    let k = ks.c * ks.h * ks.w;
    let np = cols.cols;
    let plane = out_shape.plane();

    // grad_out as a (k_o × N·P) matrix, matching the column order of im2col
    let mut g = vec![T::zero(); ks.n * np];
    for n in 0..out_shape.n {
        for o in 0..ks.n {
            let src = &grad_out.data()[(n * ks.n + o) * plane..(n * ks.n + o + 1) * plane];
            g[o * np + n * plane..o * np + (n + 1) * plane].copy_from_slice(src);
        }
    }

    let cols_t = cols.transpose();
    let mut gw = vec![T::zero(); ks.n * k];
    gemm(&g, &cols_t.data, &mut gw, ks.n, np, k);

    let w_t = Matrix::from_vec(ks.n, k, kernels.data().to_vec())?.transpose();
    let mut gcols = Matrix::zeros(k, np);
    gemm(&w_t.data, &g, &mut gcols.data, k, ks.n, np);
    let grad_input = col2im(&gcols, input.shape(), (ks.h, ks.w), geom)?;

    let bias = with_bias.then(|| {
        Tensor::from_fn([ks.n, 1, 1, 1], |o| {
            g[o * np..(o + 1) * np]
                .iter()
                .fold(T::zero(), |acc, &v| acc + v)
        })
    });
    Ok(ConvGrads {
        input: grad_input,
        weights: Tensor::from_vec(ks, gw)?,
        bias,
    })
}
