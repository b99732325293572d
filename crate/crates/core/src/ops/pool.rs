use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Scalar, Shape, Tensor};

/// Square max-pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolWindow {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolWindow {
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let g = ConvGeometry::new(self.stride, self.padding, 1);
        Ok(Shape::new(
            input.n,
            input.c,
            g.output_len(input.h, self.kernel)?,
            g.output_len(input.w, self.kernel)?,
        ))
    }
}

/// Max pooling. Padded positions never win. Returns the output and, for
/// every output element, the flat input index it was read from; on ties the
/// first position in raster order wins.
pub fn maxpool_forward<T: Scalar>(
    input: &Tensor<T>,
    win: PoolWindow,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let is = input.shape();
    let os = win.output_shape(is)?;
    let mut out = Tensor::zeros(os);
    let mut argmax = vec![0usize; os.len()];
    let x = input.data();
    let (s, p) = (win.stride as isize, win.padding as isize);
    let mut o = 0;
    for nc in 0..is.n * is.c {
        let base = nc * is.plane();
        for y in 0..os.h {
            for xo in 0..os.w {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for u in 0..win.kernel as isize {
                    let iy = y as isize * s - p + u;
                    if iy < 0 || iy >= is.h as isize {
                        continue;
                    }
                    for v in 0..win.kernel as isize {
                        let ix = xo as isize * s - p + v;
                        if ix < 0 || ix >= is.w as isize {
                            continue;
                        }
                        let i = base + iy as usize * is.w + ix as usize;
                        if best_i == usize::MAX || x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                if best_i == usize::MAX {
                    return Err(Error::OutputExtent {
                        input: is.h,
                        kernel: win.kernel,
                        stride: win.stride,
                        padding: win.padding,
                        dilation: 1,
                    });
                }
                out.data_mut()[o] = best;
                argmax[o] = best_i;
                o += 1;
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each output gradient to its recorded argmax position.
pub fn maxpool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: Shape,
) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::ShapeMismatch {
            context: "maxpool grad_out",
            expected: vec![argmax.len()],
            got: vec![grad_out.len()],
        });
    }
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&g, &i) in grad_out.data().iter().zip(argmax) {
        d[i] += g;
    }
    Ok(gx)
}

fn adaptive_bounds(i: usize, out: usize, len: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

/// Average pooling to a fixed `(out_h, out_w)` grid with the bin edges
/// `⌊i·H/oh⌋ .. ⌈(i+1)·H/oh⌉`.
pub fn adaptive_avg_pool_forward<T: Scalar>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let is = input.shape();
    if is.h == 0 || is.w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::ShapeMismatch {
            context: "adaptive_avg_pool",
            expected: vec![out_h, out_w],
            got: is.dims().to_vec(),
        });
    }
    let mut out = Tensor::zeros([is.n, is.c, out_h, out_w]);
    let x = input.data();
    let mut o = 0;
    for nc in 0..is.n * is.c {
        let base = nc * is.plane();
        for oy in 0..out_h {
            let (y0, y1) = adaptive_bounds(oy, out_h, is.h);
            for ox in 0..out_w {
                let (x0, x1) = adaptive_bounds(ox, out_w, is.w);
                let mut acc = T::zero();
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += x[base + y * is.w + xx];
                    }
                }
                out.data_mut()[o] = acc / T::from_usize((y1 - y0) * (x1 - x0));
                o += 1;
            }
        }
    }
    Ok(out)
}

pub fn adaptive_avg_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: Shape,
) -> Result<Tensor<T>> {
    let os = grad_out.shape();
    if os.n != input_shape.n || os.c != input_shape.c {
        return Err(Error::ShapeMismatch {
            context: "adaptive_avg_pool grad_out",
            expected: vec![input_shape.n, input_shape.c],
            got: vec![os.n, os.c],
        });
    }
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    let g = grad_out.data();
    let mut o = 0;
    for nc in 0..os.n * os.c {
        let base = nc * input_shape.plane();
        for oy in 0..os.h {
            let (y0, y1) = adaptive_bounds(oy, os.h, input_shape.h);
            for ox in 0..os.w {
                let (x0, x1) = adaptive_bounds(ox, os.w, input_shape.w);
                let share = g[o] / T::from_usize((y1 - y0) * (x1 - x0));
                for y in y0..y1 {
                    for xx in x0..x1 {
                        d[base + y * input_shape.w + xx] += share;
                    }
                }
                o += 1;
            }
        }
    }
    Ok(gx)
}

/// `(N, C, H, W) → (N, C, 1, 1)` channel means.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    adaptive_avg_pool_forward(input, 1, 1)
}
