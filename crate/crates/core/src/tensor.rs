//! Dense NCHW tensors, 2-D matrices and the im2col lowering.
//!
//! All reductions run in a fixed loop order so that results are bitwise
//! reproducible between runs of the same build.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type. `f32` is used for training, `f64` for
/// gradient checking.
pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Extents of a 4-D tensor in (batch, channels, height, width) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// Element count, or an error when the product overflows `usize`.
    pub fn checked_len(&self) -> Result<usize> {
        self.dims()
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(Error::ExtentOverflow(self.dims()))
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per batch item.
    pub fn per_sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4-D array stored row-major in (N, C, H, W) order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Tensor of the given extents with every element equal to `fill`.
    pub fn new(shape: impl Into<Shape>, fill: T) -> Result<Self> {
        let shape = shape.into();
        let len = shape.checked_len()?;
        Ok(Self {
            shape,
            data: vec![fill; len],
        })
    }

    /// Zero tensor. Panics if the extents overflow; use [`Tensor::new`]
    /// for untrusted extents.
    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::new(shape, T::zero()).expect("tensor extents overflow")
    }

    pub fn from_vec(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected = shape.checked_len()?;
        if data.len() != expected {
            return Err(Error::DataLength {
                shape: shape.dims(),
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let data = (0..shape.len()).map(&mut f).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.offset(n, c, h, w);
        self.data[i] = v;
    }

    /// Contiguous slice holding batch item `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let k = self.shape.per_sample();
        &self.data[n * k..(n + 1) * k]
    }

    /// Same data under new extents with equal element count.
    pub fn reshape(self, shape: impl Into<Shape>) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.expect_shape(other.shape, "add")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    /// Inner product over all elements, accumulated in `f64`.
    pub fn dot(&self, other: &Tensor<T>) -> Result<f64> {
        self.expect_shape(other.shape, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (&a, &b)| acc + a.as_f64() * b.as_f64()))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    /// Fails with [`Error::NonFinite`] if any element is NaN or infinite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn expect_shape(&self, expected: Shape, context: &'static str) -> Result<()> {
        if self.shape == expected {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                context,
                expected: expected.dims().to_vec(),
                got: self.shape.dims().to_vec(),
            })
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Concatenates tensors of equal N, H, W along the channel axis.
    pub fn concat_channels(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::ShapeMismatch {
            context: "concat_channels",
            expected: vec![1],
            got: vec![0],
        })?;
        let Shape { n, h, w, .. } = first.shape;
        for p in parts {
            if p.shape.n != n || p.shape.h != h || p.shape.w != w {
                return Err(Error::ShapeMismatch {
                    context: "concat_channels",
                    expected: vec![n, p.shape.c, h, w],
                    got: p.shape.dims().to_vec(),
                });
            }
        }
        let c: usize = parts.iter().map(|p| p.shape.c).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for i in 0..n {
            for p in parts {
                data.extend_from_slice(p.sample(i));
            }
        }
        Self::from_vec([n, c, h, w], data)
    }

    /// Channels `[start, start + count)` as a new tensor.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Self> {
        let Shape { n, c, h, w } = self.shape;
        if start + count > c {
            return Err(Error::ShapeMismatch {
                context: "slice_channels",
                expected: vec![start + count],
                got: vec![c],
            });
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * count * plane);
        for i in 0..n {
            let base = (i * c + start) * plane;
            data.extend_from_slice(&self.data[base..base + count * plane]);
        }
        Self::from_vec([n, count, h, w], data)
    }
}

/// Row-major 2-D matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T = f32> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: "matrix",
                expected: vec![rows, cols],
                got: vec![data.len()],
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn scale(&self, alpha: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * alpha).collect(),
        }
    }
}

const COL_TILE: usize = 256;

/// `c = a · b` for row-major slices (`a`: m×k, `b`: k×n, `c`: m×n).
///
/// Every output element is accumulated from zero over ascending `k`, the
/// same order as the textbook triple loop, so results match it exactly.
/// Columns are processed in tiles to keep the active rows of `b` in cache.
pub(crate) fn gemm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.iter_mut().for_each(|v| *v = T::zero());
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + COL_TILE).min(n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut c[i * n + j0..i * n + j1];
            for (p, &aip) in arow.iter().enumerate() {
                let brow = &b[p * n + j0..p * n + j1];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            }
        }
        j0 = j1;
    }
}

/// Standard matrix product.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            context: "matmul",
            expected: vec![a.rows, a.cols, a.cols, b.cols],
            got: vec![a.rows, a.cols, b.rows, b.cols],
        });
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm(&a.data, &b.data, &mut c.data, a.rows, a.cols, b.cols);
    Ok(c)
}

/// Spatial parameters shared by convolution and pooling windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
        }
    }

    /// `⌊(len + 2p − r(f − 1) − 1) / s⌋ + 1`, or an error when it is not
    /// positive.
    pub fn output_len(&self, len: usize, kernel: usize) -> Result<usize> {
        let span = self.dilation * (kernel.max(1) - 1) + 1;
        let padded = len + 2 * self.padding;
        if padded < span || self.stride == 0 || kernel == 0 {
            return Err(Error::OutputExtent {
                input: len,
                kernel,
                stride: self.stride,
                padding: self.padding,
                dilation: self.dilation,
            });
        }
        Ok((padded - span) / self.stride + 1)
    }
}

/// Lowers `input` to a `(C·fh·fw) × (N·Ho·Wo)` matrix whose column `j`
/// holds the zero-padded, dilated receptive field of output position `j`.
///
/// Row order is `(c, u, v)`, column order is `(n, y, x)`.
pub fn im2col<T: Scalar>(
    input: &Tensor<T>,
    kernel: (usize, usize),
    geom: ConvGeometry,
) -> Result<Matrix<T>> {
    let Shape { n, c, h, w } = input.shape();
    let (fh, fw) = kernel;
    let ho = geom.output_len(h, fh)?;
    let wo = geom.output_len(w, fw)?;
    let rows = c * fh * fw;
    let cols = n * ho * wo;
    let mut out = Matrix::zeros(rows, cols);
    let (s, p, r) = (geom.stride as isize, geom.padding as isize, geom.dilation as isize);
    let data = input.data();
    for ch in 0..c {
        for u in 0..fh {
            for v in 0..fw {
                let row = (ch * fh + u) * fw + v;
                let dst = &mut out.data[row * cols..(row + 1) * cols];
                for b in 0..n {
                    let src = &data[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    for y in 0..ho {
                        let iy = y as isize * s - p + u as isize * r;
                        let base = (b * ho + y) * wo;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        for x in 0..wo {
                            let ix = x as isize * s - p + v as isize * r;
                            if ix >= 0 && ix < w as isize {
                                dst[base + x] = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`im2col`]: scatters columns back onto an input-shaped
/// tensor, summing overlapping taps.
pub fn col2im<T: Scalar>(
    cols: &Matrix<T>,
    input_shape: Shape,
    kernel: (usize, usize),
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let Shape { n, c, h, w } = input_shape;
    let (fh, fw) = kernel;
    let ho = geom.output_len(h, fh)?;
    let wo = geom.output_len(w, fw)?;
    if cols.rows != c * fh * fw || cols.cols != n * ho * wo {
        return Err(Error::ShapeMismatch {
            context: "col2im",
            expected: vec![c * fh * fw, n * ho * wo],
            got: vec![cols.rows, cols.cols],
        });
    }
    let mut out = Tensor::zeros(input_shape);
    let (s, p, r) = (geom.stride as isize, geom.padding as isize, geom.dilation as isize);
    let ncols = cols.cols;
    let data = out.data_mut();
    for ch in 0..c {
        for u in 0..fh {
            for v in 0..fw {
                let row = (ch * fh + u) * fw + v;
                let srcrow = &cols.data[row * ncols..(row + 1) * ncols];
                for b in 0..n {
                    let plane = &mut data[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    for y in 0..ho {
                        let iy = y as isize * s - p + u as isize * r;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (b * ho + y) * wo;
                        for x in 0..wo {
                            let ix = x as isize * s - p + v as isize * r;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += srcrow[base + x];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_fills() {
        let t = Tensor::<f32>::new([1, 1, 2, 2], 0.0).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        let t = Tensor::<f32>::new([2, 3, 4, 4], 1.0).unwrap();
        assert_eq!(t.sum(), 96.0);
        let t = Tensor::<f32>::new([0, 1, 1, 1], 5.0).unwrap();
        assert_eq!(t.len(), 0);
    }

    #[test]
    fn new_rejects_overflow() {
        let err = Tensor::<f32>::new([usize::MAX, 2, 1, 1], 0.0).unwrap_err();
        assert!(matches!(err, Error::ExtentOverflow(_)));
    }

    #[test]
    fn im2col_full_overlap_center_column() {
        let x = Tensor::<f64>::from_fn([1, 1, 3, 3], |i| i as f64 + 1.0);
        let m = im2col(&x, (3, 3), ConvGeometry::new(1, 1, 1)).unwrap();
        assert_eq!((m.rows, m.cols), (9, 9));
        let center: Vec<f64> = (0..9).map(|r| m.get(r, 4)).collect();
        assert_eq!(center, x.data());
    }

    #[test]
    fn im2col_dilated_center_column() {
        let x = Tensor::<f64>::from_fn([1, 1, 5, 5], |i| i as f64);
        let m = im2col(&x, (3, 3), ConvGeometry::new(1, 2, 2)).unwrap();
        assert_eq!((m.rows, m.cols), (9, 25));
        let center: Vec<f64> = (0..9).map(|r| m.get(r, 12)).collect();
        // taps at rows/cols {0, 2, 4}
        assert_eq!(center, vec![0.0, 2.0, 4.0, 10.0, 12.0, 14.0, 20.0, 22.0, 24.0]);
    }

    #[test]
    fn im2col_pointwise_is_reshape() {
        let x = Tensor::<f64>::from_fn([2, 3, 2, 2], |i| i as f64 * 0.5);
        let m = im2col(&x, (1, 1), ConvGeometry::new(1, 0, 1)).unwrap();
        assert_eq!((m.rows, m.cols), (3, 8));
        for b in 0..2 {
            for c in 0..3 {
                for p in 0..4 {
                    assert_eq!(m.get(c, b * 4 + p), x.at(b, c, p / 2, p % 2));
                }
            }
        }
    }

    #[test]
    fn im2col_rejects_negative_extent() {
        let x = Tensor::<f32>::zeros([1, 1, 2, 2]);
        assert!(matches!(
            im2col(&x, (3, 3), ConvGeometry::new(1, 0, 2)),
            Err(Error::OutputExtent { .. })
        ));
    }

    #[test]
    fn matmul_identity_and_ones() {
        let m = Matrix::from_vec(3, 2, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
        let k = 7;
        let ones_r = Matrix::from_vec(1, k, vec![1.0f32; k]).unwrap();
        let ones_c = Matrix::from_vec(k, 1, vec![1.0f32; k]).unwrap();
        assert_eq!(matmul(&ones_r, &ones_c).unwrap().data, vec![k as f32]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::<f32>::zeros(2, 3);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn col2im_counts_overlaps() {
        let shape = Shape::new(1, 1, 3, 3);
        let geom = ConvGeometry::new(1, 1, 1);
        let ones = Matrix::from_vec(9, 9, vec![1.0f64; 81]).unwrap();
        let t = col2im(&ones, shape, (3, 3), geom).unwrap();
        // corner pixels are covered by 4 windows, edges by 6, the center by 9
        assert_eq!(t.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }
}
