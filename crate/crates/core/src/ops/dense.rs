use crate::error::{Error, Result};
use crate::tensor::{gemm, Matrix, Scalar, Shape, Tensor};

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given the forward input (or output; both have the same
/// positive support).
pub fn relu_backward<T: Scalar>(forward: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape(forward.shape(), "relu grad_out")?;
    let mut g = grad_out.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(forward.data()) {
        if x <= T::zero() {
            *gv = T::zero();
        }
    }
    Ok(g)
}

fn flat_features(shape: Shape) -> usize {
    shape.per_sample()
}

/// Fully connected layer over the flattened `C·H·W` features of each
/// sample. `weight` is `(out, in, 1, 1)`, `bias` is `(out, 1, 1, 1)`.
pub fn linear_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let ws = weight.shape();
    let (n, fin) = (input.shape().n, flat_features(input.shape()));
    if fin != ws.c {
        return Err(Error::ChannelMismatch {
            expected: ws.c,
            got: fin,
        });
    }
    bias.expect_shape(Shape::new(ws.n, 1, 1, 1), "linear bias")?;
    let w_t = Matrix::from_vec(ws.n, ws.c, weight.data().to_vec())?.transpose();
    let mut out = vec![T::zero(); n * ws.n];
    gemm(input.data(), &w_t.data, &mut out, n, fin, ws.n);
    for row in out.chunks_mut(ws.n) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Tensor::from_vec([n, ws.n, 1, 1], out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let ws = weight.shape();
    let n = input.shape().n;
    grad_out.expect_shape(Shape::new(n, ws.n, 1, 1), "linear grad_out")?;
    let fin = flat_features(input.shape());
    let mut gx = vec![T::zero(); n * fin];
    gemm(grad_out.data(), weight.data(), &mut gx, n, ws.n, fin);

    let g_t = Matrix::from_vec(n, ws.n, grad_out.data().to_vec())?.transpose();
    let mut gw = vec![T::zero(); ws.n * fin];
    gemm(&g_t.data, input.data(), &mut gw, ws.n, n, fin);

    let gb = Tensor::from_fn([ws.n, 1, 1, 1], |o| {
        (0..n).fold(T::zero(), |acc, b| acc + grad_out.data()[b * ws.n + o])
    });
    Ok((
        Tensor::from_vec(input.shape(), gx)?,
        Tensor::from_vec(ws, gw)?,
        gb,
    ))
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the `(N, K, 1, 1)` logits.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let n = logits.shape().n;
    let k = flat_features(logits.shape());
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            context: "softmax_xent labels",
            expected: vec![n],
            got: vec![labels.len()],
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let inv_n = T::one() / T::from_usize(n.max(1));
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = T::zero();
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits.data()[b * k..(b + 1) * k];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let z = exps.iter().fold(T::zero(), |s, &v| s + v);
        loss += (z.ln() + max - row[label]) * inv_n;
        let g = &mut grad.data_mut()[b * k..(b + 1) * k];
        for (j, gv) in g.iter_mut().enumerate() {
            let p = exps[j] / z;
            *gv = (p - if j == label { T::one() } else { T::zero() }) * inv_n;
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax cross-entropy loss".into()));
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_definition() {
        let x = Tensor::<f32>::from_vec([1, 1, 1, 2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 2.0]);
        let g = Tensor::new(x.shape(), 1.0).unwrap();
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        for k in [2usize, 5, 10] {
            let logits = Tensor::<f64>::new([3, k, 1, 1], 0.7).unwrap();
            let (loss, grad) = softmax_xent(&logits, &[0, 1, k - 1]).unwrap();
            assert!((loss - (k as f64).ln()).abs() < 1e-12);
            // rows of the gradient sum to zero
            for b in 0..3 {
                let s: f64 = grad.data()[b * k..(b + 1) * k].iter().sum();
                assert!(s.abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bad_label_rejected() {
        let logits = Tensor::<f32>::zeros([1, 3, 1, 1]);
        assert!(matches!(
            softmax_xent(&logits, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn linear_matches_hand_product() {
        let x = Tensor::<f64>::from_vec([2, 3, 1, 1], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap();
        let w = Tensor::from_vec([2, 3, 1, 1], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap();
        let b = Tensor::from_vec([2, 1, 1, 1], vec![10.0, 20.0]).unwrap();
        let y = linear_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[8.0, 23.0, 8.0, 20.0]);
    }
}
