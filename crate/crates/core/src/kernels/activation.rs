//! Pointwise activations and softmax.

use crate::scalar::Scalar;
use crate::tensor::{split_axis, Tensor};

pub fn relu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| if v > F::zero() { v } else { F::zero() })
}

pub fn sigmoid<F: Scalar>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

/// Max-subtracted softmax along `axis`.
/// `tanh(v) = 1 − 2 / (e^{2v} + 1)`; a single `exp`, saturating cleanly at ±1.
pub fn tanh<F: Scalar>(v: F) -> F {
    let two = F::one() + F::one();
    F::one() - two / ((two * v).exp() + F::one())
}

pub fn softmax<F: Scalar>(x: &Tensor<F>, axis: usize) -> Tensor<F> {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut y = Tensor::zeros(x.shape());
    let (xd, yd) = (x.data(), y.data_mut());
    let mut buf = vec![F::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let m = (0..n).map(|k| xd[at(k)]).fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for k in 0..n {
                buf[k] = (xd[at(k)] - m).exp();
                s += buf[k];
            }
            for k in 0..n {
                yd[at(k)] = buf[k] / s;
            }
        }
    }
    y
}

/// `gx = y ⊙ (gy − Σ_axis y ⊙ gy)`.
pub fn softmax_backward<F: Scalar>(y: &Tensor<F>, gy: &Tensor<F>, axis: usize) -> Tensor<F> {
    let (outer, n, inner) = split_axis(y.shape(), axis);
    let mut gx = Tensor::zeros(y.shape());
    let (yd, gd) = (y.data(), gy.data());
    let gxd = gx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let dot: F = (0..n).map(|k| yd[at(k)] * gd[at(k)]).sum();
            for k in 0..n {
                gxd[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_reference_values() {
        let x = Tensor::<f64>::from_vec(&[3], vec![0.0, 0.0, 0.0]).unwrap();
        for v in softmax(&x, 0).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = Tensor::<f64>::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = softmax(&x, 0);
        // e^k / (e + e² + e³)
        let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        let want: Vec<f64> = (1..=3).map(|k| (k as f64).exp() / z).collect();
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((y.data()[0] - 0.09003).abs() < 1e-5);
        assert!((y.data()[1] - 0.24473).abs() < 1e-5);
        assert!((y.data()[2] - 0.66524).abs() < 1e-5);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let x = Tensor::<f32>::from_vec(&[2, 2], vec![1000.0, 1001.0, -1000.0, -1000.0]).unwrap();
        let y = softmax(&x, 1);
        assert!(y.all_finite());
        assert!((y.data()[2] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn relu_sign_disjoint() {
        let x = Tensor::<f64>::from_fn(&[11], |i| i as f64 - 5.0);
        let pos = relu(&x);
        let neg = relu(&x.map(|v| -v));
        assert!(pos.data().iter().zip(neg.data()).all(|(a, b)| a * b == 0.0));
    }
}
