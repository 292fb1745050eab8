//! Adaptive-moment (Adam) parameter updates.

use crate::autograd::Gradients;
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    step: i32,
}

impl<F: Scalar> Adam<F> {
    pub fn new(store: &ParamStore<F>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Adam { lr, beta1, beta2, eps, m: zeros(), v: zeros(), step: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update for every parameter that received a gradient.
    pub fn update(&mut self, store: &mut ParamStore<F>, bound: &Bound, grads: &Gradients<F>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let f = F::from_f64_lossy;
        let (b1, b2, lr_t, eps) = (f(self.beta1), f(self.beta2), f(self.lr / c1), f(self.eps));
        let (one_b1, one_b2, inv_c2) = (f(1.0 - self.beta1), f(1.0 - self.beta2), f(1.0 / c2));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(bound.var(id)) else { continue };
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + one_b1 * gk;
                v[k] = b2 * v[k] + one_b2 * gk * gk;
                p[k] -= lr_t * m[k] / ((v[k] * inv_c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.add("x", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
        let mut adam = Adam::new(&store, 0.1, 0.9, 0.999, 1e-8);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let sq = tape.mul(p.var(id), p.var(id)).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        adam.update(&mut store, &p, &g);
        let x = store.get(id).data();
        assert!((x[0] - 0.9).abs() < 1e-6 && (x[1] + 1.9).abs() < 1e-6);
    }
}
