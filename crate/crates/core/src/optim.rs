//! Adam.

use alloc::vec::Vec;

use crate::autograd::Gradients;
use crate::params::ParamStore;
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Option<Matrix>>,
    second: Vec<Option<Matrix>>,
}

impl Adam {
    pub fn new(lr: f64, eps: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Frozen parameters are never touched, even if a
    /// gradient for them is supplied.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        if self.first.len() < params.len() {
            self.first.resize(params.len(), None);
            self.second.resize(params.len(), None);
        }
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        for (id, g) in grads.iter() {
            let p = params.get_mut(id);
            if !p.trainable {
                continue;
            }
            let i = id.index();
            let m = self.first[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.second[i].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let iter = p
                .value
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice().iter_mut()));
            for ((w, &gv), (mv, vv)) in iter {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *w -= self.lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::params::ModuleTag;

    #[test]
    fn minimises_quadratic() {
        let mut store = ParamStore::default();
        let x = store.insert("x", Matrix::from_rows(&[[3.0, -2.0]]), ModuleTag::Heads, true).unwrap();
        let mut opt = Adam::new(0.1, 1e-8);
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&store);
                let p = g.param(x);
                let sq = g.mul(p, p);
                let s = g.sum(sq);
                g.backward(s)
            };
            opt.step(&mut store, &grads);
        }
        assert!(store.get(x).value.as_slice().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::default();
        let x = store.insert("x", Matrix::scalar(1.0), ModuleTag::Heads, true).unwrap();
        let grads = {
            let mut g = Graph::new(&store);
            let p = g.param(x);
            let s = g.scale(p, 5.0);
            g.backward(s)
        };
        let mut opt = Adam::new(0.01, 1e-8);
        opt.step(&mut store, &grads);
        assert!((store.get(x).value.item() - 0.99).abs() < 1e-9);
    }
}
