//! AdamW with decoupled weight decay.

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store.values().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in store
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv *= 1.0 - self.lr * self.weight_decay;
                *pv -= self.lr * (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(vec![2], vec![3.0, -2.0]));
        let mut opt = AdamW::new(&store, 0.05, 0.9, 0.999, 0.0);
        for _ in 0..2000 {
            let g: Vec<f64> = store.get(id).data().iter().map(|v| 2.0 * (v - 1.0)).collect();
            opt.update(&mut store, &[Tensor::new(vec![2], g)]);
        }
        for v in store.get(id).data() {
            assert!((v - 1.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::new(vec![1], vec![1.0]));
        let mut opt = AdamW::new(&store, 0.1, 0.8, 0.99, 0.01);
        opt.update(&mut store, &[Tensor::zeros(vec![1])]);
        assert!((store.values()[0].item() - (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }
}
