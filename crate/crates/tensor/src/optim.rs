use crate::params::{Checkpoint, ParamStore};
use crate::tensor::Tensor;

/// Adam over every parameter of one store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated grads, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (x, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        store.zero_grads();
    }

    pub fn export(&self, prefix: &str, ckpt: &mut Checkpoint) {
        ckpt.insert(format!("{prefix}step"), Tensor::scalar(self.step as f64));
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            ckpt.insert(format!("{prefix}m/{i}"), m.clone());
            ckpt.insert(format!("{prefix}v/{i}"), v.clone());
        }
    }

    pub fn import(&mut self, prefix: &str, ckpt: &Checkpoint) -> bool {
        let Some(step) = ckpt.get(&format!("{prefix}step")) else {
            return false;
        };
        for i in 0..self.m.len() {
            match (ckpt.get(&format!("{prefix}m/{i}")), ckpt.get(&format!("{prefix}v/{i}"))) {
                (Some(m), Some(v)) if m.shape() == self.m[i].shape() && v.shape() == self.v[i].shape() => {
                    self.m[i] = m.clone();
                    self.v[i] = v.clone();
                }
                _ => return false,
            }
        }
        self.step = step.item() as u64;
        true
    }
}

/// Rescales the gradients of all `stores` so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(stores: &mut [&mut ParamStore], max_norm: f64) -> f64 {
    let norm = stores.iter().map(|s| s.grad_sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for s in stores.iter_mut() {
            s.scale_grads(k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec(vec![3.0, -2.0]));
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let x = store.value(id).data().to_vec();
            store.get_mut(id).grad = Tensor::from_vec(x.iter().map(|v| 2.0 * v).collect());
            opt.step(&mut store);
        }
        assert!(store.value(id).max_abs() < 1e-2);
    }

    #[test]
    fn clipping_bounds_joint_norm() {
        let mut a = ParamStore::new();
        let ia = a.add("a", Tensor::zeros([1]));
        let mut b = ParamStore::new();
        let ib = b.add("b", Tensor::zeros([1]));
        a.get_mut(ia).grad = Tensor::from_vec(vec![3.0]);
        b.get_mut(ib).grad = Tensor::from_vec(vec![4.0]);
        let before = clip_grad_norm(&mut [&mut a, &mut b], 0.5);
        assert!((before - 5.0).abs() < 1e-12);
        let after = (a.grad_sq_norm() + b.grad_sq_norm()).sqrt();
        assert!((after - 0.5).abs() < 1e-12);
    }
}
