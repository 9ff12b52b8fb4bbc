use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Parameters without a gradient see a zero one.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    steps: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.ids().map(|id| vec![T::zero(); params.get(id).numel()]).collect();
        Adam { config, steps: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moment(&self, index: usize) -> &[T] {
        &self.m[index]
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.steps += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let one = T::one();
        let bc1 = T::of(1.0 - c.beta1.powi(self.steps as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.steps as i32));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        for id in params.ids().collect::<Vec<_>>() {
            let g = grads.get(id).map(|t| t.data());
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
