use serde::{Deserialize, Serialize};

use super::{Module, Real};

/// First and second moment estimates for every parameter, in visit order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64)) -> Self {
        Self { lr, beta1: betas.0, beta2: betas.1, eps: 1e-8, state: AdamState::default() }
    }

    /// Applies one update from the accumulated gradients of every module.
    pub fn step<T: Real>(&mut self, modules: &mut [&mut dyn Module<T>]) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut idx = 0;
        for module in modules.iter_mut() {
            for (_, p) in module.params() {
                if self.state.m.len() <= idx {
                    self.state.m.push(vec![0.0; p.value.len()]);
                    self.state.v.push(vec![0.0; p.value.len()]);
                }
                let (m, v) = (&mut self.state.m[idx], &mut self.state.v[idx]);
                assert_eq!(m.len(), p.value.len(), "optimizer state does not match parameters");
                for j in 0..p.value.len() {
                    let g = p.grad[j].to_f64().unwrap();
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                    let update = self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                    p.value[j] -= T::of(update);
                }
                idx += 1;
            }
        }
    }
}
