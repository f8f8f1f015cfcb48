use super::{join, Mode, Module, Param, Real, Slot, Tensor};

/// Per-channel batch normalization over `(N, H, W)`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

/// What the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], T::one()),
            beta: Param::zeros(&[channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Train mode normalizes with batch statistics and updates the running
    /// averages; eval mode uses the running averages only.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, BnCache<T>) {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.channels(), "batch-norm channels");
        let hw = h * w;
        let count = n * hw;
        let eps = T::of(self.eps);
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = 0.0f64;
                    for i in 0..n {
                        sum += x.sample(i)[ch * hw..(ch + 1) * hw].iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
                    }
                    let mean = sum / count as f64;
                    let mut sq = 0.0f64;
                    for i in 0..n {
                        sq += x.sample(i)[ch * hw..(ch + 1) * hw]
                            .iter()
                            .map(|v| {
                                let d = v.to_f64().unwrap() - mean;
                                d * d
                            })
                            .sum::<f64>();
                    }
                    let var = sq / count as f64;
                    let unbiased = if count > 1 { sq / (count - 1) as f64 } else { var };
                    let m = T::of(self.momentum);
                    self.running_mean[ch] = (T::one() - m) * self.running_mean[ch] + m * T::of(mean);
                    self.running_var[ch] = (T::one() - m) * self.running_var[ch] + m * T::of(unbiased);
                    (T::of(mean), T::of(var))
                }
                Mode::Eval => (self.running_mean[ch], self.running_var[ch]),
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for i in 0..n {
                let off = i * c * hw + ch * hw;
                for j in off..off + hw {
                    let xh = (x.data()[j] - mean) * is;
                    xhat.data_mut()[j] = xh;
                    y.data_mut()[j] = g * xh + b;
                }
            }
        }
        (y, BnCache { xhat, inv_std, mode })
    }

    pub fn backward(&mut self, cache: &BnCache<T>, gy: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = gy.shape();
        let hw = h * w;
        let count = T::of((n * hw) as f64);
        let mut gx = Tensor::zeros(gy.shape());
        for ch in 0..c {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for i in 0..n {
                let off = i * c * hw + ch * hw;
                for j in off..off + hw {
                    sum_g += gy.data()[j];
                    sum_gx += gy.data()[j] * cache.xhat.data()[j];
                }
            }
            self.beta.grad[ch] += sum_g;
            self.gamma.grad[ch] += sum_gx;
            let scale = self.gamma.value[ch] * cache.inv_std[ch];
            for i in 0..n {
                let off = i * c * hw + ch * hw;
                for j in off..off + hw {
                    gx.data_mut()[j] = match cache.mode {
                        Mode::Train => {
                            scale * (gy.data()[j] - sum_g / count - cache.xhat.data()[j] * sum_gx / count)
                        }
                        Mode::Eval => scale * gy.data()[j],
                    };
                }
            }
        }
        gx
    }
}

impl<T: Real> Module<T> for BatchNorm2d<T> {
    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, Slot<'a, T>)>) {
        out.push((join(prefix, "gamma"), Slot::Param(&mut self.gamma)));
        out.push((join(prefix, "beta"), Slot::Param(&mut self.beta)));
        out.push((join(prefix, "running_mean"), Slot::Buffer(&mut self.running_mean)));
        out.push((join(prefix, "running_var"), Slot::Buffer(&mut self.running_var)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_mode_normalizes_and_gradients_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_vec([3, 2, 2, 2], (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let gy = Tensor::from_vec([3, 2, 2, 2], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.gamma.value = vec![1.5, 0.7];
        bn.beta.value = vec![0.1, -0.2];
        let (y, cache) = bn.forward(&x, Mode::Train);
        let mean0: f64 = (0..3).flat_map(|i| y.sample(i)[..4].to_vec()).sum::<f64>() / 12.0;
        assert!((mean0 - 0.1).abs() < 1e-12);
        let gx = bn.backward(&cache, &gy);
        let loss = |x: &Tensor<f64>| {
            let mut b = bn.clone();
            let (y, _) = b.forward(x, Mode::Train);
            y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        for i in 0..24 {
            let mut p = x.clone();
            p.data_mut()[i] += 1e-6;
            let mut m = x.clone();
            m.data_mut()[i] -= 1e-6;
            let fd = (loss(&p) - loss(&m)) / 2e-6;
            assert!((fd - gx.data()[i]).abs() < 1e-6, "{fd} vs {}", gx.data()[i]);
        }
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        bn.running_mean = vec![0.5];
        bn.running_var = vec![4.0 - 1e-5];
        let x = Tensor::from_vec([1, 1, 1, 2], vec![0.5, 2.5]);
        let (y, _) = bn.forward(&x, Mode::Eval);
        assert!((y.data()[0]).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-12);
        assert_eq!(bn.running_mean, vec![0.5]);
    }
}
