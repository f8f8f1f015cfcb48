//! The embedding and retrieval networks, the additive container, and the
//! checkpoint format.

mod checkpoint;
pub mod embedder;
pub mod retriever;

pub use checkpoint::{Checkpoint, CheckpointMeta, OptimizerSnapshot};
pub use embedder::{EmbedTrace, Embedder, EmbedderSpec, OutputMapping};
pub use retriever::{RetrieveTrace, Retriever, RetrieverSpec};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{FeatureMap, Image, CHANNELS};
use crate::nn::{Mode, Module, Real, Slot, Tensor};

/// Architecture of both networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub embedder: EmbedderSpec,
    pub retriever: RetrieverSpec,
}

impl ModelSpec {
    /// Both networks at `side`, with the given embedder base/max widths and retriever width.
    pub fn new(side: usize, base_channels: usize, max_channels: usize, retriever_width: usize) -> Self {
        Self {
            embedder: EmbedderSpec::new(side, base_channels, max_channels),
            retriever: RetrieverSpec::new(side, retriever_width),
        }
    }

    pub fn side(&self) -> usize {
        self.embedder.side
    }

    pub fn validate(&self) -> Result<()> {
        self.embedder.validate()?;
        self.retriever.validate()?;
        if self.embedder.side != self.retriever.side {
            return Err(Error::config("embedder and retriever sides differ"));
        }
        Ok(())
    }
}

/// Parameters and normalization statistics of E and R.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub embedder: Embedder<T>,
    pub retriever: Retriever<T>,
}

/// Fan-in scaled random initialization; deterministic under `rng`.
pub fn init_params<T: Real, R: Rng>(spec: &ModelSpec, rng: &mut R) -> Result<ModelParams<T>> {
    spec.validate()?;
    Ok(ModelParams { embedder: Embedder::new(&spec.embedder, rng)?, retriever: Retriever::new(&spec.retriever, rng)? })
}

impl<T: Real> ModelParams<T> {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec { embedder: self.embedder.spec().clone(), retriever: self.retriever.spec().clone() }
    }

    /// Evaluation-mode feature map of one secret.
    pub fn embed(&mut self, secret: &Image) -> Result<FeatureMap> {
        Ok(self.embed_batch(std::slice::from_ref(secret))?.pop().expect("one output"))
    }

    pub fn embed_batch(&mut self, secrets: &[Image]) -> Result<Vec<FeatureMap>> {
        let (q, _) = self.embedder.forward(&images_to_tensor(secrets)?, Mode::Eval)?;
        tensor_to_maps(&q)
    }

    /// Evaluation-mode retrieval of one image.
    pub fn retrieve(&mut self, x: &Image) -> Result<Image> {
        Ok(self.retrieve_batch(std::slice::from_ref(x))?.pop().expect("one output"))
    }

    pub fn retrieve_batch(&mut self, xs: &[Image]) -> Result<Vec<Image>> {
        let (out, _) = self.retriever.forward(&images_to_tensor(xs)?, Mode::Eval)?;
        tensor_to_images(&out)
    }

    /// Named tensors of both networks, `embedder.*` then `retriever.*`.
    pub fn slots(&mut self) -> Vec<(String, Slot<'_, T>)> {
        let mut out = Vec::new();
        self.embedder.slots("embedder", &mut out);
        self.retriever.slots("retriever", &mut out);
        out
    }

    pub fn modules(&mut self) -> [&mut dyn Module<T>; 2] {
        [&mut self.embedder, &mut self.retriever]
    }

    pub fn zero_grad(&mut self) {
        self.embedder.zero_grad();
        self.retriever.zero_grad();
    }

    pub fn parameter_count(&mut self) -> usize {
        self.modules().iter_mut().flat_map(|m| m.params()).map(|(_, p)| p.value.len()).sum()
    }
}

/// `c' = clamp(c + q, 0, 1)`.
pub fn make_container(cover: &Image, q: &FeatureMap) -> Result<Image> {
    if (cover.width(), cover.height()) != (q.width(), q.height()) {
        return Err(Error::shape(format!(
            "cover {}×{} vs feature map {}×{}",
            cover.width(),
            cover.height(),
            q.width(),
            q.height()
        )));
    }
    let data = cover.data().iter().zip(q.data()).map(|(c, q)| c + q).collect();
    Image::from_clamped(cover.width(), cover.height(), data)
}

/// Clamp subgradient of [`make_container`]: one inside `[0, 1]`, zero outside.
pub fn container_mask(cover: &[f64], q: &[f64]) -> Vec<bool> {
    cover.iter().zip(q).map(|(c, q)| (0.0..=1.0).contains(&(c + q))).collect()
}

/// Stacks same-sized images into an NCHW tensor.
pub fn images_to_tensor<T: Real>(imgs: &[Image]) -> Result<Tensor<T>> {
    let first = imgs.first().ok_or_else(|| Error::shape("empty image batch"))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(imgs.len() * CHANNELS * w * h);
    for img in imgs {
        first.same_shape(img)?;
        data.extend(img.data().iter().map(|&v| T::of(v)));
    }
    Ok(Tensor::from_vec([imgs.len(), CHANNELS, h, w], data))
}

fn samples<T: Real>(t: &Tensor<T>) -> Result<impl Iterator<Item = Vec<f64>> + '_> {
    if t.c() != CHANNELS {
        return Err(Error::shape(format!("expected {CHANNELS} channels, got {}", t.c())));
    }
    Ok((0..t.n()).map(move |i| t.sample(i).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()))
}

pub fn tensor_to_images<T: Real>(t: &Tensor<T>) -> Result<Vec<Image>> {
    samples(t)?.map(|d| Image::from_clamped(t.w(), t.h(), d)).collect()
}

pub fn tensor_to_maps<T: Real>(t: &Tensor<T>) -> Result<Vec<FeatureMap>> {
    samples(t)?.map(|d| FeatureMap::new(t.w(), t.h(), d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::SeededRng;
    use rand::Rng;

    fn random_images(n: usize, side: usize, rng: &mut SeededRng) -> Vec<Image> {
        (0..n).map(|_| Image::from_fn(side, side, |_, _, _| rng.gen::<f64>())).collect()
    }

    #[test]
    fn shapes_and_ranges() {
        for side in [32, 64] {
            let spec = ModelSpec::new(side, 4, 16, 4);
            let mut rng = SeededRng::new(1);
            let mut m: ModelParams<f32> = init_params(&spec, &mut rng).unwrap();
            let s = random_images(2, side, &mut rng);
            let q = m.embed_batch(&s).unwrap();
            assert_eq!((q[0].width(), q[0].height()), (side, side));
            assert!(q.iter().flat_map(|q| q.data()).all(|v| v.abs() < 0.2 && v.is_finite()));
            let r = m.retrieve_batch(&s).unwrap();
            assert_eq!((r[0].width(), r[0].height()), (side, side));
            assert!(r.iter().flat_map(|r| r.data()).all(|v| *v > 0.0 && *v < 1.0));
            assert_eq!(m.embed(&s[0]).unwrap(), m.embed(&s[0]).unwrap());
        }
    }

    #[test]
    fn wrong_side_is_rejected() {
        let mut m: ModelParams<f32> = init_params(&ModelSpec::new(16, 4, 8, 4), &mut SeededRng::new(0)).unwrap();
        let img = Image::filled(8, 0.5);
        assert!(matches!(m.embed(&img), Err(Error::Shape(_))));
        assert!(matches!(m.retrieve(&img), Err(Error::Shape(_))));
    }

    #[test]
    fn same_seed_same_params() {
        let spec = ModelSpec::new(16, 4, 8, 4);
        let mut a: ModelParams<f32> = init_params(&spec, &mut SeededRng::new(5)).unwrap();
        let mut b: ModelParams<f32> = init_params(&spec, &mut SeededRng::new(5)).unwrap();
        let va: Vec<Vec<f32>> = a.slots().iter().map(|(_, s)| s.values().to_vec()).collect();
        let vb: Vec<Vec<f32>> = b.slots().iter().map(|(_, s)| s.values().to_vec()).collect();
        assert_eq!(va, vb);
    }

    #[test]
    fn container_examples() {
        let c = Image::filled(4, 0.5);
        assert_eq!(make_container(&c, &FeatureMap::zeros(4)).unwrap(), c);
        let q = FeatureMap::new(4, 4, vec![0.1; 48]).unwrap();
        assert!(make_container(&c, &q).unwrap().data().iter().all(|v| (v - 0.6).abs() < 1e-12));
        assert!(make_container(&Image::filled(4, 1.0), &q).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(make_container(&Image::filled(8, 0.5), &q).is_err());
    }

    #[test]
    fn first_conv_preserves_scale() {
        // Output std of the first encoder convolution relative to input std, over 100 seeds.
        use crate::nn::Conv2d;
        for seed in 0..100 {
            let mut rng = SeededRng::new(seed);
            let conv: Conv2d<f64> = Conv2d::new(3, 32, 4, 2, 1, true, &mut rng);
            let x: Vec<f64> = (0..2 * 3 * 32 * 32).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let xs = std_dev(&x);
            let y = conv.forward(&Tensor::from_vec([2, 3, 32, 32], x));
            let ratio = std_dev(y.data()) / xs;
            assert!((0.5..=2.0).contains(&ratio), "seed {seed}: {ratio}");
        }
    }

    fn std_dev(v: &[f64]) -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    }

    /// Toy loss over both networks: embedding, retrieval and clean MSE terms.
    fn toy_loss(m: &mut ModelParams<f64>, s: &Tensor<f64>, c: &Tensor<f64>, backward: bool) -> f64 {
        let n = s.len() as f64;
        let (q, etr) = m.embedder.forward(s, Mode::Train).unwrap();
        let mut cp = c.clone();
        cp.add_assign(&q);
        let (sr, rtr) = m.retriever.forward(&cp, Mode::Train).unwrap();
        let (cl, ctr) = m.retriever.forward(c, Mode::Train).unwrap();
        let l_emb: f64 = q.data().iter().map(|v| v * v).sum::<f64>() / n;
        let l_ret: f64 = sr.data().iter().zip(s.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
        let l_cln: f64 = cl.data().iter().map(|v| v * v).sum::<f64>() / n;
        if backward {
            let g_ret = Tensor::from_vec(sr.shape(), sr.data().iter().zip(s.data()).map(|(a, b)| 2.0 * (a - b) / n).collect());
            let g_cln = cl.map(|v| 2.0 * v / n);
            m.retriever.backward(ctr, &g_cln);
            let mut gq = m.retriever.backward(rtr, &g_ret);
            gq.add_assign(&q.map(|v| 2.0 * v / n));
            m.embedder.backward(etr, &gq);
        }
        l_emb + l_ret + l_cln
    }

    #[test]
    fn toy_end_to_end_gradients() {
        let spec = ModelSpec {
            embedder: EmbedderSpec::new(8, 4, 4),
            retriever: RetrieverSpec { side: 8, width: 4, down_blocks: 2, residual_blocks: 2, up_blocks: 2 },
        };
        assert_eq!(spec.embedder.depth(), 3);
        let mut rng = SeededRng::new(17);
        let mut m: ModelParams<f64> = init_params(&spec, &mut rng).unwrap();
        let s = images_to_tensor::<f64>(&random_images(2, 8, &mut rng)).unwrap();
        let c = Tensor::from_vec([2, 3, 8, 8], (0..384).map(|_| 0.3 + 0.4 * rng.gen::<f64>()).collect());
        m.zero_grad();
        let pristine = m.clone();
        toy_loss(&mut m, &s, &c, true);
        let analytic: Vec<Vec<f64>> = m.modules().iter_mut().flat_map(|md| md.params()).map(|(_, p)| p.grad.clone()).collect();
        let h = 1e-5;
        let mut checked = 0;
        let mut worst: f64 = 0.0;
        while checked < 50 {
            let t = rng.gen_range(0..analytic.len());
            let j = rng.gen_range(0..analytic[t].len());
            let eval = |delta: f64| {
                let mut probe = pristine.clone();
                {
                    let mut mods = probe.modules();
                    let mut params: Vec<_> = mods.iter_mut().flat_map(|md| md.params()).collect();
                    params[t].1.value[j] += delta;
                }
                toy_loss(&mut probe, &s, &c, false)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[t][j];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }
}
