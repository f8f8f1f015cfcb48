//! UNet-style embedding network: strided 4×4 convolutions down to a 1×1
//! bottleneck, transposed convolutions back up with skip connections, and a
//! sigmoid head turned into the additive feature map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    join, leaky_relu, leaky_relu_backward, relu, relu_backward, sigmoid, sigmoid_backward, BatchNorm2d,
    BnCache, Conv2d, ConvTranspose2d, Mode, Module, Real, Slot, Tensor,
};

/// How the sigmoid output becomes the feature map added to the cover.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum OutputMapping {
    /// `q = strength * (2σ - 1)`, zero-centered.
    Residual { strength: f64 },
    /// `q = σ`, the raw sigmoid output.
    PaperFaithful,
}

impl Default for OutputMapping {
    fn default() -> Self {
        OutputMapping::Residual { strength: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub side: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub output: OutputMapping,
}

impl EmbedderSpec {
    pub fn new(side: usize, base_channels: usize, max_channels: usize) -> Self {
        Self { side, base_channels, max_channels, output: OutputMapping::default() }
    }

    /// Number of 2× downsamplings, so that the bottleneck is 1×1.
    pub fn depth(&self) -> usize {
        self.side.trailing_zeros() as usize
    }

    /// Output channels of every encoder level.
    pub fn widths(&self) -> Vec<usize> {
        (0..self.depth()).map(|i| (self.base_channels << i).min(self.max_channels)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.side.is_power_of_two() || self.side < 2 {
            return Err(Error::config(format!("embedder side {} must be a power of two ≥ 2", self.side)));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(Error::config("embedder channel widths must satisfy 0 < base ≤ max"));
        }
        if let OutputMapping::Residual { strength } = self.output {
            if !(strength > 0.0 && strength.is_finite()) {
                return Err(Error::config("embedding strength must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Down<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
}

#[derive(Debug, Clone)]
struct Up<T> {
    conv: ConvTranspose2d<T>,
    bn: Option<BatchNorm2d<T>>,
}

#[derive(Debug, Clone)]
pub struct Embedder<T> {
    spec: EmbedderSpec,
    down: Vec<Down<T>>,
    /// Ordered from the bottleneck outwards; the last one is the output layer.
    up: Vec<Up<T>>,
}

struct DownTrace<T> {
    input: Tensor<T>,
    pre_act: Tensor<T>,
    bn: BnCache<T>,
}

struct UpTrace<T> {
    input: Tensor<T>,
    act: Tensor<T>,
    bn: Option<BnCache<T>>,
}

/// Intermediate values of one forward pass, consumed by `backward`.
pub struct EmbedTrace<T> {
    down: Vec<DownTrace<T>>,
    up: Vec<UpTrace<T>>,
    sigma: Tensor<T>,
}

impl<T: Real> Embedder<T> {
    pub fn new<R: Rng>(spec: &EmbedderSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        let depth = widths.len();
        let mut down = Vec::with_capacity(depth);
        let mut prev = 3;
        for &w in &widths {
            down.push(Down { conv: Conv2d::new(prev, w, 4, 2, 1, true, rng), bn: BatchNorm2d::new(w) });
            prev = w;
        }
        let mut up = Vec::with_capacity(depth);
        for level in (0..depth).rev() {
            let in_ch = if level == depth - 1 { widths[level] } else { 2 * widths[level] };
            if level == 0 {
                up.push(Up { conv: ConvTranspose2d::new(in_ch, 3, 4, 2, 1, true, rng), bn: None });
            } else {
                let out = widths[level - 1];
                up.push(Up {
                    conv: ConvTranspose2d::new(in_ch, out, 4, 2, 1, true, rng),
                    bn: Some(BatchNorm2d::new(out)),
                });
            }
        }
        Ok(Self { spec: spec.clone(), down, up })
    }

    pub fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.spec.side;
        if x.c() != 3 || x.h() != s || x.w() != s {
            return Err(Error::shape(format!("embedder expects 3×{s}×{s}, got {:?}", x.shape())));
        }
        Ok(())
    }

    /// Secret batch to feature-map batch.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, EmbedTrace<T>)> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        let mut down_tr = Vec::with_capacity(self.down.len());
        let mut h = x.clone();
        for block in &mut self.down {
            let pre = block.conv.forward(&h);
            let act = leaky_relu(&pre, 0.2);
            let (out, bn) = block.bn.forward(&act, mode);
            down_tr.push(DownTrace { input: h, pre_act: pre, bn });
            skips.push(out.clone());
            h = out;
        }
        let depth = self.down.len();
        let mut up_tr = Vec::with_capacity(depth);
        let mut sigma = None;
        for (i, block) in self.up.iter_mut().enumerate() {
            let level = depth - 1 - i;
            let input = if i == 0 { h.clone() } else { Tensor::concat_channels(&h, &skips[level]) };
            let pre = block.conv.forward(&input);
            match &mut block.bn {
                Some(bn) => {
                    let act = relu(&pre);
                    let (out, cache) = bn.forward(&act, mode);
                    up_tr.push(UpTrace { input, act, bn: Some(cache) });
                    h = out;
                }
                None => {
                    let s = sigmoid(&pre);
                    up_tr.push(UpTrace { input, act: s.clone(), bn: None });
                    sigma = Some(s);
                }
            }
        }
        let sigma = sigma.expect("output layer");
        let q = match self.spec.output {
            OutputMapping::Residual { strength } => {
                let a = T::of(strength);
                let two = T::of(2.0);
                sigma.map(|v| a * (two * v - T::one()))
            }
            OutputMapping::PaperFaithful => sigma.clone(),
        };
        Ok((q, EmbedTrace { down: down_tr, up: up_tr, sigma }))
    }

    /// Accumulates parameter gradients given `dL/dq`; returns `dL/dx`.
    pub fn backward(&mut self, trace: EmbedTrace<T>, gq: &Tensor<T>) -> Tensor<T> {
        let scale = match self.spec.output {
            OutputMapping::Residual { strength } => T::of(2.0 * strength),
            OutputMapping::PaperFaithful => T::one(),
        };
        let gsigma = gq.map(|g| g * scale);
        let depth = self.down.len();
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; depth];
        let mut g = sigmoid_backward(&trace.sigma, &gsigma);
        for (i, (block, tr)) in self.up.iter_mut().zip(trace.up).enumerate().rev() {
            if let (Some(bn), Some(cache)) = (&mut block.bn, &tr.bn) {
                let g_act = bn.backward(cache, &g);
                g = relu_backward(&tr.act, &g_act);
            }
            let g_in = block.conv.backward(&tr.input, &g);
            let level = depth - 1 - i;
            if i == 0 {
                g = g_in;
            } else {
                let from_below = tr.input.c() - self.down[level].bn.channels();
                let (g_h, g_skip) = g_in.split_channels(from_below);
                skip_grads[level] = Some(g_skip);
                g = g_h;
            }
        }
        for (level, (block, tr)) in self.down.iter_mut().zip(trace.down).enumerate().rev() {
            if let Some(gs) = skip_grads[level].take() {
                if level != depth - 1 {
                    g.add_assign(&gs);
                }
            }
            let g_act = block.bn.backward(&tr.bn, &g);
            let g_pre = leaky_relu_backward(&tr.pre_act, &g_act, 0.2);
            g = block.conv.backward(&tr.input, &g_pre);
        }
        g
    }
}

impl<T: Real> Module<T> for Embedder<T> {
    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, Slot<'a, T>)>) {
        for (i, b) in self.down.iter_mut().enumerate() {
            b.conv.slots(&join(prefix, &format!("down{i}.conv")), out);
            b.bn.slots(&join(prefix, &format!("down{i}.bn")), out);
        }
        for (i, b) in self.up.iter_mut().enumerate() {
            b.conv.slots(&join(prefix, &format!("up{i}.conv")), out);
            if let Some(bn) = &mut b.bn {
                bn.slots(&join(prefix, &format!("up{i}.bn")), out);
            }
        }
    }
}
