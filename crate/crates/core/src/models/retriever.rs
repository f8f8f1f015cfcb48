//! CEILNet-style retrieval network: 3×3 conv/BN/ReLU blocks with a strided
//! last block, a stack of residual blocks, a 4×4 transposed-conv upsampling
//! block, and a sigmoid output convolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    join, relu, relu_backward, sigmoid, sigmoid_backward, BatchNorm2d, BnCache, Conv2d, ConvTranspose2d, Mode,
    Module, Real, Slot, Tensor,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieverSpec {
    pub side: usize,
    pub width: usize,
    pub down_blocks: usize,
    pub residual_blocks: usize,
    pub up_blocks: usize,
}

impl RetrieverSpec {
    pub fn new(side: usize, width: usize) -> Self {
        Self { side, width, down_blocks: 2, residual_blocks: 9, up_blocks: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.side < 2 || self.side % 2 != 0 {
            return Err(Error::config(format!("retriever side {} must be even", self.side)));
        }
        if self.width == 0 || self.down_blocks == 0 || self.up_blocks == 0 {
            return Err(Error::config("retriever needs at least one down and one up block"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Layer<T> {
    Conv(Conv2d<T>),
    Deconv(ConvTranspose2d<T>),
}

impl<T: Real> Layer<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::Deconv(c) => c.forward(x),
        }
    }

    fn backward(&mut self, x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
        match self {
            Layer::Conv(c) => c.backward(x, gy),
            Layer::Deconv(c) => c.backward(x, gy),
        }
    }

    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, Slot<'a, T>)>) {
        match self {
            Layer::Conv(c) => c.slots(prefix, out),
            Layer::Deconv(c) => c.slots(prefix, out),
        }
    }
}

/// Convolution, batch norm, optional ReLU.
#[derive(Debug, Clone)]
struct Unit<T> {
    layer: Layer<T>,
    bn: BatchNorm2d<T>,
    relu: bool,
}

struct UnitTrace<T> {
    input: Tensor<T>,
    bn: BnCache<T>,
    out: Tensor<T>,
}

impl<T: Real> Unit<T> {
    fn conv<R: Rng>(in_ch: usize, out_ch: usize, stride: usize, relu: bool, rng: &mut R) -> Self {
        Self { layer: Layer::Conv(Conv2d::new(in_ch, out_ch, 3, stride, 1, false, rng)), bn: BatchNorm2d::new(out_ch), relu }
    }

    fn deconv<R: Rng>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self {
            layer: Layer::Deconv(ConvTranspose2d::new(in_ch, out_ch, 4, 2, 1, false, rng)),
            bn: BatchNorm2d::new(out_ch),
            relu: true,
        }
    }

    fn forward(&mut self, x: Tensor<T>, mode: Mode) -> (Tensor<T>, UnitTrace<T>) {
        let pre = self.layer.forward(&x);
        let (normed, bn) = self.bn.forward(&pre, mode);
        let out = if self.relu { relu(&normed) } else { normed };
        (out.clone(), UnitTrace { input: x, bn, out })
    }

    fn backward(&mut self, tr: UnitTrace<T>, g: &Tensor<T>) -> Tensor<T> {
        let g = if self.relu { relu_backward(&tr.out, g) } else { g.clone() };
        let g = self.bn.backward(&tr.bn, &g);
        self.layer.backward(&tr.input, &g)
    }

    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, Slot<'a, T>)>) {
        self.layer.slots(&join(prefix, "conv"), out);
        self.bn.slots(&join(prefix, "bn"), out);
    }
}

#[derive(Debug, Clone)]
pub struct Retriever<T> {
    spec: RetrieverSpec,
    down: Vec<Unit<T>>,
    /// Pairs of units; each pair plus identity forms one residual block.
    residual: Vec<(Unit<T>, Unit<T>)>,
    up: Vec<Unit<T>>,
    head: Conv2d<T>,
}

pub struct RetrieveTrace<T> {
    down: Vec<UnitTrace<T>>,
    residual: Vec<(UnitTrace<T>, UnitTrace<T>)>,
    up: Vec<UnitTrace<T>>,
    head_input: Tensor<T>,
    out: Tensor<T>,
}

impl<T: Real> Retriever<T> {
    pub fn new<R: Rng>(spec: &RetrieverSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let w = spec.width;
        let down = (0..spec.down_blocks)
            .map(|i| {
                let in_ch = if i == 0 { 3 } else { w };
                let stride = if i + 1 == spec.down_blocks { 2 } else { 1 };
                Unit::conv(in_ch, w, stride, true, rng)
            })
            .collect();
        let residual = (0..spec.residual_blocks)
            .map(|_| (Unit::conv(w, w, 1, true, rng), Unit::conv(w, w, 1, false, rng)))
            .collect();
        let up = (0..spec.up_blocks)
            .map(|i| if i == 0 { Unit::deconv(w, w, rng) } else { Unit::conv(w, w, 1, true, rng) })
            .collect();
        let head = Conv2d::new(w, 3, 3, 1, 1, true, rng);
        Ok(Self { spec: spec.clone(), down, residual, up, head })
    }

    pub fn spec(&self) -> &RetrieverSpec {
        &self.spec
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, RetrieveTrace<T>)> {
        let s = self.spec.side;
        if x.c() != 3 || x.h() != s || x.w() != s {
            return Err(Error::shape(format!("retriever expects 3×{s}×{s}, got {:?}", x.shape())));
        }
        let mut h = x.clone();
        let mut down = Vec::with_capacity(self.down.len());
        for u in &mut self.down {
            let (o, tr) = u.forward(h, mode);
            down.push(tr);
            h = o;
        }
        let mut residual = Vec::with_capacity(self.residual.len());
        for (a, b) in &mut self.residual {
            let (mid, ta) = a.forward(h.clone(), mode);
            let (mut o, tb) = b.forward(mid, mode);
            o.add_assign(&h);
            residual.push((ta, tb));
            h = o;
        }
        let mut up = Vec::with_capacity(self.up.len());
        for u in &mut self.up {
            let (o, tr) = u.forward(h, mode);
            up.push(tr);
            h = o;
        }
        let out = sigmoid(&self.head.forward(&h));
        Ok((out.clone(), RetrieveTrace { down, residual, up, head_input: h, out }))
    }

    pub fn backward(&mut self, trace: RetrieveTrace<T>, gy: &Tensor<T>) -> Tensor<T> {
        let g = sigmoid_backward(&trace.out, gy);
        let mut g = self.head.backward(&trace.head_input, &g);
        for (u, tr) in self.up.iter_mut().zip(trace.up).rev() {
            g = u.backward(tr, &g);
        }
        for ((a, b), (ta, tb)) in self.residual.iter_mut().zip(trace.residual).rev() {
            let g_mid = b.backward(tb, &g);
            let mut g_in = a.backward(ta, &g_mid);
            g_in.add_assign(&g);
            g = g_in;
        }
        for (u, tr) in self.down.iter_mut().zip(trace.down).rev() {
            g = u.backward(tr, &g);
        }
        g
    }
}

impl<T: Real> Module<T> for Retriever<T> {
    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, Slot<'a, T>)>) {
        for (i, u) in self.down.iter_mut().enumerate() {
            u.slots(&join(prefix, &format!("down{i}")), out);
        }
        for (i, (a, b)) in self.residual.iter_mut().enumerate() {
            a.slots(&join(prefix, &format!("res{i}.a")), out);
            b.slots(&join(prefix, &format!("res{i}.b")), out);
        }
        for (i, u) in self.up.iter_mut().enumerate() {
            u.slots(&join(prefix, &format!("up{i}")), out);
        }
        self.head.slots(&join(prefix, "head"), out);
    }
}
