use rand::Rng;

use super::{join, Module, Param, Real, Slot, Tensor};

/// Sliding-window geometry of a convolution over a `c × h × w` plane stack.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Self { c, h, w, k, stride, pad, oh, ow }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Source index along one axis, `None` when it falls in the zero padding.
    #[inline]
    fn src(o: usize, kk: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        let i = (o * stride + kk) as isize - pad as isize;
        (i >= 0 && (i as usize) < len).then_some(i as usize)
    }

    /// Output columns `[lo, hi)` whose source column for tap `kx` lies inside the plane.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(self.stride) };
        let hi = if self.w + self.pad > kx { ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.ow) } else { 0 };
        (lo.min(hi), hi)
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let n = self.cols();
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.oh {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match Self::src(oy, ky, self.stride, self.pad, self.h) {
                            None => line.fill(T::zero()),
                            Some(iy) => {
                                let src = &plane[iy * self.w..(iy + 1) * self.w];
                                line[..lo].fill(T::zero());
                                line[hi..].fill(T::zero());
                                let start = lo * self.stride + kx - self.pad;
                                if self.stride == 1 {
                                    line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                                } else {
                                    for (j, d) in line[lo..hi].iter_mut().enumerate() {
                                        *d = src[start + j * self.stride];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatters-adds columns back into `x`.
    fn col2im<T: Real>(&self, cols: &[T], x: &mut [T]) {
        let n = self.cols();
        for ci in 0..self.c {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    let (lo, hi) = self.valid_cols(kx);
                    if lo >= hi {
                        continue;
                    }
                    let start = lo * self.stride + kx - self.pad;
                    for oy in 0..self.oh {
                        let Some(iy) = Self::src(oy, ky, self.stride, self.pad, self.h) else {
                            continue;
                        };
                        let line = &src[oy * self.ow + lo..oy * self.ow + hi];
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        if self.stride == 1 {
                            for (d, &v) in dst[start..start + line.len()].iter_mut().zip(line) {
                                *d += v;
                            }
                        } else {
                            for (j, &v) in line.iter().enumerate() {
                                dst[start + j * self.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2D convolution, weight layout `[out, in, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let bound = (3.0 / fan_in).sqrt();
        let weight = Param::uniform(&[out_ch, in_ch, kernel, kernel], bound, rng);
        let bias = bias.then(|| Param::uniform(&[out_ch], 1.0 / fan_in.sqrt(), rng));
        Self { weight, bias, in_ch, out_ch, kernel, stride, pad }
    }

    fn geometry(&self, x: &Tensor<T>) -> Geometry {
        assert_eq!(x.c(), self.in_ch, "conv input channels");
        Geometry::new(self.in_ch, x.h(), x.w(), self.kernel, self.stride, self.pad)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let g = self.geometry(x);
        let (k, n) = (g.rows(), g.cols());
        let mut y = Tensor::zeros([x.n(), self.out_ch, g.oh, g.ow]);
        T::with_scratch(k * n, 0, |cols, _| {
            for i in 0..x.n() {
                g.im2col(x.sample(i), cols);
                let out = y.sample_mut(i);
                if let Some(b) = &self.bias {
                    for (o, &bv) in b.value.iter().enumerate() {
                        out[o * n..(o + 1) * n].fill(bv);
                    }
                }
                let beta = if self.bias.is_some() { T::one() } else { T::zero() };
                T::gemm(self.out_ch, k, n, &self.weight.value, k, 1, cols, n, 1, beta, out, n, 1);
            }
        });
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
        let g = self.geometry(x);
        let (k, n) = (g.rows(), g.cols());
        assert_eq!(gy.shape(), [x.n(), self.out_ch, g.oh, g.ow], "conv grad shape");
        let mut gx = Tensor::zeros(x.shape());
        T::with_scratch(k * n, k * n, |cols, gcols| {
            for i in 0..x.n() {
                let go = gy.sample(i);
                g.im2col(x.sample(i), cols);
                T::gemm(self.out_ch, n, k, go, n, 1, cols, 1, n, T::one(), &mut self.weight.grad, k, 1);
                if let Some(b) = &mut self.bias {
                    for (o, gb) in b.grad.iter_mut().enumerate() {
                        for &v in &go[o * n..(o + 1) * n] {
                            *gb += v;
                        }
                    }
                }
                T::gemm(k, self.out_ch, n, &self.weight.value, 1, k, go, n, 1, T::zero(), gcols, n, 1);
                g.col2im(gcols, gx.sample_mut(i));
            }
        });
        gx
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, Slot<'a, T>)>) {
        out.push((join(prefix, "weight"), Slot::Param(&mut self.weight)));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), Slot::Param(b)));
        }
    }
}

/// Transposed 2D convolution, weight layout `[in, out, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        // Each output pixel sees about in_ch * (k / stride)^2 inputs.
        let per_axis = (kernel / stride).max(1);
        let fan_in = (in_ch * per_axis * per_axis) as f64;
        let bound = (3.0 / fan_in).sqrt();
        let weight = Param::uniform(&[in_ch, out_ch, kernel, kernel], bound, rng);
        let bias = bias.then(|| Param::uniform(&[out_ch], 1.0 / fan_in.sqrt(), rng));
        Self { weight, bias, in_ch, out_ch, kernel, stride, pad }
    }

    pub fn output_side(&self, side: usize) -> usize {
        (side - 1) * self.stride + self.kernel - 2 * self.pad
    }

    /// The forward convolution this layer is the adjoint of, seen from the output.
    fn geometry(&self, x: &Tensor<T>) -> Geometry {
        assert_eq!(x.c(), self.in_ch, "conv-transpose input channels");
        let (oh, ow) = (self.output_side(x.h()), self.output_side(x.w()));
        let g = Geometry::new(self.out_ch, oh, ow, self.kernel, self.stride, self.pad);
        assert_eq!((g.oh, g.ow), (x.h(), x.w()), "conv-transpose geometry");
        g
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let g = self.geometry(x);
        let (k, n) = (g.rows(), g.cols());
        let mut y = Tensor::zeros([x.n(), self.out_ch, g.h, g.w]);
        let hw = g.h * g.w;
        T::with_scratch(k * n, 0, |cols, _| {
            for i in 0..x.n() {
                T::gemm(k, self.in_ch, n, &self.weight.value, 1, k, x.sample(i), n, 1, T::zero(), cols, n, 1);
                let out = y.sample_mut(i);
                if let Some(b) = &self.bias {
                    for (o, &bv) in b.value.iter().enumerate() {
                        out[o * hw..(o + 1) * hw].fill(bv);
                    }
                }
                g.col2im(cols, out);
            }
        });
        y
    }

    pub fn backward(&mut self, x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
        let g = self.geometry(x);
        let (k, n) = (g.rows(), g.cols());
        assert_eq!(gy.shape(), [x.n(), self.out_ch, g.h, g.w], "conv-transpose grad shape");
        let mut gx = Tensor::zeros(x.shape());
        let hw = g.h * g.w;
        T::with_scratch(k * n, 0, |gcols, _| {
            for i in 0..x.n() {
                let go = gy.sample(i);
                g.im2col(go, gcols);
                T::gemm(self.in_ch, k, n, &self.weight.value, k, 1, gcols, n, 1, T::zero(), gx.sample_mut(i), n, 1);
                T::gemm(self.in_ch, n, k, x.sample(i), n, 1, gcols, 1, n, T::one(), &mut self.weight.grad, k, 1);
                if let Some(b) = &mut self.bias {
                    for (o, gb) in b.grad.iter_mut().enumerate() {
                        for &v in &go[o * hw..(o + 1) * hw] {
                            *gb += v;
                        }
                    }
                }
            }
        });
        gx
    }
}

impl<T: Real> Module<T> for ConvTranspose2d<T> {
    fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, Slot<'a, T>)>) {
        out.push((join(prefix, "weight"), Slot::Param(&mut self.weight)));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), Slot::Param(b)));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, true, &mut rng);
        let x = random([2, 2, 5, 5], &mut rng);
        let y = conv.forward(&x);
        assert_eq!(y.shape(), [2, 3, 3, 3]);
        for n in 0..2 {
            for o in 0..3 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut acc = conv.bias.as_ref().unwrap().value[o];
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 5 {
                                        continue;
                                    }
                                    let w = conv.weight.value[((o * 2 + ci) * 3 + ky) * 3 + kx];
                                    acc += w * x.data()[((n * 2 + ci) * 5 + iy as usize) * 5 + ix as usize];
                                }
                            }
                        }
                        let got = y.data()[((n * 3 + o) * 3 + oy) * 3 + ox];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> when both share weights and have no bias.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::<f64>::new(3, 4, 4, 2, 1, false, &mut rng);
        let mut convt = ConvTranspose2d::<f64>::new(4, 3, 4, 2, 1, false, &mut rng);
        convt.weight.value = conv.weight.value.clone();
        let x = random([1, 3, 8, 8], &mut rng);
        let y = random([1, 4, 4, 4], &mut rng);
        let lhs = dot(&conv.forward(&x), &y);
        let rhs = dot(&x, &convt.forward(&y));
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    fn check_grads(layer_fwd: &dyn Fn(&Tensor<f64>, &[f64]) -> Tensor<f64>, x: &Tensor<f64>, w: &[f64], gx: &Tensor<f64>, gw: &[f64], gy: &Tensor<f64>) {
        let h = 1e-6;
        let loss = |x: &Tensor<f64>, w: &[f64]| dot(&layer_fwd(x, w), gy);
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp, w) - loss(&xm, w)) / (2.0 * h);
            assert!((fd - gx.data()[i]).abs() < 1e-6, "x[{i}]: {fd} vs {}", gx.data()[i]);
        }
        for i in 0..w.len() {
            let mut wp = w.to_vec();
            wp[i] += h;
            let mut wm = w.to_vec();
            wm[i] -= h;
            let fd = (loss(x, &wp) - loss(x, &wm)) / (2.0 * h);
            assert!((fd - gw[i]).abs() < 1e-6, "w[{i}]: {fd} vs {}", gw[i]);
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::<f64>::new(2, 2, 3, 1, 1, false, &mut rng);
        let x = random([2, 2, 4, 4], &mut rng);
        let gy = random([2, 2, 4, 4], &mut rng);
        let gx = conv.backward(&x, &gy);
        let template = conv.clone();
        let fwd = |x: &Tensor<f64>, w: &[f64]| {
            let mut c = template.clone();
            c.weight.value = w.to_vec();
            c.forward(x)
        };
        check_grads(&fwd, &x, &conv.weight.value, &gx, &conv.weight.grad, &gy);
    }

    #[test]
    fn conv_transpose_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut convt = ConvTranspose2d::<f64>::new(2, 2, 4, 2, 1, true, &mut rng);
        let x = random([2, 2, 2, 2], &mut rng);
        let gy = random([2, 2, 4, 4], &mut rng);
        let gx = convt.backward(&x, &gy);
        let template = convt.clone();
        let fwd = |x: &Tensor<f64>, w: &[f64]| {
            let mut c = template.clone();
            c.weight.value = w.to_vec();
            c.forward(x)
        };
        check_grads(&fwd, &x, &convt.weight.value, &gx, &convt.weight.grad, &gy);
        let gb: f64 = gy.data().iter().take(16).sum::<f64>() + gy.data()[32..48].iter().sum::<f64>();
        assert!((convt.bias.as_ref().unwrap().grad[0] - gb).abs() < 1e-12);
    }
}
