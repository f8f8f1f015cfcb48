//! Frequency-domain tools: centered 2D DFT, ideal (or Gaussian) circular
//! filters, the focal frequency loss with its analytic gradient, and the
//! azimuthally integrated power spectrum.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{FeatureMap, Image, CHANNELS};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// Unnormalized 2D FFT in place, natural (uncentered) order, row-major `h × w`.
fn fft2_in_place(buf: &mut [Complex64], w: usize, h: usize, inverse: bool) {
    let row = plan(w, inverse);
    for line in buf.chunks_exact_mut(w) {
        row.process(line);
    }
    let col = plan(h, inverse);
    let mut tmp = vec![Complex64::default(); h];
    for x in 0..w {
        for y in 0..h {
            tmp[y] = buf[y * w + x];
        }
        col.process(&mut tmp);
        for y in 0..h {
            buf[y * w + x] = tmp[y];
        }
    }
}

/// Index in natural order of centered position `k` along an axis of length `n`.
#[inline]
fn uncentered(k: usize, n: usize) -> usize {
    (k + n - n / 2) % n
}

/// Distance of centered bin `(u, v)` from the zero-frequency bin at `(w/2, h/2)`.
#[inline]
pub fn centered_radius(u: usize, v: usize, w: usize, h: usize) -> f64 {
    let du = u as f64 - (w / 2) as f64;
    let dv = v as f64 - (h / 2) as f64;
    (du * du + dv * dv).sqrt()
}

/// Largest centered radius: the corner bin.
pub fn r_max(w: usize, h: usize) -> f64 {
    let (a, b) = ((w / 2) as f64, (h / 2) as f64);
    (a * a + b * b).sqrt()
}

/// Complex spectrum of one channel, zero frequency at `(w/2, h/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    width: usize,
    height: usize,
    bins: Vec<Complex64>,
}

impl Spectrum {
    pub fn from_centered(width: usize, height: usize, bins: Vec<Complex64>) -> Result<Self> {
        if bins.len() != width * height {
            return Err(Error::shape("spectrum bin count does not match dimensions"));
        }
        Ok(Self { width, height, bins })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bins(&self) -> &[Complex64] {
        &self.bins
    }

    /// Bin at centered coordinates.
    pub fn at(&self, u: usize, v: usize) -> Complex64 {
        self.bins[v * self.width + u]
    }

    pub fn energy(&self) -> f64 {
        self.bins.iter().map(|z| z.norm_sqr()).sum()
    }

    fn from_natural(width: usize, height: usize, natural: &[Complex64]) -> Self {
        let mut bins = vec![Complex64::default(); width * height];
        for v in 0..height {
            let sv = uncentered(v, height);
            for u in 0..width {
                bins[v * width + u] = natural[sv * width + uncentered(u, width)];
            }
        }
        Self { width, height, bins }
    }

    fn to_natural(&self) -> Vec<Complex64> {
        let (w, h) = (self.width, self.height);
        let mut out = vec![Complex64::default(); w * h];
        for v in 0..h {
            let sv = uncentered(v, h);
            for u in 0..w {
                out[sv * w + uncentered(u, w)] = self.bins[v * w + u];
            }
        }
        out
    }
}

/// Centered DFT of a single real plane.
pub fn dft2_plane(plane: &[f64], width: usize, height: usize) -> Spectrum {
    assert_eq!(plane.len(), width * height, "plane size");
    let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_in_place(&mut buf, width, height, false);
    Spectrum::from_natural(width, height, &buf)
}

/// Inverse of [`dft2_plane`] (normalized by `1/(w·h)`), complex output.
pub fn idft2_plane(spec: &Spectrum) -> Vec<Complex64> {
    let mut buf = spec.to_natural();
    fft2_in_place(&mut buf, spec.width, spec.height, true);
    let scale = 1.0 / (spec.width * spec.height) as f64;
    buf.iter_mut().for_each(|z| *z *= scale);
    buf
}

/// Real part of the inverse transform; the imaginary residue of a
/// conjugate-symmetric spectrum is checked in debug builds.
pub fn idft2_real(spec: &Spectrum) -> Vec<f64> {
    let out = idft2_plane(spec);
    if cfg!(debug_assertions) {
        let peak = out.iter().fold(1.0f64, |m, z| m.max(z.re.abs()));
        let residue = out.iter().fold(0.0f64, |m, z| m.max(z.im.abs()));
        debug_assert!(residue <= 1e-9 * peak, "imaginary residue {residue} after inverse DFT");
    }
    out.into_iter().map(|z| z.re).collect()
}

/// Per-channel centered spectra of an image.
pub fn dft2(img: &Image) -> Vec<Spectrum> {
    (0..CHANNELS).map(|c| dft2_plane(img.plane(c), img.width(), img.height())).collect()
}

/// Radius of the kept low-frequency disk, in centered-spectrum pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffRadius(f64);

impl CutoffRadius {
    pub fn new(d: f64, width: usize, height: usize) -> Result<Self> {
        let max = r_max(width, height);
        if !(0.0..=max).contains(&d) {
            return Err(Error::config(format!("cutoff radius {d} outside [0, {max:.4}]")));
        }
        Ok(Self(d))
    }

    /// Every bin kept, whatever the size.
    pub fn all_pass(width: usize, height: usize) -> Self {
        Self(r_max(width, height))
    }

    /// A radius given at the 256-pixel reference resolution, rescaled to `side`.
    pub fn scaled_from_256(d: f64, side: usize) -> Result<Self> {
        Self::new(d * side as f64 / 256.0, side, side)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterShape {
    #[default]
    Ideal,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Low,
    High,
}

/// Keep weight of centered bin `(u, v)`.
pub fn mask_weight(u: usize, v: usize, w: usize, h: usize, d: CutoffRadius, band: Band, shape: FilterShape) -> f64 {
    let r = centered_radius(u, v, w, h);
    let low = match shape {
        FilterShape::Ideal => {
            if r <= d.0 {
                1.0
            } else {
                0.0
            }
        }
        FilterShape::Gaussian => {
            if d.0 == 0.0 {
                if r == 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                (-(r * r) / (2.0 * d.0 * d.0)).exp()
            }
        }
    };
    match band {
        Band::Low => low,
        Band::High => 1.0 - low,
    }
}

/// Filters stacked planes without clamping.
pub fn filter_planes(
    data: &[f64],
    width: usize,
    height: usize,
    d: CutoffRadius,
    band: Band,
    shape: FilterShape,
) -> Vec<f64> {
    let n = width * height;
    assert_eq!(data.len() % n, 0, "plane stack size");
    let mut out = Vec::with_capacity(data.len());
    for plane in data.chunks_exact(n) {
        let mut spec = dft2_plane(plane, width, height);
        for v in 0..height {
            for u in 0..width {
                spec.bins[v * width + u] *= mask_weight(u, v, width, height, d, band, shape);
            }
        }
        out.extend(idft2_real(&spec));
    }
    out
}

/// Ideal low-pass filter of an image, clamped back into range.
pub fn low_pass(img: &Image, d: CutoffRadius) -> Image {
    low_pass_shaped(img, d, FilterShape::Ideal)
}

pub fn low_pass_shaped(img: &Image, d: CutoffRadius, shape: FilterShape) -> Image {
    let raw = filter_planes(img.data(), img.width(), img.height(), d, Band::Low, shape);
    Image::from_clamped(img.width(), img.height(), raw).expect("shape preserved")
}

/// Ideal high-pass filter of an image (complement mask), clamped.
pub fn high_pass(img: &Image, d: CutoffRadius) -> Image {
    let raw = filter_planes(img.data(), img.width(), img.height(), d, Band::High, FilterShape::Ideal);
    Image::from_clamped(img.width(), img.height(), raw).expect("shape preserved")
}

/// Low-pass filter of a feature map; feature maps carry no range, so nothing is clamped.
pub fn low_pass_map(q: &FeatureMap, d: CutoffRadius) -> FeatureMap {
    let raw = filter_planes(q.data(), q.width(), q.height(), d, Band::Low, FilterShape::Ideal);
    FeatureMap::new(q.width(), q.height(), raw).expect("shape preserved")
}

/// Fraction of spectral energy at centered radius above `d`.
pub fn out_of_band_fraction(data: &[f64], width: usize, height: usize, d: CutoffRadius) -> f64 {
    let (mut outside, mut total) = (0.0, 0.0);
    for plane in data.chunks_exact(width * height) {
        let spec = dft2_plane(plane, width, height);
        for v in 0..height {
            for u in 0..width {
                let e = spec.at(u, v).norm_sqr();
                total += e;
                if centered_radius(u, v, width, height) > d.0 {
                    outside += e;
                }
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        outside / total
    }
}

/// Value and gradient of the focal frequency loss.
#[derive(Debug, Clone)]
pub struct FocalLoss {
    pub loss: f64,
    /// `dL/dq`, same layout as `q`.
    pub grad: Vec<f64>,
    /// Spectral weights used, per channel, in natural (uncentered) order.
    pub weights: Vec<Vec<f64>>,
}

/// Spectral weights `|ΔF|^alpha`, normalized to a maximum of one per channel.
pub fn focal_weights(q: &[f64], target: &[f64], width: usize, height: usize, alpha: f64) -> Vec<Vec<f64>> {
    let n = width * height;
    q.chunks_exact(n)
        .zip(target.chunks_exact(n))
        .map(|(a, b)| {
            let diff = natural_diff(a, b, width, height);
            let mut w: Vec<f64> = diff.iter().map(|z| z.norm().powf(alpha)).collect();
            let peak = w.iter().cloned().fold(0.0, f64::max);
            if peak > 0.0 {
                w.iter_mut().for_each(|v| *v /= peak);
            }
            w
        })
        .collect()
}

fn natural_diff(a: &[f64], b: &[f64], width: usize, height: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = a.iter().zip(b).map(|(x, y)| Complex64::new(x - y, 0.0)).collect();
    fft2_in_place(&mut buf, width, height, false);
    buf
}

/// Focal frequency loss with given (constant) weights:
/// `mean_c (1/(w·h)) Σ weight·|F_q − F_target|²`, and its gradient in `q`.
pub fn focal_frequency_loss_weighted(
    q: &[f64],
    target: &[f64],
    width: usize,
    height: usize,
    weights: &[Vec<f64>],
) -> Result<(f64, Vec<f64>)> {
    let n = width * height;
    if q.len() != target.len() || q.len() % n != 0 || weights.len() != q.len() / n {
        return Err(Error::shape("focal frequency loss operands disagree in shape"));
    }
    let channels = q.len() / n;
    let norm = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(q.len());
    for ((a, b), w) in q.chunks_exact(n).zip(target.chunks_exact(n)).zip(weights) {
        let mut diff = natural_diff(a, b, width, height);
        let mut acc = 0.0;
        for (z, &wt) in diff.iter_mut().zip(w) {
            acc += wt * z.norm_sqr();
            *z *= wt;
        }
        loss += norm * acc;
        // d/dq of Σ w|F(q−t)|² is 2·Re(Fᴴ(w·ΔF)); Fᴴ is the unnormalized inverse.
        fft2_in_place(&mut diff, width, height, true);
        let scale = 2.0 * norm / channels as f64;
        grad.extend(diff.iter().map(|z| scale * z.re));
    }
    Ok((loss / channels as f64, grad))
}

/// Focal frequency loss between a feature map and its target, weights
/// `|ΔF|` normalized per channel and held constant for the gradient.
pub fn focal_frequency_loss(q: &FeatureMap, target: &FeatureMap) -> Result<FocalLoss> {
    if (q.width(), q.height()) != (target.width(), target.height()) {
        return Err(Error::shape("focal frequency loss operands disagree in shape"));
    }
    focal_frequency_loss_raw(q.data(), target.data(), q.width(), q.height())
}

pub fn focal_frequency_loss_raw(q: &[f64], target: &[f64], width: usize, height: usize) -> Result<FocalLoss> {
    if q.len() != target.len() {
        return Err(Error::shape("focal frequency loss operands disagree in shape"));
    }
    let weights = focal_weights(q, target, width, height, 1.0);
    let (loss, grad) = focal_frequency_loss_weighted(q, target, width, height, &weights)?;
    Ok(FocalLoss { loss, grad, weights })
}

/// Power spectrum integrated over rings of integer radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialSpectrum {
    pub values: Vec<f64>,
}

impl RadialSpectrum {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Divides by total energy (no-op for an all-zero spectrum).
    pub fn normalized(&self) -> Self {
        let t = self.total();
        if t == 0.0 {
            return self.clone();
        }
        Self { values: self.values.iter().map(|v| v / t).collect() }
    }

    /// Element-wise mean of several spectra of equal length.
    pub fn mean(spectra: &[RadialSpectrum]) -> Result<Self> {
        let first = spectra.first().ok_or_else(|| Error::config("no spectra to average"))?;
        let mut values = vec![0.0; first.values.len()];
        for s in spectra {
            if s.values.len() != values.len() {
                return Err(Error::shape("radial spectra of different lengths"));
            }
            for (a, b) in values.iter_mut().zip(&s.values) {
                *a += b;
            }
        }
        let k = spectra.len() as f64;
        values.iter_mut().for_each(|v| *v /= k);
        Ok(Self { values })
    }

    /// `radius,energy` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("radius,energy\n");
        for (k, v) in self.values.iter().enumerate() {
            let _ = writeln!(s, "{k},{v:e}");
        }
        s
    }
}

/// Azimuthal integral of an image's power spectrum, summed over channels.
/// Bin `k` collects every centered bin whose radius rounds to `k`; radii
/// beyond `side/2` (the spectrum corners) fold into the last bin so that
/// every bin is counted exactly once.
pub fn azimuthal_integral(img: &Image) -> Result<RadialSpectrum> {
    let side = img.side()?;
    azimuthal_integral_planes(img.data(), side)
}

pub fn azimuthal_integral_planes(data: &[f64], side: usize) -> Result<RadialSpectrum> {
    if data.len() % (side * side) != 0 {
        return Err(Error::shape("plane stack is not square"));
    }
    let last = side / 2;
    let mut values = vec![0.0; last + 1];
    for plane in data.chunks_exact(side * side) {
        let spec = dft2_plane(plane, side, side);
        for v in 0..side {
            for u in 0..side {
                let k = (centered_radius(u, v, side, side).round() as usize).min(last);
                values[k] += spec.at(u, v).norm_sqr();
            }
        }
    }
    Ok(RadialSpectrum { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::synth;
    use crate::imaging::SeededRng;
    use rand::Rng;

    fn random_image(side: usize, seed: u64) -> Image {
        let mut rng = SeededRng::new(seed);
        Image::from_fn(side, side, |_, _, _| rng.gen::<f64>())
    }

    #[test]
    fn constant_image_is_dc_only() {
        let img = Image::filled(8, 0.25);
        for s in dft2(&img) {
            for v in 0..8 {
                for u in 0..8 {
                    let z = s.at(u, v);
                    if (u, v) == (4, 4) {
                        assert!((z.re - 0.25 * 64.0).abs() < 1e-12);
                    } else {
                        assert!(z.norm() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn impulse_has_flat_magnitude() {
        let mut plane = vec![0.0; 64];
        plane[19] = 1.0;
        let s = dft2_plane(&plane, 8, 8);
        assert!(s.bins().iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn cosine_has_two_bins_on_horizontal_axis() {
        let (side, k) = (16, 3);
        let plane: Vec<f64> = (0..side * side)
            .map(|i| (2.0 * std::f64::consts::PI * (k * (i % side)) as f64 / side as f64).cos())
            .collect();
        let s = dft2_plane(&plane, side, side);
        for v in 0..side {
            for u in 0..side {
                let z = s.at(u, v).norm();
                let expected = v == side / 2 && (u == side / 2 + k || u == side / 2 - k);
                if expected {
                    assert!((z - (side * side) as f64 / 2.0).abs() < 1e-9);
                } else {
                    assert!(z < 1e-9, "({u},{v}) = {z}");
                }
            }
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        let img = random_image(16, 1);
        for (c, s) in dft2(&img).iter().enumerate() {
            let back = idft2_real(s);
            for (a, b) in img.plane(c).iter().zip(&back) {
                assert!((a - b).abs() < 1e-12);
            }
            let spatial: f64 = img.plane(c).iter().map(|v| v * v).sum();
            assert!((spatial - s.energy() / 256.0).abs() <= 1e-9 * spatial);
        }
    }

    #[test]
    fn cutoff_range_checked() {
        assert!(CutoffRadius::new(-0.1, 8, 8).is_err());
        assert!(CutoffRadius::new(5.65, 8, 8).is_ok());
        assert!(CutoffRadius::new(5.7, 8, 8).is_err());
        assert!((CutoffRadius::scaled_from_256(50.0, 64).unwrap().value() - 12.5).abs() < 1e-12);
    }

    #[test]
    fn all_pass_and_dc_only() {
        let img = random_image(16, 2);
        let same = low_pass(&img, CutoffRadius::all_pass(16, 16));
        for (a, b) in img.data().iter().zip(same.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let dc = low_pass(&img, CutoffRadius::new(0.0, 16, 16).unwrap());
        for c in 0..3 {
            let mean = img.plane(c).iter().sum::<f64>() / 256.0;
            assert!(dc.plane(c).iter().all(|v| (v - mean).abs() < 1e-9));
        }
    }

    #[test]
    fn band_limited_passes_unchanged() {
        let img = synth::band_limited_noise(32, 5.0, &mut SeededRng::new(3));
        let out = low_pass(&img, CutoffRadius::new(10.0, 32, 32).unwrap());
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn high_pass_limits() {
        let img = random_image(8, 4);
        let zero_mean: Vec<f64> = (0..3)
            .flat_map(|c| {
                let m = img.plane(c).iter().sum::<f64>() / 64.0;
                img.plane(c).iter().map(move |v| v - m).collect::<Vec<_>>()
            })
            .collect();
        let hp0 = filter_planes(&zero_mean, 8, 8, CutoffRadius::new(0.0, 8, 8).unwrap(), Band::High, FilterShape::Ideal);
        for (a, b) in zero_mean.iter().zip(&hp0) {
            assert!((a - b).abs() < 1e-12);
        }
        let hpmax = high_pass(&img, CutoffRadius::all_pass(8, 8));
        assert!(hpmax.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gaussian_shape_is_smooth_low_pass() {
        let img = random_image(16, 5);
        let d = CutoffRadius::new(3.0, 16, 16).unwrap();
        let g = low_pass_shaped(&img, d, FilterShape::Gaussian);
        let ideal = low_pass(&img, d);
        assert_ne!(g, ideal);
        let e = |x: &Image| azimuthal_integral(x).unwrap().values[8];
        assert!(e(&g) < e(&img));
    }

    #[test]
    fn ffl_is_zero_on_equal_and_rejects_mismatch() {
        let q = FeatureMap::new(8, 8, (0..192).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let r = focal_frequency_loss(&q, &q).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.grad.iter().all(|g| *g == 0.0));
        let other = FeatureMap::zeros(4);
        assert!(matches!(focal_frequency_loss(&q, &other), Err(Error::Shape(_))));
    }

    #[test]
    fn azimuthal_rejects_non_square() {
        let img = Image::from_fn(8, 4, |_, _, _| 0.5);
        assert!(matches!(azimuthal_integral(&img), Err(Error::Shape(_))));
    }

    #[test]
    fn radial_csv_header() {
        let r = azimuthal_integral(&Image::filled(4, 1.0)).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("radius,energy\n0,"));
        assert_eq!(csv.lines().count(), 4);
    }
}
