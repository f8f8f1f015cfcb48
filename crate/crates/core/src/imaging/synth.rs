//! Procedural test imagery: checkerboards, gradients, band-limited noise
//! and "natural-like" scenes (power-law noise with soft-edged shapes).

use rustfft::num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{Image, SeededRng, CHANNELS};
use crate::spectral::{centered_radius, idft2_plane, Spectrum};

pub fn checkerboard(side: usize, cell: usize) -> Image {
    let cell = cell.max(1);
    Image::from_fn(side, side, |_, y, x| if (y / cell + x / cell) % 2 == 0 { 1.0 } else { 0.0 })
}

pub fn gradient(side: usize) -> Image {
    let d = (side.max(2) - 1) as f64;
    Image::from_fn(side, side, |c, y, x| match c {
        0 => x as f64 / d,
        1 => y as f64 / d,
        _ => (x + y) as f64 / (2.0 * d),
    })
}

/// Horizontal cosine with `k` periods across the image, in `[0, 1]`.
pub fn cosine(side: usize, k: usize) -> Image {
    Image::from_fn(side, side, |_, _, x| {
        0.5 + 0.5 * (2.0 * std::f64::consts::PI * (k * x) as f64 / side as f64).cos()
    })
}

/// Random real plane whose spectrum is shaped by `amplitude(radius)`.
fn shaped_noise(side: usize, rng: &mut SeededRng, amplitude: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut bins = Vec::with_capacity(side * side);
    for v in 0..side {
        for u in 0..side {
            let a = amplitude(centered_radius(u, v, side, side));
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            bins.push(Complex64::new(re * a, im * a));
        }
    }
    let spec = Spectrum::from_centered(side, side, bins).expect("square");
    idft2_plane(&spec).into_iter().map(|z| z.re).collect()
}

/// Three-channel noise with content only at centered radius `≤ radius`,
/// scaled into `[0, 1]` around 0.5. Band-limited exactly: the real part of
/// a masked spectrum keeps the conjugate-symmetrized mask support.
pub fn band_limited_noise(side: usize, radius: f64, rng: &mut SeededRng) -> Image {
    let mut data = Vec::with_capacity(CHANNELS * side * side);
    for _ in 0..CHANNELS {
        let plane = shaped_noise(side, rng, |r| if r <= radius { 1.0 } else { 0.0 });
        let peak = plane.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        data.extend(plane.iter().map(|v| 0.5 + 0.4 * v / peak));
    }
    Image::new(side, side, data).expect("values within [0.1, 0.9]")
}

fn normalize(plane: &mut [f64]) {
    let (lo, hi) = plane.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-12);
    for v in plane {
        *v = (*v - lo) / span;
    }
}

/// A natural-looking scene: power-law luminance, tinted color noise and a
/// few soft-edged ellipses.
pub fn natural(side: usize, rng: &mut SeededRng) -> Image {
    let n = side * side;
    let falloff = |r: f64| 1.0 / r.max(1.0).powf(1.6);
    let mut lum = shaped_noise(side, rng, falloff);
    normalize(&mut lum);
    let base: [f64; 3] = [rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75)];
    let contrast = rng.gen_range(1.1..1.6);
    let mut data = vec![0.0; CHANNELS * n];
    for c in 0..CHANNELS {
        let mut tint = shaped_noise(side, rng, falloff);
        normalize(&mut tint);
        for i in 0..n {
            data[c * n + i] = base[c] + contrast * (lum[i] - 0.5) + 0.3 * (tint[i] - 0.5);
        }
    }
    let shapes = rng.gen_range(2..6);
    let s = side as f64;
    for _ in 0..shapes {
        let (cy, cx) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let (ry, rx) = (rng.gen_range(0.08..0.3) * s, rng.gen_range(0.08..0.3) * s);
        let color: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let opacity = rng.gen_range(0.5..0.95);
        for y in 0..side {
            for x in 0..side {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dist = (dy * dy + dx * dx).sqrt();
                // One-pixel soft edge.
                let edge = ((1.0 - dist) * ry.min(rx)).clamp(0.0, 1.0) * opacity;
                if edge > 0.0 {
                    for c in 0..CHANNELS {
                        let v = &mut data[c * n + y * side + x];
                        *v = *v * (1.0 - edge) + color[c] * edge;
                    }
                }
            }
        }
    }
    Image::from_clamped(side, side, data).expect("shape")
}

/// `count` natural scenes from independent substreams of `seed`.
pub fn natural_corpus(side: usize, count: usize, seed: u64) -> Vec<Image> {
    let root = SeededRng::new(seed);
    (0..count).map(|i| natural(side, &mut root.substream(i as u64))).collect()
}
