use rand::Rng;

use crate::imaging::{CropRect, Image, Resampler, SeededRng, CHANNELS};

const ASPECT: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);

/// Random crop rectangle with area fraction in `scale` and aspect ratio in
/// `[3/4, 4/3]`; falls back to the full frame after ten rejected draws.
pub fn sample_crop(height: usize, width: usize, scale: [f64; 2], rng: &mut SeededRng) -> CropRect {
    let area = (height * width) as f64;
    let (lo, hi) = (ASPECT.0.ln(), ASPECT.1.ln());
    for _ in 0..10 {
        let target = area * if scale[0] < scale[1] { rng.gen_range(scale[0]..=scale[1]) } else { scale[0] };
        let ratio = rng.gen_range(lo..=hi).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if (1..=width).contains(&w) && (1..=height).contains(&h) {
            let top = rng.gen_range(0..=height - h);
            let left = rng.gen_range(0..=width - w);
            return CropRect { top, left, height: h, width: w };
        }
    }
    CropRect { top: 0, left: 0, height, width }
}

/// Crops `rect` and resizes it back to the input size.
pub fn resize_crop(img: &Image, rect: CropRect) -> Image {
    Resampler::new(img.height(), img.width(), rect, img.height(), img.width()).apply_image(img)
}

pub fn resize_crop_backward(width: usize, height: usize, rect: CropRect, grad: &[f64]) -> Vec<f64> {
    Resampler::new(height, width, rect, height, width).adjoint(grad, CHANNELS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_frame_is_identity() {
        let img = Image::from_fn(12, 12, |c, y, x| ((c * 5 + y * 3 + x) % 7) as f64 / 6.0);
        let out = resize_crop(&img, CropRect { top: 0, left: 0, height: 12, width: 12 });
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn quadrant_crop_is_flat() {
        let img = Image::from_fn(16, 16, |c, y, x| match (y < 8, x < 8) {
            (true, true) => [0.9, 0.1, 0.1][c],
            (true, false) => 0.2,
            (false, true) => 0.5,
            (false, false) => 0.7,
        });
        let out = resize_crop(&img, CropRect { top: 0, left: 0, height: 8, width: 8 });
        for c in 0..3 {
            assert!(out.plane(c).iter().all(|&v| (v - [0.9, 0.1, 0.1][c]).abs() < 1e-12));
        }
    }

    #[test]
    fn sampled_rects_fit_and_respect_scale() {
        let mut rng = SeededRng::new(4);
        for _ in 0..200 {
            let r = sample_crop(64, 64, [0.5, 1.0], &mut rng);
            assert!(r.top + r.height <= 64 && r.left + r.width <= 64);
            let frac = (r.height * r.width) as f64 / 4096.0;
            assert!(frac > 0.45 && frac <= 1.0, "{frac}");
        }
        let r = sample_crop(64, 64, [1.0, 1.0], &mut rng);
        assert_eq!((r.height, r.width), (64, 64));
    }
}
