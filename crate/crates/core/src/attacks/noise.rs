use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::imaging::{Image, SeededRng};

/// Additive Gaussian noise, `sigma_8bit` on the 0–255 scale, drawn from `seed`.
pub fn additive_noise(img: &Image, sigma_8bit: f64, seed: u64) -> Image {
    if sigma_8bit == 0.0 {
        return img.clone();
    }
    let mut rng = SeededRng::new(seed);
    let normal = Normal::new(0.0, sigma_8bit / 255.0).expect("finite sigma");
    let data = img.data().iter().map(|v| v + normal.sample(&mut rng)).collect();
    Image::from_clamped(img.width(), img.height(), data).expect("shape")
}

/// Identity except where the noisy value left `[0, 1]`.
pub fn additive_noise_backward(img: &Image, sigma_8bit: f64, seed: u64, grad: &[f64]) -> Vec<f64> {
    if sigma_8bit == 0.0 {
        return grad.to_vec();
    }
    let mut rng = SeededRng::new(seed);
    let normal = Normal::new(0.0, sigma_8bit / 255.0).expect("finite sigma");
    img.data()
        .iter()
        .zip(grad)
        .map(|(v, g)| if (0.0..=1.0).contains(&(v + normal.sample(&mut rng))) { *g } else { 0.0 })
        .collect()
}

/// Shot noise: each value becomes `Poisson(v·scale)/scale`.
pub fn poisson_noise(img: &Image, scale: f64, seed: u64) -> Image {
    let mut rng = SeededRng::new(seed);
    let data = img
        .data()
        .iter()
        .map(|&v| {
            let rate = v * scale;
            if rate <= 0.0 {
                0.0
            } else {
                Poisson::new(rate).expect("positive rate").sample(&mut rng) / scale
            }
        })
        .collect();
    Image::from_clamped(img.width(), img.height(), data).expect("shape")
}

/// Seed for a noise field, drawn from the layer's stream.
pub(crate) fn draw_seed(rng: &mut SeededRng) -> u64 {
    rng.gen()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_identity() {
        let img = Image::filled(8, 0.4);
        assert_eq!(additive_noise(&img, 0.0, 3), img);
    }

    #[test]
    fn empirical_std_near_sigma() {
        let img = Image::filled(64, 0.5);
        let out = additive_noise(&img, 10.0, 11);
        let n = out.data().len() as f64;
        let mean = out.data().iter().sum::<f64>() / n;
        let std = (out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = 10.0 / 255.0;
        assert!((std - target).abs() < 0.1 * target, "std {std}");
    }

    #[test]
    fn same_seed_same_field() {
        let img = Image::filled(16, 0.5);
        assert_eq!(additive_noise(&img, 10.0, 5), additive_noise(&img, 10.0, 5));
        assert_ne!(additive_noise(&img, 10.0, 5), additive_noise(&img, 10.0, 6));
    }

    #[test]
    fn poisson_mean_preserved() {
        let img = Image::filled(64, 0.5);
        let out = poisson_noise(&img, 255.0, 2);
        assert!((out.mean() - 0.5).abs() < 0.01);
    }
}
