use crate::imaging::{Image, CHANNELS};

/// Normalized sampled Gaussian of odd length `size`.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Vec<f64> {
    assert!(size % 2 == 1, "kernel size must be odd");
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(mut i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// One separable pass along rows (`horizontal`) or columns, or its adjoint.
fn pass(data: &[f64], w: usize, h: usize, kernel: &[f64], horizontal: bool, adjoint: bool) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; data.len()];
    for plane in 0..data.len() / (w * h) {
        let off = plane * w * h;
        for y in 0..h {
            for x in 0..w {
                let i = off + y * w + x;
                for (j, &k) in kernel.iter().enumerate() {
                    let t = j as isize - r;
                    let src = if horizontal {
                        off + y * w + reflect(x as isize + t, w)
                    } else {
                        off + reflect(y as isize + t, h) * w + x
                    };
                    if adjoint {
                        out[src] += k * data[i];
                    } else {
                        out[i] += k * data[src];
                    }
                }
            }
        }
    }
    out
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &Image, sigma: f64, kernel_size: usize) -> Image {
    let k = gaussian_kernel(sigma, kernel_size);
    let (w, h) = (img.width(), img.height());
    let tmp = pass(img.data(), w, h, &k, true, false);
    Image::from_clamped(w, h, pass(&tmp, w, h, &k, false, false)).expect("shape")
}

/// Gradient of [`gaussian_blur`] with respect to its input.
pub fn gaussian_blur_backward(width: usize, height: usize, sigma: f64, kernel_size: usize, grad: &[f64]) -> Vec<f64> {
    assert_eq!(grad.len(), CHANNELS * width * height);
    let k = gaussian_kernel(sigma, kernel_size);
    let tmp = pass(grad, width, height, &k, false, true);
    pass(&tmp, width, height, &k, true, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(2, 5), 2);
    }

    #[test]
    fn constant_unchanged_and_tiny_sigma_identity() {
        let c = Image::filled(9, 0.3);
        assert!(gaussian_blur(&c, 1.5, 7).data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        let img = Image::from_fn(9, 9, |ch, y, x| ((ch + 2 * y + 3 * x) % 5) as f64 / 4.0);
        let out = gaussian_blur(&img, 1e-3, 7);
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn impulse_response_is_sampled_gaussian() {
        let side = 15;
        let img = Image::from_fn(side, side, |_, y, x| if y == 7 && x == 7 { 1.0 } else { 0.0 });
        let out = gaussian_blur(&img, 1.0, 7);
        // Closed form: exp(-(dx²+dy²)/2) / Σ over the 7×7 support.
        let norm: f64 = (-3i32..=3)
            .flat_map(|a| (-3i32..=3).map(move |b| (-((a * a + b * b) as f64) / 2.0).exp()))
            .sum();
        for y in 0..side {
            for x in 0..side {
                let (dy, dx) = (y as i32 - 7, x as i32 - 7);
                let expected = if dy.abs() <= 3 && dx.abs() <= 3 {
                    (-((dx * dx + dy * dy) as f64) / 2.0).exp() / norm
                } else {
                    0.0
                };
                assert!((out.get(0, y, x) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_adjoint() {
        let (w, h) = (6, 5);
        let x: Vec<f64> = (0..3 * w * h).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
        let g: Vec<f64> = (0..3 * w * h).map(|i| ((i * 5) % 13) as f64 - 6.0).collect();
        let img = Image::new(w, h, x.clone()).unwrap();
        let y = gaussian_blur(&img, 1.2, 5);
        let lhs: f64 = y.data().iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(gaussian_blur_backward(w, h, 1.2, 5, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
