//! Color jitter: brightness, contrast, saturation, then hue, each followed
//! by a clamp. Hue rotates the chroma plane of YIQ, which keeps the whole
//! chain differentiable for fixed factors.

use serde::{Deserialize, Serialize};

use crate::imaging::Image;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Sampled jitter factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue rotation in turns.
    pub hue: f64,
}

impl JitterFactors {
    pub const IDENTITY: Self = Self { brightness: 1.0, contrast: 1.0, saturation: 1.0, hue: 0.0 };
}

fn clamp_vec(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.clamp(0.0, 1.0)).collect()
}

fn mask(grad: &mut [f64], pre: &[f64]) {
    for (g, &v) in grad.iter_mut().zip(pre) {
        if !(0.0..=1.0).contains(&v) {
            *g = 0.0;
        }
    }
}

fn hue_matrix(turns: f64) -> [[f64; 3]; 3] {
    const TO_YIQ: [[f64; 3]; 3] = [[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]];
    const FROM_YIQ: [[f64; 3]; 3] = [[1.0, 0.956, 0.621], [1.0, -0.272, -0.647], [1.0, -1.106, 1.703]];
    let (s, c) = (2.0 * std::f64::consts::PI * turns).sin_cos();
    let rot = [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]];
    let mul = |a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]| {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        m
    };
    mul(&FROM_YIQ, &mul(&rot, &TO_YIQ))
}

/// Pre-clamp outputs of the four stages.
fn stages(x: &[f64], n: usize, f: JitterFactors) -> [Vec<f64>; 4] {
    let b: Vec<f64> = x.iter().map(|v| v * f.brightness).collect();
    let bc = clamp_vec(b.clone());
    let mean = (0..n).map(|p| (0..3).map(|c| LUMA[c] * bc[c * n + p]).sum::<f64>()).sum::<f64>() / n as f64;
    let ct: Vec<f64> = bc.iter().map(|v| f.contrast * v + (1.0 - f.contrast) * mean).collect();
    let cc = clamp_vec(ct.clone());
    let mut st = vec![0.0; 3 * n];
    for p in 0..n {
        let gray: f64 = (0..3).map(|c| LUMA[c] * cc[c * n + p]).sum();
        for c in 0..3 {
            st[c * n + p] = f.saturation * cc[c * n + p] + (1.0 - f.saturation) * gray;
        }
    }
    let sc = clamp_vec(st.clone());
    let m = hue_matrix(f.hue);
    let mut hu = vec![0.0; 3 * n];
    for p in 0..n {
        for c in 0..3 {
            hu[c * n + p] = (0..3).map(|k| m[c][k] * sc[k * n + p]).sum();
        }
    }
    [b, ct, st, hu]
}

pub fn color_jitter(img: &Image, f: JitterFactors) -> Image {
    if f == JitterFactors::IDENTITY {
        return img.clone();
    }
    let n = img.width() * img.height();
    let [.., hu] = stages(img.data(), n, f);
    Image::from_clamped(img.width(), img.height(), hu).expect("shape")
}

pub fn color_jitter_backward(img: &Image, f: JitterFactors, grad: &[f64]) -> Vec<f64> {
    if f == JitterFactors::IDENTITY {
        return grad.to_vec();
    }
    let n = img.width() * img.height();
    let [b, ct, st, hu] = stages(img.data(), n, f);
    let mut g = grad.to_vec();
    mask(&mut g, &hu);
    let m = hue_matrix(f.hue);
    let mut gs = vec![0.0; 3 * n];
    for p in 0..n {
        for k in 0..3 {
            gs[k * n + p] = (0..3).map(|c| m[c][k] * g[c * n + p]).sum();
        }
    }
    mask(&mut gs, &st);
    let mut gc = vec![0.0; 3 * n];
    for p in 0..n {
        let total: f64 = (0..3).map(|c| gs[c * n + p]).sum();
        for c in 0..3 {
            gc[c * n + p] = f.saturation * gs[c * n + p] + (1.0 - f.saturation) * LUMA[c] * total;
        }
    }
    mask(&mut gc, &ct);
    let total: f64 = gc.iter().sum();
    let mut gb = vec![0.0; 3 * n];
    for c in 0..3 {
        for p in 0..n {
            gb[c * n + p] = f.contrast * gc[c * n + p] + (1.0 - f.contrast) * LUMA[c] * total / n as f64;
        }
    }
    mask(&mut gb, &b);
    gb.iter().map(|v| v * f.brightness).collect()
}
