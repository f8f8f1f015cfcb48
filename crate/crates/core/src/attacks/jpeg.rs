//! JPEG compression: the real codec for evaluation, and a block-DCT model of
//! it for training. The model follows the encoder used by [`jpeg_encode`]:
//! full-range BT.601 YCbCr without chroma subsampling, 8×8 orthonormal DCT,
//! the standard luma/chroma tables scaled by quality, and rounding.

use std::sync::OnceLock;

use crate::error::Result;
use crate::imaging::{jpeg_decode, jpeg_encode, Image};

#[rustfmt::skip]
const LUMA_QTABLE: [u16; 64] = [
    16, 11, 10, 16,  24,  40,  51,  61,
    12, 12, 14, 19,  26,  58,  60,  55,
    14, 13, 16, 24,  40,  57,  69,  56,
    14, 17, 22, 29,  51,  87,  80,  62,
    18, 22, 37, 56,  68, 109, 103,  77,
    24, 35, 55, 64,  81, 104, 113,  92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103,  99,
];

#[rustfmt::skip]
const CHROMA_QTABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// libjpeg quality scaling of a base table.
pub fn scaled_table(base: &[u16; 64], quality: u8) -> [f64; 64] {
    let q = u32::from(quality.clamp(1, 100));
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((u32::from(b) * scale + 50) / 100).clamp(1, 255) as f64;
    }
    out
}

/// Orthonormal 8-point DCT-II basis, `basis[k][n]`.
fn dct_basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (k, row) in b.iter_mut().enumerate() {
            let c = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for (n, v) in row.iter_mut().enumerate() {
                *v = c * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
            }
        }
        b
    })
}

fn dct8x8(block: &[f64; 64], inverse: bool) -> [f64; 64] {
    let b = dct_basis();
    let mut tmp = [0.0; 64];
    let mut out = [0.0; 64];
    // Rows then columns; the inverse uses the transposed basis.
    for y in 0..8 {
        for k in 0..8 {
            tmp[y * 8 + k] = (0..8)
                .map(|n| block[y * 8 + n] * if inverse { b[n][k] } else { b[k][n] })
                .sum();
        }
    }
    for x in 0..8 {
        for k in 0..8 {
            out[k * 8 + x] = (0..8)
                .map(|n| tmp[n * 8 + x] * if inverse { b[n][k] } else { b[k][n] })
                .sum();
        }
    }
    out
}

fn rgb_to_ycbcr(r: f64, g: f64, b: f64) -> [f64; 3] {
    let m = RGB_TO_YCC;
    let mut v: [f64; 3] = std::array::from_fn(|i| m[i][0] * r + m[i][1] * g + m[i][2] * b);
    v[0] -= 128.0;
    v
}

const RGB_TO_YCC: [[f64; 3]; 3] =
    [[0.299, 0.587, 0.114], [-0.168_736, -0.331_264, 0.5], [0.5, -0.418_688, -0.081_312]];

/// Exact inverse of [`RGB_TO_YCC`], so the model without rounding is the identity.
fn ycc_to_rgb_matrix() -> &'static [[f64; 3]; 3] {
    static INV: OnceLock<[[f64; 3]; 3]> = OnceLock::new();
    INV.get_or_init(|| {
        let m = RGB_TO_YCC;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let det = m[0][0] * cof(1, 2, 1, 2) - m[0][1] * cof(1, 2, 0, 2) + m[0][2] * cof(1, 2, 0, 1);
        [
            [cof(1, 2, 1, 2) / det, -cof(0, 2, 1, 2) / det, cof(0, 1, 1, 2) / det],
            [-cof(1, 2, 0, 2) / det, cof(0, 2, 0, 2) / det, -cof(0, 1, 0, 2) / det],
            [cof(1, 2, 0, 1) / det, -cof(0, 2, 0, 1) / det, cof(0, 1, 0, 1) / det],
        ]
    })
}

fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> [f64; 3] {
    let m = ycc_to_rgb_matrix();
    let v = [y + 128.0, cb, cr];
    std::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

/// Block-DCT JPEG model on a 3-plane stack, returning the unclamped result
/// in unit range. `round` selects real quantization; with `false` the model
/// reduces to the identity up to floating point (the straight-through surrogate).
pub fn jpeg_model_raw(data: &[f64], width: usize, height: usize, quality: u8, round: bool) -> Vec<f64> {
    let n = width * height;
    let (bw, bh) = (width.div_ceil(8), height.div_ceil(8));
    let (pw, ph) = (bw * 8, bh * 8);
    // Edge-replicated padding to whole blocks, in level-shifted YCbCr.
    let mut ycc = vec![vec![0.0; pw * ph]; 3];
    for y in 0..ph {
        let sy = y.min(height - 1);
        for x in 0..pw {
            let sx = x.min(width - 1);
            let i = sy * width + sx;
            let v = rgb_to_ycbcr(255.0 * data[i], 255.0 * data[n + i], 255.0 * data[2 * n + i]);
            for c in 0..3 {
                ycc[c][y * pw + x] = v[c];
            }
        }
    }
    let tables = [scaled_table(&LUMA_QTABLE, quality), scaled_table(&CHROMA_QTABLE, quality)];
    for (c, plane) in ycc.iter_mut().enumerate() {
        let table = &tables[(c > 0) as usize];
        for by in 0..bh {
            for bx in 0..bw {
                let mut block = [0.0; 64];
                for y in 0..8 {
                    for x in 0..8 {
                        block[y * 8 + x] = plane[(by * 8 + y) * pw + bx * 8 + x];
                    }
                }
                let mut coeffs = dct8x8(&block, false);
                if round {
                    for (v, &q) in coeffs.iter_mut().zip(table) {
                        *v = (*v / q).round() * q;
                    }
                }
                let back = dct8x8(&coeffs, true);
                for y in 0..8 {
                    for x in 0..8 {
                        plane[(by * 8 + y) * pw + bx * 8 + x] = back[y * 8 + x];
                    }
                }
            }
        }
    }
    let mut out = vec![0.0; 3 * n];
    for y in 0..height {
        for x in 0..width {
            let p = y * pw + x;
            let rgb = ycbcr_to_rgb(ycc[0][p], ycc[1][p], ycc[2][p]);
            for c in 0..3 {
                out[c * n + y * width + x] = rgb[c] / 255.0;
            }
        }
    }
    out
}

/// Differentiable JPEG forward, clamped.
pub fn jpeg_differentiable(img: &Image, quality: u8) -> Image {
    let raw = jpeg_model_raw(img.data(), img.width(), img.height(), quality, true);
    Image::from_clamped(img.width(), img.height(), raw).expect("shape")
}

/// Straight-through backward: rounding passes gradients unchanged, so the
/// linear color/DCT stages cancel and only the output clamp remains.
pub fn jpeg_differentiable_backward(img: &Image, quality: u8, grad: &[f64]) -> Vec<f64> {
    let raw = jpeg_model_raw(img.data(), img.width(), img.height(), quality, true);
    raw.iter().zip(grad).map(|(&v, &g)| if (0.0..=1.0).contains(&v) { g } else { 0.0 }).collect()
}

/// Real encode/decode round trip.
pub fn jpeg_exact(img: &Image, quality: u8) -> Result<Image> {
    jpeg_decode(&jpeg_encode(img, quality)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dct_is_orthonormal() {
        let block: [f64; 64] = std::array::from_fn(|i| ((i * 37) % 23) as f64 - 11.0);
        let back = dct8x8(&dct8x8(&block, false), true);
        for (a, b) in block.iter().zip(&back) {
            assert!((a - b).abs() < 1e-10);
        }
        let energy: f64 = block.iter().map(|v| v * v).sum();
        let coeff_energy: f64 = dct8x8(&block, false).iter().map(|v| v * v).sum();
        assert!((energy - coeff_energy).abs() < 1e-8);
    }

    #[test]
    fn color_transform_round_trips() {
        let v = rgb_to_ycbcr(12.0, 200.0, 99.0);
        let back = ycbcr_to_rgb(v[0], v[1], v[2]);
        assert!((back[0] - 12.0).abs() < 1e-3 && (back[1] - 200.0).abs() < 1e-3 && (back[2] - 99.0).abs() < 1e-3);
    }

    #[test]
    fn quality_scaling_matches_libjpeg() {
        assert_eq!(scaled_table(&LUMA_QTABLE, 50)[0], 16.0);
        assert_eq!(scaled_table(&LUMA_QTABLE, 100)[0], 1.0);
        assert_eq!(scaled_table(&LUMA_QTABLE, 10)[0], 80.0);
    }

    #[test]
    fn surrogate_without_rounding_is_identity() {
        let img = Image::from_fn(12, 10, |c, y, x| ((c * 5 + y * 3 + x) % 9) as f64 / 8.0);
        let raw = jpeg_model_raw(img.data(), 12, 10, 30, false);
        for (a, b) in img.data().iter().zip(&raw) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_image_stays_constant() {
        // Only the DC coefficient survives, so the output is flat; its level
        // moves by at most half a DC step, which is within 2/255 from quality 50 up.
        let img = Image::filled(16, 0.4);
        for q in [10, 30, 50, 75, 90] {
            for out in [jpeg_differentiable(&img, q), jpeg_exact(&img, q).unwrap()] {
                for c in 0..3 {
                    let p = out.plane(c);
                    assert!(p.iter().all(|v| (v - p[0]).abs() < 1e-9), "q{q} not flat");
                }
                if q >= 50 {
                    assert!(out.data().iter().all(|v| (v - 0.4).abs() <= 2.0 / 255.0), "q{q}");
                }
            }
        }
    }
}
