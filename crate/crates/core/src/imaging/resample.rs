use super::{Image, CHANNELS};

/// Integer crop rectangle in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Bilinear resampling of a crop onto a destination grid, half-pixel
/// centers, edge-clamped inside the crop. Separable: each axis keeps two
/// taps per destination index.
#[derive(Debug, Clone)]
pub struct Resampler {
    src_h: usize,
    src_w: usize,
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

fn axis_taps(start: usize, len: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = len as f64 / dst as f64;
    let last = (start + len - 1) as f64;
    (0..dst)
        .map(|i| {
            let s = (start as f64 + (i as f64 + 0.5) * scale - 0.5).clamp(start as f64, last);
            let i0 = s.floor();
            let frac = s - i0;
            let i0 = i0 as usize;
            let i1 = (i0 + 1).min(start + len - 1);
            (i0, i1, frac)
        })
        .collect()
}

impl Resampler {
    pub fn new(src_h: usize, src_w: usize, rect: CropRect, dst_h: usize, dst_w: usize) -> Self {
        assert!(rect.height > 0 && rect.width > 0, "empty crop");
        assert!(rect.top + rect.height <= src_h && rect.left + rect.width <= src_w, "crop outside source");
        Self {
            src_h,
            src_w,
            rows: axis_taps(rect.top, rect.height, dst_h),
            cols: axis_taps(rect.left, rect.width, dst_w),
        }
    }

    pub fn dst_h(&self) -> usize {
        self.rows.len()
    }

    pub fn dst_w(&self) -> usize {
        self.cols.len()
    }

    /// Resamples `channels` stacked planes.
    pub fn forward(&self, src: &[f64], channels: usize) -> Vec<f64> {
        let (dh, dw) = (self.dst_h(), self.dst_w());
        let mut out = vec![0.0; channels * dh * dw];
        for c in 0..channels {
            let plane = &src[c * self.src_h * self.src_w..(c + 1) * self.src_h * self.src_w];
            for (y, &(r0, r1, fy)) in self.rows.iter().enumerate() {
                for (x, &(c0, c1, fx)) in self.cols.iter().enumerate() {
                    let top = plane[r0 * self.src_w + c0] * (1.0 - fx) + plane[r0 * self.src_w + c1] * fx;
                    let bot = plane[r1 * self.src_w + c0] * (1.0 - fx) + plane[r1 * self.src_w + c1] * fx;
                    out[(c * dh + y) * dw + x] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        out
    }

    /// Adjoint of [`Resampler::forward`].
    pub fn adjoint(&self, grad: &[f64], channels: usize) -> Vec<f64> {
        let (dh, dw) = (self.dst_h(), self.dst_w());
        let mut out = vec![0.0; channels * self.src_h * self.src_w];
        for c in 0..channels {
            let plane = &mut out[c * self.src_h * self.src_w..(c + 1) * self.src_h * self.src_w];
            for (y, &(r0, r1, fy)) in self.rows.iter().enumerate() {
                for (x, &(c0, c1, fx)) in self.cols.iter().enumerate() {
                    let g = grad[(c * dh + y) * dw + x];
                    plane[r0 * self.src_w + c0] += g * (1.0 - fy) * (1.0 - fx);
                    plane[r0 * self.src_w + c1] += g * (1.0 - fy) * fx;
                    plane[r1 * self.src_w + c0] += g * fy * (1.0 - fx);
                    plane[r1 * self.src_w + c1] += g * fy * fx;
                }
            }
        }
        out
    }

    pub fn apply_image(&self, img: &Image) -> Image {
        assert_eq!((img.height(), img.width()), (self.src_h, self.src_w), "resampler source shape");
        Image::from_clamped(self.dst_w(), self.dst_h(), self.forward(img.data(), CHANNELS)).expect("shape")
    }
}
