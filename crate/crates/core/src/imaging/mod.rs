//! Images, feature maps, file I/O, datasets and seeded randomness.

mod dataset;
mod resample;
mod rng;
pub mod synth;

pub use dataset::{list_images, load_all, make_splits, DatasetSplit, PairSampler};
pub use resample::{CropRect, Resampler};
pub use rng::{RngState, SeededRng};

use std::io::Cursor;
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::{ImageError, ImageFormat, RgbImage};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Three-channel raster with every value in `[0, 1]`, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// Output of the embedding network: same layout as [`Image`], any real value.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

fn check_len(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::shape("image dimensions must be positive"));
    }
    if len != CHANNELS * width * height {
        return Err(Error::shape(format!("expected {} values for 3×{height}×{width}, got {len}", CHANNELS * width * height)));
    }
    Ok(())
}

impl Image {
    /// Validated constructor; rejects values outside `[0, 1]`.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_len(width, height, data.len())?;
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    /// Builds an image from arbitrary reals, clamping into `[0, 1]`.
    /// NaN maps to 0.
    pub fn from_clamped(width: usize, height: usize, mut data: Vec<f64>) -> Result<Self> {
        check_len(width, height, data.len())?;
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * width * height);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::from_clamped(width, height, data).expect("dimensions are consistent")
    }

    pub fn filled(side: usize, value: f64) -> Self {
        Self::from_fn(side, side, |_, _, _| value)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Side length of a square image.
    pub fn side(&self) -> Result<usize> {
        if self.width != self.height {
            return Err(Error::shape(format!("expected a square image, got {}×{}", self.width, self.height)));
        }
        Ok(self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::shape(format!(
                "{}×{} vs {}×{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Round trip through 8-bit storage.
    pub fn quantized(&self) -> Image {
        let data = self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect();
        Image { width: self.width, height: self.height, data }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let n = self.width * self.height;
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            image::Rgb([to_u8(self.data[i]), to_u8(self.data[n + i]), to_u8(self.data[2 * n + i])])
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Image {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Image::from_fn(w, h, |c, y, x| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
    }
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_len(width, height, data.len())?;
        Ok(Self { width, height, data })
    }

    pub fn zeros(side: usize) -> Self {
        Self { width: side, height: side, data: vec![0.0; CHANNELS * side * side] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A pure black image.
pub fn null_image(side: usize) -> Image {
    Image::filled(side.max(1), 0.0)
}

/// Reads an image file, center-crops it to a square and resizes it to `side`.
pub fn load_image(path: impl AsRef<Path>, side: usize) -> Result<Image> {
    let path = path.as_ref();
    if side == 0 {
        return Err(Error::config("side must be positive"));
    }
    let decoded = image::open(path).map_err(|e| match e {
        ImageError::Unsupported(u) => Error::Format(format!("{}: {u}", path.display())),
        ImageError::IoError(io) => Error::Io(io),
        other => Error::Decode { path: path.to_path_buf(), reason: other.to_string() },
    })?;
    let img = Image::from_rgb8(&decoded.to_rgb8());
    Ok(center_square(&img, side))
}

/// Width and height of an image file, read from its header.
pub fn image_dimensions(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let path = path.as_ref();
    let (w, h) = image::image_dimensions(path).map_err(|e| match e {
        ImageError::Unsupported(u) => Error::Format(format!("{}: {u}", path.display())),
        ImageError::IoError(io) => Error::Io(io),
        other => Error::Decode { path: path.to_path_buf(), reason: other.to_string() },
    })?;
    Ok((w as usize, h as usize))
}

/// Center crop to the largest square, then bilinear resize to `side`.
pub fn center_square(img: &Image, side: usize) -> Image {
    let s = img.width.min(img.height);
    let rect = CropRect { top: (img.height - s) / 2, left: (img.width - s) / 2, height: s, width: s };
    if s == side && img.width == img.height {
        return img.clone();
    }
    Resampler::new(img.height, img.width, rect, side, side).apply_image(img)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaveFormat {
    Png,
    Jpeg { quality: u8 },
}

impl SaveFormat {
    pub fn from_path(path: &Path, jpeg_quality: u8) -> Self {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("jpg" | "jpeg") => SaveFormat::Jpeg { quality: jpeg_quality },
            _ => SaveFormat::Png,
        }
    }
}

pub fn save_image(img: &Image, path: impl AsRef<Path>, format: SaveFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        SaveFormat::Png => {
            let mut bytes = Vec::new();
            img.to_rgb8()
                .write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
                .map_err(|e| Error::Format(e.to_string()))?;
            std::fs::write(path, bytes)?;
        }
        SaveFormat::Jpeg { quality } => std::fs::write(path, jpeg_encode(img, quality)?)?,
    }
    Ok(())
}

/// Baseline JPEG encode; the codec used both for files and for the exact
/// compression attack.
pub fn jpeg_encode(img: &Image, quality: u8) -> Result<Vec<u8>> {
    if !(1..=100).contains(&quality) {
        return Err(Error::config(format!("jpeg quality {quality} outside 1..=100")));
    }
    let mut bytes = Vec::new();
    JpegEncoder::new_with_quality(&mut bytes, quality)
        .encode_image(&img.to_rgb8())
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(bytes)
}

pub fn jpeg_decode(bytes: &[u8]) -> Result<Image> {
    let decoded = image::load_from_memory_with_format(bytes, ImageFormat::Jpeg)
        .map_err(|e| Error::Decode { path: "<memory>".into(), reason: e.to_string() })?;
    Ok(Image::from_rgb8(&decoded.to_rgb8()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_image_is_black() {
        let z = null_image(64);
        assert_eq!((z.width(), z.height()), (64, 64));
        assert_eq!(z.data().len(), 3 * 64 * 64);
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(null_image(5).mean(), 0.0);
    }

    #[test]
    fn constructor_rejects_out_of_range() {
        assert!(Image::new(1, 1, vec![0.0, 0.5, 1.5]).is_err());
        assert!(Image::new(1, 1, vec![0.0, 0.5]).is_err());
        let img = Image::from_clamped(1, 1, vec![-1.0, f64::NAN, 2.0]).unwrap();
        assert_eq!(img.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn quantization_error_is_bounded() {
        let img = Image::from_fn(17, 9, |c, y, x| ((c * 31 + y * 7 + x * 13) % 101) as f64 / 100.0);
        let q = img.quantized();
        for (a, b) in img.data().iter().zip(q.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(16, 16, |c, y, x| ((c + y * x) % 7) as f64 / 6.0);
        let path = dir.path().join("a.png");
        save_image(&img, &path, SaveFormat::Png).unwrap();
        let back = load_image(&path, 16).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
        let black = null_image(8);
        save_image(&black, &path, SaveFormat::Png).unwrap();
        assert!(load_image(&path, 8).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn load_resizes_and_identity_for_matching_side() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.png");
        save_image(&Image::filled(32, 0.0), &path, SaveFormat::Png).unwrap();
        let img = load_image(&path, 32).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
        save_image(&Image::from_fn(64, 64, |_, y, _| y as f64 / 63.0), &path, SaveFormat::Png).unwrap();
        assert_eq!(load_image(&path, 16).unwrap().side().unwrap(), 16);
    }

    #[test]
    fn corrupt_and_missing_files_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"not an image at all").unwrap();
        assert!(matches!(load_image(&path, 8), Err(Error::Decode { .. }) | Err(Error::Format(_))));
        assert!(load_image(dir.path().join("missing.png"), 8).is_err());
    }

    #[test]
    fn save_to_unwritable_path_is_io_error() {
        let err = save_image(&null_image(4), "/nonexistent-dir/x/y.png", SaveFormat::Png).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    #[test]
    fn jpeg_quality_range_checked() {
        assert!(jpeg_encode(&null_image(8), 0).is_err());
        assert!(jpeg_encode(&null_image(8), 101).is_err());
        let back = jpeg_decode(&jpeg_encode(&null_image(8), 50).unwrap()).unwrap();
        assert!(back.data().iter().all(|&v| v <= 1.0 / 255.0));
    }
}
