//! Image attacks in two forms: exact for evaluation, differentiable for the
//! training-time attack layer. Every attack is described by an
//! [`AttackParams`] value so that a layer draw can be logged and replayed.

mod blur;
mod crop;
mod jitter;
mod jpeg;
mod noise;

pub use blur::{gaussian_blur, gaussian_blur_backward, gaussian_kernel};
pub use crop::{resize_crop, resize_crop_backward, sample_crop};
pub use jitter::{color_jitter, color_jitter_backward, JitterFactors};
pub use jpeg::{jpeg_differentiable, jpeg_differentiable_backward, jpeg_exact, jpeg_model_raw, scaled_table};
pub use noise::{additive_noise, additive_noise_backward, poisson_noise};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{CropRect, Image, RngState, SeededRng};
use crate::spectral::{filter_planes, r_max, Band, CutoffRadius, FilterShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    LowPass,
    HighPass,
    Blur,
    Noise,
    ColorJitter,
    ResizeCrop,
    Jpeg,
    Poisson,
}

impl AttackKind {
    pub const ALL: [AttackKind; 8] = [
        Self::LowPass,
        Self::HighPass,
        Self::Blur,
        Self::Noise,
        Self::ColorJitter,
        Self::ResizeCrop,
        Self::Jpeg,
        Self::Poisson,
    ];

    /// Attacks reported by the robustness protocol, in report order.
    pub const ROBUSTNESS: [AttackKind; 5] =
        [Self::Jpeg, Self::LowPass, Self::Blur, Self::ColorJitter, Self::ResizeCrop];

    pub fn name(self) -> &'static str {
        match self {
            Self::LowPass => "low-pass",
            Self::HighPass => "high-pass",
            Self::Blur => "blur",
            Self::Noise => "noise",
            Self::ColorJitter => "color-jitter",
            Self::ResizeCrop => "resize-crop",
            Self::Jpeg => "jpeg",
            Self::Poisson => "poisson",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown attack type {s:?}")))
    }
}

/// How JPEG is simulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JpegMode {
    Exact,
    Differentiable,
}

/// One fully specified attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "attack", rename_all = "kebab-case")]
pub enum AttackParams {
    LowPass { d: f64 },
    HighPass { d: f64 },
    Blur { sigma: f64, kernel_size: usize },
    Noise { sigma: f64, seed: u64 },
    ColorJitter(JitterFactors),
    ResizeCrop(CropRect),
    Jpeg { quality: u8 },
    Poisson { scale: f64, seed: u64 },
}

impl AttackParams {
    pub fn kind(&self) -> AttackKind {
        match self {
            Self::LowPass { .. } => AttackKind::LowPass,
            Self::HighPass { .. } => AttackKind::HighPass,
            Self::Blur { .. } => AttackKind::Blur,
            Self::Noise { .. } => AttackKind::Noise,
            Self::ColorJitter(_) => AttackKind::ColorJitter,
            Self::ResizeCrop(_) => AttackKind::ResizeCrop,
            Self::Jpeg { .. } => AttackKind::Jpeg,
            Self::Poisson { .. } => AttackKind::Poisson,
        }
    }

    fn cutoff(d: f64, img: &Image) -> Result<CutoffRadius> {
        CutoffRadius::new(d, img.width(), img.height())
    }

    fn filter(img: &Image, d: f64, band: Band) -> Result<Image> {
        let d = Self::cutoff(d, img)?;
        let raw = filter_planes(img.data(), img.width(), img.height(), d, band, FilterShape::Ideal);
        Image::from_clamped(img.width(), img.height(), raw)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Blur { sigma, kernel_size } if sigma <= 0.0 || kernel_size % 2 == 0 => {
                Err(Error::config(format!("blur needs sigma > 0 and an odd kernel, got {sigma}/{kernel_size}")))
            }
            Self::Noise { sigma, .. } if sigma < 0.0 || !sigma.is_finite() => {
                Err(Error::config(format!("noise sigma {sigma} must be finite and non-negative")))
            }
            Self::Jpeg { quality } if !(1..=100).contains(&quality) => {
                Err(Error::config(format!("jpeg quality {quality} outside 1..=100")))
            }
            Self::Poisson { scale, .. } if scale <= 0.0 => Err(Error::config("poisson scale must be positive")),
            Self::ColorJitter(f) if f.brightness < 0.0 || f.contrast < 0.0 || f.saturation < 0.0 => {
                Err(Error::config("jitter factors must be non-negative"))
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&self, img: &Image, mode: JpegMode) -> Result<Image> {
        self.validate()?;
        Ok(match *self {
            Self::LowPass { d } => Self::filter(img, d, Band::Low)?,
            Self::HighPass { d } => Self::filter(img, d, Band::High)?,
            Self::Blur { sigma, kernel_size } => gaussian_blur(img, sigma, kernel_size),
            Self::Noise { sigma, seed } => additive_noise(img, sigma, seed),
            Self::ColorJitter(f) => color_jitter(img, f),
            Self::ResizeCrop(rect) => {
                if rect.top + rect.height > img.height() || rect.left + rect.width > img.width() {
                    return Err(Error::config("crop rectangle outside the image"));
                }
                resize_crop(img, rect)
            }
            Self::Jpeg { quality } => match mode {
                JpegMode::Exact => jpeg_exact(img, quality)?,
                JpegMode::Differentiable => jpeg_differentiable(img, quality),
            },
            Self::Poisson { scale, seed } => poisson_noise(img, scale, seed),
        })
    }

    /// Gradient of the differentiable form with respect to `input`.
    pub fn backward(&self, input: &Image, grad: &[f64]) -> Result<Vec<f64>> {
        let (w, h) = (input.width(), input.height());
        let clamp_mask = |raw: Vec<f64>, g: Vec<f64>| -> Vec<f64> {
            raw.iter().zip(g).map(|(v, g)| if (0.0..=1.0).contains(v) { g } else { 0.0 }).collect()
        };
        Ok(match *self {
            Self::LowPass { d } | Self::HighPass { d } => {
                let band = if matches!(self, Self::LowPass { .. }) { Band::Low } else { Band::High };
                let cut = Self::cutoff(d, input)?;
                let raw = filter_planes(input.data(), w, h, cut, band, FilterShape::Ideal);
                // The real symmetric mask makes the filter self-adjoint.
                let masked = clamp_mask(raw, grad.to_vec());
                filter_planes(&masked, w, h, cut, band, FilterShape::Ideal)
            }
            // A normalized non-negative kernel keeps `[0, 1]` data in range, so no clamp mask.
            Self::Blur { sigma, kernel_size } => gaussian_blur_backward(w, h, sigma, kernel_size, grad),
            Self::Noise { sigma, seed } => additive_noise_backward(input, sigma, seed, grad),
            Self::ColorJitter(f) => color_jitter_backward(input, f, grad),
            Self::ResizeCrop(rect) => resize_crop_backward(w, h, rect, grad),
            Self::Jpeg { quality } => jpeg_differentiable_backward(input, quality, grad),
            Self::Poisson { .. } => {
                return Err(Error::config("poisson noise has no differentiable form"));
            }
        })
    }
}

/// Jitter strengths; factors are drawn from `[1 − β, 1 + β]`, hue from `[−β_h, β_h]` turns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterStrength {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for JitterStrength {
    fn default() -> Self {
        Self { brightness: 0.2, contrast: 0.2, saturation: 0.2, hue: 0.1 }
    }
}

impl JitterStrength {
    pub fn uniform(beta: f64, hue: f64) -> Self {
        Self { brightness: beta, contrast: beta, saturation: beta, hue }
    }

    pub fn sample(&self, rng: &mut SeededRng) -> JitterFactors {
        let mut factor = |b: f64| if b > 0.0 { rng.gen_range(1.0 - b..=1.0 + b).max(0.0) } else { 1.0 };
        let brightness = factor(self.brightness);
        let contrast = factor(self.contrast);
        let saturation = factor(self.saturation);
        let hue = if self.hue > 0.0 { rng.gen_range(-self.hue..=self.hue) } else { 0.0 };
        JitterFactors { brightness, contrast, saturation, hue }
    }
}

/// Sampling ranges of the training attack layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Inclusive JPEG quality range.
    pub jpeg_quality: [u8; 2],
    /// Noise standard deviation on the 0–255 scale.
    pub noise_sigma: f64,
    pub blur_sigma: [f64; 2],
    pub kernel_size: usize,
    /// Low-pass cutoff range as fractions of the largest centered radius.
    pub lowpass_fraction: [f64; 2],
    pub jitter_strength: JitterStrength,
    pub crop_scale: [f64; 2],
    pub per_attack_probability: f64,
    pub include_geometric_in_training: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            jpeg_quality: [40, 90],
            noise_sigma: 10.0,
            blur_sigma: [0.5, 2.0],
            kernel_size: 7,
            lowpass_fraction: [0.4, 0.9],
            jitter_strength: JitterStrength::default(),
            crop_scale: [0.5, 1.0],
            per_attack_probability: 0.25,
            include_geometric_in_training: false,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64, open_lo: bool) -> Result<()> {
    let lo_ok = if open_lo { r[0] > lo } else { r[0] >= lo };
    if !(lo_ok && r[0] <= r[1] && r[1] <= hi) {
        return Err(Error::config(format!("{name} range {r:?} invalid")));
    }
    Ok(())
}

impl AttackConfig {
    /// Every attack disabled.
    pub fn disabled() -> Self {
        Self { per_attack_probability: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.per_attack_probability) {
            return Err(Error::config("per_attack_probability must lie in [0, 1]"));
        }
        let [q0, q1] = self.jpeg_quality;
        if !(1 <= q0 && q0 <= q1 && q1 <= 100) {
            return Err(Error::config(format!("jpeg quality range {:?} invalid", self.jpeg_quality)));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::config("kernel_size must be odd"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and non-negative"));
        }
        check_range("blur_sigma", self.blur_sigma, 0.0, f64::INFINITY, true)?;
        check_range("lowpass_fraction", self.lowpass_fraction, 0.0, 1.0, false)?;
        check_range("crop_scale", self.crop_scale, 0.0, 1.0, true)?;
        let j = &self.jitter_strength;
        if [j.brightness, j.contrast, j.saturation, j.hue].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::config("jitter strengths must be non-negative"));
        }
        Ok(())
    }

    /// Attack kinds in the training pool, in application order.
    pub fn pool(&self) -> Vec<AttackKind> {
        let mut pool = vec![AttackKind::LowPass, AttackKind::Blur, AttackKind::Noise];
        if self.include_geometric_in_training {
            pool.extend([AttackKind::ColorJitter, AttackKind::ResizeCrop]);
        }
        pool.push(AttackKind::Jpeg);
        pool
    }

    fn sample(&self, kind: AttackKind, width: usize, height: usize, rng: &mut SeededRng) -> AttackParams {
        let uniform = |rng: &mut SeededRng, r: [f64; 2]| if r[0] < r[1] { rng.gen_range(r[0]..=r[1]) } else { r[0] };
        match kind {
            AttackKind::LowPass => {
                AttackParams::LowPass { d: uniform(rng, self.lowpass_fraction) * r_max(width, height) }
            }
            AttackKind::Blur => AttackParams::Blur { sigma: uniform(rng, self.blur_sigma), kernel_size: self.kernel_size },
            AttackKind::Noise => AttackParams::Noise { sigma: self.noise_sigma, seed: noise::draw_seed(rng) },
            AttackKind::ColorJitter => AttackParams::ColorJitter(self.jitter_strength.sample(rng)),
            AttackKind::ResizeCrop => AttackParams::ResizeCrop(sample_crop(height, width, self.crop_scale, rng)),
            AttackKind::Jpeg => {
                AttackParams::Jpeg { quality: rng.gen_range(self.jpeg_quality[0]..=self.jpeg_quality[1]) }
            }
            AttackKind::HighPass | AttackKind::Poisson => unreachable!("not in the training pool"),
        }
    }
}

/// One pool entry of a layer draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub params: AttackParams,
    pub active: bool,
}

/// A recorded draw of the attack layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackPlan {
    /// Stream position before the draw.
    pub rng: RngState,
    pub steps: Vec<PlanStep>,
}

impl AttackPlan {
    pub fn active(&self) -> impl Iterator<Item = &AttackParams> {
        self.steps.iter().filter(|s| s.active).map(|s| &s.params)
    }

    pub fn is_identity(&self) -> bool {
        self.active().next().is_none()
    }

    /// Draws the next plan from `rng`.
    pub fn sample(cfg: &AttackConfig, width: usize, height: usize, rng: &mut SeededRng) -> Self {
        let state = rng.state();
        let steps = cfg
            .pool()
            .into_iter()
            .map(|kind| {
                let params = cfg.sample(kind, width, height, rng);
                let active = rng.gen_bool(cfg.per_attack_probability);
                PlanStep { params, active }
            })
            .collect();
        Self { rng: state, steps }
    }

    /// Applies the active steps in order.
    pub fn apply(&self, img: &Image, mode: JpegMode) -> Result<Image> {
        let mut cur = img.clone();
        for p in self.active() {
            cur = p.apply(&cur, mode)?;
        }
        Ok(cur)
    }

    /// Applies the plan keeping every intermediate input for the backward pass.
    pub fn apply_traced(&self, img: &Image) -> Result<AttackTrace> {
        let mut inputs = Vec::new();
        let mut cur = img.clone();
        for p in self.active() {
            let next = p.apply(&cur, JpegMode::Differentiable)?;
            inputs.push((*p, cur));
            cur = next;
        }
        Ok(AttackTrace { steps: inputs, output: cur })
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line.trim())?)
    }
}

/// Differentiable application record.
#[derive(Debug, Clone)]
pub struct AttackTrace {
    steps: Vec<(AttackParams, Image)>,
    pub output: Image,
}

impl AttackTrace {
    /// Gradient with respect to the layer input.
    pub fn backward(&self, grad: &[f64]) -> Result<Vec<f64>> {
        let mut g = grad.to_vec();
        for (p, input) in self.steps.iter().rev() {
            g = p.backward(input, &g)?;
        }
        Ok(g)
    }
}

/// Draws a plan and applies it: the attack layer.
pub fn attack_layer(img: &Image, cfg: &AttackConfig, rng: &mut SeededRng, mode: JpegMode) -> Result<(Image, AttackPlan)> {
    cfg.validate()?;
    let plan = AttackPlan::sample(cfg, img.width(), img.height(), rng);
    Ok((plan.apply(img, mode)?, plan))
}

/// Fixed attack parameters for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalAttacks {
    pub jpeg_quality: u8,
    pub blur_sigma: f64,
    pub kernel_size: usize,
    /// Low-pass cutoff as a fraction of the largest centered radius.
    pub lowpass_fraction: f64,
    pub jitter: f64,
    pub jitter_hue: f64,
    pub crop_scale: f64,
    pub noise_sigma: f64,
    pub poisson_scale: f64,
}

impl Default for EvalAttacks {
    fn default() -> Self {
        Self {
            jpeg_quality: 50,
            blur_sigma: 1.0,
            kernel_size: 7,
            lowpass_fraction: 0.5,
            jitter: 0.2,
            jitter_hue: 0.1,
            crop_scale: 0.75,
            noise_sigma: 10.0,
            poisson_scale: 255.0,
        }
    }
}

impl EvalAttacks {
    /// Concrete parameters of `kind` for one image; random parts come from `rng`.
    pub fn params(&self, kind: AttackKind, width: usize, height: usize, rng: &mut SeededRng) -> AttackParams {
        let d = self.lowpass_fraction * r_max(width, height);
        match kind {
            AttackKind::LowPass => AttackParams::LowPass { d },
            AttackKind::HighPass => AttackParams::HighPass { d },
            AttackKind::Blur => AttackParams::Blur { sigma: self.blur_sigma, kernel_size: self.kernel_size },
            AttackKind::Noise => AttackParams::Noise { sigma: self.noise_sigma, seed: rng.gen() },
            AttackKind::ColorJitter => {
                AttackParams::ColorJitter(JitterStrength::uniform(self.jitter, self.jitter_hue).sample(rng))
            }
            AttackKind::ResizeCrop => {
                AttackParams::ResizeCrop(sample_crop(height, width, [self.crop_scale, self.crop_scale], rng))
            }
            AttackKind::Jpeg => AttackParams::Jpeg { quality: self.jpeg_quality },
            AttackKind::Poisson => AttackParams::Poisson { scale: self.poisson_scale, seed: rng.gen() },
        }
    }

    /// Overrides one field from a `key=value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = || value.parse::<f64>().map_err(|_| Error::config(format!("{key}: not a number: {value:?}")));
        match key {
            "quality" | "jpeg_quality" => {
                self.jpeg_quality = value.parse().map_err(|_| Error::config(format!("bad quality {value:?}")))?
            }
            "sigma" | "blur_sigma" => self.blur_sigma = num()?,
            "kernel" | "kernel_size" => {
                self.kernel_size = value.parse().map_err(|_| Error::config(format!("bad kernel {value:?}")))?
            }
            "d" | "lowpass_fraction" => self.lowpass_fraction = num()?,
            "jitter" => self.jitter = num()?,
            "hue" | "jitter_hue" => self.jitter_hue = num()?,
            "scale" | "crop_scale" => self.crop_scale = num()?,
            "noise_sigma" => self.noise_sigma = num()?,
            "poisson_scale" => self.poisson_scale = num()?,
            _ => return Err(Error::config(format!("unknown attack parameter {key:?}"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::synth;

    fn pattern(side: usize) -> Image {
        Image::from_fn(side, side, |c, y, x| 0.5 + 0.3 * ((x as f64 * 0.9 + c as f64).sin() * (y as f64 * 0.6).cos()))
    }

    #[test]
    fn zero_probability_is_identity() {
        let img = pattern(16);
        let mut rng = SeededRng::new(1);
        let (out, plan) = attack_layer(&img, &AttackConfig::disabled(), &mut rng, JpegMode::Differentiable).unwrap();
        assert_eq!(out, img);
        assert!(plan.is_identity());
    }

    #[test]
    fn pool_order() {
        let cfg = AttackConfig { include_geometric_in_training: true, ..AttackConfig::default() };
        assert_eq!(
            cfg.pool(),
            [
                AttackKind::LowPass,
                AttackKind::Blur,
                AttackKind::Noise,
                AttackKind::ColorJitter,
                AttackKind::ResizeCrop,
                AttackKind::Jpeg
            ]
        );
        assert_eq!(AttackConfig::default().pool().len(), 4);
    }

    #[test]
    fn no_attack_frequency() {
        let cfg = AttackConfig::default();
        let mut rng = SeededRng::new(2024);
        let draws = 10_000;
        let none = (0..draws).filter(|_| AttackPlan::sample(&cfg, 16, 16, &mut rng).is_identity()).count();
        let freq = none as f64 / draws as f64;
        assert!((freq - 0.75f64.powi(4)).abs() < 0.02, "{freq}");
    }

    #[test]
    fn plan_json_replay_is_bit_exact() {
        let cfg = AttackConfig { per_attack_probability: 0.8, include_geometric_in_training: true, ..Default::default() };
        let img = pattern(16);
        let mut rng = SeededRng::new(9);
        for _ in 0..5 {
            for mode in [JpegMode::Exact, JpegMode::Differentiable] {
                let (out, plan) = attack_layer(&img, &cfg, &mut rng, mode).unwrap();
                let again = AttackPlan::from_json_line(&plan.to_json_line().unwrap()).unwrap();
                assert_eq!(again, plan);
                assert_eq!(again.apply(&img, mode).unwrap(), out);
                // Resampling from the stored stream position gives the same draw.
                let mut r = SeededRng::from_state(plan.rng);
                assert_eq!(AttackPlan::sample(&cfg, 16, 16, &mut r), plan);
            }
        }
    }

    #[test]
    fn attacks_keep_shape_and_range() {
        let img = synth::natural(16, &mut SeededRng::new(3));
        let mut rng = SeededRng::new(4);
        for kind in AttackKind::ALL {
            let p = EvalAttacks::default().params(kind, 16, 16, &mut rng);
            let out = p.apply(&img, JpegMode::Exact).unwrap();
            assert_eq!((out.width(), out.height()), (16, 16));
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn constant_image_through_jpeg() {
        let img = Image::filled(16, 0.42);
        for q in [50, 75, 100] {
            for out in [jpeg_exact(&img, q).unwrap(), jpeg_differentiable(&img, q)] {
                assert!(out.data().iter().all(|v| (v - 0.42).abs() <= 2.0 / 255.0));
            }
        }
    }

    #[test]
    fn jpeg_quality_100_is_near_lossless() {
        let img = synth::natural(64, &mut SeededRng::new(8));
        let out = jpeg_exact(&img, 100).unwrap();
        assert!(crate::metrics::psnr(&img, &out).unwrap() >= 40.0);
    }

    #[test]
    fn differentiable_jpeg_tracks_codec() {
        for q in [40u8, 75, 90] {
            let mut total = 0.0;
            for i in 0..10 {
                let img = synth::natural(32, &mut SeededRng::new(100 + i)).quantized();
                let a = jpeg_exact(&img, q).unwrap();
                let b = jpeg_differentiable(&img, q);
                total += a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len() as f64;
            }
            let mean = total / 10.0;
            assert!(mean <= 3.0 / 255.0, "q{q}: {}", mean * 255.0);
        }
    }

    /// Finite differences on unsaturated pixels, double precision.
    fn grad_check(p: AttackParams) {
        let side = 8;
        let img = Image::from_fn(side, side, |c, y, x| 0.3 + 0.4 * (((c * 13 + y * 7 + x * 3) % 11) as f64 / 10.0));
        let n = img.data().len();
        let g: Vec<f64> = (0..n).map(|i| ((i * 17) % 7) as f64 / 7.0 - 0.4).collect();
        let loss = |im: &Image| -> f64 {
            p.apply(im, JpegMode::Differentiable).unwrap().data().iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let analytic = p.backward(&img, &g).unwrap();
        let h = 1e-6;
        for i in (0..n).step_by(5) {
            let mut plus = img.data().to_vec();
            let mut minus = img.data().to_vec();
            plus[i] += h;
            minus[i] -= h;
            let fd = (loss(&Image::new(side, side, plus).unwrap()) - loss(&Image::new(side, side, minus).unwrap()))
                / (2.0 * h);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-3);
            assert!(err < 1e-4, "{:?} coord {i}: fd {fd} analytic {}", p.kind(), analytic[i]);
        }
    }

    #[test]
    fn differentiable_attacks_pass_gradient_checks() {
        grad_check(AttackParams::Blur { sigma: 1.3, kernel_size: 5 });
        grad_check(AttackParams::LowPass { d: 2.5 });
        grad_check(AttackParams::HighPass { d: 2.5 });
        grad_check(AttackParams::Noise { sigma: 10.0, seed: 1 });
        grad_check(AttackParams::ColorJitter(JitterFactors { brightness: 1.1, contrast: 0.9, saturation: 1.2, hue: 0.05 }));
        grad_check(AttackParams::ResizeCrop(CropRect { top: 1, left: 2, height: 6, width: 5 }));
    }

    #[test]
    fn jpeg_surrogate_gradient() {
        // Rounding is piecewise constant; its straight-through rule is checked
        // on the model with rounding switched off, where the chain is exact.
        let side = 8;
        let img = Image::from_fn(side, side, |c, y, x| 0.3 + 0.04 * ((c + y + 2 * x) % 10) as f64);
        let g: Vec<f64> = (0..img.data().len()).map(|i| ((i * 5) % 9) as f64 / 9.0 - 0.5).collect();
        let analytic = jpeg_differentiable_backward(&img, 60, &g);
        let loss = |d: &[f64]| -> f64 { jpeg_model_raw(d, side, side, 60, false).iter().zip(&g).map(|(a, b)| a * b).sum() };
        for i in (0..img.data().len()).step_by(7) {
            let mut plus = img.data().to_vec();
            let mut minus = img.data().to_vec();
            plus[i] += 1e-6;
            minus[i] -= 1e-6;
            let fd = (loss(&plus) - loss(&minus)) / 2e-6;
            assert!((fd - analytic[i]).abs() < 1e-4 * fd.abs().max(1.0), "coord {i}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::default().validate().is_ok());
        assert!(AttackConfig { kernel_size: 6, ..Default::default() }.validate().is_err());
        assert!(AttackConfig { crop_scale: [0.9, 0.5], ..Default::default() }.validate().is_err());
        assert!(AttackConfig { per_attack_probability: 1.5, ..Default::default() }.validate().is_err());
        assert!("blur".parse::<AttackKind>().is_ok());
        assert!("rotate".parse::<AttackKind>().is_err());
    }
}
