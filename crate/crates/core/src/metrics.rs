//! Fidelity and retrieval metrics: PSNR, global SSIM, NCC, success rate,
//! residue images, and the per-pair report they feed.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

/// NCC above which a retrieval counts as valid.
pub const NCC_THRESHOLD: f64 = 0.95;

/// Pixel scale the metric is reported in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PixelScale {
    /// Values in `[0, 1]`.
    #[default]
    Unit,
    /// Values in `[0, 255]`, for comparison with 8-bit tooling.
    EightBit,
}

impl PixelScale {
    pub fn max(self) -> f64 {
        match self {
            PixelScale::Unit => 1.0,
            PixelScale::EightBit => 255.0,
        }
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!("metric operands have {} and {} values", a.len(), b.len())));
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// PSNR in dB for values already expressed in `scale`; `+inf` for identical inputs.
pub fn psnr_values(a: &[f64], b: &[f64], scale: PixelScale) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * scale.max().log10() - 10.0 * m.log10())
}

pub fn psnr(x: &Image, y: &Image) -> Result<f64> {
    x.same_shape(y)?;
    psnr_values(x.data(), y.data(), PixelScale::Unit)
}

/// PSNR after mapping both images to the 8-bit scale (same number, 255 peak).
pub fn psnr_8bit(x: &Image, y: &Image) -> Result<f64> {
    x.same_shape(y)?;
    let a: Vec<f64> = x.data().iter().map(|v| v * 255.0).collect();
    let b: Vec<f64> = y.data().iter().map(|v| v * 255.0).collect();
    psnr_values(&a, &b, PixelScale::EightBit)
}

/// `inf` rendering for reports.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConstants {
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConstants {
    fn default() -> Self {
        Self { k1: 0.01, k2: 0.03, dynamic_range: 1.0 }
    }
}

impl SsimConstants {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
}

/// SSIM of two equally long signals from global statistics (population
/// variance and covariance).
pub fn ssim_values(x: &[f64], y: &[f64], k: SsimConstants) -> Result<f64> {
    same_len(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        vx += da * da;
        vy += db * db;
        cov += da * db;
    }
    let (vx, vy, cov) = (vx / n, vy / n, cov / n);
    let (c1, c2) = (k.c1(), k.c2());
    Ok((2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
}

/// Global SSIM per channel, averaged over channels.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    x.same_shape(y)?;
    let k = SsimConstants::default();
    let mut total = 0.0;
    for c in 0..3 {
        total += ssim_values(x.plane(c), y.plane(c), k)?;
    }
    Ok(total / 3.0)
}

/// Windowed SSIM (8×8 windows, stride 4) for cross-tool comparison.
pub fn ssim_windowed(x: &Image, y: &Image) -> Result<f64> {
    x.same_shape(y)?;
    let (w, h) = (x.width(), x.height());
    let win = 8.min(w).min(h);
    let step = (win / 2).max(1);
    let k = SsimConstants::default();
    let (mut total, mut count) = (0.0, 0usize);
    let mut a = Vec::with_capacity(win * win);
    let mut b = Vec::with_capacity(win * win);
    for c in 0..3 {
        let (pa, pb) = (x.plane(c), y.plane(c));
        let mut top = 0;
        while top + win <= h {
            let mut left = 0;
            while left + win <= w {
                a.clear();
                b.clear();
                for yy in top..top + win {
                    a.extend_from_slice(&pa[yy * w + left..yy * w + left + win]);
                    b.extend_from_slice(&pb[yy * w + left..yy * w + left + win]);
                }
                total += ssim_values(&a, &b, k)?;
                count += 1;
                left += step;
            }
            top += step;
        }
    }
    Ok(total / count as f64)
}

/// Cosine similarity of flattened vectors. Zero-norm operands are an error.
pub fn ncc_values(s: &[f64], t: &[f64]) -> Result<f64> {
    same_len(s, t)?;
    let (mut dot, mut ns, mut nt) = (0.0, 0.0, 0.0);
    for (a, b) in s.iter().zip(t) {
        dot += a * b;
        ns += a * a;
        nt += b * b;
    }
    if ns == 0.0 || nt == 0.0 {
        return Err(Error::Undefined("NCC with a zero-norm operand".into()));
    }
    Ok(dot / (ns.sqrt() * nt.sqrt()))
}

pub fn ncc(s: &Image, t: &Image) -> Result<f64> {
    s.same_shape(t)?;
    ncc_values(s.data(), t.data())
}

/// Fraction of values strictly above `threshold`.
pub fn success_rate(nccs: &[f64], threshold: f64) -> Result<f64> {
    if nccs.is_empty() {
        return Err(Error::config("success rate of an empty set"));
    }
    Ok(nccs.iter().filter(|&&v| v > threshold).count() as f64 / nccs.len() as f64)
}

/// `clamp(gain·|a − b|, 0, 1)`.
pub fn residue(a: &Image, b: &Image, gain: f64) -> Result<Image> {
    a.same_shape(b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| gain * (x - y).abs()).collect();
    Image::from_clamped(a.width(), a.height(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub ncc: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_ncc: f64,
    pub sr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub aggregate: Aggregate,
}

pub const REPORT_CSV_HEADER: &str = "id,psnr_db,ssim,ncc,valid";

impl MetricReport {
    /// Builds a report from `(id, psnr, ssim, ncc)` rows; validity uses `threshold`.
    pub fn from_rows(rows: Vec<(String, f64, f64, f64)>, threshold: f64) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::config("metric report needs at least one row"));
        }
        let mut rows: Vec<MetricRow> = rows
            .into_iter()
            .map(|(id, psnr_db, ssim, ncc)| MetricRow { id, psnr_db, ssim, ncc, valid: ncc > threshold })
            .collect();
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let n = rows.len() as f64;
        let nccs: Vec<f64> = rows.iter().map(|r| r.ncc).collect();
        let aggregate = Aggregate {
            mean_psnr: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
            mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            mean_ncc: nccs.iter().sum::<f64>() / n,
            sr: success_rate(&nccs, threshold)?,
        };
        Ok(Self { rows, aggregate })
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.6},{:.6},{}", r.id, format_db(r.psnr_db), r.ssim, r.ncc, r.valid);
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        // JSON has no infinity; identical pairs are written as the string "inf".
        let mut v = serde_json::to_value(self)?;
        if let Some(rows) = v.get_mut("rows").and_then(|r| r.as_array_mut()) {
            for (row, r) in rows.iter_mut().zip(&self.rows) {
                if r.psnr_db.is_infinite() {
                    row["psnr_db"] = serde_json::Value::String("inf".into());
                }
            }
        }
        if self.aggregate.mean_psnr.is_infinite() {
            v["aggregate"]["mean_psnr"] = serde_json::Value::String("inf".into());
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loop_mse(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += (a[i] - b[i]).powi(2);
        }
        s / a.len() as f64
    }

    #[test]
    fn psnr_reference_values() {
        let a = vec![0.0; 12];
        let b = vec![255.0; 12];
        assert_eq!(psnr_values(&a, &b, PixelScale::EightBit).unwrap(), 0.0);
        let c = vec![1.0; 12];
        let v = psnr_values(&a, &c, PixelScale::EightBit).unwrap();
        assert!((v - 48.1308).abs() < 1e-3, "{v}");
        assert!(psnr_values(&a, &a, PixelScale::Unit).unwrap().is_infinite());
        assert_eq!(format_db(f64::INFINITY), "inf");
    }

    #[test]
    fn psnr_8bit_matches_unit_scale() {
        let x = Image::filled(4, 0.2);
        let y = Image::filled(4, 0.3);
        assert!((psnr(&x, &y).unwrap() - psnr_8bit(&x, &y).unwrap()).abs() < 1e-9);
        assert!((loop_mse(x.data(), y.data()) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn ssim_closed_forms() {
        let x = Image::filled(4, 0.25);
        let y = Image::filled(4, 0.75);
        let expected = (2.0 * 0.25 * 0.75 + 1e-4) / (0.25f64.powi(2) + 0.75f64.powi(2) + 1e-4);
        assert!((ssim(&x, &y).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.6001).abs() < 1e-4);
        let z = Image::filled(4, 0.0);
        let o = Image::filled(4, 1.0);
        assert!((ssim(&z, &o).unwrap() - 1e-4 / (1.0 + 1e-4)).abs() < 1e-12);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ncc_properties() {
        let s: Vec<f64> = (0..8).map(|i| i as f64 + 1.0).collect();
        let t: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        assert!((ncc_values(&s, &s).unwrap() - 1.0).abs() < 1e-15);
        assert!((ncc_values(&s, &t).unwrap() - 1.0).abs() < 1e-15);
        let left = Image::from_fn(4, 4, |_, _, x| if x < 2 { 1.0 } else { 0.0 });
        let right = Image::from_fn(4, 4, |_, _, x| if x >= 2 { 1.0 } else { 0.0 });
        assert_eq!(ncc(&left, &right).unwrap(), 0.0);
        assert!(matches!(ncc(&left, &Image::filled(4, 0.0)), Err(Error::Undefined(_))));
    }

    #[test]
    fn success_rate_threshold_is_strict() {
        assert_eq!(success_rate(&[0.96, 0.94], 0.95).unwrap(), 0.5);
        assert_eq!(success_rate(&[0.95], 0.95).unwrap(), 0.0);
        assert_eq!(success_rate(&[1.0, 1.0], 0.95).unwrap(), 1.0);
        assert!(success_rate(&[], 0.95).is_err());
    }

    #[test]
    fn residue_gain_and_saturation() {
        let a = Image::filled(2, 0.5);
        assert!(residue(&a, &a, 10.0).unwrap().data().iter().all(|&v| v == 0.0));
        let b = Image::filled(2, 0.55);
        assert!(residue(&a, &b, 10.0).unwrap().data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
        let c = Image::filled(2, 0.7);
        assert!(residue(&a, &c, 10.0).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(residue(&a, &Image::filled(3, 0.0), 10.0).is_err());
    }

    #[test]
    fn report_layout() {
        let r = MetricReport::from_rows(
            vec![("b".into(), f64::INFINITY, 1.0, 0.96), ("a".into(), 30.0, 0.9, 0.5)],
            NCC_THRESHOLD,
        )
        .unwrap();
        assert_eq!(r.rows[0].id, "a");
        assert_eq!(r.aggregate.sr, 0.5);
        let csv = r.to_csv();
        assert_eq!(csv.lines().next().unwrap(), REPORT_CSV_HEADER);
        assert!(csv.contains("b,inf,1.000000,0.960000,true"));
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json["rows"][1]["psnr_db"], "inf");
        assert!(MetricReport::from_rows(vec![], 0.95).is_err());
    }
}
