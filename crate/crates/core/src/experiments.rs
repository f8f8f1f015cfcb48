//! Evaluation protocols and analyses on a trained model: fidelity,
//! robustness, specificity, the high/low-pass sweep, averaged radial spectra
//! and residues.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, AttackKind, AttackParams, AttackPlan, EvalAttacks, JpegMode};
use crate::error::{Error, Result};
use crate::imaging::{FeatureMap, Image, SeededRng};
use crate::metrics::{ncc, psnr, ssim, success_rate, MetricReport, NCC_THRESHOLD};
use crate::models::{make_container, ModelParams};
use crate::nn::Real;
use crate::spectral::{azimuthal_integral, out_of_band_fraction, r_max, CutoffRadius, RadialSpectrum};
use crate::training::{train, Knockout, TrainConfig, TrainLogRecord};

/// Images per network call during evaluation.
const CHUNK: usize = 16;

/// Evaluation (cover, secret) pairs with stable ids.
#[derive(Debug, Clone)]
pub struct EvalPairs {
    pub ids: Vec<String>,
    pub covers: Vec<Image>,
    pub secrets: Vec<Image>,
}

impl EvalPairs {
    /// Pairs image `i` (cover) with image `(i + n/2) mod n` (secret).
    pub fn from_pool(images: &[Image]) -> Result<Self> {
        let n = images.len();
        if n < 2 {
            return Err(Error::config("evaluation needs at least two images"));
        }
        let ids = (0..n).map(|i| format!("pair{i:04}")).collect();
        let covers = images.to_vec();
        let secrets = (0..n).map(|i| images[(i + n / 2) % n].clone()).collect();
        Ok(Self { ids, covers, secrets })
    }

    pub fn new(covers: Vec<Image>, secrets: Vec<Image>) -> Result<Self> {
        if covers.is_empty() || covers.len() != secrets.len() {
            return Err(Error::config("evaluation needs matching, non-empty cover and secret lists"));
        }
        let ids = (0..covers.len()).map(|i| format!("pair{i:04}")).collect();
        Ok(Self { ids, covers, secrets })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn chunked<T>(items: &[Image], mut f: impl FnMut(&[Image]) -> Result<Vec<T>>) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(CHUNK) {
        out.extend(f(chunk)?);
    }
    Ok(out)
}

/// NCC for specificity: an all-black output is the ideal answer, whose NCC is
/// undefined; it counts as 0.
fn specificity_ncc(s: &Image, out: &Image) -> Result<f64> {
    match ncc(s, out) {
        Ok(v) => Ok(v),
        Err(Error::Undefined(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// NCC for retrieval, with an undefined result counting as 0 (invalid).
fn retrieval_ncc(s: &Image, out: &Image) -> Result<f64> {
    specificity_ncc(s, out)
}

/// Feature maps, 8-bit containers and clean retrievals for every pair.
#[derive(Debug, Clone)]
pub struct Embedded {
    pub maps: Vec<FeatureMap>,
    pub containers: Vec<Image>,
}

/// Embeds every secret and builds containers as stored images (8-bit).
pub fn embed_all<T: Real>(params: &mut ModelParams<T>, pairs: &EvalPairs) -> Result<Embedded> {
    let maps = chunked(&pairs.secrets, |c| params.embed_batch(c))?;
    let containers = pairs
        .covers
        .iter()
        .zip(&maps)
        .map(|(c, q)| make_container(c, q).map(|x| x.quantized()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Embedded { maps, containers })
}

pub fn retrieve_all<T: Real>(params: &mut ModelParams<T>, xs: &[Image]) -> Result<Vec<Image>> {
    chunked(xs, |c| params.retrieve_batch(c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    /// Cover vs container; the NCC column holds the secret retrieval NCC.
    pub container: MetricReport,
    /// Secret vs secret retrieved from the unattacked container.
    pub secret: MetricReport,
}

pub fn fidelity<T: Real>(params: &mut ModelParams<T>, pairs: &EvalPairs, embedded: &Embedded) -> Result<FidelityReport> {
    let recovered = retrieve_all(params, &embedded.containers)?;
    let mut c_rows = Vec::with_capacity(pairs.len());
    let mut s_rows = Vec::with_capacity(pairs.len());
    for i in 0..pairs.len() {
        let (c, cp, s, r) = (&pairs.covers[i], &embedded.containers[i], &pairs.secrets[i], &recovered[i]);
        let n = retrieval_ncc(s, r)?;
        c_rows.push((pairs.ids[i].clone(), psnr(c, cp)?, ssim(c, cp)?, n));
        s_rows.push((pairs.ids[i].clone(), psnr(s, r)?, ssim(s, r)?, n));
    }
    Ok(FidelityReport {
        container: MetricReport::from_rows(c_rows, NCC_THRESHOLD)?,
        secret: MetricReport::from_rows(s_rows, NCC_THRESHOLD)?,
    })
}

/// Attacked containers: rows compare container vs attacked container
/// (PSNR/SSIM) and secret vs retrieval (NCC).
pub fn attacked_report<T: Real>(
    params: &mut ModelParams<T>,
    pairs: &EvalPairs,
    embedded: &Embedded,
    attacked: &[Image],
) -> Result<MetricReport> {
    let recovered = retrieve_all(params, attacked)?;
    let mut rows = Vec::with_capacity(pairs.len());
    for i in 0..pairs.len() {
        let cp = &embedded.containers[i];
        rows.push((
            pairs.ids[i].clone(),
            psnr(cp, &attacked[i])?,
            ssim(cp, &attacked[i])?,
            retrieval_ncc(&pairs.secrets[i], &recovered[i])?,
        ));
    }
    MetricReport::from_rows(rows, NCC_THRESHOLD)
}

/// One robustness report per attack, exact implementations.
pub fn robustness<T: Real>(
    params: &mut ModelParams<T>,
    pairs: &EvalPairs,
    embedded: &Embedded,
    attacks: &EvalAttacks,
    kinds: &[AttackKind],
    seed: u64,
) -> Result<Vec<(AttackKind, MetricReport)>> {
    let root = SeededRng::new(seed);
    let mut out = Vec::with_capacity(kinds.len());
    for (k, &kind) in kinds.iter().enumerate() {
        let mut rng = root.substream(k as u64);
        let attacked = embedded
            .containers
            .iter()
            .map(|cp| attacks.params(kind, cp.width(), cp.height(), &mut rng).apply(cp, JpegMode::Exact))
            .collect::<Result<Vec<_>>>()?;
        out.push((kind, attacked_report(params, pairs, embedded, &attacked)?));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecificityReport {
    pub clean: MetricReport,
    pub damaged_clean: MetricReport,
    /// Mean intensity of the retrieval output on clean inputs.
    pub clean_output_mean: f64,
}

/// Retrieval on covers and on covers passed through the attack layer; rows
/// hold the cover-vs-input PSNR/SSIM and NCC(secret, output).
pub fn specificity<T: Real>(
    params: &mut ModelParams<T>,
    pairs: &EvalPairs,
    layer: &AttackConfig,
    seed: u64,
) -> Result<SpecificityReport> {
    let mut rng = SeededRng::new(seed);
    let damaged = pairs
        .covers
        .iter()
        .map(|c| AttackPlan::sample(layer, c.width(), c.height(), &mut rng).apply(c, JpegMode::Exact))
        .collect::<Result<Vec<_>>>()?;
    let mut report = |inputs: &[Image]| -> Result<(MetricReport, f64)> {
        let outs = retrieve_all(params, inputs)?;
        let mut rows = Vec::with_capacity(pairs.len());
        for i in 0..pairs.len() {
            let c = &pairs.covers[i];
            rows.push((
                pairs.ids[i].clone(),
                psnr(c, &inputs[i])?,
                ssim(c, &inputs[i])?,
                specificity_ncc(&pairs.secrets[i], &outs[i])?,
            ));
        }
        let mean = outs.iter().map(Image::mean).sum::<f64>() / outs.len() as f64;
        Ok((MetricReport::from_rows(rows, NCC_THRESHOLD)?, mean))
    };
    let (clean, clean_output_mean) = report(&pairs.covers)?;
    let (damaged_clean, _) = report(&damaged)?;
    Ok(SpecificityReport { clean, damaged_clean, clean_output_mean })
}

/// One row of the filter sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub filter: SweepFilter,
    pub d: f64,
    /// `d` as a fraction of the largest centered radius.
    pub fraction: f64,
    pub mean_ncc: f64,
    pub sr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepFilter {
    LowPass,
    HighPass,
}

impl SweepFilter {
    pub fn name(self) -> &'static str {
        match self {
            SweepFilter::LowPass => "low-pass",
            SweepFilter::HighPass => "high-pass",
        }
    }
}

pub const SWEEP_CSV_HEADER: &str = "filter,d,fraction,mean_ncc,sr";

/// Reference cutoffs at 256 pixels, rescaled to `side`, followed by
/// fractions 0.625, 0.75, 0.875 and 1 of the largest radius.
pub fn default_sweep_radii(side: usize) -> Vec<f64> {
    let rm = r_max(side, side);
    let mut d: Vec<f64> = [1.0, 20.0, 40.0, 60.0, 80.0].iter().map(|v| v * side as f64 / 256.0).collect();
    d.extend([0.625, 0.75, 0.875, 1.0].iter().map(|f| f * rm));
    d
}

pub fn filter_sweep<T: Real>(
    params: &mut ModelParams<T>,
    pairs: &EvalPairs,
    embedded: &Embedded,
    radii: &[f64],
) -> Result<Vec<SweepRow>> {
    let first = pairs.covers.first().ok_or_else(|| Error::config("empty evaluation set"))?;
    let (w, h) = (first.width(), first.height());
    let rm = r_max(w, h);
    let mut rows = Vec::new();
    for filter in [SweepFilter::LowPass, SweepFilter::HighPass] {
        for &d in radii {
            CutoffRadius::new(d, w, h)?;
            let p = match filter {
                SweepFilter::LowPass => AttackParams::LowPass { d },
                SweepFilter::HighPass => AttackParams::HighPass { d },
            };
            let attacked = embedded
                .containers
                .iter()
                .map(|cp| p.apply(cp, JpegMode::Exact))
                .collect::<Result<Vec<_>>>()?;
            let outs = retrieve_all(params, &attacked)?;
            let nccs = pairs
                .secrets
                .iter()
                .zip(&outs)
                .map(|(s, o)| retrieval_ncc(s, o))
                .collect::<Result<Vec<_>>>()?;
            rows.push(SweepRow {
                filter,
                d,
                fraction: d / rm,
                mean_ncc: nccs.iter().sum::<f64>() / nccs.len() as f64,
                sr: success_rate(&nccs, NCC_THRESHOLD)?,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.4},{:.4},{:.6},{:.4}", r.filter.name(), r.d, r.fraction, r.mean_ncc, r.sr);
    }
    s
}

/// Averaged azimuthal spectra of two image sets and their relative deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumComparison {
    pub reference: RadialSpectrum,
    pub other: RadialSpectrum,
    /// `|other − reference| / reference` per radius (0 where the reference is 0).
    pub relative_deviation: Vec<f64>,
}

pub const SPECTRUM_CSV_HEADER: &str = "radius,reference,other,relative_deviation";

pub fn mean_spectrum(images: &[Image]) -> Result<RadialSpectrum> {
    let spectra = images.iter().map(azimuthal_integral).collect::<Result<Vec<_>>>()?;
    RadialSpectrum::mean(&spectra)
}

impl SpectrumComparison {
    pub fn new(reference: &[Image], other: &[Image]) -> Result<Self> {
        let reference = mean_spectrum(reference)?;
        let other = mean_spectrum(other)?;
        if reference.values.len() != other.values.len() {
            return Err(Error::shape("image sets differ in size"));
        }
        let relative_deviation = reference
            .values
            .iter()
            .zip(&other.values)
            .map(|(r, o)| if *r > 0.0 { (o - r).abs() / r } else { 0.0 })
            .collect();
        Ok(Self { reference, other, relative_deviation })
    }

    /// Radii in the upper quarter of the radial range.
    pub fn top_quartile(&self) -> std::ops::Range<usize> {
        let n = self.reference.values.len();
        let last = n - 1;
        (last * 3).div_ceil(4)..n
    }

    /// Largest per-radius relative deviation within the top quartile.
    pub fn top_quartile_max_deviation(&self) -> f64 {
        self.relative_deviation[self.top_quartile()].iter().cloned().fold(0.0, f64::max)
    }

    /// Relative deviation of the summed energy within the top quartile.
    pub fn top_quartile_band_deviation(&self) -> f64 {
        let band = self.top_quartile();
        let r: f64 = self.reference.values[band.clone()].iter().sum();
        let o: f64 = self.other.values[band].iter().sum();
        if r > 0.0 {
            (o - r).abs() / r
        } else {
            0.0
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{SPECTRUM_CSV_HEADER}\n");
        for (k, ((r, o), d)) in self.reference.values.iter().zip(&self.other.values).zip(&self.relative_deviation).enumerate() {
            let _ = writeln!(s, "{k},{r:e},{o:e},{d:.6}");
        }
        s
    }
}

/// Log-scale line plot of radial spectra as a standalone SVG document.
pub fn spectrum_svg(series: &[(&str, &RadialSpectrum)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let logs: Vec<Vec<f64>> =
        series.iter().map(|(_, s)| s.values.iter().map(|v| v.max(1e-30).log10()).collect()).collect();
    let (lo, hi) = logs.iter().flatten().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-9);
    let n = series.iter().map(|(_, s)| s.values.len()).max().unwrap_or(1).max(2);
    let x = |k: usize| PAD + (W - 2.0 * PAD) * k as f64 / (n - 1) as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / span;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ty}\" text-anchor=\"middle\" font-size=\"12\">radius</text>\n\
         <text x=\"14\" y=\"{cy}\" font-size=\"12\" transform=\"rotate(-90 14 {cy})\" text-anchor=\"middle\">log10 energy</text>\n",
        b = H - PAD,
        r = W - PAD,
        cx = W / 2.0,
        ty = H - 12.0,
        cy = H / 2.0,
    );
    for (i, ((name, _), l)) in series.iter().zip(&logs).enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = l.iter().enumerate().map(|(k, v)| format!("{:.1},{:.1}", x(k), y(*v))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>", pts.join(" "));
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\" font-size=\"12\">{}</text>",
            W - PAD - 120.0,
            PAD + 16.0 * i as f64,
            xml_escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Mean fraction of feature-map energy beyond the cutoff `d`.
pub fn mean_out_of_band(maps: &[FeatureMap], d: CutoffRadius) -> Result<f64> {
    if maps.is_empty() {
        return Err(Error::config("no feature maps"));
    }
    let total: f64 = maps.iter().map(|q| out_of_band_fraction(q.data(), q.width(), q.height(), d)).sum();
    Ok(total / maps.len() as f64)
}

/// Headline numbers of a trained model, as used by reports and ablations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub container_psnr: f64,
    pub container_ssim: f64,
    pub secret_psnr: f64,
    pub retrieval_sr: f64,
    pub retrieval_ncc: f64,
    pub clean_ncc: f64,
    pub clean_sr: f64,
    pub damaged_clean_ncc: f64,
    pub damaged_clean_sr: f64,
    pub clean_output_mean: f64,
    pub out_of_band_fraction: f64,
}

impl Summary {
    pub fn new(fid: &FidelityReport, spec: &SpecificityReport, out_of_band_fraction: f64) -> Self {
        Self {
            container_psnr: fid.container.aggregate.mean_psnr,
            container_ssim: fid.container.aggregate.mean_ssim,
            secret_psnr: fid.secret.aggregate.mean_psnr,
            retrieval_sr: fid.secret.aggregate.sr,
            retrieval_ncc: fid.secret.aggregate.mean_ncc,
            clean_ncc: spec.clean.aggregate.mean_ncc,
            clean_sr: spec.clean.aggregate.sr,
            damaged_clean_ncc: spec.damaged_clean.aggregate.mean_ncc,
            damaged_clean_sr: spec.damaged_clean.aggregate.sr,
            clean_output_mean: spec.clean_output_mean,
            out_of_band_fraction,
        }
    }
}

/// Fidelity, specificity and spectral summary of a model.
pub fn summarize<T: Real>(
    params: &mut ModelParams<T>,
    pairs: &EvalPairs,
    d: CutoffRadius,
    layer: &AttackConfig,
    seed: u64,
) -> Result<Summary> {
    let embedded = embed_all(params, pairs)?;
    let fid = fidelity(params, pairs, &embedded)?;
    let spec = specificity(params, pairs, layer, seed)?;
    Ok(Summary::new(&fid, &spec, mean_out_of_band(&embedded.maps, d)?))
}

/// One trained variant of an ablation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub summary: Summary,
}

pub const ABLATION_CSV_HEADER: &str = "variant,container_psnr,container_ssim,retrieval_ncc,retrieval_sr,clean_ncc,clean_sr,damaged_clean_sr,out_of_band_fraction";

/// Trains the full model and one model per knockout with the same seed, and
/// summarizes each on `pairs`.
pub fn ablation(
    cfg: &TrainConfig,
    train_set: &[Image],
    pairs: &EvalPairs,
    knockouts: &[Knockout],
    mut progress: impl FnMut(&str, &TrainLogRecord),
) -> Result<Vec<AblationRow>> {
    let mut variants = vec![("full".to_string(), cfg.clone())];
    for k in knockouts {
        variants.push((format!("no_{}", k.name()), TrainConfig { ablation: k.apply(cfg.ablation), ..cfg.clone() }));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for (name, c) in variants {
        let mut out = train(&c, train_set, None, |r| progress(&name, r))?;
        let summary = summarize(&mut out.params, pairs, c.cutoff()?, &c.attacks, c.seed)?;
        rows.push(AblationRow { variant: name, summary });
    }
    Ok(rows)
}

pub fn ablation_to_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        let m = &r.summary;
        let _ = writeln!(
            s,
            "{},{:.4},{:.6},{:.6},{:.4},{:.6},{:.4},{:.4},{:.6}",
            r.variant, m.container_psnr, m.container_ssim, m.retrieval_ncc, m.retrieval_sr, m.clean_ncc, m.clean_sr, m.damaged_clean_sr, m.out_of_band_fraction
        );
    }
    s
}
