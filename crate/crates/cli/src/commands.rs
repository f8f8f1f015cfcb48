use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lids::attacks::{AttackKind, EvalAttacks, JpegMode};
use lids::experiments::{
    ablation, ablation_to_csv, default_sweep_radii, embed_all, filter_sweep, fidelity, mean_spectrum, robustness,
    specificity, spectrum_svg, sweep_to_csv, EvalPairs, SpectrumComparison,
};
use lids::imaging::{list_images, load_all, load_image, save_image, synth, SaveFormat};
use lids::metrics::{format_db, ncc, psnr, residue, ssim, MetricReport, NCC_THRESHOLD};
use lids::models::{make_container, Checkpoint, ModelParams};
use lids::spectral::out_of_band_fraction;
use lids::training::{train, TrainConfig, TrainLogRecord};
use lids::{Error, Image, Result, SeededRng};
use serde_json::json;

use crate::run_dir::{Manifest, RunDir};
use crate::{Cli, Command, EvalAttackArgs, Format, Protocol, TrainArgs};

pub const ROBUSTNESS_CSV_HEADER: &str = "attack,mean_psnr,mean_ssim,mean_ncc,sr";
pub const SPECIFICITY_CSV_HEADER: &str = "input,mean_psnr,mean_ssim,mean_ncc,sr,output_mean";

/// Executes the parsed command and returns the committed output directory.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let name = command_name(&cli.command);
    let cfg = explicit_config(cli)?;
    let seed = cli.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
    let run = RunDir::create(cli.out.as_deref(), name, seed)?;
    let recorded = match &cli.command {
        Command::GenData { count, side } => gen_data(&run, *count, *side, seed)?,
        Command::Train(args) => cmd_train(&run, cli, cfg, args)?,
        Command::Embed { checkpoint, cover, secret } => embed(&run, cli, checkpoint, cover, secret)?,
        Command::Extract { checkpoint, image, reference } => extract(&run, cli, checkpoint, image, reference.as_deref())?,
        Command::Attack { input, kind, params, side } => attack(&run, cli, input, *kind, params, *side, seed)?,
        Command::Evaluate { checkpoint, eval_dir, protocol, attacks } => {
            evaluate(&run, cli, checkpoint, eval_dir, *protocol, attacks, seed)?
        }
        Command::FreqAnalysis { images, compare, side } => freq_analysis(&run, cli, images, compare.as_deref(), *side)?,
        Command::SweepFilters { checkpoint, eval_dir, d } => sweep(&run, cli, checkpoint, eval_dir, d)?,
        Command::Residue { a, b, gain, side } => cmd_residue(&run, a, b, *gain, *side)?,
        Command::Ablate { train, eval_dir, knockout } => ablate(&run, cli, cfg, train, eval_dir, knockout)?,
    };
    run.commit(&Manifest::new(name, seed, recorded))
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData { .. } => "gen-data",
        Command::Train(_) => "train",
        Command::Embed { .. } => "embed",
        Command::Extract { .. } => "extract",
        Command::Attack { .. } => "attack",
        Command::Evaluate { .. } => "evaluate",
        Command::FreqAnalysis { .. } => "freq-analysis",
        Command::SweepFilters { .. } => "sweep-filters",
        Command::Residue { .. } => "residue",
        Command::Ablate { .. } => "ablate",
    }
}

fn explicit_config(cli: &Cli) -> Result<Option<TrainConfig>> {
    let Some(path) = &cli.config else { return Ok(None) };
    let mut cfg = TrainConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(Some(cfg))
}

/// Model plus the configuration it was trained with (or `--config`).
fn load_model(cli: &Cli, path: &Path) -> Result<(ModelParams<f32>, TrainConfig)> {
    let ckpt = Checkpoint::<f32>::load(path)?;
    let cfg = match explicit_config(cli)? {
        Some(c) => c,
        None => serde_json::from_value(ckpt.meta.config.clone())
            .map_err(|e| Error::Checkpoint(format!("stored configuration unreadable: {e}")))?,
    };
    if cfg.side != ckpt.params.spec().side() {
        return Err(Error::Shape(format!("config side {} does not match checkpoint side {}", cfg.side, ckpt.params.spec().side())));
    }
    Ok((ckpt.params, cfg))
}

/// Loads a directory into pairs keyed by the cover file stem.
fn load_pairs(dir: &Path, side: usize) -> Result<EvalPairs> {
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::Config(format!("no images in {}", dir.display())));
    }
    let mut pairs = EvalPairs::from_pool(&load_all(&paths, side)?)?;
    pairs.ids = paths.iter().map(|p| stem(p)).collect();
    Ok(pairs)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn emit_report(run: &RunDir, name: &str, report: &MetricReport, format: Format) -> Result<()> {
    match format {
        Format::Csv => run.write(&format!("{name}.csv"), report.to_csv()),
        Format::Json => run.write(&format!("{name}.json"), report.to_json()?),
    }
}

/// Writes a one-record report; CSV columns follow the order of `fields`.
fn emit_record(run: &RunDir, name: &str, fields: &[(&str, serde_json::Value)], format: Format) -> Result<()> {
    match format {
        Format::Json => {
            let obj: serde_json::Map<String, serde_json::Value> =
                fields.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
            run.write(&format!("{name}.json"), serde_json::to_string_pretty(&obj)?)
        }
        Format::Csv => {
            let keys: Vec<&str> = fields.iter().map(|(k, _)| *k).collect();
            let vals: Vec<String> = fields.iter().map(|(_, v)| csv_cell(v)).collect();
            run.write(&format!("{name}.csv"), format!("{}\n{}\n", keys.join(","), vals.join(",")))
        }
    }
}

fn csv_cell(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn progress(r: &TrainLogRecord) {
    if r.step % 50 == 0 {
        eprintln!("epoch {} step {} total {:.5}", r.epoch, r.step, r.total);
    }
}

fn gen_data(run: &RunDir, count: usize, side: usize, seed: u64) -> Result<serde_json::Value> {
    if count == 0 || side == 0 {
        return Err(Error::Config("count and side must be positive".into()));
    }
    for (i, img) in synth::natural_corpus(side, count, seed).iter().enumerate() {
        save_image(img, run.file(&format!("img{i:05}.png")), SaveFormat::Png)?;
    }
    Ok(json!({ "count": count, "side": side }))
}

fn training_config(cli: &Cli, cfg: Option<TrainConfig>, args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = cfg.unwrap_or_default();
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = args.steps_per_epoch {
        cfg.steps_per_epoch = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(run: &RunDir, cli: &Cli, cfg: Option<TrainConfig>, args: &TrainArgs) -> Result<serde_json::Value> {
    let cfg = training_config(cli, cfg, args)?;
    let data = load_all(&list_images(&args.data)?, cfg.side)?;
    run.write("config.json", serde_json::to_string_pretty(&cfg)?)?;
    let out = train(&cfg, &data, Some(run.path()), progress)?;
    if let Some(last) = out.log.last() {
        eprintln!("final total loss {:.6}", last.total);
    }
    Ok(json!({ "train": cfg, "data": args.data, "images": data.len() }))
}

fn embed(run: &RunDir, cli: &Cli, checkpoint: &Path, cover: &Path, secret: &Path) -> Result<serde_json::Value> {
    let (mut params, cfg) = load_model(cli, checkpoint)?;
    let c = load_image(cover, cfg.side)?;
    let s = load_image(secret, cfg.side)?;
    let q = params.embed(&s)?;
    // Stored containers are 8-bit; report on what is written.
    let container = make_container(&c, &q)?.quantized();
    save_image(&container, run.file("container.png"), SaveFormat::Png)?;
    run.write(
        "feature_map.json",
        serde_json::to_string(&json!({ "width": q.width(), "height": q.height(), "data": q.data() }))?,
    )?;
    let cmp = SpectrumComparison::new(std::slice::from_ref(&c), std::slice::from_ref(&container))?;
    run.write("container_spectrum.csv", cmp.to_csv())?;
    let p = psnr(&c, &container)?;
    let report = [
        ("psnr_db", json!(format_db(p))),
        ("ssim", json!(ssim(&c, &container)?)),
        ("out_of_band_fraction", json!(out_of_band_fraction(q.data(), q.width(), q.height(), cfg.cutoff()?))),
    ];
    emit_record(run, "embed", &report, cli.format)?;
    eprintln!("container PSNR {} dB", format_db(p));
    Ok(json!({ "checkpoint": checkpoint, "cover": cover, "secret": secret, "train": cfg }))
}

fn extract(run: &RunDir, cli: &Cli, checkpoint: &Path, image: &Path, reference: Option<&Path>) -> Result<serde_json::Value> {
    let (mut params, cfg) = load_model(cli, checkpoint)?;
    let x = load_image(image, cfg.side)?;
    let out = params.retrieve(&x)?;
    save_image(&out, run.file("recovered.png"), SaveFormat::Png)?;
    let mut report = vec![("mean_intensity", json!(out.mean()))];
    if let Some(r) = reference {
        let s = load_image(r, cfg.side)?;
        // A flat output has no defined correlation; it counts as a failed retrieval.
        let n = match ncc(&s, &out) {
            Err(Error::Undefined(_)) => 0.0,
            other => other?,
        };
        report.push(("ncc", json!(n)));
        report.push(("valid", json!(n > NCC_THRESHOLD)));
        eprintln!("ncc {n:.4} valid {}", n > NCC_THRESHOLD);
    }
    emit_record(run, "extract", &report, cli.format)?;
    Ok(json!({ "checkpoint": checkpoint, "image": image, "reference": reference, "train": cfg }))
}

fn attack(
    run: &RunDir,
    cli: &Cli,
    input: &Path,
    kind: AttackKind,
    overrides: &[String],
    side: Option<usize>,
    seed: u64,
) -> Result<serde_json::Value> {
    let mut settings = EvalAttacks::default();
    for kv in overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got {kv:?}")))?;
        settings.set(k.trim(), v.trim())?;
    }
    let side = match side {
        Some(s) => s,
        None => image_side(input)?,
    };
    let img = load_image(input, side)?;
    let params = settings.params(kind, side, side, &mut SeededRng::new(seed));
    params.validate()?;
    let out = params.apply(&img, JpegMode::Exact)?;
    save_image(&out, run.file("attacked.png"), SaveFormat::Png)?;
    let report = [("psnr_db", json!(format_db(psnr(&img, &out)?))), ("ssim", json!(ssim(&img, &out)?))];
    emit_record(run, "attack", &report, cli.format)?;
    run.write("params.json", serde_json::to_string_pretty(&params)?)?;
    Ok(json!({ "input": input, "attack": params, "settings": settings }))
}

/// Shorter side of an image file.
fn image_side(path: &Path) -> Result<usize> {
    let (w, h) = lids::imaging::image_dimensions(path)?;
    Ok(w.min(h))
}

fn eval_attacks(args: &EvalAttackArgs) -> EvalAttacks {
    let mut a = EvalAttacks::default();
    if let Some(v) = args.jpeg_quality {
        a.jpeg_quality = v;
    }
    if let Some(v) = args.blur_sigma {
        a.blur_sigma = v;
    }
    if let Some(v) = args.blur_kernel {
        a.kernel_size = v;
    }
    if let Some(v) = args.lowpass_fraction {
        a.lowpass_fraction = v;
    }
    if let Some(v) = args.jitter {
        a.jitter = v;
    }
    if let Some(v) = args.jitter_hue {
        a.jitter_hue = v;
    }
    if let Some(v) = args.crop_scale {
        a.crop_scale = v;
    }
    a
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    run: &RunDir,
    cli: &Cli,
    checkpoint: &Path,
    eval_dir: &Path,
    protocol: Protocol,
    attack_args: &EvalAttackArgs,
    seed: u64,
) -> Result<serde_json::Value> {
    let (mut params, cfg) = load_model(cli, checkpoint)?;
    let pairs = load_pairs(eval_dir, cfg.side)?;
    let attacks = eval_attacks(attack_args);
    let fmt = cli.format;
    match protocol {
        Protocol::Fidelity => {
            let embedded = embed_all(&mut params, &pairs)?;
            let rep = fidelity(&mut params, &pairs, &embedded)?;
            emit_report(run, "container", &rep.container, fmt)?;
            emit_report(run, "secret", &rep.secret, fmt)?;
            eprintln!(
                "container PSNR {} SSIM {:.4}; secret PSNR {} SR {:.3}",
                format_db(rep.container.aggregate.mean_psnr),
                rep.container.aggregate.mean_ssim,
                format_db(rep.secret.aggregate.mean_psnr),
                rep.secret.aggregate.sr
            );
        }
        Protocol::Robustness => {
            let embedded = embed_all(&mut params, &pairs)?;
            let reports = robustness(&mut params, &pairs, &embedded, &attacks, &AttackKind::ROBUSTNESS, seed)?;
            let mut csv = format!("{ROBUSTNESS_CSV_HEADER}\n");
            let mut rows = Vec::new();
            for (kind, rep) in &reports {
                emit_report(run, &format!("robustness_{kind}"), rep, fmt)?;
                let a = rep.aggregate;
                let _ = writeln!(csv, "{kind},{},{:.6},{:.6},{:.4}", format_db(a.mean_psnr), a.mean_ssim, a.mean_ncc, a.sr);
                rows.push(json!({ "attack": kind.name(), "mean_psnr": format_db(a.mean_psnr), "mean_ssim": a.mean_ssim, "mean_ncc": a.mean_ncc, "sr": a.sr }));
                eprintln!("{kind}: NCC {:.4} SR {:.3}", a.mean_ncc, a.sr);
            }
            match fmt {
                Format::Csv => run.write("robustness.csv", csv)?,
                Format::Json => run.write("robustness.json", serde_json::to_string_pretty(&rows)?)?,
            }
        }
        Protocol::Specificity => {
            let rep = specificity(&mut params, &pairs, &cfg.attacks, seed)?;
            emit_report(run, "clean", &rep.clean, fmt)?;
            emit_report(run, "damaged_clean", &rep.damaged_clean, fmt)?;
            let (c, d) = (rep.clean.aggregate, rep.damaged_clean.aggregate);
            let mut csv = format!("{SPECIFICITY_CSV_HEADER}\n");
            let _ = writeln!(csv, "clean,{},{:.6},{:.6},{:.4},{:.6}", format_db(c.mean_psnr), c.mean_ssim, c.mean_ncc, c.sr, rep.clean_output_mean);
            let _ = writeln!(csv, "damaged_clean,{},{:.6},{:.6},{:.4},", format_db(d.mean_psnr), d.mean_ssim, d.mean_ncc, d.sr);
            match fmt {
                Format::Csv => run.write("specificity.csv", csv)?,
                Format::Json => run.write(
                    "specificity.json",
                    serde_json::to_string_pretty(&json!({
                        "clean": { "mean_ncc": c.mean_ncc, "sr": c.sr, "output_mean": rep.clean_output_mean },
                        "damaged_clean": { "mean_ncc": d.mean_ncc, "sr": d.sr },
                    }))?,
                )?,
            }
            eprintln!("clean NCC {:.4} SR {:.3}; damaged NCC {:.4} SR {:.3}", c.mean_ncc, c.sr, d.mean_ncc, d.sr);
        }
    }
    Ok(json!({
        "checkpoint": checkpoint,
        "eval_dir": eval_dir,
        "protocol": format!("{protocol:?}").to_lowercase(),
        "eval_attacks": attacks,
        "train": cfg,
    }))
}

fn freq_analysis(run: &RunDir, cli: &Cli, images: &Path, compare: Option<&Path>, side: usize) -> Result<serde_json::Value> {
    let load = |dir: &Path| -> Result<Vec<Image>> {
        let paths = list_images(dir)?;
        if paths.is_empty() {
            return Err(Error::Config(format!("no images in {}", dir.display())));
        }
        load_all(&paths, side)
    };
    let reference = load(images)?;
    match compare {
        None => {
            let spec = mean_spectrum(&reference)?;
            run.write("spectrum.csv", spec.to_csv())?;
            run.write("spectrum.svg", spectrum_svg(&[(&stem(images), &spec)]))?;
        }
        Some(other_dir) => {
            let other = load(other_dir)?;
            let cmp = SpectrumComparison::new(&reference, &other)?;
            run.write("spectrum.csv", cmp.to_csv())?;
            run.write("spectrum.svg", spectrum_svg(&[(&stem(images), &cmp.reference), (&stem(other_dir), &cmp.other)]))?;
            let summary = [
                ("top_quartile_max_deviation", json!(cmp.top_quartile_max_deviation())),
                ("top_quartile_band_deviation", json!(cmp.top_quartile_band_deviation())),
            ];
            emit_record(run, "deviation", &summary, cli.format)?;
            eprintln!("top-quartile deviation: max {:.4}, band {:.4}", cmp.top_quartile_max_deviation(), cmp.top_quartile_band_deviation());
        }
    }
    Ok(json!({ "images": images, "compare": compare, "side": side }))
}

fn sweep(run: &RunDir, cli: &Cli, checkpoint: &Path, eval_dir: &Path, d: &[f64]) -> Result<serde_json::Value> {
    let (mut params, cfg) = load_model(cli, checkpoint)?;
    let pairs = load_pairs(eval_dir, cfg.side)?;
    let radii = if d.is_empty() { default_sweep_radii(cfg.side) } else { d.to_vec() };
    let embedded = embed_all(&mut params, &pairs)?;
    let rows = filter_sweep(&mut params, &pairs, &embedded, &radii)?;
    match cli.format {
        Format::Csv => run.write("sweep.csv", sweep_to_csv(&rows))?,
        Format::Json => run.write("sweep.json", serde_json::to_string_pretty(&rows)?)?,
    }
    Ok(json!({ "checkpoint": checkpoint, "eval_dir": eval_dir, "radii": radii, "train": cfg }))
}

fn cmd_residue(run: &RunDir, a: &Path, b: &Path, gain: f64, side: usize) -> Result<serde_json::Value> {
    if !(gain.is_finite() && gain > 0.0) {
        return Err(Error::Config(format!("gain must be positive, got {gain}")));
    }
    let r = residue(&load_image(a, side)?, &load_image(b, side)?, gain)?;
    save_image(&r, run.file("residue.png"), SaveFormat::Png)?;
    Ok(json!({ "a": a, "b": b, "gain": gain, "side": side }))
}

fn ablate(
    run: &RunDir,
    cli: &Cli,
    cfg: Option<TrainConfig>,
    args: &TrainArgs,
    eval_dir: &Path,
    knockouts: &[lids::training::Knockout],
) -> Result<serde_json::Value> {
    let cfg = training_config(cli, cfg, args)?;
    let data = load_all(&list_images(&args.data)?, cfg.side)?;
    let pairs = load_pairs(eval_dir, cfg.side)?;
    let rows = ablation(&cfg, &data, &pairs, knockouts, |name, r| {
        if r.step % 50 == 0 {
            eprintln!("[{name}] epoch {} step {} total {:.5}", r.epoch, r.step, r.total);
        }
    })?;
    match cli.format {
        Format::Csv => run.write("ablation.csv", ablation_to_csv(&rows))?,
        Format::Json => run.write("ablation.json", serde_json::to_string_pretty(&rows)?)?,
    }
    let names: Vec<&str> = knockouts.iter().map(|k| k.name()).collect();
    Ok(json!({ "train": cfg, "data": args.data, "eval_dir": eval_dir, "knockouts": names }))
}
