//! Loss assembly, the joint E/R update and the epoch loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, AttackKind, AttackPlan, AttackTrace};
use crate::error::{Error, Result};
use crate::imaging::{FeatureMap, Image, PairSampler, SeededRng, CHANNELS};
use crate::models::{
    images_to_tensor, init_params, Checkpoint, CheckpointMeta, ModelParams, ModelSpec, OutputMapping,
};
use crate::nn::{Adam, Mode, Real, Tensor};
use crate::spectral::{focal_frequency_loss_weighted, focal_weights, low_pass_map, CutoffRadius};

/// λ weights of the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub embedding: f64,
    pub frequency: f64,
    pub retrieval: f64,
    pub clean: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { embedding: 1.0, frequency: 1.0, retrieval: 1.0, clean: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.embedding, self.frequency, self.retrieval, self.clean];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || all.iter().all(|w| *w == 0.0) {
            return Err(Error::config("loss weights must be non-negative, finite, and not all zero"));
        }
        Ok(())
    }
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub use_attack_layer: bool,
    pub use_freq_loss: bool,
    pub use_clean_loss: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { use_attack_layer: true, use_freq_loss: true, use_clean_loss: true }
    }
}

/// Component that an ablation run knocks out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knockout {
    AttackLayer,
    FreqLoss,
    CleanLoss,
}

impl Knockout {
    pub fn apply(self, a: Ablation) -> Ablation {
        match self {
            Knockout::AttackLayer => Ablation { use_attack_layer: false, ..a },
            Knockout::FreqLoss => Ablation { use_freq_loss: false, ..a },
            Knockout::CleanLoss => Ablation { use_clean_loss: false, ..a },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Knockout::AttackLayer => "attack_layer",
            Knockout::FreqLoss => "freq_loss",
            Knockout::CleanLoss => "clean_loss",
        }
    }
}

impl std::str::FromStr for Knockout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Knockout::AttackLayer, Knockout::FreqLoss, Knockout::CleanLoss]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown knockout {s:?}")))
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub side: usize,
    /// Cutoff radius at the 256-pixel reference resolution, rescaled to `side`.
    pub cutoff_d_256: f64,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub lr_decay: f64,
    pub decay_every: usize,
    pub output: OutputMapping,
    pub base_channels: usize,
    pub max_channels: usize,
    pub retriever_width: usize,
    pub residual_blocks: usize,
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub attacks: AttackConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            side: 64,
            cutoff_d_256: 50.0,
            batch_size: 16,
            steps_per_epoch: 100,
            epochs: 10,
            lr: 1e-4,
            betas: (0.1, 0.5),
            lr_decay: 0.2,
            decay_every: 3,
            output: OutputMapping::default(),
            base_channels: 32,
            max_channels: 512,
            retriever_width: 32,
            residual_blocks: 9,
            weights: LossWeights::default(),
            ablation: Ablation::default(),
            attacks: AttackConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn model_spec(&self) -> ModelSpec {
        let mut spec = ModelSpec::new(self.side, self.base_channels, self.max_channels, self.retriever_width);
        spec.embedder.output = self.output;
        spec.retriever.residual_blocks = self.residual_blocks;
        spec
    }

    pub fn cutoff(&self) -> Result<CutoffRadius> {
        CutoffRadius::scaled_from_256(self.cutoff_d_256, self.side)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_spec().validate()?;
        self.cutoff()?;
        self.weights.validate()?;
        self.attacks.validate()?;
        if self.batch_size == 0 || self.steps_per_epoch == 0 || self.decay_every == 0 {
            return Err(Error::config("batch_size, steps_per_epoch and decay_every must be positive"));
        }
        if !(self.lr > 0.0 && self.lr_decay > 0.0) {
            return Err(Error::config("lr and lr_decay must be positive"));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Learning rate during zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Mean squared error over every value.
fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Mean squared pixel distance between cover and container.
pub fn embedding_loss(cover: &Image, container: &Image) -> Result<f64> {
    cover.same_shape(container)?;
    Ok(mse(cover.data(), container.data()))
}

/// Mean squared pixel distance between secret and recovered secret.
pub fn retrieval_loss(secret: &Image, recovered: &Image) -> Result<f64> {
    secret.same_shape(recovered)?;
    Ok(mse(secret.data(), recovered.data()))
}

/// Mean squared distance from the null image.
pub fn clean_loss(r_clean: &Image) -> f64 {
    r_clean.data().iter().map(|v| v * v).sum::<f64>() / r_clean.data().len() as f64
}

/// The four loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub embedding: f64,
    pub frequency: f64,
    pub retrieval: f64,
    pub clean: f64,
}

impl LossComponents {
    /// Effective weights after ablation: a disabled term weighs zero.
    pub fn effective_weights(w: LossWeights, flags: Ablation) -> LossWeights {
        LossWeights {
            frequency: if flags.use_freq_loss { w.frequency } else { 0.0 },
            clean: if flags.use_clean_loss { w.clean } else { 0.0 },
            ..w
        }
    }

    pub fn total(&self, w: LossWeights, flags: Ablation) -> Result<f64> {
        let parts = [
            ("embedding", self.embedding),
            ("frequency", self.frequency),
            ("retrieval", self.retrieval),
            ("clean", self.clean),
        ];
        if let Some((name, v)) = parts.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{name} loss is {v}")));
        }
        let e = Self::effective_weights(w, flags);
        Ok(e.embedding * self.embedding + e.frequency * self.frequency + e.retrieval * self.retrieval + e.clean * self.clean)
    }
}

/// Pool order of the per-kind activation counts in the log.
pub const LOGGED_ATTACKS: [AttackKind; 6] = [
    AttackKind::LowPass,
    AttackKind::Blur,
    AttackKind::Noise,
    AttackKind::ColorJitter,
    AttackKind::ResizeCrop,
    AttackKind::Jpeg,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_emb: f64,
    pub l_freq: f64,
    pub l_ret: f64,
    pub l_cln: f64,
    pub total: f64,
    pub lr: f64,
    /// Activations per kind in [`LOGGED_ATTACKS`] order.
    pub attacks: [usize; 6],
}

pub const TRAIN_LOG_HEADER: &str =
    "epoch,step,l_emb,l_freq,l_ret,l_cln,total,lr,low_pass,blur,noise,color_jitter,resize_crop,jpeg";

impl TrainLogRecord {
    pub fn csv_row(&self) -> String {
        let a = &self.attacks;
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{},{},{},{},{},{}",
            self.epoch, self.step, self.l_emb, self.l_freq, self.l_ret, self.l_cln, self.total, self.lr, a[0], a[1], a[2], a[3], a[4], a[5]
        )
    }
}

pub fn log_to_csv(records: &[TrainLogRecord]) -> String {
    let mut s = format!("{TRAIN_LOG_HEADER}\n");
    for r in records {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Model, optimizer and random streams of a run in progress.
pub struct TrainState<T> {
    pub params: ModelParams<T>,
    pub optimizer: Adam,
    pub attack_rng: SeededRng,
    pub steps_done: usize,
}

impl<T: Real> TrainState<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let root = SeededRng::new(cfg.seed);
        let params = init_params(&cfg.model_spec(), &mut root.substream(0))?;
        Ok(Self { params, optimizer: Adam::new(cfg.lr, cfg.betas), attack_rng: root.substream(2), steps_done: 0 })
    }
}

/// One (cover, secret) mini-batch.
pub struct Batch<'a> {
    pub covers: Vec<&'a Image>,
    pub secrets: Vec<&'a Image>,
}

fn owned(v: &[&Image]) -> Vec<Image> {
    v.iter().map(|i| (*i).clone()).collect()
}

fn stack_batch<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = a.shape();
    assert_eq!(b.shape(), [n, c, h, w]);
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::from_vec([2 * n, c, h, w], data)
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
}

/// Low-pass target of the feature map. It is a constant of the step: no
/// gradient is ever propagated through it.
pub fn detached_target(q: &[f64], side: usize, d: CutoffRadius) -> Result<Vec<f64>> {
    Ok(low_pass_map(&FeatureMap::new(side, side, q.to_vec())?, d).into_data())
}

/// Losses of one forward/backward pass, with gradients left in the parameters.
#[derive(Debug, Clone)]
pub struct StepGradients {
    pub components: LossComponents,
    pub total: f64,
    /// Focal weights used per sample, reusable to freeze them.
    pub focal_weights: Vec<Vec<Vec<f64>>>,
}

/// Zeroes the gradients, then runs the joint forward and backward pass of
/// E and R over `batch`. `plans` holds one attack plan per sample and is
/// ignored when the attack layer is disabled; `frozen_focal` replaces the
/// focal weights derived from the current feature maps.
pub fn accumulate_gradients<T: Real>(
    params: &mut ModelParams<T>,
    batch: &Batch<'_>,
    plans: &[AttackPlan],
    cfg: &TrainConfig,
    frozen_focal: Option<&[Vec<Vec<f64>>]>,
) -> Result<StepGradients> {
    let n = batch.covers.len();
    if n == 0 || n != batch.secrets.len() {
        return Err(Error::shape("batch needs matching, non-empty cover and secret lists"));
    }
    let flags = cfg.ablation;
    if flags.use_attack_layer && plans.len() != n {
        return Err(Error::shape(format!("{} attack plans for a batch of {n}", plans.len())));
    }
    if frozen_focal.is_some_and(|f| f.len() != n) {
        return Err(Error::shape("one set of focal weights per sample expected"));
    }
    let side = cfg.side;
    let per = CHANNELS * side * side;
    let w = LossComponents::effective_weights(cfg.weights, flags);
    let d = cfg.cutoff()?;
    let covers = owned(&batch.covers);
    let secrets = owned(&batch.secrets);
    params.zero_grad();

    // Embedding and frequency terms.
    let (q_t, e_trace) = params.embedder.forward(&images_to_tensor::<T>(&secrets)?, Mode::Train)?;
    let q = to_f64(q_t.data());
    let mut g_q = vec![0.0; n * per];
    let mut l_freq = 0.0;
    let mut used_weights = Vec::with_capacity(n);
    for i in 0..n {
        let qi = &q[i * per..(i + 1) * per];
        let target = detached_target(qi, side, d)?;
        let weights = match frozen_focal {
            Some(f) => f[i].clone(),
            None => focal_weights(qi, &target, side, side, 1.0),
        };
        let (loss, grad) = focal_frequency_loss_weighted(qi, &target, side, side, &weights)?;
        l_freq += loss / n as f64;
        if w.frequency > 0.0 {
            for (g, f) in g_q[i * per..(i + 1) * per].iter_mut().zip(&grad) {
                *g += w.frequency * f / n as f64;
            }
        }
        used_weights.push(weights);
    }
    let mut containers = Vec::with_capacity(n);
    let mut l_emb = 0.0;
    let mut in_range = Vec::with_capacity(n * per);
    for (i, c) in covers.iter().enumerate() {
        let raw: Vec<f64> = c.data().iter().zip(&q[i * per..(i + 1) * per]).map(|(a, b)| a + b).collect();
        in_range.extend(raw.iter().map(|v| (0.0..=1.0).contains(v)));
        let cp = Image::from_clamped(side, side, raw)?;
        l_emb += embedding_loss(c, &cp)? / n as f64;
        for (j, (a, b)) in cp.data().iter().zip(c.data()).enumerate() {
            g_q[i * per + j] += w.embedding * 2.0 * (a - b) / (n * per) as f64;
        }
        containers.push(cp);
    }

    // Attack layer.
    let mut traces: Vec<Option<AttackTrace>> = Vec::with_capacity(n);
    let mut attacked = Vec::with_capacity(n);
    for (i, cp) in containers.iter().enumerate() {
        if flags.use_attack_layer {
            let trace = plans[i].apply_traced(cp)?;
            attacked.push(trace.output.clone());
            traces.push(Some(trace));
        } else {
            attacked.push(cp.clone());
            traces.push(None);
        }
    }

    // Retrieval on containers and, in the same normalization batch, on clean covers.
    let x_att = images_to_tensor::<T>(&attacked)?;
    let x_cov = images_to_tensor::<T>(&covers)?;
    let (l_ret, l_cln, g_att) = if flags.use_clean_loss {
        let (out, r_trace) = params.retriever.forward(&stack_batch(&x_att, &x_cov), Mode::Train)?;
        let out = to_f64(out.data());
        let (rec, cln) = out.split_at(n * per);
        let s_all: Vec<f64> = secrets.iter().flat_map(|s| s.data().iter().copied()).collect();
        let l_ret = mse(rec, &s_all);
        let l_cln = cln.iter().map(|v| v * v).sum::<f64>() / cln.len() as f64;
        let scale = 2.0 / (n * per) as f64;
        let g: Vec<T> = rec
            .iter()
            .zip(&s_all)
            .map(|(r, s)| T::of(w.retrieval * scale * (r - s)))
            .chain(cln.iter().map(|c| T::of(w.clean * scale * c)))
            .collect();
        let g_in = params.retriever.backward(r_trace, &Tensor::from_vec([2 * n, CHANNELS, side, side], g));
        (l_ret, l_cln, to_f64(&g_in.data()[..n * per]))
    } else {
        let (out, r_trace) = params.retriever.forward(&x_att, Mode::Train)?;
        let rec = to_f64(out.data());
        let s_all: Vec<f64> = secrets.iter().flat_map(|s| s.data().iter().copied()).collect();
        let l_ret = mse(&rec, &s_all);
        let scale = 2.0 / (n * per) as f64;
        let g: Vec<T> = rec.iter().zip(&s_all).map(|(r, s)| T::of(w.retrieval * scale * (r - s))).collect();
        let g_in = params.retriever.backward(r_trace, &Tensor::from_vec(out.shape(), g));
        // Logged only: frozen statistics, no gradient.
        let (cl, _) = params.retriever.forward(&x_cov, Mode::Eval)?;
        let cl = to_f64(cl.data());
        let l_cln = cl.iter().map(|v| v * v).sum::<f64>() / cl.len() as f64;
        (l_ret, l_cln, to_f64(g_in.data()))
    };

    let components = LossComponents { embedding: l_emb, frequency: l_freq, retrieval: l_ret, clean: l_cln };
    let total = components.total(cfg.weights, flags)?;

    // Back through the attack layer and the container clamp into q.
    for (i, trace) in traces.iter().enumerate() {
        let gi = &g_att[i * per..(i + 1) * per];
        let g_c = match trace {
            Some(t) => t.backward(gi)?,
            None => gi.to_vec(),
        };
        for (j, g) in g_c.into_iter().enumerate() {
            if in_range[i * per + j] {
                g_q[i * per + j] += g;
            }
        }
    }
    let g_q_t = Tensor::from_vec(q_t.shape(), g_q.into_iter().map(T::of).collect());
    params.embedder.backward(e_trace, &g_q_t);
    Ok(StepGradients { components, total, focal_weights: used_weights })
}

/// One joint gradient step on E and R over `batch`. Returns the log record;
/// parameters are left untouched if any loss is non-finite.
pub fn train_step<T: Real>(
    state: &mut TrainState<T>,
    batch: &Batch<'_>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<TrainLogRecord> {
    let n = batch.covers.len();
    let mut counts = [0usize; 6];
    let mut plans = Vec::new();
    if cfg.ablation.use_attack_layer {
        for _ in 0..n {
            let plan = AttackPlan::sample(&cfg.attacks, cfg.side, cfg.side, &mut state.attack_rng);
            for p in plan.active() {
                if let Some(k) = LOGGED_ATTACKS.iter().position(|k| *k == p.kind()) {
                    counts[k] += 1;
                }
            }
            plans.push(plan);
        }
    }
    let params = &mut state.params;
    let StepGradients { components, total, .. } = accumulate_gradients(params, batch, &plans, cfg, None)?;
    let LossComponents { embedding: l_emb, frequency: l_freq, retrieval: l_ret, clean: l_cln } = components;

    let lr = cfg.lr_at(epoch);
    state.optimizer.lr = lr;
    state.optimizer.step(&mut params.modules());
    state.steps_done += 1;
    Ok(TrainLogRecord {
        epoch,
        step: state.steps_done,
        l_emb,
        l_freq,
        l_ret,
        l_cln,
        total,
        lr,
        attacks: counts,
    })
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub log: Vec<TrainLogRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs `epochs × steps_per_epoch` steps on pairs drawn from `data`. With
/// `out_dir`, writes a checkpoint per epoch, `final.ckpt` and `train_log.csv`.
pub fn train(
    cfg: &TrainConfig,
    data: &[Image],
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&TrainLogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if let Some(img) = data.iter().find(|i| (i.width(), i.height()) != (cfg.side, cfg.side)) {
        return Err(Error::shape(format!("training image is {}×{}, expected side {}", img.width(), img.height(), cfg.side)));
    }
    let mut state = TrainState::<f32>::new(cfg)?;
    let mut sampler = PairSampler::new(data.len(), SeededRng::new(cfg.seed).substream(1))?;
    let mut log = Vec::with_capacity(cfg.epochs * cfg.steps_per_epoch);
    let mut checkpoints = Vec::new();
    let config_json = serde_json::to_value(cfg)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    for epoch in 0..cfg.epochs {
        for _ in 0..cfg.steps_per_epoch {
            let pairs = sampler.next_batch(cfg.batch_size);
            let batch = Batch {
                covers: pairs.iter().map(|&(c, _)| &data[c]).collect(),
                secrets: pairs.iter().map(|&(_, s)| &data[s]).collect(),
            };
            let rec = train_step(&mut state, &batch, cfg, epoch)?;
            progress(&rec);
            log.push(rec);
        }
        if let Some(dir) = out_dir {
            let path = dir.join(format!("epoch_{:03}.ckpt", epoch + 1));
            let meta = CheckpointMeta {
                epoch: epoch as u64 + 1,
                step: state.steps_done as u64,
                rng: Some(state.attack_rng.state()),
                config: config_json.clone(),
            };
            Checkpoint::save(&path, &mut state.params, &meta, Some(&state.optimizer))?;
            fs::write(dir.join("train_log.csv"), log_to_csv(&log))?;
            checkpoints.push(path);
        }
    }
    if let Some(dir) = out_dir {
        let meta = CheckpointMeta {
            epoch: cfg.epochs as u64,
            step: state.steps_done as u64,
            rng: Some(state.attack_rng.state()),
            config: config_json,
        };
        let path = dir.join("final.ckpt");
        Checkpoint::save(&path, &mut state.params, &meta, Some(&state.optimizer))?;
        fs::write(dir.join("train_log.csv"), log_to_csv(&log))?;
        checkpoints.push(path);
    }
    Ok(TrainOutcome { params: state.params, log, checkpoints })
}
