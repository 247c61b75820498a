//! AdamW pretraining with linear warmup and cosine decay.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::checkpoint::{
    model_from_checkpoint, model_to_checkpoint, u64_from_tensor, u64_to_tensor, Checkpoint,
    CheckpointError,
};
use crate::imageio::{
    generate_synthetic, load_raw_batch, random_resize_crop_flip, AugmentConfig, ImageBatch,
    ImageError,
};
use crate::model::{init_params, HeadKind, MaskCorruption, ModelConfig, ModelError, ModelParams};
use crate::numerics::Tensor;
use crate::objective::{target, LossConfig, LossKind, ObjectiveError, Smoothing};
use crate::patching::{patchify, PatchError};
use crate::permutation::{raster_plan, sample_plan, PermutationPlan, PlanError};
use crate::rng::{derived, seeded, SaimRng};

const META_TRAIN: &str = "meta.train";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid training config: {0}")]
    Invalid(String),
    #[error("non-finite gradient in {name} at step {step}")]
    NonFiniteGrad { name: String, step: u64 },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    Stochastic,
    Raster,
}

impl Order {
    pub fn as_str(self) -> &'static str {
        match self {
            Order::Stochastic => "stochastic",
            Order::Raster => "raster",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "stochastic" => Some(Order::Stochastic),
            "raster" => Some(Order::Raster),
            _ => None,
        }
    }

    pub fn plan(self, n: usize, rng: &mut impl Rng) -> Result<PermutationPlan, PlanError> {
        match self {
            Order::Stochastic => sample_plan(n, rng),
            Order::Raster => raster_plan(n),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub order: Order,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub seed: u64,
    /// Write `step_<k>.ckpt` every `k` steps; 0 disables.
    pub checkpoint_every: u64,
    /// Synthetic images generated when no dataset file is given.
    pub dataset_size: usize,
}

impl TrainConfig {
    /// 32×32 synthetic, D=64, two layers, batch 16, 300 steps at lr 1e-3.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            order: Order::Stochastic,
            base_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
            batch_size: 16,
            warmup_steps: 20,
            total_steps: 300,
            seed: 0,
            checkpoint_every: 100,
            dataset_size: 512,
        }
    }

    /// ViT-B/16 at 224², batch 2048, 300 epochs of ImageNet-1K (626 steps
    /// per epoch) with 30 warmup epochs. Documented, not meant for a CPU.
    pub fn paper() -> Self {
        let steps_per_epoch = 626;
        Self {
            model: ModelConfig {
                image_size: 224,
                channels: 3,
                patch_size: 16,
                embed_dim: 768,
                depth: 12,
                decoder_depth: 12,
                n_heads: 12,
                mlp_ratio: 4,
                head: HeadKind::Mlp,
                head_hidden_dim: 768,
                share_weights: false,
                decoder_reads_previous_layer: false,
                mask_corruption: MaskCorruption::None,
            },
            base_lr: 2e-4,
            batch_size: 2048,
            warmup_steps: 30 * steps_per_epoch,
            total_steps: 300 * steps_per_epoch,
            checkpoint_every: 10 * steps_per_epoch,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Invalid(m.to_string()));
        self.model.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps must not exceed total_steps");
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must be in [0, 1)");
        }
        if self.eps.is_nan()
            || self.eps <= 0.0
            || self.weight_decay.is_nan()
            || self.weight_decay < 0.0
        {
            return bad("eps must be positive and weight_decay non-negative");
        }
        if self.dataset_size == 0 {
            return bad("dataset_size must be at least 1");
        }
        Ok(())
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse `{v}`"))
        }
        fn flag(v: &str) -> Result<bool, String> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(format!("expected true/false, got `{v}`")),
            }
        }
        fn list(v: &str) -> Result<Vec<f32>, String> {
            v.split(',').map(|p| num(p.trim())).collect()
        }
        let m = &mut self.model;
        match key {
            "image_size" => m.image_size = num(value)?,
            "channels" => m.channels = num(value)?,
            "patch_size" => m.patch_size = num(value)?,
            "embed_dim" => m.embed_dim = num(value)?,
            "depth" => m.depth = num(value)?,
            "decoder_depth" => m.decoder_depth = num(value)?,
            "n_heads" => m.n_heads = num(value)?,
            "mlp_ratio" => m.mlp_ratio = num(value)?,
            "head" => m.head = HeadKind::parse(value).ok_or(format!("unknown head `{value}`"))?,
            "head_hidden_dim" => m.head_hidden_dim = num(value)?,
            "share_weights" => m.share_weights = flag(value)?,
            "decoder_reads_previous_layer" => m.decoder_reads_previous_layer = flag(value)?,
            "loss" => {
                self.loss.kind = LossKind::parse(value).ok_or(format!("unknown loss `{value}`"))?
            }
            "kernel_size" => {
                let k: usize = num(value)?;
                let sigma = self.loss.smoothing.map_or(1.0, |s| s.sigma);
                self.loss.smoothing = (k > 0).then_some(Smoothing {
                    kernel_size: k,
                    sigma,
                });
            }
            "sigma" => {
                let sigma = num(value)?;
                let k = self.loss.smoothing.map_or(9, |s| s.kernel_size);
                self.loss.smoothing = Some(Smoothing {
                    kernel_size: k,
                    sigma,
                });
            }
            "order" => {
                self.order = Order::parse(value).ok_or(format!("unknown order `{value}`"))?
            }
            "lr" => self.base_lr = num(value)?,
            "beta1" => self.beta1 = num(value)?,
            "beta2" => self.beta2 = num(value)?,
            "eps" => self.eps = num(value)?,
            "weight_decay" => self.weight_decay = num(value)?,
            "batch_size" => self.batch_size = num(value)?,
            "warmup_steps" => self.warmup_steps = num(value)?,
            "total_steps" => self.total_steps = num(value)?,
            "seed" => self.seed = num(value)?,
            "checkpoint_every" => self.checkpoint_every = num(value)?,
            "dataset_size" => self.dataset_size = num(value)?,
            "crop_scale_min" => self.augment.crop_scale_min = num(value)?,
            "crop_scale_max" => self.augment.crop_scale_max = num(value)?,
            "aspect_min" => self.augment.aspect_min = num(value)?,
            "aspect_max" => self.augment.aspect_max = num(value)?,
            "hflip_prob" => self.augment.hflip_prob = num(value)?,
            "norm_mean" => self.augment.mean = list(value)?,
            "norm_std" => self.augment.std = list(value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parse `key = value` lines over the toy defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut cfg = Self::toy();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| TrainError::Parse {
                line,
                msg: format!("expected `key = value`, got `{body}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value).map_err(|msg| {
                if msg.starts_with("unknown key") {
                    TrainError::UnknownKey {
                        line,
                        key: key.to_string(),
                    }
                } else {
                    TrainError::Parse { line, msg }
                }
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Text form accepted by [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let join = |v: &[f32]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("image_size", m.image_size.to_string());
        kv("channels", m.channels.to_string());
        kv("patch_size", m.patch_size.to_string());
        kv("embed_dim", m.embed_dim.to_string());
        kv("depth", m.depth.to_string());
        kv("decoder_depth", m.decoder_depth.to_string());
        kv("n_heads", m.n_heads.to_string());
        kv("mlp_ratio", m.mlp_ratio.to_string());
        kv("head", m.head.as_str().to_string());
        kv("head_hidden_dim", m.head_hidden_dim.to_string());
        kv("share_weights", m.share_weights.to_string());
        kv(
            "decoder_reads_previous_layer",
            m.decoder_reads_previous_layer.to_string(),
        );
        kv("loss", self.loss.kind.as_str().to_string());
        match self.loss.smoothing {
            Some(sm) => {
                kv("kernel_size", sm.kernel_size.to_string());
                kv("sigma", sm.sigma.to_string());
            }
            None => kv("kernel_size", "0".into()),
        }
        kv("order", self.order.as_str().to_string());
        kv("lr", self.base_lr.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("eps", self.eps.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("warmup_steps", self.warmup_steps.to_string());
        kv("total_steps", self.total_steps.to_string());
        kv("seed", self.seed.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("dataset_size", self.dataset_size.to_string());
        kv("crop_scale_min", self.augment.crop_scale_min.to_string());
        kv("crop_scale_max", self.augment.crop_scale_max.to_string());
        kv("aspect_min", self.augment.aspect_min.to_string());
        kv("aspect_max", self.augment.aspect_max.to_string());
        kv("hflip_prob", self.augment.hflip_prob.to_string());
        kv("norm_mean", join(&self.augment.mean));
        kv("norm_std", join(&self.augment.std));
        s
    }
}

/// Learning rate before step `step` runs.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return if step >= cfg.total_steps && step > cfg.warmup_steps {
            0.0
        } else {
            cfg.base_lr
        };
    }
    let progress = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }

    /// One update of `param` at 1-based step `t`. Decay is skipped when
    /// `decay` is false.
    #[allow(clippy::too_many_arguments)]
    pub fn update(
        &self,
        param: &mut Tensor<f32>,
        grad: &Tensor<f32>,
        m: &mut Tensor<f32>,
        v: &mut Tensor<f32>,
        lr: f64,
        t: u64,
        decay: bool,
    ) {
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let shrink = if decay {
            1.0 - lr * self.weight_decay
        } else {
            1.0
        };
        let (p, g) = (param.data_mut(), grad.data());
        let (m, v) = (m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g[i] as f64;
            let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
            let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let step = (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
            p[i] = (p[i] as f64 * shrink - lr * step) as f32;
        }
    }
}

/// Weight decay applies to matrices only (not gains, biases, or the fixed table).
pub fn decays(name: &str, t: &Tensor<f32>) -> bool {
    t.ndim() >= 2 && !name.ends_with(".bias")
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

impl StepRecord {
    pub fn line(&self) -> String {
        format!("{}\t{:.6e}\t{:.8}", self.step, self.lr, self.loss)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Steps completed so far.
    pub step: u64,
    pub seed: u64,
    pub params: ModelParams<f32>,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub history: Vec<StepRecord>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self, TrainError> {
        let params = init_params(&cfg.model, &mut seeded(cfg.seed))?;
        let zeros: Vec<Tensor<f32>> = params
            .named()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Ok(Self {
            step: 0,
            seed: cfg.seed,
            params,
            m: zeros.clone(),
            v: zeros,
            history: Vec::new(),
        })
    }

    /// Model tensors plus optimizer moments and the `(seed, step)` record.
    /// Every step draws from a stream derived from `(seed, step)`, so these
    /// two numbers are the whole generator state.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = model_to_checkpoint(&self.params);
        c.push(META_TRAIN, u64_to_tensor(&[self.seed, self.step]));
        for ((name, _), (m, v)) in self
            .params
            .named()
            .into_iter()
            .zip(self.m.iter().zip(&self.v))
        {
            c.push(format!("opt.m.{name}"), m.clone());
            c.push(format!("opt.v.{name}"), v.clone());
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, TrainError> {
        let params = model_from_checkpoint(c)?;
        let meta = u64_from_tensor(c.require(META_TRAIN)?)?;
        if meta.len() != 2 {
            return Err(
                CheckpointError::Meta("training record must hold seed and step".into()).into(),
            );
        }
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in params.named() {
            for (prefix, out) in [("opt.m.", &mut m), ("opt.v.", &mut v)] {
                let key = format!("{prefix}{name}");
                let found = c.require(&key)?;
                if found.shape() != t.shape() {
                    return Err(CheckpointError::Shape {
                        name: key,
                        expected: t.shape().to_vec(),
                        found: found.shape().to_vec(),
                    }
                    .into());
                }
                out.push(found.clone());
            }
        }
        Ok(Self {
            step: meta[1],
            seed: meta[0],
            params,
            m,
            v,
            history: Vec::new(),
        })
    }
}

/// Training images: a file batch or synthetic data generated from the seed.
pub fn load_dataset(cfg: &TrainConfig, path: Option<&Path>) -> Result<ImageBatch, TrainError> {
    let m = &cfg.model;
    let data = match path {
        Some(p) => load_raw_batch(p)?,
        None => generate_synthetic(cfg.dataset_size, m.image_size, cfg.seed)?.0,
    };
    if data.channels != m.channels || data.height != m.image_size || data.width != m.image_size {
        return Err(TrainError::Invalid(format!(
            "dataset is {}x{}x{}, model expects {}x{}x{}",
            data.channels, data.height, data.width, m.channels, m.image_size, m.image_size
        )));
    }
    Ok(data)
}

/// Generator for step `step` of a run seeded with `seed`.
pub fn step_rng(seed: u64, step: u64) -> SaimRng {
    derived(seed, step)
}

/// One optimization step: sample a batch, augment, draw one plan per image,
/// build targets, accumulate mean gradients, apply AdamW.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &ImageBatch,
) -> Result<StepRecord, TrainError> {
    let step = state.step;
    let mut rng = step_rng(state.seed, step);
    let idx: Vec<usize> = (0..cfg.batch_size)
        .map(|_| rng.random_range(0..data.count))
        .collect();
    let batch = ImageBatch::stack(&idx.iter().map(|&i| data.image(i)).collect::<Vec<_>>())?;
    let aug = random_resize_crop_flip(&batch, &cfg.augment, &mut rng)?;
    let inputs = patchify(&aug, cfg.model.patch_size)?;
    let plans = (0..cfg.batch_size)
        .map(|_| cfg.order.plan(cfg.model.n_tokens(), &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    let targets = target(&aug, &cfg.loss, cfg.model.patch_size)?;

    let mut total = 0.0f64;
    let mut grads: Option<Vec<Tensor<f32>>> = None;
    for ((x, plan), tgt) in inputs.iter().zip(&plans).zip(&targets) {
        let (loss, g) = state
            .params
            .loss_and_grads(x, plan, &tgt.to_tensor(), cfg.loss.kind)?;
        total += loss as f64;
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
        }
    }
    let b = cfg.batch_size as f32;
    let grads: Vec<Tensor<f32>> = grads
        .unwrap_or_default()
        .into_iter()
        .map(|g| g.scale(1.0 / b))
        .collect();
    let loss = total / cfg.batch_size as f64;
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { step });
    }
    let names: Vec<String> = state.params.named().into_iter().map(|(n, _)| n).collect();
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        return Err(TrainError::NonFiniteGrad {
            name: names[i].clone(),
            step,
        });
    }

    let lr = lr_at(step, cfg);
    let opt = AdamW::from_config(cfg);
    let mut i = 0;
    let (m, v) = (&mut state.m, &mut state.v);
    state.params.visit_mut(&mut |name, p| {
        let decay = decays(name, p);
        opt.update(p, &grads[i], &mut m[i], &mut v[i], lr, step + 1, decay);
        i += 1;
    });
    state.step += 1;
    let rec = StepRecord { step, lr, loss };
    state.history.push(rec.clone());
    Ok(rec)
}

/// Files written by [`pretrain`].
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.tsv")
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }

    pub fn step(&self, step: u64) -> PathBuf {
        self.dir.join(format!("step_{step}.ckpt"))
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.cfg")
    }
}

/// Run (or resume) pretraining up to `cfg.total_steps`, writing
/// `metrics.tsv`, periodic `step_<k>.ckpt` and `last.ckpt` under `out`.
pub fn pretrain(
    cfg: &TrainConfig,
    data: &ImageBatch,
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainState, TrainError> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let paths = RunPaths {
        dir: out.to_path_buf(),
    };
    fs::write(paths.config(), cfg.to_text())?;
    let mut state = match resume {
        Some(p) => {
            let s = TrainState::from_checkpoint(&Checkpoint::load(p)?)?;
            if s.params.config != cfg.model {
                return Err(TrainError::Invalid(
                    "checkpoint model config differs from the run config".into(),
                ));
            }
            s
        }
        None => TrainState::new(cfg)?,
    };
    // keep earlier metric lines only up to the resume point
    let mut kept = String::new();
    if state.step > 0 {
        if let Ok(text) = fs::read_to_string(paths.metrics()) {
            for line in text.lines() {
                match line.split('\t').next().and_then(|s| s.parse::<u64>().ok()) {
                    Some(s) if s < state.step => {
                        kept.push_str(line);
                        kept.push('\n');
                    }
                    _ => {}
                }
            }
        }
    }
    let mut metrics = fs::File::create(paths.metrics())?;
    metrics.write_all(kept.as_bytes())?;
    while state.step < cfg.total_steps {
        let rec = train_step(&mut state, cfg, data)?;
        writeln!(metrics, "{}", rec.line())?;
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            state.to_checkpoint().save(paths.step(state.step))?;
        }
    }
    metrics.flush()?;
    state.to_checkpoint().save(paths.last())?;
    Ok(state)
}
