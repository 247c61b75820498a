//! Verification and analysis instruments.

use std::fmt;

use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::imageio::{encode_pnm, normalize, AugmentConfig, ImageBatch, ImageError};
use crate::model::{init_params, ExportedEncoder, ModelConfig, ModelError, ModelParams};
use crate::numerics::{NumericsError, Tensor};
use crate::objective::{loss_on_tape, LossConfig, LossKind, ObjectiveError};
use crate::patching::{
    gaussian_kernel, patch_stats, patchify, smooth, unpatchify, PatchError, PatchSequence,
};
use crate::permutation::{sample_plan, visible_count, PermutationPlan, PlanError};
use crate::rng::seeded;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("query token {token} out of range for {n} tokens")]
    QueryOutOfRange { token: usize, n: usize },
    #[error("label {label} out of range for {classes} classes")]
    ClassCount { label: usize, classes: usize },
    #[error("{0}")]
    Invalid(String),
}

fn random_patches(cfg: &ModelConfig, rng: &mut impl Rng) -> PatchSequence {
    let g = cfg.grid();
    PatchSequence {
        grid_h: g,
        grid_w: g,
        patch_size: cfg.patch_size,
        channels: cfg.channels,
        values: (0..cfg.n_tokens() * cfg.patch_dim())
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect(),
    }
}

/// One perturbation trial.
#[derive(Clone, Debug, PartialEq)]
pub struct LeakageEntry {
    pub trial: usize,
    pub perturbed: usize,
    pub perturbed_rank: usize,
    /// Largest prediction change over tokens whose rank is at most `perturbed_rank`.
    pub max_protected_delta: f32,
    /// Largest prediction change over the remaining tokens.
    pub max_free_delta: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeakageReport {
    pub tolerance: f32,
    pub entries: Vec<LeakageEntry>,
}

impl LeakageReport {
    pub fn passed(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.max_protected_delta <= self.tolerance)
    }

    pub fn worst(&self) -> f32 {
        self.entries
            .iter()
            .map(|e| e.max_protected_delta)
            .fold(0.0, f32::max)
    }

    /// One line per trial plus a verdict line.
    pub fn to_text(&self) -> String {
        let mut s = String::from("trial\tperturbed\trank\tmax_protected_delta\tmax_free_delta\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\t{:e}\t{:e}\n",
                e.trial, e.perturbed, e.perturbed_rank, e.max_protected_delta, e.max_free_delta
            ));
        }
        s.push_str(&format!(
            "verdict\t{}\ttolerance {:e}\tworst {:e}\n",
            if self.passed() { "PASS" } else { "FAIL" },
            self.tolerance,
            self.worst()
        ));
        s
    }
}

fn row_delta(a: &Tensor<f32>, b: &Tensor<f32>, row: usize) -> f32 {
    a.row(row)
        .iter()
        .zip(b.row(row))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

/// Perturb one token's input and check that no prediction at rank ≤ its rank moves.
pub fn leakage_trial(
    params: &ModelParams<f32>,
    x: &PatchSequence,
    plan: &PermutationPlan,
    perturbed: usize,
    rng: &mut impl Rng,
    trial: usize,
) -> Result<LeakageEntry, ProbeError> {
    let base = params.forward(x, plan)?;
    let mut x2 = x.clone();
    x2.patch_mut(perturbed)
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-1.0..1.0));
    let moved = params.forward(&x2, plan)?;
    let r = plan.rank[perturbed];
    let (mut prot, mut free) = (0.0f32, 0.0f32);
    for t in 0..plan.n() {
        let d = row_delta(&base, &moved, t);
        if plan.rank[t] <= r {
            prot = prot.max(d);
        } else {
            free = free.max(d);
        }
    }
    Ok(LeakageEntry {
        trial,
        perturbed,
        perturbed_rank: r,
        max_protected_delta: prot,
        max_free_delta: free,
    })
}

/// Random inputs, random plans, random perturbed tokens. The first two trials
/// perturb the last and first tokens in the order.
pub fn certify_no_leakage(
    params: &ModelParams<f32>,
    n_trials: usize,
    tolerance: f32,
    rng: &mut impl Rng,
) -> Result<LeakageReport, ProbeError> {
    let cfg = &params.config;
    let n = cfg.n_tokens();
    let mut entries = Vec::with_capacity(n_trials);
    for trial in 0..n_trials {
        let x = random_patches(cfg, rng);
        let plan = sample_plan(n, rng)?;
        let j = match trial {
            0 => plan.last_token(),
            1 => plan.first_token(),
            _ => rng.random_range(0..n),
        };
        entries.push(leakage_trial(params, &x, &plan, j, rng, trial)?);
    }
    Ok(LeakageReport { tolerance, entries })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Denominator floor in `|a - n| / max(|a|, |n|, floor)`.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Analytic vs central-difference gradients of the loss for every scalar
/// parameter, in 64-bit.
pub fn grad_check_with(
    params: &ModelParams<f64>,
    x: &PatchSequence,
    plan: &PermutationPlan,
    target: &Tensor<f64>,
    kind: LossKind,
    h: f64,
) -> Result<GradCheckReport, ProbeError> {
    let (_, grads) = params.loss_and_grads(x, plan, target, kind)?;
    let mut p = params.clone();
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    for (k, name) in names.iter().enumerate() {
        let len = grads[k].len();
        for i in 0..len {
            let eval = |p: &mut ModelParams<f64>, delta: f64| -> Result<f64, ProbeError> {
                let mut idx = 0;
                p.visit_mut(&mut |_, t| {
                    if idx == k {
                        t.data_mut()[i] += delta;
                    }
                    idx += 1;
                });
                let l = p.loss(x, plan, target, kind)?;
                Ok(l)
            };
            let plus = eval(&mut p, h)?;
            let minus = eval(&mut p, -2.0 * h)?;
            eval(&mut p, h)?;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads[k].data()[i];
            let rel = (analytic - numeric).abs()
                / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            if !rel.is_finite() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = format!("{name}[{i}]");
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Full-model gradient check on random inputs, plan, and targets in [-1, 1].
pub fn grad_check(cfg: &ModelConfig, h: f64, seed: u64) -> Result<GradCheckReport, ProbeError> {
    let mut rng = seeded(seed);
    let params = init_params(cfg, &mut rng)?.cast::<f64>();
    let x = random_patches(cfg, &mut rng);
    let plan = sample_plan(cfg.n_tokens(), &mut rng)?;
    let target = Tensor::from_fn(&[cfg.n_tokens(), cfg.patch_dim()], |_| {
        rng.random_range(-1.0..1.0)
    });
    grad_check_with(&params, &x, &plan, &target, LossKind::Mse, h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistributionReport {
    pub n: usize,
    pub token: usize,
    pub exact: bool,
    pub counts: Vec<u64>,
    pub chi_square: f64,
    pub p_value: f64,
}

impl DistributionReport {
    /// Exact mode requires identical bucket counts; sampled mode p > 0.01.
    pub fn passed(&self) -> bool {
        if self.exact {
            self.counts.windows(2).all(|w| w[0] == w[1])
        } else {
            self.p_value > 0.01
        }
    }
}

impl fmt::Display for DistributionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "n\t{}\ntoken\t{}\nmode\t{}",
            self.n,
            self.token,
            if self.exact { "exact" } else { "sampled" }
        )?;
        for (k, c) in self.counts.iter().enumerate() {
            writeln!(f, "visible={k}\t{c}")?;
        }
        writeln!(
            f,
            "chi_square\t{:.6}\np_value\t{:.6}",
            self.chi_square, self.p_value
        )?;
        write!(
            f,
            "verdict\t{}",
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn chi_square(counts: &[u64]) -> (f64, f64) {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let dof = (counts.len() - 1) as f64;
    let p = ChiSquared::new(dof)
        .map(|d| 1.0 - d.cdf(stat))
        .unwrap_or(f64::NAN);
    (stat, p)
}

fn for_each_permutation(n: usize, f: &mut impl FnMut(&[usize])) {
    // Heap's algorithm
    let mut a: Vec<usize> = (0..n).collect();
    let mut c = vec![0; n];
    f(&a);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            f(&a);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Histogram of `visible_count(token)` over all `n!` orders.
pub fn permutation_distribution_exact(
    n: usize,
    token: usize,
) -> Result<DistributionReport, ProbeError> {
    if n < 2 || token >= n {
        return Err(ProbeError::Invalid(format!(
            "need n >= 2 and token < n (n={n}, token={token})"
        )));
    }
    let mut counts = vec![0u64; n];
    let mut err = None;
    for_each_permutation(n, &mut |order| match PermutationPlan::from_order(order)
        .and_then(|p| visible_count(&p, token))
    {
        Ok(k) => counts[k] += 1,
        Err(e) => err = Some(e),
    });
    if let Some(e) = err {
        return Err(e.into());
    }
    let (chi_square, p_value) = chi_square(&counts);
    Ok(DistributionReport {
        n,
        token,
        exact: true,
        counts,
        chi_square,
        p_value,
    })
}

/// Histogram of `visible_count(token)` over sampled plans with a chi-square test.
pub fn permutation_distribution_sampled(
    n: usize,
    samples: usize,
    token: usize,
    rng: &mut impl Rng,
) -> Result<DistributionReport, ProbeError> {
    if n < 2 || token >= n || samples == 0 {
        return Err(ProbeError::Invalid(format!(
            "need n >= 2, token < n, samples > 0 (n={n}, token={token})"
        )));
    }
    let mut counts = vec![0u64; n];
    for _ in 0..samples {
        counts[visible_count(&sample_plan(n, rng)?, token)?] += 1;
    }
    let (chi_square, p_value) = chi_square(&counts);
    Ok(DistributionReport {
        n,
        token,
        exact: false,
        counts,
        chi_square,
        p_value,
    })
}

/// Exact enumeration for `n <= 5`, sampling otherwise. Token 0 is tracked.
pub fn permutation_distribution_test(
    n: usize,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<DistributionReport, ProbeError> {
    if n <= 5 {
        permutation_distribution_exact(n, 0)
    } else {
        permutation_distribution_sampled(n, samples, 0, rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub query: usize,
    /// Head-averaged attention over keys, grid row-major.
    pub weights: Vec<f64>,
}

impl AttentionMap {
    /// Grayscale PGM with the largest weight at 255.
    pub fn to_pgm(&self) -> Result<Vec<u8>, ProbeError> {
        let max = self.weights.iter().cloned().fold(0.0, f64::max);
        let px = self
            .weights
            .iter()
            .map(|&w| if max > 0.0 { (w / max) as f32 } else { 0.0 })
            .collect();
        Ok(encode_pnm(
            &ImageBatch::new(1, 1, self.grid_h, self.grid_w, px)?,
            0,
        )?)
    }
}

/// Last-layer, mask-free attention of `query` over all tokens, averaged over heads.
pub fn attention_map(
    enc: &ExportedEncoder<f32>,
    x: &PatchSequence,
    query: usize,
) -> Result<AttentionMap, ProbeError> {
    let n = x.n_tokens();
    if query >= n {
        return Err(ProbeError::QueryOutOfRange { token: query, n });
    }
    let (_, probs) = enc.features_with_attention(x)?;
    let heads = probs.len().max(1) as f64;
    let weights = (0..n)
        .map(|k| probs.iter().map(|p| p.row(query)[k] as f64).sum::<f64>() / heads)
        .collect();
    Ok(AttentionMap {
        grid_h: x.grid_h,
        grid_w: x.grid_w,
        query,
        weights,
    })
}

/// Model input patches for a batch of `[0, 1]` images.
pub fn model_inputs(
    img: &ImageBatch,
    patch_size: usize,
    augment: &AugmentConfig,
) -> Result<Vec<PatchSequence>, ProbeError> {
    Ok(patchify(&normalize(img, augment), patch_size)?)
}

/// Prediction in pixel space (`[0, 1]` before clamping) for one image.
fn predict_image(
    params: &ModelParams<f32>,
    img: &ImageBatch,
    plan: &PermutationPlan,
    loss: &LossConfig,
    augment: &AugmentConfig,
) -> Result<(ImageBatch, ImageBatch), ProbeError> {
    let p = params.config.patch_size;
    let normed = normalize(img, augment);
    let x = &patchify(&normed, p)?[0];
    let pred = params.forward(x, plan)?;
    let smoothed = match loss.smoothing {
        Some(s) => smooth(&normed, &gaussian_kernel(s.kernel_size, s.sigma)?)?,
        None => normed,
    };
    let raw_target = &patchify(&smoothed, p)?[0];
    let mut out = x.with_values(&pred);
    if loss.kind.normalizes_target() {
        for (i, (mean, std)) in patch_stats(raw_target).into_iter().enumerate() {
            out.patch_mut(i)
                .iter_mut()
                .for_each(|v| *v = *v * std + mean);
        }
    }
    let recon = crate::imageio::denormalize(&unpatchify(&[out])?, augment);
    let tgt = crate::imageio::denormalize(&smoothed, augment);
    Ok((recon, tgt))
}

/// Original and clamped prediction side by side (`H × 2W`), first image only.
pub fn reconstruct(
    params: &ModelParams<f32>,
    img: &ImageBatch,
    plan: &PermutationPlan,
    loss: &LossConfig,
    augment: &AugmentConfig,
) -> Result<ImageBatch, ProbeError> {
    let one = img.image(0);
    let (recon, _) = predict_image(params, &one, plan, loss, augment)?;
    let recon = recon.clamp_unit();
    let (c, h, w) = (one.channels, one.height, one.width);
    let mut out = ImageBatch::zeros(1, c, h, 2 * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let i = out.index(0, ch, y, x);
                out.pixels[i] = one.get(0, ch, y, x).clamp(0.0, 1.0);
                let j = out.index(0, ch, y, x + w);
                out.pixels[j] = recon.get(0, ch, y, x);
            }
        }
    }
    Ok(out)
}

/// Mean squared error in pixel space between predictions and the (smoothed)
/// target image, averaged over a batch with one sampled plan per image.
pub fn reconstruction_mse(
    params: &ModelParams<f32>,
    imgs: &ImageBatch,
    loss: &LossConfig,
    augment: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<f64, ProbeError> {
    let mut total = 0.0;
    for n in 0..imgs.count {
        let plan = sample_plan(params.config.n_tokens(), rng)?;
        let (recon, tgt) = predict_image(params, &imgs.image(n), &plan, loss, augment)?;
        total += recon
            .pixels
            .iter()
            .zip(&tgt.pixels)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / recon.pixels.len() as f64;
    }
    Ok(total / imgs.count as f64)
}

/// Mean-pooled last-block features for each image.
pub fn pooled_features(
    enc: &ExportedEncoder<f32>,
    imgs: &ImageBatch,
    augment: &AugmentConfig,
) -> Result<Vec<Vec<f64>>, ProbeError> {
    model_inputs(imgs, enc.config.patch_size, augment)?
        .iter()
        .map(|x| {
            let f = enc.features(x)?;
            let (n, d) = f.dims2()?;
            Ok((0..d)
                .map(|j| (0..n).map(|i| f.row(i)[j] as f64).sum::<f64>() / n as f64)
                .collect())
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub classes: usize,
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            classes: crate::imageio::SYNTHETIC_CLASSES,
            epochs: 500,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

/// Standardized features, multinomial logistic regression by full-batch
/// gradient descent; returns held-out accuracy.
pub fn linear_probe(
    train: &[Vec<f64>],
    train_labels: &[usize],
    test: &[Vec<f64>],
    test_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64, ProbeError> {
    if train.is_empty()
        || test.is_empty()
        || train.len() != train_labels.len()
        || test.len() != test_labels.len()
    {
        return Err(ProbeError::Invalid(
            "features and labels must be non-empty and aligned".into(),
        ));
    }
    if let Some(&label) = train_labels
        .iter()
        .chain(test_labels)
        .find(|&&l| l >= cfg.classes)
    {
        return Err(ProbeError::ClassCount {
            label,
            classes: cfg.classes,
        });
    }
    let d = train[0].len();
    if train.iter().chain(test).any(|f| f.len() != d) {
        return Err(ProbeError::Invalid(
            "feature vectors differ in length".into(),
        ));
    }
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|j| train.iter().map(|f| f[j]).sum::<f64>() / n)
        .collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            (train.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n)
                .sqrt()
                .max(1e-8)
        })
        .collect();
    let scale = |f: &Vec<f64>| -> Vec<f64> { (0..d).map(|j| (f[j] - mean[j]) / std[j]).collect() };
    let xs: Vec<Vec<f64>> = train.iter().map(scale).collect();
    let k = cfg.classes;
    let mut w = vec![vec![0.0; d + 1]; k];
    let logits = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        w.iter()
            .map(|wc| wc[d] + wc[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    };
    for _ in 0..cfg.epochs {
        let mut grad = vec![vec![0.0; d + 1]; k];
        for (x, &y) in xs.iter().zip(train_labels) {
            let z = logits(&w, x);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..k {
                let g = e[c] / s - if c == y { 1.0 } else { 0.0 };
                for j in 0..d {
                    grad[c][j] += g * x[j];
                }
                grad[c][d] += g;
            }
        }
        for c in 0..k {
            for j in 0..=d {
                let reg = if j < d { cfg.l2 * w[c][j] } else { 0.0 };
                w[c][j] -= cfg.lr * (grad[c][j] / n + reg);
            }
        }
    }
    let correct = test
        .iter()
        .zip(test_labels)
        .filter(|(f, &y)| {
            let z = logits(&w, &scale(f));
            let best = (0..k)
                .max_by(|&a, &b| z[a].total_cmp(&z[b]).then(b.cmp(&a)))
                .unwrap_or(0);
            best == y
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Loss of the model on one image batch with freshly sampled plans.
pub fn batch_loss(
    params: &ModelParams<f32>,
    imgs: &ImageBatch,
    loss: &LossConfig,
    augment: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<f64, ProbeError> {
    let p = params.config.patch_size;
    let normed = normalize(imgs, augment);
    let xs = patchify(&normed, p)?;
    let ts = crate::objective::target(&normed, loss, p)?;
    let mut total = 0.0;
    for (x, t) in xs.iter().zip(&ts) {
        let plan = sample_plan(x.n_tokens(), rng)?;
        let pred = params.forward(x, &plan)?;
        let mut tape = crate::numerics::Tape::new();
        let v = tape.constant(pred);
        let l = loss_on_tape(&mut tape, v, &t.to_tensor(), loss.kind)?;
        total += tape.value(l).data()[0] as f64;
    }
    Ok(total / xs.len() as f64)
}
