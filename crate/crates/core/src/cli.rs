//! Command-line driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 certification failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{
    encoder_to_checkpoint, load_encoder, model_from_checkpoint, Checkpoint, META_ENCODER,
};
use crate::imageio::{
    generate_synthetic, load_ppm, load_raw_batch, save_ppm, save_raw_batch, ImageBatch,
};
use crate::model::{param_group, ModelConfig, ParamGroup};
use crate::objective::{LossKind, Smoothing};
use crate::probes::{
    attention_map, certify_no_leakage, grad_check, model_inputs, permutation_distribution_test,
    reconstruct,
};
use crate::rng::seeded;
use crate::trainer::{load_dataset, pretrain, Order, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CERTIFICATION: i32 = 3;

/// Largest relative gradient error accepted by `probe grad`.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(
    name = "saim",
    version,
    about = "Stochastic autoregressive image modeling: pretraining and probes"
)]
pub struct Cli {
    /// Training config file (`key = value` lines)
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Random seed
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,
    /// Output directory (or file, for gen-data and export-encoder)
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Checkpoint to read
    #[arg(long, global = true, value_name = "PATH")]
    pub ckpt: Option<PathBuf>,
    /// Bit-reproducible single-threaded mode; requires --seed for randomized commands
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset as a raw batch file plus a label file
    GenData(GenDataArgs),
    /// Pretrain a model and write metrics and checkpoints
    Pretrain(PretrainArgs),
    /// Verification probes
    #[command(subcommand)]
    Probe(ProbeCommand),
    /// Visualizations
    #[command(subcommand)]
    Viz(VizCommand),
    /// Write the encoder (patch projection, positions, encoder blocks) of a checkpoint
    ExportEncoder,
    /// List the tensors in a checkpoint
    InspectCkpt,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Number of images
    #[arg(long, default_value_t = 512)]
    pub count: usize,
    /// Image side length
    #[arg(long, default_value_t = 32)]
    pub size: usize,
}

#[derive(Args, Debug, Default)]
pub struct Ablation {
    /// Prediction order
    #[arg(long, value_name = "raster|stochastic")]
    pub order: Option<String>,
    /// Loss kind
    #[arg(long, value_name = "mse|mse-norm|l1")]
    pub loss: Option<String>,
    /// Target smoothing kernel size (0 disables smoothing)
    #[arg(long, value_name = "INT")]
    pub kernel_size: Option<usize>,
    /// Target smoothing sigma
    #[arg(long, value_name = "FLOAT")]
    pub sigma: Option<f64>,
    /// Decoder blocks reuse encoder parameters
    #[arg(long)]
    pub share_weights: bool,
    /// Number of decoder blocks
    #[arg(long, value_name = "INT")]
    pub decoder_depth: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub ablation: Ablation,
    /// Raw batch file to train on (default: synthetic data)
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Override the number of training steps
    #[arg(long, value_name = "INT")]
    pub steps: Option<u64>,
    /// Resume from a training checkpoint
    #[arg(long, value_name = "PATH")]
    pub resume: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum ProbeCommand {
    /// Certify that no prediction depends on its own or later tokens
    Leakage(LeakageArgs),
    /// Finite-difference check of every gradient on a tiny 64-bit model
    Grad(GradArgs),
    /// Visible-count distribution of a token under random orders
    Perm(PermArgs),
}

#[derive(Args, Debug)]
pub struct LeakageArgs {
    /// Number of perturbation trials
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Largest accepted prediction change at protected positions
    #[arg(long, default_value_t = 0.0)]
    pub tolerance: f32,
}

#[derive(Args, Debug)]
pub struct GradArgs {
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
}

#[derive(Args, Debug)]
pub struct PermArgs {
    /// Number of tokens (exact enumeration when at most 5)
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    /// Sampled plans
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
}

#[derive(Subcommand, Debug)]
pub enum VizCommand {
    /// Last-layer attention map of one query token (PGM)
    Attention(AttentionArgs),
    /// Original and prediction side by side (PPM)
    Reconstruct(ReconstructArgs),
}

#[derive(Args, Debug)]
pub struct AttentionArgs {
    /// Input image (PPM/PGM, or raw batch; first image is used)
    #[arg(long, value_name = "PATH")]
    pub image: PathBuf,
    /// Query token index, grid row-major
    #[arg(long, default_value_t = 0)]
    pub query_token: usize,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    /// Input image (PPM/PGM, or raw batch; first image is used)
    #[arg(long, value_name = "PATH")]
    pub image: PathBuf,
    /// Prediction order
    #[arg(long, value_name = "raster|stochastic", default_value = "stochastic")]
    pub order: String,
}

/// Failure carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    msg: String,
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure {
            code: EXIT_RUNTIME,
            msg: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        msg: msg.into(),
    }
}

fn runtime(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        msg: msg.into(),
    }
}

/// Parse `argv` (including the program name) and run, writing to stdout/stderr.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    run_to(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

/// [`run`] with explicit output streams.
pub fn run_to<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(&cli, out) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.msg);
            f.code
        }
    }
}

fn is_randomized(cmd: &Command) -> bool {
    matches!(
        cmd,
        Command::GenData(_)
            | Command::Pretrain(_)
            | Command::Probe(_)
            | Command::Viz(VizCommand::Reconstruct(_))
    )
}

fn seed_of(cli: &Cli) -> Result<u64, Failure> {
    if cli.deterministic && cli.seed.is_none() && is_randomized(&cli.command) {
        return Err(usage("--deterministic requires --seed for this command"));
    }
    Ok(cli.seed.unwrap_or_else(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0)
    }))
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf, Failure> {
    p.as_ref()
        .ok_or_else(|| usage(format!("{flag} is required for this command")))
}

fn load_config(cli: &Cli) -> Result<TrainConfig, Failure> {
    match &cli.config {
        Some(p) => Ok(TrainConfig::load(p)?),
        None => Ok(TrainConfig::toy()),
    }
}

fn apply_ablation(cfg: &mut TrainConfig, a: &Ablation) -> Result<(), Failure> {
    if let Some(o) = &a.order {
        cfg.order = Order::parse(o).ok_or_else(|| usage(format!("unknown order `{o}`")))?;
    }
    if let Some(l) = &a.loss {
        cfg.loss.kind = LossKind::parse(l).ok_or_else(|| usage(format!("unknown loss `{l}`")))?;
    }
    if let Some(k) = a.kernel_size {
        let sigma = cfg.loss.smoothing.map_or(1.0, |s| s.sigma);
        cfg.loss.smoothing = (k > 0).then_some(Smoothing {
            kernel_size: k,
            sigma,
        });
    }
    if let Some(sigma) = a.sigma {
        if let Some(s) = cfg.loss.smoothing.as_mut() {
            s.sigma = sigma;
        }
    }
    if a.share_weights {
        cfg.model.share_weights = true;
    }
    if let Some(d) = a.decoder_depth {
        cfg.model.decoder_depth = d;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))
}

fn load_image(path: &Path) -> Result<ImageBatch, Failure> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let img = if ext == "ppm" || ext == "pgm" {
        load_ppm(path)?
    } else {
        load_raw_batch(path)?
    };
    Ok(img.image(0))
}

fn check_image(img: &ImageBatch, cfg: &ModelConfig) -> Result<(), Failure> {
    if img.channels != cfg.channels || img.height != cfg.image_size || img.width != cfg.image_size {
        return Err(runtime(format!(
            "image is {}x{}x{}, model expects {}x{}x{}",
            img.channels, img.height, img.width, cfg.channels, cfg.image_size, cfg.image_size
        )));
    }
    Ok(())
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<i32, Failure> {
    match &cli.command {
        Command::GenData(a) => {
            let seed = seed_of(cli)?;
            let path = need(&cli.out, "--out")?;
            let (batch, labels) = generate_synthetic(a.count, a.size, seed)?;
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            save_raw_batch(path, &batch)?;
            let label_path = path.with_extension("labels");
            fs::write(
                &label_path,
                labels.iter().map(|l| format!("{l}\n")).collect::<String>(),
            )?;
            writeln!(
                out,
                "wrote {} images to {} and labels to {}",
                a.count,
                path.display(),
                label_path.display()
            )?;
        }
        Command::Pretrain(a) => {
            let mut cfg = load_config(cli)?;
            if cli.seed.is_some() || cli.deterministic || cli.config.is_none() {
                cfg.seed = seed_of(cli)?;
            }
            apply_ablation(&mut cfg, &a.ablation)?;
            if let Some(s) = a.steps {
                cfg.total_steps = s;
                cfg.warmup_steps = cfg.warmup_steps.min(s);
            }
            let dir = need(&cli.out, "--out")?;
            let data = load_dataset(&cfg, a.data.as_deref())?;
            let state = pretrain(&cfg, &data, dir, a.resume.as_deref())?;
            let (first, last) = (state.history.first(), state.history.last());
            if let (Some(f), Some(l)) = (first, last) {
                writeln!(
                    out,
                    "steps {}..{} loss {:.6} -> {:.6}",
                    f.step, l.step, f.loss, l.loss
                )?;
            }
            writeln!(out, "wrote {}", dir.join("last.ckpt").display())?;
        }
        Command::Probe(ProbeCommand::Leakage(a)) => {
            let seed = seed_of(cli)?;
            let params = model_from_checkpoint(&Checkpoint::load(need(&cli.ckpt, "--ckpt")?)?)?;
            let report = certify_no_leakage(&params, a.trials, a.tolerance, &mut seeded(seed))?;
            let text = report.to_text();
            if let Some(dir) = &cli.out {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("leakage.tsv"), &text)?;
            }
            out.write_all(text.as_bytes())?;
            return Ok(if report.passed() {
                EXIT_OK
            } else {
                EXIT_CERTIFICATION
            });
        }
        Command::Probe(ProbeCommand::Grad(a)) => {
            let seed = seed_of(cli)?;
            let r = grad_check(&ModelConfig::tiny(), a.eps, seed)?;
            let pass = r.max_rel_err < GRAD_TOLERANCE;
            writeln!(
                out,
                "checked\t{}\nmax_rel_err\t{:e}\nworst\t{}",
                r.checked, r.max_rel_err, r.worst_param
            )?;
            writeln!(out, "verdict\t{}", if pass { "PASS" } else { "FAIL" })?;
            return Ok(if pass { EXIT_OK } else { EXIT_CERTIFICATION });
        }
        Command::Probe(ProbeCommand::Perm(a)) => {
            let seed = seed_of(cli)?;
            let r = permutation_distribution_test(a.n, a.samples, &mut seeded(seed))?;
            writeln!(out, "{r}")?;
            return Ok(if r.passed() {
                EXIT_OK
            } else {
                EXIT_CERTIFICATION
            });
        }
        Command::Viz(VizCommand::Attention(a)) => {
            let enc = load_encoder(&Checkpoint::load(need(&cli.ckpt, "--ckpt")?)?)?;
            let img = load_image(&a.image)?;
            check_image(&img, &enc.config)?;
            let augment = load_config(cli)?.augment;
            let x = &model_inputs(&img, enc.config.patch_size, &augment)?[0];
            let map = attention_map(&enc, x, a.query_token)?;
            let dir = need(&cli.out, "--out")?;
            fs::create_dir_all(dir)?;
            let pgm = dir.join(format!("attention_q{}.pgm", a.query_token));
            fs::write(&pgm, map.to_pgm()?)?;
            let tsv: String = map
                .weights
                .iter()
                .enumerate()
                .map(|(k, w)| format!("{k}\t{w:.8}\n"))
                .collect();
            fs::write(dir.join(format!("attention_q{}.tsv", a.query_token)), tsv)?;
            writeln!(out, "wrote {}", pgm.display())?;
        }
        Command::Viz(VizCommand::Reconstruct(a)) => {
            let seed = seed_of(cli)?;
            let order = Order::parse(&a.order)
                .ok_or_else(|| usage(format!("unknown order `{}`", a.order)))?;
            let params = model_from_checkpoint(&Checkpoint::load(need(&cli.ckpt, "--ckpt")?)?)?;
            let img = load_image(&a.image)?;
            check_image(&img, &params.config)?;
            let cfg = load_config(cli)?;
            let plan = order.plan(params.config.n_tokens(), &mut seeded(seed))?;
            let pair = reconstruct(&params, &img, &plan, &cfg.loss, &cfg.augment)?;
            let dir = need(&cli.out, "--out")?;
            fs::create_dir_all(dir)?;
            let path = dir.join("reconstruct.ppm");
            save_ppm(&path, &pair)?;
            writeln!(out, "wrote {}", path.display())?;
        }
        Command::ExportEncoder => {
            let ckpt = Checkpoint::load(need(&cli.ckpt, "--ckpt")?)?;
            let enc = load_encoder(&ckpt)?;
            let path = need(&cli.out, "--out")?;
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            encoder_to_checkpoint(&enc).save(path)?;
            writeln!(
                out,
                "wrote encoder ({} parameters) to {}",
                enc.param_count(),
                path.display()
            )?;
        }
        Command::InspectCkpt => {
            let ckpt = Checkpoint::load(need(&cli.ckpt, "--ckpt")?)?;
            inspect(&ckpt, out)?;
        }
    }
    Ok(EXIT_OK)
}

/// Tensor listing with parameter totals split by model part.
pub fn inspect(ckpt: &Checkpoint, out: &mut dyn Write) -> std::io::Result<()> {
    let (mut enc, mut dec, mut head, mut other) = (0usize, 0usize, 0usize, 0usize);
    for (name, t) in &ckpt.tensors {
        writeln!(out, "{name}\t{:?}\t{}", t.shape(), t.len())?;
        match param_group(name) {
            Some(ParamGroup::Encoder) => enc += t.len(),
            Some(ParamGroup::Decoder) => dec += t.len(),
            Some(ParamGroup::Head) => head += t.len(),
            _ => other += t.len(),
        }
    }
    let kind = if ckpt.get(META_ENCODER).is_some() {
        "encoder"
    } else {
        "model"
    };
    writeln!(out, "kind\t{kind}")?;
    writeln!(
        out,
        "encoder\t{enc}\ndecoder\t{dec}\nhead\t{head}\ntotal\t{}",
        enc + dec + head
    )?;
    writeln!(out, "other\t{other}")
}
