//! Training configuration: a flat set of string-keyed settings that can be
//! read from `key = value` files, mutated one key at a time, and written
//! back out. Every key here has an identically named CLI flag.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gibbs::Sigma2Mode;
use crate::nn::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Ldc,
    Baseline,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ldc" => Ok(TrainMode::Ldc),
            "baseline" => Ok(TrainMode::Baseline),
            other => Err(Error::Config(format!("mode must be ldc or baseline, got {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Ldc => "ldc",
            TrainMode::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetChoice {
    Mnist,
    TwoMoons,
    GaussianGrid,
}

impl DatasetChoice {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetChoice::Mnist),
            "two_moons" => Ok(DatasetChoice::TwoMoons),
            "gaussian_grid" => Ok(DatasetChoice::GaussianGrid),
            other => Err(Error::Config(format!(
                "dataset must be mnist, two_moons, or gaussian_grid, got {other:?}"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetChoice::Mnist => "mnist",
            DatasetChoice::TwoMoons => "two_moons",
            DatasetChoice::GaussianGrid => "gaussian_grid",
        }
    }
}

/// Kernel bandwidth for training: per-step median heuristic or a constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthChoice {
    Median,
    Fixed(f64),
}

impl BandwidthChoice {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "median" {
            return Ok(BandwidthChoice::Median);
        }
        match s.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(BandwidthChoice::Fixed(v)),
            _ => Err(Error::Config(format!(
                "bandwidth must be \"median\" or a positive number, got {s:?}"
            ))),
        }
    }

    pub fn render(&self) -> String {
        match self {
            BandwidthChoice::Median => "median".to_string(),
            BandwidthChoice::Fixed(v) => format!("{v}"),
        }
    }
}

/// Which particle set the sampler phase uses as kernel companions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerParticles {
    /// The sampler's own latents.
    SelfSet,
    /// The encoder latents from the same step.
    Encoder,
}

impl SamplerParticles {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(SamplerParticles::SelfSet),
            "encoder" => Ok(SamplerParticles::Encoder),
            other => Err(Error::Config(format!(
                "sampler_kernel_particles must be self or encoder, got {other:?}"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SamplerParticles::SelfSet => "self",
            SamplerParticles::Encoder => "encoder",
        }
    }
}

/// Every tunable of a training run. Field defaults target the 2-D synthetic
/// datasets; image-scale runs override dimensions explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub dataset: DatasetChoice,
    pub data_dir: String,
    pub grid_k: usize,
    pub synth_train: usize,
    pub synth_test: usize,
    /// 0 keeps the full training set.
    pub train_limit: usize,
    pub test_limit: usize,
    /// 0 infers the sample dimension from the dataset.
    pub x_dim: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub latent_dim: usize,
    /// 0 matches latent_dim.
    pub noise_dim: usize,
    pub sampler_noise_dim: usize,
    pub enc_x_hidden: Vec<usize>,
    pub enc_noise_hidden: Vec<usize>,
    pub enc_merge_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    pub sampler_hidden: Vec<usize>,
    pub vae_hidden: Vec<usize>,
    pub activation: Activation,
    pub dec_output: Activation,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub lr_sampler: f64,
    pub sigma2_mode: Sigma2Mode,
    pub bandwidth: BandwidthChoice,
    pub sampler_kernel_particles: SamplerParticles,
    pub seed: u64,
    pub out_dir: String,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Ldc,
            dataset: DatasetChoice::GaussianGrid,
            data_dir: "data/mnist".to_string(),
            grid_k: 3,
            synth_train: 900,
            synth_test: 400,
            train_limit: 0,
            test_limit: 0,
            x_dim: 0,
            batch_size: 100,
            epochs: 10,
            latent_dim: 2,
            noise_dim: 0,
            sampler_noise_dim: 0,
            enc_x_hidden: vec![64],
            enc_noise_hidden: vec![16],
            enc_merge_hidden: vec![64],
            dec_hidden: vec![64, 64],
            sampler_hidden: vec![64, 64],
            vae_hidden: vec![64, 64],
            activation: Activation::Relu,
            dec_output: Activation::Sigmoid,
            lr_encoder: 1e-3,
            lr_decoder: 1e-3,
            lr_sampler: 1e-3,
            sigma2_mode: Sigma2Mode::Norm,
            bandwidth: BandwidthChoice::Median,
            sampler_kernel_particles: SamplerParticles::SelfSet,
            seed: 7,
            out_dir: "runs/out".to_string(),
            checkpoint_every: 0,
            eval_every: 1,
        }
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::Config(format!("{key} must be a non-negative integer, got {v:?}")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| Error::Config(format!("{key} must be a non-negative integer, got {v:?}")))
}

fn parse_lr(key: &str, v: &str) -> Result<f64> {
    match v.parse::<f64>() {
        Ok(x) if x >= 0.0 && x.is_finite() => Ok(x),
        _ => Err(Error::Config(format!("{key} must be a non-negative number, got {v:?}"))),
    }
}

/// Comma-separated layer widths; empty means no hidden layers.
fn parse_dims(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .ok()
                .filter(|&w| w > 0)
                .ok_or_else(|| Error::Config(format!("{key} must be comma-separated widths, got {v:?}")))
        })
        .collect()
}

fn render_dims(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// All setting names, in file order. Kept in lockstep with `set` and
    /// `entries`; the CLI defines one flag per key and a test enforces the
    /// correspondence.
    pub const KEYS: &'static [&'static str] = &[
        "mode",
        "dataset",
        "data_dir",
        "grid_k",
        "synth_train",
        "synth_test",
        "train_limit",
        "test_limit",
        "x_dim",
        "batch_size",
        "epochs",
        "latent_dim",
        "noise_dim",
        "sampler_noise_dim",
        "enc_x_hidden",
        "enc_noise_hidden",
        "enc_merge_hidden",
        "dec_hidden",
        "sampler_hidden",
        "vae_hidden",
        "activation",
        "dec_output",
        "lr_encoder",
        "lr_decoder",
        "lr_sampler",
        "sigma2_mode",
        "bandwidth",
        "sampler_kernel_particles",
        "seed",
        "out_dir",
        "checkpoint_every",
        "eval_every",
    ];

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "mode" => self.mode = TrainMode::parse(v)?,
            "dataset" => self.dataset = DatasetChoice::parse(v)?,
            "data_dir" => self.data_dir = v.to_string(),
            "grid_k" => self.grid_k = parse_usize(key, v)?,
            "synth_train" => self.synth_train = parse_usize(key, v)?,
            "synth_test" => self.synth_test = parse_usize(key, v)?,
            "train_limit" => self.train_limit = parse_usize(key, v)?,
            "test_limit" => self.test_limit = parse_usize(key, v)?,
            "x_dim" => self.x_dim = parse_usize(key, v)?,
            "batch_size" => self.batch_size = parse_usize(key, v)?,
            "epochs" => self.epochs = parse_usize(key, v)?,
            "latent_dim" => self.latent_dim = parse_usize(key, v)?,
            "noise_dim" => self.noise_dim = parse_usize(key, v)?,
            "sampler_noise_dim" => self.sampler_noise_dim = parse_usize(key, v)?,
            "enc_x_hidden" => self.enc_x_hidden = parse_dims(key, v)?,
            "enc_noise_hidden" => self.enc_noise_hidden = parse_dims(key, v)?,
            "enc_merge_hidden" => self.enc_merge_hidden = parse_dims(key, v)?,
            "dec_hidden" => self.dec_hidden = parse_dims(key, v)?,
            "sampler_hidden" => self.sampler_hidden = parse_dims(key, v)?,
            "vae_hidden" => self.vae_hidden = parse_dims(key, v)?,
            "activation" => self.activation = Activation::parse(v)?,
            "dec_output" => self.dec_output = Activation::parse(v)?,
            "lr_encoder" => self.lr_encoder = parse_lr(key, v)?,
            "lr_decoder" => self.lr_decoder = parse_lr(key, v)?,
            "lr_sampler" => self.lr_sampler = parse_lr(key, v)?,
            "sigma2_mode" => self.sigma2_mode = Sigma2Mode::parse(v)?,
            "bandwidth" => self.bandwidth = BandwidthChoice::parse(v)?,
            "sampler_kernel_particles" => {
                self.sampler_kernel_particles = SamplerParticles::parse(v)?
            }
            "seed" => self.seed = parse_u64(key, v)?,
            "out_dir" => self.out_dir = v.to_string(),
            "checkpoint_every" => self.checkpoint_every = parse_usize(key, v)?,
            "eval_every" => self.eval_every = parse_usize(key, v)?,
            other => return Err(Error::Config(format!("unknown setting {other:?}"))),
        }
        Ok(())
    }

    /// Current values as (key, value) pairs in `KEYS` order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("mode", self.mode.name().to_string()),
            ("dataset", self.dataset.name().to_string()),
            ("data_dir", self.data_dir.clone()),
            ("grid_k", self.grid_k.to_string()),
            ("synth_train", self.synth_train.to_string()),
            ("synth_test", self.synth_test.to_string()),
            ("train_limit", self.train_limit.to_string()),
            ("test_limit", self.test_limit.to_string()),
            ("x_dim", self.x_dim.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("noise_dim", self.noise_dim.to_string()),
            ("sampler_noise_dim", self.sampler_noise_dim.to_string()),
            ("enc_x_hidden", render_dims(&self.enc_x_hidden)),
            ("enc_noise_hidden", render_dims(&self.enc_noise_hidden)),
            ("enc_merge_hidden", render_dims(&self.enc_merge_hidden)),
            ("dec_hidden", render_dims(&self.dec_hidden)),
            ("sampler_hidden", render_dims(&self.sampler_hidden)),
            ("vae_hidden", render_dims(&self.vae_hidden)),
            ("activation", self.activation.name().to_string()),
            ("dec_output", self.dec_output.name().to_string()),
            ("lr_encoder", format!("{}", self.lr_encoder)),
            ("lr_decoder", format!("{}", self.lr_decoder)),
            ("lr_sampler", format!("{}", self.lr_sampler)),
            ("sigma2_mode", self.sigma2_mode.name().to_string()),
            ("bandwidth", self.bandwidth.render()),
            ("sampler_kernel_particles", self.sampler_kernel_particles.name().to_string()),
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.clone()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("eval_every", self.eval_every.to_string()),
        ]
    }

    /// Parses a `key = value` file ('#' starts a comment, blank lines are
    /// skipped) on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines to this config.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    /// Renders the full configuration as a parseable `key = value` file.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Noise width for the encoder (defaults to the latent width).
    pub fn resolved_noise_dim(&self) -> usize {
        if self.noise_dim == 0 { self.latent_dim } else { self.noise_dim }
    }

    /// Noise width for the sampler (defaults to the latent width).
    pub fn resolved_sampler_noise_dim(&self) -> usize {
        if self.sampler_noise_dim == 0 { self.latent_dim } else { self.sampler_noise_dim }
    }

    /// Structural checks that do not need the dataset.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".to_string()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".to_string()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".to_string()));
        }
        if self.dataset == DatasetChoice::GaussianGrid && (self.grid_k == 0 || self.grid_k > 16) {
            return Err(Error::Config("grid_k must be in 1..=16".to_string()));
        }
        Ok(())
    }
}
