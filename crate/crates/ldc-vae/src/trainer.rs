//! Training loops. The latent-consistency step updates the encoder and the
//! sampler net by injecting negated Stein transport directions at their
//! latent outputs while the decoder follows the reconstruction loss alone;
//! the baseline step is a standard Gaussian-KL VAE update. A run produces a
//! CSV report, a checkpoint, and a re-emitted config.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::adam::{adam_step, AdamState};
use crate::checkpoint;
use crate::config::{
    BandwidthChoice, DatasetChoice, SamplerParticles, TrainConfig, TrainMode,
};
use crate::data::{load_idx, synth_2d, BatchIterator, Dataset, SynthKind};
use crate::error::{Error, Result};
use crate::gibbs::{estimate_sigma2, GibbsPosterior};
use crate::kernel::median_bandwidth;
use crate::metrics::{mmd2_unbiased, pooled_median_bandwidth};
use crate::models::{
    gaussian_kl, reparameterize, DecoderNet, EncoderNet, GaussianEncoder, SamplerNet,
};
use crate::nn::Param;
use crate::rng::{SeedTree, StreamTag};
use crate::svgd::stein_direction;
use crate::tape::{Reduction, Tape};
use crate::tensor::{row_norms, Tensor};

/// The three nets of a latent-consistency model.
#[derive(Debug, Clone)]
pub struct LdcModels {
    pub encoder: EncoderNet,
    pub decoder: DecoderNet,
    pub sampler: SamplerNet,
}

impl LdcModels {
    /// Seeded initialization from a config and a concrete sample width.
    pub fn from_config(cfg: &TrainConfig, x_dim: usize) -> Result<Self> {
        if x_dim == 0 {
            return Err(Error::Config("sample dimension must be positive".to_string()));
        }
        let tree = SeedTree::new(cfg.seed);
        let encoder = EncoderNet::init(
            &mut tree.stream(StreamTag::EncoderInit, 0),
            x_dim,
            cfg.resolved_noise_dim(),
            cfg.latent_dim,
            &cfg.enc_x_hidden,
            &cfg.enc_noise_hidden,
            &cfg.enc_merge_hidden,
            cfg.activation,
        );
        let decoder = DecoderNet::init(
            &mut tree.stream(StreamTag::DecoderInit, 0),
            cfg.latent_dim,
            &cfg.dec_hidden,
            x_dim,
            cfg.activation,
            cfg.dec_output,
        );
        let sampler = SamplerNet::init(
            &mut tree.stream(StreamTag::SamplerInit, 0),
            cfg.resolved_sampler_noise_dim(),
            &cfg.sampler_hidden,
            cfg.latent_dim,
            cfg.activation,
        );
        Ok(LdcModels { encoder, decoder, sampler })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p.extend(self.sampler.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p.extend(self.sampler.params_mut());
        p
    }
}

/// Encoder and decoder of the baseline VAE.
#[derive(Debug, Clone)]
pub struct VaeModels {
    pub encoder: GaussianEncoder,
    pub decoder: DecoderNet,
}

impl VaeModels {
    pub fn from_config(cfg: &TrainConfig, x_dim: usize) -> Result<Self> {
        if x_dim == 0 {
            return Err(Error::Config("sample dimension must be positive".to_string()));
        }
        let tree = SeedTree::new(cfg.seed);
        let encoder = GaussianEncoder::init(
            &mut tree.stream(StreamTag::EncoderInit, 0),
            x_dim,
            &cfg.vae_hidden,
            cfg.latent_dim,
            cfg.activation,
        );
        let decoder = DecoderNet::init(
            &mut tree.stream(StreamTag::DecoderInit, 0),
            cfg.latent_dim,
            &cfg.dec_hidden,
            x_dim,
            cfg.activation,
            cfg.dec_output,
        );
        Ok(VaeModels { encoder, decoder })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }
}

/// Per-net optimizer states for the latent-consistency model.
#[derive(Debug, Clone)]
pub struct LdcOptim {
    pub encoder: AdamState,
    pub decoder: AdamState,
    pub sampler: AdamState,
}

impl LdcOptim {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        LdcOptim {
            encoder: AdamState::new(cfg.lr_encoder),
            decoder: AdamState::new(cfg.lr_decoder),
            sampler: AdamState::new(cfg.lr_sampler),
        }
    }
}

/// Per-net optimizer states for the baseline.
#[derive(Debug, Clone)]
pub struct VaeOptim {
    pub encoder: AdamState,
    pub decoder: AdamState,
}

impl VaeOptim {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        VaeOptim {
            encoder: AdamState::new(cfg.lr_encoder),
            decoder: AdamState::new(cfg.lr_decoder),
        }
    }
}

/// Step behavior shared by every iteration of a run.
#[derive(Debug, Clone, Copy)]
pub struct StepSettings {
    pub sigma2_mode: crate::gibbs::Sigma2Mode,
    pub bandwidth: BandwidthChoice,
    pub sampler_particles: SamplerParticles,
}

impl StepSettings {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        StepSettings {
            sigma2_mode: cfg.sigma2_mode,
            bandwidth: cfg.bandwidth,
            sampler_particles: cfg.sampler_kernel_particles,
        }
    }
}

/// Every observable intermediate of one latent-consistency step.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub z_theta: Tensor,
    pub x_hat: Tensor,
    pub l_rec: f64,
    pub sigma2: f64,
    pub sigma2_floored: bool,
    pub bandwidth: f64,
    pub phi_theta: Tensor,
    pub z_omega: Tensor,
    pub bandwidth_omega: f64,
    pub phi_omega: Tensor,
}

impl StepTrace {
    pub fn mean_phi_theta_norm(&self) -> f64 {
        mean(&row_norms(&self.phi_theta))
    }

    pub fn mean_phi_omega_norm(&self) -> f64 {
        mean(&row_norms(&self.phi_omega))
    }
}

/// Observables of one baseline step.
#[derive(Debug, Clone)]
pub struct VaeStepTrace {
    pub loss: f64,
    pub kl: f64,
    pub rec: f64,
    pub mu: Tensor,
    pub logvar: Tensor,
    pub x_hat: Tensor,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn negate(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| -v).collect())
        .expect("negation preserves shape and finiteness")
}

fn resolve_bandwidth(choice: BandwidthChoice, points: &Tensor) -> Result<f64> {
    match choice {
        BandwidthChoice::Median => median_bandwidth(points),
        BandwidthChoice::Fixed(h) => Ok(h),
    }
}

/// Computes one latent-consistency step's gradients into the params without
/// applying an optimizer update. Order of operations:
/// encode, decode a detached copy, reconstruction loss, residual variance,
/// kernel bandwidth, both transport directions against the same frozen
/// posterior, then the injected backward passes.
pub fn ldc_backward(
    models: &mut LdcModels,
    x: &Tensor,
    eps_e: &Tensor,
    eps_s: &Tensor,
    settings: &StepSettings,
) -> Result<StepTrace> {
    if x.shape().len() != 2 || x.rows() < 2 {
        return Err(Error::Contract(format!(
            "step needs a [B>=2, D] batch, got {:?}",
            x.shape()
        )));
    }
    if eps_e.rows() != x.rows() || eps_s.rows() != x.rows() {
        return Err(Error::Contract(format!(
            "noise rows {} / {} do not match batch rows {}",
            eps_e.rows(),
            eps_s.rows(),
            x.rows()
        )));
    }

    // Encoder/decoder graph. The decoder sees a detached copy of the
    // latents, so the reconstruction loss reaches only decoder params.
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let ev = tape.constant(eps_e.clone());
    let enc_bound = models.encoder.bind(&mut tape, true);
    let dec_bound = models.decoder.bind(&mut tape, true);
    let z = models.encoder.encode(&mut tape, &enc_bound, xv, ev)?;
    let zd = tape.detach(z);
    let x_hat = models.decoder.decode(&mut tape, &dec_bound, zd)?;
    let l_rec = tape.mse(xv, x_hat, Reduction::Mean)?;

    let z_vals = tape.value(z).clone();
    let x_hat_vals = tape.value(x_hat).clone();
    let l_rec_val = tape.value(l_rec).item();

    let sigma2 = estimate_sigma2(x, &x_hat_vals, settings.sigma2_mode)?;
    let sigma2_floored = sigma2 <= crate::gibbs::SIGMA2_FLOOR;
    let bandwidth = resolve_bandwidth(settings.bandwidth, &z_vals)?;

    // Sampler graph on its own tape.
    let mut sampler_tape = Tape::new();
    let sv = sampler_tape.constant(eps_s.clone());
    let sampler_bound = models.sampler.bind(&mut sampler_tape, true);
    let z_omega = models.sampler.sample_latent(&mut sampler_tape, &sampler_bound, sv)?;
    let z_omega_vals = sampler_tape.value(z_omega).clone();

    // Both transport directions come from the same posterior: decoder
    // weights and residual variance as of the start of the step.
    let (phi_theta, phi_omega, bandwidth_omega) = {
        let posterior = GibbsPosterior::new(&models.decoder, x, sigma2)?;
        let phi_theta = stein_direction(&z_vals, &z_vals, &posterior, bandwidth)?;
        let (particles, h_omega) = match settings.sampler_particles {
            SamplerParticles::SelfSet => {
                (&z_omega_vals, resolve_bandwidth(settings.bandwidth, &z_omega_vals)?)
            }
            SamplerParticles::Encoder => (&z_vals, bandwidth),
        };
        let phi_omega = stein_direction(particles, &z_omega_vals, &posterior, h_omega)?;
        (phi_theta, phi_omega, h_omega)
    };

    // The transport direction increases posterior agreement, so its
    // negation is the descent gradient handed to the minimizer.
    tape.backward_with_injected_grad(z, &negate(&phi_theta))?;
    models.encoder.store_grads(&tape, &enc_bound)?;
    tape.backward(l_rec)?;
    models.decoder.store_grads(&tape, &dec_bound)?;

    sampler_tape.backward_with_injected_grad(z_omega, &negate(&phi_omega))?;
    models.sampler.store_grads(&sampler_tape, &sampler_bound)?;

    Ok(StepTrace {
        z_theta: z_vals,
        x_hat: x_hat_vals,
        l_rec: l_rec_val,
        sigma2,
        sigma2_floored,
        bandwidth,
        phi_theta,
        z_omega: z_omega_vals,
        bandwidth_omega,
        phi_omega,
    })
}

/// One full latent-consistency iteration: gradients plus one Adam step per
/// net (independent optimizer states).
pub fn ldc_step(
    models: &mut LdcModels,
    optim: &mut LdcOptim,
    x: &Tensor,
    eps_e: &Tensor,
    eps_s: &Tensor,
    settings: &StepSettings,
) -> Result<StepTrace> {
    let trace = ldc_backward(models, x, eps_e, eps_s, settings)?;
    adam_step(&mut models.encoder.params_mut(), &mut optim.encoder)?;
    adam_step(&mut models.decoder.params_mut(), &mut optim.decoder)?;
    adam_step(&mut models.sampler.params_mut(), &mut optim.sampler)?;
    Ok(trace)
}

/// Baseline gradients: loss = mean KL + mean squared reconstruction error,
/// one backward pass through the reparameterized latent.
pub fn vae_backward(
    models: &mut VaeModels,
    x: &Tensor,
    eps: &Tensor,
) -> Result<VaeStepTrace> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let ev = tape.constant(eps.clone());
    let enc_bound = models.encoder.bind(&mut tape, true);
    let dec_bound = models.decoder.bind(&mut tape, true);
    let (mu, logvar) = models.encoder.forward(&mut tape, &enc_bound, xv)?;
    let z = reparameterize(&mut tape, mu, logvar, ev)?;
    let x_hat = models.decoder.decode(&mut tape, &dec_bound, z)?;
    let kl_rows = gaussian_kl(&mut tape, mu, logvar)?;
    let kl_sum = tape.sum(kl_rows)?;
    let kl = tape.scale(kl_sum, 1.0 / x.rows() as f64)?;
    let rec = tape.mse(xv, x_hat, Reduction::Mean)?;
    let loss = tape.add(kl, rec)?;
    tape.backward(loss)?;
    models.encoder.store_grads(&tape, &enc_bound)?;
    models.decoder.store_grads(&tape, &dec_bound)?;
    Ok(VaeStepTrace {
        loss: tape.value(loss).item(),
        kl: tape.value(kl).item(),
        rec: tape.value(rec).item(),
        mu: tape.value(mu).clone(),
        logvar: tape.value(logvar).clone(),
        x_hat: tape.value(x_hat).clone(),
    })
}

/// One baseline iteration: gradients plus one Adam step per net.
pub fn vae_step(
    models: &mut VaeModels,
    optim: &mut VaeOptim,
    x: &Tensor,
    eps: &Tensor,
) -> Result<VaeStepTrace> {
    let trace = vae_backward(models, x, eps)?;
    adam_step(&mut models.encoder.params_mut(), &mut optim.encoder)?;
    adam_step(&mut models.decoder.params_mut(), &mut optim.decoder)?;
    Ok(trace)
}

/// Value-only encoder pass.
pub fn encode_values(encoder: &EncoderNet, x: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let ev = tape.constant(eps.clone());
    let bound = encoder.bind(&mut tape, false);
    let z = encoder.encode(&mut tape, &bound, xv, ev)?;
    Ok(tape.value(z).clone())
}

/// Value-only decoder pass.
pub fn decode_values(decoder: &DecoderNet, z: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let bound = decoder.bind(&mut tape, false);
    let out = decoder.decode(&mut tape, &bound, zv)?;
    Ok(tape.value(out).clone())
}

/// Value-only sampler pass.
pub fn sample_values(sampler: &SamplerNet, eps: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let ev = tape.constant(eps.clone());
    let bound = sampler.bind(&mut tape, false);
    let z = sampler.sample_latent(&mut tape, &bound, ev)?;
    Ok(tape.value(z).clone())
}

/// Value-only Gaussian-encoder pass: (mu, logvar).
pub fn gaussian_forward_values(encoder: &GaussianEncoder, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let bound = encoder.bind(&mut tape, false);
    let (mu, logvar) = encoder.forward(&mut tape, &bound, xv)?;
    Ok((tape.value(mu).clone(), tape.value(logvar).clone()))
}

/// One line of the training report.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    LdcIter {
        iteration: usize,
        epoch: usize,
        l_rec: f64,
        sigma2: f64,
        bandwidth: f64,
        phi_theta_norm: f64,
        phi_omega_norm: f64,
        wall_ms: f64,
    },
    VaeIter {
        iteration: usize,
        epoch: usize,
        loss: f64,
        kl: f64,
        rec: f64,
        wall_ms: f64,
    },
    Epoch {
        epoch: usize,
        mmd2: f64,
        test_mse: f64,
    },
}

/// Full per-run log: iteration records in order, epoch metric records
/// interleaved after each evaluated epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub records: Vec<Record>,
}

const CSV_HEADER: &str =
    "kind,iteration,epoch,l_rec,sigma2,bandwidth,phi_theta_norm,phi_omega_norm,loss,kl,mmd2,test_mse,wall_ms";

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let line = match r {
                Record::LdcIter {
                    iteration,
                    epoch,
                    l_rec,
                    sigma2,
                    bandwidth,
                    phi_theta_norm,
                    phi_omega_norm,
                    wall_ms,
                } => format!(
                    "ldc_iter,{iteration},{epoch},{l_rec},{sigma2},{bandwidth},{phi_theta_norm},{phi_omega_norm},,,,,{wall_ms}"
                ),
                Record::VaeIter { iteration, epoch, loss, kl, rec, wall_ms } => format!(
                    "vae_iter,{iteration},{epoch},{rec},,,,,{loss},{kl},,,{wall_ms}"
                ),
                Record::Epoch { epoch, mmd2, test_mse } => {
                    format!("epoch,,{epoch},,,,,,,,{mmd2},{test_mse},")
                }
            };
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<TrainReport> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == CSV_HEADER => {}
            other => {
                return Err(Error::Contract(format!("unexpected report header {other:?}")));
            }
        }
        let field = |parts: &[&str], i: usize, line: usize| -> Result<f64> {
            parts[i].parse().map_err(|_| {
                Error::Contract(format!("report line {line}: bad number {:?}", parts[i]))
            })
        };
        let index = |parts: &[&str], i: usize, line: usize| -> Result<usize> {
            parts[i].parse().map_err(|_| {
                Error::Contract(format!("report line {line}: bad index {:?}", parts[i]))
            })
        };
        let mut records = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 13 {
                return Err(Error::Contract(format!(
                    "report line {}: expected 13 fields, got {}",
                    lineno + 2,
                    parts.len()
                )));
            }
            let ln = lineno + 2;
            let rec = match parts[0] {
                "ldc_iter" => Record::LdcIter {
                    iteration: index(&parts, 1, ln)?,
                    epoch: index(&parts, 2, ln)?,
                    l_rec: field(&parts, 3, ln)?,
                    sigma2: field(&parts, 4, ln)?,
                    bandwidth: field(&parts, 5, ln)?,
                    phi_theta_norm: field(&parts, 6, ln)?,
                    phi_omega_norm: field(&parts, 7, ln)?,
                    wall_ms: field(&parts, 12, ln)?,
                },
                "vae_iter" => Record::VaeIter {
                    iteration: index(&parts, 1, ln)?,
                    epoch: index(&parts, 2, ln)?,
                    rec: field(&parts, 3, ln)?,
                    loss: field(&parts, 8, ln)?,
                    kl: field(&parts, 9, ln)?,
                    wall_ms: field(&parts, 12, ln)?,
                },
                "epoch" => Record::Epoch {
                    epoch: index(&parts, 2, ln)?,
                    mmd2: field(&parts, 10, ln)?,
                    test_mse: field(&parts, 11, ln)?,
                },
                other => {
                    return Err(Error::Contract(format!(
                        "report line {ln}: unknown kind {other:?}"
                    )))
                }
            };
            records.push(rec);
        }
        Ok(TrainReport { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<TrainReport> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse_csv(&text)
    }

    /// Epoch metric rows as (epoch, mmd2, test_mse), in order.
    pub fn epoch_metrics(&self) -> Vec<(usize, f64, f64)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                Record::Epoch { epoch, mmd2, test_mse } => Some((*epoch, *mmd2, *test_mse)),
                _ => None,
            })
            .collect()
    }

    /// Copy with wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_wall_time(&self) -> TrainReport {
        let records = self
            .records
            .iter()
            .cloned()
            .map(|r| match r {
                Record::LdcIter { iteration, epoch, l_rec, sigma2, bandwidth, phi_theta_norm, phi_omega_norm, .. } => {
                    Record::LdcIter { iteration, epoch, l_rec, sigma2, bandwidth, phi_theta_norm, phi_omega_norm, wall_ms: 0.0 }
                }
                Record::VaeIter { iteration, epoch, loss, kl, rec, .. } => {
                    Record::VaeIter { iteration, epoch, loss, kl, rec, wall_ms: 0.0 }
                }
                epoch_rec => epoch_rec,
            })
            .collect();
        TrainReport { records }
    }
}

/// Evaluation outcome on a held-out set.
#[derive(Debug, Clone, Copy)]
pub struct EvalMetrics {
    /// Unbiased MMD^2 between the two latent clouds.
    pub mmd2: f64,
    pub mmd_bandwidth: f64,
    /// Mean per-sample squared reconstruction error.
    pub test_mse: f64,
    pub n: usize,
}

fn forward_in_chunks(
    n: usize,
    chunk: usize,
    mut f: impl FnMut(&[usize]) -> Result<Tensor>,
) -> Result<Tensor> {
    let mut rows: Vec<f64> = Vec::new();
    let mut cols = 0;
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let part = f(&idx)?;
        cols = part.cols();
        rows.extend_from_slice(part.data());
        start += chunk;
    }
    Tensor::new(vec![n, cols], rows)
}

const EVAL_CHUNK: usize = 500;

/// Encoder latents over a test set next to the latents they are compared
/// against (sampler-net draws, or prior draws for the baseline).
#[derive(Debug, Clone)]
pub struct LatentClouds {
    pub encoder: Tensor,
    pub comparison: Tensor,
}

/// Deterministic evaluation latents for a latent-consistency model; noise
/// comes from the evaluation streams keyed by epoch index.
pub fn latent_clouds_ldc(
    models: &LdcModels,
    test: &Dataset,
    tree: &SeedTree,
    epoch: usize,
) -> Result<LatentClouds> {
    let n = test.len();
    if n < 2 {
        return Err(Error::Contract("evaluation needs at least 2 test samples".to_string()));
    }
    let mut enc_noise = tree.stream(StreamTag::Eval, 2 * epoch as u64);
    let mut sam_noise = tree.stream(StreamTag::Eval, 2 * epoch as u64 + 1);

    let noise_dim = models.encoder.noise_dim();
    let encoder = forward_in_chunks(n, EVAL_CHUNK, |idx| {
        let x = test.batch(idx)?;
        let eps =
            Tensor::new(vec![idx.len(), noise_dim], enc_noise.normal_vec(idx.len() * noise_dim))?;
        encode_values(&models.encoder, &x, &eps)
    })?;
    let sampler_noise_dim = models.sampler.noise_dim();
    let comparison = forward_in_chunks(n, EVAL_CHUNK, |idx| {
        let eps = Tensor::new(
            vec![idx.len(), sampler_noise_dim],
            sam_noise.normal_vec(idx.len() * sampler_noise_dim),
        )?;
        sample_values(&models.sampler, &eps)
    })?;
    Ok(LatentClouds { encoder, comparison })
}

/// Baseline counterpart of `latent_clouds_ldc`: reparameterized encoder
/// latents next to standard-normal prior draws.
pub fn latent_clouds_baseline(
    models: &VaeModels,
    test: &Dataset,
    tree: &SeedTree,
    epoch: usize,
) -> Result<LatentClouds> {
    let n = test.len();
    if n < 2 {
        return Err(Error::Contract("evaluation needs at least 2 test samples".to_string()));
    }
    let mut enc_noise = tree.stream(StreamTag::Eval, 2 * epoch as u64);
    let mut prior_noise = tree.stream(StreamTag::Eval, 2 * epoch as u64 + 1);
    let d = models.encoder.latent_dim();

    let encoder = forward_in_chunks(n, EVAL_CHUNK, |idx| {
        let x = test.batch(idx)?;
        let (mu, logvar) = gaussian_forward_values(&models.encoder, &x)?;
        let eps = enc_noise.normal_vec(idx.len() * d);
        let data: Vec<f64> = mu
            .data()
            .iter()
            .zip(logvar.data())
            .zip(&eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        Tensor::new(vec![idx.len(), d], data)
    })?;
    let comparison = Tensor::new(vec![n, d], prior_noise.normal_vec(n * d))?;
    Ok(LatentClouds { encoder, comparison })
}

fn metrics_from_clouds(
    decoder: &DecoderNet,
    test: &Dataset,
    clouds: &LatentClouds,
) -> Result<EvalMetrics> {
    let n = test.len();
    let x_hat = forward_in_chunks(n, EVAL_CHUNK, |idx| {
        decode_values(decoder, &clouds.encoder.gather_rows(idx)?)
    })?;
    let test_mse = mean_row_sse(test.samples(), &x_hat);
    let mmd_bandwidth = pooled_median_bandwidth(&clouds.encoder, &clouds.comparison)?;
    let mmd = mmd2_unbiased(&clouds.encoder, &clouds.comparison, mmd_bandwidth)?;
    Ok(EvalMetrics { mmd2: mmd.statistic, mmd_bandwidth, test_mse, n })
}

/// Latent consistency and reconstruction quality of a latent-consistency
/// model: MMD^2 between encoder test latents and sampler-net latents, plus
/// mean per-sample squared reconstruction error.
pub fn evaluate_ldc(
    models: &LdcModels,
    test: &Dataset,
    tree: &SeedTree,
    epoch: usize,
) -> Result<EvalMetrics> {
    let clouds = latent_clouds_ldc(models, test, tree, epoch)?;
    metrics_from_clouds(&models.decoder, test, &clouds)
}

/// Baseline counterpart: MMD^2 between reparameterized encoder latents and
/// prior draws, plus mean per-sample squared reconstruction error.
pub fn evaluate_baseline(
    models: &VaeModels,
    test: &Dataset,
    tree: &SeedTree,
    epoch: usize,
) -> Result<EvalMetrics> {
    let clouds = latent_clouds_baseline(models, test, tree, epoch)?;
    metrics_from_clouds(&models.decoder, test, &clouds)
}

/// Mean over rows of the summed squared per-coordinate error.
fn mean_row_sse(x: &Tensor, x_hat: &Tensor) -> f64 {
    let mut total = 0.0;
    for i in 0..x.rows() {
        total += x
            .row(i)
            .iter()
            .zip(x_hat.row(i))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    total / x.rows() as f64
}

pub fn report_path(out_dir: &Path) -> PathBuf {
    out_dir.join("report.csv")
}

pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("model.ckpt")
}

pub fn epoch_checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("model_epoch_{epoch}.ckpt"))
}

pub fn config_path(out_dir: &Path) -> PathBuf {
    out_dir.join("config.txt")
}

/// Loads the train/test datasets named by the config, with limits applied.
pub fn load_datasets(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match cfg.dataset {
        DatasetChoice::Mnist => {
            let dir = Path::new(&cfg.data_dir);
            let train = load_idx(
                &dir.join("train-images-idx3-ubyte"),
                Some(&dir.join("train-labels-idx1-ubyte")),
            )?;
            let test = load_idx(
                &dir.join("t10k-images-idx3-ubyte"),
                Some(&dir.join("t10k-labels-idx1-ubyte")),
            )?;
            (train, test)
        }
        DatasetChoice::TwoMoons => {
            let train = synth_2d(SynthKind::TwoMoons, cfg.synth_train, cfg.seed)?;
            let test = synth_2d(SynthKind::TwoMoons, cfg.synth_test, cfg.seed ^ 0x7e57)?;
            (train, test)
        }
        DatasetChoice::GaussianGrid => {
            let kind = SynthKind::GaussianGrid { k: cfg.grid_k };
            let train = synth_2d(kind, cfg.synth_train, cfg.seed)?;
            let test = synth_2d(kind, cfg.synth_test, cfg.seed ^ 0x7e57)?;
            (train, test)
        }
    };
    Ok((train.take(cfg.train_limit)?, test.take(cfg.test_limit)?))
}

/// Trained nets of a finished run.
#[derive(Debug, Clone)]
pub enum TrainedModels {
    Ldc(LdcModels),
    Baseline(VaeModels),
}

/// Everything a run produces in memory; files land in `cfg.out_dir`.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub report: TrainReport,
    pub models: TrainedModels,
    pub x_dim: usize,
}

fn with_iteration(err: Error, iteration: usize) -> Error {
    match err {
        Error::NonFinite(msg) => Error::NonFinite(format!("iteration {iteration}: {msg}")),
        other => other,
    }
}

/// Runs a full training job: epoch loop with seeded shuffling, per-iteration
/// records, per-epoch evaluation (including an untrained epoch-0 row when
/// any training happens), periodic checkpoints, and final artifacts
/// (report.csv, model.ckpt, config.txt) under `cfg.out_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let (train_ds, test_ds) = load_datasets(cfg)?;
    let x_dim = if cfg.x_dim == 0 {
        train_ds.dim()
    } else if cfg.x_dim == train_ds.dim() {
        cfg.x_dim
    } else {
        return Err(Error::Config(format!(
            "x_dim {} does not match dataset dimension {}",
            cfg.x_dim,
            train_ds.dim()
        )));
    };
    if BatchIterator::batches_per_epoch(train_ds.len(), cfg.batch_size) == 0 && cfg.epochs > 0 {
        return Err(Error::Config(format!(
            "training set of {} samples yields no batches",
            train_ds.len()
        )));
    }

    let out_dir = Path::new(&cfg.out_dir);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut resolved = cfg.clone();
    resolved.x_dim = x_dim;
    resolved.save(&config_path(out_dir))?;

    let tree = SeedTree::new(cfg.seed);
    let settings = StepSettings::from_config(cfg);
    let mut report = TrainReport::default();

    match cfg.mode {
        TrainMode::Ldc => {
            let mut models = LdcModels::from_config(cfg, x_dim)?;
            let mut optim = LdcOptim::from_config(cfg);
            let noise_dim = cfg.resolved_noise_dim();
            let sampler_noise_dim = cfg.resolved_sampler_noise_dim();
            if cfg.epochs > 0 {
                let m0 = evaluate_ldc(&models, &test_ds, &tree, 0)?;
                report.records.push(Record::Epoch { epoch: 0, mmd2: m0.mmd2, test_mse: m0.test_mse });
            }
            let mut iteration = 0usize;
            for epoch in 1..=cfg.epochs {
                let mut shuffle = tree.stream(StreamTag::Shuffle, epoch as u64);
                for idx in BatchIterator::new(train_ds.len(), cfg.batch_size, &mut shuffle)? {
                    iteration += 1;
                    let b = idx.len();
                    let x = train_ds.batch(&idx)?;
                    let eps_e = Tensor::new(
                        vec![b, noise_dim],
                        tree.stream(StreamTag::EncoderNoise, iteration as u64)
                            .normal_vec(b * noise_dim),
                    )?;
                    let eps_s = Tensor::new(
                        vec![b, sampler_noise_dim],
                        tree.stream(StreamTag::SamplerNoise, iteration as u64)
                            .normal_vec(b * sampler_noise_dim),
                    )?;
                    let t0 = Instant::now();
                    let trace = ldc_step(&mut models, &mut optim, &x, &eps_e, &eps_s, &settings)
                        .map_err(|e| with_iteration(e, iteration))?;
                    report.records.push(Record::LdcIter {
                        iteration,
                        epoch,
                        l_rec: trace.l_rec,
                        sigma2: trace.sigma2,
                        bandwidth: trace.bandwidth,
                        phi_theta_norm: trace.mean_phi_theta_norm(),
                        phi_omega_norm: trace.mean_phi_omega_norm(),
                        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                    });
                }
                if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
                    let m = evaluate_ldc(&models, &test_ds, &tree, epoch)?;
                    report.records.push(Record::Epoch { epoch, mmd2: m.mmd2, test_mse: m.test_mse });
                }
                if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                    checkpoint::save(&epoch_checkpoint_path(out_dir, epoch), &models.params())?;
                }
            }
            checkpoint::save(&checkpoint_path(out_dir), &models.params())?;
            report.save(&report_path(out_dir))?;
            Ok(TrainOutput { report, models: TrainedModels::Ldc(models), x_dim })
        }
        TrainMode::Baseline => {
            let mut models = VaeModels::from_config(cfg, x_dim)?;
            let mut optim = VaeOptim::from_config(cfg);
            let d = cfg.latent_dim;
            if cfg.epochs > 0 {
                let m0 = evaluate_baseline(&models, &test_ds, &tree, 0)?;
                report.records.push(Record::Epoch { epoch: 0, mmd2: m0.mmd2, test_mse: m0.test_mse });
            }
            let mut iteration = 0usize;
            for epoch in 1..=cfg.epochs {
                let mut shuffle = tree.stream(StreamTag::Shuffle, epoch as u64);
                for idx in BatchIterator::new(train_ds.len(), cfg.batch_size, &mut shuffle)? {
                    iteration += 1;
                    let b = idx.len();
                    let x = train_ds.batch(&idx)?;
                    let eps = Tensor::new(
                        vec![b, d],
                        tree.stream(StreamTag::EncoderNoise, iteration as u64).normal_vec(b * d),
                    )?;
                    let t0 = Instant::now();
                    let trace = vae_step(&mut models, &mut optim, &x, &eps)
                        .map_err(|e| with_iteration(e, iteration))?;
                    report.records.push(Record::VaeIter {
                        iteration,
                        epoch,
                        loss: trace.loss,
                        kl: trace.kl,
                        rec: trace.rec,
                        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                    });
                }
                if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
                    let m = evaluate_baseline(&models, &test_ds, &tree, epoch)?;
                    report.records.push(Record::Epoch { epoch, mmd2: m.mmd2, test_mse: m.test_mse });
                }
                if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                    checkpoint::save(&epoch_checkpoint_path(out_dir, epoch), &models.params())?;
                }
            }
            checkpoint::save(&checkpoint_path(out_dir), &models.params())?;
            report.save(&report_path(out_dir))?;
            Ok(TrainOutput { report, models: TrainedModels::Baseline(models), x_dim })
        }
    }
}

/// Rebuilds a latent-consistency model from a resolved config and restores
/// checkpoint weights into it.
pub fn load_ldc_models(cfg: &TrainConfig, ckpt: &Path) -> Result<LdcModels> {
    if cfg.x_dim == 0 {
        return Err(Error::Config(
            "config has no resolved x_dim; point at a run's emitted config".to_string(),
        ));
    }
    let mut models = LdcModels::from_config(cfg, cfg.x_dim)?;
    let loaded = checkpoint::load(ckpt)?;
    checkpoint::restore(&mut models.params_mut(), loaded)?;
    Ok(models)
}

/// Baseline counterpart of `load_ldc_models`.
pub fn load_baseline_models(cfg: &TrainConfig, ckpt: &Path) -> Result<VaeModels> {
    if cfg.x_dim == 0 {
        return Err(Error::Config(
            "config has no resolved x_dim; point at a run's emitted config".to_string(),
        ));
    }
    let mut models = VaeModels::from_config(cfg, cfg.x_dim)?;
    let loaded = checkpoint::load(ckpt)?;
    checkpoint::restore(&mut models.params_mut(), loaded)?;
    Ok(models)
}
