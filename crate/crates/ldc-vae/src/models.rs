//! The four networks: a noise-injected encoder, a decoder, a latent sampler,
//! and a Gaussian encoder for the ELBO baseline. Each one binds its
//! parameters onto a caller-owned tape per step; nothing here holds tape
//! state between steps.
//!
//! Encoder layout: a feature stack over the data, a feature stack over the
//! noise, and a merge stack over their concatenation. Empty hidden lists
//! collapse a stack to the identity, which is how fully linear instances
//! are built for closed-form checks.

use crate::error::Result;
use crate::nn::{Activation, BoundLayer, BoundMlp, Mlp, Param};
use crate::rng::Stream;
use crate::tape::{Tape, Var};

/// E(x, eps): data features and noise features are concatenated and merged
/// down to the latent dimension. The output is unbounded.
#[derive(Debug, Clone)]
pub struct EncoderNet {
    ex: Mlp,
    en: Mlp,
    ec: Mlp,
    x_dim: usize,
    noise_dim: usize,
    latent_dim: usize,
}

#[derive(Debug, Clone)]
pub struct BoundEncoder {
    ex: BoundMlp,
    en: BoundMlp,
    ec: BoundMlp,
}

impl EncoderNet {
    pub fn init(
        stream: &mut Stream,
        x_dim: usize,
        noise_dim: usize,
        latent_dim: usize,
        x_hidden: &[usize],
        noise_hidden: &[usize],
        merge_hidden: &[usize],
        activation: Activation,
    ) -> Self {
        let ex_dims: Vec<usize> = std::iter::once(x_dim).chain(x_hidden.iter().copied()).collect();
        let en_dims: Vec<usize> = std::iter::once(noise_dim)
            .chain(noise_hidden.iter().copied())
            .collect();
        let ex = Mlp::init("encoder.ex", &ex_dims, activation, activation, stream);
        let en = Mlp::init("encoder.en", &en_dims, activation, activation, stream);
        let ec_dims: Vec<usize> = std::iter::once(ex.out_dim() + en.out_dim())
            .chain(merge_hidden.iter().copied())
            .chain(std::iter::once(latent_dim))
            .collect();
        let ec = Mlp::init("encoder.ec", &ec_dims, activation, Activation::Identity, stream);
        EncoderNet { ex, en, ec, x_dim, noise_dim, latent_dim }
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundEncoder {
        BoundEncoder {
            ex: self.ex.bind(tape, trainable),
            en: self.en.bind(tape, trainable),
            ec: self.ec.bind(tape, trainable),
        }
    }

    /// z = merge(concat(features(x), features(eps))).
    pub fn encode(&self, tape: &mut Tape, bound: &BoundEncoder, x: Var, eps: Var) -> Result<Var> {
        let fx = self.ex.forward(tape, &bound.ex, x)?;
        let fn_ = self.en.forward(tape, &bound.en, eps)?;
        let merged = tape.concat(fx, fn_)?;
        self.ec.forward(tape, &bound.ec, merged)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.ex.params();
        p.extend(self.en.params());
        p.extend(self.ec.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.ex.params_mut();
        p.extend(self.en.params_mut());
        p.extend(self.ec.params_mut());
        p
    }

    pub fn store_grads(&mut self, tape: &Tape, bound: &BoundEncoder) -> Result<()> {
        self.ex.store_grads(tape, &bound.ex)?;
        self.en.store_grads(tape, &bound.en)?;
        self.ec.store_grads(tape, &bound.ec)
    }

    pub fn param_count(&self) -> usize {
        self.ex.param_count() + self.en.param_count() + self.ec.param_count()
    }
}

/// D(z): latent to data space. The default output activation is sigmoid so
/// reconstructions live in the [0,1] data range.
#[derive(Debug, Clone)]
pub struct DecoderNet {
    net: Mlp,
}

impl DecoderNet {
    pub fn init(
        stream: &mut Stream,
        latent_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        activation: Activation,
        output: Activation,
    ) -> Self {
        let dims: Vec<usize> = std::iter::once(latent_dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(out_dim))
            .collect();
        DecoderNet {
            net: Mlp::init("decoder", &dims, activation, output, stream),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.net.out_dim()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        self.net.bind(tape, trainable)
    }

    pub fn decode(&self, tape: &mut Tape, bound: &BoundMlp, z: Var) -> Result<Var> {
        self.net.forward(tape, bound, z)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.net.params_mut()
    }

    pub fn store_grads(&mut self, tape: &Tape, bound: &BoundMlp) -> Result<()> {
        self.net.store_grads(tape, bound)
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }
}

/// S(eps): pushes sampler noise to latent space; unbounded output.
#[derive(Debug, Clone)]
pub struct SamplerNet {
    net: Mlp,
}

impl SamplerNet {
    pub fn init(
        stream: &mut Stream,
        noise_dim: usize,
        hidden: &[usize],
        latent_dim: usize,
        activation: Activation,
    ) -> Self {
        let dims: Vec<usize> = std::iter::once(noise_dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(latent_dim))
            .collect();
        SamplerNet {
            net: Mlp::init("sampler", &dims, activation, Activation::Identity, stream),
        }
    }

    pub fn noise_dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.net.out_dim()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        self.net.bind(tape, trainable)
    }

    pub fn sample_latent(&self, tape: &mut Tape, bound: &BoundMlp, eps: Var) -> Result<Var> {
        self.net.forward(tape, bound, eps)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.net.params_mut()
    }

    pub fn store_grads(&mut self, tape: &Tape, bound: &BoundMlp) -> Result<()> {
        self.net.store_grads(tape, bound)
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }
}

/// Gaussian encoder for the ELBO baseline: a trunk feeding separate mean and
/// log-variance heads.
#[derive(Debug, Clone)]
pub struct GaussianEncoder {
    trunk: Mlp,
    mu_head: crate::nn::AffineLayer,
    logvar_head: crate::nn::AffineLayer,
    latent_dim: usize,
}

#[derive(Debug, Clone)]
pub struct BoundGaussianEncoder {
    trunk: BoundMlp,
    mu: BoundLayer,
    logvar: BoundLayer,
}

impl GaussianEncoder {
    pub fn init(
        stream: &mut Stream,
        x_dim: usize,
        hidden: &[usize],
        latent_dim: usize,
        activation: Activation,
    ) -> Self {
        let dims: Vec<usize> = std::iter::once(x_dim).chain(hidden.iter().copied()).collect();
        let trunk = Mlp::init("gauss_encoder.trunk", &dims, activation, activation, stream);
        let mu_head = crate::nn::AffineLayer::init("gauss_encoder.mu", trunk.out_dim(), latent_dim, stream);
        let logvar_head =
            crate::nn::AffineLayer::init("gauss_encoder.logvar", trunk.out_dim(), latent_dim, stream);
        GaussianEncoder { trunk, mu_head, logvar_head, latent_dim }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundGaussianEncoder {
        BoundGaussianEncoder {
            trunk: self.trunk.bind(tape, trainable),
            mu: BoundLayer {
                weight: tape.leaf(self.mu_head.weight.value().clone(), trainable),
                bias: tape.leaf(self.mu_head.bias.value().clone(), trainable),
            },
            logvar: BoundLayer {
                weight: tape.leaf(self.logvar_head.weight.value().clone(), trainable),
                bias: tape.leaf(self.logvar_head.bias.value().clone(), trainable),
            },
        }
    }

    /// Returns (mu, log_var), each [B, latent].
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundGaussianEncoder,
        x: Var,
    ) -> Result<(Var, Var)> {
        let h = self.trunk.forward(tape, &bound.trunk, x)?;
        let mu = tape.affine(h, bound.mu.weight, bound.mu.bias)?;
        let logvar = tape.affine(h, bound.logvar.weight, bound.logvar.bias)?;
        Ok((mu, logvar))
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.trunk.params();
        p.push(&self.mu_head.weight);
        p.push(&self.mu_head.bias);
        p.push(&self.logvar_head.weight);
        p.push(&self.logvar_head.bias);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.trunk.params_mut();
        p.push(&mut self.mu_head.weight);
        p.push(&mut self.mu_head.bias);
        p.push(&mut self.logvar_head.weight);
        p.push(&mut self.logvar_head.bias);
        p
    }

    pub fn store_grads(&mut self, tape: &Tape, bound: &BoundGaussianEncoder) -> Result<()> {
        self.trunk.store_grads(tape, &bound.trunk)?;
        self.mu_head.weight.set_grad(tape.grad_tensor(bound.mu.weight)?)?;
        self.mu_head.bias.set_grad(tape.grad_tensor(bound.mu.bias)?)?;
        self.logvar_head.weight.set_grad(tape.grad_tensor(bound.logvar.weight)?)?;
        self.logvar_head.bias.set_grad(tape.grad_tensor(bound.logvar.bias)?)?;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count()
            + self.mu_head.weight.value().numel()
            + self.mu_head.bias.value().numel()
            + self.logvar_head.weight.value().numel()
            + self.logvar_head.bias.value().numel()
    }
}

/// Per-sample KL(N(mu, diag(exp(logvar))) || N(0, I)):
/// 0.5 * sum_j (mu^2 + exp(logvar) - logvar - 1). Shape [B].
pub fn gaussian_kl(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.exp(logvar)?;
    let s1 = tape.add(mu2, var)?;
    let s2 = tape.sub(s1, logvar)?;
    let s3 = tape.add_const(s2, -1.0)?;
    let rs = tape.row_sum(s3)?;
    tape.scale(rs, 0.5)
}

/// z = mu + exp(logvar / 2) * eps, elementwise.
pub fn reparameterize(tape: &mut Tape, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = tape.scale(logvar, 0.5)?;
    let sd = tape.exp(half)?;
    let noise = tape.mul(sd, eps)?;
    tape.add(mu, noise)
}
