//! The decoder-induced target over latent space. Up to a constant that
//! backpropagation never needs, the log density of latent z paired with a
//! data row x is -|x - D(z)|^2 / sigma^2. Its gradient with respect to z
//! comes out of one decoder backward pass with the decoder parameters bound
//! frozen, so scoring never pollutes decoder gradients.

use crate::error::{Error, Result};
use crate::models::DecoderNet;
use crate::svgd::ScoreFunction;
use crate::tape::{Reduction, Tape};
use crate::tensor::{row_norms, Tensor};

/// Smallest admissible noise variance.
pub const SIGMA2_FLOOR: f64 = 1e-8;

/// What statistic of the per-sample residuals the variance is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sigma2Mode {
    /// Population variance of the residual Euclidean norms.
    Norm,
    /// Population variance of the squared residual norms.
    SqNorm,
}

impl Sigma2Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "norm" => Ok(Sigma2Mode::Norm),
            "sqnorm" => Ok(Sigma2Mode::SqNorm),
            other => Err(Error::Config(format!("unknown sigma2_mode '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Sigma2Mode::Norm => "norm",
            Sigma2Mode::SqNorm => "sqnorm",
        }
    }
}

/// Batch estimate of the observation noise scale, floored at
/// `SIGMA2_FLOOR`. Needs at least two rows for a variance to exist.
pub fn estimate_sigma2(x: &Tensor, recon: &Tensor, mode: Sigma2Mode) -> Result<f64> {
    if x.shape() != recon.shape() || x.shape().len() != 2 {
        return Err(Error::shape(
            "estimate_sigma2",
            format!("{:?} vs {:?}", x.shape(), recon.shape()),
        ));
    }
    let b = x.rows();
    if b < 2 {
        return Err(Error::Contract(format!(
            "estimate_sigma2 needs a batch of at least 2, got {b}"
        )));
    }
    let mut residual = x.clone();
    for (r, v) in residual.data_mut().iter_mut().zip(recon.data()) {
        *r -= v;
    }
    let stats: Vec<f64> = match mode {
        Sigma2Mode::Norm => row_norms(&residual),
        Sigma2Mode::SqNorm => row_norms(&residual).iter().map(|n| n * n).collect(),
    };
    let mean = stats.iter().sum::<f64>() / b as f64;
    let var = stats.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / b as f64;
    Ok(var.max(SIGMA2_FLOOR))
}

/// Frozen-decoder target for one data batch. Latent row i is paired with
/// data row `pairing[i]`; the default pairing is the identity.
pub struct GibbsPosterior<'a> {
    decoder: &'a DecoderNet,
    x: &'a Tensor,
    sigma2: f64,
    pairing: Vec<usize>,
}

impl<'a> GibbsPosterior<'a> {
    pub fn new(decoder: &'a DecoderNet, x: &'a Tensor, sigma2: f64) -> Result<Self> {
        let pairing = (0..x.rows()).collect();
        Self::with_pairing(decoder, x, sigma2, pairing)
    }

    pub fn with_pairing(
        decoder: &'a DecoderNet,
        x: &'a Tensor,
        sigma2: f64,
        pairing: Vec<usize>,
    ) -> Result<Self> {
        if x.shape().len() != 2 || x.cols() != decoder.out_dim() {
            return Err(Error::shape(
                "GibbsPosterior",
                format!("data {:?} vs decoder output {}", x.shape(), decoder.out_dim()),
            ));
        }
        if !sigma2.is_finite() || sigma2 <= 0.0 {
            return Err(Error::Contract(format!("sigma2 must be positive, got {sigma2}")));
        }
        if let Some(&bad) = pairing.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::Contract(format!(
                "pairing index {bad} out of range for {} data rows",
                x.rows()
            )));
        }
        Ok(GibbsPosterior { decoder, x, sigma2, pairing })
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    fn check_rows(&self, z: &Tensor) -> Result<()> {
        if z.shape().len() != 2 || z.cols() != self.decoder.latent_dim() {
            return Err(Error::shape(
                "GibbsPosterior",
                format!("latents {:?} vs decoder input {}", z.shape(), self.decoder.latent_dim()),
            ));
        }
        if z.rows() != self.pairing.len() {
            return Err(Error::Contract(format!(
                "{} latent rows but {} pairings",
                z.rows(),
                self.pairing.len()
            )));
        }
        Ok(())
    }

    /// Log density up to the normalizing constant, one entry per latent row.
    pub fn log_density_unnorm(&self, z: &Tensor) -> Result<Tensor> {
        self.check_rows(z)?;
        let paired = self.x.gather_rows(&self.pairing)?;
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let xv = tape.constant(paired);
        let bound = self.decoder.bind(&mut tape, false);
        let recon = self.decoder.decode(&mut tape, &bound, zv)?;
        let per_row = tape.mse(xv, recon, Reduction::SumPerRow)?;
        let ld = tape.scale(per_row, -1.0 / self.sigma2)?;
        Ok(tape.value(ld).clone())
    }

    /// grad_z of the unnormalized log density, row-wise: one frozen decoder
    /// backward pass, (2/sigma^2) J_D(z)^T (x - D(z)) per row.
    pub fn score(&self, z: &Tensor) -> Result<Tensor> {
        self.check_rows(z)?;
        let paired = self.x.gather_rows(&self.pairing)?;
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone(), true);
        let xv = tape.constant(paired);
        let bound = self.decoder.bind(&mut tape, false);
        let recon = self.decoder.decode(&mut tape, &bound, zv)?;
        let per_row = tape.mse(xv, recon, Reduction::SumPerRow)?;
        // Rows are independent, so the gradient of the scaled sum splits
        // into the per-row score vectors.
        let neg = tape.scale(per_row, -1.0 / self.sigma2)?;
        let total = tape.sum(neg)?;
        tape.backward(total)?;
        tape.grad_tensor(zv)
    }
}

impl ScoreFunction for GibbsPosterior<'_> {
    fn score(&self, points: &Tensor) -> Result<Tensor> {
        GibbsPosterior::score(self, points)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, rel_err};
    use crate::nn::Activation;
    use crate::rng::{SeedTree, StreamTag};

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn sigma2_norm_mode_hand_example() {
        // Residual rows (1,0) and (-3,0): norms {1,3}, mean 2, population var 1.
        let x = t2(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let recon = t2(&[vec![0.0, 0.0], vec![3.0, 0.0]]);
        let s = estimate_sigma2(&x, &recon, Sigma2Mode::Norm).unwrap();
        assert!((s - 1.0).abs() < 1e-15, "{s}");
    }

    #[test]
    fn sigma2_sqnorm_mode_hand_example() {
        // Squared norms {1,9}: mean 5, population var 16.
        let x = t2(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let recon = t2(&[vec![0.0, 0.0], vec![3.0, 0.0]]);
        let s = estimate_sigma2(&x, &recon, Sigma2Mode::SqNorm).unwrap();
        assert!((s - 16.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn sigma2_floor_and_batch_contract() {
        let x = t2(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        // Identical residuals: zero variance, floored.
        assert_eq!(estimate_sigma2(&x, &x, Sigma2Mode::Norm).unwrap(), SIGMA2_FLOOR);
        let one = t2(&[vec![0.5, 0.5]]);
        assert!(estimate_sigma2(&one, &one, Sigma2Mode::Norm).is_err());
    }

    #[test]
    fn sigma2_scales_quadratically_with_residuals() {
        let zero = t2(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]]);
        let r1 = t2(&[vec![1.0, 0.5], vec![0.2, -0.4], vec![-0.9, 1.1]]);
        let r3 = {
            let mut t = r1.clone();
            t.data_mut().iter_mut().for_each(|v| *v *= 3.0);
            t
        };
        let s1 = estimate_sigma2(&zero, &r1, Sigma2Mode::Norm).unwrap();
        let s3 = estimate_sigma2(&zero, &r3, Sigma2Mode::Norm).unwrap();
        assert!(rel_err(s3, 9.0 * s1, 1e-12) < 1e-12, "{s3} vs {}", 9.0 * s1);
    }

    /// Decoder D(z) = z A with a hand-set weight matrix and no bias.
    fn linear_decoder(a_rows: &[Vec<f64>]) -> DecoderNet {
        let tree = SeedTree::new(0);
        let mut dec = DecoderNet::init(
            &mut tree.stream(StreamTag::DecoderInit, 0),
            a_rows.len(),
            &[],
            a_rows[0].len(),
            Activation::Relu,
            Activation::Identity,
        );
        let w = t2(a_rows);
        *dec.params_mut()[0].value_mut() = w;
        *dec.params_mut()[1].value_mut() = Tensor::zeros(vec![a_rows[0].len()]);
        dec
    }

    #[test]
    fn log_density_hand_example() {
        // Identity-like decoder (A = I), sigma2 = 1: entries are minus the
        // squared residual norms.
        let dec = linear_decoder(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let x = t2(&[vec![1.0, 1.0], vec![0.0, 0.0]]);
        let post = GibbsPosterior::new(&dec, &x, 1.0).unwrap();
        let z = t2(&[vec![1.0, 1.0], vec![2.0, 0.0]]);
        let ld = post.log_density_unnorm(&z).unwrap();
        assert_eq!(ld.data(), &[0.0, -4.0]);
    }

    #[test]
    fn linear_decoder_score_matches_closed_form() {
        // score_i = (2/sigma2) (x_i - z_i A) A^T.
        let a = vec![vec![0.5, -0.3, 0.8], vec![1.1, 0.4, -0.2]];
        let dec = linear_decoder(&a);
        let x = t2(&[vec![0.2, 0.9, -0.1], vec![1.0, 0.0, 0.5]]);
        let sigma2 = 0.7;
        let post = GibbsPosterior::new(&dec, &x, sigma2).unwrap();
        let z = t2(&[vec![0.3, -0.6], vec![0.9, 0.2]]);
        let score = post.score(&z).unwrap();

        for i in 0..2 {
            // residual = x_i - z_i A
            let mut resid = vec![0.0; 3];
            for c in 0..3 {
                let mut zae = 0.0;
                for k in 0..2 {
                    zae += z.row(i)[k] * a[k][c];
                }
                resid[c] = x.row(i)[c] - zae;
            }
            for k in 0..2 {
                let mut expect = 0.0;
                for c in 0..3 {
                    expect += resid[c] * a[k][c];
                }
                expect *= 2.0 / sigma2;
                let got = score.row(i)[k];
                assert!((got - expect).abs() < 1e-12, "({i},{k}): {got} vs {expect}");
            }
        }
    }

    #[test]
    fn score_is_zero_at_a_perfect_reconstruction() {
        let dec = linear_decoder(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let x = t2(&[vec![0.25, -0.5], vec![1.5, 0.75]]);
        let post = GibbsPosterior::new(&dec, &x, 0.3).unwrap();
        let score = post.score(&x).unwrap();
        assert!(score.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn score_matches_central_differences_through_a_nonlinear_decoder() {
        let tree = SeedTree::new(77);
        let dec = DecoderNet::init(
            &mut tree.stream(StreamTag::DecoderInit, 1),
            2,
            &[6],
            4,
            Activation::Tanh,
            Activation::Sigmoid,
        );
        let mut s = tree.stream(StreamTag::Eval, 0);
        let x = Tensor::new(vec![3, 4], s.uniform_vec(12)).unwrap();
        let post = GibbsPosterior::new(&dec, &x, 0.42).unwrap();
        let z0 = Tensor::new(vec![3, 2], s.normal_vec(6)).unwrap();
        let score = post.score(&z0).unwrap();

        for (row, col) in [(0usize, 0usize), (1, 1), (2, 0)] {
            let v0 = z0.row(row)[col];
            let mut z = z0.clone();
            let fd = central_diff(
                |v| {
                    z.data_mut()[row * 2 + col] = v;
                    post.log_density_unnorm(&z).unwrap().data()[row]
                },
                v0,
                1e-5,
            );
            let got = score.row(row)[col];
            assert!(rel_err(got, fd, 1e-3) < 1e-5, "({row},{col}): {got} vs {fd}");
        }
    }

    #[test]
    fn pairing_reorders_data_rows() {
        let dec = linear_decoder(&[vec![1.0]]);
        let x = t2(&[vec![0.0], vec![10.0]]);
        let swapped = GibbsPosterior::with_pairing(&dec, &x, 1.0, vec![1, 0]).unwrap();
        let z = t2(&[vec![0.0], vec![0.0]]);
        // Row 0 pairs with x=10: log density -100; row 1 pairs with x=0: 0.
        let ld = swapped.log_density_unnorm(&z).unwrap();
        assert_eq!(ld.data(), &[-100.0, 0.0]);
    }

    #[test]
    fn pairing_contract_violations_error() {
        let dec = linear_decoder(&[vec![1.0]]);
        let x = t2(&[vec![0.0], vec![1.0]]);
        assert!(GibbsPosterior::with_pairing(&dec, &x, 1.0, vec![0, 2]).is_err());
        let post = GibbsPosterior::with_pairing(&dec, &x, 1.0, vec![0]).unwrap();
        let z = t2(&[vec![0.0], vec![0.0]]);
        assert!(post.score(&z).is_err(), "latent rows exceed pairing length");
    }

    #[test]
    fn invalid_sigma2_rejected() {
        let dec = linear_decoder(&[vec![1.0]]);
        let x = t2(&[vec![0.0]]);
        assert!(GibbsPosterior::new(&dec, &x, 0.0).is_err());
        assert!(GibbsPosterior::new(&dec, &x, f64::NAN).is_err());
    }
}
