//! Trainable parameters and the MLP building blocks the models are made of.
//! Parameters live outside any tape; each training step binds them onto a
//! fresh tape as leaves, runs forward/backward there, then copies gradients
//! back into the `Param`s for the optimizer.

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Named trainable tensor with an optional gradient slot.
#[derive(Debug, Clone)]
pub struct Param {
    name: String,
    value: Tensor,
    grad: Option<Tensor>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            value,
            grad: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// Mutable value access (optimizer updates, numerical-gradient probes).
    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }

    /// Installs a gradient; the shape must match the value.
    pub fn set_grad(&mut self, g: Tensor) -> Result<()> {
        if g.shape() != self.value.shape() {
            return Err(Error::shape(
                "Param::set_grad",
                format!("param {}: {:?} vs {:?}", self.name, self.value.shape(), g.shape()),
            ));
        }
        self.grad = Some(g);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Tensor> {
        self.grad.take()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// Pointwise nonlinearity choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    /// No-op; linear layers and unbounded outputs.
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, v: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(v),
            Activation::Tanh => tape.tanh(v),
            Activation::Sigmoid => tape.sigmoid(v),
            Activation::Identity => Ok(v),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "linear" | "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }
}

/// One fully connected layer: weight [in, out] plus bias [out].
#[derive(Debug, Clone)]
pub struct AffineLayer {
    pub weight: Param,
    pub bias: Param,
}

impl AffineLayer {
    /// Weights ~ U(-s, s) with s = 1/sqrt(fan_in); biases zero.
    pub fn init(name: &str, fan_in: usize, fan_out: usize, stream: &mut Stream) -> Self {
        let s = (1.0 / fan_in as f64).sqrt();
        let w: Vec<f64> = stream
            .uniform_vec(fan_in * fan_out)
            .into_iter()
            .map(|u| (2.0 * u - 1.0) * s)
            .collect();
        AffineLayer {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::new(vec![fan_in, fan_out], w).expect("finite init"),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![fan_out])),
        }
    }
}

/// Tape handles for one bound layer.
#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub weight: Var,
    pub bias: Var,
}

/// Tape handles for a bound MLP, aligned with `Mlp::layers`.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    layers: Vec<BoundLayer>,
}

/// Stack of affine layers. `dims = [in, h1, ..., out]`; a single-entry
/// `dims` yields the identity map with no parameters.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<AffineLayer>,
    hidden: Activation,
    output: Activation,
    in_dim: usize,
    out_dim: usize,
}

impl Mlp {
    pub fn init(
        name: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        stream: &mut Stream,
    ) -> Self {
        assert!(!dims.is_empty(), "Mlp::init needs at least one dim");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| AffineLayer::init(&format!("{name}.{i}"), w[0], w[1], stream))
            .collect();
        Mlp {
            layers,
            hidden,
            output,
            in_dim: dims[0],
            out_dim: *dims.last().unwrap(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Loads all parameters onto the tape as leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| BoundLayer {
                    weight: tape.leaf(l.weight.value().clone(), trainable),
                    bias: tape.leaf(l.bias.value().clone(), trainable),
                })
                .collect(),
        }
    }

    /// Forward pass through bound parameters.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundMlp, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, b) in bound.layers.iter().enumerate() {
            h = tape.affine(h, b.weight, b.bias)?;
            h = if i == last {
                self.output.apply(tape, h)?
            } else {
                self.hidden.apply(tape, h)?
            };
        }
        Ok(h)
    }

    /// Copies gradients for every bound parameter back into the `Param`s.
    pub fn store_grads(&mut self, tape: &Tape, bound: &BoundMlp) -> Result<()> {
        for (layer, b) in self.layers.iter_mut().zip(&bound.layers) {
            layer.weight.set_grad(tape.grad_tensor(b.weight)?)?;
            layer.bias.set_grad(tape.grad_tensor(b.bias)?)?;
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.value().numel() + l.bias.value().numel())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{SeedTree, StreamTag};

    #[test]
    fn init_is_deterministic_and_scaled() {
        let tree = SeedTree::new(42);
        let a = Mlp::init(
            "m",
            &[4, 3],
            Activation::Relu,
            Activation::Identity,
            &mut tree.stream(StreamTag::EncoderInit, 0),
        );
        let b = Mlp::init(
            "m",
            &[4, 3],
            Activation::Relu,
            Activation::Identity,
            &mut tree.stream(StreamTag::EncoderInit, 0),
        );
        assert_eq!(a.layers[0].weight.value(), b.layers[0].weight.value());
        let s = 0.5; // 1/sqrt(4)
        assert!(a.layers[0]
            .weight
            .value()
            .data()
            .iter()
            .all(|w| w.abs() <= s));
        assert!(a.layers[0].bias.value().data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn identity_mlp_has_no_params_and_passes_through() {
        let tree = SeedTree::new(1);
        let m = Mlp::init(
            "id",
            &[3],
            Activation::Relu,
            Activation::Identity,
            &mut tree.stream(StreamTag::EncoderInit, 0),
        );
        assert_eq!(m.param_count(), 0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap());
        let bound = m.bind(&mut tape, true);
        let y = m.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn param_count_matches_closed_form() {
        let tree = SeedTree::new(9);
        let m = Mlp::init(
            "m",
            &[784, 256, 16],
            Activation::Relu,
            Activation::Identity,
            &mut tree.stream(StreamTag::DecoderInit, 0),
        );
        assert_eq!(m.param_count(), 784 * 256 + 256 + 256 * 16 + 16);
    }

    #[test]
    fn hidden_activation_applies_to_all_but_last_layer() {
        // Single layer: only the output activation fires, so values may go negative
        // under Identity even with Relu hidden.
        let tree = SeedTree::new(5);
        let m = Mlp::init(
            "m",
            &[2, 2],
            Activation::Relu,
            Activation::Identity,
            &mut tree.stream(StreamTag::SamplerInit, 0),
        );
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![-10.0, -10.0]]).unwrap());
        let bound = m.bind(&mut tape, false);
        let y = m.forward(&mut tape, &bound, x).unwrap();
        assert!(tape.value(y).data().iter().any(|&v| v < 0.0));
    }

    #[test]
    fn set_grad_rejects_shape_mismatch() {
        let mut p = Param::new("p", Tensor::zeros(vec![2, 2]));
        assert!(p.set_grad(Tensor::zeros(vec![2])).is_err());
        assert!(p.set_grad(Tensor::zeros(vec![2, 2])).is_ok());
        assert!(p.take_grad().is_some());
        assert!(p.grad().is_none());
    }
}
