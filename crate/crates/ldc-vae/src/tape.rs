//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A `Tape` records every operation in creation order; `Var` handles index
//! into it. Creation order is a topological order, so one reverse sweep
//! propagates gradients. Two entry points exist: `backward` seeds a scalar
//! loss with 1, and `backward_with_injected_grad` seeds an arbitrary
//! interior node with a caller-supplied gradient, which is how externally
//! computed update directions enter a network without being differentiated
//! through.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a specific tape. Only valid for the tape that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    /// x[B,I] * w[I,O] + b[O], row-wise.
    Affine { x: Var, w: Var, b: Var },
    Relu { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Exp { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddConst { x: Var },
    /// Rank-2 concatenation along the feature axis.
    Concat { a: Var, b: Var },
    /// [B,d] -> [B], sum over features.
    RowSum { x: Var },
    /// Any shape -> scalar, sum over all elements.
    Sum { x: Var },
    /// Per-row sum of squared differences, [B,D]x[B,D] -> [B].
    MsePerRow { a: Var, b: Var },
    /// Mean over rows of the per-row sums, [B,D]x[B,D] -> scalar.
    MseMean { a: Var, b: Var },
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// How `mse` reduces the per-element squared differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// One sum per row: output shape [B].
    SumPerRow,
    /// Mean over rows of the per-row sums: scalar output.
    Mean,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input node. Gradients flow into it only if `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a non-trainable input node.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies a node's value into a fresh constant leaf, cutting the
    /// gradient path at that point.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient buffer of a node as populated by the most recent backward pass.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    /// Gradient of a node as a tensor shaped like its value.
    pub fn grad_tensor(&self, v: Var) -> Result<Tensor> {
        Tensor::new(self.nodes[v.0].value.shape().to_vec(), self.nodes[v.0].grad.clone())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let grad = vec![0.0; value.numel()];
        self.nodes.push(Node {
            value,
            grad,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op, requires_grad: bool, context: &str) -> Result<Var> {
        value.assert_finite(context)?;
        Ok(self.push(value, op, requires_grad))
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, a: Var, b: Var, context: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                context,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    /// x[B,I] * w[I,O] + b[O] -> [B,O].
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.shape().len() != 2 || wv.shape().len() != 2 || bv.shape().len() != 1 {
            return Err(Error::shape("affine", "expected x[B,I], w[I,O], b[O]".to_string()));
        }
        let (bsz, i) = (xv.shape()[0], xv.shape()[1]);
        let (wi, o) = (wv.shape()[0], wv.shape()[1]);
        if i != wi || bv.shape()[0] != o {
            return Err(Error::shape(
                "affine",
                format!("x[{bsz},{i}], w[{wi},{o}], b[{}]", bv.shape()[0]),
            ));
        }
        let mut out = vec![0.0; bsz * o];
        for r in 0..bsz {
            let xr = &xv.data()[r * i..(r + 1) * i];
            let or = &mut out[r * o..(r + 1) * o];
            or.copy_from_slice(bv.data());
            for (k, &xk) in xr.iter().enumerate() {
                let wr = &wv.data()[k * o..(k + 1) * o];
                for (oj, &wkj) in or.iter_mut().zip(wr) {
                    *oj += xk * wkj;
                }
            }
        }
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        self.push_checked(Tensor::new(vec![bsz, o], out)?, Op::Affine { x, w, b }, req, "affine")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let req = self.requires(x);
        self.push_checked(t, Op::Relu { x }, req, "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let req = self.requires(x);
        self.push_checked(t, Op::Tanh { x }, req, "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let req = self.requires(x);
        self.push_checked(t, Op::Sigmoid { x }, req, "sigmoid")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v.exp()).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let req = self.requires(x);
        self.push_checked(t, Op::Exp { x }, req, "exp")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let req = self.requires(a) || self.requires(b);
        self.push_checked(t, Op::Add { a, b }, req, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let req = self.requires(a) || self.requires(b);
        self.push_checked(t, Op::Sub { a, b }, req, "sub")
    }

    /// Elementwise product. The two arguments may be the same node.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let req = self.requires(a) || self.requires(b);
        self.push_checked(t, Op::Mul { a, b }, req, "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let req = self.requires(x);
        self.push_checked(t, Op::Scale { x, c }, req, "scale")
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v + c).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let req = self.requires(x);
        self.push_checked(t, Op::AddConst { x }, req, "add_const")
    }

    /// [B,p] ++ [B,q] -> [B,p+q] along the feature axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[0] != bv.shape()[0] {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let (bsz, p, q) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = Vec::with_capacity(bsz * (p + q));
        for r in 0..bsz {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let t = Tensor::new(vec![bsz, p + q], out)?;
        let req = self.requires(a) || self.requires(b);
        self.push_checked(t, Op::Concat { a, b }, req, "concat")
    }

    /// [B,d] -> [B].
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::shape("row_sum", format!("{:?}", xv.shape())));
        }
        let out: Vec<f64> = (0..xv.rows()).map(|r| xv.row(r).iter().sum()).collect();
        let t = Tensor::new(vec![xv.rows()], out)?;
        let req = self.requires(x);
        self.push_checked(t, Op::RowSum { x }, req, "row_sum")
    }

    /// Sum of all elements -> scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let t = Tensor::scalar(s)?;
        let req = self.requires(x);
        self.push_checked(t, Op::Sum { x }, req, "sum")
    }

    /// Squared-difference loss between same-shape rank-2 tensors.
    pub fn mse(&mut self, a: Var, b: Var, reduction: Reduction) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 {
            return Err(Error::shape("mse", format!("{:?}", av.shape())));
        }
        let rows = av.rows();
        let per_row: Vec<f64> = (0..rows)
            .map(|r| {
                av.row(r)
                    .iter()
                    .zip(bv.row(r))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum()
            })
            .collect();
        let req = self.requires(a) || self.requires(b);
        match reduction {
            Reduction::SumPerRow => {
                let t = Tensor::new(vec![rows], per_row)?;
                self.push_checked(t, Op::MsePerRow { a, b }, req, "mse")
            }
            Reduction::Mean => {
                let t = Tensor::scalar(per_row.iter().sum::<f64>() / rows as f64)?;
                self.push_checked(t, Op::MseMean { a, b }, req, "mse")
            }
        }
    }

    /// Seeds a scalar loss with gradient 1 and sweeps the tape backward.
    /// The loss must be scalar and connected to at least one trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_on_tape(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.requires(loss) {
            return Err(Error::Contract(
                "backward: loss is detached from every trainable leaf".to_string(),
            ));
        }
        self.run_backward(loss, &[1.0])
    }

    /// Sweeps the tape backward as if the gradient of some downstream loss
    /// with respect to `node` were exactly `injected`.
    pub fn backward_with_injected_grad(&mut self, node: Var, injected: &Tensor) -> Result<()> {
        self.check_on_tape(node)?;
        if injected.shape() != self.value(node).shape() {
            return Err(Error::shape(
                "backward_with_injected_grad",
                format!("node {:?} vs injected {:?}", self.value(node).shape(), injected.shape()),
            ));
        }
        injected.assert_finite("backward_with_injected_grad: injected gradient")?;
        self.run_backward(node, injected.data())
    }

    fn check_on_tape(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "node {} is not on this tape (len {})",
                v.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    fn run_backward(&mut self, seed: Var, seed_grad: &[f64]) -> Result<()> {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[seed.0].grad.copy_from_slice(seed_grad);

        for i in (0..=seed.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let go = self.nodes[i].grad.clone();
            if go.iter().all(|&g| g == 0.0) {
                continue;
            }
            match self.nodes[i].op {
                Op::Leaf => {}
                Op::Affine { x, w, b } => {
                    let (bsz, icols) = {
                        let xv = self.value(x);
                        (xv.shape()[0], xv.shape()[1])
                    };
                    let o = self.value(w).shape()[1];
                    if self.requires(x) {
                        // dx[r,k] = sum_j go[r,j] * w[k,j]
                        let mut dx = vec![0.0; bsz * icols];
                        let wv = self.value(w).data();
                        for r in 0..bsz {
                            for k in 0..icols {
                                let wr = &wv[k * o..(k + 1) * o];
                                dx[r * icols + k] = go[r * o..(r + 1) * o]
                                    .iter()
                                    .zip(wr)
                                    .map(|(g, w)| g * w)
                                    .sum();
                            }
                        }
                        self.accumulate(x, &dx);
                    }
                    if self.requires(w) {
                        // dw[k,j] = sum_r x[r,k] * go[r,j]
                        let mut dw = vec![0.0; icols * o];
                        let xv = self.value(x).data();
                        for r in 0..bsz {
                            let gr = &go[r * o..(r + 1) * o];
                            for k in 0..icols {
                                let xk = xv[r * icols + k];
                                let dwr = &mut dw[k * o..(k + 1) * o];
                                for (d, &g) in dwr.iter_mut().zip(gr) {
                                    *d += xk * g;
                                }
                            }
                        }
                        self.accumulate(w, &dw);
                    }
                    if self.requires(b) {
                        let mut db = vec![0.0; o];
                        for r in 0..bsz {
                            for (d, &g) in db.iter_mut().zip(&go[r * o..(r + 1) * o]) {
                                *d += g;
                            }
                        }
                        self.accumulate(b, &db);
                    }
                }
                Op::Relu { x } => {
                    if self.requires(x) {
                        // Subgradient 0 at the kink.
                        let dx: Vec<f64> = self
                            .value(x)
                            .data()
                            .iter()
                            .zip(&go)
                            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                            .collect();
                        self.accumulate(x, &dx);
                    }
                }
                Op::Tanh { x } => {
                    if self.requires(x) {
                        let dx: Vec<f64> = self.nodes[i]
                            .value
                            .data()
                            .iter()
                            .zip(&go)
                            .map(|(&y, &g)| g * (1.0 - y * y))
                            .collect();
                        self.accumulate(x, &dx);
                    }
                }
                Op::Sigmoid { x } => {
                    if self.requires(x) {
                        let dx: Vec<f64> = self.nodes[i]
                            .value
                            .data()
                            .iter()
                            .zip(&go)
                            .map(|(&y, &g)| g * y * (1.0 - y))
                            .collect();
                        self.accumulate(x, &dx);
                    }
                }
                Op::Exp { x } => {
                    if self.requires(x) {
                        let dx: Vec<f64> = self.nodes[i]
                            .value
                            .data()
                            .iter()
                            .zip(&go)
                            .map(|(&y, &g)| g * y)
                            .collect();
                        self.accumulate(x, &dx);
                    }
                }
                Op::Add { a, b } => {
                    if self.requires(a) {
                        self.accumulate(a, &go);
                    }
                    if self.requires(b) {
                        self.accumulate(b, &go);
                    }
                }
                Op::Sub { a, b } => {
                    if self.requires(a) {
                        self.accumulate(a, &go);
                    }
                    if self.requires(b) {
                        let neg: Vec<f64> = go.iter().map(|g| -g).collect();
                        self.accumulate(b, &neg);
                    }
                }
                Op::Mul { a, b } => {
                    if self.requires(a) {
                        let da: Vec<f64> = go
                            .iter()
                            .zip(self.value(b).data())
                            .map(|(g, y)| g * y)
                            .collect();
                        self.accumulate(a, &da);
                    }
                    if self.requires(b) {
                        let db: Vec<f64> = go
                            .iter()
                            .zip(self.value(a).data())
                            .map(|(g, x)| g * x)
                            .collect();
                        self.accumulate(b, &db);
                    }
                }
                Op::Scale { x, c } => {
                    if self.requires(x) {
                        let dx: Vec<f64> = go.iter().map(|g| g * c).collect();
                        self.accumulate(x, &dx);
                    }
                }
                Op::AddConst { x } => {
                    if self.requires(x) {
                        self.accumulate(x, &go);
                    }
                }
                Op::Concat { a, b } => {
                    let (bsz, p, q) = {
                        let (av, bv) = (self.value(a), self.value(b));
                        (av.shape()[0], av.shape()[1], bv.shape()[1])
                    };
                    if self.requires(a) {
                        let mut da = vec![0.0; bsz * p];
                        for r in 0..bsz {
                            da[r * p..(r + 1) * p].copy_from_slice(&go[r * (p + q)..r * (p + q) + p]);
                        }
                        self.accumulate(a, &da);
                    }
                    if self.requires(b) {
                        let mut db = vec![0.0; bsz * q];
                        for r in 0..bsz {
                            db[r * q..(r + 1) * q]
                                .copy_from_slice(&go[r * (p + q) + p..(r + 1) * (p + q)]);
                        }
                        self.accumulate(b, &db);
                    }
                }
                Op::RowSum { x } => {
                    if self.requires(x) {
                        let d = self.value(x).shape()[1];
                        let mut dx = vec![0.0; self.value(x).numel()];
                        for (r, &g) in go.iter().enumerate() {
                            dx[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = g);
                        }
                        self.accumulate(x, &dx);
                    }
                }
                Op::Sum { x } => {
                    if self.requires(x) {
                        let dx = vec![go[0]; self.value(x).numel()];
                        self.accumulate(x, &dx);
                    }
                }
                Op::MsePerRow { a, b } => {
                    let diff_grad = |av: &Tensor, bv: &Tensor| -> Vec<f64> {
                        let d = av.shape()[1];
                        let mut out = vec![0.0; av.numel()];
                        for r in 0..av.rows() {
                            let g = go[r];
                            for c in 0..d {
                                out[r * d + c] = 2.0 * g * (av.row(r)[c] - bv.row(r)[c]);
                            }
                        }
                        out
                    };
                    if self.requires(a) {
                        let da = diff_grad(self.value(a), self.value(b));
                        self.accumulate(a, &da);
                    }
                    if self.requires(b) {
                        let db: Vec<f64> = diff_grad(self.value(a), self.value(b))
                            .iter()
                            .map(|v| -v)
                            .collect();
                        self.accumulate(b, &db);
                    }
                }
                Op::MseMean { a, b } => {
                    let g = go[0];
                    let rows = self.value(a).rows() as f64;
                    let make = |av: &Tensor, bv: &Tensor, sign: f64| -> Vec<f64> {
                        av.data()
                            .iter()
                            .zip(bv.data())
                            .map(|(x, y)| sign * 2.0 * g * (x - y) / rows)
                            .collect()
                    };
                    if self.requires(a) {
                        let da = make(self.value(a), self.value(b), 1.0);
                        self.accumulate(a, &da);
                    }
                    if self.requires(b) {
                        let db = make(self.value(a), self.value(b), -1.0);
                        self.accumulate(b, &db);
                    }
                }
            }
        }

        for (idx, n) in self.nodes.iter().enumerate() {
            if n.requires_grad && !n.grad.iter().all(|g| g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of tape node {idx}")));
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: &[f64]) {
        let g = &mut self.nodes[v.0].grad;
        debug_assert_eq!(g.len(), contribution.len());
        for (gi, ci) in g.iter_mut().zip(contribution) {
            *gi += ci;
        }
    }
}
