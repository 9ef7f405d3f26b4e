//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and, when
//! recording, what its backward pass needs. Gradients flow only into nodes
//! that require them: non-frozen parameters, variables created with
//! [`Tape::var`], and anything computed from those.

use super::loss::{wce_backward, wce_forward};
use super::ops::{self, ConvGeom, PoolGeom};
use super::{NnError, Parameter, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    Affine {
        x: Var,
        scale: f64,
    },
    AvgPool2 {
        x: Var,
        geom: PoolGeom,
    },
    Gap {
        x: Var,
        span: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
        d: usize,
        k: usize,
    },
    Sum(Var),
    Dot {
        x: Var,
        coeffs: Vec<f64>,
    },
    WeightedCe {
        logits: Var,
        targets: Vec<usize>,
        sample_weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records operations for [`backward`](Self::backward).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A forward-only tape; `backward` on it fails with `NoGraph`.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.recording;
        let op = if self.recording { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant input; no gradient is computed for it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Free variable whose gradient is wanted.
    pub fn var(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, p: &Parameter) -> Var {
        let mut value = p.tensor.clone();
        value.clear_grad();
        self.push(value, Op::Leaf, !p.is_frozen())
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
        stride: usize,
    ) -> Result<Var, NnError> {
        let (geom, batched) = ConvGeom::conv2d(
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
            pad,
            stride,
        )?;
        self.conv(x, w, b, geom, geom.output_shape(batched, false))
    }

    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
        stride: usize,
    ) -> Result<Var, NnError> {
        let (geom, batched) = ConvGeom::conv1d(
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
            pad,
            stride,
        )?;
        self.conv(x, w, b, geom, geom.output_shape(batched, true))
    }

    fn conv(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        shape: Vec<usize>,
    ) -> Result<Var, NnError> {
        let out = ops::conv_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv { x, w, b, geom }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), ops::relu_forward(v.data())).expect("shape");
        let rg = self.needs(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| scale * a + shift).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("shape");
        let rg = self.needs(x);
        self.push(out, Op::Affine { x, scale }, rg)
    }

    /// 2×2 average downsample over the last two axes (floor on odd sizes).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var, NnError> {
        let (geom, shape) = PoolGeom::new(self.value(x).shape())?;
        let out = ops::avg_pool2_forward(&geom, self.value(x).data());
        let rg = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::AvgPool2 { x, geom }, rg))
    }

    /// Mean over every axis after the first `keep`.
    pub fn global_avg_pool(&mut self, x: Var, keep: usize) -> Result<Var, NnError> {
        let out = ops::global_avg_pool_keep(self.value(x), keep)?;
        let span = self.value(x).numel() / out.numel();
        let rg = self.needs(x);
        Ok(self.push(out, Op::Gap { x, span }, rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let (rows, d, k, batched) = ops::linear_geom(
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        )?;
        let out = ops::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            d,
            k,
        );
        let shape = if batched { vec![rows, k] } else { vec![k] };
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b, d, k }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Scalar `Σ x_i c_i` against a constant tensor of the same shape.
    pub fn dot(&mut self, x: Var, coeffs: &Tensor) -> Result<Var, NnError> {
        let xv = self.value(x);
        if xv.shape() != coeffs.shape() {
            return Err(NnError::ShapeMismatch(format!(
                "dot of {:?} with {:?}",
                xv.shape(),
                coeffs.shape()
            )));
        }
        let s = xv
            .data()
            .iter()
            .zip(coeffs.data())
            .map(|(a, b)| a * b)
            .sum();
        let rg = self.needs(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Dot {
                x,
                coeffs: coeffs.data().to_vec(),
            },
            rg,
        ))
    }

    /// Weighted cross-entropy of (N,K) logits against class indices, with
    /// `class_weights[c]` applied to samples of class `c`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        class_weights: &[f64],
    ) -> Result<Var, NnError> {
        let lv = self.value(logits);
        let [n, k] = *lv.shape() else {
            return Err(NnError::ShapeMismatch(format!(
                "logits must be (N,K), got {:?}",
                lv.shape()
            )));
        };
        if targets.len() != n || class_weights.len() != k {
            return Err(NnError::ShapeMismatch(format!(
                "{n}x{k} logits with {} targets and {} class weights",
                targets.len(),
                class_weights.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(NnError::ShapeMismatch(format!("target {t} >= {k} classes")));
        }
        let sample_weights: Vec<f64> = targets.iter().map(|&t| class_weights[t]).collect();
        let (loss, probs) = wce_forward(lv.data(), k, targets, &sample_weights)?;
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedCe {
                logits,
                targets: targets.to_vec(),
                sample_weights,
                probs,
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Result<Grads, NnError> {
        if !self.recording {
            return Err(NnError::NoGraph);
        }
        let root = self.nodes.get(loss.0).ok_or(NnError::NoGraph)?;
        if root.value.numel() != 1 {
            return Err(NnError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !root.requires_grad {
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dout) = grads[i].take() else {
                continue;
            };
            let send =
                |v: Var, g: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                };
            match &node.op {
                Op::Leaf => {}
                Op::Conv { x, w, b, geom } => {
                    let need_params = self.needs(*w) || self.needs(*b);
                    let cg = ops::conv_backward(
                        geom,
                        self.value(*x).data(),
                        self.value(*w).data(),
                        &dout,
                        self.needs(*x),
                        need_params,
                    );
                    if let Some(dx) = cg.dx {
                        send(*x, dx, &mut grads);
                    }
                    if self.needs(*w) {
                        send(*w, cg.dw.expect("requested"), &mut grads);
                    }
                    if self.needs(*b) {
                        send(*b, cg.db.expect("requested"), &mut grads);
                    }
                }
                Op::Relu(x) => {
                    let g = ops::relu_backward(self.value(*x).data(), &dout);
                    send(*x, g, &mut grads);
                }
                Op::Affine { x, scale } => {
                    send(*x, dout.iter().map(|g| g * scale).collect(), &mut grads);
                }
                Op::AvgPool2 { x, geom } => {
                    send(*x, ops::avg_pool2_backward(geom, &dout), &mut grads);
                }
                Op::Gap { x, span } => {
                    send(*x, ops::gap_backward(&dout, *span), &mut grads);
                }
                Op::Linear { x, w, b, d, k } => {
                    let (dx, dw, db) = ops::linear_backward(
                        self.value(*x).data(),
                        self.value(*w).data(),
                        &dout,
                        *d,
                        *k,
                    );
                    if self.needs(*x) {
                        send(*x, dx, &mut grads);
                    }
                    if self.needs(*w) {
                        send(*w, dw, &mut grads);
                    }
                    if self.needs(*b) {
                        send(*b, db, &mut grads);
                    }
                }
                Op::Sum(x) => {
                    let n = self.value(*x).numel();
                    send(*x, vec![dout[0]; n], &mut grads);
                }
                Op::Dot { x, coeffs } => {
                    send(*x, coeffs.iter().map(|c| c * dout[0]).collect(), &mut grads);
                }
                Op::WeightedCe {
                    logits,
                    targets,
                    sample_weights,
                    probs,
                } => {
                    let k = self.value(*logits).shape()[1];
                    let g = wce_backward(probs, k, targets, sample_weights, dout[0]);
                    send(*logits, g, &mut grads);
                }
            }
            // Leaf gradients are the output of the pass; keep them.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(dout);
            }
        }
        Ok(Grads { grads })
    }
}
