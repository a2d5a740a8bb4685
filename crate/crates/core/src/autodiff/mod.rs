//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! return lightweight [`Var`] handles; a node is recorded with its parents
//! only when at least one input requires a gradient, otherwise the result is
//! stored as a constant. [`Tape::backward`] walks the recorded nodes in
//! reverse construction order and accumulates `dLoss/dLeaf` into every leaf
//! created with `requires_grad = true`.
//!
//! Broadcasting is restricted to the leading batch axis: a binary operation
//! accepts either two tensors of identical shape, or a right-hand side whose
//! shape equals the left-hand side without its first dimension.
//!
//! ```
//! use ghostnet::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod kernels;
mod tensor;

use thiserror::Error;

use kernels::ConvGeom;
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("tensor shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward requires a loss that depends on a leaf with requires_grad")]
    NotDifferentiable,
    #[error("cross_entropy: label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add { lhs: Var, rhs: Var, broadcast: bool },
    Mul { lhs: Var, rhs: Var, broadcast: bool },
    MaskMul { input: Var, mask: Vec<f64> },
    Scale(Var, f64),
    Relu(Var),
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom },
    AvgPool2d(Var),
    Reshape(Var),
    Softmax(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64>, reduction: Reduction },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    /// Clears every accumulated leaf gradient.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn broadcast_rule(&self, op: &'static str, lhs: Var, rhs: Var) -> Result<bool> {
        let (a, b) = (self.shape(lhs), self.shape(rhs));
        if a == b {
            Ok(false)
        } else if a.len() == b.len() + 1 && &a[1..] == b {
            Ok(true)
        } else {
            Err(AutodiffError::ShapeMismatch {
                op,
                shapes: vec![a.to_vec(), b.to_vec()],
            })
        }
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.shape(lhs), self.shape(rhs));
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                shapes: vec![a.to_vec(), b.to_vec()],
            });
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(lhs).data(),
            false,
            self.value(rhs).data(),
            false,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(lhs, rhs), &[lhs, rhs]))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let broadcast = self.broadcast_rule("add", lhs, rhs)?;
        let b = self.value(rhs).data();
        let mut out = self.value(lhs).data().to_vec();
        for chunk in out.chunks_mut(b.len()) {
            chunk.iter_mut().zip(b).for_each(|(o, &v)| *o += v);
        }
        let value = Tensor::new(self.shape(lhs).to_vec(), out)?;
        Ok(self.push(value, Op::Add { lhs, rhs, broadcast }, &[lhs, rhs]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let broadcast = self.broadcast_rule("mul", lhs, rhs)?;
        let b = self.value(rhs).data();
        let mut out = self.value(lhs).data().to_vec();
        for chunk in out.chunks_mut(b.len()) {
            chunk.iter_mut().zip(b).for_each(|(o, &v)| *o *= v);
        }
        let value = Tensor::new(self.shape(lhs).to_vec(), out)?;
        Ok(self.push(value, Op::Mul { lhs, rhs, broadcast }, &[lhs, rhs]))
    }

    /// Multiplies by a constant mask that is either full-shape or per-sample.
    pub fn mask_mul(&mut self, input: Var, mask: &Tensor) -> Result<Var> {
        let a = self.shape(input);
        let b = mask.shape();
        let ok = a == b || (a.len() == b.len() + 1 && &a[1..] == b);
        if !ok {
            return Err(AutodiffError::ShapeMismatch {
                op: "mask_mul",
                shapes: vec![a.to_vec(), b.to_vec()],
            });
        }
        let m = mask.data();
        let mut out = self.value(input).data().to_vec();
        for chunk in out.chunks_mut(m.len()) {
            chunk.iter_mut().zip(m).for_each(|(o, &v)| *o *= v);
        }
        let value = Tensor::new(a.to_vec(), out)?;
        Ok(self.push(
            value,
            Op::MaskMul {
                input,
                mask: m.to_vec(),
            },
            &[input],
        ))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let t = self.value(input);
        let data = t.data().iter().map(|&x| x * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        self.push(value, Op::Scale(input, factor), &[input])
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let data = t.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        self.push(value, Op::Relu(input), &[input])
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    ///
    /// `input` is `[batch, in_ch, h, w]`, `kernel` is `[out_ch, in_ch, 3, 3]`
    /// and the optional `bias` is `[out_ch]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.shape(input);
        let k = self.shape(kernel);
        let bias_ok = bias.is_none_or(|b| k.len() == 4 && self.shape(b) == [k[0]]);
        if x.len() != 4 || k.len() != 4 || k[1] != x[1] || k[2] != 3 || k[3] != 3 || !bias_ok {
            let mut shapes = vec![x.to_vec(), k.to_vec()];
            if let Some(b) = bias {
                shapes.push(self.shape(b).to_vec());
            }
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                shapes,
            });
        }
        let geom = ConvGeom {
            batch: x[0],
            in_ch: x[1],
            out_ch: k[0],
            height: x[2],
            width: x[3],
        };
        let out = kernels::conv3x3_forward(
            geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![geom.batch, geom.out_ch, geom.height, geom.width], out)?;
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &parents,
        ))
    }

    /// 2x2 average pooling with stride 2 over `[batch, ch, h, w]`, even `h` and `w`.
    pub fn avgpool2d(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "avgpool2d",
                shapes: vec![s],
            });
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = p * h * w + 2 * y * w + 2 * xx;
                    out[p * oh * ow + y * ow + xx] =
                        0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        Ok(self.push(value, Op::AvgPool2d(input), &[input]))
    }

    /// `[batch, ...] -> [batch, prod(...)]`.
    pub fn flatten(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let shape = vec![t.batch_size(), t.sample_len().max(1)];
        let value = Tensor::new(shape, t.data().to_vec()).expect("element count preserved");
        self.push(value, Op::Reshape(input), &[input])
    }

    /// Reshape without moving data; element counts must agree.
    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(input), &[input]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let Some(&classes) = t.shape().last() else {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax",
                shapes: vec![t.shape().to_vec()],
            });
        };
        let mut out = vec![0.0; t.len()];
        for (row, dst) in t.data().chunks(classes).zip(out.chunks_mut(classes)) {
            kernels::softmax_row(row, dst);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(input), &[input]))
    }

    /// Softmax cross-entropy of `[batch, classes]` logits against integer labels.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        reduction: Reduction,
    ) -> Result<Var> {
        let t = self.value(logits);
        let s = t.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                shapes: vec![s.to_vec(), vec![labels.len()]],
            });
        }
        let classes = s[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(AutodiffError::LabelOutOfRange { label, classes });
        }
        let mut probs = vec![0.0; t.len()];
        let mut total = 0.0;
        for ((row, dst), &label) in t
            .data()
            .chunks(classes)
            .zip(probs.chunks_mut(classes))
            .zip(labels)
        {
            kernels::softmax_row(row, dst);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        if reduction == Reduction::Mean {
            total /= labels.len() as f64;
        }
        let value = Tensor::scalar(total);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                reduction,
            },
            &[logits],
        ))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(input), &[input])
    }

    /// Populates `dLoss/dLeaf` for every differentiable leaf.
    ///
    /// Gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(AutodiffError::NotDifferentiable);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => add_into(acc.data_mut(), &g),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
            } else {
                let node = &self.nodes[i];
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => unreachable!("leaves are handled by backward"),
            Op::MatMul(lhs, rhs) => {
                let (a, b) = (self.value(*lhs), self.value(*rhs));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                if self.wants(*lhs) {
                    let dst = slot(grads, *lhs, m * k);
                    kernels::gemm(m, n, k, g, false, b.data(), true, dst, true);
                }
                if self.wants(*rhs) {
                    let dst = slot(grads, *rhs, k * n);
                    kernels::gemm(k, m, n, a.data(), true, g, false, dst, true);
                }
            }
            Op::Add { lhs, rhs, broadcast } => {
                if self.wants(*lhs) {
                    add_into(slot(grads, *lhs, g.len()), g);
                }
                if self.wants(*rhs) {
                    let n = self.value(*rhs).len();
                    let dst = slot(grads, *rhs, n);
                    if *broadcast {
                        for chunk in g.chunks(n) {
                            add_into(dst, chunk);
                        }
                    } else {
                        add_into(dst, g);
                    }
                }
            }
            Op::Mul { lhs, rhs, broadcast } => {
                let (a, b) = (self.value(*lhs).data(), self.value(*rhs).data());
                let n = b.len();
                if self.wants(*lhs) {
                    let dst = slot(grads, *lhs, g.len());
                    for (i, (d, gv)) in dst.iter_mut().zip(g).enumerate() {
                        *d += gv * b[i % n];
                    }
                }
                if self.wants(*rhs) {
                    let dst = slot(grads, *rhs, n);
                    if *broadcast {
                        for (i, (gv, av)) in g.iter().zip(a).enumerate() {
                            dst[i % n] += gv * av;
                        }
                    } else {
                        for ((d, gv), av) in dst.iter_mut().zip(g).zip(a) {
                            *d += gv * av;
                        }
                    }
                }
            }
            Op::MaskMul { input, mask } => {
                let n = mask.len();
                let dst = slot(grads, *input, g.len());
                for (i, (d, gv)) in dst.iter_mut().zip(g).enumerate() {
                    *d += gv * mask[i % n];
                }
            }
            Op::Scale(input, factor) => {
                let dst = slot(grads, *input, g.len());
                for (d, gv) in dst.iter_mut().zip(g) {
                    *d += gv * factor;
                }
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                let dst = slot(grads, *input, g.len());
                for ((d, gv), &xv) in dst.iter_mut().zip(g).zip(x) {
                    if xv > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let mut gi = self.wants(*input).then(|| vec![0.0; x.len()]);
                let mut gk = self.wants(*kernel).then(|| vec![0.0; k.len()]);
                let mut gb = bias
                    .filter(|b| self.wants(*b))
                    .map(|_| vec![0.0; geom.out_ch]);
                kernels::conv3x3_backward(
                    *geom,
                    x.data(),
                    k.data(),
                    g,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(v) = gi {
                    add_into(slot(grads, *input, v.len()), &v);
                }
                if let Some(v) = gk {
                    add_into(slot(grads, *kernel, v.len()), &v);
                }
                if let (Some(v), Some(b)) = (gb, bias) {
                    add_into(slot(grads, *b, v.len()), &v);
                }
            }
            Op::AvgPool2d(input) => {
                let s = self.value(*input).shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let dst = slot(grads, *input, planes * h * w);
                for p in 0..planes {
                    for y in 0..oh {
                        for x in 0..ow {
                            let gv = 0.25 * g[p * oh * ow + y * ow + x];
                            let base = p * h * w + 2 * y * w + 2 * x;
                            dst[base] += gv;
                            dst[base + 1] += gv;
                            dst[base + w] += gv;
                            dst[base + w + 1] += gv;
                        }
                    }
                }
            }
            Op::Reshape(input) => add_into(slot(grads, *input, g.len()), g),
            Op::Softmax(input) => {
                let classes = *out.shape().last().expect("softmax output has an axis");
                let dst = slot(grads, *input, g.len());
                for ((d, gr), y) in dst
                    .chunks_mut(classes)
                    .zip(g.chunks(classes))
                    .zip(out.data().chunks(classes))
                {
                    let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                    for ((dv, gv), yv) in d.iter_mut().zip(gr).zip(y) {
                        *dv += yv * (gv - dot);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                reduction,
            } => {
                let classes = probs.len() / labels.len();
                let scale = match reduction {
                    Reduction::Mean => g[0] / labels.len() as f64,
                    Reduction::Sum => g[0],
                };
                let dst = slot(grads, *logits, probs.len());
                for (b, &label) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        dst[b * classes + c] += scale * (probs[b * classes + c] - onehot);
                    }
                }
            }
            Op::Sum(input) => {
                let n = self.value(*input).len();
                let dst = slot(grads, *input, n);
                dst.iter_mut().for_each(|d| *d += g[0]);
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Central finite differences of a scalar function of one tensor.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64, h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                let mut minus = x.clone();
                plus.data_mut()[i] += h;
                minus.data_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        for (a, n) in analytic.iter().zip(numeric) {
            let denom = a.abs().max(n.abs()).max(1e-6);
            assert!((a - n).abs() / denom < tol, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn relu_forward_and_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]), true);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn unit_scale_is_bit_identical() {
        let mut tape = Tape::new();
        let data = vec![0.1, -3.7e-300, 1e300, f64::MIN_POSITIVE];
        let x = tape.constant(Tensor::vector(data.clone()));
        let y = tape.scale(x, 1.0);
        let bits: Vec<u64> = tape.value(y).data().iter().map(|v| v.to_bits()).collect();
        let expected: Vec<u64> = data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, expected);
    }

    #[test]
    fn conv2d_all_ones_center_and_corner() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(vec![1, 1, 4, 4], 1.0));
        let k = tape.constant(Tensor::filled(vec![1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, k, None).unwrap();
        let out = tape.value(y).data();
        assert_eq!(out[5], 9.0);
        assert_eq!(out[0], 4.0);
        assert_eq!(out[1], 6.0);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_reset() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn softmax_cross_entropy_uniform_logits() {
        let f = |z: &Tensor| {
            let mut tape = Tape::new();
            let x = tape.constant(z.clone());
            let l = tape.cross_entropy(x, &[0], Reduction::Mean).unwrap();
            tape.value(l).item().unwrap()
        };
        let logits = t(&[1, 2], &[0.0, 0.0]);
        let mut tape = Tape::new();
        let x = tape.leaf(logits.clone(), true);
        let l = tape.cross_entropy(x, &[0], Reduction::Mean).unwrap();
        assert!((tape.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-15);
        tape.backward(l).unwrap();
        let analytic = tape.grad(x).unwrap().data().to_vec();
        assert_eq!(analytic, vec![-0.5, 0.5]);
        let numeric = numeric_grad(&logits, &f, 1e-6);
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = tape.relu(x);
        assert_eq!(
            tape.backward(y),
            Err(AutodiffError::NonScalarLoss(vec![2]))
        );
    }

    #[test]
    fn constant_inputs_record_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0]));
        let y = tape.scale(x, 2.0);
        let l = tape.sum(y);
        assert!(!tape.requires_grad(y));
        assert_eq!(tape.backward(l), Err(AutodiffError::NotDifferentiable));
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        match tape.matmul(a, b) {
            Err(AutodiffError::ShapeMismatch { op, shapes }) => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = tape.constant(Tensor::zeros(vec![2]));
        assert!(matches!(
            tape.add(a, c),
            Err(AutodiffError::ShapeMismatch { op: "add", .. })
        ));
        // Only the leading batch axis broadcasts.
        let d = tape.constant(Tensor::zeros(vec![3]));
        assert!(tape.add(a, d).is_ok());
        let e = tape.constant(Tensor::zeros(vec![1, 3]));
        assert!(tape.add(a, e).is_err());
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2]));
        assert_eq!(
            tape.cross_entropy(x, &[2], Reduction::Mean),
            Err(AutodiffError::LabelOutOfRange {
                label: 2,
                classes: 2
            })
        );
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn random(shape: &[usize], seed: &mut u64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| lcg(seed)).collect()).unwrap()
    }

    /// Per-primitive gradient checks against central differences.
    #[test]
    fn primitives_match_finite_differences() {
        let mut seed = 7;
        let x = random(&[2, 1, 4, 4], &mut seed);
        let k = random(&[2, 1, 3, 3], &mut seed);
        let bias = random(&[2], &mut seed);
        let w = random(&[8, 3], &mut seed);
        let mask = random(&[2, 4, 4], &mut seed);
        let build = |input: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let (l, _) = graph(&mut tape, input, &k, &bias, &w, &mask, false);
            tape.value(l).item().unwrap()
        };
        let mut tape = Tape::new();
        let (l, xv) = graph(&mut tape, &x, &k, &bias, &w, &mask, true);
        tape.backward(l).unwrap();
        let analytic = tape.grad(xv).unwrap().data().to_vec();
        let numeric = numeric_grad(&x, &build, 1e-6);
        assert_close(&analytic, &numeric, 1e-6);
    }

    fn graph(
        tape: &mut Tape,
        input: &Tensor,
        k: &Tensor,
        bias: &Tensor,
        w: &Tensor,
        mask: &Tensor,
        grad: bool,
    ) -> (Var, Var) {
        let x = tape.leaf(input.clone(), grad);
        let kv = tape.constant(k.clone());
        let bv = tape.constant(bias.clone());
        let c = tape.conv2d(x, kv, Some(bv)).unwrap();
        let m = tape.mask_mul(c, mask).unwrap();
        let r = tape.relu(m);
        let p = tape.avgpool2d(r).unwrap();
        let f = tape.flatten(p);
        let wv = tape.constant(w.clone());
        let z = tape.matmul(f, wv).unwrap();
        let zz = tape.mul(z, z).unwrap();
        let s = tape.scale(zz, 0.3);
        let z2 = tape.add(z, s).unwrap();
        let sm = tape.softmax(z2).unwrap();
        let ce = tape.cross_entropy(z2, &[1, 2], Reduction::Mean).unwrap();
        let smsum = tape.mul(sm, sm).unwrap();
        let extra = tape.sum(smsum);
        let both = tape.add(ce, extra).unwrap();
        (both, x)
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let mut seed = 11;
        let x = random(&[3, 2, 4, 4], &mut seed);
        let k = random(&[3, 2, 3, 3], &mut seed);
        let bias = random(&[3], &mut seed);
        let run = |kt: &Tensor, bt: &Tensor, grad: bool| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let kv = tape.leaf(kt.clone(), grad);
            let bv = tape.leaf(bt.clone(), grad);
            let c = tape.conv2d(xv, kv, Some(bv)).unwrap();
            let f = tape.flatten(c);
            let l = tape.cross_entropy(f, &[0, 5, 40], Reduction::Sum).unwrap();
            if grad {
                tape.backward(l).unwrap();
                (
                    tape.value(l).item().unwrap(),
                    tape.grad(kv).unwrap().data().to_vec(),
                    tape.grad(bv).unwrap().data().to_vec(),
                )
            } else {
                (tape.value(l).item().unwrap(), vec![], vec![])
            }
        };
        let (_, gk, gb) = run(&k, &bias, true);
        let nk = numeric_grad(&k, &|kk| run(kk, &bias, false).0, 1e-6);
        let nb = numeric_grad(&bias, &|bb| run(&k, bb, false).0, 1e-6);
        assert_close(&gk, &nk, 1e-6);
        assert_close(&gb, &nb, 1e-6);
    }

    #[test]
    fn matmul_and_broadcast_add_weight_gradients() {
        let mut seed = 3;
        let x = random(&[4, 3], &mut seed);
        let w = random(&[3, 2], &mut seed);
        let b = random(&[2], &mut seed);
        let run = |wt: &Tensor, bt: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.leaf(wt.clone(), true);
            let bv = tape.leaf(bt.clone(), true);
            let z = tape.matmul(xv, wv).unwrap();
            let y = tape.add(z, bv).unwrap();
            let m = tape.mul(y, bv).unwrap();
            let l = tape.cross_entropy(m, &[0, 1, 1, 0], Reduction::Mean).unwrap();
            tape.backward(l).unwrap();
            (
                tape.value(l).item().unwrap(),
                tape.grad(wv).unwrap().data().to_vec(),
                tape.grad(bv).unwrap().data().to_vec(),
            )
        };
        let (_, gw, gb) = run(&w, &b);
        let nw = numeric_grad(&w, &|ww| run(ww, &b).0, 1e-6);
        let nb = numeric_grad(&b, &|bb| run(&w, bb).0, 1e-6);
        assert_close(&gw, &nw, 1e-6);
        assert_close(&gb, &nb, 1e-6);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut seed = 5;
        let x0 = random(&[2, 3], &mut seed);
        let w = random(&[3, 3], &mut seed);
        let grad_of = |a: f64, b: f64| {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone(), true);
            let wv = tape.constant(w.clone());
            let z = tape.matmul(x, wv).unwrap();
            let f = tape.cross_entropy(z, &[0, 2], Reduction::Mean).unwrap();
            let r = tape.relu(z);
            let g = tape.sum(r);
            let fa = tape.scale(f, a);
            let gb = tape.scale(g, b);
            let l = tape.add(fa, gb).unwrap();
            tape.backward(l).unwrap();
            tape.grad(x).unwrap().data().to_vec()
        };
        let (a, b) = (0.7, -1.3);
        let f = grad_of(1.0, 0.0);
        let g = grad_of(0.0, 1.0);
        let combined = grad_of(a, b);
        for i in 0..combined.len() {
            assert!((combined[i] - (a * f[i] + b * g[i])).abs() < 1e-12);
        }
    }
}
