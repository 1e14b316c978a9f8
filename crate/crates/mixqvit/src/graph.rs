//! Append-only compute tape with reverse-mode differentiation.
//!
//! Every node records its operation and inputs; `backward` walks the tape in
//! reverse exactly once, accumulating gradients in declaration order so runs
//! are bitwise reproducible.

use crate::error::{Error, Result};
use crate::quant::QuantParams;
use crate::tensor::Tensor;

pub const SQRT_2: f64 = std::f64::consts::SQRT_2;
const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

/// Arithmetic width of a forward pass. `Double` is the verification mode;
/// `Single` rounds every op result through f32 to emulate the runtime mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Double,
    Single,
}

/// Exact Gaussian-CDF GELU: x * Phi(x).
pub fn gelu_scalar(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x / SQRT_2))
}

/// d/dx of the exact GELU: Phi(x) + x * phi(x).
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / SQRT_2PI;
    phi_cdf + x * phi_pdf
}

/// Handle into a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// x: R^{N x M} plus a length-M bias broadcast over rows.
    AddRow(Var, Var),
    MulElem(Var, Var),
    Scale(Var, f64),
    /// Adds a constant tensor (no gradient into the constant).
    AddConst(Var),
    SoftmaxRows(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    /// Mean over axis 0 of an N x D input; output 1 x D.
    MeanRows(Var),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    Transpose(Var),
    /// Quantize-dequantize applied at insertion time; straight-through backward.
    FakeQuant(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

/// Gradient table keyed by tensor handle, produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub(crate) fn op(&self, idx: usize) -> &Op {
        &self.nodes[idx].op
    }

    /// A leaf holding trainable parameters (weights/biases), as opposed to a
    /// data leaf or a computed node.
    pub(crate) fn is_param_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf) && self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, mut value: Tensor, requires_grad: bool) -> Var {
        if self.precision == Precision::Single && !matches!(op, Op::Leaf) {
            value.round_to_f32();
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        if self.precision == Precision::Single {
            value.round_to_f32();
        }
        self.push(Op::Leaf, value, requires_grad)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), v, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.shape().len() != 1 || bv.len() != xv.cols() {
            return Err(Error::ShapeMismatch {
                context: "add_row",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let cols = xv.cols();
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % cols];
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Op::AddRow(x, bias), out, rg))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MulElem(a, b), v, rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        let rg = self.rg(&[x]);
        self.push(Op::Scale(x, s), v, rg)
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let v = self.value(x).add(c)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::AddConst(x), v, rg))
    }

    /// Row-wise softmax over the last axis, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = softmax_rows_value(self.value(x));
        let rg = self.rg(&[x]);
        self.push(Op::SoftmaxRows(x), v, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu_scalar);
        let rg = self.rg(&[x]);
        self.push(Op::Gelu(x), v, rg)
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if d < 2 {
            return Err(Error::InvalidArgument(
                "layernorm wants feature dim >= 2".into(),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("layernorm eps must be > 0".into()));
        }
        let gv = self.value(gamma);
        let bv = self.value(beta);
        if gv.len() != d || bv.len() != d {
            return Err(Error::ShapeMismatch {
                context: "layernorm affine",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let v = layernorm_value(xv, gv, bv, eps);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, v, rg))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                out[c] += xv.at(r, c);
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let rg = self.rg(&[x]);
        self.push(
            Op::MeanRows(x),
            Tensor::new(vec![1, d], out).expect("shape"),
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        if start + len > d {
            return Err(Error::InvalidArgument(format!(
                "slice_cols [{start}, {}) out of {d} columns",
                start + len
            )));
        }
        let mut out = vec![0.0; n * len];
        for r in 0..n {
            out[r * len..(r + 1) * len]
                .copy_from_slice(&xv.data()[r * d + start..r * d + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Op::SliceCols { x, start, len },
            Tensor::new(vec![n, len], out).expect("shape"),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols of nothing".into()));
        }
        let n = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = vec![0.0; n * total];
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != n {
                return Err(Error::ShapeMismatch {
                    context: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
            let w = pv.cols();
            for r in 0..n {
                out[r * total + off..r * total + off + w]
                    .copy_from_slice(&pv.data()[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::new(vec![n, total], out).expect("shape"),
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Transpose(x), v, rg))
    }

    /// Insert a fake-quantization node; the value is quantize-dequantize of the
    /// input and the backward rule is straight-through.
    pub fn fake_quant(&mut self, x: Var, params: &QuantParams) -> Result<Var> {
        let v = params.fake_quant(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::FakeQuant(x), v, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(Op::Sum(x), v, rg)
    }

    /// Cross-entropy of a 1 x C logits row against an integer label.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.cols();
        if label >= c {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        let max = lv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lv.data().iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        let v = Tensor::scalar(lse - lv.data()[label]);
        let rg = self.rg(&[logits]);
        Ok(self.push(Op::CrossEntropy { logits, label }, v, rg))
    }

    /// Reverse pass seeded at `out`. The gradient table holds
    /// d(seed . out)/d(node) for every node on a requires_grad path.
    pub fn backward(&mut self, out: Var, seed: &Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(out).shape() {
            return Err(Error::ShapeMismatch {
                context: "backward seed",
                lhs: seed.shape().to_vec(),
                rhs: self.value(out).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed.clone());

        for idx in (0..=out.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].requires_grad && !matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let op = self.nodes[idx].op.clone();
            match &op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.value(*b).transpose()?)?;
                    let gb = self.value(*a).transpose()?.matmul(&g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.clone())?;
                }
                Op::AddRow(x, bias) => {
                    let cols = self.value(*x).cols();
                    let mut gb = vec![0.0; cols];
                    for (i, &v) in g.data().iter().enumerate() {
                        gb[i % cols] += v;
                    }
                    accumulate(&mut grads, *x, g.clone())?;
                    accumulate(&mut grads, *bias, Tensor::vector(gb))?;
                }
                Op::MulElem(a, b) => {
                    let ga = g.hadamard(self.value(*b))?;
                    let gb = g.hadamard(self.value(*a))?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Scale(x, s) => {
                    accumulate(&mut grads, *x, g.scale(*s))?;
                }
                Op::AddConst(x) => {
                    accumulate(&mut grads, *x, g.clone())?;
                }
                Op::SoftmaxRows(x) => {
                    let y = &self.nodes[idx].value;
                    let (n, d) = (y.rows(), y.cols());
                    let mut gx = Tensor::zeros(y.shape().to_vec());
                    for r in 0..n {
                        let mut dot = 0.0;
                        for c in 0..d {
                            dot += g.at(r, c) * y.at(r, c);
                        }
                        for c in 0..d {
                            gx.set(r, c, y.at(r, c) * (g.at(r, c) - dot));
                        }
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g.clone();
                    for (o, &xi) in gx.data_mut().iter_mut().zip(xv.data()) {
                        *o *= gelu_grad_scalar(xi);
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (gx, gg, gb) =
                        layernorm_backward(self.value(*x), self.value(*gamma), &g, *eps);
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *gamma, gg)?;
                    accumulate(&mut grads, *beta, gb)?;
                }
                Op::MeanRows(x) => {
                    let xv = self.value(*x);
                    let (n, d) = (xv.rows(), xv.cols());
                    let mut gx = Tensor::zeros(xv.shape().to_vec());
                    for r in 0..n {
                        for c in 0..d {
                            gx.set(r, c, g.data()[c] / n as f64);
                        }
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::SliceCols { x, start, len } => {
                    let xv = self.value(*x);
                    let n = xv.rows();
                    let mut gx = Tensor::zeros(xv.shape().to_vec());
                    for r in 0..n {
                        for c in 0..*len {
                            gx.set(r, start + c, g.at(r, c));
                        }
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let n = self.value(p).rows();
                        let mut gp = Tensor::zeros(vec![n, w]);
                        for r in 0..n {
                            for c in 0..w {
                                gp.set(r, c, g.at(r, off + c));
                            }
                        }
                        accumulate(&mut grads, p, gp)?;
                        off += w;
                    }
                }
                Op::Transpose(x) => {
                    accumulate(&mut grads, *x, g.transpose()?)?;
                }
                Op::FakeQuant(x) => {
                    accumulate(&mut grads, *x, g.clone())?;
                }
                Op::Sum(x) => {
                    let s = g.data()[0];
                    let gx = Tensor::filled(self.value(*x).shape().to_vec(), s);
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::CrossEntropy { logits, label } => {
                    let s = g.data()[0];
                    let mut gx = softmax_rows_value(self.value(*logits));
                    gx.data_mut()[*label] -= 1.0;
                    accumulate(&mut grads, *logits, gx.scale(s))?;
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => {
            *existing = existing.add(&g)?;
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

pub fn softmax_rows_value(x: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut out = x.clone();
    for r in 0..n {
        let row = &mut out.data_mut()[r * d..(r + 1) * d];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn layernorm_value(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut out = x.clone();
    for r in 0..n {
        let row = &mut out.data_mut()[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (c, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gamma.data()[c] + beta.data()[c];
        }
    }
    out
}

fn layernorm_backward(x: &Tensor, gamma: &Tensor, g: &Tensor, eps: f64) -> (Tensor, Tensor, Tensor) {
    let (n, d) = (x.rows(), x.cols());
    let mut gx = Tensor::zeros(x.shape().to_vec());
    let mut gg = vec![0.0; d];
    let mut gb = vec![0.0; d];
    for r in 0..n {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
        let mut sum_gy = 0.0;
        let mut sum_gy_xhat = 0.0;
        for c in 0..d {
            let gyi = g.at(r, c) * gamma.data()[c];
            sum_gy += gyi;
            sum_gy_xhat += gyi * xhat[c];
            gg[c] += g.at(r, c) * xhat[c];
            gb[c] += g.at(r, c);
        }
        let dn = d as f64;
        for c in 0..d {
            let gyi = g.at(r, c) * gamma.data()[c];
            gx.set(
                r,
                c,
                inv * (gyi - sum_gy / dn - xhat[c] * sum_gy_xhat / dn),
            );
        }
    }
    (gx, Tensor::vector(gg), Tensor::vector(gb))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff_grad(
        f: &dyn Fn(&Tensor) -> f64,
        x: &Tensor,
        step: f64,
    ) -> Tensor {
        let mut g = Tensor::zeros(x.shape().to_vec());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += step;
            let mut xm = x.clone();
            xm.data_mut()[i] -= step;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * step);
        }
        g
    }

    fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    fn lcg_fill(seed: u64, n: usize) -> Vec<f64> {
        // tiny deterministic generator for test inputs
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn identity_graph_backward_is_one() {
        let mut g = Graph::new(Precision::Double);
        let x = g.leaf(Tensor::scalar(3.0), true);
        let grads = g.backward(x, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn quadratic_backward() {
        // y = sum(x . x), x = [1, 2] -> grad [2, 4]
        let mut g = Graph::new(Precision::Double);
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let xx = g.mul_elem(x, x).unwrap();
        let y = g.sum(xx);
        let grads = g.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_seed_shape_mismatch_is_error() {
        let mut g = Graph::new(Precision::Double);
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(g.backward(x, &Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a0 = Tensor::matrix(3, 4, lcg_fill(7, 12)).unwrap();
        let b0 = Tensor::matrix(4, 2, lcg_fill(13, 8)).unwrap();

        let run = |a: &Tensor, b: &Tensor| -> f64 {
            let mut g = Graph::new(Precision::Double);
            let va = g.leaf(a.clone(), true);
            let vb = g.leaf(b.clone(), true);
            let m = g.matmul(va, vb).unwrap();
            let s = g.sum(m);
            g.value(s).data()[0]
        };

        let mut g = Graph::new(Precision::Double);
        let va = g.leaf(a0.clone(), true);
        let vb = g.leaf(b0.clone(), true);
        let m = g.matmul(va, vb).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s, &Tensor::scalar(1.0)).unwrap();

        let fa = finite_diff_grad(&|a| run(a, &b0), &a0, 1e-5);
        let fb = finite_diff_grad(&|b| run(&a0, b), &b0, 1e-5);
        assert!(max_rel_err(grads.get(va).unwrap(), &fa) <= 1e-6);
        assert!(max_rel_err(grads.get(vb).unwrap(), &fb) <= 1e-6);
    }

    #[test]
    fn softmax_symmetry_and_saturation() {
        let mut g = Graph::new(Precision::Double);
        let x = g.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(), false);
        let y = g.softmax_rows(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x2 = g.leaf(Tensor::matrix(1, 2, vec![1000.0, 0.0]).unwrap(), false);
        let y2 = g.softmax_rows(x2);
        assert!((g.value(y2).data()[0] - 1.0).abs() < 1e-12);
        assert!(g.value(y2).data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_independent_scalar_oracle() {
        // independent evaluation without the max-subtraction stabilization
        let x = [1.0f64, 2.0, 3.0];
        let raw: Vec<f64> = x.iter().map(|&v| v.exp()).collect();
        let s: f64 = raw.iter().sum();
        let expect: Vec<f64> = raw.iter().map(|&v| v / s).collect();

        let mut g = Graph::new(Precision::Double);
        let vx = g.leaf(Tensor::matrix(1, 3, x.to_vec()).unwrap(), false);
        let y = g.softmax_rows(vx);
        for (a, e) in g.value(y).data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let x = Tensor::matrix(4, 5, lcg_fill(99, 20)).unwrap();
        let mut g = Graph::new(Precision::Double);
        let vx = g.leaf(x.clone(), false);
        let y = g.softmax_rows(vx);
        for r in 0..4 {
            let sum: f64 = (0..5).map(|c| g.value(y).at(r, c)).sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
        // add a per-row constant
        let mut shifted = x.clone();
        for r in 0..4 {
            for c in 0..5 {
                let v = shifted.at(r, c) + (r as f64 + 1.0) * 3.7;
                shifted.set(r, c, v);
            }
        }
        let vs = g.leaf(shifted, false);
        let ys = g.softmax_rows(vs);
        for i in 0..20 {
            assert!((g.value(y).data()[i] - g.value(ys).data()[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn gelu_values_and_gradient() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-9);

        // derivative at 0.5 vs central finite difference
        let h = 1e-6;
        let fd = (gelu_scalar(0.5 + h) - gelu_scalar(0.5 - h)) / (2.0 * h);
        let an = gelu_grad_scalar(0.5);
        assert!((fd - an).abs() / an.abs() <= 1e-6);
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let mut g = Graph::new(Precision::Double);
        let x = g.leaf(Tensor::matrix(1, 4, vec![3.0; 4]).unwrap(), false);
        let gamma = g.leaf(Tensor::vector(vec![1.0; 4]), false);
        let beta = g.leaf(Tensor::vector(vec![0.0; 4]), false);
        let y = g.layernorm(x, gamma, beta, 1e-6).unwrap();
        for &v in g.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layernorm_two_point_standardization() {
        let mut g = Graph::new(Precision::Double);
        let x = g.leaf(Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap(), false);
        let gamma = g.leaf(Tensor::vector(vec![1.0, 1.0]), false);
        let beta = g.leaf(Tensor::vector(vec![0.0, 0.0]), false);
        let y = g.layernorm(x, gamma, beta, 1e-12).unwrap();
        assert!((g.value(y).data()[0] + 1.0).abs() < 1e-6);
        assert!((g.value(y).data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layernorm_gradient_matches_finite_differences() {
        let x0 = Tensor::matrix(4, 8, lcg_fill(21, 32)).unwrap();
        let gamma0 = Tensor::vector(lcg_fill(22, 8).iter().map(|v| v + 1.5).collect());
        let beta0 = Tensor::vector(lcg_fill(23, 8));

        let run = |x: &Tensor, ga: &Tensor, be: &Tensor| -> f64 {
            let mut g = Graph::new(Precision::Double);
            let vx = g.leaf(x.clone(), true);
            let vg = g.leaf(ga.clone(), true);
            let vb = g.leaf(be.clone(), true);
            let y = g.layernorm(vx, vg, vb, 1e-6).unwrap();
            // weighted sum so the gradient is non-uniform
            let w = g.leaf(
                Tensor::matrix(4, 8, lcg_fill(55, 32)).unwrap(),
                false,
            );
            let p = g.mul_elem(y, w).unwrap();
            let s = g.sum(p);
            g.value(s).data()[0]
        };

        let mut g = Graph::new(Precision::Double);
        let vx = g.leaf(x0.clone(), true);
        let vg = g.leaf(gamma0.clone(), true);
        let vb = g.leaf(beta0.clone(), true);
        let y = g.layernorm(vx, vg, vb, 1e-6).unwrap();
        let w = g.leaf(Tensor::matrix(4, 8, lcg_fill(55, 32)).unwrap(), false);
        let p = g.mul_elem(y, w).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s, &Tensor::scalar(1.0)).unwrap();

        let fx = finite_diff_grad(&|x| run(x, &gamma0, &beta0), &x0, 1e-5);
        let fg = finite_diff_grad(&|ga| run(&x0, ga, &beta0), &gamma0, 1e-5);
        let fb = finite_diff_grad(&|be| run(&x0, &gamma0, be), &beta0, 1e-5);
        assert!(max_rel_err(grads.get(vx).unwrap(), &fx) <= 1e-5);
        assert!(max_rel_err(grads.get(vg).unwrap(), &fg) <= 1e-5);
        assert!(max_rel_err(grads.get(vb).unwrap(), &fb) <= 1e-5);
    }

    #[test]
    fn rerun_is_bitwise_identical() {
        let x = Tensor::matrix(3, 3, lcg_fill(5, 9)).unwrap();
        let run = || {
            let mut g = Graph::new(Precision::Double);
            let vx = g.leaf(x.clone(), false);
            let s = g.softmax_rows(vx);
            let ge = g.gelu(s);
            let m = g.matmul(ge, vx).unwrap();
            g.value(m).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::new(Precision::Double);
        let logits = g.leaf(Tensor::matrix(1, 3, vec![0.2, -1.0, 0.5]).unwrap(), true);
        let l = g.cross_entropy(logits, 2).unwrap();
        let grads = g.backward(l, &Tensor::scalar(1.0)).unwrap();
        let sm = softmax_rows_value(&Tensor::matrix(1, 3, vec![0.2, -1.0, 0.5]).unwrap());
        let gl = grads.get(logits).unwrap();
        assert!((gl.data()[0] - sm.data()[0]).abs() < 1e-12);
        assert!((gl.data()[2] - (sm.data()[2] - 1.0)).abs() < 1e-12);
    }
}
