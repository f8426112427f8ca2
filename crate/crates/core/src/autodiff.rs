//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every op applied to its [`Var`] handles. Nodes are
//! appended in evaluation order, so the node list is already a topological
//! order and [`Tape::backward`] walks it once in reverse.

use crate::tensor::{
    broadcast_kind, matmul_dims, matmul_lhs_t, matmul_raw, matmul_rhs_t, zip_broadcast, Broadcast,
    Tensor, TensorError,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a 2-D convolution lowered to a matrix contraction.
///
/// Inputs are rows of `in_h * in_w * in_c` values in height-width-channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }

    pub fn in_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    /// Source offset within an input row for each (output pixel, patch entry), or
    /// `None` for zero padding.
    fn source_index(&self, oy: usize, ox: usize, ky: usize, kx: usize, c: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.in_h as isize || x >= self.in_w as isize {
            return None;
        }
        Some((y as usize * self.in_w + x as usize) * self.in_c + c)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    RowSqNorm(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    LogSigmoid(Var),
    LipSwish(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Reshape(Var),
    Im2Col(Var, ConvGeometry),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar root with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros if the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// `x * sigmoid(x) / 1.1`.
pub fn lipswish(x: f64) -> f64 {
    x * sigmoid(x) / 1.1
}

fn lipswish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    (s + x * s * (1.0 - s)) / 1.1
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, TensorError> {
        let value = zip_broadcast(name, self.value(a), self.value(b), f)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    /// `x * w + bias`, with `x: [n, k]`, `w: [k, o]`, `bias: [1, o]`.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Result<Var, TensorError> {
        let (n, k, o) = matmul_dims(self.value(x), self.value(w))?;
        if self.value(bias).shape() != [1, o] {
            return Err(TensorError::ShapeMismatch {
                op: "affine",
                lhs: vec![1, o],
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let mut out = matmul_raw(self.value(x).data(), self.value(w).data(), n, k, o);
        let b = self.value(bias).data();
        for row in out.chunks_exact_mut(o) {
            for (v, bj) in row.iter_mut().zip(b) {
                *v += bj;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(bias);
        let value = Tensor::new(vec![n, o], out)?;
        Ok(self.push(value, Op::Affine(x, w, bias), needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let needs = self.needs(a);
        self.push(value, Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        let needs = self.needs(a);
        self.push(value, Op::Mean(a), needs)
    }

    /// Sums each row: `[n, c] -> [n, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.rows();
        let data = t.data().chunks_exact(t.cols()).map(|r| r.iter().sum()).collect();
        let value = Tensor::new(vec![n, 1], data).expect("row_sum shape");
        let needs = self.needs(a);
        self.push(value, Op::RowSum(a), needs)
    }

    /// Squared Euclidean norm of each row: `[n, c] -> [n, 1]`.
    pub fn row_sq_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.rows();
        let data = t
            .data()
            .chunks_exact(t.cols())
            .map(|r| r.iter().map(|v| v * v).sum())
            .collect();
        let value = Tensor::new(vec![n, 1], data).expect("row_sq_norm shape");
        let needs = self.needs(a);
        self.push(value, Op::RowSqNorm(a), needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogSigmoid(a), log_sigmoid)
    }

    pub fn lipswish(&mut self, a: Var) -> Var {
        self.unary(a, Op::LipSwish(a), lipswish)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |v| v * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |v| v + c)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let value = self.value(a).reshape(shape)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), needs))
    }

    /// Lowers a convolution input `[n, in_len]` to patches
    /// `[n * out_h * out_w, patch_len]`; a matmul with `[patch_len, out_c]`
    /// weights then yields `[n * out_h * out_w, out_c]`, which reshapes to
    /// `[n, out_h * out_w * out_c]` in the same height-width-channel layout.
    pub fn im2col(&mut self, a: Var, geom: ConvGeometry) -> Result<Var, TensorError> {
        let t = self.value(a);
        if t.rank() != 2 || t.cols() != geom.in_len() || geom.kernel == 0 || geom.stride == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "im2col",
                lhs: t.shape().to_vec(),
                rhs: vec![geom.in_len()],
            });
        }
        let (oh, ow, pl) = (geom.out_h(), geom.out_w(), geom.patch_len());
        let n = t.rows();
        let mut data = vec![0.0; n * oh * ow * pl];
        for (s, row) in t.data().chunks_exact(geom.in_len()).enumerate() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = ((s * oh + oy) * ow + ox) * pl;
                    let mut j = 0;
                    for ky in 0..geom.kernel {
                        for kx in 0..geom.kernel {
                            for c in 0..geom.in_c {
                                if let Some(src) = geom.source_index(oy, ox, ky, kx, c) {
                                    data[base + j] = row[src];
                                }
                                j += 1;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n * oh * ow, pl], data)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Im2Col(a, geom), needs))
    }

    /// Reverse pass from a scalar `root`. A tape supports one backward pass.
    pub fn backward(&mut self, root: Var) -> Result<Gradients, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let root_val = self.value(root);
        if root_val.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_val.shape().to_vec()));
        }
        let seed = Tensor::full(root_val.shape(), 1.0);
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Only leaves are meaningful to callers; drop intermediates eagerly.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(n.op, Op::Leaf) || !n.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Reduces a broadcast gradient back to the shape of the repeated operand.
    fn reduce_rows(g: &Tensor, target: &[usize]) -> Tensor {
        let c: usize = target.iter().product();
        let mut out = vec![0.0; c];
        for row in g.data().chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Tensor::new(target.to_vec(), out).expect("reduce_rows shape")
    }

    fn propagate(
        &self,
        i: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), TensorError> {
        let node = &self.nodes[i];
        let out = &node.value;
        let elementwise = |a: Var, f: &dyn Fn(f64, f64, f64) -> f64| {
            let x = self.value(a);
            let data = x
                .data()
                .iter()
                .zip(out.data())
                .zip(g.data())
                .map(|((&xv, &yv), &gv)| f(xv, yv, gv))
                .collect();
            Tensor::new(x.shape().to_vec(), data).expect("elementwise grad shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let av = self.value(a);
                let bv = self.value(b);
                let kind = broadcast_kind("backward", av.shape(), bv.shape())?;
                let (ga, gb) = match &node.op {
                    Op::Add(..) => (g.clone(), g.clone()),
                    Op::Sub(..) => (g.clone(), g.map(|v| -v)),
                    _ => (
                        zip_broadcast("mul", g, bv, |x, y| x * y)
                            .or_else(|_| zip_broadcast("mul", bv, g, |x, y| x * y))?,
                        zip_broadcast("mul", g, av, |x, y| x * y)
                            .or_else(|_| zip_broadcast("mul", av, g, |x, y| x * y))?,
                    ),
                };
                let (ga, gb) = match kind {
                    Broadcast::Same => (ga, gb),
                    Broadcast::RhsRows => (ga, Self::reduce_rows(&gb, bv.shape())),
                    Broadcast::LhsRows => (Self::reduce_rows(&ga, av.shape()), gb),
                };
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (n, k, o) = matmul_dims(self.value(a), self.value(b))?;
                if self.needs(a) {
                    let ga = matmul_rhs_t(g.data(), self.value(b).data(), n, k, o);
                    self.accumulate(grads, a, Tensor::new(vec![n, k], ga)?);
                }
                if self.needs(b) {
                    let gb = matmul_lhs_t(self.value(a).data(), g.data(), n, k, o);
                    self.accumulate(grads, b, Tensor::new(vec![k, o], gb)?);
                }
            }
            Op::Affine(x, w, bias) => {
                let (x, w, bias) = (*x, *w, *bias);
                let (n, k, o) = matmul_dims(self.value(x), self.value(w))?;
                if self.needs(x) {
                    let gx = matmul_rhs_t(g.data(), self.value(w).data(), n, k, o);
                    self.accumulate(grads, x, Tensor::new(vec![n, k], gx)?);
                }
                if self.needs(w) {
                    let gw = matmul_lhs_t(self.value(x).data(), g.data(), n, k, o);
                    self.accumulate(grads, w, Tensor::new(vec![k, o], gw)?);
                }
                if self.needs(bias) {
                    self.accumulate(grads, bias, Self::reduce_rows(g, &[1, o]));
                }
            }
            Op::Sum(a) => {
                let s = g.item();
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, s));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let s = g.item() / t.numel() as f64;
                let shape = t.shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, s));
            }
            Op::RowSum(a) => {
                let t = self.value(*a);
                let c = t.cols();
                let data = g.data().iter().flat_map(|&gv| std::iter::repeat_n(gv, c)).collect();
                self.accumulate(grads, *a, Tensor::new(t.shape().to_vec(), data)?);
            }
            Op::RowSqNorm(a) => {
                let t = self.value(*a);
                let c = t.cols();
                let data = t
                    .data()
                    .chunks_exact(c)
                    .zip(g.data())
                    .flat_map(|(row, &gv)| row.iter().map(move |&v| 2.0 * v * gv))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(t.shape().to_vec(), data)?);
            }
            Op::Exp(a) => {
                let ga = elementwise(*a, &|_, y, gv| y * gv);
                self.accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let ga = elementwise(*a, &|x, _, gv| gv / x);
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = elementwise(*a, &|_, y, gv| gv * (1.0 - y * y));
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = elementwise(*a, &|_, y, gv| gv * y * (1.0 - y));
                self.accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = elementwise(*a, &|x, _, gv| gv * sigmoid(x));
                self.accumulate(grads, *a, ga);
            }
            Op::LogSigmoid(a) => {
                let ga = elementwise(*a, &|x, _, gv| gv * sigmoid(-x));
                self.accumulate(grads, *a, ga);
            }
            Op::LipSwish(a) => {
                let ga = elementwise(*a, &|x, _, gv| gv * lipswish_grad(x));
                self.accumulate(grads, *a, ga);
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.reshape(shape)?);
            }
            Op::Im2Col(a, geom) => {
                let t = self.value(*a);
                let (oh, ow, pl) = (geom.out_h(), geom.out_w(), geom.patch_len());
                let mut data = vec![0.0; t.numel()];
                for s in 0..t.rows() {
                    let row = &mut data[s * geom.in_len()..(s + 1) * geom.in_len()];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let base = ((s * oh + oy) * ow + ox) * pl;
                            let mut j = 0;
                            for ky in 0..geom.kernel {
                                for kx in 0..geom.kernel {
                                    for c in 0..geom.in_c {
                                        if let Some(src) = geom.source_index(oy, ox, ky, kx, c) {
                                            row[src] += g.data()[base + j];
                                        }
                                        j += 1;
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(t.shape().to_vec(), data)?);
            }
        }
        Ok(())
    }
}
