//! Reverse-mode differentiation over a recorded computation graph.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation computes
//! its value eagerly and records its inputs; [`Graph::backward`] then walks the
//! nodes in reverse creation order, which is a valid topological order because
//! nodes can only refer to nodes created before them.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Scale-factor treatment for spectral normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaGradient {
    /// Differentiate through `sigma = u^T W v` with `u`, `v` held fixed.
    #[default]
    Estimator,
    /// Treat `sigma` as a constant.
    Detached,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    AbsMean(Var),
    ArccosClamped(Var),
    Concat(Var, Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    MatMul(Var, Var),
    AddBias(Var, Var),
    Softmax {
        input: Var,
        group: usize,
    },
    SpectralNorm {
        weight: Var,
        u: Vec<f64>,
        v: Vec<f64>,
        sigma: f64,
        lambda: f64,
        mode: SigmaGradient,
    },
    BlurDecimate {
        input: Var,
        kernel: Var,
        scale: usize,
    },
    ChannelCosine {
        a: Var,
        b: Var,
        eps: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::AbsMean(_) => "abs_mean",
            Op::ArccosClamped(_) => "arccos_clamped",
            Op::Concat(..) => "concat",
            Op::Reshape(_) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample { .. } => "upsample_bilinear",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Softmax { .. } => "softmax",
            Op::SpectralNorm { .. } => "spectral_normalize",
            Op::BlurDecimate { .. } => "degrade_spatial",
            Op::ChannelCosine { .. } => "channel_cosine",
        }
    }
}

/// A node of the graph: its value, its accumulated gradient after
/// [`Graph::backward`], and the rule that produced it.
#[derive(Debug)]
pub struct DiffNode {
    value: Tensor,
    grad: Option<Tensor>,
    label: Option<String>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<DiffNode>,
    params: Vec<(String, Var)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(DiffNode {
            value,
            grad: None,
            label: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a constant leaf; gradients reaching it are computed but unused.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Inserts a named trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].label = Some(name.to_string());
        self.params.push((name.to_string(), v));
        v
    }

    /// Names a node for diagnostics.
    pub fn label(&mut self, v: Var, name: &str) {
        self.nodes[v.0].label = Some(name.to_string());
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass; zero when `v` was unreachable.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        node.grad.clone().unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    /// Describes the first node holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find(|(_, n)| !n.value.is_finite()).map(|(i, n)| {
            match &n.label {
                Some(l) => format!("node {i} ({}, '{l}')", n.op.name()),
                None => format!("node {i} ({})", n.op.name()),
            }
        })
    }

    /// Sign pattern of every non-differentiable point the graph evaluates:
    /// inputs of `relu` and `abs_mean`, clamp membership for
    /// `arccos_clamped`, and zero spectra entering `channel_cosine`. Two evaluations with equal signatures lie on the
    /// same smooth piece.
    pub fn kink_signature(&self) -> Vec<i8> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(a) | Op::AbsMean(a) => {
                    sig.extend(self.value(a).data().iter().map(|&x| sign(x) as i8));
                }
                Op::ArccosClamped(a) => {
                    sig.extend(self.value(a).data().iter().map(|&x| {
                        if x <= -1.0 + kernels::ARCCOS_CLAMP {
                            -1
                        } else if x >= 1.0 - kernels::ARCCOS_CLAMP {
                            1
                        } else {
                            0
                        }
                    }));
                }
                Op::ChannelCosine { a, b, .. } => {
                    let [n, c, h, w] = self.value(a).dims4("channel_cosine").expect("checked in forward");
                    let hw = h * w;
                    let zero = |t: &Tensor, img: usize, p: usize| (0..c).all(|ch| t.data()[(img * c + ch) * hw + p] == 0.0);
                    for img in 0..n {
                        for p in 0..hw {
                            sig.push((zero(self.value(a), img, p) || zero(self.value(b), img, p)) as i8);
                        }
                    }
                }
                _ => {}
            }
        }
        sig
    }

    /// Splits scalar `v` into terms whose exact sum is its value, expanding
    /// `add`, `sub`, `scale`, `sum`, `mean` and `abs_mean` down to single
    /// elements. Differencing two evaluations term by term avoids most of the
    /// cancellation in subtracting two rounded totals.
    pub fn summands(&self, v: Var) -> Vec<f64> {
        let mut out = Vec::new();
        self.expand(v, 1.0, &mut out);
        out
    }

    fn expand(&self, v: Var, w: f64, out: &mut Vec<f64>) {
        let value = self.value(v);
        match self.nodes[v.0].op {
            Op::Add(a, b) => {
                self.expand(a, w, out);
                self.expand(b, w, out);
            }
            Op::Sub(a, b) => {
                self.expand(a, w, out);
                self.expand(b, -w, out);
            }
            Op::Scale(a, k) => self.expand(a, w * k, out),
            Op::Sum(a) => out.extend(self.value(a).data().iter().map(|x| w * x)),
            Op::Mean(a) => {
                let n = self.value(a).len() as f64;
                out.extend(self.value(a).data().iter().map(|x| w * x / n));
            }
            Op::AbsMean(a) => {
                let n = self.value(a).len() as f64;
                out.extend(self.value(a).data().iter().map(|x| w * x.abs() / n));
            }
            _ => out.extend(value.data().iter().map(|x| w * x)),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| k * x);
        self.push(v, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = compensated_sum(self.value(a).data().iter().copied());
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = compensated_sum(t.data().iter().copied()) / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Mean absolute value (an element-normalized L1 norm).
    pub fn abs_mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = compensated_sum(t.data().iter().map(|x| x.abs())) / t.len() as f64;
        self.push(Tensor::scalar(s), Op::AbsMean(a))
    }

    pub fn arccos_clamped(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::arccos_clamped);
        self.push(v, Op::ArccosClamped(a))
    }

    /// Concatenates two `[b, c, h, w]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.value(a).dims4("concat")?;
        let [nb, cb, hb, wb] = self.value(b).dims4("concat")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat",
                format!(
                    "batch/spatial extents differ: {:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let hw = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity((ca + cb) * hw * na);
        for n in 0..na {
            data.extend_from_slice(&da[n * ca * hw..(n + 1) * ca * hw]);
            data.extend_from_slice(&db[n * cb * hw..(n + 1) * cb * hw]);
        }
        let v = Tensor::new(vec![na, ca + cb, ha, wa], data)?;
        Ok(self.push(v, Op::Concat(a, b)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let v = kernels::conv2d(self.value(input), self.value(kernel), stride, pad)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
        ))
    }

    pub fn upsample_bilinear(&mut self, input: Var, factor: usize) -> Result<Var> {
        let v = kernels::upsample_bilinear(self.value(input), factor)?;
        Ok(self.push(v, Op::Upsample { input, factor }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let [_, n] = self.value(a).dims2("add_bias")?;
        if self.value(bias).len() != n {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for rows of length {n}", self.value(bias).shape()),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_mut(n) {
            for (x, bv) in row.iter_mut().zip(&b) {
                *x += bv;
            }
        }
        Ok(self.push(v, Op::AddBias(a, bias)))
    }

    /// Softmax over all elements.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).len();
        if n == 0 {
            return Err(Error::InvalidArgument("softmax of an empty tensor".into()));
        }
        let v = kernels::softmax_groups(self.value(input), n);
        Ok(self.push(v, Op::Softmax { input, group: n }))
    }

    /// Softmax applied independently to each row of a 2-D tensor.
    pub fn softmax_rows(&mut self, input: Var) -> Result<Var> {
        let [_, n] = self.value(input).dims2("softmax_rows")?;
        if n == 0 {
            return Err(Error::InvalidArgument("softmax over empty rows".into()));
        }
        let v = kernels::softmax_groups(self.value(input), n);
        Ok(self.push(v, Op::Softmax { input, group: n }))
    }

    /// Returns `lambda * W / sigma`, with `sigma` the power-iteration estimate
    /// of the largest singular value of `W` viewed as `shape[0] x rest`.
    ///
    /// `u` is advanced by `iters` iterations and written back. With
    /// `iters == 0` the forward map is a fixed function of `W` given `u`, and
    /// its gradient is exact.
    pub fn spectral_normalize(
        &mut self,
        weight: Var,
        lambda: f64,
        iters: usize,
        u: &mut [f64],
        mode: SigmaGradient,
    ) -> Result<Var> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "spectral normalization coefficient must lie in (0, 1], got {lambda}"
            )));
        }
        let w = self.value(weight);
        let rows = *w.shape().first().unwrap_or(&0);
        let cols = w.len().checked_div(rows).unwrap_or(0);
        if u.len() != rows {
            return Err(Error::shape(
                "spectral_normalize",
                format!("power-iteration vector has length {} for {rows} rows", u.len()),
            ));
        }
        let (sigma, v) = kernels::power_iteration(w.data(), rows, cols, u, iters);
        let denom = sigma + 1e-12;
        let out = w.map(|x| lambda * x / denom);
        Ok(self.push(
            out,
            Op::SpectralNorm {
                weight,
                u: u.to_vec(),
                v,
                sigma,
                lambda,
                mode,
            },
        ))
    }

    /// Per-band blur with a shared `k x k` kernel followed by decimation.
    pub fn blur_decimate(&mut self, input: Var, kernel: Var, scale: usize) -> Result<Var> {
        let v = kernels::blur_decimate(self.value(input), self.value(kernel), scale)?;
        Ok(self.push(v, Op::BlurDecimate { input, kernel, scale }))
    }

    /// Per-pixel cosine similarity of channel vectors, shape `[b, 1, h, w]`.
    pub fn channel_cosine(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let v = kernels::channel_cosine(self.value(a), self.value(b), eps)?;
        Ok(self.push(v, Op::ChannelCosine { a, b, eps }))
    }

    /// Populates gradients of every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(shape));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::full(&shape, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (target, delta) in contributions {
                match &mut self.nodes[target.0].grad {
                    Some(acc) => acc.add_assign(&delta),
                    slot => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn local_backward(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = zip(g, vb, |g, y| g * y);
                let gb = zip(g, va, |g, x| g * x);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, k) => vec![(*a, g.map(|x| k * x))],
            Op::Relu(a) => vec![(*a, zip(g, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 }))],
            Op::Sum(a) => vec![(*a, Tensor::full(self.value(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let t = self.value(*a);
                vec![(*a, Tensor::full(t.shape(), g.item() / t.len() as f64))]
            }
            Op::AbsMean(a) => {
                let t = self.value(*a);
                let k = g.item() / t.len() as f64;
                vec![(*a, t.map(|x| k * sign(x)))]
            }
            Op::ArccosClamped(a) => {
                vec![(*a, zip(g, self.value(*a), |g, x| g * kernels::arccos_clamped_grad(x)))]
            }
            Op::Concat(a, b) => {
                let [n, ca, h, w] = self.value(*a).dims4("concat").expect("4-D");
                let cb = self.value(*b).shape()[1];
                let hw = h * w;
                let mut ga = Vec::with_capacity(n * ca * hw);
                let mut gb = Vec::with_capacity(n * cb * hw);
                for img in g.data().chunks((ca + cb) * hw) {
                    ga.extend_from_slice(&img[..ca * hw]);
                    gb.extend_from_slice(&img[ca * hw..]);
                }
                vec![
                    (*a, Tensor::new(self.value(*a).shape().to_vec(), ga).expect("shape")),
                    (*b, Tensor::new(self.value(*b).shape().to_vec(), gb).expect("shape")),
                ]
            }
            Op::Reshape(a) => {
                let s = self.value(*a).shape();
                vec![(*a, g.clone().reshape(s).expect("same length"))]
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let (gi, gk) =
                    kernels::conv2d_backward(self.value(*input), self.value(*kernel), *stride, *pad, g);
                vec![(*input, gi), (*kernel, gk)]
            }
            Op::Upsample { input, factor } => {
                let s = self.value(*input).shape();
                vec![(*input, kernels::upsample_bilinear_backward(s, *factor, g))]
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = kernels::matmul(g, &kernels::transpose(vb)).expect("shapes");
                let gb = kernels::matmul(&kernels::transpose(va), g).expect("shapes");
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddBias(a, bias) => {
                let n = self.value(*bias).len();
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (acc, x) in gb.iter_mut().zip(row) {
                        *acc += x;
                    }
                }
                let gb = Tensor::new(self.value(*bias).shape().to_vec(), gb).expect("shape");
                vec![(*a, g.clone()), (*bias, gb)]
            }
            Op::Softmax { input, group } => {
                vec![(*input, kernels::softmax_groups_backward(out, *group, g))]
            }
            Op::SpectralNorm {
                weight,
                u,
                v,
                sigma,
                lambda,
                mode,
            } => {
                let w = self.value(*weight);
                let denom = sigma + 1e-12;
                let mut gw = g.map(|x| lambda * x / denom);
                if *mode == SigmaGradient::Estimator {
                    // d sigma / dW = u v^T
                    let inner: f64 = g.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
                    let k = lambda * inner / (denom * denom);
                    let cols = v.len();
                    for (idx, x) in gw.data_mut().iter_mut().enumerate() {
                        *x -= k * u[idx / cols] * v[idx % cols];
                    }
                }
                vec![(*weight, gw)]
            }
            Op::BlurDecimate { input, kernel, scale } => {
                let (gi, gk) =
                    kernels::blur_decimate_backward(self.value(*input), self.value(*kernel), *scale, g);
                vec![(*input, gi), (*kernel, gk)]
            }
            Op::ChannelCosine { a, b, eps } => {
                let (ga, gb) = kernels::channel_cosine_backward(self.value(*a), self.value(*b), *eps, g);
                vec![(*a, ga), (*b, gb)]
            }
        }
    }
}

/// Neumaier summation in a fixed order.
pub(crate) fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in values {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}
