//! Operation recording and the reverse sweep.
//!
//! A [`Tape`] is an append-only list of nodes. Each op evaluates eagerly,
//! stores its value, and remembers its operands, so the list is always in
//! topological order and [`Tape::backward`] is a single reverse scan.

use crate::conv::{self, ConvGeometry};
use crate::error::{AutodiffError, Result};
use crate::linalg::{gemm, Layout};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Slope of the negative half of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    /// Subgradient at zero is zero.
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn apply<S: Real>(self, x: S) -> S {
        match self {
            Activation::Relu => {
                if x > S::ZERO {
                    x
                } else {
                    S::ZERO
                }
            }
            Activation::LeakyRelu => {
                if x > S::ZERO {
                    x
                } else {
                    S::from_f64(LEAKY_SLOPE) * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative<S: Real>(self, x: S, y: S) -> S {
        match self {
            Activation::Relu => {
                if x > S::ZERO {
                    S::ONE
                } else {
                    S::ZERO
                }
            }
            Activation::LeakyRelu => {
                if x > S::ZERO {
                    S::ONE
                } else {
                    S::from_f64(LEAKY_SLOPE)
                }
            }
            Activation::Tanh => S::ONE - y * y,
            Activation::Sigmoid => y * (S::ONE - y),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "leaky_relu" => Ok(Activation::LeakyRelu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::ZERO {
        S::ONE / (S::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::ONE + e)
    }
}

/// How gradients flow through an active norm clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ClipGradient {
    /// Full Jacobian of `x · C / ‖x‖`.
    #[default]
    Exact,
    /// Treats the factor `C / ‖x‖` as a constant.
    StopScale,
}

impl ClipGradient {
    pub fn as_str(self) -> &'static str {
        match self {
            ClipGradient::Exact => "exact",
            ClipGradient::StopScale => "stop_scale",
        }
    }
}

impl std::str::FromStr for ClipGradient {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "exact" => Ok(ClipGradient::Exact),
            "stop_scale" => Ok(ClipGradient::StopScale),
            other => Err(format!("unknown clip gradient mode `{other}` (expected exact or stop_scale)")),
        }
    }
}

impl std::fmt::Display for ClipGradient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

enum Op<S> {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeometry,
        cols: Vec<S>,
    },
    Conv2dTranspose {
        y: Var,
        kernel: Var,
        geom: ConvGeometry,
        y_filter_major: Vec<S>,
    },
    ChannelBias {
        x: Var,
        bias: Var,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale {
        x: Var,
        factor: S,
    },
    Shift {
        x: Var,
    },
    Exp {
        x: Var,
    },
    Square {
        x: Var,
    },
    Sqrt {
        x: Var,
    },
    Abs {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    RowNormClip {
        x: Var,
        bound: S,
        norms: Vec<S>,
        mode: ClipGradient,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    param: Option<(u64, ParamId)>,
}

/// Rows within a few ulps of the bound count as inside, so a clipped row is
/// never rescaled a second time by rounding.
fn clip_active<S: Real>(norm: S, bound: S) -> bool {
    norm > bound * (S::ONE + S::from_f64(8.0) * S::EPSILON)
}

/// Records a computation for reverse-mode differentiation.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Nodes bound from `store` (or a clone of it).
    pub fn param_bindings<'a>(&'a self, store: &ParamStore<S>) -> impl Iterator<Item = (ParamId, Var)> + 'a {
        let key = store.key();
        self.nodes
            .iter()
            .enumerate()
            .filter_map(move |(i, n)| match n.param {
                Some((k, p)) if k == key => Some((p, Var(i))),
                _ => None,
            })
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Binds a parameter as a trainable leaf.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Result<Var> {
        let v = self.leaf(store.value(id).clone(), true)?;
        self.nodes[v.0].param = Some((store.key(), id));
        Ok(v)
    }

    /// Binds a parameter as a constant; no gradient reaches it.
    pub fn frozen_param(&mut self, store: &ParamStore<S>, id: ParamId) -> Result<Var> {
        self.constant(store.value(id).clone())
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `x·W + b` for `x: [B, I]`, `W: [I, O]`, `b: [O]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let op = "affine";
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let (batch, inner) = match *xs {
            [bb, i] => (bb, i),
            _ => return Err(AutodiffError::dim(op, format!("input must be 2-D, got {xs:?}"))),
        };
        let outer = match *ws {
            [i, o] if i == inner => o,
            _ => {
                return Err(AutodiffError::dim(
                    op,
                    format!("weight {ws:?} incompatible with input {xs:?}"),
                ))
            }
        };
        if bs != [outer] {
            return Err(AutodiffError::dim(
                op,
                format!("bias {bs:?} does not match output width {outer}"),
            ));
        }
        let mut out = Vec::with_capacity(batch * outer);
        let bias = self.value(b).data();
        for _ in 0..batch {
            out.extend_from_slice(bias);
        }
        gemm(
            batch,
            inner,
            outer,
            self.value(x).data(),
            Layout::Normal,
            self.value(w).data(),
            Layout::Normal,
            S::ONE,
            &mut out,
        );
        let rg = self.any_grad(&[x, w, b]);
        self.push(op, Tensor::new([batch, outer], out)?, Op::Affine { x, w, b }, rg)
    }

    /// Valid-padding cross-correlation of `x: [B, C, H, W]` with `K: [F, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let geom = ConvGeometry::forward(self.shape(x), self.shape(kernel), stride)?;
        let cols = conv::im2col(&geom, self.value(x).data());
        let mut out_fm = vec![S::ZERO; geom.filters * geom.positions()];
        gemm(
            geom.filters,
            geom.patch_len(),
            geom.positions(),
            self.value(kernel).data(),
            Layout::Normal,
            &cols,
            Layout::Normal,
            S::ZERO,
            &mut out_fm,
        );
        let out = conv::filter_major_to_batch_major(&geom, &out_fm);
        let rg = self.any_grad(&[x, kernel]);
        // The column buffer is only needed to form the kernel gradient.
        let cols = if self.requires_grad(kernel) { cols } else { Vec::new() };
        self.push(
            "conv2d",
            Tensor::new(geom.coarse_shape(), out)?,
            Op::Conv2d { x, kernel, geom, cols },
            rg,
        )
    }

    /// Adjoint of [`Tape::conv2d`] with respect to its input: maps
    /// `y: [B, F, H', W']` to `[B, C, (H'-1)·s + k, (W'-1)·s + k]` using the
    /// same `K: [F, C, k, k]`.
    pub fn conv2d_transpose(&mut self, y: Var, kernel: Var, stride: usize) -> Result<Var> {
        let geom = ConvGeometry::transpose(self.shape(y), self.shape(kernel), stride)?;
        let y_fm = conv::batch_major_to_filter_major(&geom, self.value(y).data());
        let mut cols = vec![S::ZERO; geom.patch_len() * geom.positions()];
        gemm(
            geom.patch_len(),
            geom.filters,
            geom.positions(),
            self.value(kernel).data(),
            Layout::Transposed,
            &y_fm,
            Layout::Normal,
            S::ZERO,
            &mut cols,
        );
        let out = conv::col2im(&geom, &cols);
        let rg = self.any_grad(&[y, kernel]);
        let y_fm = if self.requires_grad(kernel) { y_fm } else { Vec::new() };
        self.push(
            "conv2d_transpose",
            Tensor::new(geom.fine_shape(), out)?,
            Op::Conv2dTranspose {
                y,
                kernel,
                geom,
                y_filter_major: y_fm,
            },
            rg,
        )
    }

    /// Adds `bias[c]` to every element of channel `c` of `x: [B, C, ...]`.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let op = "channel_bias";
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(bias) != [xs[1]] {
            return Err(AutodiffError::dim(
                op,
                format!("bias {:?} does not match channels of {xs:?}", self.shape(bias)),
            ));
        }
        let spatial: usize = xs[2..].iter().product();
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for (chunk, idx) in out.chunks_mut(spatial).zip(0..) {
            let v = b[idx % xs[1]];
            chunk.iter_mut().for_each(|e| *e += v);
        }
        let rg = self.any_grad(&[x, bias]);
        self.push(op, Tensor::new(xs, out)?, Op::ChannelBias { x, bias }, rg)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let value = self.value(x).map(|v| kind.apply(v));
        let rg = self.requires_grad(x);
        self.push(kind.as_str(), value, Op::Activation { x, kind }, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        self.push(op_name, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    fn unary(&mut self, op_name: &'static str, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        let value = self.value(x).map(f);
        let rg = self.requires_grad(x);
        self.push(op_name, value, op, rg)
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var> {
        self.unary("scale", x, |v| v * factor, Op::Scale { x, factor })
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::Shift { x })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), Op::Exp { x })
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square { x })
    }

    /// Elementwise square root; inputs must be positive.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| !(v > S::ZERO)) {
            return Err(AutodiffError::Contract("sqrt of a non-positive value".into()));
        }
        self.unary("sqrt", x, |v| v.sqrt(), Op::Sqrt { x })
    }

    /// Elementwise absolute value; derivative at zero is zero.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, |v| v.abs(), Op::Abs { x })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum();
        let rg = self.requires_grad(x);
        self.push("sum", Tensor::scalar(total), Op::Sum { x }, rg)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = S::from_f64(self.value(x).len() as f64);
        let s = self.sum(x)?;
        self.scale(s, S::ONE / n)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let value = self.value(x).clone().reshape(shape).map_err(|e| match e {
            AutodiffError::Dimension { detail, .. } => AutodiffError::dim("reshape", detail),
            other => other,
        })?;
        let rg = self.requires_grad(x);
        self.push("reshape", value, Op::Reshape { x }, rg)
    }

    /// Rescales every row of `x: [B, D]` whose L2 norm exceeds `bound` onto
    /// the sphere of radius `bound`; rows inside the ball pass through.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn row_norm_clip(&mut self, x: Var, bound: S, mode: ClipGradient) -> Result<Var> {
        let op = "row_norm_clip";
        if !(bound > S::ZERO) {
            return Err(AutodiffError::Contract(format!("{op}: bound must be positive, got {bound}")));
        }
        let (rows, cols) = match *self.shape(x) {
            [r, c] => (r, c),
            ref s => return Err(AutodiffError::dim(op, format!("input must be 2-D, got {s:?}"))),
        };
        let xv = self.value(x).data();
        let mut out = xv.to_vec();
        let mut norms = Vec::with_capacity(rows);
        for (row, dst) in xv.chunks(cols).zip(out.chunks_mut(cols)) {
            let norm = row.iter().fold(S::ZERO, |acc, &v| acc + v * v).sqrt();
            if clip_active(norm, bound) {
                let factor = bound / norm;
                dst.iter_mut().for_each(|v| *v *= factor);
            }
            norms.push(norm);
        }
        let rg = self.requires_grad(x);
        self.push(
            op,
            Tensor::new([rows, cols], out)?,
            Op::RowNormClip { x, bound, norms, mode },
            rg,
        )
    }

    /// Mean softmax cross-entropy of `logits: [B, K]` against class ids.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let op = "softmax_cross_entropy";
        let (rows, classes) = match *self.shape(logits) {
            [r, k] => (r, k),
            ref s => return Err(AutodiffError::dim(op, format!("logits must be 2-D, got {s:?}"))),
        };
        if labels.len() != rows {
            return Err(AutodiffError::dim(
                op,
                format!("{} labels for {rows} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(AutodiffError::dim(op, format!("label {bad} outside {classes} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(lv.len());
        let mut loss = S::ZERO;
        for (row, &label) in lv.chunks(classes).zip(labels) {
            let max = row.iter().copied().fold(row[0], |m, v| m.max(v));
            let exps: Vec<S> = row.iter().map(|&v| (v - max).exp()).collect();
            let z: S = exps.iter().copied().sum();
            loss += z.ln() - (row[label] - max);
            probs.extend(exps.into_iter().map(|e| e / z));
        }
        let value = Tensor::scalar(loss / S::from_f64(rows as f64));
        let rg = self.requires_grad(logits);
        self.push(
            op,
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if loss.0 >= self.nodes.len() {
            return Err(AutodiffError::Contract("loss is not recorded on this tape".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(AutodiffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        let mut visits = vec![0u32; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![S::ONE]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            visits[i] += 1;
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visits })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<S>>], v: Var) -> Option<&'g mut Vec<S>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![S::ZERO; len]))
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (batch, inner) = (self.shape(*x)[0], self.shape(*x)[1]);
                let outer = self.shape(*w)[1];
                if let Some(dx) = self.slot(grads, *x) {
                    gemm(batch, outer, inner, g, Layout::Normal, self.value(*w).data(), Layout::Transposed, S::ONE, dx);
                }
                if let Some(dw) = self.slot(grads, *w) {
                    gemm(inner, batch, outer, self.value(*x).data(), Layout::Transposed, g, Layout::Normal, S::ONE, dw);
                }
                if let Some(db) = self.slot(grads, *b) {
                    for row in g.chunks(outer) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Conv2d { x, kernel, geom, cols } => {
                let g_fm = conv::batch_major_to_filter_major(geom, g);
                if let Some(dk) = self.slot(grads, *kernel) {
                    gemm(geom.filters, geom.positions(), geom.patch_len(), &g_fm, Layout::Normal, cols, Layout::Transposed, S::ONE, dk);
                }
                if self.requires_grad(*x) {
                    let mut dcols = vec![S::ZERO; geom.patch_len() * geom.positions()];
                    gemm(
                        geom.patch_len(),
                        geom.filters,
                        geom.positions(),
                        self.value(*kernel).data(),
                        Layout::Transposed,
                        &g_fm,
                        Layout::Normal,
                        S::ZERO,
                        &mut dcols,
                    );
                    let folded = conv::col2im(geom, &dcols);
                    if let Some(dx) = self.slot(grads, *x) {
                        dx.iter_mut().zip(&folded).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Conv2dTranspose { y, kernel, geom, y_filter_major } => {
                let gcols = conv::im2col(geom, g);
                if let Some(dk) = self.slot(grads, *kernel) {
                    gemm(
                        geom.filters,
                        geom.positions(),
                        geom.patch_len(),
                        y_filter_major,
                        Layout::Normal,
                        &gcols,
                        Layout::Transposed,
                        S::ONE,
                        dk,
                    );
                }
                if self.requires_grad(*y) {
                    let mut dy_fm = vec![S::ZERO; geom.filters * geom.positions()];
                    gemm(
                        geom.filters,
                        geom.patch_len(),
                        geom.positions(),
                        self.value(*kernel).data(),
                        Layout::Normal,
                        &gcols,
                        Layout::Normal,
                        S::ZERO,
                        &mut dy_fm,
                    );
                    let dy_bm = conv::filter_major_to_batch_major(geom, &dy_fm);
                    if let Some(dy) = self.slot(grads, *y) {
                        dy.iter_mut().zip(&dy_bm).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::ChannelBias { x, bias } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                let shape = self.shape(*x);
                let channels = shape[1];
                let spatial: usize = shape[2..].iter().product();
                if let Some(db) = self.slot(grads, *bias) {
                    for (chunk, idx) in g.chunks(spatial).zip(0..) {
                        db[idx % channels] += chunk.iter().copied().sum::<S>();
                    }
                }
            }
            Op::Activation { x, kind } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for (((d, &gv), &xi), &yi) in dx.iter_mut().zip(g).zip(xv).zip(yv) {
                        *d += gv * kind.derivative(xi, yi);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if let Some(db) = self.slot(grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if let Some(db) = self.slot(grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, &v)| *d -= v);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gv), &q) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * q;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, &gv), &p) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * p;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *factor);
                }
            }
            Op::Shift { x } | Op::Reshape { x } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Exp { x } => {
                let yv = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(yv) {
                        *d += gv * y;
                    }
                }
            }
            Op::Square { x } => {
                let xv = self.value(*x).data();
                let two = S::from_f64(2.0);
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gv), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        *d += two * gv * xi;
                    }
                }
            }
            Op::Sqrt { x } => {
                let yv = node.value.data();
                let half = S::from_f64(0.5);
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(yv) {
                        *d += half * gv / y;
                    }
                }
            }
            Op::Abs { x } => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gv), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        if xi > S::ZERO {
                            *d += gv;
                        } else if xi < S::ZERO {
                            *d -= gv;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                let gv = g[0];
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::RowNormClip { x, bound, norms, mode } => {
                let cols = self.shape(*x)[1];
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for (((drow, grow), xrow), &norm) in dx
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(xv.chunks(cols))
                        .zip(norms)
                    {
                        if clip_active(norm, *bound) {
                            let factor = *bound / norm;
                            let radial = match mode {
                                ClipGradient::Exact => {
                                    xrow.iter().zip(grow).fold(S::ZERO, |acc, (&a, &b)| acc + a * b)
                                        / (norm * norm)
                                }
                                ClipGradient::StopScale => S::ZERO,
                            };
                            for ((d, &gv), &xi) in drow.iter_mut().zip(grow).zip(xrow) {
                                *d += factor * (gv - xi * radial);
                            }
                        } else {
                            drow.iter_mut().zip(grow).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let classes = self.shape(*logits)[1];
                let scale = g[0] / S::from_f64(labels.len() as f64);
                if let Some(dl) = self.slot(grads, *logits) {
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == label { S::ONE } else { S::ZERO };
                            dl[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                }
            }
        }
    }
}

/// Result of a reverse sweep: one gradient buffer per reached node.
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    visits: Vec<u32>,
}

impl<S: Real> Gradients<S> {
    /// Gradient of the loss with respect to `v`, if any flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient shaped like `v`, zero where nothing flowed.
    pub fn wrt_tensor(&self, tape: &Tape<S>, v: Var) -> Tensor<S> {
        let shape = tape.shape(v).to_vec();
        match self.wrt(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches node shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// How many times each node was processed by the sweep.
    pub fn visit_counts(&self) -> &[u32] {
        &self.visits
    }

    pub fn nodes_visited(&self) -> usize {
        self.visits.iter().filter(|&&c| c > 0).count()
    }
}
