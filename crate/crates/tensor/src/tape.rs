//! Dynamic tape: every op appends a node holding its forward value and the
//! context its backward rule needs. `backward` walks the tape in reverse.

use crate::conv::{self, ConvGeom};
use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Deconv2d,
    BatchNorm,
    Relu,
    LeakyRelu,
    Sigmoid,
    Add,
    Sub,
    Mul,
    Affine,
    Concat,
    Downsample,
    Upsample,
    Mse,
    Sum,
    Mean,
    Ln,
}

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Normalize with the batch's own statistics.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch statistics observed by a train-mode batch norm.
/// `var` is the unbiased estimate used for running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Deconv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Concat(Vec<Var>),
    Downsample(Var, usize),
    Upsample(Var, usize),
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    Ln(Var, T),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv { .. } => OpKind::Conv2d,
            Op::Deconv { .. } => OpKind::Deconv2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Relu(_) => OpKind::Relu,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Affine(..) => OpKind::Affine,
            Op::Concat(_) => OpKind::Concat,
            Op::Downsample(..) => OpKind::Downsample,
            Op::Upsample(..) => OpKind::Upsample,
            Op::Mse(..) => OpKind::Mse,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Ln(..) => OpKind::Ln,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// A tape and its values are confined to one thread; independent tapes can
/// run concurrently.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), fault: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Negate every gradient produced by the backward rule of `kind`.
    /// Exists only so gradient checkers can prove they catch broken rules.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let grad = if requires_grad && matches!(op, Op::Leaf) {
            Some(Tensor::zeros(value.shape().to_vec()))
        } else {
            None
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a differentiable leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = &mut n.grad {
                g.data_mut().fill(T::zero());
            }
        }
    }

    /// Sign pattern of every non-smooth point on the tape (ReLU inputs,
    /// clamped-log inputs). Two evaluations with equal signatures lie on the
    /// same smooth piece of the function.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) => {
                    sig.extend(self.nodes[x.0].value.data().iter().map(|v| *v > T::zero()))
                }
                Op::Ln(x, eps) => sig.extend(self.nodes[x.0].value.data().iter().map(|v| *v > *eps)),
                _ => {}
            }
        }
        sig
    }

    // ---- forward ops ----------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let [n, cin, h, wd] = self.value(x).dims4()?;
        let [cout, wcin, kh, kw] = self.value(w).dims4()?;
        if wcin != cin {
            return Err(TensorError::shape(OP, format!("weight input channels {cin}"), wcin));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(TensorError::shape(OP, [cout], self.value(b).shape()));
            }
        }
        let geom = ConvGeom::conv(OP, cin, h, wd, kh, kw, stride, padding)?;
        let out = conv::conv_forward(
            self.value(x).data(),
            n,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            cout,
            &geom,
        );
        let value = Tensor::new(vec![n, cout, geom.out_h, geom.out_w], out)?;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(value, Op::Conv { x, w, b, geom }, rg))
    }

    /// Transposed convolution; weight is `[c_in, c_out, kh, kw]`.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "deconv2d";
        let [n, cin, h, wd] = self.value(x).dims4()?;
        let [wcin, cout, kh, kw] = self.value(w).dims4()?;
        if wcin != cin {
            return Err(TensorError::shape(OP, format!("weight input channels {cin}"), wcin));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(TensorError::shape(OP, [cout], self.value(b).shape()));
            }
        }
        let geom = ConvGeom::transposed(cout, h, wd, kh, kw, stride, padding)?;
        let out = conv::deconv_forward(
            self.value(x).data(),
            n,
            cin,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(vec![n, cout, geom.height, geom.width], out)?;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(value, Op::Deconv { x, w, b, geom }, rg))
    }

    /// Per-channel batch normalization followed by the affine `gamma, beta`.
    /// Returns the batch statistics in train mode.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BnStats<T>>)> {
        const OP: &str = "batch_norm";
        let [n, c, h, w] = self.value(x).dims4()?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(TensorError::shape(OP, [c], self.value(p).shape()));
            }
        }
        let plane = h * w;
        let count = n * plane;
        let xs = self.value(x).data();
        let mut stats = None;
        let (means, inv_std): (Vec<f64>, Vec<f64>) = match mode {
            BnMode::Train => {
                if count < 2 {
                    return Err(TensorError::invalid(OP, "train mode needs more than one value per channel"));
                }
                let mut means = Vec::with_capacity(c);
                let mut vars = Vec::with_capacity(c);
                for ch in 0..c {
                    let vals = || (0..n).flat_map(move |b| xs[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter());
                    let mean = vals().map(|v| v.as_f64()).sum::<f64>() / count as f64;
                    let var = vals().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / count as f64;
                    means.push(mean);
                    vars.push(var);
                }
                stats = Some(BnStats {
                    mean: means.iter().map(|&m| T::from_f64(m)).collect(),
                    var: vars
                        .iter()
                        .map(|&v| T::from_f64(v * count as f64 / (count - 1) as f64))
                        .collect(),
                });
                let inv = vars.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                (means, inv)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::shape(OP, c, (mean.len(), var.len())));
                }
                (
                    mean.iter().map(|m| m.as_f64()).collect(),
                    var.iter().map(|v| 1.0 / (v.as_f64() + eps).sqrt()).collect(),
                )
            }
        };
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    let xh = T::from_f64((xs[i].as_f64() - means[ch]) * inv_std[ch]);
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let train = matches!(mode, BnMode::Train);
        let inv_std = inv_std.into_iter().map(T::from_f64).collect();
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        self.unary(x, Op::LeakyRelu(x, s), move |v| if v > T::zero() { v } else { v * s })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        })
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (T::from_f64(scale), T::from_f64(shift));
        self.unary(x, Op::Affine(x, s), move |v| s * v + t)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// `ln(max(x, eps))`.
    pub fn ln_clamped(&mut self, x: Var, eps: f64) -> Var {
        let e = T::from_f64(eps);
        self.unary(x, Op::Ln(x, e), move |v| if v > e { v.ln() } else { e.ln() })
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::shape(op_name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((Tensor::new(va.shape().to_vec(), data)?, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = *parts.first().ok_or_else(|| TensorError::invalid(OP, "nothing to concatenate"))?;
        let [n, _, h, w] = self.value(first).dims4()?;
        let mut total = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(TensorError::shape(OP, [n, 0, h, w], [pn, pc, ph, pw]));
            }
            total += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for &p in parts {
                let pc = self.value(p).shape()[1];
                data.extend_from_slice(&self.value(p).data()[b * pc * plane..(b + 1) * pc * plane]);
            }
        }
        let value = Tensor::new(vec![n, total, h, w], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Keep the top-left sample of every `factor x factor` block.
    pub fn downsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        const OP: &str = "downsample_nearest";
        let [n, c, h, w] = self.value(x).dims4()?;
        if factor < 2 {
            return Err(TensorError::invalid(OP, "factor must be at least 2"));
        }
        if h % factor != 0 || w % factor != 0 {
            return Err(TensorError::invalid(OP, format!("{h}x{w} not divisible by {factor}")));
        }
        let (oh, ow) = (h / factor, w / factor);
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for nc in 0..n * c {
            for i in 0..oh {
                for j in 0..ow {
                    data.push(xs[nc * h * w + i * factor * w + j * factor]);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Downsample(x, factor), rg))
    }

    /// Replicate every value into a `factor x factor` block.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        const OP: &str = "upsample_nearest";
        let [n, c, h, w] = self.value(x).dims4()?;
        if factor < 2 {
            return Err(TensorError::invalid(OP, "factor must be at least 2"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for nc in 0..n * c {
            for i in 0..oh {
                let row = &xs[nc * h * w + (i / factor) * w..nc * h * w + (i / factor + 1) * w];
                for j in 0..ow {
                    data.push(row[j / factor]);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Upsample(x, factor), rg))
    }

    /// Mean of squared differences over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (vp, vt) = (self.value(pred), self.value(target));
        if vp.shape() != vt.shape() {
            return Err(TensorError::shape("mse_loss", vp.shape(), vt.shape()));
        }
        let sse: f64 = vp
            .data()
            .iter()
            .zip(vt.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum();
        let value = Tensor::scalar(T::from_f64(sse / vp.numel() as f64));
        let rg = self.rg(&[pred, target]);
        Ok(self.push(value, Op::Mse(pred, target), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(T::from_f64(self.value(x).sum_f64()));
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::scalar(T::from_f64(v.sum_f64() / v.numel() as f64));
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    // ---- backward --------------------------------------------------------

    /// Accumulate d(loss)/d(leaf) into every differentiable leaf reachable
    /// from `loss`. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<(usize, Vec<T>)> = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let negate = self.fault == Some(node.op.kind());
            let mut out: Vec<(Var, Vec<T>)> = Vec::new();
            match &node.op {
                Op::Leaf => {
                    leaf_grads.push((i, g));
                    continue;
                }
                Op::Conv { x, w, b, geom } => {
                    let cout = self.value(*w).shape()[0];
                    let batch = self.value(*x).shape()[0];
                    let (dx, dw, db) =
                        conv::conv_backward(self.value(*x).data(), batch, self.value(*w).data(), cout, geom, &g);
                    out.push((*x, dx));
                    out.push((*w, dw));
                    if let Some(b) = b {
                        out.push((*b, db));
                    }
                }
                Op::Deconv { x, w, b, geom } => {
                    let [batch, cin, _, _] = self.value(*x).dims4()?;
                    let (dx, dw, db) =
                        conv::deconv_backward(self.value(*x).data(), batch, cin, self.value(*w).data(), geom, &g);
                    out.push((*x, dx));
                    out.push((*w, dw));
                    if let Some(b) = b {
                        out.push((*b, db));
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let [n, c, h, w] = self.value(*x).dims4()?;
                    let plane = h * w;
                    let count = (n * plane) as f64;
                    let gam = self.value(*gamma).data();
                    let mut dx = vec![T::zero(); g.len()];
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for ch in 0..c {
                        let idx = || (0..n).flat_map(move |b| (b * c + ch) * plane..(b * c + ch + 1) * plane);
                        let (mut s_dy, mut s_dy_xh) = (0.0f64, 0.0f64);
                        for i in idx() {
                            s_dy += g[i].as_f64();
                            s_dy_xh += g[i].as_f64() * xhat[i].as_f64();
                        }
                        dgamma[ch] = T::from_f64(s_dy_xh);
                        dbeta[ch] = T::from_f64(s_dy);
                        let gm = gam[ch].as_f64();
                        let is = inv_std[ch].as_f64();
                        if *train {
                            // d xhat = dy * gamma, so its sums are gamma times the dy sums.
                            let mean_dxh = gm * s_dy / count;
                            let mean_dxh_xh = gm * s_dy_xh / count;
                            for i in idx() {
                                let dxh = g[i].as_f64() * gm;
                                dx[i] = T::from_f64(is * (dxh - mean_dxh - xhat[i].as_f64() * mean_dxh_xh));
                            }
                        } else {
                            for i in idx() {
                                dx[i] = T::from_f64(g[i].as_f64() * gm * is);
                            }
                        }
                    }
                    out.push((*x, dx));
                    out.push((*gamma, dgamma));
                    out.push((*beta, dbeta));
                }
                Op::Relu(x) => {
                    let xs = self.value(*x).data();
                    let dx = g
                        .iter()
                        .zip(xs)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    out.push((*x, dx));
                }
                Op::LeakyRelu(x, s) => {
                    let xs = self.value(*x).data();
                    let dx = g
                        .iter()
                        .zip(xs)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { gv * *s })
                        .collect();
                    out.push((*x, dx));
                }
                Op::Sigmoid(x) => {
                    let ys = node.value.data();
                    let dx = g.iter().zip(ys).map(|(&gv, &y)| gv * y * (T::one() - y)).collect();
                    out.push((*x, dx));
                }
                Op::Add(a, b) => {
                    out.push((*a, g.clone()));
                    out.push((*b, g));
                }
                Op::Sub(a, b) => {
                    out.push((*b, g.iter().map(|&v| -v).collect()));
                    out.push((*a, g));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    out.push((*a, g.iter().zip(vb).map(|(&gv, &y)| gv * y).collect()));
                    out.push((*b, g.iter().zip(va).map(|(&gv, &x)| gv * x).collect()));
                }
                Op::Affine(x, s) => out.push((*x, g.iter().map(|&v| v * *s).collect())),
                Op::Concat(parts) => {
                    let [n, total, h, w] = node.value.dims4()?;
                    let plane = h * w;
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).shape()[1];
                        let mut dp = Vec::with_capacity(n * pc * plane);
                        for b in 0..n {
                            let start = (b * total + offset) * plane;
                            dp.extend_from_slice(&g[start..start + pc * plane]);
                        }
                        out.push((p, dp));
                        offset += pc;
                    }
                }
                Op::Downsample(x, f) => {
                    let [n, c, h, w] = self.value(*x).dims4()?;
                    let (oh, ow) = (h / f, w / f);
                    let mut dx = vec![T::zero(); n * c * h * w];
                    for nc in 0..n * c {
                        for i in 0..oh {
                            for j in 0..ow {
                                dx[nc * h * w + i * f * w + j * f] = g[(nc * oh + i) * ow + j];
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                Op::Upsample(x, f) => {
                    let [n, c, h, w] = self.value(*x).dims4()?;
                    let (oh, ow) = (h * f, w * f);
                    let mut dx = vec![T::zero(); n * c * h * w];
                    for nc in 0..n * c {
                        for i in 0..oh {
                            for j in 0..ow {
                                let d = &mut dx[nc * h * w + (i / f) * w + j / f];
                                *d = *d + g[(nc * oh + i) * ow + j];
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                Op::Mse(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let k = g[0].as_f64() * 2.0 / va.len() as f64;
                    let da: Vec<T> = va
                        .iter()
                        .zip(vb)
                        .map(|(&x, &y)| T::from_f64(k * (x.as_f64() - y.as_f64())))
                        .collect();
                    out.push((*b, da.iter().map(|&v| -v).collect()));
                    out.push((*a, da));
                }
                Op::Sum(x) => out.push((*x, vec![g[0]; self.value(*x).numel()])),
                Op::Mean(x) => {
                    let n = self.value(*x).numel();
                    out.push((*x, vec![T::from_f64(g[0].as_f64() / n as f64); n]));
                }
                Op::Ln(x, eps) => {
                    let xs = self.value(*x).data();
                    let dx = g
                        .iter()
                        .zip(xs)
                        .map(|(&gv, &xv)| if xv > *eps { gv / xv } else { T::zero() })
                        .collect();
                    out.push((*x, dx));
                }
            }
            for (v, mut d) in out {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if negate {
                    d.iter_mut().for_each(|x| *x = -*x);
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a = *a + *b),
                    slot @ None => *slot = Some(d),
                }
            }
        }

        for (i, g) in leaf_grads {
            if let Some(acc) = &mut self.nodes[i].grad {
                acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b);
            }
        }
        Ok(())
    }
}
