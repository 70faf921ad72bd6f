use crate::error::shape_err;
use crate::kernels::{self, Plan};
use crate::{NnError, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride/padding of a square-kernel (transposed) convolution. The kernel
/// extent comes from the weight tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    /// Only used by transposed convolution.
    pub output_padding: usize,
}

impl ConvGeom {
    /// 3×3 kernel, stride 2, padding 1, output padding 1: halves (conv) or
    /// doubles (deconv) an even spatial extent.
    pub const HALVING: ConvGeom = ConvGeom {
        stride: 2,
        padding: 1,
        output_padding: 1,
    };
}

impl Default for ConvGeom {
    fn default() -> Self {
        Self::HALVING
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Running mean/variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnRunning<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn cast<U: Scalar>(&self) -> BnRunning<U> {
        BnRunning {
            mean: self.mean.iter().map(|v| U::lit(v.as_f64())).collect(),
            var: self.var.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, plan: Plan },
    Deconv2d { x: Var, w: Var, b: Var, plan: Plan },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Mse { pred: Var, target: Var },
    Sum(Var),
    Add(Var, Var),
    Scale(Var, T),
    Concat { parts: Vec<Var> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for later reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every input of a node has a
/// smaller index than the node itself; `backward` walks the indices in
/// reverse.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn dims4(op: &'static str, s: &[usize]) -> Result<[usize; 4], NnError> {
    match s {
        &[a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(shape_err(op, format!("expected a 4-d tensor, got {s:?}"))),
    }
}

fn dims2(op: &'static str, s: &[usize]) -> Result<[usize; 2], NnError> {
    match s {
        &[a, b] => Ok([a, b]),
        _ => Err(shape_err(op, format!("expected a 2-d tensor, got {s:?}"))),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a differentiable input or parameter.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<&Node<T>, NnError> {
        self.nodes.get(v.0).ok_or(NnError::UnknownVar(v.0))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn finish(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, NnError> {
        if !value.all_finite() {
            return Err(NnError::NonFinite { op: name });
        }
        let rg = self.rg(inputs);
        Ok(self.push(value, op, rg))
    }

    fn conv_plan(&self, op: &'static str, x: Var, w: Var, b: Var, geom: ConvGeom, transposed: bool) -> Result<Plan, NnError> {
        let [n, cin, h, wd] = dims4(op, self.check(x)?.value.shape())?;
        let ws = dims4(op, self.check(w)?.value.shape())?;
        let bs = self.check(b)?.value.shape().to_vec();
        let (w_in, w_out) = if transposed { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
        if w_in != cin {
            return Err(shape_err(op, format!("input has {cin} channels, weight expects {w_in}")));
        }
        if ws[2] != ws[3] {
            return Err(shape_err(op, format!("kernel must be square, got {}x{}", ws[2], ws[3])));
        }
        if bs != [w_out] {
            return Err(shape_err(op, format!("bias shape {bs:?}, expected [{w_out}]")));
        }
        let k = ws[2];
        let ConvGeom { stride, padding, output_padding } = geom;
        let (oh, ow) = if transposed {
            if h == 0 || wd == 0 {
                return Err(shape_err(op, "empty spatial extent"));
            }
            (
                (h - 1) * stride + k + output_padding - 2 * padding,
                (wd - 1) * stride + k + output_padding - 2 * padding,
            )
        } else {
            if h % 2 != 0 || wd % 2 != 0 || h == 0 || wd == 0 {
                return Err(shape_err(op, format!("spatial extent must be even and nonzero, got {h}x{wd}")));
            }
            if h + 2 * padding < k || wd + 2 * padding < k {
                return Err(shape_err(op, "kernel larger than padded input"));
            }
            ((h + 2 * padding - k) / stride + 1, (wd + 2 * padding - k) / stride + 1)
        };
        Ok(Plan {
            batch: n,
            cin,
            cout: w_out,
            in_h: h,
            in_w: wd,
            out_h: oh,
            out_w: ow,
            k,
            stride,
            pad: padding,
        })
    }

    /// Cross-correlation; `x` is `[n, cin, h, w]`, `w` is `[cout, cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var, NnError> {
        let plan = self.conv_plan("conv2d", x, w, b, geom, false)?;
        let mut out = vec![T::zero(); plan.batch * plan.cout * plan.out_h * plan.out_w];
        kernels::conv_forward(
            &plan,
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            self.nodes[b.0].value.data(),
            &mut out,
        );
        let value = Tensor::new(vec![plan.batch, plan.cout, plan.out_h, plan.out_w], out)?;
        self.finish("conv2d", value, Op::Conv2d { x, w, b, plan }, &[x, w, b])
    }

    /// Transposed convolution; `x` is `[n, cin, h, w]`, `w` is `[cin, cout, k, k]`.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var, NnError> {
        let plan = self.conv_plan("deconv2d", x, w, b, geom, true)?;
        let mut out = vec![T::zero(); plan.batch * plan.cout * plan.out_h * plan.out_w];
        kernels::deconv_forward(
            &plan,
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            self.nodes[b.0].value.data(),
            &mut out,
        );
        let value = Tensor::new(vec![plan.batch, plan.cout, plan.out_h, plan.out_w], out)?;
        self.finish("deconv2d", value, Op::Deconv2d { x, w, b, plan }, &[x, w, b])
    }

    /// Per-channel batch normalization over `[n, c, ...]`.
    ///
    /// In train mode the batch statistics are used and the updated running
    /// statistics are returned; eval mode reads `running` only.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &BnRunning<T>,
        mode: BatchNormMode,
    ) -> Result<(Var, Option<BnRunning<T>>), NnError> {
        let xs = self.check(x)?.value.shape().to_vec();
        if xs.len() < 2 {
            return Err(shape_err("batch_norm", format!("expected [n, c, ...], got {xs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = self.check(v)?.value.shape();
            if s != [c] {
                return Err(shape_err("batch_norm", format!("{name} shape {s:?}, expected [{c}]")));
            }
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(shape_err("batch_norm", "running statistics have the wrong channel count"));
        }
        if mode == BatchNormMode::Train && n < 2 {
            return Err(NnError::BatchTooSmall(n));
        }
        let xd = self.nodes[x.0].value.data();
        let g = self.nodes[gamma.0].value.data();
        let bt = self.nodes[beta.0].value.data();
        let eps = T::lit(BN_EPS);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut new_running = None;
        match mode {
            BatchNormMode::Train => {
                let m = (n * spatial) as f64;
                let mut means = vec![T::zero(); c];
                let mut vars = vec![T::zero(); c];
                for ch in 0..c {
                    let mut sum = T::zero();
                    for s in 0..n {
                        for &v in &xd[(s * c + ch) * spatial..][..spatial] {
                            sum += v;
                        }
                    }
                    let mean = sum / T::lit(m);
                    let mut sq = T::zero();
                    for s in 0..n {
                        for &v in &xd[(s * c + ch) * spatial..][..spatial] {
                            let d = v - mean;
                            sq += d * d;
                        }
                    }
                    means[ch] = mean;
                    vars[ch] = sq / T::lit(m);
                    inv_std[ch] = T::one() / (vars[ch] + eps).sqrt();
                }
                let mom = T::lit(BN_MOMENTUM);
                let unbias = T::lit(m / (m - 1.0).max(1.0));
                new_running = Some(BnRunning {
                    mean: (0..c)
                        .map(|ch| (T::one() - mom) * running.mean[ch] + mom * means[ch])
                        .collect(),
                    var: (0..c)
                        .map(|ch| (T::one() - mom) * running.var[ch] + mom * vars[ch] * unbias)
                        .collect(),
                });
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * spatial;
                        for i in off..off + spatial {
                            let h = (xd[i] - means[ch]) * inv_std[ch];
                            xhat[i] = h;
                            out[i] = g[ch] * h + bt[ch];
                        }
                    }
                }
            }
            BatchNormMode::Eval => {
                for ch in 0..c {
                    inv_std[ch] = T::one() / (running.var[ch] + eps).sqrt();
                }
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * spatial;
                        for i in off..off + spatial {
                            let h = (xd[i] - running.mean[ch]) * inv_std[ch];
                            xhat[i] = h;
                            out[i] = g[ch] * h + bt[ch];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train: mode == BatchNormMode::Train,
        };
        let v = self.finish("batch_norm", value, op, &[x, gamma, beta])?;
        Ok((v, new_running))
    }

    /// `x` is `[n, in]`, `w` is `[out, in]`, `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let [n, fin] = dims2("linear", self.check(x)?.value.shape())?;
        let [fout, win] = dims2("linear", self.check(w)?.value.shape())?;
        if win != fin {
            return Err(shape_err("linear", format!("input width {fin}, weight expects {win}")));
        }
        if self.check(b)?.value.shape() != [fout] {
            return Err(shape_err("linear", "bias length does not match output width"));
        }
        let xd = self.nodes[x.0].value.data();
        let wd = self.nodes[w.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![T::zero(); n * fout];
        for s in 0..n {
            let xr = &xd[s * fin..][..fin];
            for o in 0..fout {
                out[s * fout + o] = bd[o] + kernels::dot(xr, &wd[o * fin..][..fin]);
            }
        }
        let value = Tensor::new(vec![n, fout], out)?;
        self.finish("linear", value, Op::Linear { x, w, b }, &[x, w, b])
    }

    fn pointwise(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var, NnError> {
        let xv = &self.check(x)?.value;
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect())?;
        self.finish(name, value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NnError> {
        self.pointwise("relu", x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NnError> {
        self.pointwise("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NnError> {
        self.pointwise("tanh", x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var, NnError> {
        self.pointwise("scale", x, |v| v * c, Op::Scale(x, c))
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, NnError> {
        let p = &self.check(pred)?.value;
        let t = &self.check(target)?.value;
        if p.shape() != t.shape() {
            return Err(shape_err("mse", format!("{:?} vs {:?}", p.shape(), t.shape())));
        }
        let mut acc = T::zero();
        for (a, b) in p.data().iter().zip(t.data()) {
            let d = *a - *b;
            acc += d * d;
        }
        let value = Tensor::scalar(acc / T::lit(p.len() as f64));
        self.finish("mse", value, Op::Mse { pred, target }, &[pred, target])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NnError> {
        let mut acc = T::zero();
        for &v in self.check(x)?.value.data() {
            acc += v;
        }
        self.finish("sum", Tensor::scalar(acc), Op::Sum(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let av = &self.check(a)?.value;
        let bv = &self.check(b)?.value;
        if av.shape() != bv.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x + *y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.finish("add", value, Op::Add(a, b), &[a, b])
    }

    /// Concatenates 2-d tensors `[n, w_i]` along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        if parts.is_empty() {
            return Err(shape_err("concat", "nothing to concatenate"));
        }
        let mut widths = Vec::with_capacity(parts.len());
        let mut n = None;
        for &p in parts {
            let [pn, pw] = dims2("concat", self.check(p)?.value.shape())?;
            if *n.get_or_insert(pn) != pn {
                return Err(shape_err("concat", "batch sizes differ"));
            }
            widths.push(pw);
        }
        let n = n.unwrap_or(0);
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for s in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value.data()[s * w..][..w]);
            }
        }
        let value = Tensor::new(vec![n, total], out)?;
        self.finish("concat", value, Op::Concat { parts: parts.to_vec() }, parts)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        let value = self.check(x)?.value.clone().reshaped(shape)?;
        self.finish("reshape", value, Op::Reshape(x), &[x])
    }

    /// Reverse pass from a scalar `loss`. Every node that depends on a
    /// differentiable leaf receives a gradient; fan-out accumulates additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NnError> {
        let node = self.check(loss)?;
        if node.value.len() != 1 {
            return Err(NnError::NonScalarLoss(node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(node.value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<(), NnError> {
        if !g.all_finite() {
            return Err(NnError::NonFinite { op: "backward" });
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn zeros_like(&self, v: Var) -> Vec<T> {
        vec![T::zero(); self.nodes[v.0].value.len()]
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<(), NnError> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, plan } | Op::Deconv2d { x, w, b, plan } => {
                let transposed = matches!(node.op, Op::Deconv2d { .. });
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let mut dx = self.wants(*x).then(|| self.zeros_like(*x));
                let mut dw = self.wants(*w).then(|| self.zeros_like(*w));
                let mut db = self.wants(*b).then(|| self.zeros_like(*b));
                let f = if transposed { kernels::deconv_backward } else { kernels::conv_backward };
                f(
                    plan,
                    xv.data(),
                    wv.data(),
                    gd,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, d) in [(*x, dx), (*w, dw), (*b, db)] {
                    if let Some(d) = d {
                        let t = Tensor::new(self.nodes[v.0].value.shape().to_vec(), d)?;
                        self.accumulate(grads, v, t)?;
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let shape = node.value.shape();
                let (n, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let gam = self.nodes[gamma.0].value.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let (mut sg, mut sgx) = (T::zero(), T::zero());
                    for s in 0..n {
                        let off = (s * c + ch) * spatial;
                        for k in off..off + spatial {
                            sg += gd[k];
                            sgx += gd[k] * xhat[k];
                        }
                    }
                    dbeta[ch] = sg;
                    dgamma[ch] = sgx;
                }
                if self.wants(*x) {
                    let mut dx = self.zeros_like(*x);
                    if *train {
                        let m = T::lit((n * spatial) as f64);
                        for ch in 0..c {
                            // d xhat = g * gamma; sums of d xhat and d xhat * xhat
                            let s1 = dbeta[ch] * gam[ch];
                            let s2 = dgamma[ch] * gam[ch];
                            let scale = inv_std[ch] / m;
                            for s in 0..n {
                                let off = (s * c + ch) * spatial;
                                for k in off..off + spatial {
                                    let dxh = gd[k] * gam[ch];
                                    dx[k] = scale * (m * dxh - s1 - xhat[k] * s2);
                                }
                            }
                        }
                    } else {
                        for s in 0..n {
                            for ch in 0..c {
                                let off = (s * c + ch) * spatial;
                                let f = gam[ch] * inv_std[ch];
                                for k in off..off + spatial {
                                    dx[k] = gd[k] * f;
                                }
                            }
                        }
                    }
                    let t = Tensor::new(shape.to_vec(), dx)?;
                    self.accumulate(grads, *x, t)?;
                }
                if self.wants(*gamma) {
                    self.accumulate(grads, *gamma, Tensor::new(vec![c], dgamma)?)?;
                }
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, Tensor::new(vec![c], dbeta)?)?;
                }
            }
            Op::Linear { x, w, b } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (n, fin) = (xv.shape()[0], xv.shape()[1]);
                let fout = wv.shape()[0];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * fin];
                    for s in 0..n {
                        let row = &mut dx[s * fin..][..fin];
                        for o in 0..fout {
                            kernels::axpy(gd[s * fout + o], &wv.data()[o * fin..][..fin], row);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![n, fin], dx)?)?;
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    for o in 0..fout {
                        let row = &mut dw[o * fin..][..fin];
                        for s in 0..n {
                            kernels::axpy(gd[s * fout + o], &xv.data()[s * fin..][..fin], row);
                        }
                    }
                    self.accumulate(grads, *w, Tensor::new(vec![fout, fin], dw)?)?;
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); fout];
                    for s in 0..n {
                        for o in 0..fout {
                            db[o] += gd[s * fout + o];
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![fout], db)?)?;
                }
            }
            Op::Relu(x) => {
                let xd = self.nodes[x.0].value.data();
                let d = xd
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), d)?)?;
            }
            Op::Sigmoid(x) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&y, &gv)| gv * y * (T::one() - y))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), d)?)?;
            }
            Op::Tanh(x) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&y, &gv)| gv * (T::one() - y * y))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), d)?)?;
            }
            Op::Scale(x, c) => {
                let d = gd.iter().map(|&gv| gv * *c).collect();
                self.accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), d)?)?;
            }
            Op::Mse { pred, target } => {
                let p = &self.nodes[pred.0].value;
                let t = &self.nodes[target.0].value;
                let k = gd[0] * T::lit(2.0 / p.len() as f64);
                let diff: Vec<T> = p.data().iter().zip(t.data()).map(|(a, b)| k * (*a - *b)).collect();
                if self.wants(*target) {
                    let neg = diff.iter().map(|v| -*v).collect();
                    self.accumulate(grads, *target, Tensor::new(t.shape().to_vec(), neg)?)?;
                }
                if self.wants(*pred) {
                    self.accumulate(grads, *pred, Tensor::new(p.shape().to_vec(), diff)?)?;
                }
            }
            Op::Sum(x) => {
                let xs = self.nodes[x.0].value.shape();
                self.accumulate(grads, *x, Tensor::full(xs, gd[0]))?;
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        self.accumulate(grads, v, g.clone())?;
                    }
                }
            }
            Op::Concat { parts } => {
                let n = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(n * w);
                        for s in 0..n {
                            d.extend_from_slice(&gd[s * total + col..][..w]);
                        }
                        self.accumulate(grads, p, Tensor::new(vec![n, w], d)?)?;
                    }
                    col += w;
                }
            }
            Op::Reshape(x) => {
                let xs = self.nodes[x.0].value.shape();
                self.accumulate(grads, *x, g.clone().reshaped(xs)?)?;
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
