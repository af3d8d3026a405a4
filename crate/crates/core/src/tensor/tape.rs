use super::kernels::{self, ConvGeom};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How batch-norm obtains its normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BnMode {
    /// Batch statistics; the caller folds the returned [`BatchStats`] into the running ones.
    Train,
    /// Batch statistics without touching running statistics.
    BatchOnly,
    /// Running statistics (pure affine map).
    Inference,
}

/// Per-channel batch statistics produced by a batch-norm in [`BnMode::Train`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as folded into running statistics.
    pub var: Vec<f64>,
}

enum GradFn {
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Depthwise { x: Var, w: Var, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, k: usize, stride: usize },
    Identity { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch: bool },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Concat { parts: Vec<Var> },
    GlobalAvgPool { x: Var },
    Affine { x: Var, w: Var, b: Option<Var> },
    SoftmaxCe { logits: Var, probs: Vec<f64>, labels: Vec<usize> },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Exp { x: Var },
    LogSoftmax { x: Var },
    Pick { x: Var, indices: Vec<usize> },
    GatherRows { x: Var, rows: Vec<usize> },
    Sum { x: Var },
}

struct Node {
    value: Tensor,
    grad_fn: Option<GradFn>,
}

/// Linear record of primitive applications.
///
/// Values are appended in evaluation order, so every input precedes its consumers and
/// [`Tape::backward`] is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(kind: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { kind, detail }
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

    /// Records a leaf tensor; its `requires_grad` flag decides whether it receives a
    /// gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, grad_fn: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs: bool, grad_fn: impl FnOnce() -> GradFn) -> Var {
        let value = Tensor::new(shape, data).expect("primitive produced consistent shape").with_requires_grad(needs);
        let grad_fn = needs.then(grad_fn);
        self.nodes.push(Node { value, grad_fn });
        Var(self.nodes.len() - 1)
    }

    fn rank4(&self, kind: &'static str, v: Var) -> Result<[usize; 4]> {
        match *self.shape(v) {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(mismatch(kind, format!("expected (N,C,H,W) input, got {s:?}"))),
        }
    }

    /// Dense convolution, weight shape (C_out, C_in, kh, kw), "same" padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let [n, ci, h, wd] = self.rank4("conv2d", x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != ci {
            return Err(mismatch("conv2d", format!("weight {ws:?} incompatible with input channels {ci}")));
        }
        if stride == 0 {
            return Err(TensorError::BadAttr { kind: "conv2d", attr: "stride".into() });
        }
        let geom = ConvGeom::new(&[n, ci, h, wd], ws[0], ws[2], ws[3], stride);
        let out = kernels::conv2d_forward(self.data(x), self.data(w), &geom);
        let needs = self.rg(x) || self.rg(w);
        Ok(self.push(vec![n, geom.co, geom.ho, geom.wo], out, needs, || GradFn::Conv2d { x, w, geom }))
    }

    /// Depthwise convolution, weight shape (C, 1, k, k).
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let [n, c, h, wd] = self.rank4("depthwise_conv2d", x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != c || ws[1] != 1 {
            return Err(mismatch("depthwise_conv2d", format!("weight {ws:?} incompatible with input channels {c}")));
        }
        if stride == 0 {
            return Err(TensorError::BadAttr { kind: "depthwise_conv2d", attr: "stride".into() });
        }
        let geom = ConvGeom::new(&[n, c, h, wd], c, ws[2], ws[3], stride);
        let out = kernels::depthwise_forward(self.data(x), self.data(w), &geom);
        let needs = self.rg(x) || self.rg(w);
        Ok(self.push(vec![n, c, geom.ho, geom.wo], out, needs, || GradFn::Depthwise { x, w, geom }))
    }

    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.rank4("max_pool", x)?;
        if stride == 0 || k == 0 {
            return Err(TensorError::BadAttr { kind: "max_pool", attr: "stride".into() });
        }
        let (out, argmax, ho, wo) = kernels::max_pool_forward(self.data(x), &s, k, stride);
        let needs = self.rg(x);
        Ok(self.push(vec![s[0], s[1], ho, wo], out, needs, || GradFn::MaxPool { x, argmax }))
    }

    pub fn avg_pool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.rank4("avg_pool", x)?;
        if stride == 0 || k == 0 {
            return Err(TensorError::BadAttr { kind: "avg_pool", attr: "stride".into() });
        }
        let (out, ho, wo) = kernels::avg_pool_forward(self.data(x), &s, k, stride);
        let needs = self.rg(x);
        Ok(self.push(vec![s[0], s[1], ho, wo], out, needs, || GradFn::AvgPool { x, k, stride }))
    }

    pub fn identity(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (shape, data, needs) = (t.shape().to_vec(), t.data().to_vec(), t.requires_grad());
        self.push(shape, data, needs, || GradFn::Identity { x })
    }

    /// Batch normalization over all axes except axis 1. `running` supplies
    /// `(mean, var)` and is required in [`BnMode::Inference`].
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        mode: BnMode,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(mismatch("batch_norm", format!("input {xs:?} needs a channel axis")));
        }
        let (n, c) = (xs[0], xs[1]);
        let sp: usize = xs[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(mismatch("batch_norm", format!("{name} {:?} != [{c}]", self.shape(v))));
            }
        }
        let count = (n * sp) as f64;
        let xd = self.data(x);
        let (mean, var_b) = match mode {
            BnMode::Inference => {
                let (rm, rv) = running.ok_or(TensorError::BadAttr { kind: "batch_norm", attr: "running".into() })?;
                if rm.len() != c || rv.len() != c {
                    return Err(mismatch("batch_norm", format!("running stats length != {c}")));
                }
                (rm.to_vec(), rv.to_vec())
            }
            BnMode::Train | BnMode::BatchOnly => {
                let mut mean = vec![0.0; c];
                kernels::channel_reduce(xd, n, c, sp, |ci, s| mean[ci] += s.iter().sum::<f64>());
                mean.iter_mut().for_each(|m| *m /= count);
                let mut var = vec![0.0; c];
                kernels::channel_reduce(xd, n, c, sp, |ci, s| {
                    var[ci] += s.iter().map(|v| (v - mean[ci]) * (v - mean[ci])).sum::<f64>()
                });
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var_b.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * sp;
                for i in off..off + sp {
                    let h = (xd[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = g[ci] * h + b[ci];
                }
            }
        }
        let stats = (mode == BnMode::Train).then(|| BatchStats {
            var: var_b.iter().map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v }).collect(),
            mean: mean.clone(),
        });
        let needs = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let batch = mode != BnMode::Inference;
        let v = self.push(xs, out, needs, || GradFn::BatchNorm { x, gamma, beta, xhat, inv_std, batch });
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let (shape, needs) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, out, needs, || GradFn::Relu { x })
    }

    fn same_shape(&self, kind: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(kind, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let (shape, needs) = (self.shape(a).to_vec(), self.rg(a) || self.rg(b));
        Ok(self.push(shape, out, needs, || GradFn::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let (shape, needs) = (self.shape(a).to_vec(), self.rg(a) || self.rg(b));
        Ok(self.push(shape, out, needs, || GradFn::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * c).collect();
        let (shape, needs) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, out, needs, || GradFn::Scale { x, c })
    }

    /// Concatenation along axis 1; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Arity { kind: "concat", expected: 1, got: 0 })?;
        let s0 = self.shape(first).to_vec();
        if s0.len() < 2 {
            return Err(mismatch("concat", format!("input {s0:?} has no axis 1")));
        }
        let mut chans = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(mismatch("concat", format!("{s:?} incompatible with {s0:?} outside axis 1")));
            }
            chans += s[1];
        }
        let n = s0[0];
        let inner: usize = s0[2..].iter().product();
        let mut out = Vec::with_capacity(n * chans * inner);
        for ni in 0..n {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.data(p)[ni * c * inner..(ni + 1) * c * inner]);
            }
        }
        let mut shape = s0;
        shape[1] = chans;
        let needs = parts.iter().any(|&p| self.rg(p));
        let parts = parts.to_vec();
        Ok(self.push(shape, out, needs, || GradFn::Concat { parts }))
    }

    /// (N, C, H, W) -> (N, C)
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.rank4("global_avg_pool", x)?;
        let sp = h * w;
        let out = self.data(x).chunks(sp).map(|p| p.iter().sum::<f64>() / sp as f64).collect();
        let needs = self.rg(x);
        Ok(self.push(vec![n, c], out, needs, || GradFn::GlobalAvgPool { x }))
    }

    /// `x (N, D) * w^T + b` with `w` of shape (O, D) and optional `b` of shape (O).
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(mismatch("affine", format!("input {xs:?} vs weight {ws:?}")));
        }
        let (n, d, o) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(mismatch("affine", format!("bias {:?} != [{o}]", self.shape(b))));
            }
        }
        let mut out = vec![0.0; n * o];
        if let Some(b) = b {
            for row in out.chunks_mut(o) {
                row.copy_from_slice(self.data(b));
            }
        }
        kernels::gemm_a_bt(self.data(x), self.data(w), &mut out, n, d, o);
        let needs = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![n, o], out, needs, || GradFn::Affine { x, w, b }))
    }

    /// Mean softmax cross-entropy of (N, K) logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(mismatch("softmax_cross_entropy", format!("logits {s:?} vs {} labels", labels.len())));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(mismatch("softmax_cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; s[0] * k];
        let mut loss = 0.0;
        for (i, row) in self.data(logits).chunks(k).enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - m).exp() / z;
            }
            loss += z.ln() + m - row[labels[i]];
        }
        loss /= s[0] as f64;
        let needs = self.rg(logits);
        let labels = labels.to_vec();
        Ok(self.push(vec![1], vec![loss], needs, || GradFn::SoftmaxCe { logits, probs, labels }))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, g: impl FnOnce() -> GradFn) -> Var {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let (shape, needs) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, out, needs, g)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), || GradFn::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, || GradFn::Tanh { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, || GradFn::Exp { x })
    }

    /// Row-wise log-softmax over the last axis of a 2-D tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(mismatch("log_softmax", format!("expected 2-D input, got {s:?}")));
        }
        let mut out = Vec::with_capacity(s[0] * s[1]);
        for row in self.data(x).chunks(s[1]) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lz = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            out.extend(row.iter().map(|v| v - lz));
        }
        let needs = self.rg(x);
        Ok(self.push(s, out, needs, || GradFn::LogSoftmax { x }))
    }

    /// Selects `x[i, indices[i]]` from a 2-D tensor, giving shape (N).
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != indices.len() || indices.iter().any(|&i| i >= s[1]) {
            return Err(mismatch("pick", format!("indices {indices:?} invalid for {s:?}")));
        }
        let out = indices.iter().enumerate().map(|(r, &i)| self.data(x)[r * s[1] + i]).collect();
        let needs = self.rg(x);
        let indices = indices.to_vec();
        Ok(self.push(vec![s[0]], out, needs, || GradFn::Pick { x, indices }))
    }

    /// Selects rows of a 2-D tensor.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= s[0]) {
            return Err(mismatch("gather_rows", format!("rows {rows:?} invalid for {s:?}")));
        }
        let mut out = Vec::with_capacity(rows.len() * s[1]);
        for &r in rows {
            out.extend_from_slice(&self.data(x)[r * s[1]..(r + 1) * s[1]]);
        }
        let needs = self.rg(x);
        let rows = rows.to_vec();
        Ok(self.push(vec![rows.len(), s[1]], out, needs, || GradFn::GatherRows { x, rows }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        let needs = self.rg(x);
        self.push(vec![1], vec![total], needs, || GradFn::Sum { x })
    }

    /// Reverse sweep from a scalar `loss`. Every recorded tensor with `requires_grad`
    /// receives a gradient; those without a path to `loss` receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(f) = &self.nodes[i].grad_fn {
                self.propagate(f, i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if node.value.requires_grad() {
                let g = grads.get_mut(i).and_then(Option::take).unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.set_grad(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, f: &GradFn, out: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let y = self.nodes[out].value.data();
        match f {
            GradFn::Conv2d { x, w, geom } => {
                let (dx, dw) =
                    kernels::conv2d_backward(self.data(*x), self.data(*w), g, geom, self.rg(*x), self.rg(*w));
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
            }
            GradFn::Depthwise { x, w, geom } => {
                let (dx, dw) =
                    kernels::depthwise_backward(self.data(*x), self.data(*w), g, geom, self.rg(*x), self.rg(*w));
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
            }
            GradFn::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (&i, &gv) in argmax.iter().zip(g) {
                    dx[i] += gv;
                }
                acc(*x, dx);
            }
            GradFn::AvgPool { x, k, stride } => {
                acc(*x, kernels::avg_pool_backward(g, self.shape(*x), *k, *stride));
            }
            GradFn::Identity { x } => acc(*x, g.to_vec()),
            GradFn::BatchNorm { x, gamma, beta, xhat, inv_std, batch } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let sp: usize = xs[2..].iter().product();
                let m = (n * sp) as f64;
                let mut dbeta = vec![0.0; c];
                let mut dgamma = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * sp;
                        for i in off..off + sp {
                            dbeta[ci] += g[i];
                            dgamma[ci] += g[i] * xhat[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let gam = self.data(*gamma);
                    let mut dx = vec![0.0; g.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * sp;
                            let scale = gam[ci] * inv_std[ci];
                            for i in off..off + sp {
                                dx[i] = if *batch {
                                    scale * (g[i] - dbeta[ci] / m - xhat[i] * dgamma[ci] / m)
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                    acc(*x, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            GradFn::Relu { x } => {
                acc(*x, g.iter().zip(y).map(|(gv, yv)| if *yv > 0.0 { *gv } else { 0.0 }).collect());
            }
            GradFn::Add { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            GradFn::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, g.iter().zip(bd).map(|(gv, bv)| gv * bv).collect());
                acc(*b, g.iter().zip(ad).map(|(gv, av)| gv * av).collect());
            }
            GradFn::Scale { x, c } => acc(*x, g.iter().map(|v| v * c).collect()),
            GradFn::Concat { parts } => {
                let s0 = self.shape(parts[0]);
                let n = s0[0];
                let inner: usize = s0[2..].iter().product();
                let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(n * c * inner);
                        for ni in 0..n {
                            let start = (ni * total + offset) * inner;
                            d.extend_from_slice(&g[start..start + c * inner]);
                        }
                        acc(p, d);
                    }
                    offset += c;
                }
            }
            GradFn::GlobalAvgPool { x } => {
                let s = self.shape(*x);
                let sp = s[2] * s[3];
                let mut dx = Vec::with_capacity(self.value(*x).numel());
                for &gv in g {
                    dx.extend(std::iter::repeat_n(gv / sp as f64, sp));
                }
                acc(*x, dx);
            }
            GradFn::Affine { x, w, b } => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * d];
                    kernels::gemm(g, self.data(*w), &mut dx, n, o, d);
                    acc(*x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; o * d];
                    kernels::gemm_at_b(g, self.data(*x), &mut dw, o, n, d);
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; o];
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    acc(*b, db);
                }
            }
            GradFn::SoftmaxCe { logits, probs, labels } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= scale;
                }
                acc(*logits, d);
            }
            GradFn::Sigmoid { x } => acc(*x, g.iter().zip(y).map(|(gv, s)| gv * s * (1.0 - s)).collect()),
            GradFn::Tanh { x } => acc(*x, g.iter().zip(y).map(|(gv, t)| gv * (1.0 - t * t)).collect()),
            GradFn::Exp { x } => acc(*x, g.iter().zip(y).map(|(gv, e)| gv * e).collect()),
            GradFn::LogSoftmax { x } => {
                let k = self.shape(*x)[1];
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(k).zip(y.chunks(k)) {
                    let gs: f64 = gr.iter().sum();
                    dx.extend(gr.iter().zip(yr).map(|(gv, lv)| gv - lv.exp() * gs));
                }
                acc(*x, dx);
            }
            GradFn::Pick { x, indices } => {
                let k = self.shape(*x)[1];
                let mut dx = vec![0.0; indices.len() * k];
                for (r, &i) in indices.iter().enumerate() {
                    dx[r * k + i] = g[r];
                }
                acc(*x, dx);
            }
            GradFn::GatherRows { x, rows } => {
                let d = self.shape(*x)[1];
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (j, &r) in rows.iter().enumerate() {
                    dx[r * d..(r + 1) * d].iter_mut().zip(&g[j * d..(j + 1) * d]).for_each(|(a, b)| *a += b);
                }
                acc(*x, dx);
            }
            GradFn::Sum { x } => acc(*x, vec![g[0]; self.value(*x).numel()]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gives_all_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(vec![2, 3, 4], |i| i as f64 * 0.3 - 1.0));
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let logits = [0.3, -1.2, 2.0, 0.5];
        let x = tape.param(t(&[1, 4], &logits));
        let l = tape.softmax_cross_entropy(x, &[2]).unwrap();
        tape.backward(l).unwrap();
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        for (j, g) in tape.grad(x).unwrap().iter().enumerate() {
            let expect = logits[j].exp() / z - if j == 2 { 1.0 } else { 0.0 };
            assert!((g - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_classes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![3, 10]));
        let l = tape.softmax_cross_entropy(x, &[0, 4, 9]).unwrap();
        assert!((tape.data(l)[0] - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unreachable_param_gets_zero_grad() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2], &[1.0, 2.0]));
        let b = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let l = tape.sum(a);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2], &[1.0, 2.0]));
        assert_eq!(tape.backward(a), Err(TensorError::NonScalarLoss(vec![2])));
    }

    #[test]
    fn identity_is_bitwise_copy() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(vec![1, 16, 32, 32], |i| (i as f64).sin()));
        let y = tape.identity(x);
        assert_eq!(tape.shape(y), &[1, 16, 32, 32]);
        assert_eq!(tape.data(x), tape.data(y));
    }

    #[test]
    fn conv_shape_mismatch_names_kind() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 8, 8]));
        let w = tape.constant(Tensor::zeros(vec![4, 2, 3, 3]));
        match tape.conv2d(x, w, 1) {
            Err(TensorError::ShapeMismatch { kind, detail }) => {
                assert_eq!(kind, "conv2d");
                assert!(detail.contains('3'));
            }
            other => panic!("unexpected {other:?}", other = other.map(|v| v.index())),
        }
    }

    #[test]
    fn batch_norm_inference_is_deterministic_affine() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(vec![2, 3, 2, 2], |i| i as f64 * 0.1));
        let g = tape.constant(t(&[3], &[1.0, 2.0, 0.5]));
        let b = tape.constant(t(&[3], &[0.0, 1.0, -1.0]));
        let rm = [0.1, 0.2, 0.3];
        let rv = [1.0, 4.0, 0.25];
        let (y1, s1) = tape.batch_norm(x, g, b, Some((&rm, &rv)), BnMode::Inference, 1e-5).unwrap();
        let (y2, _) = tape.batch_norm(x, g, b, Some((&rm, &rv)), BnMode::Inference, 1e-5).unwrap();
        assert!(s1.is_none());
        assert_eq!(tape.data(y1), tape.data(y2));
        let expect = 2.0 * (tape.data(x)[4] - 0.2) / (4.0f64 + 1e-5).sqrt() + 1.0;
        assert!((tape.data(y1)[4] - expect).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(vec![4, 2, 3, 3], |i| ((i * 37) % 11) as f64));
        let g = tape.constant(Tensor::full(vec![2], 1.0));
        let b = tape.constant(Tensor::zeros(vec![2]));
        let (y, stats) = tape.batch_norm(x, g, b, None, BnMode::Train, 0.0).unwrap();
        assert!(stats.is_some());
        let d = tape.data(y);
        let mut sum = [0.0; 2];
        for n in 0..4 {
            for c in 0..2 {
                sum[c] += d[(n * 2 + c) * 9..(n * 2 + c + 1) * 9].iter().sum::<f64>();
            }
        }
        assert!(sum.iter().all(|s| s.abs() < 1e-9));
    }
}
