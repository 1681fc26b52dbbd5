//! A small tape-based reverse-mode automatic differentiation engine.
//!
//! Every operation is evaluated eagerly when it is recorded; the tape only
//! remembers enough to run the backward pass. Nodes are appended in
//! topological order, so a backward sweep is a reverse scan of the tape.
//!
//! Gradients never flow into constants. [`Graph::detach`] turns any
//! intermediate value into a constant, which is how stop-gradient boundaries
//! are expressed.

pub mod kernels;

use crate::fusion;
use crate::tensor::{gemm, Tensor};
pub use kernels::ConvGeom;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Target of a pixel-wise cross-entropy.
#[derive(Debug, Clone)]
pub enum CeTarget {
    /// Class index per pixel (`n·h·w` entries); `ignore` entries are skipped.
    Hard { labels: Vec<u8>, ignore: u8 },
    /// Per-pixel distribution in NCHW layout plus a per-pixel inclusion flag.
    Soft { probs: Vec<f64>, include: Vec<bool> },
}

/// Normalization statistics mode for batch normalization.
#[derive(Debug, Clone)]
pub enum BnMode {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed running statistics.
    Running { mean: Vec<f64>, var: Vec<f64> },
}

/// Layout of a batch-normalized input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnLayout {
    /// (n, c, h, w), statistics over n, h, w.
    Nchw,
    /// (rows, c), statistics over rows.
    Rows,
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, layout: BnLayout, xhat: Vec<f64>, invstd: Vec<f64>, batch: bool },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    ConcatChannels { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    Resize { x: Var },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var, trans_b: bool },
    SoftmaxRows { x: Var },
    RowsToNchw { x: Var },
    NchwToRows { x: Var },
    CrossEntropy { logits: Var, target: CeTarget, count: usize },
    BceWithLogits { logits: Var, targets: Vec<f64> },
    Fuse { p: Var, m: Var, gamma: f64, temperature: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, with absent gradients reported as zeros of length `len`.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }

    /// True if `v` received no gradient or an identically zero one.
    pub fn is_zero(&self, v: Var) -> bool {
        self.get(v).map_or(true, |g| g.iter().all(|&x| x == 0.0))
    }
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d weight must be (cout, cin, k, k)");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        assert_eq!(ws[2], geom.kernel);
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ws[0];
        let (ho, wo) = geom.output_size(h, wd);
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            cin,
            h,
            wd,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            cout,
            geom,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(vec![n, cout, ho, wo], out), Op::Conv2d { x, w, b, geom }, rg)
    }

    /// Batch normalization with per-channel affine parameters. With
    /// [`BnMode::Batch`] the batch mean and (biased) variance are returned so
    /// the caller can update running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        mode: BnMode,
    ) -> (Var, Option<(Vec<f64>, Vec<f64>)>) {
        let shape = self.shape(x).to_vec();
        let (c, groups, plane) = match layout {
            BnLayout::Nchw => (shape[1], shape[0], shape[2] * shape[3]),
            BnLayout::Rows => (shape[1], shape[0], 1),
        };
        let count = (groups * plane) as f64;
        let xv = self.value(x).data();
        let idx = |g: usize, ch: usize, p: usize| (g * c + ch) * plane + p;
        let (mean, var, batch) = match mode {
            BnMode::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for g in 0..groups {
                        for p in 0..plane {
                            s += xv[idx(g, ch, p)];
                        }
                    }
                    let m = s / count;
                    let mut v = 0.0;
                    for g in 0..groups {
                        for p in 0..plane {
                            let d = xv[idx(g, ch, p)] - m;
                            v += d * d;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = v / count;
                }
                (mean, var, true)
            }
            BnMode::Running { mean, var } => (mean, var, false),
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for g in 0..groups {
            for ch in 0..c {
                for p in 0..plane {
                    let i = idx(g, ch, p);
                    let xh = (xv[i] - mean[ch]) * invstd[ch];
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let stats = batch.then(|| (mean, var));
        let v = self.push(
            Tensor::new(shape, out),
            Op::BatchNorm { x, gamma, beta, layout, xhat, invstd, batch },
            rg,
        );
        (v, stats)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let data: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data), Op::Add { a, b }, rg)
    }

    /// Sum of several equally shaped values.
    pub fn sum_all(&mut self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let s0 = self.shape(parts[0]).to_vec();
        let (n, h, w) = (s0[0], s0[2], s0[3]);
        let plane = h * w;
        let total_c: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for &p in parts {
                let s = self.shape(p);
                assert!(s[0] == n && s[2] == h && s[3] == w, "concat_channels: shape mismatch");
                let c = s[1];
                out.extend_from_slice(&self.value(p).data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(vec![n, total_c, h, w], out), Op::ConcatChannels { parts: parts.to_vec() }, rg)
    }

    /// Stacks 2-D (rows, cols) values vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0])[1];
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(s.len() == 2 && s[1] == cols, "concat_rows: shape mismatch");
            rows += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(vec![rows, cols], out), Op::ConcatRows { parts: parts.to_vec() }, rg)
    }

    /// Bilinear resize of an NCHW value to spatial size (ho, wo).
    pub fn resize(&mut self, x: Var, ho: usize, wo: usize) -> Var {
        let s = self.shape(x).to_vec();
        let out = kernels::resize_forward(self.value(x).data(), s[0] * s[1], s[2], s[3], ho, wo);
        let rg = self.rg(x);
        self.push(Tensor::new(vec![s[0], s[1], ho, wo], out), Op::Resize { x }, rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let plane = s[2] * s[3];
        let out: Vec<f64> =
            self.value(x).data().chunks(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![s[0], s[1]], out), Op::GlobalAvgPool { x }, rg)
    }

    /// `x (n×d) · w (d×k) + b (k)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, d) = (self.shape(x)[0], self.shape(x)[1]);
        let k = self.shape(w)[1];
        assert_eq!(self.shape(w)[0], d, "linear: inner dimension mismatch");
        let mut out = vec![0.0; n * k];
        gemm(n, d, k, 1.0, self.value(x).data(), false, self.value(w).data(), false, 0.0, &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(k) {
                row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(vec![n, k], out), Op::Linear { x, w, b }, rg)
    }

    /// `a (m×k) · b`, where `b` is (k×n), or (n×k) when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (bk, n) = if trans_b {
            (self.shape(b)[1], self.shape(b)[0])
        } else {
            (self.shape(b)[0], self.shape(b)[1])
        };
        assert_eq!(k, bk, "matmul: inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a).data(), false, self.value(b).data(), trans_b, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul { a, b, trans_b }, rg)
    }

    /// Softmax over the last axis of a 2-D value.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(s[1]) {
            kernels::softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(s, out), Op::SoftmaxRows { x }, rg)
    }

    /// (n·h·w, c) rows, image-major then row-major pixels, to NCHW.
    pub fn rows_to_nchw(&mut self, x: Var, n: usize, h: usize, w: usize) -> Var {
        let c = self.shape(x)[1];
        assert_eq!(self.shape(x)[0], n * h * w);
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * plane];
        for b in 0..n {
            for p in 0..plane {
                for k in 0..c {
                    out[(b * c + k) * plane + p] = src[(b * plane + p) * c + k];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, c, h, w], out), Op::RowsToNchw { x }, rg)
    }

    /// NCHW to (n·h·w, c) rows.
    pub fn nchw_to_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * plane];
        for b in 0..n {
            for k in 0..c {
                for p in 0..plane {
                    out[(b * plane + p) * c + k] = src[(b * c + k) * plane + p];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n * plane, c], out), Op::NchwToRows { x }, rg)
    }

    /// Mean pixel-wise cross-entropy of NCHW logits. Returns 0 (with zero
    /// gradient) when no pixel is included.
    pub fn cross_entropy(&mut self, logits: Var, target: CeTarget) -> Var {
        let s = self.shape(logits).to_vec();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let lv = self.value(logits).data();
        let mut buf = vec![0.0; c];
        let mut logp = vec![0.0; c];
        let mut total = 0.0;
        let mut count = 0usize;
        for b in 0..n {
            for p in 0..plane {
                let pix = b * plane + p;
                match &target {
                    CeTarget::Hard { labels, ignore } => {
                        let y = labels[pix];
                        if y == *ignore {
                            continue;
                        }
                        kernels::gather_pixel(lv, b, c, plane, p, &mut buf);
                        kernels::log_softmax(&buf, &mut logp);
                        total -= logp[y as usize];
                    }
                    CeTarget::Soft { probs, include } => {
                        if !include[pix] {
                            continue;
                        }
                        kernels::gather_pixel(lv, b, c, plane, p, &mut buf);
                        kernels::log_softmax(&buf, &mut logp);
                        for k in 0..c {
                            let t = probs[(b * c + k) * plane + p];
                            if t != 0.0 {
                                total -= t * logp[k];
                            }
                        }
                    }
                }
                count += 1;
            }
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(logits);
        self.push(Tensor::scalar(value), Op::CrossEntropy { logits, target, count }, rg)
    }

    /// Mean binary cross-entropy with logits over all entries.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<f64>) -> Var {
        let lv = self.value(logits).data();
        assert_eq!(lv.len(), targets.len());
        let total: f64 = lv
            .iter()
            .zip(&targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let value = if lv.is_empty() { 0.0 } else { total / lv.len() as f64 };
        let rg = self.rg(logits);
        self.push(Tensor::scalar(value), Op::BceWithLogits { logits, targets }, rg)
    }

    /// Calibrated fusion of two NCHW logit maps into a per-pixel distribution.
    pub fn fuse(&mut self, p: Var, m: Var, gamma: f64, temperature: f64) -> Var {
        assert_eq!(self.shape(p), self.shape(m), "fuse: shape mismatch");
        let s = self.shape(p).to_vec();
        let out = fusion::fuse_nchw(self.value(p).data(), self.value(m).data(), &s, gamma, temperature);
        let rg = self.rg(p) || self.rg(m);
        self.push(Tensor::new(s, out), Op::Fuse { p, m, gamma, temperature }, rg)
    }

    /// Backward pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        self.backward_with(root, Tensor::scalar(1.0), None)
    }

    /// Backward pass seeded with `seed` at `root`. If `floor` is given, nodes
    /// created before it are not expanded, which bounds the work when only
    /// gradients with respect to `floor` or later nodes are needed.
    pub fn backward_with(&self, root: Var, seed: Tensor, floor: Option<Var>) -> Gradients {
        assert_eq!(seed.len(), self.value(root).len());
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.rg(root) {
            return Gradients { grads };
        }
        grads[root.0] = Some(seed.into_data());
        let stop = floor.map_or(0, |f| f.0 + 1);
        for i in (stop..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let xs = self.shape(*x);
                let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let cout = self.shape(*w)[0];
                let (mut dx, mut dw, mut db) = (None, None, None);
                if self.rg(*x) {
                    dx = Some(grads[x.0].take().unwrap_or_else(|| vec![0.0; n * cin * h * wd]));
                }
                if self.rg(*w) {
                    dw = Some(grads[w.0].take().unwrap_or_else(|| vec![0.0; self.value(*w).len()]));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    db = Some(grads[b.0].take().unwrap_or_else(|| vec![0.0; cout]));
                }
                kernels::conv2d_backward(
                    self.value(*x).data(),
                    n,
                    cin,
                    h,
                    wd,
                    self.value(*w).data(),
                    cout,
                    *geom,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    grads[x.0] = Some(dx);
                }
                if let Some(dw) = dw {
                    grads[w.0] = Some(dw);
                }
                if let (Some(db), Some(b)) = (db, b) {
                    grads[b.0] = Some(db);
                }
            }
            Op::BatchNorm { x, gamma, beta, layout, xhat, invstd, batch } => {
                let shape = self.shape(*x);
                let (c, groups, plane) = match layout {
                    BnLayout::Nchw => (shape[1], shape[0], shape[2] * shape[3]),
                    BnLayout::Rows => (shape[1], shape[0], 1),
                };
                let idx = |gr: usize, ch: usize, p: usize| (gr * c + ch) * plane + p;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for gr in 0..groups {
                    for ch in 0..c {
                        for p in 0..plane {
                            let k = idx(gr, ch, p);
                            dgamma[ch] += g[k] * xhat[k];
                            dbeta[ch] += g[k];
                        }
                    }
                }
                if self.rg(*x) {
                    let len = g.len();
                    let dx = acc(&mut grads[x.0], len);
                    let m = (groups * plane) as f64;
                    for ch in 0..c {
                        let scale = gv[ch] * invstd[ch];
                        if *batch {
                            // dx = γ·σ⁻¹/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
                            let (sdy, sdyx) = (dbeta[ch], dgamma[ch]);
                            for gr in 0..groups {
                                for p in 0..plane {
                                    let k = idx(gr, ch, p);
                                    dx[k] += scale * (g[k] - sdy / m - xhat[k] * sdyx / m);
                                }
                            }
                        } else {
                            for gr in 0..groups {
                                for p in 0..plane {
                                    let k = idx(gr, ch, p);
                                    dx[k] += scale * g[k];
                                }
                            }
                        }
                    }
                }
                if self.rg(*gamma) {
                    acc(&mut grads[gamma.0], c).iter_mut().zip(&dgamma).for_each(|(a, b)| *a += b);
                }
                if self.rg(*beta) {
                    acc(&mut grads[beta.0], c).iter_mut().zip(&dbeta).for_each(|(a, b)| *a += b);
                }
            }
            Op::Relu { x } => {
                if self.rg(*x) {
                    let xv = self.value(*x).data();
                    let dx = acc(&mut grads[x.0], g.len());
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.rg(*v) {
                        acc(&mut grads[v.0], g.len()).iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if self.rg(*x) {
                    acc(&mut grads[x.0], g.len()).iter_mut().zip(g).for_each(|(d, gi)| *d += gi * factor);
                }
            }
            Op::ConcatChannels { parts } => {
                let s = node.value.shape();
                let (n, total_c, plane) = (s[0], s[1], s[2] * s[3]);
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.rg(p) {
                        let len = self.value(p).len();
                        let dp = acc(&mut grads[p.0], len);
                        for b in 0..n {
                            let src = &g[(b * total_c + offset) * plane..(b * total_c + offset + c) * plane];
                            dp[b * c * plane..(b + 1) * c * plane]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        acc(&mut grads[p.0], len)
                            .iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(d, s)| *d += s);
                    }
                    offset += len;
                }
            }
            Op::Resize { x } => {
                if self.rg(*x) {
                    let s = self.shape(*x);
                    let so = node.value.shape();
                    let len = self.value(*x).len();
                    let dx = acc(&mut grads[x.0], len);
                    kernels::resize_backward(g, s[0] * s[1], s[2], s[3], so[2], so[3], dx);
                }
            }
            Op::GlobalAvgPool { x } => {
                if self.rg(*x) {
                    let s = self.shape(*x);
                    let plane = s[2] * s[3];
                    let len = self.value(*x).len();
                    let dx = acc(&mut grads[x.0], len);
                    for (chunk, gi) in dx.chunks_mut(plane).zip(g) {
                        let v = gi / plane as f64;
                        chunk.iter_mut().for_each(|d| *d += v);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let k = self.shape(*w)[1];
                if self.rg(*x) {
                    let dx = acc(&mut grads[x.0], n * d);
                    gemm(n, k, d, 1.0, g, false, self.value(*w).data(), true, 1.0, dx);
                }
                if self.rg(*w) {
                    let dw = acc(&mut grads[w.0], d * k);
                    gemm(d, n, k, 1.0, self.value(*x).data(), true, g, false, 1.0, dw);
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let db = acc(&mut grads[b.0], k);
                    for row in g.chunks(k) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = node.value.shape()[1];
                if self.rg(*a) {
                    // dA = dC · Bᵀ; B stored (k×n) or, when trans_b, (n×k).
                    let da = acc(&mut grads[a.0], m * k);
                    gemm(m, n, k, 1.0, g, false, self.value(*b).data(), !trans_b, 1.0, da);
                }
                if self.rg(*b) {
                    let db = acc(&mut grads[b.0], k * n);
                    if *trans_b {
                        // B (n×k): dB = dCᵀ · A
                        gemm(n, m, k, 1.0, g, true, self.value(*a).data(), false, 1.0, db);
                    } else {
                        gemm(k, m, n, 1.0, self.value(*a).data(), true, g, false, 1.0, db);
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                if self.rg(*x) {
                    let cols = node.value.shape()[1];
                    let y = node.value.data();
                    let len = y.len();
                    let dx = acc(&mut grads[x.0], len);
                    for ((dr, yr), gr) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::RowsToNchw { x } => {
                if self.rg(*x) {
                    let s = node.value.shape();
                    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                    let dx = acc(&mut grads[x.0], g.len());
                    for b in 0..n {
                        for p in 0..plane {
                            for k in 0..c {
                                dx[(b * plane + p) * c + k] += g[(b * c + k) * plane + p];
                            }
                        }
                    }
                }
            }
            Op::NchwToRows { x } => {
                if self.rg(*x) {
                    let s = self.shape(*x);
                    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                    let dx = acc(&mut grads[x.0], g.len());
                    for b in 0..n {
                        for k in 0..c {
                            for p in 0..plane {
                                dx[(b * c + k) * plane + p] += g[(b * plane + p) * c + k];
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, target, count } => {
                if !self.rg(*logits) || *count == 0 {
                    return;
                }
                let s = self.shape(*logits);
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let lv = self.value(*logits).data();
                let scale = g[0] / *count as f64;
                let len = lv.len();
                let dl = acc(&mut grads[logits.0], len);
                let mut buf = vec![0.0; c];
                for b in 0..n {
                    for p in 0..plane {
                        let pix = b * plane + p;
                        match target {
                            CeTarget::Hard { labels, ignore } => {
                                let y = labels[pix];
                                if y == *ignore {
                                    continue;
                                }
                                kernels::gather_pixel(lv, b, c, plane, p, &mut buf);
                                kernels::softmax_in_place(&mut buf);
                                for k in 0..c {
                                    let t = if k == y as usize { 1.0 } else { 0.0 };
                                    dl[(b * c + k) * plane + p] += scale * (buf[k] - t);
                                }
                            }
                            CeTarget::Soft { probs, include } => {
                                if !include[pix] {
                                    continue;
                                }
                                kernels::gather_pixel(lv, b, c, plane, p, &mut buf);
                                let tsum: f64 = (0..c).map(|k| probs[(b * c + k) * plane + p]).sum();
                                kernels::softmax_in_place(&mut buf);
                                for k in 0..c {
                                    let t = probs[(b * c + k) * plane + p];
                                    dl[(b * c + k) * plane + p] += scale * (tsum * buf[k] - t);
                                }
                            }
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                if self.rg(*logits) && !targets.is_empty() {
                    let lv = self.value(*logits).data();
                    let scale = g[0] / lv.len() as f64;
                    let dl = acc(&mut grads[logits.0], lv.len());
                    for ((d, &z), &t) in dl.iter_mut().zip(lv).zip(targets) {
                        let sig = 1.0 / (1.0 + (-z).exp());
                        *d += scale * (sig - t);
                    }
                }
            }
            Op::Fuse { p, m, gamma, temperature } => {
                let s = self.shape(*p);
                let (dp, dm) = fusion::fuse_nchw_backward(
                    self.value(*p).data(),
                    self.value(*m).data(),
                    s,
                    *gamma,
                    *temperature,
                    g,
                );
                if self.rg(*p) {
                    acc(&mut grads[p.0], dp.len()).iter_mut().zip(&dp).for_each(|(a, b)| *a += b);
                }
                if self.rg(*m) {
                    acc(&mut grads[m.0], dm.len()).iter_mut().zip(&dm).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
}
