use rand::Rng;

use super::kernels::{axpy, dot, strided};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Variance floor inside batch normalization.
pub const BN_EPS: f64 = 1e-5;
/// Lower clamp on the true-class probability in cross-entropy.
pub const CE_CLAMP: f64 = 1e-12;
const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv1dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
        }
    }
}

/// Per-channel statistics of a train-mode batch-norm call (biased variance).
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of values each channel's statistics were taken over.
    pub count: usize,
}

enum Op {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        spec: Conv1dSpec,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Softmax(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    InfoNce {
        q: Var,
        keys: Vec<Tensor>,
        tau: f64,
        probs: Vec<f64>,
    },
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
    Linear(Vec<(Var, f64)>),
    ProjectConst {
        x: Var,
        weights: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of eagerly evaluated operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar root with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `like`'s shape when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

/// Splits a `[B, C, ...]` shape into (batch, channels, positions per channel).
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, c] => Ok((b, c, 1)),
        [b, c, l] => Ok((b, c, l)),
        _ => Err(Error::config(format!("expected [batch, channels(, length)], got {shape:?}"))),
    }
}

fn pad_input(x: &[f64], rows: usize, len: usize, pad: usize) -> Vec<f64> {
    if pad == 0 {
        return x.to_vec();
    }
    let padded = len + 2 * pad;
    let mut out = vec![0.0; rows * padded];
    for r in 0..rows {
        out[r * padded + pad..r * padded + pad + len].copy_from_slice(&x[r * len..(r + 1) * len]);
    }
    out
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
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Valid-mode (optionally zero-padded) 1-D convolution.
    /// `x: [B, C, L]`, `w: [O, C, K]` → `[B, O, (L + 2p - K) / stride + 1]`.
    pub fn conv1d(&mut self, x: Var, w: Var, spec: Conv1dSpec) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        let (&[b, c, l], &[o, wc, k]) = (xs, ws) else {
            return Err(shape_err("conv1d", xs, ws));
        };
        if spec.stride == 0 {
            return Err(Error::config("conv1d stride must be positive"));
        }
        let lp = l + 2 * spec.padding;
        if wc != c || k > lp {
            return Err(shape_err("conv1d", xs, ws));
        }
        let lout = (lp - k) / spec.stride + 1;
        let xp = pad_input(self.value(x).data(), b * c, l, spec.padding);
        let wd = self.value(w).data();
        let mut out = vec![0.0; b * o * lout];
        for bi in 0..b {
            for oi in 0..o {
                let orow = &mut out[(bi * o + oi) * lout..(bi * o + oi + 1) * lout];
                for ci in 0..c {
                    let xrow = &xp[(bi * c + ci) * lp..(bi * c + ci + 1) * lp];
                    let wrow = &wd[(oi * c + ci) * k..(oi * c + ci + 1) * k];
                    for (ki, &wv) in wrow.iter().enumerate() {
                        if spec.stride == 1 {
                            axpy(wv, &xrow[ki..ki + lout], orow);
                        } else {
                            for (dst, xv) in orow.iter_mut().zip(strided(xrow, ki, spec.stride, lout)) {
                                *dst += wv * xv;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        let value = Tensor::new(vec![b, o, lout], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, spec }, rg))
    }

    /// Affine map `x · wᵀ + b` with `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        let (&[n, fin], &[fout, win]) = (xs, ws) else {
            return Err(shape_err("dense", xs, ws));
        };
        if win != fin {
            return Err(shape_err("dense", xs, ws));
        }
        if bs != [fout] {
            return Err(shape_err("dense bias", ws, bs));
        }
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; n * fout];
        for i in 0..n {
            let xrow = &xd[i * fin..(i + 1) * fin];
            for (j, dst) in out[i * fout..(i + 1) * fout].iter_mut().enumerate() {
                *dst = dot(xrow, &wd[j * fin..(j + 1) * fin]) + bd[j];
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::new(vec![n, fout], out)?;
        Ok(self.push(value, Op::Dense { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// Max pooling along the last axis of `[B, C, L]`.
    pub fn maxpool1d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape();
        let &[b, c, l] = xs else {
            return Err(shape_err("maxpool1d", xs, &[window]));
        };
        if window == 0 || stride == 0 || window > l {
            return Err(Error::config(format!(
                "maxpool window {window} / stride {stride} invalid for length {l}"
            )));
        }
        let lout = (l - window) / stride + 1;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * lout);
        let mut argmax = Vec::with_capacity(b * c * lout);
        for r in 0..b * c {
            let row = &xd[r * l..(r + 1) * l];
            for t in 0..lout {
                let start = t * stride;
                let mut best = start;
                for i in start + 1..start + window {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                out.push(row[best]);
                argmax.push(r * l + best);
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![b, c, lout], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    /// Batch normalization over batch (and length) per channel using the
    /// batch's own statistics. Returns the statistics for running averages.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let (b, c, l) = channel_layout(self.value(x).shape())?;
        self.check_channel_param("batchnorm gamma", gamma, c)?;
        self.check_channel_param("batchnorm beta", beta, c)?;
        let xd = self.value(x).data();
        let count = b * l;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let row = &xd[(bi * c + ci) * l..(bi * c + ci + 1) * l];
                mean[ci] += row.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for bi in 0..b {
            for ci in 0..c {
                let row = &xd[(bi * c + ci) * l..(bi * c + ci + 1) * l];
                var[ci] += row.iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (value, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std, b, c, l)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let node = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            rg,
        );
        Ok((node, BatchStats { mean, var, count }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        let (b, c, l) = channel_layout(self.value(x).shape())?;
        self.check_channel_param("batchnorm gamma", gamma, c)?;
        self.check_channel_param("batchnorm beta", beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err("batchnorm running stats", &[c], &[mean.len(), var.len()]));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (value, xhat) = self.bn_apply(x, gamma, beta, mean, &inv_std, b, c, l)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            rg,
        ))
    }

    fn check_channel_param(&self, op: &'static str, v: Var, c: usize) -> Result<()> {
        let s = self.value(v).shape();
        if s != [c] {
            return Err(shape_err(op, &[c], s));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        b: usize,
        c: usize,
        l: usize,
    ) -> Result<(Tensor, Vec<f64>)> {
        let xd = self.value(x).data();
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let range = (bi * c + ci) * l..(bi * c + ci + 1) * l;
                for i in range {
                    let h = (xd[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = g[ci] * h + be[ci];
                }
            }
        }
        Ok((Tensor::new(self.value(x).shape().to_vec(), out)?, xhat))
    }

    /// Mean over the last axis: `[B, C, L]` → `[B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let &[b, c, l] = xs else {
            return Err(shape_err("global_avg_pool", xs, &[]));
        };
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(l)
            .map(|row| row.iter().sum::<f64>() / l as f64)
            .collect();
        let rg = self.rg(x);
        let value = Tensor::new(vec![b, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// Inverted dropout. When `active` is false or `keep == 1` the input is
    /// returned unchanged and no random numbers are drawn.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, keep: f64, active: bool, rng: &mut R) -> Result<Var> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::config(format!("dropout keep-probability {keep} outside (0, 1]")));
        }
        if !active || keep == 1.0 {
            return Ok(x);
        }
        let scale = 1.0 / keep;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    /// Row-wise softmax of a `[N, M]` matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let &[_, m] = xs else {
            return Err(shape_err("softmax", xs, &[]));
        };
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(m) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let rg = self.rg(x);
        let value = Tensor::new(xs.to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Scales each row of `[N, D]` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let &[_, d] = xs else {
            return Err(shape_err("l2_normalize", xs, &[]));
        };
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / d);
        for row in out.chunks_exact_mut(d) {
            let n = dot(row, row).sqrt().max(NORM_FLOOR);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(x);
        let value = Tensor::new(xs.to_vec(), out)?;
        Ok(self.push(value, Op::L2Normalize { x, norms }, rg))
    }

    /// Temperature-scaled InfoNCE, averaged over rows of `q`.
    ///
    /// Row `i` of `q` is scored against its positive `positives[i]` and every
    /// row of `negatives`; the positive is part of the softmax denominator.
    /// `positives` and `negatives` are detached. With no negatives the loss
    /// is identically zero.
    pub fn info_nce(&mut self, q: Var, positives: &Tensor, negatives: Option<&Tensor>, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::config(format!("temperature must be positive, got {tau}")));
        }
        let qs = self.value(q).shape();
        let &[n, d] = qs else {
            return Err(shape_err("info_nce", qs, positives.shape()));
        };
        if positives.shape() != [n, d] {
            return Err(shape_err("info_nce positives", qs, positives.shape()));
        }
        if let Some(neg) = negatives {
            if neg.shape().len() != 2 || neg.shape()[1] != d {
                return Err(shape_err("info_nce negatives", qs, neg.shape()));
            }
        }
        let nneg = negatives.map_or(0, Tensor::rows);
        let width = 1 + nneg;
        let qd = self.value(q).data();
        let mut probs = vec![0.0; n * width];
        let mut total = 0.0;
        for i in 0..n {
            let qi = &qd[i * d..(i + 1) * d];
            let logits = &mut probs[i * width..(i + 1) * width];
            logits[0] = dot(qi, positives.row(i)) / tau;
            if let Some(neg) = negatives {
                for v in 0..nneg {
                    logits[1 + v] = dot(qi, neg.row(v)) / tau;
                }
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|s| (s - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - logits[0];
            logits.iter_mut().for_each(|s| *s = (*s - lse).exp());
        }
        let mut keys = vec![positives.clone()];
        if let Some(neg) = negatives {
            keys.push(neg.clone());
        }
        let rg = self.rg(q);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::InfoNce { q, keys, tau, probs },
            rg,
        ))
    }

    /// Mean negative log-probability of the true class; probabilities below
    /// [`CE_CLAMP`] are clamped (and contribute no gradient).
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let ps = self.value(probs).shape();
        let &[n, m] = ps else {
            return Err(shape_err("cross_entropy", ps, &[labels.len()]));
        };
        if labels.len() != n {
            return Err(shape_err("cross_entropy labels", ps, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= m) {
            return Err(Error::config(format!("label {bad} out of range for {m} classes")));
        }
        let pd = self.value(probs).data();
        let mut total = 0.0;
        let mut clamped = 0usize;
        for (i, &y) in labels.iter().enumerate() {
            let p = pd[i * m + y];
            if p < CE_CLAMP {
                clamped += 1;
            }
            total -= p.max(CE_CLAMP).ln();
        }
        if clamped > 0 {
            log::warn!("cross-entropy clamped {clamped} true-class probabilities at {CE_CLAMP:e}");
        }
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// `Σ weight_i · term_i` over equally shaped terms.
    pub fn linear(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::config("linear combination of zero terms"))?;
        let shape = self.value(first).shape().to_vec();
        let mut out = Tensor::zeros(&shape);
        for &(v, w) in terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(shape_err("linear", &shape, t.shape()));
            }
            axpy(w, t.data(), out.data_mut());
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(out, Op::Linear(terms.to_vec()), rg))
    }

    /// Scalar `Σ x ⊙ weights` against a constant tensor.
    pub fn project(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        if self.value(x).shape() != weights.shape() {
            return Err(shape_err("project", self.value(x).shape(), weights.shape()));
        }
        let s = dot(self.value(x).data(), weights.data());
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::ProjectConst {
                x,
                weights: weights.clone(),
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::config(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backward_node(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { x, w, spec } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (&[b, c, l], &[o, _, k]) = (xv.shape(), wv.shape()) else {
                    unreachable!()
                };
                let lout = node.value.shape()[2];
                let lp = l + 2 * spec.padding;
                let xp = pad_input(xv.data(), b * c, l, spec.padding);
                let wd = wv.data();
                let need_x = self.rg(*x);
                let need_w = self.rg(*w);
                let mut gx = vec![0.0; if need_x { b * c * lp } else { 0 }];
                let mut gw = vec![0.0; if need_w { o * c * k } else { 0 }];
                for bi in 0..b {
                    for oi in 0..o {
                        let grow = &gd[(bi * o + oi) * lout..(bi * o + oi + 1) * lout];
                        for ci in 0..c {
                            let xoff = (bi * c + ci) * lp;
                            let woff = (oi * c + ci) * k;
                            for ki in 0..k {
                                if spec.stride == 1 {
                                    if need_w {
                                        gw[woff + ki] += dot(grow, &xp[xoff + ki..xoff + ki + lout]);
                                    }
                                    if need_x {
                                        axpy(wd[woff + ki], grow, &mut gx[xoff + ki..xoff + ki + lout]);
                                    }
                                } else {
                                    for (t, &gt) in grow.iter().enumerate() {
                                        let pos = xoff + ki + t * spec.stride;
                                        if need_w {
                                            gw[woff + ki] += gt * xp[pos];
                                        }
                                        if need_x {
                                            gx[pos] += gt * wd[woff + ki];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if need_x {
                    let gx = if spec.padding == 0 {
                        gx
                    } else {
                        gx.chunks_exact(lp)
                            .flat_map(|row| row[spec.padding..spec.padding + l].iter().copied())
                            .collect()
                    };
                    self.accumulate(grads, *x, Tensor::new(vec![b, c, l], gx).expect("conv grad shape"));
                }
                if need_w {
                    self.accumulate(grads, *w, Tensor::new(vec![o, c, k], gw).expect("conv grad shape"));
                }
            }
            Op::Dense { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, fin) = (xv.shape()[0], xv.shape()[1]);
                let fout = wv.shape()[0];
                if self.rg(*x) {
                    let mut gx = vec![0.0; n * fin];
                    for i in 0..n {
                        let dst = &mut gx[i * fin..(i + 1) * fin];
                        for j in 0..fout {
                            axpy(gd[i * fout + j], wv.row(j), dst);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx).expect("dense grad"));
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; fout * fin];
                    for i in 0..n {
                        let xrow = xv.row(i);
                        for j in 0..fout {
                            axpy(gd[i * fout + j], xrow, &mut gw[j * fin..(j + 1) * fin]);
                        }
                    }
                    self.accumulate(grads, *w, Tensor::new(vec![fout, fin], gw).expect("dense grad"));
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; fout];
                    for row in gd.chunks_exact(fout) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![fout], gb).expect("dense grad"));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let gx: Vec<f64> = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx).expect("relu grad"));
            }
            Op::MaxPool { x, argmax } => {
                let xv = self.value(*x);
                let mut gx = vec![0.0; xv.len()];
                for (&src, &gi) in argmax.iter().zip(gd) {
                    gx[src] += gi;
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx).expect("pool grad"));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xv = self.value(*x);
                let (b, c, l) = channel_layout(xv.shape()).expect("bn layout");
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        for i in (bi * c + ci) * l..(bi * c + ci + 1) * l {
                            sum_g[ci] += gd[i];
                            sum_gx[ci] += gd[i] * xhat[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0; xv.len()];
                    let count = (b * l) as f64;
                    for bi in 0..b {
                        for ci in 0..c {
                            let scale = gam[ci] * inv_std[ci];
                            for i in (bi * c + ci) * l..(bi * c + ci + 1) * l {
                                gx[i] = if *batch_stats {
                                    scale * (gd[i] - sum_g[ci] / count - xhat[i] * sum_gx[ci] / count)
                                } else {
                                    scale * gd[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx).expect("bn grad"));
                }
                if self.rg(*gamma) {
                    self.accumulate(grads, *gamma, Tensor::new(vec![c], sum_gx).expect("bn grad"));
                }
                if self.rg(*beta) {
                    self.accumulate(grads, *beta, Tensor::new(vec![c], sum_g).expect("bn grad"));
                }
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let l = xv.shape()[2];
                let gx: Vec<f64> = gd
                    .iter()
                    .flat_map(|&gi| std::iter::repeat_n(gi / l as f64, l))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx).expect("gap grad"));
            }
            Op::Dropout { x, mask } => {
                let gx: Vec<f64> = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), gx).expect("dropout grad"));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let m = node.value.shape()[1];
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), dst) in y.chunks_exact(m).zip(gd.chunks_exact(m)).zip(gx.chunks_exact_mut(m)) {
                    let s = dot(yr, gr);
                    for i in 0..m {
                        dst[i] = yr[i] * (gr[i] - s);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), gx).expect("softmax grad"));
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let d = node.value.shape()[1];
                let mut gx = vec![0.0; y.len()];
                for (i, dst) in gx.chunks_exact_mut(d).enumerate() {
                    let yr = &y[i * d..(i + 1) * d];
                    let gr = &gd[i * d..(i + 1) * d];
                    let s = dot(yr, gr);
                    for j in 0..d {
                        dst[j] = (gr[j] - yr[j] * s) / norms[i];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), gx).expect("l2 grad"));
            }
            Op::InfoNce { q, keys, tau, probs } => {
                let qv = self.value(*q);
                let (n, d) = (qv.shape()[0], qv.shape()[1]);
                let width = probs.len() / n;
                let scale = gd[0] / (n as f64 * tau);
                let mut gq = vec![0.0; n * d];
                for i in 0..n {
                    let p = &probs[i * width..(i + 1) * width];
                    let dst = &mut gq[i * d..(i + 1) * d];
                    axpy(scale * (p[0] - 1.0), keys[0].row(i), dst);
                    if let Some(neg) = keys.get(1) {
                        for v in 0..neg.rows() {
                            axpy(scale * p[1 + v], neg.row(v), dst);
                        }
                    }
                }
                self.accumulate(grads, *q, Tensor::new(vec![n, d], gq).expect("infonce grad"));
            }
            Op::CrossEntropy { probs, labels } => {
                let pv = self.value(*probs);
                let m = pv.shape()[1];
                let n = labels.len();
                let mut gp = vec![0.0; pv.len()];
                for (i, &y) in labels.iter().enumerate() {
                    let p = pv.data()[i * m + y];
                    if p >= CE_CLAMP {
                        gp[i * m + y] = -gd[0] / (n as f64 * p);
                    }
                }
                self.accumulate(grads, *probs, Tensor::new(pv.shape().to_vec(), gp).expect("ce grad"));
            }
            Op::Linear(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, g.map(|gi| gi * w));
                }
            }
            Op::ProjectConst { x, weights } => {
                self.accumulate(grads, *x, weights.map(|wi| wi * gd[0]));
            }
        }
    }
}
