use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel statistics observed by a train-mode batch norm.
///
/// `var` is the unbiased (n - 1) estimate, which is what running statistics track.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Time-axis pooling fused into [`Graph::conv_leaky_pool`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimePool {
    /// Windows of `pool` samples every `stride`; the trailing remainder is dropped.
    Avg { pool: usize, stride: usize },
    /// Exactly this many adaptive bins.
    Adaptive(usize),
}

impl TimePool {
    /// Output length for an input of `w` samples, if the pooling is feasible.
    pub fn output_len(self, w: usize) -> Option<usize> {
        match self {
            TimePool::Avg { pool, stride } if pool >= 1 && stride >= 1 && pool <= w => Some((w - pool) / stride + 1),
            TimePool::Adaptive(out) if out >= 1 && out <= w => Some(out),
            _ => None,
        }
    }

    /// Half-open input range averaged into output `i`.
    fn bin(self, i: usize, w: usize, out: usize) -> (usize, usize) {
        match self {
            TimePool::Avg { pool, stride } => (i * stride, i * stride + pool),
            TimePool::Adaptive(_) => kernels::adaptive_bin(i, w, out),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    ConvLeakyPool {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        alpha: f64,
        pool: TimePool,
        pre: Vec<f64>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    LeakyRelu {
        x: Var,
        alpha: f64,
    },
    Relu {
        x: Var,
    },
    AvgPoolTime {
        x: Var,
        pool: usize,
        stride: usize,
    },
    AdaptiveAvgPoolTime {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: Mode,
    },
    Linear {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        target_dist: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Sum {
        x: Var,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Tape of executed operations. Nodes are appended in execution order, which
/// is a topological order; [`Graph::backward`] walks it in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
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

    /// Gradient accumulated on `v` by the last `backward` calls, if any reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn grad_data(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn conv_geom(
        &self,
        op: &'static str,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<ConvGeom> {
        let x = self.val(input);
        let k = self.val(kernel);
        x.expect_rank(op, 4)?;
        k.expect_rank(op, 4)?;
        let (xs, ks) = (x.shape(), k.shape());
        if xs[1] != ks[1] {
            return Err(Error::dim(
                op,
                "channel (1)",
                format!("input has {} channels, kernel expects {}", xs[1], ks[1]),
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::param("stride", "components must be >= 1"));
        }
        if ks[2] > xs[2] + 2 * padding.0 {
            return Err(Error::dim(
                op,
                "height (2)",
                format!("kernel height {} exceeds padded input {}", ks[2], xs[2] + 2 * padding.0),
            ));
        }
        if ks[3] > xs[3] + 2 * padding.1 {
            return Err(Error::dim(
                op,
                "width (3)",
                format!("kernel width {} exceeds padded input {}", ks[3], xs[3] + 2 * padding.1),
            ));
        }
        if let Some(b) = bias {
            let bs = self.val(b).shape();
            if bs != [ks[0]] {
                return Err(Error::dim(
                    op,
                    "bias (0)",
                    format!("bias shape {bs:?} does not match {} output channels", ks[0]),
                ));
            }
        }
        Ok(ConvGeom {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ks[0],
            kh: ks[2],
            kw: ks[3],
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            oh: (xs[2] + 2 * padding.0 - ks[2]) / stride.0 + 1,
            ow: (xs[3] + 2 * padding.1 - ks[3]) / stride.1 + 1,
        })
    }

    fn conv_values(&self, geom: &ConvGeom, input: Var, kernel: Var, bias: Option<Var>) -> Vec<f64> {
        let mut out = vec![0.0; geom.batch * geom.cout * geom.oh * geom.ow];
        kernels::conv2d_forward(
            geom,
            self.val(input).data(),
            self.val(kernel).data(),
            bias.map(|b| self.val(b).data()),
            &mut out,
        );
        out
    }

    /// 2-D cross-correlation (no kernel flip).
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let geom = self.conv_geom("conv2d", input, kernel, bias, stride, padding)?;
        let value = Tensor {
            shape: vec![geom.batch, geom.cout, geom.oh, geom.ow],
            data: self.conv_values(&geom, input, kernel, bias),
        };
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, geom }, &parents))
    }

    /// `pool(leaky_relu(conv2d(input, kernel, bias, stride, (0, 0))))` as one node.
    ///
    /// Only the pre-activation is kept for the backward pass, which saves
    /// several full-size intermediates when the convolution output is long.
    pub fn conv_leaky_pool(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        alpha: f64,
        pool: TimePool,
    ) -> Result<Var> {
        const OP: &str = "conv_leaky_pool";
        if !(alpha >= 0.0) {
            return Err(Error::param("alpha", format!("must be >= 0, got {alpha}")));
        }
        let geom = self.conv_geom(OP, input, kernel, bias, stride, (0, 0))?;
        let w = geom.ow;
        let Some(ow) = pool.output_len(w) else {
            return Err(Error::dim(OP, "time (3)", format!("cannot apply {pool:?} to {w} samples")));
        };
        let pre = self.conv_values(&geom, input, kernel, bias);
        let mut out = Vec::with_capacity(pre.len() / w * ow);
        for row in pre.chunks_exact(w) {
            for i in 0..ow {
                let (a, b) = pool.bin(i, w, ow);
                let s: f64 = row[a..b].iter().map(|&v| if v >= 0.0 { v } else { alpha * v }).sum();
                out.push(s / (b - a) as f64);
            }
        }
        let value = Tensor {
            shape: vec![geom.batch, geom.cout, geom.oh, ow],
            data: out,
        };
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        let op = Op::ConvLeakyPool {
            input,
            kernel,
            bias,
            geom,
            alpha,
            pool,
            pre,
        };
        Ok(self.push(value, op, &parents))
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        if !(alpha >= 0.0) {
            return Err(Error::param("alpha", format!("must be >= 0, got {alpha}")));
        }
        let value = self.val(x).map(|v| if v >= 0.0 { v } else { alpha * v });
        Ok(self.push(value, Op::LeakyRelu { x, alpha }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.val(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Average pooling along the last (time) axis; trailing remainder samples are dropped.
    pub fn avg_pool_time(&mut self, x: Var, pool: usize, stride: usize) -> Result<Var> {
        const OP: &str = "avg_pool_time";
        let t = self.val(x);
        t.expect_rank(OP, 4)?;
        if pool == 0 || stride == 0 {
            return Err(Error::param("pool/stride", "must be >= 1"));
        }
        let s = t.shape();
        let w = s[3];
        if pool > w {
            return Err(Error::dim(OP, "time (3)", format!("pool {pool} exceeds length {w}")));
        }
        let ow = (w - pool) / stride + 1;
        let rows = s[0] * s[1] * s[2];
        let inv = 1.0 / pool as f64;
        let mut out = Vec::with_capacity(rows * ow);
        for r in 0..rows {
            let row = &t.data[r * w..(r + 1) * w];
            for o in 0..ow {
                out.push(row[o * stride..o * stride + pool].iter().sum::<f64>() * inv);
            }
        }
        let value = Tensor {
            shape: vec![s[0], s[1], s[2], ow],
            data: out,
        };
        Ok(self.push(value, Op::AvgPoolTime { x, pool, stride }, &[x]))
    }

    /// Adaptive average pooling of the time axis to exactly `out_w` bins.
    ///
    /// Bin `i` covers `[floor(i*W/out_w), ceil((i+1)*W/out_w))`.
    pub fn adaptive_avg_pool_time(&mut self, x: Var, out_w: usize) -> Result<Var> {
        const OP: &str = "adaptive_avg_pool_time";
        let t = self.val(x);
        t.expect_rank(OP, 4)?;
        let s = t.shape();
        let w = s[3];
        if out_w == 0 || out_w > w {
            return Err(Error::dim(
                OP,
                "time (3)",
                format!("target length {out_w} outside 1..={w}"),
            ));
        }
        let rows = s[0] * s[1] * s[2];
        let mut out = Vec::with_capacity(rows * out_w);
        for r in 0..rows {
            let row = &t.data[r * w..(r + 1) * w];
            for i in 0..out_w {
                let (a, b) = kernels::adaptive_bin(i, w, out_w);
                out.push(row[a..b].iter().sum::<f64>() / (b - a) as f64);
            }
        }
        let value = Tensor {
            shape: vec![s[0], s[1], s[2], out_w],
            data: out,
        };
        Ok(self.push(value, Op::AdaptiveAvgPoolTime { x }, &[x]))
    }

    /// Mean over the spatial and time axes: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        t.expect_rank("global_avg_pool", 4)?;
        let s = t.shape();
        let plane = s[2] * s[3];
        let data = t
            .data
            .chunks_exact(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor {
            shape: vec![s[0], s[1]],
            data,
        };
        Ok(self.push(value, Op::GlobalAvgPool { x }, &[x]))
    }

    /// Batch normalization over `(B, H, W)` per channel.
    ///
    /// Train mode normalizes with batch statistics and returns them so the
    /// caller can fold them into its running estimates; eval mode normalizes
    /// with `running_mean` / `running_var`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        mode: Mode,
        eps: f64,
    ) -> Result<(Var, Option<BatchNormStats>)> {
        const OP: &str = "batch_norm";
        let t = self.val(x);
        t.expect_rank(OP, 4)?;
        let s = t.shape().to_vec();
        let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.val(v).shape() != [c] {
                return Err(Error::dim(OP, "channel (1)", format!("{name} must have shape [{c}]")));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim(OP, "channel (1)", format!("running statistics must have {c} entries")));
        }
        let n = b * plane;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let stats = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::Statistics {
                        op: OP,
                        detail: format!("B*H*W = {n} < 2 in train mode"),
                    });
                }
                for ch in 0..c {
                    let mut sum = 0.0;
                    for bi in 0..b {
                        sum += t.data[(bi * c + ch) * plane..][..plane].iter().sum::<f64>();
                    }
                    let m = sum / n as f64;
                    let mut sq = 0.0;
                    for bi in 0..b {
                        sq += t.data[(bi * c + ch) * plane..][..plane]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / n as f64;
                }
                let unbiased = var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect();
                Some(BatchNormStats {
                    mean: mean.clone(),
                    var: unbiased,
                })
            }
            Mode::Eval => {
                mean.copy_from_slice(running_mean);
                var.copy_from_slice(running_var);
                None
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.val(gamma).data();
        let be = self.val(beta).data();
        let mut x_hat = vec![0.0; t.numel()];
        let mut out = vec![0.0; t.numel()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                for k in base..base + plane {
                    let h = (t.data[k] - mean[ch]) * inv_std[ch];
                    x_hat[k] = h;
                    out[k] = g[ch] * h + be[ch];
                }
            }
        }
        let value = Tensor { shape: s, data: out };
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            x_hat,
            inv_std,
            mode,
        };
        Ok((self.push(value, op, &[x, gamma, beta]), stats))
    }

    /// Batch normalization that updates `state` in place in train mode:
    /// `running = (1 - momentum) * running + momentum * batch`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let (y, stats) = self.batch_norm_with(x, gamma, beta, running_mean, running_var, mode, eps)?;
        if let Some(st) = stats {
            update_running(running_mean, &st.mean, momentum);
            update_running(running_var, &st.var, momentum);
        }
        Ok(y)
    }

    /// `y = x Wᵀ + b` for `x: [B, n]`, `W: [m, n]`, `b: [m]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let xt = self.val(x);
        let wt = self.val(weight);
        xt.expect_rank(OP, 2)?;
        wt.expect_rank(OP, 2)?;
        let (bsz, n) = (xt.shape[0], xt.shape[1]);
        let m = wt.shape[0];
        if wt.shape[1] != n {
            return Err(Error::dim(
                OP,
                "feature (1)",
                format!("input has {n} features, weight expects {}", wt.shape[1]),
            ));
        }
        if let Some(b) = bias {
            if self.val(b).shape() != [m] {
                return Err(Error::dim(OP, "bias (0)", format!("bias must have shape [{m}]")));
            }
        }
        let bd = bias.map(|b| self.val(b).data());
        let mut out = vec![0.0; bsz * m];
        for r in 0..bsz {
            let row = &xt.data[r * n..(r + 1) * n];
            for j in 0..m {
                out[r * m + j] = kernels::dot(row, &wt.data[j * n..(j + 1) * n]) + bd.map_or(0.0, |b| b[j]);
            }
        }
        let value = Tensor {
            shape: vec![bsz, m],
            data: out,
        };
        let mut parents = vec![x, weight];
        parents.extend(bias);
        Ok(self.push(value, Op::Linear { x, weight, bias }, &parents))
    }

    /// Inverted dropout: in train mode each element is zeroed with probability
    /// `p` and survivors are scaled by `1 / (1 - p)`; eval mode is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::param("p", format!("dropout probability must be in [0, 1), got {p}")));
        }
        let n = self.val(x).numel();
        let mask = if mode == Mode::Eval || p == 0.0 {
            vec![1.0; n]
        } else {
            let keep = 1.0 / (1.0 - p);
            (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect()
        };
        let t = self.val(x);
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().zip(&mask).map(|(v, m)| v * m).collect(),
        };
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Mean label-smoothed cross-entropy over the batch.
    ///
    /// The target distribution puts `1 - eps_ls + eps_ls / K` on the true
    /// class and `eps_ls / K` everywhere else.
    pub fn softmax_cross_entropy_ls(&mut self, logits: Var, targets: &[usize], eps_ls: f64) -> Result<Var> {
        const OP: &str = "softmax_cross_entropy_ls";
        let z = self.val(logits);
        z.expect_rank(OP, 2)?;
        let (b, k) = (z.shape[0], z.shape[1]);
        if k < 2 {
            return Err(Error::dim(OP, "class (1)", "need at least 2 classes"));
        }
        if targets.len() != b {
            return Err(Error::dim(OP, "batch (0)", format!("{} targets for batch of {b}", targets.len())));
        }
        if !(0.0..1.0).contains(&eps_ls) {
            return Err(Error::param("eps_ls", format!("must be in [0, 1), got {eps_ls}")));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Label(format!("class index {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; b * k];
        let mut target_dist = vec![eps_ls / k as f64; b * k];
        let mut loss = 0.0;
        for r in 0..b {
            let zr = &z.data[r * k..(r + 1) * k];
            let lse = kernels::softmax_row(zr, &mut probs[r * k..(r + 1) * k]);
            target_dist[r * k + targets[r]] += 1.0 - eps_ls;
            let q = &target_dist[r * k..(r + 1) * k];
            loss += lse - kernels::dot(q, zr);
        }
        let value = Tensor::scalar(loss / b as f64);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                target_dist,
            },
            &[logits],
        ))
    }

    /// Concatenate tensors of equal rank along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        const OP: &str = "concat";
        let first = self
            .val(*inputs.first().ok_or_else(|| Error::Usage("concat of zero tensors".into()))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim(OP, axis, "axis beyond tensor rank"));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.val(*v).shape();
            if s.len() != first.len() || s.iter().enumerate().any(|(a, &d)| a != axis && d != first[a]) {
                return Err(Error::dim(
                    OP,
                    s.iter()
                        .zip(&first)
                        .position(|(a, b)| a != b)
                        .unwrap_or(axis),
                    format!("shape {s:?} incompatible with {first:?} outside axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let tail: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * tail);
        for o in 0..outer {
            for v in inputs {
                let t = self.val(*v);
                let chunk = t.shape[axis] * tail;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor { shape, data };
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.val(x).data.iter().sum());
        self.push(value, Op::Sum { x }, &[x])
    }

    /// `Σ x ⊙ w` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let t = self.val(x);
        if t.shape() != weights.shape() {
            return Err(Error::dim(
                "weighted_sum",
                "*",
                format!("weights {:?} vs input {:?}", weights.shape(), t.shape()),
            ));
        }
        let value = Tensor::scalar(kernels::dot(t.data(), weights.data()));
        Ok(self.push(
            value,
            Op::WeightedSum {
                x,
                weights: weights.data.clone(),
            },
            &[x],
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Intermediate gradients are rebuilt on every call; leaf gradients
    /// accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        for n in &mut self.nodes[..=loss.0] {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        self.accumulate(loss, vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            for (v, contrib) in self.node_backward(i, &g) {
                self.accumulate(v, contrib);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn conv_backward(
        &self,
        geom: &ConvGeom,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        g: &[f64],
        out: &mut Vec<(Var, Vec<f64>)>,
    ) {
        if self.needs(input) {
            let mut dx = vec![0.0; self.val(input).numel()];
            kernels::conv2d_backward_input(geom, self.val(kernel).data(), g, &mut dx);
            out.push((input, dx));
        }
        if self.needs(kernel) {
            let mut dk = vec![0.0; self.val(kernel).numel()];
            kernels::conv2d_backward_kernel(geom, self.val(input).data(), g, &mut dk);
            out.push((kernel, dk));
        }
        if let Some(b) = bias.filter(|b| self.needs(*b)) {
            let plane = geom.oh * geom.ow;
            let mut db = vec![0.0; geom.cout];
            for (idx, chunk) in g.chunks_exact(plane).enumerate() {
                db[idx % geom.cout] += chunk.iter().sum::<f64>();
            }
            out.push((b, db));
        }
    }

    /// Gradient contributions of node `i` to its parents given its upstream gradient `g`.
    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => self.conv_backward(geom, *input, *kernel, *bias, g, &mut out),
            Op::ConvLeakyPool {
                input,
                kernel,
                bias,
                geom,
                alpha,
                pool,
                pre,
            } => {
                let w = geom.ow;
                let ow = node.value.shape[3];
                let mut dz = vec![0.0; pre.len()];
                for ((drow, zrow), grow) in dz.chunks_exact_mut(w).zip(pre.chunks_exact(w)).zip(g.chunks_exact(ow)) {
                    for (i, &gv) in grow.iter().enumerate() {
                        let (a, b) = pool.bin(i, w, ow);
                        let share = gv / (b - a) as f64;
                        for (d, &z) in drow[a..b].iter_mut().zip(&zrow[a..b]) {
                            *d += if z >= 0.0 { share } else { alpha * share };
                        }
                    }
                }
                self.conv_backward(geom, *input, *kernel, *bias, &dz, &mut out);
            }
            Op::LeakyRelu { x, alpha } => {
                let xv = self.val(*x).data();
                let dx = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &gg)| if v >= 0.0 { gg } else { alpha * gg })
                    .collect();
                out.push((*x, dx));
            }
            Op::Relu { x } => {
                let xv = self.val(*x).data();
                let dx = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &gg)| if v > 0.0 { gg } else { 0.0 })
                    .collect();
                out.push((*x, dx));
            }
            Op::AvgPoolTime { x, pool, stride } => {
                let w = self.val(*x).shape[3];
                let ow = node.value.shape[3];
                let inv = 1.0 / *pool as f64;
                let mut dx = vec![0.0; self.val(*x).numel()];
                for (r, grow) in g.chunks_exact(ow).enumerate() {
                    let drow = &mut dx[r * w..(r + 1) * w];
                    for (o, &gv) in grow.iter().enumerate() {
                        for d in &mut drow[o * stride..o * stride + pool] {
                            *d += gv * inv;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::AdaptiveAvgPoolTime { x } => {
                let w = self.val(*x).shape[3];
                let ow = node.value.shape[3];
                let mut dx = vec![0.0; self.val(*x).numel()];
                for (r, grow) in g.chunks_exact(ow).enumerate() {
                    let drow = &mut dx[r * w..(r + 1) * w];
                    for (o, &gv) in grow.iter().enumerate() {
                        let (a, b) = kernels::adaptive_bin(o, w, ow);
                        let share = gv / (b - a) as f64;
                        for d in &mut drow[a..b] {
                            *d += share;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::GlobalAvgPool { x } => {
                let s = self.val(*x).shape();
                let plane = s[2] * s[3];
                let inv = 1.0 / plane as f64;
                let dx = g.iter().flat_map(|&gv| std::iter::repeat(gv * inv).take(plane)).collect();
                out.push((*x, dx));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                mode,
            } => {
                let s = &node.value.shape;
                let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                let n = (b * plane) as f64;
                let gam = self.val(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * plane;
                        sum_g[ch] += g[base..base + plane].iter().sum::<f64>();
                        sum_gx[ch] += kernels::dot(&g[base..base + plane], &x_hat[base..base + plane]);
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let base = (bi * c + ch) * plane;
                            let scale = gam[ch] * inv_std[ch];
                            for k in base..base + plane {
                                dx[k] = match mode {
                                    Mode::Train => scale * (g[k] - sum_g[ch] / n - x_hat[k] * sum_gx[ch] / n),
                                    Mode::Eval => scale * g[k],
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out.push((*gamma, sum_gx));
                out.push((*beta, sum_g));
            }
            Op::Linear { x, weight, bias } => {
                let xt = self.val(*x);
                let wt = self.val(*weight);
                let (bsz, n) = (xt.shape[0], xt.shape[1]);
                let m = wt.shape[0];
                if self.needs(*x) {
                    let mut dx = vec![0.0; bsz * n];
                    for r in 0..bsz {
                        for j in 0..m {
                            kernels::axpy(&mut dx[r * n..(r + 1) * n], g[r * m + j], &wt.data[j * n..(j + 1) * n]);
                        }
                    }
                    out.push((*x, dx));
                }
                if self.needs(*weight) {
                    let mut dw = vec![0.0; m * n];
                    for r in 0..bsz {
                        for j in 0..m {
                            kernels::axpy(&mut dw[j * n..(j + 1) * n], g[r * m + j], &xt.data[r * n..(r + 1) * n]);
                        }
                    }
                    out.push((*weight, dw));
                }
                if let Some(b) = bias {
                    let mut db = vec![0.0; m];
                    for row in g.chunks_exact(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Dropout { x, mask } => {
                out.push((*x, g.iter().zip(mask).map(|(a, b)| a * b).collect()));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                target_dist,
            } => {
                let b = self.val(*logits).shape[0] as f64;
                let scale = g[0] / b;
                let dz = probs.iter().zip(target_dist).map(|(p, q)| (p - q) * scale).collect();
                out.push((*logits, dz));
            }
            Op::Concat { inputs, axis } => {
                let shape = &node.value.shape;
                let outer: usize = shape[..*axis].iter().product();
                let tail: usize = shape[axis + 1..].iter().product();
                let mut parts: Vec<Vec<f64>> =
                    inputs.iter().map(|v| Vec::with_capacity(self.val(*v).numel())).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (k, v) in inputs.iter().enumerate() {
                        let chunk = self.val(*v).shape[*axis] * tail;
                        parts[k].extend_from_slice(&g[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                out.extend(inputs.iter().copied().zip(parts));
            }
            Op::Sum { x } => {
                out.push((*x, vec![g[0]; self.val(*x).numel()]));
            }
            Op::WeightedSum { x, weights } => {
                out.push((*x, weights.iter().map(|w| w * g[0]).collect()));
            }
        }
        out
    }
}

/// Exponential moving average update used for batch-norm running statistics.
pub fn update_running(running: &mut [f64], batch: &[f64], momentum: f64) {
    for (r, b) in running.iter_mut().zip(batch) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
}

/// Row-wise softmax of a `[B, K]` logit tensor.
pub fn softmax(logits: &Tensor) -> Tensor {
    let k = logits.shape[1];
    let mut data = vec![0.0; logits.numel()];
    for (zr, pr) in logits.data.chunks_exact(k).zip(data.chunks_exact_mut(k)) {
        kernels::softmax_row(zr, pr);
    }
    Tensor {
        shape: logits.shape.clone(),
        data,
    }
}
