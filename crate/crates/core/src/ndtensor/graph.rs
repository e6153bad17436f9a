//! Tape of executed operations and the reverse sweep over it.

use super::kernels::{col2im, im2col, maxpool_forward, ConvGeom};
use super::{check_finite, window_out, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm behaviour: batch statistics (train) or running statistics (eval).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Per-channel statistics observed by a train-mode batch norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    /// Caller-supplied identifier of the batch-norm layer.
    pub layer: usize,
    pub mean: Vec<f64>,
    /// Unbiased variance, as folded into running statistics.
    pub var: Vec<f64>,
}

enum Op<T: Real> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu {
        x: Var,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Reshape {
        x: Var,
    },
    ProjectLocals {
        x: Var,
        w: Var,
    },
    AdditiveScores {
        locals: Var,
        global: Var,
        u: Var,
    },
    WeightedSum {
        weights: Var,
        locals: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records differentiable operations in execution order.
///
/// A graph supports exactly one [`Graph::backward`]; run a fresh forward pass
/// on a new graph for the next step.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    batch_stats: Vec<BatchStats>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            batch_stats: Vec::new(),
            consumed: false,
        }
    }

    /// Adds an input tensor. It participates in differentiation iff
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad;
        let mut value = tensor;
        value.grad = None;
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Adds a non-differentiable input.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward's loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Statistics recorded by train-mode batch norms, in call order.
    pub fn batch_stats(&self) -> &[BatchStats] {
        &self.batch_stats
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        check_finite(&data, name)?;
        let needs_grad = self.needs(inputs);
        Ok(self.push(Tensor::from_parts(shape, data), op, needs_grad))
    }

    fn expect_rank(&self, v: Var, rank: usize, what: &str) -> Result<&[usize]> {
        let s = self.shape(v);
        if s.len() != rank {
            return Err(Error::Dimension(format!("{what} must be rank {rank}, got {s:?}")));
        }
        Ok(s)
    }

    /// 2-D convolution over `[B, Cin, H, W]` with weight `[Cout, Cin, kH, kW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.expect_rank(x, 4, "conv2d input")?.to_vec();
        let ws = self.expect_rank(w, 4, "conv2d weight")?.to_vec();
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wcin != cin {
            return Err(Error::Dimension(format!(
                "conv2d weight expects {wcin} input channels, input has {cin}"
            )));
        }
        if self.shape(b) != [cout] {
            return Err(Error::Dimension(format!(
                "conv2d bias must be [{cout}], got {:?}",
                self.shape(b)
            )));
        }
        let (ho, wo) = match (window_out(h, kh, stride, padding), window_out(wd, kw, stride, padding)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv2d kernel {kh}x{kw} (stride {stride}, pad {padding}) does not fit {h}x{wd}"
                )))
            }
        };
        let geom = ConvGeom { cin, h, w: wd, kh, kw, stride, pad: padding, ho, wo };
        let k = geom.patch_len();
        let n = geom.out_len();
        let mut out = vec![T::zero(); batch * cout * n];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); k * n] };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for s in 0..batch {
                let xs_ = &xv[s * cin * h * wd..(s + 1) * cin * h * wd];
                let src: &[T] = if geom.is_pointwise() {
                    xs_
                } else {
                    im2col(xs_, &geom, &mut cols);
                    &cols
                };
                let dst = &mut out[s * cout * n..(s + 1) * cout * n];
                for (co, row) in dst.chunks_mut(n).enumerate() {
                    row.iter_mut().for_each(|v| *v = bv[co]);
                }
                T::gemm(cout, k, n, T::one(), wv, k as isize, 1, src, n as isize, 1, T::one(), dst, n as isize, 1);
            }
        }
        self.record(vec![batch, cout, ho, wo], out, Op::Conv2d { x, w, b, geom }, &[x, w, b], "conv2d")
    }

    /// Batch normalization over `[B, C, H, W]`.
    ///
    /// `running` supplies `(mean, var)` per channel for eval mode. In train
    /// mode batch statistics are used and recorded under `layer` for the
    /// caller to fold into its running estimates.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[f32], &[f32]),
        mode: Mode,
        layer: usize,
    ) -> Result<Var> {
        let xs = self.expect_rank(x, 4, "batchnorm input")?.to_vec();
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
            if self.shape(v) != [c] {
                return Err(Error::Dimension(format!(
                    "batchnorm {what} must be [{c}], got {:?}",
                    self.shape(v)
                )));
            }
        }
        if running.0.len() != c || running.1.len() != c {
            return Err(Error::Dimension(format!("batchnorm running stats must have {c} channels")));
        }
        let hw = h * w;
        let count = batch * hw;
        let train = mode == Mode::Train;
        if train && count < 2 {
            return Err(Error::DegenerateVariance(count));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut stats = BatchStats { layer, mean: vec![0.0; c], var: vec![0.0; c] };
        for ch in 0..c {
            let plane = |s: usize| s * c * hw + ch * hw..s * c * hw + (ch + 1) * hw;
            let (mean, var) = if train {
                let mut sum = 0.0f64;
                for s in 0..batch {
                    sum += xv[plane(s)].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = sum / count as f64;
                let mut sq = 0.0f64;
                for s in 0..batch {
                    sq += xv[plane(s)].iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
                }
                let var = sq / count as f64;
                stats.mean[ch] = mean;
                stats.var[ch] = sq / (count - 1) as f64;
                (mean, var)
            } else {
                (running.0[ch] as f64, running.1[ch] as f64)
            };
            let is = T::of(1.0 / (var + T::EPS_BN.as_f64()).sqrt());
            let m = T::of(mean);
            inv_std[ch] = is;
            for s in 0..batch {
                for i in plane(s) {
                    let xh = (xv[i] - m) * is;
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        if train {
            self.batch_stats.push(stats);
        }
        self.record(
            xs,
            out,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train },
            &[x, gamma, beta],
            "batchnorm2d",
        )
    }

    /// Max pooling with a square `k`-window.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xs = self.expect_rank(x, 4, "maxpool input")?.to_vec();
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if k == 0 || k > h || k > w || stride == 0 {
            return Err(Error::Dimension(format!(
                "maxpool window {k} (stride {stride}) does not fit {h}x{w}"
            )));
        }
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let per_in = c * h * w;
        let per_out = c * ho * wo;
        let mut out = vec![T::zero(); batch * per_out];
        let mut argmax = vec![0usize; batch * per_out];
        let xv = self.value(x).data();
        for s in 0..batch {
            maxpool_forward(
                &xv[s * per_in..(s + 1) * per_in],
                c,
                h,
                w,
                k,
                stride,
                ho,
                wo,
                &mut out[s * per_out..(s + 1) * per_out],
                &mut argmax[s * per_out..(s + 1) * per_out],
            );
            argmax[s * per_out..(s + 1) * per_out].iter_mut().for_each(|a| *a += s * per_in);
        }
        self.record(vec![batch, c, ho, wo], out, Op::MaxPool { x, argmax }, &[x], "maxpool2d")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let out = v.data().iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect();
        self.record(shape, out, Op::Relu { x }, &[x], "relu")
    }

    /// Affine map `[B, N] -> [B, M]` with weight `[M, N]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.expect_rank(x, 2, "dense input")?.to_vec();
        let ws = self.expect_rank(w, 2, "dense weight")?.to_vec();
        let (batch, n) = (xs[0], xs[1]);
        let m = ws[0];
        if ws[1] != n {
            return Err(Error::Dimension(format!("dense weight {ws:?} incompatible with input {xs:?}")));
        }
        if self.shape(b) != [m] {
            return Err(Error::Dimension(format!("dense bias must be [{m}], got {:?}", self.shape(b))));
        }
        let bv = self.value(b).data();
        let mut out: Vec<T> = (0..batch).flat_map(|_| bv.iter().copied()).collect();
        T::gemm(
            batch,
            n,
            m,
            T::one(),
            self.value(x).data(),
            n as isize,
            1,
            self.value(w).data(),
            1,
            n as isize,
            T::one(),
            &mut out,
            m as isize,
            1,
        );
        self.record(vec![batch, m], out, Op::Dense { x, w, b }, &[x, w, b], "dense")
    }

    /// Softmax along the last axis, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let k = *shape.last().expect("tensors have rank >= 1");
        let mut out = v.data().to_vec();
        out.chunks_mut(k).for_each(softmax_row);
        self.record(shape, out, Op::Softmax { x }, &[x], "softmax")
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `[B, K]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.expect_rank(logits, 2, "cross_entropy logits")?.to_vec();
        let (batch, k) = (s[0], s[1]);
        if labels.len() != batch {
            return Err(Error::Dimension(format!(
                "cross_entropy got {} labels for batch {batch}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label(format!("label {bad} outside 0..{k}")));
        }
        let lv = self.value(logits).data();
        let mut probs = lv.to_vec();
        let mut total = 0.0f64;
        for (p, &label) in probs.chunks_mut(k).zip(labels) {
            let max = p.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
            let lse = max + p.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            total += lse - p[label].as_f64();
            softmax_row(p);
        }
        let loss = T::of(total / batch as f64);
        self.record(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
            "cross_entropy",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(Error::Dimension(format!("cannot reshape {:?} into {shape:?}", v.shape())));
        }
        let data = v.data().to_vec();
        self.record(shape.to_vec(), data, Op::Reshape { x }, &[x], "reshape")
    }

    /// Maps every spatial feature vector of `[B, C, H, W]` through `[G, C]`,
    /// giving `[B, H*W, G]` in row-major location order.
    pub fn project_locals(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.expect_rank(x, 4, "project_locals input")?.to_vec();
        let ws = self.expect_rank(w, 2, "projection weight")?.to_vec();
        let (batch, c, n) = (xs[0], xs[1], xs[2] * xs[3]);
        let g = ws[0];
        if ws[1] != c {
            return Err(Error::Dimension(format!(
                "projection expects {} channels, local features have {c}",
                ws[1]
            )));
        }
        let mut out = vec![T::zero(); batch * n * g];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..batch {
            T::gemm(
                n,
                c,
                g,
                T::one(),
                &xv[s * c * n..(s + 1) * c * n],
                1,
                n as isize,
                wv,
                1,
                c as isize,
                T::zero(),
                &mut out[s * n * g..(s + 1) * n * g],
                g as isize,
                1,
            );
        }
        self.record(vec![batch, n, g], out, Op::ProjectLocals { x, w }, &[x, w], "project_locals")
    }

    /// Additive compatibility `c[b, i] = u . (locals[b, i] + global[b])`.
    pub fn additive_scores(&mut self, locals: Var, global: Var, u: Var) -> Result<Var> {
        let ls = self.expect_rank(locals, 3, "locals")?.to_vec();
        let (batch, n, g) = (ls[0], ls[1], ls[2]);
        if self.shape(global) != [batch, g] {
            return Err(Error::Dimension(format!(
                "global descriptor must be [{batch}, {g}], got {:?}",
                self.shape(global)
            )));
        }
        if self.shape(u) != [g] {
            return Err(Error::Dimension(format!("u must be [{g}], got {:?}", self.shape(u))));
        }
        let lv = self.value(locals).data();
        let gv = self.value(global).data();
        let uv = self.value(u).data();
        let mut out = vec![T::zero(); batch * n];
        for s in 0..batch {
            let gs = &gv[s * g..(s + 1) * g];
            let offset: T = uv.iter().zip(gs).map(|(&a, &b)| a * b).sum();
            for i in 0..n {
                let l = &lv[(s * n + i) * g..(s * n + i + 1) * g];
                out[s * n + i] = uv.iter().zip(l).map(|(&a, &b)| a * b).sum::<T>() + offset;
            }
        }
        self.record(
            vec![batch, n],
            out,
            Op::AdditiveScores { locals, global, u },
            &[locals, global, u],
            "additive_scores",
        )
    }

    /// `out[b] = sum_i weights[b, i] * locals[b, i]`.
    pub fn weighted_sum(&mut self, weights: Var, locals: Var) -> Result<Var> {
        let ls = self.expect_rank(locals, 3, "locals")?.to_vec();
        let (batch, n, g) = (ls[0], ls[1], ls[2]);
        if self.shape(weights) != [batch, n] {
            return Err(Error::Dimension(format!(
                "weights must be [{batch}, {n}], got {:?}",
                self.shape(weights)
            )));
        }
        let av = self.value(weights).data();
        let lv = self.value(locals).data();
        let mut out = vec![T::zero(); batch * g];
        for s in 0..batch {
            T::gemm(
                1,
                n,
                g,
                T::one(),
                &av[s * n..(s + 1) * n],
                n as isize,
                1,
                &lv[s * n * g..(s + 1) * n * g],
                g as isize,
                1,
                T::zero(),
                &mut out[s * g..(s + 1) * g],
                g as isize,
                1,
            );
        }
        self.record(vec![batch, g], out, Op::WeightedSum { weights, locals }, &[weights, locals], "weighted_sum")
    }

    /// Concatenates `[B, d_k]` matrices along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Dimension("concat needs at least one input".into()));
        };
        let batch = self.expect_rank(first, 2, "concat input")?[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.expect_rank(p, 2, "concat input")?;
            if s[0] != batch {
                return Err(Error::Dimension(format!("concat batch mismatch: {s:?} vs {batch}")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(batch * total);
        for s in 0..batch {
            for (&p, &wd) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[s * wd..(s + 1) * wd]);
            }
        }
        self.record(vec![batch, total], out, Op::Concat { parts: parts.to_vec() }, parts, "concat")
    }

    /// Elementwise product of equal-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "mul shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let shape = self.shape(a).to_vec();
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p * q).collect();
        self.record(shape, out, Op::Mul { a, b }, &[a, b], "mul")
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().map(|v| v.as_f64()).sum::<f64>();
        self.record(vec![1], vec![T::of(total)], Op::Sum { x }, &[x], "sum")
    }

    /// Reverse sweep from a scalar loss. Gradients for every leaf that
    /// requires them become available through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::StaleGraph);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(gy);
                continue;
            }
            self.propagate(idx, &gy, &mut grads);
        }
        for g in grads.iter().flatten() {
            check_finite(g, "backward")?;
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let g = *geom;
                let xs = self.shape(*x);
                let batch = xs[0];
                let cout = self.shape(*w)[0];
                let (k, n) = (g.patch_len(), g.out_len());
                let in_len = g.cin * g.h * g.w;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if let Some(db) = slot(&self.nodes, grads, *b) {
                    for s in 0..batch {
                        for co in 0..cout {
                            let row = &gy[(s * cout + co) * n..(s * cout + co + 1) * n];
                            db[co] += row.iter().copied().sum::<T>();
                        }
                    }
                }
                let mut cols = vec![T::zero(); k * n];
                if let Some(dw) = slot(&self.nodes, grads, *w) {
                    for s in 0..batch {
                        let xs_ = &xv[s * in_len..(s + 1) * in_len];
                        let src: &[T] = if g.is_pointwise() {
                            xs_
                        } else {
                            im2col(xs_, &g, &mut cols);
                            &cols
                        };
                        T::gemm(
                            cout,
                            n,
                            k,
                            T::one(),
                            &gy[s * cout * n..(s + 1) * cout * n],
                            n as isize,
                            1,
                            src,
                            1,
                            n as isize,
                            T::one(),
                            dw,
                            k as isize,
                            1,
                        );
                    }
                }
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    for s in 0..batch {
                        let gys = &gy[s * cout * n..(s + 1) * cout * n];
                        let dxs = &mut dx[s * in_len..(s + 1) * in_len];
                        if g.is_pointwise() {
                            T::gemm(k, cout, n, T::one(), wv, 1, k as isize, gys, n as isize, 1, T::one(), dxs, n as isize, 1);
                        } else {
                            T::gemm(k, cout, n, T::one(), wv, 1, k as isize, gys, n as isize, 1, T::zero(), &mut cols, n as isize, 1);
                            col2im(&cols, &g, dxs);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let s = self.shape(*x);
                let (batch, c, hw) = (s[0], s[1], s[2] * s[3]);
                let count = (batch * hw) as f64;
                let gv = self.value(*gamma).data();
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for smp in 0..batch {
                    for ch in 0..c {
                        let base = (smp * c + ch) * hw;
                        for i in base..base + hw {
                            sum_dy[ch] += gy[i].as_f64();
                            sum_dy_xhat[ch] += (gy[i] * xhat[i]).as_f64();
                        }
                    }
                }
                if let Some(dg) = slot(&self.nodes, grads, *gamma) {
                    for ch in 0..c {
                        dg[ch] += T::of(sum_dy_xhat[ch]);
                    }
                }
                if let Some(dbeta) = slot(&self.nodes, grads, *beta) {
                    for ch in 0..c {
                        dbeta[ch] += T::of(sum_dy[ch]);
                    }
                }
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    for smp in 0..batch {
                        for ch in 0..c {
                            let base = (smp * c + ch) * hw;
                            let scale = gv[ch] * inv_std[ch];
                            if *train {
                                let mean_dy = T::of(sum_dy[ch] / count);
                                let mean_dy_xhat = T::of(sum_dy_xhat[ch] / count);
                                for i in base..base + hw {
                                    dx[i] += scale * (gy[i] - mean_dy - xhat[i] * mean_dy_xhat);
                                }
                            } else {
                                for i in base..base + hw {
                                    dx[i] += scale * gy[i];
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    for (&a, &g) in argmax.iter().zip(gy) {
                        dx[a] += g;
                    }
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    for ((d, &g), &v) in dx.iter_mut().zip(gy).zip(xv) {
                        if v > T::zero() {
                            *d += g;
                        }
                    }
                }
            }
            Op::Dense { x, w, b } => {
                let xs = self.shape(*x);
                let (batch, n) = (xs[0], xs[1]);
                let m = self.shape(*w)[0];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    T::gemm(batch, m, n, T::one(), gy, m as isize, 1, wv, n as isize, 1, T::one(), dx, n as isize, 1);
                }
                if let Some(dw) = slot(&self.nodes, grads, *w) {
                    T::gemm(m, batch, n, T::one(), gy, 1, m as isize, xv, n as isize, 1, T::one(), dw, n as isize, 1);
                }
                if let Some(db) = slot(&self.nodes, grads, *b) {
                    for row in gy.chunks(m) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let k = *node.value.shape().last().expect("rank >= 1");
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    for ((dxr, yr), gr) in dx.chunks_mut(k).zip(y.chunks(k)).zip(gy.chunks(k)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(gr) {
                            *d += yv * (g - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = gy[0] / T::of(labels.len() as f64);
                if let Some(dl) = slot(&self.nodes, grads, *logits) {
                    for (row, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let target = if j == label { T::one() } else { T::zero() };
                            dl[row * k + j] += scale * (probs[row * k + j] - target);
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    for (d, &g) in dx.iter_mut().zip(gy) {
                        *d += g;
                    }
                }
            }
            Op::ProjectLocals { x, w } => {
                let xs = self.shape(*x);
                let (batch, c, n) = (xs[0], xs[1], xs[2] * xs[3]);
                let g = self.shape(*w)[0];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    for s in 0..batch {
                        T::gemm(
                            c,
                            g,
                            n,
                            T::one(),
                            wv,
                            1,
                            c as isize,
                            &gy[s * n * g..(s + 1) * n * g],
                            1,
                            g as isize,
                            T::one(),
                            &mut dx[s * c * n..(s + 1) * c * n],
                            n as isize,
                            1,
                        );
                    }
                }
                if let Some(dw) = slot(&self.nodes, grads, *w) {
                    for s in 0..batch {
                        T::gemm(
                            g,
                            n,
                            c,
                            T::one(),
                            &gy[s * n * g..(s + 1) * n * g],
                            1,
                            g as isize,
                            &xv[s * c * n..(s + 1) * c * n],
                            1,
                            n as isize,
                            T::one(),
                            dw,
                            c as isize,
                            1,
                        );
                    }
                }
            }
            Op::AdditiveScores { locals, global, u } => {
                let ls = self.shape(*locals);
                let (batch, n, g) = (ls[0], ls[1], ls[2]);
                let lv = self.value(*locals).data();
                let gv = self.value(*global).data();
                let uv = self.value(*u).data();
                if let Some(dl) = slot(&self.nodes, grads, *locals) {
                    for s in 0..batch {
                        for i in 0..n {
                            let gyi = gy[s * n + i];
                            let row = &mut dl[(s * n + i) * g..(s * n + i + 1) * g];
                            for (d, &uu) in row.iter_mut().zip(uv) {
                                *d += gyi * uu;
                            }
                        }
                    }
                }
                if let Some(dg) = slot(&self.nodes, grads, *global) {
                    for s in 0..batch {
                        let total: T = gy[s * n..(s + 1) * n].iter().copied().sum();
                        for (d, &uu) in dg[s * g..(s + 1) * g].iter_mut().zip(uv) {
                            *d += total * uu;
                        }
                    }
                }
                if let Some(du) = slot(&self.nodes, grads, *u) {
                    for s in 0..batch {
                        let gs = &gv[s * g..(s + 1) * g];
                        let total: T = gy[s * n..(s + 1) * n].iter().copied().sum();
                        for i in 0..n {
                            let gyi = gy[s * n + i];
                            let l = &lv[(s * n + i) * g..(s * n + i + 1) * g];
                            for (d, &lvv) in du.iter_mut().zip(l) {
                                *d += gyi * lvv;
                            }
                        }
                        for (d, &gg) in du.iter_mut().zip(gs) {
                            *d += total * gg;
                        }
                    }
                }
            }
            Op::WeightedSum { weights, locals } => {
                let ls = self.shape(*locals);
                let (batch, n, g) = (ls[0], ls[1], ls[2]);
                let av = self.value(*weights).data();
                let lv = self.value(*locals).data();
                if let Some(da) = slot(&self.nodes, grads, *weights) {
                    for s in 0..batch {
                        let gys = &gy[s * g..(s + 1) * g];
                        for i in 0..n {
                            let l = &lv[(s * n + i) * g..(s * n + i + 1) * g];
                            da[s * n + i] += l.iter().zip(gys).map(|(&a, &b)| a * b).sum::<T>();
                        }
                    }
                }
                if let Some(dl) = slot(&self.nodes, grads, *locals) {
                    for s in 0..batch {
                        let gys = &gy[s * g..(s + 1) * g];
                        for i in 0..n {
                            let a = av[s * n + i];
                            let row = &mut dl[(s * n + i) * g..(s * n + i + 1) * g];
                            for (d, &gg) in row.iter_mut().zip(gys) {
                                *d += a * gg;
                            }
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let batch = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let wd = self.shape(p)[1];
                    if let Some(dp) = slot(&self.nodes, grads, p) {
                        for s in 0..batch {
                            let src = &gy[s * total + offset..s * total + offset + wd];
                            for (d, &g) in dp[s * wd..(s + 1) * wd].iter_mut().zip(src) {
                                *d += g;
                            }
                        }
                    }
                    offset += wd;
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = slot(&self.nodes, grads, *a) {
                    for ((d, &g), &q) in da.iter_mut().zip(gy).zip(bv) {
                        *d += g * q;
                    }
                }
                if let Some(db) = slot(&self.nodes, grads, *b) {
                    for ((d, &g), &p) in db.iter_mut().zip(gy).zip(av) {
                        *d += g * p;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = slot(&self.nodes, grads, *x) {
                    for d in dx.iter_mut() {
                        *d += gy[0];
                    }
                }
            }
        }
    }
}

fn slot<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

/// In-place max-shifted softmax of one row.
pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += v.as_f64();
    }
    let inv = T::of(1.0 / total);
    row.iter_mut().for_each(|v| *v *= inv);
}
