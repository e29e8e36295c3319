//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value. `backward` walks the tape
//! in reverse and fills the gradient slot of every node that depends on a leaf
//! created with `requires_grad = true`. Nodes that only depend on constants
//! (frozen teachers, inputs) carry no gradient and cost nothing on the way back.

use serde::{Deserialize, Serialize};

use super::conv::{self, ConvDims};
use super::{NnError, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Argument order of the KL divergence in the softened-logit loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(student || teacher)`.
    #[default]
    AsWritten,
    /// `KL(teacher || student)`, the usual Hinton formulation.
    TeacherFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

/// Per-channel statistics of a training-mode batchnorm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running-statistics updates.
    pub var_unbiased: Vec<f64>,
}

#[derive(Debug, Clone)]
struct PoolWindows {
    rows: Vec<(usize, usize)>,
    cols: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
        cols: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Relu {
        x: Var,
    },
    Pool {
        x: Var,
        windows: PoolWindows,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SoftKl {
        logits: Var,
        student: Vec<f64>,
        target: Vec<f64>,
        temperature: f64,
        direction: KlDirection,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Gram {
        x: Var,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> NnError {
    NnError::Shape {
        op,
        expected: expected.into(),
        got: got.into(),
    }
}

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize), NnError> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(shape_err(op, "[batch, channels, height, width]", format!("{s:?}"))),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize), NnError> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(shape_err(op, "[batch, features]", format!("{s:?}"))),
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
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

    fn check(&self, v: Var) -> Result<(), NnError> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(NnError::State(format!("variable #{} is not recorded on this graph", v.0)))
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient on `backward` when `requires_grad` is set.
    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        value.set_grad(None);
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var, NnError> {
        self.check(x)?;
        self.check(w)?;
        let (n, cin, h, wid) = dims4("conv2d", self.value(x))?;
        let (cout, cig, kh, kw) = dims4("conv2d", self.value(w))
            .map_err(|_| shape_err("conv2d", "weight [out, in/groups, kh, kw]", format!("{:?}", self.value(w).shape())))?;
        let groups = geom.groups;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cig != cin / groups {
            return Err(shape_err(
                "conv2d",
                format!("input channels {} per group ({} groups)", cig * groups.max(1), groups),
                format!("{cin} input channels"),
            ));
        }
        if let Some(b) = b {
            self.check(b)?;
            if self.value(b).len() != cout {
                return Err(shape_err("conv2d", format!("bias of {cout}"), format!("{:?}", self.value(b).shape())));
            }
        }
        let (sh, sw) = geom.stride;
        let (ph, pw) = geom.padding;
        if sh == 0 || sw == 0 {
            return Err(shape_err("conv2d", "stride >= 1", format!("{:?}", geom.stride)));
        }
        if h + 2 * ph < kh || wid + 2 * pw < kw {
            return Err(shape_err(
                "conv2d",
                format!("spatial dims >= kernel {kh}x{kw} after padding"),
                format!("{h}x{wid}"),
            ));
        }
        let dims = ConvDims {
            batch: n,
            cin,
            h,
            w: wid,
            cout,
            kh,
            kw,
            ho: (h + 2 * ph - kh) / sh + 1,
            wo: (wid + 2 * pw - kw) / sw + 1,
            geom,
        };
        let bias = b.map(|b| self.value(b).values());
        let (out, cols) = conv::forward(self.value(x).values(), self.value(w).values(), bias, &dims);
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::new(vec![n, cout, dims.ho, dims.wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, dims, cols }, rg))
    }

    /// Batch normalization over `[B, C, H, W]`. With `running = None` the batch
    /// statistics are used and returned; otherwise the supplied running mean and
    /// variance normalize the input.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>), NnError> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let (n, c, h, w) = dims4("batchnorm2d", self.value(x))?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err("batchnorm2d", format!("affine params of {c}"), format!("{}", self.value(gamma).len())));
        }
        let hw = h * w;
        let count = n * hw;
        let xv = self.value(x).values();
        let (mean, inv_std, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(shape_err("batchnorm2d", format!("running stats of {c}"), format!("{}", rm.len())));
                }
                let inv: Vec<f64> = rv.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                (rm.to_vec(), inv, None)
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for bi in 0..n {
                        s += xv[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0;
                    for bi in 0..n {
                        ss += xv[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = ss / count as f64;
                }
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let unbiased = var
                    .iter()
                    .map(|v| if count > 1 { v * count as f64 / (count - 1) as f64 } else { *v })
                    .collect();
                (
                    mean.clone(),
                    inv,
                    Some(BatchStats {
                        mean,
                        var_unbiased: unbiased,
                    }),
                )
            }
        };
        let gv = self.value(gamma).values();
        let bv = self.value(beta).values();
        let mut out = vec![0.0; xv.len()];
        for bi in 0..n {
            for ch in 0..c {
                let (m, s, g, b) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
                let base = (bi * c + ch) * hw;
                for (o, v) in out[base..base + hw].iter_mut().zip(&xv[base..base + hw]) {
                    *o = g * (v - m) * s + b;
                }
            }
        }
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let training = running.is_none();
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                training,
            },
            rg,
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NnError> {
        self.check(x)?;
        let t = self.value(x);
        let out: Vec<f64> = t.values().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::Relu { x }, rg))
    }

    fn pool(&mut self, x: Var, windows: PoolWindows) -> Result<Var, NnError> {
        let (n, c, h, w) = dims4("pool", self.value(x))?;
        let (ho, wo) = (windows.rows.len(), windows.cols.len());
        let xv = self.value(x).values();
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let xin = &xv[p * h * w..(p + 1) * h * w];
            for (oy, &(r0, r1)) in windows.rows.iter().enumerate() {
                for (ox, &(c0, c1)) in windows.cols.iter().enumerate() {
                    let mut s = 0.0;
                    for iy in r0..r1 {
                        s += xin[iy * w + c0..iy * w + c1].iter().sum::<f64>();
                    }
                    out[p * ho * wo + oy * wo + ox] = s / ((r1 - r0) * (c1 - c0)) as f64;
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::Pool { x, windows }, rg))
    }

    /// Average pooling with a fixed window, no padding, floor output size.
    pub fn avg_pool2d(&mut self, x: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var, NnError> {
        self.check(x)?;
        let (_, _, h, w) = dims4("avgpool2d", self.value(x))?;
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(shape_err("avgpool2d", "kernel and stride >= 1", format!("{kernel:?}/{stride:?}")));
        }
        if h < kernel.0 || w < kernel.1 {
            return Err(shape_err("avgpool2d", format!("spatial dims >= {kernel:?}"), format!("{h}x{w}")));
        }
        let span = |len: usize, k: usize, s: usize| -> Vec<(usize, usize)> {
            (0..(len - k) / s + 1).map(|o| (o * s, o * s + k)).collect()
        };
        let windows = PoolWindows {
            rows: span(h, kernel.0, stride.0),
            cols: span(w, kernel.1, stride.1),
        };
        self.pool(x, windows)
    }

    /// Adaptive average pooling to `out` spatial size. Output cell `i` averages
    /// input `floor(i*L/O) .. ceil((i+1)*L/O)`; when `O > L` this reduces to
    /// nearest-neighbour upsampling.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out: (usize, usize)) -> Result<Var, NnError> {
        self.check(x)?;
        let (_, _, h, w) = dims4("adaptive_avgpool2d", self.value(x))?;
        if out.0 == 0 || out.1 == 0 || h == 0 || w == 0 {
            return Err(shape_err("adaptive_avgpool2d", "non-empty input and output", format!("{h}x{w} -> {out:?}")));
        }
        let span = |len: usize, o: usize| -> Vec<(usize, usize)> {
            (0..o).map(|i| (i * len / o, ((i + 1) * len).div_ceil(o))).collect()
        };
        let windows = PoolWindows {
            rows: span(h, out.0),
            cols: span(w, out.1),
        };
        self.pool(x, windows)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, NnError> {
        self.check(x)?;
        let (n, c, h, w) = dims4("global_avgpool", self.value(x))?;
        let xv = self.value(x).values();
        let hw = h * w;
        let out = (0..n * c)
            .map(|p| xv[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::GlobalAvgPool { x }, rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NnError> {
        self.check(x)?;
        self.check(w)?;
        let (n, fin) = dims2("linear", self.value(x))?;
        let (fout, win) = dims2("linear", self.value(w))?;
        if win != fin {
            return Err(shape_err("linear", format!("{win} input features"), format!("{fin}")));
        }
        if let Some(b) = b {
            self.check(b)?;
            if self.value(b).len() != fout {
                return Err(shape_err("linear", format!("bias of {fout}"), format!("{}", self.value(b).len())));
            }
        }
        let xv = self.value(x).values();
        let wv = self.value(w).values();
        let mut out = vec![0.0; n * fout];
        for i in 0..n {
            let xr = &xv[i * fin..(i + 1) * fin];
            for o in 0..fout {
                let wr = &wv[o * fin..(o + 1) * fin];
                let mut s: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
                if let Some(b) = b {
                    s += self.value(b).values()[o];
                }
                out[i * fout + o] = s;
            }
        }
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::new(vec![n, fout], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", format!("{:?}", ta.shape()), format!("{:?}", tb.shape())));
        }
        let out = ta.values().iter().zip(tb.values()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NnError> {
        self.check(logits)?;
        let (n, k) = dims2("cross_entropy", self.value(logits))?;
        if labels.len() != n {
            return Err(shape_err("cross_entropy", format!("{n} labels"), format!("{}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(NnError::Input(format!("label {bad} out of range for {k} classes")));
        }
        let lv = self.value(logits).values();
        if lv.iter().any(|v| !v.is_finite()) {
            return Err(NnError::Numeric("non-finite logits in cross_entropy".into()));
        }
        let mut logp = vec![0.0; n * k];
        let mut total = 0.0;
        for i in 0..n {
            log_softmax_row(&lv[i * k..(i + 1) * k], &mut logp[i * k..(i + 1) * k]);
            total -= logp[i * k + labels[i]];
        }
        let probs = logp.iter().map(|v| v.exp()).collect();
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `T² · KL` between temperature-softened student logits and a fixed target
    /// distribution `target_probs` (row-major `[B × K]`), averaged over the batch.
    /// Targets are softened by re-softmaxing `log(p + 1e-12) / T`.
    pub fn soft_kl(
        &mut self,
        logits: Var,
        target_probs: &[f64],
        temperature: f64,
        direction: KlDirection,
    ) -> Result<Var, NnError> {
        self.check(logits)?;
        let (n, k) = dims2("soft_kl", self.value(logits))?;
        if target_probs.len() != n * k {
            return Err(shape_err("soft_kl", format!("{n}x{k} target probabilities"), format!("{}", target_probs.len())));
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(NnError::Input(format!("temperature must be > 0, got {temperature}")));
        }
        let lv = self.value(logits).values();
        if lv.iter().any(|v| !v.is_finite()) {
            return Err(NnError::Numeric("non-finite student logits in soft loss".into()));
        }
        if target_probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(NnError::Numeric("target probabilities must be finite and >= 0".into()));
        }
        let mut log_s = vec![0.0; n * k];
        let mut log_t = vec![0.0; n * k];
        let mut scaled = vec![0.0; k];
        let mut total = 0.0;
        for i in 0..n {
            let r = i * k..(i + 1) * k;
            for (s, z) in scaled.iter_mut().zip(&lv[r.clone()]) {
                *s = z / temperature;
            }
            log_softmax_row(&scaled, &mut log_s[r.clone()]);
            for (s, p) in scaled.iter_mut().zip(&target_probs[r.clone()]) {
                *s = (p + 1e-12).ln() / temperature;
            }
            log_softmax_row(&scaled, &mut log_t[r.clone()]);
            let kl: f64 = match direction {
                KlDirection::AsWritten => r.clone().map(|j| log_s[j].exp() * (log_s[j] - log_t[j])).sum(),
                KlDirection::TeacherFirst => r.clone().map(|j| log_t[j].exp() * (log_t[j] - log_s[j])).sum(),
            };
            total += kl;
        }
        let loss = temperature * temperature * total / n as f64;
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftKl {
                logits,
                student: log_s,
                target: log_t,
                temperature,
                direction,
            },
            rg,
        ))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mse", format!("{:?}", ta.shape()), format!("{:?}", tb.shape())));
        }
        let s: f64 = ta.values().iter().zip(tb.values()).map(|(x, y)| (x - y) * (x - y)).sum();
        let loss = s / ta.len().max(1) as f64;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { a, b }, rg))
    }

    /// Per-sample Gram matrix over spatial positions: `[B, C, P, Q] -> [B, N, N]`
    /// with `N = P·Q` and `G = XᵀX / C` where `X` is the `[C × N]` reshaping.
    pub fn gram(&mut self, x: Var) -> Result<Var, NnError> {
        self.check(x)?;
        let (n, c, p, q) = dims4("gram", self.value(x))?;
        let m = p * q;
        let xv = self.value(x).values();
        let mut out = vec![0.0; n * m * m];
        for bi in 0..n {
            let xs = &xv[bi * c * m..(bi + 1) * c * m];
            let g = &mut out[bi * m * m..(bi + 1) * m * m];
            conv::gemm(m, c, m, xs, (1, m as isize), xs, (m as isize, 1), g, 0.0);
            g.iter_mut().for_each(|v| *v /= c as f64);
        }
        let value = Tensor::new(vec![n, m, m], out)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::Gram { x }, rg))
    }

    /// `Σ coeff · term` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var, NnError> {
        let mut total = 0.0;
        for &(v, c) in terms {
            self.check(v)?;
            total += c * self.value(v).item()?;
        }
        let rg = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { terms: terms.to_vec() }, rg))
    }

    /// Reverse pass from a scalar. Clears previously accumulated gradients first.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        if self.nodes.is_empty() {
            return Err(NnError::State("backward called before any forward computation".into()));
        }
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", "scalar loss", format!("{:?}", self.value(loss).shape())));
        }
        for node in &mut self.nodes {
            node.value.set_grad(None);
        }
        if !self.needs(loss) {
            return Ok(());
        }
        self.nodes[loss.0].value.set_grad(Some(vec![1.0]));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].value.take_grad() else {
                continue;
            };
            let contributions = self.local_grads(i, &g)?;
            self.nodes[i].value.set_grad(Some(g));
            for (v, delta) in contributions {
                if self.nodes[v.0].requires_grad {
                    self.nodes[v.0].value.accumulate_grad(&delta);
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>, NnError> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, dims, cols } => {
                let want_b = b.is_some_and(|b| self.needs(b));
                let grads = conv::backward(g, self.value(*x).values(), self.value(*w).values(), cols, dims, (self.needs(*x), self.needs(*w), want_b));
                if let Some(gx) = grads.input {
                    out.push((*x, gx));
                }
                if let Some(gw) = grads.weight {
                    out.push((*w, gw));
                }
                if let (Some(b), Some(gb)) = (b, grads.bias) {
                    out.push((*b, gb));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                training,
            } => {
                let (n, c, h, w) = dims4("batchnorm2d", self.value(*x))?;
                let hw = h * w;
                let count = (n * hw) as f64;
                let xv = self.value(*x).values();
                let gam = self.value(*gamma).values();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..n {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        let (m, s) = (mean[ch], inv_std[ch]);
                        for (gv, xv) in g[base..base + hw].iter().zip(&xv[base..base + hw]) {
                            sum_g[ch] += gv;
                            sum_gx[ch] += gv * (xv - m) * s;
                        }
                    }
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; xv.len()];
                    for bi in 0..n {
                        for ch in 0..c {
                            let base = (bi * c + ch) * hw;
                            let (m, s) = (mean[ch], inv_std[ch]);
                            let scale = gam[ch] * s;
                            for j in base..base + hw {
                                gx[j] = if *training {
                                    let xhat = (xv[j] - m) * s;
                                    scale * (g[j] - sum_g[ch] / count - xhat * sum_gx[ch] / count)
                                } else {
                                    scale * g[j]
                                };
                            }
                        }
                    }
                    out.push((*x, gx));
                }
                if self.needs(*gamma) {
                    out.push((*gamma, sum_gx));
                }
                if self.needs(*beta) {
                    out.push((*beta, sum_g));
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).values();
                let gx = g.iter().zip(xv).map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 }).collect();
                out.push((*x, gx));
            }
            Op::Pool { x, windows } => {
                let (n, c, h, w) = dims4("pool", self.value(*x))?;
                let (ho, wo) = (windows.rows.len(), windows.cols.len());
                let mut gx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for (oy, &(r0, r1)) in windows.rows.iter().enumerate() {
                        for (ox, &(c0, c1)) in windows.cols.iter().enumerate() {
                            let share = g[p * ho * wo + oy * wo + ox] / ((r1 - r0) * (c1 - c0)) as f64;
                            for iy in r0..r1 {
                                for d in &mut gx[p * h * w + iy * w + c0..p * h * w + iy * w + c1] {
                                    *d += share;
                                }
                            }
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::GlobalAvgPool { x } => {
                let (n, c, h, w) = dims4("global_avgpool", self.value(*x))?;
                let hw = h * w;
                let mut gx = vec![0.0; n * c * hw];
                for p in 0..n * c {
                    let share = g[p] / hw as f64;
                    gx[p * hw..(p + 1) * hw].fill(share);
                }
                out.push((*x, gx));
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = dims2("linear", self.value(*x))?;
                let (fout, _) = dims2("linear", self.value(*w))?;
                let xv = self.value(*x).values();
                let wv = self.value(*w).values();
                if self.needs(*x) {
                    let mut gx = vec![0.0; n * fin];
                    for i in 0..n {
                        for o in 0..fout {
                            let go = g[i * fout + o];
                            for (d, wk) in gx[i * fin..(i + 1) * fin].iter_mut().zip(&wv[o * fin..(o + 1) * fin]) {
                                *d += go * wk;
                            }
                        }
                    }
                    out.push((*x, gx));
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0; fout * fin];
                    for i in 0..n {
                        for o in 0..fout {
                            let go = g[i * fout + o];
                            for (d, xk) in gw[o * fin..(o + 1) * fin].iter_mut().zip(&xv[i * fin..(i + 1) * fin]) {
                                *d += go * xk;
                            }
                        }
                    }
                    out.push((*w, gw));
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut gb = vec![0.0; fout];
                    for i in 0..n {
                        for (o, slot) in gb.iter_mut().enumerate() {
                            *slot += g[i * fout + o];
                        }
                    }
                    out.push((b, gb));
                }
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * k + l] -= scale;
                }
                out.push((*logits, gl));
            }
            Op::SoftKl {
                logits,
                student,
                target,
                temperature,
                direction,
            } => {
                let (n, k) = dims2("soft_kl", self.value(*logits))?;
                // d(T² KL)/dz = T · ∂KL/∂(z/T), averaged over the batch.
                let scale = g[0] * temperature / n as f64;
                let mut gl = vec![0.0; n * k];
                for i in 0..n {
                    let r = i * k..(i + 1) * k;
                    match direction {
                        KlDirection::TeacherFirst => {
                            for j in r {
                                gl[j] = scale * (student[j].exp() - target[j].exp());
                            }
                        }
                        KlDirection::AsWritten => {
                            let kl: f64 = r.clone().map(|j| student[j].exp() * (student[j] - target[j])).sum();
                            for j in r {
                                gl[j] = scale * student[j].exp() * (student[j] - target[j] - kl);
                            }
                        }
                    }
                }
                out.push((*logits, gl));
            }
            Op::Mse { a, b } => {
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                let scale = 2.0 * g[0] / av.len().max(1) as f64;
                let d: Vec<f64> = av.iter().zip(bv).map(|(x, y)| scale * (x - y)).collect();
                if self.needs(*b) {
                    out.push((*b, d.iter().map(|v| -v).collect()));
                }
                out.push((*a, d));
            }
            Op::Gram { x } => {
                let (n, c, p, q) = dims4("gram", self.value(*x))?;
                let m = p * q;
                let xv = self.value(*x).values();
                let mut gx = vec![0.0; xv.len()];
                let mut sym = vec![0.0; m * m];
                for bi in 0..n {
                    let gg = &g[bi * m * m..(bi + 1) * m * m];
                    for i in 0..m {
                        for j in 0..m {
                            sym[i * m + j] = (gg[i * m + j] + gg[j * m + i]) / c as f64;
                        }
                    }
                    let base = bi * c * m;
                    conv::gemm(c, m, m, &xv[base..base + c * m], (m as isize, 1), &sym, (m as isize, 1), &mut gx[base..base + c * m], 0.0);
                }
                out.push((*x, gx));
            }
            Op::WeightedSum { terms } => {
                for &(v, c) in terms {
                    out.push((v, vec![c * g[0]]));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_needs_a_recorded_scalar() {
        let mut g = Graph::new();
        assert!(matches!(g.backward(Var(0)), Err(NnError::State(_))));
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        assert!(matches!(g.backward(x), Err(NnError::Shape { .. })));
        assert!(matches!(g.backward(Var(7)), Err(NnError::State(_))));
    }

    #[test]
    fn adaptive_pool_upsamples_by_nearest_neighbour() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        let y = g.adaptive_avg_pool2d(x, (2, 4)).unwrap();
        assert_eq!(g.value(y).values(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
