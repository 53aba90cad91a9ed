//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every operator appends a node holding its output
//! value and enough context to route gradients back to its inputs. The
//! operator set is exactly what the attention network needs: convolution,
//! ReLU, sigmoid, 2x2 max pooling, global average pooling, affine layers,
//! feature concatenation, spatial broadcast, bilinear upsampling,
//! elementwise add/mul and focal loss.
//!
//! One graph serves one forward/backward pass; a second call to
//! [`Graph::backward`] is rejected.

mod gemm;
pub mod gradcheck;
mod param;

pub use param::{he_init, load_checkpoint, save_checkpoint, Parameter, ParamStore, Sgd};

use crate::error::{Error, Result};
use gemm::gemm;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn fmt_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "[]".into();
    }
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {} holds {numel} values, got {}",
                fmt_shape(shape),
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {}", fmt_shape(&self.shape));
        self.data[0]
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Gap(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Concat(Vec<Var>),
    BroadcastSpatial(Var),
    Upsample(Var),
    Add(Var, Var),
    /// `full * bcast`, where `bcast` may be `N x 1 x H x W` against an
    /// `N x C x H x W` operand.
    Mul {
        full: Var,
        other: Var,
        channel_broadcast: bool,
    },
    Sum(Var),
    FocalLoss {
        logits: Var,
        labels: Vec<f64>,
        gamma: f64,
        alpha: Option<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
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
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient (inputs, labels).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is populated by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass; `None` for nodes unreachable
    /// from the loss or not requiring gradients.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn expect_rank(&self, v: Var, rank: usize, op: &str) -> Result<&[usize]> {
        let s = self.shape(v);
        if s.len() != rank {
            return Err(Error::Shape(format!(
                "{op} expects a rank-{rank} tensor, got {}",
                fmt_shape(s)
            )));
        }
        Ok(s)
    }

    /// 2-D cross-correlation: `N x C x H x W` input, `K x C x kh x kw`
    /// kernel, optional bias of length `K`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.expect_rank(input, 4, "conv2d input")?.to_vec();
        let ks = self.expect_rank(kernel, 4, "conv2d kernel")?.to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c {
            return Err(Error::Shape(format!(
                "conv2d input {} has {c} channels but kernel {} expects {kc}",
                fmt_shape(&xs),
                fmt_shape(&ks)
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be positive".into()));
        }
        if let Some(b) = bias {
            if self.shape(b) != [k] {
                return Err(Error::Shape(format!(
                    "conv2d bias {} does not match kernel {}",
                    fmt_shape(self.shape(b)),
                    fmt_shape(&ks)
                )));
            }
        }
        let geom = ConvGeom::new(n, c, h, w, kh, kw, stride, pad).ok_or_else(|| {
            Error::Shape(format!(
                "conv2d kernel {} with stride {stride}, pad {pad} does not tile input {}",
                fmt_shape(&ks),
                fmt_shape(&xs)
            ))
        })?;
        let cols = geom.im2col(&self.nodes[input.0].value.data);
        let npos = n * geom.out_hw();
        let mut out_mat = vec![0.0; k * npos];
        gemm(
            k,
            geom.col_rows(),
            npos,
            &self.nodes[kernel.0].value.data,
            false,
            &cols,
            false,
            &mut out_mat,
            0.0,
        );
        let hw = geom.out_hw();
        let mut out = vec![0.0; n * k * hw];
        let bias_v = bias.map(|b| self.nodes[b.0].value.data.clone());
        for ni in 0..n {
            for ki in 0..k {
                let src = &out_mat[ki * npos + ni * hw..ki * npos + (ni + 1) * hw];
                let dst = &mut out[(ni * k + ki) * hw..(ni * k + ki + 1) * hw];
                let b = bias_v.as_ref().map_or(0.0, |b| b[ki]);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        let value = Tensor::new(&[n, k, geom.out_h, geom.out_w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a.max(0.0)).collect(),
        };
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| sigmoid(a)).collect(),
        };
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// 2x2 max pooling with stride 2. Ties route the gradient to the first
    /// maximal element in row-major order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let s = self.expect_rank(x, 4, "maxpool2")?.to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "maxpool2 needs even spatial dims, got {}",
                fmt_shape(&s)
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let data = &self.nodes[x.0].value.data;
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = base + 2 * oy * w + 2 * ox;
                    let mut best = data[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[n, c, oh, ow], out)?,
            Op::MaxPool2 { input: x, argmax },
            rg,
        ))
    }

    /// Global average pooling `N x C x H x W -> N x C`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let s = self.expect_rank(x, 4, "gap")?.to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        if hw == 0 {
            return Err(Error::Shape("gap over an empty spatial extent".into()));
        }
        let data = &self.nodes[x.0].value.data;
        let out: Vec<f64> = (0..n * c)
            .map(|p| data[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, c], out)?, Op::Gap(x), rg))
    }

    /// Affine map `x W^T + b` with `x: N x D`, `W: M x D`, `b: M`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.expect_rank(x, 2, "linear input")?.to_vec();
        let ws = self.expect_rank(weight, 2, "linear weight")?.to_vec();
        if xs[1] != ws[1] {
            return Err(Error::Shape(format!(
                "linear input {} incompatible with weight {}",
                fmt_shape(&xs),
                fmt_shape(&ws)
            )));
        }
        let (n, d, m) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            if self.shape(b) != [m] {
                return Err(Error::Shape(format!(
                    "linear bias {} does not match weight {}",
                    fmt_shape(self.shape(b)),
                    fmt_shape(&ws)
                )));
            }
        }
        let mut out = vec![0.0; n * m];
        if let Some(b) = bias {
            let bv = &self.nodes[b.0].value.data;
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            n,
            d,
            m,
            &self.nodes[x.0].value.data,
            false,
            &self.nodes[weight.0].value.data,
            true,
            &mut out,
            1.0,
        );
        let rg = self.rg(x) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Linear { input: x, weight, bias }, rg))
    }

    /// Concatenate `N x D_i` matrices along the feature axis.
    pub fn concat_features(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_features of nothing".into()));
        }
        let n = self.expect_rank(parts[0], 2, "concat_features")?[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.expect_rank(p, 2, "concat_features")?;
            if s[0] != n {
                return Err(Error::Shape(format!(
                    "concat_features row mismatch: {} vs {}",
                    fmt_shape(self.shape(parts[0])),
                    fmt_shape(s)
                )));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut offset = 0;
        for (&p, &wd) in parts.iter().zip(&widths) {
            let src = &self.nodes[p.0].value.data;
            for r in 0..n {
                out[r * total + offset..r * total + offset + wd].copy_from_slice(&src[r * wd..(r + 1) * wd]);
            }
            offset += wd;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&[n, total], out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Repeat an `N x C` tensor over an `H x W` grid.
    pub fn broadcast_spatial(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.expect_rank(v, 2, "broadcast_spatial")?.to_vec();
        let hw = h * w;
        let src = &self.nodes[v.0].value.data;
        let mut out = Vec::with_capacity(s[0] * s[1] * hw);
        for &val in src {
            out.extend(std::iter::repeat_n(val, hw));
        }
        let rg = self.rg(v);
        Ok(self.push(Tensor::new(&[s[0], s[1], h, w], out)?, Op::BroadcastSpatial(v), rg))
    }

    /// Bilinear resize of the spatial dims (half-pixel centers, edge clamp).
    pub fn upsample_bilinear(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.expect_rank(x, 4, "upsample_bilinear")?.to_vec();
        if h == 0 || w == 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::Shape("upsample_bilinear with an empty spatial extent".into()));
        }
        let taps = bilinear_taps(s[2], s[3], h, w);
        let src = &self.nodes[x.0].value.data;
        let (ihw, ohw) = (s[2] * s[3], h * w);
        let mut out = vec![0.0; s[0] * s[1] * ohw];
        for plane in 0..s[0] * s[1] {
            let sp = &src[plane * ihw..(plane + 1) * ihw];
            for (o, t) in taps.iter().enumerate() {
                out[plane * ohw + o] = t.iter().map(|&(i, wt)| sp[i] * wt).sum();
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[s[0], s[1], h, w], out)?, Op::Upsample(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add of {} and {}",
                fmt_shape(self.shape(a)),
                fmt_shape(self.shape(b))
            )));
        }
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let out = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product. Besides equal shapes, an `N x 1 x H x W`
    /// operand broadcasts over the channels of an `N x C x H x W` one.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (full, other, channel_broadcast) = if sa == sb {
            (a, b, false)
        } else if sa.len() == 4 && sb.len() == 4 && sa[0] == sb[0] && sa[2..] == sb[2..] && sa[1] == 1 {
            (b, a, true)
        } else if sa.len() == 4 && sb.len() == 4 && sa[0] == sb[0] && sa[2..] == sb[2..] && sb[1] == 1 {
            (a, b, true)
        } else {
            return Err(Error::Shape(format!(
                "mul of {} and {}",
                fmt_shape(&sa),
                fmt_shape(&sb)
            )));
        };
        let vf = &self.nodes[full.0].value;
        let vo = &self.nodes[other.0].value;
        let data = if channel_broadcast {
            let s = &vf.shape;
            let (c, hw) = (s[1], s[2] * s[3]);
            vf.data
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let n = i / (c * hw);
                    x * vo.data[n * hw + i % hw]
                })
                .collect()
        } else {
            vf.data.iter().zip(&vo.data).map(|(x, y)| x * y).collect()
        };
        let out = Tensor {
            shape: vf.shape.clone(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            out,
            Op::Mul {
                full,
                other,
                channel_broadcast,
            },
            rg,
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean focal loss over the batch,
    /// `-alpha_t (1 - p_t)^gamma ln p_t` with `p = sigmoid(logit)`.
    /// `alpha = None` (or 1) disables class weighting.
    pub fn focal_loss(&mut self, logits: Var, labels: &[f64], gamma: f64, alpha: Option<f64>) -> Result<Var> {
        let n = self.nodes[logits.0].value.numel();
        if n != labels.len() || n == 0 {
            return Err(Error::Shape(format!(
                "focal_loss with {n} logits and {} labels",
                labels.len()
            )));
        }
        validate_focal(labels, gamma, alpha)?;
        let z = &self.nodes[logits.0].value.data;
        let total: f64 = z
            .iter()
            .zip(labels)
            .map(|(&zi, &yi)| focal_term(zi, yi, gamma, alpha).0)
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::FocalLoss {
                logits,
                labels: labels.to_vec(),
                gamma,
                alpha,
            },
            rg,
        ))
    }

    /// Propagate gradients from a scalar `loss` to every reachable node
    /// that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran on this graph; build a new forward pass".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {}",
                fmt_shape(self.shape(loss))
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if cfg!(debug_assertions) && g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Autodiff(format!("non-finite gradient at node {i}")));
            }
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = g;
        }
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Relu(x) => {
                let xv = &self.nodes[x.0].value.data;
                acc(*x, &mut |d| {
                    for ((d, &gi), &xi) in d.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value.data;
                acc(*x, &mut |d| {
                    for ((d, &gi), &yi) in d.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::MaxPool2 { input, argmax } => {
                acc(*input, &mut |d| {
                    for (&gi, &idx) in g.iter().zip(argmax) {
                        d[idx] += gi;
                    }
                });
            }
            Op::Gap(x) => {
                let s = &self.nodes[x.0].value.shape;
                let hw = s[2] * s[3];
                let scale = 1.0 / hw as f64;
                acc(*x, &mut |d| {
                    for (p, &gi) in g.iter().enumerate() {
                        d[p * hw..(p + 1) * hw].iter_mut().for_each(|v| *v += gi * scale);
                    }
                });
            }
            Op::Linear { input, weight, bias } => {
                let xs = &self.nodes[input.0].value.shape;
                let (n, dd) = (xs[0], xs[1]);
                let m = self.nodes[weight.0].value.shape[0];
                let xv = &self.nodes[input.0].value.data;
                let wv = &self.nodes[weight.0].value.data;
                acc(*input, &mut |d| gemm(n, m, dd, g, false, wv, false, d, 1.0));
                acc(*weight, &mut |d| gemm(m, n, dd, g, true, xv, false, d, 1.0));
                if let Some(b) = bias {
                    acc(*b, &mut |d| {
                        for row in g.chunks(m) {
                            for (dj, gj) in d.iter_mut().zip(row) {
                                *dj += gj;
                            }
                        }
                    });
                }
            }
            Op::Concat(parts) => {
                let total = node.value.shape[1];
                let n = node.value.shape[0];
                let mut offset = 0;
                for &p in parts {
                    let wd = self.nodes[p.0].value.shape[1];
                    acc(p, &mut |d| {
                        for r in 0..n {
                            for j in 0..wd {
                                d[r * wd + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += wd;
                }
            }
            Op::BroadcastSpatial(v) => {
                let s = &node.value.shape;
                let hw = s[2] * s[3];
                acc(*v, &mut |d| {
                    for (p, dp) in d.iter_mut().enumerate() {
                        *dp += g[p * hw..(p + 1) * hw].iter().sum::<f64>();
                    }
                });
            }
            Op::Upsample(x) => {
                let s = &self.nodes[x.0].value.shape;
                let os = &node.value.shape;
                let taps = bilinear_taps(s[2], s[3], os[2], os[3]);
                let (ihw, ohw) = (s[2] * s[3], os[2] * os[3]);
                acc(*x, &mut |d| {
                    for plane in 0..s[0] * s[1] {
                        for (o, t) in taps.iter().enumerate() {
                            let go = g[plane * ohw + o];
                            for &(i, wt) in t {
                                d[plane * ihw + i] += go * wt;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |d| d.iter_mut().zip(g).for_each(|(d, gi)| *d += gi));
                }
            }
            Op::Mul {
                full,
                other,
                channel_broadcast,
            } => {
                let fv = &self.nodes[full.0].value;
                let ov = &self.nodes[other.0].value.data;
                if *channel_broadcast {
                    let (c, hw) = (fv.shape[1], fv.shape[2] * fv.shape[3]);
                    acc(*full, &mut |d| {
                        for (i, di) in d.iter_mut().enumerate() {
                            let n = i / (c * hw);
                            *di += g[i] * ov[n * hw + i % hw];
                        }
                    });
                    acc(*other, &mut |d| {
                        for (i, &gi) in g.iter().enumerate() {
                            let n = i / (c * hw);
                            d[n * hw + i % hw] += gi * fv.data[i];
                        }
                    });
                } else {
                    acc(*full, &mut |d| {
                        for ((di, &gi), &oi) in d.iter_mut().zip(g).zip(ov) {
                            *di += gi * oi;
                        }
                    });
                    acc(*other, &mut |d| {
                        for ((di, &gi), &fi) in d.iter_mut().zip(g).zip(&fv.data) {
                            *di += gi * fi;
                        }
                    });
                }
            }
            Op::Sum(x) => {
                acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::FocalLoss {
                logits,
                labels,
                gamma,
                alpha,
            } => {
                let z = &self.nodes[logits.0].value.data;
                let scale = g[0] / z.len() as f64;
                acc(*logits, &mut |d| {
                    for ((di, &zi), &yi) in d.iter_mut().zip(z).zip(labels) {
                        *di += scale * focal_term(zi, yi, *gamma, *alpha).1;
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            } => {
                let xs = &self.nodes[input.0].value.shape;
                let ks = &self.nodes[kernel.0].value.shape;
                let geom = ConvGeom::new(xs[0], xs[1], xs[2], xs[3], ks[2], ks[3], *stride, *pad)
                    .expect("validated in forward");
                let k = ks[0];
                let (n, hw) = (xs[0], geom.out_hw());
                let npos = n * hw;
                let mut gmat = vec![0.0; k * npos];
                for ni in 0..n {
                    for ki in 0..k {
                        gmat[ki * npos + ni * hw..ki * npos + (ni + 1) * hw]
                            .copy_from_slice(&g[(ni * k + ki) * hw..(ni * k + ki + 1) * hw]);
                    }
                }
                if let Some(b) = bias {
                    acc(*b, &mut |d| {
                        for (ki, dk) in d.iter_mut().enumerate() {
                            *dk += gmat[ki * npos..(ki + 1) * npos].iter().sum::<f64>();
                        }
                    });
                }
                let rows = geom.col_rows();
                if self.nodes[kernel.0].requires_grad {
                    let cols = geom.im2col(&self.nodes[input.0].value.data);
                    acc(*kernel, &mut |d| gemm(k, npos, rows, &gmat, false, &cols, true, d, 1.0));
                }
                if self.nodes[input.0].requires_grad {
                    let mut dcols = vec![0.0; rows * npos];
                    gemm(
                        rows,
                        k,
                        npos,
                        &self.nodes[kernel.0].value.data,
                        true,
                        &gmat,
                        false,
                        &mut dcols,
                        0.0,
                    );
                    acc(*input, &mut |d| geom.col2im(&dcols, d));
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn validate_focal(labels: &[f64], gamma: f64, alpha: Option<f64>) -> Result<()> {
    if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Validation(format!("focal loss labels must be 0 or 1, got {bad}")));
    }
    if !(gamma >= 0.0) {
        return Err(Error::Validation(format!("focal gamma must be >= 0, got {gamma}")));
    }
    if let Some(a) = alpha {
        if !(a > 0.0 && a <= 1.0) {
            return Err(Error::Validation(format!("focal alpha must lie in (0, 1], got {a}")));
        }
    }
    Ok(())
}

/// Per-sample focal loss and its derivative with respect to the logit.
fn focal_term(z: f64, y: f64, gamma: f64, alpha: Option<f64>) -> (f64, f64) {
    // alpha = 1 means "no weighting", the same as leaving it unset.
    let alpha = alpha.filter(|&a| a < 1.0);
    let p = sigmoid(z);
    let q = sigmoid(-z);
    if y == 1.0 {
        let w = alpha.unwrap_or(1.0);
        let log_p = -softplus(-z);
        let mod_f = q.powf(gamma);
        (-w * mod_f * log_p, w * mod_f * (gamma * p * log_p - q))
    } else {
        let w = alpha.map_or(1.0, |a| 1.0 - a);
        let log_q = -softplus(z);
        let mod_f = p.powf(gamma);
        (-w * mod_f * log_q, -w * mod_f * (gamma * q * log_q - p))
    }
}

/// Mean focal loss evaluated directly, outside any graph.
pub fn focal_loss_value(logits: &[f64], labels: &[f64], gamma: f64, alpha: Option<f64>) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Shape(format!(
            "focal_loss with {} logits and {} labels",
            logits.len(),
            labels.len()
        )));
    }
    validate_focal(labels, gamma, alpha)?;
    Ok(logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| focal_term(z, y, gamma, alpha).0)
        .sum::<f64>()
        / logits.len() as f64)
}

/// For each output pixel, the source indices and weights of bilinear
/// interpolation with half-pixel centers.
fn bilinear_taps(ih: usize, iw: usize, oh: usize, ow: usize) -> Vec<Vec<(usize, f64)>> {
    let axis = |inp: usize, out: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(ih, oh);
    let xs = axis(iw, ow);
    let mut taps = Vec::with_capacity(oh * ow);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            taps.push(vec![
                (y0 * iw + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * iw + x1, (1.0 - fy) * fx),
                (y1 * iw + x0, fy * (1.0 - fx)),
                (y1 * iw + x1, fy * fx),
            ]);
        }
    }
    taps
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    fn new(n: usize, c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        let span_h = (h + 2 * pad).checked_sub(kh)?;
        let span_w = (w + 2 * pad).checked_sub(kw)?;
        if span_h % stride != 0 || span_w % stride != 0 {
            return None;
        }
        Some(Self {
            n,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            out_h: span_h / stride + 1,
            out_w: span_w / stride + 1,
        })
    }

    fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Rows index `(c, ki, kj)`, columns index `(n, oy, ox)`.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let npos = self.n * self.out_hw();
        let mut cols = vec![0.0; self.col_rows() * npos];
        self.for_each_tap(|row, col, src| cols[row * npos + col] = x[src]);
        cols
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let npos = self.n * self.out_hw();
        self.for_each_tap(|row, col, src| dx[src] += cols[row * npos + col]);
    }

    /// Visit every in-bounds (column-matrix entry, input element) pair.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let hw = self.out_hw();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    for ni in 0..self.n {
                        let plane = (ni * self.c + ci) * self.h * self.w;
                        for oy in 0..self.out_h {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let src_row = plane + iy as usize * self.w;
                            let col_row = ni * hw + oy * self.out_w;
                            for ox in 0..self.out_w {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                f(row, col_row + ox, src_row + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}
