//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s; calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar with respect to every recorded node. Graphs are single-use: build
//! one per forward pass.

use std::collections::HashMap;

use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MulByScalarVar(Var, Var),
    DivByScalarVar(Var, Var),
    MulSpatial(Var, Var),
    MulChannel(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
    },
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Gelu(Var),
    Abs(Var),
    Charbonnier(Var),
    Clamp(Var, f64, f64),
    Threshold {
        x: Var,
        tau: f64,
        binary: bool,
    },
    Concat(Vec<Var>),
    Narrow(Var, usize),
    Reshape(Var),
    LayerNorm {
        x: Var,
        w: Var,
        b: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var),
    L2Normalize(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    MaxAll(Var, usize),
    GlobalAvgPool(Var),
    Conv1d(Var, Var),
    ReplicatePad {
        x: Var,
        top: usize,
        left: usize,
    },
    MaxChannels(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
    macs: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
            macs: 0,
        }
    }

    /// A graph that records values only; `backward` yields no gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Multiply-accumulates executed by convolutions and matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that gradients are tracked for.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a parameter leaf; repeated lookups of the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.variable(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "elementwise operands differ in shape"
        );
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x).map(f);
        self.push(t, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x / y);
        self.push(t, Op::Div(a, b), &[a, b])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::MulScalar(x, c))
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.mul_scalar(x, -1.0);
        self.add_scalar(n, 1.0)
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn mul_by_scalar_var(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).numel(), 1);
        let c = self.value(s).data()[0];
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::MulByScalarVar(x, s), &[x, s])
    }

    pub fn div_by_scalar_var(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).numel(), 1);
        let c = self.value(s).data()[0];
        let t = self.value(x).map(|v| v / c);
        self.push(t, Op::DivByScalarVar(x, s), &[x, s])
    }

    /// `x[C,H,W] ⊙ m[1,H,W]`, broadcasting `m` across channels.
    pub fn mul_spatial(&mut self, x: Var, m: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        assert_eq!(self.shape(m), &[1, h, w], "spatial mask shape");
        let tm = self.value(m).data();
        let mut data = self.value(x).data().to_vec();
        for ch in 0..c {
            for (v, &mv) in data[ch * h * w..(ch + 1) * h * w].iter_mut().zip(tm) {
                *v *= mv;
            }
        }
        let t = Tensor::from_parts(vec![c, h, w], data);
        self.push(t, Op::MulSpatial(x, m), &[x, m])
    }

    /// `x[C,H,W] ⊙ s[C]`, one scale per channel.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        assert_eq!(self.shape(s), &[c]);
        let ts = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for ch in 0..c {
            for v in &mut data[ch * h * w..(ch + 1) * h * w] {
                *v *= ts[ch];
            }
        }
        let t = Tensor::from_parts(vec![c, h, w], data);
        self.push(t, Op::MulChannel(x, s), &[x, s])
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Var {
        let (cin, h, wd) = self.value(x).dims3();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[2], ws[3]);
        assert_eq!(ws[1] * groups, cin, "conv input channels");
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            cout: ws[0],
            k: ws[2],
            stride,
            pad,
            groups,
        };
        assert!(geom.valid(), "invalid convolution geometry {geom:?}");
        let out = kernels::conv2d(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        self.macs += geom.macs();
        let (oh, ow) = geom.out_hw();
        let t = Tensor::from_parts(vec![geom.cout, oh, ow], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(t, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Transposed convolution with kernel size equal to its stride.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (cin, h, wd) = self.value(x).dims3();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[0], cin);
        let (cout, k) = (ws[1], ws[2]);
        let out = kernels::conv_transpose2d(
            self.value(x).data(),
            (cin, h, wd),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            cout,
            k,
        );
        self.macs += (cin * cout * k * k * h * wd) as u64;
        let t = Tensor::from_parts(vec![cout, h * k, wd * k], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(t, Op::ConvTranspose2d { x, w, b, k }, &inputs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            |v| if v >= 0.0 { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| gelu(v).0, Op::Gelu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    /// `sqrt(x² + eps²)` element-wise.
    pub fn charbonnier(&mut self, x: Var, eps: f64) -> Var {
        self.unary(x, |v| (v * v + eps * eps).sqrt(), Op::Charbonnier(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Values `>= tau` become 1; others pass through (soft) or become 0 (binary).
    pub fn threshold(&mut self, x: Var, tau: f64, binary: bool) -> Var {
        let f = move |v: f64| {
            if v >= tau {
                1.0
            } else if binary {
                0.0
            } else {
                v
            }
        };
        self.unary(x, f, Op::Threshold { x, tau, binary })
    }

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let tail = self.shape(xs[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let t = self.value(x);
            assert_eq!(&t.shape()[1..], &tail[..], "concat trailing dims");
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let t = Tensor::from_parts(shape, data);
        self.push(t, Op::Concat(xs.to_vec()), xs)
    }

    /// Slice `[start, start+len)` along the leading axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(start + len <= shape[0]);
        let inner: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut s = shape;
        s[0] = len;
        let t = Tensor::from_parts(s, data);
        self.push(t, Op::Narrow(x, start), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self
            .value(x)
            .clone()
            .reshaped(shape.to_vec())
            .expect("reshape must preserve element count");
        self.push(t, Op::Reshape(x), &[x])
    }

    /// Layer normalization across channels at every pixel of `x[C,H,W]`.
    pub fn layer_norm_channels(&mut self, x: Var, w: Var, b: Var, eps: f64) -> Var {
        let (c, h, wd) = self.value(x).dims3();
        assert_eq!(self.shape(w), &[c]);
        assert_eq!(self.shape(b), &[c]);
        let hw = h * wd;
        let xv = self.value(x).data();
        let (wv, bv) = (self.value(w).data(), self.value(b).data());
        let mut xhat = vec![0.0; c * hw];
        let mut rstd = vec![0.0; hw];
        let mut out = vec![0.0; c * hw];
        for p in 0..hw {
            let mean = (0..c).map(|ch| xv[ch * hw + p]).sum::<f64>() / c as f64;
            let var = (0..c)
                .map(|ch| (xv[ch * hw + p] - mean).powi(2))
                .sum::<f64>()
                / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[p] = r;
            for ch in 0..c {
                let xh = (xv[ch * hw + p] - mean) * r;
                xhat[ch * hw + p] = xh;
                out[ch * hw + p] = xh * wv[ch] + bv[ch];
            }
        }
        let t = Tensor::from_parts(vec![c, h, wd], out);
        self.push(
            t,
            Op::LayerNorm {
                x,
                w,
                b,
                xhat,
                rstd,
            },
            &[x, w, b],
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shapes {sa:?} {sb:?}"
        );
        let out = kernels::matmul(
            self.value(a).data(),
            self.value(b).data(),
            sa[0],
            sa[1],
            sb[1],
        );
        self.macs += (sa[0] * sa[1] * sb[1]) as u64;
        let t = Tensor::from_parts(vec![sa[0], sb[1]], out);
        self.push(t, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        let (m, n) = (s[0], s[1]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        let t = Tensor::from_parts(vec![n, m], out);
        self.push(t, Op::Transpose(x), &[x])
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        let n = s[1];
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::from_parts(s, out);
        self.push(t, Op::Softmax(x), &[x])
    }

    /// Divides each matrix row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        let n = s[1];
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(s[0]);
        for row in out.chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            norms.push(norm);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let t = Tensor::from_parts(s, out);
        self.push(t, Op::L2Normalize(x, norms), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).mean());
        self.push(t, Op::Mean(x), &[x])
    }

    /// Largest element; the gradient flows to the first maximal position.
    pub fn max_all(&mut self, x: Var) -> Var {
        let xv = self.value(x).data();
        let mut arg = 0;
        for (i, &v) in xv.iter().enumerate() {
            if v > xv[arg] {
                arg = i;
            }
        }
        let t = Tensor::scalar(xv[arg]);
        self.push(t, Op::MaxAll(x, arg), &[x])
    }

    /// `x[C,H,W] -> [C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let t = self.value(x);
        let out = (0..c)
            .map(|ch| t.channel(ch).iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let t = Tensor::from_parts(vec![c], out);
        self.push(t, Op::GlobalAvgPool(x), &[x])
    }

    /// Zero-padded, bias-free 1-D convolution of `x[C]` with an odd kernel `w[k]`.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Var {
        let c = self.value(x).numel();
        let k = self.value(w).numel();
        assert!(k % 2 == 1);
        let half = (k / 2) as isize;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let out = (0..c as isize)
            .map(|i| {
                (0..k as isize)
                    .map(|j| {
                        let src = i + j - half;
                        if src < 0 || src >= c as isize {
                            0.0
                        } else {
                            wv[j as usize] * xv[src as usize]
                        }
                    })
                    .sum()
            })
            .collect();
        let t = Tensor::from_parts(vec![c], out);
        self.push(t, Op::Conv1d(x, w), &[x, w])
    }

    /// Edge-replicating padding of `x[C,H,W]`.
    pub fn replicate_pad(
        &mut self,
        x: Var,
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    ) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let (oh, ow) = (h + top + bottom, w + left + right);
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                let sy = (y as isize - top as isize).clamp(0, h as isize - 1) as usize;
                for xx in 0..ow {
                    let sx = (xx as isize - left as isize).clamp(0, w as isize - 1) as usize;
                    out[(ch * oh + y) * ow + xx] = xv[(ch * h + sy) * w + sx];
                }
            }
        }
        let t = Tensor::from_parts(vec![c, oh, ow], out);
        self.push(t, Op::ReplicatePad { x, top, left }, &[x])
    }

    /// Per-pixel maximum across channels, `x[C,H,W] -> [1,H,W]`.
    pub fn max_channels(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let hw = h * w;
        let xv = self.value(x).data();
        let mut arg = vec![0usize; hw];
        let mut out = xv[..hw].to_vec();
        for ch in 1..c {
            for p in 0..hw {
                if xv[ch * hw + p] > out[p] {
                    out[p] = xv[ch * hw + p];
                    arg[p] = ch;
                }
            }
        }
        let t = Tensor::from_parts(vec![1, h, w], out);
        self.push(t, Op::MaxChannels(x, arg), &[x])
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Gradients {
                grads,
                params: self.params.clone(),
            };
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, g: Vec<f64>| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.iter_mut().zip(g) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gy.to_vec());
                acc(*b, gy.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gy.to_vec());
                acc(*b, gy.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, gy.iter().zip(bv).map(|(g, b)| g * b).collect());
                acc(*b, gy.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, gy.iter().zip(bv).map(|(g, b)| g / b).collect());
                acc(
                    *b,
                    gy.iter()
                        .zip(av.iter().zip(bv))
                        .map(|(g, (a, b))| -g * a / (b * b))
                        .collect(),
                );
            }
            Op::AddScalar(x) => acc(*x, gy.to_vec()),
            Op::MulScalar(x, c) => acc(*x, gy.iter().map(|g| g * c).collect()),
            Op::MulByScalarVar(x, s) => {
                let c = val(*s)[0];
                acc(*x, gy.iter().map(|g| g * c).collect());
                let d: f64 = gy.iter().zip(val(*x)).map(|(g, x)| g * x).sum();
                acc(*s, vec![d]);
            }
            Op::DivByScalarVar(x, s) => {
                let c = val(*s)[0];
                acc(*x, gy.iter().map(|g| g / c).collect());
                let d: f64 = gy.iter().zip(val(*x)).map(|(g, x)| g * x).sum();
                acc(*s, vec![-d / (c * c)]);
            }
            Op::MulSpatial(x, m) => {
                let (c, h, w) = self.nodes[x.0].value.dims3();
                let hw = h * w;
                let (xv, mv) = (val(*x), val(*m));
                if self.wants(*x) {
                    let mut gx = gy.to_vec();
                    for ch in 0..c {
                        for (g, &mm) in gx[ch * hw..(ch + 1) * hw].iter_mut().zip(mv) {
                            *g *= mm;
                        }
                    }
                    acc(*x, gx);
                }
                if self.wants(*m) {
                    let mut gm = vec![0.0; hw];
                    for ch in 0..c {
                        for p in 0..hw {
                            gm[p] += gy[ch * hw + p] * xv[ch * hw + p];
                        }
                    }
                    acc(*m, gm);
                }
            }
            Op::MulChannel(x, s) => {
                let (c, h, w) = self.nodes[x.0].value.dims3();
                let hw = h * w;
                let (xv, sv) = (val(*x), val(*s));
                if self.wants(*x) {
                    let mut gx = gy.to_vec();
                    for ch in 0..c {
                        for g in &mut gx[ch * hw..(ch + 1) * hw] {
                            *g *= sv[ch];
                        }
                    }
                    acc(*x, gx);
                }
                if self.wants(*s) {
                    let gs = (0..c)
                        .map(|ch| {
                            gy[ch * hw..(ch + 1) * hw]
                                .iter()
                                .zip(&xv[ch * hw..(ch + 1) * hw])
                                .map(|(g, x)| g * x)
                                .sum()
                        })
                        .collect();
                    acc(*s, gs);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv2d_backward(
                    val(*x),
                    val(*w),
                    gy,
                    geom,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(gx) = gx {
                    acc(*x, gx);
                }
                if let Some(gw) = gw {
                    acc(*w, gw);
                }
                if let Some(b) = b {
                    acc(*b, gb);
                }
            }
            Op::ConvTranspose2d { x, w, b, k } => {
                let dims = self.nodes[x.0].value.dims3();
                let cout = self.nodes[w.0].value.shape()[1];
                let (gx, gw, gb) =
                    kernels::conv_transpose2d_backward(val(*x), dims, val(*w), gy, cout, *k);
                acc(*x, gx);
                acc(*w, gw);
                if let Some(b) = b {
                    acc(*b, gb);
                }
            }
            Op::Sigmoid(x) => acc(
                *x,
                gy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect(),
            ),
            Op::Tanh(x) => acc(
                *x,
                gy.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect(),
            ),
            Op::LeakyRelu(x, slope) => acc(
                *x,
                gy.iter()
                    .zip(val(*x))
                    .map(|(g, &v)| if v >= 0.0 { *g } else { g * slope })
                    .collect(),
            ),
            Op::Gelu(x) => acc(
                *x,
                gy.iter()
                    .zip(val(*x))
                    .map(|(g, &v)| g * gelu(v).1)
                    .collect(),
            ),
            Op::Abs(x) => acc(
                *x,
                gy.iter()
                    .zip(val(*x))
                    .map(|(g, &v)| {
                        if v > 0.0 {
                            *g
                        } else if v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            ),
            Op::Charbonnier(x) => acc(
                *x,
                gy.iter()
                    .zip(val(*x).iter().zip(y))
                    .map(|(g, (d, r))| g * d / r)
                    .collect(),
            ),
            Op::Clamp(x, lo, hi) => acc(
                *x,
                gy.iter()
                    .zip(val(*x))
                    .map(|(g, &v)| if v >= *lo && v <= *hi { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Threshold { x, tau, binary } => {
                if !binary {
                    acc(
                        *x,
                        gy.iter()
                            .zip(val(*x))
                            .map(|(g, &v)| if v < *tau { *g } else { 0.0 })
                            .collect(),
                    );
                }
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.nodes[x.0].value.numel();
                    acc(x, gy[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::Narrow(x, start) => {
                let t = &self.nodes[x.0].value;
                let inner: usize = t.shape()[1..].iter().product();
                let mut gx = vec![0.0; t.numel()];
                gx[start * inner..start * inner + gy.len()].copy_from_slice(gy);
                acc(*x, gx);
            }
            Op::Reshape(x) => acc(*x, gy.to_vec()),
            Op::LayerNorm {
                x,
                w,
                b,
                xhat,
                rstd,
            } => {
                let (c, h, wd) = self.nodes[x.0].value.dims3();
                let hw = h * wd;
                let wv = val(*w);
                if self.wants(*x) {
                    let mut gx = vec![0.0; c * hw];
                    for p in 0..hw {
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for ch in 0..c {
                            let gh = gy[ch * hw + p] * wv[ch];
                            mean_g += gh;
                            mean_gx += gh * xhat[ch * hw + p];
                        }
                        mean_g /= c as f64;
                        mean_gx /= c as f64;
                        for ch in 0..c {
                            let gh = gy[ch * hw + p] * wv[ch];
                            gx[ch * hw + p] = rstd[p] * (gh - mean_g - xhat[ch * hw + p] * mean_gx);
                        }
                    }
                    acc(*x, gx);
                }
                let gw = (0..c)
                    .map(|ch| (0..hw).map(|p| gy[ch * hw + p] * xhat[ch * hw + p]).sum())
                    .collect();
                let gb = (0..c)
                    .map(|ch| gy[ch * hw..(ch + 1) * hw].iter().sum())
                    .collect();
                acc(*w, gw);
                acc(*b, gb);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    acc(*a, kernels::matmul_nt(gy, val(*b), m, n, k));
                }
                if self.wants(*b) {
                    acc(*b, kernels::matmul_tn(val(*a), gy, m, k, n));
                }
            }
            Op::Transpose(x) => {
                let s = self.nodes[x.0].value.shape();
                let (m, n) = (s[0], s[1]);
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] = gy[j * m + i];
                    }
                }
                acc(*x, gx);
            }
            Op::Softmax(x) => {
                let n = node.value.shape()[1];
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), out) in gy.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((o, g), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (g - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::L2Normalize(x, norms) => {
                let n = node.value.shape()[1];
                let mut gx = vec![0.0; y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let xr = &val(*x)[r * n..(r + 1) * n];
                    let gr = &gy[r * n..(r + 1) * n];
                    let yr = &y[r * n..(r + 1) * n];
                    let raw_norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let out = &mut gx[r * n..(r + 1) * n];
                    if raw_norm >= norm {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((o, g), yv) in out.iter_mut().zip(gr).zip(yr) {
                            *o = (g - yv * dot) / norm;
                        }
                    } else {
                        for (o, g) in out.iter_mut().zip(gr) {
                            *o = g / norm;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Sum(x) => acc(*x, vec![gy[0]; self.nodes[x.0].value.numel()]),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                acc(*x, vec![gy[0] / n as f64; n]);
            }
            Op::MaxAll(x, arg) => {
                let mut gx = vec![0.0; self.nodes[x.0].value.numel()];
                gx[*arg] = gy[0];
                acc(*x, gx);
            }
            Op::GlobalAvgPool(x) => {
                let (c, h, w) = self.nodes[x.0].value.dims3();
                let hw = h * w;
                let mut gx = vec![0.0; c * hw];
                for ch in 0..c {
                    gx[ch * hw..(ch + 1) * hw].fill(gy[ch] / hw as f64);
                }
                acc(*x, gx);
            }
            Op::Conv1d(x, w) => {
                let (xv, wv) = (val(*x), val(*w));
                let (c, k) = (xv.len(), wv.len());
                let half = (k / 2) as isize;
                let mut gx = vec![0.0; c];
                let mut gw = vec![0.0; k];
                for i in 0..c as isize {
                    for j in 0..k as isize {
                        let src = i + j - half;
                        if src >= 0 && src < c as isize {
                            gx[src as usize] += gy[i as usize] * wv[j as usize];
                            gw[j as usize] += gy[i as usize] * xv[src as usize];
                        }
                    }
                }
                acc(*x, gx);
                acc(*w, gw);
            }
            Op::ReplicatePad { x, top, left } => {
                let (c, h, w) = self.nodes[x.0].value.dims3();
                let (_, oh, ow) = node.value.dims3();
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for yy in 0..oh {
                        let sy = (yy as isize - *top as isize).clamp(0, h as isize - 1) as usize;
                        for xx in 0..ow {
                            let sx =
                                (xx as isize - *left as isize).clamp(0, w as isize - 1) as usize;
                            gx[(ch * h + sy) * w + sx] += gy[(ch * oh + yy) * ow + xx];
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::MaxChannels(x, arg) => {
                let hw = arg.len();
                let mut gx = vec![0.0; self.nodes[x.0].value.numel()];
                for (p, &ch) in arg.iter().enumerate() {
                    gx[ch * hw + p] = gy[p];
                }
                acc(*x, gx);
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Value and derivative of the tanh-approximated GELU.
fn gelu(v: f64) -> (f64, f64) {
    const A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const B: f64 = 0.044_715;
    let u = A * (v + B * v * v * v);
    let t = u.tanh();
    let value = 0.5 * v * (1.0 + t);
    let du = A * (1.0 + 3.0 * B * v * v);
    let deriv = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
    (value, deriv)
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a parameter registered through [`Graph::param`].
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).and_then(|&v| self.get(v))
    }
}
