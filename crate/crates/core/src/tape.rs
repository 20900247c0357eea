//! A small reverse-mode differentiation tape over dense `f64` tensors.
//!
//! Feature maps are channel-first `[C, H, W]` with batch size one; batching
//! happens one level up by running independent tapes per example. Every op
//! records its inputs and whatever forward state its backward pass needs.

use std::borrow::Cow;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(&[n], &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn chw(&self) -> (usize, usize, usize) {
        match self.shape.as_slice() {
            [c, h, w] => (*c, *h, *w),
            _ => panic!("expected [C, H, W] tensor, got {:?}", self.shape),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        groups: usize,
    },
    LayerNorm {
        x: Var,
        w: Var,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
    },
    Gelu(Var),
    Silu(Var),
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    ChannelAttention(Box<AttentionRecord>),
    PixelUnshuffle(Var),
    PixelShuffle(Var),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax(Var),
    WeightedSum {
        w: Var,
        p: Var,
    },
    ResizeBilinear {
        x: Var,
        rows: Vec<Tap>,
        cols: Vec<Tap>,
    },
    Broadcast {
        x: Var,
    },
    MeanAbsDiff {
        x: Var,
        target: Vec<f64>,
    },
    SumAbs(Var),
    Sum(Var),
}

#[derive(Debug)]
struct AttentionRecord {
    q: Var,
    k: Var,
    v: Var,
    temp: Var,
    heads: usize,
    qn: Vec<f64>,
    kn: Vec<f64>,
    q_norm: Vec<f64>,
    k_norm: Vec<f64>,
    /// Raw similarity `qn kn^T` before temperature scaling, per head.
    sim: Vec<f64>,
    /// Softmax output per head.
    attn: Vec<f64>,
}

/// Two-tap linear interpolation weights for one output coordinate.
#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w1: f64,
}

const NORM_EPS: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

fn erf_free_gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let w1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            Tap { i0, i1, w1 }
        })
        .collect()
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf borrowed from caller-owned storage (parameters).
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf owned by the tape (inputs, constants).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape, y.shape, "add shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let shape = x.shape.clone();
        self.push(Tensor { shape, data }, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape, y.shape, "mul shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let shape = x.shape.clone();
        self.push(Tensor { shape, data }, Op::Mul(a, b))
    }

    /// Same-padded, stride-1 grouped convolution. `w` is `[Cout, Cin/groups, k, k]`
    /// with odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var, groups: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (cin, h, wd) = xv.chw();
        let [cout, cin_g, k, k2] = wv.shape[..] else {
            panic!("conv weight must be 4-d, got {:?}", wv.shape)
        };
        assert!(k == k2 && k % 2 == 1, "conv kernel must be square and odd");
        assert_eq!(cin, cin_g * groups, "conv input channels");
        assert_eq!(cout % groups, 0, "conv output channels");
        let cout_g = cout / groups;
        let pad = (k / 2) as isize;
        let hw = h * wd;
        let mut out = vec![0.0; cout * hw];
        for oc in 0..cout {
            let g = oc / cout_g;
            let orow = &mut out[oc * hw..(oc + 1) * hw];
            for icl in 0..cin_g {
                let ic = g * cin_g + icl;
                let xin = &xv.data[ic * hw..(ic + 1) * hw];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(wd, dx);
                        let wt = wv.data[((oc * cin_g + icl) * k + ky) * k + kx];
                        if wt == 0.0 {
                            continue;
                        }
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let src = &xin[sy * wd..(sy + 1) * wd];
                            let dst = &mut orow[y * wd..(y + 1) * wd];
                            let sx0 = (x0 as isize + dx) as usize;
                            for (d, s) in dst[x0..x1].iter_mut().zip(&src[sx0..sx0 + (x1 - x0)]) {
                                *d += wt * s;
                            }
                        }
                    }
                }
            }
        }
        self.push(
            Tensor {
                shape: vec![cout, h, wd],
                data: out,
            },
            Op::Conv2d { x, w, groups },
        )
    }

    /// Bias-free layer norm across channels at each pixel: `x / sqrt(var + eps) * w`.
    /// The input is not mean-centred; only the variance uses the mean.
    pub fn layer_norm(&mut self, x: Var, w: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (c, h, wd) = xv.chw();
        assert_eq!(wv.shape, vec![c], "layer norm weight shape");
        let hw = h * wd;
        let mut mean = vec![0.0; hw];
        let mut inv_std = vec![0.0; hw];
        for ch in 0..c {
            for (m, v) in mean.iter_mut().zip(&xv.data[ch * hw..(ch + 1) * hw]) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= c as f64;
        }
        let mut var = vec![0.0; hw];
        for ch in 0..c {
            for ((s, v), m) in var.iter_mut().zip(&xv.data[ch * hw..(ch + 1) * hw]).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for (is, s) in inv_std.iter_mut().zip(&var) {
            *is = 1.0 / (s / c as f64 + LN_EPS).sqrt();
        }
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            let g = wv.data[ch];
            for p in 0..hw {
                out[ch * hw + p] = xv.data[ch * hw + p] * inv_std[p] * g;
            }
        }
        self.push(
            Tensor {
                shape: vec![c, h, wd],
                data: out,
            },
            Op::LayerNorm {
                x,
                w,
                inv_std,
                mean,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|&v| erf_free_gelu(v).0).collect();
        let shape = xv.shape.clone();
        self.push(Tensor { shape, data }, Op::Gelu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|&v| v / (1.0 + (-v).exp())).collect();
        let shape = xv.shape.clone();
        self.push(Tensor { shape, data }, Op::Silu(x))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let (_, h, w) = self.value(parts[0]).chw();
        let mut c = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            let (pc, ph, pw) = pv.chw();
            assert!(ph == h && pw == w, "concat spatial mismatch");
            c += pc;
            data.extend_from_slice(&pv.data);
        }
        self.push(
            Tensor {
                shape: vec![c, h, w],
                data,
            },
            Op::Concat(parts.to_vec()),
        )
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (c, h, w) = xv.chw();
        assert!(start + len <= c, "channel slice out of range");
        let hw = h * w;
        let data = xv.data[start * hw..(start + len) * hw].to_vec();
        self.push(
            Tensor {
                shape: vec![len, h, w],
                data,
            },
            Op::SliceChannels { x, start },
        )
    }

    /// Multi-head attention across channels: per head, queries and keys are
    /// L2-normalised over pixels, the `d x d` similarity is scaled by the
    /// head's temperature, soft-maxed over keys and applied to values.
    pub fn channel_attention(&mut self, q: Var, k: Var, v: Var, temp: Var, heads: usize) -> Var {
        let (c, h, w) = self.value(q).chw();
        assert_eq!(self.value(k).shape, self.value(q).shape);
        assert_eq!(self.value(v).shape, self.value(q).shape);
        assert_eq!(self.value(temp).shape, vec![heads], "temperature shape");
        assert_eq!(c % heads, 0, "channels not divisible by heads");
        let d = c / heads;
        let n = h * w;
        let normalize = |src: &[f64]| {
            let mut out = src.to_vec();
            let mut norms = vec![0.0; c];
            for (row, nrm) in norms.iter_mut().enumerate() {
                let r = &mut out[row * n..(row + 1) * n];
                let s = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                *nrm = s;
                let inv = 1.0 / s.max(NORM_EPS);
                r.iter_mut().for_each(|v| *v *= inv);
            }
            (out, norms)
        };
        let (qn, q_norm) = normalize(&self.value(q).data);
        let (kn, k_norm) = normalize(&self.value(k).data);
        let vv = &self.value(v).data;
        let tv = &self.value(temp).data;
        let mut sim = vec![0.0; heads * d * d];
        let mut attn = vec![0.0; heads * d * d];
        let mut out = vec![0.0; c * n];
        for hd in 0..heads {
            let base = hd * d;
            let s = &mut sim[hd * d * d..(hd + 1) * d * d];
            for i in 0..d {
                let qi = &qn[(base + i) * n..(base + i + 1) * n];
                for j in 0..d {
                    let kj = &kn[(base + j) * n..(base + j + 1) * n];
                    s[i * d + j] = dot(qi, kj);
                }
            }
            let a = &mut attn[hd * d * d..(hd + 1) * d * d];
            for i in 0..d {
                let row = &s[i * d..(i + 1) * d];
                let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(tv[hd] * x));
                let mut z = 0.0;
                for j in 0..d {
                    let e = (tv[hd] * row[j] - m).exp();
                    a[i * d + j] = e;
                    z += e;
                }
                for j in 0..d {
                    a[i * d + j] /= z;
                }
            }
            for i in 0..d {
                let o = &mut out[(base + i) * n..(base + i + 1) * n];
                for j in 0..d {
                    let aij = a[i * d + j];
                    let vj = &vv[(base + j) * n..(base + j + 1) * n];
                    for (ov, vx) in o.iter_mut().zip(vj) {
                        *ov += aij * vx;
                    }
                }
            }
        }
        self.push(
            Tensor {
                shape: vec![c, h, w],
                data: out,
            },
            Op::ChannelAttention(Box::new(AttentionRecord {
                q,
                k,
                v,
                temp,
                heads,
                qn,
                kn,
                q_norm,
                k_norm,
                sim,
                attn,
            })),
        )
    }

    /// `[C, H, W] -> [4C, H/2, W/2]`, channel index `c*4 + dy*2 + dx`.
    pub fn pixel_unshuffle(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = xv.chw();
        assert!(h % 2 == 0 && w % 2 == 0, "pixel_unshuffle needs even dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for dy in 0..2 {
                for dx in 0..2 {
                    let oc = ch * 4 + dy * 2 + dx;
                    for y in 0..oh {
                        for xx in 0..ow {
                            out[(oc * oh + y) * ow + xx] = xv.data[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
                        }
                    }
                }
            }
        }
        self.push(
            Tensor {
                shape: vec![4 * c, oh, ow],
                data: out,
            },
            Op::PixelUnshuffle(x),
        )
    }

    /// Inverse of [`Tape::pixel_unshuffle`].
    pub fn pixel_shuffle(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c4, h, w) = xv.chw();
        assert_eq!(c4 % 4, 0, "pixel_shuffle needs channels divisible by 4");
        let c = c4 / 4;
        let (oh, ow) = (h * 2, w * 2);
        let mut out = vec![0.0; c4 * h * w];
        for ch in 0..c {
            for dy in 0..2 {
                for dx in 0..2 {
                    let ic = ch * 4 + dy * 2 + dx;
                    for y in 0..h {
                        for xx in 0..w {
                            out[(ch * oh + 2 * y + dy) * ow + 2 * xx + dx] = xv.data[(ic * h + y) * w + xx];
                        }
                    }
                }
            }
        }
        self.push(
            Tensor {
                shape: vec![c, oh, ow],
                data: out,
            },
            Op::PixelShuffle(x),
        )
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = xv.chw();
        let hw = h * w;
        let data = (0..c)
            .map(|ch| xv.data[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(
            Tensor {
                shape: vec![c],
                data,
            },
            Op::GlobalAvgPool(x),
        )
    }

    /// `w x + b` with `w` shaped `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let [o, i] = wv.shape[..] else {
            panic!("linear weight must be 2-d")
        };
        assert_eq!(xv.shape, vec![i], "linear input shape");
        let mut data: Vec<f64> = (0..o).map(|r| dot(&wv.data[r * i..(r + 1) * i], &xv.data)).collect();
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.shape, vec![o], "linear bias shape");
            for (d, bb) in data.iter_mut().zip(&bv.data) {
                *d += bb;
            }
        }
        self.push(
            Tensor {
                shape: vec![o],
                data,
            },
            Op::Linear { x, w, b },
        )
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape.len(), 1, "softmax expects a vector");
        let m = xv.data.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut data: Vec<f64> = xv.data.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = data.iter().sum();
        data.iter_mut().for_each(|v| *v /= z);
        let shape = xv.shape.clone();
        self.push(Tensor { shape, data }, Op::Softmax(x))
    }

    /// `sum_i w[i] * p[i]` for `p` shaped `[N, ...]`.
    pub fn weighted_sum(&mut self, w: Var, p: Var) -> Var {
        let wv = self.value(w);
        let pv = self.value(p);
        let n = wv.len();
        assert_eq!(pv.shape[0], n, "weighted_sum component count");
        let inner = pv.len() / n;
        let mut data = vec![0.0; inner];
        for (i, wi) in wv.data.iter().enumerate() {
            for (d, s) in data.iter_mut().zip(&pv.data[i * inner..(i + 1) * inner]) {
                *d += wi * s;
            }
        }
        let shape = pv.shape[1..].to_vec();
        self.push(Tensor { shape, data }, Op::WeightedSum { w, p })
    }

    /// Bilinear resize of `[C, h, w]` to `[C, out_h, out_w]` with half-pixel
    /// centres (no corner alignment).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xv = self.value(x);
        let (c, h, w) = xv.chw();
        let rows = bilinear_taps(h, out_h);
        let cols = bilinear_taps(w, out_w);
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let src = &xv.data[ch * h * w..(ch + 1) * h * w];
            for (oy, r) in rows.iter().enumerate() {
                for (ox, cl) in cols.iter().enumerate() {
                    let top = src[r.i0 * w + cl.i0] * (1.0 - cl.w1) + src[r.i0 * w + cl.i1] * cl.w1;
                    let bot = src[r.i1 * w + cl.i0] * (1.0 - cl.w1) + src[r.i1 * w + cl.i1] * cl.w1;
                    out[(ch * out_h + oy) * out_w + ox] = top * (1.0 - r.w1) + bot * r.w1;
                }
            }
        }
        self.push(
            Tensor {
                shape: vec![c, out_h, out_w],
                data: out,
            },
            Op::ResizeBilinear { x, rows, cols },
        )
    }

    /// Vector `[C]` to constant planes `[C, H, W]`.
    pub fn broadcast_planes(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape.len(), 1, "broadcast expects a vector");
        let mut data = Vec::with_capacity(xv.len() * h * w);
        for &v in &xv.data {
            data.extend(std::iter::repeat_n(v, h * w));
        }
        let c = xv.len();
        self.push(
            Tensor {
                shape: vec![c, h, w],
                data,
            },
            Op::Broadcast { x },
        )
    }

    /// Element-mean of `|x - target|`.
    pub fn mean_abs_diff(&mut self, x: Var, target: &[f64]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), target.len(), "l1 target length");
        let s: f64 = xv.data.iter().zip(target).map(|(a, b)| (a - b).abs()).sum();
        let n = xv.len() as f64;
        self.push(
            Tensor::scalar(s / n),
            Op::MeanAbsDiff {
                x,
                target: target.to_vec(),
            },
        )
    }

    pub fn sum_abs(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().map(|v| v.abs()).sum();
        self.push(Tensor::scalar(s), Op::SumAbs(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Reverse sweep from a scalar output. Only nodes the output depends on
    /// receive gradients.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = zip_map(g, bv, |x, y| x * y);
                let gb = zip_map(g, av, |x, y| x * y);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Conv2d { x, w, groups } => self.conv2d_backward(*x, *w, *groups, g, grads),
            Op::LayerNorm {
                x,
                w,
                inv_std,
                mean,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (c, h, wd) = xv.chw();
                let hw = h * wd;
                let mut gw = vec![0.0; c];
                let mut gx = vec![0.0; c * hw];
                // dot = sum_c dxhat_c * x_c per pixel
                let mut dotp = vec![0.0; hw];
                for ch in 0..c {
                    let gamma = wv.data[ch];
                    for p in 0..hw {
                        let idx = ch * hw + p;
                        let xv_ = xv.data[idx];
                        gw[ch] += g.data[idx] * xv_ * inv_std[p];
                        dotp[p] += g.data[idx] * gamma * xv_;
                    }
                }
                for ch in 0..c {
                    let gamma = wv.data[ch];
                    for p in 0..hw {
                        let idx = ch * hw + p;
                        let s = inv_std[p];
                        gx[idx] = s * g.data[idx] * gamma
                            - s * s * s * (xv.data[idx] - mean[p]) / c as f64 * dotp[p];
                    }
                }
                accumulate(grads, *x, Tensor { shape: xv.shape.clone(), data: gx });
                accumulate(grads, *w, Tensor { shape: vec![c], data: gw });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx = zip_map(g, xv, |gg, v| gg * erf_free_gelu(v).1);
                accumulate(grads, *x, gx);
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let gx = zip_map(g, xv, |gg, v| {
                    let s = 1.0 / (1.0 + (-v).exp());
                    gg * s * (1.0 + v * (1.0 - s))
                });
                accumulate(grads, *x, gx);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    accumulate(
                        grads,
                        p,
                        Tensor {
                            shape: pv.shape.clone(),
                            data: g.data[off..off + n].to_vec(),
                        },
                    );
                    off += n;
                }
            }
            Op::SliceChannels { x, start } => {
                let xv = self.value(*x);
                let (_, h, w) = xv.chw();
                let mut gx = Tensor::zeros(&xv.shape);
                let off = start * h * w;
                gx.data[off..off + g.len()].copy_from_slice(&g.data);
                accumulate(grads, *x, gx);
            }
            Op::ChannelAttention(rec) => self.attention_backward(rec, g, grads),
            Op::PixelUnshuffle(x) => {
                let xv = self.value(*x);
                let (c, h, w) = xv.chw();
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = Tensor::zeros(&xv.shape);
                for ch in 0..c {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let oc = ch * 4 + dy * 2 + dx;
                            for y in 0..oh {
                                for xx in 0..ow {
                                    gx.data[(ch * h + 2 * y + dy) * w + 2 * xx + dx] = g.data[(oc * oh + y) * ow + xx];
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::PixelShuffle(x) => {
                let xv = self.value(*x);
                let (c4, h, w) = xv.chw();
                let (oh, ow) = (h * 2, w * 2);
                let mut gx = Tensor::zeros(&xv.shape);
                for ch in 0..c4 / 4 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let ic = ch * 4 + dy * 2 + dx;
                            for y in 0..h {
                                for xx in 0..w {
                                    gx.data[(ic * h + y) * w + xx] = g.data[(ch * oh + 2 * y + dy) * ow + 2 * xx + dx];
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let (c, h, w) = xv.chw();
                let hw = h * w;
                let mut gx = Tensor::zeros(&xv.shape);
                for ch in 0..c {
                    let v = g.data[ch] / hw as f64;
                    gx.data[ch * hw..(ch + 1) * hw].iter_mut().for_each(|d| *d = v);
                }
                accumulate(grads, *x, gx);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (o, inp) = (wv.shape[0], wv.shape[1]);
                let mut gx = vec![0.0; inp];
                let mut gw = vec![0.0; o * inp];
                for r in 0..o {
                    let gr = g.data[r];
                    for c in 0..inp {
                        gx[c] += gr * wv.data[r * inp + c];
                        gw[r * inp + c] = gr * xv.data[c];
                    }
                }
                accumulate(grads, *x, Tensor { shape: vec![inp], data: gx });
                accumulate(grads, *w, Tensor { shape: vec![o, inp], data: gw });
                if let Some(b) = b {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Softmax(x) => {
                let s = &out.data;
                let d = dot(&g.data, s);
                let data = s.iter().zip(&g.data).map(|(si, gi)| si * (gi - d)).collect();
                accumulate(grads, *x, Tensor { shape: out.shape.clone(), data });
            }
            Op::WeightedSum { w, p } => {
                let wv = self.value(*w);
                let pv = self.value(*p);
                let n = wv.len();
                let inner = pv.len() / n;
                let mut gw = vec![0.0; n];
                let mut gp = vec![0.0; pv.len()];
                for i in 0..n {
                    let comp = &pv.data[i * inner..(i + 1) * inner];
                    gw[i] = dot(comp, &g.data);
                    for (d, s) in gp[i * inner..(i + 1) * inner].iter_mut().zip(&g.data) {
                        *d = wv.data[i] * s;
                    }
                }
                accumulate(grads, *w, Tensor { shape: wv.shape.clone(), data: gw });
                accumulate(grads, *p, Tensor { shape: pv.shape.clone(), data: gp });
            }
            Op::ResizeBilinear { x, rows, cols } => {
                let xv = self.value(*x);
                let (c, h, w) = xv.chw();
                let (oh, ow) = (rows.len(), cols.len());
                let mut gx = Tensor::zeros(&xv.shape);
                for ch in 0..c {
                    let dst = &mut gx.data[ch * h * w..(ch + 1) * h * w];
                    for (oy, r) in rows.iter().enumerate() {
                        for (ox, cl) in cols.iter().enumerate() {
                            let gv = g.data[(ch * oh + oy) * ow + ox];
                            let top = gv * (1.0 - r.w1);
                            let bot = gv * r.w1;
                            dst[r.i0 * w + cl.i0] += top * (1.0 - cl.w1);
                            dst[r.i0 * w + cl.i1] += top * cl.w1;
                            dst[r.i1 * w + cl.i0] += bot * (1.0 - cl.w1);
                            dst[r.i1 * w + cl.i1] += bot * cl.w1;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Broadcast { x } => {
                let xv = self.value(*x);
                let c = xv.len();
                let hw = g.len() / c;
                let data = (0..c)
                    .map(|ch| g.data[ch * hw..(ch + 1) * hw].iter().sum())
                    .collect();
                accumulate(grads, *x, Tensor { shape: vec![c], data });
            }
            Op::MeanAbsDiff { x, target } => {
                let xv = self.value(*x);
                let scale = g.data[0] / xv.len() as f64;
                let data = xv
                    .data
                    .iter()
                    .zip(target)
                    .map(|(a, b)| scale * sign(a - b))
                    .collect();
                accumulate(grads, *x, Tensor { shape: xv.shape.clone(), data });
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                accumulate(grads, *x, Tensor::filled(&xv.shape, g.data[0]));
            }
            Op::SumAbs(x) => {
                let xv = self.value(*x);
                let s = g.data[0];
                let data = xv.data.iter().map(|a| s * sign(*a)).collect();
                accumulate(grads, *x, Tensor { shape: xv.shape.clone(), data });
            }
        }
    }

    fn conv2d_backward(&self, x: Var, w: Var, groups: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (cin, h, wd) = xv.chw();
        let [cout, cin_g, k, _] = wv.shape[..] else { unreachable!() };
        let cout_g = cout / groups;
        let pad = (k / 2) as isize;
        let hw = h * wd;
        let mut gx = vec![0.0; cin * hw];
        let mut gw = vec![0.0; wv.len()];
        for oc in 0..cout {
            let grp = oc / cout_g;
            let grow = &g.data[oc * hw..(oc + 1) * hw];
            for icl in 0..cin_g {
                let ic = grp * cin_g + icl;
                let xin = &xv.data[ic * hw..(ic + 1) * hw];
                let gxin = &mut gx[ic * hw..(ic + 1) * hw];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(wd, dx);
                        let widx = ((oc * cin_g + icl) * k + ky) * k + kx;
                        let wt = wv.data[widx];
                        let mut acc = 0.0;
                        let sx0 = (x0 as isize + dx) as usize;
                        let span = x1 - x0;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let gr = &grow[y * wd + x0..y * wd + x1];
                            let src = &xin[sy * wd + sx0..sy * wd + sx0 + span];
                            acc += dot(gr, src);
                            let dst = &mut gxin[sy * wd + sx0..sy * wd + sx0 + span];
                            for (d, gg) in dst.iter_mut().zip(gr) {
                                *d += wt * gg;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
        accumulate(grads, x, Tensor { shape: xv.shape.clone(), data: gx });
        accumulate(grads, w, Tensor { shape: wv.shape.clone(), data: gw });
    }

    fn attention_backward(&self, rec: &AttentionRecord, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let qv = self.value(rec.q);
        let vv = self.value(rec.v);
        let tv = self.value(rec.temp);
        let (c, h, w) = qv.chw();
        let heads = rec.heads;
        let d = c / heads;
        let n = h * w;
        let mut gq = vec![0.0; c * n];
        let mut gk = vec![0.0; c * n];
        let mut gv = vec![0.0; c * n];
        let mut gt = vec![0.0; heads];
        let mut gqn = vec![0.0; c * n];
        let mut gkn = vec![0.0; c * n];
        for hd in 0..heads {
            let base = hd * d;
            let a = &rec.attn[hd * d * d..(hd + 1) * d * d];
            let s = &rec.sim[hd * d * d..(hd + 1) * d * d];
            let tau = tv.data[hd];
            // dA = dO V^T, dV = A^T dO
            let mut da = vec![0.0; d * d];
            for i in 0..d {
                let go = &g.data[(base + i) * n..(base + i + 1) * n];
                for j in 0..d {
                    let vj = &vv.data[(base + j) * n..(base + j + 1) * n];
                    da[i * d + j] = dot(go, vj);
                    let aij = a[i * d + j];
                    let gvj = &mut gv[(base + j) * n..(base + j + 1) * n];
                    for (dst, x) in gvj.iter_mut().zip(go) {
                        *dst += aij * x;
                    }
                }
            }
            // softmax backward, then through the temperature scale
            let mut ds = vec![0.0; d * d];
            for i in 0..d {
                let row_a = &a[i * d..(i + 1) * d];
                let row_da = &da[i * d..(i + 1) * d];
                let inner = dot(row_a, row_da);
                for j in 0..d {
                    let dz = row_a[j] * (row_da[j] - inner);
                    gt[hd] += dz * s[i * d + j];
                    ds[i * d + j] = dz * tau;
                }
            }
            for i in 0..d {
                let gqi = &mut gqn[(base + i) * n..(base + i + 1) * n];
                for j in 0..d {
                    let kj = &rec.kn[(base + j) * n..(base + j + 1) * n];
                    let coef = ds[i * d + j];
                    for (dst, x) in gqi.iter_mut().zip(kj) {
                        *dst += coef * x;
                    }
                }
            }
            for j in 0..d {
                let gkj = &mut gkn[(base + j) * n..(base + j + 1) * n];
                for i in 0..d {
                    let qi = &rec.qn[(base + i) * n..(base + i + 1) * n];
                    let coef = ds[i * d + j];
                    for (dst, x) in gkj.iter_mut().zip(qi) {
                        *dst += coef * x;
                    }
                }
            }
        }
        normalize_backward(&rec.qn, &rec.q_norm, &gqn, &mut gq, n);
        normalize_backward(&rec.kn, &rec.k_norm, &gkn, &mut gk, n);
        let shape = qv.shape.clone();
        accumulate(grads, rec.q, Tensor { shape: shape.clone(), data: gq });
        accumulate(grads, rec.k, Tensor { shape: shape.clone(), data: gk });
        accumulate(grads, rec.v, Tensor { shape, data: gv });
        accumulate(grads, rec.temp, Tensor { shape: vec![heads], data: gt });
    }
}

/// Backward of row-wise `y = x / max(|x|, eps)`.
fn normalize_backward(y: &[f64], norms: &[f64], gy: &[f64], gx: &mut [f64], n: usize) {
    for (row, &nrm) in norms.iter().enumerate() {
        let yr = &y[row * n..(row + 1) * n];
        let gyr = &gy[row * n..(row + 1) * n];
        let gxr = &mut gx[row * n..(row + 1) * n];
        if nrm > NORM_EPS {
            let proj = dot(yr, gyr);
            for ((d, yy), gg) in gxr.iter_mut().zip(yr).zip(gyr) {
                *d = (gg - yy * proj) / nrm;
            }
        } else {
            for (d, gg) in gxr.iter_mut().zip(gyr) {
                *d = gg / NORM_EPS;
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect(),
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Output rows `y` for which `y + offset` lies inside `0..n`.
fn valid_range(n: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (n as isize - offset.max(0)).max(lo as isize) as usize;
    (lo.min(n), hi.min(n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of every input element of `inputs` against
    /// the tape gradient of `build` (which must produce a scalar).
    fn check<F>(inputs: Vec<Tensor>, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let eval = |ins: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t)).collect();
            let out = build(&mut tape, &vars);
            tape.value(out).data[0]
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out);
        let h = 1e-5;
        for (ii, inp) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[ii]).cloned().unwrap_or_else(|| Tensor::zeros(inp.shape()));
            for e in 0..inp.len() {
                let mut plus = inputs.clone();
                plus[ii].data[e] += h;
                let mut minus = inputs.clone();
                minus[ii].data[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.data[e];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-5, "input {ii} elem {e}: fd {fd} vs analytic {an}");
            }
        }
    }

    /// Scalar readout with non-uniform weights so every output element matters.
    fn readout(tape: &mut Tape, v: Var) -> Var {
        let n = tape.value(v).len();
        let shape = tape.value(v).shape().to_vec();
        let w: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
        let wv = tape.constant(Tensor::new(shape, w).unwrap());
        let p = tape.mul(v, wv);
        tape.sum(p)
    }

    #[test]
    fn conv_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(
            vec![rand_tensor(&[4, 5, 6], &mut rng), rand_tensor(&[6, 2, 3, 3], &mut rng)],
            |t, v| {
                let y = t.conv2d(v[0], v[1], 2);
                readout(t, y)
            },
        );
        check(
            vec![rand_tensor(&[3, 4, 4], &mut rng), rand_tensor(&[5, 3, 1, 1], &mut rng)],
            |t, v| {
                let y = t.conv2d(v[0], v[1], 1);
                readout(t, y)
            },
        );
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[2, 4, 5], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.leaf(&x), tape.leaf(&w));
        let y = tape.conv2d(xv, wv, 1);
        let out = tape.value(y);
        for oc in 0..3 {
            for yy in 0..4i64 {
                for xx in 0..5i64 {
                    let mut s = 0.0;
                    for ic in 0..2 {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                                if (0..4).contains(&sy) && (0..5).contains(&sx) {
                                    s += w.data[((oc * 2 + ic) * 3 + ky as usize) * 3 + kx as usize]
                                        * x.data[(ic * 4 + sy as usize) * 5 + sx as usize];
                                }
                            }
                        }
                    }
                    let got = out.data[(oc * 4 + yy as usize) * 5 + xx as usize];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn layer_norm_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(vec![rand_tensor(&[5, 3, 3], &mut rng), rand_tensor(&[5], &mut rng)], |t, v| {
            let y = t.layer_norm(v[0], v[1]);
            readout(t, y)
        });
    }

    #[test]
    fn attention_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let temp = Tensor::new(vec![2], vec![1.3, 0.7]).unwrap();
        check(
            vec![
                rand_tensor(&[4, 3, 3], &mut rng),
                rand_tensor(&[4, 3, 3], &mut rng),
                rand_tensor(&[4, 3, 3], &mut rng),
                temp,
            ],
            |t, v| {
                let y = t.channel_attention(v[0], v[1], v[2], v[3], 2);
                readout(t, y)
            },
        );
    }

    #[test]
    fn pointwise_and_shape_ops_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check(vec![rand_tensor(&[4, 4, 4], &mut rng), rand_tensor(&[4, 4, 4], &mut rng)], |t, v| {
            let a = t.gelu(v[0]);
            let b = t.silu(v[1]);
            let m = t.mul(a, b);
            let s = t.add(m, v[0]);
            let un = t.pixel_unshuffle(s);
            let sl = t.slice_channels(un, 3, 8);
            let cat = t.concat_channels(&[sl, un]);
            let sh = t.pixel_shuffle(cat);
            readout(t, sh)
        });
    }

    #[test]
    fn prompt_path_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        check(
            vec![
                rand_tensor(&[3, 4, 4], &mut rng),
                rand_tensor(&[5, 3], &mut rng),
                rand_tensor(&[5], &mut rng),
                rand_tensor(&[5, 2, 3, 3], &mut rng),
            ],
            |t, v| {
                let pooled = t.global_avg_pool(v[0]);
                let logits = t.linear(pooled, v[1], Some(v[2]));
                let w = t.softmax(logits);
                let p = t.weighted_sum(w, v[3]);
                let r = t.resize_bilinear(p, 4, 4);
                let cat = t.concat_channels(&[v[0], r]);
                let b = t.broadcast_planes(pooled, 4, 4);
                let cat = t.concat_channels(&[cat, b]);
                readout(t, cat)
            },
        );
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&[2, 3, 5], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let same = tape.resize_bilinear(xv, 3, 5);
        assert_eq!(tape.value(same).data(), x.data());
        let c = Tensor::filled(&[1, 3, 3], 2.5);
        let cv = tape.leaf(&c);
        let up = tape.resize_bilinear(cv, 7, 5);
        assert!(tape.value(up).data().iter().all(|v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn shuffle_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&[3, 4, 6], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let u = tape.pixel_unshuffle(xv);
        assert_eq!(tape.value(u).shape(), &[12, 2, 3]);
        let s = tape.pixel_shuffle(u);
        assert_eq!(tape.value(s), &x);
    }

    #[test]
    fn softmax_sums_to_one() {
        let x = Tensor::new(vec![4], vec![1000.0, -3.0, 2.0, 999.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let s = tape.softmax(xv);
        let sum: f64 = tape.value(s).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn valid_range_edges() {
        assert_eq!(valid_range(5, -1), (1, 5));
        assert_eq!(valid_range(5, 1), (0, 4));
        assert_eq!(valid_range(5, 0), (0, 5));
        assert_eq!(valid_range(1, 1), (0, 0));
    }
}
