//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass. Nodes
//! are appended in evaluation order, so the reverse pass is a single sweep
//! from the root back to the leaves.

use crate::kernels::{self, ConvGeom, GroupStats};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Clamp(Var, f64, f64),
    SoftClamp(Var, f64, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    GroupNorm {
        x: Var,
        groups: usize,
        stats: GroupStats,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    MaskMul {
        x: Var,
        mask: Vec<f64>,
    },
    Concat(Vec<Var>),
    Crop {
        x: Var,
        y0: usize,
        x0: usize,
    },
    SliceChannels {
        x: Var,
        c0: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    AvgPool {
        x: Var,
        factor: usize,
    },
    Embed {
        table: Var,
        labels: Vec<usize>,
    },
    SumChannels(Var),
    ChannelNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    GlobalAvgPool(Var),
    SpectralNorm {
        w: Var,
        u: Vec<f64>,
        v: Vec<f64>,
        sigma: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation tape for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: {a:?} vs {b:?}"))
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Adds an input. `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        self.push(v, Op::LeakyRelu(a, slope), ng)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(v, Op::Clamp(a, lo, hi), ng)
    }

    /// Clamps into `[lo, hi]`. Outside the interval, gradients that would
    /// move the input back towards it still pass, so saturated values can
    /// recover under gradient descent.
    pub fn soft_clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(v, Op::SoftClamp(a, lo, hi), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(v, Op::Square(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        let ng = self.ng(a);
        self.push(v, Op::Mean(a), ng)
    }

    /// Square-kernel convolution of a `[C, H, W]` input with a
    /// `[C_out, C_in, k, k]` weight and optional `[C_out]` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (c_in, h, wd) = self.value(x).chw()?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c_in || ws[2] != ws[3] {
            return Err(Error::Shape(format!(
                "conv2d: weight {ws:?} incompatible with input channels {c_in}"
            )));
        }
        let (c_out, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(Error::Shape(format!("conv2d: {h}x{wd} input too small for k={k}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(shape_err("conv2d bias", self.shape(b), &[c_out]));
            }
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            k,
            stride,
            pad,
        };
        let (out, cols) = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            c_out,
            &geom,
        );
        let (ho, wo) = geom.out_hw();
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        // columns are only needed for the weight gradient
        let cols = if self.ng(w) { cols } else { None };
        let value = Tensor::from_vec(&[c_out, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, ng))
    }

    /// Parameter-free group normalization of a `[C, H, W]` tensor.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Shape(format!("group_norm: {c} channels not divisible into {groups} groups")));
        }
        let (out, stats) = kernels::group_norm_forward(self.value(x).data(), c, h * w, groups, eps);
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_vec(&[c, h, w], out)?, Op::GroupNorm { x, groups, stats }, ng))
    }

    /// Per-channel scale and shift with `[C]`-shaped `gamma` and `beta`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("channel_affine", self.shape(gamma), &[c]));
        }
        let hw = h * w;
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let out = Tensor::from_fn(&[c, h, w], |i| xv.data()[i] * gv.data()[i / hw] + bv.data()[i / hw]);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(out, Op::ChannelAffine { x, gamma, beta }, ng))
    }

    /// Multiplies every channel of `x` by the constant `[H, W]` map `mask`.
    pub fn mask_mul(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if mask.len() != h * w {
            return Err(Error::Shape(format!("mask_mul: mask of {} pixels vs {h}x{w} features", mask.len())));
        }
        let hw = h * w;
        let xv = self.value(x);
        let out = Tensor::from_fn(&[c, h, w], |i| xv.data()[i] * mask[i % hw]);
        let ng = self.ng(x);
        Ok(self.push(out, Op::MaskMul { x, mask: mask.to_vec() }, ng))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&vals)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let out = self.value(x).crop(y0, x0, h, w)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Crop { x, y0, x0 }, ng))
    }

    /// Channels `c0..c0 + n` of a `[C, H, W]` tensor.
    pub fn crop_channels(&mut self, x: Var, c0: usize, n: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if c0 + n > c {
            return Err(Error::Shape(format!("channels {c0}..{} of {c}", c0 + n)));
        }
        let hw = h * w;
        let out = Tensor::from_vec(&[n, h, w], self.value(x).data()[c0 * hw..(c0 + n) * hw].to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceChannels { x, c0 }, ng))
    }

    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if factor == 1 {
            return Ok(x);
        }
        let out = kernels::upsample_bilinear(self.value(x).data(), c, h, w, factor);
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_vec(&[c, h * factor, w * factor], out)?, Op::Upsample { x, factor }, ng))
    }

    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if factor == 1 {
            return Ok(x);
        }
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::Shape(format!("avg_pool: {h}x{w} not divisible by {factor}")));
        }
        let out = kernels::avg_pool(self.value(x).data(), c, h, w, factor);
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_vec(&[c, h / factor, w / factor], out)?, Op::AvgPool { x, factor }, ng))
    }

    /// Looks up a `[K, D]` embedding table per pixel, producing `[D, H, W]`.
    pub fn embed(&mut self, table: Var, labels: &[usize], h: usize, w: usize) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::Shape(format!("embed: table shape {ts:?}")));
        }
        if labels.len() != h * w {
            return Err(Error::Shape(format!("embed: {} labels for {h}x{w}", labels.len())));
        }
        let (k, d) = (ts[0], ts[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Palette { label: bad, classes: k });
        }
        let tv = self.value(table).data();
        let hw = h * w;
        let out = Tensor::from_fn(&[d, h, w], |i| tv[labels[i % hw] * d + i / hw]);
        let ng = self.ng(table);
        Ok(self.push(out, Op::Embed { table, labels: labels.to_vec() }, ng))
    }

    /// Sums a `[C, H, W]` tensor over channels, producing `[1, H, W]`.
    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; hw];
        for ch in 0..c {
            for (o, v) in out.iter_mut().zip(&xv[ch * hw..(ch + 1) * hw]) {
                *o += v;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_vec(&[1, h, w], out)?, Op::SumChannels(x), ng))
    }

    /// Scales every pixel's channel vector to unit length.
    pub fn channel_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut norms = vec![0.0; hw];
        for ch in 0..c {
            for (n, v) in norms.iter_mut().zip(&xv[ch * hw..(ch + 1) * hw]) {
                *n += v * v;
            }
        }
        norms.iter_mut().for_each(|n| *n = (*n + eps).sqrt());
        let out = Tensor::from_fn(&[c, h, w], |i| xv[i] / norms[i % hw]);
        let ng = self.ng(x);
        Ok(self.push(out, Op::ChannelNormalize { x, norms }, ng))
    }

    /// Spatial mean of a `[C, H, W]` tensor, producing `[C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.value(x).chw()?;
        let out = kernels::global_avg_pool(self.value(x));
        let c = out.len();
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_vec(&[c], out)?, Op::GlobalAvgPool(x), ng))
    }

    /// Divides a weight by its spectral-norm estimate `u^T W v`, treating the
    /// power-iteration vectors as constants.
    pub fn spectral_norm(&mut self, w: Var, u: &[f64], v: &[f64]) -> Result<Var> {
        let wv = self.value(w);
        let rows = wv.shape()[0];
        let cols = wv.len() / rows.max(1);
        if u.len() != rows || v.len() != cols {
            return Err(Error::Shape(format!(
                "spectral_norm: u/v of {}/{} for a {rows}x{cols} matrix",
                u.len(),
                v.len()
            )));
        }
        let sigma = crate::spectral::bilinear(wv.data(), rows, cols, u, v);
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::NonFinite(format!("spectral norm estimate {sigma}")));
        }
        let out = wv.map(|x| x / sigma);
        let ng = self.ng(w);
        Ok(self.push(
            out,
            Op::SpectralNorm {
                w,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.shape(root)));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            // intermediate gradients are dropped once propagated
            if matches!(node.op, Op::Leaf) || i == root.0 {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y).expect("shape");
                    self.accum(grads, *a, ga);
                }
                if self.ng(*b) {
                    let gb = g.zip_map(self.value(*a), |x, y| x * y).expect("shape");
                    self.accum(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => self.accum(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
            Op::Relu(a) => {
                let ga = g.zip_map(out, |d, y| if y > 0.0 { d } else { 0.0 }).expect("shape");
                self.accum(grads, *a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let ga = g
                    .zip_map(self.value(*a), |d, x| if x > 0.0 { d } else { d * slope })
                    .expect("shape");
                self.accum(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let ga = g
                    .zip_map(self.value(*a), |d, x| if x >= *lo && x <= *hi { d } else { 0.0 })
                    .expect("shape");
                self.accum(grads, *a, ga);
            }
            Op::SoftClamp(a, lo, hi) => {
                let ga = g
                    .zip_map(self.value(*a), |d, x| {
                        if (x > *hi && d < 0.0) || (x < *lo && d > 0.0) {
                            0.0
                        } else {
                            d
                        }
                    })
                    .expect("shape");
                self.accum(grads, *a, ga);
            }
            Op::Square(a) => {
                let ga = g.zip_map(self.value(*a), |d, x| 2.0 * d * x).expect("shape");
                self.accum(grads, *a, ga);
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                self.accum(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let s = g.data()[0] / n;
                self.accum(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let c_out = out.shape()[0];
                let n = out.shape()[1] * out.shape()[2];
                if let Some(b) = b {
                    if self.ng(*b) {
                        let gb: Vec<f64> = (0..c_out).map(|o| g.data()[o * n..(o + 1) * n].iter().sum()).collect();
                        self.accum(grads, *b, Tensor::from_vec(&[c_out], gb).expect("shape"));
                    }
                }
                if self.ng(*w) {
                    let xcols: &[f64] = match cols {
                        Some(c) => c,
                        None => self.value(*x).data(),
                    };
                    let dw = kernels::conv2d_grad_weight(g.data(), xcols, c_out, geom.patch_len(), n);
                    self.accum(grads, *w, Tensor::from_vec(self.shape(*w), dw).expect("shape"));
                }
                if self.ng(*x) {
                    let dx = kernels::conv2d_grad_input(g.data(), self.value(*w).data(), c_out, geom);
                    self.accum(grads, *x, Tensor::from_vec(self.shape(*x), dx).expect("shape"));
                }
            }
            Op::GroupNorm { x, groups, stats } => {
                let per = out.len() / groups;
                let dx = kernels::group_norm_backward(g.data(), out.data(), stats, per);
                self.accum(grads, *x, Tensor::from_vec(out.shape(), dx).expect("shape"));
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let c = out.shape()[0];
                let hw = out.len() / c;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                if self.ng(*x) {
                    let dx = Tensor::from_fn(out.shape(), |i| g.data()[i] * gv[i / hw]);
                    self.accum(grads, *x, dx);
                }
                if self.ng(*gamma) {
                    let dg: Vec<f64> = (0..c)
                        .map(|ch| (ch * hw..(ch + 1) * hw).map(|i| g.data()[i] * xv[i]).sum())
                        .collect();
                    self.accum(grads, *gamma, Tensor::from_vec(&[c], dg).expect("shape"));
                }
                if self.ng(*beta) {
                    let db: Vec<f64> = (0..c).map(|ch| g.data()[ch * hw..(ch + 1) * hw].iter().sum()).collect();
                    self.accum(grads, *beta, Tensor::from_vec(&[c], db).expect("shape"));
                }
            }
            Op::MaskMul { x, mask } => {
                let hw = mask.len();
                let dx = Tensor::from_fn(out.shape(), |i| g.data()[i] * mask[i % hw]);
                self.accum(grads, *x, dx);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.ng(p) {
                        let slice = g.data()[offset..offset + n].to_vec();
                        self.accum(grads, p, Tensor::from_vec(self.shape(p), slice).expect("shape"));
                    }
                    offset += n;
                }
            }
            Op::SliceChannels { x, c0 } => {
                let src = self.shape(*x);
                let off = c0 * src[1] * src[2];
                let mut dx = Tensor::zeros(src);
                dx.data_mut()[off..off + g.len()].copy_from_slice(g.data());
                self.accum(grads, *x, dx);
            }
            Op::Crop { x, y0, x0 } => {
                let (c, h, w) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                let src = self.shape(*x);
                let (sh, sw) = (src[1], src[2]);
                let mut dx = Tensor::zeros(src);
                for ch in 0..c {
                    for y in 0..h {
                        let d0 = (ch * sh + y0 + y) * sw + x0;
                        let s0 = (ch * h + y) * w;
                        dx.data_mut()[d0..d0 + w].copy_from_slice(&g.data()[s0..s0 + w]);
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::Upsample { x, factor } => {
                let s = self.shape(*x);
                let dx = kernels::upsample_bilinear_backward(g.data(), s[0], s[1], s[2], *factor);
                self.accum(grads, *x, Tensor::from_vec(s, dx).expect("shape"));
            }
            Op::AvgPool { x, factor } => {
                let s = self.shape(*x);
                let dx = kernels::avg_pool_backward(g.data(), s[0], s[1], s[2], *factor);
                self.accum(grads, *x, Tensor::from_vec(s, dx).expect("shape"));
            }
            Op::Embed { table, labels } => {
                let d = out.shape()[0];
                let hw = labels.len();
                let mut dt = Tensor::zeros(self.shape(*table));
                for ch in 0..d {
                    for (p, &l) in labels.iter().enumerate() {
                        dt.data_mut()[l * d + ch] += g.data()[ch * hw + p];
                    }
                }
                self.accum(grads, *table, dt);
            }
            Op::SumChannels(x) => {
                let hw = g.len();
                let dx = Tensor::from_fn(self.shape(*x), |i| g.data()[i % hw]);
                self.accum(grads, *x, dx);
            }
            Op::ChannelNormalize { x, norms } => {
                let c = out.shape()[0];
                let hw = norms.len();
                let mut dot = vec![0.0; hw];
                for ch in 0..c {
                    for p in 0..hw {
                        dot[p] += g.data()[ch * hw + p] * out.data()[ch * hw + p];
                    }
                }
                let dx = Tensor::from_fn(out.shape(), |i| {
                    let p = i % hw;
                    (g.data()[i] - out.data()[i] * dot[p]) / norms[p]
                });
                self.accum(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[1] * s[2];
                let dx = Tensor::from_fn(s, |i| g.data()[i / hw] / hw as f64);
                self.accum(grads, *x, dx);
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let cols = v.len();
                let inner: f64 = g.data().iter().zip(out.data()).map(|(a, b)| a * b).sum();
                let dw = Tensor::from_fn(out.shape(), |i| (g.data()[i] - inner * u[i / cols] * v[i % cols]) / sigma);
                self.accum(grads, *w, dw);
            }
        }
    }
}
