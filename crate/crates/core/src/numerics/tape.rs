//! Wengert-list reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node holding its output and the
//! handles of its inputs. [`Tape::backward`] walks the list once in reverse.
//! Nodes that cannot reach a trainable leaf are skipped entirely, so frozen
//! sub-networks cost only their forward pass.

use std::collections::HashMap;

use super::{gemm, ParamId, ParamStore, Real, Strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBroadcast {
        x: Var,
        b: Var,
        outer: usize,
        mid: usize,
        inner: usize,
        b_outer: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    Permute021 {
        x: Var,
        a: usize,
        b: usize,
        c: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    AvgPool2 {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
    },
    Upsample2 {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        n: usize,
        c: usize,
        spatial: usize,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rows: usize,
        d: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        lq: usize,
        lk: usize,
        d: usize,
        dv: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        rows: usize,
        cols: usize,
        probs: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    MeanAxis {
        x: Var,
        outer: usize,
        mid: usize,
        inner: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
        d: usize,
    },
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        a_inner: usize,
        b_inner: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    L2NormalizeRows {
        x: Var,
        rows: usize,
        d: usize,
        norms: Vec<T>,
    },
    MulScalarVar {
        x: Var,
        s: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, cols: &mut [T]) {
    let plane = ho * wo;
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *o = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(cols: &[T], cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, dx: &mut [T]) {
    let plane = ho * wo;
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.data.clone()).expect("tape nodes are well-formed")
    }

    /// Leaf from a tensor; differentiable iff `t.requires_grad`.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::dim("constant", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.shape().to_vec(), p.value.data().to_vec(), Op::Leaf, p.trainable);
        self.bound.insert(id, v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(k, v)| (*k, *v))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        let data = self.value(x).iter().map(|&v| v * s).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), data, Op::Scale(x, s), rg)
    }

    fn add_broadcast(&mut self, x: Var, b: Var, outer: usize, mid: usize, inner: usize, b_outer: usize) -> Var {
        let xs = self.value(x);
        let bs = self.value(b);
        let mut data = Vec::with_capacity(xs.len());
        for o in 0..outer {
            let bo = if b_outer == 1 { 0 } else { o };
            for m in 0..mid {
                let bv = bs[bo * mid + m];
                let base = (o * mid + m) * inner;
                data.extend(xs[base..base + inner].iter().map(|&v| v + bv));
            }
        }
        let rg = self.rg(x) || self.rg(b);
        let shape = self.shape(x).to_vec();
        self.push(
            shape,
            data,
            Op::AddBroadcast {
                x,
                b,
                outer,
                mid,
                inner,
                b_outer,
            },
            rg,
        )
    }

    /// `x[..., d] + b[d]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [d] {
            return Err(Error::dim("add_row_bias", self.shape(x), self.shape(b)));
        }
        let rows = self.value(x).len() / d;
        Ok(self.add_broadcast(x, b, rows, d, 1, 1))
    }

    /// `x[N, C, ...] + b[C]` or `x[N, C, ...] + b[N, C]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::dim("add_channel_bias", &xs, self.shape(b)));
        }
        let (n, c) = (xs[0], xs[1]);
        let inner = numel(&xs[2..]);
        let bs = self.shape(b);
        let b_outer = if bs == [c] {
            1
        } else if bs == [n, c] {
            n
        } else {
            return Err(Error::dim("add_channel_bias", &xs, bs));
        };
        Ok(self.add_broadcast(x, b, n, c, inner, b_outer))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        if ashape.is_empty() || bshape.len() != 2 {
            return Err(Error::dim("matmul", &ashape, &bshape));
        }
        let k = *ashape.last().unwrap();
        let (bk, n) = if trans_b { (bshape[1], bshape[0]) } else { (bshape[0], bshape[1]) };
        if k != bk {
            return Err(Error::dim("matmul", &ashape, &bshape));
        }
        let m = numel(&ashape) / k;
        let mut out = vec![T::zero(); m * n];
        let sb = if trans_b { Strides::transposed(k) } else { Strides::row_major(n) };
        gemm(m, k, n, self.value(a), Strides::row_major(k), self.value(b), sb, T::zero(), &mut out, Strides::row_major(n));
        let mut shape = ashape[..ashape.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    /// `a[..., k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[..., k] · b[n, k]ᵀ` (the layout of a linear weight).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("transpose", &s, &[2]));
        }
        let (rows, cols) = (s[0], s[1]);
        let xs = self.value(x);
        let mut data = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = xs[r * cols + c];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![cols, rows], data, Op::Transpose { x, rows, cols }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let data = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), rg))
    }

    /// `[A, B, C] -> [A, C, B]`.
    pub fn permute_021(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("permute_021", &s, &[3]));
        }
        let (a, b, c) = (s[0], s[1], s[2]);
        let xs = self.value(x);
        let mut data = vec![T::zero(); a * b * c];
        for i in 0..a {
            for j in 0..b {
                for k in 0..c {
                    data[(i * c + k) * b + j] = xs[(i * b + j) * c + k];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![a, c, b], data, Op::Permute021 { x, a, b, c }, rg))
    }

    /// Zero-padded cross-correlation of `x[N, C_in, H, W]` (or `[C_in, H, W]`)
    /// with `w[C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let batched = xs.len() == 4;
        let (n, cin, h, wd) = match xs.len() {
            4 => (xs[0], xs[1], xs[2], xs[3]),
            3 => (1, xs[0], xs[1], xs[2]),
            _ => return Err(Error::dim("conv2d", &xs, &ws)),
        };
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] {
            return Err(Error::dim("conv2d", &xs, &ws));
        }
        let (cout, k) = (ws[0], ws[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let span_h = (h + 2 * pad).checked_sub(k);
        let span_w = (wd + 2 * pad).checked_sub(k);
        let (span_h, span_w) = match (span_h, span_w) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Config(format!("conv2d kernel {k} larger than padded input {h}x{wd}"))),
        };
        if span_h % stride != 0 || span_w % stride != 0 {
            return Err(Error::Config(format!(
                "conv2d output size not integral: ({h}+2*{pad}-{k})/{stride}"
            )));
        }
        let ho = span_h / stride + 1;
        let wo = span_w / stride + 1;
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let ckk = cin * k * k;
        let plane = ho * wo;
        let mut cols = vec![T::zero(); ckk * plane];
        let mut out = vec![T::zero(); n * cout * plane];
        let xv = self.value(x);
        let wv = self.value(w);
        for b in 0..n {
            let xb = &xv[b * cin * h * wd..(b + 1) * cin * h * wd];
            im2col(xb, cin, h, wd, k, stride, pad, ho, wo, &mut cols);
            gemm(
                cout,
                ckk,
                plane,
                wv,
                Strides::row_major(ckk),
                &cols,
                Strides::row_major(plane),
                T::zero(),
                &mut out[b * cout * plane..(b + 1) * cout * plane],
                Strides::row_major(plane),
            );
        }
        let shape = if batched { vec![n, cout, ho, wo] } else { vec![cout, ho, wo] };
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(shape, out, Op::Conv2d { x, w, geom }, rg))
    }

    fn spatial_dims(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 3 {
            return Err(Error::dim(op, s, &[3]));
        }
        let h = s[s.len() - 2];
        let w = s[s.len() - 1];
        Ok((numel(&s[..s.len() - 2]), h, w))
    }

    /// 2×2 average pooling over the last two axes.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (planes, h, w) = self.spatial_dims("avg_pool2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!("avg_pool2 needs even spatial size, got {h}x{w}")));
        }
        let (h2, w2) = (h / 2, w / 2);
        let xs = self.value(x);
        let quarter = T::lit(0.25);
        let mut data = vec![T::zero(); planes * h2 * w2];
        for p in 0..planes {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let i = p * h * w + 2 * y * w + 2 * xx;
                    data[(p * h2 + y) * w2 + xx] = (xs[i] + xs[i + 1] + xs[i + w] + xs[i + w + 1]) * quarter;
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        let r = shape.len();
        shape[r - 2] = h2;
        shape[r - 1] = w2;
        let rg = self.rg(x);
        Ok(self.push(shape, data, Op::AvgPool2 { x, planes, h, w }, rg))
    }

    /// Nearest-neighbour 2× upsampling over the last two axes.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (planes, h, w) = self.spatial_dims("upsample2", x)?;
        let xs = self.value(x);
        let (h2, w2) = (2 * h, 2 * w);
        let mut data = vec![T::zero(); planes * h2 * w2];
        for p in 0..planes {
            for y in 0..h2 {
                for xx in 0..w2 {
                    data[(p * h2 + y) * w2 + xx] = xs[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        let r = shape.len();
        shape[r - 2] = h2;
        shape[r - 1] = w2;
        let rg = self.rg(x);
        Ok(self.push(shape, data, Op::Upsample2 { x, planes, h, w }, rg))
    }

    /// Group normalization of `x[N, C, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::dim("group_norm", &s, &[2]));
        }
        let (n, c) = (s[0], s[1]);
        let spatial = numel(&s[2..]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!("group_norm: {c} channels not divisible into {groups} groups")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("group_norm", &s, self.shape(gamma)));
        }
        let cpg = c / groups;
        let m = cpg * spatial;
        let xs = self.value(x);
        let gs = self.value(gamma);
        let bs = self.value(beta);
        let eps = T::lit(eps);
        let inv_m = T::lit(1.0 / m as f64);
        let mut out = vec![T::zero(); xs.len()];
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        for b in 0..n {
            for g in 0..groups {
                let base = (b * c + g * cpg) * spatial;
                let chunk = &xs[base..base + m];
                let mean = chunk.iter().copied().sum::<T>() * inv_m;
                let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
                let rstd = T::one() / (var + eps).sqrt();
                for ci in 0..cpg {
                    let ch = g * cpg + ci;
                    for sidx in 0..spatial {
                        let i = base + ci * spatial + sidx;
                        out[i] = (xs[i] - mean) * rstd * gs[ch] + bs[ch];
                    }
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            s,
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                n,
                c,
                spatial,
                groups,
                mean: means,
                rstd: rstds,
            },
            rg,
        ))
    }

    /// Normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::dim("layer_norm", &s, &[1]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm", &s, self.shape(gamma)));
        }
        let rows = numel(&s) / d;
        let xs = self.value(x);
        let gs = self.value(gamma);
        let bs = self.value(beta);
        let eps = T::lit(eps);
        let inv_d = T::lit(1.0 / d as f64);
        let mut out = vec![T::zero(); xs.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rstd * gs[j] + bs[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            s,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rows,
                d,
                mean: means,
                rstd: rstds,
            },
            rg,
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let data = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), data, op, rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    /// Scaled dot-product attention `softmax(q·kᵀ/√d)·v`.
    ///
    /// Accepts `[L, d]` operands or batched `[B, L, d]` operands.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        let vs = self.shape(v).to_vec();
        let (batch, lq, d, lk, kd, lv, dv) = match (qs.len(), ks.len(), vs.len()) {
            (2, 2, 2) => (1, qs[0], qs[1], ks[0], ks[1], vs[0], vs[1]),
            (3, 3, 3) if qs[0] == ks[0] && ks[0] == vs[0] => (qs[0], qs[1], qs[2], ks[1], ks[2], vs[1], vs[2]),
            _ => return Err(Error::dim("attention", &qs, &ks)),
        };
        if lk == 0 {
            return Err(Error::EmptyContext);
        }
        if d == 0 || d != kd || lk != lv {
            return Err(Error::dim("attention", &qs, &ks));
        }
        let scale = T::lit(1.0 / (d as f64).sqrt());
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let mut probs = vec![T::zero(); batch * lq * lk];
        let mut out = vec![T::zero(); batch * lq * dv];
        for b in 0..batch {
            let qb = &qv[b * lq * d..(b + 1) * lq * d];
            let kb = &kv[b * lk * d..(b + 1) * lk * d];
            let vb = &vv[b * lk * dv..(b + 1) * lk * dv];
            let pb = &mut probs[b * lq * lk..(b + 1) * lq * lk];
            gemm(lq, d, lk, qb, Strides::row_major(d), kb, Strides::transposed(d), T::zero(), pb, Strides::row_major(lk));
            for row in pb.chunks_mut(lk) {
                for s in row.iter_mut() {
                    *s *= scale;
                }
                softmax_in_place(row);
            }
            gemm(
                lq,
                lk,
                dv,
                pb,
                Strides::row_major(lk),
                vb,
                Strides::row_major(dv),
                T::zero(),
                &mut out[b * lq * dv..(b + 1) * lq * dv],
                Strides::row_major(dv),
            );
        }
        let shape = if qs.len() == 3 { vec![batch, lq, dv] } else { vec![lq, dv] };
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            shape,
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                lq,
                lk,
                d,
                dv,
                probs,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `logits[R, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::dim("cross_entropy", &s, &[targets.len()]));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Index {
                what: "cross_entropy target",
                index: bad,
                size: cols,
            });
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = T::zero();
        for (r, row) in probs.chunks_mut(cols).enumerate() {
            softmax_in_place(row);
            loss -= row[targets[r]].max(T::min_positive_value()).ln();
        }
        loss /= T::lit(rows as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                rows,
                cols,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).len() as f64);
        let s = self.value(x).iter().copied().sum::<T>() / n;
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Mean(x), rg)
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::dim("mean_axis", &s, &[axis]));
        }
        let outer = numel(&s[..axis]);
        let mid = s[axis];
        let inner = numel(&s[axis + 1..]);
        let xs = self.value(x);
        let inv = T::lit(1.0 / mid as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    data[o * inner + i] += xs[base + i];
                }
            }
        }
        for v in &mut data {
            *v *= inv;
        }
        let mut shape: Vec<usize> = s[..axis].iter().chain(&s[axis + 1..]).copied().collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(shape, data, Op::MeanAxis { x, outer, mid, inner }, rg))
    }

    /// Row lookup `table[ids]` producing `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("embedding", &s, &[2]));
        }
        let (vocab, d) = (s[0], s[1]);
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "embedding id",
                    index: id,
                    size: vocab,
                });
            }
            data.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            data,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                d,
            },
            rg,
        ))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != sb.len() || axis >= sa.len() || sa.iter().zip(&sb).enumerate().any(|(i, (x, y))| i != axis && x != y) {
            return Err(Error::dim("concat", &sa, &sb));
        }
        let outer = numel(&sa[..axis]);
        let a_inner = numel(&sa[axis..]);
        let b_inner = numel(&sb[axis..]);
        let av = self.value(a);
        let bv = self.value(b);
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            data.extend_from_slice(&av[o * a_inner..(o + 1) * a_inner]);
            data.extend_from_slice(&bv[o * b_inner..(o + 1) * b_inner]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            shape,
            data,
            Op::Concat {
                a,
                b,
                outer,
                a_inner,
                b_inner,
            },
            rg,
        ))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::dim("slice", &s, &[axis, start, len]));
        }
        let outer = numel(&s[..axis]);
        let rest = numel(&s[axis + 1..]);
        let inner = s[axis] * rest;
        let xs = self.value(x);
        let mut data = Vec::with_capacity(outer * len * rest);
        for o in 0..outer {
            let base = o * inner + start * rest;
            data.extend_from_slice(&xs[base..base + len * rest]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            shape,
            data,
            Op::Slice {
                x,
                outer,
                inner,
                start: start * rest,
                len: len * rest,
            },
            rg,
        ))
    }

    /// Scales each row of `x[R, d]` to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("l2_normalize_rows", &s, &[2]));
        }
        let (rows, d) = (s[0], s[1]);
        let xs = self.value(x);
        let mut norms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(xs.len());
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                return Err(Error::NonFinite(format!("normalization of zero-norm row {r}")));
            }
            data.extend(row.iter().map(|&v| v / norm));
            norms.push(norm);
        }
        let rg = self.rg(x);
        Ok(self.push(s, data, Op::L2NormalizeRows { x, rows, d, norms }, rg))
    }

    /// `x * s` where `s` is a one-element node.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("mul_scalar_var", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s)[0];
        let data = self.value(x).iter().map(|&v| v * sv).collect();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(self.shape(x).to_vec(), data, Op::MulScalarVar { x, s }, rg))
    }

    /// Mean squared error between equally shaped nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::dim("backward", &self.nodes[loss.0].shape, &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    /// Copies gradients of bound trainable parameters into the store.
    pub fn write_param_grads(&self, grads: &Grads<T>, store: &mut ParamStore<T>) {
        for (&id, &v) in &self.bound {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let g = grads.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![T::zero(); p.value.numel()]);
            p.value.grad = Some(g);
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let len = |v: Var| self.nodes[v.0].data.len();
        let val = |v: Var| self.nodes[v.0].data.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                    if self.rg(v) {
                        let s = slot(grads, v, len(v));
                        for (d, &gi) in s.iter_mut().zip(g) {
                            *d += gi * sign;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if self.rg(v) {
                        let s = slot(grads, v, len(v));
                        for (d, &gi) in s.iter_mut().zip(g) {
                            *d += gi * sign;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let other = val(*b);
                    let s = slot(grads, *a, len(*a));
                    for ((d, &gi), &o) in s.iter_mut().zip(g).zip(other) {
                        *d += gi * o;
                    }
                }
                if self.rg(*b) {
                    let other = val(*a);
                    let s = slot(grads, *b, len(*b));
                    for ((d, &gi), &o) in s.iter_mut().zip(g).zip(other) {
                        *d += gi * o;
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.rg(*x) {
                    let s = slot(grads, *x, len(*x));
                    for (d, &gi) in s.iter_mut().zip(g) {
                        *d += gi * *c;
                    }
                }
            }
            Op::AddBroadcast {
                x,
                b,
                outer,
                mid,
                inner,
                b_outer,
            } => {
                if self.rg(*x) {
                    let s = slot(grads, *x, len(*x));
                    for (d, &gi) in s.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if self.rg(*b) {
                    let s = slot(grads, *b, len(*b));
                    for o in 0..*outer {
                        let bo = if *b_outer == 1 { 0 } else { o };
                        for m in 0..*mid {
                            let base = (o * mid + m) * inner;
                            let acc: T = g[base..base + inner].iter().copied().sum();
                            s[bo * mid + m] += acc;
                        }
                    }
                }
            }
            Op::MatMul { a, b, m, k, n, trans_b } => {
                let (m, k, n) = (*m, *k, *n);
                if self.rg(*a) {
                    let bv = val(*b);
                    let s = slot(grads, *a, len(*a));
                    // da = g · op(b)ᵀ
                    let sb = if *trans_b { Strides::row_major(k) } else { Strides::transposed(n) };
                    gemm(m, n, k, g, Strides::row_major(n), bv, sb, T::one(), s, Strides::row_major(k));
                }
                if self.rg(*b) {
                    let av = val(*a);
                    let s = slot(grads, *b, len(*b));
                    if *trans_b {
                        // db[n,k] = gᵀ · a
                        gemm(n, m, k, g, Strides::transposed(n), av, Strides::row_major(k), T::one(), s, Strides::row_major(k));
                    } else {
                        // db[k,n] = aᵀ · g
                        gemm(k, m, n, av, Strides::transposed(k), g, Strides::row_major(n), T::one(), s, Strides::row_major(n));
                    }
                }
            }
            Op::Transpose { x, rows, cols } => {
                if self.rg(*x) {
                    let s = slot(grads, *x, len(*x));
                    for r in 0..*rows {
                        for c in 0..*cols {
                            s[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    let s = slot(grads, *x, len(*x));
                    for (d, &gi) in s.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::Permute021 { x, a, b, c } => {
                if self.rg(*x) {
                    let s = slot(grads, *x, len(*x));
                    for i in 0..*a {
                        for j in 0..*b {
                            for k in 0..*c {
                                s[(i * b + j) * c + k] += g[(i * c + k) * b + j];
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, geom } => {
                let ConvGeom {
                    n,
                    cin,
                    h,
                    w: wd,
                    cout,
                    k,
                    stride,
                    pad,
                    ho,
                    wo,
                } = *geom;
                let ckk = cin * k * k;
                let plane = ho * wo;
                let xv = val(*x);
                let wv = val(*w);
                let mut cols = vec![T::zero(); ckk * plane];
                let need_w = self.rg(*w);
                let need_x = self.rg(*x);
                let mut dw = if need_w { Some(vec![T::zero(); wv.len()]) } else { None };
                let mut dx = if need_x { Some(vec![T::zero(); xv.len()]) } else { None };
                let img = cin * h * wd;
                for b in 0..n {
                    let gb = &g[b * cout * plane..(b + 1) * cout * plane];
                    if let Some(dw) = dw.as_mut() {
                        im2col(&xv[b * img..(b + 1) * img], cin, h, wd, k, stride, pad, ho, wo, &mut cols);
                        gemm(cout, plane, ckk, gb, Strides::row_major(plane), &cols, Strides::transposed(plane), T::one(), dw, Strides::row_major(ckk));
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(ckk, cout, plane, wv, Strides::transposed(ckk), gb, Strides::row_major(plane), T::zero(), &mut cols, Strides::row_major(plane));
                        col2im(&cols, cin, h, wd, k, stride, pad, ho, wo, &mut dx[b * img..(b + 1) * img]);
                    }
                }
                if let Some(dw) = dw {
                    let s = slot(grads, *w, len(*w));
                    for (d, v) in s.iter_mut().zip(dw) {
                        *d += v;
                    }
                }
                if let Some(dx) = dx {
                    let s = slot(grads, *x, len(*x));
                    for (d, v) in s.iter_mut().zip(dx) {
                        *d += v;
                    }
                }
            }
            Op::AvgPool2 { x, planes, h, w } => {
                if self.rg(*x) {
                    let (h2, w2) = (h / 2, w / 2);
                    let quarter = T::lit(0.25);
                    let s = slot(grads, *x, len(*x));
                    for p in 0..*planes {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                let gi = g[(p * h2 + y) * w2 + xx] * quarter;
                                let i = p * h * w + 2 * y * w + 2 * xx;
                                s[i] += gi;
                                s[i + 1] += gi;
                                s[i + w] += gi;
                                s[i + w + 1] += gi;
                            }
                        }
                    }
                }
            }
            Op::Upsample2 { x, planes, h, w } => {
                if self.rg(*x) {
                    let (h2, w2) = (2 * h, 2 * w);
                    let s = slot(grads, *x, len(*x));
                    for p in 0..*planes {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                s[(p * h + y / 2) * w + xx / 2] += g[(p * h2 + y) * w2 + xx];
                            }
                        }
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                n,
                c,
                spatial,
                groups,
                mean,
                rstd,
            } => {
                let cpg = c / groups;
                let m = cpg * spatial;
                let inv_m = T::lit(1.0 / m as f64);
                let xv = val(*x);
                let gv = val(*gamma);
                let mut dgamma = vec![T::zero(); *c];
                let mut dbeta = vec![T::zero(); *c];
                let mut dx = vec![T::zero(); xv.len()];
                for b in 0..*n {
                    for grp in 0..*groups {
                        let gi = b * groups + grp;
                        let (mu, rs) = (mean[gi], rstd[gi]);
                        let base = (b * c + grp * cpg) * spatial;
                        let mut sum1 = T::zero();
                        let mut sum2 = T::zero();
                        for ci in 0..cpg {
                            let ch = grp * cpg + ci;
                            for sidx in 0..*spatial {
                                let i = base + ci * spatial + sidx;
                                let xhat = (xv[i] - mu) * rs;
                                dgamma[ch] += g[i] * xhat;
                                dbeta[ch] += g[i];
                                let dxhat = g[i] * gv[ch];
                                sum1 += dxhat;
                                sum2 += dxhat * xhat;
                            }
                        }
                        for ci in 0..cpg {
                            let ch = grp * cpg + ci;
                            for sidx in 0..*spatial {
                                let i = base + ci * spatial + sidx;
                                let xhat = (xv[i] - mu) * rs;
                                let dxhat = g[i] * gv[ch];
                                dx[i] = rs * (dxhat - sum1 * inv_m - xhat * sum2 * inv_m);
                            }
                        }
                    }
                }
                for (v, d) in [(*x, dx), (*gamma, dgamma), (*beta, dbeta)] {
                    if self.rg(v) {
                        let s = slot(grads, v, len(v));
                        for (a, b) in s.iter_mut().zip(d) {
                            *a += b;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rows,
                d,
                mean,
                rstd,
            } => {
                let inv_d = T::lit(1.0 / *d as f64);
                let xv = val(*x);
                let gv = val(*gamma);
                let mut dgamma = vec![T::zero(); *d];
                let mut dbeta = vec![T::zero(); *d];
                let mut dx = vec![T::zero(); xv.len()];
                for r in 0..*rows {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sum1 = T::zero();
                    let mut sum2 = T::zero();
                    for j in 0..*d {
                        let i = r * d + j;
                        let xhat = (xv[i] - mu) * rs;
                        dgamma[j] += g[i] * xhat;
                        dbeta[j] += g[i];
                        let dxhat = g[i] * gv[j];
                        sum1 += dxhat;
                        sum2 += dxhat * xhat;
                    }
                    for j in 0..*d {
                        let i = r * d + j;
                        let xhat = (xv[i] - mu) * rs;
                        let dxhat = g[i] * gv[j];
                        dx[i] = rs * (dxhat - sum1 * inv_d - xhat * sum2 * inv_d);
                    }
                }
                for (v, dd) in [(*x, dx), (*gamma, dgamma), (*beta, dbeta)] {
                    if self.rg(v) {
                        let s = slot(grads, v, len(v));
                        for (a, b) in s.iter_mut().zip(dd) {
                            *a += b;
                        }
                    }
                }
            }
            Op::Silu(x) => {
                if self.rg(*x) {
                    let xv = val(*x);
                    let s = slot(grads, *x, len(*x));
                    for ((d, &gi), &v) in s.iter_mut().zip(g).zip(xv) {
                        let sg = sigmoid(v);
                        *d += gi * sg * (T::one() + v * (T::one() - sg));
                    }
                }
            }
            Op::Tanh(x) => {
                if self.rg(*x) {
                    let s = slot(grads, *x, len(*x));
                    for ((d, &gi), &y) in s.iter_mut().zip(g).zip(&node.data) {
                        *d += gi * (T::one() - y * y);
                    }
                }
            }
            Op::Exp(x) => {
                if self.rg(*x) {
                    let s = slot(grads, *x, len(*x));
                    for ((d, &gi), &y) in s.iter_mut().zip(g).zip(&node.data) {
                        *d += gi * y;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                if self.rg(*x) {
                    let xv = val(*x);
                    let s = slot(grads, *x, len(*x));
                    for ((d, &gi), &v) in s.iter_mut().zip(g).zip(xv) {
                        if v >= *lo && v <= *hi {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                lq,
                lk,
                d,
                dv,
                probs,
            } => {
                let (lq, lk, d, dv) = (*lq, *lk, *d, *dv);
                let scale = T::lit(1.0 / (d as f64).sqrt());
                let qv = val(*q);
                let kv = val(*k);
                let vv = val(*v);
                let mut dq = vec![T::zero(); qv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut dvv = vec![T::zero(); vv.len()];
                let mut dp = vec![T::zero(); lq * lk];
                for b in 0..*batch {
                    let pb = &probs[b * lq * lk..(b + 1) * lq * lk];
                    let gb = &g[b * lq * dv..(b + 1) * lq * dv];
                    let qb = &qv[b * lq * d..(b + 1) * lq * d];
                    let kb = &kv[b * lk * d..(b + 1) * lk * d];
                    let vb = &vv[b * lk * dv..(b + 1) * lk * dv];
                    // dV = Pᵀ·dO
                    gemm(lk, lq, dv, pb, Strides::transposed(lk), gb, Strides::row_major(dv), T::zero(), &mut dvv[b * lk * dv..(b + 1) * lk * dv], Strides::row_major(dv));
                    // dP = dO·Vᵀ
                    gemm(lq, dv, lk, gb, Strides::row_major(dv), vb, Strides::transposed(dv), T::zero(), &mut dp, Strides::row_major(lk));
                    // dS = P ∘ (dP − rowsum(dP ∘ P)), folded with the 1/√d scale
                    for r in 0..lq {
                        let prow = &pb[r * lk..(r + 1) * lk];
                        let drow = &mut dp[r * lk..(r + 1) * lk];
                        let dot: T = prow.iter().zip(drow.iter()).map(|(&p, &dd)| p * dd).sum();
                        for (dd, &p) in drow.iter_mut().zip(prow) {
                            *dd = p * (*dd - dot) * scale;
                        }
                    }
                    gemm(lq, lk, d, &dp, Strides::row_major(lk), kb, Strides::row_major(d), T::zero(), &mut dq[b * lq * d..(b + 1) * lq * d], Strides::row_major(d));
                    gemm(lk, lq, d, &dp, Strides::transposed(lk), qb, Strides::row_major(d), T::zero(), &mut dk[b * lk * d..(b + 1) * lk * d], Strides::row_major(d));
                }
                for (var, dd) in [(*q, dq), (*k, dk), (*v, dvv)] {
                    if self.rg(var) {
                        let s = slot(grads, var, len(var));
                        for (a, b) in s.iter_mut().zip(dd) {
                            *a += b;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                rows,
                cols,
                probs,
            } => {
                if self.rg(*logits) {
                    let scale = g[0] / T::lit(*rows as f64);
                    let s = slot(grads, *logits, len(*logits));
                    for r in 0..*rows {
                        for c in 0..*cols {
                            let onehot = if targets[r] == c { T::one() } else { T::zero() };
                            s[r * cols + c] += (probs[r * cols + c] - onehot) * scale;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    let s = slot(grads, *x, len(*x));
                    for d in s.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if self.rg(*x) {
                    let n = len(*x);
                    let gi = g[0] / T::lit(n as f64);
                    let s = slot(grads, *x, n);
                    for d in s.iter_mut() {
                        *d += gi;
                    }
                }
            }
            Op::MeanAxis { x, outer, mid, inner } => {
                if self.rg(*x) {
                    let inv = T::lit(1.0 / *mid as f64);
                    let s = slot(grads, *x, len(*x));
                    for o in 0..*outer {
                        for m in 0..*mid {
                            let base = (o * mid + m) * inner;
                            for i in 0..*inner {
                                s[base + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids, d } => {
                if self.rg(*table) {
                    let s = slot(grads, *table, len(*table));
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..*d {
                            s[id * d + j] += g[row * d + j];
                        }
                    }
                }
            }
            Op::Concat {
                a,
                b,
                outer,
                a_inner,
                b_inner,
            } => {
                let total = a_inner + b_inner;
                if self.rg(*a) {
                    let s = slot(grads, *a, len(*a));
                    for o in 0..*outer {
                        for i in 0..*a_inner {
                            s[o * a_inner + i] += g[o * total + i];
                        }
                    }
                }
                if self.rg(*b) {
                    let s = slot(grads, *b, len(*b));
                    for o in 0..*outer {
                        for i in 0..*b_inner {
                            s[o * b_inner + i] += g[o * total + a_inner + i];
                        }
                    }
                }
            }
            Op::Slice {
                x,
                outer,
                inner,
                start,
                len: l,
            } => {
                if self.rg(*x) {
                    let s = slot(grads, *x, len(*x));
                    for o in 0..*outer {
                        for i in 0..*l {
                            s[o * inner + start + i] += g[o * l + i];
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, rows, d, norms } => {
                if self.rg(*x) {
                    let y = &node.data;
                    let s = slot(grads, *x, len(*x));
                    for r in 0..*rows {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..*d {
                            s[r * d + j] += (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::MulScalarVar { x, s: sv } => {
                let scalar = val(*sv)[0];
                if self.rg(*x) {
                    let s = slot(grads, *x, len(*x));
                    for (d, &gi) in s.iter_mut().zip(g) {
                        *d += gi * scalar;
                    }
                }
                if self.rg(*sv) {
                    let xv = val(*x);
                    let acc: T = g.iter().zip(xv).map(|(&a, &b)| a * b).sum();
                    slot(grads, *sv, 1)[0] += acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.input(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.input(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.input(&t(&[2, 1], &[5.0, 6.0]));
        let id = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(id), &[1.0, 2.0, 3.0, 4.0]);
        let p = tape.matmul(m, c).unwrap();
        assert_eq!(tape.value(p), &[17.0, 39.0]);
        assert_eq!(tape.shape(p), &[2, 1]);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(&t(&[2, 3], &[0.0; 6]));
        let b = tape.input(&t(&[2, 2], &[0.0; 4]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn attention_singleton_key_returns_value_row() {
        let mut tape = Tape::<f64>::new();
        let q = tape.input(&t(&[3, 2], &[0.3, -1.0, 2.0, 0.5, -0.7, 0.1]));
        let k = tape.input(&t(&[1, 2], &[0.9, -0.4]));
        let v = tape.input(&t(&[1, 3], &[1.5, -2.0, 0.25]));
        let o = tape.attention(q, k, v).unwrap();
        for row in tape.value(o).chunks(3) {
            assert_eq!(row, &[1.5, -2.0, 0.25]);
        }
    }

    #[test]
    fn attention_with_equal_scores_averages_values() {
        let mut tape = Tape::<f64>::new();
        let q = tape.input(&t(&[2, 2], &[0.0; 4]));
        let k = tape.input(&t(&[3, 2], &[1.0, 2.0, -3.0, 0.5, 0.0, 7.0]));
        let v = tape.input(&t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]));
        let o = tape.attention(q, k, v).unwrap();
        for row in tape.value(o).chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-12);
            assert!((row[1] - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_empty_context() {
        let mut tape = Tape::<f64>::new();
        let q = tape.input(&t(&[1, 2], &[1.0, 1.0]));
        let k = tape.constant(&[0, 2], vec![]).unwrap();
        let v = tape.constant(&[0, 2], vec![]).unwrap();
        assert!(matches!(tape.attention(q, k, v), Err(Error::EmptyContext)));
    }

    #[test]
    fn conv_identity_and_zero_kernels() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..18).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = tape.input(&t(&[2, 3, 3], &data));
        let eye = tape.input(&t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.conv2d(x, eye, 1, 0).unwrap();
        assert_eq!(tape.value(y), data.as_slice());
        let zero = tape.input(&t(&[4, 2, 3, 3], &[0.0; 72]));
        let z = tape.conv2d(x, zero, 1, 1).unwrap();
        assert_eq!(tape.shape(z), &[4, 3, 3]);
        assert!(tape.value(z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_non_integral_output() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(&t(&[1, 4, 4], &[0.0; 16]));
        let w = tape.input(&t(&[1, 1, 3, 3], &[0.0; 9]));
        assert!(matches!(tape.conv2d(x, w, 2, 1), Err(Error::Config(_))));
        assert!(tape.conv2d(x, w, 1, 1).is_ok());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(&t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let y = tape.scale(x, 2.0);
        assert!(tape.backward(y).is_err());
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn frozen_branches_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let frozen = tape.input(&t(&[2], &[1.0, 2.0]));
        let live = tape.input(&t(&[2], &[3.0, 4.0]).with_requires_grad(true));
        let p = tape.mul(frozen, live).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.get(frozen).is_none());
        assert_eq!(g.get(live).unwrap(), &[1.0, 2.0]);
    }
}
