//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during a forward pass. Parameters are
//! borrowed from a [`ParamStore`] rather than copied, and [`Graph::backward`] walks the
//! tape in reverse to produce a [`Gradients`] table keyed by parameter.
//!
//! Image tensors use the `[batch, channels, height, width]` layout throughout.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Layout, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<F> {
    Owned(Tensor<F>),
    Param(ParamId),
}

enum Op<F> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Silu {
        x: Var,
        sig: Vec<F>,
    },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, F),
    ScaleItems(Var, Vec<F>),
    AddChannel {
        x: Var,
        bias: Var,
    },
    Concat(Var, Var),
    Upsample2(Var),
    GlobalAvgPool(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<F>,
    },
    Gather {
        table: Var,
        index: Vec<usize>,
    },
    Mse {
        a: Var,
        target: Var,
    },
    External {
        x: Var,
        grad: Tensor<F>,
    },
}

struct Node<F> {
    value: Value<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<'p, F: Scalar = f32> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_vars: HashMap<ParamId, Var>,
    record: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    nodes: Vec<Option<Tensor<F>>>,
    params: HashMap<ParamId, usize>,
}

impl<F: Scalar> Gradients<F> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.get(&id).and_then(|&i| self.nodes[i].as_ref())
    }

    pub fn var(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].as_ref()
    }

    /// Moves the per-parameter gradients out, indexed by [`ParamId::index`].
    pub fn into_param_grads(mut self, count: usize) -> Vec<Option<Tensor<F>>> {
        let mut out: Vec<Option<Tensor<F>>> = (0..count).map(|_| None).collect();
        for (id, node) in self.params {
            out[id.index()] = self.nodes[node].take();
        }
        out
    }
}

fn spatial(shape: &[usize]) -> usize {
    shape.iter().skip(2).product()
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Output columns `[lo, hi)` whose input column `ox * stride + k - pad` lies in `[0, w)`.
fn valid_cols(w: usize, wo: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = ((w + pad).saturating_sub(k)).div_ceil(stride).min(wo);
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn im2col<F: Scalar>(
    x: &[F],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    cols: &mut [F],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(w, wo, kj, stride, pad);
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(F::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    line[..lo].fill(F::zero());
                    line[hi..].fill(F::zero());
                    let first = lo * stride + kj - pad;
                    if stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (j, out) in line[lo..hi].iter_mut().enumerate() {
                            *out = src[first + j * stride];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    cols: &[F],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    dx: &mut [F],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let dxc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(w, wo, kj, stride, pad);
                if lo >= hi {
                    continue;
                }
                let first = lo * stride + kj - pad;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut dxc[iy as usize * w..(iy as usize + 1) * w];
                    let line = &src[oy * wo + lo..oy * wo + hi];
                    if stride == 1 {
                        for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in line.iter().enumerate() {
                            dst[first + j * stride] += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

fn add_into<F: Scalar>(slot: &mut Option<Tensor<F>>, g: Tensor<F>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<'p, F: Scalar> Graph<'p, F> {
    /// A graph that records operations for differentiation.
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            record: true,
        }
    }

    /// A forward-only graph: nothing is retained for the backward pass.
    pub fn inference(params: &'p ParamStore<F>) -> Self {
        Self {
            record: false,
            ..Self::new(params)
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = self.record && inputs.iter().any(|&v| self.needs(v));
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient is propagated into it).
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Input whose gradient is tracked (for tests of input sensitivity).
    pub fn input_tracked(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            needs_grad: self.record,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: self.record,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// 2-D convolution with zero padding; `w` is `[out, in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be 4-D, got {xs:?}");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch: {xs:?} vs {ws:?}");
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ho, wo) = (conv_out(h, kh, stride, pad), conv_out(wd, kw, stride, pad));
        let ckk = c * kh * kw;
        let plane = ho * wo;
        let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        let mut cols = if pointwise {
            Vec::new()
        } else {
            vec![F::zero(); ckk * plane]
        };
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for i in 0..n {
                let xi = xv.item(i);
                let src: &[F] = if pointwise {
                    xi
                } else {
                    im2col(xi, (c, h, wd), (kh, kw), stride, pad, (ho, wo), &mut cols);
                    &cols
                };
                let yi = out.item_mut(i);
                if let Some(bv) = bv {
                    for (oc, row) in yi.chunks_mut(plane).enumerate() {
                        row.fill(bv[oc]);
                    }
                }
                gemm(Layout::Plain, Layout::Plain, o, ckk, plane, F::one(), wv, src, F::one(), yi);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &inputs,
        )
    }

    /// `x [N, in] * w[out, in]^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs[1], ws[1], "linear: {xs:?} vs {ws:?}");
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[n, dout]);
        if let Some(b) = b {
            let bv = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(dout) {
                row.copy_from_slice(&bv);
            }
        }
        gemm(
            Layout::Plain,
            Layout::Transposed,
            n,
            din,
            dout,
            F::one(),
            self.value(x).data(),
            self.value(w).data(),
            F::one(),
            out.data_mut(),
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        assert_eq!(c % groups, 0, "group_norm: {c} channels not divisible by {groups}");
        let s = spatial(&shape);
        let per = c / groups * s;
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = Tensor::zeros(&shape);
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        let inv = F::of(1.0 / per as f64);
        for i in 0..n {
            let xi = xv.item(i);
            let yi = out.item_mut(i);
            for gi in 0..groups {
                let xs = &xi[gi * per..(gi + 1) * per];
                let mean = xs.iter().copied().sum::<F>() * inv;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv;
                let rstd = F::one() / (var + F::of(eps)).sqrt();
                means.push(mean);
                rstds.push(rstd);
                let cpg = c / groups;
                for cc in 0..cpg {
                    let ch = gi * cpg + cc;
                    let (ga, be) = (g[ch], bt[ch]);
                    let off = gi * per + cc * s;
                    for (y, &v) in yi[off..off + s].iter_mut().zip(&xi[off..off + s]) {
                        *y = (v - mean) * rstd * ga + be;
                    }
                }
            }
        }
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            &[x, gamma, beta],
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let sig: Vec<F> = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let data = xv.data().iter().zip(&sig).map(|(&v, &s)| v * s).collect();
        let out = Tensor::from_vec(xv.shape(), data).expect("same shape");
        self.push(out, Op::Silu { x, sig }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(F::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| x + y)
            .expect("add: shape mismatch");
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    /// Multiplies item `i` of the batch by `factors[i]`.
    pub fn scale_items(&mut self, x: Var, factors: Vec<F>) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(out.dim(0), factors.len(), "scale_items: one factor per item");
        let len = out.item_len();
        for (chunk, &f) in out.data_mut().chunks_mut(len).zip(&factors) {
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        self.push(out, Op::ScaleItems(x, factors), &[x])
    }

    /// Adds a per-item, per-channel vector `bias [N, C]` across all spatial positions.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Var {
        let mut out = self.value(x).clone();
        let shape = out.shape().to_vec();
        let (n, c, s) = (shape[0], shape[1], spatial(&shape));
        let bv = self.value(bias);
        assert_eq!(bv.shape(), &[n, c], "add_channel: bias {:?} for {shape:?}", bv.shape());
        let bv = bv.data().to_vec();
        for i in 0..n {
            for (ch, row) in out.item_mut(i).chunks_mut(s).enumerate() {
                let b = bv[i * c + ch];
                row.iter_mut().for_each(|v| *v += b);
            }
        }
        self.push(out, Op::AddChannel { x, bias }, &[x, bias])
    }

    /// Channel-axis concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert!(
            sa[0] == sb[0] && sa[2..] == sb[2..],
            "concat: {sa:?} vs {sb:?}"
        );
        let mut shape = sa.clone();
        shape[1] = sa[1] + sb[1];
        let mut data = Vec::with_capacity(shape.iter().product());
        for i in 0..sa[0] {
            data.extend_from_slice(self.value(a).item(i));
            data.extend_from_slice(self.value(b).item(i));
        }
        let out = Tensor::from_vec(&shape, data).expect("concat shape");
        self.push(out, Op::Concat(a, b), &[a, b])
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        for i in 0..n {
            let xi = xv.item(i);
            let yi = out.item_mut(i);
            for ch in 0..c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        yi[(ch * 2 * h + y) * 2 * w + xx] = xi[(ch * h + y / 2) * w + xx / 2];
                    }
                }
            }
        }
        self.push(out, Op::Upsample2(x), &[x])
    }

    /// Mean over spatial positions: `[N, C, ...] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (n, c, s) = (shape[0], shape[1], spatial(&shape));
        let inv = F::of(1.0 / s as f64);
        let data = xv
            .data()
            .chunks(s)
            .map(|row| row.iter().copied().sum::<F>() * inv)
            .collect();
        let out = Tensor::from_vec(&[n, c], data).expect("pool shape");
        self.push(out, Op::GlobalAvgPool(x), &[x])
    }

    /// Single-head dot-product self-attention over spatial positions.
    ///
    /// `q`, `k`, `v` are `[N, C, ...]`; position `l` attends to `j` with weight
    /// `softmax_j(q[:,l] . k[:,j] / sqrt(C))`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let shape = self.value(q).shape().to_vec();
        let (n, c, l) = (shape[0], shape[1], spatial(&shape));
        let scale = F::of(1.0 / (c as f64).sqrt());
        let mut out = Tensor::zeros(&shape);
        let mut probs = vec![F::zero(); n * l * l];
        for i in 0..n {
            let p = &mut probs[i * l * l..(i + 1) * l * l];
            gemm(
                Layout::Transposed,
                Layout::Plain,
                l,
                c,
                l,
                scale,
                self.value(q).item(i),
                self.value(k).item(i),
                F::zero(),
                p,
            );
            for row in p.chunks_mut(l) {
                let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
                let mut z = F::zero();
                for e in row.iter_mut() {
                    *e = (*e - m).exp();
                    z += *e;
                }
                let inv = F::one() / z;
                row.iter_mut().for_each(|e| *e *= inv);
            }
            gemm(
                Layout::Plain,
                Layout::Transposed,
                c,
                l,
                l,
                F::one(),
                self.value(v).item(i),
                p,
                F::zero(),
                out.item_mut(i),
            );
        }
        let needs = self.record && [q, k, v].iter().any(|&x| self.needs(x));
        if !needs {
            probs = Vec::new();
        }
        self.push(out, Op::Attention { q, k, v, probs }, &[q, k, v])
    }

    /// Row lookup: `table [R, D]` indexed by `index` gives `[len(index), D]`.
    pub fn gather(&mut self, table: Var, index: &[usize]) -> Var {
        let tv = self.value(table);
        let d = tv.dim(1);
        let mut data = Vec::with_capacity(index.len() * d);
        for &r in index {
            data.extend_from_slice(&tv.data()[r * d..(r + 1) * d]);
        }
        let out = Tensor::from_vec(&[index.len(), d], data).expect("gather shape");
        self.push(
            out,
            Op::Gather {
                table,
                index: index.to_vec(),
            },
            &[table],
        )
    }

    /// Mean squared error between `a` and `target` as a scalar.
    pub fn mse(&mut self, a: Var, target: Var) -> Var {
        let av = self.value(a);
        let tv = self.value(target);
        av.expect_same_shape(tv).expect("mse: shape mismatch");
        let total: F = av
            .data()
            .iter()
            .zip(tv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::scalar(total / F::of(av.numel() as f64));
        self.push(out, Op::Mse { a, target }, &[a, target])
    }

    /// Scalar loss computed outside the graph, with its gradient w.r.t. `x` supplied.
    pub fn external_loss(&mut self, x: Var, value: F, grad: Tensor<F>) -> Var {
        assert_eq!(grad.shape(), self.value(x).shape(), "external_loss: gradient shape");
        self.push(Tensor::scalar(value), Op::External { x, grad }, &[x])
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.value(root).numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), F::one()));
        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.backprop(&node.op, &gy, &mut grads);
            }
            grads[idx] = Some(gy);
        }
        Gradients {
            nodes: grads,
            params: self.param_vars.iter().map(|(&id, &v)| (id, v.0)).collect(),
        }
    }

    fn backprop(&self, op: &Op<F>, gy: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv_backward(*x, *w, *b, *stride, *pad, gy, grads),
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, din, dout) = (xv.dim(0), xv.dim(1), wv.dim(0));
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    gemm(
                        Layout::Plain,
                        Layout::Plain,
                        n,
                        dout,
                        din,
                        F::one(),
                        gy.data(),
                        wv.data(),
                        F::zero(),
                        dx.data_mut(),
                    );
                    add_into(&mut grads[x.0], dx);
                }
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    gemm(
                        Layout::Transposed,
                        Layout::Plain,
                        dout,
                        n,
                        din,
                        F::one(),
                        gy.data(),
                        xv.data(),
                        F::zero(),
                        dw.data_mut(),
                    );
                    add_into(&mut grads[w.0], dw);
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut db = Tensor::zeros(&[dout]);
                    for row in gy.data().chunks(dout) {
                        for (d, &g) in db.data_mut().iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let shape = xv.shape();
                let (n, c, s) = (shape[0], shape[1], spatial(shape));
                let cpg = c / groups;
                let per = cpg * s;
                let g = self.value(*gamma).data();
                let mut dx = Tensor::zeros(shape);
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                let inv = F::of(1.0 / per as f64);
                for i in 0..n {
                    let xi = xv.item(i);
                    let gi_ = gy.item(i);
                    let dxi = dx.item_mut(i);
                    for gr in 0..*groups {
                        let (mu, rs) = (mean[i * groups + gr], rstd[i * groups + gr]);
                        let mut sum_dxhat = F::zero();
                        let mut sum_dxhat_xhat = F::zero();
                        for cc in 0..cpg {
                            let ch = gr * cpg + cc;
                            let off = ch * s;
                            let mut dg = F::zero();
                            let mut db = F::zero();
                            for p in off..off + s {
                                let xhat = (xi[p] - mu) * rs;
                                let d = gi_[p];
                                dg += d * xhat;
                                db += d;
                                let dxhat = d * g[ch];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                            dgamma.data_mut()[ch] += dg;
                            dbeta.data_mut()[ch] += db;
                        }
                        let m1 = sum_dxhat * inv;
                        let m2 = sum_dxhat_xhat * inv;
                        for cc in 0..cpg {
                            let ch = gr * cpg + cc;
                            let off = ch * s;
                            for p in off..off + s {
                                let xhat = (xi[p] - mu) * rs;
                                dxi[p] = rs * (gi_[p] * g[ch] - m1 - xhat * m2);
                            }
                        }
                    }
                }
                if self.needs(*x) {
                    add_into(&mut grads[x.0], dx);
                }
                if self.needs(*gamma) {
                    add_into(&mut grads[gamma.0], dgamma);
                }
                if self.needs(*beta) {
                    add_into(&mut grads[beta.0], dbeta);
                }
            }
            Op::Silu { x, sig } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(sig)
                    .zip(gy.data())
                    .map(|((&v, &s), &g)| g * s * (F::one() + v * (F::one() - s)))
                    .collect();
                add_into(&mut grads[x.0], Tensor::from_vec(xv.shape(), data).expect("same shape"));
            }
            Op::Relu(x) => {
                let dx = self
                    .value(*x)
                    .zip_map(gy, |v, g| if v > F::zero() { g } else { F::zero() })
                    .expect("relu grad");
                add_into(&mut grads[x.0], dx);
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    add_into(&mut grads[a.0], gy.clone());
                }
                if self.needs(*b) {
                    add_into(&mut grads[b.0], gy.clone());
                }
            }
            Op::Scale(x, f) => {
                let f = *f;
                add_into(&mut grads[x.0], gy.map(|g| g * f));
            }
            Op::ScaleItems(x, factors) => {
                let mut gx = gy.clone();
                let len = gx.item_len();
                for (chunk, &f) in gx.data_mut().chunks_mut(len).zip(factors) {
                    chunk.iter_mut().for_each(|v| *v *= f);
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::AddChannel { x, bias } => {
                if self.needs(*x) {
                    add_into(&mut grads[x.0], gy.clone());
                }
                if self.needs(*bias) {
                    let shape = gy.shape();
                    let (n, c, s) = (shape[0], shape[1], spatial(shape));
                    let data = gy
                        .data()
                        .chunks(s)
                        .map(|row| row.iter().copied().sum::<F>())
                        .collect();
                    add_into(
                        &mut grads[bias.0],
                        Tensor::from_vec(&[n, c], data).expect("bias grad"),
                    );
                }
            }
            Op::Concat(a, b) => {
                let ia = self.value(*a).item_len();
                let ib = self.value(*b).item_len();
                let n = gy.dim(0);
                if self.needs(*a) {
                    let mut d = Vec::with_capacity(n * ia);
                    for i in 0..n {
                        d.extend_from_slice(&gy.item(i)[..ia]);
                    }
                    let t = Tensor::from_vec(self.value(*a).shape(), d).expect("concat grad");
                    add_into(&mut grads[a.0], t);
                }
                if self.needs(*b) {
                    let mut d = Vec::with_capacity(n * ib);
                    for i in 0..n {
                        d.extend_from_slice(&gy.item(i)[ia..]);
                    }
                    let t = Tensor::from_vec(self.value(*b).shape(), d).expect("concat grad");
                    add_into(&mut grads[b.0], t);
                }
            }
            Op::Upsample2(x) => {
                let s = self.value(*x).shape().to_vec();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let mut dx = Tensor::zeros(&s);
                for i in 0..n {
                    let gi = gy.item(i);
                    let di = dx.item_mut(i);
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                di[(ch * h + y / 2) * w + xx / 2] += gi[(ch * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape().to_vec();
                let s = spatial(&shape);
                let inv = F::of(1.0 / s as f64);
                let mut dx = Tensor::zeros(&shape);
                for (row, &g) in dx.data_mut().chunks_mut(s).zip(gy.data()) {
                    row.fill(g * inv);
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::Attention { q, k, v, probs } => self.attention_backward(*q, *k, *v, probs, gy, grads),
            Op::Gather { table, index } => {
                let tv = self.value(*table);
                let d = tv.dim(1);
                let mut dt = Tensor::zeros(tv.shape());
                for (row, &r) in index.iter().enumerate() {
                    for j in 0..d {
                        dt.data_mut()[r * d + j] += gy.data()[row * d + j];
                    }
                }
                add_into(&mut grads[table.0], dt);
            }
            Op::Mse { a, target } => {
                let av = self.value(*a);
                let tv = self.value(*target);
                let k = F::of(2.0 / av.numel() as f64) * gy.data()[0];
                let d = av.zip_map(tv, |x, y| k * (x - y)).expect("mse grad");
                if self.needs(*target) {
                    add_into(&mut grads[target.0], d.map(|g| -g));
                }
                if self.needs(*a) {
                    add_into(&mut grads[a.0], d);
                }
            }
            Op::External { x, grad } => {
                let k = gy.data()[0];
                add_into(&mut grads[x.0], grad.map(|g| g * k));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        gy: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let xs = xv.shape();
        let ws = wv.shape();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ho, wo) = (gy.dim(2), gy.dim(3));
        let plane = ho * wo;
        let ckk = c * kh * kw;
        let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let mut cols = if pointwise {
            Vec::new()
        } else {
            vec![F::zero(); ckk * plane]
        };
        let mut dcols = vec![F::zero(); if need_x && !pointwise { ckk * plane } else { 0 }];
        let mut dw = Tensor::zeros(ws);
        let mut dx = Tensor::zeros(if need_x { xs } else { &[0] });
        for i in 0..n {
            let gyi = gy.item(i);
            if need_w {
                let xi = xv.item(i);
                let src: &[F] = if pointwise {
                    xi
                } else {
                    im2col(xi, (c, h, wd), (kh, kw), stride, pad, (ho, wo), &mut cols);
                    &cols
                };
                gemm(
                    Layout::Plain,
                    Layout::Transposed,
                    o,
                    plane,
                    ckk,
                    F::one(),
                    gyi,
                    src,
                    F::one(),
                    dw.data_mut(),
                );
            }
            if need_x {
                if pointwise {
                    gemm(
                        Layout::Transposed,
                        Layout::Plain,
                        ckk,
                        o,
                        plane,
                        F::one(),
                        wv.data(),
                        gyi,
                        F::zero(),
                        dx.item_mut(i),
                    );
                } else {
                    gemm(
                        Layout::Transposed,
                        Layout::Plain,
                        ckk,
                        o,
                        plane,
                        F::one(),
                        wv.data(),
                        gyi,
                        F::zero(),
                        &mut dcols,
                    );
                    col2im(&dcols, (c, h, wd), (kh, kw), stride, pad, (ho, wo), dx.item_mut(i));
                }
            }
        }
        if need_w {
            add_into(&mut grads[w.0], dw);
        }
        if need_x {
            add_into(&mut grads[x.0], dx);
        }
        if let Some(b) = b.filter(|b| self.needs(*b)) {
            let mut db = Tensor::zeros(&[o]);
            for i in 0..n {
                for (oc, row) in gy.item(i).chunks(plane).enumerate() {
                    db.data_mut()[oc] += row.iter().copied().sum::<F>();
                }
            }
            add_into(&mut grads[b.0], db);
        }
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        probs: &[F],
        gy: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let shape = self.value(q).shape().to_vec();
        let (n, c, l) = (shape[0], shape[1], spatial(&shape));
        let scale = F::of(1.0 / (c as f64).sqrt());
        let mut dq = Tensor::zeros(&shape);
        let mut dk = Tensor::zeros(&shape);
        let mut dv = Tensor::zeros(&shape);
        let mut dp = vec![F::zero(); l * l];
        for i in 0..n {
            let p = &probs[i * l * l..(i + 1) * l * l];
            let gyi = gy.item(i);
            // dV = dOut . P
            gemm(Layout::Plain, Layout::Plain, c, l, l, F::one(), gyi, p, F::zero(), dv.item_mut(i));
            // dP = dOut^T . V
            gemm(
                Layout::Transposed,
                Layout::Plain,
                l,
                c,
                l,
                F::one(),
                gyi,
                self.value(v).item(i),
                F::zero(),
                &mut dp,
            );
            // softmax backward in place: dS = P * (dP - rowsum(dP * P))
            for (drow, prow) in dp.chunks_mut(l).zip(p.chunks(l)) {
                let dot: F = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (d, &pp) in drow.iter_mut().zip(prow) {
                    *d = pp * (*d - dot);
                }
            }
            // dQ = scale * K . dS^T ; dK = scale * Q . dS
            gemm(
                Layout::Plain,
                Layout::Transposed,
                c,
                l,
                l,
                scale,
                self.value(k).item(i),
                &dp,
                F::zero(),
                dq.item_mut(i),
            );
            gemm(
                Layout::Plain,
                Layout::Plain,
                c,
                l,
                l,
                scale,
                self.value(q).item(i),
                &dp,
                F::zero(),
                dk.item_mut(i),
            );
        }
        if self.needs(q) {
            add_into(&mut grads[q.0], dq);
        }
        if self.needs(k) {
            add_into(&mut grads[k.0], dk);
        }
        if self.needs(v) {
            add_into(&mut grads[v.0], dv);
        }
    }
}
