//! Reverse-mode autodiff over a linear tape of NCHW tensor ops.
//!
//! Parameters live in a [`ParamSet`] borrowed by the tape, so a forward pass
//! never copies weights. `backward` returns one gradient per parameter.

use super::tensor::{matmul, Float, Tensor};

const GN_EPS: f64 = 1e-5;

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<F>>,
}

impl<F: Float> Default for ParamSet<F> {
    fn default() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<F: Float> ParamSet<F> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<F>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn cast<G: Float>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Input,
    Param(usize),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        rstd: Vec<F>,
    },
    Silu {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddChannel {
        x: Var,
        v: Var,
    },
    AvgPool2 {
        x: Var,
    },
    Upsample2 {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Attention {
        qkv: Var,
        probs: Vec<F>,
    },
    Mse {
        a: Var,
        target: Tensor<F>,
    },
}

struct Node<F> {
    // None for parameters, which are read from the borrowed set.
    value: Option<Tensor<F>>,
    op: Op<F>,
}

pub struct Tape<'p, F: Float> {
    params: &'p ParamSet<F>,
    nodes: Vec<Node<F>>,
}

impl<'p, F: Float> Tape<'p, F> {
    pub fn new(params: &'p ParamSet<F>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(i)) => &self.params.tensors[*i],
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, index: usize) -> Var {
        assert!(index < self.params.len());
        self.nodes.push(Node {
            value: None,
            op: Op::Param(index),
        });
        Var(self.nodes.len() - 1)
    }

    /// Stride-1 convolution with a square `k x k` kernel (`k` odd) and
    /// `k / 2` zero padding. `w` is `[co, ci, k, k]`, `b` is `[co]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let [n, ci, h, wd] = xt.shape;
        let [co, wci, k, k2] = wt.shape;
        assert!(
            wci == ci && k == k2 && k % 2 == 1,
            "conv weight {:?} vs input {:?}",
            wt.shape,
            xt.shape
        );
        assert_eq!(bt.data.len(), co);
        let hw = h * wd;
        let mut out = Tensor::zeros([n, co, h, wd]);
        let mut col = if k == 1 {
            Vec::new()
        } else {
            vec![F::zero(); ci * k * k * hw]
        };
        for i in 0..n {
            let src: &[F] = if k == 1 {
                xt.item(i)
            } else {
                im2col(xt.item(i), ci, h, wd, k, &mut col);
                &col
            };
            let dst = out.item_mut(i);
            for (c, row) in dst.chunks_mut(hw).enumerate() {
                row.fill(bt.data[c]);
            }
            matmul(co, ci * k * k, hw, &wt.data, false, src, false, dst, true);
        }
        self.push(out, Op::Conv { x, w, b, k })
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (xt, gt, bt) = (self.value(x), self.value(gamma), self.value(beta));
        let [n, c, h, w] = xt.shape;
        assert!(groups > 0 && c % groups == 0, "{c} channels into {groups} groups");
        assert!(gt.data.len() == c && bt.data.len() == c);
        let hw = h * w;
        let gsize = c / groups * hw;
        let mut out = Tensor::zeros(xt.shape);
        let mut rstd = Vec::with_capacity(n * groups);
        for (gi, (src, dst)) in xt.data.chunks(gsize).zip(out.data.chunks_mut(gsize)).enumerate() {
            let cnt = F::of(gsize as f64);
            let mean = src.iter().copied().sum::<F>() / cnt;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cnt;
            let r = F::one() / (var + F::of(GN_EPS)).sqrt();
            rstd.push(r);
            let c0 = (gi % groups) * (c / groups);
            for (j, (s, d)) in src.iter().zip(dst.iter_mut()).enumerate() {
                let ch = c0 + j / hw;
                *d = (*s - mean) * r * gt.data[ch] + bt.data[ch];
            }
        }
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                rstd,
            },
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let out = Tensor::from_vec(xt.shape, xt.data.iter().map(|&v| v * sigmoid(v)).collect());
        self.push(out, Op::Silu { x })
    }

    /// `x` is `[n, din]`, `w` is `[dout, din]`, `b` is `[dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let n = xt.n();
        let din = xt.item_len();
        let dout = wt.shape[0];
        assert_eq!(wt.item_len(), din);
        assert_eq!(bt.data.len(), dout);
        let mut data = Vec::with_capacity(n * dout);
        for _ in 0..n {
            data.extend_from_slice(&bt.data);
        }
        matmul(n, din, dout, &xt.data, false, &wt.data, true, &mut data, true);
        self.push(Tensor::vector(n, dout, data), Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add { a, b })
    }

    /// Adds a per-channel vector `[n, c]` to every pixel of `x`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let (xt, vt) = (self.value(x), self.value(v));
        assert_eq!(vt.data.len(), xt.n() * xt.c());
        let hw = xt.hw();
        let mut out = xt.clone();
        for (row, &add) in out.data.chunks_mut(hw).zip(&vt.data) {
            for o in row {
                *o += add;
            }
        }
        self.push(out, Op::AddChannel { x, v })
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let [n, c, h, w] = xt.shape;
        assert!(h % 2 == 0 && w % 2 == 0);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let quarter = F::of(0.25);
        for (src, dst) in xt.data.chunks(h * w).zip(out.data.chunks_mut(oh * ow)) {
            for r in 0..oh {
                for q in 0..ow {
                    let i = 2 * r * w + 2 * q;
                    dst[r * ow + q] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        self.push(out, Op::AvgPool2 { x })
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let [n, c, h, w] = xt.shape;
        let ow = 2 * w;
        let mut out = Tensor::zeros([n, c, 2 * h, ow]);
        for (src, dst) in xt.data.chunks(h * w).zip(out.data.chunks_mut(4 * h * w)) {
            for r in 0..2 * h {
                for q in 0..ow {
                    dst[r * ow + q] = src[(r / 2) * w + q / 2];
                }
            }
        }
        self.push(out, Op::Upsample2 { x })
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        assert!(at.n() == bt.n() && at.shape[2..] == bt.shape[2..]);
        let [n, ca, h, w] = at.shape;
        let mut out = Tensor::zeros([n, ca + bt.c(), h, w]);
        for i in 0..n {
            let (sa, sb) = (at.item(i), bt.item(i));
            let dst = out.item_mut(i);
            dst[..sa.len()].copy_from_slice(sa);
            dst[sa.len()..].copy_from_slice(sb);
        }
        self.push(out, Op::Concat { a, b })
    }

    /// Single-head spatial self-attention. `qkv` is `[n, 3c, h, w]` holding
    /// queries, keys and values; the result is `[n, c, h, w]`.
    pub fn attention(&mut self, qkv: Var) -> Var {
        let t = self.value(qkv);
        let [n, c3, h, w] = t.shape;
        assert_eq!(c3 % 3, 0);
        let c = c3 / 3;
        let l = h * w;
        let scale = F::one() / F::of(c as f64).sqrt();
        let mut out = Tensor::zeros([n, c, h, w]);
        let mut probs = vec![F::zero(); n * l * l];
        for i in 0..n {
            let item = t.item(i);
            let (q, rest) = item.split_at(c * l);
            let (k, v) = rest.split_at(c * l);
            let p = &mut probs[i * l * l..(i + 1) * l * l];
            matmul(l, c, l, q, true, k, false, p, false);
            for row in p.chunks_mut(l) {
                let mx = row.iter().fold(F::neg_infinity(), |m, &s| m.max(s));
                let mut sum = F::zero();
                for s in row.iter_mut() {
                    *s = ((*s - mx) * scale).exp();
                    sum += *s;
                }
                for s in row.iter_mut() {
                    *s = *s / sum;
                }
            }
            matmul(c, l, l, v, false, p, true, out.item_mut(i), false);
        }
        self.push(out, Op::Attention { qkv, probs })
    }

    /// Mean squared error against a constant target; a scalar node.
    pub fn mse(&mut self, a: Var, target: Tensor<F>) -> Var {
        let at = self.value(a);
        assert_eq!(at.shape, target.shape);
        let sum: F = at.data.iter().zip(&target.data).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let loss = sum / F::of(at.data.len() as f64);
        self.push(Tensor::from_vec([1, 1, 1, 1], vec![loss]), Op::Mse { a, target })
    }

    /// Backpropagates from `root` (seeded with ones) and returns gradients
    /// for every parameter, zero for those not on the path.
    pub fn backward(&self, root: Var) -> Vec<Tensor<F>> {
        let r = self.value(root);
        self.backward_seeded(root, Tensor::from_vec(r.shape, vec![F::one(); r.data.len()]))
    }

    /// Backpropagates an arbitrary upstream gradient `seed` from `root`.
    pub fn backward_seeded(&self, root: Var, seed: Tensor<F>) -> Vec<Tensor<F>> {
        assert_eq!(self.value(root).shape, seed.shape);
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        let mut param_grads: Vec<Tensor<F>> = self.params.tensors.iter().map(|t| Tensor::zeros(t.shape)).collect();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(i) => param_grads[*i].add_assign(&g),
                Op::Conv { x, w, b, k } => {
                    let (xt, wt) = (self.value(*x), self.value(*w));
                    let [n, ci, h, wd] = xt.shape;
                    let co = wt.shape[0];
                    let hw = h * wd;
                    let kk = ci * k * k;
                    let mut gx = Tensor::zeros(xt.shape);
                    let mut gw = Tensor::zeros(wt.shape);
                    let mut gb = vec![F::zero(); co];
                    let mut col = if *k == 1 { Vec::new() } else { vec![F::zero(); kk * hw] };
                    let mut dcol = vec![F::zero(); kk * hw];
                    for i in 0..n {
                        let gy = g.item(i);
                        for (c, row) in gy.chunks(hw).enumerate() {
                            gb[c] += row.iter().copied().sum::<F>();
                        }
                        let src: &[F] = if *k == 1 {
                            xt.item(i)
                        } else {
                            im2col(xt.item(i), ci, h, wd, *k, &mut col);
                            &col
                        };
                        matmul(co, hw, kk, gy, false, src, true, &mut gw.data, true);
                        if *k == 1 {
                            matmul(kk, co, hw, &wt.data, true, gy, false, gx.item_mut(i), true);
                        } else {
                            matmul(kk, co, hw, &wt.data, true, gy, false, &mut dcol, false);
                            col2im_add(&dcol, ci, h, wd, *k, gx.item_mut(i));
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, Tensor::vector(1, co, gb));
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    rstd,
                } => {
                    let (xt, gt) = (self.value(*x), self.value(*gamma));
                    let [_, c, h, w] = xt.shape;
                    let hw = h * w;
                    let cpg = c / groups;
                    let gsize = cpg * hw;
                    let cnt = F::of(gsize as f64);
                    let mut gx = Tensor::zeros(xt.shape);
                    let mut ggamma = vec![F::zero(); c];
                    let mut gbeta = vec![F::zero(); c];
                    let mut xhat = vec![F::zero(); gsize];
                    let mut dxhat = vec![F::zero(); gsize];
                    for (gi, ((src, gy), dst)) in xt
                        .data
                        .chunks(gsize)
                        .zip(g.data.chunks(gsize))
                        .zip(gx.data.chunks_mut(gsize))
                        .enumerate()
                    {
                        let r = rstd[gi];
                        let mean = src.iter().copied().sum::<F>() / cnt;
                        let c0 = (gi % groups) * cpg;
                        let (mut s1, mut s2) = (F::zero(), F::zero());
                        for j in 0..gsize {
                            let ch = c0 + j / hw;
                            xhat[j] = (src[j] - mean) * r;
                            ggamma[ch] += gy[j] * xhat[j];
                            gbeta[ch] += gy[j];
                            dxhat[j] = gy[j] * gt.data[ch];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat[j];
                        }
                        let (m1, m2) = (s1 / cnt, s2 / cnt);
                        for j in 0..gsize {
                            dst[j] = r * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, Tensor::vector(1, c, ggamma));
                    accumulate(&mut grads, *beta, Tensor::vector(1, c, gbeta));
                }
                Op::Silu { x } => {
                    let xt = self.value(*x);
                    let data = xt
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(&v, &gy)| {
                            let s = sigmoid(v);
                            gy * s * (F::one() + v * (F::one() - s))
                        })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(xt.shape, data));
                }
                Op::Linear { x, w, b } => {
                    let (xt, wt) = (self.value(*x), self.value(*w));
                    let n = xt.n();
                    let din = xt.item_len();
                    let dout = wt.shape[0];
                    let mut gx = Tensor::zeros(xt.shape);
                    matmul(n, dout, din, &g.data, false, &wt.data, false, &mut gx.data, false);
                    let mut gw = Tensor::zeros(wt.shape);
                    matmul(dout, n, din, &g.data, true, &xt.data, false, &mut gw.data, false);
                    let mut gb = vec![F::zero(); dout];
                    for row in g.data.chunks(dout) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, Tensor::vector(1, dout, gb));
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddChannel { x, v } => {
                    let hw = g.hw();
                    let sums = g.data.chunks(hw).map(|row| row.iter().copied().sum()).collect();
                    let vshape = self.value(*v).shape;
                    accumulate(&mut grads, *v, Tensor::from_vec(vshape, sums));
                    accumulate(&mut grads, *x, g);
                }
                Op::AvgPool2 { x } => {
                    let shape = self.value(*x).shape;
                    let [_, _, h, w] = shape;
                    let (oh, ow) = (h / 2, w / 2);
                    let mut gx = Tensor::zeros(shape);
                    let quarter = F::of(0.25);
                    for (gy, dst) in g.data.chunks(oh * ow).zip(gx.data.chunks_mut(h * w)) {
                        for r in 0..h {
                            for q in 0..w {
                                dst[r * w + q] = gy[(r / 2) * ow + q / 2] * quarter;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Upsample2 { x } => {
                    let shape = self.value(*x).shape;
                    let [_, _, h, w] = shape;
                    let ow = 2 * w;
                    let mut gx = Tensor::zeros(shape);
                    for (gy, dst) in g.data.chunks(4 * h * w).zip(gx.data.chunks_mut(h * w)) {
                        for r in 0..2 * h {
                            for q in 0..ow {
                                dst[(r / 2) * w + q / 2] += gy[r * ow + q];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Concat { a, b } => {
                    let (sa, sb) = (self.value(*a).shape, self.value(*b).shape);
                    let mut ga = Tensor::zeros(sa);
                    let mut gb = Tensor::zeros(sb);
                    let la = ga.item_len();
                    for i in 0..sa[0] {
                        let src = g.item(i);
                        ga.item_mut(i).copy_from_slice(&src[..la]);
                        gb.item_mut(i).copy_from_slice(&src[la..]);
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Attention { qkv, probs } => {
                    let t = self.value(*qkv);
                    let [n, c3, h, w] = t.shape;
                    let c = c3 / 3;
                    let l = h * w;
                    let scale = F::one() / F::of(c as f64).sqrt();
                    let mut gt = Tensor::zeros(t.shape);
                    let mut dp = vec![F::zero(); l * l];
                    for i in 0..n {
                        let item = t.item(i);
                        let (q, rest) = item.split_at(c * l);
                        let (k, v) = rest.split_at(c * l);
                        let p = &probs[i * l * l..(i + 1) * l * l];
                        let go = g.item(i);
                        let dst = gt.item_mut(i);
                        let (dq, rest) = dst.split_at_mut(c * l);
                        let (dk, dv) = rest.split_at_mut(c * l);
                        // out = V P^T
                        matmul(c, l, l, go, false, p, false, dv, false);
                        matmul(l, c, l, go, true, v, false, &mut dp, false);
                        // softmax backward, folded with the score scale
                        for (drow, prow) in dp.chunks_mut(l).zip(p.chunks(l)) {
                            let dot: F = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                            for (d, &pv) in drow.iter_mut().zip(prow) {
                                *d = pv * (*d - dot) * scale;
                            }
                        }
                        matmul(c, l, l, k, false, &dp, true, dq, false);
                        matmul(c, l, l, q, false, &dp, false, dk, false);
                    }
                    accumulate(&mut grads, *qkv, gt);
                }
                Op::Mse { a, target } => {
                    let at = self.value(*a);
                    let s = g.data[0] * F::of(2.0 / at.data.len() as f64);
                    let data = at.data.iter().zip(&target.data).map(|(&x, &y)| (x - y) * s).collect();
                    accumulate(&mut grads, *a, Tensor::from_vec(at.shape, data));
                }
            }
        }
        param_grads
    }
}

fn accumulate<F: Float>(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn sigmoid<F: Float>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

/// Unfolds one `[ci, h, w]` image into `[ci * k * k, h * w]` patches.
fn im2col<F: Float>(x: &[F], ci: usize, h: usize, w: usize, k: usize, col: &mut [F]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut row = 0;
    for c in 0..ci {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(F::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let lo = (-dx).max(0) as usize;
                    let hi = (w as isize - dx).min(w as isize) as usize;
                    out[..lo].fill(F::zero());
                    out[hi..].fill(F::zero());
                    out[lo..hi].copy_from_slice(&src[(lo as isize + dx) as usize..(hi as isize + dx) as usize]);
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds patch gradients back onto the image.
fn col2im_add<F: Float>(col: &[F], ci: usize, h: usize, w: usize, k: usize, x: &mut [F]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut row = 0;
    for c in 0..ci {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let lo = (-dx).max(0) as usize;
                    let hi = (w as isize - dx).min(w as isize) as usize;
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let s = &src[y * w..(y + 1) * w];
                    for q in lo..hi {
                        dst[(q as isize + dx) as usize] += s[q];
                    }
                }
                row += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, &[]);
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| StandardNormal.sample(&mut r)).collect())
    }

    fn params(shapes: &[[usize; 4]]) -> ParamSet<f64> {
        let mut ps = ParamSet::default();
        for (i, &s) in shapes.iter().enumerate() {
            ps.push(format!("p{i}"), randn(s, 10 + i as u64));
        }
        ps
    }

    /// Compares every parameter gradient of `sum(f(params) * probe)` with
    /// central differences. Inputs are passed as parameters so their
    /// gradients are covered too.
    fn check(ps: ParamSet<f64>, f: impl Fn(&mut Tape<f64>) -> Var) {
        let probe = {
            let mut tape = Tape::new(&ps);
            let out = f(&mut tape);
            randn(tape.value(out).shape, 99)
        };
        let objective = |ps: &ParamSet<f64>| {
            let mut tape = Tape::new(ps);
            let out = f(&mut tape);
            tape.value(out)
                .data
                .iter()
                .zip(&probe.data)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let grads = {
            let mut tape = Tape::new(&ps);
            let out = f(&mut tape);
            tape.backward_seeded(out, probe.clone())
        };
        let h = 1e-6;
        for (pi, t) in ps.tensors.iter().enumerate() {
            for j in 0..t.data.len() {
                let mut plus = ps.clone();
                plus.tensors[pi].data[j] += h;
                let mut minus = ps.clone();
                minus.tensors[pi].data[j] -= h;
                let num = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let ana = grads[pi].data[j];
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-2);
                assert!(err < 1e-5, "{} [{j}]: numeric {num} vs analytic {ana}", ps.names[pi]);
            }
        }
    }

    #[test]
    fn conv3_gradients() {
        check(params(&[[2, 3, 5, 4], [4, 3, 3, 3], [1, 4, 1, 1]]), |t| {
            let (x, w, b) = (t.param(0), t.param(1), t.param(2));
            t.conv(x, w, b)
        });
    }

    #[test]
    fn conv1_gradients() {
        check(params(&[[2, 3, 4, 4], [5, 3, 1, 1], [1, 5, 1, 1]]), |t| {
            let (x, w, b) = (t.param(0), t.param(1), t.param(2));
            t.conv(x, w, b)
        });
    }

    #[test]
    fn group_norm_and_silu_gradients() {
        check(params(&[[2, 4, 3, 3], [1, 4, 1, 1], [1, 4, 1, 1]]), |t| {
            let (x, g, b) = (t.param(0), t.param(1), t.param(2));
            let y = t.group_norm(x, g, b, 2);
            t.silu(y)
        });
    }

    #[test]
    fn linear_and_add_channel_gradients() {
        check(params(&[[2, 3, 4, 4], [2, 5, 1, 1], [3, 5, 1, 1], [1, 3, 1, 1]]), |t| {
            let (x, e, w, b) = (t.param(0), t.param(1), t.param(2), t.param(3));
            let v = t.linear(e, w, b);
            t.add_channel(x, v)
        });
    }

    #[test]
    fn pool_upsample_concat_add_gradients() {
        check(params(&[[2, 2, 4, 6], [2, 1, 4, 6]]), |t| {
            let (a, b) = (t.param(0), t.param(1));
            let p = t.avg_pool2(a);
            let u = t.upsample2(p);
            let s = t.add(u, a);
            t.concat(s, b)
        });
    }

    #[test]
    fn attention_gradients() {
        check(params(&[[2, 6, 3, 2]]), |t| {
            let x = t.param(0);
            t.attention(x)
        });
    }

    #[test]
    fn mse_gradient_and_value() {
        let ps = params(&[[1, 2, 3, 3]]);
        let target = randn([1, 2, 3, 3], 5);
        let mut tape = Tape::new(&ps);
        let a = tape.param(0);
        let l = tape.mse(a, target.clone());
        let expected: f64 = ps.tensors[0]
            .data
            .iter()
            .zip(&target.data)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / 18.0;
        assert!((tape.value(l).data[0] - expected).abs() < 1e-12);
        let g = tape.backward(l);
        for ((gv, x), y) in g[0].data.iter().zip(&ps.tensors[0].data).zip(&target.data) {
            assert!((gv - 2.0 * (x - y) / 18.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let ps = params(&[[1, 3, 2, 2]]);
        let mut tape = Tape::new(&ps);
        let x = tape.param(0);
        let y = tape.attention(x);
        let v = &ps.tensors[0].data[8..12];
        let (lo, hi) = v.iter().fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
        for &o in &tape.value(y).data {
            assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
        }
    }

    #[test]
    fn group_norm_output_is_standardized() {
        let ps = {
            let mut p = ParamSet::default();
            p.push("x", randn([1, 4, 5, 5], 3));
            p.push("g", Tensor::from_vec([1, 4, 1, 1], vec![1.0; 4]));
            p.push("b", Tensor::zeros([1, 4, 1, 1]));
            p
        };
        let mut tape = Tape::new(&ps);
        let (x, g, b) = (tape.param(0), tape.param(1), tape.param(2));
        let y = tape.group_norm(x, g, b, 2);
        for group in tape.value(y).data.chunks(50) {
            let m = group.iter().sum::<f64>() / 50.0;
            let v = group.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 50.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        let (ci, h, w, k) = (2, 4, 5, 3);
        let x = randn([1, ci, h, w], 1).data;
        let y = randn([1, ci * k * k, h, w], 2).data;
        let mut col = vec![0.0; y.len()];
        im2col(&x, ci, h, w, k, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_add(&y, ci, h, w, k, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
