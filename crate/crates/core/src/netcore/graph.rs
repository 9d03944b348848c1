//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! accumulates exact gradients. Nodes created by [`Graph::stop_gradient`]
//! pass their value through unchanged but are never traversed backward, so
//! anything reachable only through them receives a gradient of exactly zero.

use std::collections::BTreeMap;

use crate::error::{ensure, Error, Result};
use crate::netcore::params::ParamStore;
use crate::tensor::{axpby_per_item, mix_kernel, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

const GROUP_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    StopGradient,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `scale * x + shift`
    Affine(Var, T),
    AxpbyPerItem { x: Var, a: Vec<T>, y: Var, b: Vec<T> },
    Mix { a: Var, b: Var, r: Var },
    Square(Var),
    Silu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    SumLastAxis(Var),
    Reshape(Var),
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, k: usize, cols: Vec<T> },
    AvgPool2(Var),
    Upsample2(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<T>, rstd: Vec<T> },
    AddItemChannel { x: Var, e: Var },
    ConcatLast(Var, Var),
    SliceLast { x: Var, start: usize },
    Resize { x: Var, hmap: Vec<(usize, usize, T)>, wmap: Vec<(usize, usize, T)> },
    UnitNormLast { x: Var, eps: T },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    SoftmaxLast(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

/// Parameter paths bound onto a graph.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter `{path}` not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Result of one backward pass.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to any node. Nodes the loss does not reach
    /// (including everything behind a stop-gradient) get exact zeros.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    /// True if backward propagation actually reached `v`.
    pub fn reached(&self, v: Var) -> bool {
        matches!(self.grads.get(v.0), Some(Some(_)))
    }

    /// Gradients for every named parameter bound on the graph.
    pub fn params(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, v) in &self.params {
            out.insert(name.clone(), self.wrt(*v))
                .expect("graph parameter names are unique");
        }
        out
    }

    /// Gradients for the parameters bound under `prefix`, prefix stripped.
    pub fn params_with_prefix(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, v) in &self.params {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, self.wrt(*v)).expect("unique");
            }
        }
        out
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    ensure!(
        a.shape() == b.shape(),
        "{what}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    Ok(())
}

fn image_dims(t: &Tensor<impl Real>, what: &str) -> Result<(usize, usize, usize, usize)> {
    ensure!(t.rank() == 4, "{what}: expected [N,H,W,C], got {:?}", t.shape());
    let s = t.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Output-index → (low, high, weight) taps for half-pixel bilinear resize.
fn resize_taps<T: Real>(input: usize, output: usize) -> Vec<(usize, usize, T)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, T::of(src - lo as f64))
        })
        .collect()
}

fn im2col<T: Real>(x: &[T], n: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let row = k * k * c;
    let mut cols = vec![T::zero(); n * h * w * row];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let base = ((b * h + y) * w + xx) * row;
                for i in 0..k {
                    let sy = y as isize + i as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for j in 0..k {
                        let sx = xx as isize + j as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((b * h + sy as usize) * w + sx as usize) * c;
                        let dst = base + (i * k + j) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], n: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let row = k * k * c;
    let mut x = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let base = ((b * h + y) * w + xx) * row;
                for i in 0..k {
                    let sy = y as isize + i as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for j in 0..k {
                        let sx = xx as isize + j as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + sy as usize) * w + sx as usize) * c;
                        let src = base + (i * k + j) * c;
                        for (d, &s) in x[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    x
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input. Never receives gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An unnamed differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A named differentiable leaf; reported by [`Gradients::params`].
    pub fn param(&mut self, path: impl Into<String>, value: Tensor<T>) -> Var {
        let v = self.leaf(value);
        self.params.push((path.into(), v));
        v
    }

    /// Binds every tensor of a store as a named differentiable leaf.
    pub fn bind(&mut self, prefix: &str, store: &ParamStore<T>) -> ParamVars {
        let mut vars = BTreeMap::new();
        for (path, t) in store.iter() {
            let v = self.param(format!("{prefix}{path}"), t.clone());
            vars.insert(path.clone(), v);
        }
        ParamVars { vars }
    }

    /// Binds every tensor of a store as a constant (frozen weights).
    pub fn bind_frozen(&mut self, store: &ParamStore<T>) -> ParamVars {
        let mut vars = BTreeMap::new();
        for (path, t) in store.iter() {
            vars.insert(path.clone(), self.input(t.clone()));
        }
        ParamVars { vars }
    }

    /// Forward-transparent, backward-opaque copy of `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, Op::StopGradient, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(&[x]);
        self.push(out, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Var {
        self.affine(x, scale, T::zero())
    }

    /// `a[i] * x + b[i] * y` for each batch item `i`.
    pub fn axpby_per_item(&mut self, a: Vec<T>, x: Var, b: Vec<T>, y: Var) -> Result<Var> {
        same_shape(self.value(x), self.value(y), "axpby")?;
        ensure!(
            a.len() == self.value(x).batch() && b.len() == a.len(),
            "axpby: need one coefficient per batch item"
        );
        let mut out = Tensor::zeros(self.shape(x));
        axpby_per_item(&a, self.value(x).data(), &b, self.value(y).data(), out.data_mut());
        let rg = self.rg(&[x, y]);
        Ok(self.push(out, Op::AxpbyPerItem { x, a, y, b }, rg))
    }

    /// `r * a + (1 - r) * b`, with `r` of shape `[.., 1]` broadcast over the
    /// channel axis of `a` and `b`.
    pub fn mix(&mut self, a: Var, b: Var, r: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mix")?;
        let (sa, sr) = (self.shape(a), self.shape(r));
        ensure!(
            sr.len() == sa.len() && sr.last() == Some(&1) && sr[..sr.len() - 1] == sa[..sa.len() - 1],
            "mix: weight shape {sr:?} does not broadcast over {sa:?}"
        );
        let c = self.value(a).channels();
        let mut out = Tensor::zeros(sa);
        mix_kernel(
            self.value(a).data(),
            self.value(b).data(),
            self.value(r).data(),
            c,
            out.data_mut(),
        );
        let rg = self.rg(&[a, b, r]);
        Ok(self.push(out, Op::Mix { a, b, r }, rg))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(&[x]);
        self.push(out, Op::Square(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(&[x]);
        self.push(out, Op::Silu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Sums away the trailing axis.
    pub fn sum_last_axis(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.channels();
        let mut shape = t.shape().to_vec();
        shape.pop();
        let data = t.data().chunks_exact(c).map(|ch| ch.iter().copied().sum()).collect();
        let out = Tensor::new(shape, data).expect("shape derived from input");
        let rg = self.rg(&[x]);
        self.push(out, Op::SumLastAxis(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `x [N, in] · w [in, out] + b [out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        ensure!(
            xs.len() == 2 && ws.len() == 2 && xs[1] == ws[0] && bs == [ws[1]],
            "linear: incompatible shapes x {xs:?}, w {ws:?}, b {bs:?}"
        );
        let (n, i, o) = (xs[0], ws[0], ws[1]);
        let mut out = Tensor::zeros([n, o]);
        {
            let data = out.data_mut();
            for row in data.chunks_exact_mut(o) {
                row.copy_from_slice(self.value(b).data());
            }
            T::gemm(
                n, i, o, T::one(),
                self.value(x).data(), i as isize, 1,
                self.value(w).data(), o as isize, 1,
                T::one(), data, o as isize, 1,
            );
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    /// Stride-1, same-padding 2-D convolution. `w` is `[k, k, Cin, Cout]`,
    /// `k` odd.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, h, wd, c) = image_dims(self.value(x), "conv2d")?;
        let ws = self.shape(w).to_vec();
        ensure!(
            ws.len() == 4 && ws[0] == ws[1] && ws[0] % 2 == 1 && ws[2] == c,
            "conv2d: weight {ws:?} incompatible with input channels {c}"
        );
        let (k, co) = (ws[0], ws[3]);
        ensure!(self.shape(b) == [co], "conv2d: bias must be [{co}]");
        let cols = if k == 1 {
            Vec::new()
        } else {
            im2col(self.value(x).data(), n, h, wd, c, k)
        };
        let m = n * h * wd;
        let kk = k * k * c;
        let mut out = Tensor::zeros([n, h, wd, co]);
        {
            let data = out.data_mut();
            for row in data.chunks_exact_mut(co) {
                row.copy_from_slice(self.value(b).data());
            }
            let a = if k == 1 { self.value(x).data() } else { &cols };
            T::gemm(
                m, kk, co, T::one(),
                a, kk as isize, 1,
                self.value(w).data(), co as isize, 1,
                T::one(), data, co as isize, 1,
            );
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b, k, cols }, rg))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, h, w, c) = image_dims(self.value(x), "avg_pool2")?;
        ensure!(h % 2 == 0 && w % 2 == 0 && h > 0 && w > 0, "avg_pool2: odd spatial size {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let quarter = T::of(0.25);
        let mut out = Tensor::zeros([n, oh, ow, c]);
        let dst = out.data_mut();
        for b in 0..n {
            for y in 0..oh {
                for xx in 0..ow {
                    let o = ((b * oh + y) * ow + xx) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let s = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                        for ch in 0..c {
                            dst[o + ch] += src[s + ch];
                        }
                    }
                    for v in &mut dst[o..o + c] {
                        *v *= quarter;
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::AvgPool2(x), rg))
    }

    /// 2× nearest-neighbour upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, h, w, c) = image_dims(self.value(x), "upsample2")?;
        let src = self.value(x).data();
        let mut out = Tensor::zeros([n, 2 * h, 2 * w, c]);
        let dst = out.data_mut();
        for b in 0..n {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let s = ((b * h + y / 2) * w + xx / 2) * c;
                    let d = ((b * 2 * h + y) * 2 * w + xx) * c;
                    dst[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Upsample2(x), rg))
    }

    /// Group normalization over `[H, W, C/groups]` per item and group, with
    /// per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (n, h, w, c) = image_dims(self.value(x), "group_norm")?;
        ensure!(groups > 0 && c % groups == 0, "group_norm: {c} channels not divisible by {groups}");
        ensure!(
            self.shape(gamma) == [c] && self.shape(beta) == [c],
            "group_norm: affine params must be [{c}]"
        );
        let cg = c / groups;
        let hw = h * w;
        let count = T::from_usize(hw * cg).unwrap();
        let eps = T::of(GROUP_NORM_EPS);
        let src = self.value(x).data();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); n * groups];
        let mut out = Tensor::zeros([n, h, w, c]);
        let dst = out.data_mut();
        for b in 0..n {
            for g in 0..groups {
                let idx = |p: usize, j: usize| (b * hw + p) * c + g * cg + j;
                let mut mean = T::zero();
                for p in 0..hw {
                    for j in 0..cg {
                        mean += src[idx(p, j)];
                    }
                }
                mean /= count;
                let mut var = T::zero();
                for p in 0..hw {
                    for j in 0..cg {
                        let d = src[idx(p, j)] - mean;
                        var += d * d;
                    }
                }
                var /= count;
                let rs = T::one() / (var + eps).sqrt();
                rstd[b * groups + g] = rs;
                for p in 0..hw {
                    for j in 0..cg {
                        let i = idx(p, j);
                        let xh = (src[i] - mean) * rs;
                        xhat[i] = xh;
                        dst[i] = xh * gm[g * cg + j] + bt[g * cg + j];
                    }
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(out, Op::GroupNorm { x, gamma, beta, groups, xhat, rstd }, rg))
    }

    /// `x [N, .., C] + e [N, C]`, broadcasting `e` over every position of
    /// item `n`.
    pub fn add_item_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let es = self.shape(e);
        ensure!(
            es.len() == 2 && es[0] == xs[0] && es[1] == *xs.last().unwrap(),
            "add_item_channel: {es:?} does not broadcast over {xs:?}"
        );
        let c = es[1];
        let per = self.value(x).numel() / xs[0];
        let mut out = self.value(x).clone();
        let ev = self.value(e).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_exact_mut(per).enumerate() {
            let row = &ev[i * c..(i + 1) * c];
            for px in chunk.chunks_exact_mut(c) {
                for (v, &a) in px.iter_mut().zip(row) {
                    *v += a;
                }
            }
        }
        let rg = self.rg(&[x, e]);
        Ok(self.push(out, Op::AddItemChannel { x, e }, rg))
    }

    /// Concatenation along the trailing (channel) axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        ensure!(
            sa.len() == sb.len() && sa[..sa.len() - 1] == sb[..sb.len() - 1],
            "concat_last: {sa:?} vs {sb:?}"
        );
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let mut data = Vec::with_capacity(self.value(a).numel() + self.value(b).numel());
        for (x, y) in self
            .value(a)
            .data()
            .chunks_exact(ca)
            .zip(self.value(b).data().chunks_exact(cb))
        {
            data.extend_from_slice(x);
            data.extend_from_slice(y);
        }
        let out = Tensor::new(shape, data).expect("consistent");
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ConcatLast(a, b), rg))
    }

    /// Channels `[start, start + len)` of the trailing axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().unwrap();
        ensure!(start + len <= c && len > 0, "slice_last: [{start}, {}) out of {c}", start + len);
        let mut shape = sx;
        *shape.last_mut().unwrap() = len;
        let data = self
            .value(x)
            .data()
            .chunks_exact(c)
            .flat_map(|ch| ch[start..start + len].iter().copied())
            .collect();
        let out = Tensor::new(shape, data).expect("consistent");
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceLast { x, start }, rg))
    }

    /// Bilinear resize with half-pixel centres (no antialiasing).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, h, w, c) = image_dims(self.value(x), "resize_bilinear")?;
        ensure!(out_h > 0 && out_w > 0, "resize_bilinear: empty target");
        let hmap: Vec<(usize, usize, T)> = resize_taps(h, out_h);
        let wmap: Vec<(usize, usize, T)> = resize_taps(w, out_w);
        let src = self.value(x).data();
        let mut out = Tensor::zeros([n, out_h, out_w, c]);
        let dst = out.data_mut();
        let one = T::one();
        for b in 0..n {
            for (oy, &(y0, y1, ly)) in hmap.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in wmap.iter().enumerate() {
                    let d = ((b * out_h + oy) * out_w + ox) * c;
                    let p = |yy: usize, xx: usize| ((b * h + yy) * w + xx) * c;
                    let (p00, p01, p10, p11) = (p(y0, x0), p(y0, x1), p(y1, x0), p(y1, x1));
                    for ch in 0..c {
                        let top = (one - lx) * src[p00 + ch] + lx * src[p01 + ch];
                        let bot = (one - lx) * src[p10 + ch] + lx * src[p11 + ch];
                        dst[d + ch] = (one - ly) * top + ly * bot;
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Resize { x, hmap, wmap }, rg))
    }

    /// Divides each trailing-axis vector by its Euclidean norm plus `eps`.
    pub fn unit_normalize_last(&mut self, x: Var, eps: T) -> Var {
        let c = self.value(x).channels();
        let mut out = self.value(x).clone();
        for v in out.data_mut().chunks_exact_mut(c) {
            let norm = v.iter().map(|&a| a * a).sum::<T>().sqrt() + eps;
            for a in v {
                *a /= norm;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::UnitNormLast { x, eps }, rg)
    }

    /// Batched matrix product of `a [B, M, K]` with `b [B, K, N]`, or with
    /// `b [B, N, K]` transposed when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        ensure!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "batch_matmul: {sa:?} x {sb:?}");
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        ensure!(k == kb, "batch_matmul: inner dims {k} vs {kb}");
        let mut out = Tensor::zeros([bs, m, n]);
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            let od = out.data_mut();
            for i in 0..bs {
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                T::gemm(
                    m, k, n, T::one(),
                    &ad[i * m * k..(i + 1) * m * k], k as isize, 1,
                    &bd[i * k * n..(i + 1) * k * n], rsb, csb,
                    T::zero(), &mut od[i * m * n..(i + 1) * m * n], n as isize, 1,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::BatchMatMul { a, b, trans_b }, rg))
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let c = self.value(x).channels();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxLast(x), rg)
    }

    /// Mean squared error, averaged over every element.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Reverse-mode gradients of the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        ensure!(
            self.value(loss).numel() == 1,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if need(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    self.accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y).unwrap());
                }
                if need(*b) {
                    self.accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y).unwrap());
                }
            }
            Op::Affine(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::AxpbyPerItem { x, a, y, b } => {
                let per = g.numel() / a.len();
                for (v, coef) in [(*x, a), (*y, b)] {
                    if need(v) {
                        let mut d = g.clone();
                        for (chunk, &c) in d.data_mut().chunks_exact_mut(per).zip(coef.iter()) {
                            for e in chunk {
                                *e *= c;
                            }
                        }
                        self.accumulate(grads, v, d);
                    }
                }
            }
            Op::Mix { a, b, r } => {
                let c = g.channels();
                let rv = val(*r).data();
                if need(*a) {
                    let mut d = g.clone();
                    for (chunk, &w) in d.data_mut().chunks_exact_mut(c).zip(rv) {
                        chunk.iter_mut().for_each(|e| *e *= w);
                    }
                    self.accumulate(grads, *a, d);
                }
                if need(*b) {
                    let mut d = g.clone();
                    for (chunk, &w) in d.data_mut().chunks_exact_mut(c).zip(rv) {
                        chunk.iter_mut().for_each(|e| *e *= T::one() - w);
                    }
                    self.accumulate(grads, *b, d);
                }
                if need(*r) {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    let mut d = Tensor::zeros(val(*r).shape());
                    for (p, out) in d.data_mut().iter_mut().enumerate() {
                        let s = p * c..(p + 1) * c;
                        *out = g.data()[s.clone()]
                            .iter()
                            .zip(&av[s.clone()])
                            .zip(&bv[s])
                            .map(|((&gg, &x), &y)| gg * (x - y))
                            .sum();
                    }
                    self.accumulate(grads, *r, d);
                }
            }
            Op::Square(x) => {
                let two = T::of(2.0);
                self.accumulate(grads, *x, g.zip_map(val(*x), |gg, v| two * v * gg).unwrap());
            }
            Op::Silu(x) => {
                let d = g
                    .zip_map(val(*x), |gg, v| {
                        let s = sigmoid(v);
                        gg * s * (T::one() + v * (T::one() - s))
                    })
                    .unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = g
                    .zip_map(&node.value, |gg, s| gg * s * (T::one() - s))
                    .unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, Tensor::full(val(*x).shape(), g.item()));
            }
            Op::Mean(x) => {
                let n = T::from_usize(val(*x).numel()).unwrap();
                self.accumulate(grads, *x, Tensor::full(val(*x).shape(), g.item() / n));
            }
            Op::SumLastAxis(x) => {
                let c = val(*x).channels();
                let d = Tensor::from_fn(val(*x).shape(), |k| g.data()[k / c]);
                self.accumulate(grads, *x, d);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.clone().reshape(val(*x).shape()).unwrap());
            }
            Op::Linear { x, w, b } => {
                let (n, i) = (val(*x).shape()[0], val(*x).shape()[1]);
                let o = val(*w).shape()[1];
                if need(*x) {
                    let mut dx = Tensor::zeros([n, i]);
                    T::gemm(
                        n, o, i, T::one(),
                        g.data(), o as isize, 1,
                        val(*w).data(), 1, o as isize,
                        T::zero(), dx.data_mut(), i as isize, 1,
                    );
                    self.accumulate(grads, *x, dx);
                }
                if need(*w) {
                    let mut dw = Tensor::zeros([i, o]);
                    T::gemm(
                        i, n, o, T::one(),
                        val(*x).data(), 1, i as isize,
                        g.data(), o as isize, 1,
                        T::zero(), dw.data_mut(), o as isize, 1,
                    );
                    self.accumulate(grads, *w, dw);
                }
                if need(*b) {
                    self.accumulate(grads, *b, column_sums(g.data(), o));
                }
            }
            Op::Conv2d { x, w, b, k, cols } => {
                let (n, h, wd, c) = image_dims(val(*x), "conv2d").unwrap();
                let co = val(*w).shape()[3];
                let (m, kk) = (n * h * wd, k * k * c);
                if need(*w) {
                    let a = if *k == 1 { val(*x).data() } else { cols.as_slice() };
                    let mut dw = Tensor::zeros(val(*w).shape());
                    T::gemm(
                        kk, m, co, T::one(),
                        a, 1, kk as isize,
                        g.data(), co as isize, 1,
                        T::zero(), dw.data_mut(), co as isize, 1,
                    );
                    self.accumulate(grads, *w, dw);
                }
                if need(*b) {
                    self.accumulate(grads, *b, column_sums(g.data(), co));
                }
                if need(*x) {
                    let mut dcols = vec![T::zero(); m * kk];
                    T::gemm(
                        m, co, kk, T::one(),
                        g.data(), co as isize, 1,
                        val(*w).data(), 1, co as isize,
                        T::zero(), &mut dcols, kk as isize, 1,
                    );
                    let dx = if *k == 1 { dcols } else { col2im(&dcols, n, h, wd, c, *k) };
                    self.accumulate(grads, *x, Tensor::new([n, h, wd, c], dx).unwrap());
                }
            }
            Op::AvgPool2(x) => {
                let (n, h, w, c) = image_dims(val(*x), "avg_pool2").unwrap();
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                let mut dx = Tensor::zeros([n, h, w, c]);
                let d = dx.data_mut();
                for b in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            let s = ((b * oh + y / 2) * ow + xx / 2) * c;
                            let o = ((b * h + y) * w + xx) * c;
                            for ch in 0..c {
                                d[o + ch] = g.data()[s + ch] * quarter;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2(x) => {
                let (n, h, w, c) = image_dims(val(*x), "upsample2").unwrap();
                let mut dx = Tensor::zeros([n, h, w, c]);
                let d = dx.data_mut();
                for b in 0..n {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let s = ((b * 2 * h + y) * 2 * w + xx) * c;
                            let o = ((b * h + y / 2) * w + xx / 2) * c;
                            for ch in 0..c {
                                d[o + ch] += g.data()[s + ch];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                let (n, h, w, c) = image_dims(val(*x), "group_norm").unwrap();
                let cg = c / groups;
                let hw = h * w;
                let gd = g.data();
                let gm = val(*gamma).data();
                if need(*gamma) {
                    let mut dg = Tensor::zeros([c]);
                    for (k, (&gg, &xh)) in gd.iter().zip(xhat).enumerate() {
                        dg.data_mut()[k % c] += gg * xh;
                    }
                    self.accumulate(grads, *gamma, dg);
                }
                if need(*beta) {
                    self.accumulate(grads, *beta, column_sums(gd, c));
                }
                if need(*x) {
                    let count = T::from_usize(hw * cg).unwrap();
                    let mut dx = Tensor::zeros([n, h, w, c]);
                    let d = dx.data_mut();
                    for b in 0..n {
                        for gi in 0..*groups {
                            let idx = |p: usize, j: usize| (b * hw + p) * c + gi * cg + j;
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for p in 0..hw {
                                for j in 0..cg {
                                    let k = idx(p, j);
                                    let dxh = gd[k] * gm[gi * cg + j];
                                    m1 += dxh;
                                    m2 += dxh * xhat[k];
                                }
                            }
                            m1 /= count;
                            m2 /= count;
                            let rs = rstd[b * groups + gi];
                            for p in 0..hw {
                                for j in 0..cg {
                                    let k = idx(p, j);
                                    let dxh = gd[k] * gm[gi * cg + j];
                                    d[k] = rs * (dxh - m1 - xhat[k] * m2);
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::AddItemChannel { x, e } => {
                self.accumulate(grads, *x, g.clone());
                if need(*e) {
                    let es = val(*e).shape();
                    let (n, c) = (es[0], es[1]);
                    let per = g.numel() / n;
                    let mut de = Tensor::zeros([n, c]);
                    for (i, chunk) in g.data().chunks_exact(per).enumerate() {
                        let sums = column_sums(chunk, c);
                        de.data_mut()[i * c..(i + 1) * c].copy_from_slice(sums.data());
                    }
                    self.accumulate(grads, *e, de);
                }
            }
            Op::ConcatLast(a, b) => {
                let (ca, cb) = (val(*a).channels(), val(*b).channels());
                if need(*a) {
                    let d = g.data().chunks_exact(ca + cb).flat_map(|ch| ch[..ca].iter().copied());
                    self.accumulate(grads, *a, Tensor::new(val(*a).shape(), d.collect()).unwrap());
                }
                if need(*b) {
                    let d = g.data().chunks_exact(ca + cb).flat_map(|ch| ch[ca..].iter().copied());
                    self.accumulate(grads, *b, Tensor::new(val(*b).shape(), d.collect()).unwrap());
                }
            }
            Op::SliceLast { x, start } => {
                let c = val(*x).channels();
                let len = g.channels();
                let mut dx = Tensor::zeros(val(*x).shape());
                for (dst, src) in dx.data_mut().chunks_exact_mut(c).zip(g.data().chunks_exact(len)) {
                    dst[*start..start + len].copy_from_slice(src);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Resize { x, hmap, wmap } => {
                let (n, h, w, c) = image_dims(val(*x), "resize").unwrap();
                let (oh, ow) = (hmap.len(), wmap.len());
                let one = T::one();
                let mut dx = Tensor::zeros([n, h, w, c]);
                let d = dx.data_mut();
                for b in 0..n {
                    for (oy, &(y0, y1, ly)) in hmap.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in wmap.iter().enumerate() {
                            let s = ((b * oh + oy) * ow + ox) * c;
                            let p = |yy: usize, xx: usize| ((b * h + yy) * w + xx) * c;
                            let taps = [
                                (p(y0, x0), (one - ly) * (one - lx)),
                                (p(y0, x1), (one - ly) * lx),
                                (p(y1, x0), ly * (one - lx)),
                                (p(y1, x1), ly * lx),
                            ];
                            for ch in 0..c {
                                let gg = g.data()[s + ch];
                                for &(pp, wt) in &taps {
                                    d[pp + ch] += wt * gg;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::UnitNormLast { x, eps } => {
                let c = g.channels();
                let xv = val(*x).data();
                let mut dx = Tensor::zeros(val(*x).shape());
                for ((dst, gv), xs) in dx
                    .data_mut()
                    .chunks_exact_mut(c)
                    .zip(g.data().chunks_exact(c))
                    .zip(xv.chunks_exact(c))
                {
                    let s = xs.iter().map(|&a| a * a).sum::<T>().sqrt();
                    let den = s + *eps;
                    let dot: T = gv.iter().zip(xs).map(|(&a, &b)| a * b).sum();
                    let corr = if s > T::zero() { dot / (den * den * s) } else { T::zero() };
                    for ((o, &gg), &xx) in dst.iter_mut().zip(gv).zip(xs) {
                        *o = gg / den - xx * corr;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (ad, bd, gd) = (val(*a).data(), val(*b).data(), g.data());
                if need(*a) {
                    let mut da = Tensor::zeros(sa);
                    for i in 0..bs {
                        // dA = dC · Bᵀ (B stored k×n) or dC · B (B stored n×k)
                        let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                        T::gemm(
                            m, n, k, T::one(),
                            &gd[i * m * n..(i + 1) * m * n], n as isize, 1,
                            &bd[i * k * n..(i + 1) * k * n], rsb, csb,
                            T::zero(), &mut da.data_mut()[i * m * k..(i + 1) * m * k], k as isize, 1,
                        );
                    }
                    self.accumulate(grads, *a, da);
                }
                if need(*b) {
                    let mut db = Tensor::zeros(sb);
                    for i in 0..bs {
                        let ga = &gd[i * m * n..(i + 1) * m * n];
                        let aa = &ad[i * m * k..(i + 1) * m * k];
                        let out = &mut db.data_mut()[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB (n×k) = dCᵀ · A
                            T::gemm(n, m, k, T::one(), ga, 1, n as isize, aa, k as isize, 1,
                                T::zero(), out, k as isize, 1);
                        } else {
                            // dB (k×n) = Aᵀ · dC
                            T::gemm(k, m, n, T::one(), aa, 1, k as isize, ga, n as isize, 1,
                                T::zero(), out, n as isize, 1);
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::SoftmaxLast(x) => {
                let c = g.channels();
                let mut dx = Tensor::zeros(g.shape());
                for ((dst, gv), yv) in dx
                    .data_mut()
                    .chunks_exact_mut(c)
                    .zip(g.data().chunks_exact(c))
                    .zip(node.value.data().chunks_exact(c))
                {
                    let dot: T = gv.iter().zip(yv).map(|(&a, &b)| a * b).sum();
                    for ((o, &gg), &y) in dst.iter_mut().zip(gv).zip(yv) {
                        *o = y * (gg - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

fn column_sums<T: Real>(data: &[T], cols: usize) -> Tensor<T> {
    let mut out = Tensor::zeros([cols]);
    for row in data.chunks_exact(cols) {
        for (o, &v) in out.data_mut().iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn stop_gradient_freezes_one_factor() {
        // y = sg(w) * w  =>  dy/dw = w, not 2w
        let mut g = Graph::<f64>::new();
        let w = g.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let frozen = g.stop_gradient(w);
        let prod = g.mul(frozen, w).unwrap();
        let y = g.sum(prod);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(w).data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn stop_gradient_fully_blocked_is_exact_zero() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(t(&[2], &[3.0, 4.0]));
        let frozen = g.stop_gradient(w);
        let sq = g.square(frozen);
        let y = g.sum(sq);
        let grads = g.backward(y).unwrap();
        assert!(!grads.reached(w));
        assert_eq!(grads.wrt(w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn sum_and_norm_gradients() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(t(&[3], &[1.0, 2.0, -3.0]));
        let s = g.sum(w);
        assert_eq!(g.backward(s).unwrap().wrt(w).data(), &[1.0, 1.0, 1.0]);
        let sq = g.square(w);
        let n = g.sum(sq);
        assert_eq!(g.backward(n).unwrap().wrt(w).data(), &[2.0, 4.0, -6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn unreached_params_get_zero_gradients() {
        let mut g = Graph::<f64>::new();
        let a = g.param("a", t(&[2], &[1.0, 2.0]));
        let _b = g.param("b", t(&[1], &[5.0]));
        let s = g.sum(a);
        let p = g.backward(s).unwrap().params();
        assert_eq!(p.get("b").unwrap().data(), &[0.0]);
        assert_eq!(p.get("a").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn([1, 3, 3, 1], |i| i as f64));
        let mut wd = vec![0.0; 9];
        wd[4] = 1.0;
        let w = g.input(t(&[3, 3, 1, 1], &wd));
        let b = g.input(t(&[1], &[0.0]));
        let y = g.conv2d(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn([1, 4, 4, 2], |i| (i as f64).sin()));
        let y = g.resize_bilinear(x, 4, 4).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn([2, 4, 4, 3], |i| i as f64));
        let p = g.avg_pool2(x).unwrap();
        assert_eq!(g.shape(p), &[2, 2, 2, 3]);
        let u = g.upsample2(p).unwrap();
        assert_eq!(g.shape(u), &[2, 4, 4, 3]);
        let odd = g.input(Tensor::zeros([1, 3, 3, 1]));
        assert!(g.avg_pool2(odd).is_err());
    }
}
