use std::collections::HashMap;

use crate::conv::{self, ConvCall};
use crate::error::{shape_err, Error, Result};
use crate::float::Float;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sparse linear map along one axis: entry `i` lists the `(source index,
/// weight)` taps that produce output index `i`.
pub type SparseRows = Vec<Vec<(usize, f64)>>;

#[derive(Clone, Copy, Debug)]
enum Unary {
    Abs,
    Sqr,
    Sqrt,
    Log,
    Exp,
    Softplus,
    Sigmoid,
    Tanh,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Unary(Var, Unary),
    LeakyRelu(Var, T),
    Prelu(Var, Var),
    Clamp(Var, T, T),
    ChannelBias(Var, Var),
    Conv {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    Modulate {
        w: Var,
        s: Var,
        inv_norm: Option<Vec<T>>,
    },
    Linear(Var, Var),
    Concat1(Var, Var),
    Narrow1 {
        x: Var,
        start: usize,
    },
    Upsample2x(Var),
    Reshape(Var),
    Tile0(Var, usize),
    Sum(Var),
    Mean(Var),
    MeanPerSample(Var),
    L2Normalize(Var, T),
    Resample {
        x: Var,
        maps: Vec<(SparseRows, SparseRows)>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    grad: bool,
}

type Filter = Box<dyn Fn(&str) -> bool>;

/// Records one forward pass for reverse-mode differentiation.
pub struct Tape<T: Float> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
    trainable: Filter,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Split of a tensor around axis 1: `(outer, axis, inner)`.
fn around_axis1(shape: &[usize]) -> Option<(usize, usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    Some((shape[0], shape[1], shape[2..].iter().product()))
}

fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Float> Tape<T> {
    /// Every parameter pulled onto this tape receives a gradient.
    pub fn new() -> Self {
        Self::with_trainable(|_| true)
    }

    /// Only parameters accepted by `filter` receive gradients; the rest enter
    /// the tape as constants.
    pub fn with_trainable(filter: impl Fn(&str) -> bool + 'static) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
            trainable: Box::new(filter),
        }
    }

    /// A tape that tracks no parameter gradients.
    pub fn inference() -> Self {
        Self::with_trainable(|_| false)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient, e.g. an input being differentiated.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Pulls a named parameter onto the tape; repeated requests share a node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let grad = (self.trainable)(name);
        let v = self.push(value, Op::Leaf, grad);
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err(name, format!("{:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let grad = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let value = self.value(x).map(|v| v * c);
        let grad = self.needs(x);
        self.push(value, Op::Scale(x, c), grad)
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let value = self.value(x).map(|v| v + c);
        let grad = self.needs(x);
        self.push(value, Op::Offset(x), grad)
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(T) -> T = match kind {
            Unary::Abs => |v| v.abs(),
            Unary::Sqr => |v| v * v,
            Unary::Sqrt => |v| v.sqrt(),
            Unary::Log => |v| v.ln(),
            Unary::Exp => |v| v.exp(),
            Unary::Softplus => softplus,
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => |v| v.tanh(),
        };
        let value = self.value(x).map(f);
        let grad = self.needs(x);
        self.push(value, Op::Unary(x, kind), grad)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn sqr(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqr)
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    /// `ln(1 + e^x)`, evaluated without overflow for large `|x|`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::of(slope);
        let value = self
            .value(x)
            .map(|v| if v >= T::zero() { v } else { v * slope });
        let grad = self.needs(x);
        self.push(value, Op::LeakyRelu(x, slope), grad)
    }

    /// PReLU with a single learnable slope (`slope` has one element).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        if self.value(slope).numel() != 1 {
            return shape_err(
                "prelu",
                format!("slope must be scalar, got {:?}", self.shape(slope)),
            );
        }
        let a = self.value(slope).item();
        let value = self
            .value(x)
            .map(|v| if v >= T::zero() { v } else { v * a });
        let grad = self.needs(x) || self.needs(slope);
        Ok(self.push(value, Op::Prelu(x, slope), grad))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        let grad = self.needs(x);
        self.push(value, Op::Clamp(x, lo, hi), grad)
    }

    /// Adds `bias[c]` along axis 1 of `x`.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let Some((outer, c, inner)) = around_axis1(self.shape(x)) else {
            return shape_err("channel_bias", format!("rank < 2: {:?}", self.shape(x)));
        };
        if self.value(bias).numel() != c {
            return shape_err(
                "channel_bias",
                format!("{c} channels vs bias {:?}", self.shape(bias)),
            );
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for (idx, v) in value.data_mut().iter_mut().enumerate() {
            *v += b[(idx / inner) % c];
        }
        debug_assert_eq!(value.numel(), outer * c * inner);
        let grad = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::ChannelBias(x, bias), grad))
    }

    /// 2-D convolution of `x [N,C,H,W]` with `w [O,C,k,k]`, or with
    /// per-sample weights `w [N,O,C,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let call = ConvCall::new(self.value(x), self.value(w), stride, pad)?;
        let data = conv::forward(&call, self.value(x).data(), self.value(w).data());
        let value = Tensor::new(call.out_shape().to_vec(), data)?;
        let grad = self.needs(x) || self.needs(w);
        Ok(self.push(value, Op::Conv { x, w, stride, pad }, grad))
    }

    /// Scales conv weights `w [O,C,k,k]` per sample by `style [N,C]` and, if
    /// `demod_eps` is given, renormalizes every output filter to unit L2 norm.
    /// Returns per-sample weights `[N,O,C,k,k]`.
    pub fn modulate(&mut self, w: Var, style: Var, demod_eps: Option<f64>) -> Result<Var> {
        let (wv, sv) = (self.value(w), self.value(style));
        let [o, c, kh, kw] = wv.shape()[..] else {
            return shape_err(
                "modulate",
                format!("weights must be rank 4, got {:?}", wv.shape()),
            );
        };
        let (n, sc) = sv.dims2()?;
        if sc != c || c == 0 {
            return shape_err(
                "modulate",
                format!("style width {sc} vs {c} input channels"),
            );
        }
        let taps = c * kh * kw;
        let kk = kh * kw;
        let mut out = vec![T::zero(); n * o * taps];
        let mut norms = demod_eps.map(|_| vec![T::one(); n * o]);
        for ni in 0..n {
            for oi in 0..o {
                let dst = &mut out[(ni * o + oi) * taps..(ni * o + oi + 1) * taps];
                for ci in 0..c {
                    let s = sv.data()[ni * c + ci];
                    for t in 0..kk {
                        dst[ci * kk + t] = s * wv.data()[oi * taps + ci * kk + t];
                    }
                }
                if let (Some(eps), Some(norms)) = (demod_eps, norms.as_mut()) {
                    let ss: T = dst.iter().map(|&v| v * v).sum();
                    let d = T::one() / (ss + T::of(eps)).sqrt();
                    dst.iter_mut().for_each(|v| *v *= d);
                    norms[ni * o + oi] = d;
                }
            }
        }
        let value = Tensor::new(vec![n, o, c, kh, kw], out)?;
        let grad = self.needs(w) || self.needs(style);
        Ok(self.push(
            value,
            Op::Modulate {
                w,
                s: style,
                inv_norm: norms,
            },
            grad,
        ))
    }

    /// `x [N,I] · wᵀ` for `w [O,I]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, i) = self.value(x).dims2()?;
        let (o, wi) = self.value(w).dims2()?;
        if wi != i {
            return shape_err(
                "linear",
                format!("input width {i} vs weights {:?}", self.shape(w)),
            );
        }
        let mut out = vec![T::zero(); n * o];
        T::gemm(
            n,
            i,
            o,
            T::one(),
            self.value(x).data(),
            i as isize,
            1,
            self.value(w).data(),
            1,
            i as isize,
            T::zero(),
            &mut out,
            o as isize,
            1,
        );
        let grad = self.needs(x) || self.needs(w);
        Ok(self.push(Tensor::new(vec![n, o], out)?, Op::Linear(x, w), grad))
    }

    /// Concatenates along axis 1.
    pub fn concat1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (Some((na, ca, ia)), Some((nb, cb, ib))) = (around_axis1(&sa), around_axis1(&sb))
        else {
            return shape_err("concat1", "rank < 2");
        };
        if na != nb || ia != ib || sa[2..] != sb[2..] {
            return shape_err("concat1", format!("{sa:?} vs {sb:?}"));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for n in 0..na {
            out.extend_from_slice(&da[n * ca * ia..(n + 1) * ca * ia]);
            out.extend_from_slice(&db[n * cb * ib..(n + 1) * cb * ib]);
        }
        let mut shape = sa.clone();
        shape[1] = ca + cb;
        let grad = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat1(a, b), grad))
    }

    /// Slice `[start, start + len)` along axis 1.
    pub fn narrow1(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((n, c, inner)) = around_axis1(&shape) else {
            return shape_err("narrow1", "rank < 2");
        };
        if start + len > c || len == 0 {
            return shape_err("narrow1", format!("range {start}..{} of {c}", start + len));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * inner);
        for ni in 0..n {
            out.extend_from_slice(&d[(ni * c + start) * inner..(ni * c + start + len) * inner]);
        }
        let mut new_shape = shape;
        new_shape[1] = len;
        let grad = self.needs(x);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::Narrow1 { x, start }, grad))
    }

    /// Nearest-neighbour 2× upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let d = self.value(x).data();
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for p in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[p * 4 * h * w + y * 2 * w + xx] = d[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let grad = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![n, c, 2 * h, 2 * w], out)?,
            Op::Upsample2x(x),
            grad,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let grad = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), grad))
    }

    /// Repeats a `[1, ...]` tensor `n` times along axis 0.
    pub fn tile0(&mut self, x: Var, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&1) || n == 0 {
            return shape_err("tile0", format!("cannot tile {shape:?} {n} times"));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(d.len() * n);
        for _ in 0..n {
            out.extend_from_slice(d);
        }
        let mut new_shape = shape;
        new_shape[0] = n;
        let grad = self.needs(x);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::Tile0(x, n), grad))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let grad = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), grad)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        let grad = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), grad)
    }

    /// Mean over every axis but the first: `[N, ...] -> [N]`.
    pub fn mean_per_sample(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.shape()[0];
        let per = v.numel() / n.max(1);
        let out = v
            .data()
            .chunks(per.max(1))
            .map(|c| c.iter().copied().sum::<T>() / T::of(per as f64))
            .collect();
        let grad = self.needs(x);
        self.push(
            Tensor::new(vec![n], out).expect("row means"),
            Op::MeanPerSample(x),
            grad,
        )
    }

    /// Divides each row of `x [N,D]` by `sqrt(|row|² + eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let eps = T::of(eps);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d.max(1)).take(n) {
            let r = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v = *v / r);
        }
        let grad = self.needs(x);
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::L2Normalize(x, eps), grad))
    }

    /// Separable per-sample resampling of `x [N,C,H,W]`: `maps[n] = (rows,
    /// cols)` give the vertical and horizontal taps for sample `n`.
    pub fn resample(&mut self, x: Var, maps: Vec<(SparseRows, SparseRows)>) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if maps.len() != n || n == 0 {
            return shape_err("resample", format!("{} maps for batch of {n}", maps.len()));
        }
        let (ho, wo) = (maps[0].0.len(), maps[0].1.len());
        for (rows, cols) in &maps {
            let in_range = rows.iter().flatten().all(|&(i, _)| i < h)
                && cols.iter().flatten().all(|&(i, _)| i < w);
            if rows.len() != ho || cols.len() != wo || !in_range {
                return shape_err("resample", "inconsistent or out-of-range taps");
            }
        }
        let d = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        let mut tmp = vec![T::zero(); h * wo];
        for (ni, (rows, cols)) in maps.iter().enumerate() {
            for ci in 0..c {
                let plane = &d[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                for a in 0..h {
                    for (j, taps) in cols.iter().enumerate() {
                        tmp[a * wo + j] = taps
                            .iter()
                            .map(|&(b, wt)| T::of(wt) * plane[a * w + b])
                            .sum();
                    }
                }
                let dst = &mut out[(ni * c + ci) * ho * wo..(ni * c + ci + 1) * ho * wo];
                for (i, taps) in rows.iter().enumerate() {
                    for j in 0..wo {
                        dst[i * wo + j] = taps
                            .iter()
                            .map(|&(a, wt)| T::of(wt) * tmp[a * wo + j])
                            .sum();
                    }
                }
            }
        }
        let grad = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![n, c, ho, wo], out)?,
            Op::Resample { x, maps },
            grad,
        ))
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape().to_vec(), T::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.param_order.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape")
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let d = gd.iter().zip(vb).map(|(&g, &y)| g * y).collect();
                    self.accumulate(grads, *a, self.like(*a, d));
                }
                if self.needs(*b) {
                    let d = gd.iter().zip(va).map(|(&g, &x)| g * x).collect();
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * *c)),
            Op::Offset(x) => self.accumulate(grads, *x, g.clone()),
            Op::Unary(x, kind) => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let d = gd
                    .iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(&g, (&x, &y))| {
                        g * match kind {
                            Unary::Abs => {
                                if x > T::zero() {
                                    T::one()
                                } else if x < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Sqr => x + x,
                            Unary::Sqrt => {
                                if y > T::zero() {
                                    T::of(0.5) / y
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Log => T::one() / x,
                            Unary::Exp => y,
                            Unary::Softplus => sigmoid(x),
                            Unary::Sigmoid => y * (T::one() - y),
                            Unary::Tanh => T::one() - y * y,
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &x)| if x >= T::zero() { g } else { g * *slope })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Prelu(x, slope) => {
                let xv = self.value(*x).data();
                let a = self.value(*slope).item();
                if self.needs(*x) {
                    let d = gd
                        .iter()
                        .zip(xv)
                        .map(|(&g, &x)| if x >= T::zero() { g } else { g * a })
                        .collect();
                    self.accumulate(grads, *x, self.like(*x, d));
                }
                if self.needs(*slope) {
                    let s: T = gd
                        .iter()
                        .zip(xv)
                        .filter(|(_, &x)| x < T::zero())
                        .map(|(&g, &x)| g * x)
                        .sum();
                    self.accumulate(grads, *slope, self.like(*slope, vec![s]));
                }
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::ChannelBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*bias) {
                    let (_, c, inner) = around_axis1(g.shape()).expect("rank checked in forward");
                    let mut db = vec![T::zero(); c];
                    for (idx, &v) in gd.iter().enumerate() {
                        db[(idx / inner) % c] += v;
                    }
                    self.accumulate(grads, *bias, self.like(*bias, db));
                }
            }
            Op::Conv { x, w, stride, pad } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let call = ConvCall::new(xv, wv, *stride, *pad)?;
                let (dx, dw) = conv::backward(
                    &call,
                    xv.data(),
                    wv.data(),
                    gd,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, self.like(*w, dw));
                }
            }
            Op::Modulate { w, s, inv_norm } => {
                let (wv, sv) = (self.value(*w), self.value(*s));
                let [o, c, kh, kw] = wv.shape()[..] else {
                    unreachable!("checked in forward")
                };
                let n = sv.shape()[0];
                let kk = kh * kw;
                let taps = c * kk;
                let mut dw = vec![T::zero(); wv.numel()];
                let mut ds = vec![T::zero(); sv.numel()];
                let mut ga = vec![T::zero(); taps];
                for ni in 0..n {
                    for oi in 0..o {
                        let base = (ni * o + oi) * taps;
                        let gslice = &gd[base..base + taps];
                        let pre = |ci: usize, t: usize| {
                            sv.data()[ni * c + ci] * wv.data()[oi * taps + ci * kk + t]
                        };
                        match inv_norm {
                            Some(norms) => {
                                let d = norms[ni * o + oi];
                                let mut dot = T::zero();
                                for ci in 0..c {
                                    for t in 0..kk {
                                        dot += gslice[ci * kk + t] * pre(ci, t);
                                    }
                                }
                                let d3 = d * d * d * dot;
                                for ci in 0..c {
                                    for t in 0..kk {
                                        ga[ci * kk + t] = d * gslice[ci * kk + t] - d3 * pre(ci, t);
                                    }
                                }
                            }
                            None => ga.copy_from_slice(gslice),
                        }
                        for ci in 0..c {
                            let sc = sv.data()[ni * c + ci];
                            for t in 0..kk {
                                let gv = ga[ci * kk + t];
                                dw[oi * taps + ci * kk + t] += gv * sc;
                                ds[ni * c + ci] += gv * wv.data()[oi * taps + ci * kk + t];
                            }
                        }
                    }
                }
                self.accumulate(grads, *w, self.like(*w, dw));
                self.accumulate(grads, *s, self.like(*s, ds));
            }
            Op::Linear(x, w) => {
                let (n, i) = self.value(*x).dims2()?;
                let (o, _) = self.value(*w).dims2()?;
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * i];
                    T::gemm(
                        n,
                        o,
                        i,
                        T::one(),
                        gd,
                        o as isize,
                        1,
                        self.value(*w).data(),
                        i as isize,
                        1,
                        T::zero(),
                        &mut dx,
                        i as isize,
                        1,
                    );
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); o * i];
                    T::gemm(
                        o,
                        n,
                        i,
                        T::one(),
                        gd,
                        1,
                        o as isize,
                        self.value(*x).data(),
                        i as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        i as isize,
                        1,
                    );
                    self.accumulate(grads, *w, self.like(*w, dw));
                }
            }
            Op::Concat1(a, b) => {
                let (n, ca, inner) = around_axis1(self.shape(*a)).expect("rank checked");
                let cb = self.shape(*b)[1];
                let mut da = Vec::with_capacity(n * ca * inner);
                let mut db = Vec::with_capacity(n * cb * inner);
                for ni in 0..n {
                    let row = &gd[ni * (ca + cb) * inner..(ni + 1) * (ca + cb) * inner];
                    da.extend_from_slice(&row[..ca * inner]);
                    db.extend_from_slice(&row[ca * inner..]);
                }
                self.accumulate(grads, *a, self.like(*a, da));
                self.accumulate(grads, *b, self.like(*b, db));
            }
            Op::Narrow1 { x, start } => {
                let (n, c, inner) = around_axis1(self.shape(*x)).expect("rank checked");
                let len = node.value.shape()[1];
                let mut dx = vec![T::zero(); n * c * inner];
                for ni in 0..n {
                    dx[(ni * c + start) * inner..(ni * c + start + len) * inner]
                        .copy_from_slice(&gd[ni * len * inner..(ni + 1) * len * inner]);
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Upsample2x(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let mut dx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[p * h * w + (y / 2) * w + xx / 2] +=
                                gd[p * 4 * h * w + y * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Tile0(x, n) => {
                let per = gd.len() / n;
                let mut d = vec![T::zero(); per];
                for chunk in gd.chunks(per) {
                    d.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b);
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, self.like(*x, gd.to_vec()));
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, self.like(*x, vec![gd[0]; n]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let v = gd[0] / T::of(n as f64);
                self.accumulate(grads, *x, self.like(*x, vec![v; n]));
            }
            Op::MeanPerSample(x) => {
                let v = self.value(*x);
                let per = v.numel() / v.shape()[0].max(1);
                let scale = T::one() / T::of(per as f64);
                let d = (0..v.numel()).map(|i| gd[i / per] * scale).collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::L2Normalize(x, eps) => {
                let (_, d) = self.value(*x).dims2()?;
                let xv = self.value(*x).data();
                let mut dx = vec![T::zero(); xv.len()];
                for ((xr, gr), dr) in xv.chunks(d).zip(gd.chunks(d)).zip(dx.chunks_mut(d)) {
                    let r = (xr.iter().map(|&v| v * v).sum::<T>() + *eps).sqrt();
                    let dot: T = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    let r3 = r * r * r;
                    for ((o, &xi), &gi) in dr.iter_mut().zip(xr).zip(gr) {
                        *o = gi / r - xi * dot / r3;
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Resample { x, maps } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (ho, wo) = (maps[0].0.len(), maps[0].1.len());
                let mut dx = vec![T::zero(); n * c * h * w];
                let mut gtmp = vec![T::zero(); h * wo];
                for (ni, (rows, cols)) in maps.iter().enumerate() {
                    for ci in 0..c {
                        let gplane = &gd[(ni * c + ci) * ho * wo..(ni * c + ci + 1) * ho * wo];
                        gtmp.fill(T::zero());
                        for (i, taps) in rows.iter().enumerate() {
                            for &(a, wt) in taps {
                                let wt = T::of(wt);
                                for j in 0..wo {
                                    gtmp[a * wo + j] += wt * gplane[i * wo + j];
                                }
                            }
                        }
                        let dplane = &mut dx[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                        for a in 0..h {
                            for (j, taps) in cols.iter().enumerate() {
                                let gv = gtmp[a * wo + j];
                                for &(b, wt) in taps {
                                    dplane[a * w + b] += T::of(wt) * gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
        }
        Ok(())
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(String, Var)>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a named parameter, if it was trainable and reached.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.get(*v))
    }

    /// `(name, gradient)` for every parameter that received one, in the
    /// order parameters were first pulled onto the tape.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|(n, v)| self.get(*v).map(|g| (n.as_str(), g)))
    }
}
