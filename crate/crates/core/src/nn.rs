//! Minimal layer library with hand-written backward passes.
//!
//! Layers operate on one sample at a time ([`Tensor`] is `C x H x W`);
//! batching happens in the trainer. Weights live in [`ModelParams`] and
//! layers refer to them by index, so one parameter set can be evaluated
//! concurrently from many threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::Geometry(format!(
                "tensor {c}x{h}x{w} given {} values",
                data.len()
            )));
        }
        Ok(Tensor { c, h, w, data })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    fn plane_len(&self) -> usize {
        self.h * self.w
    }

    fn add_assign(&mut self, other: &Tensor<T>) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Named weight tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Zero-mean normal with standard deviation `sqrt(2 / fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Collects parameter declarations while a network is being laid out.
#[derive(Default, Debug)]
pub(crate) struct ParamBuilder {
    pub specs: Vec<ParamSpec>,
}

impl ParamBuilder {
    pub fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }
}

/// Weights of one network plus the seed and architecture fingerprint they
/// were created with.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub tensors: Vec<NamedTensor<T>>,
    pub seed: u64,
    pub fingerprint: u64,
}

impl<T: Scalar> ModelParams<T> {
    pub(crate) fn init(specs: &[ParamSpec], seed: u64, fingerprint: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::FanIn(fan_in) => {
                        let std = (2.0 / fan_in.max(1) as f64).sqrt();
                        let normal = Normal::new(0.0, std).expect("positive std");
                        (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect()
                    }
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                };
                NamedTensor {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    data,
                }
            })
            .collect();
        ModelParams {
            tensors,
            seed,
            fingerprint,
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros_like(&self) -> Grads<T> {
        Grads(self.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    #[inline]
    pub(crate) fn get(&self, id: usize) -> &[T] {
        &self.tensors[id].data
    }

    pub(crate) fn check_specs(&self, specs: &[ParamSpec]) -> Result<()> {
        if self.tensors.len() != specs.len()
            || self.tensors.iter().zip(specs).any(|(t, s)| t.shape != s.shape || t.name != s.name)
        {
            return Err(Error::Geometry("parameter tensors do not match the architecture".into()));
        }
        Ok(())
    }
}

/// Gradient buffers laid out like [`ModelParams::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T>(pub Vec<Vec<T>>);

impl<T: Scalar> Grads<T> {
    pub fn add(&mut self, other: &Grads<T>) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in self.0.iter_mut().flatten() {
            *v *= s;
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.k) / self.stride + 1
    }
}

/// Unfolds `x` (`c x h x w`) into `(c·k·k) x (oh·ow)` columns.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, g: ConvGeom, oh: usize, ow: usize) -> Vec<T> {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let cols_n = oh * ow;
    let mut cols = vec![T::zero(); c * k * k * cols_n];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * cols_n;
                for oy in 0..oh {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s) as isize + kx as isize - p;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates columns back onto the `c x h x w` grid.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, g: ConvGeom, oh: usize, ow: usize) -> Vec<T> {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let cols_n = oh * ow;
    let mut x = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * cols_n;
                for oy in 0..oh {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * s) as isize + kx as isize - p;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2-D convolution, weight `[out, in, k, k]`.
#[derive(Clone, Debug)]
pub(crate) struct Conv {
    in_c: usize,
    out_c: usize,
    geom: ConvGeom,
    weight: usize,
    bias: Option<usize>,
}

impl Conv {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_c: usize, out_c: usize, k: usize, stride: usize, bias: bool) -> Self {
        let fan_in = in_c * k * k;
        let weight = pb.add(format!("{name}.weight"), vec![out_c, in_c, k, k], Init::FanIn(fan_in));
        let bias = bias.then(|| pb.add(format!("{name}.bias"), vec![out_c], Init::Zeros));
        Conv {
            in_c,
            out_c,
            geom: ConvGeom { k, stride, pad: k / 2 },
            weight,
            bias,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (self.geom.out_len(h), self.geom.out_len(w))
    }
}

/// Transposed convolution with kernel `2s` and padding `s/2` (or kernel 3,
/// padding 1 at stride 1), so the output is exactly `s` times the input.
/// Weight `[in, out, k, k]`.
#[derive(Clone, Debug)]
pub(crate) struct ConvT {
    in_c: usize,
    out_c: usize,
    geom: ConvGeom,
    weight: usize,
    bias: Option<usize>,
}

impl ConvT {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_c: usize, out_c: usize, stride: usize, bias: bool) -> Self {
        let (k, pad) = if stride == 1 { (3, 1) } else { (2 * stride, stride / 2) };
        // each output pixel receives in_c * (k / stride)^2 contributions
        let fan_in = in_c * (k / stride).pow(2);
        let weight = pb.add(format!("{name}.weight"), vec![in_c, out_c, k, k], Init::FanIn(fan_in));
        let bias = bias.then(|| pb.add(format!("{name}.bias"), vec![out_c], Init::Zeros));
        ConvT {
            in_c,
            out_c,
            geom: ConvGeom { k, stride, pad },
            weight,
            bias,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let g = self.geom;
        let f = |n: usize| ((n - 1) * g.stride + g.k).saturating_sub(2 * g.pad);
        (f(h), f(w))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct InstanceNorm {
    c: usize,
    gamma: usize,
    beta: usize,
}

pub(crate) const NORM_EPS: f64 = 1e-5;

impl InstanceNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, c: usize) -> Self {
        InstanceNorm {
            c,
            gamma: pb.add(format!("{name}.gamma"), vec![c], Init::Ones),
            beta: pb.add(format!("{name}.beta"), vec![c], Init::Zeros),
        }
    }
}

/// Per-channel normalization to zero mean and unit variance, returning the
/// normalized values and the inverse standard deviations.
pub(crate) fn normalize<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let n = x.plane_len();
    let nt = T::lit(n as f64);
    let eps = T::lit(NORM_EPS);
    let mut xhat = vec![T::zero(); x.data.len()];
    let mut inv = Vec::with_capacity(x.c);
    for ch in 0..x.c {
        let src = &x.data[ch * n..(ch + 1) * n];
        let mean = src.iter().copied().sum::<T>() / nt;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
        let is = T::one() / (var + eps).sqrt();
        for (d, &v) in xhat[ch * n..(ch + 1) * n].iter_mut().zip(src) {
            *d = (v - mean) * is;
        }
        inv.push(is);
    }
    (xhat, inv)
}

#[derive(Clone, Debug)]
pub(crate) enum Layer {
    Conv(Conv),
    ConvT(ConvT),
    Norm(InstanceNorm),
    Relu,
    Sigmoid,
    /// `x + body(x)`.
    Residual(Seq),
}

#[derive(Clone, Debug, Default)]
pub(crate) struct Seq(pub Vec<Layer>);

/// Per-layer state saved by the forward pass.
#[derive(Clone, Debug)]
pub(crate) enum Cache<T> {
    Cols(Vec<T>),
    Input(Tensor<T>),
    Norm { xhat: Vec<T>, inv_std: Vec<T> },
    Output(Tensor<T>),
    Residual(Trace<T>),
}

/// Forward trace of a [`Seq`]: one cache per layer plus the input shape.
#[derive(Clone, Debug)]
pub(crate) struct Trace<T> {
    input_shape: (usize, usize, usize),
    caches: Vec<Cache<T>>,
}

impl Layer {
    pub fn out_shape(&self, (c, h, w): (usize, usize, usize)) -> (usize, usize, usize) {
        match self {
            Layer::Conv(l) => {
                let (oh, ow) = l.out_hw(h, w);
                (l.out_c, oh, ow)
            }
            Layer::ConvT(l) => {
                let (oh, ow) = l.out_hw(h, w);
                (l.out_c, oh, ow)
            }
            Layer::Norm(_) | Layer::Relu | Layer::Sigmoid => (c, h, w),
            Layer::Residual(s) => s.out_shape((c, h, w)),
        }
    }

    fn in_channels(&self) -> Option<usize> {
        match self {
            Layer::Conv(l) => Some(l.in_c),
            Layer::ConvT(l) => Some(l.in_c),
            Layer::Norm(l) => Some(l.c),
            _ => None,
        }
    }

    fn forward<T: Scalar>(&self, p: &ModelParams<T>, x: Tensor<T>) -> (Tensor<T>, Cache<T>) {
        match self {
            Layer::Conv(l) => {
                let (oh, ow) = l.out_hw(x.h, x.w);
                let cols = im2col(&x.data, x.c, x.h, x.w, l.geom, oh, ow);
                let ckk = l.in_c * l.geom.k * l.geom.k;
                let npix = oh * ow;
                let mut y = vec![T::zero(); l.out_c * npix];
                if let Some(b) = l.bias {
                    for (o, &bv) in p.get(b).iter().enumerate() {
                        y[o * npix..(o + 1) * npix].fill(bv);
                    }
                }
                let beta = if l.bias.is_some() { T::one() } else { T::zero() };
                T::gemm(l.out_c, ckk, npix, T::one(), p.get(l.weight), ckk, 1, &cols, npix, 1, beta, &mut y, npix, 1);
                (Tensor { c: l.out_c, h: oh, w: ow, data: y }, Cache::Cols(cols))
            }
            Layer::ConvT(l) => {
                let (oh, ow) = l.out_hw(x.h, x.w);
                let okk = l.out_c * l.geom.k * l.geom.k;
                let npix = x.h * x.w;
                let mut cols = vec![T::zero(); okk * npix];
                // cols = W^T x, W stored [in, out*k*k]
                T::gemm(okk, l.in_c, npix, T::one(), p.get(l.weight), 1, okk, &x.data, npix, 1, T::zero(), &mut cols, npix, 1);
                let mut y = col2im(&cols, l.out_c, oh, ow, l.geom, x.h, x.w);
                if let Some(b) = l.bias {
                    let n = oh * ow;
                    for (o, &bv) in p.get(b).iter().enumerate() {
                        for v in &mut y[o * n..(o + 1) * n] {
                            *v += bv;
                        }
                    }
                }
                (Tensor { c: l.out_c, h: oh, w: ow, data: y }, Cache::Input(x))
            }
            Layer::Norm(l) => {
                let (xhat, inv_std) = normalize(&x);
                let n = x.plane_len();
                let (g, b) = (p.get(l.gamma), p.get(l.beta));
                let mut y = xhat.clone();
                for ch in 0..x.c {
                    for v in &mut y[ch * n..(ch + 1) * n] {
                        *v = *v * g[ch] + b[ch];
                    }
                }
                (Tensor { data: y, ..x }, Cache::Norm { xhat, inv_std })
            }
            Layer::Relu => {
                let mut y = x;
                for v in &mut y.data {
                    *v = v.max(T::zero());
                }
                (y.clone(), Cache::Output(y))
            }
            Layer::Sigmoid => {
                let mut y = x;
                for v in &mut y.data {
                    *v = T::one() / (T::one() + (-*v).exp());
                }
                (y.clone(), Cache::Output(y))
            }
            Layer::Residual(body) => {
                let (mut y, trace) = body.forward(p, x.clone());
                y.add_assign(&x);
                (y, Cache::Residual(trace))
            }
        }
    }

    /// Returns the input gradient when `need_dx`; accumulates parameter
    /// gradients into `grads` when given.
    fn backward<T: Scalar>(
        &self,
        p: &ModelParams<T>,
        in_shape: (usize, usize, usize),
        cache: &Cache<T>,
        dy: Tensor<T>,
        mut grads: Option<&mut Grads<T>>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let (ic, ih, iw) = in_shape;
        match (self, cache) {
            (Layer::Conv(l), Cache::Cols(cols)) => {
                let ckk = l.in_c * l.geom.k * l.geom.k;
                let npix = dy.h * dy.w;
                if let Some(g) = grads.as_deref_mut() {
                    T::gemm(l.out_c, npix, ckk, T::one(), &dy.data, npix, 1, cols, 1, npix, T::one(), &mut g.0[l.weight], ckk, 1);
                    if let Some(b) = l.bias {
                        for (o, gb) in g.0[b].iter_mut().enumerate() {
                            *gb += dy.data[o * npix..(o + 1) * npix].iter().copied().sum::<T>();
                        }
                    }
                }
                need_dx.then(|| {
                    let mut dcols = vec![T::zero(); ckk * npix];
                    T::gemm(ckk, l.out_c, npix, T::one(), p.get(l.weight), 1, ckk, &dy.data, npix, 1, T::zero(), &mut dcols, npix, 1);
                    let dx = col2im(&dcols, ic, ih, iw, l.geom, dy.h, dy.w);
                    Tensor { c: ic, h: ih, w: iw, data: dx }
                })
            }
            (Layer::ConvT(l), Cache::Input(x)) => {
                let okk = l.out_c * l.geom.k * l.geom.k;
                let npix = ih * iw;
                let dcols = im2col(&dy.data, l.out_c, dy.h, dy.w, l.geom, ih, iw);
                if let Some(g) = grads.as_deref_mut() {
                    // dW[in, okk] += x[in, npix] . dcols^T
                    T::gemm(l.in_c, npix, okk, T::one(), &x.data, npix, 1, &dcols, 1, npix, T::one(), &mut g.0[l.weight], okk, 1);
                    if let Some(b) = l.bias {
                        let n = dy.h * dy.w;
                        for (o, gb) in g.0[b].iter_mut().enumerate() {
                            *gb += dy.data[o * n..(o + 1) * n].iter().copied().sum::<T>();
                        }
                    }
                }
                need_dx.then(|| {
                    let mut dx = vec![T::zero(); l.in_c * npix];
                    T::gemm(l.in_c, okk, npix, T::one(), p.get(l.weight), okk, 1, &dcols, npix, 1, T::zero(), &mut dx, npix, 1);
                    Tensor { c: ic, h: ih, w: iw, data: dx }
                })
            }
            (Layer::Norm(l), Cache::Norm { xhat, inv_std }) => {
                let n = ih * iw;
                let nt = T::lit(n as f64);
                let gamma = p.get(l.gamma);
                if let Some(g) = grads.as_deref_mut() {
                    for ch in 0..ic {
                        let dys = &dy.data[ch * n..(ch + 1) * n];
                        let xs = &xhat[ch * n..(ch + 1) * n];
                        g.0[l.gamma][ch] += dys.iter().zip(xs).map(|(&a, &b)| a * b).sum::<T>();
                        g.0[l.beta][ch] += dys.iter().copied().sum::<T>();
                    }
                }
                need_dx.then(|| {
                    let mut dx = vec![T::zero(); ic * n];
                    for ch in 0..ic {
                        let dys = &dy.data[ch * n..(ch + 1) * n];
                        let xs = &xhat[ch * n..(ch + 1) * n];
                        let sum_d = dys.iter().copied().sum::<T>() * gamma[ch];
                        let sum_dx = dys.iter().zip(xs).map(|(&a, &b)| a * b).sum::<T>() * gamma[ch];
                        let k = inv_std[ch] / nt;
                        for i in 0..n {
                            let dxh = dys[i] * gamma[ch];
                            dx[ch * n + i] = k * (nt * dxh - sum_d - xs[i] * sum_dx);
                        }
                    }
                    Tensor { c: ic, h: ih, w: iw, data: dx }
                })
            }
            (Layer::Relu, Cache::Output(y)) => need_dx.then(|| {
                let mut dx = dy;
                for (d, &v) in dx.data.iter_mut().zip(&y.data) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                dx
            }),
            (Layer::Sigmoid, Cache::Output(y)) => need_dx.then(|| {
                let mut dx = dy;
                for (d, &v) in dx.data.iter_mut().zip(&y.data) {
                    *d *= v * (T::one() - v);
                }
                dx
            }),
            (Layer::Residual(body), Cache::Residual(trace)) => {
                let skip = dy.clone();
                let inner = body.backward(p, trace, dy, grads, true);
                need_dx.then(|| {
                    let mut dx = inner.expect("requested");
                    dx.add_assign(&skip);
                    dx
                })
            }
            _ => unreachable!("cache does not belong to this layer"),
        }
    }
}

impl Seq {
    pub fn out_shape(&self, mut shape: (usize, usize, usize)) -> (usize, usize, usize) {
        for l in &self.0 {
            shape = l.out_shape(shape);
        }
        shape
    }

    pub fn forward<T: Scalar>(&self, p: &ModelParams<T>, x: Tensor<T>) -> (Tensor<T>, Trace<T>) {
        let input_shape = x.shape();
        let mut caches = Vec::with_capacity(self.0.len());
        let mut cur = x;
        for l in &self.0 {
            debug_assert!(l.in_channels().is_none_or(|c| c == cur.c));
            let (y, cache) = l.forward(p, cur);
            caches.push(cache);
            cur = y;
        }
        (cur, Trace { input_shape, caches })
    }

    /// Forward pass without keeping caches.
    pub fn eval<T: Scalar>(&self, p: &ModelParams<T>, x: Tensor<T>) -> Tensor<T> {
        let mut cur = x;
        for l in &self.0 {
            cur = l.forward(p, cur).0;
        }
        cur
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ModelParams<T>,
        trace: &Trace<T>,
        dy: Tensor<T>,
        mut grads: Option<&mut Grads<T>>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let mut shapes = Vec::with_capacity(self.0.len());
        let mut s = trace.input_shape;
        for l in &self.0 {
            shapes.push(s);
            s = l.out_shape(s);
        }
        let mut cur = dy;
        for (i, l) in self.0.iter().enumerate().rev() {
            let want = need_dx || i > 0;
            cur = l.backward(p, shapes[i], &trace.caches[i], cur, grads.as_deref_mut(), want)?;
        }
        Some(cur)
    }
}
