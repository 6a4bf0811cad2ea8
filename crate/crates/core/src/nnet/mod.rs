//! A small feed-forward engine: dense, 2D convolution, max pooling, ReLU,
//! inverted dropout and an identity output layer, trained with ADAM on the
//! batch-mean squared error.
//!
//! Activations are batched row-major tensors `[N, ...sample_shape]`. Conv
//! layers use `[C, H, W]` samples, valid padding and square kernels.

mod adam;
mod io;
mod scalar;

pub use adam::AdamState;
pub use io::{decode_network, encode_network, load_network, save_network, MAGIC as NNET_MAGIC};
pub use scalar::Scalar;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize },
    Maxpool2d { kernel: usize },
    Relu,
    Dropout { p: f64 },
    Linear,
}

impl LayerSpec {
    /// Output sample shape for the given input sample shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let numel: usize = input.iter().product();
        let bad = |why: String| Err(Error::ShapeMismatch(format!("{self:?}: {why}")));
        match *self {
            LayerSpec::Dense { input: i, output: o } => {
                if i == 0 || o == 0 {
                    return bad("dims must be positive".into());
                }
                if numel != i {
                    return bad(format!("expects {i} inputs, got shape {input:?}"));
                }
                Ok(vec![o])
            }
            LayerSpec::Conv2d { in_ch, out_ch, kernel, stride } => {
                if in_ch == 0 || out_ch == 0 || kernel == 0 || !(1..=2).contains(&stride) {
                    return bad("channels and kernel must be positive, stride 1 or 2".into());
                }
                match *input {
                    [c, h, w] if c == in_ch && h >= kernel && w >= kernel => {
                        Ok(vec![out_ch, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
                    }
                    _ => bad(format!("needs [{in_ch}, H>={kernel}, W>={kernel}], got {input:?}")),
                }
            }
            LayerSpec::Maxpool2d { kernel } => match *input {
                [c, h, w] if kernel > 0 && h >= kernel && w >= kernel => Ok(vec![c, h / kernel, w / kernel]),
                _ => bad(format!("needs [C, H, W] at least {kernel} wide, got {input:?}")),
            },
            LayerSpec::Dropout { p } if !(0.0..1.0).contains(&p) => bad(format!("p={p} outside [0, 1)")),
            LayerSpec::Relu | LayerSpec::Dropout { .. } | LayerSpec::Linear => Ok(input.to_vec()),
        }
    }

    pub fn param_lens(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense { input, output } => (input.saturating_mul(output), output),
            LayerSpec::Conv2d { in_ch, out_ch, kernel, .. } => (
                out_ch.saturating_mul(in_ch).saturating_mul(kernel).saturating_mul(kernel),
                out_ch,
            ),
            _ => (0, 0),
        }
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense { input, output } => (input, output),
            LayerSpec::Conv2d { in_ch, out_ch, kernel, .. } => (in_ch * kernel * kernel, out_ch * kernel * kernel),
            _ => (0, 0),
        }
    }
}

/// Weights and bias of one layer; both empty for parameter-free layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<S> {
    pub w: Vec<S>,
    pub b: Vec<S>,
}

impl<S: Scalar> Params<S> {
    fn zeros_like(other: &Params<S>) -> Self {
        Params {
            w: vec![S::zero(); other.w.len()],
            b: vec![S::zero(); other.b.len()],
        }
    }
}

pub type Grads<S> = Vec<Params<S>>;

#[derive(Debug, Clone)]
pub struct Network<S: Scalar = f32> {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<Params<S>>,
    pub seed: u64,
    shapes: Vec<Vec<usize>>,
    rng: Rng,
}

enum Cache<S> {
    Input(Vec<S>),
    Conv(Vec<S>),
    Pool(Vec<usize>),
    Mask(Vec<S>),
    None,
}

impl<S: Scalar> Network<S> {
    /// Builds a network with uniform Glorot weights and zero biases.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let shapes = Self::infer_shapes(&input_shape, &layers)?;
        let mut rng = seed::rng_for(seed, "nnet-init");
        let params = layers
            .iter()
            .map(|l| {
                let (nw, nb) = l.param_lens();
                let (fi, fo) = l.fans();
                let w = if nw > 0 {
                    let a = (6.0 / (fi + fo) as f64).sqrt();
                    let u = Uniform::new(-a, a).expect("positive bound");
                    (0..nw).map(|_| S::of(u.sample(&mut rng))).collect()
                } else {
                    Vec::new()
                };
                Params { w, b: vec![S::zero(); nb] }
            })
            .collect();
        Ok(Self {
            input_shape,
            layers,
            params,
            seed,
            shapes,
            rng: seed::rng_for(seed, "nnet-train"),
        })
    }

    /// Builds a network around existing parameters.
    pub fn with_params(input_shape: Vec<usize>, layers: Vec<LayerSpec>, params: Vec<Params<S>>, seed: u64) -> Result<Self> {
        let mut net = Self::new(input_shape, layers, seed)?;
        if params.len() != net.params.len()
            || params
                .iter()
                .zip(&net.params)
                .any(|(a, b)| a.w.len() != b.w.len() || a.b.len() != b.b.len())
        {
            return Err(Error::ShapeMismatch("parameter sizes do not match layers".into()));
        }
        net.params = params;
        Ok(net)
    }

    fn infer_shapes(input: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
        if input.is_empty()
            || input.contains(&0)
            || input.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).is_none()
        {
            return Err(Error::ShapeMismatch(format!("invalid input shape {input:?}")));
        }
        let mut shapes = vec![input.to_vec()];
        for l in layers {
            let next = l.output_shape(shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.shapes.last().expect("non-empty").iter().product()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.w.len() + p.b.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads<S> {
        self.params.iter().map(Params::zeros_like).collect()
    }

    fn batch_size(&self, input: &[S]) -> Result<usize> {
        let n = self.input_len();
        if input.is_empty() || input.len() % n != 0 {
            return Err(Error::ShapeMismatch(format!(
                "input of length {} is not a batch of {n}-value samples",
                input.len()
            )));
        }
        Ok(input.len() / n)
    }

    /// Batched forward pass. Dropout is active only in `train_mode`, with
    /// masks drawn from the network's generator.
    pub fn forward(&mut self, input: &[S], train_mode: bool) -> Result<Vec<S>> {
        Ok(self.forward_cached(input, train_mode)?.0)
    }

    /// Inference-mode forward pass; a pure function of the parameters.
    pub fn predict(&self, input: &[S]) -> Result<Vec<S>> {
        let n = self.batch_size(input)?;
        let mut x = input.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            x = self.layer_forward(i, l, x, n, false, None).0;
        }
        Ok(x)
    }

    fn forward_cached(&mut self, input: &[S], train_mode: bool) -> Result<(Vec<S>, Vec<Cache<S>>)> {
        let n = self.batch_size(input)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.to_vec();
        let mut rng = self.rng.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let (y, c) = self.layer_forward(i, l, x, n, train_mode, Some(&mut rng));
            caches.push(c);
            x = y;
        }
        self.rng = rng;
        Ok((x, caches))
    }

    fn layer_forward(&self, i: usize, l: &LayerSpec, x: Vec<S>, n: usize, train: bool, rng: Option<&mut Rng>) -> (Vec<S>, Cache<S>) {
        let in_shape = &self.shapes[i];
        let out_shape = &self.shapes[i + 1];
        let p = &self.params[i];
        match *l {
            LayerSpec::Dense { input, output } => {
                let mut y = Vec::with_capacity(n * output);
                for _ in 0..n {
                    y.extend_from_slice(&p.b);
                }
                S::gemm(n, input, output, &x, false, &p.w, true, S::one(), &mut y);
                (y, Cache::Input(x))
            }
            LayerSpec::Conv2d { in_ch, out_ch, kernel, stride } => {
                let (h, w) = (in_shape[1], in_shape[2]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let kk = in_ch * kernel * kernel;
                let pix = oh * ow;
                let mut y = vec![S::zero(); n * out_ch * pix];
                let mut cols_all = Vec::with_capacity(n * kk * pix);
                for s in 0..n {
                    let xs = &x[s * in_ch * h * w..(s + 1) * in_ch * h * w];
                    let cols = im2col(xs, in_ch, h, w, kernel, stride, oh, ow);
                    let ys = &mut y[s * out_ch * pix..(s + 1) * out_ch * pix];
                    for (c, row) in ys.chunks_mut(pix).enumerate() {
                        row.fill(p.b[c]);
                    }
                    S::gemm(out_ch, kk, pix, &p.w, false, &cols, false, S::one(), ys);
                    cols_all.extend_from_slice(&cols);
                }
                (y, Cache::Conv(cols_all))
            }
            LayerSpec::Maxpool2d { kernel } => {
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let mut y = Vec::with_capacity(n * c * oh * ow);
                let mut arg = Vec::with_capacity(n * c * oh * ow);
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = base + oy * kernel * w + ox * kernel;
                            for dy in 0..kernel {
                                for dx in 0..kernel {
                                    let j = base + (oy * kernel + dy) * w + ox * kernel + dx;
                                    if x[j] > x[best] {
                                        best = j;
                                    }
                                }
                            }
                            y.push(x[best]);
                            arg.push(best);
                        }
                    }
                }
                (y, Cache::Pool(arg))
            }
            LayerSpec::Relu => {
                let y = x.iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
                (y, Cache::Input(x))
            }
            LayerSpec::Dropout { p } if train && p > 0.0 => {
                let rng = rng.expect("training forward carries a generator");
                let keep = S::of(1.0 / (1.0 - p));
                let mask: Vec<S> = (0..x.len())
                    .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
                    .collect();
                let y = x.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
                (y, Cache::Mask(mask))
            }
            LayerSpec::Dropout { .. } | LayerSpec::Linear => (x, Cache::None),
        }
    }

    /// Loss (batch mean of squared L2 errors) and its gradient with respect
    /// to every parameter. Dropout stays active when `train_mode` is set.
    pub fn loss_and_grads(&mut self, input: &[S], target: &[S], train_mode: bool) -> Result<(f64, Grads<S>)> {
        let n = self.batch_size(input)?;
        let out_len = self.output_len();
        if target.len() != n * out_len {
            return Err(Error::ShapeMismatch(format!(
                "target has {} values, expected {}",
                target.len(),
                n * out_len
            )));
        }
        let (y, caches) = self.forward_cached(input, train_mode)?;
        let mut loss = 0.0;
        let scale = S::of(2.0 / n as f64);
        let mut dy: Vec<S> = y
            .iter()
            .zip(target)
            .map(|(&a, &t)| {
                let d = a - t;
                loss += d.f64() * d.f64();
                scale * d
            })
            .collect();
        loss /= n as f64;

        let mut grads = self.zero_grads();
        for i in (0..self.layers.len()).rev() {
            dy = self.layer_backward(i, &caches[i], dy, n, &mut grads[i]);
        }
        Ok((loss, grads))
    }

    /// Deterministic (inference-mode) loss and gradients.
    pub fn backward(&mut self, input: &[S], target: &[S]) -> Result<(f64, Grads<S>)> {
        self.loss_and_grads(input, target, false)
    }

    fn layer_backward(&self, i: usize, cache: &Cache<S>, dy: Vec<S>, n: usize, g: &mut Params<S>) -> Vec<S> {
        let in_shape = &self.shapes[i];
        let out_shape = &self.shapes[i + 1];
        let p = &self.params[i];
        match (self.layers[i], cache) {
            (LayerSpec::Dense { input, output }, Cache::Input(x)) => {
                S::gemm(output, n, input, &dy, true, x, false, S::zero(), &mut g.w);
                for row in dy.chunks(output) {
                    for (b, &d) in g.b.iter_mut().zip(row) {
                        *b += d;
                    }
                }
                let mut dx = vec![S::zero(); n * input];
                S::gemm(n, output, input, &dy, false, &p.w, false, S::zero(), &mut dx);
                dx
            }
            (LayerSpec::Conv2d { in_ch, out_ch, kernel, stride }, Cache::Conv(cols_all)) => {
                let (h, w) = (in_shape[1], in_shape[2]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let kk = in_ch * kernel * kernel;
                let pix = oh * ow;
                let mut dx = vec![S::zero(); n * in_ch * h * w];
                let mut dcols = vec![S::zero(); kk * pix];
                for s in 0..n {
                    let dys = &dy[s * out_ch * pix..(s + 1) * out_ch * pix];
                    let cols = &cols_all[s * kk * pix..(s + 1) * kk * pix];
                    S::gemm(out_ch, pix, kk, dys, false, cols, true, S::one(), &mut g.w);
                    for (c, row) in dys.chunks(pix).enumerate() {
                        g.b[c] += row.iter().copied().sum::<S>();
                    }
                    S::gemm(kk, out_ch, pix, &p.w, true, dys, false, S::zero(), &mut dcols);
                    col2im(&dcols, in_ch, h, w, kernel, stride, oh, ow, &mut dx[s * in_ch * h * w..(s + 1) * in_ch * h * w]);
                }
                dx
            }
            (LayerSpec::Maxpool2d { .. }, Cache::Pool(arg)) => {
                let mut dx = vec![S::zero(); n * in_shape.iter().product::<usize>()];
                for (&j, &d) in arg.iter().zip(&dy) {
                    dx[j] += d;
                }
                dx
            }
            (LayerSpec::Relu, Cache::Input(x)) => dy
                .iter()
                .zip(x)
                .map(|(&d, &v)| if v > S::zero() { d } else { S::zero() })
                .collect(),
            (LayerSpec::Dropout { .. }, Cache::Mask(m)) => dy.iter().zip(m).map(|(&d, &k)| d * k).collect(),
            (LayerSpec::Dropout { .. } | LayerSpec::Linear, Cache::None) => dy,
            (l, _) => unreachable!("cache does not match layer {l:?}"),
        }
    }

    /// Mini-batch ADAM training on `(inputs, targets)` stored as flat batches.
    /// Sample order is reshuffled every epoch from the network generator.
    /// Returns the mean training loss of each epoch.
    pub fn train(&mut self, inputs: &[S], targets: &[S], epochs: usize, batch: usize, state: &mut AdamState<S>) -> Result<Vec<f64>> {
        let n = self.batch_size(inputs)?;
        let (di, dout) = (self.input_len(), self.output_len());
        if targets.len() != n * dout {
            return Err(Error::ShapeMismatch("targets do not match inputs".into()));
        }
        if batch == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        state.check(self)?;
        let mut order: Vec<usize> = (0..n).collect();
        let mut trace = Vec::with_capacity(epochs);
        let mut xb = Vec::with_capacity(batch * di);
        let mut yb = Vec::with_capacity(batch * dout);
        for _ in 0..epochs {
            order.shuffle(&mut self.rng);
            let mut total = 0.0;
            for chunk in order.chunks(batch) {
                xb.clear();
                yb.clear();
                for &s in chunk {
                    xb.extend_from_slice(&inputs[s * di..(s + 1) * di]);
                    yb.extend_from_slice(&targets[s * dout..(s + 1) * dout]);
                }
                let (loss, grads) = self.loss_and_grads(&xb, &yb, true)?;
                if !loss.is_finite() {
                    return Err(Error::Numerical("training loss diverged".into()));
                }
                total += loss * chunk.len() as f64;
                state.step(self, &grads);
            }
            trace.push(total / n as f64);
        }
        Ok(trace)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(x: &[S], c: usize, h: usize, w: usize, k: usize, stride: usize, oh: usize, ow: usize) -> Vec<S> {
    let pix = oh * ow;
    let mut cols = vec![S::zero(); c * k * k * pix];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * pix..(row + 1) * pix];
                for oy in 0..oh {
                    let src = ch * h * w + (oy * stride + ky) * w + kx;
                    for ox in 0..ow {
                        dst[oy * ow + ox] = x[src + ox * stride];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(cols: &[S], c: usize, h: usize, w: usize, k: usize, stride: usize, oh: usize, ow: usize, dx: &mut [S]) {
    let pix = oh * ow;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * pix..(row + 1) * pix];
                for oy in 0..oh {
                    let dst = ch * h * w + (oy * stride + ky) * w + kx;
                    for ox in 0..ow {
                        dx[dst + ox * stride] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;
