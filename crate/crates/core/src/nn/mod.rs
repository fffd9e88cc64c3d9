//! Feed-forward networks with hand-written backpropagation.
//!
//! A [`Sequential`] never mutates itself during a forward pass: activations
//! needed by the backward pass are returned in a [`Trace`], and batch-norm
//! running statistics are folded in explicitly by the trainer. That keeps
//! networks shareable during attacks and evaluation.

mod conv;

pub use conv::{conv_out, conv_transpose_out, Conv2d, ConvTranspose2d};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result, UrkleError};
use crate::rng::uniform;
use crate::tensor::{matmul, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Serializable description of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDesc {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ConvTranspose {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        out_features: usize,
    },
    BatchNorm,
    Relu,
    GlobalAvgPool,
    Reshape {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl LayerDesc {
    /// 3×3 same-padding convolution.
    pub fn conv3x3(out_channels: usize, stride: usize) -> Self {
        LayerDesc::Conv {
            out_channels,
            kernel: 3,
            stride,
            padding: 1,
        }
    }
}

/// Batch-norm uses batch statistics in `Train` and running statistics in
/// `Eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// (out, in, 1, 1)
    pub weight: Tensor<T>,
    /// (1, out, 1, 1)
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let w = (0..in_features * out_features)
            .map(|_| uniform(rng, -bound, bound))
            .collect();
        let b = (0..out_features).map(|_| uniform(rng, -bound, bound)).collect();
        Self {
            weight: Tensor::from_vec([out_features, in_features, 1, 1], w).expect("linear weight"),
            bias: Tensor::from_vec([1, out_features, 1, 1], b).expect("linear bias"),
        }
    }

    fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = x.batch();
        let (i, o) = (self.in_features(), self.out_features());
        let mut y = vec![T::zero(); n * o];
        for row in y.chunks_mut(o) {
            row.copy_from_slice(self.bias.data());
        }
        matmul(x.data(), false, self.weight.data(), true, &mut y, n, i, o, true);
        Tensor::matrix(n, o, y).expect("linear output")
    }

    fn backward(
        &self,
        input: &Tensor<T>,
        grad_out: &Tensor<T>,
        grads: Option<(&mut Tensor<T>, &mut Tensor<T>)>,
    ) -> Tensor<T> {
        let n = input.batch();
        let (i, o) = (self.in_features(), self.out_features());
        if let Some((gw, gb)) = grads {
            matmul(grad_out.data(), true, input.data(), false, gw.data_mut(), o, n, i, true);
            let gbd = gb.data_mut();
            for row in grad_out.data().chunks(o) {
                for (g, &d) in gbd.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        let mut dx = vec![T::zero(); n * i];
        matmul(grad_out.data(), false, self.weight.data(), false, &mut dx, n, o, i, false);
        Tensor::from_vec(input.shape(), dx).expect("linear input grad")
    }
}

/// Per-channel batch normalization over (batch, height, width).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BatchNorm<T> {
    fn new(channels: usize) -> Self {
        let s = [1, channels, 1, 1];
        Self {
            gamma: Tensor::full(s, T::one()),
            beta: Tensor::zeros(s),
            running_mean: Tensor::zeros(s),
            running_var: Tensor::full(s, T::one()),
        }
    }

    fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Saved forward state for one layer.
#[derive(Debug, Clone)]
enum Saved<T> {
    Input(Tensor<T>),
    BatchNorm {
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch_mean: Vec<T>,
        batch_var: Vec<T>,
        batch_stats: bool,
    },
    Nothing([usize; 4]),
}

/// Activations recorded by [`Sequential::forward`].
#[derive(Debug, Clone)]
pub struct Trace<T> {
    saved: Vec<Saved<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    ConvTranspose(ConvTranspose2d<T>),
    Linear(Linear<T>),
    BatchNorm(BatchNorm<T>),
    Relu,
    GlobalAvgPool,
    Reshape([usize; 3]),
}

impl<T: Scalar> Layer<T> {
    fn param_count(&self) -> usize {
        match self {
            Layer::Conv(_) | Layer::ConvTranspose(_) | Layer::Linear(_) | Layer::BatchNorm(_) => 2,
            _ => 0,
        }
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::ConvTranspose(c) => vec![&c.weight, &c.bias],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(b) => vec![&b.gamma, &b.beta],
            _ => vec![],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::ConvTranspose(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            _ => vec![],
        }
    }

    fn buffers(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::BatchNorm(b) => vec![&b.running_mean, &b.running_var],
            _ => vec![],
        }
    }

    fn cast<U: Scalar>(&self) -> Layer<U> {
        match self {
            Layer::Conv(c) => Layer::Conv(Conv2d {
                weight: c.weight.cast(),
                bias: c.bias.cast(),
                geom: c.geom,
                out_channels: c.out_channels,
            }),
            Layer::ConvTranspose(c) => Layer::ConvTranspose(ConvTranspose2d {
                weight: c.weight.cast(),
                bias: c.bias.cast(),
                geom: c.geom,
                in_channels: c.in_channels,
            }),
            Layer::Linear(l) => Layer::Linear(Linear {
                weight: l.weight.cast(),
                bias: l.bias.cast(),
            }),
            Layer::BatchNorm(b) => Layer::BatchNorm(BatchNorm {
                gamma: b.gamma.cast(),
                beta: b.beta.cast(),
                running_mean: b.running_mean.cast(),
                running_var: b.running_var.cast(),
            }),
            Layer::Relu => Layer::Relu,
            Layer::GlobalAvgPool => Layer::GlobalAvgPool,
            Layer::Reshape(s) => Layer::Reshape(*s),
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Saved<T>)> {
        let n = x.batch();
        Ok(match self {
            Layer::Conv(c) => (c.forward(x), Saved::Input(x.clone())),
            Layer::ConvTranspose(c) => (c.forward(x), Saved::Input(x.clone())),
            Layer::Linear(l) => (l.forward(x), Saved::Input(x.clone())),
            Layer::Relu => (x.map(|v| v.max(T::zero())), Saved::Input(x.clone())),
            Layer::GlobalAvgPool => {
                let [_, c, h, w] = x.shape();
                let p = h * w;
                let inv = T::lit(1.0 / p as f64);
                let data = x.data().chunks(p).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
                (Tensor::matrix(n, c, data)?, Saved::Nothing(x.shape()))
            }
            Layer::Reshape([c, h, w]) => (x.clone().reshape([n, *c, *h, *w])?, Saved::Nothing(x.shape())),
            Layer::BatchNorm(bn) => batch_norm_forward(bn, x, mode)?,
        })
    }

    fn backward(
        &self,
        saved: &Saved<T>,
        grad_out: &Tensor<T>,
        grads: Option<&mut [Tensor<T>]>,
    ) -> Tensor<T> {
        let pair = grads.filter(|g| g.len() == 2).map(|g| {
            let (a, b) = g.split_at_mut(1);
            (&mut a[0], &mut b[0])
        });
        match (self, saved) {
            (Layer::Conv(c), Saved::Input(x)) => c.backward(x, grad_out, pair),
            (Layer::ConvTranspose(c), Saved::Input(x)) => c.backward(x, grad_out, pair),
            (Layer::Linear(l), Saved::Input(x)) => l.backward(x, grad_out, pair),
            (Layer::Relu, Saved::Input(x)) => {
                let data = x
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                Tensor::from_vec(x.shape(), data).expect("relu grad")
            }
            (Layer::GlobalAvgPool, Saved::Nothing(shape)) => {
                let p = shape[2] * shape[3];
                let inv = T::lit(1.0 / p as f64);
                let mut data = Vec::with_capacity(shape.iter().product());
                for &g in grad_out.data() {
                    data.extend(std::iter::repeat_n(g * inv, p));
                }
                Tensor::from_vec(*shape, data).expect("pool grad")
            }
            (Layer::Reshape(_), Saved::Nothing(shape)) => grad_out.clone().reshape(*shape).expect("reshape grad"),
            (Layer::BatchNorm(bn), s @ Saved::BatchNorm { .. }) => batch_norm_backward(bn, s, grad_out, pair),
            _ => unreachable!("trace does not match layer"),
        }
    }
}

fn batch_norm_forward<T: Scalar>(
    bn: &BatchNorm<T>,
    x: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Saved<T>)> {
    let [n, c, h, w] = x.shape();
    if c != bn.channels() {
        return Err(contract(format!(
            "batch-norm over {} channels applied to {}",
            bn.channels(),
            c
        )));
    }
    let p = h * w;
    let eps = T::lit(BN_EPS);
    let count = T::lit((n * p) as f64);
    let (mean, var, batch_stats) = match mode {
        Mode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    mean[ch] += x.data()[(b * c + ch) * p..(b * c + ch + 1) * p].iter().copied().sum::<T>();
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / count);
            for b in 0..n {
                for ch in 0..c {
                    for &v in &x.data()[(b * c + ch) * p..(b * c + ch + 1) * p] {
                        let d = v - mean[ch];
                        var[ch] += d * d;
                    }
                }
            }
            var.iter_mut().for_each(|v| *v = *v / count);
            (mean, var, true)
        }
        Mode::Eval => (
            bn.running_mean.data().to_vec(),
            bn.running_var.data().to_vec(),
            false,
        ),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * p..(b * c + ch + 1) * p;
            for (xh, yy) in xhat.data_mut()[r.clone()].iter_mut().zip(&mut y.data_mut()[r]) {
                *xh = (*xh - mean[ch]) * inv_std[ch];
                *yy = bn.gamma.data()[ch] * *xh + bn.beta.data()[ch];
            }
        }
    }
    Ok((
        y,
        Saved::BatchNorm {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            batch_stats,
        },
    ))
}

fn batch_norm_backward<T: Scalar>(
    bn: &BatchNorm<T>,
    saved: &Saved<T>,
    grad_out: &Tensor<T>,
    grads: Option<(&mut Tensor<T>, &mut Tensor<T>)>,
) -> Tensor<T> {
    let Saved::BatchNorm {
        xhat,
        inv_std,
        batch_stats,
        ..
    } = saved
    else {
        unreachable!()
    };
    let [n, c, h, w] = xhat.shape();
    let p = h * w;
    let count = T::lit((n * p) as f64);
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * p..(b * c + ch + 1) * p;
            for (&g, &xh) in grad_out.data()[r.clone()].iter().zip(&xhat.data()[r]) {
                sum_dy[ch] += g;
                sum_dy_xhat[ch] += g * xh;
            }
        }
    }
    if let Some((gg, gb)) = grads {
        for ch in 0..c {
            gg.data_mut()[ch] += sum_dy_xhat[ch];
            gb.data_mut()[ch] += sum_dy[ch];
        }
    }
    let mut dx = grad_out.clone();
    for b in 0..n {
        for ch in 0..c {
            let scale = bn.gamma.data()[ch] * inv_std[ch];
            let r = (b * c + ch) * p..(b * c + ch + 1) * p;
            for (d, &xh) in dx.data_mut()[r.clone()].iter_mut().zip(&xhat.data()[r]) {
                *d = if *batch_stats {
                    scale * (*d - sum_dy[ch] / count - xh * sum_dy_xhat[ch] / count)
                } else {
                    scale * *d
                };
            }
        }
    }
    dx
}

/// Per-parameter gradient buffers, aligned with [`Sequential::params`].
pub type Grads<T> = Vec<Tensor<T>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Sequential<T> {
    input_shape: [usize; 3],
    output_shape: [usize; 3],
    descs: Vec<LayerDesc>,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    /// Builds and initializes a network; fails if the layer geometry does
    /// not fit the input shape.
    pub fn build<R: Rng + ?Sized>(input_shape: [usize; 3], descs: &[LayerDesc], rng: &mut R) -> Result<Self> {
        let mut shape = input_shape;
        let mut layers = Vec::with_capacity(descs.len());
        for (i, d) in descs.iter().enumerate() {
            let bad = || UrkleError::Config(format!("layer {i} ({d:?}) does not fit input shape {shape:?}"));
            let layer = match *d {
                LayerDesc::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let c = Conv2d::new(shape, out_channels, kernel, stride, padding, rng).ok_or_else(bad)?;
                    shape = c.out_shape();
                    Layer::Conv(c)
                }
                LayerDesc::ConvTranspose {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let c = ConvTranspose2d::new(shape, out_channels, kernel, stride, padding, rng).ok_or_else(bad)?;
                    shape = c.out_shape();
                    Layer::ConvTranspose(c)
                }
                LayerDesc::Linear { out_features } => {
                    let l = Linear::new(shape.iter().product(), out_features, rng);
                    shape = [out_features, 1, 1];
                    Layer::Linear(l)
                }
                LayerDesc::BatchNorm => Layer::BatchNorm(BatchNorm::new(shape[0])),
                LayerDesc::Relu => Layer::Relu,
                LayerDesc::GlobalAvgPool => {
                    shape = [shape[0], 1, 1];
                    Layer::GlobalAvgPool
                }
                LayerDesc::Reshape {
                    channels,
                    height,
                    width,
                } => {
                    if channels * height * width != shape.iter().product::<usize>() {
                        return Err(bad());
                    }
                    shape = [channels, height, width];
                    Layer::Reshape(shape)
                }
            };
            layers.push(layer);
        }
        Ok(Self {
            input_shape,
            output_shape: shape,
            descs: descs.to_vec(),
            layers,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn output_shape(&self) -> [usize; 3] {
        self.output_shape
    }

    pub fn descs(&self) -> &[LayerDesc] {
        &self.descs
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Trainable parameters followed by non-trainable buffers: everything a
    /// checkpoint must carry.
    pub fn state(&self) -> Vec<&Tensor<T>> {
        let mut v = self.params();
        v.extend(self.layers.iter().flat_map(|l| l.buffers()));
        v
    }

    pub fn state_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::BatchNorm(b) => {
                    let BatchNorm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    } = b;
                    params.push(gamma);
                    params.push(beta);
                    buffers.push(running_mean);
                    buffers.push(running_var);
                }
                other => params.extend(other.params_mut()),
            }
        }
        params.extend(buffers);
        params
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::BatchNorm(_)))
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.params().iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Sequential<U> {
        Sequential {
            input_shape: self.input_shape,
            output_shape: self.output_shape,
            descs: self.descs.clone(),
            layers: self.layers.iter().map(|l| l.cast()).collect(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.item_shape() != self.input_shape {
            return Err(contract(format!(
                "network expects items of shape {:?}, got {:?}",
                self.input_shape,
                x.item_shape()
            )));
        }
        Ok(())
    }

    /// Forward pass recording what the backward pass needs.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Trace<T>)> {
        self.check_input(x)?;
        let mut saved = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let (next, s) = layer.forward(&h, mode)?;
            saved.push(s);
            h = next;
        }
        Ok((h, Trace { saved }))
    }

    /// Forward pass without recording.
    pub fn infer(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h, mode)?.0;
        }
        Ok(h)
    }

    /// Backpropagates `grad_out`; accumulates parameter gradients into
    /// `grads` when given and returns the gradient with respect to the input.
    pub fn backward(&self, trace: &Trace<T>, grad_out: &Tensor<T>, mut grads: Option<&mut Grads<T>>) -> Tensor<T> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.param_count();
        }
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let slot = grads
                .as_deref_mut()
                .map(|gs| &mut gs[offsets[i]..offsets[i] + layer.param_count()]);
            g = layer.backward(&trace.saved[i], &g, slot);
        }
        g
    }

    /// Folds the batch statistics recorded in a training-mode trace into the
    /// batch-norm running estimates.
    pub fn update_running_stats(&mut self, trace: &Trace<T>) {
        let m = T::lit(BN_MOMENTUM);
        for (layer, saved) in self.layers.iter_mut().zip(&trace.saved) {
            if let (
                Layer::BatchNorm(bn),
                Saved::BatchNorm {
                    batch_mean,
                    batch_var,
                    xhat,
                    batch_stats: true,
                    ..
                },
            ) = (layer, saved)
            {
                let [n, _, h, w] = xhat.shape();
                let count = (n * h * w) as f64;
                let unbias = if count > 1.0 { T::lit(count / (count - 1.0)) } else { T::one() };
                for ch in 0..batch_mean.len() {
                    let rm = &mut bn.running_mean.data_mut()[ch];
                    *rm = (T::one() - m) * *rm + m * batch_mean[ch];
                    let rv = &mut bn.running_var.data_mut()[ch];
                    *rv = (T::one() - m) * *rv + m * batch_var[ch] * unbias;
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.state().iter().all(|t| t.all_finite())
    }
}
