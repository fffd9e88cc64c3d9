//! Networks with shape contracts: probabilistic encoder, decoder,
//! projector and classifier head, bundled for checkpointing.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result, UrkleError};
use crate::gaussian::{clamp_log_var, GaussianBatch, LOGVAR_MAX, LOGVAR_MIN};
use crate::nn::{Grads, LayerDesc, Mode, Sequential, Trace};
use crate::rng::stream;
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"URKL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    /// (channels, height, width)
    pub input_shape: [usize; 3],
    /// Must end in a layer emitting `2 * d_z` features: the first half is
    /// the mean, the second half the raw log-variance.
    pub backbone: Vec<LayerDesc>,
    pub d_z: usize,
    /// Deterministic mode forces `log_var = logvar_min` and uses the mean
    /// as the representation.
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default = "default_logvar_min")]
    pub logvar_min: f64,
    #[serde(default = "default_logvar_max")]
    pub logvar_max: f64,
}

fn default_logvar_min() -> f64 {
    LOGVAR_MIN
}

fn default_logvar_max() -> f64 {
    LOGVAR_MAX
}

impl EncoderSpec {
    /// Four 3×3 convolutions (32, 64, 128 channels, then the 2·d_z head),
    /// stride 2 on the middle two, then global average pooling.
    pub fn mnist(d_z: usize) -> Self {
        Self {
            input_shape: [1, 28, 28],
            backbone: vec![
                LayerDesc::conv3x3(32, 1),
                LayerDesc::Relu,
                LayerDesc::conv3x3(64, 2),
                LayerDesc::Relu,
                LayerDesc::conv3x3(128, 2),
                LayerDesc::Relu,
                LayerDesc::conv3x3(2 * d_z, 1),
                LayerDesc::GlobalAvgPool,
            ],
            d_z,
            deterministic: false,
            logvar_min: LOGVAR_MIN,
            logvar_max: LOGVAR_MAX,
        }
    }

    /// Two-hidden-layer perceptron encoder for vector data, batch-normalized
    /// before each ReLU.
    pub fn mlp(input_shape: [usize; 3], hidden: usize, d_z: usize) -> Self {
        Self {
            input_shape,
            backbone: vec![
                LayerDesc::Linear { out_features: hidden },
                LayerDesc::BatchNorm,
                LayerDesc::Relu,
                LayerDesc::Linear { out_features: hidden },
                LayerDesc::BatchNorm,
                LayerDesc::Relu,
                LayerDesc::Linear { out_features: 2 * d_z },
            ],
            d_z,
            deterministic: false,
            logvar_min: LOGVAR_MIN,
            logvar_max: LOGVAR_MAX,
        }
    }

    pub fn head_width(&self) -> usize {
        2 * self.d_z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    /// Pixel-wise Bernoulli on logits; reconstructions are `sigmoid(logits)`.
    Bernoulli,
    /// Unit-variance Gaussian; reconstructions are the raw outputs.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderSpec {
    /// Applied to a (d_z, 1, 1) input; must produce the encoder input shape.
    pub layers: Vec<LayerDesc>,
    pub likelihood: Likelihood,
}

impl DecoderSpec {
    /// Four transposed convolutions mirroring [`EncoderSpec::mnist`].
    pub fn mnist() -> Self {
        Self {
            layers: vec![
                LayerDesc::ConvTranspose {
                    out_channels: 128,
                    kernel: 7,
                    stride: 1,
                    padding: 0,
                },
                LayerDesc::Relu,
                LayerDesc::ConvTranspose {
                    out_channels: 64,
                    kernel: 4,
                    stride: 2,
                    padding: 1,
                },
                LayerDesc::Relu,
                LayerDesc::ConvTranspose {
                    out_channels: 32,
                    kernel: 4,
                    stride: 2,
                    padding: 1,
                },
                LayerDesc::Relu,
                LayerDesc::ConvTranspose {
                    out_channels: 1,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
            ],
            likelihood: Likelihood::Bernoulli,
        }
    }

    pub fn mlp(output_shape: [usize; 3], hidden: usize, likelihood: Likelihood) -> Self {
        let [c, h, w] = output_shape;
        Self {
            layers: vec![
                LayerDesc::Linear { out_features: hidden },
                LayerDesc::Relu,
                LayerDesc::Linear { out_features: c * h * w },
                LayerDesc::Reshape {
                    channels: c,
                    height: h,
                    width: w,
                },
            ],
            likelihood,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub hidden: usize,
    pub num_classes: usize,
}

impl ClassifierSpec {
    /// Three fully connected layers with batch-norm and ReLU in between;
    /// `hidden == 0` gives a single linear layer.
    pub fn layers(&self) -> Vec<LayerDesc> {
        let out = LayerDesc::Linear {
            out_features: self.num_classes,
        };
        if self.hidden == 0 {
            return vec![out];
        }
        vec![
            LayerDesc::Linear {
                out_features: self.hidden,
            },
            LayerDesc::BatchNorm,
            LayerDesc::Relu,
            LayerDesc::Linear {
                out_features: self.hidden,
            },
            LayerDesc::BatchNorm,
            LayerDesc::Relu,
            out,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorSpec {
    pub hidden: usize,
    pub out: usize,
}

impl ProjectorSpec {
    /// Hidden width d_z, output width 128.
    pub fn for_latent(d_z: usize) -> Self {
        Self { hidden: d_z, out: 128 }
    }

    pub fn layers(&self) -> Vec<LayerDesc> {
        vec![
            LayerDesc::Linear {
                out_features: self.hidden,
            },
            LayerDesc::Relu,
            LayerDesc::Linear { out_features: self.out },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: EncoderSpec,
    pub decoder: Option<DecoderSpec>,
    pub projector: Option<ProjectorSpec>,
    pub classifier: Option<ClassifierSpec>,
}

impl ModelSpec {
    pub fn encoder_only(encoder: EncoderSpec) -> Self {
        Self {
            encoder,
            decoder: None,
            projector: None,
            classifier: None,
        }
    }
}

/// Probabilistic encoder `x -> N(mean(x), exp(log_var(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    spec: EncoderSpec,
    net: Sequential<T>,
}

/// Forward state of [`Encoder::forward`].
#[derive(Debug, Clone)]
pub struct EncoderTrace<T> {
    pub(crate) net: Trace<T>,
    /// Raw (unclamped) log-variance head outputs.
    raw_log_var: Vec<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(spec: EncoderSpec, rng: &mut R) -> Result<Self> {
        if spec.d_z == 0 {
            return Err(UrkleError::Config("d_z must be at least 1".into()));
        }
        if !(spec.logvar_min < spec.logvar_max) {
            return Err(UrkleError::Config("logvar_min must be below logvar_max".into()));
        }
        let net = Sequential::build(spec.input_shape, &spec.backbone, rng)?;
        if net.output_shape() != [spec.head_width(), 1, 1] {
            return Err(UrkleError::Config(format!(
                "encoder backbone emits {:?}, expected {} features (2 * d_z)",
                net.output_shape(),
                spec.head_width()
            )));
        }
        Ok(Self { spec, net })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn net(&self) -> &Sequential<T> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Sequential<T> {
        &mut self.net
    }

    pub fn d_z(&self) -> usize {
        self.spec.d_z
    }

    pub fn is_deterministic(&self) -> bool {
        self.spec.deterministic
    }

    pub fn set_deterministic(&mut self, on: bool) {
        self.spec.deterministic = on;
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            spec: self.spec.clone(),
            net: self.net.cast(),
        }
    }

    fn split_head(&self, out: &Tensor<T>) -> (GaussianBatch<T>, Vec<T>) {
        let n = out.batch();
        let d = self.spec.d_z;
        let mut g = GaussianBatch::zeros(n, d);
        let mut raw = vec![T::zero(); n * d];
        let lo = T::lit(self.spec.logvar_min);
        let hi = T::lit(self.spec.logvar_max);
        for i in 0..n {
            let row = out.item(i);
            g.mean[i * d..(i + 1) * d].copy_from_slice(&row[..d]);
            raw[i * d..(i + 1) * d].copy_from_slice(&row[d..]);
            for j in 0..d {
                g.log_var[i * d + j] = if self.spec.deterministic {
                    lo
                } else if self.spec.logvar_min == LOGVAR_MIN && self.spec.logvar_max == LOGVAR_MAX {
                    clamp_log_var(row[d + j])
                } else {
                    row[d + j].max(lo).min(hi)
                };
            }
        }
        (g, raw)
    }

    /// Representation distributions for a batch (no trace).
    pub fn encode(&self, x: &Tensor<T>) -> Result<GaussianBatch<T>> {
        self.encode_mode(x, Mode::Eval)
    }

    pub fn encode_mode(&self, x: &Tensor<T>, mode: Mode) -> Result<GaussianBatch<T>> {
        let out = self.net.infer(x, mode)?;
        Ok(self.split_head(&out).0)
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(GaussianBatch<T>, EncoderTrace<T>)> {
        let (out, net) = self.net.forward(x, mode)?;
        let (g, raw_log_var) = self.split_head(&out);
        Ok((g, EncoderTrace { net, raw_log_var }))
    }

    /// Backpropagates gradients on (mean, log_var); returns the input
    /// gradient. Clamped or deterministic log-variances pass no gradient.
    pub fn backward(&self, trace: &EncoderTrace<T>, grad: &GaussianBatch<T>, grads: Option<&mut Grads<T>>) -> Tensor<T> {
        let n = grad.n;
        let d = self.spec.d_z;
        let lo = T::lit(self.spec.logvar_min);
        let hi = T::lit(self.spec.logvar_max);
        let mut g = vec![T::zero(); n * 2 * d];
        for i in 0..n {
            g[i * 2 * d..i * 2 * d + d].copy_from_slice(&grad.mean[i * d..(i + 1) * d]);
            if !self.spec.deterministic {
                for j in 0..d {
                    let raw = trace.raw_log_var[i * d + j];
                    if raw >= lo && raw <= hi {
                        g[i * 2 * d + d + j] = grad.log_var[i * d + j];
                    }
                }
            }
        }
        let g = Tensor::matrix(n, 2 * d, g).expect("encoder head grad");
        self.net.backward(&trace.net, &g, grads)
    }
}

/// Decoder `z -> q(x|z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T> {
    spec: DecoderSpec,
    net: Sequential<T>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new<R: Rng + ?Sized>(spec: DecoderSpec, d_z: usize, output_shape: [usize; 3], rng: &mut R) -> Result<Self> {
        let net = Sequential::build([d_z, 1, 1], &spec.layers, rng)?;
        if net.output_shape() != output_shape {
            return Err(UrkleError::Config(format!(
                "decoder emits {:?}, expected the input shape {:?}",
                net.output_shape(),
                output_shape
            )));
        }
        Ok(Self { spec, net })
    }

    pub fn spec(&self) -> &DecoderSpec {
        &self.spec
    }

    pub fn net(&self) -> &Sequential<T> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Sequential<T> {
        &mut self.net
    }

    pub fn likelihood(&self) -> Likelihood {
        self.spec.likelihood
    }

    pub fn cast<U: Scalar>(&self) -> Decoder<U> {
        Decoder {
            spec: self.spec.clone(),
            net: self.net.cast(),
        }
    }

    /// Per-item `-log q(x|z)` for raw decoder outputs and its gradient with
    /// respect to those outputs.
    pub fn nll(&self, x: &Tensor<T>, out: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
        if x.shape() != out.shape() {
            return Err(contract(format!(
                "decoder output {:?} does not match input {:?}",
                out.shape(),
                x.shape()
            )));
        }
        let n = x.batch();
        let mut per_item = vec![T::zero(); n];
        let mut grad = Tensor::zeros(x.shape());
        let dim = x.item_len();
        match self.spec.likelihood {
            Likelihood::Bernoulli => {
                for i in 0..n {
                    let (xs, ls) = (x.item(i), out.item(i));
                    let gs = grad.item_mut(i);
                    let mut acc = T::zero();
                    for j in 0..dim {
                        let l = ls[j];
                        acc += l.max(T::zero()) - xs[j] * l + (T::one() + (-l.abs()).exp()).ln();
                        gs[j] = sigmoid(l) - xs[j];
                    }
                    per_item[i] = acc;
                }
            }
            Likelihood::Gaussian => {
                let c = T::lit(0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln());
                let half = T::lit(0.5);
                for i in 0..n {
                    let (xs, ms) = (x.item(i), out.item(i));
                    let gs = grad.item_mut(i);
                    let mut acc = T::zero();
                    for j in 0..dim {
                        let r = ms[j] - xs[j];
                        acc += half * r * r;
                        gs[j] = r;
                    }
                    per_item[i] = acc + c;
                }
            }
        }
        Ok((per_item, grad))
    }

    /// Maps raw outputs to data space.
    pub fn reconstruct(&self, out: &Tensor<T>) -> Tensor<T> {
        match self.spec.likelihood {
            Likelihood::Bernoulli => out.map(sigmoid),
            Likelihood::Gaussian => out.clone(),
        }
    }

    /// Chain rule through [`Decoder::reconstruct`].
    pub fn reconstruct_backward(&self, out: &Tensor<T>, grad_recon: &Tensor<T>) -> Tensor<T> {
        match self.spec.likelihood {
            Likelihood::Bernoulli => {
                let data = out
                    .data()
                    .iter()
                    .zip(grad_recon.data())
                    .map(|(&l, &g)| {
                        let s = sigmoid(l);
                        g * s * (T::one() - s)
                    })
                    .collect();
                Tensor::from_vec(out.shape(), data).expect("reconstruct grad")
            }
            Likelihood::Gaussian => grad_recon.clone(),
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(l: T) -> T {
    if l >= T::zero() {
        T::one() / (T::one() + (-l).exp())
    } else {
        let e = l.exp();
        e / (T::one() + e)
    }
}

/// Classification head `z -> softmax(logits)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    spec: ClassifierSpec,
    net: Sequential<T>,
}

impl<T: Scalar> Classifier<T> {
    pub fn new<R: Rng + ?Sized>(spec: ClassifierSpec, d_z: usize, rng: &mut R) -> Result<Self> {
        if spec.num_classes < 2 {
            return Err(UrkleError::Config("classifier needs at least 2 classes".into()));
        }
        let net = Sequential::build([d_z, 1, 1], &spec.layers(), rng)?;
        Ok(Self { spec, net })
    }

    /// Wraps an arbitrary network emitting `num_classes` logits.
    pub fn from_net(spec: ClassifierSpec, net: Sequential<T>) -> Result<Self> {
        if net.output_shape() != [spec.num_classes, 1, 1] {
            return Err(UrkleError::Config("classifier network width mismatch".into()));
        }
        Ok(Self { spec, net })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn net(&self) -> &Sequential<T> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Sequential<T> {
        &mut self.net
    }

    pub fn cast<U: Scalar>(&self) -> Classifier<U> {
        Classifier {
            spec: self.spec,
            net: self.net.cast(),
        }
    }

    /// Class probabilities for a (n, d_z) batch of representations.
    pub fn probs(&self, z: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let logits = self.net.infer(z, mode)?;
        Ok(softmax_rows(&logits))
    }
}

pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let c = logits.item_len();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / s);
    }
    out
}

/// Encoder plus optional heads, with the `ModelSpec` they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<T = f32> {
    pub spec: ModelSpec,
    pub seed: u64,
    pub encoder: Encoder<T>,
    pub decoder: Option<Decoder<T>>,
    pub projector: Option<Sequential<T>>,
    pub classifier: Option<Classifier<T>>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: ModelSpec,
    seed: u64,
    parameter_count: usize,
}

/// Initializes every network in `spec`. Each component draws from its own
/// seeded stream, so adding a head later does not perturb the others.
pub fn init_bundle<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<ModelBundle<T>> {
    let encoder = Encoder::new(spec.encoder.clone(), &mut stream(seed, 0))?;
    let decoder = spec
        .decoder
        .as_ref()
        .map(|d| Decoder::new(d.clone(), spec.encoder.d_z, spec.encoder.input_shape, &mut stream(seed, 1)))
        .transpose()?;
    let projector = spec
        .projector
        .map(|p| Sequential::build([spec.encoder.d_z, 1, 1], &p.layers(), &mut stream(seed, 2)))
        .transpose()?;
    let classifier = spec
        .classifier
        .map(|c| Classifier::new(c, spec.encoder.d_z, &mut stream(seed, 3)))
        .transpose()?;
    Ok(ModelBundle {
        spec: spec.clone(),
        seed,
        encoder,
        decoder,
        projector,
        classifier,
    })
}

impl<T: Scalar> ModelBundle<T> {
    pub fn parameter_count(&self) -> usize {
        self.encoder.net.num_parameters()
            + self.decoder.as_ref().map_or(0, |d| d.net.num_parameters())
            + self.projector.as_ref().map_or(0, |p| p.num_parameters())
            + self.classifier.as_ref().map_or(0, |c| c.net.num_parameters())
    }

    /// `p(z|x)` for a batch of inputs.
    pub fn encode(&self, x: &Tensor<T>) -> Result<GaussianBatch<T>> {
        self.encoder.encode(x)
    }

    pub fn cast<U: Scalar>(&self) -> ModelBundle<U> {
        ModelBundle {
            spec: self.spec.clone(),
            seed: self.seed,
            encoder: self.encoder.cast(),
            decoder: self.decoder.as_ref().map(|d| d.cast()),
            projector: self.projector.as_ref().map(|p| p.cast()),
            classifier: self.classifier.as_ref().map(|c| c.cast()),
        }
    }

    /// Attaches a freshly initialized classifier head.
    pub fn with_classifier(mut self, spec: ClassifierSpec, seed: u64) -> Result<Self> {
        self.classifier = Some(Classifier::new(spec, self.encoder.d_z(), &mut stream(seed, 3))?);
        self.spec.classifier = Some(spec);
        Ok(self)
    }

    fn state(&self) -> Vec<&Tensor<T>> {
        let mut v = self.encoder.net.state();
        if let Some(d) = &self.decoder {
            v.extend(d.net.state());
        }
        if let Some(p) = &self.projector {
            v.extend(p.state());
        }
        if let Some(c) = &self.classifier {
            v.extend(c.net.state());
        }
        v
    }

    fn state_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.encoder.net.state_mut();
        if let Some(d) = &mut self.decoder {
            v.extend(d.net.state_mut());
        }
        if let Some(p) = &mut self.projector {
            v.extend(p.state_mut());
        }
        if let Some(c) = &mut self.classifier {
            v.extend(c.net.state_mut());
        }
        v
    }

    pub fn all_finite(&self) -> bool {
        self.state().iter().all(|t| t.all_finite())
    }

    /// Serializes into the versioned `URKL` container.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_string(&Manifest {
            spec: self.spec.clone(),
            seed: self.seed,
            parameter_count: self.parameter_count(),
        })
        .map_err(|e| UrkleError::Format(e.to_string()))?;
        let state = self.state();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&(state.len() as u32).to_le_bytes());
        for t in state {
            out.extend_from_slice(&4u32.to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        Ok(out)
    }
}

impl ModelBundle<f32> {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(UrkleError::Parse {
                offset: 0,
                message: format!("bad magic {magic:?}, expected \"URKL\""),
            });
        }
        let version = r.u32("format version")?;
        if version != CHECKPOINT_VERSION {
            return Err(UrkleError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mlen = r.u32("manifest length")? as usize;
        let manifest_at = r.pos;
        let manifest = std::str::from_utf8(r.take(mlen, "manifest")?).map_err(|e| UrkleError::Parse {
            offset: manifest_at,
            message: format!("manifest is not UTF-8: {e}"),
        })?;
        let manifest: Manifest = serde_json::from_str(manifest).map_err(|e| UrkleError::Parse {
            offset: manifest_at,
            message: format!("manifest: {e}"),
        })?;
        let mut bundle = init_bundle::<f32>(&manifest.spec, manifest.seed)?;
        let count_at = r.pos;
        let count = r.u32("array count")? as usize;
        let mut state = bundle.state_mut();
        if count != state.len() {
            return Err(UrkleError::Parse {
                offset: count_at,
                message: format!("{count} arrays declared, spec needs {}", state.len()),
            });
        }
        for (i, t) in state.iter_mut().enumerate() {
            let at = r.pos;
            let ndim = r.u32("array rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("array dimension")? as usize);
            }
            if shape != t.shape() {
                return Err(UrkleError::Parse {
                    offset: at,
                    message: format!("array {i} has shape {shape:?}, spec needs {:?}", t.shape()),
                });
            }
            let raw = r.take(4 * t.len(), "array data")?;
            for (v, b) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
        }
        if r.pos != bytes.len() {
            return Err(UrkleError::Parse {
                offset: r.pos,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        if !bundle.all_finite() {
            return Err(UrkleError::Format("checkpoint contains non-finite parameters".into()));
        }
        Ok(bundle)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(UrkleError::Parse {
                offset: self.pos,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_bundle<T: Scalar>(bundle: &ModelBundle<T>, path: &Path) -> Result<()> {
    let bytes = bundle.to_bytes()?;
    // Write-then-rename so a crash never leaves a half-written checkpoint.
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle<f32>> {
    let bytes = fs::read(path)?;
    ModelBundle::from_bytes(&bytes)
}
