//! Training loops for the representation learners and the supervised
//! baselines.

use std::fmt;
use std::str::FromStr;

use crate::adversary::{sup_adversary, trades_adversary, AttackConfig};
use crate::data::{make_pair, shuffle, AugmentationPolicy, Dataset};
use crate::error::{Result, UrkleError};
use crate::models::{init_bundle, ModelBundle, ModelSpec};
use crate::objectives::{
    ae_trades_objective, classification_loss, simclr_urkle_objective, trades_loss, vae_objective,
    vae_urkle_objective, LossBreakdown, ModelGrads, ObjectiveConfig,
};
use crate::rng::stream;
use crate::tensor::{pairwise_mean, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Negative ELBO only.
    Vae,
    VaeUrkle,
    AeTrades,
    SimclrUrkle,
    Standard,
    At,
    Trades,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Vae,
        Method::VaeUrkle,
        Method::AeTrades,
        Method::SimclrUrkle,
        Method::Standard,
        Method::At,
        Method::Trades,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vae => "vae",
            Method::VaeUrkle => "vae_urkle",
            Method::AeTrades => "ae_trades",
            Method::SimclrUrkle => "simclr_urkle",
            Method::Standard => "standard",
            Method::At => "at",
            Method::Trades => "trades",
        }
    }

    pub fn is_supervised(self) -> bool {
        matches!(self, Method::Standard | Method::At | Method::Trades)
    }

    /// Methods that use the encoder through its mean only.
    pub fn deterministic_encoder(self) -> bool {
        matches!(self, Method::AeTrades) || self.is_supervised()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = UrkleError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| UrkleError::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub model: ModelSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub attack: AttackConfig,
    pub objective: ObjectiveConfig,
    pub augmentation: AugmentationPolicy,
    /// Epoch interval between checkpoints handed to the sink; 0 disables.
    pub checkpoint_every: usize,
    /// Epochs over which `beta_robust` ramps linearly up from zero; 0
    /// applies the full weight from the first step.
    pub robust_warmup_epochs: usize,
}

impl TrainConfig {
    pub fn new(method: Method, model: ModelSpec) -> Self {
        Self {
            method,
            model,
            epochs: 1,
            batch_size: 128,
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: 5.0,
            seed: 0,
            attack: AttackConfig::training(0.1),
            objective: ObjectiveConfig::default(),
            augmentation: AugmentationPolicy::identity(),
            checkpoint_every: 0,
            robust_warmup_epochs: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(UrkleError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 || (self.method == Method::SimclrUrkle && self.batch_size < 2) {
            return bad(format!("batch_size {} is too small for {}", self.batch_size, self.method));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return bad("momentum must lie in [0, 1), weight_decay >= 0 and clip_norm > 0".into());
        }
        self.attack.validate()?;
        self.objective.validate()?;
        self.augmentation.validate()?;
        let need = |present: bool, what: &str| {
            if present {
                Ok(())
            } else {
                Err(UrkleError::Config(format!("method {} needs a {what}", self.method)))
            }
        };
        match self.method {
            Method::Vae | Method::VaeUrkle | Method::AeTrades => need(self.model.decoder.is_some(), "decoder"),
            Method::SimclrUrkle => need(self.model.projector.is_some(), "projector"),
            _ => need(self.model.classifier.is_some(), "classifier"),
        }
    }

    /// The model actually trained: supervised baselines and AE+TRADES use
    /// a deterministic encoder.
    pub fn effective_model(&self) -> ModelSpec {
        let mut m = self.model.clone();
        if self.method.deterministic_encoder() {
            m.encoder.deterministic = true;
        }
        m
    }
}

/// `lr0 * (1 + cos(pi * step / total_steps)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(UrkleError::InvalidArgument(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    if step == total_steps {
        return Ok(0.0);
    }
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()))
}

/// SGD with momentum, L2 weight decay and global
/// gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    velocity: Vec<Tensor<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, clip_norm: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            clip_norm,
            velocity: Vec::new(),
        }
    }

    /// Global L2 norm of `grads`.
    pub fn grad_norm<'a>(grads: impl Iterator<Item = &'a Tensor<f32>>) -> f64 {
        grads
            .flat_map(|g| g.data())
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn step(&mut self, params: Vec<&mut Tensor<f32>>, grads: Vec<&Tensor<f32>>, lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        let norm = Self::grad_norm(grads.iter().copied());
        let clip = if norm > self.clip_norm { (self.clip_norm / norm) as f32 } else { 1.0 };
        let (mu, wd, lr) = (self.momentum as f32, self.weight_decay as f32, lr as f32);
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((w, &gw), vw) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vw = mu * *vw + clip * gw + wd * *w;
                *w -= lr * *vw;
            }
        }
    }
}

/// Epoch-level training summary: means of the per-step loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub task_term: f64,
    pub prior_term: f64,
    pub robust_term: f64,
    pub total: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,steps,lr,task_term,prior_term,robust_term,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.epoch, self.steps, self.lr, self.task_term, self.prior_term, self.robust_term, self.total
        )
    }
}

/// Receives training progress.
pub trait TrainingSink {
    fn step(&mut self, _step: usize, _loss: &LossBreakdown) {}

    fn epoch(&mut self, record: &EpochRecord) -> Result<()>;

    fn checkpoint(&mut self, _epoch: usize, _bundle: &ModelBundle<f32>) -> Result<()> {
        Ok(())
    }
}

/// Keeps every step loss and epoch record in memory.
#[derive(Debug, Clone, Default)]
pub struct Recorder {
    pub steps: Vec<LossBreakdown>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingSink for Recorder {
    fn step(&mut self, _step: usize, loss: &LossBreakdown) {
        self.steps.push(*loss);
    }

    fn epoch(&mut self, record: &EpochRecord) -> Result<()> {
        self.epochs.push(*record);
        Ok(())
    }
}

const SHUFFLE_STREAM: u64 = 1 << 32;
const STEP_STREAM: u64 = 2 << 32;
const AUGMENT_STREAM: u64 = 3 << 32;

/// Batches per epoch: one batch when the data fits, otherwise only full
/// batches.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    if n <= batch_size {
        1
    } else {
        n / batch_size
    }
}

fn require_labels(labels: &Option<Vec<usize>>, method: Method) -> Result<&[usize]> {
    labels
        .as_deref()
        .ok_or_else(|| UrkleError::Config(format!("method {method} needs labeled data")))
}

/// Trains a freshly initialized bundle. Deterministic for a fixed seed.
pub fn train(config: &TrainConfig, data: &Dataset, sink: &mut dyn TrainingSink) -> Result<ModelBundle<f32>> {
    config.validate()?;
    let spec = config.effective_model();
    if data.item_shape() != spec.encoder.input_shape {
        return Err(UrkleError::Config(format!(
            "data items are {:?} but the encoder expects {:?}",
            data.item_shape(),
            spec.encoder.input_shape
        )));
    }
    if data.is_empty() {
        return Err(UrkleError::Config("training data is empty".into()));
    }
    if config.method.is_supervised() && data.labels().is_none() {
        return Err(UrkleError::Config(format!("method {} needs labeled data", config.method)));
    }
    let mut bundle = init_bundle::<f32>(&spec, config.seed)?;
    let n = data.len();
    let bs = config.batch_size.min(n);
    if config.method == Method::SimclrUrkle && bs < 2 {
        return Err(UrkleError::Config("contrastive training needs at least two inputs".into()));
    }
    let per_epoch = batches_per_epoch(n, bs);
    let total_steps = config.epochs * per_epoch;
    let mut sgd = Sgd::new(config.momentum, config.weight_decay, config.clip_norm);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut order, &mut stream(config.seed, SHUFFLE_STREAM + epoch as u64));
        let mut losses = Vec::with_capacity(per_epoch);
        let mut lr = 0.0;
        for b in 0..per_epoch {
            lr = cosine_lr(step, total_steps, config.lr0)?;
            let (x, labels) = data.batch(&order[b * bs..(b + 1) * bs]);
            let mut rng = stream(config.seed, STEP_STREAM + step as u64);
            let mut grads = ModelGrads::for_bundle(&bundle);
            let warm = robust_warmup(step, config.robust_warmup_epochs * per_epoch);
            let loss = step_loss(config, warm, &bundle, &x, &labels, step, &mut rng, &mut grads)?;
            if !loss.is_finite() || !grads.all().all(|g| g.all_finite()) {
                return Err(UrkleError::NumericAbort { step, breakdown: loss });
            }
            grads.commit_running_stats(&mut bundle);
            let grads_flat: Vec<&Tensor<f32>> = grads.all().collect();
            sgd.step(bundle_params(&mut bundle), grads_flat, lr);
            sink.step(step, &loss);
            losses.push(loss);
            step += 1;
        }
        let mean = |f: fn(&LossBreakdown) -> f64| pairwise_mean(&losses.iter().map(f).collect::<Vec<_>>());
        sink.epoch(&EpochRecord {
            epoch: epoch + 1,
            steps: per_epoch,
            lr,
            task_term: mean(|l| l.task_term),
            prior_term: mean(|l| l.prior_term),
            robust_term: mean(|l| l.robust_term),
            total: mean(|l| l.total),
        })?;
        if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
            sink.checkpoint(epoch + 1, &bundle)?;
        }
    }
    Ok(bundle)
}

/// Parameters in the order of [`ModelGrads::all`].
pub(crate) fn bundle_params(bundle: &mut ModelBundle<f32>) -> Vec<&mut Tensor<f32>> {
    let mut v = bundle.encoder.net_mut().params_mut();
    if let Some(d) = &mut bundle.decoder {
        v.extend(d.net_mut().params_mut());
    }
    if let Some(p) = &mut bundle.projector {
        v.extend(p.params_mut());
    }
    if let Some(c) = &mut bundle.classifier {
        v.extend(c.net_mut().params_mut());
    }
    v
}

/// Fraction of `beta_robust` in effect at `step`.
pub fn robust_warmup(step: usize, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 {
        1.0
    } else {
        (step as f64 / warmup_steps as f64).min(1.0)
    }
}

#[allow(clippy::too_many_arguments)]
fn step_loss(
    config: &TrainConfig,
    warm: f64,
    bundle: &ModelBundle<f32>,
    x: &Tensor<f32>,
    labels: &Option<Vec<usize>>,
    step: usize,
    rng: &mut crate::rng::NoiseSource,
    grads: &mut ModelGrads<f32>,
) -> Result<LossBreakdown> {
    let enc = &bundle.encoder;
    let obj = &ObjectiveConfig {
        beta_robust: config.objective.beta_robust * warm,
        ..config.objective
    };
    let attack = &config.attack;
    let decoder = || bundle.decoder.as_ref().expect("validated decoder");
    let classifier = || bundle.classifier.as_ref().expect("validated classifier");
    match config.method {
        Method::Vae => vae_objective(enc, decoder(), x, obj, rng, Some(grads)),
        Method::VaeUrkle => vae_urkle_objective(enc, decoder(), x, attack, obj, rng, Some(grads)),
        Method::AeTrades => ae_trades_objective(enc, decoder(), x, attack, obj.beta_robust, rng, Some(grads)),
        Method::SimclrUrkle => {
            let mut aug = stream(config.seed, AUGMENT_STREAM + step as u64);
            let (v1, v2) = make_pair(x, &config.augmentation, &mut aug)?;
            let projector = bundle.projector.as_ref().expect("validated projector");
            simclr_urkle_objective(enc, projector, &v1, &v2, attack, obj, rng, Some(grads))
        }
        Method::Standard => {
            let y = require_labels(labels, config.method)?;
            classification_loss(enc, classifier(), x, y, &[], true, Some(grads))
        }
        Method::At => {
            let y = require_labels(labels, config.method)?;
            let adv = sup_adversary(enc, classifier(), x, y, attack, rng)?;
            classification_loss(enc, classifier(), &adv, y, &[], true, Some(grads))
        }
        Method::Trades => {
            let y = require_labels(labels, config.method)?;
            let adv = trades_adversary(enc, classifier(), x, attack, rng)?;
            trades_loss(enc, classifier(), x, &adv, y, obj.beta_robust, Some(grads))
        }
    }
}
