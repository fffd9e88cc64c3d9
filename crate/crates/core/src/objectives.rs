//! Training losses and their gradients.
//!
//! Every objective takes an optional [`ModelGrads`]. With `None` the
//! networks run in evaluation mode and only the value is computed; with
//! `Some` they run in training mode and parameter gradients of `total` are
//! accumulated.

use rand::Rng;

use crate::adversary::{check_labels, recon_adversary, unsup_adversary, AttackConfig};
use crate::error::{contract, Result, UrkleError};
use crate::gaussian::GaussianBatch;
use crate::models::{softmax_rows, Classifier, Decoder, Encoder, ModelBundle};
use crate::nn::{Grads, Mode, Sequential, Trace};
use crate::rng::normals;
use crate::tensor::{matmul, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub beta_vae: f64,
    pub beta_robust: f64,
    pub tau: f64,
    pub m_bound: f64,
    pub num_classes: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            beta_vae: 0.0,
            beta_robust: 6.0,
            tau: 0.5,
            m_bound: 3.0,
            num_classes: 10,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(UrkleError::Config(m));
        if !(self.beta_vae >= 0.0 && self.beta_vae.is_finite()) {
            return bad(format!("beta_vae must be non-negative, got {}", self.beta_vae));
        }
        if !(self.beta_robust >= 0.0 && self.beta_robust.is_finite()) {
            return bad(format!("beta_robust must be non-negative, got {}", self.beta_robust));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.m_bound > 0.0 && self.m_bound.is_finite()) {
            return bad(format!("m_bound must be positive, got {}", self.m_bound));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        check_floor(self.m_bound, self.num_classes)
    }
}

fn check_floor(m_bound: f64, num_classes: usize) -> Result<()> {
    if (-m_bound).exp() * num_classes as f64 >= 1.0 {
        return Err(UrkleError::Config(format!(
            "exp(-{m_bound}) * {num_classes} >= 1: the probability floor leaves no mass"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub task_term: f64,
    pub prior_term: f64,
    pub robust_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(task_term: f64, prior_term: f64, robust_term: f64, beta_vae: f64, beta_robust: f64) -> Self {
        Self {
            task_term,
            prior_term,
            robust_term,
            total: task_term + beta_vae * prior_term + beta_robust * robust_term,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.task_term, self.prior_term, self.robust_term, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Part {
    Encoder,
    Decoder,
    Projector,
    Classifier,
}

/// Parameter gradients for each network of a bundle, plus the batch-norm
/// statistics observed by training-mode passes.
#[derive(Debug, Clone)]
pub struct ModelGrads<T> {
    pub encoder: Grads<T>,
    pub decoder: Grads<T>,
    pub projector: Grads<T>,
    pub classifier: Grads<T>,
    stats: Vec<(Part, Trace<T>)>,
}

impl<T: Scalar> ModelGrads<T> {
    pub fn new(
        encoder: &Encoder<T>,
        decoder: Option<&Decoder<T>>,
        projector: Option<&Sequential<T>>,
        classifier: Option<&Classifier<T>>,
    ) -> Self {
        Self {
            encoder: encoder.net().zero_grads(),
            decoder: decoder.map_or_else(Vec::new, |d| d.net().zero_grads()),
            projector: projector.map_or_else(Vec::new, |p| p.zero_grads()),
            classifier: classifier.map_or_else(Vec::new, |c| c.net().zero_grads()),
            stats: Vec::new(),
        }
    }

    pub fn for_bundle(bundle: &ModelBundle<T>) -> Self {
        Self::new(
            &bundle.encoder,
            bundle.decoder.as_ref(),
            bundle.projector.as_ref(),
            bundle.classifier.as_ref(),
        )
    }

    /// All gradient tensors in bundle order: encoder, decoder, projector,
    /// classifier.
    pub fn all(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .chain(&self.projector)
            .chain(&self.classifier)
    }

    pub fn all_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.encoder
            .iter_mut()
            .chain(&mut self.decoder)
            .chain(&mut self.projector)
            .chain(&mut self.classifier)
    }

    fn record(&mut self, part: Part, net: &Sequential<T>, trace: Trace<T>) {
        if net.has_batch_norm() {
            self.stats.push((part, trace));
        }
    }

    /// Folds the recorded batch statistics into the running averages.
    pub fn commit_running_stats(&mut self, bundle: &mut ModelBundle<T>) {
        for (part, trace) in self.stats.drain(..) {
            let net = match part {
                Part::Encoder => Some(bundle.encoder.net_mut()),
                Part::Decoder => bundle.decoder.as_mut().map(|d| d.net_mut()),
                Part::Projector => bundle.projector.as_mut(),
                Part::Classifier => bundle.classifier.as_mut().map(|c| c.net_mut()),
            };
            if let Some(net) = net {
                net.update_running_stats(&trace);
            }
        }
    }
    /// Applies only the classifier's batch-norm statistics, dropping the rest.
    pub fn commit_classifier_stats(&mut self, classifier: &mut Classifier<T>) {
        for (part, trace) in self.stats.drain(..) {
            if part == Part::Classifier {
                classifier.net_mut().update_running_stats(&trace);
            }
        }
    }
}

fn mode_for<T>(grads: &Option<&mut ModelGrads<T>>) -> Mode {
    if grads.is_some() {
        Mode::Train
    } else {
        Mode::Eval
    }
}

fn mean_f64<T: Scalar>(values: &[T]) -> f64 {
    values.iter().map(|v| v.as_f64()).sum::<f64>() / values.len() as f64
}

/// NT-Xent over rows of `h` grouped by `tuple`: rows sharing a tuple id are
/// positives, rows of other tuples are the negatives. Returns the mean over
/// ordered positive pairs and its gradient with respect to `h`.
pub(crate) fn nt_xent_rows<T: Scalar>(h: &Tensor<T>, tuple: &[usize], tau: f64) -> Result<(f64, Tensor<T>)> {
    let r = h.batch();
    let p = h.item_len();
    if tuple.len() != r {
        return Err(contract("one tuple id per row required"));
    }
    if !(tau > 0.0) {
        return Err(UrkleError::Config("tau must be positive".into()));
    }
    let tuples = tuple.iter().copied().max().map_or(0, |m| m + 1);
    let mut count = vec![0usize; tuples];
    tuple.iter().for_each(|&t| count[t] += 1);
    if count.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(UrkleError::InvalidArgument("NT-Xent needs at least two tuples".into()));
    }
    let pairs: usize = tuple.iter().map(|&t| count[t] - 1).sum();
    if pairs == 0 {
        return Err(UrkleError::InvalidArgument("NT-Xent needs tuples of at least two views".into()));
    }
    let mut zhat: Vec<f64> = h.data().iter().map(|v| v.as_f64()).collect();
    let mut norms = vec![0.0; r];
    for (a, row) in zhat.chunks_mut(p).enumerate() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(UrkleError::Numeric(format!("representation {a} has norm {n}")));
        }
        norms[a] = n;
        row.iter_mut().for_each(|v| *v /= n);
    }
    let mut s = vec![0.0; r * r];
    matmul(&zhat, false, &zhat, true, &mut s, r, p, r, false);
    s.iter_mut().for_each(|v| *v /= tau);
    let inv_pairs = 1.0 / pairs as f64;
    let mut ds = vec![0.0; r * r];
    let mut value = 0.0;
    for a in 0..r {
        let row = &s[a * r..(a + 1) * r];
        let ta = tuple[a];
        let m = (0..r).filter(|&c| tuple[c] != ta).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..r).filter(|&c| tuple[c] != ta).map(|c| (row[c] - m).exp()).sum();
        let lse = m + z.ln();
        let positives = (count[ta] - 1) as f64;
        value += positives * lse;
        for c in 0..r {
            if tuple[c] != ta {
                ds[a * r + c] = positives * inv_pairs * (row[c] - m).exp() / z;
            } else if c != a {
                value -= row[c];
                ds[a * r + c] = -inv_pairs;
            }
        }
    }
    value *= inv_pairs;
    // dẑ = (dS + dSᵀ) ẑ / τ
    let sym: Vec<f64> = (0..r * r).map(|k| (ds[k] + ds[(k % r) * r + k / r]) / tau).collect();
    let mut dzhat = vec![0.0; r * p];
    matmul(&sym, false, &zhat, false, &mut dzhat, r, r, p, false);
    let mut grad = Vec::with_capacity(r * p);
    for a in 0..r {
        let zh = &zhat[a * p..(a + 1) * p];
        let dz = &dzhat[a * p..(a + 1) * p];
        let dot: f64 = zh.iter().zip(dz).map(|(x, y)| x * y).sum();
        grad.extend(zh.iter().zip(dz).map(|(&x, &y)| T::lit((y - x * dot) / norms[a])));
    }
    Ok((value, Tensor::from_vec(h.shape(), grad)?))
}

/// NT-Xent over `tuples` (b tuples of m vectors each), optionally through a
/// projector. Negatives come only from other tuples.
pub fn nt_xent<T: Scalar>(tuples: &[Vec<Vec<T>>], tau: f64, projector: Option<&Sequential<T>>) -> Result<f64> {
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    let dim = tuples.first().and_then(|t| t.first()).map_or(0, |v| v.len());
    for (i, t) in tuples.iter().enumerate() {
        for v in t {
            if v.len() != dim {
                return Err(contract("representations differ in length"));
            }
            rows.extend_from_slice(v);
            ids.push(i);
        }
    }
    if tuples.len() < 2 {
        return Err(UrkleError::InvalidArgument("NT-Xent needs at least two tuples".into()));
    }
    let h = Tensor::matrix(ids.len(), dim, rows)?;
    let h = match projector {
        Some(p) => p.infer(&h, Mode::Eval)?,
        None => h,
    };
    Ok(nt_xent_rows(&h, &ids, tau)?.0)
}

/// Mean KL between clean and adversarial representation distributions.
pub fn urkle_loss<T: Scalar>(encoder: &Encoder<T>, clean: &Tensor<T>, adversaries: &Tensor<T>) -> Result<f64> {
    if clean.shape() != adversaries.shape() {
        return Err(contract(format!(
            "{:?} clean inputs but {:?} adversaries",
            clean.shape(),
            adversaries.shape()
        )));
    }
    if clean.batch() == 0 {
        return Err(contract("urkle_loss needs at least one input"));
    }
    let p = encoder.encode(clean)?;
    let q = encoder.encode(adversaries)?;
    Ok(mean_f64(&p.kl_rows(&q)?))
}

/// Splits a batch of 2n distributions into its halves.
fn halves<T: Scalar>(g: &GaussianBatch<T>, n: usize) -> (GaussianBatch<T>, GaussianBatch<T>) {
    let d = g.d;
    let part = |r: std::ops::Range<usize>| GaussianBatch {
        n: r.len(),
        d,
        mean: g.mean[r.start * d..r.end * d].to_vec(),
        log_var: g.log_var[r.start * d..r.end * d].to_vec(),
    };
    (part(0..n), part(n..g.n))
}

fn join<T: Scalar>(a: &GaussianBatch<T>, b: &GaussianBatch<T>) -> GaussianBatch<T> {
    let mut g = a.clone();
    g.n += b.n;
    g.mean.extend_from_slice(&b.mean);
    g.log_var.extend_from_slice(&b.log_var);
    g
}

/// VAE terms with an optional Urkle term, given fixed adversaries and
/// reparameterization noise for the clean inputs.
pub(crate) fn vae_terms<T: Scalar>(
    encoder: &Encoder<T>,
    decoder: &Decoder<T>,
    x: &Tensor<T>,
    adversaries: Option<&Tensor<T>>,
    noise: &[T],
    cfg: &ObjectiveConfig,
    mut grads: Option<&mut ModelGrads<T>>,
) -> Result<LossBreakdown> {
    let n = x.batch();
    let mode = mode_for(&grads);
    let input = match adversaries {
        Some(a) => Tensor::concat(&[x, a])?,
        None => x.clone(),
    };
    let (g, etrace) = encoder.forward(&input, mode)?;
    let (p, q) = halves(&g, n);
    let z = p.apply_noise(noise, 1);
    let (out, dtrace) = decoder.net().forward(&z, mode)?;
    let (nll, dout) = decoder.nll(x, &out)?;
    let task = mean_f64(&nll);
    let prior_ref = GaussianBatch::zeros(n, p.d);
    let prior = mean_f64(&p.kl_rows(&prior_ref)?);
    let robust = match adversaries {
        Some(_) => mean_f64(&p.kl_rows(&q)?),
        None => 0.0,
    };
    let loss = LossBreakdown::combine(task, prior, robust, cfg.beta_vae, cfg.beta_robust);
    if let Some(gr) = grads.as_deref_mut() {
        let inv = T::lit(1.0 / n as f64);
        let mut dout = dout;
        dout.scale(inv);
        let dz = decoder.net().backward(&dtrace, &dout, Some(&mut gr.decoder));
        gr.record(Part::Decoder, decoder.net(), dtrace);
        let mut gp = GaussianBatch::zeros(n, p.d);
        let mut gq = GaussianBatch::zeros(q.n, p.d);
        p.draw_backward(noise, &dz, 1, &mut gp);
        p.kl_rows_backward(&prior_ref, T::lit(cfg.beta_vae / n as f64), Some(&mut gp), None);
        if adversaries.is_some() {
            p.kl_rows_backward(&q, T::lit(cfg.beta_robust / n as f64), Some(&mut gp), Some(&mut gq));
        }
        encoder.backward(&etrace, &join(&gp, &gq), Some(&mut gr.encoder));
        gr.record(Part::Encoder, encoder.net(), etrace.net);
    }
    Ok(loss)
}

fn encoder_noise<T: Scalar, R: Rng + ?Sized>(encoder: &Encoder<T>, rows: usize, rng: &mut R) -> Vec<T> {
    if encoder.is_deterministic() {
        Vec::new()
    } else {
        normals(rows * encoder.d_z(), rng)
    }
}

/// Negative ELBO with one reparameterized sample per input.
pub fn vae_objective<T: Scalar, R: Rng + ?Sized>(
    encoder: &Encoder<T>,
    decoder: &Decoder<T>,
    x: &Tensor<T>,
    cfg: &ObjectiveConfig,
    rng: &mut R,
    grads: Option<&mut ModelGrads<T>>,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let noise = encoder_noise(encoder, x.batch(), rng);
    vae_terms(encoder, decoder, x, None, &noise, cfg, grads)
}

/// Negative ELBO plus the Urkle term at unsupervised adversaries. The
/// sampling noise is drawn before the attack, and the attack is skipped when
/// `beta_robust` is zero, so that setting reproduces [`vae_objective`]
/// exactly (with `robust_term` reported as 0).
pub fn vae_urkle_objective<T: Scalar, R: Rng + ?Sized>(
    encoder: &Encoder<T>,
    decoder: &Decoder<T>,
    x: &Tensor<T>,
    attack: &AttackConfig,
    cfg: &ObjectiveConfig,
    rng: &mut R,
    grads: Option<&mut ModelGrads<T>>,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let noise = encoder_noise(encoder, x.batch(), rng);
    if cfg.beta_robust == 0.0 {
        return vae_terms(encoder, decoder, x, None, &noise, cfg, grads);
    }
    let adv = unsup_adversary(encoder, x, attack, rng)?;
    vae_terms(encoder, decoder, x, Some(&adv), &noise, cfg, grads)
}

/// Reconstruction error plus `beta` times the squared reconstruction shift
/// at fixed adversaries. The encoder is used through its mean.
pub(crate) fn ae_trades_terms<T: Scalar>(
    encoder: &Encoder<T>,
    decoder: &Decoder<T>,
    x: &Tensor<T>,
    adversaries: &Tensor<T>,
    beta: f64,
    mut grads: Option<&mut ModelGrads<T>>,
) -> Result<LossBreakdown> {
    let n = x.batch();
    let mode = mode_for(&grads);
    let input = Tensor::concat(&[x, adversaries])?;
    let (g, etrace) = encoder.forward(&input, mode)?;
    let (out, dtrace) = decoder.net().forward(&g.mean_tensor(), mode)?;
    let r = decoder.reconstruct(&out);
    if r.item_shape() != x.item_shape() {
        return Err(contract("decoder output does not match the input shape"));
    }
    let half = n * x.item_len();
    let (rc, ra) = r.data().split_at(half);
    let mut task = 0.0;
    let mut robust = 0.0;
    let mut dr = vec![T::zero(); 2 * half];
    let inv = T::lit(1.0 / n as f64);
    let b = T::lit(beta);
    let two = T::lit(2.0);
    for k in 0..half {
        let e = rc[k] - x.data()[k];
        let s = ra[k] - rc[k];
        task += e.as_f64() * e.as_f64();
        robust += s.as_f64() * s.as_f64();
        dr[k] = two * inv * (e - b * s);
        dr[half + k] = two * inv * b * s;
    }
    let loss = LossBreakdown::combine(task / n as f64, 0.0, robust / n as f64, 0.0, beta);
    if let Some(gr) = grads.as_deref_mut() {
        let dr = Tensor::from_vec(r.shape(), dr)?;
        let dout = decoder.reconstruct_backward(&out, &dr);
        let dz = decoder.net().backward(&dtrace, &dout, Some(&mut gr.decoder));
        gr.record(Part::Decoder, decoder.net(), dtrace);
        let mut gg = GaussianBatch::zeros(g.n, g.d);
        gg.mean.copy_from_slice(dz.data());
        encoder.backward(&etrace, &gg, Some(&mut gr.encoder));
        gr.record(Part::Encoder, encoder.net(), etrace.net);
    }
    Ok(loss)
}

/// Autoencoder with a TRADES-style reconstruction regularizer.
pub fn ae_trades_objective<T: Scalar, R: Rng + ?Sized>(
    encoder: &Encoder<T>,
    decoder: &Decoder<T>,
    x: &Tensor<T>,
    attack: &AttackConfig,
    beta: f64,
    rng: &mut R,
    grads: Option<&mut ModelGrads<T>>,
) -> Result<LossBreakdown> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(UrkleError::Config(format!("beta must be non-negative, got {beta}")));
    }
    let adv = recon_adversary(encoder, decoder, x, attack, rng)?;
    ae_trades_terms(encoder, decoder, x, &adv, beta, grads)
}

/// Contrastive and Urkle terms for fixed adversaries. `views` holds the
/// 2b clean inputs (all first views, then all second views), `adversaries`
/// the matching 2b adversaries, and `noise` the draws for the 2b clean
/// rows; each adversary reuses its clean input's draw.
pub(crate) fn simclr_urkle_terms<T: Scalar>(
    encoder: &Encoder<T>,
    projector: &Sequential<T>,
    views: &Tensor<T>,
    adversaries: &Tensor<T>,
    noise: &[T],
    cfg: &ObjectiveConfig,
    mut grads: Option<&mut ModelGrads<T>>,
) -> Result<LossBreakdown> {
    let two_b = views.batch();
    if two_b % 2 != 0 || two_b < 4 {
        return Err(UrkleError::InvalidArgument("NT-Xent needs at least two pairs".into()));
    }
    let b = two_b / 2;
    let mode = mode_for(&grads);
    let input = Tensor::concat(&[views, adversaries])?;
    let (g, etrace) = encoder.forward(&input, mode)?;
    let mut shared = noise.to_vec();
    shared.extend_from_slice(noise);
    let z = g.apply_noise(&shared, 1);
    let (h, ptrace) = projector.forward(&z, mode)?;
    let tuple: Vec<usize> = (0..2 * two_b).map(|r| r % b).collect();
    let (task, dh) = nt_xent_rows(&h, &tuple, cfg.tau)?;
    let (p, q) = halves(&g, two_b);
    let robust = mean_f64(&p.kl_rows(&q)?);
    let loss = LossBreakdown::combine(task, 0.0, robust, 0.0, cfg.beta_robust);
    if let Some(gr) = grads.as_deref_mut() {
        let dz = projector.backward(&ptrace, &dh, Some(&mut gr.projector));
        gr.record(Part::Projector, projector, ptrace);
        let mut gg = GaussianBatch::zeros(g.n, g.d);
        g.draw_backward(&shared, &dz, 1, &mut gg);
        let (mut gp, mut gq) = halves(&gg, two_b);
        p.kl_rows_backward(&q, T::lit(cfg.beta_robust / two_b as f64), Some(&mut gp), Some(&mut gq));
        encoder.backward(&etrace, &join(&gp, &gq), Some(&mut gr.encoder));
        gr.record(Part::Encoder, encoder.net(), etrace.net);
    }
    Ok(loss)
}

/// SimCLR over 4-tuples (two views and their unsupervised adversaries) plus
/// the Urkle term over all 2b (view, adversary) pairs.
#[allow(clippy::too_many_arguments)]
pub fn simclr_urkle_objective<T: Scalar, R: Rng + ?Sized>(
    encoder: &Encoder<T>,
    projector: &Sequential<T>,
    view1: &Tensor<T>,
    view2: &Tensor<T>,
    attack: &AttackConfig,
    cfg: &ObjectiveConfig,
    rng: &mut R,
    grads: Option<&mut ModelGrads<T>>,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    if view1.shape() != view2.shape() {
        return Err(contract("views differ in shape"));
    }
    if view1.batch() < 2 {
        return Err(UrkleError::InvalidArgument("NT-Xent needs at least two pairs".into()));
    }
    let views = Tensor::concat(&[view1, view2])?;
    let noise = encoder_noise(encoder, views.batch(), rng);
    let adversaries = unsup_adversary(encoder, &views, attack, rng)?;
    simclr_urkle_terms(encoder, projector, &views, &adversaries, &noise, cfg, grads)
}

/// `-log` of the floored class probability: each class keeps at least
/// `exp(-m_bound)`, so the loss lies in `[0, m_bound]`.
pub fn bounded_nll(probs: &[f64], label: usize, m_bound: f64) -> Result<f64> {
    let c = probs.len();
    check_floor(m_bound, c)?;
    if label >= c {
        return Err(UrkleError::InvalidLabel { label, num_classes: c });
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || probs.iter().any(|&p| !(p >= 0.0)) {
        return Err(UrkleError::InvalidInput(format!("not a probability vector (sum {sum})")));
    }
    let py = probs[label];
    if py == 0.0 {
        return Ok(m_bound);
    }
    let floor = (-m_bound).exp();
    let k = 1.0 - floor * c as f64;
    Ok((-(py * k + floor).ln()).clamp(0.0, m_bound))
}

/// The floored probability vector used by [`bounded_nll`].
pub fn floored_probs(probs: &[f64], m_bound: f64) -> Result<Vec<f64>> {
    check_floor(m_bound, probs.len())?;
    let floor = (-m_bound).exp();
    let k = 1.0 - floor * probs.len() as f64;
    Ok(probs.iter().map(|p| p * k + floor).collect())
}

/// Mean cross-entropy of softmax logits and its gradient.
pub(crate) fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (f64, Tensor<T>) {
    let n = labels.len();
    let probs = softmax_rows(logits);
    let mut grad = probs.clone();
    let mut value = 0.0;
    let inv = T::lit(1.0 / n as f64);
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.item(i);
        let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
        value += lse - row[y].as_f64();
        let g = grad.item_mut(i);
        g[y] -= T::one();
        g.iter_mut().for_each(|v| *v *= inv);
    }
    (value / n as f64, grad)
}

/// Cross-entropy of the classifier on representations of `x`. With noise
/// the representation is one reparameterized sample per input, otherwise
/// the mean. The encoder receives gradients only when `train_encoder`.
pub fn classification_loss<T: Scalar>(
    encoder: &Encoder<T>,
    classifier: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    noise: &[T],
    train_encoder: bool,
    mut grads: Option<&mut ModelGrads<T>>,
) -> Result<LossBreakdown> {
    check_labels(labels, x.batch(), classifier.num_classes())?;
    let mode = mode_for(&grads);
    let enc_mode = if train_encoder { mode } else { Mode::Eval };
    let (g, etrace) = encoder.forward(x, enc_mode)?;
    let z = g.apply_noise(noise, 1);
    let (logits, ctrace) = classifier.net().forward(&z, mode)?;
    let (ce, dlogits) = cross_entropy(&logits, labels);
    if let Some(gr) = grads.as_deref_mut() {
        let dz = classifier.net().backward(&ctrace, &dlogits, Some(&mut gr.classifier));
        gr.record(Part::Classifier, classifier.net(), ctrace);
        if train_encoder {
            let mut gg = GaussianBatch::zeros(g.n, g.d);
            g.draw_backward(noise, &dz, 1, &mut gg);
            encoder.backward(&etrace, &gg, Some(&mut gr.encoder));
            gr.record(Part::Encoder, encoder.net(), etrace.net);
        }
    }
    Ok(LossBreakdown::combine(ce, 0.0, 0.0, 0.0, 0.0))
}

/// Supervised TRADES: cross-entropy at `x` plus `beta` times the
/// categorical KL between predictions at `x` and at the adversaries,
/// with the encoder used through its mean.
pub fn trades_loss<T: Scalar>(
    encoder: &Encoder<T>,
    classifier: &Classifier<T>,
    x: &Tensor<T>,
    adversaries: &Tensor<T>,
    labels: &[usize],
    beta: f64,
    mut grads: Option<&mut ModelGrads<T>>,
) -> Result<LossBreakdown> {
    let n = x.batch();
    check_labels(labels, n, classifier.num_classes())?;
    let mode = mode_for(&grads);
    let input = Tensor::concat(&[x, adversaries])?;
    let (g, etrace) = encoder.forward(&input, mode)?;
    let (logits, ctrace) = classifier.net().forward(&g.mean_tensor(), mode)?;
    let c = classifier.num_classes();
    let clean_logits = logits.slice_batch(0, n);
    let (ce, dclean) = cross_entropy(&clean_logits, labels);
    let probs = softmax_rows(&logits);
    let mut kl = 0.0;
    let mut dlogits = Tensor::zeros(logits.shape());
    let inv = 1.0 / n as f64;
    for i in 0..n {
        let p: Vec<f64> = probs.item(i).iter().map(|v| v.as_f64()).collect();
        let q: Vec<f64> = probs.item(n + i).iter().map(|v| v.as_f64()).collect();
        let lp = log_softmax(clean_logits.item(i));
        let lq = log_softmax(logits.item(n + i));
        let a: Vec<f64> = (0..c).map(|j| lp[j] - lq[j]).collect();
        let pa: f64 = (0..c).map(|j| p[j] * a[j]).sum();
        kl += pa;
        let dc = dlogits.item_mut(i);
        for j in 0..c {
            dc[j] = dclean.item(i)[j] + T::lit(beta * inv * p[j] * (a[j] - pa));
        }
        let da = dlogits.item_mut(n + i);
        for j in 0..c {
            da[j] = T::lit(beta * inv * (q[j] - p[j]));
        }
    }
    let loss = LossBreakdown::combine(ce, 0.0, kl * inv, 0.0, beta);
    if let Some(gr) = grads.as_deref_mut() {
        let dz = classifier.net().backward(&ctrace, &dlogits, Some(&mut gr.classifier));
        gr.record(Part::Classifier, classifier.net(), ctrace);
        let mut gg = GaussianBatch::zeros(g.n, g.d);
        gg.mean.copy_from_slice(dz.data());
        encoder.backward(&etrace, &gg, Some(&mut gr.encoder));
        gr.record(Part::Encoder, encoder.net(), etrace.net);
    }
    Ok(loss)
}

fn log_softmax<T: Scalar>(row: &[T]) -> Vec<f64> {
    let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v.as_f64() - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::tests::{set_linear, toy_autoencoder, toy_encoder};
    use crate::adversary::{kl_to_clean, recon_distance, reconstruct};
    use crate::gaussian::{kl_divergence, GaussianRepr};
    use crate::models::{init_bundle, ClassifierSpec, DecoderSpec, EncoderSpec, Likelihood, ModelSpec, ProjectorSpec};
    use crate::nn::LayerDesc;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    /// Direct double-sum evaluation, independent of the matrix path.
    fn brute_nt_xent(tuples: &[Vec<Vec<f64>>], tau: f64) -> f64 {
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in tuples.iter().enumerate() {
            for (a, za) in t.iter().enumerate() {
                for (p, zp) in t.iter().enumerate() {
                    if a == p {
                        continue;
                    }
                    let num = (cos(za, zp) / tau).exp();
                    let mut den = 0.0;
                    for (j, tj) in tuples.iter().enumerate() {
                        if j != i {
                            for v in tj {
                                den += (cos(za, v) / tau).exp();
                            }
                        }
                    }
                    total += -(num / den).ln();
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn nt_xent_identical_vectors() {
        let v = vec![0.3, -1.2, 0.5];
        let tuples = vec![vec![v.clone(), v.clone()], vec![v.clone(), v]];
        let got = nt_xent(&tuples, 0.5, None).unwrap();
        assert!((got - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nt_xent_hand_vectors_match_brute_force() {
        // Cosine similarities among these are 1, 0 and -1.
        let tuples = vec![
            vec![vec![1.0, 0.0], vec![2.0, 0.0]],
            vec![vec![0.0, 1.0], vec![-3.0, 0.0]],
        ];
        for tau in [0.5, 0.1, 1.0] {
            let got = nt_xent(&tuples, tau, None).unwrap();
            assert!((got - brute_nt_xent(&tuples, tau)).abs() < 1e-9);
        }
    }

    #[test]
    fn nt_xent_rejects_degenerate_inputs() {
        let one = vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]];
        assert!(matches!(nt_xent(&one, 0.5, None), Err(UrkleError::InvalidArgument(_))));
        let zero = vec![vec![vec![0.0, 0.0], vec![0.0, 1.0]], vec![vec![1.0, 0.0], vec![1.0, 1.0]]];
        assert!(matches!(nt_xent(&zero, 0.5, None), Err(UrkleError::Numeric(_))));
    }

    fn random_tuples(b: usize, m: usize, d: usize, seed: u64) -> Vec<Vec<Vec<f64>>> {
        let mut rng = seeded(seed);
        (0..b)
            .map(|_| (0..m).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn nt_xent_matches_brute_force(seed in 0u64..10_000, b in 2usize..5, m in 2usize..5, tau in 0.1f64..2.0) {
            let t = random_tuples(b, m, 3, seed);
            let got = nt_xent(&t, tau, None).unwrap();
            prop_assert!((got - brute_nt_xent(&t, tau)).abs() < 1e-9);
        }

        #[test]
        fn nt_xent_symmetries(seed in 0u64..10_000, scale in 0.01f64..100.0, shift in 1usize..4) {
            let t = random_tuples(4, 3, 5, seed);
            let base = nt_xent(&t, 0.5, None).unwrap();
            let mut rotated = t.clone();
            rotated.rotate_left(shift);
            prop_assert!((nt_xent(&rotated, 0.5, None).unwrap() - base).abs() < 1e-9);
            let scaled: Vec<Vec<Vec<f64>>> = t
                .iter()
                .map(|tu| tu.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect())
                .collect();
            prop_assert!((nt_xent(&scaled, 0.5, None).unwrap() - base).abs() < 1e-9);
        }

        #[test]
        fn bounded_nll_range_and_argmax(raw in prop::collection::vec(0.0f64..1.0, 10), y in 0usize..10, m in 2.31f64..8.0) {
            let s: f64 = raw.iter().sum::<f64>() + 1e-9;
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let p: Vec<f64> = { let t: f64 = p.iter().sum(); p.iter().map(|v| v / t).collect() };
            let l = bounded_nll(&p, y, m).unwrap();
            prop_assert!((0.0..=m).contains(&l));
            let f = floored_probs(&p, m).unwrap();
            prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b });
            prop_assert_eq!(argmax(&f), argmax(&p));
        }

        #[test]
        fn breakdown_recombines(t in -10.0f64..10.0, p in 0.0f64..10.0, r in 0.0f64..10.0, bv in 0.0f64..5.0, br in 0.0f64..10.0) {
            let l = LossBreakdown::combine(t, p, r, bv, br);
            prop_assert_eq!(l.total, t + bv * p + br * r);
        }
    }

    #[test]
    fn nt_xent_row_gradient() {
        let t = random_tuples(3, 4, 3, 7);
        let rows: Vec<f64> = t.iter().flatten().flatten().copied().collect();
        let ids: Vec<usize> = (0..12).map(|r| r / 4).collect();
        let h = Tensor::matrix(12, 3, rows).unwrap();
        let (_, g) = nt_xent_rows(&h, &ids, 0.5).unwrap();
        for k in 0..h.len() {
            let mut a = h.clone();
            let mut b = h.clone();
            a.data_mut()[k] += 1e-6;
            b.data_mut()[k] -= 1e-6;
            let num = (nt_xent_rows(&a, &ids, 0.5).unwrap().0 - nt_xent_rows(&b, &ids, 0.5).unwrap().0) / 2e-6;
            assert!((num - g.data()[k]).abs() <= 1e-4 * num.abs().max(1e-3), "{k}: {num} vs {}", g.data()[k]);
        }
    }

    #[test]
    fn bounded_nll_examples() {
        let uniform = vec![0.1; 10];
        assert!((bounded_nll(&uniform, 3, 3.0).unwrap() - 10f64.ln()).abs() < 1e-12);
        let mut one = vec![0.0; 10];
        one[0] = 1.0;
        assert_eq!(bounded_nll(&one, 4, 3.0).unwrap(), 3.0);
        let want = -(1.0 - 9.0 * (-3f64).exp()).ln();
        assert!((bounded_nll(&one, 0, 3.0).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.594_358_721_191_117).abs() < 1e-12);
        assert!(matches!(bounded_nll(&uniform, 0, 2.0), Err(UrkleError::Config(_))));
        assert!(matches!(bounded_nll(&uniform, 10, 3.0), Err(UrkleError::InvalidLabel { .. })));
    }

    #[test]
    fn objective_config_validation() {
        assert!(ObjectiveConfig::default().validate().is_ok());
        let c = ObjectiveConfig { m_bound: 2.0, ..Default::default() };
        assert!(c.validate().is_err());
        let c = ObjectiveConfig { tau: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
        let c = ObjectiveConfig { beta_robust: -1.0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    fn point(x: [f64; 2]) -> Tensor<f64> {
        Tensor::from_vec([1, 1, 2, 1], x.to_vec()).unwrap()
    }

    fn points(xs: &[[f64; 2]]) -> Tensor<f64> {
        Tensor::from_vec([xs.len(), 1, 2, 1], xs.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn urkle_loss_examples() {
        let e = toy_encoder([1.0, -2.0], 0.1, -0.5);
        let x = points(&[[0.2, 0.3], [0.7, 0.1]]);
        assert_eq!(urkle_loss(&e, &x, &x).unwrap(), 0.0);
        let flat = toy_encoder([0.0, 0.0], 0.3, 0.4);
        let adv = points(&[[0.25, 0.35], [0.6, 0.2]]);
        assert_eq!(urkle_loss(&flat, &x, &adv).unwrap(), 0.0);
        // Mean shifts 0.05 - 0.1 = -0.05 and -0.1 - 0.2 = -0.3 at variance e^-0.5.
        let want = 0.5 * (0.5 * 0.05f64.powi(2) / (-0.5f64).exp() + 0.5 * 0.3f64.powi(2) / (-0.5f64).exp());
        assert!((urkle_loss(&e, &x, &adv).unwrap() - want).abs() < 1e-12);
        assert!(matches!(urkle_loss(&e, &x, &point([0.1, 0.1])), Err(UrkleError::Contract(_))));
    }

    fn gaussian_decoder_1d() -> Decoder<f64> {
        let spec = DecoderSpec {
            layers: vec![
                LayerDesc::Linear { out_features: 2 },
                LayerDesc::Reshape {
                    channels: 1,
                    height: 2,
                    width: 1,
                },
            ],
            likelihood: Likelihood::Gaussian,
        };
        Decoder::new(spec, 1, [1, 2, 1], &mut seeded(0)).unwrap()
    }

    #[test]
    fn vae_prior_and_task_hand_values() {
        let cfg = ObjectiveConfig { beta_vae: 1.0, ..Default::default() };
        let x = points(&[[0.2, 0.9]]);
        let mut d = gaussian_decoder_1d();
        // Decoder ignores z and emits (0.5, 0.5).
        set_linear(d.net_mut(), 0, &[0.0, 0.0], &[0.5, 0.5]);
        let standard = toy_encoder([0.0, 0.0], 0.0, 0.0);
        let l = vae_objective(&standard, &d, &x, &cfg, &mut seeded(0), None).unwrap();
        assert_eq!(l.prior_term, 0.0);
        let want_task = 0.5 * (0.3f64.powi(2) + 0.4f64.powi(2)) + (2.0 * std::f64::consts::PI).ln();
        assert!((l.task_term - want_task).abs() < 1e-12);
        assert_eq!(l.robust_term, 0.0);
        assert!((l.total - (l.task_term + l.prior_term)).abs() < 1e-15);
        let shifted = toy_encoder([0.0, 0.0], 1.0, 0.0);
        let l = vae_objective(&shifted, &d, &x, &cfg, &mut seeded(0), None).unwrap();
        assert!((l.prior_term - 0.5).abs() < 1e-12);
        let wrong = Tensor::from_vec([1, 1, 1, 2], vec![0.2, 0.9]).unwrap();
        assert!(matches!(vae_objective(&standard, &d, &wrong, &cfg, &mut seeded(0), None), Err(UrkleError::Contract(_))));
    }

    #[test]
    fn vae_urkle_reductions() {
        let e = toy_encoder([1.5, -0.8], 0.2, -0.5);
        let d = gaussian_decoder_1d();
        let x = points(&[[0.4, 0.6], [0.1, 0.8]]);
        let attack = AttackConfig::training(0.1);
        let off = ObjectiveConfig { beta_robust: 0.0, beta_vae: 1.0, ..Default::default() };
        let a = vae_urkle_objective(&e, &d, &x, &attack, &off, &mut seeded(3), None).unwrap();
        let b = vae_objective(&e, &d, &x, &off, &mut seeded(3), None).unwrap();
        assert_eq!(a.total, b.total);
        let cfg = ObjectiveConfig { beta_vae: 1.0, ..Default::default() };
        let zero = AttackConfig::training(0.0);
        let c = vae_urkle_objective(&e, &d, &x, &zero, &cfg, &mut seeded(3), None).unwrap();
        assert_eq!(c.robust_term, 0.0);
        assert_eq!(c.total, b.total);
    }

    fn grid_max(x: [f64; 2], eps: f64, f: impl Fn(&Tensor<f64>) -> f64) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for i in 0..=40 {
            for j in 0..=40 {
                best = best.max(f(&point([x[0] - eps + i as f64 * 0.005, x[1] - eps + j as f64 * 0.005])));
            }
        }
        best
    }

    #[test]
    fn vae_urkle_robust_term_matches_grid() {
        let e = toy_encoder([1.5, -0.8], 0.2, -0.5);
        let d = gaussian_decoder_1d();
        let x = [0.4, 0.6];
        let clean = e.encode(&point(x)).unwrap();
        let best = grid_max(x, 0.1, |u| kl_to_clean(&e, &clean, u).unwrap().0);
        let attack = AttackConfig::new(0.1, 0.01, 40);
        let l = vae_urkle_objective(&e, &d, &point(x), &attack, &ObjectiveConfig::default(), &mut seeded(1), None).unwrap();
        assert!((l.robust_term - best).abs() < 1e-3, "{} vs {best}", l.robust_term);
    }

    #[test]
    fn ae_trades_examples() {
        // Identity autoencoder on a 1-D input.
        let spec = EncoderSpec {
            backbone: vec![LayerDesc::Linear { out_features: 2 }],
            deterministic: true,
            ..EncoderSpec::mlp([1, 1, 1], 1, 1)
        };
        let mut e = Encoder::<f64>::new(spec, &mut seeded(0)).unwrap();
        set_linear(e.net_mut(), 0, &[1.0, 0.0], &[0.0, 0.0]);
        let d = Decoder::new(
            DecoderSpec {
                layers: vec![LayerDesc::Linear { out_features: 1 }],
                likelihood: Likelihood::Gaussian,
            },
            1,
            [1, 1, 1],
            &mut seeded(0),
        )
        .map(|mut d: Decoder<f64>| {
            set_linear(d.net_mut(), 0, &[1.0], &[0.0]);
            d
        })
        .unwrap();
        let x = Tensor::from_vec([1, 1, 1, 1], vec![0.5]).unwrap();
        let l = ae_trades_objective(&e, &d, &x, &AttackConfig::training(0.1), 6.0, &mut seeded(0), None).unwrap();
        assert!((l.robust_term - 0.01).abs() < 1e-12, "{}", l.robust_term);
        assert!(l.task_term.abs() < 1e-20);
        let l = ae_trades_objective(&e, &d, &x, &AttackConfig::training(0.0), 6.0, &mut seeded(0), None).unwrap();
        assert_eq!(l.robust_term, 0.0);

        let (e, d) = toy_autoencoder();
        let x = [0.4, 0.6];
        let target = reconstruct(&e, &d, &point(x)).unwrap();
        let best = grid_max(x, 0.1, |u| recon_distance(&e, &d, &target, u).unwrap().0);
        let l = ae_trades_objective(&e, &d, &point(x), &AttackConfig::new(0.1, 0.01, 40), 1.0, &mut seeded(2), None).unwrap();
        assert!((l.robust_term - best).abs() < 1e-3);
    }

    fn micro_bundle(seed: u64) -> ModelBundle<f64> {
        let spec = ModelSpec {
            encoder: EncoderSpec {
                backbone: vec![
                    LayerDesc::Linear { out_features: 3 },
                    LayerDesc::Relu,
                    LayerDesc::Linear { out_features: 4 },
                ],
                ..EncoderSpec::mlp([1, 3, 1], 1, 2)
            },
            decoder: Some(DecoderSpec {
                layers: vec![
                    LayerDesc::Linear { out_features: 3 },
                    LayerDesc::Reshape {
                        channels: 1,
                        height: 3,
                        width: 1,
                    },
                ],
                likelihood: Likelihood::Bernoulli,
            }),
            projector: Some(ProjectorSpec { hidden: 2, out: 3 }),
            classifier: Some(ClassifierSpec {
                hidden: 2,
                num_classes: 3,
            }),
        };
        let b = init_bundle::<f64>(&spec, seed).unwrap();
        for net in [b.encoder.net(), b.decoder.as_ref().unwrap().net(), b.projector.as_ref().unwrap()] {
            assert!(net.num_parameters() <= 50);
        }
        assert!(b.classifier.as_ref().unwrap().net().num_parameters() <= 50);
        b
    }

    fn bundle_params(b: &mut ModelBundle<f64>) -> Vec<&mut Tensor<f64>> {
        let mut v = b.encoder.net_mut().params_mut();
        v.extend(b.decoder.as_mut().unwrap().net_mut().params_mut());
        v.extend(b.projector.as_mut().unwrap().params_mut());
        v.extend(b.classifier.as_mut().unwrap().net_mut().params_mut());
        v
    }

    /// Central differences over every parameter, evaluated in training mode.
    fn check_gradients(b: ModelBundle<f64>, f: &dyn Fn(&ModelBundle<f64>, Option<&mut ModelGrads<f64>>) -> f64) {
        check_gradients_from(b, 0, f)
    }

    /// As [`check_gradients`], but the first `frozen` parameter tensors must
    /// receive no gradient at all.
    fn check_gradients_from(
        mut b: ModelBundle<f64>,
        frozen: usize,
        f: &dyn Fn(&ModelBundle<f64>, Option<&mut ModelGrads<f64>>) -> f64,
    ) {
        let mut grads = ModelGrads::for_bundle(&b);
        f(&b, Some(&mut grads));
        let analytic: Vec<f64> = grads.all().flat_map(|t| t.data().to_vec()).collect();
        let sizes: Vec<usize> = bundle_params(&mut b).iter().map(|t| t.len()).collect();
        let h = 1e-5;
        let mut k = 0;
        let mut nonzero = 0;
        for (ti, &len) in sizes.iter().enumerate() {
            if ti < frozen {
                assert!(analytic[k..k + len].iter().all(|&a| a == 0.0));
                k += len;
                continue;
            }
            for j in 0..len {
                let eval = |b: &mut ModelBundle<f64>, delta: f64| {
                    bundle_params(b)[ti].data_mut()[j] += delta;
                    let v = f(b, Some(&mut ModelGrads::for_bundle(b)));
                    bundle_params(b)[ti].data_mut()[j] -= delta;
                    v
                };
                let num = (eval(&mut b, h) - eval(&mut b, -h)) / (2.0 * h);
                let a = analytic[k];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-5);
                assert!(rel <= 1e-4, "param {ti}[{j}]: analytic {a} vs numeric {num}");
                nonzero += (a != 0.0) as usize;
                k += 1;
            }
        }
        assert_eq!(k, analytic.len());
        assert!(nonzero > 0);
    }

    fn micro_inputs(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = seeded(seed);
        Tensor::from_vec([n, 1, 3, 1], (0..n * 3).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap()
    }

    #[test]
    fn vae_urkle_gradients() {
        let x = micro_inputs(3, 1);
        let adv = x.map(|v| v + 0.07);
        let noise: Vec<f64> = normals(6, &mut seeded(2));
        let cfg = ObjectiveConfig { beta_vae: 0.7, beta_robust: 2.0, ..Default::default() };
        check_gradients(micro_bundle(3), &|b, g| {
            vae_terms(&b.encoder, b.decoder.as_ref().unwrap(), &x, Some(&adv), &noise, &cfg, g).unwrap().total
        });
    }

    #[test]
    fn gaussian_vae_gradients() {
        let x = micro_inputs(2, 4);
        let noise: Vec<f64> = normals(4, &mut seeded(5));
        let cfg = ObjectiveConfig { beta_vae: 1.0, ..Default::default() };
        let mut b = micro_bundle(6);
        b.spec.decoder.as_mut().unwrap().likelihood = Likelihood::Gaussian;
        let dspec = b.spec.decoder.clone().unwrap();
        let mut d = Decoder::new(dspec, 2, [1, 3, 1], &mut seeded(0)).unwrap();
        *d.net_mut() = b.decoder.as_ref().unwrap().net().clone();
        b.decoder = Some(d);
        check_gradients(b, &|b, g| {
            vae_terms(&b.encoder, b.decoder.as_ref().unwrap(), &x, None, &noise, &cfg, g).unwrap().total
        });
    }

    #[test]
    fn ae_trades_gradients() {
        let x = micro_inputs(3, 7);
        let adv = x.map(|v| v - 0.05);
        check_gradients(micro_bundle(8), &|b, g| {
            ae_trades_terms(&b.encoder, b.decoder.as_ref().unwrap(), &x, &adv, 1.5, g).unwrap().total
        });
    }

    #[test]
    fn simclr_urkle_gradients() {
        let views = micro_inputs(6, 9);
        let adv = views.map(|v| v + 0.04);
        let noise: Vec<f64> = normals(12, &mut seeded(10));
        let cfg = ObjectiveConfig { beta_robust: 3.0, ..Default::default() };
        check_gradients(micro_bundle(11), &|b, g| {
            simclr_urkle_terms(&b.encoder, b.projector.as_ref().unwrap(), &views, &adv, &noise, &cfg, g)
                .unwrap()
                .total
        });
    }

    #[test]
    fn supervised_gradients() {
        let x = micro_inputs(4, 12);
        let adv = x.map(|v| v + 0.03);
        let labels = [0, 2, 1, 2];
        let noise: Vec<f64> = normals(8, &mut seeded(13));
        for train_encoder in [false, true] {
            let frozen = if train_encoder { 0 } else { 4 };
            check_gradients_from(micro_bundle(14), frozen, &|b, g| {
                classification_loss(&b.encoder, b.classifier.as_ref().unwrap(), &x, &labels, &noise, train_encoder, g)
                    .unwrap()
                    .total
            });
        }
        check_gradients(micro_bundle(15), &|b, g| {
            trades_loss(&b.encoder, b.classifier.as_ref().unwrap(), &x, &adv, &labels, 2.0, g).unwrap().total
        });
    }

    #[test]
    fn simclr_reduces_to_duplicated_nt_xent() {
        let b = micro_bundle(20);
        let v1 = micro_inputs(3, 21);
        let v2 = micro_inputs(3, 22);
        let cfg = ObjectiveConfig { beta_robust: 0.0, ..Default::default() };
        let proj = b.projector.as_ref().unwrap();
        let l = simclr_urkle_objective(&b.encoder, proj, &v1, &v2, &AttackConfig::training(0.0), &cfg, &mut seeded(5), None)
            .unwrap();
        assert_eq!(l.robust_term, 0.0);
        let noise: Vec<f64> = normals(12, &mut seeded(5));
        let views = Tensor::concat(&[&v1, &v2]).unwrap();
        let z = b.encoder.encode(&views).unwrap().apply_noise(&noise, 1);
        let h = proj.infer(&z, Mode::Eval).unwrap();
        let tuples: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|i| {
                let a = h.item(i).to_vec();
                let c = h.item(3 + i).to_vec();
                vec![a.clone(), c.clone(), a, c]
            })
            .collect();
        assert!((l.task_term - brute_nt_xent(&tuples, cfg.tau)).abs() < 1e-9);
    }

    #[test]
    fn simclr_end_to_end_by_hand() {
        let b = micro_bundle(30);
        let v1 = micro_inputs(2, 31);
        let v2 = micro_inputs(2, 32);
        let cfg = ObjectiveConfig { beta_robust: 2.5, ..Default::default() };
        let attack = AttackConfig::training(0.1);
        let proj = b.projector.as_ref().unwrap();
        let l = simclr_urkle_objective(&b.encoder, proj, &v1, &v2, &attack, &cfg, &mut seeded(6), None).unwrap();

        let mut rng = seeded(6);
        let noise: Vec<f64> = normals(8, &mut rng);
        let views = Tensor::concat(&[&v1, &v2]).unwrap();
        let adv = unsup_adversary(&b.encoder, &views, &attack, &mut rng).unwrap();
        let reps = |x: &Tensor<f64>, r: usize| -> (GaussianRepr<f64>, Vec<f64>) {
            let g = b.encoder.encode(&x.slice_batch(r, r + 1)).unwrap().get(0);
            let z: Vec<f64> = (0..2)
                .map(|j| g.mean()[j] + (0.5 * g.log_var()[j]).exp() * noise[r * 2 + j])
                .collect();
            let h = proj.infer(&Tensor::matrix(1, 2, z).unwrap(), Mode::Eval).unwrap();
            (g, h.data().to_vec())
        };
        let mut tuples = vec![Vec::new(), Vec::new()];
        let mut kl = 0.0;
        for (i, tuple) in tuples.iter_mut().enumerate() {
            for view in [i, 2 + i] {
                let (gc, hc) = reps(&views, view);
                let (ga, _) = reps(&adv, view);
                kl += kl_divergence(&gc, &ga).unwrap();
                tuple.push(hc);
            }
            for view in [i, 2 + i] {
                tuple.push(reps(&adv, view).1);
            }
        }
        let want = brute_nt_xent(&tuples, cfg.tau) + cfg.beta_robust * kl / 4.0;
        assert!((l.total - want).abs() < 1e-6, "{} vs {want}", l.total);
        assert!(l.robust_term > 0.0);
    }
}
