//! l∞ projection and sign-gradient PGD, plus the adversaries built on it:
//! unsupervised KL, supervised cross-entropy (with expectation over
//! sampled representations), categorical-KL (TRADES) and reconstruction
//! distance.

use rand::Rng;

use crate::error::{contract, Result, UrkleError};
use crate::gaussian::GaussianBatch;
use crate::models::{softmax_rows, Classifier, Decoder, Encoder};
use crate::nn::Mode;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub random_init: bool,
    pub init_radius: f64,
    pub eot_samples: usize,
    pub input_min: f64,
    pub input_max: f64,
}

impl AttackConfig {
    /// Random start over the whole ball, one sample per step, inputs in [0, 1].
    pub fn new(epsilon: f64, alpha: f64, steps: usize) -> Self {
        Self {
            epsilon,
            alpha,
            steps,
            random_init: true,
            init_radius: epsilon,
            eot_samples: 1,
            input_min: 0.0,
            input_max: 1.0,
        }
    }

    /// Inner maximization during training: 10 steps of `2/255 * (ε / (8/255))`.
    pub fn training(epsilon: f64) -> Self {
        Self::scheduled(epsilon, epsilon / 4.0, 10, 1)
    }

    /// Evaluation attack: 40 steps of ε/10 with 5 samples per step.
    pub fn evaluation(epsilon: f64) -> Self {
        Self::scheduled(epsilon, epsilon / 10.0, 40, 5)
    }

    /// Inner maximization for the bound audit's KL term: 50 steps of ε/10.
    pub fn audit(epsilon: f64) -> Self {
        Self::scheduled(epsilon, epsilon / 10.0, 50, 1)
    }

    fn scheduled(epsilon: f64, alpha: f64, steps: usize, eot: usize) -> Self {
        // A degenerate ball needs no steps, and a zero step would be invalid.
        let steps = if epsilon > 0.0 { steps } else { 0 };
        let alpha = if epsilon > 0.0 { alpha } else { 1.0 };
        Self {
            eot_samples: eot,
            ..Self::new(epsilon, alpha, steps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(UrkleError::Config(m.into()));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be finite and non-negative");
        }
        if self.steps > 0 && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive when steps > 0");
        }
        if !(self.init_radius >= 0.0 && self.init_radius <= self.epsilon) {
            return bad("init_radius must lie in [0, epsilon]");
        }
        if self.eot_samples == 0 {
            return bad("eot_samples must be at least 1");
        }
        if !(self.input_min < self.input_max) {
            return bad("input_min must be below input_max");
        }
        Ok(())
    }
}

/// Clamps `candidate` into the ε-ball around `reference`, then into the
/// valid input range.
pub fn project_linf<T: Scalar>(candidate: &Tensor<T>, reference: &Tensor<T>, cfg: &AttackConfig) -> Result<Tensor<T>> {
    if candidate.shape() != reference.shape() {
        return Err(contract(format!(
            "candidate {:?} and reference {:?} differ in shape",
            candidate.shape(),
            reference.shape()
        )));
    }
    let mut out = candidate.clone();
    project_in_place(&mut out, reference, cfg);
    Ok(out)
}

fn project_in_place<T: Scalar>(x: &mut Tensor<T>, reference: &Tensor<T>, cfg: &AttackConfig) {
    let eps = T::lit(cfg.epsilon);
    let (lo, hi) = (T::lit(cfg.input_min), T::lit(cfg.input_max));
    for (v, &r) in x.data_mut().iter_mut().zip(reference.data()) {
        *v = v.max(r - eps).min(r + eps).max(lo).min(hi);
    }
}

fn sign<T: Scalar>(g: T) -> T {
    if g > T::zero() {
        T::one()
    } else if g < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Sign-gradient ascent on `objective` inside `A(x)` ∩ input range.
///
/// `objective` returns its value and gradient at a point; it receives the
/// noise source so stochastic objectives draw fresh samples per step.
pub fn pgd_maximize<T, R, F>(mut objective: F, x: &Tensor<T>, cfg: &AttackConfig, rng: &mut R) -> Result<Tensor<T>>
where
    T: Scalar,
    R: Rng + ?Sized,
    F: FnMut(&Tensor<T>, &mut R) -> Result<(f64, Tensor<T>)>,
{
    cfg.validate()?;
    let mut cur = x.clone();
    if cfg.random_init && cfg.init_radius > 0.0 {
        let r = cfg.init_radius;
        for v in cur.data_mut() {
            *v += T::lit(rng.random_range(-r..=r));
        }
    }
    project_in_place(&mut cur, x, cfg);
    let alpha = T::lit(cfg.alpha);
    for step in 0..cfg.steps {
        let (_, grad) = objective(&cur, rng)?;
        if grad.shape() != cur.shape() {
            return Err(contract("objective gradient shape differs from its input"));
        }
        if !grad.all_finite() {
            return Err(UrkleError::NonFiniteGradient { step });
        }
        for (v, &g) in cur.data_mut().iter_mut().zip(grad.data()) {
            *v += alpha * sign(g);
        }
        project_in_place(&mut cur, x, cfg);
    }
    Ok(cur)
}

fn require_random_init(cfg: &AttackConfig, what: &str) -> Result<()> {
    if cfg.random_init {
        Ok(())
    } else {
        Err(UrkleError::Config(format!(
            "{what} requires random_init: its gradient vanishes at the clean input"
        )))
    }
}

/// Summed `KL[clean_i || encoder(x'_i)]` and its input gradient. The clean
/// distributions are constants.
pub fn kl_to_clean<T: Scalar>(encoder: &Encoder<T>, clean: &GaussianBatch<T>, x: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let (q, trace) = encoder.forward(x, Mode::Eval)?;
    let kl = clean.kl_rows(&q)?;
    let mut gq = GaussianBatch::zeros(q.n, q.d);
    clean.kl_rows_backward(&q, T::one(), None, Some(&mut gq));
    let grad = encoder.backward(&trace, &gq, None);
    Ok((kl.iter().map(|v| v.as_f64()).sum(), grad))
}

/// Unsupervised adversary: maximizes the KL between the clean
/// representation distribution and the perturbed one.
pub fn unsup_adversary<T: Scalar, R: Rng + ?Sized>(
    encoder: &Encoder<T>,
    x: &Tensor<T>,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor<T>> {
    require_random_init(cfg, "the unsupervised adversary")?;
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let clean = encoder.encode(x)?;
    pgd_maximize(|u, _| kl_to_clean(encoder, &clean, u), x, cfg, rng)
}

pub(crate) fn check_labels(labels: &[usize], n: usize, num_classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(contract(format!("{} labels for {} inputs", labels.len(), n)));
    }
    match labels.iter().find(|&&y| y >= num_classes) {
        Some(&label) => Err(UrkleError::InvalidLabel { label, num_classes }),
        None => Ok(()),
    }
}

fn copies_for<T: Scalar>(encoder: &Encoder<T>, requested: usize) -> usize {
    if encoder.is_deterministic() {
        1
    } else {
        requested
    }
}

/// Summed `-log((1/S) Σ_s p(y|z_s))` over the batch with fresh samples
/// `z_s ~ encoder(x)`, and its input gradient.
pub fn predictive_nll<T: Scalar, R: Rng + ?Sized>(
    encoder: &Encoder<T>,
    classifier: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    samples: usize,
    rng: &mut R,
) -> Result<(f64, Tensor<T>)> {
    let n = x.batch();
    let c = classifier.num_classes();
    let s = copies_for(encoder, samples);
    let (g, etrace) = encoder.forward(x, Mode::Eval)?;
    let (z, eps) = g.draw(s, !encoder.is_deterministic(), rng);
    let (logits, ctrace) = classifier.net().forward(&z, Mode::Eval)?;
    let probs = softmax_rows(&logits);
    let mut dlogits = Tensor::zeros(logits.shape());
    let mut value = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        // log p_s(y) = l_y - logsumexp(l), combined across samples in log space.
        let logp: Vec<f64> = (0..s)
            .map(|k| {
                let row = logits.item(k * n + i);
                let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
                row[y].as_f64() - lse
            })
            .collect();
        let m = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total = logp.iter().map(|v| (v - m).exp()).sum::<f64>();
        value -= m + total.ln() - (s as f64).ln();
        for k in 0..s {
            let w = T::lit((logp[k] - m).exp() / total);
            let p = probs.item(k * n + i);
            let d = dlogits.item_mut(k * n + i);
            for j in 0..c {
                let onehot = if j == y { T::one() } else { T::zero() };
                d[j] = -w * (onehot - p[j]);
            }
        }
    }
    let dz = classifier.net().backward(&ctrace, &dlogits, None);
    let mut gg = GaussianBatch::zeros(g.n, g.d);
    g.draw_backward(&eps, &dz, s, &mut gg);
    Ok((value, encoder.backward(&etrace, &gg, None)))
}

/// Supervised adversary against the Monte-Carlo predictive distribution,
/// `cfg.eot_samples` fresh representation samples per step.
pub fn sup_adversary<T: Scalar, R: Rng + ?Sized>(
    encoder: &Encoder<T>,
    classifier: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor<T>> {
    check_labels(labels, x.batch(), classifier.num_classes())?;
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    pgd_maximize(
        |u, r| predictive_nll(encoder, classifier, u, labels, cfg.eot_samples, r),
        x,
        cfg,
        rng,
    )
}

/// Monte-Carlo categorical predictive `(1/S) Σ_s softmax(classifier(z_s))`
/// for every input, as an (n, C) tensor.
pub fn predictive_probs<T: Scalar, R: Rng + ?Sized>(
    encoder: &Encoder<T>,
    classifier: &Classifier<T>,
    x: &Tensor<T>,
    samples: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let n = x.batch();
    let s = copies_for(encoder, samples);
    let g = encoder.encode(x)?;
    let (z, _) = g.draw(s, !encoder.is_deterministic(), rng);
    let probs = classifier.probs(&z, Mode::Eval)?;
    Ok(average_copies(&probs, n, s))
}

fn average_copies<T: Scalar>(probs: &Tensor<T>, n: usize, s: usize) -> Tensor<T> {
    let c = probs.item_len();
    let inv = T::lit(1.0 / s as f64);
    let mut out = Tensor::zeros([n, c, 1, 1]);
    for k in 0..s {
        for i in 0..n {
            for (o, &p) in out.item_mut(i).iter_mut().zip(probs.item(k * n + i)) {
                *o += p * inv;
            }
        }
    }
    out
}

const PROB_FLOOR: f64 = 1e-12;

/// Summed categorical `KL[clean_i || predictive(x'_i)]` and its input
/// gradient; `clean` is an (n, C) tensor of constant probabilities.
pub fn categorical_kl_to_clean<T: Scalar, R: Rng + ?Sized>(
    encoder: &Encoder<T>,
    classifier: &Classifier<T>,
    clean: &Tensor<T>,
    x: &Tensor<T>,
    samples: usize,
    rng: &mut R,
) -> Result<(f64, Tensor<T>)> {
    let n = x.batch();
    let c = classifier.num_classes();
    let s = copies_for(encoder, samples);
    let (g, etrace) = encoder.forward(x, Mode::Eval)?;
    let (z, eps) = g.draw(s, !encoder.is_deterministic(), rng);
    let (logits, ctrace) = classifier.net().forward(&z, Mode::Eval)?;
    let probs = softmax_rows(&logits);
    let q = average_copies(&probs, n, s);
    let mut value = 0.0;
    let mut gq = vec![T::zero(); n * c];
    for i in 0..n {
        for j in 0..c {
            let p = clean.item(i)[j].as_f64();
            let qj = q.item(i)[j].as_f64().max(PROB_FLOOR);
            if p > 0.0 {
                value += p * (p.max(PROB_FLOOR) / qj).ln();
            }
            gq[i * c + j] = T::lit(-p / qj);
        }
    }
    let inv = T::lit(1.0 / s as f64);
    let mut dlogits = Tensor::zeros(logits.shape());
    for k in 0..s {
        for i in 0..n {
            let p = probs.item(k * n + i);
            let gi = &gq[i * c..(i + 1) * c];
            let dot: T = p.iter().zip(gi).map(|(&a, &b)| a * b).sum();
            for (j, d) in dlogits.item_mut(k * n + i).iter_mut().enumerate() {
                *d = inv * p[j] * (gi[j] - dot);
            }
        }
    }
    let dz = classifier.net().backward(&ctrace, &dlogits, None);
    let mut gg = GaussianBatch::zeros(g.n, g.d);
    g.draw_backward(&eps, &dz, s, &mut gg);
    Ok((value, encoder.backward(&etrace, &gg, None)))
}

/// TRADES-style adversary: maximizes the categorical KL between the
/// predictive distribution at `x` and at the perturbed point.
pub fn trades_adversary<T: Scalar, R: Rng + ?Sized>(
    encoder: &Encoder<T>,
    classifier: &Classifier<T>,
    x: &Tensor<T>,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor<T>> {
    require_random_init(cfg, "the TRADES adversary")?;
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let clean = predictive_probs(encoder, classifier, x, cfg.eot_samples, rng)?;
    pgd_maximize(
        |u, r| categorical_kl_to_clean(encoder, classifier, &clean, u, cfg.eot_samples, r),
        x,
        cfg,
        rng,
    )
}

/// Reconstruction of `x` through the encoder mean and the decoder, in data
/// space.
pub fn reconstruct<T: Scalar>(encoder: &Encoder<T>, decoder: &Decoder<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let z = encoder.encode(x)?.mean_tensor();
    let out = decoder.net().infer(&z, Mode::Eval)?;
    Ok(decoder.reconstruct(&out))
}

/// Summed `‖h(g(x'_i)) - target_i‖²` and its input gradient.
pub fn recon_distance<T: Scalar>(
    encoder: &Encoder<T>,
    decoder: &Decoder<T>,
    target: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<(f64, Tensor<T>)> {
    let (g, etrace) = encoder.forward(x, Mode::Eval)?;
    let (out, dtrace) = decoder.net().forward(&g.mean_tensor(), Mode::Eval)?;
    let r = decoder.reconstruct(&out);
    let mut value = 0.0;
    let diff: Vec<T> = r.data().iter().zip(target.data()).map(|(&a, &b)| a - b).collect();
    for &d in &diff {
        value += d.as_f64() * d.as_f64();
    }
    let dr = Tensor::from_vec(r.shape(), diff.iter().map(|&d| d + d).collect())?;
    let dout = decoder.reconstruct_backward(&out, &dr);
    let dz = decoder.net().backward(&dtrace, &dout, None);
    let mut gg = GaussianBatch::zeros(g.n, g.d);
    gg.mean.copy_from_slice(dz.data());
    Ok((value, encoder.backward(&etrace, &gg, None)))
}

/// Adversary maximizing the squared distance between reconstructions of
/// the clean and perturbed inputs (encoder used through its mean).
pub fn recon_adversary<T: Scalar, R: Rng + ?Sized>(
    encoder: &Encoder<T>,
    decoder: &Decoder<T>,
    x: &Tensor<T>,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor<T>> {
    require_random_init(cfg, "the reconstruction adversary")?;
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let target = reconstruct(encoder, decoder, x)?;
    pgd_maximize(|u, _| recon_distance(encoder, decoder, &target, u), x, cfg, rng)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::models::{ClassifierSpec, DecoderSpec, EncoderSpec, Likelihood};
    use crate::nn::{Layer, LayerDesc, Sequential};
    use crate::rng::{seeded, stream};
    use proptest::prelude::*;
    use rand::Rng;

    pub(crate) fn set_linear(net: &mut Sequential<f64>, index: usize, weight: &[f64], bias: &[f64]) {
        match &mut net.layers_mut()[index] {
            Layer::Linear(l) => {
                l.weight.data_mut().copy_from_slice(weight);
                l.bias.data_mut().copy_from_slice(bias);
            }
            _ => panic!("layer {index} is not linear"),
        }
    }

    /// 2-D input, 1-D latent: mean = w·x + b, constant log-variance.
    pub(crate) fn toy_encoder(w: [f64; 2], b: f64, log_var: f64) -> Encoder<f64> {
        let spec = EncoderSpec {
            backbone: vec![LayerDesc::Linear { out_features: 2 }],
            ..EncoderSpec::mlp([1, 2, 1], 1, 1)
        };
        let mut e = Encoder::new(spec, &mut seeded(0)).unwrap();
        set_linear(e.net_mut(), 0, &[w[0], w[1], 0.0, 0.0], &[b, log_var]);
        e
    }

    /// Linear two-class classifier on a 1-D latent.
    pub(crate) fn toy_classifier(w: f64, b: f64) -> Classifier<f64> {
        let spec = ClassifierSpec {
            hidden: 1,
            num_classes: 2,
        };
        let mut net = Sequential::build([1, 1, 1], &[LayerDesc::Linear { out_features: 2 }], &mut seeded(0)).unwrap();
        set_linear(&mut net, 0, &[w, -w], &[b, -b]);
        Classifier::from_net(spec, net).unwrap()
    }

    fn point(x: [f64; 2]) -> Tensor<f64> {
        Tensor::from_vec([1, 1, 2, 1], x.to_vec()).unwrap()
    }

    /// Maximum of `f` over the ε-ball around `x` on a grid of the given step.
    fn grid_max(x: [f64; 2], eps: f64, res: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> f64 {
        let k = (2.0 * eps / res).round() as i64;
        let mut best = f64::NEG_INFINITY;
        for i in 0..=k {
            for j in 0..=k {
                let u = [x[0] - eps + i as f64 * res, x[1] - eps + j as f64 * res];
                best = best.max(f(&point(u)));
            }
        }
        best
    }

    fn oracle_cfg() -> AttackConfig {
        AttackConfig::new(0.1, 0.01, 40)
    }

    #[test]
    fn projection_examples() {
        let cfg = AttackConfig::new(0.1, 0.01, 1);
        let r = Tensor::from_vec([1, 1, 3, 1], vec![0.5f64, 0.3, 0.7]).unwrap();
        let inside = Tensor::from_vec([1, 1, 3, 1], vec![0.55, 0.25, 0.7]).unwrap();
        assert_eq!(project_linf(&inside, &r, &cfg).unwrap(), inside);
        let far = r.map(|v| v + 0.2);
        let p = project_linf(&far, &r, &cfg).unwrap();
        for (a, b) in p.data().iter().zip(r.data()) {
            assert!((a - (b + 0.1)).abs() < 1e-15);
        }
        let other = Tensor::<f64>::zeros([1, 1, 2, 1]);
        assert!(matches!(project_linf(&other, &r, &cfg), Err(UrkleError::Contract(_))));
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::new(0.1, 0.01, 10).validate().is_ok());
        assert!(AttackConfig::new(-0.1, 0.01, 10).validate().is_err());
        assert!(AttackConfig::new(0.1, 0.0, 10).validate().is_err());
        assert!(AttackConfig::new(0.1, 0.0, 0).validate().is_ok());
        let mut c = AttackConfig::new(0.1, 0.01, 10);
        c.init_radius = 0.2;
        assert!(c.validate().is_err());
        c.init_radius = 0.05;
        c.input_min = 1.0;
        assert!(c.validate().is_err());
        assert!(AttackConfig::evaluation(0.0).validate().is_ok());
        assert_eq!(AttackConfig::training(8.0 / 255.0).alpha, 2.0 / 255.0);
    }

    #[test]
    fn linear_objective_reaches_vertex() {
        let c = [0.7, -1.3, 0.0, 2.0];
        let x = Tensor::from_vec([1, 1, 4, 1], vec![0.5, 0.4, 0.6, 0.3]).unwrap();
        let mut cfg = AttackConfig::new(0.1, 0.03, 4);
        cfg.random_init = false;
        let grad = Tensor::from_vec([1, 1, 4, 1], c.to_vec()).unwrap();
        let out = pgd_maximize(
            |u, _| Ok((u.data().iter().zip(&c).map(|(a, b)| a * b).sum(), grad.clone())),
            &x,
            &cfg,
            &mut seeded(1),
        )
        .unwrap();
        for j in 0..4 {
            let want = x.data()[j] + 0.1 * if c[j] == 0.0 { 0.0 } else { c[j].signum() };
            assert!((out.data()[j] - want).abs() < 1e-12, "{j}: {} vs {want}", out.data()[j]);
        }
    }

    #[test]
    fn zero_gradient_keeps_input() {
        let x = Tensor::from_vec([1, 1, 3, 1], vec![0.2, 0.5, 0.9]).unwrap();
        let mut cfg = AttackConfig::new(0.1, 0.01, 10);
        cfg.random_init = false;
        let out = pgd_maximize(|u, _| Ok((0.0, Tensor::zeros(u.shape()))), &x, &cfg, &mut seeded(0)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn non_finite_gradient_names_step() {
        let x = Tensor::from_vec([1, 1, 1, 1], vec![0.5f64]).unwrap();
        let cfg = AttackConfig::new(0.1, 0.01, 5);
        let mut calls = 0;
        let err = pgd_maximize(
            |u, _| {
                calls += 1;
                let g = if calls == 3 { f64::NAN } else { 1.0 };
                Ok((0.0, Tensor::full(u.shape(), g)))
            },
            &x,
            &cfg,
            &mut seeded(0),
        )
        .unwrap_err();
        assert!(matches!(err, UrkleError::NonFiniteGradient { step: 2 }));
    }

    #[test]
    fn kl_adversaries_need_random_init() {
        let e = toy_encoder([1.0, 0.5], 0.0, 0.0);
        let mut cfg = oracle_cfg();
        cfg.random_init = false;
        let x = point([0.5, 0.5]);
        assert!(matches!(unsup_adversary(&e, &x, &cfg, &mut seeded(0)), Err(UrkleError::Config(_))));
        let c = toy_classifier(1.0, 0.0);
        assert!(matches!(trades_adversary(&e, &c, &x, &cfg, &mut seeded(0)), Err(UrkleError::Config(_))));
    }

    #[test]
    fn zero_epsilon_returns_input() {
        let e = toy_encoder([1.0, 0.5], 0.1, -1.0);
        let c = toy_classifier(2.0, 0.3);
        let x = point([0.3, 0.6]);
        let cfg = AttackConfig::evaluation(0.0);
        assert_eq!(unsup_adversary(&e, &x, &cfg, &mut seeded(0)).unwrap(), x);
        assert_eq!(sup_adversary(&e, &c, &x, &[1], &cfg, &mut seeded(0)).unwrap(), x);
        assert_eq!(trades_adversary(&e, &c, &x, &cfg, &mut seeded(0)).unwrap(), x);
    }

    #[test]
    fn constant_encoder_gives_zero_kl() {
        let e = toy_encoder([0.0, 0.0], 0.4, 0.2);
        let x = point([0.5, 0.5]);
        let adv = unsup_adversary(&e, &x, &oracle_cfg(), &mut seeded(3)).unwrap();
        let clean = e.encode(&x).unwrap();
        assert_eq!(kl_to_clean(&e, &clean, &adv).unwrap().0, 0.0);
    }

    #[test]
    fn unsup_matches_grid_search() {
        let e = toy_encoder([1.5, -0.8], 0.2, -0.5);
        let x = [0.4, 0.6];
        let clean = e.encode(&point(x)).unwrap();
        let best = grid_max(x, 0.1, 0.005, |u| kl_to_clean(&e, &clean, u).unwrap().0);
        let adv = unsup_adversary(&e, &point(x), &oracle_cfg(), &mut seeded(5)).unwrap();
        let got = kl_to_clean(&e, &clean, &adv).unwrap().0;
        assert!(got >= best - 1e-3, "pgd {got} vs grid {best}");
    }

    #[test]
    fn sup_matches_grid_search() {
        let mut e = toy_encoder([1.5, -0.8], 0.2, 0.0);
        e.set_deterministic(true);
        let c = toy_classifier(2.0, -0.3);
        let x = [0.4, 0.6];
        let nll = |u: &Tensor<f64>| predictive_nll(&e, &c, u, &[0], 1, &mut seeded(0)).unwrap().0;
        let best = grid_max(x, 0.1, 0.005, nll);
        let mut cfg = oracle_cfg();
        cfg.eot_samples = 5;
        let adv = sup_adversary(&e, &c, &point(x), &[0], &cfg, &mut seeded(2)).unwrap();
        assert!((nll(&adv) - best).abs() < 1e-3, "pgd {} vs grid {best}", nll(&adv));
    }

    #[test]
    fn trades_matches_grid_search() {
        let mut e = toy_encoder([1.5, -0.8], 0.2, 0.0);
        e.set_deterministic(true);
        let x = [0.4, 0.6];
        // Clean margin of zero makes the objective symmetric around x.
        let m = 1.5 * 0.4 - 0.8 * 0.6 + 0.2;
        let c = toy_classifier(2.0, -2.0 * m);
        let clean = predictive_probs(&e, &c, &point(x), 1, &mut seeded(0)).unwrap();
        let kl = |u: &Tensor<f64>| categorical_kl_to_clean(&e, &c, &clean, u, 1, &mut seeded(0)).unwrap().0;
        let best = grid_max(x, 0.1, 0.005, kl);
        let adv = trades_adversary(&e, &c, &point(x), &oracle_cfg(), &mut seeded(4)).unwrap();
        assert!(best > 0.01);
        assert!(kl(&adv) >= best - 1e-3, "pgd {} vs grid {best}", kl(&adv));
        let flat = toy_classifier(0.0, 0.7);
        let clean = predictive_probs(&e, &flat, &point(x), 1, &mut seeded(0)).unwrap();
        let adv = trades_adversary(&e, &flat, &point(x), &oracle_cfg(), &mut seeded(4)).unwrap();
        let v = categorical_kl_to_clean(&e, &flat, &clean, &adv, 1, &mut seeded(0)).unwrap().0;
        assert!(v.abs() < 1e-15);
    }

    pub(crate) fn toy_autoencoder() -> (Encoder<f64>, Decoder<f64>) {
        let mut e = toy_encoder([1.5, -0.8], 0.2, 0.0);
        e.set_deterministic(true);
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
        let mut d = Decoder::new(spec, 1, [1, 2, 1], &mut seeded(0)).unwrap();
        set_linear(d.net_mut(), 0, &[0.6, -0.4], &[0.1, 0.2]);
        (e, d)
    }

    #[test]
    fn recon_matches_grid_search() {
        let (e, d) = toy_autoencoder();
        let x = [0.4, 0.6];
        let target = reconstruct(&e, &d, &point(x)).unwrap();
        let f = |u: &Tensor<f64>| recon_distance(&e, &d, &target, u).unwrap().0;
        let best = grid_max(x, 0.1, 0.005, f);
        let adv = recon_adversary(&e, &d, &point(x), &oracle_cfg(), &mut seeded(9)).unwrap();
        assert!((f(&adv) - best).abs() < 1e-3);
    }

    #[test]
    fn sup_adversary_checks_labels() {
        let e = toy_encoder([1.0, 0.5], 0.0, 0.0);
        let c = toy_classifier(1.0, 0.0);
        let err = sup_adversary(&e, &c, &point([0.5, 0.5]), &[2], &oracle_cfg(), &mut seeded(0)).unwrap_err();
        assert!(matches!(err, UrkleError::InvalidLabel { label: 2, num_classes: 2 }));
    }

    fn finite_difference(f: &mut dyn FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|j| {
                let mut a = x.clone();
                let mut b = x.clone();
                a.data_mut()[j] += h;
                b.data_mut()[j] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64]) {
        for (a, n) in analytic.iter().zip(numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel <= 1e-4, "analytic {a} vs numeric {n}");
        }
    }

    fn mlp_encoder(seed: u64) -> Encoder<f64> {
        Encoder::new(EncoderSpec::mlp([1, 3, 1], 4, 2), &mut seeded(seed)).unwrap()
    }

    fn batch() -> Tensor<f64> {
        Tensor::from_vec([2, 1, 3, 1], vec![0.2, 0.7, 0.4, 0.9, 0.1, 0.5]).unwrap()
    }

    #[test]
    fn attack_objective_gradients() {
        let e = mlp_encoder(3);
        let x0 = batch();
        let x = x0.map(|v| v + 0.03);
        let clean = e.encode(&x0).unwrap();
        let (_, g) = kl_to_clean(&e, &clean, &x).unwrap();
        assert_close(g.data(), &finite_difference(&mut |u| kl_to_clean(&e, &clean, u).unwrap().0, &x));

        let cls = Classifier::new(
            ClassifierSpec {
                hidden: 3,
                num_classes: 3,
            },
            2,
            &mut seeded(4),
        )
        .unwrap();
        let (_, g) = predictive_nll(&e, &cls, &x, &[2, 0], 3, &mut stream(1, 1)).unwrap();
        let num = finite_difference(&mut |u| predictive_nll(&e, &cls, u, &[2, 0], 3, &mut stream(1, 1)).unwrap().0, &x);
        assert_close(g.data(), &num);

        let clean = predictive_probs(&e, &cls, &x0, 3, &mut stream(1, 2)).unwrap();
        let (_, g) = categorical_kl_to_clean(&e, &cls, &clean, &x, 3, &mut stream(1, 3)).unwrap();
        let num = finite_difference(
            &mut |u| categorical_kl_to_clean(&e, &cls, &clean, u, 3, &mut stream(1, 3)).unwrap().0,
            &x,
        );
        assert_close(g.data(), &num);

        for lik in [Likelihood::Bernoulli, Likelihood::Gaussian] {
            let d = Decoder::new(DecoderSpec::mlp([1, 3, 1], 4, lik), 2, [1, 3, 1], &mut seeded(6)).unwrap();
            let target = reconstruct(&e, &d, &x0).unwrap();
            let (_, g) = recon_distance(&e, &d, &target, &x).unwrap();
            let num = finite_difference(&mut |u| recon_distance(&e, &d, &target, u).unwrap().0, &x);
            assert_close(g.data(), &num);
        }
    }

    #[test]
    fn kl_attack_improves_on_random_start() {
        let e = mlp_encoder(11);
        let x = Tensor::from_vec([1, 1, 3, 1], vec![0.3, 0.5, 0.6]).unwrap();
        let clean = e.encode(&x).unwrap();
        let cfg = AttackConfig::new(0.1, 0.01, 20);
        let start_cfg = AttackConfig { steps: 0, ..cfg };
        let (mut start, mut end) = (0.0, 0.0);
        for seed in 0..100 {
            let s = unsup_adversary(&e, &x, &start_cfg, &mut seeded(seed)).unwrap();
            let a = unsup_adversary(&e, &x, &cfg, &mut seeded(seed)).unwrap();
            start += kl_to_clean(&e, &clean, &s).unwrap().0;
            end += kl_to_clean(&e, &clean, &a).unwrap().0;
        }
        assert!(end >= start, "end {end} < start {start}");
    }

    #[test]
    fn budget_monotonicity() {
        let e = mlp_encoder(13);
        let mut rng = seeded(99);
        let data: Vec<f64> = (0..100 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let x = Tensor::from_vec([100, 1, 3, 1], data).unwrap();
        let clean = e.encode(&x).unwrap();
        let mut prev = -1.0;
        for eps in [0.0, 0.05, 0.1] {
            let cfg = AttackConfig::audit(eps);
            let adv = unsup_adversary(&e, &x, &cfg, &mut seeded(1)).unwrap();
            let v = kl_to_clean(&e, &clean, &adv).unwrap().0;
            assert!(v >= prev, "eps {eps}: {v} < {prev}");
            prev = v;
        }
    }

    #[test]
    fn adversaries_are_deterministic() {
        let e = mlp_encoder(2);
        let x = batch();
        let cfg = AttackConfig::training(0.1);
        let a = unsup_adversary(&e, &x, &cfg, &mut seeded(8)).unwrap();
        let b = unsup_adversary(&e, &x, &cfg, &mut seeded(8)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn projection_is_feasible_and_idempotent(
            cand in prop::collection::vec(-0.5f64..1.5, 6),
            reference in prop::collection::vec(0.0f64..1.0, 6),
            eps in 0.0f64..0.3,
        ) {
            let cfg = AttackConfig::new(eps, 0.01, 1);
            let c = Tensor::from_vec([1, 1, 6, 1], cand).unwrap();
            let r = Tensor::from_vec([1, 1, 6, 1], reference).unwrap();
            let p = project_linf(&c, &r, &cfg).unwrap();
            for j in 0..6 {
                let v = p.data()[j];
                prop_assert!((v - r.data()[j]).abs() <= eps + 1e-12);
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert_eq!(project_linf(&p, &r, &cfg).unwrap(), p);
        }

        #[test]
        fn adversaries_stay_feasible(
            seed in 0u64..1000,
            eps in 0.0f64..0.3,
            xs in prop::collection::vec(0.0f64..1.0, 6),
        ) {
            let e = mlp_encoder(seed % 7);
            let x = Tensor::from_vec([2, 1, 3, 1], xs).unwrap();
            let cfg = AttackConfig::training(eps);
            let cls = Classifier::new(ClassifierSpec { hidden: 3, num_classes: 2 }, 2, &mut seeded(seed)).unwrap();
            let d = Decoder::new(DecoderSpec::mlp([1, 3, 1], 4, Likelihood::Bernoulli), 2, [1, 3, 1], &mut seeded(seed)).unwrap();
            let advs = [
                recon_adversary(&e, &d, &x, &cfg, &mut seeded(seed)).unwrap(),
                unsup_adversary(&e, &x, &cfg, &mut seeded(seed)).unwrap(),
                sup_adversary(&e, &cls, &x, &[0, 1], &cfg, &mut seeded(seed)).unwrap(),
                trades_adversary(&e, &cls, &x, &cfg, &mut seeded(seed)).unwrap(),
            ];
            for adv in advs {
                for (a, b) in adv.data().iter().zip(x.data()) {
                    prop_assert!((a - b).abs() <= eps + 1e-7);
                    prop_assert!((0.0..=1.0).contains(a));
                }
            }
        }
    }
}
