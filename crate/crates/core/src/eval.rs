//! Linear-probe training and the robustness audit comparing the
//! adversarial loss with its KL-based upper bound.

use rand::{Rng, RngCore};
use rayon::prelude::*;

use crate::adversary::{predictive_probs, sup_adversary, unsup_adversary, AttackConfig};
use crate::data::{shuffle, Dataset};
use crate::error::{Result, UrkleError};
use crate::gaussian::kl_parts;
use crate::models::{Classifier, ClassifierSpec, Encoder};
use crate::objectives::{bounded_nll, classification_loss, ModelGrads, ObjectiveConfig};
use crate::rng::{normals, stream};
use crate::tensor::{pairwise_mean, Scalar, Tensor};
use crate::training::{batches_per_epoch, cosine_lr, Sgd};

/// Classifier trained on top of a frozen encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub classifier: ClassifierSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            classifier: ClassifierSpec {
                hidden: 1024,
                num_classes,
            },
            epochs: 10,
            batch_size: 128,
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: 5.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr0 > 0.0) || self.classifier.num_classes < 2 {
            return Err(UrkleError::Config(
                "probe needs batch_size >= 1, lr0 > 0 and at least 2 classes".into(),
            ));
        }
        Ok(())
    }
}

/// Trains a classifier on representations of `data` drawn from the frozen
/// encoder (one posterior sample per input and step). Zero epochs return
/// the seeded initialization.
pub fn train_probe(encoder: &Encoder<f32>, data: &Dataset, config: &ProbeConfig) -> Result<Classifier<f32>> {
    config.validate()?;
    let labels = data
        .labels()
        .ok_or_else(|| UrkleError::Config("probe training needs labeled data".into()))?;
    if data.num_classes() > config.classifier.num_classes {
        return Err(UrkleError::Config(format!(
            "data has {} classes but the probe has {}",
            data.num_classes(),
            config.classifier.num_classes
        )));
    }
    if labels.is_empty() && config.epochs > 0 {
        return Err(UrkleError::Config("probe training data is empty".into()));
    }
    let mut classifier = Classifier::new(config.classifier, encoder.d_z(), &mut stream(config.seed, 3))?;
    let n = data.len();
    let bs = config.batch_size.min(n.max(1));
    let per_epoch = batches_per_epoch(n, bs);
    let total = config.epochs * per_epoch;
    let mut sgd = Sgd::new(config.momentum, config.weight_decay, config.clip_norm);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut order, &mut stream(config.seed, (1 << 32) + epoch as u64));
        for b in 0..per_epoch {
            let (x, y) = data.batch(&order[b * bs..(b + 1) * bs]);
            let y = y.expect("labeled data");
            let mut rng = stream(config.seed, (2 << 32) + step as u64);
            let noise = if encoder.is_deterministic() {
                Vec::new()
            } else {
                normals(x.batch() * encoder.d_z(), &mut rng)
            };
            let mut grads = ModelGrads::new(encoder, None, None, Some(&classifier));
            let loss = classification_loss(encoder, &classifier, &x, &y, &noise, false, Some(&mut grads))?;
            if !loss.is_finite() || !grads.classifier.iter().all(|g| g.all_finite()) {
                return Err(UrkleError::NumericAbort { step, breakdown: loss });
            }
            grads.commit_classifier_stats(&mut classifier);
            let lr = cosine_lr(step, total, config.lr0)?;
            sgd.step(classifier.net_mut().params_mut(), grads.classifier.iter().collect(), lr);
            step += 1;
        }
    }
    Ok(classifier)
}

/// Monte-Carlo predictive distribution with `samples` posterior draws per
/// input; a deterministic encoder uses one forward pass.
pub fn mc_predict<T: Scalar, R: Rng + ?Sized>(
    encoder: &Encoder<T>,
    classifier: &Classifier<T>,
    x: &Tensor<T>,
    samples: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if samples == 0 {
        return Err(UrkleError::InvalidArgument("mc_samples must be at least 1".into()));
    }
    predictive_probs(encoder, classifier, x, samples, rng)
}

/// Audit settings besides the attack on the classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditOptions {
    pub mc_samples: usize,
    /// Steps of the attack maximizing the representation KL.
    pub kl_steps: usize,
    /// Inputs per independently seeded chunk.
    pub chunk_size: usize,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            mc_samples: 20,
            kl_steps: 50,
            chunk_size: 100,
        }
    }
}

/// One audit result row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub clean_accuracy: f64,
    pub adversarial_accuracy: f64,
    pub clean_loss: f64,
    pub adv_loss: f64,
    pub mean_max_kl: f64,
    pub bound_rhs: f64,
    pub slack: f64,
    pub epsilon: f64,
    pub steps: usize,
    pub mc_samples: usize,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str =
        "clean_accuracy,adversarial_accuracy,clean_loss,adv_loss,mean_max_kl,bound_rhs,slack,epsilon,steps,mc_samples";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{},{},{}",
            self.clean_accuracy,
            self.adversarial_accuracy,
            self.clean_loss,
            self.adv_loss,
            self.mean_max_kl,
            self.bound_rhs,
            self.slack,
            self.epsilon,
            self.steps,
            self.mc_samples
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 10 {
            return Err(UrkleError::Format(format!("expected 10 metric fields, found {}", fields.len())));
        }
        let f = |i: usize| {
            fields[i]
                .parse::<f64>()
                .map_err(|_| UrkleError::Format(format!("bad metric value `{}`", fields[i])))
        };
        let u = |i: usize| {
            fields[i]
                .parse::<usize>()
                .map_err(|_| UrkleError::Format(format!("bad count `{}`", fields[i])))
        };
        Ok(Self {
            clean_accuracy: f(0)?,
            adversarial_accuracy: f(1)?,
            clean_loss: f(2)?,
            adv_loss: f(3)?,
            mean_max_kl: f(4)?,
            bound_rhs: f(5)?,
            slack: f(6)?,
            epsilon: f(7)?,
            steps: u(8)?,
            mc_samples: u(9)?,
        })
    }
}

/// `clean_loss + M / sqrt(2) * sqrt(mean_max_kl)`.
pub fn bound_rhs(clean_loss: f64, mean_max_kl: f64, m_bound: f64) -> f64 {
    clean_loss + m_bound / std::f64::consts::SQRT_2 * mean_max_kl.max(0.0).sqrt()
}

/// First index of the largest entry.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

struct ItemStats {
    clean_correct: bool,
    adv_correct: bool,
    clean_loss: f64,
    adv_loss: f64,
    max_kl: f64,
}

fn row_f64<T: Scalar>(probs: &Tensor<T>, i: usize) -> Vec<f64> {
    let row: Vec<f64> = probs.item(i).iter().map(|p| p.as_f64()).collect();
    let s: f64 = row.iter().sum();
    row.into_iter().map(|p| p / s).collect()
}

/// Accuracy and bounded loss on clean and attacked inputs, the mean
/// worst-case representation KL, and the resulting upper bound. Inputs are
/// processed in chunks with their own noise streams, so the result does
/// not depend on the thread count. Clean and attacked predictions share
/// their posterior noise, making a zero budget give zero slack.
pub fn evaluate<T, R>(
    encoder: &Encoder<T>,
    classifier: &Classifier<T>,
    data: &Dataset,
    attack: &AttackConfig,
    objective: &ObjectiveConfig,
    options: &AuditOptions,
    rng: &mut R,
) -> Result<MetricsRecord>
where
    T: Scalar + Send + Sync,
    R: RngCore + ?Sized,
{
    attack.validate()?;
    objective.validate()?;
    if options.mc_samples == 0 || options.chunk_size == 0 {
        return Err(UrkleError::InvalidArgument("mc_samples and chunk_size must be at least 1".into()));
    }
    if objective.num_classes != classifier.num_classes() {
        return Err(UrkleError::Config(format!(
            "objective has {} classes but the classifier has {}",
            objective.num_classes,
            classifier.num_classes()
        )));
    }
    let labels = data
        .labels()
        .ok_or_else(|| UrkleError::Config("the audit needs labeled data".into()))?;
    if data.is_empty() {
        return Err(UrkleError::Config("the audit needs at least one input".into()));
    }
    let kl_attack = AttackConfig {
        steps: if attack.epsilon > 0.0 { options.kl_steps } else { 0 },
        eot_samples: 1,
        random_init: true,
        ..*attack
    };
    let base = rng.next_u64();
    let chunks: Vec<(usize, usize)> = (0..data.len())
        .step_by(options.chunk_size)
        .map(|start| (start, (start + options.chunk_size).min(data.len())))
        .collect();
    let per_chunk: Vec<Result<Vec<ItemStats>>> = chunks
        .par_iter()
        .enumerate()
        .map(|(c, &(start, end))| {
            let idx: Vec<usize> = (start..end).collect();
            let (x, _) = data.batch(&idx);
            let x = x.cast::<T>();
            let y = &labels[start..end];
            let id = 3 * c as u64;
            let clean = mc_predict(encoder, classifier, &x, options.mc_samples, &mut stream(base, id))?;
            let x_adv = sup_adversary(encoder, classifier, &x, y, attack, &mut stream(base, id + 1))?;
            let adv = mc_predict(encoder, classifier, &x_adv, options.mc_samples, &mut stream(base, id))?;
            let x_kl = unsup_adversary(encoder, &x, &kl_attack, &mut stream(base, id + 2))?;
            let g_clean = encoder.encode(&x)?;
            let g_adv = encoder.encode(&x_kl)?;
            (0..idx.len())
                .map(|i| {
                    let pc = row_f64(&clean, i);
                    let pa = row_f64(&adv, i);
                    let f = |r: &[T]| r.iter().map(|v| v.as_f64()).collect::<Vec<f64>>();
                    let max_kl = kl_parts(
                        &f(g_clean.mean_row(i)),
                        &f(g_clean.log_var_row(i)),
                        &f(g_adv.mean_row(i)),
                        &f(g_adv.log_var_row(i)),
                    );
                    Ok(ItemStats {
                        clean_correct: argmax(&pc) == y[i],
                        adv_correct: argmax(&pa) == y[i],
                        clean_loss: bounded_nll(&pc, y[i], objective.m_bound)?,
                        adv_loss: bounded_nll(&pa, y[i], objective.m_bound)?,
                        max_kl,
                    })
                })
                .collect()
        })
        .collect();
    let mut items = Vec::with_capacity(data.len());
    for chunk in per_chunk {
        items.extend(chunk?);
    }
    let mean = |f: &dyn Fn(&ItemStats) -> f64| pairwise_mean(&items.iter().map(f).collect::<Vec<_>>());
    let clean_loss = mean(&|s| s.clean_loss);
    let adv_loss = mean(&|s| s.adv_loss);
    let mean_max_kl = mean(&|s| s.max_kl);
    let rhs = bound_rhs(clean_loss, mean_max_kl, objective.m_bound);
    Ok(MetricsRecord {
        clean_accuracy: mean(&|s| f64::from(u8::from(s.clean_correct))),
        adversarial_accuracy: mean(&|s| f64::from(u8::from(s.adv_correct))),
        clean_loss,
        adv_loss,
        mean_max_kl,
        bound_rhs: rhs,
        slack: rhs - adv_loss,
        epsilon: attack.epsilon,
        steps: attack.steps,
        mc_samples: options.mc_samples,
    })
}
