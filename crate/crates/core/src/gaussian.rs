//! Diagonal-Gaussian representation distributions.
//!
//! A representation is parameterized by its mean and log-variance; the
//! log-variance is clamped to `[LOGVAR_MIN, LOGVAR_MAX]` so that the KL
//! between two representations stays finite under adversarial inputs.

use rand::Rng;

use crate::error::{contract, Result, UrkleError};
use crate::rng::{normal, normals};
use crate::tensor::{Scalar, Tensor};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianRepr<T> {
    mean: Vec<T>,
    log_var: Vec<T>,
}

impl<T: Scalar> GaussianRepr<T> {
    /// Builds a representation, clamping `log_var` into the allowed range.
    pub fn new(mean: Vec<T>, log_var: Vec<T>) -> Result<Self> {
        if mean.is_empty() {
            return Err(UrkleError::InvalidInput(
                "representation dimension must be at least 1".into(),
            ));
        }
        if mean.len() != log_var.len() {
            return Err(contract(format!(
                "mean has {} entries but log_var has {}",
                mean.len(),
                log_var.len()
            )));
        }
        if !mean.iter().chain(&log_var).all(|v| v.is_finite()) {
            return Err(UrkleError::InvalidInput(
                "representation fields must be finite".into(),
            ));
        }
        let log_var = log_var.into_iter().map(clamp_log_var).collect();
        Ok(Self { mean, log_var })
    }

    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(vec![T::zero(); dim], vec![T::zero(); dim])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn log_var(&self) -> &[T] {
        &self.log_var
    }

    /// `count` reparameterized draws `mean + exp(log_var / 2) * eps`.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<Vec<T>>> {
        if count == 0 {
            return Err(UrkleError::InvalidArgument(
                "sample count must be at least 1".into(),
            ));
        }
        Ok((0..count)
            .map(|_| {
                let eps: Vec<T> = (0..self.dim()).map(|_| normal(rng)).collect();
                self.reparameterize(&eps)
            })
            .collect())
    }

    /// Sample for a given standard-normal noise vector.
    pub fn reparameterize(&self, eps: &[T]) -> Vec<T> {
        reparameterize(&self.mean, &self.log_var, eps)
    }
}

pub(crate) fn clamp_log_var<T: Scalar>(v: T) -> T {
    v.max(T::lit(LOGVAR_MIN)).min(T::lit(LOGVAR_MAX))
}

pub(crate) fn reparameterize<T: Scalar>(mean: &[T], log_var: &[T], eps: &[T]) -> Vec<T> {
    let half = T::lit(0.5);
    mean.iter()
        .zip(log_var)
        .zip(eps)
        .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
        .collect()
}

/// `KL[p || q]` in closed form.
pub fn kl_divergence<T: Scalar>(p: &GaussianRepr<T>, q: &GaussianRepr<T>) -> Result<T> {
    if p.dim() != q.dim() {
        return Err(contract(format!(
            "KL between representations of dimension {} and {}",
            p.dim(),
            q.dim()
        )));
    }
    Ok(kl_parts(&p.mean, &p.log_var, &q.mean, &q.log_var))
}

/// Closed-form KL on raw slices (no validation).
pub(crate) fn kl_parts<T: Scalar>(mp: &[T], lp: &[T], mq: &[T], lq: &[T]) -> T {
    let half = T::lit(0.5);
    let mut acc = T::zero();
    for i in 0..mp.len() {
        let inv_vq = (-lq[i]).exp();
        let diff = mp[i] - mq[i];
        acc += (lp[i] - lq[i]).exp() + diff * diff * inv_vq - T::one() + lq[i] - lp[i];
    }
    let kl = half * acc;
    let tol = T::lit(1e-12 * mp.len() as f64);
    if kl < T::zero() && -kl < tol {
        T::zero()
    } else {
        kl
    }
}

/// Gradient of `KL[p || q]` with respect to all four field vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct KlGrad<T> {
    pub mean_p: Vec<T>,
    pub log_var_p: Vec<T>,
    pub mean_q: Vec<T>,
    pub log_var_q: Vec<T>,
}

pub fn kl_divergence_grad<T: Scalar>(p: &GaussianRepr<T>, q: &GaussianRepr<T>) -> Result<KlGrad<T>> {
    if p.dim() != q.dim() {
        return Err(contract("KL gradient between mismatched dimensions"));
    }
    let d = p.dim();
    let mut g = KlGrad {
        mean_p: vec![T::zero(); d],
        log_var_p: vec![T::zero(); d],
        mean_q: vec![T::zero(); d],
        log_var_q: vec![T::zero(); d],
    };
    kl_grad_parts(
        &p.mean,
        &p.log_var,
        &q.mean,
        &q.log_var,
        T::one(),
        &mut g.mean_p,
        &mut g.log_var_p,
        &mut g.mean_q,
        &mut g.log_var_q,
    );
    Ok(g)
}

/// Accumulates `scale * dKL` into the four gradient slices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn kl_grad_parts<T: Scalar>(
    mp: &[T],
    lp: &[T],
    mq: &[T],
    lq: &[T],
    scale: T,
    gmp: &mut [T],
    glp: &mut [T],
    gmq: &mut [T],
    glq: &mut [T],
) {
    let half = T::lit(0.5);
    for i in 0..mp.len() {
        let inv_vq = (-lq[i]).exp();
        let ratio = (lp[i] - lq[i]).exp();
        let diff = mp[i] - mq[i];
        let dm = diff * inv_vq;
        gmp[i] += scale * dm;
        gmq[i] -= scale * dm;
        glp[i] += scale * half * (ratio - T::one());
        glq[i] += scale * half * (T::one() - ratio - diff * diff * inv_vq);
    }
}

/// Pinsker's inequality: total variation is at most `sqrt(kl / 2)`.
pub fn pinsker_tv_bound(kl: f64) -> Result<f64> {
    if kl < 0.0 || kl.is_nan() {
        return Err(UrkleError::InvalidArgument(format!(
            "KL must be non-negative, got {kl}"
        )));
    }
    Ok((kl / 2.0).sqrt())
}

/// A batch of representations stored row-major as (n, d) means and
/// log-variances. This is what encoders emit.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBatch<T> {
    pub n: usize,
    pub d: usize,
    pub mean: Vec<T>,
    pub log_var: Vec<T>,
}

impl<T: Scalar> GaussianBatch<T> {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            n,
            d,
            mean: vec![T::zero(); n * d],
            log_var: vec![T::zero(); n * d],
        }
    }

    pub fn mean_row(&self, i: usize) -> &[T] {
        &self.mean[i * self.d..(i + 1) * self.d]
    }

    pub fn log_var_row(&self, i: usize) -> &[T] {
        &self.log_var[i * self.d..(i + 1) * self.d]
    }

    pub fn get(&self, i: usize) -> GaussianRepr<T> {
        GaussianRepr {
            mean: self.mean_row(i).to_vec(),
            log_var: self.log_var_row(i).to_vec(),
        }
    }

    /// Means as an (n, d, 1, 1) tensor.
    pub fn mean_tensor(&self) -> Tensor<T> {
        Tensor::matrix(self.n, self.d, self.mean.clone()).expect("mean tensor")
    }

    /// Draws `copies` reparameterized samples per row; output row
    /// `c * n + i` is copy `c` of item `i`. Without noise every copy is the
    /// mean and no randomness is consumed. Returns the samples and the
    /// standard-normal draws behind them.
    pub fn draw<R: Rng + ?Sized>(&self, copies: usize, noisy: bool, rng: &mut R) -> (Tensor<T>, Vec<T>) {
        let eps = if noisy { normals(copies * self.n * self.d, rng) } else { Vec::new() };
        (self.apply_noise(&eps, copies), eps)
    }

    /// `copies` samples from given standard-normal draws (empty draws give
    /// the mean).
    pub fn apply_noise(&self, eps: &[T], copies: usize) -> Tensor<T> {
        let nd = self.n * self.d;
        let mut z = Vec::with_capacity(copies * nd);
        for c in 0..copies {
            if eps.is_empty() {
                z.extend_from_slice(&self.mean);
            } else {
                let e = &eps[c * nd..(c + 1) * nd];
                z.extend((0..nd).map(|k| self.mean[k] + (self.log_var[k] * T::lit(0.5)).exp() * e[k]));
            }
        }
        Tensor::matrix(copies * self.n, self.d, z).expect("samples")
    }

    /// Accumulates into `grad` the chain rule through [`GaussianBatch::draw`].
    pub fn draw_backward(&self, eps: &[T], dz: &Tensor<T>, copies: usize, grad: &mut GaussianBatch<T>) {
        let nd = self.n * self.d;
        let half = T::lit(0.5);
        for c in 0..copies {
            let dzc = &dz.data()[c * nd..(c + 1) * nd];
            for k in 0..nd {
                grad.mean[k] += dzc[k];
                if !eps.is_empty() {
                    grad.log_var[k] += dzc[k] * half * (self.log_var[k] * half).exp() * eps[c * nd + k];
                }
            }
        }
    }

    /// Row-wise `KL[self_i || other_i]`.
    pub fn kl_rows(&self, other: &GaussianBatch<T>) -> Result<Vec<T>> {
        if self.n != other.n || self.d != other.d {
            return Err(contract(format!(
                "KL between batches ({}, {}) and ({}, {})",
                self.n, self.d, other.n, other.d
            )));
        }
        Ok((0..self.n)
            .map(|i| {
                kl_parts(
                    self.mean_row(i),
                    self.log_var_row(i),
                    other.mean_row(i),
                    other.log_var_row(i),
                )
            })
            .collect())
    }

    /// Accumulates `scale * d(sum_i KL[self_i || other_i])` into `gp` (for
    /// self) and `gq` (for other).
    pub(crate) fn kl_rows_backward(
        &self,
        other: &GaussianBatch<T>,
        scale: T,
        gp: Option<&mut GaussianBatch<T>>,
        gq: Option<&mut GaussianBatch<T>>,
    ) {
        let mut scratch_p;
        let mut scratch_q;
        let gp = match gp {
            Some(g) => g,
            None => {
                scratch_p = GaussianBatch::zeros(self.n, self.d);
                &mut scratch_p
            }
        };
        let gq = match gq {
            Some(g) => g,
            None => {
                scratch_q = GaussianBatch::zeros(self.n, self.d);
                &mut scratch_q
            }
        };
        let d = self.d;
        for i in 0..self.n {
            let r = i * d..(i + 1) * d;
            kl_grad_parts(
                self.mean_row(i),
                self.log_var_row(i),
                other.mean_row(i),
                other.log_var_row(i),
                scale,
                &mut gp.mean[r.clone()],
                &mut gp.log_var[r.clone()],
                &mut gq.mean[r.clone()],
                &mut gq.log_var[r],
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn g(mean: &[f64], log_var: &[f64]) -> GaussianRepr<f64> {
        GaussianRepr::new(mean.to_vec(), log_var.to_vec()).unwrap()
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let p = g(&[0.3, -1.2, 4.0], &[0.5, -2.0, 1.0]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_hand_values() {
        let kl = kl_divergence(&g(&[0.0], &[0.0]), &g(&[1.0], &[0.0])).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
        let kl = kl_divergence(&g(&[0.0], &[0.0]), &g(&[0.0], &[1.0])).unwrap();
        assert!((kl - 0.5 / std::f64::consts::E).abs() < 1e-15);
        assert!((kl - 0.18394).abs() < 1e-5);
    }

    #[test]
    fn kl_dimension_mismatch() {
        let err = kl_divergence(&g(&[0.0], &[0.0]), &g(&[0.0, 1.0], &[0.0, 0.0])).unwrap_err();
        assert!(matches!(err, UrkleError::Contract(_)));
    }

    #[test]
    fn construction_validates_fields() {
        assert!(matches!(
            GaussianRepr::<f64>::new(vec![f64::NAN], vec![0.0]),
            Err(UrkleError::InvalidInput(_))
        ));
        assert!(matches!(
            GaussianRepr::<f64>::new(vec![0.0], vec![0.0, 0.0]),
            Err(UrkleError::Contract(_))
        ));
        assert!(GaussianRepr::<f64>::new(vec![], vec![]).is_err());
        let clamped = g(&[0.0, 0.0], &[-50.0, 50.0]);
        assert_eq!(clamped.log_var(), &[LOGVAR_MIN, LOGVAR_MAX]);
    }

    #[test]
    fn sample_contracts() {
        let p = g(&[1.0, 2.0], &[0.0, 1.0]);
        assert!(matches!(
            p.sample(0, &mut seeded(1)),
            Err(UrkleError::InvalidArgument(_))
        ));
        let a = p.sample(5, &mut seeded(9)).unwrap();
        let b = p.sample(5, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(p.reparameterize(&[0.0, 0.0]), vec![1.0, 2.0]);
    }

    #[test]
    fn pinsker_values() {
        assert_eq!(pinsker_tv_bound(0.0).unwrap(), 0.0);
        assert_eq!(pinsker_tv_bound(2.0).unwrap(), 1.0);
        assert!(pinsker_tv_bound(-1e-3).is_err());
    }
}
