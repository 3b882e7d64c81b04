//! Label-distribution math over discrete ages `1..=T` (months).
//!
//! All vectors are 0-indexed internally; index `k` holds age `k + 1`. The
//! losses are defined on pre-softmax logits and return analytic gradients
//! with respect to those logits; they are generic over the float width so
//! the finite-difference oracle can drive them at f64.

use crate::nn::softmax;
use crate::tensor::Tensor;
use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_T_MAX: usize = 240;
pub const DEFAULT_SOFT_WIDTH: usize = 50;
pub const DEFAULT_GAUSSIAN_STDDEV: f64 = 15.0;

#[derive(Debug, Error)]
pub enum LdlError {
    #[error("age {age} out of range 1..={t_max}")]
    AgeOutOfRange { age: usize, t_max: usize },
    #[error("soft-label width must be >= 1")]
    ZeroWidth,
    #[error("gaussian stddev must be positive, got {0}")]
    NonPositiveStddev(f64),
    #[error("distribution has a zero component at index {0}; KL is undefined")]
    ZeroProbability(usize),
    #[error("soft label sums to zero; cannot normalize")]
    DegenerateLabel,
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("non-finite logits for sample {0}")]
    NonFiniteLogits(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Probability vector over ages `1..=t_max`; sums to 1 within 1e-6.
#[derive(Debug, Clone, PartialEq)]
pub struct AgeDistribution {
    probs: Vec<f64>,
}

impl AgeDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, LdlError> {
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(LdlError::NotNormalized(sum));
        }
        if let Some(i) = probs.iter().position(|&p| p < 0.0) {
            return Err(LdlError::ZeroProbability(i));
        }
        Ok(Self { probs })
    }

    pub fn from_logits<T: Float>(logits: &Tensor<T>) -> Self {
        let p = softmax(logits);
        Self {
            probs: p.data().iter().map(|v| v.to_f64().unwrap()).collect(),
        }
    }

    pub fn one_hot(age: usize, t_max: usize) -> Result<Self, LdlError> {
        check_age(age, t_max)?;
        let mut probs = vec![0.0; t_max];
        probs[age - 1] = 1.0;
        Ok(Self { probs })
    }

    pub fn uniform(t_max: usize) -> Self {
        Self {
            probs: vec![1.0 / t_max as f64; t_max],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn t_max(&self) -> usize {
        self.probs.len()
    }

    /// Age with the highest probability (ties: youngest).
    pub fn argmax_age(&self) -> usize {
        let mut best = 0usize;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best + 1
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

/// Triangular soft classification label: 1 at the true age, decaying
/// linearly to 0 over `width` months, clipped at the age range ends.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabel {
    values: Vec<f64>,
    pub center: usize,
    pub width: usize,
}

impl SoftLabel {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Values scaled to sum to 1, for use as a cross-entropy target.
    pub fn normalized(&self) -> Result<Vec<f64>, LdlError> {
        let sum: f64 = self.values.iter().sum();
        if sum <= 0.0 {
            return Err(LdlError::DegenerateLabel);
        }
        Ok(self.values.iter().map(|v| v / sum).collect())
    }
}

fn check_age(age: usize, t_max: usize) -> Result<(), LdlError> {
    if age < 1 || age > t_max {
        return Err(LdlError::AgeOutOfRange { age, t_max });
    }
    Ok(())
}

/// `values[i] = max(0, 1 - |i - t| / l)` over ages `i = 1..=t_max`.
pub fn soft_label(age: usize, width: usize, t_max: usize) -> Result<SoftLabel, LdlError> {
    check_age(age, t_max)?;
    if width == 0 {
        return Err(LdlError::ZeroWidth);
    }
    let values = (1..=t_max)
        .map(|i| {
            let d = (i as f64 - age as f64).abs();
            (1.0 - d / width as f64).max(0.0)
        })
        .collect();
    Ok(SoftLabel {
        values,
        center: age,
        width,
    })
}

/// Gaussian target distribution centered on the true age.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTarget {
    probs: Vec<f64>,
    pub mean_age: usize,
    pub stddev: f64,
}

impl GaussianTarget {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn as_distribution(&self) -> AgeDistribution {
        AgeDistribution {
            probs: self.probs.clone(),
        }
    }
}

/// Raw, unnormalized Gaussian density at age `k`.
pub fn gaussian_density(k: usize, mean_age: usize, stddev: f64) -> f64 {
    let d = k as f64 - mean_age as f64;
    (1.0 / ((2.0 * std::f64::consts::PI).sqrt() * stddev)) * (-d * d / (2.0 * stddev * stddev)).exp()
}

/// Samples the density at ages `1..=t_max` and renormalizes to sum 1, so the
/// KL regularizer compares genuine distributions; renormalization preserves
/// the argmax and all probability ratios.
pub fn gaussian_target(
    mean_age: usize,
    stddev: f64,
    t_max: usize,
) -> Result<GaussianTarget, LdlError> {
    check_age(mean_age, t_max)?;
    if stddev <= 0.0 {
        return Err(LdlError::NonPositiveStddev(stddev));
    }
    let mut probs: Vec<f64> = (1..=t_max)
        .map(|k| gaussian_density(k, mean_age, stddev))
        .collect();
    let sum: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= sum;
    }
    Ok(GaussianTarget {
        probs,
        mean_age,
        stddev,
    })
}

/// Expected age in months: `sum_k k * p_k`.
pub fn expectation(p: &AgeDistribution) -> f64 {
    p.probs
        .iter()
        .enumerate()
        .map(|(i, &pk)| (i + 1) as f64 * pk)
        .sum()
}

/// `D_KL(G || p) = sum_k G_k ln(G_k / p_k)`; zero iff the distributions are
/// equal. `p` must be strictly positive (softmax output always is).
pub fn kl_regularizer(p: &AgeDistribution, target: &GaussianTarget) -> Result<f64, LdlError> {
    if p.t_max() != target.probs.len() {
        return Err(LdlError::LengthMismatch(p.t_max(), target.probs.len()));
    }
    if let Some(i) = p.probs.iter().position(|&pk| pk <= 0.0) {
        return Err(LdlError::ZeroProbability(i));
    }
    let mut kl = 0.0;
    for (&g, &pk) in target.probs.iter().zip(&p.probs) {
        if g > 0.0 {
            kl += g * (g / pk).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// Trade-off and target hyperparameters for the joint loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the KL regularizer; 0 disables it.
    pub lambda: f64,
    /// Stddev of the Gaussian target, months.
    pub delta: f64,
    /// Number of discrete ages.
    pub t_max: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            delta: DEFAULT_GAUSSIAN_STDDEV,
            t_max: DEFAULT_T_MAX,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LdlError> {
        if self.lambda < 0.0 {
            return Err(LdlError::NotNormalized(self.lambda)); // negative trade-off
        }
        if self.delta <= 0.0 {
            return Err(LdlError::NonPositiveStddev(self.delta));
        }
        Ok(())
    }
}

/// Joint expectation-regression + KL-regularization loss on logits.
///
/// `loss = |y - E[softmax(z)]| + lambda * D_KL(G_y || softmax(z))`.
/// Returns the loss and its analytic gradient with respect to `z`. The MAE
/// kink uses subgradient 0 at exactly `y == y_hat`.
pub fn joint_loss<T: Float>(
    logits: &Tensor<T>,
    age: usize,
    cfg: &LossConfig,
    sample_id: &str,
) -> Result<(f64, Tensor<T>), LdlError> {
    if logits.len() != cfg.t_max {
        return Err(LdlError::LengthMismatch(logits.len(), cfg.t_max));
    }
    check_age(age, cfg.t_max)?;
    if logits.check_finite().is_err() {
        return Err(LdlError::NonFiniteLogits(sample_id.to_string()));
    }
    let p = AgeDistribution::from_logits(logits);
    let y_hat = expectation(&p);
    let resid = y_hat - age as f64;
    let mae = resid.abs();
    let sign = if resid > 0.0 {
        1.0
    } else if resid < 0.0 {
        -1.0
    } else {
        0.0
    };

    let (kl, target) = if cfg.lambda > 0.0 {
        let g = gaussian_target(age, cfg.delta, cfg.t_max)?;
        (kl_regularizer(&p, &g)?, Some(g))
    } else {
        (0.0, None)
    };

    let loss = mae + cfg.lambda * kl;
    let mut grad = vec![T::zero(); cfg.t_max];
    for k in 0..cfg.t_max {
        let pk = p.probs()[k];
        // d y_hat / d z_k = p_k (k+1 - y_hat)
        let mut g = sign * pk * ((k + 1) as f64 - y_hat);
        if let Some(t) = &target {
            // d KL(G||p) / d z_k = p_k - G_k
            g += cfg.lambda * (pk - t.probs()[k]);
        }
        grad[k] = T::from(g).unwrap();
    }
    Ok((loss, Tensor::new(vec![cfg.t_max], grad).unwrap()))
}

/// Cross-entropy between the normalized soft label and `softmax(z)`;
/// the training loss for the localization-phase classifier.
pub fn phase1_loss<T: Float>(
    logits: &Tensor<T>,
    label: &SoftLabel,
    sample_id: &str,
) -> Result<(f64, Tensor<T>), LdlError> {
    let t_max = label.values().len();
    if logits.len() != t_max {
        return Err(LdlError::LengthMismatch(logits.len(), t_max));
    }
    if logits.check_finite().is_err() {
        return Err(LdlError::NonFiniteLogits(sample_id.to_string()));
    }
    let q = label.normalized()?;
    let p = AgeDistribution::from_logits(logits);
    let mut loss = 0.0;
    for (&qk, &pk) in q.iter().zip(p.probs()) {
        if qk > 0.0 {
            loss -= qk * pk.max(f64::MIN_POSITIVE).ln();
        }
    }
    let grad: Vec<T> = p
        .probs()
        .iter()
        .zip(&q)
        .map(|(&pk, &qk)| T::from(pk - qk).unwrap())
        .collect();
    Ok((loss, Tensor::new(vec![t_max], grad).unwrap()))
}
