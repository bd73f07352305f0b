//! The stationary mixed noise kernel and the signal-retention schedule.
//!
//! The kernel is rank one: every row equals the target distribution
//! `pi = k * u + mu * e_mask`, where `u` is uniform over all `N` tokens
//! (mask included) and `mu = 1 - k`. Forward transitions are
//! `Q_{t|s} = alpha_{t|s} I + (1 - alpha_{t|s}) K`.
//!
//! Only a single absorbing token is supported. The general form admits a
//! weighted sum of absorbing matrices over a set of special tokens, with the
//! weights and `k` summing to one.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Parameters of the mixed uniform/absorbing noise kernel.
///
/// `mu` is always derived as `1 - k`, so `k + mu = 1` holds by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedKernel {
    vocab_size: usize,
    mask_id: usize,
    k: f64,
}

impl MixedKernel {
    pub fn new(vocab_size: usize, mask_id: usize, k: f64) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Domain(format!(
                "vocabulary size must be at least 2, got {vocab_size}"
            )));
        }
        if mask_id >= vocab_size {
            return Err(Error::Domain(format!(
                "mask id {mask_id} must be below vocabulary size {vocab_size}"
            )));
        }
        if !(0.0..=1.0).contains(&k) {
            return Err(Error::Domain(format!(
                "mixing ratio k must lie in [0, 1], got {k}"
            )));
        }
        Ok(Self {
            vocab_size,
            mask_id,
            k,
        })
    }

    /// Kernel with the mask at the last vocabulary index.
    pub fn with_last_mask(vocab_size: usize, k: f64) -> Result<Self> {
        Self::new(vocab_size, vocab_size.saturating_sub(1), k)
    }

    #[inline]
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    #[inline]
    pub fn mask_id(&self) -> usize {
        self.mask_id
    }

    /// Weight of the uniform component.
    #[inline]
    pub fn k(&self) -> f64 {
        self.k
    }

    /// Weight of the absorbing component, `1 - k`.
    #[inline]
    pub fn mu(&self) -> f64 {
        1.0 - self.k
    }

    /// Probability the target distribution assigns to `token`.
    #[inline]
    pub fn target_prob(&self, token: usize) -> f64 {
        let uniform = self.k / self.vocab_size as f64;
        if token == self.mask_id {
            uniform + self.mu()
        } else {
            uniform
        }
    }

    /// The target distribution `pi` as a dense vector.
    pub fn target(&self) -> Vec<f64> {
        (0..self.vocab_size).map(|e| self.target_prob(e)).collect()
    }

    pub fn check_token(&self, token: usize) -> Result<()> {
        if token < self.vocab_size {
            Ok(())
        } else {
            Err(Error::Index {
                index: token,
                vocab_size: self.vocab_size,
            })
        }
    }

    /// Draws one token from the target distribution.
    pub fn sample_target<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if rng.random::<f64>() < self.mu() {
            self.mask_id
        } else {
            rng.random_range(0..self.vocab_size)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// `alpha(t) = 1 - t`.
    #[default]
    Linear,
    /// `alpha(t) = 1 - ln(1 + (e - 1) t)`: noise is injected faster early on.
    LogLinear,
}

/// Signal-retention schedule `alpha(t)` on `[0, 1]` with `alpha(0) = 1` and `alpha(1) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
}

impl Schedule {
    pub const fn linear() -> Self {
        Self {
            kind: ScheduleKind::Linear,
        }
    }

    pub const fn log_linear() -> Self {
        Self {
            kind: ScheduleKind::LogLinear,
        }
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Linear => 1.0 - t,
            ScheduleKind::LogLinear => {
                let e_m1 = std::f64::consts::E - 1.0;
                // ln_1p keeps alpha(1) at zero to the last ulp
                1.0 - (e_m1 * t).ln_1p()
            }
        }
        .clamp(0.0, 1.0)
    }

    pub fn alpha_prime(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Linear => -1.0,
            ScheduleKind::LogLinear => {
                let e_m1 = std::f64::consts::E - 1.0;
                -e_m1 / (1.0 + e_m1 * t)
            }
        }
    }

    #[inline]
    pub fn beta(&self, t: f64) -> f64 {
        1.0 - self.alpha(t)
    }

    /// Conditional retention `alpha(t) / alpha(s)`; `s = t` is the identity even at `t = 1`.
    pub fn alpha_ts(&self, s: f64, t: f64) -> f64 {
        if s == t {
            return 1.0;
        }
        let a_s = self.alpha(s);
        if a_s == 0.0 {
            return 0.0;
        }
        (self.alpha(t) / a_s).clamp(0.0, 1.0)
    }
}

/// Checks `0 <= s <= t <= 1`.
pub(crate) fn check_times(s: f64, t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!(
            "times must lie in [0, 1], got s={s}, t={t}"
        )));
    }
    if t < s {
        return Err(Error::Domain(format!("require s <= t, got s={s}, t={t}")));
    }
    Ok(())
}

/// A sequence of token ids; may contain the mask token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<usize>);

impl TokenSeq {
    pub fn new(ids: Vec<usize>) -> Self {
        Self(ids)
    }

    pub fn filled(len: usize, token: usize) -> Self {
        Self(vec![token; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match self.0.iter().find(|&&id| id >= vocab_size) {
            Some(&index) => Err(Error::Index { index, vocab_size }),
            None => Ok(()),
        }
    }

    pub fn count(&self, token: usize) -> usize {
        self.0.iter().filter(|&&id| id == token).count()
    }
}

impl From<Vec<usize>> for TokenSeq {
    fn from(ids: Vec<usize>) -> Self {
        Self(ids)
    }
}

/// The dense `N x N` noise kernel: `K[i][j] = k/N + mu [j = mask]`.
pub fn dense_k(kernel: &MixedKernel) -> Array2<f64> {
    let n = kernel.vocab_size();
    Array2::from_shape_fn((n, n), |(_, j)| kernel.target_prob(j))
}

/// The dense forward transition matrix `Q_{t|s}`.
pub fn dense_q(kernel: &MixedKernel, schedule: &Schedule, s: f64, t: f64) -> Result<Array2<f64>> {
    check_times(s, t)?;
    let n = kernel.vocab_size();
    let a = schedule.alpha_ts(s, t);
    let b = 1.0 - a;
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        let keep = if i == j { a } else { 0.0 };
        keep + b * kernel.target_prob(j)
    }))
}

/// Samples `z_t ~ q(z_t | x_0)` independently per position.
///
/// Each position keeps its clean token with probability `alpha(t)` and is
/// otherwise redrawn from the target distribution.
pub fn corrupt(
    kernel: &MixedKernel,
    schedule: &Schedule,
    x0: &TokenSeq,
    t: f64,
    seed: u64,
) -> Result<TokenSeq> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corrupt_with(kernel, schedule, x0, t, &mut rng)
}

/// As [`corrupt`], drawing from a caller-supplied generator.
pub fn corrupt_with<R: Rng + ?Sized>(
    kernel: &MixedKernel,
    schedule: &Schedule,
    x0: &TokenSeq,
    t: f64,
    rng: &mut R,
) -> Result<TokenSeq> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time must lie in [0, 1], got {t}")));
    }
    x0.validate(kernel.vocab_size())?;
    let alpha = schedule.alpha(t);
    let ids = x0
        .ids()
        .iter()
        .map(|&x| {
            if rng.random::<f64>() < alpha {
                x
            } else {
                kernel.sample_target(rng)
            }
        })
        .collect();
    Ok(TokenSeq(ids))
}
