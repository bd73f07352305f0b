//! Scalar posterior, KL divergence and training loss.
//!
//! Everything here runs in `O(N)` time per token and never builds an `N x N`
//! matrix. The building blocks are the noise rate
//!
//! ```text
//! r(e)      = k/N + mu [e = mask]
//! f_t(x, e) = alpha_t p_{x,e} + beta_t r(e)
//! ```
//!
//! where `p_{x,e}` is the mass a clean distribution (or token) `x` puts on
//! token `e`. The posterior is `f_s(x,e) f_{t|s}(e,z_t) / f_t(x,z_t)` and
//! the KL between the true and the model posterior factors into a scalar
//! prefactor times the auxiliary function `h`.
//!
//! KL, `h` and loss evaluation require both `x` and the prediction to put
//! zero mass on the mask token. Under that convention the mask term of the
//! vocabulary sum vanishes identically.

use crate::kernel::{check_times, MixedKernel, Schedule};
use crate::{Error, Result};

/// Default floor below which a logarithm argument is reported as an error.
pub const DEFAULT_EPS_LOG: f64 = 1e-30;

/// Tolerance on the total mass of a [`Simplex`].
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A probability distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Simplex(Vec<f64>);

impl Simplex {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::NotSimplex("empty distribution".into()));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(Error::NotSimplex(format!("entry {i} is {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::NotSimplex(format!("entries sum to {sum}")));
        }
        Ok(Self(probs))
    }

    /// Wraps a vector known to be normalized (checked in debug builds).
    pub(crate) fn from_normalized(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        Self(probs)
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut probs = vec![0.0; len];
        probs[index] = 1.0;
        Self(probs)
    }

    pub fn uniform(len: usize) -> Self {
        Self(vec![1.0 / len as f64; len])
    }

    /// Drops the mass on `mask_id` and renormalizes over the remaining tokens.
    pub fn without_mask(&self, mask_id: usize) -> Result<Self> {
        let rest = 1.0 - self.0[mask_id];
        if rest <= 0.0 {
            return Err(Error::NotSimplex("all mass sits on the mask token".into()));
        }
        let mut probs: Vec<f64> = self.0.iter().map(|p| p / rest).collect();
        probs[mask_id] = 0.0;
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for Simplex {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// First index of the largest entry.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A clean-data argument: either a single token or a full distribution.
#[derive(Debug, Clone, Copy)]
pub enum Dist<'a> {
    Token(usize),
    Probs(&'a [f64]),
}

impl Dist<'_> {
    /// `p_{x,e}`.
    #[inline]
    pub fn mass(&self, e: usize) -> f64 {
        match *self {
            Dist::Token(x) => f64::from(x == e),
            Dist::Probs(p) => p[e],
        }
    }
}

impl<'a> From<&'a Simplex> for Dist<'a> {
    fn from(s: &'a Simplex) -> Self {
        Dist::Probs(s.probs())
    }
}

/// Kernel, schedule and numeric policy shared by all scalar evaluations.
#[derive(Debug, Clone, Copy)]
pub struct ScalarContext {
    pub kernel: MixedKernel,
    pub schedule: Schedule,
    eps_log: f64,
}

/// Schedule values at one time point.
#[derive(Debug, Clone, Copy)]
struct At {
    alpha: f64,
    beta: f64,
}

impl ScalarContext {
    pub fn new(kernel: MixedKernel, schedule: Schedule) -> Self {
        Self {
            kernel,
            schedule,
            eps_log: DEFAULT_EPS_LOG,
        }
    }

    pub fn with_eps_log(mut self, eps_log: f64) -> Result<Self> {
        if !(eps_log > 0.0) || !eps_log.is_finite() {
            return Err(Error::Domain(format!(
                "eps_log must be positive, got {eps_log}"
            )));
        }
        self.eps_log = eps_log;
        Ok(self)
    }

    pub fn eps_log(&self) -> f64 {
        self.eps_log
    }

    #[inline]
    fn n(&self) -> usize {
        self.kernel.vocab_size()
    }

    #[inline]
    fn at(&self, t: f64) -> At {
        let alpha = self.schedule.alpha(t);
        At {
            alpha,
            beta: 1.0 - alpha,
        }
    }

    #[inline]
    fn r(&self, e: usize) -> f64 {
        self.kernel.target_prob(e)
    }

    #[inline]
    fn f(&self, at: At, x: Dist<'_>, e: usize) -> f64 {
        at.alpha * x.mass(e) + at.beta * self.r(e)
    }

    fn ln(&self, what: &'static str, v: f64) -> Result<f64> {
        if v > self.eps_log {
            Ok(v.ln())
        } else {
            Err(Error::LogFloor {
                what,
                value: v,
                floor: self.eps_log,
            })
        }
    }

    /// `ln(num / den)` with both arguments checked against the floor.
    fn ln_ratio(&self, what: &'static str, num: f64, den: f64) -> Result<f64> {
        self.ln(what, num)?;
        self.ln(what, den)?;
        Ok((num / den).ln())
    }

    fn check_dist(&self, x: Dist<'_>) -> Result<()> {
        match x {
            Dist::Token(e) => self.kernel.check_token(e),
            Dist::Probs(p) if p.len() != self.n() => Err(Error::NotSimplex(format!(
                "length {} does not match vocabulary size {}",
                p.len(),
                self.n()
            ))),
            Dist::Probs(_) => Ok(()),
        }
    }

    fn check_mask_free(&self, x: Dist<'_>) -> Result<()> {
        self.check_dist(x)?;
        let mask_id = self.kernel.mask_id();
        let mass = x.mass(mask_id);
        if mass != 0.0 {
            return Err(Error::MaskMass { mask_id, mass });
        }
        Ok(())
    }

    /// Noise rate `r(e) = k/N + mu [e = mask]`.
    pub fn noise_rate(&self, e: usize) -> Result<f64> {
        self.kernel.check_token(e)?;
        Ok(self.r(e))
    }

    /// Forward diffusion map `f_t(x, e) = alpha_t p_{x,e} + beta_t r(e)`.
    pub fn f_map(&self, t: f64, x: Dist<'_>, e: usize) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("time must lie in [0, 1], got {t}")));
        }
        self.check_dist(x)?;
        self.kernel.check_token(e)?;
        Ok(self.f(self.at(t), x, e))
    }

    /// Posterior `q(z_s = . | z_t, x)` over all `N` states.
    pub fn posterior(&self, s: f64, t: f64, zt: usize, x: Dist<'_>) -> Result<Simplex> {
        let mut out = vec![0.0; self.n()];
        self.posterior_into(s, t, zt, x, &mut out)?;
        Ok(Simplex::from_normalized(out))
    }

    /// As [`posterior`](Self::posterior), writing into a caller buffer of length `N`.
    pub fn posterior_into(
        &self,
        s: f64,
        t: f64,
        zt: usize,
        x: Dist<'_>,
        out: &mut [f64],
    ) -> Result<()> {
        check_times(s, t)?;
        self.kernel.check_token(zt)?;
        self.check_dist(x)?;
        assert_eq!(out.len(), self.n(), "posterior buffer has wrong length");
        let (at_s, at_t) = (self.at(s), self.at(t));
        let a_ts = self.schedule.alpha_ts(s, t);
        let b_ts = 1.0 - a_ts;
        let denom = self.f(at_t, x, zt);
        if !(denom > 0.0) {
            return Err(Error::DegenerateDenominator { zt, value: denom });
        }
        if s == t {
            out.fill(0.0);
            out[zt] = 1.0;
            return Ok(());
        }
        let noise = b_ts * self.r(zt);
        for (e, o) in out.iter_mut().enumerate() {
            let keep = if e == zt { a_ts } else { 0.0 };
            *o = self.f(at_s, x, e) * (keep + noise) / denom;
        }
        Ok(())
    }

    /// Prefactor `beta_{t|s} alpha_s r(z_t) / f_t(x, z_t)` linking `h` to the KL.
    pub fn kl_prefactor(&self, s: f64, t: f64, zt: usize, x: Dist<'_>) -> Result<f64> {
        check_times(s, t)?;
        self.kernel.check_token(zt)?;
        self.check_dist(x)?;
        let denom = self.f(self.at(t), x, zt);
        if !(denom > 0.0) {
            return Err(Error::DegenerateDenominator { zt, value: denom });
        }
        let b_ts = 1.0 - self.schedule.alpha_ts(s, t);
        Ok(b_ts * self.schedule.alpha(s) * self.r(zt) / denom)
    }

    /// The auxiliary function `h` for a finite gap `s < t`.
    ///
    /// Requires `r(z_t) > 0`; when it is zero the KL vanishes and `h` is unbounded.
    pub fn h_exact(&self, s: f64, t: f64, zt: usize, x: Dist<'_>, x_pred: &Simplex) -> Result<f64> {
        check_times(s, t)?;
        if s >= t {
            return Err(Error::Domain(format!("h requires s < t, got s={s}, t={t}")));
        }
        self.kernel.check_token(zt)?;
        self.check_mask_free(x)?;
        let xp = Dist::from(x_pred);
        self.check_mask_free(xp)?;

        let (at_s, at_t) = (self.at(s), self.at(t));
        if !(at_s.alpha > 0.0) {
            return Err(Error::Domain(format!("h requires alpha(s) > 0, got s={s}")));
        }
        let r_z = self.r(zt);
        if r_z == 0.0 {
            return Err(Error::Domain(format!(
                "h is unbounded when r(z_t) = 0 (z_t = {zt})"
            )));
        }
        let a_ts = self.schedule.alpha_ts(s, t);
        let b_ts = 1.0 - a_ts;

        let fsx_z = self.f(at_s, x, zt);
        let ftx_z = self.f(at_t, x, zt);
        let fsp_z = self.f(at_s, xp, zt);
        let ftp_z = self.f(at_t, xp, zt);
        if !(ftx_z > 0.0) {
            return Err(Error::DegenerateDenominator { zt, value: ftx_z });
        }

        let mut h = 0.0;
        let c1 = fsx_z / r_z * a_ts / (b_ts * at_s.alpha);
        if c1 != 0.0 {
            h += c1 * self.ln_ratio("f(., z_t) cross product", fsx_z * ftp_z, ftx_z * fsp_z)?;
        }
        h -= self.ln_ratio("f_t(., z_t)", ftx_z, ftp_z)? / at_s.alpha;
        h += self.vocab_terms(at_s, x, xp)?;
        Ok(h)
    }

    /// `sum_e p_{x,e} ln(f(x,e)/f(x_pred,e)) + k beta / (N alpha) sum_e ln(f(x,e)/f(x_pred,e))`.
    fn vocab_terms(&self, at: At, x: Dist<'_>, xp: Dist<'_>) -> Result<f64> {
        let mut total = 0.0;
        match x {
            Dist::Token(e) => {
                total += self.ln_ratio("f(., x)", self.f(at, x, e), self.f(at, xp, e))?;
            }
            Dist::Probs(p) => {
                for (e, &pe) in p.iter().enumerate() {
                    if pe > 0.0 {
                        total +=
                            pe * self.ln_ratio("f(., e)", self.f(at, x, e), self.f(at, xp, e))?;
                    }
                }
            }
        }
        let c = self.kernel.k() * at.beta / (self.n() as f64 * at.alpha);
        if c != 0.0 {
            let mut sum = 0.0;
            for e in 0..self.n() {
                sum += self.ln_ratio("f(., e)", self.f(at, x, e), self.f(at, xp, e))?;
            }
            total += c * sum;
        }
        Ok(total)
    }

    /// The `s -> t` limit of `h`, free of the `0/0` log term.
    pub fn h_limit(&self, t: f64, zt: usize, x: Dist<'_>, x_pred: &Simplex) -> Result<f64> {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Domain(format!(
                "h_limit requires t in (0, 1), got {t}"
            )));
        }
        self.kernel.check_token(zt)?;
        self.check_mask_free(x)?;
        let xp = Dist::from(x_pred);
        self.check_mask_free(xp)?;
        let at = self.at(t);
        if !(at.alpha > 0.0) {
            return Err(Error::Domain(format!(
                "h_limit requires alpha(t) > 0, got t={t}"
            )));
        }
        let ftx_z = self.f(at, x, zt);
        let ftp_z = self.f(at, xp, zt);
        if !(ftx_z > 0.0) {
            return Err(Error::DegenerateDenominator { zt, value: ftx_z });
        }
        self.ln("f_t(x_pred, z_t)", ftp_z)?;
        let mut h = (x.mass(zt) - xp.mass(zt)) / ftp_z;
        h -= self.ln_ratio("f_t(., z_t)", ftx_z, ftp_z)? / at.alpha;
        h += self.vocab_terms(at, x, xp)?;
        Ok(h)
    }

    /// Scalar KL divergence between the true and the model posterior.
    pub fn kl_scalar(
        &self,
        s: f64,
        t: f64,
        zt: usize,
        x: Dist<'_>,
        x_pred: &Simplex,
    ) -> Result<f64> {
        let prefactor = self.kl_prefactor(s, t, zt, x)?;
        self.check_mask_free(x)?;
        self.check_mask_free(Dist::from(x_pred))?;
        if prefactor == 0.0 {
            // s = t, r(z_t) = 0 or alpha_s = 0: both posteriors coincide
            return Ok(0.0);
        }
        Ok(prefactor * self.h_exact(s, t, zt, x, x_pred)?)
    }

    /// Continuous-time loss weight `-alpha'_t r(z_t) / f_t(x, z_t)`.
    pub fn loss_weight(&self, t: f64, zt: usize, x: usize) -> Result<f64> {
        self.kernel.check_token(zt)?;
        self.kernel.check_token(x)?;
        let denom = self.f(self.at(t), Dist::Token(x), zt);
        if !(denom > 0.0) {
            return Err(Error::DegenerateDenominator { zt, value: denom });
        }
        Ok(-self.schedule.alpha_prime(t) * self.r(zt) / denom)
    }

    /// Per-token continuous-time training loss for clean token `x`.
    pub fn loss_term(&self, t: f64, zt: usize, x: usize, x_pred: &Simplex) -> Result<f64> {
        let w = self.loss_weight(t, zt, x)?;
        if w == 0.0 {
            return Ok(0.0);
        }
        Ok(w * self.h_limit(t, zt, Dist::Token(x), x_pred)?)
    }

    /// [`loss_term`](Self::loss_term) together with its gradient with respect
    /// to the predicted probabilities, written into `grad` (mask entry is 0).
    pub fn loss_term_with_grad(
        &self,
        t: f64,
        zt: usize,
        x: usize,
        x_pred: &Simplex,
        grad: &mut [f64],
    ) -> Result<f64> {
        assert_eq!(grad.len(), self.n(), "gradient buffer has wrong length");
        grad.fill(0.0);
        let w = self.loss_weight(t, zt, x)?;
        if w == 0.0 {
            return Ok(0.0);
        }
        let loss = w * self.h_limit(t, zt, Dist::Token(x), x_pred)?;

        let at = self.at(t);
        let xd = Dist::Token(x);
        let q = x_pred.probs();
        let mask_id = self.kernel.mask_id();
        let uniform = self.kernel.k() * at.beta / self.n() as f64;
        for (j, g) in grad.iter_mut().enumerate() {
            if j == mask_id {
                continue;
            }
            let fp = at.alpha * q[j] + at.beta * self.r(j);
            *g = -(at.alpha * xd.mass(j) + uniform) / fp;
        }
        let fp_z = at.alpha * q[zt] + at.beta * self.r(zt);
        if zt != mask_id {
            grad[zt] -= (xd.mass(zt) - q[zt]) * at.alpha / (fp_z * fp_z);
        }
        for g in grad.iter_mut() {
            *g *= w;
        }
        Ok(loss)
    }
}
