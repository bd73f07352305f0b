//! Dense-matrix reference implementations.
//!
//! These are deliberately naive: posteriors are formed from explicit
//! `N x N` transition matrices via Bayes' rule, and KL divergences by direct
//! summation over all states. They share no arithmetic with [`crate::scalar`]
//! and serve as ground truth for it.

use ndarray::Array1;

use crate::kernel::{dense_q, MixedKernel, Schedule};
use crate::scalar::Dist;
use crate::{Error, Result};

/// Largest vocabulary the oracle accepts.
pub const MAX_ORACLE_VOCAB: usize = 4096;

/// A posterior computed from dense matrices, with its Bayes normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct DensePosterior {
    pub probs: Vec<f64>,
    /// `z_t^T Q_{t|0}^T x`.
    pub denom: f64,
}

fn dense_vec(n: usize, x: Dist<'_>) -> Result<Array1<f64>> {
    match x {
        Dist::Token(e) if e >= n => Err(Error::Index {
            index: e,
            vocab_size: n,
        }),
        Dist::Probs(p) if p.len() != n => Err(Error::NotSimplex(format!(
            "length {} does not match vocabulary size {n}",
            p.len()
        ))),
        _ => Ok(Array1::from_shape_fn(n, |e| x.mass(e))),
    }
}

fn check_cap(kernel: &MixedKernel) -> Result<()> {
    if kernel.vocab_size() > MAX_ORACLE_VOCAB {
        return Err(Error::Domain(format!(
            "oracle is capped at N = {MAX_ORACLE_VOCAB}, got {}",
            kernel.vocab_size()
        )));
    }
    Ok(())
}

/// `q(z_s | z_t, x) = (Q_{t|s} z_t) * (Q_{s|0}^T x) / (z_t^T Q_{t|0}^T x)`.
pub fn posterior_matrix(
    kernel: &MixedKernel,
    schedule: &Schedule,
    s: f64,
    t: f64,
    zt: usize,
    x: Dist<'_>,
) -> Result<DensePosterior> {
    check_cap(kernel)?;
    kernel.check_token(zt)?;
    let n = kernel.vocab_size();
    let x = dense_vec(n, x)?;
    let q_ts = dense_q(kernel, schedule, s, t)?;
    let q_s0 = dense_q(kernel, schedule, 0.0, s)?;
    let q_t0 = dense_q(kernel, schedule, 0.0, t)?;

    let mut zt_vec = Array1::zeros(n);
    zt_vec[zt] = 1.0;
    let backward: Array1<f64> = q_ts.dot(&zt_vec);
    let forward: Array1<f64> = q_s0.t().dot(&x);
    let denom = zt_vec.dot(&q_t0.t().dot(&x));
    if !(denom > 0.0) {
        return Err(Error::DegenerateDenominator { zt, value: denom });
    }
    let probs = (&backward * &forward / denom).to_vec();
    Ok(DensePosterior { probs, denom })
}

/// `sum_e q_e ln(q_e / max(p_e, eps))`, skipping states with `q_e = 0`.
pub fn kl_divergence(q: &[f64], p: &[f64], eps_log: f64) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(&qe, _)| qe > 0.0)
        .map(|(&qe, &pe)| qe * (qe / pe.max(eps_log)).ln())
        .sum()
}

/// KL between the true posterior (clean `x`) and the model posterior (`x_pred`).
#[allow(clippy::too_many_arguments)]
pub fn kl_matrix(
    kernel: &MixedKernel,
    schedule: &Schedule,
    s: f64,
    t: f64,
    zt: usize,
    x: Dist<'_>,
    x_pred: &[f64],
    eps_log: f64,
) -> Result<f64> {
    let q = posterior_matrix(kernel, schedule, s, t, zt, x)?;
    let p = posterior_matrix(kernel, schedule, s, t, zt, Dist::Probs(x_pred))?;
    Ok(kl_divergence(&q.probs, &p.probs, eps_log))
}

/// The absorbing (`k = 0`) posterior in closed form.
pub fn mdlm_posterior(
    schedule: &Schedule,
    s: f64,
    t: f64,
    zt: usize,
    mask_id: usize,
    x_pred: &[f64],
) -> Vec<f64> {
    let n = x_pred.len();
    let mut out = vec![0.0; n];
    if zt != mask_id {
        out[zt] = 1.0;
        return out;
    }
    if s == t {
        out[mask_id] = 1.0;
        return out;
    }
    let (a_s, a_t) = (schedule.alpha(s), schedule.alpha(t));
    let (b_s, b_t) = (1.0 - a_s, 1.0 - a_t);
    for (e, o) in out.iter_mut().enumerate() {
        *o = if e == mask_id {
            b_s / b_t
        } else {
            (a_s - a_t) / (1.0 - a_t) * x_pred[e]
        };
    }
    out
}

/// The absorbing (`k = 0`) KL: masked cross-entropy scaled by `beta_{t|s} alpha_s / beta_t`.
pub fn mdlm_kl(
    schedule: &Schedule,
    s: f64,
    t: f64,
    zt: usize,
    mask_id: usize,
    x: usize,
    x_pred: &[f64],
) -> f64 {
    if zt != mask_id || s == t {
        return 0.0;
    }
    let a_s = schedule.alpha(s);
    let a_t = schedule.alpha(t);
    let b_ts = 1.0 - a_t / a_s;
    -(b_ts * a_s / (1.0 - a_t)) * x_pred[x].ln()
}

/// Limiting KL rate of the uniform (`k = 1`) process, i.e. `KL / (beta_{t|s} alpha_s)` as `s -> t`,
/// written in terms of `xbar_j = N f_t(x, e_j)`.
///
/// The vocabulary sum runs over every state; the `j = z_t` summand is `ln 1 = 0`.
pub fn udlm_kl_rate(schedule: &Schedule, t: f64, zt: usize, x: Dist<'_>, x_pred: &[f64]) -> f64 {
    let n = x_pred.len();
    let nf = n as f64;
    let a_t = schedule.alpha(t);
    let b_t = 1.0 - a_t;
    let xbar = |d: Dist<'_>, j: usize| nf * a_t * d.mass(j) + b_t;
    let xp = Dist::Probs(x_pred);
    let (xb_i, xbp_i) = (xbar(x, zt), xbar(xp, zt));
    let sum: f64 = (0..n)
        .map(|j| {
            let xb_j = xbar(x, j);
            xb_j / xb_i * ((xbp_i * xb_j) / (xbar(xp, j) * xb_i)).ln()
        })
        .sum();
    -(nf / xb_i - nf / xbp_i - sum) / (nf * a_t)
}

/// The uniform (`k = 1`) KL with the limiting rate and the finite-gap factor `beta_{t|s} alpha_s`.
pub fn udlm_kl(schedule: &Schedule, s: f64, t: f64, zt: usize, x: Dist<'_>, x_pred: &[f64]) -> f64 {
    let a_s = schedule.alpha(s);
    let b_ts = 1.0 - schedule.alpha_ts(s, t);
    b_ts * a_s * udlm_kl_rate(schedule, t, zt, x, x_pred)
}

/// Largest elementwise absolute difference.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_uniform_posterior() {
        let kernel = MixedKernel::new(2, 1, 1.0).unwrap();
        let post =
            posterior_matrix(&kernel, &Schedule::linear(), 0.25, 0.75, 0, Dist::Token(0)).unwrap();
        // [(2/3)(7/8), (1/3)(1/8)] / (5/8) = [14/15, 1/15]
        assert!((post.denom - 0.625).abs() < 1e-15);
        assert!((post.probs[0] - 14.0 / 15.0).abs() < 1e-12);
        assert!((post.probs[1] - 1.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn equal_times_give_point_mass() {
        let kernel = MixedKernel::new(4, 3, 0.4).unwrap();
        let x = [0.2, 0.3, 0.5, 0.0];
        let post =
            posterior_matrix(&kernel, &Schedule::linear(), 0.6, 0.6, 1, Dist::Probs(&x)).unwrap();
        assert_eq!(post.probs, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn posterior_is_normalized() {
        let kernel = MixedKernel::new(7, 6, 0.3).unwrap();
        let x = [0.1, 0.2, 0.05, 0.15, 0.3, 0.2, 0.0];
        for zt in 0..7 {
            let post = posterior_matrix(
                &kernel,
                &Schedule::log_linear(),
                0.2,
                0.8,
                zt,
                Dist::Probs(&x),
            )
            .unwrap();
            assert!((post.probs.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            assert!(post.probs.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn degenerate_denominator_reported() {
        let kernel = MixedKernel::new(4, 3, 0.0).unwrap();
        let err = posterior_matrix(&kernel, &Schedule::linear(), 0.2, 0.5, 1, Dist::Token(0));
        assert!(matches!(err, Err(Error::DegenerateDenominator { .. })));
    }

    #[test]
    fn kl_examples() {
        let q = [0.1, 0.6, 0.3];
        assert_eq!(kl_divergence(&q, &q, 1e-30), 0.0);
        let p = [0.6, 0.1, 0.3];
        let want = 0.1 * (0.1f64 / 0.6).ln() + 0.6 * (0.6f64 / 0.1).ln();
        assert!((kl_divergence(&q, &p, 1e-30) - want).abs() < 1e-15);

        let kernel = MixedKernel::new(4, 3, 0.2).unwrap();
        let x = [0.3, 0.3, 0.4, 0.0];
        let kl = kl_matrix(
            &kernel,
            &Schedule::linear(),
            0.2,
            0.5,
            3,
            Dist::Probs(&x),
            &x,
            1e-30,
        );
        assert_eq!(kl.unwrap(), 0.0);
    }

    #[test]
    fn mdlm_posterior_cases() {
        let sched = Schedule::linear();
        let xp = [0.5, 0.3, 0.2, 0.0];
        assert_eq!(
            mdlm_posterior(&sched, 0.2, 0.6, 1, 3, &xp),
            vec![0.0, 1.0, 0.0, 0.0]
        );
        let post = mdlm_posterior(&sched, 0.2, 0.6, 3, 3, &xp);
        assert!((post[3] - 0.2 / 0.6).abs() < 1e-15);
        assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(
            mdlm_posterior(&sched, 0.6, 0.6, 3, 3, &xp),
            vec![0.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn mdlm_posterior_equals_dense_at_k0() {
        let kernel = MixedKernel::new(5, 4, 0.0).unwrap();
        let sched = Schedule::linear();
        let xp = [0.1, 0.4, 0.3, 0.2, 0.0];
        for zt in 0..5 {
            let dense = posterior_matrix(&kernel, &sched, 0.3, 0.7, zt, Dist::Probs(&xp)).unwrap();
            let closed = mdlm_posterior(&sched, 0.3, 0.7, zt, 4, &xp);
            assert!(max_abs_diff(&dense.probs, &closed) < 1e-12);
        }
    }

    /// Direct KL over two states, extrapolated to the `s -> t` limit.
    #[test]
    fn udlm_two_state_brute_force() {
        let sched = Schedule::linear();
        let kernel = MixedKernel::new(2, 1, 1.0).unwrap();
        let t = 0.5;
        let x = [1.0, 0.0];
        let xp = [0.01, 0.99];
        for zt in 0..2 {
            let rate = |delta: f64| {
                let s = t - delta;
                // two-state posteriors written out by hand
                let post = |p: &[f64; 2]| {
                    let (a_s, a_t) = (sched.alpha(s), sched.alpha(t));
                    let a_ts = a_t / a_s;
                    let w: Vec<f64> = (0..2)
                        .map(|e| {
                            let fs = a_s * p[e] + (1.0 - a_s) * 0.5;
                            let fts = a_ts * f64::from(e == zt) + (1.0 - a_ts) * 0.5;
                            fs * fts
                        })
                        .collect();
                    let z = w[0] + w[1];
                    [w[0] / z, w[1] / z]
                };
                let q = post(&x);
                let p = post(&xp);
                let kl = q[0] * (q[0] / p[0]).ln() + q[1] * (q[1] / p[1]).ln();
                let factor = (1.0 - sched.alpha(t) / sched.alpha(s)) * sched.alpha(s);
                kl / factor
            };
            let extrapolated = 2.0 * rate(5e-6) - rate(1e-5);
            let closed = udlm_kl_rate(&sched, t, zt, Dist::Probs(&x), &xp);
            assert!(
                (extrapolated - closed).abs() < 1e-6,
                "zt={zt}: {extrapolated} vs {closed}"
            );
            let dense = kl_matrix(
                &kernel,
                &sched,
                t - 1e-5,
                t,
                zt,
                Dist::Probs(&x),
                &xp,
                1e-30,
            )
            .unwrap();
            assert!(dense > 0.0);
        }
    }

    #[test]
    fn udlm_vanishes_for_identical() {
        let x = [0.2, 0.3, 0.5];
        assert!(udlm_kl_rate(&Schedule::linear(), 0.4, 1, Dist::Probs(&x), &x).abs() < 1e-14);
    }

    #[test]
    fn oracle_is_deterministic() {
        let kernel = MixedKernel::new(6, 5, 0.3).unwrap();
        let x = [0.1, 0.2, 0.3, 0.15, 0.25, 0.0];
        let a =
            posterior_matrix(&kernel, &Schedule::linear(), 0.1, 0.9, 2, Dist::Probs(&x)).unwrap();
        let b =
            posterior_matrix(&kernel, &Schedule::linear(), 0.1, 0.9, 2, Dist::Probs(&x)).unwrap();
        assert_eq!(a, b);
    }
}
