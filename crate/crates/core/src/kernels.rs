//! Gaussian kernels of the base process: the noising kernel used to
//! synthesize training inputs, the non-singular score target it regresses
//! onto, and a closed-form oracle score for Gaussian-mixture next-state
//! conditionals.
//!
//! With `Phi` and `C` from [`crate::schedule`], conditioning the linear base
//! process on the bracketing waypoints gives
//!
//! * noising kernel: `x_t | (x_prev, x_next)` is Gaussian with
//!   `mean = Phi(tp,t) x_prev + [C(t,tn)/C(tn,tn)] (x_next - Phi(tp,tn) x_prev)`
//!   and isotropic variance `C(t,t) - C(t,tn)^2/C(tn,tn)`, all anchored at
//!   `tp`; the variance vanishes exactly at both endpoints;
//! * score target: `grad_x log p(x_next | x_t) =
//!   [Phi(t,tn)/C_t(tn,tn)] (x_next - Phi(t,tn) x_t)`.
//!
//! When the data conditional of `x_next` given the history is a Gaussian
//! mixture, the marginal of `x_t` given the history is again a Gaussian
//! mixture (affine-Gaussian convolution), so the oracle drift is available in
//! closed form. The oracle is a test/verification construction: training
//! never consults it.

use crate::schedule::VolatilitySchedule;
use crate::{Error, Result};

/// Parameters of the noising kernel `x_t | (x_prev, x_next)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisingKernelParams {
    pub mean: Vec<f64>,
    /// Isotropic variance coefficient.
    pub var: f64,
}

/// A Gaussian-mixture model of the next-state conditional
/// `p(x_next | history)`: simplex weights, component means, one shared
/// isotropic variance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixtureNext {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    var: f64,
}

impl GaussianMixtureNext {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, var: f64) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() {
            return Err(Error::Shape("mixture needs matching weights and means".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Domain(format!("mixture weights must lie on the simplex, sum {sum}")));
        }
        if var < 0.0 || !var.is_finite() {
            return Err(Error::Domain(format!("mixture variance must be finite and >= 0, got {var}")));
        }
        let dim = means[0].len();
        if means.iter().any(|m| m.len() != dim) {
            return Err(Error::Shape("mixture means must share one dimension".into()));
        }
        Ok(GaussianMixtureNext { weights, means, var })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn var(&self) -> f64 {
        self.var
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }
}

fn check_dims(xs: &[&[f64]]) -> Result<usize> {
    let d = xs[0].len();
    if xs.iter().any(|x| x.len() != d) {
        return Err(Error::Shape("state vectors must share one dimension".into()));
    }
    Ok(d)
}

/// Noising kernel `p(x_t | x_prev at t_prev, x_next at t_next)`.
///
/// The endpoint cases are returned exactly (mean = endpoint, variance = 0)
/// rather than through the formula, which would leave rounding residue.
pub fn noising_kernel(
    sched: &VolatilitySchedule,
    t_prev: f64,
    t_next: f64,
    x_prev: &[f64],
    x_next: &[f64],
    t: f64,
) -> Result<NoisingKernelParams> {
    check_dims(&[x_prev, x_next])?;
    if !(t_prev <= t && t <= t_next) {
        return Err(Error::Domain(format!("need t_prev <= t <= t_next, got {t_prev} {t} {t_next}")));
    }
    if t == t_prev {
        return Ok(NoisingKernelParams { mean: x_prev.to_vec(), var: 0.0 });
    }
    if t == t_next {
        return Ok(NoisingKernelParams { mean: x_next.to_vec(), var: 0.0 });
    }
    let c_nn = sched.cov_kernel(t_prev, t_next, t_next)?;
    if c_nn <= 0.0 {
        return Err(Error::DegenerateSegment(format!(
            "C_{t_prev}({t_next},{t_next}) = {c_nn}; segment carries no noise"
        )));
    }
    let c_tt = sched.cov_kernel(t_prev, t, t)?;
    let c_tn = sched.cov_kernel(t_prev, t, t_next)?;
    let phi_pt = sched.resolvent(t_prev, t)?;
    let phi_pn = sched.resolvent(t_prev, t_next)?;
    let gain = c_tn / c_nn;
    let mean = x_prev
        .iter()
        .zip(x_next)
        .map(|(&xp, &xn)| phi_pt * xp + gain * (xn - phi_pn * xp))
        .collect();
    let var = (c_tt - c_tn * c_tn / c_nn).max(0.0);
    Ok(NoisingKernelParams { mean, var })
}

/// Score target `grad_{x_t} log p(x_next | x_t)` — linear in both states and
/// non-singular for `t < t_next`.
pub fn score_target(
    sched: &VolatilitySchedule,
    t: f64,
    t_next: f64,
    x_t: &[f64],
    x_next: &[f64],
) -> Result<Vec<f64>> {
    check_dims(&[x_t, x_next])?;
    if t >= t_next {
        return Err(Error::SingularTarget(format!("score target needs t < t_next, got {t} >= {t_next}")));
    }
    let phi = sched.resolvent(t, t_next)?;
    let c = sched.cov_kernel(t, t_next, t_next)?;
    if c <= 0.0 {
        return Err(Error::SingularTarget(format!("C_{t}({t_next},{t_next}) = {c}")));
    }
    Ok(x_t
        .iter()
        .zip(x_next)
        .map(|(&xt, &xn)| phi / c * (xn - phi * xt))
        .collect())
}

/// Loss weight `w(t, t_prev, t_next) = C_t(t_next, t_next) / Phi(t, t_next)`.
pub fn loss_weight(sched: &VolatilitySchedule, t: f64, t_next: f64) -> Result<f64> {
    let phi = sched.resolvent(t, t_next)?;
    let c = sched.cov_kernel(t, t_next, t_next)?;
    Ok(c / phi)
}

/// Closed-form oracle score
/// `s(t, x_t; history) = -grad log p_base(x_t | x_prev)
///                        + grad log ∫ p_data(x_next | history) p_base(x_t | x_prev, x_next) dx_next`
/// for a Gaussian-mixture `p_data(x_next | history)`.
///
/// Under the affine noising kernel the integral is a Gaussian mixture in
/// `x_t` with component means `a + gain * m_j` and shared variance
/// `gain^2 * var_mix + var_noising`, so both terms are exact. Mixture
/// responsibilities are computed in log space.
pub fn oracle_score(
    sched: &VolatilitySchedule,
    t: f64,
    t_prev: f64,
    t_next: f64,
    x_prev: &[f64],
    mixture: &GaussianMixtureNext,
    x_t: &[f64],
) -> Result<Vec<f64>> {
    let d = check_dims(&[x_prev, x_t])?;
    if mixture.dim() != d {
        return Err(Error::Shape(format!("mixture dim {} vs state dim {d}", mixture.dim())));
    }
    if !(t_prev < t && t < t_next) {
        return Err(Error::Domain(format!("need t_prev < t < t_next, got {t_prev} {t} {t_next}")));
    }
    let c_tt = sched.cov_kernel(t_prev, t, t)?;
    let c_tn = sched.cov_kernel(t_prev, t, t_next)?;
    let c_nn = sched.cov_kernel(t_prev, t_next, t_next)?;
    let phi_pt = sched.resolvent(t_prev, t)?;
    let phi_pn = sched.resolvent(t_prev, t_next)?;
    let gain = c_tn / c_nn;
    let var_noising = (c_tt - c_tn * c_tn / c_nn).max(0.0);
    let var_conv = gain * gain * mixture.var() + var_noising;
    if var_conv <= 0.0 {
        return Err(Error::DegenerateSegment(format!("convolved variance {var_conv} at t = {t}")));
    }

    // Component means of the mixture in x_t space.
    let comp_means: Vec<Vec<f64>> = mixture
        .means()
        .iter()
        .map(|m| {
            x_prev
                .iter()
                .zip(m)
                .map(|(&xp, &mj)| phi_pt * xp + gain * (mj - phi_pn * xp))
                .collect()
        })
        .collect();

    // Log responsibilities via log-sum-exp.
    let log_terms: Vec<f64> = mixture
        .weights()
        .iter()
        .zip(&comp_means)
        .map(|(w, cm)| {
            let sq: f64 = x_t.iter().zip(cm).map(|(&x, &c)| (x - c) * (x - c)).sum();
            w.max(f64::MIN_POSITIVE).ln() - 0.5 * sq / var_conv
        })
        .collect();
    let max_log = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // The shared Gaussian normalizer cancels in the responsibilities, and
    // log-sum-exp keeps them exact at any depth, so only a genuinely
    // unrepresentable exponent is an error. Coarse Euler steps near pins
    // openly reach log densities of -1e4 and stay well-posed.
    let log_norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI * var_conv).ln();
    let log_density = max_log + log_norm;
    if !log_density.is_finite() || log_density < -1e15 {
        return Err(Error::Underflow(format!(
            "mixture density at x_t underflows (log density {log_density:.3e})"
        )));
    }
    let denom: f64 = log_terms.iter().map(|l| (l - max_log).exp()).sum();
    let resp: Vec<f64> = log_terms.iter().map(|l| (l - max_log).exp() / denom).collect();

    // grad log mixture - grad log p_base(x_t | x_prev), the latter with a
    // positive sign after the leading minus.
    if c_tt <= 0.0 {
        return Err(Error::DegenerateSegment(format!("C_{t_prev}({t},{t}) = {c_tt}")));
    }
    let mut out = vec![0.0; d];
    for k in 0..d {
        let mut grad_mix = 0.0;
        for (r, cm) in resp.iter().zip(&comp_means) {
            grad_mix -= r * (x_t[k] - cm[k]) / var_conv;
        }
        let grad_base = -(x_t[k] - phi_pt * x_prev[k]) / c_tt;
        out[k] = grad_mix - grad_base;
    }
    Ok(out)
}
