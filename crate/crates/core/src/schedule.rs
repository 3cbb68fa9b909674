//! Drift/volatility schedules of the base process and their Gaussian kernels.
//!
//! The base process is the linear SDE `dX = -a(t) X dt + sigma(t) dB`. Two
//! primitives of `(a, sigma)` drive everything downstream:
//!
//! * the resolvent `Phi(s, t) = exp(-∫_s^t a(u) du)`, and
//! * the covariance kernel anchored at `t0`,
//!   `C_t0(ta, tb) = ∫_t0^{min(ta,tb)} Phi(s, ta) Phi(s, tb) sigma(s)^2 ds`.
//!
//! Built-in schedules carry closed forms for both; `Custom` tabulated
//! schedules fall back to adaptive Simpson quadrature. The quadrature path is
//! also wired into every built-in schedule as an independent oracle so the
//! closed forms can be cross-checked at runtime (`validate-kernels`).

use crate::quad;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Regularity floor on sigma(t): schedules whose volatility dips below this
/// anywhere on the horizon are rejected at construction.
pub const SIGMA_MIN: f64 = 1e-6;

/// Grid resolution used for the construction-time sigma floor check.
const VALIDATION_POINTS: usize = 1024;

/// How a kernel value was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelMethod {
    ClosedForm,
    Quadrature,
}

/// One joint evaluation of the resolvent and covariance kernel.
#[derive(Debug, Clone, Copy)]
pub struct KernelEval {
    pub phi: f64,
    pub cov: f64,
    pub method: KernelMethod,
}

/// Tabulated `(t, a, sigma)` rows for custom schedules, interpolated
/// piecewise-linearly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScheduleTable {
    pub times: Vec<f64>,
    pub drift: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ScheduleTable {
    fn interp(&self, xs: &[f64], t: f64) -> f64 {
        let ts = &self.times;
        if t <= ts[0] {
            return xs[0];
        }
        if t >= *ts.last().unwrap() {
            return *xs.last().unwrap();
        }
        let j = match ts.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
            Ok(j) => return xs[j],
            Err(j) => j,
        };
        let w = (t - ts[j - 1]) / (ts[j] - ts[j - 1]);
        xs[j - 1] * (1.0 - w) + xs[j] * w
    }
}

/// Parameter set for one volatility schedule.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleKind {
    /// a = 0, sigma(t) = sigma.
    Constant { sigma: f64 },
    /// a(t) = a, sigma(t) = k * exp(-b t).
    ExponentialDecay { a: f64, b: f64, k: f64 },
    /// a = 0, sigma(t) = (alpha/2)(1 - cos(2 pi k t)) + eps.
    Periodic { alpha: f64, k: f64, eps: f64 },
    /// Periodic form evaluated at t - 1 with k = 0.5:
    /// sigma(t) = (alpha/2)(1 - cos(pi (t - 1))) + eps, decaying from
    /// alpha + eps at t = 0 to eps at t = 1.
    CosineDecay { alpha: f64, eps: f64 },
    /// Tabulated (t, a, sigma) samples; kernels via quadrature.
    Custom { table: ScheduleTable },
}

/// A validated schedule over a fixed horizon `[0, t_l]`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VolatilitySchedule {
    kind: ScheduleKind,
    horizon: f64,
}

impl VolatilitySchedule {
    /// Build and validate a schedule on `[0, horizon]`. Rejects parameter
    /// sets that violate `sigma(t) >= SIGMA_MIN` anywhere on a 1024-point
    /// grid, and tabulated schedules with non-finite entries.
    pub fn new(kind: ScheduleKind, horizon: f64) -> Result<Self> {
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(Error::InvalidSchedule(format!("horizon must be positive, got {horizon}")));
        }
        match &kind {
            ScheduleKind::Constant { sigma } => {
                if !sigma.is_finite() || *sigma < SIGMA_MIN {
                    return Err(Error::InvalidSchedule(format!("constant sigma {sigma} below floor {SIGMA_MIN}")));
                }
            }
            ScheduleKind::ExponentialDecay { a, b, k } => {
                if !(a.is_finite() && b.is_finite() && k.is_finite()) || *a < 0.0 || *b < 0.0 || *k <= 0.0 {
                    return Err(Error::InvalidSchedule(format!("exponential decay needs a >= 0, b >= 0, k > 0; got a={a} b={b} k={k}")));
                }
            }
            ScheduleKind::Periodic { alpha, k, eps } => {
                if !(alpha.is_finite() && k.is_finite() && eps.is_finite()) || *alpha < 0.0 || *k <= 0.0 {
                    return Err(Error::InvalidSchedule(format!("periodic needs alpha >= 0, k > 0; got alpha={alpha} k={k} eps={eps}")));
                }
            }
            ScheduleKind::CosineDecay { alpha, eps } => {
                if !(alpha.is_finite() && eps.is_finite()) || *alpha < 0.0 {
                    return Err(Error::InvalidSchedule(format!("cosine decay needs alpha >= 0; got alpha={alpha} eps={eps}")));
                }
            }
            ScheduleKind::Custom { table } => {
                let n = table.times.len();
                if n < 2 || table.drift.len() != n || table.sigma.len() != n {
                    return Err(Error::InvalidSchedule("custom table needs >= 2 rows with equal column lengths".into()));
                }
                if !table.times.windows(2).all(|w| w[0] < w[1]) {
                    return Err(Error::InvalidSchedule("custom table times must be strictly increasing".into()));
                }
                let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
                if !(finite(&table.times) && finite(&table.drift) && finite(&table.sigma)) {
                    return Err(Error::InvalidSchedule("custom table contains non-finite entries".into()));
                }
            }
        }
        let sched = VolatilitySchedule { kind, horizon };
        // Sigma floor over a dense grid; this is what rejects e.g. the
        // periodic schedule with eps = 0 whose volatility touches zero.
        for i in 0..=VALIDATION_POINTS {
            let t = horizon * i as f64 / VALIDATION_POINTS as f64;
            let s = sched.sigma(t);
            if !s.is_finite() || s < SIGMA_MIN {
                return Err(Error::InvalidSchedule(format!(
                    "sigma({t:.6}) = {s:.3e} violates the floor {SIGMA_MIN:.0e}"
                )));
            }
        }
        Ok(sched)
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Instantaneous drift coefficient a(t).
    pub fn drift_coeff(&self, t: f64) -> f64 {
        match &self.kind {
            ScheduleKind::Constant { .. } | ScheduleKind::Periodic { .. } | ScheduleKind::CosineDecay { .. } => 0.0,
            ScheduleKind::ExponentialDecay { a, .. } => *a,
            ScheduleKind::Custom { table } => table.interp(&table.drift, t),
        }
    }

    /// Instantaneous volatility sigma(t).
    pub fn sigma(&self, t: f64) -> f64 {
        match &self.kind {
            ScheduleKind::Constant { sigma } => *sigma,
            ScheduleKind::ExponentialDecay { b, k, .. } => k * (-b * t).exp(),
            ScheduleKind::Periodic { alpha, k, eps } => {
                0.5 * alpha * (1.0 - (2.0 * std::f64::consts::PI * k * t).cos()) + eps
            }
            ScheduleKind::CosineDecay { alpha, eps } => {
                0.5 * alpha * (1.0 - (std::f64::consts::PI * (t - 1.0)).cos()) + eps
            }
            ScheduleKind::Custom { table } => table.interp(&table.sigma, t),
        }
    }

    /// Instantaneous quadratic-variation density sigma(t)^2.
    pub fn quadratic_variation_rate(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        let s = self.sigma(t);
        Ok(s * s)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        // Allow the tiny exceedance the adaptive sampler introduces past t_l.
        let slack = 1e-3;
        if !t.is_finite() || t < -slack || t > self.horizon + slack {
            return Err(Error::Domain(format!("time {t} outside [0, {}]", self.horizon)));
        }
        Ok(())
    }

    /// Resolvent Phi(s, t), closed form where available.
    pub fn resolvent(&self, s: f64, t: f64) -> Result<f64> {
        self.check_time(s)?;
        self.check_time(t)?;
        if s > t {
            return Err(Error::Domain(format!("resolvent needs s <= t, got s={s} t={t}")));
        }
        Ok(match &self.kind {
            ScheduleKind::Constant { .. } | ScheduleKind::Periodic { .. } | ScheduleKind::CosineDecay { .. } => 1.0,
            ScheduleKind::ExponentialDecay { a, .. } => (-a * (t - s)).exp(),
            ScheduleKind::Custom { table } => {
                let integral = quad::integrate(|u| table.interp(&table.drift, u), s, t, quad::ABS_TOL);
                (-integral).exp()
            }
        })
    }

    /// Resolvent via quadrature regardless of schedule kind (oracle path).
    pub fn resolvent_quadrature(&self, s: f64, t: f64) -> Result<f64> {
        self.check_time(s)?;
        self.check_time(t)?;
        if s > t {
            return Err(Error::Domain(format!("resolvent needs s <= t, got s={s} t={t}")));
        }
        let integral = quad::integrate(|u| self.drift_coeff(u), s, t, quad::ABS_TOL);
        Ok((-integral).exp())
    }

    /// Covariance kernel C_anchor(ta, tb), closed form where available.
    pub fn cov_kernel(&self, anchor: f64, ta: f64, tb: f64) -> Result<f64> {
        self.check_cov_args(anchor, ta, tb)?;
        let m = ta.min(tb);
        Ok(match &self.kind {
            ScheduleKind::Constant { sigma } => sigma * sigma * (m - anchor),
            ScheduleKind::ExponentialDecay { a, b, k } => {
                // C = k^2 e^{-a(ta+tb)} ∫ e^{2(a-b)s} ds; the a = b case is the
                // removable singularity of the closed form.
                let pre = k * k * (-a * (ta + tb)).exp();
                let r = 2.0 * (a - b);
                if r.abs() < 1e-12 {
                    pre * (m - anchor)
                } else {
                    pre * ((r * m).exp() - (r * anchor).exp()) / r
                }
            }
            ScheduleKind::Periodic { alpha, k, eps } => {
                periodic_antiderivative(*alpha, *k, *eps, m) - periodic_antiderivative(*alpha, *k, *eps, anchor)
            }
            ScheduleKind::CosineDecay { alpha, eps } => {
                periodic_antiderivative(*alpha, 0.5, *eps, m - 1.0)
                    - periodic_antiderivative(*alpha, 0.5, *eps, anchor - 1.0)
            }
            ScheduleKind::Custom { .. } => self.cov_kernel_quadrature(anchor, ta, tb)?,
        })
    }

    /// Covariance kernel via quadrature regardless of schedule kind (oracle path).
    pub fn cov_kernel_quadrature(&self, anchor: f64, ta: f64, tb: f64) -> Result<f64> {
        self.check_cov_args(anchor, ta, tb)?;
        let m = ta.min(tb);
        let f = |s: f64| {
            let phi_a = self.resolvent(s, ta).unwrap_or(f64::NAN);
            let phi_b = self.resolvent(s, tb).unwrap_or(f64::NAN);
            let sig = self.sigma(s);
            phi_a * phi_b * sig * sig
        };
        Ok(quad::integrate(f, anchor, m, quad::ABS_TOL))
    }

    fn check_cov_args(&self, anchor: f64, ta: f64, tb: f64) -> Result<()> {
        self.check_time(anchor)?;
        self.check_time(ta)?;
        self.check_time(tb)?;
        if anchor > ta.min(tb) {
            return Err(Error::Domain(format!(
                "cov kernel needs anchor <= min(ta, tb), got anchor={anchor} ta={ta} tb={tb}"
            )));
        }
        Ok(())
    }

    /// Same schedule with sigma multiplied by `c` everywhere (drift
    /// untouched), re-validated against the sigma floor.
    pub fn scaled_sigma(&self, c: f64) -> Result<Self> {
        if !c.is_finite() || c <= 0.0 {
            return Err(Error::InvalidSchedule(format!("sigma scale must be positive, got {c}")));
        }
        let kind = match self.kind.clone() {
            ScheduleKind::Constant { sigma } => ScheduleKind::Constant { sigma: c * sigma },
            ScheduleKind::ExponentialDecay { a, b, k } => ScheduleKind::ExponentialDecay { a, b, k: c * k },
            ScheduleKind::Periodic { alpha, k, eps } => {
                ScheduleKind::Periodic { alpha: c * alpha, k, eps: c * eps }
            }
            ScheduleKind::CosineDecay { alpha, eps } => {
                ScheduleKind::CosineDecay { alpha: c * alpha, eps: c * eps }
            }
            ScheduleKind::Custom { table } => ScheduleKind::Custom {
                table: ScheduleTable {
                    times: table.times,
                    drift: table.drift,
                    sigma: table.sigma.into_iter().map(|s| c * s).collect(),
                },
            },
        };
        Self::new(kind, self.horizon)
    }

    /// Joint Phi/C evaluation with a record of the method used.
    pub fn kernel_eval(&self, anchor: f64, ta: f64, tb: f64) -> Result<KernelEval> {
        let method = match self.kind {
            ScheduleKind::Custom { .. } => KernelMethod::Quadrature,
            _ => KernelMethod::ClosedForm,
        };
        Ok(KernelEval {
            phi: self.resolvent(anchor, ta.min(tb))?,
            cov: self.cov_kernel(anchor, ta, tb)?,
            method,
        })
    }
}

/// Antiderivative of sigma(s)^2 for the periodic family:
/// (3 alpha^2/8 + alpha eps + eps^2) s
///   - alpha(alpha + 2 eps) sin(2 pi k s) / (4 pi k)
///   + alpha^2 sin(4 pi k s) / (32 pi k).
fn periodic_antiderivative(alpha: f64, k: f64, eps: f64, s: f64) -> f64 {
    let pk = std::f64::consts::PI * k;
    (3.0 * alpha * alpha / 8.0 + alpha * eps + eps * eps) * s
        - alpha * (alpha + 2.0 * eps) * (2.0 * pk * s).sin() / (4.0 * pk)
        + alpha * alpha * (4.0 * pk * s).sin() / (32.0 * pk)
}
