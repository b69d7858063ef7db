//! Uniform error bounds for the composite GP posterior.
//!
//! On a compact domain the model error satisfies, with probability at
//! least `1 - delta`,
//!
//! ```text
//! |f(x) - mu_f(x)| <= sqrt(beta(tau)) sigma_f(x) + gamma_f(tau)
//! ```
//!
//! simultaneously for all `x` (same form for `g`), with
//!
//! ```text
//! beta(tau)    = 2 d_x log(1 + r0 / tau) - 2 log(delta)
//! gamma_*(tau) = (L_mu* + L_*) tau + sqrt(beta(tau) L_sigma2* tau)
//! ```
//!
//! The grid constant `tau` trades the size of `beta` against the
//! continuity corrections `gamma`; the corrections vanish as `tau -> 0`.
//!
//! This module also carries the closed-form posterior-variance bounds in
//! terms of the local fill distance, obtained by restricting the posterior
//! to the nearest qualifying samples and bounding the largest Gram
//! eigenvalue through Gershgorin row sums.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::gp::{GpModel, LipschitzConstants};
use crate::kernels::Hyperparameters;
use crate::quality::QualityConfig;

/// Parameters of the uniform error bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundConfig {
    /// Grid constant, `tau > 0`.
    pub tau: f64,
    /// Confidence level, `delta` in (0, 1); each bound holds with
    /// probability `1 - delta`.
    pub delta: f64,
    /// Maximum diameter of the domain, `max ||x - x'||`.
    pub r0: f64,
    /// State dimension.
    pub d_x: usize,
    /// Estimated Lipschitz constants of the posterior fields.
    pub lipschitz: LipschitzConstants,
}

impl BoundConfig {
    pub fn new(
        tau: f64,
        delta: f64,
        r0: f64,
        d_x: usize,
        lipschitz: LipschitzConstants,
    ) -> Result<Self> {
        let c = Self {
            tau,
            delta,
            r0,
            d_x,
            lipschitz,
        };
        c.validate()?;
        Ok(c)
    }

    /// Config for a norm ball of the given radius (diameter `2 r`).
    pub fn for_ball(
        tau: f64,
        delta: f64,
        radius: f64,
        d_x: usize,
        lipschitz: LipschitzConstants,
    ) -> Result<Self> {
        Self::new(tau, delta, 2.0 * radius, d_x, lipschitz)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "bounds.tau must be finite and > 0, got {}",
                self.tau
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "bounds.delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if !(self.r0 > 0.0 && self.r0.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "bounds.r0 must be finite and > 0, got {}",
                self.r0
            )));
        }
        if self.d_x == 0 {
            return Err(Error::InvalidConfig("bounds.d_x must be >= 1".into()));
        }
        let l = &self.lipschitz;
        for (name, v) in [
            ("mu_f", l.mu_f),
            ("mu_g", l.mu_g),
            ("sigma2_f", l.sigma2_f),
            ("sigma2_g", l.sigma2_g),
            ("f", l.f),
            ("g", l.g),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "bounds.lipschitz.{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// `beta(tau) = 2 d_x log(1 + r0/tau) - 2 log(delta)`.
    pub fn beta(&self) -> f64 {
        2.0 * self.d_x as f64 * (1.0 + self.r0 / self.tau).ln() - 2.0 * self.delta.ln()
    }

    /// `gamma_f(tau) = (L_mu_f + L_f) tau + sqrt(beta(tau) L_sigma2_f tau)`.
    pub fn gamma_f(&self) -> f64 {
        (self.lipschitz.mu_f + self.lipschitz.f) * self.tau
            + (self.beta() * self.lipschitz.sigma2_f * self.tau).sqrt()
    }

    /// `gamma_g(tau) = (L_mu_g + L_g) tau + sqrt(beta(tau) L_sigma2_g tau)`.
    pub fn gamma_g(&self) -> f64 {
        (self.lipschitz.mu_g + self.lipschitz.g) * self.tau
            + (self.beta() * self.lipschitz.sigma2_g * self.tau).sqrt()
    }
}

/// Half-width of the high-probability tube around `mu_f` at a state:
/// `sqrt(beta) sigma_f(x) + gamma_f`.
pub fn uniform_bound_f(x: &DVector<f64>, model: &GpModel, c: &BoundConfig) -> f64 {
    c.beta().sqrt() * model.posterior_f(x).std() + c.gamma_f()
}

/// Half-width of the high-probability tube around `mu_g` at a state.
pub fn uniform_bound_g(x: &DVector<f64>, model: &GpModel, c: &BoundConfig) -> f64 {
    c.beta().sqrt() * model.posterior_g(x).std() + c.gamma_g()
}

/// Closed-form upper bound on `sigma_f^2` given the fill distance `phi` of
/// the `M` nearest samples with `|u| <= u_bar_f`:
///
/// ```text
/// sigma_f^2 <= s_f^2 - s_f^4 exp(-phi^2 / l_f^2)
///              / (s_f^2 + u_bar_f^2 s_g^2 + s_on^2 / M)
/// ```
///
/// Nondecreasing in `phi`, approaching `s_f^2` as `phi -> inf`. Infinite
/// `phi` (no qualifying samples) yields exactly `s_f^2`. The noise term
/// includes the Gram jitter so the chain stays consistent with the
/// factorized posterior.
pub fn variance_upper_f(phi: f64, q: &QualityConfig, h: &Hyperparameters) -> f64 {
    debug_assert!(phi >= 0.0);
    if phi.is_infinite() {
        return h.s_f2;
    }
    let m = q.m as f64;
    let denom = h.s_f2 + q.u_bar_f * q.u_bar_f * h.s_g2 + h.effective_noise() / m;
    h.s_f2 - h.s_f2 * h.s_f2 * (-phi * phi / (h.l_f * h.l_f)).exp() / denom
}

/// Analog of [`variance_upper_f`] for `sigma_g^2`, with the kernel-vector
/// norm scaled by the guaranteed input magnitude `u_low_g` and the
/// Gershgorin row sum taken at `u_bar_g`:
///
/// ```text
/// sigma_g^2 <= s_g^2 - u_low_g^2 s_g^4 exp(-phi^2 / l_g^2)
///              / (s_f^2 + u_bar_g^2 s_g^2 + s_on^2 / M)
/// ```
pub fn variance_upper_g(phi: f64, q: &QualityConfig, h: &Hyperparameters) -> f64 {
    debug_assert!(phi >= 0.0);
    if phi.is_infinite() {
        return h.s_g2;
    }
    let m = q.m as f64;
    let denom = h.s_f2 + q.u_bar_g * q.u_bar_g * h.s_g2 + h.effective_noise() / m;
    h.s_g2
        - q.u_low_g * q.u_low_g * h.s_g2 * h.s_g2 * (-phi * phi / (h.l_g * h.l_g)).exp() / denom
}
