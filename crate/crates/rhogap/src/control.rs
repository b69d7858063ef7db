//! Feedback-linearizing tracking control and the uncertainty-dependent
//! ultimate bound.
//!
//! The tracking error is compressed into the filtered state
//! `r = [lambda' 1] e` with Hurwitz coefficients `lambda`; the control law
//!
//! ```text
//! pi(x) = (nu - mu_f(x)) / mu_g(x)
//! nu    = -k_c r - lambda' e_{2:d_x} + d^{d_x} x_d / dt^{d_x}
//! ```
//!
//! cancels the learned dynamics. When the posterior uncertainty about `g`
//! is small enough relative to the gain margin,
//! `alpha(x) = (sqrt(beta) sigma_g + gamma_g) / mu_g < eta`, the tracking
//! error converges with probability `1 - 2 delta` to the set
//! `sqrt(e' Lambda e) <= (sqrt(beta) sigma_f + gamma_f + alpha c) / k_tilde`,
//! where `k_tilde = k_c (1 - alpha / eta)` is the uncertainty-diminished
//! effective gain and `c = |d^{d_x} x_d/dt^{d_x} - mu_f|` the feedforward
//! magnitude. With `Lambda = [lambda; 1][lambda; 1]'` the set radius
//! bounds `|r|` itself.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::bounds::BoundConfig;
use crate::error::{Error, Result};
use crate::gp::GpModel;

/// Reference trajectory handle: the desired state (position and its first
/// `d_x - 1` derivatives) plus the `d_x`-th derivative used by the
/// feedforward term. Derivatives are supplied analytically.
pub trait Reference: Send + Sync {
    fn dim(&self) -> usize;
    fn state(&self, t: f64) -> DVector<f64>;
    fn highest_derivative(&self, t: f64) -> f64;
}

/// Sinusoidal reference `x_d(t) = A sin(w t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SineReference {
    pub amplitude: f64,
    pub frequency: f64,
    pub d_x: usize,
}

impl SineReference {
    pub fn new(amplitude: f64, frequency: f64, d_x: usize) -> Self {
        Self {
            amplitude,
            frequency,
            d_x,
        }
    }

    fn derivative(&self, t: f64, order: usize) -> f64 {
        // d^k/dt^k A sin(wt) = A w^k sin(wt + k pi/2)
        self.amplitude
            * self.frequency.powi(order as i32)
            * (self.frequency * t + order as f64 * std::f64::consts::FRAC_PI_2).sin()
    }
}

impl Reference for SineReference {
    fn dim(&self) -> usize {
        self.d_x
    }

    fn state(&self, t: f64) -> DVector<f64> {
        DVector::from_fn(self.d_x, |k, _| self.derivative(t, k))
    }

    fn highest_derivative(&self, t: f64) -> f64 {
        self.derivative(t, self.d_x)
    }
}

/// Constant setpoint reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantReference {
    pub setpoint: f64,
    pub d_x: usize,
}

impl Reference for ConstantReference {
    fn dim(&self) -> usize {
        self.d_x
    }

    fn state(&self, _t: f64) -> DVector<f64> {
        let mut x = DVector::zeros(self.d_x);
        x[0] = self.setpoint;
        x
    }

    fn highest_derivative(&self, _t: f64) -> f64 {
        0.0
    }
}

/// Control gain, filter coefficients and reference trajectory.
#[derive(Clone)]
pub struct ControllerConfig {
    /// Control gain, `k_c > 0`.
    pub k_c: f64,
    /// `d_x - 1` Hurwitz coefficients of the error filter.
    pub lambda: Vec<f64>,
    pub reference: Arc<dyn Reference>,
    /// `|mu_g|` must exceed this fraction of the prior `|g_hat(x)|` for the
    /// decoupling to be trusted.
    pub mu_g_min_frac: f64,
}

impl fmt::Debug for ControllerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControllerConfig")
            .field("k_c", &self.k_c)
            .field("lambda", &self.lambda)
            .field("mu_g_min_frac", &self.mu_g_min_frac)
            .finish()
    }
}

impl ControllerConfig {
    pub fn new(k_c: f64, lambda: Vec<f64>, reference: Arc<dyn Reference>) -> Result<Self> {
        let cfg = Self {
            k_c,
            lambda,
            reference,
            mu_g_min_frac: 1e-3,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn d_x(&self) -> usize {
        self.lambda.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k_c > 0.0 && self.k_c.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "control.k_c must be finite and > 0, got {}",
                self.k_c
            )));
        }
        if self.reference.dim() != self.d_x() {
            return Err(Error::InvalidConfig(format!(
                "control: reference dimension {} does not match lambda length {} + 1",
                self.reference.dim(),
                self.lambda.len()
            )));
        }
        if !(self.mu_g_min_frac >= 0.0) {
            return Err(Error::InvalidConfig(
                "control.mu_g_min_frac must be >= 0".into(),
            ));
        }
        if !self.lambda_is_hurwitz() {
            return Err(Error::InvalidConfig(format!(
                "control.lambda {:?} is not Hurwitz (the filter polynomial has a root with nonnegative real part)",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Checks that all roots of
    /// `s^{d-1} + lambda_{d-1} s^{d-2} + ... + lambda_1`
    /// have negative real parts, via companion-matrix eigenvalues.
    fn lambda_is_hurwitz(&self) -> bool {
        let m = self.lambda.len();
        if m == 0 {
            return true;
        }
        if self.lambda.iter().any(|l| !l.is_finite()) {
            return false;
        }
        let mut companion = DMatrix::<f64>::zeros(m, m);
        for i in 0..m.saturating_sub(1) {
            companion[(i, i + 1)] = 1.0;
        }
        for j in 0..m {
            companion[(m - 1, j)] = -self.lambda[j];
        }
        companion
            .complex_eigenvalues()
            .iter()
            .all(|ev| ev.re < 0.0)
    }

    /// Gain-margin constant
    /// `eta = min{k_c l_2/(k_c l_2 + l_1), ..., k_c/(k_c + l_{d_x-1})}`,
    /// always in (0, 1).
    pub fn eta(&self) -> f64 {
        let m = self.lambda.len();
        if m == 0 {
            return 1.0;
        }
        let mut eta = self.k_c / (self.k_c + self.lambda[m - 1]);
        for i in 0..m - 1 {
            let term =
                self.k_c * self.lambda[i + 1] / (self.k_c * self.lambda[i + 1] + self.lambda[i]);
            eta = eta.min(term);
        }
        eta
    }
}

/// Filtered tracking error `r = [lambda' 1] e`.
pub fn filtered_state(e: &DVector<f64>, cfg: &ControllerConfig) -> f64 {
    assert_eq!(e.len(), cfg.d_x(), "error vector must have dimension d_x");
    let mut r = e[e.len() - 1];
    for (i, l) in cfg.lambda.iter().enumerate() {
        r += l * e[i];
    }
    r
}

/// Input to the linearized system,
/// `nu = -k_c r - lambda' e_{2:d_x} + d^{d_x} x_d / dt^{d_x}`.
fn linearized_input(e: &DVector<f64>, t: f64, cfg: &ControllerConfig) -> f64 {
    let r = filtered_state(e, cfg);
    let mut lam_tail = 0.0;
    for (i, l) in cfg.lambda.iter().enumerate() {
        lam_tail += l * e[i + 1];
    }
    -cfg.k_c * r - lam_tail + cfg.reference.highest_derivative(t)
}

/// Approximately linearizing control `pi(x) = (nu - mu_f(x)) / mu_g(x)`.
///
/// Errors when `|mu_g(x)|` drops below the configured fraction of the
/// prior `|g_hat(x)|` (reciprocal not trustworthy).
pub fn control_law(x: &DVector<f64>, t: f64, model: &GpModel, cfg: &ControllerConfig) -> Result<f64> {
    let e = x - cfg.reference.state(t);
    let nu = linearized_input(&e, t, cfg);
    let (mu_f, mu_g) = model.means(x);
    let threshold = cfg.mu_g_min_frac * model.prior_g(x).abs();
    if mu_g.abs() <= threshold {
        return Err(Error::SingularDecoupling {
            mu_g,
            threshold,
        });
    }
    Ok((nu - mu_f) / mu_g)
}

/// Relative uncertainty about the control-effectiveness direction,
/// `alpha(x) = (sqrt(beta) sigma_g(x) + gamma_g) / mu_g(x)`.
///
/// Errors when `mu_g(x) <= 0`: the sign of `g` is assumed known and
/// positive after normalization.
pub fn alpha(x: &DVector<f64>, model: &GpModel, c: &BoundConfig) -> Result<f64> {
    let pg = model.posterior_g(x);
    if pg.mean <= 0.0 {
        return Err(Error::SignViolation { mu_g: pg.mean });
    }
    Ok((c.beta().sqrt() * pg.std() + c.gamma_g()) / pg.mean)
}

/// Ultimate-bound evaluation at one trajectory point.
#[derive(Debug, Clone, PartialEq)]
pub struct UltimateBoundSample {
    pub t: f64,
    pub x: DVector<f64>,
    /// Bound on `sqrt(e' Lambda e) = |r|`; NaN when infeasible.
    pub radius: f64,
    pub alpha: f64,
    pub k_tilde: f64,
    /// Feedforward magnitude `|d^{d_x} x_d/dt^{d_x} - mu_f(x)|`.
    pub c_val: f64,
    /// Whether `alpha(x) < eta` holds here.
    pub feasible: bool,
}

/// Pure-arithmetic core of the bound; exposed so the known-g reduction and
/// feasibility algebra can be checked directly.
#[allow(clippy::too_many_arguments)]
pub fn ultimate_bound_from_parts(
    sigma_f: f64,
    sigma_g: f64,
    mu_g: f64,
    c_val: f64,
    beta: f64,
    gamma_f: f64,
    gamma_g: f64,
    eta: f64,
    k_c: f64,
) -> (f64, f64, f64, bool) {
    let alpha = if mu_g > 0.0 {
        (beta.sqrt() * sigma_g + gamma_g) / mu_g
    } else {
        f64::INFINITY
    };
    let feasible = alpha < eta;
    let k_tilde = k_c * (1.0 - alpha / eta);
    let radius = if feasible {
        (beta.sqrt() * sigma_f + gamma_f + alpha * c_val) / k_tilde
    } else {
        f64::NAN
    };
    (alpha, k_tilde, radius, feasible)
}

/// Evaluates the ultimate bound at a state along the reference.
pub fn ultimate_bound(
    x: &DVector<f64>,
    t: f64,
    model: &GpModel,
    c: &BoundConfig,
    cfg: &ControllerConfig,
) -> UltimateBoundSample {
    let pf = model.posterior_f(x);
    let pg = model.posterior_g(x);
    let c_val = (cfg.reference.highest_derivative(t) - pf.mean).abs();
    let (alpha, k_tilde, radius, feasible) = ultimate_bound_from_parts(
        pf.std(),
        pg.std(),
        pg.mean,
        c_val,
        c.beta(),
        c.gamma_f(),
        c.gamma_g(),
        cfg.eta(),
        cfg.k_c,
    );
    UltimateBoundSample {
        t,
        x: x.clone(),
        radius,
        alpha,
        k_tilde,
        c_val,
        feasible,
    }
}

/// Components of the Lyapunov-derivative bound under `V(r) = r^2 / 2`:
/// the nominal decrease `-k_c r^2` and the uncertain contributions
/// `|r| (sqrt(beta) sigma_f + gamma_f)` and
/// `|r| (sqrt(beta) sigma_g + gamma_g) |u|`.
pub fn vdot_components(
    x: &DVector<f64>,
    e: &DVector<f64>,
    u: f64,
    model: &GpModel,
    c: &BoundConfig,
    cfg: &ControllerConfig,
) -> (f64, f64, f64) {
    let r = filtered_state(e, cfg);
    let sqrt_beta = c.beta().sqrt();
    let pf = model.posterior_f(x);
    let pg = model.posterior_g(x);
    let nom = -cfg.k_c * r * r;
    let sf = r.abs() * (sqrt_beta * pf.std() + c.gamma_f());
    let sg = r.abs() * (sqrt_beta * pg.std() + c.gamma_g()) * u.abs();
    (nom, sf, sg)
}
