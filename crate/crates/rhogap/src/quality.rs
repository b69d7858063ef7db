//! Training-data quality measures: M-fill distances, density thresholds
//! and rho-gaps.
//!
//! The M-fill distance at a state is the radius of the smallest ball
//! around it containing `M` training samples whose input magnitudes fall
//! in a prescribed window; small inputs qualify a sample for learning `f`,
//! large inputs for learning `g`. Inverting the closed-form variance
//! bounds yields a required squared radius `phi_bar^2` from a performance
//! specification on the uncertain Lyapunov-derivative components, plus a
//! state-independent offset `theta` measuring how well the input
//! distribution separates the two model components.
//!
//! The rho-gap is the difference between the actual fill distance and the
//! required threshold; positive values flag regions where the data is too
//! sparse for the requested control performance.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::bounds::BoundConfig;
use crate::error::{Error, Result};
use crate::gp::{GpModel, TrainingSet};
use crate::kernels::Hyperparameters;

/// Parameters of the fill distances and performance specifications.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityConfig {
    /// Number of samples the fill ball must contain.
    pub m: usize,
    /// Upper input magnitude qualifying a sample for the `f` measure.
    pub u_bar_f: f64,
    /// Input-magnitude window qualifying a sample for the `g` measure.
    pub u_low_g: f64,
    pub u_bar_g: f64,
    /// Allowed uncertain fraction of the nominal Lyapunov decrease.
    pub chi_f: f64,
    pub chi_g: f64,
}

impl QualityConfig {
    pub fn new(
        m: usize,
        u_bar_f: f64,
        u_low_g: f64,
        u_bar_g: f64,
        chi_f: f64,
        chi_g: f64,
    ) -> Result<Self> {
        let q = Self {
            m,
            u_bar_f,
            u_low_g,
            u_bar_g,
            chi_f,
            chi_g,
        };
        q.validate()?;
        Ok(q)
    }

    /// Derives the input-magnitude parameters from the data via the
    /// nearest-rank quantile rule.
    pub fn from_data(
        data: &TrainingSet,
        m: usize,
        chi_f: f64,
        chi_g: f64,
        q_low: f64,
        q_high: f64,
    ) -> Result<Self> {
        let (u_bar_f, u_low_g, u_bar_g) = input_quantiles_with(data, q_low, q_high)?;
        Self::new(m, u_bar_f, u_low_g, u_bar_g, chi_f, chi_g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidConfig("quality.m must be >= 1".into()));
        }
        if !(self.u_bar_f >= 0.0 && self.u_bar_f.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "quality.u_bar_f must be finite and >= 0, got {}",
                self.u_bar_f
            )));
        }
        if !(self.u_low_g >= 0.0 && self.u_low_g <= self.u_bar_g) {
            return Err(Error::InvalidConfig(format!(
                "quality input window requires 0 <= u_low_g <= u_bar_g, got [{}, {}]",
                self.u_low_g, self.u_bar_g
            )));
        }
        if !(self.chi_f > 0.0 && self.chi_g > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "quality.chi_f and chi_g must be > 0, got {} and {}",
                self.chi_f, self.chi_g
            )));
        }
        Ok(())
    }

    /// The stability interpretation needs `chi_f + chi_g < 1`; larger
    /// values are allowed but worth flagging.
    pub fn stability_warning(&self) -> Option<String> {
        if self.chi_f + self.chi_g >= 1.0 {
            Some(format!(
                "chi_f + chi_g = {} >= 1: performance specs no longer certify stability",
                self.chi_f + self.chi_g
            ))
        } else {
            None
        }
    }
}

/// Which rho-gap formula to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RhoConvention {
    /// `rho = phi - phi_bar^2`, subtracting the squared threshold from the
    /// unsquared distance. Theta offsets are excluded.
    #[default]
    AsPrinted,
    /// Dimensionally consistent variant `rho = phi^2 - (phi_bar^2 + theta)`.
    Squared,
}

/// Quality measures evaluated at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct RhoGapSample {
    pub x: DVector<f64>,
    /// Actual M-fill distances (`+inf` when too few samples qualify).
    pub phi_f: f64,
    pub phi_g: f64,
    /// Required squared thresholds (`+inf` when the prior already meets
    /// the spec, NaN when the spec is infeasible at this state).
    pub phibar2_f: f64,
    pub phibar2_g: f64,
    /// Density offsets (reported, not part of the as-printed rho).
    pub theta_f: f64,
    pub theta_g: f64,
    /// Gap values; positive marks a data deficit.
    pub rho_f: f64,
    pub rho_g: f64,
    /// Whether the performance spec is attainable at this state at all.
    pub feasible_f: bool,
    pub feasible_g: bool,
}

/// M-th smallest distance `||x - x^(n)||` among samples with
/// `u_low <= |u^(n)| <= u_high`; `+inf` when fewer than `M` qualify.
///
/// Exhaustive scan; ties are kept, so the result is the M-th order
/// statistic of the qualifying distances.
pub fn m_fill_distance(
    x: &DVector<f64>,
    data: &TrainingSet,
    m: usize,
    u_low: f64,
    u_high: f64,
) -> f64 {
    assert!(m >= 1, "fill distance needs M >= 1");
    let mut dists: Vec<f64> = data
        .inputs
        .iter()
        .filter(|p| {
            let a = p.u.abs();
            a >= u_low && a <= u_high
        })
        .map(|p| (&p.x - x).norm())
        .collect();
    if dists.len() < m {
        return f64::INFINITY;
    }
    let (_, mth, _) = dists.select_nth_unstable_by(m - 1, |a, b| a.total_cmp(b));
    *mth
}

/// Nearest-rank percentile: the `ceil(p * N)`-th order statistic.
fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = (p * n as f64).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Input-magnitude quantiles `(u_bar_f, u_low_g, u_bar_g)` with the
/// default fractions: 10th percentile, 90th percentile and maximum of
/// `|u^(n)|`.
pub fn input_quantiles(data: &TrainingSet) -> Result<(f64, f64, f64)> {
    input_quantiles_with(data, 0.1, 0.9)
}

/// Same with configurable fractions; `u_bar_f` is the `q_low` percentile
/// and `u_low_g` the `q_high` percentile of the input magnitudes.
pub fn input_quantiles_with(data: &TrainingSet, q_low: f64, q_high: f64) -> Result<(f64, f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(
            "input quantiles need a nonempty training set".into(),
        ));
    }
    if !(q_low > 0.0 && q_low <= 1.0 && q_high > 0.0 && q_high <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "quantile fractions must lie in (0, 1], got {q_low} and {q_high}"
        )));
    }
    let mut mags: Vec<f64> = data.inputs.iter().map(|p| p.u.abs()).collect();
    mags.sort_unstable_by(|a, b| a.total_cmp(b));
    let u_bar_g = *mags.last().expect("nonempty");
    Ok((
        nearest_rank(&mags, q_low),
        nearest_rank(&mags, q_high),
        u_bar_g,
    ))
}

/// Density offset for the `f` measure,
/// `theta_f = -l_f^2 log((M s_f^2 + M s_g^2 u_bar_f^2 + s_on^2) / (M s_f^2))`.
/// Always nonpositive.
pub fn theta_f(q: &QualityConfig, h: &Hyperparameters) -> f64 {
    let m = q.m as f64;
    let arg = (m * h.s_f2 + m * h.s_g2 * q.u_bar_f * q.u_bar_f + h.s_on2) / (m * h.s_f2);
    -h.l_f * h.l_f * arg.ln()
}

/// Density offset for the `g` measure,
/// `theta_g = -l_g^2 log((M s_f^2 + M u_bar_g^2 s_g^2 + s_on^2) / (M s_g^2 u_low_g^2))`.
///
/// Requires `u_low_g > 0`: without a guaranteed input magnitude no amount
/// of data certifies information about `g`.
pub fn theta_g(q: &QualityConfig, h: &Hyperparameters) -> Result<f64> {
    if q.u_low_g <= 0.0 {
        return Err(Error::NoLowerInputBound);
    }
    let m = q.m as f64;
    let arg = (m * h.s_f2 + m * q.u_bar_g * q.u_bar_g * h.s_g2 + h.s_on2)
        / (m * h.s_g2 * q.u_low_g * q.u_low_g);
    Ok(-h.l_g * h.l_g * arg.ln())
}

/// Performance specifications `(xi_f, xi_g)` as fractions of the nominal
/// Lyapunov decrease magnitude `k_c r^2`.
pub fn performance_specs(r: f64, k_c: f64, q: &QualityConfig) -> (f64, f64) {
    let nominal = k_c * r * r;
    (q.chi_f * nominal, q.chi_g * nominal)
}

/// Required squared fill distance for the `f` spec:
///
/// ```text
/// phi_bar_f^2 = -l_f^2 log(1 - (xi_f - gamma_f |r|)^2 / (beta s_f^2 r^2))
/// ```
///
/// with `|r|` standing in for `|dV/de_dx|` under the filtered-state
/// Lyapunov function. Returns `+inf` when the prior uncertainty already
/// meets the spec; errors when `xi_f <= gamma_f |r|` (unattainable
/// regardless of data).
pub fn phi_bar_f(xi_f: f64, r: f64, beta: f64, gamma_f: f64, h: &Hyperparameters) -> Result<f64> {
    let vd = r.abs();
    let slack = xi_f - gamma_f * vd;
    if !(slack > 0.0) {
        return Err(Error::SpecInfeasible {
            xi: xi_f,
            gamma_term: gamma_f * vd,
        });
    }
    let ratio = slack * slack / (beta * h.s_f2 * vd * vd);
    if ratio >= 1.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-h.l_f * h.l_f * (1.0 - ratio).ln())
}

/// Required squared fill distance for the `g` spec, with the control
/// magnitude `|pi(x)|` entering both the slack and the prior term:
///
/// ```text
/// phi_bar_g^2 = -l_g^2 log(1 - (xi_g - gamma_g |pi| |r|)^2 / (beta s_g^2 pi^2 r^2))
/// ```
///
/// `pi = 0` with a positive spec yields `+inf`: without control authority
/// the g-uncertainty contributes nothing to the Lyapunov derivative.
pub fn phi_bar_g(
    xi_g: f64,
    r: f64,
    pi: f64,
    beta: f64,
    gamma_g: f64,
    h: &Hyperparameters,
) -> Result<f64> {
    let vd = r.abs();
    let slack = xi_g - gamma_g * pi.abs() * vd;
    if !(slack > 0.0) {
        return Err(Error::SpecInfeasible {
            xi: xi_g,
            gamma_term: gamma_g * pi.abs() * vd,
        });
    }
    let denom = beta * h.s_g2 * pi * pi * vd * vd;
    let ratio = slack * slack / denom;
    if ratio >= 1.0 || denom == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-h.l_g * h.l_g * (1.0 - ratio).ln())
}

fn combine_rho(phi: f64, phibar2: f64, theta: f64, convention: RhoConvention) -> f64 {
    if phi.is_infinite() {
        // no qualifying data at all dominates everything
        return f64::INFINITY;
    }
    match convention {
        RhoConvention::AsPrinted => {
            if phibar2.is_infinite() {
                // spec trivially met by the prior
                f64::NEG_INFINITY
            } else {
                phi - phibar2
            }
        }
        RhoConvention::Squared => {
            if phibar2.is_infinite() {
                f64::NEG_INFINITY
            } else if theta.is_infinite() {
                // theta = -inf: no density certifies the g component
                f64::INFINITY
            } else {
                phi * phi - (phibar2 + theta)
            }
        }
    }
}

/// Evaluates every quality measure at one state. `r` is the filtered
/// tracking error assigned to the state and `pi` the control input there;
/// infeasible specs are flagged per state instead of aborting.
#[allow(clippy::too_many_arguments)]
pub fn rho_gaps(
    x: &DVector<f64>,
    r: f64,
    pi: f64,
    model: &GpModel,
    c: &BoundConfig,
    q: &QualityConfig,
    k_c: f64,
    convention: RhoConvention,
) -> RhoGapSample {
    let h = model.hyperparameters();
    let data = model.data();
    let beta = c.beta();
    let gamma_f = c.gamma_f();
    let gamma_g = c.gamma_g();
    rho_gaps_inner(
        x, r, pi, data, h, beta, gamma_f, gamma_g, q, k_c, convention,
    )
}

#[allow(clippy::too_many_arguments)]
fn rho_gaps_inner(
    x: &DVector<f64>,
    r: f64,
    pi: f64,
    data: &TrainingSet,
    h: &Hyperparameters,
    beta: f64,
    gamma_f: f64,
    gamma_g: f64,
    q: &QualityConfig,
    k_c: f64,
    convention: RhoConvention,
) -> RhoGapSample {
    let phi_f = m_fill_distance(x, data, q.m, 0.0, q.u_bar_f);
    let phi_g = m_fill_distance(x, data, q.m, q.u_low_g, q.u_bar_g);
    let (xi_f, xi_g) = performance_specs(r, k_c, q);
    let th_f = theta_f(q, h);
    let th_g = theta_g(q, h).unwrap_or(f64::NEG_INFINITY);

    let (phibar2_f, feasible_f) = match phi_bar_f(xi_f, r, beta, gamma_f, h) {
        Ok(v) => (v, true),
        Err(_) => (f64::NAN, false),
    };
    let (phibar2_g, feasible_g) = match phi_bar_g(xi_g, r, pi, beta, gamma_g, h) {
        Ok(v) => (v, true),
        Err(_) => (f64::NAN, false),
    };

    let rho_f = if feasible_f {
        combine_rho(phi_f, phibar2_f, th_f, convention)
    } else {
        f64::NAN
    };
    let rho_g = if feasible_g {
        combine_rho(phi_g, phibar2_g, th_g, convention)
    } else {
        f64::NAN
    };

    RhoGapSample {
        x: x.clone(),
        phi_f,
        phi_g,
        phibar2_f,
        phibar2_g,
        theta_f: th_f,
        theta_g: th_g,
        rho_f,
        rho_g,
        feasible_f,
        feasible_g,
    }
}

/// One evaluation site for a rho field: a state plus the filtered error
/// and control input assigned to it.
#[derive(Debug, Clone, PartialEq)]
pub struct RhoPoint {
    pub x: DVector<f64>,
    pub r: f64,
    pub pi: f64,
}

/// Evaluates the rho-gaps at every site, in parallel; output order follows
/// the input slice.
pub fn rho_field(
    points: &[RhoPoint],
    model: &GpModel,
    c: &BoundConfig,
    q: &QualityConfig,
    k_c: f64,
    convention: RhoConvention,
) -> Vec<RhoGapSample> {
    let h = model.hyperparameters();
    let data = model.data();
    let beta = c.beta();
    let gamma_f = c.gamma_f();
    let gamma_g = c.gamma_g();
    points
        .par_iter()
        .map(|p| {
            rho_gaps_inner(
                &p.x, p.r, p.pi, data, h, beta, gamma_f, gamma_g, q, k_c, convention,
            )
        })
        .collect()
}
