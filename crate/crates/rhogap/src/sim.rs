//! Benchmark system, fixed-step integration and training-data generation.
//!
//! The shipped benchmark is a two-dimensional chain integrator with
//!
//! ```text
//! f(x) = 1 - sin(x1) + 1 / (1 + exp(-x2))
//! g(x) = 20 (1 + sin(x2 / 4) / 2)
//! ```
//!
//! approximate prior models `f_hat = 0`, `g_hat = 20`, and the reference
//! `x_d(t) = 2 sin(t)` on the domain `||x|| <= 2.5`. Training data is
//! collected by tracking the reference with a high-gain linearizing
//! controller built on the priors alone and recording noisy residuals of
//! the observed accelerations.

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::bounds::BoundConfig;
use crate::control::{control_law, filtered_state, ultimate_bound, ControllerConfig, Reference, UltimateBoundSample};
use crate::error::{Error, Result};
use crate::gp::{GpModel, StateFn, TrainingSet};
use crate::kernels::InputPoint;
use std::sync::Arc;

/// True dynamics, prior models and the analysis domain.
#[derive(Clone)]
pub struct SystemSpec {
    pub f_true: StateFn,
    pub g_true: StateFn,
    pub f_hat: StateFn,
    pub g_hat: StateFn,
    pub d_x: usize,
    /// Radius of the norm ball the analysis runs on.
    pub domain_radius: f64,
}

impl std::fmt::Debug for SystemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SystemSpec")
            .field("d_x", &self.d_x)
            .field("domain_radius", &self.domain_radius)
            .finish()
    }
}

impl SystemSpec {
    /// The two-dimensional benchmark system.
    pub fn benchmark() -> Self {
        Self {
            f_true: Arc::new(|x: &DVector<f64>| {
                1.0 - x[0].sin() + 1.0 / (1.0 + (-x[1]).exp())
            }),
            g_true: Arc::new(|x: &DVector<f64>| 20.0 * (1.0 + 0.5 * (x[1] / 4.0).sin())),
            f_hat: Arc::new(|_| 0.0),
            g_hat: Arc::new(|_| 20.0),
            d_x: 2,
            domain_radius: 2.5,
        }
    }

    /// Benchmark variant whose priors equal the true dynamics; with no
    /// data the GP controller then linearizes exactly.
    pub fn benchmark_exact_priors() -> Self {
        let base = Self::benchmark();
        Self {
            f_hat: Arc::clone(&base.f_true),
            g_hat: Arc::clone(&base.g_true),
            ..base
        }
    }

    /// Residual `Delta(x, u) = f(x) - f_hat(x) + (g(x) - g_hat(x)) u`.
    pub fn residual(&self, x: &DVector<f64>, u: f64) -> f64 {
        (self.f_true)(x) - (self.f_hat)(x) + ((self.g_true)(x) - (self.g_hat)(x)) * u
    }

    /// Empty-data GP model over the prior means; `means()` then returns
    /// `(f_hat, g_hat)`, which is exactly the data-generation controller's
    /// model.
    pub fn prior_model(&self, h: crate::kernels::Hyperparameters) -> Result<GpModel> {
        GpModel::new(
            TrainingSet::empty(h.s_on2),
            h,
            Arc::clone(&self.f_hat),
            Arc::clone(&self.g_hat),
        )
    }
}

/// Chain-integrator dynamics: `dx_i = x_{i+1}`, `dx_{d_x} = f(x) + g(x) u`.
pub fn dynamics(x: &DVector<f64>, u: f64, spec: &SystemSpec) -> DVector<f64> {
    let d = x.len();
    let mut dx = DVector::zeros(d);
    for i in 0..d - 1 {
        dx[i] = x[i + 1];
    }
    dx[d - 1] = (spec.f_true)(x) + (spec.g_true)(x) * u;
    dx
}

/// Classical fourth-order Runge-Kutta step. The field is re-evaluated at
/// every stage, so a state-feedback law enters as a continuous control.
pub fn rk4_step<F>(x: &DVector<f64>, t: f64, dt: f64, field: F) -> Result<DVector<f64>>
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    debug_assert!(dt > 0.0);
    let k1 = field(t, x)?;
    let k2 = field(t + 0.5 * dt, &(x + 0.5 * dt * &k1))?;
    let k3 = field(t + 0.5 * dt, &(x + 0.5 * dt * &k2))?;
    let k4 = field(t + dt, &(x + dt * &k3))?;
    let next = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { t });
    }
    Ok(next)
}

/// Settings for the data-collection run.
#[derive(Clone)]
pub struct DataGenConfig {
    /// High-gain controller gain.
    pub gain: f64,
    pub lambda: Vec<f64>,
    pub reference: Arc<dyn Reference>,
    pub horizon: f64,
    pub dt: f64,
}

impl std::fmt::Debug for DataGenConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DataGenConfig")
            .field("gain", &self.gain)
            .field("lambda", &self.lambda)
            .field("horizon", &self.horizon)
            .field("dt", &self.dt)
            .finish()
    }
}

/// Tracks the reference with a linearizing controller built on the prior
/// models and records `N` noisy residual samples at uniformly spaced
/// times. Reproducible: the same seed yields a bit-identical set.
pub fn generate_training_data(
    spec: &SystemSpec,
    dg: &DataGenConfig,
    n: usize,
    s_on: f64,
    seed: u64,
) -> Result<TrainingSet> {
    if n == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if !(s_on >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "data generation: s_on must be >= 0, got {s_on}"
        )));
    }
    let ctrl = ControllerConfig::new(dg.gain, dg.lambda.clone(), Arc::clone(&dg.reference))?;
    let h = crate::kernels::Hyperparameters::new(1.0, 1.0, 1.0, 1.0, s_on.max(1e-6).powi(2))?;
    let model = spec.prior_model(h)?;

    let steps = (dg.horizon / dg.dt).round() as usize;
    let escape = 3.0 * spec.domain_radius;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    // sample at t_k = k * horizon / n, snapped to step boundaries
    let mut sample_steps: Vec<usize> = (0..n)
        .map(|k| ((k as f64 * dg.horizon / n as f64) / dg.dt).round() as usize)
        .collect();
    sample_steps.dedup();
    if sample_steps.len() != n {
        return Err(Error::InvalidArgument(
            "data generation: horizon/dt too coarse for the requested sample count".into(),
        ));
    }

    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let mut x = DVector::zeros(spec.d_x);
    let mut next_sample = 0usize;
    for step in 0..=steps {
        let t = step as f64 * dg.dt;
        if x.norm() > escape {
            return Err(Error::DataGeneration(format!(
                "trajectory escaped to ||x|| = {:.3} (> {escape:.3}) at t = {t:.3}",
                x.norm()
            )));
        }
        if next_sample < n && sample_steps[next_sample] == step {
            let u = control_law(&x, t, &model, &ctrl)?;
            let y = spec.residual(&x, u) + s_on * noise.sample(&mut rng);
            inputs.push(InputPoint::new(x.clone(), u)?);
            targets.push(y);
            next_sample += 1;
        }
        if step < steps {
            x = rk4_step(&x, t, dg.dt, |tt, xx| {
                let u = control_law(xx, tt, &model, &ctrl)?;
                Ok(dynamics(xx, u, spec))
            })?;
        }
    }
    debug_assert_eq!(inputs.len(), n);
    TrainingSet::new(inputs, targets, s_on * s_on)
}

/// Closed-loop trajectory on a uniform recording grid, with the bound
/// samples filled in by [`evaluate_bounds`].
#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<f64>,
    pub errors: Vec<DVector<f64>>,
    /// Filtered tracking error `r`; `sqrt(e' Lambda e) = |r|`.
    pub filtered: Vec<f64>,
    pub bounds: Vec<UltimateBoundSample>,
    pub seed: u64,
}

impl SimResult {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Integrates the true plant under the GP-based linearizing controller,
/// recording every `record_every`-th step.
#[allow(clippy::too_many_arguments)]
pub fn simulate_closed_loop(
    spec: &SystemSpec,
    model: &GpModel,
    ctrl: &ControllerConfig,
    x0: DVector<f64>,
    t_end: f64,
    dt: f64,
    record_every: usize,
    seed: u64,
) -> Result<SimResult> {
    if !(dt > 0.0 && t_end > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "simulation: need dt > 0 and t_end > 0, got {dt} and {t_end}"
        )));
    }
    if record_every == 0 {
        return Err(Error::InvalidArgument(
            "simulation: record_every must be >= 1".into(),
        ));
    }
    let steps = (t_end / dt).round() as usize;
    let mut result = SimResult {
        times: Vec::new(),
        states: Vec::new(),
        inputs: Vec::new(),
        errors: Vec::new(),
        filtered: Vec::new(),
        bounds: Vec::new(),
        seed,
    };
    let mut x = x0;
    for step in 0..=steps {
        let t = step as f64 * dt;
        if step % record_every == 0 {
            let u = control_law(&x, t, model, ctrl)?;
            let e = &x - ctrl.reference.state(t);
            result.times.push(t);
            result.states.push(x.clone());
            result.inputs.push(u);
            result.filtered.push(filtered_state(&e, ctrl));
            result.errors.push(e);
        }
        if step < steps {
            x = rk4_step(&x, t, dt, |tt, xx| {
                let u = control_law(xx, tt, model, ctrl)?;
                Ok(dynamics(xx, u, spec))
            })?;
        }
    }
    Ok(result)
}

/// Evaluates the ultimate bound at every recorded sample, in parallel.
pub fn evaluate_bounds(
    result: &mut SimResult,
    model: &GpModel,
    c: &BoundConfig,
    ctrl: &ControllerConfig,
) {
    result.bounds = result
        .times
        .par_iter()
        .zip(result.states.par_iter())
        .map(|(t, x)| ultimate_bound(x, *t, model, c, ctrl))
        .collect();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::SineReference;
    use crate::kernels::Hyperparameters;
    use approx::assert_relative_eq;

    fn benchmark_reference() -> Arc<dyn Reference> {
        Arc::new(SineReference::new(2.0, 1.0, 2))
    }

    fn datagen_config() -> DataGenConfig {
        DataGenConfig {
            gain: 100.0,
            lambda: vec![1.0],
            reference: benchmark_reference(),
            horizon: 30.0,
            dt: 1e-3,
        }
    }

    #[test]
    fn dynamics_at_origin() {
        let spec = SystemSpec::benchmark();
        let dx = dynamics(&DVector::zeros(2), 0.0, &spec);
        assert_relative_eq!(dx[0], 0.0);
        // f(0) = 1 - sin 0 + logistic(0) = 1.5
        assert_relative_eq!(dx[1], 1.5, epsilon = 1e-15);
    }

    #[test]
    fn dynamics_exact_cancellation() {
        let spec = SystemSpec::benchmark();
        let x = DVector::from_row_slice(&[0.7, -0.4]);
        let u = -(spec.f_true)(&x) / (spec.g_true)(&x);
        let dx = dynamics(&x, u, &spec);
        assert_relative_eq!(dx[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(dx[0], -0.4);
    }

    #[test]
    fn benchmark_g_matches_prior_on_zero_velocity_axis() {
        let spec = SystemSpec::benchmark();
        let x = DVector::from_row_slice(&[1.3, 0.0]);
        assert_relative_eq!((spec.g_true)(&x), 20.0, epsilon = 1e-15);
        assert_relative_eq!((spec.g_hat)(&x), 20.0);
        // so the residual loses its input dependence there
        assert_relative_eq!(
            spec.residual(&x, 7.0),
            (spec.f_true)(&x),
            epsilon = 1e-12
        );
    }

    #[test]
    fn rk4_fixed_point() {
        let x = DVector::from_row_slice(&[1.0, -2.0]);
        let next = rk4_step(&x, 0.0, 0.1, |_, _| Ok(DVector::zeros(2))).unwrap();
        assert_eq!(next, x);
    }

    #[test]
    fn rk4_matches_fourth_order_taylor_on_decay() {
        let x = DVector::from_row_slice(&[1.0]);
        let next = rk4_step(&x, 0.0, 0.1, |_, x| Ok(-x.clone())).unwrap();
        // single RK4 step on dx = -x is the 4th-order Taylor polynomial
        let taylor = 1.0 - 0.1 + 0.01 / 2.0 - 0.001 / 6.0 + 0.0001 / 24.0;
        assert_relative_eq!(next[0], taylor, epsilon = 1e-15);
        assert_relative_eq!(next[0], (-0.1f64).exp(), epsilon = 1e-6);
    }

    #[test]
    fn rk4_global_error_scales_fourth_order() {
        let integrate = |dt: f64| -> f64 {
            let mut x = DVector::from_row_slice(&[1.0]);
            let steps = (1.0 / dt).round() as usize;
            for s in 0..steps {
                x = rk4_step(&x, s as f64 * dt, dt, |_, x| Ok(-x.clone())).unwrap();
            }
            (x[0] - (-1.0f64).exp()).abs()
        };
        let ratio = integrate(0.1) / integrate(0.05);
        assert!(
            (14.0..=18.0).contains(&ratio),
            "error ratio {ratio} outside [14, 18]"
        );
    }

    #[test]
    fn rk4_reports_divergence() {
        let x = DVector::from_row_slice(&[1.0]);
        let err = rk4_step(&x, 3.5, 0.1, |_, x| Ok(x * f64::MAX));
        assert!(matches!(err, Err(Error::Divergence { t }) if t == 3.5));
    }

    #[test]
    fn training_data_is_reproducible() {
        let spec = SystemSpec::benchmark();
        let dg = datagen_config();
        let a = generate_training_data(&spec, &dg, 200, 0.5, 7).unwrap();
        let b = generate_training_data(&spec, &dg, 200, 0.5, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_training_data(&spec, &dg, 200, 0.5, 8).unwrap();
        assert_ne!(a.targets, c.targets);
    }

    #[test]
    fn training_data_input_spread_is_nondegenerate() {
        let spec = SystemSpec::benchmark();
        let dg = datagen_config();
        let data = generate_training_data(&spec, &dg, 1000, 0.5, 0).unwrap();
        assert_eq!(data.len(), 1000);
        let (u_bar_f, u_low_g, u_bar_g) = crate::quality::input_quantiles(&data).unwrap();
        assert!(
            u_bar_g > u_low_g && u_low_g > u_bar_f,
            "degenerate input distribution: {u_bar_f}, {u_low_g}, {u_bar_g}"
        );
    }

    #[test]
    fn training_noise_moments_match_the_level() {
        let spec = SystemSpec::benchmark();
        let dg = datagen_config();
        let s_on = 0.5;
        let noisy = generate_training_data(&spec, &dg, 1000, s_on, 3).unwrap();
        let clean = generate_training_data(&spec, &dg, 1000, 0.0, 3).unwrap();
        let omegas: Vec<f64> = noisy
            .targets
            .iter()
            .zip(&clean.targets)
            .map(|(a, b)| a - b)
            .collect();
        let n = omegas.len() as f64;
        let mean = omegas.iter().sum::<f64>() / n;
        let std = (omegas.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 3.0 * s_on / n.sqrt(), "noise mean {mean}");
        assert!((std - s_on).abs() < 0.1 * s_on, "noise std {std}");
    }

    #[test]
    fn residual_targets_exact_without_noise() {
        let spec = SystemSpec::benchmark();
        let dg = DataGenConfig {
            horizon: 5.0,
            ..datagen_config()
        };
        let data = generate_training_data(&spec, &dg, 100, 0.0, 1).unwrap();
        for (p, y) in data.inputs.iter().zip(&data.targets) {
            assert_relative_eq!(*y, spec.residual(&p.x, p.u), epsilon = 1e-12);
        }
    }

    #[test]
    fn datagen_detects_escape() {
        let spec = SystemSpec::benchmark();
        let dg = DataGenConfig {
            reference: Arc::new(SineReference::new(50.0, 1.0, 2)),
            ..datagen_config()
        };
        let err = generate_training_data(&spec, &dg, 100, 0.0, 1);
        assert!(matches!(err, Err(Error::DataGeneration(_))));
    }

    #[test]
    fn exact_models_track_perfectly_from_zero_error() {
        let spec = SystemSpec::benchmark_exact_priors();
        let h = Hyperparameters::new(1.0, 1.0, 1.0, 1.0, 0.25).unwrap();
        let model = spec.prior_model(h).unwrap();
        let ctrl = ControllerConfig::new(40.0, vec![1.0], benchmark_reference()).unwrap();
        let x0 = ctrl.reference.state(0.0);
        let result =
            simulate_closed_loop(&spec, &model, &ctrl, x0, 30.0, 1e-3, 10, 0).unwrap();
        let max_err = result
            .errors
            .iter()
            .map(|e| e.norm())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 1e-6, "tracking error {max_err} exceeds 1e-6");
    }

    #[test]
    fn exact_models_decay_filtered_state_exponentially() {
        let spec = SystemSpec::benchmark_exact_priors();
        let h = Hyperparameters::new(1.0, 1.0, 1.0, 1.0, 0.25).unwrap();
        let model = spec.prior_model(h).unwrap();
        let k_c = 2.0;
        let ctrl = ControllerConfig::new(k_c, vec![1.0], benchmark_reference()).unwrap();
        // start away from the reference: e(0) = [1, -2], r(0) = -1
        let x0 = DVector::from_row_slice(&[1.0, 0.0]);
        let result = simulate_closed_loop(&spec, &model, &ctrl, x0, 2.0, 1e-3, 10, 0).unwrap();
        let r0 = result.filtered[0];
        for (t, r) in result.times.iter().zip(&result.filtered) {
            let expected = r0 * (-k_c * t).exp();
            assert!(
                (r - expected).abs() <= 0.01 * expected.abs() + 1e-12,
                "r({t}) = {r}, expected {expected}"
            );
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let spec = SystemSpec::benchmark();
        let h = Hyperparameters::new(1.0, 1.0, 1.0, 1.0, 0.25).unwrap();
        let model = spec.prior_model(h).unwrap();
        let ctrl = ControllerConfig::new(40.0, vec![1.0], benchmark_reference()).unwrap();
        let a = simulate_closed_loop(&spec, &model, &ctrl, DVector::zeros(2), 3.0, 1e-3, 10, 0)
            .unwrap();
        let b = simulate_closed_loop(&spec, &model, &ctrl, DVector::zeros(2), 3.0, 1e-3, 10, 0)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn recording_grid_is_uniform() {
        let spec = SystemSpec::benchmark();
        let h = Hyperparameters::new(1.0, 1.0, 1.0, 1.0, 0.25).unwrap();
        let model = spec.prior_model(h).unwrap();
        let ctrl = ControllerConfig::new(40.0, vec![1.0], benchmark_reference()).unwrap();
        let r = simulate_closed_loop(&spec, &model, &ctrl, DVector::zeros(2), 1.0, 1e-3, 25, 0)
            .unwrap();
        assert_eq!(r.len(), 41);
        for w in r.times.windows(2) {
            assert_relative_eq!(w[1] - w[0], 0.025, epsilon = 1e-12);
        }
        assert_eq!(r.states.len(), r.len());
        assert_eq!(r.inputs.len(), r.len());
        assert_eq!(r.errors.len(), r.len());
        assert_eq!(r.filtered.len(), r.len());
    }
}
