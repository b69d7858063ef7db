//! Hyperparameter fitting by log-marginal-likelihood maximization.
//!
//! Multi-start Nelder-Mead in log-parameter space with box constraints;
//! infeasible simplex vertices are assigned `-inf` likelihood, so the
//! search never leaves the box. The analytic likelihood gradient is
//! exposed for verification and gradient-based refinement.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gp::TrainingSet;
use crate::kernels::{gram_matrix, Hyperparameters};

/// Box constraints for the fit, expressed as two parameter sets.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperBounds {
    pub lower: Hyperparameters,
    pub upper: Hyperparameters,
}

impl HyperBounds {
    pub fn new(lower: Hyperparameters, upper: Hyperparameters) -> Result<Self> {
        lower.validate()?;
        upper.validate()?;
        let b = Self { lower, upper };
        if !(b.lower.s_f2 < b.upper.s_f2
            && b.lower.s_g2 < b.upper.s_g2
            && b.lower.l_f < b.upper.l_f
            && b.lower.l_g < b.upper.l_g
            && b.lower.s_on2 < b.upper.s_on2)
        {
            return Err(Error::InvalidArgument(
                "hyperparameter bounds: lower must be strictly below upper".into(),
            ));
        }
        Ok(b)
    }

    /// Wide default box containing the benchmark optima with generous
    /// margin.
    pub fn wide() -> Self {
        Self {
            lower: Hyperparameters {
                s_f2: 1e-4,
                s_g2: 1e-4,
                l_f: 0.05,
                l_g: 0.05,
                s_on2: 1e-6,
            },
            upper: Hyperparameters {
                s_f2: 1e4,
                s_g2: 1e4,
                l_f: 20.0,
                l_g: 20.0,
                s_on2: 100.0,
            },
        }
    }

    pub fn contains(&self, h: &Hyperparameters) -> bool {
        h.s_f2 >= self.lower.s_f2
            && h.s_f2 <= self.upper.s_f2
            && h.s_g2 >= self.lower.s_g2
            && h.s_g2 <= self.upper.s_g2
            && h.l_f >= self.lower.l_f
            && h.l_f <= self.upper.l_f
            && h.l_g >= self.lower.l_g
            && h.l_g <= self.upper.l_g
            && h.s_on2 >= self.lower.s_on2
            && h.s_on2 <= self.upper.s_on2
    }
}

/// Optimizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Number of local searches; the first starts from the initial guess,
    /// the rest from log-uniform draws inside the box.
    pub restarts: usize,
    /// Likelihood-evaluation budget per restart.
    pub max_evals: usize,
    /// Whether the noise variance is optimized or fixed at its initial
    /// value; fixing it matches a known data-generation noise level.
    pub optimize_noise: bool,
    /// Seed for the restart draws.
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_evals: 200,
            optimize_noise: false,
            seed: 0,
        }
    }
}

/// Log marginal likelihood of the residual targets:
/// `-1/2 y' (K + s_on^2 I)^{-1} y - 1/2 log det(K + s_on^2 I) - N/2 log 2pi`.
pub fn log_marginal_likelihood(data: &TrainingSet, h: &Hyperparameters) -> Result<f64> {
    data.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let gram = gram_matrix(&data.inputs, h)?;
    let chol = Cholesky::new(gram).ok_or_else(|| {
        Error::NumericalConditioning("Gram factorization failed in likelihood".into())
    })?;
    let y = DVector::from_row_slice(&data.targets);
    let alpha = chol.solve(&y);
    Ok(-0.5 * y.dot(&alpha)
        - 0.5 * chol.ln_determinant()
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Likelihood and its analytic gradient with respect to the raw parameters
/// `(s_f2, s_g2, l_f, l_g)`, plus `s_on2` when `include_noise` is set.
///
/// Uses `d LML / d theta = 1/2 tr((alpha alpha' - K^{-1}) dK/d theta)`.
pub fn log_marginal_likelihood_grad(
    data: &TrainingSet,
    h: &Hyperparameters,
    include_noise: bool,
) -> Result<(f64, Vec<f64>)> {
    data.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }

    let mut d2 = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = (&data.inputs[i].x - &data.inputs[j].x).norm_squared();
            d2[(i, j)] = v;
            d2[(j, i)] = v;
        }
    }
    let ef = d2.map(|v| (-v / (2.0 * h.l_f * h.l_f)).exp());
    let eg = d2.map(|v| (-v / (2.0 * h.l_g * h.l_g)).exp());
    let u = DVector::from_fn(n, |i, _| data.inputs[i].u);

    let mut gram = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            gram[(i, j)] = h.s_f2 * ef[(i, j)] + u[i] * h.s_g2 * eg[(i, j)] * u[j];
        }
        gram[(i, i)] += h.effective_noise();
    }
    let chol = Cholesky::new(gram).ok_or_else(|| {
        Error::NumericalConditioning("Gram factorization failed in likelihood gradient".into())
    })?;
    let y = DVector::from_row_slice(&data.targets);
    let alpha = chol.solve(&y);
    let lml = -0.5 * y.dot(&alpha)
        - 0.5 * chol.ln_determinant()
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // A = alpha alpha' - K^{-1}
    let mut a = chol.inverse();
    a.neg_mut();
    a.ger(1.0, &alpha, &alpha, 1.0);

    let half_trace = |dk: &dyn Fn(usize, usize) -> f64| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                acc += a[(i, j)] * dk(i, j);
            }
        }
        0.5 * acc
    };

    let inv_lf3 = 1.0 / (h.l_f * h.l_f * h.l_f);
    let inv_lg3 = 1.0 / (h.l_g * h.l_g * h.l_g);
    let mut grad = vec![
        half_trace(&|i, j| ef[(i, j)]),
        half_trace(&|i, j| u[i] * eg[(i, j)] * u[j]),
        half_trace(&|i, j| h.s_f2 * ef[(i, j)] * d2[(i, j)] * inv_lf3),
        half_trace(&|i, j| u[i] * h.s_g2 * eg[(i, j)] * d2[(i, j)] * inv_lg3 * u[j]),
    ];
    if include_noise {
        grad.push(half_trace(&|i, j| if i == j { 1.0 } else { 0.0 }));
    }
    Ok((lml, grad))
}

fn theta_from(h: &Hyperparameters, with_noise: bool) -> Vec<f64> {
    let mut t = vec![h.s_f2.ln(), h.s_g2.ln(), h.l_f.ln(), h.l_g.ln()];
    if with_noise {
        t.push(h.s_on2.ln());
    }
    t
}

fn theta_into(theta: &[f64], fixed_noise: f64) -> Hyperparameters {
    Hyperparameters {
        s_f2: theta[0].exp(),
        s_g2: theta[1].exp(),
        l_f: theta[2].exp(),
        l_g: theta[3].exp(),
        s_on2: if theta.len() > 4 {
            theta[4].exp()
        } else {
            fixed_noise
        },
    }
}

/// Returns a box-feasible local maximizer of the log marginal likelihood.
/// The returned parameters never score below the initial guess.
pub fn fit_hyperparameters(
    data: &TrainingSet,
    init: &Hyperparameters,
    bounds: &HyperBounds,
    options: &FitOptions,
) -> Result<Hyperparameters> {
    data.validate()?;
    init.validate()?;
    if data.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: data.len(),
        });
    }
    if !bounds.contains(init) {
        return Err(Error::InvalidArgument(
            "fit: initial hyperparameters outside the bounds box".into(),
        ));
    }
    if options.restarts == 0 {
        return Err(Error::InvalidArgument("fit: need at least 1 restart".into()));
    }

    let with_noise = options.optimize_noise;
    let lo = theta_from(&bounds.lower, with_noise);
    let hi = theta_from(&bounds.upper, with_noise);
    let dim = lo.len();

    let objective = |theta: &[f64]| -> f64 {
        for i in 0..dim {
            if theta[i] < lo[i] || theta[i] > hi[i] {
                return f64::INFINITY;
            }
        }
        let h = theta_into(theta, init.s_on2);
        match log_marginal_likelihood(data, &h) {
            Ok(lml) if lml.is_finite() => -lml,
            _ => f64::INFINITY,
        }
    };

    // restart 0 is the initial guess; the rest are log-uniform in the box
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut starts = vec![theta_from(init, with_noise)];
    for _ in 1..options.restarts {
        let t: Vec<f64> = (0..dim)
            .map(|i| rng.random_range(lo[i]..hi[i]))
            .collect();
        starts.push(t);
    }

    let results: Vec<(Vec<f64>, f64)> = starts
        .par_iter()
        .map(|start| nelder_mead(&objective, start, options.max_evals))
        .collect();

    let mut best: Option<(Vec<f64>, f64)> = None;
    for r in results {
        if best.as_ref().is_none_or(|b| r.1 < b.1) {
            best = Some(r);
        }
    }
    let (theta, value) = best.expect("at least one restart");
    if !value.is_finite() {
        return Err(Error::Fitting {
            message: "all likelihood evaluations failed".into(),
            best: Box::new(init.clone()),
        });
    }
    Ok(theta_into(&theta, init.s_on2))
}

/// Nelder-Mead minimization with an infinite-penalty box. Returns the best
/// vertex seen and its value.
fn nelder_mead(
    objective: &(impl Fn(&[f64]) -> f64 + Sync),
    start: &[f64],
    max_evals: usize,
) -> (Vec<f64>, f64) {
    const REFLECT: f64 = 1.0;
    const EXPAND: f64 = 2.0;
    const CONTRACT: f64 = 0.5;
    const SHRINK: f64 = 0.5;
    const STEP: f64 = 0.35;
    const FTOL: f64 = 1e-7;

    let dim = start.len();
    let mut evals = 0usize;
    let eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        objective(x)
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    let f0 = eval(start, &mut evals);
    simplex.push((start.to_vec(), f0));
    for i in 0..dim {
        let mut v = start.to_vec();
        v[i] += STEP;
        let mut fv = eval(&v, &mut evals);
        if !fv.is_finite() {
            // flip the step if it left the box
            v[i] -= 2.0 * STEP;
            fv = eval(&v, &mut evals);
        }
        simplex.push((v, fv));
    }

    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        let best = simplex[0].1;
        let worst = simplex[dim].1;
        if worst.is_finite() && (worst - best).abs() <= FTOL * (1.0 + best.abs()) {
            break;
        }

        // centroid of all but the worst vertex
        let mut centroid = vec![0.0; dim];
        for v in &simplex[..dim] {
            for (c, x) in centroid.iter_mut().zip(&v.0) {
                *c += x / dim as f64;
            }
        }

        let worst_v = simplex[dim].0.clone();
        let reflected: Vec<f64> = (0..dim)
            .map(|i| centroid[i] + REFLECT * (centroid[i] - worst_v[i]))
            .collect();
        let fr = eval(&reflected, &mut evals);

        if fr < simplex[0].1 {
            let expanded: Vec<f64> = (0..dim)
                .map(|i| centroid[i] + EXPAND * (centroid[i] - worst_v[i]))
                .collect();
            let fe = eval(&expanded, &mut evals);
            simplex[dim] = if fe < fr {
                (expanded, fe)
            } else {
                (reflected, fr)
            };
        } else if fr < simplex[dim - 1].1 {
            simplex[dim] = (reflected, fr);
        } else {
            let contracted: Vec<f64> = (0..dim)
                .map(|i| centroid[i] + CONTRACT * (worst_v[i] - centroid[i]))
                .collect();
            let fc = eval(&contracted, &mut evals);
            if fc < simplex[dim].1 {
                simplex[dim] = (contracted, fc);
            } else {
                let best_v = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    for (vi, bi) in v.0.iter_mut().zip(&best_v) {
                        *vi = bi + SHRINK * (*vi - bi);
                    }
                    v.1 = eval(&v.0, &mut evals);
                    if evals >= max_evals {
                        break;
                    }
                }
            }
        }
    }

    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
    simplex.swap_remove(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::tests_support::*;
    use crate::gp::{zero_prior, GpModel};
    use crate::kernels::InputPoint;
    use approx::assert_relative_eq;

    #[test]
    fn likelihood_single_point_closed_form() {
        let h = hyp(1.3, 0.6, 1.0, 1.0, 0.2);
        let u = 0.8;
        let data = TrainingSet::new(
            vec![InputPoint::from_slice(&[0.4, 0.1], u).unwrap()],
            vec![0.0],
            0.2,
        )
        .unwrap();
        let lml = log_marginal_likelihood(&data, &h).unwrap();
        let var = h.s_f2 + h.s_g2 * u * u + h.s_on2;
        let expected = -0.5 * var.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(lml, expected, epsilon = 1e-8);
    }

    #[test]
    fn zero_targets_maximize_quadratic_term() {
        let mut rng = seeded(3);
        let data = random_set(&mut rng, 10, 2, 0.1);
        let h = hyp(1.0, 1.0, 1.0, 1.0, 0.1);
        let zeroed = TrainingSet::new(data.inputs.clone(), vec![0.0; data.len()], 0.1).unwrap();
        assert!(
            log_marginal_likelihood(&zeroed, &h).unwrap()
                >= log_marginal_likelihood(&data, &h).unwrap()
        );
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut rng = seeded(5);
        let data = random_set(&mut rng, 8, 2, 0.15);
        let h = hyp(1.3, 0.7, 0.9, 1.2, 0.15);
        let (_, grad) = log_marginal_likelihood_grad(&data, &h, true).unwrap();

        let perturb = |idx: usize, eps: f64| -> Hyperparameters {
            let mut p = h.clone();
            match idx {
                0 => p.s_f2 += eps,
                1 => p.s_g2 += eps,
                2 => p.l_f += eps,
                3 => p.l_g += eps,
                _ => p.s_on2 += eps,
            }
            p
        };
        for (idx, g) in grad.iter().enumerate() {
            let eps = 1e-6;
            let plus = log_marginal_likelihood(&data, &perturb(idx, eps)).unwrap();
            let minus = log_marginal_likelihood(&data, &perturb(idx, -eps)).unwrap();
            let fd = (plus - minus) / (2.0 * eps);
            assert!(
                (g - fd).abs() / (1.0 + fd.abs()) < 1e-4,
                "component {idx}: analytic {g} vs fd {fd}"
            );
        }
    }

    #[test]
    fn fit_never_scores_below_init() {
        let mut rng = seeded(7);
        let data = random_set(&mut rng, 25, 2, 0.1);
        let init = hyp(0.5, 0.5, 0.5, 0.5, 0.1);
        let bounds = HyperBounds::wide();
        let opts = FitOptions {
            restarts: 2,
            max_evals: 80,
            ..FitOptions::default()
        };
        let fitted = fit_hyperparameters(&data, &init, &bounds, &opts).unwrap();
        assert!(
            log_marginal_likelihood(&data, &fitted).unwrap()
                >= log_marginal_likelihood(&data, &init).unwrap() - 1e-9
        );
        assert!(bounds.contains(&fitted));
        // s_on2 fixed by default
        assert_eq!(fitted.s_on2, init.s_on2);
    }

    #[test]
    fn fit_is_idempotent_at_an_optimum() {
        let mut rng = seeded(9);
        let data = random_set(&mut rng, 20, 2, 0.1);
        let bounds = HyperBounds::wide();
        let opts = FitOptions {
            restarts: 1,
            max_evals: 600,
            ..FitOptions::default()
        };
        // chain fits until the point stops moving, then one more must stay
        let mut cur = hyp(1.0, 1.0, 1.0, 1.0, 0.1);
        for _ in 0..4 {
            cur = fit_hyperparameters(&data, &cur, &bounds, &opts).unwrap();
        }
        let refit = fit_hyperparameters(&data, &cur, &bounds, &opts).unwrap();
        let l1 = log_marginal_likelihood(&data, &cur).unwrap();
        let l2 = log_marginal_likelihood(&data, &refit).unwrap();
        assert!(l2 >= l1 - 1e-9);
        assert!((l2 - l1).abs() < 1e-3, "likelihood moved {l1} -> {l2}");
    }

    #[test]
    fn fit_survives_duplicated_inputs() {
        let p = InputPoint::from_slice(&[0.5, 0.5], 1.0).unwrap();
        let data = TrainingSet::new(vec![p.clone(), p], vec![0.3, 0.35], 0.05).unwrap();
        let opts = FitOptions {
            restarts: 1,
            max_evals: 60,
            ..FitOptions::default()
        };
        let fitted =
            fit_hyperparameters(&data, &hyp(1.0, 1.0, 1.0, 1.0, 0.05), &HyperBounds::wide(), &opts);
        assert!(fitted.is_ok());
    }

    #[test]
    fn fit_rejects_init_outside_bounds() {
        let mut rng = seeded(11);
        let data = random_set(&mut rng, 5, 2, 0.1);
        let bounds = HyperBounds::new(
            hyp(0.5, 0.5, 0.5, 0.5, 0.01),
            hyp(2.0, 2.0, 2.0, 2.0, 1.0),
        )
        .unwrap();
        let err = fit_hyperparameters(
            &data,
            &hyp(10.0, 1.0, 1.0, 1.0, 0.1),
            &bounds,
            &FitOptions::default(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn length_scale_recovered_from_synthetic_draws() {
        // draw targets from a known composite GP and check the fitted l_f
        // lands within a factor of two, over several seeds
        let truth = hyp(1.0, 1.0, 1.0, 1.0, 0.01);
        let bounds = HyperBounds::wide();
        let opts = FitOptions {
            restarts: 2,
            max_evals: 120,
            seed: 1,
            ..FitOptions::default()
        };
        let mut ratios = Vec::new();
        for seed in 0..5u64 {
            let data = draw_from_gp(&truth, 220, seed);
            let fitted =
                fit_hyperparameters(&data, &hyp(0.5, 0.5, 0.4, 0.4, 0.01), &bounds, &opts)
                    .unwrap();
            ratios.push(fitted.l_f / truth.l_f);
        }
        let within = ratios.iter().filter(|r| **r >= 0.5 && **r <= 2.0).count();
        assert!(
            within >= 4,
            "l_f recovery ratios {ratios:?}: only {within}/5 within factor 2"
        );
    }

    #[test]
    fn fitted_noise_stays_in_bounds_when_optimized() {
        let truth = hyp(1.0, 0.5, 1.0, 1.0, 0.25);
        let data = draw_from_gp(&truth, 150, 3);
        let bounds = HyperBounds::wide();
        let opts = FitOptions {
            restarts: 2,
            max_evals: 150,
            optimize_noise: true,
            seed: 2,
        };
        let fitted =
            fit_hyperparameters(&data, &hyp(1.0, 1.0, 1.0, 1.0, 0.5), &bounds, &opts).unwrap();
        assert!(fitted.s_on2 >= bounds.lower.s_on2 && fitted.s_on2 <= bounds.upper.s_on2);
        // the model built from the fit must factorize
        assert!(GpModel::new(data, fitted, zero_prior(), zero_prior()).is_ok());
    }
}
