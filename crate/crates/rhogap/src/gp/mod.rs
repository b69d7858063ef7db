//! Posterior inference for the composite-kernel Gaussian process.
//!
//! A single regression on residual observations with the composite kernel
//! yields separate posteriors for both model components:
//!
//! ```text
//! mu_f(x)   = f_hat(x) + k_f(x)' (K + s_on^2 I)^{-1} y
//! mu_g(x)   = g_hat(x) + k_g(x)' U (K + s_on^2 I)^{-1} y
//! sig_f^2(x) = k_f(x,x) - k_f(x)' (K + s_on^2 I)^{-1} k_f(x)
//! sig_g^2(x) = k_g(x,x) - k_g(x)' U (K + s_on^2 I)^{-1} U k_g(x)
//! ```
//!
//! where `U = diag(u^(1), ..., u^(N))` and the targets `y` are residuals
//! with respect to the prior model, so the full posterior mean decomposes
//! exactly as `mu(z) = mu_f(x) + u mu_g(x)`.
//!
//! The Gram factorization is computed once at construction and reused by
//! every query; models are immutable, so concurrent read-only queries are
//! safe.

mod fit;

pub use fit::{
    fit_hyperparameters, log_marginal_likelihood, log_marginal_likelihood_grad, FitOptions,
    HyperBounds,
};

use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{self, Hyperparameters, InputPoint};

/// Scalar function of the state, used for prior means and ground-truth
/// handles.
pub type StateFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

/// Prior mean that is identically zero.
pub fn zero_prior() -> StateFn {
    Arc::new(|_| 0.0)
}

/// Prior mean with a constant value.
pub fn constant_prior(c: f64) -> StateFn {
    Arc::new(move |_| c)
}

/// Residual training data: inputs `z^(n) = [x^(n); u^(n)]` and noisy
/// observations `y^(n)` of the model error `f(x) - f_hat(x) + (g(x) -
/// g_hat(x)) u`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub inputs: Vec<InputPoint>,
    pub targets: Vec<f64>,
    /// Noise variance used when the targets were generated.
    pub s_on2: f64,
}

impl TrainingSet {
    pub fn new(inputs: Vec<InputPoint>, targets: Vec<f64>, s_on2: f64) -> Result<Self> {
        let set = Self {
            inputs,
            targets,
            s_on2,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn empty(s_on2: f64) -> Self {
        Self {
            inputs: Vec::new(),
            targets: Vec::new(),
            s_on2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.len() != self.targets.len() {
            return Err(Error::InvalidArgument(format!(
                "training set: {} inputs but {} targets",
                self.inputs.len(),
                self.targets.len()
            )));
        }
        if !self.s_on2.is_finite() || self.s_on2 < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "training set: s_on2 must be finite and >= 0, got {}",
                self.s_on2
            )));
        }
        if self.targets.iter().any(|y| !y.is_finite()) {
            return Err(Error::InvalidArgument(
                "training set: non-finite target".into(),
            ));
        }
        if let Some(first) = self.inputs.first() {
            let dim = first.x.len();
            for p in &self.inputs {
                if p.x.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: p.x.len(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// State dimension, if the set is nonempty.
    pub fn dim(&self) -> Option<usize> {
        self.inputs.first().map(|p| p.x.len())
    }
}

/// Scalar posterior at a query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub mean: f64,
    pub variance: f64,
}

impl Posterior {
    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Joint f/g posterior at a state, produced by the batched field queries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FgPosterior {
    pub mu_f: f64,
    pub var_f: f64,
    pub mu_g: f64,
    pub var_g: f64,
}

impl FgPosterior {
    pub fn sigma_f(&self) -> f64 {
        self.var_f.sqrt()
    }

    pub fn sigma_g(&self) -> f64 {
        self.var_g.sqrt()
    }
}

/// Immutable fitted model: training data, hyperparameters, prior means and
/// the cached Gram factorization.
#[derive(Clone)]
pub struct GpModel {
    data: TrainingSet,
    h: Hyperparameters,
    prior_f: StateFn,
    prior_g: StateFn,
    chol: Option<Cholesky<f64, Dyn>>,
    alpha: DVector<f64>,
}

impl fmt::Debug for GpModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GpModel")
            .field("n", &self.data.len())
            .field("h", &self.h)
            .finish()
    }
}

fn clamp_variance(v: f64, cap: f64) -> f64 {
    debug_assert!(v > -1e-9, "posterior variance {v} below -1e-9");
    v.clamp(0.0, cap)
}

impl GpModel {
    /// Builds the model, factorizing `K + (s_on^2 + jitter) I` once.
    pub fn new(
        data: TrainingSet,
        h: Hyperparameters,
        prior_f: StateFn,
        prior_g: StateFn,
    ) -> Result<Self> {
        data.validate()?;
        h.validate()?;
        if data.is_empty() {
            return Ok(Self {
                data,
                h,
                prior_f,
                prior_g,
                chol: None,
                alpha: DVector::zeros(0),
            });
        }
        let gram = kernels::gram_matrix(&data.inputs, &h)?;
        let chol = Cholesky::new(gram).ok_or_else(|| {
            Error::NumericalConditioning(
                "Gram matrix not positive definite (degenerate hyperparameters or duplicated data beyond jitter tolerance)"
                    .into(),
            )
        })?;
        let y = DVector::from_row_slice(&data.targets);
        let alpha = chol.solve(&y);
        Ok(Self {
            data,
            h,
            prior_f,
            prior_g,
            chol: Some(chol),
            alpha,
        })
    }

    pub fn data(&self) -> &TrainingSet {
        &self.data
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.h
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn prior_f(&self, x: &DVector<f64>) -> f64 {
        (self.prior_f)(x)
    }

    pub fn prior_g(&self, x: &DVector<f64>) -> f64 {
        (self.prior_g)(x)
    }

    pub fn prior_f_fn(&self) -> StateFn {
        Arc::clone(&self.prior_f)
    }

    pub fn prior_g_fn(&self) -> StateFn {
        Arc::clone(&self.prior_g)
    }

    /// Prior mean of the full process, `f_hat(x) + g_hat(x) u`.
    pub fn prior_mean(&self, z: &InputPoint) -> f64 {
        (self.prior_f)(&z.x) + (self.prior_g)(&z.x) * z.u
    }

    fn lower(&self) -> &DMatrix<f64> {
        self.chol
            .as_ref()
            .expect("factorization present for nonempty data")
            .l_dirty()
    }

    /// Posterior of the full process value `f(x) + g(x) u` at `z`.
    pub fn posterior(&self, z: &InputPoint) -> Posterior {
        let mu0 = self.prior_mean(z);
        let k_zz = self.h.s_f2 + z.u * z.u * self.h.s_g2;
        if self.is_empty() {
            return Posterior {
                mean: mu0,
                variance: k_zz,
            };
        }
        let (kf, kg, u) = kernels::kernel_vectors(&z.x, &self.data.inputs, &self.h);
        let mut k = kf;
        for i in 0..k.len() {
            k[i] += u[i] * kg[i] * z.u;
        }
        let mean = mu0 + k.dot(&self.alpha);
        let mut w = k;
        self.lower().solve_lower_triangular_unchecked_mut(&mut w);
        let variance = clamp_variance(k_zz - w.norm_squared(), k_zz);
        Posterior { mean, variance }
    }

    /// Posterior of the `f` component at a state.
    pub fn posterior_f(&self, x: &DVector<f64>) -> Posterior {
        if self.is_empty() {
            return Posterior {
                mean: (self.prior_f)(x),
                variance: self.h.s_f2,
            };
        }
        let (kf, _, _) = kernels::kernel_vectors(x, &self.data.inputs, &self.h);
        let mean = (self.prior_f)(x) + kf.dot(&self.alpha);
        let mut w = kf;
        self.lower().solve_lower_triangular_unchecked_mut(&mut w);
        let variance = clamp_variance(self.h.s_f2 - w.norm_squared(), self.h.s_f2);
        Posterior { mean, variance }
    }

    /// Posterior of the `g` component at a state.
    pub fn posterior_g(&self, x: &DVector<f64>) -> Posterior {
        if self.is_empty() {
            return Posterior {
                mean: (self.prior_g)(x),
                variance: self.h.s_g2,
            };
        }
        let (_, kg, u) = kernels::kernel_vectors(x, &self.data.inputs, &self.h);
        let mut ukg = kg;
        for i in 0..ukg.len() {
            ukg[i] *= u[i];
        }
        let mean = (self.prior_g)(x) + ukg.dot(&self.alpha);
        let mut w = ukg;
        self.lower().solve_lower_triangular_unchecked_mut(&mut w);
        let variance = clamp_variance(self.h.s_g2 - w.norm_squared(), self.h.s_g2);
        Posterior { mean, variance }
    }

    /// Posterior means of both components, skipping the variance solves.
    /// This is what the controller calls in the integration loop.
    pub fn means(&self, x: &DVector<f64>) -> (f64, f64) {
        if self.is_empty() {
            return ((self.prior_f)(x), (self.prior_g)(x));
        }
        let (kf, kg, u) = kernels::kernel_vectors(x, &self.data.inputs, &self.h);
        let mut mu_f = (self.prior_f)(x);
        let mut mu_g = (self.prior_g)(x);
        for i in 0..kf.len() {
            mu_f += kf[i] * self.alpha[i];
            mu_g += u[i] * kg[i] * self.alpha[i];
        }
        (mu_f, mu_g)
    }

    /// Full f/g posterior at a single state.
    pub fn posterior_fg(&self, x: &DVector<f64>) -> FgPosterior {
        let pf = self.posterior_f(x);
        let pg = self.posterior_g(x);
        FgPosterior {
            mu_f: pf.mean,
            var_f: pf.variance,
            mu_g: pg.mean,
            var_g: pg.variance,
        }
    }

    /// Batched f/g posteriors, evaluated in parallel chunks. Order follows
    /// the input slice.
    pub fn posterior_fg_batch(&self, xs: &[DVector<f64>]) -> Vec<FgPosterior> {
        if self.is_empty() {
            return xs
                .iter()
                .map(|x| FgPosterior {
                    mu_f: (self.prior_f)(x),
                    var_f: self.h.s_f2,
                    mu_g: (self.prior_g)(x),
                    var_g: self.h.s_g2,
                })
                .collect();
        }
        const CHUNK: usize = 256;
        let chunks: Vec<Vec<FgPosterior>> = xs
            .par_chunks(CHUNK)
            .map(|chunk| self.fg_chunk(chunk))
            .collect();
        chunks.into_iter().flatten().collect()
    }

    fn fg_chunk(&self, xs: &[DVector<f64>]) -> Vec<FgPosterior> {
        let n = self.data.len();
        let m = xs.len();
        let inv_2lf2 = 1.0 / (2.0 * self.h.l_f * self.h.l_f);
        let inv_2lg2 = 1.0 / (2.0 * self.h.l_g * self.h.l_g);

        let mut kf = DMatrix::<f64>::zeros(n, m);
        let mut kgu = DMatrix::<f64>::zeros(n, m);
        for (j, x) in xs.iter().enumerate() {
            for (i, p) in self.data.inputs.iter().enumerate() {
                let d2 = (&p.x - x).norm_squared();
                kf[(i, j)] = self.h.s_f2 * (-d2 * inv_2lf2).exp();
                kgu[(i, j)] = p.u * self.h.s_g2 * (-d2 * inv_2lg2).exp();
            }
        }

        let mean_f = kf.tr_mul(&self.alpha);
        let mean_g = kgu.tr_mul(&self.alpha);

        let l = self.lower();
        l.solve_lower_triangular_unchecked_mut(&mut kf);
        l.solve_lower_triangular_unchecked_mut(&mut kgu);

        (0..m)
            .map(|j| {
                let x = &xs[j];
                FgPosterior {
                    mu_f: (self.prior_f)(x) + mean_f[j],
                    var_f: clamp_variance(
                        self.h.s_f2 - kf.column(j).norm_squared(),
                        self.h.s_f2,
                    ),
                    mu_g: (self.prior_g)(x) + mean_g[j],
                    var_g: clamp_variance(
                        self.h.s_g2 - kgu.column(j).norm_squared(),
                        self.h.s_g2,
                    ),
                }
            })
            .collect()
    }
}

/// Axis-aligned box, used as the domain for Lipschitz-constant estimation
/// and assessment grids.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxDomain {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl BoxDomain {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower.iter().zip(upper.iter()).any(|(a, b)| a >= b) {
            return Err(Error::InvalidArgument(
                "box domain: lower bound must be strictly below upper bound".into(),
            ));
        }
        Ok(Self { lower, upper })
    }

    /// Bounding box of the origin-centered norm ball of the given radius.
    pub fn from_ball(radius: f64, dim: usize) -> Result<Self> {
        if !(radius > 0.0) || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "box domain: need radius > 0 and dim >= 1, got radius {radius}, dim {dim}"
            )));
        }
        Ok(Self {
            lower: DVector::from_element(dim, -radius),
            upper: DVector::from_element(dim, radius),
        })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Uniform grid with `resolution` nodes per axis, row-major with the
    /// last axis varying fastest.
    pub fn grid_points(&self, resolution: usize) -> Vec<DVector<f64>> {
        assert!(resolution >= 2, "grid resolution must be >= 2 per axis");
        let d = self.dim();
        let total = resolution.pow(d as u32);
        let mut pts = Vec::with_capacity(total);
        let mut idx = vec![0usize; d];
        for _ in 0..total {
            let x = DVector::from_fn(d, |a, _| {
                self.lower[a]
                    + (self.upper[a] - self.lower[a]) * idx[a] as f64 / (resolution - 1) as f64
            });
            pts.push(x);
            for a in (0..d).rev() {
                idx[a] += 1;
                if idx[a] < resolution {
                    break;
                }
                idx[a] = 0;
            }
        }
        pts
    }
}

/// Numerically estimated Lipschitz constants of the posterior fields,
/// with `f`/`g` bounded by twice the corresponding mean constant.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LipschitzConstants {
    pub mu_f: f64,
    pub mu_g: f64,
    pub sigma2_f: f64,
    pub sigma2_g: f64,
    pub f: f64,
    pub g: f64,
}

/// Maximum finite-difference gradient norms of `mu_f`, `mu_g`, `sig_f^2`
/// and `sig_g^2` over a uniform grid; central differences in the interior,
/// one-sided at the boundary. The constants for the unknown functions are
/// set to twice the mean-field values.
pub fn estimate_lipschitz(
    model: &GpModel,
    domain: &BoxDomain,
    grid_resolution: usize,
) -> Result<LipschitzConstants> {
    if grid_resolution < 2 {
        return Err(Error::InvalidArgument(format!(
            "lipschitz estimation: grid resolution must be >= 2, got {grid_resolution}"
        )));
    }
    let pts = domain.grid_points(grid_resolution);
    let fields = model.posterior_fg_batch(&pts);

    let mu_f: Vec<f64> = fields.iter().map(|p| p.mu_f).collect();
    let mu_g: Vec<f64> = fields.iter().map(|p| p.mu_g).collect();
    let s2_f: Vec<f64> = fields.iter().map(|p| p.var_f).collect();
    let s2_g: Vec<f64> = fields.iter().map(|p| p.var_g).collect();

    let l_mu_f = max_gradient_norm(&mu_f, domain, grid_resolution);
    let l_mu_g = max_gradient_norm(&mu_g, domain, grid_resolution);
    let l_s2_f = max_gradient_norm(&s2_f, domain, grid_resolution);
    let l_s2_g = max_gradient_norm(&s2_g, domain, grid_resolution);

    Ok(LipschitzConstants {
        mu_f: l_mu_f,
        mu_g: l_mu_g,
        sigma2_f: l_s2_f,
        sigma2_g: l_s2_g,
        f: 2.0 * l_mu_f,
        g: 2.0 * l_mu_g,
    })
}

fn max_gradient_norm(field: &[f64], domain: &BoxDomain, res: usize) -> f64 {
    let d = domain.dim();
    let mut strides = vec![1usize; d];
    for a in (0..d.saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * res;
    }
    let spacing: Vec<f64> = (0..d)
        .map(|a| (domain.upper[a] - domain.lower[a]) / (res - 1) as f64)
        .collect();

    let total = field.len();
    let mut max_norm2: f64 = 0.0;
    let mut idx = vec![0usize; d];
    for lin in 0..total {
        let mut norm2 = 0.0;
        for a in 0..d {
            let s = strides[a];
            let h = spacing[a];
            let deriv = if idx[a] == 0 {
                (field[lin + s] - field[lin]) / h
            } else if idx[a] == res - 1 {
                (field[lin] - field[lin - s]) / h
            } else {
                (field[lin + s] - field[lin - s]) / (2.0 * h)
            };
            norm2 += deriv * deriv;
        }
        max_norm2 = max_norm2.max(norm2);
        for a in (0..d).rev() {
            idx[a] += 1;
            if idx[a] < res {
                break;
            }
            idx[a] = 0;
        }
    }
    max_norm2.sqrt()
}
