//! Covariance functions for control-affine models.
//!
//! The composite kernel
//!
//! ```text
//! k(z, z') = k_f(x, x') + u * k_g(x, x') * u',   z = [x; u]
//! ```
//!
//! mirrors dynamics of the form `f(x) + g(x) u`, which is what makes
//! separate posteriors for `f` and `g` recoverable from a single
//! regression. Both components are squared-exponential kernels
//! `s^2 exp(-||x - x'||^2 / (2 l^2))` on the state alone.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Signal variances, length scales and observation-noise variance of the
/// composite kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    /// Signal variance of `k_f` (squared output units).
    pub s_f2: f64,
    /// Signal variance of `k_g`.
    pub s_g2: f64,
    /// Length scale of `k_f` (state-space distance units).
    pub l_f: f64,
    /// Length scale of `k_g`.
    pub l_g: f64,
    /// Observation-noise variance.
    pub s_on2: f64,
}

impl Hyperparameters {
    pub fn new(s_f2: f64, s_g2: f64, l_f: f64, l_g: f64, s_on2: f64) -> Result<Self> {
        let h = Self {
            s_f2,
            s_g2,
            l_f,
            l_g,
            s_on2,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("hyperparameters: {msg}")));
        if !(self.s_f2 >= 0.0 && self.s_f2.is_finite()) {
            return bad(&format!("s_f2 must be finite and >= 0, got {}", self.s_f2));
        }
        if !(self.s_g2 >= 0.0 && self.s_g2.is_finite()) {
            return bad(&format!("s_g2 must be finite and >= 0, got {}", self.s_g2));
        }
        if !(self.l_f > 0.0 && self.l_f.is_finite()) {
            return bad(&format!("l_f must be finite and > 0, got {}", self.l_f));
        }
        if !(self.l_g > 0.0 && self.l_g.is_finite()) {
            return bad(&format!("l_g must be finite and > 0, got {}", self.l_g));
        }
        if !(self.s_on2 > 0.0 && self.s_on2.is_finite()) {
            return bad(&format!("s_on2 must be finite and > 0, got {}", self.s_on2));
        }
        Ok(())
    }

    /// Diagonal regularizer added to the Gram matrix before factorization,
    /// scaled to the total signal variance so near-duplicate samples stay
    /// factorizable.
    pub fn jitter(&self) -> f64 {
        1e-10 * (self.s_f2 + self.s_g2)
    }

    /// Effective noise variance seen by the factorized Gram matrix.
    pub fn effective_noise(&self) -> f64 {
        self.s_on2 + self.jitter()
    }
}

/// One training or query input `z = [x; u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputPoint {
    /// State vector, dimension `d_x >= 1`.
    pub x: DVector<f64>,
    /// Scalar control input.
    pub u: f64,
}

impl InputPoint {
    pub fn new(x: DVector<f64>, u: f64) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::InvalidArgument(
                "input point: state must have dimension >= 1".into(),
            ));
        }
        if !u.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "input point: entries must be finite".into(),
            ));
        }
        Ok(Self { x, u })
    }

    /// Convenience constructor from a state slice.
    pub fn from_slice(x: &[f64], u: f64) -> Result<Self> {
        Self::new(DVector::from_row_slice(x), u)
    }
}

/// Squared-exponential kernel `s2 * exp(-||x - x'||^2 / (2 l^2))`.
///
/// Symmetric in its state arguments; `l` must be positive.
pub fn se_kernel(x: &DVector<f64>, x2: &DVector<f64>, s2: f64, l: f64) -> Result<f64> {
    if x.len() != x2.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: x2.len(),
        });
    }
    if !(l > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "se_kernel: length scale must be > 0, got {l}"
        )));
    }
    if !(s2 >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "se_kernel: signal variance must be >= 0, got {s2}"
        )));
    }
    let d2 = (x - x2).norm_squared();
    Ok(s2 * (-d2 / (2.0 * l * l)).exp())
}

/// Composite covariance `k_f(x, x') + u * k_g(x, x') * u'`.
pub fn composite_kernel(z: &InputPoint, z2: &InputPoint, h: &Hyperparameters) -> Result<f64> {
    h.validate()?;
    let kf = se_kernel(&z.x, &z2.x, h.s_f2, h.l_f)?;
    let kg = se_kernel(&z.x, &z2.x, h.s_g2, h.l_g)?;
    // grouping the input product keeps the evaluation bit-symmetric
    Ok(kf + kg * (z.u * z2.u))
}

/// Assembles `K + (s_on^2 + jitter) I_N` for the composite kernel and the
/// given inputs. The result is symmetric positive definite and admits a
/// Cholesky factorization for valid hyperparameters.
///
/// Both SE components share the pairwise squared distances, which are
/// computed once.
pub fn gram_matrix(points: &[InputPoint], h: &Hyperparameters) -> Result<DMatrix<f64>> {
    h.validate()?;
    let n = points.len();
    if n == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let dim = points[0].x.len();
    for p in points {
        if p.x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: p.x.len(),
            });
        }
    }

    let inv_2lf2 = 1.0 / (2.0 * h.l_f * h.l_f);
    let inv_2lg2 = 1.0 / (2.0 * h.l_g * h.l_g);
    let diag = h.effective_noise();

    let mut k = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let d2 = (&points[i].x - &points[j].x).norm_squared();
            let kf = h.s_f2 * (-d2 * inv_2lf2).exp();
            let kg = h.s_g2 * (-d2 * inv_2lg2).exp();
            let v = kf + points[i].u * kg * points[j].u;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] += diag;
    }
    Ok(k)
}

/// Kernel vectors of a query state against the training inputs:
/// `k_{f,n} = k_f(x^(n), x)`, `k_{g,n} = k_g(x^(n), x)`, plus the diagonal
/// of training inputs `u^(n)`. The composite kernel vector at `z = [x; u]`
/// is then `k_f + diag(u_train) k_g u`.
pub fn kernel_vectors(
    x: &DVector<f64>,
    points: &[InputPoint],
    h: &Hyperparameters,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let n = points.len();
    let inv_2lf2 = 1.0 / (2.0 * h.l_f * h.l_f);
    let inv_2lg2 = 1.0 / (2.0 * h.l_g * h.l_g);
    let mut kf = DVector::<f64>::zeros(n);
    let mut kg = DVector::<f64>::zeros(n);
    let mut u = DVector::<f64>::zeros(n);
    for (i, p) in points.iter().enumerate() {
        let d2 = (&p.x - x).norm_squared();
        kf[i] = h.s_f2 * (-d2 * inv_2lf2).exp();
        kg[i] = h.s_g2 * (-d2 * inv_2lg2).exp();
        u[i] = p.u;
    }
    (kf, kg, u)
}
