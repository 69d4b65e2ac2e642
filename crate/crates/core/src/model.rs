//! Problem definitions: drift/diffusion pair, terminal observable, and the
//! uniform time grid shared by every solver in the crate.
//!
//! The dynamics is the additive-noise diffusion
//!
//! ```text
//!     dX_t = b(X_t) dt + sqrt(eps) sigma dB_t,    D = sigma sigma^T,
//! ```
//!
//! and the quantity of interest is `E[exp(f(X_T)/eps)]` started from `x0`.
//! Derivatives (`grad b`, `theta . hess b`, `grad f`, `hess f`) are supplied
//! analytically by the model author and cross-validated against central
//! finite differences at construction; a silently wrong Jacobian would
//! corrupt every downstream solver. Probe-based checks use relative
//! tolerance 1e-5 with absolute floor 1e-8.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::odesolve::InstantonPath;

/// Scalar field on state space.
pub type ScalarFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
/// Vector field on state space.
pub type VectorFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
/// Matrix-valued field on state space.
pub type MatrixFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
/// Contraction `(x, theta) -> theta . hess b(x)`, a symmetric d x d matrix
/// with entries `sum_k theta_k d^2 b_k / dx_i dx_j`.
pub type ContractionFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

const FD_REL_TOL: f64 = 1e-5;
const FD_ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimensions must be positive (dim {dim}, noise_dim {noise_dim})")]
    ZeroDim { dim: usize, noise_dim: usize },
    #[error("sigma*sigma^T is not positive definite (smallest eigenvalue {0:.3e})")]
    CovNotPositiveDefinite(f64),
    #[error(
        "{what} disagrees with finite differences at probe {probe} \
         (analytic {analytic:.6e}, numeric {numeric:.6e})"
    )]
    DerivativeMismatch {
        what: &'static str,
        probe: usize,
        analytic: f64,
        numeric: f64,
    },
    #[error("drift Hessian contraction is not symmetric at probe {0}")]
    AsymmetricHessian(usize),
    #[error("observable not finite at probe {0}")]
    NonFiniteObservable(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("probe set is empty")]
    EmptyProbes,
    #[error("time grid: {0}")]
    Grid(String),
}

/// `|a - b| <= max(floor, rtol * max(|a|,|b|))`.
fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= FD_ABS_FLOOR.max(FD_REL_TOL * a.abs().max(b.abs()))
}

fn fd_step(x: f64) -> f64 {
    1e-5 * (1.0 + x.abs())
}

/// Largest eigenvalue of a symmetric matrix.
pub(crate) fn sym_max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

fn sym_min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .singular_values()
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Uniform discretization of `[0, T]` with `n_steps = round(T/dt)` intervals.
#[derive(Clone, Debug)]
pub struct TimeGrid {
    horizon_t: f64,
    dt: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon_t: f64, dt: f64) -> Result<Self, ModelError> {
        if !(horizon_t > 0.0) || !(dt > 0.0) {
            return Err(ModelError::Grid(format!(
                "horizon and dt must be positive (T {horizon_t}, dt {dt})"
            )));
        }
        let n_steps = (horizon_t / dt).round();
        if n_steps < 2.0 {
            return Err(ModelError::Grid(format!(
                "need at least 2 steps, got {n_steps}"
            )));
        }
        if (n_steps * dt - horizon_t).abs() > 1e-12 * horizon_t {
            return Err(ModelError::Grid(format!(
                "dt {dt} does not divide horizon {horizon_t}"
            )));
        }
        Ok(TimeGrid {
            horizon_t,
            dt,
            n_steps: n_steps as usize,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon_t
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Grid node `t_i = i * dt`, valid for `i = 0..=n_steps`.
    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    /// True when two grids discretize the same horizon with the same step.
    pub fn compatible(&self, other: &TimeGrid) -> bool {
        self.n_steps == other.n_steps
            && (self.horizon_t - other.horizon_t).abs() <= 1e-12 * self.horizon_t
    }
}

/// Additive-noise diffusion `dX = b(X) dt + sqrt(eps) sigma dB`.
///
/// Immutable after construction; all closures are pure, so the model is
/// freely shared across trajectory workers.
#[derive(Clone)]
pub struct DiffusionModel {
    dim: usize,
    noise_dim: usize,
    drift: VectorFn,
    drift_jacobian: MatrixFn,
    drift_hessian_contract: ContractionFn,
    sigma: DMatrix<f64>,
    sigma_t: DMatrix<f64>,
    cov: DMatrix<f64>,
    lambda_max: f64,
}

impl DiffusionModel {
    /// Builds a model and cross-validates the supplied derivatives by
    /// central finite differences at the given probe points.
    pub fn new(
        dim: usize,
        noise_dim: usize,
        drift: VectorFn,
        drift_jacobian: MatrixFn,
        drift_hessian_contract: ContractionFn,
        sigma: DMatrix<f64>,
        probes: &[DVector<f64>],
    ) -> Result<Self, ModelError> {
        if dim == 0 || noise_dim == 0 {
            return Err(ModelError::ZeroDim { dim, noise_dim });
        }
        if sigma.nrows() != dim || sigma.ncols() != noise_dim {
            return Err(ModelError::InvalidParameter(format!(
                "sigma must be {dim} x {noise_dim}, got {} x {}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if probes.is_empty() {
            return Err(ModelError::EmptyProbes);
        }
        let cov = &sigma * sigma.transpose();
        let min_eig = sym_min_eigenvalue(&cov);
        if min_eig <= 0.0 {
            return Err(ModelError::CovNotPositiveDefinite(min_eig));
        }
        let lambda_max = sym_max_eigenvalue(&cov);
        let sigma_t = sigma.transpose();
        let model = DiffusionModel {
            dim,
            noise_dim,
            drift,
            drift_jacobian,
            drift_hessian_contract,
            sigma,
            sigma_t,
            cov,
            lambda_max,
        };
        model.validate_derivatives(probes)?;
        Ok(model)
    }

    fn validate_derivatives(&self, probes: &[DVector<f64>]) -> Result<(), ModelError> {
        for (p, x) in probes.iter().enumerate() {
            let jac = (self.drift_jacobian)(x);
            if jac.nrows() != self.dim || jac.ncols() != self.dim {
                return Err(ModelError::InvalidParameter(
                    "drift_jacobian has wrong shape".into(),
                ));
            }
            // Column j of the Jacobian against (b(x+h e_j) - b(x-h e_j)) / 2h.
            for j in 0..self.dim {
                let h = fd_step(x[j]);
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let fd = ((self.drift)(&xp) - (self.drift)(&xm)) / (2.0 * h);
                for i in 0..self.dim {
                    if !close(jac[(i, j)], fd[i]) {
                        return Err(ModelError::DerivativeMismatch {
                            what: "drift_jacobian",
                            probe: p,
                            analytic: jac[(i, j)],
                            numeric: fd[i],
                        });
                    }
                }
            }
            // Contraction: symmetry plus agreement with differenced Jacobians
            // along a few fixed directions.
            for theta in contraction_directions(self.dim) {
                let contract = (self.drift_hessian_contract)(x, &theta);
                if (&contract - contract.transpose()).amax() > 1e-10 * (1.0 + contract.amax()) {
                    return Err(ModelError::AsymmetricHessian(p));
                }
                for k in 0..self.dim {
                    let h = fd_step(x[k]);
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[k] += h;
                    xm[k] -= h;
                    let djac = ((self.drift_jacobian)(&xp) - (self.drift_jacobian)(&xm))
                        / (2.0 * h);
                    // theta^T (d_k grad b) gives column k of theta . hess b.
                    for j in 0..self.dim {
                        let fd: f64 = (0..self.dim).map(|i| theta[i] * djac[(i, j)]).sum();
                        if !close(contract[(j, k)], fd) {
                            return Err(ModelError::DerivativeMismatch {
                                what: "drift_hessian_contract",
                                probe: p,
                                analytic: contract[(j, k)],
                                numeric: fd,
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.drift)(x)
    }

    pub fn drift_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.drift_jacobian)(x)
    }

    /// `theta . hess b(x)`, symmetric d x d.
    pub fn drift_hessian_contract(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        (self.drift_hessian_contract)(x, theta)
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn sigma_t(&self) -> &DMatrix<f64> {
        &self.sigma_t
    }

    /// `D = sigma sigma^T`.
    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Largest eigenvalue of `D`.
    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }
}

/// Directions used to probe `theta . hess b`: canonical basis plus the
/// all-ones vector.
fn contraction_directions(dim: usize) -> Vec<DVector<f64>> {
    let mut dirs: Vec<DVector<f64>> = (0..dim)
        .map(|i| {
            let mut e = DVector::zeros(dim);
            e[i] = 1.0;
            e
        })
        .collect();
    dirs.push(DVector::from_element(dim, 1.0));
    dirs
}

/// Terminal observable `f`, initial point, horizon and temperature.
#[derive(Clone)]
pub struct ObservableSpec {
    f: ScalarFn,
    grad_f: VectorFn,
    hess_f: MatrixFn,
    x0: DVector<f64>,
    horizon_t: f64,
    epsilon: f64,
}

impl ObservableSpec {
    pub fn new(
        f: ScalarFn,
        grad_f: VectorFn,
        hess_f: MatrixFn,
        x0: DVector<f64>,
        horizon_t: f64,
        epsilon: f64,
        probes: &[DVector<f64>],
    ) -> Result<Self, ModelError> {
        if !(horizon_t > 0.0) {
            return Err(ModelError::InvalidParameter(format!(
                "horizon must be positive, got {horizon_t}"
            )));
        }
        if !(epsilon > 0.0) {
            return Err(ModelError::InvalidParameter(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if probes.is_empty() {
            return Err(ModelError::EmptyProbes);
        }
        let obs = ObservableSpec {
            f,
            grad_f,
            hess_f,
            x0,
            horizon_t,
            epsilon,
        };
        obs.validate_derivatives(probes)?;
        Ok(obs)
    }

    fn validate_derivatives(&self, probes: &[DVector<f64>]) -> Result<(), ModelError> {
        let dim = self.x0.len();
        for (p, x) in probes.iter().enumerate() {
            if !(self.f)(x).is_finite() {
                return Err(ModelError::NonFiniteObservable(p));
            }
            let grad = (self.grad_f)(x);
            let hess = (self.hess_f)(x);
            for j in 0..dim {
                let h = fd_step(x[j]);
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let fd = ((self.f)(&xp) - (self.f)(&xm)) / (2.0 * h);
                if !close(grad[j], fd) {
                    return Err(ModelError::DerivativeMismatch {
                        what: "grad_f",
                        probe: p,
                        analytic: grad[j],
                        numeric: fd,
                    });
                }
                let fd_col = ((self.grad_f)(&xp) - (self.grad_f)(&xm)) / (2.0 * h);
                for i in 0..dim {
                    if !close(hess[(i, j)], fd_col[i]) {
                        return Err(ModelError::DerivativeMismatch {
                            what: "hess_f",
                            probe: p,
                            analytic: hess[(i, j)],
                            numeric: fd_col[i],
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Same observable at a different temperature; derivative checks are
    /// not repeated (the functions are unchanged).
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self, ModelError> {
        if !(epsilon > 0.0) {
            return Err(ModelError::InvalidParameter(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        let mut obs = self.clone();
        obs.epsilon = epsilon;
        Ok(obs)
    }

    pub fn f(&self, x: &DVector<f64>) -> f64 {
        (self.f)(x)
    }

    pub fn grad_f(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.grad_f)(x)
    }

    pub fn hess_f(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.hess_f)(x)
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.x0
    }

    pub fn horizon(&self) -> f64 {
        self.horizon_t
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

/// Probe points for 1D models: 20 uniformly spaced points on `[lo, hi]`.
fn probes_1d(lo: f64, hi: f64) -> Vec<DVector<f64>> {
    let n = 20;
    (0..n)
        .map(|i| DVector::from_element(1, lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

/// 1D Ornstein-Uhlenbeck drift with a quartic terminal weight:
/// `b(x) = -x`, `f(x) = -(x-2)^4 / 4`, `x0 = -1`, `T = 5`, `sigma = 1`.
///
/// The weight favors trajectories ending near 2, a smoothed version of the
/// exit probability `P(X_T > 1)`; with `b` linear and `f` concave the
/// order-1 and order-2 controls both come with efficiency guarantees.
pub fn make_ou_quartic(epsilon: f64) -> Result<(DiffusionModel, ObservableSpec), ModelError> {
    let probes = probes_1d(-3.0, 5.0);
    let model = DiffusionModel::new(
        1,
        1,
        Arc::new(|x: &DVector<f64>| -x.clone()),
        Arc::new(|_x: &DVector<f64>| DMatrix::from_element(1, 1, -1.0)),
        Arc::new(|_x: &DVector<f64>, _theta: &DVector<f64>| DMatrix::zeros(1, 1)),
        DMatrix::from_element(1, 1, 1.0),
        &probes,
    )?;
    let obs = ObservableSpec::new(
        Arc::new(|x: &DVector<f64>| -(x[0] - 2.0).powi(4) / 4.0),
        Arc::new(|x: &DVector<f64>| DVector::from_element(1, -(x[0] - 2.0).powi(3))),
        Arc::new(|x: &DVector<f64>| DMatrix::from_element(1, 1, -3.0 * (x[0] - 2.0).powi(2))),
        DVector::from_element(1, -1.0),
        5.0,
        epsilon,
        &probes,
    )?;
    Ok((model, obs))
}

/// 1D linear-quadratic problem: `b(x) = -a x`, `f(x) = -q (x-c)^2 / 2` with
/// `c = 2`, `x0 = -1`, `T = 5`, `sigma = 1`.
///
/// With linear drift and quadratic `f` the quadratic control ansatz closes
/// exactly, so this case has an analytic solution (see
/// [`crate::oracle::lq_solution`]) and serves as the zero-variance
/// reference throughout the test suite.
pub fn make_lq_case(
    a: f64,
    q: f64,
    epsilon: f64,
) -> Result<(DiffusionModel, ObservableSpec), ModelError> {
    if q < 0.0 {
        return Err(ModelError::InvalidParameter(format!(
            "q must be nonnegative, got {q}"
        )));
    }
    let c = 2.0;
    let probes = probes_1d(-3.0, 5.0);
    let model = DiffusionModel::new(
        1,
        1,
        Arc::new(move |x: &DVector<f64>| -a * x),
        Arc::new(move |_x: &DVector<f64>| DMatrix::from_element(1, 1, -a)),
        Arc::new(|_x: &DVector<f64>, _theta: &DVector<f64>| DMatrix::zeros(1, 1)),
        DMatrix::from_element(1, 1, 1.0),
        &probes,
    )?;
    let obs = ObservableSpec::new(
        Arc::new(move |x: &DVector<f64>| -q * (x[0] - c).powi(2) / 2.0),
        Arc::new(move |x: &DVector<f64>| DVector::from_element(1, -q * (x[0] - c))),
        Arc::new(move |_x: &DVector<f64>| DMatrix::from_element(1, 1, -q)),
        DVector::from_element(1, -1.0),
        5.0,
        epsilon,
        &probes,
    )?;
    Ok((model, obs))
}

/// Axis-aligned box used to generate probe lattices for the condition
/// checker.
#[derive(Clone, Debug)]
pub struct ProbeBox {
    lo: DVector<f64>,
    hi: DVector<f64>,
}

impl ProbeBox {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self, ModelError> {
        if lo.len() != hi.len() || lo.len() == 0 {
            return Err(ModelError::InvalidParameter(
                "probe box bounds must have equal positive length".into(),
            ));
        }
        for i in 0..lo.len() {
            if !(lo[i] < hi[i]) {
                return Err(ModelError::InvalidParameter(format!(
                    "probe box must satisfy lo < hi in every coordinate (coord {i})"
                )));
            }
        }
        Ok(ProbeBox { lo, hi })
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self, ModelError> {
        Self::new(DVector::from_element(1, lo), DVector::from_element(1, hi))
    }

    /// Uniform lattice with roughly `n_probes` points; box corners are
    /// always on the lattice.
    pub fn lattice(&self, n_probes: usize) -> Vec<DVector<f64>> {
        let d = self.lo.len();
        if n_probes == 0 {
            return Vec::new();
        }
        let per_dim = if d == 1 {
            n_probes.max(2)
        } else {
            ((n_probes as f64).powf(1.0 / d as f64).ceil() as usize).max(2)
        };
        let mut points = Vec::with_capacity(per_dim.pow(d as u32));
        let mut idx = vec![0usize; d];
        loop {
            let mut x = DVector::zeros(d);
            for k in 0..d {
                x[k] = self.lo[k]
                    + (self.hi[k] - self.lo[k]) * idx[k] as f64 / (per_dim - 1) as f64;
            }
            points.push(x);
            // Odometer increment over the lattice indices.
            let mut k = 0;
            loop {
                idx[k] += 1;
                if idx[k] < per_dim {
                    break;
                }
                idx[k] = 0;
                k += 1;
                if k == d {
                    return points;
                }
            }
        }
    }
}

/// Numerical estimates for the sufficient variance-reduction conditions of
/// the order-1 control, probed over a user-chosen box.
///
/// These are diagnostics, never hard gates: the underlying conditions are
/// sufficient but not necessary, and suprema over all of space are not
/// computable.
#[derive(Clone, Debug)]
pub struct ConditionReport {
    /// Largest eigenvalue of `hess f` over the probes, clamped at 0.
    pub delta_f: f64,
    /// Largest eigenvalue of `theta_t . hess b` over probes and grid times,
    /// clamped at 0.
    pub delta_b: f64,
    /// Max spectral norm of `grad b` over the probes (Lipschitz estimate).
    pub lip_constant: f64,
    /// Gronwall amplification `C_T = exp(T * lip_constant)`.
    pub growth_factor: f64,
    /// Largest eigenvalue of `D`.
    pub lambda_max: f64,
    /// Threshold `1 / (lambda * T * C_T^2)`.
    pub bound: f64,
    /// `delta_f + delta_b * T < bound`.
    pub holds: bool,
}

/// Probes the concavity-type conditions under which the order-1 control is
/// guaranteed to reduce variance: `delta_f + delta_b * T < 1/(lambda T C_T^2)`.
pub fn check_theorem_conditions(
    model: &DiffusionModel,
    obs: &ObservableSpec,
    instanton: &InstantonPath,
    probe_box: &ProbeBox,
    n_probes: usize,
) -> Result<ConditionReport, ModelError> {
    let probes = probe_box.lattice(n_probes);
    if probes.is_empty() {
        return Err(ModelError::EmptyProbes);
    }
    let mut delta_f = f64::NEG_INFINITY;
    let mut delta_b = f64::NEG_INFINITY;
    let mut lip = 0.0f64;
    for x in &probes {
        delta_f = delta_f.max(sym_max_eigenvalue(&obs.hess_f(x)));
        lip = lip.max(spectral_norm(&model.drift_jacobian(x)));
        for theta in instanton.theta() {
            delta_b = delta_b.max(sym_max_eigenvalue(&model.drift_hessian_contract(x, theta)));
        }
    }
    let delta_f = delta_f.max(0.0);
    let delta_b = delta_b.max(0.0);
    let t = obs.horizon();
    let growth_factor = (t * lip).exp();
    let bound = 1.0 / (model.lambda_max() * t * growth_factor * growth_factor);
    Ok(ConditionReport {
        delta_f,
        delta_b,
        lip_constant: lip,
        growth_factor,
        lambda_max: model.lambda_max(),
        bound,
        holds: delta_f + delta_b * t < bound,
    })
}
