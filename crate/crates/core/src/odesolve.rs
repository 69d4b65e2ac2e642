//! Instanton and Riccati solvers on a shared uniform grid.
//!
//! The instanton is the zero-noise most likely fluctuation path, the
//! solution of the forward-backward system
//!
//! ```text
//!     phi'   = b(phi) + D theta,          phi_0   = x0,
//!     theta' = -grad b(phi)^T theta,      theta_T = grad f(phi_T),
//! ```
//!
//! solved here by relaxed fixed-point iteration: integrate `phi` forward
//! with the current momentum, integrate `theta` backward along the frozen
//! position path, damp the momentum update, repeat. Sweeps use explicit
//! RK4 with the off-sweep variable interpolated linearly between grid
//! nodes, so the coupling error is O(dt^2).
//!
//! The curvature of the order-2 control solves the Riccati terminal-value
//! problem
//!
//! ```text
//!     K' + grad b^T K + K^T grad b + theta . hess b + K^T D K = 0,
//!     K_T = hess f(phi_T),
//! ```
//!
//! integrated backward with explicit Euler and symmetrized each step.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::{DiffusionModel, ObservableSpec, TimeGrid};

#[derive(Debug, Error)]
pub enum OdeError {
    #[error("instanton iteration diverged (non-finite state) at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("Riccati integration blew up at t = {time:.6}")]
    RiccatiBlowUp { time: f64 },
    #[error("instanton path not converged; solve with a smaller relax or more iterations")]
    InstantonNotConverged,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Discretized instanton `(phi_t, theta_t)` with convergence metadata.
#[derive(Clone, Debug)]
pub struct InstantonPath {
    grid: TimeGrid,
    phi: Vec<DVector<f64>>,
    theta: Vec<DVector<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub final_residual: f64,
}

impl InstantonPath {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn phi(&self) -> &[DVector<f64>] {
        &self.phi
    }

    pub fn theta(&self) -> &[DVector<f64>] {
        &self.theta
    }

    /// Max-norm defect of both discrete ODEs measured by midpoint finite
    /// differences; O(dt^2) for a converged path, so refining the grid must
    /// shrink it.
    pub fn ode_residuals(&self, model: &DiffusionModel) -> (f64, f64) {
        let dt = self.grid.dt();
        let mut phi_res = 0.0f64;
        let mut theta_res = 0.0f64;
        for i in 0..self.grid.n_steps() {
            let phi_mid = (&self.phi[i] + &self.phi[i + 1]) * 0.5;
            let theta_mid = (&self.theta[i] + &self.theta[i + 1]) * 0.5;
            let dphi = (&self.phi[i + 1] - &self.phi[i]) / dt;
            let rhs_phi = model.drift(&phi_mid) + model.cov() * &theta_mid;
            phi_res = phi_res.max((dphi - rhs_phi).amax());
            let dtheta = (&self.theta[i + 1] - &self.theta[i]) / dt;
            let rhs_theta = -(model.drift_jacobian(&phi_mid).transpose() * &theta_mid);
            theta_res = theta_res.max((dtheta - rhs_theta).amax());
        }
        (phi_res, theta_res)
    }
}

/// Riccati curvature `K_t` along the instanton.
#[derive(Clone, Debug)]
pub struct RiccatiPath {
    grid: TimeGrid,
    k: Vec<DMatrix<f64>>,
}

impl RiccatiPath {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn k(&self) -> &[DMatrix<f64>] {
        &self.k
    }

    /// Midpoint finite-difference defect of the Riccati equation; O(dt)
    /// for the explicit Euler solution.
    pub fn ode_defect(&self, model: &DiffusionModel, instanton: &InstantonPath) -> f64 {
        let dt = self.grid.dt();
        let mut defect = 0.0f64;
        for i in 0..self.grid.n_steps() {
            let k_mid = (&self.k[i] + &self.k[i + 1]) * 0.5;
            let phi_mid = (&instanton.phi()[i] + &instanton.phi()[i + 1]) * 0.5;
            let theta_mid = (&instanton.theta()[i] + &instanton.theta()[i + 1]) * 0.5;
            let dk = (&self.k[i + 1] - &self.k[i]) / dt;
            let rhs = -riccati_rhs_negative(model, &phi_mid, &theta_mid, &k_mid);
            defect = defect.max((dk - rhs).amax());
        }
        defect
    }
}

/// `grad b^T K + K^T grad b + theta . hess b + K^T D K`, i.e. `-K'`.
fn riccati_rhs_negative(
    model: &DiffusionModel,
    phi: &DVector<f64>,
    theta: &DVector<f64>,
    k: &DMatrix<f64>,
) -> DMatrix<f64> {
    let jac = model.drift_jacobian(phi);
    jac.transpose() * k + k.transpose() * jac
        + model.drift_hessian_contract(phi, theta)
        + k.transpose() * model.cov() * k
}

fn all_finite(v: &[DVector<f64>]) -> bool {
    v.iter().all(|x| x.iter().all(|c| c.is_finite()))
}

/// Solves the instanton forward-backward system by damped fixed-point
/// iteration starting from `theta = 0`.
///
/// Returns a non-converged path (flagged) when `max_iter` is exhausted;
/// a non-finite sweep is an error because no usable path exists.
pub fn solve_instanton(
    model: &DiffusionModel,
    obs: &ObservableSpec,
    grid: &TimeGrid,
    relax: f64,
    max_iter: usize,
    tol: f64,
) -> Result<InstantonPath, OdeError> {
    if !(relax > 0.0 && relax <= 1.0) {
        return Err(OdeError::InvalidParameter(format!(
            "relax must lie in (0, 1], got {relax}"
        )));
    }
    if max_iter == 0 {
        return Err(OdeError::InvalidParameter("max_iter must be >= 1".into()));
    }
    if !(tol > 0.0) {
        return Err(OdeError::InvalidParameter(format!(
            "tol must be positive, got {tol}"
        )));
    }
    let n = grid.n_steps();
    let dim = model.dim();
    let mut theta: Vec<DVector<f64>> = vec![DVector::zeros(dim); n + 1];
    let mut phi = vec![DVector::zeros(dim); n + 1];
    let mut theta_new = theta.clone();

    for iter in 0..max_iter {
        forward_sweep(model, obs, grid, &theta, &mut phi);
        if !all_finite(&phi) {
            return Err(OdeError::Diverged { iteration: iter });
        }
        backward_sweep(model, obs, grid, &phi, &mut theta_new);
        if !all_finite(&theta_new) {
            return Err(OdeError::Diverged { iteration: iter });
        }
        let delta = theta
            .iter()
            .zip(&theta_new)
            .map(|(a, b)| (b - a).amax())
            .fold(0.0f64, f64::max);
        if delta < tol {
            // Return the undamped pair from the last sweeps: the terminal
            // condition theta_T = grad f(phi_T) then holds exactly.
            return Ok(InstantonPath {
                grid: grid.clone(),
                phi,
                theta: theta_new,
                converged: true,
                iterations: iter + 1,
                final_residual: delta,
            });
        }
        for i in 0..=n {
            theta[i] = &theta[i] * (1.0 - relax) + &theta_new[i] * relax;
        }
        if iter + 1 == max_iter {
            return Ok(InstantonPath {
                grid: grid.clone(),
                phi,
                theta: theta_new,
                converged: false,
                iterations: max_iter,
                final_residual: delta,
            });
        }
    }
    unreachable!("loop always returns");
}

/// RK4 on `phi' = b(phi) + D theta(t)` with `theta` linear between nodes.
fn forward_sweep(
    model: &DiffusionModel,
    obs: &ObservableSpec,
    grid: &TimeGrid,
    theta: &[DVector<f64>],
    phi: &mut [DVector<f64>],
) {
    let dt = grid.dt();
    let cov = model.cov();
    phi[0] = obs.x0().clone();
    for i in 0..grid.n_steps() {
        let theta_mid = (&theta[i] + &theta[i + 1]) * 0.5;
        let f = |x: &DVector<f64>, th: &DVector<f64>| model.drift(x) + cov * th;
        let k1 = f(&phi[i], &theta[i]);
        let k2 = f(&(&phi[i] + &k1 * (dt / 2.0)), &theta_mid);
        let k3 = f(&(&phi[i] + &k2 * (dt / 2.0)), &theta_mid);
        let k4 = f(&(&phi[i] + &k3 * dt), &theta[i + 1]);
        phi[i + 1] = &phi[i] + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    }
}

/// RK4 backward on `theta' = -grad b(phi(t))^T theta` from
/// `theta_T = grad f(phi_T)`, with `phi` linear between nodes.
fn backward_sweep(
    model: &DiffusionModel,
    obs: &ObservableSpec,
    grid: &TimeGrid,
    phi: &[DVector<f64>],
    theta: &mut [DVector<f64>],
) {
    let dt = grid.dt();
    let n = grid.n_steps();
    theta[n] = obs.grad_f(&phi[n]);
    for i in (0..n).rev() {
        let phi_mid = (&phi[i] + &phi[i + 1]) * 0.5;
        let g = |x: &DVector<f64>, th: &DVector<f64>| -(model.drift_jacobian(x).transpose() * th);
        let k1 = g(&phi[i + 1], &theta[i + 1]);
        let k2 = g(&phi_mid, &(&theta[i + 1] - &k1 * (dt / 2.0)));
        let k3 = g(&phi_mid, &(&theta[i + 1] - &k2 * (dt / 2.0)));
        let k4 = g(&phi[i], &(&theta[i + 1] - &k3 * dt));
        theta[i] = &theta[i + 1] - (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    }
}

/// Integrates the Riccati terminal-value problem backward from
/// `K_T = hess f(phi_T)` with explicit Euler, symmetrizing each step.
pub fn solve_riccati(
    model: &DiffusionModel,
    obs: &ObservableSpec,
    instanton: &InstantonPath,
) -> Result<RiccatiPath, OdeError> {
    if !instanton.converged {
        return Err(OdeError::InstantonNotConverged);
    }
    let grid = instanton.grid().clone();
    let n = grid.n_steps();
    let dt = grid.dt();
    let mut k = vec![DMatrix::zeros(model.dim(), model.dim()); n + 1];
    k[n] = obs.hess_f(&instanton.phi()[n]);
    for i in (0..n).rev() {
        let step = riccati_rhs_negative(model, &instanton.phi()[i + 1], &instanton.theta()[i + 1], &k[i + 1]);
        let mut next = &k[i + 1] + step * dt;
        next = (&next + next.transpose()) * 0.5;
        if next.iter().any(|c| !c.is_finite()) {
            return Err(OdeError::RiccatiBlowUp { time: grid.time(i) });
        }
        k[i] = next;
    }
    Ok(RiccatiPath { grid, k })
}

/// Writes `t, phi components, theta components[, K entries]` as CSV.
pub fn write_paths_csv<W: Write>(
    instanton: &InstantonPath,
    riccati: Option<&RiccatiPath>,
    mut out: W,
) -> Result<(), OdeError> {
    let d = instanton.phi()[0].len();
    let mut header = String::from("t");
    for i in 0..d {
        header.push_str(&format!(",phi{i}"));
    }
    for i in 0..d {
        header.push_str(&format!(",theta{i}"));
    }
    if riccati.is_some() {
        for i in 0..d {
            for j in 0..d {
                header.push_str(&format!(",k{i}{j}"));
            }
        }
    }
    writeln!(out, "{header}")?;
    for n in 0..=instanton.grid().n_steps() {
        let mut row = format!("{}", instanton.grid().time(n));
        for i in 0..d {
            row.push_str(&format!(",{}", instanton.phi()[n][i]));
        }
        for i in 0..d {
            row.push_str(&format!(",{}", instanton.theta()[n][i]));
        }
        if let Some(r) = riccati {
            for i in 0..d {
                for j in 0..d {
                    row.push_str(&format!(",{}", r.k()[n][(i, j)]));
                }
            }
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_lq_case, make_ou_quartic};
    use nalgebra::{DMatrix, DVector};
    use std::sync::Arc;

    fn grid(dt: f64) -> TimeGrid {
        TimeGrid::new(5.0, dt).unwrap()
    }

    #[test]
    fn zero_observable_gives_zero_momentum_and_free_relaxation() {
        // f = 0 kills the momentum, so phi solves phi' = b(phi); for the OU
        // drift from x0 = -1 that is -exp(-t).
        let (model, obs) = make_lq_case(1.0, 0.0, 0.5).unwrap();
        let g = grid(1e-3);
        let path = solve_instanton(&model, &obs, &g, 0.5, 100, 1e-12).unwrap();
        assert!(path.converged);
        assert_eq!(path.iterations, 1);
        for i in 0..=g.n_steps() {
            assert_eq!(path.theta()[i][0], 0.0);
            let exact = -(-g.time(i)).exp();
            assert!((path.phi()[i][0] - exact).abs() < 1e-10);
        }
    }

    #[test]
    fn ou_quartic_converges_between_start_and_target() {
        let (model, obs) = make_ou_quartic(0.25).unwrap();
        let g = grid(5e-3);
        let path = solve_instanton(&model, &obs, &g, 0.5, 200, 1e-10).unwrap();
        assert!(path.converged, "residual {}", path.final_residual);
        assert!(path.iterations < 200);
        let phi_t = path.phi()[g.n_steps()][0];
        assert!(phi_t > -1.0 && phi_t < 2.0, "phi_T = {phi_t}");
        // Terminal condition holds exactly by construction.
        let gap = (&path.theta()[g.n_steps()] - obs.grad_f(&path.phi()[g.n_steps()])).amax();
        assert_eq!(gap, 0.0);
        assert_eq!(path.phi()[0][0], -1.0);
    }

    #[test]
    fn residuals_shrink_with_the_grid() {
        let (model, obs) = make_ou_quartic(0.25).unwrap();
        let coarse = solve_instanton(&model, &obs, &grid(1e-2), 0.5, 300, 1e-11).unwrap();
        let fine = solve_instanton(&model, &obs, &grid(5e-3), 0.5, 300, 1e-11).unwrap();
        let (pc, tc) = coarse.ode_residuals(&model);
        let (pf, tf) = fine.ode_residuals(&model);
        assert!(pc / pf >= 3.0, "phi residual ratio {}", pc / pf);
        assert!(tc / tf >= 3.0, "theta residual ratio {}", tc / tf);

        let rc = solve_riccati(&model, &obs, &coarse).unwrap();
        let rf = solve_riccati(&model, &obs, &fine).unwrap();
        let dc = rc.ode_defect(&model, &coarse);
        let df = rf.ode_defect(&model, &fine);
        let ratio = dc / df;
        assert!(
            (1.5..=3.0).contains(&ratio),
            "Riccati defect ratio {ratio} (Euler should halve)"
        );
    }

    #[test]
    fn solver_is_deterministic() {
        let (model, obs) = make_ou_quartic(0.25).unwrap();
        let g = grid(5e-3);
        let a = solve_instanton(&model, &obs, &g, 0.5, 200, 1e-10).unwrap();
        let b = solve_instanton(&model, &obs, &g, 0.5, 200, 1e-10).unwrap();
        for i in 0..=g.n_steps() {
            assert_eq!(a.phi()[i], b.phi()[i]);
            assert_eq!(a.theta()[i], b.theta()[i]);
        }
    }

    #[test]
    fn divergence_is_reported_with_iteration() {
        // Quadratic drift explodes in finite time from x0 = 3.
        let probes: Vec<DVector<f64>> = (0..5)
            .map(|i| DVector::from_element(1, 0.5 + i as f64 * 0.5))
            .collect();
        let model = DiffusionModel::new(
            1,
            1,
            Arc::new(|x: &DVector<f64>| DVector::from_element(1, x[0] * x[0])),
            Arc::new(|x: &DVector<f64>| DMatrix::from_element(1, 1, 2.0 * x[0])),
            Arc::new(|_x: &DVector<f64>, th: &DVector<f64>| DMatrix::from_element(1, 1, 2.0 * th[0])),
            DMatrix::from_element(1, 1, 1.0),
            &probes,
        )
        .unwrap();
        let obs = crate::model::ObservableSpec::new(
            Arc::new(|x: &DVector<f64>| x[0]),
            Arc::new(|_x: &DVector<f64>| DVector::from_element(1, 1.0)),
            Arc::new(|_x: &DVector<f64>| DMatrix::zeros(1, 1)),
            DVector::from_element(1, 3.0),
            5.0,
            0.5,
            &probes,
        )
        .unwrap();
        let err = solve_instanton(&model, &obs, &grid(5e-3), 0.5, 50, 1e-10);
        assert!(matches!(err, Err(OdeError::Diverged { .. })));
    }

    #[test]
    fn riccati_zero_terminal_and_linear_drift_stays_zero() {
        let (model, obs) = make_lq_case(1.0, 0.0, 0.5).unwrap();
        let path = solve_instanton(&model, &obs, &grid(1e-2), 0.5, 100, 1e-12).unwrap();
        let ric = solve_riccati(&model, &obs, &path).unwrap();
        for k in ric.k() {
            assert_eq!(k[(0, 0)], 0.0);
        }
    }

    #[test]
    fn riccati_stays_nonpositive_for_ou_quartic() {
        let (model, obs) = make_ou_quartic(0.25).unwrap();
        let path = solve_instanton(&model, &obs, &grid(5e-3), 0.5, 200, 1e-10).unwrap();
        let ric = solve_riccati(&model, &obs, &path).unwrap();
        for k in ric.k() {
            assert!(k[(0, 0)] <= 0.0, "K must stay nonpositive, got {}", k[(0, 0)]);
        }
    }

    #[test]
    fn riccati_requires_converged_instanton() {
        let (model, obs) = make_ou_quartic(0.25).unwrap();
        let path = solve_instanton(&model, &obs, &grid(5e-3), 0.05, 2, 1e-14).unwrap();
        assert!(!path.converged);
        assert!(matches!(
            solve_riccati(&model, &obs, &path),
            Err(OdeError::InstantonNotConverged)
        ));
    }
}
