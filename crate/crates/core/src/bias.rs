//! Importance-sampling controls `g(t, x)`.
//!
//! The tilted dynamics adds the drift `D grad g` (see [`crate::mc`]); the
//! controls built here expand the optimal one around the instanton:
//!
//! ```text
//!     order 1:  g(t,x) = f(phi_T) - 1/2 int_t^T theta.D theta ds
//!                        + theta_t . (x - phi_t)
//!     order 2:  ... + (eps/2) int_t^T D:K ds
//!                   + 1/2 (x - phi_t) . K_t (x - phi_t)
//! ```
//!
//! The constant and time-only terms do not influence the tilt (only
//! `grad g` enters the dynamics) but they make `g(0, x0)` a deterministic
//! free-energy predictor and are needed by the residual diagnostic, so we
//! keep them. Time integrals are tabulated per grid node with the
//! trapezoid rule and interpolated linearly, O(1) per evaluation inside
//! the sampling loop.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::{DiffusionModel, ObservableSpec, TimeGrid};
use crate::odesolve::{InstantonPath, RiccatiPath};

#[derive(Debug, Error)]
pub enum BiasError {
    #[error("t = {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("instanton path must be converged to build a control")]
    InstantonNotConverged,
    #[error("instanton and Riccati paths live on different grids")]
    GridMismatch,
}

/// Control family tag; matches the CLI names `none | order1 | order2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ControlKind {
    Zero,
    Order1,
    Order2,
    Custom,
}

impl ControlKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ControlKind::Zero => "none",
            ControlKind::Order1 => "order1",
            ControlKind::Order2 => "order2",
            ControlKind::Custom => "custom",
        }
    }
}

impl std::fmt::Display for ControlKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Instanton-anchored data shared by the order-1 and order-2 controls.
#[derive(Clone)]
struct PathTables {
    grid: TimeGrid,
    phi: Vec<DVector<f64>>,
    theta: Vec<DVector<f64>>,
    f_phi_t: f64,
    /// `1/2 int_{t_i}^T theta . D theta ds`, trapezoid per node.
    cum_half_theta_d_theta: Vec<f64>,
}

impl PathTables {
    fn build(
        model: &DiffusionModel,
        obs: &ObservableSpec,
        instanton: &InstantonPath,
    ) -> Result<Self, BiasError> {
        if !instanton.converged {
            return Err(BiasError::InstantonNotConverged);
        }
        let grid = instanton.grid().clone();
        let n = grid.n_steps();
        let theta = instanton.theta().to_vec();
        let phi = instanton.phi().to_vec();
        let integrand: Vec<f64> = theta.iter().map(|th| (model.cov() * th).dot(th)).collect();
        let mut cum = vec![0.0; n + 1];
        for i in (0..n).rev() {
            cum[i] = cum[i + 1] + 0.25 * grid.dt() * (integrand[i] + integrand[i + 1]);
        }
        Ok(PathTables {
            f_phi_t: obs.f(&phi[n]),
            grid,
            phi,
            theta,
            cum_half_theta_d_theta: cum,
        })
    }

    /// Nearest node for path quantities plus the interpolation weight for
    /// the tabulated integrals.
    fn locate(&self, t: f64) -> Result<(usize, usize, f64, usize), BiasError> {
        let horizon = self.grid.horizon();
        if !((-1e-12..=horizon * (1.0 + 1e-12)).contains(&t)) {
            return Err(BiasError::TimeOutOfRange { t, horizon });
        }
        let pos = (t / self.grid.dt()).clamp(0.0, self.grid.n_steps() as f64);
        let i0 = (pos.floor() as usize).min(self.grid.n_steps() - 1);
        let w = (pos - i0 as f64).clamp(0.0, 1.0);
        let node = if w < 0.5 { i0 } else { i0 + 1 };
        Ok((i0, i0 + 1, w, node))
    }
}

/// User-supplied control; the caller is responsible for integrability of
/// the resulting weights (nothing here checks a Novikov-type condition).
#[derive(Clone)]
pub struct CustomControl {
    pub value: Arc<dyn Fn(f64, &DVector<f64>) -> f64 + Send + Sync>,
    pub gradient: Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>,
    pub value_at_start: f64,
    pub dim: usize,
}

/// A biasing control: value, spatial gradient, and the deterministic
/// starting value `g(0, x0)`.
#[derive(Clone)]
pub enum BiasControl {
    Zero { dim: usize },
    Order1(Box<Order1Control>),
    Order2(Box<Order2Control>),
    Custom(CustomControl),
}

/// Per-node pieces of the HJB defect `(d_t g + H g)(t_i, x)` that do not
/// depend on the sample position: with `dx = x - phi_i` the defect is
///
/// ```text
///     s_i + v_i . dx + dx . m_i dx + b(x) . grad g + 1/2 |sigma^T grad g|^2.
/// ```
///
/// The time derivative of the tabulated integrals inside `s_i` uses
/// forward differencing, an O(dt) defect by construction; the path
/// derivatives use the instanton and Riccati right-hand sides.
#[derive(Clone)]
struct DefectTables {
    /// `d_t(time-only part) - theta . phi_dot` plus, at order 2,
    /// `(eps/2) D : K`.
    s: Vec<f64>,
    /// `theta_dot` plus, at order 2, `-K phi_dot`.
    v: Vec<DVector<f64>>,
    /// `K_dot / 2` (order 2 only).
    m: Option<Vec<DMatrix<f64>>>,
}

impl DefectTables {
    fn eval(&self, i: usize, dx: &DVector<f64>, bx: &DVector<f64>, grad: &DVector<f64>, u_sq: f64) -> f64 {
        let mut defect = self.s[i] + self.v[i].dot(dx) + bx.dot(grad) + 0.5 * u_sq;
        if let Some(m) = &self.m {
            defect += (&m[i] * dx).dot(dx);
        }
        defect
    }
}

#[derive(Clone)]
pub struct Order1Control {
    tables: PathTables,
    defect: DefectTables,
    value_at_start: f64,
}

#[derive(Clone)]
pub struct Order2Control {
    tables: PathTables,
    k: Vec<DMatrix<f64>>,
    /// `int_{t_i}^T D : K ds`, trapezoid per node (the `eps/2` factor is
    /// applied at evaluation time).
    cum_trace_dk: Vec<f64>,
    epsilon: f64,
    defect: DefectTables,
    value_at_start: f64,
}

impl BiasControl {
    pub fn zero(dim: usize) -> Self {
        BiasControl::Zero { dim }
    }

    pub fn order1(
        model: &DiffusionModel,
        obs: &ObservableSpec,
        instanton: &InstantonPath,
    ) -> Result<Self, BiasError> {
        let tables = PathTables::build(model, obs, instanton)?;
        let n = tables.grid.n_steps();
        let dt = tables.grid.dt();
        let mut s = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for i in 0..n {
            let phi = &tables.phi[i];
            let theta = &tables.theta[i];
            let phi_dot = model.drift(phi) + model.cov() * theta;
            let time_deriv =
                -(tables.cum_half_theta_d_theta[i + 1] - tables.cum_half_theta_d_theta[i]) / dt;
            s.push(time_deriv - theta.dot(&phi_dot));
            v.push(-(model.drift_jacobian(phi).transpose() * theta));
        }
        let value_at_start = tables.f_phi_t - tables.cum_half_theta_d_theta[0];
        Ok(BiasControl::Order1(Box::new(Order1Control {
            tables,
            defect: DefectTables { s, v, m: None },
            value_at_start,
        })))
    }

    pub fn order2(
        model: &DiffusionModel,
        obs: &ObservableSpec,
        instanton: &InstantonPath,
        riccati: &RiccatiPath,
    ) -> Result<Self, BiasError> {
        if !instanton.grid().compatible(riccati.grid()) {
            return Err(BiasError::GridMismatch);
        }
        let tables = PathTables::build(model, obs, instanton)?;
        let n = tables.grid.n_steps();
        let dt = tables.grid.dt();
        let k = riccati.k().to_vec();
        let trace: Vec<f64> = k
            .iter()
            .map(|ki| (model.cov().transpose() * ki).trace())
            .collect();
        let mut cum = vec![0.0; n + 1];
        for i in (0..n).rev() {
            cum[i] = cum[i + 1] + 0.5 * tables.grid.dt() * (trace[i] + trace[i + 1]);
        }
        let epsilon = obs.epsilon();

        let mut s = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        let mut m = Vec::with_capacity(n);
        for i in 0..n {
            let phi = &tables.phi[i];
            let theta = &tables.theta[i];
            let ki = &k[i];
            let jac = model.drift_jacobian(phi);
            let phi_dot = model.drift(phi) + model.cov() * theta;
            let time_deriv = -(tables.cum_half_theta_d_theta[i + 1]
                - tables.cum_half_theta_d_theta[i])
                / dt
                + 0.5 * epsilon * (cum[i + 1] - cum[i]) / dt;
            s.push(time_deriv - theta.dot(&phi_dot) + 0.5 * epsilon * trace[i]);
            v.push(-(jac.transpose() * theta) - ki * &phi_dot);
            let k_dot = -(jac.transpose() * ki
                + ki.transpose() * &jac
                + model.drift_hessian_contract(phi, theta)
                + ki.transpose() * model.cov() * ki);
            m.push(k_dot * 0.5);
        }
        let value_at_start =
            tables.f_phi_t - tables.cum_half_theta_d_theta[0] + 0.5 * epsilon * cum[0];
        Ok(BiasControl::Order2(Box::new(Order2Control {
            tables,
            k,
            cum_trace_dk: cum,
            epsilon,
            defect: DefectTables { s, v, m: Some(m) },
            value_at_start,
        })))
    }

    pub fn custom(
        value: Arc<dyn Fn(f64, &DVector<f64>) -> f64 + Send + Sync>,
        gradient: Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>,
        value_at_start: f64,
        dim: usize,
    ) -> Self {
        BiasControl::Custom(CustomControl {
            value,
            gradient,
            value_at_start,
            dim,
        })
    }

    pub fn kind(&self) -> ControlKind {
        match self {
            BiasControl::Zero { .. } => ControlKind::Zero,
            BiasControl::Order1(_) => ControlKind::Order1,
            BiasControl::Order2(_) => ControlKind::Order2,
            BiasControl::Custom(_) => ControlKind::Custom,
        }
    }

    /// Approximation order `k` of the control, when one is defined.
    pub fn order(&self) -> Option<f64> {
        match self {
            BiasControl::Order1(_) => Some(1.0),
            BiasControl::Order2(_) => Some(2.0),
            _ => None,
        }
    }

    /// Temperature baked into the order-2 value term.
    pub fn epsilon(&self) -> Option<f64> {
        match self {
            BiasControl::Order2(c) => Some(c.epsilon),
            _ => None,
        }
    }

    pub fn grid(&self) -> Option<&TimeGrid> {
        match self {
            BiasControl::Order1(c) => Some(&c.tables.grid),
            BiasControl::Order2(c) => Some(&c.tables.grid),
            _ => None,
        }
    }

    /// Instanton position path, when the control carries one.
    pub fn instanton_phi(&self) -> Option<&[DVector<f64>]> {
        match self {
            BiasControl::Order1(c) => Some(&c.tables.phi),
            BiasControl::Order2(c) => Some(&c.tables.phi),
            _ => None,
        }
    }

    /// Control value `g(t, x)`. Path quantities are snapped to the nearest
    /// grid node; tabulated integrals are interpolated linearly.
    pub fn value(&self, t: f64, x: &DVector<f64>) -> Result<f64, BiasError> {
        match self {
            BiasControl::Zero { .. } => Ok(0.0),
            BiasControl::Custom(c) => Ok((c.value)(t, x)),
            BiasControl::Order1(c) => {
                let tb = &c.tables;
                let (i0, i1, w, node) = tb.locate(t)?;
                let cum = (1.0 - w) * tb.cum_half_theta_d_theta[i0]
                    + w * tb.cum_half_theta_d_theta[i1];
                let dx = x - &tb.phi[node];
                Ok(tb.f_phi_t - cum + tb.theta[node].dot(&dx))
            }
            BiasControl::Order2(c) => {
                let tb = &c.tables;
                let (i0, i1, w, node) = tb.locate(t)?;
                let cum = (1.0 - w) * tb.cum_half_theta_d_theta[i0]
                    + w * tb.cum_half_theta_d_theta[i1];
                let trace = (1.0 - w) * c.cum_trace_dk[i0] + w * c.cum_trace_dk[i1];
                let dx = x - &tb.phi[node];
                Ok(tb.f_phi_t - cum + 0.5 * c.epsilon * trace
                    + tb.theta[node].dot(&dx)
                    + 0.5 * (&c.k[node] * &dx).dot(&dx))
            }
        }
    }

    /// Spatial gradient `grad g(t, x)`.
    pub fn gradient(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>, BiasError> {
        match self {
            BiasControl::Zero { dim } => Ok(DVector::zeros(*dim)),
            BiasControl::Custom(c) => Ok((c.gradient)(t, x)),
            BiasControl::Order1(c) => {
                let (_, _, _, node) = c.tables.locate(t)?;
                Ok(c.tables.theta[node].clone())
            }
            BiasControl::Order2(c) => {
                let (_, _, _, node) = c.tables.locate(t)?;
                Ok(&c.tables.theta[node] + &c.k[node] * (x - &c.tables.phi[node]))
            }
        }
    }

    /// Deterministic free-energy predictor `g(0, x0)`.
    pub fn value_at_start(&self) -> f64 {
        match self {
            BiasControl::Zero { .. } => 0.0,
            BiasControl::Custom(c) => c.value_at_start,
            BiasControl::Order1(c) => c.value_at_start,
            BiasControl::Order2(c) => c.value_at_start,
        }
    }

    /// Allocation-free gradient at an exact grid node, for the sampling
    /// loop. `scratch` must have the state dimension.
    pub(crate) fn gradient_at_node(
        &self,
        i: usize,
        t: f64,
        x: &DVector<f64>,
        out: &mut DVector<f64>,
        scratch: &mut DVector<f64>,
    ) {
        match self {
            BiasControl::Zero { .. } => out.fill(0.0),
            BiasControl::Custom(c) => out.copy_from(&(c.gradient)(t, x)),
            BiasControl::Order1(c) => out.copy_from(&c.tables.theta[i]),
            BiasControl::Order2(c) => {
                scratch.copy_from(x);
                *scratch -= &c.tables.phi[i];
                out.copy_from(&c.tables.theta[i]);
                out.gemv(1.0, &c.k[i], scratch, 1.0);
            }
        }
    }

    /// Control value at an exact grid node of an instanton-anchored
    /// control (zero for the zero control; custom controls go through
    /// [`BiasControl::value`]).
    pub(crate) fn value_at_node(&self, i: usize, x: &DVector<f64>) -> f64 {
        match self {
            BiasControl::Zero { .. } => 0.0,
            BiasControl::Custom(_) => unreachable!("custom controls are evaluated via value()"),
            BiasControl::Order1(c) => {
                let tb = &c.tables;
                let dx = x - &tb.phi[i];
                tb.f_phi_t - tb.cum_half_theta_d_theta[i] + tb.theta[i].dot(&dx)
            }
            BiasControl::Order2(c) => {
                let tb = &c.tables;
                let dx = x - &tb.phi[i];
                tb.f_phi_t - tb.cum_half_theta_d_theta[i] + 0.5 * c.epsilon * c.cum_trace_dk[i]
                    + tb.theta[i].dot(&dx)
                    + 0.5 * (&c.k[i] * &dx).dot(&dx)
            }
        }
    }

    /// Discrete HJB defect `(d_t g + H_eps g)(t_i, x)` at an interior grid
    /// node, for the residual diagnostic. `None` for zero and custom
    /// controls. The temperature entering `H_eps` is the one the control
    /// was built for.
    pub fn hjb_defect_at_node(
        &self,
        model: &DiffusionModel,
        i: usize,
        x: &DVector<f64>,
    ) -> Option<f64> {
        let (tables, defect) = match self {
            BiasControl::Order1(c) => (&c.tables, &c.defect),
            BiasControl::Order2(c) => (&c.tables, &c.defect),
            _ => return None,
        };
        if i >= tables.grid.n_steps() {
            return None;
        }
        let dx = x - &tables.phi[i];
        let grad = match self {
            BiasControl::Order2(c) => &tables.theta[i] + &c.k[i] * &dx,
            _ => tables.theta[i].clone(),
        };
        let u_sq = (model.cov() * &grad).dot(&grad);
        Some(defect.eval(i, &dx, &model.drift(x), &grad, u_sq))
    }

    /// Defect evaluation on the sampler's own buffers: `dx = x - phi_i`,
    /// `bx = b(x)`, `grad = grad g(t_i, x)` and `u_sq = |sigma^T grad|^2`
    /// must already be consistent with node `i`.
    pub(crate) fn hjb_defect_precomputed(
        &self,
        i: usize,
        dx: &DVector<f64>,
        bx: &DVector<f64>,
        grad: &DVector<f64>,
        u_sq: f64,
    ) -> f64 {
        match self {
            BiasControl::Order1(c) => c.defect.eval(i, dx, bx, grad, u_sq),
            BiasControl::Order2(c) => c.defect.eval(i, dx, bx, grad, u_sq),
            _ => unreachable!("defect tables exist only for instanton controls"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_lq_case, make_ou_quartic};
    use crate::odesolve::{solve_instanton, solve_riccati};
    use approx::assert_relative_eq;

    fn ou_setup(eps: f64, dt: f64) -> (crate::model::DiffusionModel, ObservableSpec, InstantonPath) {
        let (model, obs) = make_ou_quartic(eps).unwrap();
        let grid = TimeGrid::new(5.0, dt).unwrap();
        let path = solve_instanton(&model, &obs, &grid, 0.5, 300, 1e-11).unwrap();
        (model, obs, path)
    }

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn zero_control_is_identically_zero() {
        let z = BiasControl::zero(1);
        assert_eq!(z.value(1.0, &v1(3.0)).unwrap(), 0.0);
        assert_eq!(z.gradient(1.0, &v1(3.0)).unwrap()[0], 0.0);
        assert_eq!(z.value_at_start(), 0.0);
        assert!(z.order().is_none());
    }

    #[test]
    fn order1_terminal_value_is_the_linearization() {
        let (model, obs, path) = ou_setup(0.25, 5e-3);
        let c = BiasControl::order1(&model, &obs, &path).unwrap();
        let n = path.grid().n_steps();
        let phi_t = path.phi()[n].clone();
        let f_phi_t = obs.f(&phi_t);
        assert_relative_eq!(c.value(5.0, &phi_t).unwrap(), f_phi_t, epsilon = 1e-12);
        let x = v1(1.3);
        let lin = f_phi_t + obs.grad_f(&phi_t).dot(&(&x - &phi_t));
        assert_relative_eq!(c.value(5.0, &x).unwrap(), lin, epsilon = 1e-12);
    }

    #[test]
    fn order1_gradient_is_position_independent() {
        let (model, obs, path) = ou_setup(0.25, 5e-3);
        let c = BiasControl::order1(&model, &obs, &path).unwrap();
        for t in [0.0, 1.234, 5.0] {
            let g1 = c.gradient(t, &v1(-3.0)).unwrap();
            let g2 = c.gradient(t, &v1(4.0)).unwrap();
            assert_eq!(g1, g2);
        }
    }

    #[test]
    fn order2_gradient_on_the_instanton_is_the_momentum() {
        let (model, obs, path) = ou_setup(0.25, 5e-3);
        let ric = solve_riccati(&model, &obs, &path).unwrap();
        let c = BiasControl::order2(&model, &obs, &path, &ric).unwrap();
        for i in [0, 317, 1000] {
            let t = path.grid().time(i);
            let g = c.gradient(t, &path.phi()[i]).unwrap();
            assert_relative_eq!(g[0], path.theta()[i][0], epsilon = 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_difference_of_value() {
        let (model, obs, path) = ou_setup(0.25, 5e-3);
        let ric = solve_riccati(&model, &obs, &path).unwrap();
        let controls = [
            BiasControl::order1(&model, &obs, &path).unwrap(),
            BiasControl::order2(&model, &obs, &path, &ric).unwrap(),
            BiasControl::custom(
                Arc::new(|t, x: &DVector<f64>| (x[0] - t).sin()),
                Arc::new(|t, x: &DVector<f64>| DVector::from_element(1, (x[0] - t).cos())),
                (-0.0f64).sin(),
                1,
            ),
        ];
        let h = 1e-6;
        for c in &controls {
            for t in [0.0, 2.0, 4.5] {
                for xv in [-1.0, 0.5, 2.5] {
                    let g = c.gradient(t, &v1(xv)).unwrap()[0];
                    let fd = (c.value(t, &v1(xv + h)).unwrap()
                        - c.value(t, &v1(xv - h)).unwrap())
                        / (2.0 * h);
                    assert_relative_eq!(g, fd, epsilon = 1e-6, max_relative = 1e-6);
                }
            }
        }
    }

    #[test]
    fn order1_start_value_matches_time_integral() {
        // g1(0, x0) = f(phi_T) - 1/2 int_0^T theta.D theta; the linear term
        // vanishes because phi_0 = x0.
        let (model, obs, path) = ou_setup(0.25, 5e-3);
        let c = BiasControl::order1(&model, &obs, &path).unwrap();
        assert_relative_eq!(
            c.value_at_start(),
            c.value(0.0, obs.x0()).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn rejects_time_outside_horizon() {
        let (model, obs, path) = ou_setup(0.25, 5e-3);
        let c = BiasControl::order1(&model, &obs, &path).unwrap();
        assert!(matches!(
            c.value(-0.5, &v1(0.0)),
            Err(BiasError::TimeOutOfRange { .. })
        ));
        assert!(matches!(
            c.value(5.5, &v1(0.0)),
            Err(BiasError::TimeOutOfRange { .. })
        ));
    }

    #[test]
    fn order1_solves_hjb_along_the_instanton_up_to_dt() {
        let (model, obs, path) = ou_setup(0.25, 5e-3);
        let c = BiasControl::order1(&model, &obs, &path).unwrap();
        let dt = path.grid().dt();
        let mut worst = 0.0f64;
        for i in 0..path.grid().n_steps() {
            let defect = c
                .hjb_defect_at_node(&model, i, &path.phi()[i])
                .unwrap();
            worst = worst.max(defect.abs());
        }
        assert!(worst <= 10.0 * dt, "defect {worst} not O(dt)");

        // Refining the grid shrinks the defect proportionally.
        let (model2, obs2, path2) = ou_setup(0.25, 2.5e-3);
        let c2 = BiasControl::order1(&model2, &obs2, &path2).unwrap();
        let mut worst2 = 0.0f64;
        for i in 0..path2.grid().n_steps() {
            let defect = c2
                .hjb_defect_at_node(&model2, i, &path2.phi()[i])
                .unwrap();
            worst2 = worst2.max(defect.abs());
        }
        assert!(
            worst / worst2 > 1.5,
            "defect should shrink with dt: {worst} vs {worst2}"
        );
    }

    #[test]
    fn order2_exact_ansatz_has_small_hjb_defect_anywhere() {
        // Linear drift and quadratic f close the quadratic ansatz exactly,
        // so the discrete defect is O(dt) along any path, not just the
        // instanton.
        let (model, obs) = make_lq_case(1.0, 1.0, 0.2).unwrap();
        let grid = TimeGrid::new(5.0, 1e-3).unwrap();
        let path = solve_instanton(&model, &obs, &grid, 0.5, 300, 1e-11).unwrap();
        let ric = solve_riccati(&model, &obs, &path).unwrap();
        let c = BiasControl::order2(&model, &obs, &path, &ric).unwrap();
        let mut worst = 0.0f64;
        for i in (0..grid.n_steps()).step_by(7) {
            for xv in [-2.0, 0.3, 1.9, 4.0] {
                let defect = c
                    .hjb_defect_at_node(&model, i, &v1(xv))
                    .unwrap();
                worst = worst.max(defect.abs());
            }
        }
        assert!(worst <= 20.0 * grid.dt(), "defect {worst} not O(dt)");
    }
}
