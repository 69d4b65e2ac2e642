//! Tilted trajectory simulation with Girsanov reweighting.
//!
//! Euler-Maruyama on the controlled dynamics
//!
//! ```text
//!     X_{i+1} = X_i + [b(X_i) + D grad g(t_i, X_i)] dt + sqrt(eps dt) sigma xi_i,
//! ```
//!
//! accumulating the log-weight in stochastic-integral form with
//! `u_i = sigma^T grad g(t_i, X_i)` and the same Gaussian draw `xi_i` that
//! moves the state (the discrete change of measure is exact only when the
//! two share the noise):
//!
//! ```text
//!     log G += -(1/sqrt(eps)) u_i . xi_i sqrt(dt) - dt/(2 eps) |u_i|^2.
//! ```
//!
//! One sample reports `log_payoff = f(X_N)/eps + log G`; everything stays
//! in log-domain and is aggregated by [`crate::stats`].
//!
//! Reproducibility contract: trajectory `i` draws from a ChaCha stream
//! derived statelessly from `(seed, stream_cell, i)`, so batches are
//! independent of worker count and scheduling, and controls compared under
//! the same seed consume common random numbers.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::bias::{BiasControl, ControlKind};
use crate::model::{DiffusionModel, ObservableSpec, TimeGrid};
use crate::stats;

/// Fraction of invalid (non-finite) trajectories above which a batch
/// aborts instead of silently dropping samples.
const MAX_INVALID_FRACTION: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum McError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("control grid does not match the simulation grid")]
    GridMismatch,
    #[error("order-2 control was built for epsilon {control} but the observable has {obs}")]
    EpsilonMismatch { control: f64, obs: f64 },
    #[error("trajectory left the finite range at step {step}")]
    NonFiniteState { step: usize },
    #[error("{invalid} of {total} trajectories were non-finite (> {MAX_INVALID_FRACTION:e} allowed)")]
    TooManyInvalid { invalid: usize, total: usize },
    #[error("samples carry no residual diagnostics")]
    NoResiduals,
    #[error("residual order k must be positive, got {0}")]
    InvalidOrder(f64),
    #[error(transparent)]
    Stats(#[from] stats::StatsError),
}

/// One tilted trajectory in log-domain.
#[derive(Clone, Debug)]
pub struct TrajectorySample {
    /// Girsanov log-weight `log G`; exactly 0 for the zero control.
    pub log_weight: f64,
    pub terminal_x: DVector<f64>,
    /// `f(X_N)/eps + log G`, the log of one realization of the estimator.
    pub log_payoff: f64,
    /// `sup_i |X_i - phi_i|` when deviation recording is on and the
    /// control carries an instanton.
    pub sup_deviation: Option<f64>,
    /// Empirical residual `Q = eps^-k [f - g](T, X_N) + eps^-k sum_i
    /// (d_t g + H g)(t_i, X_i) dt` for controls of order `k`.
    pub residual: Option<f64>,
}

/// Batch parameters; `(seed, stream_cell, trajectory index)` fully
/// determine the noise.
#[derive(Clone, Debug)]
pub struct SimConfig {
    pub n_traj: usize,
    pub grid: TimeGrid,
    pub seed: u64,
    pub record_deviation: bool,
    pub record_residual: bool,
    /// Distinguishes independent batches under the same seed (for
    /// two-run estimators); batches meant to share common random numbers
    /// use the same cell.
    pub stream_cell: u32,
}

impl SimConfig {
    pub fn new(n_traj: usize, grid: TimeGrid, seed: u64) -> Self {
        SimConfig {
            n_traj,
            grid,
            seed,
            record_deviation: false,
            record_residual: false,
            stream_cell: 0,
        }
    }
}

/// Samples that survived plus the count of discarded non-finite ones.
#[derive(Debug)]
pub struct BatchOutput {
    pub samples: Vec<TrajectorySample>,
    pub n_invalid: usize,
}

/// The reproducible stream for one trajectory.
pub fn trajectory_rng(seed: u64, stream_cell: u32, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream_cell as u64) << 32) | index);
    rng
}

/// Simulates a single tilted trajectory.
pub fn simulate_one(
    model: &DiffusionModel,
    obs: &ObservableSpec,
    control: &BiasControl,
    grid: &TimeGrid,
    rng: &mut ChaCha8Rng,
    record_deviation: bool,
    record_residual: bool,
) -> Result<TrajectorySample, McError> {
    let dim = model.dim();
    let m = model.noise_dim();
    let eps = obs.epsilon();
    let dt = grid.dt();
    let n = grid.n_steps();
    let sqrt_dt = dt.sqrt();
    let noise_scale = (eps * dt).sqrt();
    let inv_sqrt_eps = 1.0 / eps.sqrt();
    let weight_drift = dt / (2.0 * eps);
    let is_zero = matches!(control.kind(), ControlKind::Zero);
    let phi = control.instanton_phi();
    let order = control.order();

    let mut x = obs.x0().clone();
    let mut grad = DVector::zeros(dim);
    let mut scratch = DVector::zeros(dim);
    let mut dx = DVector::zeros(dim);
    let mut u = DVector::zeros(m);
    let mut xi = DVector::zeros(m);
    let mut log_weight = 0.0f64;
    let mut sup_dev = if record_deviation && phi.is_some() {
        Some(0.0f64)
    } else {
        None
    };
    let mut defect_sum = 0.0f64;
    let track_residual = record_residual && order.is_some();

    for i in 0..n {
        let t = grid.time(i);
        let mut u_sq = 0.0;
        if !is_zero {
            control.gradient_at_node(i, t, &x, &mut grad, &mut scratch);
            u.gemv(1.0, model.sigma_t(), &grad, 0.0);
            u_sq = u.norm_squared();
        }
        let bx = model.drift(&x);
        if track_residual {
            let phi = phi.expect("instanton controls carry a path");
            dx.copy_from(&x);
            dx -= &phi[i];
            defect_sum += control.hjb_defect_precomputed(i, &dx, &bx, &grad, u_sq);
        }
        for k in 0..m {
            xi[k] = rng.sample(StandardNormal);
        }
        if !is_zero {
            log_weight -= inv_sqrt_eps * sqrt_dt * u.dot(&xi) + weight_drift * u_sq;
        }
        x.axpy(dt, &bx, 1.0);
        if !is_zero {
            x.gemv(dt, model.cov(), &grad, 1.0);
        }
        x.gemv(noise_scale, model.sigma(), &xi, 1.0);
        if !x.iter().all(|c| c.is_finite()) {
            return Err(McError::NonFiniteState { step: i });
        }
        if let (Some(dev), Some(phi)) = (sup_dev.as_mut(), phi) {
            *dev = dev.max((&x - &phi[i + 1]).norm());
        }
    }

    let residual = if track_residual {
        let k = order.expect("guarded by track_residual");
        let scale = eps.powf(-k);
        let terminal = obs.f(&x) - control.value_at_node(n, &x);
        Some(scale * (terminal + defect_sum * dt))
    } else {
        None
    };
    let log_payoff = obs.f(&x) / eps + log_weight;
    Ok(TrajectorySample {
        log_weight,
        terminal_x: x,
        log_payoff,
        sup_deviation: sup_dev,
        residual,
    })
}

/// Runs `n_traj` independent trajectories; results are a deterministic
/// function of `(seed, config)` whatever the number of rayon workers.
pub fn simulate_batch(
    model: &DiffusionModel,
    obs: &ObservableSpec,
    control: &BiasControl,
    cfg: &SimConfig,
) -> Result<BatchOutput, McError> {
    if cfg.n_traj == 0 {
        return Err(McError::InvalidConfig("n_traj must be >= 1".into()));
    }
    if cfg.n_traj >= u32::MAX as usize {
        return Err(McError::InvalidConfig(format!(
            "n_traj {} exceeds the stream index space",
            cfg.n_traj
        )));
    }
    if (cfg.grid.horizon() - obs.horizon()).abs() > 1e-12 * obs.horizon() {
        return Err(McError::InvalidConfig(format!(
            "grid horizon {} does not match the observable horizon {}",
            cfg.grid.horizon(),
            obs.horizon()
        )));
    }
    if obs.x0().len() != model.dim() {
        return Err(McError::InvalidConfig(
            "x0 dimension does not match the model".into(),
        ));
    }
    if let Some(control_grid) = control.grid() {
        if !control_grid.compatible(&cfg.grid) {
            return Err(McError::GridMismatch);
        }
    }
    if let Some(control_eps) = control.epsilon() {
        if (control_eps - obs.epsilon()).abs() > 1e-12 * obs.epsilon() {
            return Err(McError::EpsilonMismatch {
                control: control_eps,
                obs: obs.epsilon(),
            });
        }
    }

    let results: Vec<Option<TrajectorySample>> = (0..cfg.n_traj)
        .into_par_iter()
        .map(|i| {
            let mut rng = trajectory_rng(cfg.seed, cfg.stream_cell, i as u64);
            simulate_one(
                model,
                obs,
                control,
                &cfg.grid,
                &mut rng,
                cfg.record_deviation,
                cfg.record_residual,
            )
            .ok()
        })
        .collect();

    let n_invalid = results.iter().filter(|r| r.is_none()).count();
    if n_invalid as f64 > MAX_INVALID_FRACTION * cfg.n_traj as f64 {
        return Err(McError::TooManyInvalid {
            invalid: n_invalid,
            total: cfg.n_traj,
        });
    }
    Ok(BatchOutput {
        samples: results.into_iter().flatten().collect(),
        n_invalid,
    })
}

/// Empirical `log E[exp(2 Q)]` over the recorded residuals. Across an
/// epsilon sweep this must stay bounded by a common constant for a
/// control of order `k`.
pub fn residual_mgf_check(samples: &[TrajectorySample], k: f64) -> Result<f64, McError> {
    if k <= 0.0 {
        return Err(McError::InvalidOrder(k));
    }
    let residuals: Option<Vec<f64>> = samples.iter().map(|s| s.residual).collect();
    let residuals = residuals.ok_or(McError::NoResiduals)?;
    if residuals.is_empty() {
        return Err(McError::NoResiduals);
    }
    let moments = stats::accumulate(residuals.iter().map(|q| 2.0 * q))?;
    Ok(moments.log_sum_w() - (residuals.len() as f64).ln())
}

/// Per-sample CSV dump: `index,log_weight,log_payoff,sup_deviation,residual`
/// (optional columns left empty when not recorded).
pub fn write_samples_csv<W: std::io::Write>(
    samples: &[TrajectorySample],
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "index,log_weight,log_payoff,sup_deviation,residual")?;
    for (i, s) in samples.iter().enumerate() {
        let dev = s.sup_deviation.map(|v| v.to_string()).unwrap_or_default();
        let res = s.residual.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{i},{},{},{dev},{res}", s.log_weight, s.log_payoff)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_lq_case, make_ou_quartic};
    use crate::odesolve::{solve_instanton, solve_riccati};

    fn pool(threads: usize) -> rayon::ThreadPool {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
    }

    #[test]
    fn zero_control_has_exactly_zero_weight() {
        let (model, obs) = make_ou_quartic(0.5).unwrap();
        let grid = TimeGrid::new(5.0, 1e-2).unwrap();
        let cfg = SimConfig::new(200, grid, 7);
        let out = simulate_batch(&model, &obs, &BiasControl::zero(1), &cfg).unwrap();
        assert_eq!(out.samples.len(), 200);
        assert_eq!(out.n_invalid, 0);
        for s in &out.samples {
            assert_eq!(s.log_weight, 0.0);
            assert!(s.log_payoff.is_finite());
        }
    }

    #[test]
    fn batches_are_identical_across_worker_counts() {
        let (model, obs) = make_ou_quartic(0.25).unwrap();
        let grid = TimeGrid::new(5.0, 1e-2).unwrap();
        let path = solve_instanton(&model, &obs, &grid, 0.5, 200, 1e-10).unwrap();
        let control = BiasControl::order1(&model, &obs, &path).unwrap();
        let cfg = SimConfig::new(500, grid, 42);
        let a = pool(1).install(|| simulate_batch(&model, &obs, &control, &cfg).unwrap());
        let b = pool(4).install(|| simulate_batch(&model, &obs, &control, &cfg).unwrap());
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.log_payoff, sb.log_payoff);
            assert_eq!(sa.log_weight, sb.log_weight);
        }
    }

    #[test]
    fn rejects_empty_batches_and_mismatched_grids() {
        let (model, obs) = make_ou_quartic(0.25).unwrap();
        let grid = TimeGrid::new(5.0, 1e-2).unwrap();
        let cfg = SimConfig::new(0, grid.clone(), 1);
        assert!(matches!(
            simulate_batch(&model, &obs, &BiasControl::zero(1), &cfg),
            Err(McError::InvalidConfig(_))
        ));

        let path = solve_instanton(&model, &obs, &grid, 0.5, 200, 1e-10).unwrap();
        let control = BiasControl::order1(&model, &obs, &path).unwrap();
        let other = TimeGrid::new(5.0, 5e-3).unwrap();
        let cfg = SimConfig::new(10, other, 1);
        assert!(matches!(
            simulate_batch(&model, &obs, &control, &cfg),
            Err(McError::GridMismatch)
        ));
    }

    #[test]
    fn order2_control_bound_to_other_epsilon_is_rejected() {
        let (model, obs) = make_lq_case(1.0, 1.0, 0.2).unwrap();
        let grid = TimeGrid::new(5.0, 1e-2).unwrap();
        let path = solve_instanton(&model, &obs, &grid, 0.5, 200, 1e-10).unwrap();
        let ric = solve_riccati(&model, &obs, &path).unwrap();
        let control = BiasControl::order2(&model, &obs, &path, &ric).unwrap();
        let obs_other = obs.with_epsilon(0.1).unwrap();
        let cfg = SimConfig::new(10, grid, 1);
        assert!(matches!(
            simulate_batch(&model, &obs_other, &control, &cfg),
            Err(McError::EpsilonMismatch { .. })
        ));
    }

    #[test]
    fn sup_deviation_requires_an_instanton_control() {
        let (model, obs) = make_ou_quartic(0.25).unwrap();
        let grid = TimeGrid::new(5.0, 1e-2).unwrap();
        let mut cfg = SimConfig::new(5, grid.clone(), 3);
        cfg.record_deviation = true;
        let out = simulate_batch(&model, &obs, &BiasControl::zero(1), &cfg).unwrap();
        assert!(out.samples[0].sup_deviation.is_none());

        let path = solve_instanton(&model, &obs, &grid, 0.5, 200, 1e-10).unwrap();
        let control = BiasControl::order1(&model, &obs, &path).unwrap();
        let out = simulate_batch(&model, &obs, &control, &cfg).unwrap();
        assert!(out.samples[0].sup_deviation.unwrap() > 0.0);
    }

    #[test]
    fn residual_mgf_guards() {
        let (model, obs) = make_ou_quartic(0.25).unwrap();
        let grid = TimeGrid::new(5.0, 1e-2).unwrap();
        let cfg = SimConfig::new(5, grid, 3);
        let out = simulate_batch(&model, &obs, &BiasControl::zero(1), &cfg).unwrap();
        assert!(matches!(
            residual_mgf_check(&out.samples, 0.0),
            Err(McError::InvalidOrder(_))
        ));
        assert!(matches!(
            residual_mgf_check(&out.samples, 1.0),
            Err(McError::NoResiduals)
        ));
    }

    #[test]
    fn explosive_dynamics_abort_the_batch() {
        use nalgebra::{DMatrix, DVector};
        use std::sync::Arc;
        let probes: Vec<DVector<f64>> = (0..4)
            .map(|i| DVector::from_element(1, 1.0 + i as f64))
            .collect();
        let model = crate::model::DiffusionModel::new(
            1,
            1,
            Arc::new(|x: &DVector<f64>| DVector::from_element(1, x[0] * x[0] * x[0])),
            Arc::new(|x: &DVector<f64>| DMatrix::from_element(1, 1, 3.0 * x[0] * x[0])),
            Arc::new(|x: &DVector<f64>, th: &DVector<f64>| {
                DMatrix::from_element(1, 1, 6.0 * x[0] * th[0])
            }),
            DMatrix::from_element(1, 1, 1.0),
            &probes,
        )
        .unwrap();
        let obs = crate::model::ObservableSpec::new(
            Arc::new(|x: &DVector<f64>| x[0]),
            Arc::new(|_x: &DVector<f64>| DVector::from_element(1, 1.0)),
            Arc::new(|_x: &DVector<f64>| DMatrix::zeros(1, 1)),
            DVector::from_element(1, 4.0),
            5.0,
            1.0,
            &probes,
        )
        .unwrap();
        let grid = TimeGrid::new(5.0, 1e-2).unwrap();
        let cfg = SimConfig::new(50, grid, 11);
        assert!(matches!(
            simulate_batch(&model, &obs, &BiasControl::zero(1), &cfg),
            Err(McError::TooManyInvalid { .. })
        ));
    }
}
