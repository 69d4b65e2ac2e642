//! The experiment runner: solve the instanton and Riccati paths once,
//! sweep `(epsilon, control)` cells with common random numbers, and write
//! `instanton.csv`, `efficiency.csv` and `summary.txt`. A validation mode
//! compares the deterministic predictors and the Monte Carlo estimates
//! against the PDE oracle.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use instanton_mc::bias::BiasError;
use instanton_mc::mc::McError;
use instanton_mc::model::ModelError;
use instanton_mc::odesolve::{write_paths_csv, OdeError};
use instanton_mc::oracle::OracleError;
use instanton_mc::stats::StatsError;
use instanton_mc::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ExperimentConfig, ModelName};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error("instanton did not converge after {iterations} iterations (residual {residual:.3e})")]
    InstantonNotConverged { iterations: usize, residual: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Bias(#[from] BiasError),
    #[error(transparent)]
    Mc(#[from] McError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// Process exit code: 2 for configuration problems, 3 for numerical or
    /// runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 3,
        }
    }
}

pub struct ExperimentArtifacts {
    pub output_dir: PathBuf,
    pub instanton_csv: PathBuf,
    pub efficiency_csv: PathBuf,
    pub summary_txt: PathBuf,
    pub reports: Vec<EstimatorReport>,
}

/// One row of the oracle-validation table.
#[derive(Clone, Debug)]
pub struct ValidationRow {
    pub epsilon: f64,
    pub z_oracle: f64,
    /// `|Z(box) - Z(1.5 box)|`, the boundary influence estimate.
    pub boundary_shift: f64,
    pub g1_start: f64,
    pub g2_start: f64,
    pub z_mc: Vec<(ControlKind, f64)>,
}

pub struct ValidationReport {
    pub rows: Vec<ValidationRow>,
    /// `|g1 - Z|` error ratios between consecutive epsilons (order 1
    /// consistency: ratio ~ eps ratio).
    pub g1_ratios: Vec<f64>,
    /// `|g2 - Z|` error ratios (order 2: ratio ~ squared eps ratio).
    pub g2_ratios: Vec<f64>,
    pub csv_path: PathBuf,
}

fn build_problem(cfg: &ExperimentConfig) -> Result<(DiffusionModel, ObservableSpec), RunError> {
    let eps0 = cfg.epsilons[0];
    let pair = match cfg.model {
        ModelName::OuQuartic => make_ou_quartic(eps0)?,
        ModelName::Lq => make_lq_case(cfg.lq_a, cfg.lq_q, eps0)?,
    };
    Ok(pair)
}

fn make_grid(cfg: &ExperimentConfig, obs: &ObservableSpec) -> Result<TimeGrid, RunError> {
    TimeGrid::new(obs.horizon(), cfg.dt).map_err(|e| RunError::Config(e.to_string()))
}

fn solve_paths(
    cfg: &ExperimentConfig,
    model: &DiffusionModel,
    obs: &ObservableSpec,
    grid: &TimeGrid,
) -> Result<(InstantonPath, RiccatiPath), RunError> {
    let path = solve_instanton(model, obs, grid, cfg.relax, cfg.max_iter, cfg.tol)?;
    if !path.converged {
        return Err(RunError::InstantonNotConverged {
            iterations: path.iterations,
            residual: path.final_residual,
        });
    }
    let riccati = solve_riccati(model, obs, &path)?;
    Ok((path, riccati))
}

fn build_control(
    kind: ControlKind,
    model: &DiffusionModel,
    obs: &ObservableSpec,
    path: &InstantonPath,
    riccati: &RiccatiPath,
) -> Result<BiasControl, RunError> {
    Ok(match kind {
        ControlKind::Zero => BiasControl::zero(model.dim()),
        ControlKind::Order1 => BiasControl::order1(model, obs, path)?,
        ControlKind::Order2 => BiasControl::order2(model, obs, path, riccati)?,
        ControlKind::Custom => {
            return Err(RunError::Config(
                "custom controls are not selectable from config files".into(),
            ))
        }
    })
}

fn timestamp_line<W: Write>(out: &mut W, enabled: bool) -> std::io::Result<()> {
    if enabled {
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        writeln!(out, "# generated_unix_s = {secs}")?;
    }
    Ok(())
}

fn bootstrap_seed(seed: u64, cell_idx: usize) -> u64 {
    seed.wrapping_add((cell_idx as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Percentile bootstrap for the two-run ratio: the second moment comes
/// from the tilted sample, the squared mean from an independent plain one.
fn bootstrap_two_run_ci(
    tilted: &[f64],
    plain: &[f64],
    epsilon: f64,
    n_resample: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rs = Vec::with_capacity(n_resample);
    for _ in 0..n_resample {
        let mut mt = LogMoments::new();
        for _ in 0..tilted.len() {
            mt.push(tilted[rng.random_range(0..tilted.len())]);
        }
        let mut mp = LogMoments::new();
        for _ in 0..plain.len() {
            mp.push(plain[rng.random_range(0..plain.len())]);
        }
        rs.push(epsilon * two_run_log_rho(&mt, &mp));
    }
    rs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let q = |p: f64| {
        let pos = p * (rs.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let w = pos - lo as f64;
        (1.0 - w) * rs[lo] + w * rs[hi]
    };
    (q(0.025), q(0.975))
}

fn two_run_log_rho(tilted: &LogMoments, plain: &LogMoments) -> f64 {
    let log_m2 = tilted.log_sum_2w() - (tilted.n() as f64).ln();
    let log_a = plain.log_sum_w() - (plain.n() as f64).ln();
    log_m2 - 2.0 * log_a
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentArtifacts, RunError> {
    cfg.validate().map_err(|e| RunError::Config(e.to_string()))?;
    if cfg.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| RunError::Pool(e.to_string()))?;
        pool.install(|| run_experiment_inner(cfg))
    } else {
        run_experiment_inner(cfg)
    }
}

fn run_experiment_inner(cfg: &ExperimentConfig) -> Result<ExperimentArtifacts, RunError> {
    let (model, obs0) = build_problem(cfg)?;
    let grid = make_grid(cfg, &obs0)?;
    let (path, riccati) = solve_paths(cfg, &model, &obs0, &grid)?;

    std::fs::create_dir_all(&cfg.output_dir)?;
    let instanton_csv = cfg.output_dir.join("instanton.csv");
    {
        let mut out = BufWriter::new(File::create(&instanton_csv)?);
        timestamp_line(&mut out, cfg.timestamp)?;
        write_paths_csv(&path, Some(&riccati), &mut out)?;
    }

    let efficiency_csv = cfg.output_dir.join("efficiency.csv");
    let mut eff = BufWriter::new(File::create(&efficiency_csv)?);
    timestamp_line(&mut eff, cfg.timestamp)?;
    writeln!(eff, "{}", EstimatorReport::csv_header())?;

    let mut reports = Vec::new();
    // g2 depends on epsilon through its value term; keep one per epsilon
    // for the summary table.
    let mut g2_starts: Vec<f64> = Vec::new();
    let g1_start = BiasControl::order1(&model, &obs0, &path)?.value_at_start();
    let mut plain_cache: HashMap<u64, Vec<f64>> = HashMap::new();
    let mut cell_idx = 0usize;

    for &eps in &cfg.epsilons {
        let obs = obs0.with_epsilon(eps)?;
        g2_starts.push(BiasControl::order2(&model, &obs, &path, &riccati)?.value_at_start());
        for &kind in &cfg.controls {
            let control = build_control(kind, &model, &obs, &path, &riccati)?;
            let mut sim = SimConfig::new(cfg.n_traj, grid.clone(), cfg.seed);
            sim.record_deviation = cfg.record_deviation;
            sim.record_residual = cfg.record_residual;
            sim.stream_cell = if cfg.common_rng { 0 } else { 2 + cell_idx as u32 };
            let batch = simulate_batch(&model, &obs, &control, &sim)?;
            if batch.n_invalid > 0 {
                eprintln!(
                    "warning: eps {eps} control {kind}: {} invalid trajectories dropped",
                    batch.n_invalid
                );
            }
            let log_payoffs: Vec<f64> = batch.samples.iter().map(|s| s.log_payoff).collect();
            let moments = accumulate(log_payoffs.iter().copied())?;
            let mut rep = report(&moments, eps, kind, cfg.seed)?;
            if cfg.two_run_rho {
                let plain = plain_cache.entry(eps.to_bits());
                let plain = match plain {
                    std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                    std::collections::hash_map::Entry::Vacant(v) => {
                        let mut sim_plain = SimConfig::new(cfg.n_traj, grid.clone(), cfg.seed);
                        sim_plain.stream_cell = 1;
                        let out =
                            simulate_batch(&model, &obs, &BiasControl::zero(model.dim()), &sim_plain)?;
                        v.insert(out.samples.iter().map(|s| s.log_payoff).collect())
                    }
                };
                let plain_moments = accumulate(plain.iter().copied())?;
                let log_rho = two_run_log_rho(&moments, &plain_moments);
                rep.rho_hat = log_rho.exp();
                rep.rel_var = log_rho.exp_m1();
                rep.r_hat = eps * log_rho;
                rep.ci_r = bootstrap_two_run_ci(
                    &log_payoffs,
                    plain,
                    eps,
                    cfg.n_resample,
                    bootstrap_seed(cfg.seed, cell_idx),
                );
            } else {
                rep.ci_r = bootstrap_ci(
                    &log_payoffs,
                    eps,
                    cfg.n_resample,
                    bootstrap_seed(cfg.seed, cell_idx),
                )?;
            }
            writeln!(eff, "{}", rep.csv_row())?;
            eff.flush()?;
            if cfg.dump_samples {
                let name = format!("samples_{}_eps{}.csv", kind, eps);
                let f = BufWriter::new(File::create(cfg.output_dir.join(name))?);
                instanton_mc::mc::write_samples_csv(&batch.samples, f)?;
            }
            reports.push(rep);
            cell_idx += 1;
        }
    }
    drop(eff);

    let summary_txt = cfg.output_dir.join("summary.txt");
    {
        let mut out = BufWriter::new(File::create(&summary_txt)?);
        timestamp_line(&mut out, cfg.timestamp)?;
        write_summary(cfg, &model, &obs0, &reports, g1_start, &g2_starts, &mut out)?;
    }

    Ok(ExperimentArtifacts {
        output_dir: cfg.output_dir.clone(),
        instanton_csv,
        efficiency_csv,
        summary_txt,
        reports,
    })
}

fn write_summary<W: Write>(
    cfg: &ExperimentConfig,
    model: &DiffusionModel,
    obs0: &ObservableSpec,
    reports: &[EstimatorReport],
    g1_start: f64,
    g2_starts: &[f64],
    out: &mut W,
) -> Result<(), RunError> {
    writeln!(out, "model = {}", cfg.model.as_str())?;
    writeln!(
        out,
        "n_traj = {}, dt = {}, seed = {}, rho = {}",
        cfg.n_traj,
        cfg.dt,
        cfg.seed,
        if cfg.two_run_rho {
            "two-run"
        } else {
            "self-normalized"
        }
    )?;
    writeln!(out)?;
    writeln!(out, "log-efficiency decay fits (log R vs log eps):")?;
    for &kind in &cfg.controls {
        let of_kind: Vec<EstimatorReport> = reports
            .iter()
            .filter(|r| r.control_kind == kind)
            .cloned()
            .collect();
        match fit_decay_order(&of_kind, kind) {
            Ok(fit) => {
                writeln!(
                    out,
                    "  {kind}: slope = {} +- {} ({} points{})",
                    fit.slope,
                    fit.stderr,
                    fit.n_used,
                    if fit.excluded.is_empty() {
                        String::new()
                    } else {
                        format!(", excluded eps {:?}", fit.excluded)
                    }
                )?;
            }
            Err(e) => writeln!(out, "  {kind}: not fitted ({e})")?,
        }
        let rs: Vec<f64> = of_kind.iter().map(|r| r.r_hat).collect();
        if let (Some(max), Some(min)) = (
            rs.iter().cloned().reduce(f64::max),
            rs.iter().cloned().reduce(f64::min),
        ) {
            if min > 0.0 {
                writeln!(out, "  {kind}: R max/min over the sweep = {}", max / min)?;
            }
        }
    }

    writeln!(out)?;
    writeln!(out, "free-energy predictors vs estimates:")?;
    let oracle_zs: Option<Vec<f64>> = if cfg.oracle_in_summary && model.dim() == 1 {
        let mut zs = Vec::new();
        for &eps in &cfg.epsilons {
            let obs = obs0.with_epsilon(eps)?;
            let grid = PdeGrid::stable_for(
                model,
                &obs,
                cfg.pde_x_min,
                cfg.pde_x_max,
                cfg.pde_n_x,
                BoundaryKind::DirichletFromTerminal,
            )?;
            let (z, _) = solve_feynman_kac_extrapolated(model, &obs, &grid)?;
            zs.push(z);
        }
        Some(zs)
    } else {
        None
    };
    let mut header = String::from("  eps | g1(0,x0) | g2(0,x0)");
    if oracle_zs.is_some() {
        header.push_str(" | Z_pde");
    }
    for &kind in &cfg.controls {
        header.push_str(&format!(" | Z_mc[{kind}]"));
    }
    writeln!(out, "{header}")?;
    for (i, &eps) in cfg.epsilons.iter().enumerate() {
        let mut row = format!("  {eps} | {g1_start} | {}", g2_starts[i]);
        if let Some(zs) = &oracle_zs {
            row.push_str(&format!(" | {}", zs[i]));
        }
        for &kind in &cfg.controls {
            let z = reports
                .iter()
                .find(|r| r.control_kind == kind && r.epsilon == eps)
                .map(|r| r.z_hat)
                .expect("every cell was run");
            row.push_str(&format!(" | {z}"));
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}

/// Table of deterministic predictors and Monte Carlo estimates against the
/// PDE oracle, with error ratios between consecutive epsilons.
pub fn validate_against_oracle(cfg: &ExperimentConfig) -> Result<ValidationReport, RunError> {
    cfg.validate().map_err(|e| RunError::Config(e.to_string()))?;
    let (model, obs0) = build_problem(cfg)?;
    if model.dim() != 1 {
        return Err(RunError::Config(
            "oracle validation requires a one-dimensional model".into(),
        ));
    }
    let grid = make_grid(cfg, &obs0)?;
    let (path, riccati) = solve_paths(cfg, &model, &obs0, &grid)?;

    // Predictor accuracy should not be limited by the sampling step, so
    // the instanton feeding g1/g2 is solved on a finer grid.
    let dt_fine = cfg.dt.min(1e-4);
    let grid_fine = TimeGrid::new(obs0.horizon(), dt_fine)
        .map_err(|e| RunError::Config(e.to_string()))?;
    let (path_fine, riccati_fine) = solve_paths(cfg, &model, &obs0, &grid_fine)?;

    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut rows = Vec::new();
    for (eps_idx, &eps) in cfg.epsilons.iter().enumerate() {
        let obs = obs0.with_epsilon(eps)?;
        let pde = PdeGrid::stable_for(
            &model,
            &obs,
            cfg.pde_x_min,
            cfg.pde_x_max,
            cfg.pde_n_x,
            BoundaryKind::DirichletFromTerminal,
        )?;
        if !pde.contains_path(&path) {
            return Err(RunError::Config(
                "PDE box does not contain the instanton; widen pde_x_min/pde_x_max".into(),
            ));
        }
        let (z_oracle, _) = solve_feynman_kac_extrapolated(&model, &obs, &pde)?;
        let center = 0.5 * (cfg.pde_x_min + cfg.pde_x_max);
        let half = 0.75 * (cfg.pde_x_max - cfg.pde_x_min);
        let wide = PdeGrid::stable_for(
            &model,
            &obs,
            center - half,
            center + half,
            (3 * (cfg.pde_n_x - 1) / 2) + 1,
            BoundaryKind::DirichletFromTerminal,
        )?;
        let (z_wide, _) = solve_feynman_kac_extrapolated(&model, &obs, &wide)?;

        let g1 = BiasControl::order1(&model, &obs, &path_fine)?;
        let g2 = BiasControl::order2(&model, &obs, &path_fine, &riccati_fine)?;

        let mut z_mc = Vec::new();
        for &kind in &cfg.controls {
            let control = build_control(kind, &model, &obs, &path, &riccati)?;
            let mut sim = SimConfig::new(cfg.n_traj, grid.clone(), cfg.seed);
            sim.stream_cell = if cfg.common_rng {
                0
            } else {
                2 + (eps_idx * cfg.controls.len() + z_mc.len()) as u32
            };
            let batch = simulate_batch(&model, &obs, &control, &sim)?;
            let moments = accumulate(batch.samples.iter().map(|s| s.log_payoff))?;
            let rep = report(&moments, eps, kind, cfg.seed)?;
            z_mc.push((kind, rep.z_hat));
        }
        rows.push(ValidationRow {
            epsilon: eps,
            z_oracle,
            boundary_shift: (z_oracle - z_wide).abs(),
            g1_start: g1.value_at_start(),
            g2_start: g2.value_at_start(),
            z_mc,
        });
    }

    let ratio = |get: &dyn Fn(&ValidationRow) -> f64| -> Vec<f64> {
        rows.windows(2)
            .map(|w| {
                let e_hi = (get(&w[0]) - w[0].z_oracle).abs();
                let e_lo = (get(&w[1]) - w[1].z_oracle).abs();
                e_hi / e_lo
            })
            .collect()
    };
    let g1_ratios = ratio(&|r| r.g1_start);
    let g2_ratios = ratio(&|r| r.g2_start);

    let csv_path = cfg.output_dir.join("validation.csv");
    {
        let mut out = BufWriter::new(File::create(&csv_path)?);
        timestamp_line(&mut out, cfg.timestamp)?;
        let mut header =
            String::from("epsilon,z_oracle,boundary_shift,g1_start,g2_start,err_g1,err_g2");
        for &kind in &cfg.controls {
            header.push_str(&format!(",z_mc_{kind}"));
        }
        writeln!(out, "{header}")?;
        for r in &rows {
            let mut row = format!(
                "{},{},{},{},{},{},{}",
                r.epsilon,
                r.z_oracle,
                r.boundary_shift,
                r.g1_start,
                r.g2_start,
                (r.g1_start - r.z_oracle).abs(),
                (r.g2_start - r.z_oracle).abs()
            );
            for (_, z) in &r.z_mc {
                row.push_str(&format!(",{z}"));
            }
            writeln!(out, "{row}")?;
        }
    }

    Ok(ValidationReport {
        rows,
        g1_ratios,
        g2_ratios,
        csv_path,
    })
}

/// `instanton` subcommand: solve the paths for a named model and write the
/// CSV; the Riccati curvature is included.
pub fn export_instanton(
    model_name: &str,
    lq_a: f64,
    lq_q: f64,
    dt: f64,
    out_path: &std::path::Path,
) -> Result<(), RunError> {
    let name = ModelName::parse(model_name)
        .ok_or_else(|| RunError::Config(format!("unknown model `{model_name}`")))?;
    let (model, obs) = match name {
        ModelName::OuQuartic => make_ou_quartic(0.25)?,
        ModelName::Lq => make_lq_case(lq_a, lq_q, 0.25)?,
    };
    let grid = TimeGrid::new(obs.horizon(), dt).map_err(|e| RunError::Config(e.to_string()))?;
    let path = solve_instanton(&model, &obs, &grid, 0.5, 500, 1e-10)?;
    if !path.converged {
        return Err(RunError::InstantonNotConverged {
            iterations: path.iterations,
            residual: path.final_residual,
        });
    }
    let riccati = solve_riccati(&model, &obs, &path)?;
    if let Some(dir) = out_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut out = BufWriter::new(File::create(out_path)?);
    write_paths_csv(&path, Some(&riccati), &mut out)?;
    Ok(())
}
