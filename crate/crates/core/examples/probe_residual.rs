//! Scratch probe: residual scale for the exact LQ order-2 control, payoff
//! spread, and the sup-deviation scaling.
use instanton_mc::*;

fn main() {
    for dt in [1e-3, 5e-4] {
        let (model, obs) = make_lq_case(1.0, 1.0, 0.1).unwrap();
        let grid = TimeGrid::new(5.0, dt).unwrap();
        let path = solve_instanton(&model, &obs, &grid, 0.5, 500, 1e-12).unwrap();
        let ric = solve_riccati(&model, &obs, &path).unwrap();
        let g2 = BiasControl::order2(&model, &obs, &path, &ric).unwrap();
        let mut cfg = SimConfig::new(2000, grid, 7);
        cfg.record_residual = true;
        let out = simulate_batch(&model, &obs, &g2, &cfg).unwrap();
        let mgf = residual_mgf_check(&out.samples, 2.0).unwrap();
        let mean_q: f64 =
            out.samples.iter().map(|s| s.residual.unwrap()).sum::<f64>() / out.samples.len() as f64;
        let max_q = out
            .samples
            .iter()
            .map(|s| s.residual.unwrap().abs())
            .fold(0.0f64, f64::max);
        let lp: Vec<f64> = out.samples.iter().map(|s| s.log_payoff).collect();
        let mean = lp.iter().sum::<f64>() / lp.len() as f64;
        let std = (lp.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (lp.len() - 1) as f64)
            .sqrt();
        let m = accumulate(lp.iter().copied()).unwrap();
        let rep = report(&m, 0.1, g2.kind(), 7).unwrap();
        println!(
            "LQ dt {dt}: mgf {mgf:+.4e} meanQ {mean_q:+.4e} maxQ {max_q:.4e} std(lp) {std:.4e} R {:.4e}",
            rep.r_hat
        );
    }

    // Pointwise order-2 vs exact LQ control.
    let (model, obs) = make_lq_case(1.0, 1.0, 0.1).unwrap();
    let lq = lq_solution(1.0, 1.0, 2.0, 5.0, 0.1).unwrap();
    for dt in [1e-3, 5e-4] {
        let grid = TimeGrid::new(5.0, dt).unwrap();
        let path = solve_instanton(&model, &obs, &grid, 0.5, 500, 1e-12).unwrap();
        let ric = solve_riccati(&model, &obs, &path).unwrap();
        let g2 = BiasControl::order2(&model, &obs, &path, &ric).unwrap();
        let mut worst = 0.0f64;
        for i in (0..=grid.n_steps()).step_by(97) {
            let t = grid.time(i);
            for x in [-2.0, -0.5, 1.0, 2.5, 4.0] {
                let v = g2.value(t, &nalgebra::DVector::from_element(1, x)).unwrap();
                worst = worst.max((v - lq.value(t, x)).abs());
            }
        }
        println!("LQ dt {dt}: pointwise control gap {worst:.4e} ({:.1} x dt)", worst / dt);
    }

    // sup-deviation medians for the order-1 OU control.
    let (model, obs) = make_ou_quartic(0.25).unwrap();
    let grid = TimeGrid::new(5.0, 5e-3).unwrap();
    let path = solve_instanton(&model, &obs, &grid, 0.5, 300, 1e-10).unwrap();
    let mut medians = Vec::new();
    for eps in [0.25, 0.0625] {
        let obs_e = obs.with_epsilon(eps).unwrap();
        let g1 = BiasControl::order1(&model, &obs_e, &path).unwrap();
        let mut cfg = SimConfig::new(5000, grid.clone(), 99);
        cfg.record_deviation = true;
        let out = simulate_batch(&model, &obs_e, &g1, &cfg).unwrap();
        let mut devs: Vec<f64> = out.samples.iter().map(|s| s.sup_deviation.unwrap()).collect();
        devs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        medians.push(devs[devs.len() / 2]);
    }
    println!(
        "sup-dev medians: {:.4} vs {:.4}, ratio {:.3}",
        medians[0],
        medians[1],
        medians[0] / medians[1]
    );
}
