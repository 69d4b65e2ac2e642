//! Log-domain aggregation of trajectory payoffs.
//!
//! Samples arrive as `w_i = log` of one estimator realization. The
//! accumulator keeps `log sum exp(w)` and `log sum exp(2w)` with running
//! max rebasing, so nothing is ever exponentiated above 0. From those:
//!
//! ```text
//!     log A = log sum exp(w) - log n
//!     Z     = eps log A
//!     rho   = (sum exp(2w) / n) / (sum exp(w) / n)^2
//!     R     = eps log rho
//! ```
//!
//! `rho` is estimated self-normalized (numerator and denominator from the
//! same tilted sample); an independent-denominator variant is available in
//! the experiment runner. Confidence intervals are percentile bootstrap:
//! log-domain ratios of heavy-tailed weights are far from normal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bias::ControlKind;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("empty sample stream")]
    EmptyStream,
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(u64),
    #[error("all sample weights vanish; the estimator is degenerate")]
    Degenerate,
    #[error("need at least 100 bootstrap resamples, got {0}")]
    TooFewResamples(usize),
    #[error("need at least 4 distinct epsilon values, got {0}")]
    TooFewEpsilons(usize),
    #[error("decay fit requires reports from a single control")]
    MixedControls,
    #[error("no usable points: every R estimate was at or below the noise floor")]
    NoUsablePoints,
}

/// Mergeable log-domain moment accumulator: `log sum exp(w)` and
/// `log sum exp(2w)` with running-max rebasing.
#[derive(Clone, Copy, Debug)]
pub struct LogMoments {
    n: u64,
    max_w: f64,
    sum_w: f64,
    max_2w: f64,
    sum_2w: f64,
}

impl Default for LogMoments {
    fn default() -> Self {
        Self::new()
    }
}

fn rebased_push(max: &mut f64, sum: &mut f64, v: f64) {
    if v == f64::NEG_INFINITY {
        return; // zero mass
    }
    if *sum == 0.0 {
        *max = v;
        *sum = 1.0;
    } else if v <= *max {
        *sum += (v - *max).exp();
    } else {
        *sum = *sum * (*max - v).exp() + 1.0;
        *max = v;
    }
}

fn rebased_merge(max_a: f64, sum_a: f64, max_b: f64, sum_b: f64) -> (f64, f64) {
    if sum_a == 0.0 {
        return (max_b, sum_b);
    }
    if sum_b == 0.0 {
        return (max_a, sum_a);
    }
    let m = max_a.max(max_b);
    (m, sum_a * (max_a - m).exp() + sum_b * (max_b - m).exp())
}

impl LogMoments {
    pub fn new() -> Self {
        LogMoments {
            n: 0,
            max_w: f64::NEG_INFINITY,
            sum_w: 0.0,
            max_2w: f64::NEG_INFINITY,
            sum_2w: 0.0,
        }
    }

    pub fn push(&mut self, w: f64) {
        rebased_push(&mut self.max_w, &mut self.sum_w, w);
        rebased_push(&mut self.max_2w, &mut self.sum_2w, 2.0 * w);
        self.n += 1;
    }

    pub fn merge(&self, other: &LogMoments) -> LogMoments {
        let (max_w, sum_w) = rebased_merge(self.max_w, self.sum_w, other.max_w, other.sum_w);
        let (max_2w, sum_2w) =
            rebased_merge(self.max_2w, self.sum_2w, other.max_2w, other.sum_2w);
        LogMoments {
            n: self.n + other.n,
            max_w,
            sum_w,
            max_2w,
            sum_2w,
        }
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    /// `log sum_i exp(w_i)`.
    pub fn log_sum_w(&self) -> f64 {
        if self.sum_w == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.max_w + self.sum_w.ln()
        }
    }

    /// `log sum_i exp(2 w_i)`.
    pub fn log_sum_2w(&self) -> f64 {
        if self.sum_2w == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.max_2w + self.sum_2w.ln()
        }
    }

    /// Largest sample seen (diagnostic for weight degeneracy).
    pub fn max_w(&self) -> f64 {
        self.max_w
    }
}

/// Single-pass accumulation of a log-domain sample stream.
pub fn accumulate<I: IntoIterator<Item = f64>>(samples: I) -> Result<LogMoments, StatsError> {
    let mut m = LogMoments::new();
    for w in samples {
        m.push(w);
    }
    if m.n == 0 {
        return Err(StatsError::EmptyStream);
    }
    Ok(m)
}

/// Log-domain estimates for one `(epsilon, control)` cell.
#[derive(Clone, Debug)]
pub struct EstimatorReport {
    pub epsilon: f64,
    pub control_kind: ControlKind,
    pub log_a_hat: f64,
    /// Free energy `eps * log A`.
    pub z_hat: f64,
    /// Self-normalized relative second-moment ratio.
    pub rho_hat: f64,
    /// Log-efficiency `eps * log rho`.
    pub r_hat: f64,
    /// `rho - 1`.
    pub rel_var: f64,
    /// 95% percentile bootstrap interval for `r_hat`; degenerate
    /// `(r_hat, r_hat)` until a bootstrap is attached.
    pub ci_r: (f64, f64),
    pub n: u64,
    pub seed: u64,
}

impl EstimatorReport {
    pub fn csv_header() -> &'static str {
        "epsilon,control,n,seed,Z_hat,R_hat,ci_lo,ci_hi,rel_var"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epsilon,
            self.control_kind,
            self.n,
            self.seed,
            self.z_hat,
            self.r_hat,
            self.ci_r.0,
            self.ci_r.1,
            self.rel_var
        )
    }
}

fn log_rho(m: &LogMoments) -> Result<(f64, f64), StatsError> {
    let log_n = (m.n as f64).ln();
    let log_a = m.log_sum_w() - log_n;
    if !log_a.is_finite() {
        return Err(StatsError::Degenerate);
    }
    Ok((log_a, (m.log_sum_2w() - log_n) - 2.0 * log_a))
}

/// Builds the estimate report for one cell from accumulated moments.
pub fn report(
    moments: &LogMoments,
    epsilon: f64,
    control_kind: ControlKind,
    seed: u64,
) -> Result<EstimatorReport, StatsError> {
    if moments.n < 2 {
        return Err(StatsError::TooFewSamples(moments.n));
    }
    let (log_a, log_rho) = log_rho(moments)?;
    let r_hat = epsilon * log_rho;
    Ok(EstimatorReport {
        epsilon,
        control_kind,
        log_a_hat: log_a,
        z_hat: epsilon * log_a,
        rho_hat: log_rho.exp(),
        r_hat,
        rel_var: log_rho.exp_m1(),
        ci_r: (r_hat, r_hat),
        n: moments.n,
        seed,
    })
}

/// Percentile bootstrap (2.5%, 97.5%) of `R = eps log rho` over resamples
/// of the log-domain values.
pub fn bootstrap_ci(
    log_values: &[f64],
    epsilon: f64,
    n_resample: usize,
    seed: u64,
) -> Result<(f64, f64), StatsError> {
    if n_resample < 100 {
        return Err(StatsError::TooFewResamples(n_resample));
    }
    let n = log_values.len();
    if n < 2 {
        return Err(StatsError::TooFewSamples(n as u64));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r_values = Vec::with_capacity(n_resample);
    for _ in 0..n_resample {
        let mut m = LogMoments::new();
        for _ in 0..n {
            m.push(log_values[rng.random_range(0..n)]);
        }
        let (_, lr) = log_rho(&m)?;
        r_values.push(epsilon * lr);
    }
    r_values.sort_by(|a, b| a.partial_cmp(b).expect("R values are finite"));
    Ok((percentile(&r_values, 0.025), percentile(&r_values, 0.975)))
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    (1.0 - w) * sorted[lo] + w * sorted[hi]
}

/// Least-squares slope of `log R` against `log eps` with its standard
/// error: the empirical decay order of the log-efficiency.
#[derive(Clone, Debug)]
pub struct DecayFit {
    pub slope: f64,
    pub stderr: f64,
    pub n_used: usize,
    /// Epsilons dropped because their `R` sat at or below the noise floor.
    pub excluded: Vec<f64>,
}

pub fn fit_decay_order(
    reports: &[EstimatorReport],
    control_kind: ControlKind,
) -> Result<DecayFit, StatsError> {
    if reports.iter().any(|r| r.control_kind != control_kind) {
        return Err(StatsError::MixedControls);
    }
    let mut epsilons: Vec<f64> = reports.iter().map(|r| r.epsilon).collect();
    epsilons.sort_by(|a, b| a.partial_cmp(b).expect("epsilon is finite"));
    epsilons.dedup();
    if epsilons.len() < 4 {
        return Err(StatsError::TooFewEpsilons(epsilons.len()));
    }

    let mut excluded = Vec::new();
    let mut points = Vec::new();
    for r in reports {
        if r.r_hat > 0.0 {
            points.push((r.epsilon.ln(), r.r_hat.ln()));
        } else {
            excluded.push(r.epsilon);
        }
    }
    if points.len() < 2 {
        return Err(StatsError::NoUsablePoints);
    }

    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let slope = sxy / sxx;
    let stderr = if points.len() > 2 {
        let intercept = mean_y - slope * mean_x;
        let rss: f64 = points
            .iter()
            .map(|p| (p.1 - intercept - slope * p.0).powi(2))
            .sum();
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(DecayFit {
        slope,
        stderr,
        n_used: points.len(),
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand_distr::StandardNormal;

    fn synthetic_report(epsilon: f64, r_hat: f64, kind: ControlKind) -> EstimatorReport {
        EstimatorReport {
            epsilon,
            control_kind: kind,
            log_a_hat: 0.0,
            z_hat: 0.0,
            rho_hat: 1.0,
            r_hat,
            rel_var: 0.0,
            ci_r: (r_hat, r_hat),
            n: 2,
            seed: 0,
        }
    }

    #[test]
    fn two_zeros_sum_to_log_two() {
        let m = accumulate([0.0, 0.0]).unwrap();
        assert_relative_eq!(m.log_sum_w(), 2.0f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn negative_infinity_carries_no_mass() {
        let m = accumulate([1.5, f64::NEG_INFINITY]).unwrap();
        assert_relative_eq!(m.log_sum_w(), 1.5, epsilon = 1e-15);
        assert_eq!(m.n(), 2);
    }

    #[test]
    fn lognormal_mean_identity() {
        // For w ~ N(0,1), log E[exp(w)] = 1/2; check within 3 standard
        // errors at n = 10^4 with a fixed stream.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000usize;
        let values: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let m = accumulate(values.iter().copied()).unwrap();
        let log_mean = m.log_sum_w() - (n as f64).ln();
        // relative SE of E[exp(w)] is sqrt((e-1)/n).
        let se = ((1f64.exp() - 1.0) / n as f64).sqrt();
        assert!(
            (log_mean - 0.5).abs() < 3.0 * se,
            "log mean {log_mean}, tolerance {}",
            3.0 * se
        );
    }

    #[test]
    fn constant_samples_have_unit_rho_and_zero_r() {
        let m = accumulate(std::iter::repeat(-3.7).take(1000)).unwrap();
        let rep = report(&m, 0.25, ControlKind::Zero, 0).unwrap();
        assert!((rep.rho_hat - 1.0).abs() < 1e-12);
        assert!(rep.r_hat.abs() < 1e-12);
        assert_relative_eq!(rep.z_hat, 0.25 * -3.7, epsilon = 1e-12);
    }

    #[test]
    fn report_requires_two_samples() {
        let m = accumulate([0.3]).unwrap();
        assert!(matches!(
            report(&m, 0.5, ControlKind::Zero, 0),
            Err(StatsError::TooFewSamples(1))
        ));
    }

    #[test]
    fn bootstrap_degenerate_sample_gives_zero_width() {
        let values = vec![1.2; 50];
        let (lo, hi) = bootstrap_ci(&values, 0.5, 200, 9).unwrap();
        assert!(lo.abs() < 1e-12 && hi.abs() < 1e-12, "({lo}, {hi})");
        assert!(hi - lo < 1e-12);
        assert!(bootstrap_ci(&values, 0.5, 99, 9).is_err());
    }

    #[test]
    fn bootstrap_width_shrinks_like_root_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let big: Vec<f64> = (0..8000)
            .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let small = &big[..2000];
        let (lo_s, hi_s) = bootstrap_ci(small, 0.5, 500, 1).unwrap();
        let (lo_b, hi_b) = bootstrap_ci(&big, 0.5, 500, 2).unwrap();
        let ratio = (hi_s - lo_s) / (hi_b - lo_b);
        assert!(
            (1.4..=2.6).contains(&ratio),
            "quadrupling n should halve the width within 30%, got {ratio}"
        );
    }

    #[test]
    fn exact_power_law_is_recovered() {
        let reports: Vec<EstimatorReport> = [0.5, 0.25, 0.125, 0.0625]
            .iter()
            .map(|&e| synthetic_report(e, 3.0 * e * e * e, ControlKind::Order2))
            .collect();
        let fit = fit_decay_order(&reports, ControlKind::Order2).unwrap();
        assert_relative_eq!(fit.slope, 3.0, epsilon = 1e-10);
        assert!(fit.stderr < 1e-10);
        assert!(fit.excluded.is_empty());
    }

    #[test]
    fn fit_guards() {
        let three: Vec<EstimatorReport> = [0.5, 0.25, 0.125]
            .iter()
            .map(|&e| synthetic_report(e, e, ControlKind::Order1))
            .collect();
        assert!(matches!(
            fit_decay_order(&three, ControlKind::Order1),
            Err(StatsError::TooFewEpsilons(3))
        ));

        let mut mixed: Vec<EstimatorReport> = [0.5, 0.25, 0.125, 0.0625]
            .iter()
            .map(|&e| synthetic_report(e, e, ControlKind::Order1))
            .collect();
        mixed[0].control_kind = ControlKind::Zero;
        assert!(matches!(
            fit_decay_order(&mixed, ControlKind::Order1),
            Err(StatsError::MixedControls)
        ));

        let mut with_floor: Vec<EstimatorReport> = [0.5, 0.25, 0.125, 0.0625]
            .iter()
            .map(|&e| synthetic_report(e, e, ControlKind::Order1))
            .collect();
        with_floor[3].r_hat = -1e-9;
        let fit = fit_decay_order(&with_floor, ControlKind::Order1).unwrap();
        assert_eq!(fit.n_used, 3);
        assert_eq!(fit.excluded, vec![0.0625]);
    }

    proptest! {
        #[test]
        fn merge_equals_concatenation(
            a in proptest::collection::vec(-50.0f64..50.0, 1..40),
            b in proptest::collection::vec(-50.0f64..50.0, 1..40),
        ) {
            let whole = accumulate(a.iter().chain(b.iter()).copied()).unwrap();
            let merged = accumulate(a.iter().copied())
                .unwrap()
                .merge(&accumulate(b.iter().copied()).unwrap());
            prop_assert_eq!(whole.n(), merged.n());
            prop_assert!(
                (whole.log_sum_w() - merged.log_sum_w()).abs()
                    <= 1e-12 * whole.log_sum_w().abs().max(1.0)
            );
            prop_assert!(
                (whole.log_sum_2w() - merged.log_sum_2w()).abs()
                    <= 1e-12 * whole.log_sum_2w().abs().max(1.0)
            );
        }

        #[test]
        fn empirical_cauchy_schwarz(
            values in proptest::collection::vec(-200.0f64..200.0, 2..60),
        ) {
            let m = accumulate(values.iter().copied()).unwrap();
            let n = values.len() as f64;
            // sum e^{2w} >= (sum e^w)^2 / n, i.e. rho >= 1.
            prop_assert!(m.log_sum_2w() >= 2.0 * m.log_sum_w() - n.ln() - 1e-10);
        }

        #[test]
        fn merge_then_report_matches_report_of_concatenation(
            a in proptest::collection::vec(-20.0f64..20.0, 2..30),
            b in proptest::collection::vec(-20.0f64..20.0, 2..30),
        ) {
            let whole = report(
                &accumulate(a.iter().chain(b.iter()).copied()).unwrap(),
                0.25,
                ControlKind::Zero,
                0,
            )
            .unwrap();
            let merged = report(
                &accumulate(a.iter().copied())
                    .unwrap()
                    .merge(&accumulate(b.iter().copied()).unwrap()),
                0.25,
                ControlKind::Zero,
                0,
            )
            .unwrap();
            prop_assert!((whole.r_hat - merged.r_hat).abs() <= 1e-12 * whole.r_hat.abs().max(1.0));
            prop_assert!((whole.z_hat - merged.z_hat).abs() <= 1e-12 * whole.z_hat.abs().max(1.0));
        }
    }
}
