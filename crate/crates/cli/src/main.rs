use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use instanton_mc_cli::{
    export_instanton, run_experiment, validate_against_oracle, ExperimentConfig,
};

/// Estimates exponential expectations of small-noise diffusions by
/// instanton-based importance sampling and measures the log-efficiency
/// against unbiased sampling and a PDE oracle.
#[derive(Parser)]
#[command(name = "instanton-mc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the epsilon/control sweep described by a config file; writes
    /// instanton.csv, efficiency.csv and summary.txt.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare predictors and Monte Carlo estimates against the PDE
    /// oracle; writes validation.csv.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Solve the instanton and Riccati paths for a named model and export
    /// them as CSV.
    Instanton {
        #[arg(long)]
        model: String,
        #[arg(long)]
        dt: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        lq_a: f64,
        #[arg(long, default_value_t = 1.0)]
        lq_q: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config } => match ExperimentConfig::from_file(&config) {
            Err(e) => {
                eprintln!("config error: {e}");
                2
            }
            Ok(cfg) => match run_experiment(&cfg) {
                Ok(artifacts) => {
                    println!(
                        "wrote {}, {}, {}",
                        artifacts.instanton_csv.display(),
                        artifacts.efficiency_csv.display(),
                        artifacts.summary_txt.display()
                    );
                    0
                }
                Err(e) => {
                    eprintln!("run failed: {e}");
                    e.exit_code()
                }
            },
        },
        Command::Validate { config } => match ExperimentConfig::from_file(&config) {
            Err(e) => {
                eprintln!("config error: {e}");
                2
            }
            Ok(cfg) => match validate_against_oracle(&cfg) {
                Ok(report) => {
                    println!("validation ({} epsilons):", report.rows.len());
                    for r in &report.rows {
                        println!(
                            "  eps {}: Z_pde {:.8}  g1 {:.8} (err {:.3e})  g2 {:.8} (err {:.3e})  boundary {:.1e}",
                            r.epsilon,
                            r.z_oracle,
                            r.g1_start,
                            (r.g1_start - r.z_oracle).abs(),
                            r.g2_start,
                            (r.g2_start - r.z_oracle).abs(),
                            r.boundary_shift,
                        );
                        for (kind, z) in &r.z_mc {
                            println!("      Z_mc[{kind}] = {z:.8}");
                        }
                    }
                    println!("  g1 error ratios between consecutive eps: {:?}", report.g1_ratios);
                    println!("  g2 error ratios between consecutive eps: {:?}", report.g2_ratios);
                    println!("wrote {}", report.csv_path.display());
                    0
                }
                Err(e) => {
                    eprintln!("validation failed: {e}");
                    e.exit_code()
                }
            },
        },
        Command::Instanton {
            model,
            dt,
            out,
            lq_a,
            lq_q,
        } => match export_instanton(&model, lq_a, lq_q, dt, &out) {
            Ok(()) => {
                println!("wrote {}", out.display());
                0
            }
            Err(e) => {
                eprintln!("instanton export failed: {e}");
                e.exit_code()
            }
        },
    };
    ExitCode::from(code as u8)
}
