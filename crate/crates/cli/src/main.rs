use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rvio::cli_io::{evaluate_files, run_estimator, simulate_to_file, RunConfig};
use rvio::evaluation::{DEFAULT_MAX_DT, DEFAULT_RPE_DELTA};
use rvio::simulator::preset_names;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "rvio", version, about = "Radar-visual-inertial odometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the dataset of a simulated scenario as JSON Lines.
    Simulate {
        /// Scenario preset.
        #[arg(long, default_value = "nominal")]
        preset: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run the estimator over a dataset.
    Run(RunArgs),
    /// Compare an estimated trajectory against ground truth.
    Evaluate {
        /// Ground truth, as TUM or as a dataset file.
        #[arg(long)]
        gt: PathBuf,
        /// Estimate in TUM format.
        #[arg(long)]
        est: PathBuf,
        /// RPE segment length [m].
        #[arg(long, default_value_t = DEFAULT_RPE_DELTA)]
        delta: f64,
        /// Maximum timestamp gap when associating poses [s].
        #[arg(long, default_value_t = DEFAULT_MAX_DT)]
        max_dt: f64,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default configuration.
    Config,
    /// List the scenario presets.
    Presets,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    no_radar: bool,
    #[arg(long)]
    no_vision: bool,
    /// Rotate the radar extrinsic prior about a radar axis (0, 1, 2) by degrees.
    #[arg(long, num_args = 2, value_names = ["AXIS", "DEG"], allow_negative_numbers = true)]
    perturb_radar_extrinsic: Option<Vec<f64>>,
}

fn run_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("expected key=value, got '{kv}'"))?;
        cfg.set(k.trim(), v.trim()).map_err(anyhow::Error::msg)?;
    }
    if let Some(p) = &a.dataset {
        cfg.dataset = Some(p.clone());
    }
    if let Some(p) = &a.out {
        cfg.output_dir = p.clone();
    }
    if a.no_radar {
        cfg.estimator.use_radar = false;
    }
    if a.no_vision {
        cfg.estimator.use_vision = false;
    }
    if let Some(v) = &a.perturb_radar_extrinsic {
        let axis = v[0];
        if !(axis == 0.0 || axis == 1.0 || axis == 2.0) {
            bail!("axis must be 0, 1 or 2");
        }
        cfg.perturb_radar_rotation(axis as usize, v[1]);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Simulate { preset, seed, out } => {
            let d = simulate_to_file(&preset, seed, &out)?;
            println!(
                "wrote {}: {} IMU samples, {} radar scans, {} frames",
                out.display(),
                d.imu.len(),
                d.radar.len(),
                d.features.len()
            );
        }
        Command::Run(args) => {
            let cfg = run_config(&args)?;
            let out = run_estimator(&cfg)?;
            println!("wrote {} poses to {}", out.trajectory.len(), cfg.output_dir.display());
            if let Some(m) = &out.metrics {
                println!(
                    "APE {:.4} m, RPE {:.4} m, final drift {:.4} cm/m",
                    m.ape_rmse, m.rpe_rmse, m.final_drift
                );
            }
        }
        Command::Evaluate { gt, est, delta, max_dt, out } => {
            let m = evaluate_files(&gt, &est, delta, max_dt)?;
            if let Some(p) = out {
                m.write_json(&p)?;
            }
            println!(
                "APE {:.4} m, RPE {:.4} m, final drift {:.4} cm/m over {:.1} m",
                m.ape_rmse, m.rpe_rmse, m.final_drift, m.gt_length
            );
        }
        Command::Config => print!("{}", RunConfig::default().to_kv_string()),
        Command::Presets => {
            for p in preset_names() {
                println!("{p}");
            }
        }
    }
    Ok(())
}
