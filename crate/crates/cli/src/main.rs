use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mzflow::data::{MemoryWindowDataset, TrajectorySet};
use mzflow::experiment::{oracle_check_csv, prediction_error, ExperimentConfig, PRESETS};
use mzflow::rollout::{memory_sweep, rollout_csv, sweep_csv};
use mzflow::train::{load_model, save_model};

#[derive(Parser, Debug)]
#[command(name = "mzflow", version, about = "Learn memory-dependent flow maps of partially observed systems")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON experiment config.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in experiment preset.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Memory steps. A single value sets n_mem, a comma list sets the sweep.
    #[arg(long, global = true, value_delimiter = ',')]
    n_mem: Vec<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the resolved config as JSON.
    Config,
    /// Integrate the truth system and write trajectories.txt.
    Generate,
    /// Cut memory windows from trajectories and write dataset.txt.
    BuildDataset {
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
    /// Train a fresh network; writes model.txt and train_log.csv.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Roll a trained model out against the truth; writes rollout.csv.
    Predict {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Prediction steps after the seeds (default: up to the eval horizon).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate, window, train and predict in one go.
    Run,
    /// Train one model per memory length; writes sweep.csv.
    Sweep,
    /// Compare a trained slow-fast model with the homogenized system; writes compare.csv.
    CompareReduced {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Check the memory decomposition of a linear system; writes oracle_check.csv.
    OracleCheck {
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = 1000)]
        quad_points: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn resolve_config(common: &Common, sweep: bool) -> Result<ExperimentConfig> {
    let mut cfg = match (&common.config, &common.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => bail!("pass --config <path> or --preset <{}>", PRESETS.join("|")),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    match (sweep, common.n_mem.as_slice()) {
        (_, []) => {}
        (true, list) => cfg.sweep = list.to_vec(),
        (false, [n]) => cfg.n_mem = *n,
        (false, list) => bail!("--n-mem takes a single value outside `sweep`, got {list:?}"),
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn ensure_finite(label: &str, value: f64) -> Result<()> {
    if !value.is_finite() {
        bail!("{label} is not finite ({value})");
    }
    Ok(())
}

fn generate(cfg: &ExperimentConfig) -> Result<TrajectorySet> {
    let trajs = cfg.generate()?;
    let path = cfg.out_dir.join("trajectories.txt");
    trajs.save(&path)?;
    println!(
        "N_T={} K={} delta={} -> {}",
        trajs.len(),
        cfg.traj_len(),
        trajs.delta(),
        path.display()
    );
    Ok(trajs)
}

fn build(cfg: &ExperimentConfig, trajs: &TrajectorySet) -> Result<MemoryWindowDataset> {
    let ds = cfg.build_dataset(trajs)?;
    let path = cfg.out_dir.join("dataset.txt");
    ds.save(&path)?;
    println!("J={} n_mem={} -> {}", ds.len(), ds.n_mem(), path.display());
    Ok(ds)
}

fn train(cfg: &ExperimentConfig, ds: &MemoryWindowDataset) -> Result<mzflow::net::NetworkParams> {
    if ds.n_mem() != cfg.n_mem {
        bail!("dataset has n_mem={}, config has n_mem={}", ds.n_mem(), cfg.n_mem);
    }
    let run = cfg.train(ds)?;
    ensure_finite("final training loss", run.report.final_loss)?;
    save_model(&run.model, &cfg.out_dir.join("model.txt"))?;
    write(&cfg.out_dir.join("train_log.csv"), &run.report.to_csv())?;
    println!(
        "params={} final_loss={:e} wall_time={:.1}s",
        run.model.count_params(),
        run.report.final_loss,
        run.report.wall_time
    );
    Ok(run.model)
}

fn predict(cfg: &ExperimentConfig, model: &mzflow::net::NetworkParams, steps: Option<usize>) -> Result<()> {
    let (pred, reference) = cfg.predict(model, steps)?;
    write(&cfg.out_dir.join("rollout.csv"), &rollout_csv(&pred, Some(reference.view()))?)?;
    if let Some(k) = pred.diverged_at {
        bail!("rollout diverged at step {k}");
    }
    let err = prediction_error(&pred, &reference)?;
    ensure_finite("rollout error", err)?;
    println!("steps={} time-averaged error={err:e}", pred.len() - pred.seed_len);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let sweep = matches!(cli.command, Command::Sweep);
    let cfg = resolve_config(&cli.common, sweep)?;
    if matches!(cli.command, Command::Config) {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    cfg.save(&cfg.out_dir.join("config.json"))?;
    let out = |name: &str| cfg.out_dir.join(name);
    match cli.command {
        Command::Config => unreachable!(),
        Command::Generate => {
            generate(&cfg)?;
        }
        Command::BuildDataset { trajectories } => {
            let trajs = TrajectorySet::load(&trajectories.unwrap_or_else(|| out("trajectories.txt")))?;
            build(&cfg, &trajs)?;
        }
        Command::Train { dataset } => {
            let ds = MemoryWindowDataset::load(&dataset.unwrap_or_else(|| out("dataset.txt")))?;
            train(&cfg, &ds)?;
        }
        Command::Predict { model, steps } => {
            let model = load_model(&model.unwrap_or_else(|| out("model.txt")))?;
            predict(&cfg, &model, steps)?;
        }
        Command::Run => {
            let trajs = generate(&cfg)?;
            let ds = build(&cfg, &trajs)?;
            let model = train(&cfg, &ds)?;
            predict(&cfg, &model, None)?;
        }
        Command::Sweep => {
            let rows = memory_sweep(&cfg, &cfg.sweep)?;
            write(&out("sweep.csv"), &sweep_csv(&rows))?;
            for r in &rows {
                println!("n_mem={} T_M={} mean_error={:e}", r.n_mem, r.memory_length, r.mean_error);
            }
            for r in &rows {
                ensure_finite(&format!("sweep error at n_mem={}", r.n_mem), r.mean_error)?;
            }
        }
        Command::CompareReduced { model, horizon, runs } => {
            let model = load_model(&model.unwrap_or_else(|| out("model.txt")))?;
            let cmp = cfg.compare_reduced(
                &model,
                horizon.unwrap_or(cfg.eval_horizon),
                runs.unwrap_or(cfg.n_eval_runs),
            )?;
            write(&out("compare.csv"), &cmp.to_csv())?;
            println!(
                "network mean error={:e} homogenized mean error={:e}",
                cmp.nn_mean_error(),
                cmp.reduced_mean_error()
            );
            ensure_finite("network error", cmp.nn_mean_error())?;
        }
        Command::OracleCheck {
            points,
            quad_points,
            tolerance,
        } => {
            let rows = cfg.oracle_check(points, quad_points)?;
            write(&out("oracle_check.csv"), &oracle_check_csv(&rows))?;
            let worst = rows.iter().map(|r| r.residual).fold(0.0, f64::max);
            println!("points={points} max residual={worst:e}");
            if !(worst <= tolerance) {
                bail!("decomposition residual {worst:e} exceeds {tolerance:e}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
