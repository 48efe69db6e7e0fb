//! Experiment configuration, the example presets and the pipeline stages
//! the command line drives. Every random draw is seeded from the config's
//! master seed, split per stage.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{
    build_dataset, generate_trajectories, observed_trajectory, sample_initial_conditions, MemoryWindowDataset,
    SelectionStrategy, TrajectorySet,
};
use crate::dynamics::{Domain, LinearMZOracle, SolverConfig, SystemSpec};
use crate::error::{Error, Result};
use crate::net::{init_params, NetworkParams, Scaling};
use crate::rollout::{
    compare_reduced_example3, error_series, evaluate_model, horizon_samples, rollout, Evaluation, ReducedComparison,
    RolloutResult,
};
use crate::seed::{self, stage};
use crate::textio::fmt_f64;
use crate::train::{train_model, TrainConfig, TrainReport};

/// Names accepted by [`ExperimentConfig::preset`].
pub const PRESETS: &[&str] = &["example1-fast", "example1-slow", "example2", "example3", "example4"];

/// How many windows each trajectory contributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Selection {
    Deterministic,
    Random { per_trajectory: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// Block-matrix file (A11, A12, A21, A22) for `linear-generic`.
    #[serde(default)]
    pub matrices: Option<PathBuf>,
    /// Overrides the system's default number of observed components.
    #[serde(default)]
    pub observed: Option<usize>,
    pub domain: Domain,
    pub delta: f64,
    pub substeps: usize,
    pub n_traj: usize,
    /// Samples per trajectory; `null` means `n_mem + 2`.
    pub traj_len: Option<usize>,
    pub selection: Selection,
    pub n_mem: usize,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub eval_horizon: f64,
    pub n_eval_runs: usize,
    pub sweep: Vec<usize>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// A trained model and its training log.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub model: NetworkParams,
    pub report: TrainReport,
    pub dataset_len: usize,
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let cube = |n, lo, hi| Domain::cube(n, lo, hi).expect("preset domain");
        let cfg = match name {
            "example1-fast" | "example1-slow" => {
                let slow = name == "example1-slow";
                Self {
                    system: "example1".into(),
                    params: BTreeMap::from([("alpha".to_string(), if slow { 1.1 } else { 2.0 })]),
                    matrices: None,
                    observed: None,
                    domain: cube(2, -2.0, 2.0),
                    delta: 0.02,
                    substeps: 20,
                    n_traj: 20_000,
                    traj_len: None,
                    selection: Selection::Random { per_trajectory: 1 },
                    n_mem: 30,
                    hidden: vec![30, 30, 30],
                    train: TrainConfig {
                        learning_rate: 1e-3,
                        final_learning_rate: Some(1e-6),
                        batch_size: 50,
                        epochs: 500,
                        ..TrainConfig::default()
                    },
                    eval_horizon: if slow { 100.0 } else { 20.0 },
                    n_eval_runs: 10,
                    sweep: vec![5, 10, 20, 30, 40],
                    seed: 0,
                    out_dir: PathBuf::from("runs").join(name),
                }
            }
            "example2" => Self {
                system: "example2".into(),
                params: BTreeMap::from([("alpha".to_string(), 0.1), ("beta".to_string(), 8.91)]),
                matrices: None,
                observed: None,
                domain: Domain::new(vec![-2.0, -4.0], vec![2.0, 4.0]).expect("preset domain"),
                delta: 0.02,
                substeps: 20,
                n_traj: 4_000,
                traj_len: Some(50),
                selection: Selection::Random { per_trajectory: 5 },
                n_mem: 20,
                hidden: vec![30, 30, 30],
                train: TrainConfig {
                    learning_rate: 1e-3,
                    final_learning_rate: Some(1e-6),
                    batch_size: 50,
                    epochs: 500,
                    ..TrainConfig::default()
                },
                eval_horizon: 100.0,
                n_eval_runs: 5,
                sweep: vec![3, 5, 8, 10, 13, 15, 18, 20],
                seed: 0,
                out_dir: PathBuf::from("runs/example2"),
            },
            "example3" => Self {
                system: "example3".into(),
                // The printed x1*x2 drive blows up in finite time from part of
                // the domain; x1*x3 is the system the homogenized model limits.
                params: BTreeMap::from([("eps".to_string(), 0.01), ("coupling".to_string(), 3.0)]),
                matrices: None,
                observed: None,
                domain: Domain::new(vec![-7.5, -10.0, 0.0, -1.0], vec![10.0, 7.5, 18.0, 100.0])
                    .expect("preset domain"),
                delta: 0.02,
                substeps: 20,
                n_traj: 6_000,
                traj_len: Some(100),
                selection: Selection::Random { per_trajectory: 5 },
                n_mem: 60,
                hidden: vec![120, 120, 120],
                train: TrainConfig {
                    learning_rate: 1e-3,
                    final_learning_rate: Some(1e-5),
                    batch_size: 50,
                    epochs: 100,
                    ..TrainConfig::default()
                },
                eval_horizon: 400.0,
                n_eval_runs: 10,
                sweep: vec![10, 20, 30, 40, 50, 60, 70, 80],
                seed: 0,
                out_dir: PathBuf::from("runs/example3"),
            },
            "example4" => Self {
                system: "example4".into(),
                params: BTreeMap::new(),
                matrices: None,
                observed: None,
                domain: cube(20, -2.0, 2.0),
                delta: 0.02,
                substeps: 20,
                n_traj: 30_000,
                traj_len: Some(100),
                selection: Selection::Random { per_trajectory: 5 },
                n_mem: 30,
                hidden: vec![160, 160, 160],
                train: TrainConfig {
                    learning_rate: 1e-3,
                    final_learning_rate: Some(1e-5),
                    batch_size: 50,
                    epochs: 100,
                    ..TrainConfig::default()
                },
                eval_horizon: 150.0,
                n_eval_runs: 10,
                sweep: vec![10, 15, 20, 25, 30, 35, 40, 45, 50],
                seed: 0,
                out_dir: PathBuf::from("runs/example4"),
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}` (available: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    /// Checks every value against the preconditions of the stage that uses it.
    pub fn validate(&self) -> Result<()> {
        let spec = self.system_spec()?;
        self.domain.validate()?;
        if self.domain.dim() != spec.n() {
            return Err(Error::Config(format!(
                "domain has {} dimensions, system {} has {}",
                self.domain.dim(),
                spec.name(),
                spec.n()
            )));
        }
        self.solver()?;
        if self.n_traj == 0 {
            return Err(Error::Config("n_traj must be at least 1".into()));
        }
        let k = self.traj_len();
        if k < self.n_mem + 2 {
            return Err(Error::Config(format!(
                "traj_len {k} is shorter than one memory window ({})",
                self.n_mem + 2
            )));
        }
        if let Selection::Random { per_trajectory } = self.selection {
            let available = k - self.n_mem - 1;
            if per_trajectory == 0 || per_trajectory > available {
                return Err(Error::Config(format!(
                    "per_trajectory must be in 1..={available} for traj_len {k} and n_mem {}",
                    self.n_mem
                )));
            }
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(format!("hidden widths must be positive, got {:?}", self.hidden)));
        }
        self.train.validate()?;
        if !(self.eval_horizon > 0.0) || !self.eval_horizon.is_finite() {
            return Err(Error::Config(format!("eval_horizon must be positive, got {}", self.eval_horizon)));
        }
        if self.n_eval_runs == 0 {
            return Err(Error::Config("n_eval_runs must be at least 1".into()));
        }
        if self.sweep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("sweep must be strictly ascending, got {:?}", self.sweep)));
        }
        Ok(())
    }

    pub fn system_spec(&self) -> Result<SystemSpec> {
        let spec = if self.system == "linear-generic" {
            if !self.params.is_empty() {
                return Err(Error::Config("linear-generic takes no params".into()));
            }
            let path = self
                .matrices
                .as_ref()
                .ok_or_else(|| Error::Config("linear-generic needs a `matrices` file".into()))?;
            SystemSpec::linear(&LinearMZOracle::from_block_file(path, 0)?)
        } else {
            if self.matrices.is_some() {
                return Err(Error::Config(format!("system {} takes no `matrices` file", self.system)));
            }
            SystemSpec::from_name(&self.system, &self.params)?
        };
        match self.observed {
            Some(d) => spec.with_observed(d),
            None => Ok(spec),
        }
    }

    pub fn solver(&self) -> Result<SolverConfig> {
        SolverConfig::new(self.delta, self.substeps)
    }

    pub fn traj_len(&self) -> usize {
        self.traj_len.unwrap_or(self.n_mem + 2)
    }

    /// Copy with a different memory length, as used by each sweep cell.
    pub fn with_n_mem(&self, n_mem: usize) -> Self {
        Self { n_mem, ..self.clone() }
    }

    pub fn selection_strategy(&self) -> SelectionStrategy {
        match self.selection {
            Selection::Deterministic => SelectionStrategy::Deterministic,
            Selection::Random { per_trajectory } => SelectionStrategy::Random {
                per_trajectory,
                seed: seed::derive(self.seed, stage::SELECTION),
            },
        }
    }

    pub fn generate(&self) -> Result<TrajectorySet> {
        self.validate()?;
        generate_trajectories(
            &self.system_spec()?,
            &self.solver()?,
            &self.domain,
            self.n_traj,
            self.traj_len(),
            seed::derive(self.seed, stage::INITIAL_CONDITIONS),
        )
    }

    pub fn build_dataset(&self, trajs: &TrajectorySet) -> Result<MemoryWindowDataset> {
        build_dataset(trajs, self.n_mem, &self.selection_strategy())
    }

    pub fn init_model(&self, d: usize) -> Result<NetworkParams> {
        init_params(d, self.n_mem, &self.hidden, seed::derive(self.seed, stage::INIT))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: seed::derive(self.seed, stage::TRAIN),
            ..self.train.clone()
        }
    }

    /// Trains a freshly initialized model on `ds`.
    pub fn train(&self, ds: &MemoryWindowDataset) -> Result<TrainedRun> {
        let mut init = self.init_model(ds.d())?;
        init.set_scaling(Scaling::fit(ds.inputs().view(), ds.targets().view())?)?;
        if let Some(msg) = data_size_warning(ds.len(), init.count_params()) {
            log::warn!("{msg}");
        }
        let (model, report) = train_model(&init, ds, &self.train_config())?;
        Ok(TrainedRun {
            model,
            report,
            dataset_len: ds.len(),
        })
    }

    /// Generate, window and train in one go.
    pub fn train_pipeline(&self) -> Result<TrainedRun> {
        let trajs = self.generate()?;
        let ds = self.build_dataset(&trajs)?;
        self.train(&ds)
    }

    pub fn evaluate(&self, model: &NetworkParams) -> Result<Evaluation> {
        self.evaluate_over(model, self.eval_horizon, self.n_eval_runs)
    }

    pub fn evaluate_over(&self, model: &NetworkParams, horizon: f64, runs: usize) -> Result<Evaluation> {
        evaluate_model(
            model,
            &self.system_spec()?,
            &self.solver()?,
            &self.domain,
            horizon,
            runs,
            seed::derive(self.seed, stage::EVAL),
        )
    }

    /// Rolls `model` out from the truth trajectory of one random initial
    /// condition. Returns the prediction and the reference it is compared
    /// against; `steps` defaults to the evaluation horizon.
    pub fn predict(&self, model: &NetworkParams, steps: Option<usize>) -> Result<(RolloutResult, Array2<f64>)> {
        let spec = self.system_spec()?;
        let solver = self.solver()?;
        let window = model.n_mem() + 1;
        let steps = match steps {
            Some(s) => s,
            None => (horizon_samples(self.eval_horizon, self.delta)? + 1).saturating_sub(window),
        };
        let x0 = sample_initial_conditions(&self.domain, 1, seed::derive(self.seed, stage::PREDICT))
            .pop()
            .unwrap();
        let reference = observed_trajectory(&spec, &solver, x0.view(), window + steps)?;
        let pred = rollout(model, reference.slice(s![..window, ..]), steps, self.delta)?;
        Ok((pred, reference))
    }

    /// Learned model against the homogenized slow system (slow-fast example only).
    pub fn compare_reduced(&self, model: &NetworkParams, horizon: f64, runs: usize) -> Result<ReducedComparison> {
        if self.system != "example3" {
            return Err(Error::Config(format!(
                "compare-reduced needs the example3 system, config has {}",
                self.system
            )));
        }
        compare_reduced_example3(
            model,
            &self.system_spec()?,
            &self.solver()?,
            &self.domain,
            horizon,
            runs,
            seed::derive(self.seed, stage::EVAL),
        )
    }

    /// Checks the memory decomposition of a linear system against the
    /// derivative of its exact solution at `points` random `(x0, t)`.
    pub fn oracle_check(&self, points: usize, quad_points: usize) -> Result<Vec<OracleCheckRow>> {
        let mut oracle = self
            .system_spec()?
            .linear_oracle(quad_points)
            .ok_or_else(|| Error::Config(format!("system {} has no linear block structure", self.system)))?;
        oracle.quad_points = quad_points;
        decomposition_residuals(&oracle, &self.domain, points, 2.0, seed::derive(self.seed, "oracle-check"))
    }
}

/// Warns when the dataset is smaller than five times the parameter count.
pub fn data_size_warning(windows: usize, params: usize) -> Option<String> {
    (windows < 5 * params).then(|| {
        format!("dataset has {windows} windows, fewer than 5x the {params} network parameters")
    })
}

/// One point of a decomposition check.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleCheckRow {
    pub t: f64,
    /// Max-norm gap between the three-term sum and the derivative.
    pub residual: f64,
}

/// Compares Markov + memory + noise with a central difference of the
/// exact solution, at `points` random initial states in `domain` and times
/// uniform in `(0.05, t_max)`.
pub fn decomposition_residuals(
    oracle: &LinearMZOracle,
    domain: &Domain,
    points: usize,
    t_max: f64,
    seed: u64,
) -> Result<Vec<OracleCheckRow>> {
    use rand::Rng;
    let mut rng = seed::rng(seed);
    let starts = sample_initial_conditions(domain, points, seed::derive(seed, stage::INITIAL_CONDITIONS));
    let d = oracle.d();
    let h = 1e-5;
    starts
        .iter()
        .map(|x0| {
            let t = rng.random_range(0.05..t_max);
            let plus = oracle.exact_linear_solution(x0.view(), t + h)?;
            let minus = oracle.exact_linear_solution(x0.view(), t - h)?;
            let derivative = (&plus.slice(s![..d]) - &minus.slice(s![..d])) / (2.0 * h);
            let terms = oracle.decomposition(x0.view(), t)?;
            let residual = (&terms.total() - &derivative).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            Ok(OracleCheckRow { t, residual })
        })
        .collect()
}

pub fn oracle_check_csv(rows: &[OracleCheckRow]) -> String {
    let mut out = String::from("t,residual\n");
    for r in rows {
        writeln!(out, "{},{}", fmt_f64(r.t), fmt_f64(r.residual)).unwrap();
    }
    out
}

/// Time-averaged error of one prediction.
pub fn prediction_error(pred: &RolloutResult, reference: &Array2<f64>) -> Result<f64> {
    Ok(error_series(pred, reference.view())?.time_average())
}
