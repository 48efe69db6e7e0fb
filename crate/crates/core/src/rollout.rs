//! Iterated prediction with a trained model, error series against reference
//! trajectories, the memory-length sweep, and the Euler scheme for the
//! discretized linear memory equation.

use std::fmt::Write as _;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::data::{observed_trajectory, sample_initial_conditions};
use crate::dynamics::{integrate, Domain, LinearMZOracle, SolverConfig, SystemSpec};
use crate::error::{check_dim, Error, Result};
use crate::experiment::{ExperimentConfig, TrainedRun};
use crate::linalg::{l2_diff, matrix_exponential};
use crate::net::NetworkParams;
use crate::textio::fmt_f64;

/// A predicted observed trajectory. Rows `0..seed_len` are the seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    pub delta: f64,
    pub states: Array2<f64>,
    pub seed_len: usize,
    /// First row whose prediction was non-finite; that row and all later
    /// ones are NaN.
    pub diverged_at: Option<usize>,
}

impl RolloutResult {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| k as f64 * self.delta).collect()
    }
}

/// Iterates `z_{n+1} = z_n + N(z_n, ..., z_{n-n_mem})` from `n_mem + 1`
/// seed states (rows, oldest first) for `steps` steps.
pub fn rollout(
    model: &NetworkParams,
    seeds: ArrayView2<f64>,
    steps: usize,
    delta: f64,
) -> Result<RolloutResult> {
    let d = model.d();
    let window = model.n_mem() + 1;
    check_dim("rollout seed count", window, seeds.nrows())?;
    check_dim("rollout seed width", d, seeds.ncols())?;
    let total = window + steps;
    let mut states = Array2::from_elem((total, d), f64::NAN);
    states.slice_mut(s![..window, ..]).assign(&seeds);

    let mut stack = Array1::zeros(d * window);
    for lag in 0..window {
        stack
            .slice_mut(s![lag * d..(lag + 1) * d])
            .assign(&seeds.row(window - 1 - lag));
    }
    let mut diverged_at = None;
    for k in window..total {
        let next = model.forward(stack.view())?;
        if next.iter().any(|v| !v.is_finite()) {
            diverged_at = Some(k);
            break;
        }
        states.row_mut(k).assign(&next);
        // shift every block one lag older, newest block in front
        let len = stack.len();
        stack.as_slice_mut().unwrap().copy_within(0..len - d, d);
        stack.slice_mut(s![..d]).assign(&next);
    }
    Ok(RolloutResult {
        delta,
        states,
        seed_len: window,
        diverged_at,
    })
}

/// Pointwise ℓ2 error over time, possibly averaged over several runs.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorSeries {
    pub times: Vec<f64>,
    pub errors: Vec<f64>,
    /// Number of runs averaged into `errors` (1 for a single run).
    pub runs: usize,
}

impl ErrorSeries {
    /// Mean error over `(0, horizon]`, i.e. every sample after `t = 0`.
    pub fn time_average(&self) -> f64 {
        if self.errors.len() < 2 {
            return self.errors.first().copied().unwrap_or(0.0);
        }
        self.errors[1..].iter().sum::<f64>() / (self.errors.len() - 1) as f64
    }

    /// Pointwise mean of equally sampled series.
    pub fn mean(series: &[ErrorSeries]) -> Result<ErrorSeries> {
        let first = series
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot average zero error series".into()))?;
        let mut sum = vec![0.0; first.errors.len()];
        let mut runs = 0;
        for s in series {
            check_dim("error series length", first.errors.len(), s.errors.len())?;
            for (acc, e) in sum.iter_mut().zip(&s.errors) {
                *acc += e * s.runs as f64;
            }
            runs += s.runs;
        }
        Ok(ErrorSeries {
            times: first.times.clone(),
            errors: sum.into_iter().map(|v| v / runs as f64).collect(),
            runs,
        })
    }
}

pub fn error_series(pred: &RolloutResult, reference: ArrayView2<f64>) -> Result<ErrorSeries> {
    check_dim("reference length", pred.len(), reference.nrows())?;
    check_dim("reference width", pred.states.ncols(), reference.ncols())?;
    let errors = pred
        .states
        .rows()
        .into_iter()
        .zip(reference.rows())
        .map(|(p, r)| l2_diff(p.as_slice().unwrap(), &r.to_vec()))
        .collect();
    Ok(ErrorSeries {
        times: pred.times(),
        errors,
        runs: 1,
    })
}

/// CSV `t,z_1..z_d[,ref_1..ref_d,err]`.
pub fn rollout_csv(pred: &RolloutResult, reference: Option<ArrayView2<f64>>) -> Result<String> {
    let d = pred.states.ncols();
    let mut out = String::from("t");
    for i in 1..=d {
        write!(out, ",z_{i}").unwrap();
    }
    let errors = match reference {
        Some(r) => {
            for i in 1..=d {
                write!(out, ",ref_{i}").unwrap();
            }
            out.push_str(",err");
            Some(error_series(pred, r)?)
        }
        None => None,
    };
    out.push('\n');
    for (k, row) in pred.states.rows().into_iter().enumerate() {
        out.push_str(&fmt_f64(k as f64 * pred.delta));
        for v in row {
            write!(out, ",{}", fmt_f64(*v)).unwrap();
        }
        if let (Some(r), Some(e)) = (reference, &errors) {
            for v in r.row(k) {
                write!(out, ",{}", fmt_f64(*v)).unwrap();
            }
            write!(out, ",{}", fmt_f64(e.errors[k])).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

/// Outcome of rolling a model out from several random initial conditions.
#[derive(Clone, Debug)]
pub struct Evaluation {
    /// Mean error series across runs.
    pub mean_series: ErrorSeries,
    /// Time-averaged error of each run.
    pub per_run: Vec<f64>,
}

impl Evaluation {
    /// Mean over runs of the time-averaged error.
    pub fn mean_error(&self) -> f64 {
        self.per_run.iter().sum::<f64>() / self.per_run.len() as f64
    }
}

/// Integrates the truth system from `n_runs` random points of `domain`,
/// seeds the model with the first `n_mem + 1` observed samples and compares
/// the rollout with the truth up to `horizon`.
pub fn evaluate_model(
    model: &NetworkParams,
    system: &SystemSpec,
    solver: &SolverConfig,
    domain: &Domain,
    horizon: f64,
    n_runs: usize,
    seed: u64,
) -> Result<Evaluation> {
    check_dim("model output vs observed dimension", system.d(), model.d())?;
    if n_runs == 0 {
        return Err(Error::InvalidArgument("need at least one evaluation run".into()));
    }
    let samples = horizon_samples(horizon, solver.delta)?;
    let window = model.n_mem() + 1;
    if samples + 1 < window {
        return Err(Error::InvalidArgument(format!(
            "horizon {horizon} is shorter than the {window} seed states"
        )));
    }
    let initial = sample_initial_conditions(domain, n_runs, seed);
    let series = initial
        .par_iter()
        .map(|x0| {
            let truth = observed_trajectory(system, solver, x0.view(), samples + 1)?;
            let pred = rollout(model, truth.slice(s![..window, ..]), samples + 1 - window, solver.delta)?;
            error_series(&pred, truth.view())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        per_run: series.iter().map(ErrorSeries::time_average).collect(),
        mean_series: ErrorSeries::mean(&series)?,
    })
}

pub(crate) fn horizon_samples(horizon: f64, delta: f64) -> Result<usize> {
    if !(horizon > 0.0) {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
    }
    Ok((horizon / delta).round() as usize)
}

/// One row of a memory sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub n_mem: usize,
    pub memory_length: f64,
    pub mean_error: f64,
    pub final_loss: f64,
}

/// For every memory length: regenerate data, train a fresh model and record
/// its mean time-averaged rollout error. `config.n_mem` is ignored.
pub fn memory_sweep(config: &ExperimentConfig, n_mem_list: &[usize]) -> Result<Vec<SweepRow>> {
    Ok(memory_sweep_runs(config, n_mem_list)?.into_iter().map(|(row, _)| row).collect())
}

/// Like [`memory_sweep`], also returning every trained model.
pub fn memory_sweep_runs(config: &ExperimentConfig, n_mem_list: &[usize]) -> Result<Vec<(SweepRow, TrainedRun)>> {
    if n_mem_list.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one memory length".into()));
    }
    if n_mem_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "sweep memory lengths must be strictly ascending, got {n_mem_list:?}"
        )));
    }
    n_mem_list
        .iter()
        .map(|&n_mem| {
            let cell = config.with_n_mem(n_mem);
            let run = cell.train_pipeline()?;
            let eval = cell.evaluate(&run.model)?;
            log::info!("n_mem={n_mem}: mean error {:.4e}", eval.mean_error());
            let row = SweepRow {
                n_mem,
                memory_length: n_mem as f64 * config.delta,
                mean_error: eval.mean_error(),
                final_loss: run.report.final_loss,
            };
            Ok((row, run))
        })
        .collect()
}

/// CSV `n_mem,T_M,mean_error`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("n_mem,T_M,mean_error\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.n_mem, fmt_f64(r.memory_length), fmt_f64(r.mean_error)).unwrap();
    }
    out
}

/// Explicit Euler on the truncated memory equation of a linear system,
///
/// ```text
/// z_{n+1} = z_n + Δ [A11 z_n + M(z_n, ..., z_{n-n_mem})]
/// ```
///
/// with `M` the trapezoid rule for the kernel integral over the last
/// `n_mem Δ` time units. `seeds` holds `n_mem + 1` rows, oldest first; the
/// result has `n_mem + 1 + steps` rows.
pub fn euler_damz(oracle: &LinearMZOracle, seeds: ArrayView2<f64>, steps: usize, delta: f64) -> Result<Array2<f64>> {
    let n_mem = seeds.nrows().checked_sub(1).ok_or_else(|| {
        Error::InvalidArgument("euler_damz needs at least one seed state".into())
    })?;
    euler_with_memory(oracle, seeds, steps, delta, Some(n_mem))
}

/// Euler on the untruncated memory equation from a single initial state:
/// the memory integral always spans `[0, t_n]`.
pub fn euler_amz_full(oracle: &LinearMZOracle, z0: ArrayView1<f64>, steps: usize, delta: f64) -> Result<Array2<f64>> {
    euler_with_memory(oracle, z0.insert_axis(ndarray::Axis(0)), steps, delta, None)
}

fn euler_with_memory(
    oracle: &LinearMZOracle,
    seeds: ArrayView2<f64>,
    steps: usize,
    delta: f64,
    window: Option<usize>,
) -> Result<Array2<f64>> {
    check_dim("seed width", oracle.d(), seeds.ncols())?;
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
    }
    let propagator = matrix_exponential(&(oracle.a22().to_owned() * delta).view())?;
    let mut states: Vec<Array1<f64>> = seeds.rows().into_iter().map(|r| r.to_owned()).collect();
    for _ in 0..steps {
        let current = states.len() - 1;
        let intervals = window.unwrap_or(current).min(current);
        let history = &states[current - intervals..];
        let memory = oracle.memory_with_propagator(history, delta, intervals, &propagator)?;
        let z = &states[current];
        let next = z + &((oracle.a11().dot(z) + memory) * delta);
        states.push(next);
    }
    let d = oracle.d();
    let flat: Vec<f64> = states.iter().flat_map(|z| z.iter().copied()).collect();
    Ok(Array2::from_shape_vec((states.len(), d), flat).unwrap())
}

/// Mean error series of the learned model and of the homogenized system.
#[derive(Clone, Debug)]
pub struct ReducedComparison {
    pub nn: ErrorSeries,
    pub reduced: ErrorSeries,
    /// Time-averaged error of each run, learned model.
    pub nn_per_run: Vec<f64>,
    /// Time-averaged error of each run, homogenized system.
    pub reduced_per_run: Vec<f64>,
}

impl ReducedComparison {
    pub fn nn_mean_error(&self) -> f64 {
        self.nn_per_run.iter().sum::<f64>() / self.nn_per_run.len() as f64
    }

    pub fn reduced_mean_error(&self) -> f64 {
        self.reduced_per_run.iter().sum::<f64>() / self.reduced_per_run.len() as f64
    }

    /// CSV `t,nn_err,reduced_err`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,nn_err,reduced_err\n");
        for ((t, a), b) in self.nn.times.iter().zip(&self.nn.errors).zip(&self.reduced.errors) {
            writeln!(out, "{},{},{}", fmt_f64(*t), fmt_f64(*a), fmt_f64(*b)).unwrap();
        }
        out
    }
}

/// Runs the slow-fast truth system, the homogenized system and the learned
/// model from shared random initial conditions. Both models start from the
/// truth's first `n_mem + 1` observed samples: the network uses all of them
/// as seeds, the homogenized system starts from the last one.
pub fn compare_reduced_example3(
    model: &NetworkParams,
    truth: &SystemSpec,
    solver: &SolverConfig,
    domain: &Domain,
    horizon: f64,
    n_runs: usize,
    seed: u64,
) -> Result<ReducedComparison> {
    check_dim("observed dimension", 3, truth.d())?;
    check_dim("model output", 3, model.d())?;
    if n_runs == 0 {
        return Err(Error::InvalidArgument("need at least one comparison run".into()));
    }
    let samples = horizon_samples(horizon, solver.delta)?;
    let window = model.n_mem() + 1;
    if samples + 1 <= window {
        return Err(Error::InvalidArgument("horizon shorter than the seed window".into()));
    }
    let homogenized = SystemSpec::example3_reduced();
    let initial = sample_initial_conditions(domain, n_runs, seed);
    let pairs = initial
        .par_iter()
        .map(|x0| {
            let reference = observed_trajectory(truth, solver, x0.view(), samples + 1)?;
            let seeds = reference.slice(s![..window, ..]);
            let nn = rollout(model, seeds, samples + 1 - window, solver.delta)?;
            let slow = integrate(&homogenized, solver, seeds.row(window - 1), samples + 1 - window)?;
            let mut reduced_states = Array2::zeros((samples + 1, 3));
            reduced_states.slice_mut(s![..window, ..]).assign(&seeds);
            reduced_states.slice_mut(s![window - 1.., ..]).assign(&slow);
            let reduced = RolloutResult {
                delta: solver.delta,
                states: reduced_states,
                seed_len: window,
                diverged_at: None,
            };
            Ok((error_series(&nn, reference.view())?, error_series(&reduced, reference.view())?))
        })
        .collect::<Result<Vec<_>>>()?;
    let (nn, reduced): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok(ReducedComparison {
        nn_per_run: nn.iter().map(ErrorSeries::time_average).collect(),
        reduced_per_run: reduced.iter().map(ErrorSeries::time_average).collect(),
        nn: ErrorSeries::mean(&nn)?,
        reduced: ErrorSeries::mean(&reduced)?,
    })
}
