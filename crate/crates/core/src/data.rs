//! Observed-trajectory generation and memory-window datasets.
//!
//! A memory window is `n_mem + 2` consecutive observed states. The first
//! `n_mem + 1` become the network input, stacked newest first
//! `(z_n, z_{n-1}, ..., z_{n-n_mem})`; the last one is the target `z_{n+1}`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{integrate, Domain, SolverConfig, SystemSpec};
use crate::error::{check_dim, Error, Result};
use crate::seed;
use crate::textio::{fmt_f64, join_floats, parse_floats, parse_header, parse_value};

/// `N_T` observed trajectories sampled every `delta`. Trajectory `i` is a
/// `K_i x d` array; row `k` is `z(k * delta)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySet {
    d: usize,
    delta: f64,
    trajectories: Vec<Array2<f64>>,
}

impl TrajectorySet {
    pub fn new(d: usize, delta: f64, trajectories: Vec<Array2<f64>>) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("observed dimension must be positive".into()));
        }
        if !(delta > 0.0) {
            return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
        }
        for (i, traj) in trajectories.iter().enumerate() {
            check_dim("trajectory width", d, traj.ncols())?;
            if traj.nrows() == 0 {
                return Err(Error::InvalidArgument(format!("trajectory {i} is empty")));
            }
            if traj.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("trajectory {i} has non-finite entries")));
            }
        }
        Ok(Self {
            d,
            delta,
            trajectories,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn trajectories(&self) -> &[Array2<f64>] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "d={} delta={} n_traj={}", self.d, fmt_f64(self.delta), self.len()).unwrap();
        for traj in &self.trajectories {
            writeln!(out, "K={}", traj.nrows()).unwrap();
            for row in traj.rows() {
                writeln!(out, "{}", join_floats(row.iter())).unwrap();
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (lineno, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "empty trajectory file"))?;
        let fields = parse_header(header, &["d", "delta", "n_traj"], path, lineno)?;
        let d: usize = parse_value(fields[0], "d", path, lineno)?;
        let delta: f64 = parse_value(fields[1], "delta", path, lineno)?;
        let n_traj: usize = parse_value(fields[2], "n_traj", path, lineno)?;
        let mut trajectories = Vec::with_capacity(n_traj);
        for _ in 0..n_traj {
            let (lineno, line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, 0, format!("expected {n_traj} trajectories")))?;
            let k_field = parse_header(line, &["K"], path, lineno)?;
            let k: usize = parse_value(k_field[0], "K", path, lineno)?;
            let mut flat = Vec::with_capacity(k * d);
            for _ in 0..k {
                let (lineno, line) = lines
                    .next()
                    .ok_or_else(|| Error::parse(path, 0, "trajectory ends early"))?;
                let row = parse_floats(line, path, lineno)?;
                if row.len() != d {
                    return Err(Error::parse(path, lineno, format!("row has {} values, expected {d}", row.len())));
                }
                flat.extend(row);
            }
            trajectories.push(Array2::from_shape_vec((k, d), flat).expect("row count checked"));
        }
        if let Some((lineno, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(Error::parse(path, lineno, format!("unexpected trailing content `{extra}`")));
        }
        Self::new(d, delta, trajectories)
    }
}

/// Input/target pairs for one-step training. `inputs` is `J x d(n_mem+1)`
/// with newest-first blocks; `targets` is `J x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryWindowDataset {
    d: usize,
    n_mem: usize,
    inputs: Array2<f64>,
    targets: Array2<f64>,
}

impl MemoryWindowDataset {
    pub fn new(d: usize, n_mem: usize, inputs: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("observed dimension must be positive".into()));
        }
        check_dim("dataset input width", d * (n_mem + 1), inputs.ncols())?;
        check_dim("dataset target width", d, targets.ncols())?;
        check_dim("dataset row count", inputs.nrows(), targets.nrows())?;
        Ok(Self {
            d,
            n_mem,
            inputs,
            targets,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_mem(&self) -> usize {
        self.n_mem
    }

    /// Input width `d (n_mem + 1)`.
    pub fn input_dim(&self) -> usize {
        self.d * (self.n_mem + 1)
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &Array2<f64> {
        &self.targets
    }

    pub fn input(&self, j: usize) -> ArrayView1<'_, f64> {
        self.inputs.row(j)
    }

    pub fn target(&self, j: usize) -> ArrayView1<'_, f64> {
        self.targets.row(j)
    }

    /// Rows reordered by `order` (a permutation or a subset).
    pub fn select(&self, order: &[usize]) -> Self {
        Self {
            d: self.d,
            n_mem: self.n_mem,
            inputs: self.inputs.select(ndarray::Axis(0), order),
            targets: self.targets.select(ndarray::Axis(0), order),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "d={} n_mem={} J={}", self.d, self.n_mem, self.len()).unwrap();
        for (input, target) in self.inputs.rows().into_iter().zip(self.targets.rows()) {
            writeln!(out, "{} ; {}", join_floats(input.iter()), join_floats(target.iter())).unwrap();
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (lineno, header) = lines.next().ok_or_else(|| Error::parse(path, 1, "empty dataset file"))?;
        let fields = parse_header(header, &["d", "n_mem", "J"], path, lineno)?;
        let d: usize = parse_value(fields[0], "d", path, lineno)?;
        let n_mem: usize = parse_value(fields[1], "n_mem", path, lineno)?;
        let rows: usize = parse_value(fields[2], "J", path, lineno)?;
        let width = d * (n_mem + 1);
        let mut inputs = Vec::with_capacity(rows * width);
        let mut targets = Vec::with_capacity(rows * d);
        for j in 0..rows {
            let (lineno, line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, j + 2, format!("expected {rows} rows, found {j}")))?;
            let (left, right) = line
                .split_once(';')
                .ok_or_else(|| Error::parse(path, lineno, "missing `;` between input and target"))?;
            let input = parse_floats(left, path, lineno)?;
            let target = parse_floats(right, path, lineno)?;
            if input.len() != width {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("input has {} values, header implies {width}", input.len()),
                ));
            }
            if target.len() != d {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("target has {} values, header implies {d}", target.len()),
                ));
            }
            inputs.extend(input);
            targets.extend(target);
        }
        if let Some((lineno, _)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(Error::parse(path, lineno, "more rows than the header's J"));
        }
        Self::new(
            d,
            n_mem,
            Array2::from_shape_vec((rows, width), inputs).unwrap(),
            Array2::from_shape_vec((rows, d), targets).unwrap(),
        )
    }
}

/// How windows are picked from each trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionStrategy {
    /// Every start position `0..=K - n_mem - 2`.
    Deterministic,
    /// `per_trajectory` distinct start positions drawn uniformly.
    Random { per_trajectory: usize, seed: u64 },
}

/// Where a dataset row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowOrigin {
    pub trajectory: usize,
    /// Zero-based index of the oldest entry of the window.
    pub start: usize,
}

/// Uniform samples on the box, reproducible for a fixed seed.
pub fn sample_initial_conditions(domain: &Domain, count: usize, seed: u64) -> Vec<Array1<f64>> {
    let mut rng = seed::rng(seed);
    (0..count)
        .map(|_| {
            domain
                .lower()
                .iter()
                .zip(domain.upper())
                .map(|(&lo, &hi)| rng.random_range(lo..hi))
                .collect()
        })
        .collect()
}

/// Integrates `n_traj` random initial conditions from `domain` and keeps the
/// observed components of `traj_len` samples each.
pub fn generate_trajectories(
    spec: &SystemSpec,
    config: &SolverConfig,
    domain: &Domain,
    n_traj: usize,
    traj_len: usize,
    seed: u64,
) -> Result<TrajectorySet> {
    check_dim("domain", spec.n(), domain.dim())?;
    if traj_len == 0 {
        return Err(Error::InvalidArgument("trajectory length must be at least 1".into()));
    }
    let initial = sample_initial_conditions(domain, n_traj, seed);
    let trajectories = initial
        .par_iter()
        .enumerate()
        .map(|(i, x0)| observed_trajectory(spec, config, x0.view(), traj_len).map_err(|e| Error::Trajectory {
            trajectory: i,
            source: Box::new(e),
        }))
        .collect::<Result<Vec<_>>>()?;
    TrajectorySet::new(spec.d(), config.delta, trajectories)
}

/// Observed part of `len` samples starting at `x0` (row 0 is `z(0)`).
pub fn observed_trajectory(
    spec: &SystemSpec,
    config: &SolverConfig,
    x0: ArrayView1<f64>,
    len: usize,
) -> Result<Array2<f64>> {
    if len == 1 {
        check_dim("initial state", spec.n(), x0.len())?;
        return Ok(x0.slice(s![..spec.d()]).to_owned().insert_axis(ndarray::Axis(0)));
    }
    let full = integrate(spec, config, x0, len - 1)?;
    Ok(full.slice(s![.., ..spec.d()]).to_owned())
}

/// Stacks `len` consecutive rows ending at `newest` into one newest-first
/// vector.
pub fn stack_newest_first(traj: &Array2<f64>, newest: usize, len: usize) -> Array1<f64> {
    let d = traj.ncols();
    let mut out = Array1::zeros(d * len);
    for lag in 0..len {
        out.slice_mut(s![lag * d..(lag + 1) * d]).assign(&traj.row(newest - lag));
    }
    out
}

pub fn build_dataset(
    trajs: &TrajectorySet,
    n_mem: usize,
    strategy: &SelectionStrategy,
) -> Result<MemoryWindowDataset> {
    build_dataset_indexed(trajs, n_mem, strategy).map(|(ds, _)| ds)
}

/// Like [`build_dataset`], also reporting the origin of every row.
pub fn build_dataset_indexed(
    trajs: &TrajectorySet,
    n_mem: usize,
    strategy: &SelectionStrategy,
) -> Result<(MemoryWindowDataset, Vec<WindowOrigin>)> {
    let window = n_mem + 2;
    let mut origins = Vec::new();
    match *strategy {
        SelectionStrategy::Deterministic => {
            for (i, traj) in trajs.trajectories().iter().enumerate() {
                // Too-short trajectories are skipped.
                if traj.nrows() >= window {
                    origins.extend((0..=traj.nrows() - window).map(|start| WindowOrigin { trajectory: i, start }));
                }
            }
        }
        SelectionStrategy::Random { per_trajectory, seed } => {
            if per_trajectory == 0 {
                return Err(Error::InvalidArgument("random selection needs at least one window per trajectory".into()));
            }
            let mut rng = seed::rng(seed);
            for (i, traj) in trajs.trajectories().iter().enumerate() {
                let available = (traj.nrows() + 1).saturating_sub(window);
                if per_trajectory > available {
                    return Err(Error::InsufficientWindows {
                        trajectory: i,
                        requested: per_trajectory,
                        available,
                    });
                }
                let mut starts = rand::seq::index::sample(&mut rng, available, per_trajectory).into_vec();
                starts.sort_unstable();
                origins.extend(starts.into_iter().map(|start| WindowOrigin { trajectory: i, start }));
            }
        }
    }

    let d = trajs.d();
    let width = d * (n_mem + 1);
    let mut inputs = Array2::zeros((origins.len(), width));
    let mut targets = Array2::zeros((origins.len(), d));
    for (row, origin) in origins.iter().enumerate() {
        let traj = &trajs.trajectories()[origin.trajectory];
        let newest = origin.start + n_mem;
        inputs.row_mut(row).assign(&stack_newest_first(traj, newest, n_mem + 1));
        targets.row_mut(row).assign(&traj.row(newest + 1));
    }
    Ok((MemoryWindowDataset::new(d, n_mem, inputs, targets)?, origins))
}
