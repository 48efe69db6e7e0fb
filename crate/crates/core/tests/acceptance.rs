//! Acceptance suite. Runs every criterion in turn, prints one PASS/FAIL
//! line per criterion and exits non-zero if any failed.
//!
//! `MZFLOW_CRITERIA=1,2,5` restricts the run to the listed criteria.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use mzflow::data::{build_dataset_indexed, MemoryWindowDataset, SelectionStrategy, TrajectorySet};
use mzflow::dynamics::{example4_blocks, integrate, LinearMZOracle, SolverConfig, SystemSpec};
use mzflow::experiment::{ExperimentConfig, Selection, TrainedRun};
use mzflow::linalg::matrix_exponential;
use mzflow::net::{init_params, NetworkParams};
use mzflow::rollout::{memory_sweep_runs, rollout_csv, sweep_csv, SweepRow};
use mzflow::train::mse_loss;
use ndarray::{array, s, Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn max_abs(a: ArrayView1<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `e^{At}` for a real 2x2 matrix with complex eigenvalues `a ± ib`:
/// `e^{at} [cos(bt) I + sin(bt)/b (A - aI)]`.
fn expm_2x2(m: &Array2<f64>, t: f64) -> Array2<f64> {
    let a = 0.5 * (m[[0, 0]] + m[[1, 1]]);
    let det = m[[0, 0]] * m[[1, 1]] - m[[0, 1]] * m[[1, 0]];
    let b2 = det - a * a;
    assert!(b2 > 0.0, "closed form needs complex eigenvalues");
    let b = b2.sqrt();
    let shifted = m - &(Array2::<f64>::eye(2) * a);
    (Array2::<f64>::eye(2) * (b * t).cos() + shifted * ((b * t).sin() / b)) * (a * t).exp()
}

/// Truncated Taylor series with scaling and squaring, kept deliberately
/// simple and separate from the library's Padé implementation.
fn expm_taylor(m: &Array2<f64>, t: f64) -> Array2<f64> {
    let scaled = m * t;
    let norm: f64 = scaled.iter().map(|v| v.abs()).sum();
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let x = &scaled / 2f64.powi(squarings);
    let n = m.nrows();
    let mut sum = Array2::<f64>::eye(n);
    let mut term = Array2::<f64>::eye(n);
    for k in 1..30 {
        term = term.dot(&x) / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = sum.dot(&sum);
    }
    sum
}

fn example1_matrix() -> Array2<f64> {
    array![[1.0, -4.0], [4.0, -2.0]]
}

// 1. Analytic gradients of the training loss against central differences.
fn criterion1() -> Outcome {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    for seed in 0..5 {
        let params = init_params(2, 3, &[10, 10], seed).unwrap();
        let mut r = rng(1000 + seed);
        let rows = 16;
        let inputs = Array2::from_shape_fn((rows, 8), |_| r.random_range(-1.5..1.5));
        let targets = Array2::from_shape_fn((rows, 2), |_| r.random_range(-1.0..1.0));
        let ds = MemoryWindowDataset::new(2, 3, inputs, targets).unwrap();
        let (_, mut grads) = params.squared_error_gradient(ds.inputs().view(), ds.targets().view()).unwrap();
        grads.scale(1.0 / rows as f64);
        let loss = |p: &NetworkParams| mse_loss(p, &ds).unwrap();
        let compare = |analytic: f64, plus: NetworkParams, minus: NetworkParams| {
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            // Below 1e-4 the central difference itself is only good to about
            // 1e-11 absolute (rounding in the loss over a 1e-5 step), so those
            // components are held to 1e-6 * 1e-4 instead.
            let gap = (analytic - numeric).abs();
            (gap / analytic.abs().max(numeric.abs()).max(1e-4), gap)
        };
        for l in 0..params.weights.len() {
            for ((r, c), &g) in grads.weights[l].indexed_iter() {
                let mut plus = params.clone();
                plus.weights[l][[r, c]] += h;
                let mut minus = params.clone();
                minus.weights[l][[r, c]] -= h;
                let (rel, gap) = compare(g, plus, minus);
                worst = worst.max(rel);
                worst_abs = worst_abs.max(gap);
            }
            for (i, &g) in grads.biases[l].indexed_iter() {
                let mut plus = params.clone();
                plus.biases[l][i] += h;
                let mut minus = params.clone();
                minus.biases[l][i] -= h;
                let (rel, gap) = compare(g, plus, minus);
                worst = worst.max(rel);
                worst_abs = worst_abs.max(gap);
            }
        }
    }
    Outcome::new(
        worst <= 1e-6,
        format!("max relative error {worst:.2e} over 5 nets (limit 1e-6), max absolute gap {worst_abs:.2e}"),
    )
}

// 2. Observed RK4 order on Example 1 against the closed-form solution.
fn criterion2() -> Outcome {
    let spec = SystemSpec::example1(2.0);
    let x0 = array![1.3, -0.7];
    let exact = expm_2x2(&example1_matrix(), 1.0).dot(&x0);
    let mut points = Vec::new();
    for substeps in [16, 32, 64, 128] {
        let cfg = SolverConfig::new(1.0, substeps).unwrap();
        let out = integrate(&spec, &cfg, x0.view(), 1).unwrap();
        let err = max_abs((&out.row(1) - &exact).view());
        points.push(((1.0 / substeps as f64).ln(), err.ln()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let slope = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / points.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    Outcome::new((3.8..=4.2).contains(&slope), format!("fitted slope {slope:.3} (want [3.8, 4.2])"))
}

// 3. Semigroup and inverse identities of the matrix exponential.
fn criterion3() -> Outcome {
    let mut r = rng(3);
    let random = Array2::from_shape_fn((5, 5), |_| r.random_range(-1.0..1.0));
    let a22 = example4_blocks(0).a22().to_owned();
    let mut worst: f64 = 0.0;
    for m in [random, a22] {
        let e = |t: f64| matrix_exponential(&(&m * t).view()).unwrap();
        let n = m.nrows();
        for (s, t) in [(0.3, 0.7), (1.1, 2.4), (-0.5, 1.5)] {
            let lhs = e(s + t);
            let gap = &lhs - &e(s).dot(&e(t));
            let scale = lhs.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            worst = worst.max(gap.iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale);
        }
        let gap = e(1.0).dot(&e(-1.0)) - Array2::<f64>::eye(n);
        worst = worst.max(gap.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    Outcome::new(worst <= 1e-10, format!("max identity gap {worst:.2e} (limit 1e-10)"))
}

/// Largest gap between the three-term decomposition and a central
/// difference of the exact solution, and the same gap when the orthogonal
/// term uses `A21` in place of `A12`.
fn decomposition_gaps(oracle: &LinearMZOracle, exact: impl Fn(&Array1<f64>, f64) -> Array1<f64>, seed: u64) -> (f64, f64) {
    let d = oracle.d();
    let n = oracle.n();
    let mut r = rng(seed);
    let (mut worst, mut worst_alt): (f64, f64) = (0.0, 0.0);
    let h = 1e-5;
    for _ in 0..20 {
        let x0 = Array1::from_shape_fn(n, |_| r.random_range(-2.0..2.0));
        let t = r.random_range(0.05..2.0);
        let derivative = (exact(&x0, t + h) - exact(&x0, t - h)).slice(s![..d]).to_owned() / (2.0 * h);
        let terms = oracle.decomposition(x0.view(), t).unwrap();
        worst = worst.max(max_abs((&terms.total() - &derivative).view()));
        let w0 = x0.slice(s![d..]).to_owned();
        let alt_noise = oracle.a21().dot(&expm_taylor(&oracle.a22().to_owned(), t).dot(&w0));
        let alt = &terms.markov + &terms.memory + &alt_noise;
        worst_alt = worst_alt.max(max_abs((&alt - &derivative).view()));
    }
    (worst, worst_alt)
}

// 4. Markov + memory + orthogonal terms reproduce the derivative.
fn criterion4() -> Outcome {
    let ex1 = SystemSpec::example1(2.0).linear_oracle(1000).unwrap();
    let a1 = example1_matrix();
    let (g1, alt1) = decomposition_gaps(&ex1, |x0, t| expm_2x2(&a1, t).dot(x0), 41);
    let ex4 = example4_blocks(1000);
    let a4 = ex4.assembled();
    let (g4, alt4) = decomposition_gaps(&ex4, |x0, t| expm_taylor(&a4, t).dot(x0), 44);
    let pass = g1 <= 1e-4 && g4 <= 1e-4 && alt1 > 1e-2 && alt4 > 1e-2;
    Outcome::new(
        pass,
        format!(
            "max gap example1 {g1:.2e}, example4 {g4:.2e} (limit 1e-4); with A21 as the noise coefficient {alt1:.2e}, {alt4:.2e} (must fail)"
        ),
    )
}

// 5. Window counts and contents of both selection strategies.
fn criterion5() -> Outcome {
    let mut r = rng(5);
    // entry (i, k) = 1000 i + k identifies every sample
    let lengths: Vec<usize> = (0..12).map(|_| r.random_range(12..60)).collect();
    let trajs: Vec<Array2<f64>> = lengths
        .iter()
        .enumerate()
        .map(|(i, &k)| Array2::from_shape_fn((k, 1), |(row, _)| (1000 * i + row) as f64))
        .collect();
    let set = TrajectorySet::new(1, 0.02, trajs.clone()).unwrap();
    let mut failures = Vec::new();
    let window_ok = |ds: &MemoryWindowDataset, row: usize, traj: usize, start: usize, n_mem: usize| {
        let base = (1000 * traj + start) as f64;
        (0..=n_mem).all(|lag| ds.input(row)[lag] == base + (n_mem - lag) as f64)
            && ds.target(row)[0] == base + (n_mem + 1) as f64
    };
    for n_mem in [0, 3, 10] {
        let (ds, origins) = build_dataset_indexed(&set, n_mem, &SelectionStrategy::Deterministic).unwrap();
        for (i, &k) in lengths.iter().enumerate() {
            let count = origins.iter().filter(|o| o.trajectory == i).count();
            if count != k - n_mem - 1 {
                failures.push(format!("deterministic n_mem={n_mem} traj {i}: {count} windows, want {}", k - n_mem - 1));
            }
        }
        if !origins.iter().enumerate().all(|(row, o)| window_ok(&ds, row, o.trajectory, o.start, n_mem)) {
            failures.push(format!("deterministic n_mem={n_mem}: window contents"));
        }
        let strategy = SelectionStrategy::Random { per_trajectory: 2, seed: 9 };
        let (ds, origins) = build_dataset_indexed(&set, n_mem, &strategy).unwrap();
        for i in 0..lengths.len() {
            let starts: BTreeSet<usize> = origins.iter().filter(|o| o.trajectory == i).map(|o| o.start).collect();
            let valid = starts.iter().all(|&s| s + n_mem + 1 < lengths[i]);
            if starts.len() != 2 || !valid {
                failures.push(format!("random n_mem={n_mem} traj {i}: starts {starts:?}"));
            }
        }
        if !origins.iter().enumerate().all(|(row, o)| window_ok(&ds, row, o.trajectory, o.start, n_mem)) {
            failures.push(format!("random n_mem={n_mem}: window contents"));
        }
    }
    // n_mem = 0 is the plain adjacent-pair dataset
    let (pairs, _) = build_dataset_indexed(&set, 0, &SelectionStrategy::Deterministic).unwrap();
    let mut expected = Vec::new();
    for traj in &trajs {
        for k in 0..traj.nrows() - 1 {
            expected.push((traj[[k, 0]], traj[[k + 1, 0]]));
        }
    }
    let got: Vec<(f64, f64)> = (0..pairs.len()).map(|j| (pairs.input(j)[0], pairs.target(j)[0])).collect();
    if got != expected {
        failures.push("n_mem=0 does not reproduce the adjacent pairs".into());
    }
    if failures.is_empty() {
        Outcome::new(true, "counts K-n_M-1, distinct random windows and adjacent pairs all match")
    } else {
        Outcome::new(false, failures.join("; "))
    }
}

// 6. Fully observed linear system without memory: the learned one-step map.
fn criterion6() -> Outcome {
    let base = ExperimentConfig::preset("example1-fast").unwrap();
    let cfg = ExperimentConfig {
        observed: Some(2),
        n_mem: 0,
        n_traj: 10_000,
        traj_len: None,
        selection: Selection::Random { per_trajectory: 1 },
        hidden: vec![30, 30],
        ..base.clone()
    };
    let run = cfg.train_pipeline().unwrap();
    let step = expm_2x2(&example1_matrix(), cfg.delta);
    let mut r = rng(6);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = Array1::from_shape_fn(2, |_| r.random_range(-2.0..2.0));
        let pred = run.model.forward(x.view()).unwrap();
        let err = (&pred - &step.dot(&x)).mapv(|v| v * v).sum().sqrt();
        worst = worst.max(err);
    }
    Outcome::new(
        worst <= 1e-3,
        format!("max one-step error {worst:.2e} on 100 states (limit 1e-3), final loss {:.2e}", run.report.final_loss),
    )
}

// 7. Example 1 memory sweep saturates.
fn criterion7(sweep: &[(SweepRow, TrainedRun)]) -> Outcome {
    let err = |n: usize| sweep.iter().find(|(r, _)| r.n_mem == n).unwrap().0.mean_error;
    let (e5, e30, e40) = (err(5), err(30), err(40));
    let listing: Vec<String> = sweep.iter().map(|(r, _)| format!("{}:{:.2e}", r.n_mem, r.mean_error)).collect();
    Outcome::new(
        e30 <= 0.5 * e5 && e40 <= 2.0 * e30,
        format!(
            "errors [{}]; e(30)/e(5) = {:.3} (limit 0.5), e(40)/e(30) = {:.3} (limit 2)",
            listing.join(", "),
            e30 / e5,
            e40 / e30
        ),
    )
}

// 8. Damped pendulum with n_M = 20 over t in [0, 100].
fn criterion8() -> Outcome {
    let cfg = ExperimentConfig::preset("example2").unwrap();
    let run = cfg.train_pipeline().unwrap();
    let eval = cfg.evaluate_over(&run.model, 100.0, 5).unwrap();
    let mean = eval.mean_error();
    Outcome::new(
        mean <= 0.1,
        format!("mean time-averaged error {mean:.3e} over 5 runs (limit 0.1), per run {:?}", eval.per_run),
    )
}

// 9. Slow-fast system: learned model against the homogenized system.
fn criterion9() -> Outcome {
    let cfg = ExperimentConfig::preset("example3").unwrap();
    let run = cfg.train_pipeline().unwrap();
    let cmp = cfg.compare_reduced(&run.model, 50.0, 10).unwrap();
    let (nn, reduced) = (cmp.nn_mean_error(), cmp.reduced_mean_error());
    Outcome::new(
        nn <= reduced,
        format!("mean error over t in [0, 50], 10 runs: network {nn:.3e}, homogenized {reduced:.3e}"),
    )
}

/// Every artifact of one example1 run at `n_mem = 30`, as bytes.
fn example1_artifacts(cfg: &ExperimentConfig, run: &TrainedRun) -> Vec<(&'static str, Vec<u8>)> {
    let dir = tempfile::tempdir().unwrap();
    let trajs = cfg.generate().unwrap();
    trajs.save(&dir.path().join("t")).unwrap();
    cfg.build_dataset(&trajs).unwrap().save(&dir.path().join("d")).unwrap();
    let (pred, reference) = cfg.predict(&run.model, None).unwrap();
    let eval = cfg.evaluate(&run.model).unwrap();
    let row = SweepRow {
        n_mem: cfg.n_mem,
        memory_length: cfg.n_mem as f64 * cfg.delta,
        mean_error: eval.mean_error(),
        final_loss: run.report.final_loss,
    };
    vec![
        ("trajectories", std::fs::read(dir.path().join("t")).unwrap()),
        ("dataset", std::fs::read(dir.path().join("d")).unwrap()),
        ("checkpoint", run.model.to_checkpoint_string().into_bytes()),
        ("train log", run.report.to_csv().into_bytes()),
        ("rollout csv", rollout_csv(&pred, Some(reference.view())).unwrap().into_bytes()),
        ("sweep csv", sweep_csv(&[row]).into_bytes()),
    ]
}

// 10. Two full example1 runs give identical artifacts.
fn criterion10(first: Option<&TrainedRun>) -> Outcome {
    let cfg = ExperimentConfig::preset("example1-fast").unwrap().with_n_mem(30);
    let first = match first {
        Some(run) => run.clone(),
        None => cfg.train_pipeline().unwrap(),
    };
    let second = cfg.train_pipeline().unwrap();
    let a = example1_artifacts(&cfg, &first);
    let b = example1_artifacts(&cfg, &second);
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0).collect();
    if differing.is_empty() {
        let names: Vec<&str> = a.iter().map(|x| x.0).collect();
        Outcome::new(true, format!("identical bytes: {}", names.join(", ")))
    } else {
        Outcome::new(false, format!("differing artifacts: {}", differing.join(", ")))
    }
}

fn selected() -> BTreeSet<usize> {
    match std::env::var("MZFLOW_CRITERIA") {
        Ok(list) if !list.trim().is_empty() => list
            .split(',')
            .map(|s| s.trim().parse().expect("MZFLOW_CRITERIA is a comma list of numbers"))
            .collect(),
        _ => (1..=10).collect(),
    }
}

fn main() -> ExitCode {
    let wanted = selected();
    let mut results: Vec<(usize, Outcome, f64)> = Vec::new();
    let mut record = |n: usize, f: &mut dyn FnMut() -> Outcome| {
        if wanted.contains(&n) {
            let clock = Instant::now();
            let outcome = f();
            let secs = clock.elapsed().as_secs_f64();
            println!(
                "criterion {n:>2}: {} ({secs:.1}s) {}",
                if outcome.pass { "PASS" } else { "FAIL" },
                outcome.detail
            );
            results.push((n, outcome, secs));
        }
    };
    record(1, &mut criterion1);
    record(2, &mut criterion2);
    record(3, &mut criterion3);
    record(4, &mut criterion4);
    record(5, &mut criterion5);
    record(6, &mut criterion6);
    let mut sweep = None;
    record(7, &mut || {
        let cfg = ExperimentConfig::preset("example1-fast").unwrap();
        let cells = memory_sweep_runs(&cfg, &cfg.sweep).unwrap();
        let outcome = criterion7(&cells);
        sweep = Some(cells);
        outcome
    });
    record(8, &mut criterion8);
    record(9, &mut criterion9);
    let first = sweep.as_ref().and_then(|cells| cells.iter().find(|(r, _)| r.n_mem == 30).map(|(_, run)| run));
    record(10, &mut || criterion10(first));

    let failed: Vec<usize> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {failed:?}");
        ExitCode::FAILURE
    }
}
