//! Benchmark systems, the fixed-step integrator that produces ground truth,
//! and the exact linear Mori-Zwanzig oracle.

mod blocks;
mod oracle;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub use blocks::{example4_blocks, parse_matrix_blocks, EXAMPLE4_SIGMA};
pub use oracle::{LinearMZOracle, MzTerms};

/// Signature of a user-supplied vector field: writes `f(x)` into `out`.
pub type RhsFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// How the fast variable of Example 3 is driven.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FastCoupling {
    /// `y' = (-y + x1 x2) / eps`, the form printed with the example.
    X1X2,
    /// `y' = (-y + x1 x3) / eps`, whose slow limit is the homogenized system.
    X1X3,
}

#[derive(Clone)]
enum VectorField {
    Example1 { alpha: f64 },
    Example2 { alpha: f64, beta: f64 },
    Example3 { eps: f64, coupling: FastCoupling },
    Homogenized,
    Linear(Array2<f64>),
    Custom(Arc<RhsFn>),
}

/// An autonomous system `x' = f(x)` whose first `d` components are observed.
#[derive(Clone)]
pub struct SystemSpec {
    name: String,
    n: usize,
    d: usize,
    params: BTreeMap<String, f64>,
    field: VectorField,
}

impl fmt::Debug for SystemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemSpec")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("d", &self.d)
            .field("params", &self.params)
            .finish()
    }
}

impl SystemSpec {
    /// `x1' = x1 - 4 x2`, `x2' = 4 x1 - alpha x2`; observes `x1`.
    pub fn example1(alpha: f64) -> Self {
        Self {
            name: "example1".into(),
            n: 2,
            d: 1,
            params: BTreeMap::from([("alpha".to_string(), alpha)]),
            field: VectorField::Example1 { alpha },
        }
    }

    /// Damped pendulum `x1' = x2`, `x2' = -alpha x2 - beta sin x1`; observes `x1`.
    pub fn example2(alpha: f64, beta: f64) -> Self {
        Self {
            name: "example2".into(),
            n: 2,
            d: 1,
            params: BTreeMap::from([("alpha".to_string(), alpha), ("beta".to_string(), beta)]),
            field: VectorField::Example2 { alpha, beta },
        }
    }

    /// Slow-fast chaotic system with three slow observed variables and one
    /// fast hidden variable relaxing on the time scale `eps`.
    pub fn example3(eps: f64) -> Self {
        Self::example3_with_coupling(eps, FastCoupling::X1X2)
    }

    pub fn example3_with_coupling(eps: f64, coupling: FastCoupling) -> Self {
        let code = match coupling {
            FastCoupling::X1X2 => 2.0,
            FastCoupling::X1X3 => 3.0,
        };
        Self {
            name: "example3".into(),
            n: 4,
            d: 3,
            params: BTreeMap::from([("eps".to_string(), eps), ("coupling".to_string(), code)]),
            field: VectorField::Example3 { eps, coupling },
        }
    }

    /// The homogenized slow system of Example 3, fully observed.
    pub fn example3_reduced() -> Self {
        Self {
            name: "example3-reduced".into(),
            n: 3,
            d: 3,
            params: BTreeMap::new(),
            field: VectorField::Homogenized,
        }
    }

    /// The 20-dimensional perturbed oscillator built from the shipped
    /// `SIGMA11`..`SIGMA22` tables; observes the first 10 components.
    pub fn example4() -> Self {
        let oracle = example4_blocks(0);
        let mut spec = Self::linear(&oracle);
        spec.name = "example4".into();
        spec
    }

    /// Linear block system `z' = A11 z + A12 w`, `w' = A21 z + A22 w`.
    pub fn linear(oracle: &LinearMZOracle) -> Self {
        Self {
            name: "linear-generic".into(),
            n: oracle.n(),
            d: oracle.d(),
            params: BTreeMap::new(),
            field: VectorField::Linear(oracle.assembled()),
        }
    }

    /// A user-supplied vector field.
    pub fn custom(
        name: impl Into<String>,
        n: usize,
        d: usize,
        rhs: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Result<Self> {
        if d == 0 || d > n {
            return Err(Error::InvalidArgument(format!(
                "observed dimension {d} must be in 1..={n}"
            )));
        }
        Ok(Self {
            name: name.into(),
            n,
            d,
            params: BTreeMap::new(),
            field: VectorField::Custom(Arc::new(rhs)),
        })
    }

    /// Looks a built-in system up by name. Missing parameters take the values
    /// used in the reference experiments. `linear-generic` needs matrices and
    /// is built with [`SystemSpec::linear`] instead.
    pub fn from_name(name: &str, params: &BTreeMap<String, f64>) -> Result<Self> {
        let get = |key: &str, default: f64| params.get(key).copied().unwrap_or(default);
        let allowed: &[&str] = match name {
            "example1" => &["alpha"],
            "example2" => &["alpha", "beta"],
            "example3" => &["eps", "coupling"],
            "example3-reduced" | "example4" => &[],
            "linear-generic" => {
                return Err(Error::InvalidArgument(
                    "linear-generic requires block matrices (A11, A12, A21, A22)".into(),
                ))
            }
            other => return Err(Error::UnknownSystem(other.to_string())),
        };
        if let Some(bad) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::InvalidArgument(format!(
                "system {name} has no parameter `{bad}`"
            )));
        }
        Ok(match name {
            "example1" => Self::example1(get("alpha", 2.0)),
            "example2" => Self::example2(get("alpha", 0.1), get("beta", 8.91)),
            "example3" => {
                let coupling = match get("coupling", 2.0) {
                    c if c == 2.0 => FastCoupling::X1X2,
                    c if c == 3.0 => FastCoupling::X1X3,
                    c => {
                        return Err(Error::InvalidArgument(format!(
                            "example3 coupling must be 2 (x1*x2) or 3 (x1*x3), got {c}"
                        )))
                    }
                };
                Self::example3_with_coupling(get("eps", 0.01), coupling)
            }
            "example3-reduced" => Self::example3_reduced(),
            "example4" => Self::example4(),
            _ => unreachable!(),
        })
    }

    /// Same dynamics with a different number of observed leading components.
    pub fn with_observed(mut self, d: usize) -> Result<Self> {
        if d == 0 || d > self.n {
            return Err(Error::InvalidArgument(format!(
                "observed dimension {d} must be in 1..={}",
                self.n
            )));
        }
        self.d = d;
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    /// The exact Mori-Zwanzig decomposition, available for linear systems only.
    pub fn linear_oracle(&self, quad_points: usize) -> Option<LinearMZOracle> {
        let full = match &self.field {
            VectorField::Example1 { alpha } => {
                ndarray::array![[1.0, -4.0], [4.0, -alpha]]
            }
            VectorField::Linear(a) => a.clone(),
            _ => return None,
        };
        LinearMZOracle::from_full(&full, self.d, quad_points).ok()
    }

    /// Evaluates `f(state)`.
    pub fn eval_rhs(&self, state: ArrayView1<f64>) -> Result<Array1<f64>> {
        check_dim("eval_rhs state", self.n, state.len())?;
        let x = state.to_vec();
        let mut out = vec![0.0; self.n];
        self.rhs_into(&x, &mut out);
        Ok(Array1::from(out))
    }

    /// Unchecked evaluation into a caller-provided buffer; both slices have
    /// length `n`.
    pub fn rhs_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.field {
            VectorField::Example1 { alpha } => {
                out[0] = x[0] - 4.0 * x[1];
                out[1] = 4.0 * x[0] - alpha * x[1];
            }
            VectorField::Example2 { alpha, beta } => {
                out[0] = x[1];
                out[1] = -alpha * x[1] - beta * x[0].sin();
            }
            VectorField::Example3 { eps, coupling } => {
                let drive = match coupling {
                    FastCoupling::X1X2 => x[0] * x[1],
                    FastCoupling::X1X3 => x[0] * x[2],
                };
                out[0] = -x[1] - x[2];
                out[1] = x[0] + x[1] / 5.0;
                out[2] = 0.2 + x[3] - 5.0 * x[2];
                out[3] = (drive - x[3]) / eps;
            }
            VectorField::Homogenized => homogenized_into(x, out),
            VectorField::Linear(a) => {
                for (i, row) in a.rows().into_iter().enumerate() {
                    out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
                }
            }
            VectorField::Custom(f) => f(x, out),
        }
    }

    /// The observed part `z` of a full state.
    pub fn observe<'a>(&self, state: &'a [f64]) -> &'a [f64] {
        &state[..self.d]
    }
}

fn homogenized_into(x: &[f64], out: &mut [f64]) {
    out[0] = -x[1] - x[2];
    out[1] = x[0] + x[1] / 5.0;
    out[2] = 0.2 + x[2] * (x[0] - 5.0);
}

/// Right-hand side of the homogenized slow system of Example 3.
pub fn homogenized_rhs(state: ArrayView1<f64>) -> Result<Array1<f64>> {
    check_dim("homogenized_rhs state", 3, state.len())?;
    let mut out = [0.0; 3];
    homogenized_into(state.as_slice().unwrap_or(&state.to_vec()), &mut out);
    Ok(Array1::from(out.to_vec()))
}

/// Axis-aligned box of initial conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Domain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let domain = Self { lower, upper };
        domain.validate()?;
        Ok(domain)
    }

    /// The cube `[lo, hi]^n`.
    pub fn cube(n: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; n], vec![hi; n])
    }

    pub fn validate(&self) -> Result<()> {
        check_dim("domain bounds", self.lower.len(), self.upper.len())?;
        if self.lower.is_empty() {
            return Err(Error::InvalidArgument("domain has zero dimension".into()));
        }
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "domain axis {i}: lower {lo} must be finite and below upper {hi}"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| lo <= v && v <= hi)
    }
}

/// Fixed-step classical RK4 sampling every `delta`, taking `substeps`
/// integrator steps per sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub delta: f64,
    pub substeps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            delta: 0.02,
            substeps: 20,
        }
    }
}

impl SolverConfig {
    pub fn new(delta: f64, substeps: usize) -> Result<Self> {
        let cfg = Self { delta, substeps };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sample step must be positive, got {}",
                self.delta
            )));
        }
        if self.substeps == 0 {
            return Err(Error::InvalidArgument("substeps must be at least 1".into()));
        }
        Ok(())
    }
}

struct Rk4Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Workspace {
    fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    fn step(&mut self, spec: &SystemSpec, x: &mut [f64], h: f64) {
        let n = x.len();
        spec.rhs_into(x, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k1[i];
        }
        spec.rhs_into(&self.tmp, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k2[i];
        }
        spec.rhs_into(&self.tmp, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = x[i] + h * self.k3[i];
        }
        spec.rhs_into(&self.tmp, &mut self.k4);
        for i in 0..n {
            x[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// Integrates from `x0` and returns `num_samples + 1` states (rows) at times
/// `0, delta, ..., num_samples * delta`. Row 0 is `x0` verbatim.
pub fn integrate(
    spec: &SystemSpec,
    config: &SolverConfig,
    x0: ArrayView1<f64>,
    num_samples: usize,
) -> Result<Array2<f64>> {
    check_dim("initial state", spec.n(), x0.len())?;
    config.validate()?;
    if num_samples == 0 {
        return Err(Error::InvalidArgument("num_samples must be at least 1".into()));
    }
    let n = spec.n();
    let h = config.delta / config.substeps as f64;
    let mut out = Array2::zeros((num_samples + 1, n));
    out.row_mut(0).assign(&x0);
    let mut x = x0.to_vec();
    let mut ws = Rk4Workspace::new(n);
    for k in 1..=num_samples {
        for _ in 0..config.substeps {
            ws.step(spec, &mut x, h);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: k });
        }
        out.row_mut(k).assign(&ArrayView1::from(&x));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matrix_exponential;
    use ndarray::array;

    #[test]
    fn example_right_hand_sides() {
        let f = SystemSpec::example1(2.0).eval_rhs(array![1.0, 0.0].view()).unwrap();
        assert_eq!(f, array![1.0, 4.0]);
        let f = SystemSpec::example2(0.1, 8.91).eval_rhs(array![0.0, 0.0].view()).unwrap();
        assert_eq!(f, array![0.0, 0.0]);
        let f = SystemSpec::example3(0.01)
            .eval_rhs(array![1.0, 1.0, 0.0, 0.0].view())
            .unwrap();
        assert_eq!(f[0], -1.0);
        assert!((f[1] - 1.2).abs() < 1e-15);
        assert!((f[2] - 0.2).abs() < 1e-15);
        assert!((f[3] - 100.0).abs() < 1e-12);
    }

    #[test]
    fn alternative_fast_coupling() {
        let spec = SystemSpec::example3_with_coupling(0.01, FastCoupling::X1X3);
        let f = spec.eval_rhs(array![2.0, 1.0, 3.0, 0.0].view()).unwrap();
        assert!((f[3] - 600.0).abs() < 1e-10);
    }

    #[test]
    fn homogenized_values() {
        assert_eq!(homogenized_rhs(array![0.0, 0.0, 0.0].view()).unwrap(), array![0.0, 0.0, 0.2]);
        assert_eq!(homogenized_rhs(array![5.0, 0.0, 1.0].view()).unwrap(), array![-1.0, 5.0, 0.2]);
        let f = homogenized_rhs(array![1.0, 1.0, 1.0].view()).unwrap();
        assert_eq!(f[0], -2.0);
        assert!((f[1] - 1.2).abs() < 1e-15);
        assert!((f[2] + 3.8).abs() < 1e-15);
        assert!(homogenized_rhs(array![1.0, 1.0].view()).is_err());
    }

    #[test]
    fn rhs_dimension_mismatch() {
        let err = SystemSpec::example1(2.0).eval_rhs(array![1.0].view()).unwrap_err();
        assert!(err.to_string().contains("expected 2"));
    }

    #[test]
    fn by_name_lookup() {
        let none = BTreeMap::new();
        for name in ["example1", "example2", "example3", "example3-reduced", "example4"] {
            let spec = SystemSpec::from_name(name, &none).unwrap();
            assert_eq!(spec.name(), name);
            assert!(spec.d() <= spec.n());
        }
        assert_eq!(SystemSpec::from_name("example4", &none).unwrap().n(), 20);
        assert!(matches!(
            SystemSpec::from_name("lorenz", &none),
            Err(Error::UnknownSystem(_))
        ));
        let bad = BTreeMap::from([("gamma".to_string(), 1.0)]);
        assert!(SystemSpec::from_name("example1", &bad).is_err());
        assert!(SystemSpec::from_name("linear-generic", &none).is_err());
    }

    #[test]
    fn one_step_matches_matrix_exponential() {
        let spec = SystemSpec::example1(2.0);
        let cfg = SolverConfig::new(0.02, 20).unwrap();
        let a = array![[1.0, -4.0], [4.0, -2.0]];
        let prop = matrix_exponential(&(&a * 0.02).view()).unwrap();
        for x0 in [array![1.0, 0.0], array![-1.3, 0.7], array![2.0, -2.0]] {
            let traj = integrate(&spec, &cfg, x0.view(), 1).unwrap();
            assert_eq!(traj.row(0), x0);
            let exact = prop.dot(&x0);
            let err = (&traj.row(1) - &exact).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-10, "{err}");
        }
    }

    #[test]
    fn zero_field_is_constant() {
        let spec = SystemSpec::custom("zero", 2, 1, |_, out| out.fill(0.0)).unwrap();
        let traj = integrate(&spec, &SolverConfig::default(), array![3.0, 7.0].view(), 10).unwrap();
        for row in traj.rows() {
            assert_eq!(row, array![3.0, 7.0]);
        }
    }

    #[test]
    fn richardson_refinement_on_pendulum() {
        let spec = SystemSpec::example2(0.1, 8.91);
        let x0 = array![1.5, -2.0];
        let at = |substeps| {
            let cfg = SolverConfig::new(0.2, substeps).unwrap();
            integrate(&spec, &cfg, x0.view(), 1).unwrap().row(1).to_owned()
        };
        let reference = at(256);
        let coarse = (&at(1) - &reference).mapv(f64::abs).sum();
        let fine = (&at(16) - &reference).mapv(f64::abs).sum();
        // Fourth order: refining by 16 shrinks the error by roughly 16^4.
        let ratio = coarse / fine;
        assert!(ratio > 16f64.powi(4) / 4.0 && ratio < 16f64.powi(4) * 4.0, "{ratio}");
    }

    #[test]
    fn non_finite_state_aborts_with_index() {
        let spec = SystemSpec::custom("blowup", 1, 1, |x, out| out[0] = x[0] * x[0]).unwrap();
        let cfg = SolverConfig::new(0.5, 1).unwrap();
        let err = integrate(&spec, &cfg, array![10.0].view(), 50).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index } if index > 1));
    }

    #[test]
    fn flow_map_composition() {
        let spec = SystemSpec::example2(0.1, 8.91);
        let cfg = SolverConfig::default();
        let x0 = array![0.4, 2.5];
        let full = integrate(&spec, &cfg, x0.view(), 40).unwrap();
        let first = integrate(&spec, &cfg, x0.view(), 20).unwrap();
        let second = integrate(&spec, &cfg, first.row(20), 20).unwrap();
        let err = (&full.row(40) - &second.row(20)).mapv(f64::abs).sum();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn domain_validation() {
        assert!(Domain::new(vec![0.0], vec![0.0]).is_err());
        assert!(Domain::new(vec![0.0, 1.0], vec![1.0]).is_err());
        let d = Domain::cube(2, -2.0, 2.0).unwrap();
        assert!(d.contains(&[0.0, 2.0]));
        assert!(!d.contains(&[0.0, 2.1]));
    }

    #[test]
    fn solver_config_validation() {
        assert!(SolverConfig::new(0.0, 1).is_err());
        assert!(SolverConfig::new(0.1, 0).is_err());
    }
}
