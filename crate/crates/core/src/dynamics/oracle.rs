use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{check_dim, Error, Result};
use crate::linalg::matrix_exponential;

/// Exact reduced dynamics of a linear block system
///
/// ```text
/// z' = A11 z + A12 w
/// w' = A21 z + A22 w
/// ```
///
/// for which `z' = A11 z + A12 ∫_0^t e^{A22 s} A21 z(t-s) ds + A12 e^{A22 t} w(0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMZOracle {
    a11: Array2<f64>,
    a12: Array2<f64>,
    a21: Array2<f64>,
    a22: Array2<f64>,
    /// Quadrature nodes per unit time used when the oracle samples its own
    /// history (see [`LinearMZOracle::decomposition`]).
    pub quad_points: usize,
}

/// The three terms of the reduced equation evaluated at one time.
#[derive(Clone, Debug)]
pub struct MzTerms {
    pub markov: Array1<f64>,
    pub memory: Array1<f64>,
    pub noise: Array1<f64>,
}

impl MzTerms {
    pub fn total(&self) -> Array1<f64> {
        &self.markov + &self.memory + &self.noise
    }
}

impl LinearMZOracle {
    pub fn new(
        a11: Array2<f64>,
        a12: Array2<f64>,
        a21: Array2<f64>,
        a22: Array2<f64>,
        quad_points: usize,
    ) -> Result<Self> {
        let d = a11.nrows();
        let m = a22.nrows();
        check_dim("A11 columns", d, a11.ncols())?;
        check_dim("A22 columns", m, a22.ncols())?;
        check_dim("A12 rows", d, a12.nrows())?;
        check_dim("A12 columns", m, a12.ncols())?;
        check_dim("A21 rows", m, a21.nrows())?;
        check_dim("A21 columns", d, a21.ncols())?;
        if d == 0 {
            return Err(Error::InvalidArgument("observed block is empty".into()));
        }
        Ok(Self {
            a11,
            a12,
            a21,
            a22,
            quad_points,
        })
    }

    /// Splits a full `n x n` matrix after the first `d` rows and columns.
    pub fn from_full(a: &Array2<f64>, d: usize, quad_points: usize) -> Result<Self> {
        let n = a.nrows();
        check_dim("system matrix columns", n, a.ncols())?;
        if d == 0 || d > n {
            return Err(Error::InvalidArgument(format!("observed dimension {d} not in 1..={n}")));
        }
        Self::new(
            a.slice(s![..d, ..d]).to_owned(),
            a.slice(s![..d, d..]).to_owned(),
            a.slice(s![d.., ..d]).to_owned(),
            a.slice(s![d.., d..]).to_owned(),
            quad_points,
        )
    }

    pub fn d(&self) -> usize {
        self.a11.nrows()
    }

    pub fn n(&self) -> usize {
        self.d() + self.a22.nrows()
    }

    pub fn a11(&self) -> ArrayView2<'_, f64> {
        self.a11.view()
    }

    pub fn a12(&self) -> ArrayView2<'_, f64> {
        self.a12.view()
    }

    pub fn a21(&self) -> ArrayView2<'_, f64> {
        self.a21.view()
    }

    pub fn a22(&self) -> ArrayView2<'_, f64> {
        self.a22.view()
    }

    /// The full block matrix `[[A11, A12], [A21, A22]]`.
    pub fn assembled(&self) -> Array2<f64> {
        let (d, n) = (self.d(), self.n());
        let mut a = Array2::zeros((n, n));
        a.slice_mut(s![..d, ..d]).assign(&self.a11);
        a.slice_mut(s![..d, d..]).assign(&self.a12);
        a.slice_mut(s![d.., ..d]).assign(&self.a21);
        a.slice_mut(s![d.., d..]).assign(&self.a22);
        a
    }

    /// `e^{A t} x0`.
    pub fn exact_linear_solution(&self, x0: ArrayView1<f64>, t: f64) -> Result<Array1<f64>> {
        check_dim("initial state", self.n(), x0.len())?;
        if !(t >= 0.0) {
            return Err(Error::InvalidArgument(format!("time must be non-negative, got {t}")));
        }
        let prop = matrix_exponential(&(self.assembled() * t).view())?;
        Ok(prop.dot(&x0))
    }

    /// Markov term `A11 z`.
    pub fn markov_term(&self, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        check_dim("observed state", self.d(), z.len())?;
        Ok(self.a11.dot(&z))
    }

    /// Composite-trapezoid approximation of `A12 ∫_0^T e^{A22 s} A21 z(t-s) ds`.
    ///
    /// `history` holds `z` on a uniform grid of step `spacing`, oldest first,
    /// ending at the current time `t`; only its last `T / spacing + 1` entries
    /// are used. `truncation` must be an integer multiple of `spacing`.
    pub fn mz_memory_integral(
        &self,
        history: &[Array1<f64>],
        spacing: f64,
        truncation: f64,
    ) -> Result<Array1<f64>> {
        let intervals = self.intervals(spacing, truncation)?;
        let propagator = if intervals == 0 {
            Array2::eye(self.a22.nrows())
        } else {
            matrix_exponential(&(&self.a22 * spacing).view())?
        };
        self.memory_with_propagator(history, spacing, intervals, &propagator)
    }

    fn intervals(&self, spacing: f64, truncation: f64) -> Result<usize> {
        if !(truncation >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "truncation length must be non-negative, got {truncation}"
            )));
        }
        if truncation == 0.0 {
            return Ok(0);
        }
        if !(spacing > 0.0) {
            return Err(Error::InvalidArgument(format!("history spacing must be positive, got {spacing}")));
        }
        let m = (truncation / spacing).round();
        if (m * spacing - truncation).abs() > 1e-9 * truncation.max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "truncation {truncation} is not a multiple of the history spacing {spacing}"
            )));
        }
        Ok(m as usize)
    }

    /// Trapezoid sum with a precomputed `e^{A22 h}`, folded Horner-style from
    /// the oldest node so every node costs one matrix-vector product.
    pub(crate) fn memory_with_propagator(
        &self,
        history: &[Array1<f64>],
        spacing: f64,
        intervals: usize,
        propagator: &Array2<f64>,
    ) -> Result<Array1<f64>> {
        if history.len() < intervals + 1 {
            return Err(Error::InvalidArgument(format!(
                "memory integral needs {} history samples, got {}",
                intervals + 1,
                history.len()
            )));
        }
        for z in history {
            check_dim("history sample", self.d(), z.len())?;
        }
        if intervals == 0 {
            return Ok(Array1::zeros(self.d()));
        }
        let newest = history.len() - 1;
        // lag k <-> z(t - k h) = history[newest - k]
        let node = |k: usize| self.a21.dot(&history[newest - k]);
        let mut acc = node(intervals) * (0.5 * spacing);
        for k in (0..intervals).rev() {
            let weight = if k == 0 { 0.5 * spacing } else { spacing };
            acc = propagator.dot(&acc) + node(k) * weight;
        }
        Ok(self.a12.dot(&acc))
    }

    /// Orthogonal-dynamics term `A12 e^{A22 t} w0`.
    pub fn mz_noise_term(&self, w0: ArrayView1<f64>, t: f64) -> Result<Array1<f64>> {
        check_dim("hidden initial state", self.a22.nrows(), w0.len())?;
        if !(t >= 0.0) {
            return Err(Error::InvalidArgument(format!("time must be non-negative, got {t}")));
        }
        let prop = matrix_exponential(&(&self.a22 * t).view())?;
        Ok(self.a12.dot(&prop.dot(&w0)))
    }

    /// Evaluates all three terms at time `t` along the exact trajectory from
    /// `x0`, with the memory integral taken over the whole past `[0, t]` on a
    /// grid of roughly `quad_points` nodes per unit time.
    pub fn decomposition(&self, x0: ArrayView1<f64>, t: f64) -> Result<MzTerms> {
        check_dim("initial state", self.n(), x0.len())?;
        if self.quad_points == 0 {
            return Err(Error::InvalidArgument("quad_points must be positive".into()));
        }
        let d = self.d();
        let intervals = ((t * self.quad_points as f64).ceil() as usize).max(1);
        let h = t / intervals as f64;
        let step = matrix_exponential(&(self.assembled() * h).view())?;
        let mut x = x0.to_owned();
        let mut history = Vec::with_capacity(intervals + 1);
        history.push(x.slice(s![..d]).to_owned());
        for _ in 0..intervals {
            x = step.dot(&x);
            history.push(x.slice(s![..d]).to_owned());
        }
        let z_now = history.last().unwrap().clone();
        let memory = if t == 0.0 {
            Array1::zeros(d)
        } else {
            let prop = matrix_exponential(&(&self.a22 * h).view())?;
            self.memory_with_propagator(&history, h, intervals, &prop)?
        };
        Ok(MzTerms {
            markov: self.a11.dot(&z_now),
            memory,
            noise: self.mz_noise_term(x0.slice(s![d..]), t)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{integrate, SolverConfig, SystemSpec};
    use ndarray::array;

    fn example1() -> LinearMZOracle {
        SystemSpec::example1(2.0).linear_oracle(1000).unwrap()
    }

    #[test]
    fn blocks_assemble_back() {
        let o = example1();
        assert_eq!(o.assembled(), array![[1.0, -4.0], [4.0, -2.0]]);
        let spec = SystemSpec::linear(&o);
        let f = spec.eval_rhs(array![0.3, -0.1].view()).unwrap();
        let g = SystemSpec::example1(2.0).eval_rhs(array![0.3, -0.1].view()).unwrap();
        assert!((&f - &g).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn inconsistent_blocks_rejected() {
        let r = LinearMZOracle::new(
            Array2::zeros((1, 1)),
            Array2::zeros((2, 1)),
            Array2::zeros((1, 1)),
            Array2::zeros((1, 1)),
            10,
        );
        assert!(r.is_err());
    }

    #[test]
    fn exact_solution_at_zero_is_identity() {
        let o = example1();
        let x0 = array![0.7, -1.1];
        assert_eq!(o.exact_linear_solution(x0.view(), 0.0).unwrap(), x0);
    }

    #[test]
    fn exact_solution_agrees_with_rk4() {
        let o = example1();
        let x0 = array![-1.34, 1.7];
        let exact = o.exact_linear_solution(x0.view(), 1.0).unwrap();
        let cfg = SolverConfig::new(0.02, 50).unwrap();
        let rk = integrate(&SystemSpec::example1(2.0), &cfg, x0.view(), 50).unwrap();
        assert!((&rk.row(50) - &exact).iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn memory_integral_trivial_cases() {
        let o = example1();
        let zeros = vec![Array1::zeros(1); 11];
        let m = o.mz_memory_integral(&zeros, 0.1, 1.0).unwrap();
        assert_eq!(m, array![0.0]);
        let ones = vec![array![1.0]; 3];
        assert_eq!(o.mz_memory_integral(&ones, 0.1, 0.0).unwrap(), array![0.0]);
    }

    #[test]
    fn memory_integral_needs_enough_history() {
        let o = example1();
        let short = vec![array![1.0]; 5];
        assert!(o.mz_memory_integral(&short, 0.1, 1.0).is_err());
        assert!(o.mz_memory_integral(&short, 0.1, 0.25).is_err());
    }

    #[test]
    fn memory_integral_constant_history_closed_form() {
        // z ≡ 1: A12 ∫_0^T e^{-2s} 4 ds = -4 * 4 * (1 - e^{-2T}) / 2
        let o = example1();
        let t_len: f64 = 1.0;
        let exact = -16.0 * (1.0 - (-2.0f64 * t_len).exp()) / 2.0;
        let mut prev = f64::INFINITY;
        for &h in &[0.1, 0.05, 0.025] {
            let n = (t_len / h) as usize;
            let hist = vec![array![1.0]; n + 1];
            let err = (o.mz_memory_integral(&hist, h, t_len).unwrap()[0] - exact).abs();
            if prev.is_finite() {
                let ratio = prev / err;
                assert!((3.8..4.2).contains(&ratio), "trapezoid ratio {ratio}");
            }
            prev = err;
        }
    }

    #[test]
    fn noise_term_trivial_cases() {
        let o = example1();
        assert_eq!(o.mz_noise_term(array![0.0].view(), 0.7).unwrap(), array![0.0]);
        assert_eq!(o.mz_noise_term(array![0.5].view(), 0.0).unwrap(), array![-2.0]);
    }
}
