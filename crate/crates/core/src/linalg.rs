//! Dense linear algebra needed by the linear oracles: the matrix exponential
//! and a pivoted LU solve.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

// Degree-13 diagonal Padé coefficients of exp.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

// Largest 1-norm for which the unscaled degree-13 approximant is accurate to
// double precision.
const THETA13: f64 = 5.371920351148152;

/// Maximum absolute column sum.
pub fn norm1(a: &ArrayView2<f64>) -> f64 {
    a.columns()
        .into_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Computes `e^a` by scaling and squaring around a degree-13 Padé core.
pub fn matrix_exponential(a: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let (rows, cols) = a.dim();
    if rows != cols {
        return Err(Error::InvalidArgument(format!(
            "matrix exponential needs a square matrix, got {rows}x{cols}"
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "matrix exponential input has non-finite entries".into(),
        ));
    }
    let m = rows;
    if m == 0 {
        return Ok(Array2::zeros((0, 0)));
    }

    let norm = norm1(a);
    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a.mapv(|v| v * 2f64.powi(-squarings));

    let eye = Array2::<f64>::eye(m);
    let a2 = scaled.dot(&scaled);
    let a4 = a2.dot(&a2);
    let a6 = a4.dot(&a2);
    let b = &PADE13;

    let inner_u = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
    let u_poly = a6.dot(&inner_u) + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &eye * b[1];
    let u = scaled.dot(&u_poly);

    let inner_v = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
    let v = a6.dot(&inner_v) + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &eye * b[0];

    let mut result = solve(&(&v - &u).view(), &(&v + &u).view())?;
    for _ in 0..squarings {
        result = result.dot(&result);
    }
    Ok(result)
}

/// Solves `a x = rhs` for a square `a` with partial pivoting.
pub fn solve(a: &ArrayView2<f64>, rhs: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n || rhs.nrows() != n {
        return Err(Error::InvalidArgument(format!(
            "solve: incompatible shapes {:?} and {:?}",
            a.dim(),
            rhs.dim()
        )));
    }
    let mut lu = a.to_owned();
    let mut x = rhs.to_owned();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| lu[[i, col]].abs().total_cmp(&lu[[j, col]].abs()))
            .unwrap();
        if lu[[pivot, col]] == 0.0 {
            return Err(Error::InvalidArgument("solve: singular matrix".into()));
        }
        if pivot != col {
            for k in 0..n {
                lu.swap([col, k], [pivot, k]);
            }
            for k in 0..x.ncols() {
                x.swap([col, k], [pivot, k]);
            }
        }
        let diag = lu[[col, col]];
        for row in col + 1..n {
            let factor = lu[[row, col]] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                lu[[row, k]] -= factor * lu[[col, k]];
            }
            for k in 0..x.ncols() {
                x[[row, k]] -= factor * x[[col, k]];
            }
        }
    }
    for row in (0..n).rev() {
        for k in 0..x.ncols() {
            let mut acc = x[[row, k]];
            for j in row + 1..n {
                acc -= lu[[row, j]] * x[[j, k]];
            }
            x[[row, k]] = acc / lu[[row, row]];
        }
    }
    Ok(x)
}

/// Euclidean norm of a vector.
pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
