use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;

use super::LinearMZOracle;
use crate::error::{Error, Result};

/// `SIGMA11`..`SIGMA22` of Example 4, already divided by 1000.
pub const EXAMPLE4_SIGMA: &str = include_str!("../../data/example4_sigma.txt");

/// Parses labeled row-major matrix blocks:
///
/// ```text
/// A11
/// 1 0
/// 0 1
///
/// A12
/// ...
/// ```
///
/// A label is any line starting with an ASCII letter; the rows that follow
/// belong to it. `source` names the input in error messages.
pub fn parse_matrix_blocks(text: &str, source: &Path) -> Result<BTreeMap<String, Array2<f64>>> {
    let mut blocks: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    let mut order = Vec::new();
    let mut current: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = idx + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with(|c: char| c.is_ascii_alphabetic()) {
            if blocks.contains_key(line) {
                return Err(Error::parse(source, lineno, format!("duplicate block `{line}`")));
            }
            blocks.insert(line.to_string(), Vec::new());
            order.push(line.to_string());
            current = Some(line.to_string());
            continue;
        }
        let Some(label) = &current else {
            return Err(Error::parse(source, lineno, "matrix row before any block label"));
        };
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|e| Error::parse(source, lineno, format!("bad number `{tok}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let rows = blocks.get_mut(label).unwrap();
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::parse(
                    source,
                    lineno,
                    format!("block {label}: row has {} values, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    let mut out = BTreeMap::new();
    for label in order {
        let rows = blocks.remove(&label).unwrap();
        if rows.is_empty() {
            return Err(Error::parse(source, 0, format!("block {label} is empty")));
        }
        let (r, c) = (rows.len(), rows[0].len());
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        out.insert(label, Array2::from_shape_vec((r, c), flat).expect("rectangular by construction"));
    }
    Ok(out)
}

/// Block decomposition of Example 4:
/// `p' = S11 p + (I + S12) q`, `q' = -(I + S21) p - S22 q`.
pub fn example4_blocks(quad_points: usize) -> LinearMZOracle {
    let mut sigma = parse_matrix_blocks(EXAMPLE4_SIGMA, Path::new("example4_sigma.txt"))
        .expect("shipped Example 4 tables parse");
    let mut take = |k: &str| sigma.remove(k).expect("shipped tables contain every block");
    let (s11, s12, s21, s22) = (take("SIGMA11"), take("SIGMA12"), take("SIGMA21"), take("SIGMA22"));
    let eye = Array2::<f64>::eye(10);
    LinearMZOracle::new(s11, &eye + &s12, -(&eye + &s21), -s22, quad_points)
        .expect("shipped blocks are 10x10")
}

impl LinearMZOracle {
    /// Reads `A11`, `A12`, `A21`, `A22` blocks from a file in the
    /// [`parse_matrix_blocks`] format.
    pub fn from_block_file(path: &Path, quad_points: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut blocks = parse_matrix_blocks(&text, path)?;
        let mut take = |k: &str| {
            blocks
                .remove(k)
                .ok_or_else(|| Error::parse(path, 0, format!("missing block {k}")))
        };
        let (a11, a12, a21, a22) = (take("A11")?, take("A12")?, take("A21")?, take("A22")?);
        Self::new(a11, a12, a21, a22, quad_points)
    }
}
