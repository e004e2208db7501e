//! Euclidean projection onto the unit simplex `{u : u ≥ 0, Σu = 1}` and onto
//! the nonnegative orthant. Applied row-wise after every optimizer update to
//! keep branch weight matrices row-stochastic and aggregation weights
//! nonnegative.

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SimplexError {
    #[error("cannot project an empty vector")]
    Empty,
    #[error("non-finite entry {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("row {row}: {source}")]
    Row {
        row: usize,
        #[source]
        source: Box<SimplexError>,
    },
}

/// Matrix with nonnegative entries whose rows each sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct RowStochasticMatrix(Array2<f64>);

impl RowStochasticMatrix {
    /// Validates the row-simplex invariants (entries ≥ 0, row sums 1 ± 1e-9).
    pub fn new(m: Array2<f64>) -> Result<Self, SimplexError> {
        for (i, row) in m.rows().into_iter().enumerate() {
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(SimplexError::NonFinite {
                        index: i * m.ncols() + j,
                        value: v,
                    });
                }
                debug_assert!(v >= 0.0, "negative entry {v} at ({i}, {j})");
                sum += v;
            }
            if row.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(SimplexError::Row {
                    row: i,
                    source: Box::new(SimplexError::NonFinite {
                        index: i,
                        value: sum,
                    }),
                });
            }
        }
        Ok(RowStochasticMatrix(m))
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.0
    }
}

/// Euclidean projection of `v` onto the unit simplex, via the sorting-based
/// threshold characterization: with `u` the entries of `v` sorted in
/// non-increasing order, the active-set size is the largest `ρ` with
/// `u_ρ + (1 − Σ_{j≤ρ} u_j)/ρ > 0`, and the projection is
/// `max(v_i − θ, 0)` with `θ = (Σ_{j≤ρ} u_j − 1)/ρ`.
///
/// Points already on the simplex are returned unchanged, which makes the
/// projection exactly idempotent.
pub fn project_simplex(v: &[f64]) -> Result<Vec<f64>, SimplexError> {
    if v.is_empty() {
        return Err(SimplexError::Empty);
    }
    for (index, &value) in v.iter().enumerate() {
        if !value.is_finite() {
            return Err(SimplexError::NonFinite { index, value });
        }
    }
    let sum: f64 = v.iter().sum();
    if v.iter().all(|&x| x >= 0.0) && (sum - 1.0).abs() <= 1e-12 {
        return Ok(v.to_vec());
    }

    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("entries are finite"));

    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (i + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    Ok(v.iter().map(|&x| (x - theta).max(0.0)).collect())
}

/// Reference projection by exhaustive active-set enumeration, tractable for
/// n ≤ ~20. Every support set yields a candidate `x_i = v_i − θ_S` on the
/// support and 0 elsewhere; among feasible candidates the closest to `v`
/// is the projection. Kept independent of [`project_simplex`] so the two can
/// be checked against each other.
pub fn project_simplex_brute_force(v: &[f64]) -> Result<Vec<f64>, SimplexError> {
    if v.is_empty() {
        return Err(SimplexError::Empty);
    }
    for (index, &value) in v.iter().enumerate() {
        if !value.is_finite() {
            return Err(SimplexError::NonFinite { index, value });
        }
    }
    let n = v.len();
    assert!(n <= 20, "exhaustive enumeration limited to small dimensions");

    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << n) {
        let support: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let s: f64 = support.iter().map(|&i| v[i]).sum();
        let theta = (s - 1.0) / support.len() as f64;
        let mut x = vec![0.0; n];
        let mut feasible = true;
        for &i in &support {
            let xi = v[i] - theta;
            if xi < -1e-12 {
                feasible = false;
                break;
            }
            x[i] = xi.max(0.0);
        }
        if !feasible {
            continue;
        }
        let dist: f64 = v.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.as_ref().map_or(true, |(d, _)| dist < *d) {
            best = Some((dist, x));
        }
    }
    Ok(best.expect("the full support is always a candidate").1)
}

/// Projects each row of `m` onto the unit simplex independently.
pub fn project_rows(m: &ArrayView2<f64>) -> Result<RowStochasticMatrix, SimplexError> {
    let mut out = Array2::zeros(m.raw_dim());
    for (i, row) in m.rows().into_iter().enumerate() {
        let projected = project_simplex(row.as_slice().expect("rows are contiguous"))
            .map_err(|source| SimplexError::Row {
                row: i,
                source: Box::new(source),
            })?;
        for (j, v) in projected.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(RowStochasticMatrix(out))
}

/// Component-wise `max(entry, 0)`.
pub fn clamp_nonneg(m: &ArrayView2<f64>) -> Array2<f64> {
    m.mapv(|v| v.max(0.0))
}
