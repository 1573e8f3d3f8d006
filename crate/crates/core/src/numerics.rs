//! Dense vector and matrix primitives shared by the rest of the crate.
//!
//! Everything is `f64` and row-major. Distance matrices use the cosine
//! distance `1 - a.b` on unit vectors, which is what the clustering stage
//! consumes.

use crate::error::{Error, Result};

/// Lower clamp applied to activations before generalized-mean pooling.
pub const GEM_EPS: f64 = 1e-6;
/// Norm below which a vector cannot be normalized.
pub const NORM_EPS: f64 = 1e-12;
/// Tolerance on the norm of vectors that are required to be unit length.
pub const UNIT_TOL: f64 = 1e-6;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True when square, finite, exactly symmetric and with an exactly zero diagonal.
    pub fn is_distance_matrix(&self) -> bool {
        if self.rows != self.cols || !self.is_finite() {
            return false;
        }
        (0..self.rows).all(|i| {
            self.get(i, i) == 0.0 && (0..i).all(|j| self.get(i, j) == self.get(j, i))
        })
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Generalized-mean pooling over a spatial region.
///
/// `region` holds one channel vector per spatial location. Activations are
/// clamped to at least [`GEM_EPS`] before being raised to `p`.
pub fn gem_pool(region: &[&[f64]], p: f64) -> Result<Vec<f64>> {
    let first = region.first().ok_or(Error::EmptyRegion)?;
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::InvalidParameter(format!("gem exponent {p} < 1")));
    }
    let channels = first.len();
    let mut acc = vec![0.0; channels];
    for cell in region {
        if cell.len() != channels {
            return Err(Error::DimensionMismatch {
                expected: channels,
                got: cell.len(),
            });
        }
        for (a, &x) in acc.iter_mut().zip(cell.iter()) {
            *a += x.max(GEM_EPS).powf(p);
        }
    }
    let n = region.len() as f64;
    Ok(acc.into_iter().map(|a| (a / n).powf(1.0 / p)).collect())
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > NORM_EPS) {
        return Err(Error::DegenerateVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn check_unit(v: &[f64]) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::NonUnit { norm: n });
    }
    Ok(())
}

/// Pairwise `1 - a_i . b_j` for unit vectors, clamped to `[0, 2]`.
///
/// When `a` and `b` are the same slice the result is exactly symmetric with
/// a zero diagonal.
pub fn cosine_distance_matrix(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Mat> {
    for v in a.iter().chain(b) {
        check_unit(v)?;
    }
    if let (Some(x), Some(y)) = (a.first(), b.first()) {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: y.len(),
            });
        }
    }
    let same = std::ptr::eq(a, b);
    let mut out = Mat::zeros(a.len(), b.len());
    for (i, ai) in a.iter().enumerate() {
        for (j, bj) in b.iter().enumerate() {
            if same && j < i {
                let v = out.get(j, i);
                out.set(i, j, v);
            } else if same && i == j {
                out.set(i, j, 0.0);
            } else {
                out.set(i, j, (1.0 - dot(ai, bj)).clamp(0.0, 2.0));
            }
        }
    }
    Ok(out)
}

/// Symmetric pairwise distances for one set of unit vectors.
pub fn self_distance_matrix(a: &[Vec<f64>]) -> Result<Mat> {
    cosine_distance_matrix(a, a)
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Largest per-coordinate relative error between two gradients.
///
/// Each coordinate is compared against `max(|a_i|, |b_i|, floor)` where the
/// floor is `1e-3` of the larger gradient's infinity norm, so coordinates
/// that are numerically zero do not dominate the ratio.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-10);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
