//! Small dense linear-algebra helpers shared by the solver and inference.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Columns per parallel chunk when forming `M M'`.
const GRAM_CHUNK: usize = 512;

/// Symmetric eigendecomposition with eigenvalues sorted in decreasing order.
///
/// Equal eigenvalues keep the order of the coordinate each eigenvector is
/// most aligned with, so diagonal inputs come back in their original order.
pub(crate) fn sym_eigen_desc(m: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let k = m.nrows();
    let eig = m.symmetric_eigen();
    let lead: Vec<usize> = (0..k)
        .map(|c| {
            eig.eigenvectors
                .column(c)
                .iamax()
        })
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(Ordering::Equal)
            .then(lead[a].cmp(&lead[b]))
    });
    let values = DVector::from_iterator(k, order.iter().map(|&c| eig.eigenvalues[c]));
    let mut vectors = DMatrix::zeros(k, k);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// `M M'`, accumulated over column chunks in parallel and summed in a fixed
/// order so the result does not depend on the thread count.
pub(crate) fn gram_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    if c <= GRAM_CHUNK {
        return m * m.transpose();
    }
    let starts: Vec<usize> = (0..c).step_by(GRAM_CHUNK).collect();
    let parts: Vec<DMatrix<f64>> = starts
        .par_iter()
        .map(|&s| {
            let w = GRAM_CHUNK.min(c - s);
            let blk = m.columns(s, w);
            blk * blk.transpose()
        })
        .collect();
    let mut out = DMatrix::zeros(r, r);
    for p in parts {
        out += p;
    }
    out
}

pub(crate) struct Svd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

/// Leading `d` singular triplets of `m`, via the eigendecomposition of the
/// smaller Gram matrix. Singular values below `rank_rel × s_max` are
/// reported as a rank deficiency.
pub(crate) fn truncated_svd(m: &DMatrix<f64>, d: usize, rank_rel: f64) -> Result<Svd> {
    let (r, c) = m.shape();
    if d == 0 || d > r.min(c) {
        return Err(Error::arg(format!(
            "rank {d} must lie in 1..={} for a {r}×{c} matrix",
            r.min(c)
        )));
    }
    let transpose = r > c;
    let gram = if transpose {
        gram_rows(&m.transpose())
    } else {
        gram_rows(m)
    };
    let (_, vecs) = sym_eigen_desc(gram);
    let lead = vecs.columns(0, d).into_owned();
    let mut other = if transpose { m * &lead } else { m.transpose() * &lead };
    // Column norms of the image are more accurate than square roots of the
    // Gram eigenvalues for the small singular values.
    let s = DVector::from_iterator(d, other.column_iter().map(|c| c.norm()));
    let s_max = s[0];
    if !(s_max > 0.0) || !s_max.is_finite() {
        return Err(Error::Degenerate(format!(
            "{r}×{c} matrix has no nonzero singular value"
        )));
    }
    let rank = s.iter().filter(|&&x| x > rank_rel * s_max).count();
    if rank < d {
        return Err(Error::RankDeficient(format!(
            "requested rank {d} but the matrix has numerical rank {rank}"
        )));
    }
    for (k, mut col) in other.column_iter_mut().enumerate() {
        col /= s[k];
    }
    Ok(if transpose {
        Svd { u: other, s, v: lead }
    } else {
        Svd { u: lead, s, v: other }
    })
}

/// All singular values of `m`, largest first.
pub(crate) fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let gram = if m.nrows() > m.ncols() {
        gram_rows(&m.transpose())
    } else {
        gram_rows(m)
    };
    sym_eigen_desc(gram)
        .0
        .iter()
        .map(|&v| v.max(0.0).sqrt())
        .collect()
}

/// Inverse of a symmetric positive definite matrix through its
/// eigendecomposition. Eigenvalues below `floor_rel × trace` are an error,
/// never silently regularized.
pub(crate) fn sym_inverse(m: &DMatrix<f64>, floor_rel: f64) -> Result<DMatrix<f64>> {
    let trace = m.trace();
    let floor = floor_rel * trace.abs();
    let (vals, vecs) = sym_eigen_desc(m.clone());
    let min = vals[vals.len() - 1];
    if !(min > floor) || !min.is_finite() {
        return Err(Error::Conditioning {
            min_eigenvalue: min,
            floor,
        });
    }
    let mut scaled = vecs.clone();
    for (k, mut col) in scaled.column_iter_mut().enumerate() {
        col /= vals[k];
    }
    let inv = scaled * vecs.transpose();
    Ok((&inv + inv.transpose()) * 0.5)
}

pub(crate) fn row_norm(m: &DMatrix<f64>, i: usize) -> f64 {
    m.row(i).norm()
}

pub(crate) fn max_row_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows()).map(|i| row_norm(m, i)).fold(0.0, f64::max)
}

/// Row-major copy of a column-major matrix.
pub(crate) fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

pub(crate) fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}
