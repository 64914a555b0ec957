//! Dense order-3 tensors and the unfolding algebra of the model.
//!
//! Element `(i1, i2, i3)` of a `d1 × d2 × d3` tensor is stored at linear
//! offset `i1 + d1·(i2 + d2·i3)`. In other words the buffer is the
//! column-major layout of the mode-1 unfolding `M1(X)`, whose column
//! `i2 + d2·i3` holds the mode-1 fiber `X[:, i2, i3]`. Mode-1 unfolding is
//! therefore a zero-copy view; mode-2 unfolding is a permuted copy.
//!
//! All indices in this module are zero-based.

use nalgebra::{DMatrix, DMatrixView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which unfolding of an `n × n × T` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Rows index the first (sending) mode.
    One,
    /// Rows index the second (receiving) mode.
    Two,
}

impl Mode {
    pub const BOTH: [Mode; 2] = [Mode::One, Mode::Two];

    /// Zero-based position, handy for indexing `[T; 2]` arrays.
    pub fn index(self) -> usize {
        match self {
            Mode::One => 0,
            Mode::Two => 1,
        }
    }

    pub fn number(self) -> usize {
        self.index() + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let len = dims[0] * dims[1] * dims[2];
        if data.len() != len {
            return Err(Error::dim(format!(
                "tensor of dims {dims:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor3 { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Tensor3 {
            dims,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for i3 in 0..dims[2] {
            for i2 in 0..dims[1] {
                for i1 in 0..dims[0] {
                    data.push(f(i1, i2, i3));
                }
            }
        }
        Tensor3 { dims, data }
    }

    /// Stacks equally sized matrices as frontal slices `X[:, :, t]`.
    pub fn from_slices(slices: &[DMatrix<f64>]) -> Result<Self> {
        let Some(first) = slices.first() else {
            return Err(Error::arg("at least one slice is required"));
        };
        let (d1, d2) = first.shape();
        let mut data = Vec::with_capacity(d1 * d2 * slices.len());
        for (t, s) in slices.iter().enumerate() {
            if s.shape() != (d1, d2) {
                return Err(Error::dim(format!(
                    "slice {t} has shape {:?}, expected {:?}",
                    s.shape(),
                    (d1, d2)
                )));
            }
            data.extend_from_slice(s.as_slice());
        }
        Ok(Tensor3 {
            dims: [d1, d2, slices.len()],
            data,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, i1: usize, i2: usize, i3: usize) -> usize {
        debug_assert!(i1 < self.dims[0] && i2 < self.dims[1] && i3 < self.dims[2]);
        i1 + self.dims[0] * (i2 + self.dims[1] * i3)
    }

    #[inline]
    pub fn get(&self, i1: usize, i2: usize, i3: usize) -> f64 {
        self.data[self.offset(i1, i2, i3)]
    }

    #[inline]
    pub fn set(&mut self, i1: usize, i2: usize, i3: usize, value: f64) {
        let k = self.offset(i1, i2, i3);
        self.data[k] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Frontal slice `X[:, :, i3]` as a `d1 × d2` matrix.
    pub fn slice(&self, i3: usize) -> DMatrix<f64> {
        let block = self.dims[0] * self.dims[1];
        DMatrix::from_column_slice(
            self.dims[0],
            self.dims[1],
            &self.data[i3 * block..(i3 + 1) * block],
        )
    }

    /// Zero-copy view of the mode-1 unfolding (`d1 × d2·d3`).
    pub fn mode1_view(&self) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(&self.data, self.dims[0], self.dims[1] * self.dims[2])
    }

    pub fn unfold(&self, mode: Mode) -> DMatrix<f64> {
        let [d1, d2, d3] = self.dims;
        match mode {
            Mode::One => self.mode1_view().into_owned(),
            Mode::Two => {
                // [M2]_{i2, i1 + d1·i3} = X_{i1,i2,i3}
                let mut out = DMatrix::zeros(d2, d1 * d3);
                for i3 in 0..d3 {
                    for i2 in 0..d2 {
                        let fiber = &self.data[d1 * (i2 + d2 * i3)..d1 * (i2 + d2 * i3 + 1)];
                        for (i1, &v) in fiber.iter().enumerate() {
                            out[(i2, i1 + d1 * i3)] = v;
                        }
                    }
                }
                out
            }
        }
    }

    /// Inverse of [`Tensor3::unfold`].
    pub fn refold(m: &DMatrix<f64>, mode: Mode, dims: [usize; 3]) -> Result<Self> {
        let [d1, d2, d3] = dims;
        let expected = match mode {
            Mode::One => (d1, d2 * d3),
            Mode::Two => (d2, d1 * d3),
        };
        if m.shape() != expected {
            return Err(Error::dim(format!(
                "mode-{} unfolding of dims {dims:?} must be {expected:?}, got {:?}",
                mode.number(),
                m.shape()
            )));
        }
        match mode {
            Mode::One => Ok(Tensor3 {
                dims,
                data: m.as_slice().to_vec(),
            }),
            Mode::Two => Ok(Tensor3::from_fn(dims, |i1, i2, i3| m[(i2, i1 + d1 * i3)])),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        assert_eq!(self.dims, other.dims, "tensor dims differ");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// The centering operators `J_n = I_n − 11'/n` and `J_{n,T} = I_T ⊗ J_n`.
///
/// Never materialized; applying either one subtracts means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CenteringOps {
    pub n: usize,
    pub t: usize,
}

impl CenteringOps {
    pub fn new(n: usize, t: usize) -> Self {
        CenteringOps { n, t }
    }

    /// `M ← J_n M`: removes the mean of every column.
    pub fn center_columns(&self, m: &mut DMatrix<f64>) {
        let rows = m.nrows() as f64;
        for mut col in m.column_iter_mut() {
            let mean = col.sum() / rows;
            col.add_scalar_mut(-mean);
        }
    }

    /// `M ← M J_{n,T}'`: removes, within each block of `n` consecutive
    /// columns, the mean of every row.
    pub fn center_row_blocks(&self, m: &mut DMatrix<f64>) {
        let n = self.n;
        for t in 0..self.t {
            let mut block = m.columns_mut(t * n, n);
            for mut row in block.row_iter_mut() {
                let mean = row.sum() / n as f64;
                row.add_scalar_mut(-mean);
            }
        }
    }

    pub fn check(&self, m: &DMatrix<f64>) -> Result<()> {
        if m.nrows() != self.n || m.ncols() != self.n * self.t {
            return Err(Error::dim(format!(
                "two-sided centering expects {}×{}, got {:?}",
                self.n,
                self.n * self.t,
                m.shape()
            )));
        }
        Ok(())
    }
}

/// `J_n M J_{n,T}'` for an `n × nT` unfolding.
pub fn two_sided_center(m: &DMatrix<f64>, ops: CenteringOps) -> Result<DMatrix<f64>> {
    ops.check(m)?;
    let mut out = m.clone();
    ops.center_columns(&mut out);
    ops.center_row_blocks(&mut out);
    Ok(out)
}

/// `V' (I_T ⊗ B)` computed block by block.
///
/// `v` is `nT × k`, `b` is `n × p`; the result is `k × T·p` whose block `t`
/// equals `V_t' B` with `V_t` the `t`-th group of `n` rows of `v`.
pub fn kron_rightmul(v: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = b.nrows();
    if n == 0 || !v.nrows().is_multiple_of(n) {
        return Err(Error::dim(format!(
            "kron_rightmul: {} rows is not a multiple of n = {n}",
            v.nrows()
        )));
    }
    let t = v.nrows() / n;
    let (k, p) = (v.ncols(), b.ncols());
    let mut out = DMatrix::zeros(k, t * p);
    for layer in 0..t {
        let vt = v.rows(layer * n, n);
        out.columns_mut(layer * p, p).copy_from(&(vt.transpose() * b));
    }
    Ok(out)
}

/// Linear predictor tensor `x_ijt = θ_i' Λ_t φ_j + β_it + α_jt`.
///
/// `core` is `k1 × k2 × T` with frontal slices `Λ_t`; `alpha` and `beta` are
/// `n × T`.
pub fn tucker_linpred(
    core: &Tensor3,
    theta: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    alpha: &DMatrix<f64>,
    beta: &DMatrix<f64>,
) -> Result<Tensor3> {
    let [k1, k2, t] = core.dims();
    let n = theta.nrows();
    if theta.ncols() != k1 || phi.ncols() != k2 {
        return Err(Error::dim(format!(
            "core is {k1}×{k2} but Θ has {} and Φ has {} columns",
            theta.ncols(),
            phi.ncols()
        )));
    }
    if phi.nrows() != n || alpha.shape() != (n, t) || beta.shape() != (n, t) {
        return Err(Error::dim(format!(
            "expected Φ {n}×{k2}, α and β {n}×{t}; got Φ {:?}, α {:?}, β {:?}",
            phi.shape(),
            alpha.shape(),
            beta.shape()
        )));
    }
    let mut data = Vec::with_capacity(n * n * t);
    let theta_t = theta.transpose();
    for layer in 0..t {
        let lambda = core.slice(layer);
        let mut x = (lambda.transpose() * &theta_t).transpose() * phi.transpose();
        for j in 0..n {
            for i in 0..n {
                x[(i, j)] += beta[(i, layer)] + alpha[(j, layer)];
            }
        }
        data.extend_from_slice(x.as_slice());
    }
    Tensor3::new([n, n, t], data)
}
