//! The unfolding-and-fusion estimator.
//!
//! Both unfoldings of `Y` are fitted by [`fit_mode`]. Two-sided centering of
//! each fitted product removes the degree terms, so the columns of `Û_m`
//! carrying latent positions are the ones with the largest projection onto
//! the centered column space. The core is then fused from the mode-1 right
//! factor and the mode-2 latent positions:
//! `M1(Ŝ) = V̂1c' (I_T ⊗ Φ̂) / n`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::{fit_mode, FactorPair, FitConfig, ModeDiagnostics, ModeFit};
use crate::family::FamilySpec;
use crate::linalg::{gram_rows, sym_eigen_desc};
use crate::tensor::{kron_rightmul, CenteringOps, Mode, Tensor3};
use crate::tolerance::Tolerances;

/// Outcome of the column selection for one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Selected column indices (zero-based), ordered by decreasing Gram
    /// diagonal of the matching `V̂` columns.
    pub indices: Vec<usize>,
    /// Projection norm of every column of `Û`.
    pub projection_norms: Vec<f64>,
    /// Singular values of the centered product, largest first (at most `d`).
    pub centered_singular_values: Vec<f64>,
    pub numerical_rank: usize,
    /// The `k`-th and `(k+1)`-th largest projection norms were equal within
    /// tolerance; the smaller original index was preferred.
    pub tie: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub mode1: ModeDiagnostics,
    pub mode2: ModeDiagnostics,
    pub selection1: Option<Selection>,
    pub selection2: Option<Selection>,
    /// Max-abs difference between the core fused from mode 1 (reported) and
    /// the one fused symmetrically from mode 2.
    pub fusion_discrepancy: f64,
    pub warnings: Vec<String>,
}

/// Estimated latent positions, connection matrices and factor pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub n: usize,
    pub t: usize,
    pub theta: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    /// `k1 × k2 × T`, frontal slice `t` is `Λ̂_t`.
    pub core: Tensor3,
    pub v1c: DMatrix<f64>,
    pub v2c: DMatrix<f64>,
    pub s1: Vec<usize>,
    pub s2: Vec<usize>,
    pub pair1: FactorPair,
    pub pair2: FactorPair,
    pub diagnostics: FitDiagnostics,
}

impl FitResult {
    pub fn pair(&self, mode: Mode) -> &FactorPair {
        match mode {
            Mode::One => &self.pair1,
            Mode::Two => &self.pair2,
        }
    }

    pub fn selected(&self, mode: Mode) -> &[usize] {
        match mode {
            Mode::One => &self.s1,
            Mode::Two => &self.s2,
        }
    }

    pub fn k1(&self) -> usize {
        self.theta.ncols()
    }

    pub fn k2(&self) -> usize {
        self.phi.ncols()
    }

    pub fn lambda(&self, t: usize) -> DMatrix<f64> {
        self.core.slice(t)
    }
}

/// Ranks columns of `u_hat` by their norm after projection onto the
/// `k`-dimensional leading left singular subspace of the centered product,
/// given an orthonormal basis of that subspace (`basis`, `n × r` with
/// `r ≥ k`, columns in decreasing singular-value order).
fn select_from_basis(
    u_hat: &DMatrix<f64>,
    v_gram: &[f64],
    basis: &DMatrix<f64>,
    singular_values: Vec<f64>,
    k: usize,
    tol: &Tolerances,
) -> Result<Selection> {
    let d = u_hat.ncols();
    if k == 0 || k > d {
        return Err(Error::arg(format!("cannot select {k} of {d} columns")));
    }
    let smax = singular_values.first().copied().unwrap_or(0.0);
    let rank = singular_values
        .iter()
        .filter(|&&s| smax > 0.0 && s > tol.rank_rel * smax)
        .count();
    if rank < k {
        return Err(Error::SelectionRank { rank, required: k });
    }
    let lead = basis.columns(0, k);
    let coords = lead.transpose() * u_hat;
    let norms: Vec<f64> = (0..d).map(|j| coords.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap().then(a.cmp(&b)));
    let top = norms[order[0]].max(f64::MIN_POSITIVE);
    let tie = k < d && (norms[order[k - 1]] - norms[order[k]]).abs() <= tol.selection_tie * top;
    let mut chosen = order[..k].to_vec();
    chosen.sort_by(|&a, &b| v_gram[b].partial_cmp(&v_gram[a]).unwrap().then(a.cmp(&b)));
    Ok(Selection {
        indices: chosen,
        projection_norms: norms,
        centered_singular_values: singular_values,
        numerical_rank: rank,
        tie,
    })
}

fn gram_diagonal(v: &DMatrix<f64>) -> Vec<f64> {
    v.column_iter().map(|c| c.norm_squared()).collect()
}

/// Column selection against an explicit centered product `zc` (`n × nT`).
///
/// `v_hat` supplies the Gram diagonal used to order the selected indices.
pub fn select_columns(
    u_hat: &DMatrix<f64>,
    v_hat: &DMatrix<f64>,
    zc: &DMatrix<f64>,
    k: usize,
    tol: &Tolerances,
) -> Result<Selection> {
    if zc.nrows() != u_hat.nrows() || v_hat.ncols() != u_hat.ncols() {
        return Err(Error::dim(format!(
            "selection shapes disagree: Û {:?}, V̂ {:?}, Zc {:?}",
            u_hat.shape(),
            v_hat.shape(),
            zc.shape()
        )));
    }
    let r = u_hat.ncols().min(zc.nrows());
    let (vals, vecs) = sym_eigen_desc(gram_rows(zc));
    let sv: Vec<f64> = vals.iter().take(r).map(|&v| v.max(0.0).sqrt()).collect();
    select_from_basis(
        u_hat,
        &gram_diagonal(v_hat),
        &vecs.columns(0, r).into_owned(),
        sv,
        k,
        tol,
    )
}

/// Column selection for a fitted pair, using the factored form
/// `Zc = (J_n Û)(J_{n,T} V̂)'` so the `n × nT` product is never formed.
fn select_for_pair(pair: &FactorPair, k: usize, ops: CenteringOps, tol: &Tolerances) -> Result<Selection> {
    let mut a = pair.u.clone();
    ops.center_columns(&mut a);
    // J_{n,T} V̂: within each layer block of n rows, subtract the column means.
    let mut b = pair.v.clone();
    let n = ops.n;
    for t in 0..ops.t {
        let mut blk = b.rows_mut(t * n, n);
        for mut col in blk.column_iter_mut() {
            let mean = col.sum() / n as f64;
            col.add_scalar_mut(-mean);
        }
    }
    let qr = a.qr();
    let (q, ra) = (qr.q(), qr.r());
    let k_mat = &ra * (b.transpose() * &b) * ra.transpose();
    let (vals, vecs) = sym_eigen_desc((&k_mat + k_mat.transpose()) * 0.5);
    let basis = q * vecs;
    let sv: Vec<f64> = vals.iter().map(|&v| v.max(0.0).sqrt()).collect();
    select_from_basis(&pair.u, &gram_diagonal(&pair.v), &basis, sv, k, tol)
}

/// `M1(Ŝ) = V1c' (I_T ⊗ Φ̂) / n`, refolded to `k1 × k2 × T`.
pub fn fuse_core(v1c: &DMatrix<f64>, phi: &DMatrix<f64>, n: usize, t: usize) -> Result<Tensor3> {
    if phi.nrows() != n || v1c.nrows() != n * t {
        return Err(Error::dim(format!(
            "fusion expects V1c with {} rows and Φ with {n}, got {:?} and {:?}",
            n * t,
            v1c.shape(),
            phi.shape()
        )));
    }
    let m1 = kron_rightmul(v1c, phi)? / n as f64;
    Tensor3::refold(&m1, Mode::One, [v1c.ncols(), phi.ncols(), t])
}

fn select_cols(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    m.select_columns(idx)
}

/// Runs the full estimator on an `n × n × T` observation tensor.
pub fn estimate(y: &Tensor3, f: &FamilySpec, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    f.validate()?;
    let [n, n2, t] = y.dims();
    if n != n2 {
        return Err(Error::dim(format!(
            "the first two modes must both index the {n} nodes, got {n}×{n2}"
        )));
    }
    for mode in Mode::BOTH {
        let d = cfg.d(mode);
        if d > n {
            return Err(Error::arg(format!(
                "d{} = {d} exceeds the number of nodes {n}",
                mode.number()
            )));
        }
    }
    f.check_all(y.as_slice())?;
    let y1 = y.unfold(Mode::One);
    let y2 = y.unfold(Mode::Two);
    let (r1, r2) = rayon::join(
        || fit_mode(&y1, f, cfg.d1(), cfg),
        || fit_mode(&y2, f, cfg.d2(), cfg),
    );
    let ModeFit {
        pair: pair1,
        diagnostics: diag1,
    } = r1?;
    let ModeFit {
        pair: pair2,
        diagnostics: diag2,
    } = r2?;

    let ops = CenteringOps::new(n, t);
    let sel1 = select_for_pair(&pair1, cfg.k1, ops, &cfg.tolerances)?;
    let sel2 = select_for_pair(&pair2, cfg.k2, ops, &cfg.tolerances)?;

    let theta = select_cols(&pair1.u, &sel1.indices);
    let phi = select_cols(&pair2.u, &sel2.indices);
    let v1c = select_cols(&pair1.v, &sel1.indices);
    let v2c = select_cols(&pair2.v, &sel2.indices);
    let core = fuse_core(&v1c, &phi, n, t)?;

    // Symmetric fusion through mode 2, reported only as a consistency check.
    let m2 = kron_rightmul(&v2c, &theta)? / n as f64;
    let core2 = Tensor3::refold(&m2, Mode::Two, [cfg.k1, cfg.k2, t])?;
    let fusion_discrepancy = core.max_abs_diff(&core2);

    let mut warnings = Vec::new();
    for (m, sel, diag) in [(1, &sel1, &diag1), (2, &sel2, &diag2)] {
        if sel.tie {
            warnings.push(format!(
                "mode {m}: tie between the k-th and (k+1)-th projection norms; kept the smaller index"
            ));
        }
        if !diag.converged {
            warnings.push(format!(
                "mode {m}: solver stopped after {} sweeps without meeting the tolerance",
                diag.iterations
            ));
        }
        if diag.boundary {
            warnings.push(format!(
                "mode {m}: solution on the boundary ({} clamped predictors, row-norm bound active: {})",
                diag.clamp_hits, diag.constraint_active
            ));
        }
        if !diag.within_bound {
            warnings.push(format!("mode {m}: normalized rows exceed the row-norm bound"));
        }
    }

    Ok(FitResult {
        n,
        t,
        theta,
        phi,
        core,
        v1c,
        v2c,
        s1: sel1.indices.clone(),
        s2: sel2.indices.clone(),
        pair1,
        pair2,
        diagnostics: FitDiagnostics {
            mode1: diag1,
            mode2: diag2,
            selection1: Some(sel1),
            selection2: Some(sel2),
            fusion_discrepancy,
            warnings,
        },
    })
}

/// Singular values of the two-sided-centered data transform for each
/// unfolding, for choosing ranks by the elbow of the profile.
pub fn scree(y: &Tensor3, f: &FamilySpec, max_values: usize) -> Result<[Vec<f64>; 2]> {
    let [n, n2, t] = y.dims();
    if n != n2 {
        return Err(Error::dim(format!("expected an n×n×T tensor, got {:?}", y.dims())));
    }
    f.check_all(y.as_slice())?;
    let ops = CenteringOps::new(n, t);
    let mut out: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for mode in Mode::BOTH {
        let raw = y.unfold(mode);
        let transformed = match f.kind {
            crate::family::FamilyKind::Gaussian => raw,
            crate::family::FamilyKind::Poisson => raw.map(|v| (v + 0.5).ln()),
            crate::family::FamilyKind::Bernoulli => raw.map(|v| 2.0 * v - 1.0),
        };
        let zc = crate::tensor::two_sided_center(&transformed, ops)?;
        let mut sv = crate::linalg::singular_values(&zc);
        sv.truncate(max_values);
        out[mode.index()] = sv;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal(r: usize, c: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn dense_kron_identity(t: usize, b: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, p) = b.shape();
        let mut k = DMatrix::zeros(n * t, p * t);
        for l in 0..t {
            k.view_mut((l * n, l * p), (n, p)).copy_from(b);
        }
        k
    }

    fn centered_orthonormal(n: usize, k: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let mut m = normal(n, k, rng);
        CenteringOps::new(n, 1).center_columns(&mut m);
        m.qr().q() * (n as f64).sqrt()
    }

    #[test]
    fn fuse_core_recovers_planted_core() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, t, k1, k2) = (6, 3, 2, 2);
        let phi = centered_orthonormal(n, k2, &mut rng);
        let s = Tensor3::from_fn([k1, k2, t], |_, _, _| rng.sample(StandardNormal));
        let v1c = dense_kron_identity(t, &phi) * s.unfold(Mode::One).transpose();
        let back = fuse_core(&v1c, &phi, n, t).unwrap();
        assert!(back.max_abs_diff(&s) < 1e-12);
        let zero = fuse_core(&DMatrix::zeros(n * t, k1), &phi, n, t).unwrap();
        assert!(zero.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_core_matches_dense_kronecker() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, t, k) = (6, 3, 2);
        let v = normal(n * t, k, &mut rng);
        let phi = normal(n, k, &mut rng);
        let dense = v.transpose() * dense_kron_identity(t, &phi) / n as f64;
        let core = fuse_core(&v, &phi, n, t).unwrap();
        assert!((core.unfold(Mode::One) - dense).amax() < 1e-12);
        assert!(fuse_core(&v, &normal(5, k, &mut rng), n, t).is_err());
    }

    #[test]
    fn intercept_column_is_never_selected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, t) = (8, 2);
        let ops = CenteringOps::new(n, t);
        let theta = centered_orthonormal(n, 1, &mut rng);
        let ones = DMatrix::from_element(n, 1, 1.0);
        let u = DMatrix::from_columns(&[ones.column(0), theta.column(0)]);
        let v = normal(n * t, 2, &mut rng);
        let zc = crate::tensor::two_sided_center(&(&u * v.transpose()), ops).unwrap();
        let sel = select_columns(&u, &v, &zc, 1, &Tolerances::default()).unwrap();
        assert_eq!(sel.indices, vec![1]);
        assert!(sel.projection_norms[0] < 1e-10);
    }

    #[test]
    fn full_selection_orders_by_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, t) = (10, 3);
        let u = centered_orthonormal(n, 3, &mut rng);
        let mut v = normal(n * t, 3, &mut rng);
        v.column_mut(0).scale_mut(0.1);
        v.column_mut(2).scale_mut(3.0);
        let zc = crate::tensor::two_sided_center(&(&u * v.transpose()), CenteringOps::new(n, t)).unwrap();
        let sel = select_columns(&u, &v, &zc, 3, &Tolerances::default()).unwrap();
        assert_eq!(sel.indices, vec![2, 1, 0]);
    }

    #[test]
    fn selection_rank_error_when_centered_product_vanishes() {
        let (n, t) = (6, 2);
        let u = DMatrix::from_element(n, 1, 1.0);
        let v = DMatrix::from_element(n * t, 1, 2.0);
        let zc = crate::tensor::two_sided_center(&(&u * v.transpose()), CenteringOps::new(n, t)).unwrap();
        assert!(matches!(
            select_columns(&u, &v, &zc, 1, &Tolerances::default()),
            Err(Error::SelectionRank { .. })
        ));
    }

    #[test]
    fn factored_selection_matches_dense_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, t, d) = (12, 3, 4);
        let pair = FactorPair::new(normal(n, d, &mut rng), normal(n * t, d, &mut rng)).unwrap();
        let ops = CenteringOps::new(n, t);
        let zc = crate::tensor::two_sided_center(&pair.product(), ops).unwrap();
        let tol = Tolerances::default();
        let dense = select_columns(&pair.u, &pair.v, &zc, 2, &tol).unwrap();
        let fact = select_for_pair(&pair, 2, ops, &tol).unwrap();
        assert_eq!(dense.indices, fact.indices);
        for (a, b) in dense.projection_norms.iter().zip(&fact.projection_norms) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
