//! Constrained low-rank maximum likelihood for a single unfolding.
//!
//! For an `n × nT` data matrix `Y` and rank `d` the solver maximizes
//! `Σ_ij ℓ(y_ij, [U V']_ij)` subject to `U'U = n I`, `V'V` diagonal with
//! decreasing entries, and every row of `U` and `V` having norm at most `C`.
//!
//! The optimizer alternates between the two factors. With one factor held
//! fixed every row of the other is an independent `d`-dimensional concave
//! GLM problem, updated by a damped Newton step with step halving. After
//! each half-sweep the pair is mapped back to the normalized representative
//! with [`normalize_pair`], which leaves `U V'` unchanged.
//!
//! Normalization can push rows of `V` past `C`. Such rows are projected back
//! onto the ball at the start of the next update, which may lower the
//! likelihood; the trace is monotone whenever the bound is inactive.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{FamilyKind, FamilySpec};
use crate::linalg::{self, sym_eigen_desc, truncated_svd};
use crate::tensor::Mode;
use crate::tolerance::Tolerances;

/// How the `±1` ambiguity of each normalized column is resolved.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConvention {
    /// The largest-magnitude entry of every column of `U` is positive.
    #[default]
    PositiveMax,
    /// The largest-magnitude entry of every column of `U` is negative.
    NegativeMax,
}

/// Low-rank factors `(U, V)` of one unfolding, `U` is `n × d` and `V` is
/// `nT × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl FactorPair {
    pub fn new(u: DMatrix<f64>, v: DMatrix<f64>) -> Result<Self> {
        if u.ncols() != v.ncols() || u.ncols() == 0 {
            return Err(Error::dim(format!(
                "factor ranks differ or are zero: U has {} columns, V has {}",
                u.ncols(),
                v.ncols()
            )));
        }
        Ok(FactorPair { u, v })
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn product(&self) -> DMatrix<f64> {
        &self.u * self.v.transpose()
    }

    pub fn max_row_norms(&self) -> (f64, f64) {
        (linalg::max_row_norm(&self.u), linalg::max_row_norm(&self.v))
    }

    /// Deviations from the normalization constraints:
    /// `(‖U'U − nI‖_F, max off-diagonal |V'V| / ‖V‖_F², largest increase
    /// between consecutive diagonal entries of V'V)`.
    pub fn constraint_residuals(&self) -> (f64, f64, f64) {
        let n = self.u.nrows() as f64;
        let d = self.rank();
        let uu = self.u.transpose() * &self.u;
        let orth = (uu - DMatrix::identity(d, d) * n).norm();
        let vv = self.v.transpose() * &self.v;
        let scale = vv.trace().max(f64::MIN_POSITIVE);
        let mut off: f64 = 0.0;
        let mut rise: f64 = 0.0;
        for a in 0..d {
            for b in 0..d {
                if a != b {
                    off = off.max(vv[(a, b)].abs() / scale);
                }
            }
            if a > 0 {
                rise = rise.max(vv[(a, a)] - vv[(a - 1, a - 1)]);
            }
        }
        (orth, off, rise)
    }
}

/// Ranks and solver settings for the two-mode fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub k1: usize,
    pub k2: usize,
    pub k_alpha: usize,
    pub k_beta: usize,
    /// Row-norm bound; `None` uses three times the largest row norm of the
    /// spectral initializer.
    pub c_bound: Option<f64>,
    pub max_iters: usize,
    pub tol_loglik: f64,
    pub newton_damping: f64,
    pub max_halvings: usize,
    pub sign_convention: SignConvention,
    pub tolerances: Tolerances,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            k1: 1,
            k2: 1,
            k_alpha: 0,
            k_beta: 0,
            c_bound: None,
            max_iters: 500,
            tol_loglik: 1e-8,
            newton_damping: 1.0,
            max_halvings: 40,
            sign_convention: SignConvention::PositiveMax,
            tolerances: Tolerances::default(),
        }
    }
}

impl FitConfig {
    pub fn new(k1: usize, k2: usize, k_alpha: usize, k_beta: usize) -> Self {
        FitConfig {
            k1,
            k2,
            k_alpha,
            k_beta,
            ..Default::default()
        }
    }

    /// `d1 = k1 + k_beta + 1`.
    pub fn d1(&self) -> usize {
        self.k1 + self.k_beta + 1
    }

    /// `d2 = k2 + k_alpha + 1`.
    pub fn d2(&self) -> usize {
        self.k2 + self.k_alpha + 1
    }

    pub fn d(&self, mode: Mode) -> usize {
        match mode {
            Mode::One => self.d1(),
            Mode::Two => self.d2(),
        }
    }

    pub fn k(&self, mode: Mode) -> usize {
        match mode {
            Mode::One => self.k1,
            Mode::Two => self.k2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k1 == 0 || self.k2 == 0 {
            return Err(Error::arg("latent ranks k1 and k2 must be at least 1"));
        }
        if !(self.newton_damping > 0.0 && self.newton_damping <= 1.0) {
            return Err(Error::arg(format!(
                "newton_damping must lie in (0, 1], got {}",
                self.newton_damping
            )));
        }
        if !(self.tol_loglik >= 0.0) {
            return Err(Error::arg("tol_loglik must be nonnegative"));
        }
        if let Some(c) = self.c_bound {
            if !(c > 0.0) {
                return Err(Error::arg(format!("row-norm bound must be positive, got {c}")));
            }
        }
        if self.max_iters == 0 {
            return Err(Error::arg("max_iters must be at least 1"));
        }
        Ok(())
    }
}

/// Convergence record of one mode fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModeDiagnostics {
    /// Full sweeps performed.
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood after every half-sweep, before re-normalization.
    pub loglik_trace: Vec<f64>,
    pub final_loglik: f64,
    /// Leading singular values of the transformed data used to initialize.
    pub init_singular_values: Vec<f64>,
    pub c_bound: f64,
    pub max_row_norm_u: f64,
    pub max_row_norm_v: f64,
    /// Fitted predictors with `|x|` at or beyond the family clamp.
    pub clamp_hits: usize,
    /// Whether any row update was cut back to the radius-`C` ball in the
    /// final sweep.
    pub constraint_active: bool,
    /// Either of the two conditions above.
    pub boundary: bool,
    /// Whether the output rows satisfy the `C` bound.
    pub within_bound: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeFit {
    pub pair: FactorPair,
    pub diagnostics: ModeDiagnostics,
}

/// `Σ_ij ℓ(y_ij, z_ij)`.
pub fn total_loglik(y: &DMatrix<f64>, z: &DMatrix<f64>, f: &FamilySpec) -> Result<f64> {
    if y.shape() != z.shape() {
        return Err(Error::dim(format!(
            "data {:?} and predictor {:?} differ in shape",
            y.shape(),
            z.shape()
        )));
    }
    f.check_all(y.as_slice())?;
    Ok(y
        .as_slice()
        .iter()
        .zip(z.as_slice())
        .map(|(&a, &b)| f.loglik_unchecked(a, b))
        .sum())
}

/// Maps `(U, V)` to the representative of its rotation class with
/// `U'U = n I` and `V'V` diagonal and decreasing, keeping `U V'` fixed.
pub fn normalize_pair(
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    sign: SignConvention,
    tol: &Tolerances,
) -> Result<FactorPair> {
    let (n, d) = u.shape();
    if v.ncols() != d {
        return Err(Error::dim(format!(
            "U has {d} columns but V has {}",
            v.ncols()
        )));
    }
    if d > n {
        return Err(Error::Normalization(format!(
            "rank {d} exceeds the {n} rows of U"
        )));
    }
    let qr = u.clone().qr();
    let r = qr.r();
    let pivots: Vec<f64> = (0..d).map(|k| r[(k, k)].abs()).collect();
    let pmax = pivots.iter().cloned().fold(0.0, f64::max);
    if !(pmax > 0.0) || pivots.iter().any(|&p| !(p > tol.normalization_rank * pmax)) {
        return Err(Error::Normalization(format!(
            "U is rank deficient (QR pivots {pivots:?})"
        )));
    }
    let q = qr.q();
    let w = v * r.transpose();
    let (_, o) = sym_eigen_desc(w.transpose() * &w);
    let sqrt_n = (n as f64).sqrt();
    let mut un = q * &o * sqrt_n;
    let mut vn = w * &o / sqrt_n;
    for c in 0..d {
        let lead = un.column(c).iamax();
        let positive = un[(lead, c)] > 0.0;
        let want_positive = sign == SignConvention::PositiveMax;
        if positive != want_positive {
            un.column_mut(c).neg_mut();
            vn.column_mut(c).neg_mut();
        }
    }
    Ok(FactorPair { u: un, v: vn })
}

/// Family-specific surrogate whose truncated SVD seeds the solver.
fn init_transform(y: &DMatrix<f64>, f: &FamilySpec, d: usize, tol: &Tolerances) -> Result<DMatrix<f64>> {
    Ok(match f.kind {
        FamilyKind::Gaussian => y.clone(),
        FamilyKind::Poisson => y.map(|v| (v + 0.5).ln()),
        FamilyKind::Bernoulli => {
            // Smooth the ±1 matrix to rank d, read it as 2p − 1, and map to the
            // logit scale.
            let pm = y.map(|v| 2.0 * v - 1.0);
            let svd = truncated_svd(&pm, d, tol.rank_rel)?;
            let smooth = &svd.u * DMatrix::from_diagonal(&svd.s) * svd.v.transpose();
            smooth.map(|z| 2.0 * z.clamp(-0.99, 0.99).atanh())
        }
    })
}

/// Rank-`d` truncated SVD of the family transform of `y`, normalized.
/// Returns the pair together with the leading singular values.
pub fn spectral_init(
    y: &DMatrix<f64>,
    f: &FamilySpec,
    d: usize,
    cfg: &FitConfig,
) -> Result<(FactorPair, Vec<f64>)> {
    let (n, p) = y.shape();
    if d == 0 || d > n.min(p) {
        return Err(Error::arg(format!(
            "rank {d} must lie in 1..={} for a {n}×{p} unfolding",
            n.min(p)
        )));
    }
    f.check_all(y.as_slice())?;
    let z = init_transform(y, f, d, &cfg.tolerances)?;
    let svd = truncated_svd(&z, d, cfg.tolerances.rank_rel)?;
    let sqrt_n = (n as f64).sqrt();
    let u = svd.u * sqrt_n;
    let v = svd.v * DMatrix::from_diagonal(&svd.s) / sqrt_n;
    let pair = normalize_pair(&u, &v, cfg.sign_convention, &cfg.tolerances)?;
    Ok((pair, svd.s.iter().copied().collect()))
}

/// Spectral initialization followed by alternating row-wise Newton updates.
pub fn fit_mode(y: &DMatrix<f64>, f: &FamilySpec, d: usize, cfg: &FitConfig) -> Result<ModeFit> {
    let (init, sv) = spectral_init(y, f, d, cfg)?;
    let mut fit = fit_mode_from(y, f, init, cfg)?;
    fit.diagnostics.init_singular_values = sv;
    Ok(fit)
}

struct RowOutcome {
    row: Vec<f64>,
    loglik: f64,
    projected: bool,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn row_loglik(y: &[f64], other: &[f64], row: &[f64], f: &FamilySpec) -> f64 {
    let d = row.len();
    y.iter()
        .enumerate()
        .map(|(j, &yj)| f.loglik_kernel(yj, dot(row, &other[j * d..(j + 1) * d])))
        .sum()
}

fn project_ball(row: &mut [f64], c: f64) -> bool {
    let norm = dot(row, row).sqrt();
    if norm > c {
        let s = c / norm;
        row.iter_mut().for_each(|v| *v *= s);
        true
    } else {
        false
    }
}

struct RowSolver<'a> {
    f: &'a FamilySpec,
    d: usize,
    c: f64,
    damping: f64,
    max_halvings: usize,
}

impl RowSolver<'_> {
    /// One damped Newton step on a single row with the other factor fixed.
    /// A row outside the radius-`C` ball is first projected onto it. The
    /// step is then halved until the row log-likelihood does not decrease;
    /// if no such step exists the (projected) row is kept.
    fn update(&self, y: &[f64], other: &[f64], cur: &[f64]) -> RowOutcome {
        let d = self.d;
        let mut start = cur.to_vec();
        let pre_projected = project_ball(&mut start, self.c);
        let cur = start.as_slice();
        let mut g = vec![0.0; d];
        let mut h = DMatrix::<f64>::zeros(d, d);
        let mut ll0 = 0.0;
        for (j, &yj) in y.iter().enumerate() {
            let w = &other[j * d..(j + 1) * d];
            let x = dot(cur, w);
            ll0 += self.f.loglik_kernel(yj, x);
            let s = self.f.score_unchecked(yj, x);
            let nh = self.f.neg_hess(yj, x);
            for a in 0..d {
                g[a] += s * w[a];
                let nwa = nh * w[a];
                for b in 0..=a {
                    h[(a, b)] += nwa * w[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                h[(b, a)] = h[(a, b)];
            }
        }
        let ridge = 1e-12 * h.trace().abs() + f64::MIN_POSITIVE;
        for a in 0..d {
            h[(a, a)] += ridge;
        }
        let keep = RowOutcome {
            row: cur.to_vec(),
            loglik: ll0,
            projected: pre_projected,
        };
        let Some(chol) = h.cholesky() else {
            return keep;
        };
        let step = chol.solve(&DVector::from_vec(g));
        if step.iter().any(|v| !v.is_finite()) {
            return keep;
        }
        let mut eta = self.damping;
        let mut cand = vec![0.0; d];
        for _ in 0..=self.max_halvings {
            for a in 0..d {
                cand[a] = cur[a] + eta * step[a];
            }
            let projected = project_ball(&mut cand, self.c);
            let ll = row_loglik(y, other, &cand, self.f);
            if ll >= ll0 {
                return RowOutcome {
                    row: cand,
                    loglik: ll,
                    projected: projected || pre_projected,
                };
            }
            eta *= 0.5;
        }
        keep
    }

    /// Updates every row of `target` (row-major, `rows × d`) given the fixed
    /// factor `other` (row-major). `data` holds, in column `i`, the
    /// observations paired with row `i`.
    fn half_sweep(&self, data: &DMatrix<f64>, other: &[f64], target: &mut [f64]) -> (f64, bool) {
        let d = self.d;
        let outcomes: Vec<RowOutcome> = target
            .par_chunks(d)
            .enumerate()
            .map(|(i, cur)| {
                let y = data.column(i);
                self.update(y.as_slice(), other, cur)
            })
            .collect();
        let mut ll = 0.0;
        let mut projected = false;
        for (i, o) in outcomes.into_iter().enumerate() {
            target[i * d..(i + 1) * d].copy_from_slice(&o.row);
            ll += o.loglik;
            projected |= o.projected;
        }
        (ll, projected)
    }
}

fn check_finite(ll: f64, rows: &[f64], iteration: usize) -> Result<()> {
    if !ll.is_finite() || rows.iter().any(|x| !x.is_finite()) {
        return Err(Error::Diverged {
            iteration,
            reason: "non-finite log-likelihood or factor entry".into(),
        });
    }
    Ok(())
}

fn renormalize(u: &[f64], v: &[f64], n: usize, p: usize, d: usize, cfg: &FitConfig) -> Result<FactorPair> {
    let um = linalg::from_row_major(n, d, u);
    let vm = linalg::from_row_major(p, d, v);
    normalize_pair(&um, &vm, cfg.sign_convention, &cfg.tolerances)
}

/// Runs the alternating solver from a given starting pair.
pub fn fit_mode_from(
    y: &DMatrix<f64>,
    f: &FamilySpec,
    init: FactorPair,
    cfg: &FitConfig,
) -> Result<ModeFit> {
    cfg.validate()?;
    f.validate()?;
    let (n, p) = y.shape();
    let d = init.rank();
    if init.u.nrows() != n || init.v.nrows() != p {
        return Err(Error::dim(format!(
            "initial factors {:?}/{:?} do not match data {n}×{p}",
            init.u.shape(),
            init.v.shape()
        )));
    }
    f.check_all(y.as_slice())?;

    let (ru, rv) = init.max_row_norms();
    let c = cfg.c_bound.unwrap_or(3.0 * ru.max(rv));
    let solver = RowSolver {
        f,
        d,
        c,
        damping: cfg.newton_damping,
        max_halvings: cfg.max_halvings,
    };
    // Column i of `yt` is row i of `y`, so both half-sweeps read contiguous data.
    let yt = y.transpose();
    let mut u = linalg::to_row_major(&init.u);
    let mut v = linalg::to_row_major(&init.v);

    let kernel_total = |u: &[f64], v: &[f64]| -> f64 {
        (0..n)
            .into_par_iter()
            .map(|i| row_loglik(yt.column(i).as_slice(), v, &u[i * d..(i + 1) * d], f))
            .collect::<Vec<f64>>()
            .iter()
            .sum()
    };

    let mut trace = Vec::new();
    let mut ll_prev = kernel_total(&u, &v);
    if !ll_prev.is_finite() {
        return Err(Error::Diverged {
            iteration: 0,
            reason: "non-finite log-likelihood at the initial point".into(),
        });
    }
    let mut converged = false;
    let mut iterations = 0;
    let mut constraint_active = false;
    let mut pair = init;
    for iter in 1..=cfg.max_iters {
        iterations = iter;
        let (ll_u, proj_u) = solver.half_sweep(&yt, &v, &mut u);
        trace.push(ll_u);
        check_finite(ll_u, &u, iter)?;
        // Normalizing before the V half-sweep makes the second normalization a
        // pure rotation of V's rows, so the row-norm bound enforced on V
        // survives it.
        pair = renormalize(&u, &v, n, p, d, cfg)?;
        u = linalg::to_row_major(&pair.u);
        v = linalg::to_row_major(&pair.v);
        let (ll_v, proj_v) = solver.half_sweep(y, &u, &mut v);
        trace.push(ll_v);
        check_finite(ll_v, &v, iter)?;
        constraint_active = proj_u || proj_v;
        pair = renormalize(&u, &v, n, p, d, cfg)?;
        u = linalg::to_row_major(&pair.u);
        v = linalg::to_row_major(&pair.v);
        let change = (ll_v - ll_prev).abs();
        ll_prev = ll_v;
        if change <= cfg.tol_loglik * ll_v.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }

    let z = pair.product();
    let clamp_hits = z.iter().filter(|&&x| f.at_boundary(x)).count();
    let (mu, mv) = pair.max_row_norms();
    let final_loglik = total_loglik(y, &z, f)?;
    let diagnostics = ModeDiagnostics {
        iterations,
        converged,
        loglik_trace: trace,
        final_loglik,
        init_singular_values: Vec::new(),
        c_bound: c,
        max_row_norm_u: mu,
        max_row_norm_v: mv,
        clamp_hits,
        constraint_active,
        boundary: clamp_hits > 0 || constraint_active,
        within_bound: mu <= c * (1.0 + 1e-12) && mv <= c * (1.0 + 1e-12),
    };
    Ok(ModeFit { pair, diagnostics })
}
