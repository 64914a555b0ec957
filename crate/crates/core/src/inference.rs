//! Sandwich covariances, confidence intervals and layer tests.
//!
//! For row `i` of the mode-`m` left factor the curvature and score outer
//! products are
//!
//! ```text
//! Σ̂ = Σ_s −ℓ''(π̂_is) v̂_s v̂_s'      Ω̂ = Σ_s ℓ'(π̂_is)² v̂_s v̂_s'
//! ```
//!
//! with `s` running over the `nT` columns of the unfolding, and the
//! covariance of the latent coordinates is the `Ŝ_m` sub-block of
//! `Σ̂⁻¹ Ω̂ Σ̂⁻¹`. Columns of the right factor are handled symmetrically with
//! the roles of `Û` and `V̂` exchanged. The variance of a core entry
//! `[Λ̂_t]_ij` combines the column covariances of `V̂1c` over the `n` columns
//! of layer `t` with the squared entries of `Φ̂[:, j]`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::estimate::FitResult;
use crate::family::{FamilyKind, FamilySpec};
use crate::linalg::{sym_eigen_desc, sym_inverse};
use crate::tensor::{two_sided_center, CenteringOps, Mode, Tensor3};
use crate::tolerance::Tolerances;

/// What a sandwich covariance refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SandwichTarget {
    /// Row `i` of `Û_m` (latent position of node `i`).
    Row { mode: Mode, i: usize },
    /// Row `j` of `V̂_m` (column `j` of the unfolding).
    Column { mode: Mode, j: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SandwichCov {
    pub target: SandwichTarget,
    pub sigma: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    /// `[Σ̂⁻¹ Ω̂ Σ̂⁻¹]` restricted to the selected latent columns, in the
    /// order of `Ŝ_m`.
    pub sub_block: DMatrix<f64>,
    pub min_eigenvalue: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Theta,
    Phi,
}

impl Which {
    pub fn mode(self) -> Mode {
        match self {
            Which::Theta => Mode::One,
            Which::Phi => Mode::Two,
        }
    }
}

/// Marginal intervals for one latent-position row plus the radius of the
/// joint confidence ellipsoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionCi {
    pub which: Which,
    pub node: usize,
    pub level: f64,
    pub estimate: Vec<f64>,
    pub std_error: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Squared Mahalanobis radius of the ellipsoid, a chi-square quantile.
    pub ellipsoid_radius_sq: f64,
    pub covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoreCi {
    pub i: usize,
    pub j: usize,
    pub t: usize,
    pub level: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correction {
    None,
    Bonferroni,
}

/// Test of `[Λ_t]_ij = [Λ_t']_ij`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub i: usize,
    pub j: usize,
    pub t: usize,
    pub t_prime: usize,
    pub delta_hat: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
    pub critical: f64,
    pub reject: bool,
    pub alpha: f64,
    pub correction: Correction,
}

/// Bonferroni test of `Λ_t = Λ_t'` over all `k1·k2` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTest {
    pub t: usize,
    pub t_prime: usize,
    pub alpha: f64,
    pub reject: bool,
    pub entries: Vec<TestResult>,
    /// `(i, j)` of the entries that reject.
    pub rejecting: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangepointScan {
    pub alpha: f64,
    /// Layers `t` (zero-based) for which `Λ_t = Λ_{t−1}` is rejected.
    pub detected: Vec<usize>,
    pub tests: Vec<LayerTest>,
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Upper `1 − α/2` standard normal quantile.
pub fn two_sided_quantile(alpha: f64) -> f64 {
    standard_normal().inverse_cdf(1.0 - alpha / 2.0)
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level <= 1.0 {
        Ok(())
    } else {
        Err(Error::arg(format!("confidence level must lie in (0, 1], got {level}")))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::arg(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Read-only view of a fit together with the data it was fitted on.
pub struct InferenceContext<'a> {
    fit: &'a FitResult,
    family: FamilySpec,
    y1: DMatrix<f64>,
    y2: DMatrix<f64>,
    tol: Tolerances,
}

impl<'a> InferenceContext<'a> {
    pub fn new(fit: &'a FitResult, y: &Tensor3, family: FamilySpec, tol: Tolerances) -> Result<Self> {
        let [n, n2, t] = y.dims();
        if n != fit.n || n2 != fit.n || t != fit.t {
            return Err(Error::dim(format!(
                "data dims {:?} do not match a fit on n = {}, T = {}",
                y.dims(),
                fit.n,
                fit.t
            )));
        }
        family.validate()?;
        family.check_all(y.as_slice())?;
        Ok(InferenceContext {
            fit,
            family,
            y1: y.unfold(Mode::One),
            y2: y.unfold(Mode::Two),
            tol,
        })
    }

    pub fn fit(&self) -> &FitResult {
        self.fit
    }

    fn data(&self, mode: Mode) -> &DMatrix<f64> {
        match mode {
            Mode::One => &self.y1,
            Mode::Two => &self.y2,
        }
    }

    /// Builds `(Σ̂, Ω̂)` from rows `w_s` of `weights` paired with fixed vector
    /// `fixed` through `π̂_s = fixed · w_s` and observations `ys`.
    fn accumulate(
        &self,
        fixed: &[f64],
        weights: &DMatrix<f64>,
        ys: impl Iterator<Item = f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = fixed.len();
        let mut sigma = DMatrix::zeros(d, d);
        let mut omega = DMatrix::zeros(d, d);
        let mut w = vec![0.0; d];
        for (s, y) in ys.enumerate() {
            let mut x = 0.0;
            for a in 0..d {
                w[a] = weights[(s, a)];
                x += fixed[a] * w[a];
            }
            let h = self.family.neg_hess(y, x);
            let g = self.family.score_unchecked(y, x);
            let g2 = g * g;
            for a in 0..d {
                for b in 0..=a {
                    let ww = w[a] * w[b];
                    sigma[(a, b)] += h * ww;
                    omega[(a, b)] += g2 * ww;
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                sigma[(b, a)] = sigma[(a, b)];
                omega[(b, a)] = omega[(a, b)];
            }
        }
        (sigma, omega)
    }

    fn finish(&self, target: SandwichTarget, mode: Mode, sigma: DMatrix<f64>, omega: DMatrix<f64>) -> Result<SandwichCov> {
        let inv = sym_inverse(&sigma, self.tol.eig_floor_rel)?;
        let full = &inv * &omega * &inv;
        let sel = self.fit.selected(mode);
        let k = sel.len();
        let sub = DMatrix::from_fn(k, k, |a, b| 0.5 * (full[(sel[a], sel[b])] + full[(sel[b], sel[a])]));
        let min_eigenvalue = sym_eigen_desc(sigma.clone()).0.min();
        Ok(SandwichCov {
            target,
            sigma,
            omega,
            sub_block: sub,
            min_eigenvalue,
        })
    }

    /// Sandwich covariance of row `i` of `Û_m`, i.e. of `[Θ̂]_i` for mode 1
    /// and `[Φ̂]_i` for mode 2.
    pub fn sandwich_row_v(&self, mode: Mode, i: usize) -> Result<SandwichCov> {
        let pair = self.fit.pair(mode);
        if i >= pair.u.nrows() {
            return Err(Error::arg(format!("node {i} out of range 0..{}", pair.u.nrows())));
        }
        let ui: Vec<f64> = pair.u.row(i).iter().copied().collect();
        let y = self.data(mode);
        let (sigma, omega) = self.accumulate(&ui, &pair.v, y.row(i).iter().copied());
        self.finish(SandwichTarget::Row { mode, i }, mode, sigma, omega)
    }

    /// Sandwich covariance of row `j` of `V̂_m`.
    pub fn sandwich_col_u(&self, mode: Mode, j: usize) -> Result<SandwichCov> {
        let pair = self.fit.pair(mode);
        if j >= pair.v.nrows() {
            return Err(Error::arg(format!("column {j} out of range 0..{}", pair.v.nrows())));
        }
        let vj: Vec<f64> = pair.v.row(j).iter().copied().collect();
        let y = self.data(mode);
        let (sigma, omega) = self.accumulate(&vj, &pair.u, y.column(j).iter().copied());
        self.finish(SandwichTarget::Column { mode, j }, mode, sigma, omega)
    }

    pub fn ci_position(&self, which: Which, node: usize, level: f64) -> Result<PositionCi> {
        check_level(level)?;
        let mode = which.mode();
        let cov = self.sandwich_row_v(mode, node)?.sub_block;
        let est: Vec<f64> = match which {
            Which::Theta => self.fit.theta.row(node).iter().copied().collect(),
            Which::Phi => self.fit.phi.row(node).iter().copied().collect(),
        };
        let k = est.len();
        let (q, r2) = if level >= 1.0 {
            (f64::INFINITY, f64::INFINITY)
        } else {
            let chi = ChiSquared::new(k as f64).expect("positive dof");
            (two_sided_quantile(1.0 - level), chi.inverse_cdf(level))
        };
        let se: Vec<f64> = (0..k).map(|a| cov[(a, a)].max(0.0).sqrt()).collect();
        Ok(PositionCi {
            which,
            node,
            level,
            lower: est.iter().zip(&se).map(|(e, s)| e - q * s).collect(),
            upper: est.iter().zip(&se).map(|(e, s)| e + q * s).collect(),
            estimate: est,
            std_error: se,
            ellipsoid_radius_sq: r2,
            covariance: (0..k).map(|a| cov.row(a).iter().copied().collect()).collect(),
        })
    }

    /// `σ̂²_{ijt}` for every `(i, j)` of layer `t`, as a `k1 × k2` matrix.
    pub fn layer_variances(&self, t: usize) -> Result<DMatrix<f64>> {
        let (n, k1, k2) = (self.fit.n, self.fit.k1(), self.fit.k2());
        if t >= self.fit.t {
            return Err(Error::arg(format!("layer {t} out of range 0..{}", self.fit.t)));
        }
        let diags: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|s| {
                self.sandwich_col_u(Mode::One, s + n * t)
                    .map(|c| c.sub_block.diagonal().iter().copied().collect())
            })
            .collect::<Result<_>>()?;
        let phi = &self.fit.phi;
        let mut out = DMatrix::zeros(k1, k2);
        for (s, diag) in diags.iter().enumerate() {
            for j in 0..k2 {
                let w = phi[(s, j)] * phi[(s, j)];
                for i in 0..k1 {
                    out[(i, j)] += w * diag[i];
                }
            }
        }
        Ok(out / (n * n) as f64)
    }

    /// `σ̂²_{ijt}`.
    pub fn core_variance(&self, i: usize, j: usize, t: usize) -> Result<f64> {
        if i >= self.fit.k1() || j >= self.fit.k2() {
            return Err(Error::arg(format!("core entry ({i}, {j}) out of range")));
        }
        Ok(self.layer_variances(t)?[(i, j)])
    }

    pub fn ci_core(&self, i: usize, j: usize, t: usize, level: f64) -> Result<CoreCi> {
        check_level(level)?;
        let var = self.core_variance(i, j, t)?;
        let est = self.fit.core.get(i, j, t);
        let se = var.sqrt();
        let q = if level >= 1.0 {
            f64::INFINITY
        } else {
            two_sided_quantile(1.0 - level)
        };
        Ok(CoreCi {
            i,
            j,
            t,
            level,
            estimate: est,
            std_error: se,
            lower: est - q * se,
            upper: est + q * se,
        })
    }

    fn entry_test(
        &self,
        (i, j): (usize, usize),
        (t, tp): (usize, usize),
        (var_t, var_tp): (f64, f64),
        alpha: f64,
        correction: Correction,
        comparisons: usize,
    ) -> TestResult {
        let delta = self.fit.core.get(i, j, t) - self.fit.core.get(i, j, tp);
        let se = (var_t + var_tp).sqrt();
        let z = if delta == 0.0 { 0.0 } else { delta / se };
        let level = match correction {
            Correction::None => alpha,
            Correction::Bonferroni => alpha / comparisons as f64,
        };
        let critical = two_sided_quantile(level);
        TestResult {
            i,
            j,
            t,
            t_prime: tp,
            delta_hat: delta,
            se,
            z,
            p_value: erfc(z.abs() / std::f64::consts::SQRT_2),
            critical,
            reject: z.abs() > critical,
            alpha,
            correction,
        }
    }

    fn check_pair(&self, t: usize, tp: usize) -> Result<()> {
        if t == tp {
            return Err(Error::arg(format!("layers must differ, got t = t' = {t}")));
        }
        if t.max(tp) >= self.fit.t {
            return Err(Error::arg(format!(
                "layers ({t}, {tp}) out of range 0..{}",
                self.fit.t
            )));
        }
        Ok(())
    }

    /// Entrywise test of `[Λ_t]_ij = [Λ_t']_ij` at level `alpha`.
    pub fn diff_test(&self, i: usize, j: usize, t: usize, tp: usize, alpha: f64) -> Result<TestResult> {
        check_alpha(alpha)?;
        self.check_pair(t, tp)?;
        let vt = self.core_variance(i, j, t)?;
        let vtp = self.core_variance(i, j, tp)?;
        Ok(self.entry_test((i, j), (t, tp), (vt, vtp), alpha, Correction::None, 1))
    }

    fn layer_test_with(
        &self,
        t: usize,
        tp: usize,
        alpha: f64,
        var_t: &DMatrix<f64>,
        var_tp: &DMatrix<f64>,
    ) -> LayerTest {
        let (k1, k2) = (self.fit.k1(), self.fit.k2());
        let m = k1 * k2;
        let correction = if m == 1 {
            Correction::None
        } else {
            Correction::Bonferroni
        };
        let mut entries = Vec::with_capacity(m);
        for i in 0..k1 {
            for j in 0..k2 {
                entries.push(self.entry_test(
                    (i, j),
                    (t, tp),
                    (var_t[(i, j)], var_tp[(i, j)]),
                    alpha,
                    correction,
                    m,
                ));
            }
        }
        let rejecting: Vec<(usize, usize)> = entries.iter().filter(|e| e.reject).map(|e| (e.i, e.j)).collect();
        LayerTest {
            t,
            t_prime: tp,
            alpha,
            reject: !rejecting.is_empty(),
            entries,
            rejecting,
        }
    }

    /// Bonferroni test of `Λ_t = Λ_t'` across all `k1·k2` entries.
    pub fn layer_test(&self, t: usize, tp: usize, alpha: f64) -> Result<LayerTest> {
        check_alpha(alpha)?;
        self.check_pair(t, tp)?;
        let vt = self.layer_variances(t)?;
        let vtp = self.layer_variances(tp)?;
        Ok(self.layer_test_with(t, tp, alpha, &vt, &vtp))
    }

    /// Tests every consecutive pair `(t, t − 1)` and collects the rejections.
    pub fn changepoint_scan(&self, alpha: f64) -> Result<ChangepointScan> {
        check_alpha(alpha)?;
        let t_count = self.fit.t;
        let vars: Vec<DMatrix<f64>> = (0..t_count)
            .map(|t| self.layer_variances(t))
            .collect::<Result<_>>()?;
        let tests: Vec<LayerTest> = (1..t_count)
            .map(|t| self.layer_test_with(t, t - 1, alpha, &vars[t], &vars[t - 1]))
            .collect();
        Ok(ChangepointScan {
            alpha,
            detected: tests.iter().filter(|l| l.reject).map(|l| l.t).collect(),
            tests,
        })
    }
}

/// Residual `J_n M1(Y) J_{n,T}' − Θ̂ M1(Ŝ)(I_T ⊗ Φ̂')` as an `n × nT` matrix.
pub fn centered_residual(y: &Tensor3, fit: &FitResult) -> Result<DMatrix<f64>> {
    let [n, _, t] = y.dims();
    if n != fit.n || t != fit.t {
        return Err(Error::dim(format!(
            "data dims {:?} do not match a fit on n = {}, T = {}",
            y.dims(),
            fit.n,
            fit.t
        )));
    }
    let mut r = two_sided_center(&y.unfold(Mode::One), CenteringOps::new(n, t))?;
    let phi_t = fit.phi.transpose();
    for layer in 0..t {
        let signal = &fit.theta * fit.core.slice(layer) * &phi_t;
        let mut blk = r.columns_mut(layer * n, n);
        blk -= signal;
    }
    Ok(r)
}

/// Noise variance of a Gaussian fit: mean square of [`centered_residual`].
pub fn gaussian_sigma0_hat(y: &Tensor3, fit: &FitResult, family: &FamilySpec) -> Result<f64> {
    if family.kind != FamilyKind::Gaussian {
        return Err(Error::Unsupported(format!(
            "noise variance estimation applies to the Gaussian family, not {}",
            family.kind
        )));
    }
    let r = centered_residual(y, fit)?;
    Ok(r.norm_squared() / r.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::FitDiagnostics;
    use crate::factor::FactorPair;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal(r: usize, c: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    /// A fit-shaped object with arbitrary factors, enough to exercise the
    /// sandwich formulas.
    fn synthetic_fit(n: usize, t: usize, d: usize, k: usize, rng: &mut impl Rng) -> FitResult {
        let pair1 = FactorPair::new(normal(n, d, rng), normal(n * t, d, rng) * 0.3).unwrap();
        let pair2 = FactorPair::new(normal(n, d, rng), normal(n * t, d, rng) * 0.3).unwrap();
        let s: Vec<usize> = (0..k).collect();
        let theta = pair1.u.select_columns(&s);
        let phi = pair2.u.select_columns(&s);
        let v1c = pair1.v.select_columns(&s);
        let v2c = pair2.v.select_columns(&s);
        let core = crate::estimate::fuse_core(&v1c, &phi, n, t).unwrap();
        FitResult {
            n,
            t,
            theta,
            phi,
            core,
            v1c,
            v2c,
            s1: s.clone(),
            s2: s,
            pair1,
            pair2,
            diagnostics: FitDiagnostics::default(),
        }
    }

    fn poisson_data(n: usize, t: usize, rng: &mut impl Rng) -> Tensor3 {
        Tensor3::from_fn([n, n, t], |_, _, _| rng.random_range(0..5) as f64)
    }

    #[test]
    fn row_sandwich_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, t, d, k) = (7, 3, 3, 2);
        let fit = synthetic_fit(n, t, d, k, &mut rng);
        let y = poisson_data(n, t, &mut rng);
        let f = FamilySpec::poisson();
        let ctx = InferenceContext::new(&fit, &y, f, Tolerances::default()).unwrap();
        for mode in Mode::BOTH {
            let ym = y.unfold(mode);
            let pair = fit.pair(mode);
            for i in [0, n - 1] {
                let mut sig = DMatrix::zeros(d, d);
                let mut om = DMatrix::zeros(d, d);
                for s in 0..n * t {
                    let mut x = 0.0;
                    for a in 0..d {
                        x += pair.u[(i, a)] * pair.v[(s, a)];
                    }
                    for a in 0..d {
                        for b in 0..d {
                            let vv = pair.v[(s, a)] * pair.v[(s, b)];
                            sig[(a, b)] += x.exp() * vv;
                            om[(a, b)] += (ym[(i, s)] - x.exp()).powi(2) * vv;
                        }
                    }
                }
                let got = ctx.sandwich_row_v(mode, i).unwrap();
                assert!((got.sigma - &sig).amax() < 1e-10 * sig.amax());
                assert!((got.omega - &om).amax() < 1e-10 * om.amax());
                let inv = sig.try_inverse().unwrap();
                let full = &inv * om * &inv;
                let sub = full.view((0, 0), (k, k)).into_owned();
                assert!((got.sub_block - sub).amax() < 1e-10 * full.amax());
            }
        }
    }

    #[test]
    fn column_sandwich_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, t, d, k) = (6, 2, 3, 2);
        let fit = synthetic_fit(n, t, d, k, &mut rng);
        let f = FamilySpec::bernoulli();
        let y = Tensor3::from_fn([n, n, t], |_, _, _| rng.random_range(0..2) as f64);
        let ctx = InferenceContext::new(&fit, &y, f, Tolerances::default()).unwrap();
        let y1 = y.unfold(Mode::One);
        let pair = &fit.pair1;
        for j in [0, 5, n * t - 1] {
            let mut sig = DMatrix::zeros(d, d);
            let mut om = DMatrix::zeros(d, d);
            for r in 0..n {
                let x: f64 = (0..d).map(|a| pair.u[(r, a)] * pair.v[(j, a)]).sum();
                let p = 1.0 / (1.0 + (-x).exp());
                for a in 0..d {
                    for b in 0..d {
                        let uu = pair.u[(r, a)] * pair.u[(r, b)];
                        sig[(a, b)] += p * (1.0 - p) * uu;
                        om[(a, b)] += (y1[(r, j)] - p).powi(2) * uu;
                    }
                }
            }
            let got = ctx.sandwich_col_u(Mode::One, j).unwrap();
            assert!((got.sigma - &sig).amax() < 1e-10 * sig.amax());
            assert!((got.omega - &om).amax() < 1e-10 * om.amax());
        }
    }

    #[test]
    fn gaussian_scalar_case() {
        // d = 1 with all v_s = 1: Σ̂ = nT, Ω̂ = Σ residual², sub-block Ω̂/(nT)².
        let (n, t) = (4, 2);
        let pair = FactorPair::new(DMatrix::from_element(n, 1, 0.5), DMatrix::from_element(n * t, 1, 1.0)).unwrap();
        let fit = FitResult {
            n,
            t,
            theta: pair.u.clone(),
            phi: pair.u.clone(),
            core: Tensor3::zeros([1, 1, t]),
            v1c: pair.v.clone(),
            v2c: pair.v.clone(),
            s1: vec![0],
            s2: vec![0],
            pair1: pair.clone(),
            pair2: pair,
            diagnostics: FitDiagnostics::default(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = Tensor3::from_fn([n, n, t], |_, _, _| rng.random_range(-1.0..1.0));
        let ctx = InferenceContext::new(&fit, &y, FamilySpec::gaussian(1.0), Tolerances::default()).unwrap();
        let sw = ctx.sandwich_row_v(Mode::One, 2).unwrap();
        let nt = (n * t) as f64;
        let om: f64 = y.unfold(Mode::One).row(2).iter().map(|v| (v - 0.5).powi(2)).sum();
        assert!((sw.sigma[(0, 0)] - nt).abs() < 1e-12);
        assert!((sw.omega[(0, 0)] - om).abs() < 1e-12);
        assert!((sw.sub_block[(0, 0)] - om / (nt * nt)).abs() < 1e-12);
    }

    #[test]
    fn gaussian_population_residual_sandwich_collapses() {
        // With every squared residual equal to σ₀², Σ⁻¹ΩΣ⁻¹ = σ₀² (Σ v v')⁻¹.
        let (n, t, d) = (5, 2, 2);
        let sigma0: f64 = 1.7;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fit = synthetic_fit(n, t, d, d, &mut rng);
        let z = fit.pair1.product();
        let signs = Tensor3::from_fn([n, n, t], |_, _, _| if rng.random_bool(0.5) { 1.0 } else { -1.0 });
        let y1 = z + DMatrix::from_column_slice(n, n * t, signs.as_slice()) * sigma0.sqrt();
        let y = Tensor3::refold(&y1, Mode::One, [n, n, t]).unwrap();
        let ctx = InferenceContext::new(&fit, &y, FamilySpec::gaussian(sigma0), Tolerances::default()).unwrap();
        let sw = ctx.sandwich_row_v(Mode::One, 1).unwrap();
        let vv = fit.pair1.v.transpose() * &fit.pair1.v;
        let expect = vv.try_inverse().unwrap() * sigma0;
        assert!((sw.sub_block - &expect).amax() < 1e-10 * expect.amax());

        let swc = ctx.sandwich_col_u(Mode::One, 3).unwrap();
        let uu = fit.pair1.u.transpose() * &fit.pair1.u;
        let expect = uu.try_inverse().unwrap() * sigma0;
        assert!((swc.sub_block - &expect).amax() < 1e-10 * expect.amax());
    }

    #[test]
    fn orthogonal_u_gives_scaled_identity_curvature() {
        let (n, t) = (6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut fit = synthetic_fit(n, t, 2, 2, &mut rng);
        fit.pair1.u = normal(n, 2, &mut rng).qr().q() * (n as f64).sqrt();
        let y = Tensor3::from_fn([n, n, t], |_, _, _| rng.random_range(-1.0..1.0));
        let s2 = 2.0;
        let ctx = InferenceContext::new(&fit, &y, FamilySpec::gaussian(s2), Tolerances::default()).unwrap();
        let sw = ctx.sandwich_col_u(Mode::One, 0).unwrap();
        assert!((sw.sigma - DMatrix::identity(2, 2) * (n as f64 / s2)).amax() < 1e-12);
    }

    #[test]
    fn core_variance_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, t, d, k) = (8, 3, 3, 2);
        let fit = synthetic_fit(n, t, d, k, &mut rng);
        let y = poisson_data(n, t, &mut rng);
        let ctx = InferenceContext::new(&fit, &y, FamilySpec::poisson(), Tolerances::default()).unwrap();
        for (i, j, l) in [(0, 0, 0), (1, 0, 2), (1, 1, 1)] {
            let mut acc = 0.0;
            for s in 0..n {
                let c = ctx.sandwich_col_u(Mode::One, s + n * l).unwrap().sub_block;
                acc += fit.phi[(s, j)].powi(2) * c[(i, i)];
            }
            acc /= (n * n) as f64;
            let got = ctx.core_variance(i, j, l).unwrap();
            assert!((got - acc).abs() < 1e-12 * acc.abs().max(1.0));
            assert!(got > 0.0);
        }
    }

    #[test]
    fn unit_covariance_gives_normal_quantile_width() {
        assert!((two_sided_quantile(0.05) - 1.959_963_984_540_054).abs() < 1e-9);
    }

    #[test]
    fn zero_difference_never_rejects() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, t) = (6, 2);
        let mut fit = synthetic_fit(n, t, 2, 1, &mut rng);
        fit.core = Tensor3::from_fn([1, 1, t], |_, _, _| 0.7);
        let y = poisson_data(n, t, &mut rng);
        let ctx = InferenceContext::new(&fit, &y, FamilySpec::poisson(), Tolerances::default()).unwrap();
        let r = ctx.diff_test(0, 0, 1, 0, 0.05).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert!(!r.reject);
        assert!(matches!(ctx.diff_test(0, 0, 1, 1, 0.05), Err(Error::Argument(_))));
        // With k1 = k2 = 1 the layer test is the entrywise test.
        let l = ctx.layer_test(1, 0, 0.05).unwrap();
        assert_eq!(l.entries.len(), 1);
        assert_eq!(l.entries[0].critical, r.critical);
    }

    #[test]
    fn sigma0_residual_matches_entrywise_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, t, d, k) = (6, 3, 3, 2);
        let fit = synthetic_fit(n, t, d, k, &mut rng);
        let y = Tensor3::from_fn([n, n, t], |_, _, _| rng.sample(StandardNormal));
        let r = centered_residual(&y, &fit).unwrap();
        let yc = two_sided_center(&y.unfold(Mode::One), CenteringOps::new(n, t)).unwrap();
        for l in 0..t {
            for i in 0..n {
                for j in 0..n {
                    let mut sig = 0.0;
                    for a in 0..k {
                        for b in 0..k {
                            sig += fit.theta[(i, a)] * fit.core.get(a, b, l) * fit.phi[(j, b)];
                        }
                    }
                    assert!((r[(i, j + n * l)] - (yc[(i, j + n * l)] - sig)).abs() < 1e-10);
                }
            }
        }
        assert!(matches!(
            gaussian_sigma0_hat(&y, &fit, &FamilySpec::poisson()),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn singular_curvature_is_a_conditioning_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, t) = (5, 2);
        let mut fit = synthetic_fit(n, t, 2, 1, &mut rng);
        fit.pair1.v.column_mut(1).fill(0.0);
        let y = Tensor3::from_fn([n, n, t], |_, _, _| rng.sample(StandardNormal));
        let ctx = InferenceContext::new(&fit, &y, FamilySpec::gaussian(1.0), Tolerances::default()).unwrap();
        assert!(matches!(
            ctx.sandwich_row_v(Mode::One, 0),
            Err(Error::Conditioning { .. })
        ));
    }
}
