//! Synthetic parameters and networks, sign alignment against the truth, and
//! coverage experiments.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{estimate, FitResult};
use crate::factor::{normalize_pair, FactorPair, FitConfig, SignConvention};
use crate::family::{FamilyKind, FamilySpec};
use crate::inference::{InferenceContext, Which};
use crate::linalg::sym_eigen_desc;
use crate::tensor::{tucker_linpred, CenteringOps, Mode, Tensor3};
use crate::tolerance::Tolerances;

/// Attempts at drawing parameters whose population singular values are
/// well separated before giving up.
const MAX_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoreKind {
    /// Diagonal `Λ_t` (requires `k1 = k2`).
    Diagonal,
    /// Dense rectangular `Λ_t`, rotated so both core unfoldings have
    /// orthogonal rows.
    Dense,
}

/// How the connection matrices evolve over layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum CoreSequence {
    /// Fresh draw per layer.
    Independent,
    /// One draw shared by every layer.
    Constant,
    /// A shared draw, with `jump` added to entry `(i, j)` from layer
    /// `layer` (zero-based) onwards.
    Break {
        layer: usize,
        i: usize,
        j: usize,
        jump: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenOptions {
    pub n: usize,
    pub t: usize,
    pub k1: usize,
    pub k2: usize,
    pub k_alpha: usize,
    pub k_beta: usize,
    /// Scale multiplying the standard normal draws of the core entries.
    pub signal: f64,
    pub core_kind: CoreKind,
    pub core_sequence: CoreSequence,
    pub tolerances: Tolerances,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            n: 100,
            t: 10,
            k1: 2,
            k2: 2,
            k_alpha: 1,
            k_beta: 1,
            signal: 4.0,
            core_kind: CoreKind::Diagonal,
            core_sequence: CoreSequence::Independent,
            tolerances: Tolerances::default(),
        }
    }
}

impl GenOptions {
    /// Default core scale for each family. Gaussian uses 4; Poisson and
    /// Bernoulli use smaller scales that keep rates and probabilities away
    /// from their extremes.
    pub fn default_signal(kind: FamilyKind) -> f64 {
        match kind {
            FamilyKind::Gaussian => 4.0,
            FamilyKind::Poisson => 0.5,
            FamilyKind::Bernoulli => 1.0,
        }
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig::new(self.k1, self.k2, self.k_alpha, self.k_beta)
    }

    fn validate(&self) -> Result<()> {
        if self.k1 == 0 || self.k2 == 0 {
            return Err(Error::arg("k1 and k2 must be at least 1"));
        }
        if self.k1 + self.k_beta + 1 > self.n || self.k2 + self.k_alpha + 1 > self.n {
            return Err(Error::arg(format!(
                "ranks k1 + k_beta + 1 = {} and k2 + k_alpha + 1 = {} must not exceed n = {}",
                self.k1 + self.k_beta + 1,
                self.k2 + self.k_alpha + 1,
                self.n
            )));
        }
        if self.t == 0 || self.k_alpha > self.t || self.k_beta > self.t {
            return Err(Error::arg(format!(
                "T = {} must be positive and at least k_alpha and k_beta",
                self.t
            )));
        }
        if self.core_kind == CoreKind::Diagonal && self.k1 != self.k2 {
            return Err(Error::arg("diagonal cores need k1 = k2; use the dense core kind"));
        }
        if let CoreSequence::Break { layer, i, j, .. } = self.core_sequence {
            if layer == 0 || layer >= self.t {
                return Err(Error::arg(format!("break layer must lie in 1..{}", self.t)));
            }
            if i >= self.k1 || j >= self.k2 || (self.core_kind == CoreKind::Diagonal && i != j) {
                return Err(Error::arg(format!("break entry ({i}, {j}) is not a core entry of this kind")));
            }
        }
        Ok(())
    }
}

/// Ground-truth parameters of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub theta: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub core: Tensor3,
    pub u_alpha: DMatrix<f64>,
    pub v_alpha: DMatrix<f64>,
    pub u_beta: DMatrix<f64>,
    pub v_beta: DMatrix<f64>,
}

impl ModelParams {
    pub fn n(&self) -> usize {
        self.theta.nrows()
    }

    pub fn t(&self) -> usize {
        self.core.dims()[2]
    }

    /// `α = U_α V_α'` (`n × T`).
    pub fn alpha(&self) -> DMatrix<f64> {
        &self.u_alpha * self.v_alpha.transpose()
    }

    /// `β = U_β V_β'` (`n × T`).
    pub fn beta(&self) -> DMatrix<f64> {
        &self.u_beta * self.v_beta.transpose()
    }

    pub fn linear_predictor(&self) -> Result<Tensor3> {
        tucker_linpred(&self.core, &self.theta, &self.phi, &self.alpha(), &self.beta())
    }

    /// Population factors `(U_m, V_m)` of the mode-`m` unfolding of `X`:
    /// `U_1 = (Θ, U_β, 1)`, `V_1 = ((I ⊗ Φ) M1(S)', V_β ⊗ 1, vec α)` and
    /// symmetrically for mode 2.
    pub fn factor_pair(&self, mode: Mode) -> FactorPair {
        let (n, t) = (self.n(), self.t());
        let (lat, other, u_deg, v_deg, intercept) = match mode {
            Mode::One => (&self.theta, &self.phi, &self.u_beta, &self.v_beta, self.alpha()),
            Mode::Two => (&self.phi, &self.theta, &self.u_alpha, &self.v_alpha, self.beta()),
        };
        let k = lat.ncols();
        let kd = u_deg.ncols();
        let d = k + kd + 1;
        let mut u = DMatrix::zeros(n, d);
        u.columns_mut(0, k).copy_from(lat);
        u.columns_mut(k, kd).copy_from(u_deg);
        u.column_mut(d - 1).fill(1.0);
        let ms = self.core.unfold(mode);
        let ko = other.ncols();
        let mut v = DMatrix::zeros(n * t, d);
        for layer in 0..t {
            // rows layer·n .. of V_lat = Other · (block `layer` of M_m(S))'
            let blk = ms.columns(layer * ko, ko);
            v.view_mut((layer * n, 0), (n, k)).copy_from(&(other * blk.transpose()));
            for c in 0..kd {
                v.view_mut((layer * n, k + c), (n, 1)).fill(v_deg[(layer, c)]);
            }
            v.view_mut((layer * n, d - 1), (n, 1))
                .copy_from(&intercept.column(layer));
        }
        FactorPair { u, v }
    }

    /// Population singular values of the mode-`m` unfolding of `X`.
    pub fn singular_values(&self, mode: Mode) -> Vec<f64> {
        let p = self.factor_pair(mode);
        let qr = p.u.qr();
        let r = qr.r();
        let g = &r * (p.v.transpose() * &p.v) * r.transpose();
        sym_eigen_desc((&g + g.transpose()) * 0.5)
            .0
            .iter()
            .map(|&v| v.max(0.0).sqrt())
            .collect()
    }

    /// Positions of the latent columns in the normalized population factors,
    /// i.e. the index set a noiseless fit should select.
    pub fn true_selection(&self, mode: Mode) -> Result<Vec<usize>> {
        let p = self.factor_pair(mode);
        let norm = normalize_pair(&p.u, &p.v, SignConvention::PositiveMax, &Tolerances::default())?;
        let lat = match mode {
            Mode::One => &self.theta,
            Mode::Two => &self.phi,
        };
        let n = self.n() as f64;
        let coords = lat.transpose() * &norm.u / n;
        Ok((0..norm.u.ncols())
            .filter(|&c| coords.column(c).norm() > 0.5)
            .collect())
    }
}

fn normal(r: usize, c: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Latent positions `√n·Q` from the centered first `k` columns of `a`, and
/// degree loadings from the remaining columns projected off `span{1, Θ}`.
fn positions_and_degrees(a: &DMatrix<f64>, k: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut lat = a.columns(0, k).into_owned();
    CenteringOps::new(n, 1).center_columns(&mut lat);
    let q = lat.qr().q();
    let theta = &q * (n as f64).sqrt();
    let mut deg = a.columns(k, a.ncols() - k).into_owned();
    CenteringOps::new(n, 1).center_columns(&mut deg);
    let proj = &q * (q.transpose() * &deg);
    deg -= proj;
    (theta, deg)
}

/// `T × k` matrix with orthonormal columns: left singular vectors of a
/// standard normal draw.
fn orthonormal_time_factor(t: usize, k: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    if k == 0 {
        return DMatrix::zeros(t, 0);
    }
    let svd = normal(t, k, rng).svd(true, false);
    svd.u.expect("requested U")
}

fn sorted_by_magnitude(mut vals: Vec<f64>) -> Vec<f64> {
    vals.sort_by(|a, b| b.abs().partial_cmp(&a.abs()).unwrap());
    vals
}

fn draw_core(o: &GenOptions, rng: &mut impl Rng) -> Tensor3 {
    let (k1, k2, t) = (o.k1, o.k2, o.t);
    let layers = match o.core_sequence {
        CoreSequence::Independent => t,
        _ => 1,
    };
    let mut core = match o.core_kind {
        CoreKind::Diagonal => {
            let diags: Vec<Vec<f64>> = (0..layers)
                .map(|_| sorted_by_magnitude((0..k1).map(|_| o.signal * rng.sample::<f64, _>(StandardNormal)).collect()))
                .collect();
            Tensor3::from_fn([k1, k2, t], |i, j, l| {
                if i == j {
                    diags[l.min(layers - 1)][i]
                } else {
                    0.0
                }
            })
        }
        CoreKind::Dense => {
            let raw: Vec<DMatrix<f64>> = (0..layers).map(|_| normal(k1, k2, rng) * o.signal).collect();
            let stacked = Tensor3::from_fn([k1, k2, t], |i, j, l| raw[l.min(layers - 1)][(i, j)]);
            // Rotate both core modes onto their singular vectors so that
            // Σ_t Λ_t Λ_t' and Σ_t Λ_t' Λ_t are diagonal and decreasing.
            let m1 = stacked.unfold(Mode::One);
            let m2 = stacked.unfold(Mode::Two);
            let (_, a) = sym_eigen_desc(&m1 * m1.transpose());
            let (_, b) = sym_eigen_desc(&m2 * m2.transpose());
            let slices: Vec<DMatrix<f64>> = (0..t).map(|l| a.transpose() * stacked.slice(l) * &b).collect();
            Tensor3::from_slices(&slices).expect("equal slice shapes")
        }
    };
    if let CoreSequence::Break { layer, i, j, jump } = o.core_sequence {
        for l in layer..t {
            let v = core.get(i, j, l);
            core.set(i, j, l, v + jump);
        }
    }
    core
}

fn separated(sv: &[f64], gap: f64) -> bool {
    sv.windows(2).all(|w| w[0] > 0.0 && (w[0] - w[1]) > gap * w[0])
}

/// Draws parameters satisfying the identification conditions.
pub fn gen_params(o: &GenOptions, rng: &mut impl Rng) -> Result<ModelParams> {
    o.validate()?;
    let n = o.n;
    for _ in 0..MAX_ATTEMPTS {
        let a = normal(n, o.k1 + o.k_beta, rng);
        let b = normal(n, o.k2 + o.k_alpha, rng);
        let (theta, u_beta) = positions_and_degrees(&a, o.k1);
        let (phi, u_alpha) = positions_and_degrees(&b, o.k2);
        let v_beta = orthonormal_time_factor(o.t, o.k_beta, rng);
        let v_alpha = orthonormal_time_factor(o.t, o.k_alpha, rng);
        let core = draw_core(o, rng);
        let p = ModelParams {
            theta,
            phi,
            core,
            u_alpha,
            v_alpha,
            u_beta,
            v_beta,
        };
        let ok = Mode::BOTH.iter().all(|&m| {
            separated(&p.singular_values(m), o.tolerances.gram_gap)
                && p.true_selection(m).map(|s| s.len() == match m {
                    Mode::One => o.k1,
                    Mode::Two => o.k2,
                }).unwrap_or(false)
        });
        if ok {
            return Ok(p);
        }
    }
    Err(Error::Degenerate(format!(
        "no draw with separated singular values in {MAX_ATTEMPTS} attempts"
    )))
}

/// Samples an observation tensor from the model.
pub fn gen_network(p: &ModelParams, f: &FamilySpec, rng: &mut impl Rng) -> Result<Tensor3> {
    let x = p.linear_predictor()?;
    let data: Vec<f64> = x.as_slice().iter().map(|&v| f.sample(v, rng)).collect();
    Tensor3::new(x.dims(), data)
}

/// Sign patterns `R1`, `R2` (as ±1 vectors) and the aligned errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub r1: Vec<f64>,
    pub r2: Vec<f64>,
    /// `‖Θ̂ − Θ R1‖_{2→∞}`.
    pub delta_theta: f64,
    /// `‖Φ̂ − Φ R2‖_{2→∞}`.
    pub delta_phi: f64,
    /// `max_t ‖Λ̂_t − R1 Λ_t R2‖_max`.
    pub delta_lambda: f64,
}

fn two_to_inf(est: &DMatrix<f64>, truth: &DMatrix<f64>, signs: &[f64]) -> f64 {
    (0..est.nrows())
        .map(|i| {
            (0..est.ncols())
                .map(|c| (est[(i, c)] - truth[(i, c)] * signs[c]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

fn sign_vector(bits: usize, k: usize) -> Vec<f64> {
    (0..k).map(|c| if bits >> c & 1 == 1 { -1.0 } else { 1.0 }).collect()
}

/// Exhaustive search over the `2^{k1+k2}` sign patterns minimizing
/// `ΔΘ + ΔΦ + ΔΛ`.
pub fn align_signs(theta: &DMatrix<f64>, phi: &DMatrix<f64>, core: &Tensor3, truth: &ModelParams) -> Result<Alignment> {
    let (k1, k2) = (truth.theta.ncols(), truth.phi.ncols());
    if theta.shape() != truth.theta.shape() || phi.shape() != truth.phi.shape() || core.dims() != truth.core.dims() {
        return Err(Error::dim("estimate and truth differ in shape"));
    }
    let t = core.dims()[2];
    let mut best: Option<(f64, Alignment)> = None;
    for b1 in 0..(1usize << k1) {
        let r1 = sign_vector(b1, k1);
        let dt = two_to_inf(theta, &truth.theta, &r1);
        for b2 in 0..(1usize << k2) {
            let r2 = sign_vector(b2, k2);
            let dp = two_to_inf(phi, &truth.phi, &r2);
            let mut dl: f64 = 0.0;
            for l in 0..t {
                for i in 0..k1 {
                    for j in 0..k2 {
                        dl = dl.max((core.get(i, j, l) - r1[i] * truth.core.get(i, j, l) * r2[j]).abs());
                    }
                }
            }
            let total = dt + dp + dl;
            if best.as_ref().is_none_or(|(v, _)| total < *v) {
                best = Some((
                    total,
                    Alignment {
                        r1: r1.clone(),
                        r2,
                        delta_theta: dt,
                        delta_phi: dp,
                        delta_lambda: dl,
                    },
                ));
            }
        }
    }
    Ok(best.expect("at least one pattern").1)
}

pub fn align_fit(fit: &FitResult, truth: &ModelParams) -> Result<Alignment> {
    align_signs(&fit.theta, &fit.phi, &fit.core, truth)
}

/// One row of a coverage table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub target: String,
    pub hits: usize,
    pub trials: usize,
    pub coverage: f64,
    /// Binomial standard error `√(c(1 − c)/trials)`.
    pub std_error: f64,
}

/// Long-format record `(scenario, n, T, rep, metric, value)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub scenario: String,
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub rep: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub scenario: String,
    pub n: usize,
    pub t: usize,
    pub level: f64,
    pub reps: usize,
    pub failures: usize,
    pub failure_messages: Vec<String>,
    pub rows: Vec<CoverageRow>,
    pub records: Vec<ErrorRecord>,
    pub signal: f64,
    pub dispersion: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageSpec {
    pub family: FamilySpec,
    pub gen: GenOptions,
    pub fit: FitConfig,
    pub reps: usize,
    pub level: f64,
    pub seed: u64,
}

struct RepOutcome {
    hits: [bool; 3],
    records: Vec<(String, f64)>,
}

fn run_rep(spec: &CoverageSpec, rep: usize) -> Result<RepOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(rep as u64));
    let truth = gen_params(&spec.gen, &mut rng)?;
    let y = gen_network(&truth, &spec.family, &mut rng)?;
    let fit = estimate(&y, &spec.family, &spec.fit)?;
    let al = align_fit(&fit, &truth)?;
    let ctx = InferenceContext::new(&fit, &y, spec.family, spec.fit.tolerances)?;
    let ct = ctx.ci_position(Which::Theta, 0, spec.level)?;
    let cp = ctx.ci_position(Which::Phi, 0, spec.level)?;
    let cl = ctx.ci_core(0, 0, 0, spec.level)?;
    let th = truth.theta[(0, 0)] * al.r1[0];
    let ph = truth.phi[(0, 0)] * al.r2[0];
    let la = al.r1[0] * truth.core.get(0, 0, 0) * al.r2[0];
    let inside = |lo: f64, hi: f64, v: f64| lo <= v && v <= hi;
    Ok(RepOutcome {
        hits: [
            inside(ct.lower[0], ct.upper[0], th),
            inside(cp.lower[0], cp.upper[0], ph),
            inside(cl.lower, cl.upper, la),
        ],
        records: vec![
            ("delta_theta".into(), al.delta_theta),
            ("delta_phi".into(), al.delta_phi),
            ("delta_lambda".into(), al.delta_lambda),
            ("z_theta11".into(), (ct.estimate[0] - th) / ct.std_error[0]),
            ("z_phi11".into(), (cp.estimate[0] - ph) / cp.std_error[0]),
            ("z_lambda1_11".into(), (cl.estimate - la) / cl.std_error),
        ],
    })
}

/// Repeats generate → fit → align → interval for `reps` seeds
/// `seed, seed + 1, …` and tabulates coverage of `[Θ]_11`, `[Φ]_11` and
/// `[Λ_1]_11`. Failed replications are counted, not fatal.
pub fn coverage_experiment(spec: &CoverageSpec) -> Result<CoverageReport> {
    if spec.reps == 0 {
        return Err(Error::arg("reps must be at least 1"));
    }
    if !(spec.level > 0.0 && spec.level <= 1.0) {
        return Err(Error::arg(format!("level must lie in (0, 1], got {}", spec.level)));
    }
    spec.gen.validate()?;
    let outcomes: Vec<Result<RepOutcome>> = (0..spec.reps).into_par_iter().map(|r| run_rep(spec, r)).collect();
    let scenario = spec.family.kind.name().to_string();
    let mut hits = [0usize; 3];
    let mut ok = 0;
    let mut failure_messages = Vec::new();
    let mut records = Vec::new();
    for (rep, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => {
                ok += 1;
                for (h, &hit) in hits.iter_mut().zip(&o.hits) {
                    *h += hit as usize;
                }
                for (metric, value) in o.records {
                    records.push(ErrorRecord {
                        scenario: scenario.clone(),
                        n: spec.gen.n,
                        t: spec.gen.t,
                        rep,
                        metric,
                        value,
                    });
                }
            }
            Err(e) => failure_messages.push(format!("rep {rep}: {e}")),
        }
    }
    let rows = ["theta_11", "phi_11", "lambda1_11"]
        .iter()
        .zip(hits)
        .map(|(name, h)| {
            let c = if ok > 0 { h as f64 / ok as f64 } else { f64::NAN };
            CoverageRow {
                target: name.to_string(),
                hits: h,
                trials: ok,
                coverage: c,
                std_error: (c * (1.0 - c) / ok.max(1) as f64).sqrt(),
            }
        })
        .collect();
    Ok(CoverageReport {
        scenario,
        n: spec.gen.n,
        t: spec.gen.t,
        level: spec.level,
        reps: spec.reps,
        failures: failure_messages.len(),
        failure_messages,
        rows,
        records,
        signal: spec.gen.signal,
        dispersion: spec.family.dispersion,
        seed: spec.seed,
    })
}
