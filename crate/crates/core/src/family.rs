//! Exponential-family edge models in the natural parameter `x`.

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Gaussian,
    Poisson,
    Bernoulli,
}

impl FamilyKind {
    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::Gaussian => "gaussian",
            FamilyKind::Poisson => "poisson",
            FamilyKind::Bernoulli => "bernoulli",
        }
    }
}

impl std::fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(FamilyKind::Gaussian),
            "poisson" => Ok(FamilyKind::Poisson),
            "bernoulli" | "logistic" | "binary" => Ok(FamilyKind::Bernoulli),
            other => Err(Error::arg(format!("unknown family '{other}'"))),
        }
    }
}

/// Edge distribution with its dispersion and derivative clamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub kind: FamilyKind,
    /// Gaussian noise variance; 1 for Poisson and Bernoulli.
    #[serde(default = "one")]
    pub dispersion: f64,
    /// Bound on `|x|` inside score and curvature evaluation for the
    /// Poisson and Bernoulli families.
    #[serde(default = "default_clamp")]
    pub clamp: f64,
}

fn one() -> f64 {
    1.0
}

fn default_clamp() -> f64 {
    FamilySpec::DEFAULT_CLAMP
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `y·x − log(1 + e^x)` for `y ∈ {0, 1}`, written so that neither branch
/// cancels large terms.
#[inline]
fn bernoulli_loglik(y: f64, x: f64) -> f64 {
    if y == 1.0 {
        -softplus(-x)
    } else {
        -softplus(x)
    }
}

impl FamilySpec {
    pub const DEFAULT_CLAMP: f64 = 30.0;

    pub fn gaussian(dispersion: f64) -> Self {
        FamilySpec {
            kind: FamilyKind::Gaussian,
            dispersion,
            clamp: Self::DEFAULT_CLAMP,
        }
    }

    pub fn poisson() -> Self {
        FamilySpec {
            kind: FamilyKind::Poisson,
            dispersion: 1.0,
            clamp: Self::DEFAULT_CLAMP,
        }
    }

    pub fn bernoulli() -> Self {
        FamilySpec {
            kind: FamilyKind::Bernoulli,
            dispersion: 1.0,
            clamp: Self::DEFAULT_CLAMP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clamp > 0.0) {
            return Err(Error::arg(format!("clamp must be positive, got {}", self.clamp)));
        }
        match self.kind {
            FamilyKind::Gaussian if !(self.dispersion > 0.0 && self.dispersion.is_finite()) => Err(
                Error::arg(format!("Gaussian dispersion must be positive, got {}", self.dispersion)),
            ),
            FamilyKind::Poisson | FamilyKind::Bernoulli if self.dispersion != 1.0 => Err(Error::arg(
                format!("{} dispersion is fixed to 1, got {}", self.kind, self.dispersion),
            )),
            _ => Ok(()),
        }
    }

    /// Checks that `y` lies in the family's support.
    pub fn check_support(&self, y: f64) -> Result<()> {
        let ok = match self.kind {
            FamilyKind::Gaussian => y.is_finite(),
            FamilyKind::Poisson => y >= 0.0 && y.fract() == 0.0 && y.is_finite(),
            FamilyKind::Bernoulli => y == 0.0 || y == 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain {
                family: self.kind.name(),
                value: y,
            })
        }
    }

    pub fn check_all(&self, ys: &[f64]) -> Result<()> {
        ys.iter().try_for_each(|&y| self.check_support(y))
    }

    #[inline]
    fn clamped(&self, x: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => x,
            _ => x.clamp(-self.clamp, self.clamp),
        }
    }

    /// Whether `x` sits at or beyond the derivative clamp.
    #[inline]
    pub fn at_boundary(&self, x: f64) -> bool {
        self.kind != FamilyKind::Gaussian && x.abs() >= self.clamp
    }

    pub fn loglik(&self, y: f64, x: f64) -> Result<f64> {
        self.check_support(y)?;
        Ok(self.loglik_unchecked(y, x))
    }

    /// Log-likelihood without the support check, for hot loops over data
    /// that was validated once up front.
    #[inline]
    pub fn loglik_unchecked(&self, y: f64, x: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => {
                let r = y - x;
                -r * r / (2.0 * self.dispersion) - 0.5 * (LN_2PI + self.dispersion.ln())
            }
            FamilyKind::Poisson => -x.exp() + y * x - ln_gamma(y + 1.0),
            FamilyKind::Bernoulli => bernoulli_loglik(y, x),
        }
    }

    /// Log-likelihood up to terms that do not depend on `x`.
    #[inline]
    pub(crate) fn loglik_kernel(&self, y: f64, x: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => {
                let r = y - x;
                -r * r / (2.0 * self.dispersion)
            }
            FamilyKind::Poisson => -x.exp() + y * x,
            FamilyKind::Bernoulli => bernoulli_loglik(y, x),
        }
    }

    pub fn score(&self, y: f64, x: f64) -> Result<f64> {
        self.check_support(y)?;
        Ok(self.score_unchecked(y, x))
    }

    #[inline]
    pub fn score_unchecked(&self, y: f64, x: f64) -> f64 {
        let x = self.clamped(x);
        match self.kind {
            FamilyKind::Gaussian => (y - x) / self.dispersion,
            FamilyKind::Poisson => y - x.exp(),
            FamilyKind::Bernoulli => y - sigmoid(x),
        }
    }

    /// `−∂²ℓ/∂x²`, evaluated at `x` clamped to `[−clamp, clamp]`.
    ///
    /// None of the three families has a curvature depending on `y`; the
    /// argument is kept so the signature mirrors `score`.
    #[inline]
    pub fn neg_hess(&self, _y: f64, x: f64) -> f64 {
        let x = self.clamped(x);
        match self.kind {
            FamilyKind::Gaussian => 1.0 / self.dispersion,
            FamilyKind::Poisson => x.exp(),
            FamilyKind::Bernoulli => {
                let p = sigmoid(x);
                p * (1.0 - p)
            }
        }
    }

    /// Mean of the edge distribution at natural parameter `x`.
    pub fn mean(&self, x: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => x,
            FamilyKind::Poisson => x.exp(),
            FamilyKind::Bernoulli => sigmoid(x),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: f64, rng: &mut R) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => {
                if self.dispersion == 0.0 {
                    x
                } else {
                    x + self.dispersion.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal)
                }
            }
            FamilyKind::Poisson => {
                let rate = x.exp();
                if rate > 0.0 && rate.is_finite() {
                    Poisson::new(rate).map(|d| d.sample(rng)).unwrap_or(0.0)
                } else if rate == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            FamilyKind::Bernoulli => {
                let p = sigmoid(x);
                Bernoulli::new(p).map(|d| d.sample(rng) as u8 as f64).unwrap_or(0.0)
            }
        }
    }

    /// Curvature bounds `[b_L, b_U]` over the clamped domain.
    pub fn curvature_bounds(&self) -> (f64, f64) {
        match self.kind {
            FamilyKind::Gaussian => (1.0 / self.dispersion, 1.0 / self.dispersion),
            FamilyKind::Poisson => ((-self.clamp).exp(), self.clamp.exp()),
            FamilyKind::Bernoulli => (self.neg_hess(0.0, self.clamp), 0.25),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn families() -> [FamilySpec; 4] {
        [
            FamilySpec::gaussian(1.0),
            FamilySpec::gaussian(2.5),
            FamilySpec::poisson(),
            FamilySpec::bernoulli(),
        ]
    }

    fn support(f: &FamilySpec) -> Vec<f64> {
        match f.kind {
            FamilyKind::Bernoulli => vec![0.0, 1.0],
            _ => vec![0.0, 1.0, 2.0, 5.0],
        }
    }

    fn grid() -> impl Iterator<Item = f64> {
        (-30..=30).map(|k| k as f64 / 10.0)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-3)
    }

    #[test]
    fn loglik_reference_values() {
        let g = FamilySpec::gaussian(1.0);
        assert!((g.loglik(0.0, 0.0).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!((FamilySpec::poisson().loglik(0.0, 0.0).unwrap() + 1.0).abs() < 1e-15);
        let b = FamilySpec::bernoulli().loglik(1.0, 0.0).unwrap();
        assert!((b + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn score_reference_values() {
        assert_eq!(FamilySpec::gaussian(1.0).score(2.0, 0.5).unwrap(), 1.5);
        assert_eq!(FamilySpec::poisson().score(3.0, 0.0).unwrap(), 2.0);
    }

    #[test]
    fn neg_hess_reference_values() {
        assert_eq!(FamilySpec::gaussian(2.0).neg_hess(0.0, 17.0), 0.5);
        assert_eq!(FamilySpec::bernoulli().neg_hess(1.0, 0.0), 0.25);
    }

    #[test]
    fn support_violations_are_domain_errors() {
        assert!(matches!(
            FamilySpec::poisson().loglik(-1.0, 0.0),
            Err(Error::Domain { family: "poisson", .. })
        ));
        assert!(FamilySpec::poisson().score(1.5, 0.0).is_err());
        assert!(FamilySpec::bernoulli().loglik(2.0, 0.0).is_err());
        assert!(FamilySpec::gaussian(1.0).loglik(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn bernoulli_loglik_is_stable_for_large_x() {
        let b = FamilySpec::bernoulli();
        assert_eq!(b.loglik(1.0, 800.0).unwrap(), 0.0);
        assert!((b.loglik(0.0, 800.0).unwrap() + 800.0).abs() < 1e-12);
        assert!((b.loglik(0.0, -800.0).unwrap()).abs() < 1e-300);
        assert!((b.loglik(1.0, -40.0).unwrap() + 40.0).abs() < 1e-12);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-5;
        for f in families() {
            for y in support(&f) {
                for x in grid() {
                    let fd_score =
                        (f.loglik(y, x + h).unwrap() - f.loglik(y, x - h).unwrap()) / (2.0 * h);
                    let s = f.score(y, x).unwrap();
                    assert!(rel_err(fd_score, s) < 1e-5, "{f:?} y={y} x={x}: {fd_score} vs {s}");
                    let fd_hess =
                        -(f.score(y, x + h).unwrap() - f.score(y, x - h).unwrap()) / (2.0 * h);
                    let nh = f.neg_hess(y, x);
                    assert!(rel_err(fd_hess, nh) < 1e-5, "{f:?} y={y} x={x}: {fd_hess} vs {nh}");
                }
            }
        }
    }

    #[test]
    fn curvature_is_positive_and_bounded_on_clamped_domain() {
        for f in families() {
            let (lo, hi) = f.curvature_bounds();
            assert!(lo > 0.0 && lo <= hi);
            for k in -400..=400 {
                let x = k as f64 / 10.0;
                let h = f.neg_hess(0.0, x);
                assert!(h > 0.0);
                assert!(h >= lo * (1.0 - 1e-12) && h <= hi * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn gaussian_zero_dispersion_sample_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = FamilySpec {
            kind: FamilyKind::Gaussian,
            dispersion: 0.0,
            clamp: 30.0,
        };
        assert_eq!(f.sample(1.234, &mut rng), 1.234);
    }

    #[test]
    fn poisson_vanishing_rate_draws_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = FamilySpec::poisson();
        assert!((0..1000).all(|_| f.sample(-f.clamp, &mut rng) == 0.0));
        assert_eq!(f.sample(-1e4, &mut rng), 0.0);
    }

    #[test]
    fn bernoulli_draws_are_fair_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = FamilySpec::bernoulli();
        let n = 100_000;
        let mean = (0..n).map(|_| f.sample(0.0, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn family_spec_json_uses_lowercase_kind() {
        let s = serde_json::to_string(&FamilySpec::poisson()).unwrap();
        assert!(s.contains("\"poisson\""));
        let back: FamilySpec = serde_json::from_str(r#"{"kind":"gaussian","dispersion":2.0}"#).unwrap();
        assert_eq!(back, FamilySpec::gaussian(2.0));
    }

    #[test]
    fn validate_rejects_bad_dispersion() {
        assert!(FamilySpec::gaussian(0.0).validate().is_err());
        let mut p = FamilySpec::poisson();
        p.dispersion = 2.0;
        assert!(p.validate().is_err());
        assert!(FamilySpec::bernoulli().validate().is_ok());
    }
}
