//! Sieve Riesz representer and sieve variance estimators.
//!
//! `d_i` below is row `i` of the `dmhat` matrix, the derivative of the
//! series-LS conditional mean in each sieve direction.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::functionals::Functional;
use crate::linalg::pinv;
use crate::models::{self, SigmaHat};
use crate::psmd::{FitResult, OptimConfig, SieveProblem};

#[derive(Debug, Clone, PartialEq)]
pub struct RieszSolution {
    /// `D^- F`.
    pub gamma_star: DVector<f64>,
    pub d: DMatrix<f64>,
    pub f: DVector<f64>,
    /// `gamma*' D gamma*`.
    pub norm_sq: f64,
    /// Whether `F` lies in the range of `D` (so `D gamma* = F`).
    pub in_range: bool,
}

pub fn riesz(d: &DMatrix<f64>, f: &DVector<f64>) -> Result<RieszSolution> {
    if d.nrows() != f.len() || d.ncols() != f.len() {
        return Err(Error::Dimension {
            what: "Riesz system",
            expected: f.len(),
            got: d.nrows(),
        });
    }
    let gamma_star = pinv(d, None) * f;
    let norm_sq = gamma_star.dot(&(d * &gamma_star)).max(0.0);
    let resid = (d * &gamma_star - f).norm();
    let in_range = resid <= 1e-6 * f.norm().max(f64::MIN_POSITIVE);
    if !in_range {
        log::warn!("gradient not in the range of D (residual {resid:.3e}); using its projection");
    }
    Ok(RieszSolution {
        gamma_star,
        d: d.clone(),
        f: f.clone(),
        norm_sq,
        in_range,
    })
}

fn weighted_outer(dmhat: &DMatrix<f64>, w: impl Iterator<Item = f64>) -> DMatrix<f64> {
    let n = dmhat.nrows();
    let mut scaled = dmhat.clone();
    for (i, wi) in w.enumerate() {
        scaled.row_mut(i).scale_mut(wi);
    }
    let m = dmhat.tr_mul(&scaled) / n as f64;
    (&m + m.transpose()) * 0.5
}

fn check_rows(dmhat: &DMatrix<f64>, len: usize, what: &'static str) -> Result<()> {
    if dmhat.nrows() != len {
        return Err(Error::Dimension {
            what,
            expected: dmhat.nrows(),
            got: len,
        });
    }
    Ok(())
}

/// `D = n^-1 sum_i d_i d_i' / Sigma_i`.
pub fn d_matrix(dmhat: &DMatrix<f64>, sigma: &SigmaHat) -> Result<DMatrix<f64>> {
    check_rows(dmhat, sigma.len(), "weights")?;
    Ok(weighted_outer(dmhat, sigma.values().iter().map(|s| 1.0 / s)))
}

/// `n^-1 sum_i d_i (rho_i^2 / Sigma_i^2) d_i'`, the outer-product middle matrix.
pub fn upsilon_matrix(dmhat: &DMatrix<f64>, sigma: &SigmaHat, rho_hat: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_rows(dmhat, sigma.len(), "weights")?;
    check_rows(dmhat, rho_hat.len(), "residuals")?;
    Ok(weighted_outer(
        dmhat,
        rho_hat.iter().zip(sigma.values()).map(|(r, s)| r * r / (s * s)),
    ))
}

/// `n^-1 sum_i d_i (Sigma0_i / Sigma_i^2) d_i'`, the conditional-variance middle matrix.
pub fn omega_matrix(dmhat: &DMatrix<f64>, sigma: &SigmaHat, sigma0: &SigmaHat) -> Result<DMatrix<f64>> {
    check_rows(dmhat, sigma.len(), "weights")?;
    check_rows(dmhat, sigma0.len(), "conditional variances")?;
    Ok(weighted_outer(
        dmhat,
        sigma0.values().iter().zip(sigma.values()).map(|(s0, s)| s0 / (s * s)),
    ))
}

/// `F' D^- M D^- F`.
pub fn variance_plugin(d: &DMatrix<f64>, middle: &DMatrix<f64>, f: &DVector<f64>) -> f64 {
    let g = pinv(d, None) * f;
    g.dot(&(middle * &g)).max(0.0)
}

/// Everything needed for sieve t statistics at a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct PluginVariances {
    pub riesz: RieszSolution,
    pub dmhat: DMatrix<f64>,
    pub rho: DVector<f64>,
    /// Outer-product estimate.
    pub v1: f64,
    /// Conditional-variance estimate.
    pub v2: f64,
}

pub fn plugin_variances(
    problem: &SieveProblem,
    beta: &DVector<f64>,
    functional: &Functional,
) -> Result<PluginVariances> {
    let spec = problem.spec();
    let data = problem.data();
    let dmhat = models::dmhat_matrix(spec, data, beta, problem.cache())?;
    let f = functional.gradient(&spec.qbasis, beta)?;
    let sigma = problem.sigma();
    let d = d_matrix(&dmhat, sigma)?;
    let riesz = riesz(&d, &f)?;
    let rho = problem.residuals(beta);
    let v1 = variance_plugin(&d, &upsilon_matrix(&dmhat, sigma, &rho)?, &f);
    let sigma0 = models::sigma0_series(spec, data, beta, problem.cache(), None)?;
    let v2 = variance_plugin(&d, &omega_matrix(&dmhat, sigma, &sigma0)?, &f);
    Ok(PluginVariances {
        riesz,
        dmhat,
        rho,
        v1,
        v2,
    })
}

/// `eps^2 / gap`, the curvature read off the criterion along the functional.
pub fn slope_from_gap(eps: f64, gap: f64) -> Result<f64> {
    if !(gap > 0.0) || !gap.is_finite() {
        return Err(Error::SlopeDegenerate { gap });
    }
    Ok(eps * eps / gap)
}

pub fn default_slope_eps(n: usize, phi_hat: f64) -> f64 {
    phi_hat.abs().max(1.0) / (n as f64).sqrt()
}

/// Criterion-slope variance: `eps^2 / (Q(alpha~) - Q(alpha^))` where
/// `alpha~` is the restricted fit at `phi(alpha^) - eps`. Needs the
/// optimal weighting to estimate the sieve variance.
pub fn slope_variance(
    problem: &SieveProblem,
    fit: &FitResult,
    functional: &Functional,
    eps: Option<f64>,
    config: &OptimConfig,
) -> Result<f64> {
    if fit.fingerprint != problem.fingerprint() {
        return Err(Error::MismatchedFits);
    }
    let phi_hat = functional.value(&problem.spec().qbasis, &fit.beta)?;
    let eps = eps.unwrap_or_else(|| default_slope_eps(problem.n(), phi_hat));
    let restricted = problem.fit_restricted(functional, phi_hat - eps, config, None, Some(&fit.beta))?;
    slope_from_gap(eps, restricted.qhat - fit.qhat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSpec;
    use crate::data_io::Dataset;
    use crate::models::{ModelSpec, ResidualKind, Weighting};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y2: Vec<f64> = x.iter().map(|x| 0.8 * x + rng.random_range(-0.2..0.2)).collect();
        let y1 = y2
            .iter()
            .map(|y| y.sin() + (0.3 + 0.3 * y.abs()) * rng.random_range(-1.0..1.0))
            .collect();
        Dataset::from_columns(y1, y2, x).unwrap()
    }

    fn spec(k: usize, j: usize) -> ModelSpec {
        ModelSpec::new(
            ResidualKind::Npiv,
            BasisSpec::power_series(k, (-1.5, 1.5)).unwrap(),
            BasisSpec::power_series(j, (-1.5, 1.5)).unwrap(),
            0.0,
            Weighting::Identity,
        )
        .unwrap()
    }

    #[test]
    fn d_matrix_examples() {
        let ones = DMatrix::from_element(5, 1, 1.0);
        let d = d_matrix(&ones, &SigmaHat::constant(1.0, 5).unwrap()).unwrap();
        assert_eq!(d[(0, 0)], 1.0);
        // exogenous q = p: dmhat = Q, so D = Q'Q / n
        let dat = data(20, 1);
        let mut s = spec(3, 3);
        s.qbasis = s.pbasis.clone();
        let exo = Dataset::from_columns(dat.y1().to_vec(), dat.x1().to_vec(), dat.x1().to_vec()).unwrap();
        let cache = models::projection_cache(&s, &exo).unwrap();
        let dm = models::dmhat_matrix(&s, &exo, &DVector::zeros(3), &cache).unwrap();
        let q = models::structural_design(&s, &exo).unwrap();
        let d = d_matrix(&dm, &SigmaHat::constant(1.0, 20).unwrap()).unwrap();
        assert!((&d - q.tr_mul(&q) / 20.0).amax() < 1e-10);
        let d3 = d_matrix(&dm, &SigmaHat::constant(3.0, 20).unwrap()).unwrap();
        assert!((&d3 * 3.0 - &d).amax() < 1e-12);
    }

    #[test]
    fn middle_matrices_match_loops_and_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dm = random_matrix(&mut rng, 9, 3);
        let s = SigmaHat::from_values((0..9).map(|_| rng.random_range(0.5..2.0)).collect()).unwrap();
        let rho = DVector::from_fn(9, |_, _| rng.random_range(-1.0..1.0));
        let u = upsilon_matrix(&dm, &s, &rho).unwrap();
        let mut oracle = DMatrix::zeros(3, 3);
        for i in 0..9 {
            let di = dm.row(i).transpose();
            oracle += &di * di.transpose() * (rho[i] * rho[i] / s.values()[i].powi(2));
        }
        assert!((&u - oracle / 9.0).amax() < 1e-14);
        assert_eq!(
            upsilon_matrix(&dm, &s, &DVector::zeros(9)).unwrap(),
            DMatrix::zeros(3, 3)
        );
        // Sigma0 = rho^2 pointwise gives the outer-product matrix
        let s0 = SigmaHat::from_values(rho.iter().map(|r| r * r).collect()).unwrap();
        assert!((omega_matrix(&dm, &s, &s0).unwrap() - &u).amax() < 1e-15);
        // homoskedastic collapse
        let c = SigmaHat::constant(0.7, 9).unwrap();
        let rho_c = DVector::from_element(9, 0.7f64.sqrt());
        let d = d_matrix(&dm, &c).unwrap();
        assert!((upsilon_matrix(&dm, &c, &rho_c).unwrap() - &d).amax() < 1e-14);
        let one = SigmaHat::constant(1.0, 9).unwrap();
        assert!((omega_matrix(&dm, &one, &one).unwrap() - d_matrix(&dm, &one).unwrap()).amax() < 1e-15);
    }

    #[test]
    fn plugin_scalar_and_collapse() {
        let d = DMatrix::from_element(1, 1, 2.0);
        let m = DMatrix::from_element(1, 1, 5.0);
        let f = DVector::from_element(1, 3.0);
        assert!((variance_plugin(&d, &m, &f) - 9.0 * 5.0 / 4.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 6, 4);
        let d = a.tr_mul(&a);
        let f = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let r = riesz(&d, &f).unwrap();
        assert!((variance_plugin(&d, &d, &f) - r.norm_sq).abs() < 1e-9 * r.norm_sq);
    }

    #[test]
    fn slope_on_planted_quadratic() {
        // Q(beta) = (beta - b)^2 / v with phi(beta) = beta
        let (b, v) = (0.4, 2.5);
        for eps in [1e-3, 0.1, 2.0] {
            let gap = ((b - eps) - b) * ((b - eps) - b) / v;
            assert!((slope_from_gap(eps, gap).unwrap() - v).abs() < 1e-12 * v);
        }
        assert!(matches!(slope_from_gap(0.1, 0.0), Err(Error::SlopeDegenerate { .. })));
    }

    #[test]
    fn slope_equals_optimal_plugin_for_quadratic_criterion() {
        // NPIV, lambda = 0, linear phi: the profiled criterion is exactly
        // quadratic with curvature 1 / (F' D^- F)
        let d = data(200, 4);
        let s = spec(4, 6);
        let pr = SieveProblem::new(&s, &d).unwrap();
        let cfg = OptimConfig::default();
        let f = pr.fit(&cfg, None, None).unwrap();
        let phi = Functional::point_eval(0.1);
        let pv = plugin_variances(&pr, &f.beta, &phi).unwrap();
        for eps in [None, Some(0.3)] {
            let sv = slope_variance(&pr, &f, &phi, eps, &cfg).unwrap();
            assert!(
                (sv - pv.riesz.norm_sq).abs() < 1e-6 * pv.riesz.norm_sq,
                "{sv} {}",
                pv.riesz.norm_sq
            );
        }
    }

    #[test]
    fn plugin_invariant_to_reparametrization() {
        let d = data(120, 5);
        let s = spec(4, 7);
        let a = DMatrix::from_fn(4, 4, |i, j| if i == j { 0.8 } else { 0.2 * (i + j) as f64 - 0.5 });
        let mut t = s.clone();
        t.qbasis = s.qbasis.transformed(a).unwrap();
        let phi = Functional::point_eval(-0.2);
        let cfg = OptimConfig::default();
        let pv = |spec: &ModelSpec| {
            let pr = SieveProblem::new(spec, &d).unwrap();
            let f = pr.fit(&cfg, None, None).unwrap();
            plugin_variances(&pr, &f.beta, &phi).unwrap()
        };
        let (x, y) = (pv(&s), pv(&t));
        assert!((x.v1 - y.v1).abs() < 1e-8 * x.v1);
        assert!((x.v2 - y.v2).abs() < 1e-8 * x.v2);
        assert!((x.riesz.norm_sq - y.riesz.norm_sq).abs() < 1e-8 * x.riesz.norm_sq);
    }

    proptest! {
        #[test]
        fn riesz_solves_linear_system(seed in 0u64..100_000, rows in 4usize..10, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dm = random_matrix(&mut rng, rows.max(k), k);
            let sigma = SigmaHat::from_values((0..dm.nrows()).map(|_| rng.random_range(0.2..3.0)).collect()).unwrap();
            let d = d_matrix(&dm, &sigma).unwrap();
            // F in range(D)
            let f = &d * DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
            let r = riesz(&d, &f).unwrap();
            prop_assert!((&r.d * &r.gamma_star - &f).norm() <= 1e-6 * f.norm().max(1e-300));
            prop_assert!(r.norm_sq >= 0.0);
            let rho = DVector::from_fn(dm.nrows(), |_, _| rng.random_range(-2.0..2.0));
            prop_assert!(variance_plugin(&d, &upsilon_matrix(&dm, &sigma, &rho).unwrap(), &f) >= 0.0);
        }
    }
}
