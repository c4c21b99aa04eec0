//! Sieve t (Wald), quasi-likelihood ratio and score tests of `phi(h) = phi0`,
//! and confidence sets from inverting the QLR statistic.

use std::fmt;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::functionals::Functional;
use crate::linalg::pinv;
use crate::models;
use crate::normal;
use crate::psmd::{FitResult, OptimConfig, SieveProblem};
use crate::variance::{d_matrix, upsilon_matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Wald,
    Sqlr,
    /// QLR under the optimal weighting, referred to chi-square(1).
    OptSqlr,
    Score,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Wald => "wald",
            Method::Sqlr => "sqlr",
            Method::OptSqlr => "opt-sqlr",
            Method::Score => "score",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    /// No crossing was found on that side; the bound is the last point tried.
    pub unbounded_lo: bool,
    pub unbounded_hi: bool,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self {
            lo,
            hi,
            unbounded_lo: false,
            unbounded_hi: false,
        }
    }

    pub fn is_bounded(&self) -> bool {
        !(self.unbounded_lo || self.unbounded_hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceReport {
    pub statistic: f64,
    pub variance: Option<f64>,
    pub pvalue: Option<f64>,
    pub ci: Option<Interval>,
    pub method: Method,
    pub df: usize,
    pub estimate: Option<f64>,
}

impl InferenceReport {
    fn new(method: Method, statistic: f64) -> Self {
        Self {
            statistic,
            variance: None,
            pvalue: None,
            ci: None,
            method,
            df: 1,
            estimate: None,
        }
    }

    /// Rejects at nominal size `alpha` using the report's own p-value.
    pub fn rejects(&self, alpha: f64) -> Option<bool> {
        self.pvalue.map(|p| p < alpha)
    }
}

/// Sieve t test `sqrt(n) (phi_hat - phi0) / sqrt(V)` with the normal CI at `level`.
pub fn wald_test(phi_hat: f64, phi0: f64, variance_sq: f64, n: usize, level: f64) -> Result<InferenceReport> {
    if !(variance_sq > 0.0) || !variance_sq.is_finite() {
        return Err(Error::NonPositiveVariance(variance_sq));
    }
    let se = (variance_sq / n as f64).sqrt();
    let stat = (phi_hat - phi0) / se;
    let z = normal::quantile(0.5 + 0.5 * level);
    let mut r = InferenceReport::new(Method::Wald, stat);
    r.variance = Some(variance_sq);
    r.pvalue = Some(normal::two_sided_pvalue(stat));
    r.ci = Some(Interval::new(phi_hat - z * se, phi_hat + z * se));
    r.estimate = Some(phi_hat);
    Ok(r)
}

/// `n (Q(alpha_R) - Q(alpha))`, floored at zero. The chi-square(1)
/// p-value is attached only under the optimal weighting.
pub fn sqlr_test(unrestricted: &FitResult, restricted: &FitResult, n: usize, optimal: bool) -> Result<InferenceReport> {
    if unrestricted.fingerprint != restricted.fingerprint {
        return Err(Error::MismatchedFits);
    }
    let stat = qlr_value(unrestricted, restricted.qhat, n);
    let method = if optimal { Method::OptSqlr } else { Method::Sqlr };
    let mut r = InferenceReport::new(method, stat);
    if optimal {
        r.pvalue = Some(normal::chi2_1_sf(stat));
    }
    Ok(r)
}

fn qlr_value(unrestricted: &FitResult, restricted_qhat: f64, n: usize) -> f64 {
    (n as f64 * (restricted_qhat - unrestricted.qhat)).max(0.0)
}

/// `{r : QLR(r) <= crit}` by bracket expansion from `phi_hat`, bisection,
/// and a final interpolation that is exact when `QLR` is quadratic in `r`.
pub fn invert_qlr_ci(
    problem: &SieveProblem,
    fit: &FitResult,
    functional: &Functional,
    crit: f64,
    config: &OptimConfig,
) -> Result<Interval> {
    if fit.fingerprint != problem.fingerprint() {
        return Err(Error::MismatchedFits);
    }
    if !(crit > 0.0) {
        return Err(Error::Config(format!("critical value {crit} must be positive")));
    }
    let phi_hat = functional.value(&problem.spec().qbasis, &fit.beta)?;
    let n = problem.n();
    let qlr = |r: f64| -> Result<f64> {
        match problem.fit_restricted(functional, r, config, None, Some(&fit.beta)) {
            Ok(f) => Ok(qlr_value(fit, f.qhat, n)),
            // e.g. exp(h(0)) = r <= 0 cannot be attained
            Err(Error::Infeasible { .. }) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    };
    let width_tol = 1e-4 * (1.0 + phi_hat.abs());
    let step0 = 0.5 * (1.0 + phi_hat.abs()) / (n as f64).sqrt();
    let mut ends = [0.0; 2];
    let mut open = [false; 2];
    for (side, sign) in [-1.0, 1.0].into_iter().enumerate() {
        let (mut inner, mut q_in) = (phi_hat, 0.0);
        let mut step = step0;
        let mut outer = phi_hat + sign * step;
        let mut q_out = qlr(outer)?;
        let mut expansions = 0;
        while q_out <= crit {
            expansions += 1;
            if expansions > 50 {
                break;
            }
            inner = outer;
            q_in = q_out;
            step *= 2.0;
            outer = phi_hat + sign * step;
            q_out = qlr(outer)?;
        }
        if q_out <= crit {
            open[side] = true;
            ends[side] = outer;
            continue;
        }
        while (outer - inner).abs() > width_tol {
            let mid = 0.5 * (inner + outer);
            let q_mid = qlr(mid)?;
            if q_mid <= crit {
                inner = mid;
                q_in = q_mid;
            } else {
                outer = mid;
                q_out = q_mid;
            }
        }
        // sqrt(QLR) is linear in |r - phi_hat| for a quadratic criterion
        let (t_in, t_out, t_c) = (q_in.sqrt(), q_out.sqrt(), crit.sqrt());
        let end = if q_out.is_finite() && t_out > t_in {
            let w = ((t_c - t_in) / (t_out - t_in)).clamp(0.0, 1.0);
            inner + w * (outer - inner)
        } else {
            inner
        };
        ends[side] = end;
    }
    Ok(Interval {
        lo: ends[0],
        hi: ends[1],
        unbounded_lo: open[0],
        unbounded_hi: open[1],
    })
}

/// QLR-inverted confidence set at `level` using the chi-square(1) critical value.
pub fn invert_sqlr_ci(
    problem: &SieveProblem,
    fit: &FitResult,
    functional: &Functional,
    level: f64,
    config: &OptimConfig,
) -> Result<Interval> {
    invert_qlr_ci(problem, fit, functional, normal::chi2_1_quantile(level), config)
}

/// Restricted-fit quantities shared by the score test and its bootstrap.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreParts {
    /// `g_i` with `S = n^-1/2 sum_i g_i rho_i`.
    pub g: DVector<f64>,
    pub rho: DVector<f64>,
    /// `||v*_R||^2_sd`.
    pub variance: f64,
}

pub fn score_parts(problem: &SieveProblem, restricted: &FitResult, functional: &Functional) -> Result<ScoreParts> {
    if restricted.fingerprint != problem.fingerprint() {
        return Err(Error::MismatchedFits);
    }
    let spec = problem.spec();
    let beta = &restricted.beta;
    let dmhat = models::dmhat_matrix(spec, problem.data(), beta, problem.cache())?;
    let f = functional.gradient(&spec.qbasis, beta)?;
    let sigma = problem.sigma();
    let d = d_matrix(&dmhat, sigma)?;
    let gamma = pinv(&d, None) * f;
    let rho = problem.residuals(beta);
    let ups = upsilon_matrix(&dmhat, sigma, &rho)?;
    let variance = gamma.dot(&(&ups * &gamma));
    if !(variance > 0.0) {
        return Err(Error::NonPositiveVariance(variance));
    }
    let sd = variance.sqrt();
    // sum_i a_i m_i = sum_i (P a)_i rho_i for the projection P; dm/dh = -dmhat
    let a = DVector::from_iterator(
        problem.n(),
        (&dmhat * &gamma).iter().zip(sigma.values()).map(|(v, s)| v / s),
    );
    let g = problem.cache().project(&a)? / -sd;
    Ok(ScoreParts { g, rho, variance })
}

/// Sieve score statistic at the restricted fit, N(0, 1) under the null.
pub fn score_test(problem: &SieveProblem, restricted: &FitResult, functional: &Functional) -> Result<InferenceReport> {
    let parts = score_parts(problem, restricted, functional)?;
    let stat = parts.g.dot(&parts.rho) / (problem.n() as f64).sqrt();
    let mut r = InferenceReport::new(Method::Score, stat);
    r.variance = Some(parts.variance);
    r.pvalue = Some(normal::two_sided_pvalue(stat));
    r.estimate = Some(functional.value(&problem.spec().qbasis, &restricted.beta)?);
    Ok(r)
}
