//! Generalized residual bootstrap: every residual `rho_i` in the criterion
//! is replaced by `omega_i rho_i` with nonnegative, mean-one weights.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::basis::empirical_quantile;
use crate::data_io::{Cell, Dataset, Table};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, stream, Execution};
use crate::functionals::Functional;
use crate::inference::{invert_qlr_ci, score_parts, Interval};
use crate::linalg::{pinv, ProjectionCache};
use crate::models::{self, ModelSpec, SigmaHat};
use crate::psmd::{FitResult, OptimConfig, SieveProblem};
use crate::variance::d_matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightScheme {
    /// i.i.d. Exponential(1).
    IidExponential,
    /// Counts from `n` draws over `n` equiprobable cells.
    Multinomial,
    /// `omega = 1`; for identity checks.
    Unit,
}

impl WeightScheme {
    /// `Var(omega)`, taken as 1 for both random schemes.
    pub fn sigma_omega_sq(&self) -> f64 {
        1.0
    }
}

pub fn gen_weights<R: Rng + ?Sized>(scheme: WeightScheme, n: usize, rng: &mut R) -> Vec<f64> {
    match scheme {
        WeightScheme::IidExponential => (0..n).map(|_| Exp1.sample(rng)).collect(),
        WeightScheme::Multinomial => {
            let mut w = vec![0.0; n];
            for _ in 0..n {
                w[rng.random_range(0..n)] += 1.0;
            }
            w
        }
        WeightScheme::Unit => vec![1.0; n],
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootOptions {
    pub scheme: WeightScheme,
    pub replications: usize,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for BootOptions {
    fn default() -> Self {
        Self {
            scheme: WeightScheme::IidExponential,
            replications: 200,
            seed: 0,
            exec: Execution::Parallel,
        }
    }
}

/// Bootstrap draws in replication order; failed replications are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapRun {
    pub values: Vec<Option<f64>>,
    pub seed: u64,
}

impl BootstrapRun {
    pub fn replications(&self) -> usize {
        self.values.len()
    }

    pub fn failures(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    /// Successful draws, sorted ascending.
    pub fn sorted(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.values.iter().flatten().copied().collect();
        s.sort_by(f64::total_cmp);
        s
    }

    /// Empirical `p`-quantile of the successful draws.
    pub fn quantile(&self, p: f64) -> f64 {
        let s = self.sorted();
        if s.is_empty() {
            return f64::NAN;
        }
        empirical_quantile(&s, p)
    }

    /// Critical value `c(level)` for statistics that reject when large.
    pub fn critical_value(&self, level: f64) -> f64 {
        self.quantile(level)
    }

    /// Critical value for `|stat|` of a signed statistic.
    pub fn abs_critical_value(&self, level: f64) -> f64 {
        let abs = BootstrapRun {
            values: self.values.iter().map(|v| v.map(f64::abs)).collect(),
            seed: self.seed,
        };
        abs.quantile(level)
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["replication", "statistic"]);
        for (i, v) in self.values.iter().enumerate() {
            let cell = match v {
                Some(v) => Cell::Num(*v),
                None => Cell::Text("NA".into()),
            };
            t.push(vec![Cell::Num(i as f64), cell]).expect("two columns");
        }
        t
    }
}

fn run_replications<F>(n: usize, opts: &BootOptions, stat: F) -> Result<BootstrapRun>
where
    F: Fn(usize, &[f64]) -> Result<f64> + Sync + Send,
{
    if opts.replications == 0 {
        return Err(Error::Config("bootstrap needs at least one replication".into()));
    }
    let values = map_indexed(opts.exec, opts.replications, |b| {
        let mut rng = stream(opts.seed, b as u64);
        let w = gen_weights(opts.scheme, n, &mut rng);
        match stat(b, &w) {
            Ok(v) if v.is_finite() => Some(v),
            Ok(_) => None,
            Err(e) => {
                log::debug!("bootstrap replication {b} failed: {e}");
                None
            }
        }
    });
    let run = BootstrapRun {
        values,
        seed: opts.seed,
    };
    let failures = run.failures();
    if failures > 0 {
        log::info!("{failures} of {} bootstrap replications failed", run.replications());
    }
    if failures * 10 > run.replications() {
        return Err(Error::BootstrapUnstable {
            failures,
            replications: run.replications(),
        });
    }
    Ok(run)
}

// Refits stay in the basin of alpha_hat: no smoothed restart.
fn rep_config(config: &OptimConfig, b: usize) -> OptimConfig {
    OptimConfig {
        seed: config.seed ^ (b as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        smooth_start: false,
        ..*config
    }
}

/// Bootstrap criterion computed directly from the series-LS projection of
/// the weighted residuals.
pub fn bootstrap_criterion(
    spec: &ModelSpec,
    data: &Dataset,
    beta: &DVector<f64>,
    cache: &ProjectionCache,
    sigma: &SigmaHat,
    weights: &[f64],
) -> Result<f64> {
    if weights.len() != data.n() || sigma.len() != data.n() {
        return Err(Error::Dimension {
            what: "bootstrap weights",
            expected: data.n(),
            got: weights.len().min(sigma.len()),
        });
    }
    let rho = models::residuals(spec, data, beta)?;
    let wrho = DVector::from_iterator(data.n(), rho.iter().zip(weights).map(|(r, w)| r * w));
    let m = cache.project(&wrho)?;
    Ok(m.iter().zip(sigma.values()).map(|(m, s)| m * m / s).sum::<f64>() / data.n() as f64)
}

/// Bootstrap QLR centered at `phi_hat = phi(alpha^)`:
/// `n (Q_B(alpha_RB) - Q_B(alpha_B)) / sigma_omega^2`, floored at zero.
pub fn bootstrap_sqlr(
    problem: &SieveProblem,
    fit: &FitResult,
    functional: &Functional,
    opts: &BootOptions,
    config: &OptimConfig,
) -> Result<BootstrapRun> {
    if fit.fingerprint != problem.fingerprint() {
        return Err(Error::MismatchedFits);
    }
    let phi_hat = functional.value(&problem.spec().qbasis, &fit.beta)?;
    let n = problem.n();
    let s2 = opts.scheme.sigma_omega_sq();
    run_replications(n, opts, |b, w| {
        let cfg = rep_config(config, b);
        // alpha^ is feasible for the restricted problem and a good start for both
        let u = problem.fit(&cfg, Some(w), Some(&fit.beta))?;
        let gap = functional.value(&problem.spec().qbasis, &u.beta)? - phi_hat;
        if gap.abs() <= 1e-12 * (1.0 + phi_hat.abs()) {
            // restriction not binding
            return Ok(0.0);
        }
        let r = problem.fit_restricted(functional, phi_hat, &cfg, Some(w), Some(&fit.beta))?;
        Ok((n as f64 * (r.qhat - u.qhat)).max(0.0) / s2)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaldFlavor {
    /// Studentized by the original-sample variance.
    W1,
    /// Studentized by the per-replication bootstrap variance.
    W2,
}

/// Pieces of `||v*||^2_{B,sd} = n^-1 sum_i c_i (omega_i - 1)^2`,
/// `c_i = (d_i' D^- F)^2 rho_i^2 / Sigma_i^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct BootVariance {
    c: Vec<f64>,
}

impl BootVariance {
    pub fn new(problem: &SieveProblem, beta: &DVector<f64>, functional: &Functional) -> Result<Self> {
        let spec = problem.spec();
        let dmhat = models::dmhat_matrix(spec, problem.data(), beta, problem.cache())?;
        let f = functional.gradient(&spec.qbasis, beta)?;
        let sigma = problem.sigma();
        let d: DMatrix<f64> = d_matrix(&dmhat, sigma)?;
        let e = dmhat * (pinv(&d, None) * f);
        let rho = problem.residuals(beta);
        let c = e
            .iter()
            .zip(rho.iter())
            .zip(sigma.values())
            .map(|((e, r), s)| (e * r / s).powi(2))
            .collect();
        Ok(Self { c })
    }

    /// Original-sample outer-product variance.
    pub fn full(&self) -> f64 {
        self.c.iter().sum::<f64>() / self.c.len() as f64
    }

    pub fn with_weights(&self, weights: &[f64]) -> f64 {
        self.c
            .iter()
            .zip(weights)
            .map(|(c, w)| c * (w - 1.0) * (w - 1.0))
            .sum::<f64>()
            / self.c.len() as f64
    }
}

/// Bootstrap t statistics `sqrt(n) (phi(alpha_B) - phi_hat) / sd`.
pub fn bootstrap_wald(
    problem: &SieveProblem,
    fit: &FitResult,
    functional: &Functional,
    variance_sq: f64,
    flavor: WaldFlavor,
    opts: &BootOptions,
    config: &OptimConfig,
) -> Result<BootstrapRun> {
    if fit.fingerprint != problem.fingerprint() {
        return Err(Error::MismatchedFits);
    }
    if !(variance_sq > 0.0) {
        return Err(Error::NonPositiveVariance(variance_sq));
    }
    let basis = &problem.spec().qbasis;
    let phi_hat = functional.value(basis, &fit.beta)?;
    let boot_var = match flavor {
        WaldFlavor::W1 => None,
        WaldFlavor::W2 => Some(BootVariance::new(problem, &fit.beta, functional)?),
    };
    let root_n = (problem.n() as f64).sqrt();
    let s2 = opts.scheme.sigma_omega_sq();
    run_replications(problem.n(), opts, |b, w| {
        let cfg = rep_config(config, b);
        let f = problem.fit(&cfg, Some(w), Some(&fit.beta))?;
        let num = root_n * (functional.value(basis, &f.beta)? - phi_hat);
        let denom = match &boot_var {
            None => (s2 * variance_sq).sqrt(),
            Some(v) => v.with_weights(w).sqrt(),
        };
        if num == 0.0 {
            return Ok(0.0);
        }
        Ok(num / denom)
    })
}

/// Bootstrap score `n^-1/2 sum_i g_i (omega_i - 1) rho_i` from the
/// restricted fit; no refitting.
pub fn bootstrap_score(
    problem: &SieveProblem,
    restricted: &FitResult,
    functional: &Functional,
    opts: &BootOptions,
) -> Result<BootstrapRun> {
    let parts = score_parts(problem, restricted, functional)?;
    let gr: Vec<f64> = parts.g.iter().zip(parts.rho.iter()).map(|(g, r)| g * r).collect();
    let root_n = (problem.n() as f64).sqrt();
    run_replications(problem.n(), opts, |_, w| {
        Ok(gr.iter().zip(w).map(|(a, w)| a * (w - 1.0)).sum::<f64>() / root_n)
    })
}

/// QLR-inverted confidence set using the bootstrap critical value at `level`.
pub fn bootstrap_ci(
    run: &BootstrapRun,
    problem: &SieveProblem,
    fit: &FitResult,
    functional: &Functional,
    level: f64,
    config: &OptimConfig,
) -> Result<Interval> {
    invert_qlr_ci(problem, fit, functional, run.critical_value(level), config)
}
