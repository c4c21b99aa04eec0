//! Monte Carlo harness: simulation designs, size / variance / power
//! experiments and QQ diagnostics.
//!
//! Replication `r` draws its data from stream `r` of the experiment seed,
//! so tables are identical for any worker count.

use std::f64::consts::PI;

use nalgebra::{DVector, Matrix3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bootstrap::{bootstrap_sqlr, BootOptions};
use crate::data_io::{Cell, Dataset, Table};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, stream, Execution};
use crate::functionals::Functional;
use crate::inference::{sqlr_test, wald_test};
use crate::models::{ModelSpec, ModelTemplate, ResidualKind, Weighting};
use crate::normal;
use crate::psmd::{OptimConfig, SieveProblem};
use crate::variance::plugin_variances;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DgpKind {
    /// `Y1 = h0(Y2) + 2 (Phi(U*) - gamma)`.
    Npqiv { gamma: f64 },
    /// `Y1 = h0(Y2) + 0.76 U*`.
    Npiv,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub n: usize,
    pub seed: u64,
}

/// True structural function `2 sin(pi y)`.
pub fn h0(y: f64) -> f64 {
    2.0 * (PI * y).sin()
}

/// Lower Cholesky factor of the covariance of `(Y2*, X*, U*)`.
fn latent_factor() -> Matrix3<f64> {
    let cov = Matrix3::new(1.0, 0.8, 0.5, 0.8, 1.0, 0.0, 0.5, 0.0, 1.0);
    cov.cholesky().expect("covariance is positive definite").l()
}

/// `n` i.i.d. draws; `Y2, X` are `2 (Phi(./3) - 0.5)` transforms of the
/// latent normals, so both lie in `(-1, 1)`.
pub fn gen_dgp<R: Rng + ?Sized>(kind: DgpKind, n: usize, rng: &mut R) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::Config(format!("simulation needs n >= 10, got {n}")));
    }
    if let DgpKind::Npqiv { gamma } = kind {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Config(format!("quantile {gamma} outside (0, 1)")));
        }
    }
    let l = latent_factor();
    let mut y1 = Vec::with_capacity(n);
    let mut y2 = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    for _ in 0..n {
        let z = nalgebra::Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let v = l * z;
        let (ys, xs, us) = (v[0], v[1], v[2]);
        let y = 2.0 * (normal::cdf(ys / 3.0) - 0.5);
        let u = match kind {
            DgpKind::Npqiv { gamma } => 2.0 * (normal::cdf(us) - gamma),
            DgpKind::Npiv => 0.76 * us,
        };
        y1.push(h0(y) + u);
        y2.push(y);
        x.push(2.0 * (normal::cdf(xs / 3.0) - 0.5));
    }
    Dataset::from_columns(y1, y2, x)
}

pub fn gen_dgp_spec(spec: &DgpSpec) -> Result<Dataset> {
    gen_dgp(spec.kind, spec.n, &mut stream(spec.seed, 0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceKind {
    V1,
    V2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeStat {
    /// QLR against chi-square(1), or the bootstrap critical value when
    /// bootstrap options are configured.
    Sqlr,
    Wald(VarianceKind),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dgp: DgpKind,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub model: ModelTemplate,
    pub functional: Functional,
    /// Value of the functional at the true `h0`.
    pub phi0: f64,
    /// Nominal sizes, e.g. `[0.10, 0.05, 0.01]`.
    pub levels: Vec<f64>,
    pub optim: OptimConfig,
    pub boot: Option<BootOptions>,
    /// Optimizer settings for bootstrap refits; `optim` when `None`.
    pub boot_optim: Option<OptimConfig>,
    pub exec: Execution,
}

impl ExperimentConfig {
    fn check(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::Config("experiment needs at least one replication".into()));
        }
        if self.n < 10 {
            return Err(Error::Config(format!("simulation needs n >= 10, got {}", self.n)));
        }
        if self.levels.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::Config("nominal sizes must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn data(&self, rep: usize) -> Result<Dataset> {
        gen_dgp(self.dgp, self.n, &mut stream(self.seed, rep as u64))
    }

    fn rep_optim(&self, rep: usize) -> OptimConfig {
        OptimConfig {
            seed: self.optim.seed.wrapping_add(rep as u64),
            ..self.optim
        }
    }

    fn rep_boot_optim(&self, rep: usize) -> OptimConfig {
        let base = self.boot_optim.unwrap_or(self.optim);
        OptimConfig {
            seed: base.seed.wrapping_add(rep as u64),
            ..base
        }
    }

    fn rep_boot(&self, rep: usize) -> Option<BootOptions> {
        self.boot.map(|b| BootOptions {
            seed: b.seed ^ (rep as u64).wrapping_mul(0xd134_2543_de82_ef95),
            // replications already run in parallel
            exec: Execution::Sequential,
            ..b
        })
    }
}

/// Whether the chi-square(1) calibration of the QLR applies.
pub fn is_optimal(spec: &ModelSpec) -> bool {
    match (spec.kind, spec.weighting) {
        (_, Weighting::SeriesSigma0) => true,
        (ResidualKind::Npqiv { gamma }, Weighting::KnownScalar(s)) => (s - gamma * (1.0 - gamma)).abs() <= 1e-12,
        _ => false,
    }
}

/// Binomial standard error of a rejection frequency.
pub fn binomial_se(p: f64, reps: usize) -> f64 {
    (p * (1.0 - p) / reps.max(1) as f64).sqrt()
}

fn level_label(a: f64) -> String {
    format!("{}%", (a * 100.0 * 1e6).round() / 1e6)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeResult {
    pub levels: Vec<f64>,
    pub rejection: Vec<f64>,
    pub se: Vec<f64>,
    /// Per replication; `None` for failed replications.
    pub stats: Vec<Option<f64>>,
    pub valid: usize,
    pub failures: usize,
}

fn rates(rejects: &[Option<Vec<bool>>], levels: &[f64]) -> (Vec<f64>, Vec<f64>, usize) {
    let ok: Vec<&Vec<bool>> = rejects.iter().flatten().collect();
    let valid = ok.len();
    let rejection: Vec<f64> = (0..levels.len())
        .map(|j| ok.iter().filter(|r| r[j]).count() as f64 / valid.max(1) as f64)
        .collect();
    let se = rejection.iter().map(|p| binomial_se(*p, valid)).collect();
    (rejection, se, valid)
}

/// Rejection frequencies of a true null at each nominal size.
pub fn run_size_experiment(cfg: &ExperimentConfig, stat: SizeStat) -> Result<SizeResult> {
    cfg.check()?;
    let out = map_indexed(cfg.exec, cfg.reps, |rep| -> Result<(f64, Vec<bool>)> {
        let data = cfg.data(rep)?;
        let spec = cfg.model.instantiate(&data)?;
        let problem = SieveProblem::new(&spec, &data)?;
        let optim = cfg.rep_optim(rep);
        let fit = problem.fit(&optim, None, None)?;
        match stat {
            SizeStat::Sqlr => {
                let r = problem.fit_restricted(&cfg.functional, cfg.phi0, &optim, None, Some(&fit.beta))?;
                let s = sqlr_test(&fit, &r, data.n(), true)?.statistic;
                let crits: Vec<f64> = match cfg.rep_boot(rep) {
                    Some(b) => {
                        let run = bootstrap_sqlr(&problem, &fit, &cfg.functional, &b, &cfg.rep_boot_optim(rep))?;
                        cfg.levels.iter().map(|a| run.critical_value(1.0 - a)).collect()
                    }
                    None => {
                        if !is_optimal(&spec) {
                            return Err(Error::Weighting(
                                "chi-square calibration needs the optimal weighting".into(),
                            ));
                        }
                        cfg.levels.iter().map(|a| normal::chi2_1_quantile(1.0 - a)).collect()
                    }
                };
                Ok((s, crits.iter().map(|c| s > *c).collect()))
            }
            SizeStat::Wald(kind) => {
                let pv = plugin_variances(&problem, &fit.beta, &cfg.functional)?;
                let v = match kind {
                    VarianceKind::V1 => pv.v1,
                    VarianceKind::V2 => pv.v2,
                };
                let phi_hat = cfg.functional.value(&spec.qbasis, &fit.beta)?;
                let rep = wald_test(phi_hat, cfg.phi0, v, data.n(), 0.95)?;
                let p = rep.pvalue.unwrap_or(1.0);
                Ok((rep.statistic, cfg.levels.iter().map(|a| p < *a).collect()))
            }
        }
    });
    let failures = out.iter().filter(|r| r.is_err()).count();
    if let Some(Err(e)) = out.iter().find(|r| r.is_err()) {
        log::warn!("{failures} of {} replications failed, first: {e}", cfg.reps);
    }
    if failures == cfg.reps {
        return Err(out.into_iter().find_map(|r| r.err()).expect("all failed"));
    }
    let stats: Vec<Option<f64>> = out.iter().map(|r| r.as_ref().ok().map(|v| v.0)).collect();
    let rejects: Vec<Option<Vec<bool>>> = out.into_iter().map(|r| r.ok().map(|v| v.1)).collect();
    let (rejection, se, valid) = rates(&rejects, &cfg.levels);
    Ok(SizeResult {
        levels: cfg.levels.clone(),
        rejection,
        se,
        stats,
        valid,
        failures,
    })
}

impl SizeResult {
    /// One row: basis labels, penalty, then rejection rates and their SEs.
    pub fn to_table(&self, model: &ModelTemplate) -> Table {
        let mut header = vec!["q".to_string(), "p".to_string(), "lambda".to_string()];
        header.extend(self.levels.iter().map(|a| level_label(*a)));
        header.extend(self.levels.iter().map(|a| format!("se_{}", level_label(*a))));
        header.push("reps".into());
        header.push("failures".into());
        let mut t = Table::new(header);
        let mut row = vec![
            Cell::Text(model.qbasis.to_string()),
            Cell::Text(model.pbasis.to_string()),
            Cell::Num(model.lambda),
        ];
        row.extend(self.rejection.iter().map(|v| Cell::Num(*v)));
        row.extend(self.se.iter().map(|v| Cell::Num(*v)));
        row.push(Cell::Num(self.valid as f64));
        row.push(Cell::Num(self.failures as f64));
        t.push(row).expect("row width matches header");
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceResult {
    pub levels: Vec<f64>,
    /// MC variance of `sqrt(n) phi(alpha^)`, the reference sieve variance.
    pub reference: f64,
    pub reference_reps: usize,
    pub med_v1: f64,
    pub med_v2: f64,
    pub rejection_v1: Vec<f64>,
    pub rejection_v2: Vec<f64>,
    pub t1: Vec<f64>,
    pub t2: Vec<f64>,
    pub valid: usize,
    pub failures: usize,
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Two passes: the MC variance of `sqrt(n) phi(alpha^)` over
/// `reference_reps` replications, then the accuracy of the plug-in
/// variances and their t tests over `cfg.reps`.
pub fn run_variance_experiment(cfg: &ExperimentConfig, reference_reps: usize) -> Result<VarianceResult> {
    cfg.check()?;
    if reference_reps < 2 {
        return Err(Error::Config(
            "reference variance needs at least two replications".into(),
        ));
    }
    let root_n = (cfg.n as f64).sqrt();
    // reference pass uses streams after those of the main pass
    let offset = cfg.reps;
    let estimates = map_indexed(cfg.exec, reference_reps, |i| -> Result<f64> {
        let rep = offset + i;
        let data = cfg.data(rep)?;
        let spec = cfg.model.instantiate(&data)?;
        let problem = SieveProblem::new(&spec, &data)?;
        let fit = problem.fit(&cfg.rep_optim(rep), None, None)?;
        Ok(root_n * cfg.functional.value(&spec.qbasis, &fit.beta)?)
    });
    let ok: Vec<f64> = estimates.into_iter().flatten().collect();
    if ok.len() < 2 {
        return Err(Error::DegenerateVariance("reference pass produced no estimates".into()));
    }
    let mean = ok.iter().sum::<f64>() / ok.len() as f64;
    let reference = ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (ok.len() - 1) as f64;

    let out = map_indexed(cfg.exec, cfg.reps, |rep| -> Result<(f64, f64, f64, f64)> {
        let data = cfg.data(rep)?;
        let spec = cfg.model.instantiate(&data)?;
        let problem = SieveProblem::new(&spec, &data)?;
        let fit = problem.fit(&cfg.rep_optim(rep), None, None)?;
        let pv = plugin_variances(&problem, &fit.beta, &cfg.functional)?;
        let num = root_n * (cfg.functional.value(&spec.qbasis, &fit.beta)? - cfg.phi0);
        Ok((pv.v1, pv.v2, num / pv.v1.sqrt(), num / pv.v2.sqrt()))
    });
    let failures = out.iter().filter(|r| r.is_err()).count();
    let ok: Vec<(f64, f64, f64, f64)> = out.into_iter().flatten().collect();
    if ok.is_empty() {
        return Err(Error::DegenerateVariance("every replication failed".into()));
    }
    let mut e1: Vec<f64> = ok.iter().map(|r| (r.0 / reference - 1.0).abs()).collect();
    let mut e2: Vec<f64> = ok.iter().map(|r| (r.1 / reference - 1.0).abs()).collect();
    let t1: Vec<f64> = ok.iter().map(|r| r.2).collect();
    let t2: Vec<f64> = ok.iter().map(|r| r.3).collect();
    let reject = |t: &[f64]| -> Vec<f64> {
        cfg.levels
            .iter()
            .map(|a| {
                let z = normal::quantile(1.0 - a / 2.0);
                t.iter().filter(|v| v.abs() > z).count() as f64 / t.len() as f64
            })
            .collect()
    };
    Ok(VarianceResult {
        levels: cfg.levels.clone(),
        reference,
        reference_reps,
        med_v1: median(&mut e1),
        med_v2: median(&mut e2),
        rejection_v1: reject(&t1),
        rejection_v2: reject(&t2),
        valid: ok.len(),
        failures,
        t1,
        t2,
    })
}

impl VarianceResult {
    pub fn to_table(&self, model: &ModelTemplate) -> Table {
        let mut header: Vec<String> = ["q", "p", "med_v1", "med_v2"].iter().map(|s| s.to_string()).collect();
        for a in &self.levels {
            let l = level_label(*a);
            header.extend([
                format!("{l}_v1"),
                format!("{l}_v2"),
                format!("se_{l}_v1"),
                format!("se_{l}_v2"),
            ]);
        }
        header.extend(["reference_variance", "reps", "failures"].iter().map(|s| s.to_string()));
        let mut t = Table::new(header);
        let mut row = vec![
            Cell::Text(model.qbasis.to_string()),
            Cell::Text(model.pbasis.to_string()),
            Cell::Num(self.med_v1),
            Cell::Num(self.med_v2),
        ];
        for j in 0..self.levels.len() {
            let (a, b) = (self.rejection_v1[j], self.rejection_v2[j]);
            row.extend([a, b, binomial_se(a, self.valid), binomial_se(b, self.valid)].map(Cell::Num));
        }
        row.extend([self.reference, self.valid as f64, self.failures as f64].map(Cell::Num));
        t.push(row).expect("row width matches header");
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerRow {
    pub r: f64,
    pub sqlr: Vec<f64>,
    /// Empty when no bootstrap is configured.
    pub boot: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerResult {
    pub levels: Vec<f64>,
    pub rows: Vec<PowerRow>,
    pub valid: usize,
    pub failures: usize,
}

/// `r_grid` points `i * max / (points - 1)`.
pub fn power_grid(n: usize, points: usize, max_scaled: f64) -> Vec<f64> {
    let top = max_scaled / (n as f64).sqrt();
    if points <= 1 {
        return vec![0.0];
    }
    (0..points).map(|i| top * i as f64 / (points - 1) as f64).collect()
}

/// Rejection of `H0: phi(h) = phi0 + r` on data generated at `phi0`, for
/// the QLR with chi-square(1) critical values and, when configured, with
/// bootstrap critical values. The bootstrap distribution is centered at
/// `phi(alpha^)`, so it is drawn once per data set.
pub fn run_power_curve(cfg: &ExperimentConfig, r_grid: &[f64]) -> Result<PowerResult> {
    cfg.check()?;
    if r_grid.is_empty() {
        return Err(Error::Config("empty power grid".into()));
    }
    let m = cfg.levels.len();
    let out = map_indexed(cfg.exec, cfg.reps, |rep| -> Result<(Vec<bool>, Vec<bool>)> {
        let data = cfg.data(rep)?;
        let spec = cfg.model.instantiate(&data)?;
        if !is_optimal(&spec) {
            return Err(Error::Weighting(
                "chi-square calibration needs the optimal weighting".into(),
            ));
        }
        let problem = SieveProblem::new(&spec, &data)?;
        let optim = cfg.rep_optim(rep);
        let fit = problem.fit(&optim, None, None)?;
        let chi: Vec<f64> = cfg.levels.iter().map(|a| normal::chi2_1_quantile(1.0 - a)).collect();
        let boot: Option<Vec<f64>> = match cfg.rep_boot(rep) {
            Some(b) => {
                let run = bootstrap_sqlr(&problem, &fit, &cfg.functional, &b, &cfg.rep_boot_optim(rep))?;
                Some(cfg.levels.iter().map(|a| run.critical_value(1.0 - a)).collect())
            }
            None => None,
        };
        let mut asym = Vec::with_capacity(r_grid.len() * m);
        let mut bs = Vec::new();
        for r in r_grid {
            let restricted = problem.fit_restricted(&cfg.functional, cfg.phi0 + r, &optim, None, Some(&fit.beta))?;
            let s = sqlr_test(&fit, &restricted, data.n(), true)?.statistic;
            asym.extend(chi.iter().map(|c| s > *c));
            if let Some(b) = &boot {
                bs.extend(b.iter().map(|c| s > *c));
            }
        }
        Ok((asym, bs))
    });
    let failures = out.iter().filter(|r| r.is_err()).count();
    if let Some(Err(e)) = out.iter().find(|r| r.is_err()) {
        log::warn!("{failures} of {} replications failed, first: {e}", cfg.reps);
    }
    let ok: Vec<(Vec<bool>, Vec<bool>)> = out.into_iter().flatten().collect();
    if ok.is_empty() {
        return Err(Error::Config("every power-curve replication failed".into()));
    }
    let frac =
        |pick: &dyn Fn(&(Vec<bool>, Vec<bool>)) -> bool| ok.iter().filter(|v| pick(v)).count() as f64 / ok.len() as f64;
    let rows = r_grid
        .iter()
        .enumerate()
        .map(|(g, &r)| PowerRow {
            r,
            sqlr: (0..m).map(|j| frac(&|v| v.0[g * m + j])).collect(),
            boot: if cfg.boot.is_some() {
                (0..m).map(|j| frac(&|v| v.1[g * m + j])).collect()
            } else {
                Vec::new()
            },
        })
        .collect();
    Ok(PowerResult {
        levels: cfg.levels.clone(),
        rows,
        valid: ok.len(),
        failures,
    })
}

impl PowerResult {
    pub fn to_table(&self, n: usize) -> Table {
        let mut header = vec!["r".to_string(), "r_sqrt_n".to_string()];
        header.extend(self.levels.iter().map(|a| format!("sqlr_{}", level_label(*a))));
        let boot = self.rows.first().is_some_and(|r| !r.boot.is_empty());
        if boot {
            header.extend(self.levels.iter().map(|a| format!("boot_{}", level_label(*a))));
        }
        let mut t = Table::new(header);
        for row in &self.rows {
            let mut cells = vec![Cell::Num(row.r), Cell::Num(row.r * (n as f64).sqrt())];
            cells.extend(row.sqlr.iter().map(|v| Cell::Num(*v)));
            cells.extend(row.boot.iter().map(|v| Cell::Num(*v)));
            t.push(cells).expect("row width matches header");
        }
        t
    }
}

/// Sorted `(Phi^-1((i - 0.5) / m), stat_(i))` pairs and the Kolmogorov
/// distance of the sample to N(0, 1).
pub fn qq_data(stats: &[f64]) -> (Vec<(f64, f64)>, f64) {
    let mut s: Vec<f64> = stats.iter().copied().filter(|v| !v.is_nan()).collect();
    s.sort_by(f64::total_cmp);
    let m = s.len() as f64;
    let pairs = s
        .iter()
        .enumerate()
        .map(|(i, &v)| (normal::quantile((i as f64 + 0.5) / m), v))
        .collect();
    let ks = s
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = normal::cdf(v);
            ((i as f64 + 1.0) / m - f).max(f - i as f64 / m)
        })
        .fold(0.0, f64::max);
    (pairs, ks)
}

pub fn qq_table(t1: &[f64], t2: &[f64]) -> Table {
    let (a, _) = qq_data(t1);
    let (b, _) = qq_data(t2);
    let mut t = Table::new(["theoretical", "t1", "t2"]);
    for (x, y) in a.iter().zip(&b) {
        t.push(vec![Cell::Num(x.0), Cell::Num(x.1), Cell::Num(y.1)])
            .expect("three columns");
    }
    t
}

/// Evaluates `h` on `points` equally spaced values spanning the support.
pub fn h_grid(spec: &ModelSpec, beta: &DVector<f64>, points: usize) -> Result<Vec<(f64, f64)>> {
    let (a, b) = spec.qbasis.support();
    let points = points.max(2);
    (0..points)
        .map(|i| {
            let y = if i + 1 == points {
                b
            } else {
                a + (b - a) * i as f64 / (points - 1) as f64
            };
            Ok((y, spec.qbasis.eval_function(beta, y, 0)?))
        })
        .collect()
}
