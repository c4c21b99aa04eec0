//! Penalized sieve minimum distance estimation, unrestricted and under a
//! scalar restriction `phi(h) = phi0`.
//!
//! NPIV criteria are quadratic in the sieve coefficients and are minimized
//! in closed form. NPQIV criteria are piecewise constant and are minimized
//! by multi-start Nelder-Mead, warm-started at the NPIV solution polished
//! on a smoothed version of the criterion.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::basis::{penalty_gram, PenaltyGram};
use crate::data_io::Dataset;
use crate::error::{Error, Result};
use crate::functionals::Functional;
use crate::linalg::{orthogonal_complement, pinv, ProjectionCache};
use crate::models::{self, ModelSpec, ResidualKind, SigmaHat, Weighting};
use crate::normal;
use crate::optim::{nelder_mead, SimplexOptions};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub max_iters: usize,
    pub restarts: usize,
    pub xtol: f64,
    pub ftol: f64,
    pub seed: u64,
    /// Also start the simplex from a smoothed-criterion solution (NPQIV).
    pub smooth_start: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            max_iters: 4000,
            restarts: 5,
            xtol: 1e-8,
            ftol: 1e-10,
            seed: 0,
            smooth_start: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMethod {
    ClosedForm,
    Simplex,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub beta: DVector<f64>,
    /// Criterion `Q_n` at `beta` (unpenalized).
    pub qhat: f64,
    /// `Q_n + lambda Pen(h)` at `beta`.
    pub penalized_value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub method: FitMethod,
    /// Identifies the model, data size and weighting the fit belongs to.
    pub fingerprint: u64,
}

/// A model placed on a dataset, with everything the criterion needs cached.
#[derive(Debug, Clone)]
pub struct SieveProblem<'a> {
    spec: ModelSpec,
    data: &'a Dataset,
    q: DMatrix<f64>,
    q_rows: Vec<f64>,
    cache: ProjectionCache,
    p_rows: Vec<f64>,
    sigma: SigmaHat,
    kernel: DMatrix<f64>,
    penalty: PenaltyGram,
    fingerprint: u64,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl<'a> SieveProblem<'a> {
    /// Builds the problem and resolves the weighting rule. For NPIV with
    /// series weights, `Sigma_0` is estimated from an identity-weighted
    /// preliminary fit.
    pub fn new(spec: &ModelSpec, data: &'a Dataset) -> Result<Self> {
        let n = data.n();
        match spec.weighting {
            Weighting::Identity => Self::with_sigma(spec, data, SigmaHat::constant(1.0, n)?),
            Weighting::KnownScalar(s) => Self::with_sigma(spec, data, SigmaHat::constant(s, n)?),
            Weighting::SeriesSigma0 => match spec.kind {
                ResidualKind::Npqiv { gamma } => {
                    Self::with_sigma(spec, data, SigmaHat::constant(gamma * (1.0 - gamma), n)?)
                }
                ResidualKind::Npiv => {
                    let pre = Self::with_sigma(spec, data, SigmaHat::constant(1.0, n)?)?;
                    let beta = pre.closed_form(None)?;
                    let sigma = models::sigma0_series(spec, data, &beta, &pre.cache, None)?;
                    pre.reweighted(sigma)
                }
            },
        }
    }

    pub fn with_sigma(spec: &ModelSpec, data: &'a Dataset, sigma: SigmaHat) -> Result<Self> {
        let n = data.n();
        if sigma.len() != n {
            return Err(Error::Dimension {
                what: "weights",
                expected: n,
                got: sigma.len(),
            });
        }
        if spec.k() > spec.j() {
            log::warn!(
                "sieve dimension k = {} exceeds instrument dimension J = {}",
                spec.k(),
                spec.j()
            );
        }
        let q = models::structural_design(spec, data)?;
        let cache = models::projection_cache(spec, data)?;
        let penalty = penalty_gram(&spec.qbasis, spec.k() + 1)?;
        let mut problem = Self {
            spec: spec.clone(),
            data,
            q_rows: row_major(&q),
            q,
            p_rows: row_major(cache.p()),
            cache,
            sigma: sigma.clone(),
            kernel: DMatrix::zeros(0, 0),
            penalty,
            fingerprint: 0,
        };
        problem.set_sigma(sigma);
        Ok(problem)
    }

    /// Same model and data under a different weighting.
    pub fn reweighted(&self, sigma: SigmaHat) -> Result<Self> {
        if sigma.len() != self.n() {
            return Err(Error::Dimension {
                what: "weights",
                expected: self.n(),
                got: sigma.len(),
            });
        }
        let mut p = self.clone();
        p.set_sigma(sigma);
        Ok(p)
    }

    fn set_sigma(&mut self, sigma: SigmaHat) {
        let ptp = self.cache.ptp_pinv();
        self.kernel = match sigma.as_constant() {
            Some(c) => ptp / c,
            None => {
                let a = self.cache.p() * ptp;
                let mut wa = a.clone();
                for (i, s) in sigma.values().iter().enumerate() {
                    wa.row_mut(i).scale_mut(1.0 / s);
                }
                a.tr_mul(&wa)
            }
        };
        let mut h = DefaultHasher::new();
        format!("{:?}", self.spec).hash(&mut h);
        self.data.n().hash(&mut h);
        for v in sigma.values() {
            v.to_bits().hash(&mut h);
        }
        self.fingerprint = h.finish();
        self.sigma = sigma;
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn data(&self) -> &'a Dataset {
        self.data
    }

    pub fn cache(&self) -> &ProjectionCache {
        &self.cache
    }

    pub fn sigma(&self) -> &SigmaHat {
        &self.sigma
    }

    pub fn penalty(&self) -> &PenaltyGram {
        &self.penalty
    }

    /// `n x k` structural design `Q`.
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn n(&self) -> usize {
        self.data.n()
    }

    pub fn k(&self) -> usize {
        self.spec.k()
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn check_beta(&self, beta: &DVector<f64>) -> Result<()> {
        if beta.len() != self.k() {
            return Err(Error::Dimension {
                what: "sieve coefficients",
                expected: self.k(),
                got: beta.len(),
            });
        }
        Ok(())
    }

    fn check_weights(&self, weights: Option<&[f64]>) -> Result<()> {
        if let Some(w) = weights {
            if w.len() != self.n() {
                return Err(Error::Dimension {
                    what: "bootstrap weights",
                    expected: self.n(),
                    got: w.len(),
                });
            }
        }
        Ok(())
    }

    pub fn fitted(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.q * beta
    }

    pub fn residuals(&self, beta: &DVector<f64>) -> DVector<f64> {
        models::residuals_from_fitted(self.spec.kind, self.data.y1(), self.fitted(beta).as_slice())
    }

    /// `P' (omega * rho)`, the instrument moments of the (weighted) residual.
    fn moment(&self, beta: &[f64], weights: Option<&[f64]>) -> DVector<f64> {
        let mut r = &self.q * DVector::from_column_slice(beta);
        let y1 = self.data.y1();
        match self.spec.kind {
            ResidualKind::Npiv => r.iter_mut().zip(y1).for_each(|(h, y)| *h = y - *h),
            // branch-free select; the sign of y - h is unpredictable
            ResidualKind::Npqiv { gamma } => r
                .iter_mut()
                .zip(y1)
                .for_each(|(h, y)| *h = f64::from(u8::from(*y <= *h)) - gamma),
        }
        if let Some(w) = weights {
            r.iter_mut().zip(w).for_each(|(r, w)| *r *= w);
        }
        self.cache.p().tr_mul(&r)
    }

    fn criterion_raw(&self, beta: &[f64], weights: Option<&[f64]>) -> f64 {
        let s = self.moment(beta, weights);
        (s.dot(&(&self.kernel * &s)) / self.n() as f64).max(0.0)
    }

    fn penalized_raw(&self, beta: &[f64], weights: Option<&[f64]>) -> f64 {
        let mut v = self.criterion_raw(beta, weights);
        if self.spec.lambda > 0.0 {
            let b = DVector::from_column_slice(beta);
            v += self.spec.lambda * self.penalty.value(&b);
        }
        v
    }

    /// `Q_n(beta)`; with `weights` the bootstrap criterion using
    /// `omega_i rho_i` in place of `rho_i`.
    pub fn criterion(&self, beta: &DVector<f64>, weights: Option<&[f64]>) -> Result<f64> {
        self.check_beta(beta)?;
        self.check_weights(weights)?;
        Ok(self.criterion_raw(beta.as_slice(), weights))
    }

    pub fn penalized(&self, beta: &DVector<f64>, weights: Option<&[f64]>) -> Result<f64> {
        self.check_beta(beta)?;
        self.check_weights(weights)?;
        Ok(self.penalized_raw(beta.as_slice(), weights))
    }

    /// Quadratic pieces of the NPIV-form objective,
    /// `beta' H beta - 2 b' beta + const`.
    fn quadratic_pieces(&self, weights: Option<&[f64]>) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.n();
        let j = self.cache.dim();
        let k = self.k();
        let y1 = self.data.y1();
        let mut c = DMatrix::zeros(k, j);
        let mut a = DVector::zeros(j);
        for i in 0..n {
            let w = weights.map_or(1.0, |w| w[i]);
            if w == 0.0 {
                continue;
            }
            let pi = &self.p_rows[i * j..(i + 1) * j];
            let qi = &self.q_rows[i * k..(i + 1) * k];
            for (col, &pv) in pi.iter().enumerate() {
                a[col] += w * y1[i] * pv;
                for (row, &qv) in qi.iter().enumerate() {
                    c[(row, col)] += w * qv * pv;
                }
            }
        }
        let ck = &c * &self.kernel;
        let h = &ck * c.transpose() / n as f64 + &self.penalty.r * self.spec.lambda;
        let b = ck * a / n as f64;
        (h, b)
    }

    /// Minimizer of the NPIV-form penalized quadratic.
    fn closed_form(&self, weights: Option<&[f64]>) -> Result<DVector<f64>> {
        self.check_weights(weights)?;
        let (h, b) = self.quadratic_pieces(weights);
        Ok(pinv(&h, None) * b)
    }

    fn result(
        &self,
        beta: DVector<f64>,
        weights: Option<&[f64]>,
        iterations: usize,
        converged: bool,
        method: FitMethod,
    ) -> FitResult {
        let qhat = self.criterion_raw(beta.as_slice(), weights);
        let penalized_value = self.penalized_raw(beta.as_slice(), weights);
        FitResult {
            beta,
            qhat,
            penalized_value,
            iterations,
            converged,
            method,
            fingerprint: self.fingerprint,
        }
    }

    /// Unrestricted PSMD fit. `init` replaces the NPIV warm start for the
    /// simplex path.
    pub fn fit(&self, config: &OptimConfig, weights: Option<&[f64]>, init: Option<&DVector<f64>>) -> Result<FitResult> {
        self.check_weights(weights)?;
        let closed = self.closed_form(weights)?;
        match self.spec.kind {
            ResidualKind::Npiv => Ok(self.result(closed, weights, 1, true, FitMethod::ClosedForm)),
            ResidualKind::Npqiv { .. } => {
                let mut start = closed;
                if let Some(b) = init {
                    self.check_beta(b)?;
                    if self.penalized_raw(b.as_slice(), weights) < self.penalized_raw(start.as_slice(), weights) {
                        start = b.clone();
                    }
                }
                let eye = DMatrix::identity(self.k(), self.k());
                let offset = DVector::zeros(self.k());
                let (beta, iters, conv) = self.simplex(&offset, &eye, &start, weights, config);
                Ok(self.result(beta, weights, iters, conv, FitMethod::Simplex))
            }
        }
    }

    /// Per-coordinate simplex steps for `beta = offset + map * delta`.
    fn simplex_steps(&self, map: &DMatrix<f64>, start_beta: &DVector<f64>) -> Vec<f64> {
        let n = self.n() as f64;
        let fitted = self.fitted(start_beta);
        let ss: f64 = self
            .data
            .y1()
            .iter()
            .zip(fitted.iter())
            .map(|(y, h)| (y - h) * (y - h))
            .sum();
        let scale = (ss / n).sqrt().max(1e-3);
        let design = &self.q * map;
        design
            .column_iter()
            .map(|c| {
                let rms = (c.norm_squared() / n).sqrt();
                if rms > 0.0 {
                    0.1 * scale / rms
                } else {
                    0.1
                }
            })
            .collect()
    }

    /// Warm start for the indicator criterion: Levenberg-Marquardt on the
    /// criterion with `1{y <= h}` replaced by `Phi((h - y) / bw)`, over a
    /// shrinking bandwidth sequence. Works in `delta` with
    /// `beta = offset + map * delta`.
    fn smoothed_start(
        &self,
        offset: &DVector<f64>,
        map: &DMatrix<f64>,
        x0: &[f64],
        weights: Option<&[f64]>,
        gamma: f64,
    ) -> DVector<f64> {
        let n = self.n();
        let m = map.ncols();
        let y1 = self.data.y1();
        let p = self.cache.p();
        let lambda = self.spec.lambda;
        let qm = &self.q * map;
        let base = &self.q * offset;
        let rm = map.tr_mul(&(&self.penalty.r * map));
        let ro = map.tr_mul(&(&self.penalty.r * offset));
        let mut d = DVector::from_column_slice(x0);
        let h0 = &base + &qm * &d;
        let ss: f64 = y1.iter().zip(h0.iter()).map(|(y, h)| (y - h) * (y - h)).sum();
        let scale = (ss / n as f64).sqrt().max(1e-3);

        // (objective, gradient, Gauss-Newton Hessian) of the smoothed criterion
        let pieces = |d: &DVector<f64>, bw: f64, jac: bool| {
            let h = &base + &qm * d;
            let mut r = DVector::zeros(n);
            let mut j = if jac {
                DMatrix::zeros(n, m)
            } else {
                DMatrix::zeros(0, 0)
            };
            for i in 0..n {
                let w = weights.map_or(1.0, |w| w[i]);
                let u = (h[i] - y1[i]) / bw;
                r[i] = w * (normal::cdf(u) - gamma);
                if jac {
                    let g = w * normal::pdf(u) / bw;
                    for c in 0..m {
                        j[(i, c)] = g * qm[(i, c)];
                    }
                }
            }
            let s = p.tr_mul(&r);
            let ks = &self.kernel * &s;
            let mut f = s.dot(&ks) / n as f64;
            let rd = &rm * d + &ro;
            if lambda > 0.0 {
                f += lambda * (d.dot(&(&rm * d)) + 2.0 * d.dot(&ro) + offset.dot(&(&self.penalty.r * offset)));
            }
            if !jac {
                return (f, DVector::zeros(0), DMatrix::zeros(0, 0));
            }
            let js = p.tr_mul(&j);
            let kjs = &self.kernel * &js;
            let g = js.tr_mul(&ks) / n as f64 + rd * lambda;
            let hess = js.tr_mul(&kjs) / n as f64 + &rm * lambda;
            (f, g, hess)
        };

        for frac in [0.5, 0.2, 0.08, 0.03] {
            let bw = frac * scale;
            let mut mu = 1e-3;
            for _ in 0..15 {
                let (f, g, hess) = pieces(&d, bw, true);
                let mut moved = false;
                for _ in 0..8 {
                    let mut a = hess.clone();
                    let ridge = mu * (hess.diagonal().amax() + 1e-12);
                    for c in 0..m {
                        a[(c, c)] += ridge;
                    }
                    let Some(step) = a.lu().solve(&(-&g)) else { break };
                    let trial = &d + &step;
                    let f_new = pieces(&trial, bw, false).0;
                    if f_new < f {
                        // a warm start only needs the basin
                        moved = f - f_new > 1e-3 * f;
                        d = trial;
                        mu = (mu * 0.3).max(1e-9);
                        break;
                    }
                    mu *= 10.0;
                }
                if !moved {
                    break;
                }
            }
        }
        d
    }

    /// Multi-start Nelder-Mead over `delta` with `beta = offset + map * delta`,
    /// starting at the projection of `start`.
    fn simplex(
        &self,
        offset: &DVector<f64>,
        map: &DMatrix<f64>,
        start: &DVector<f64>,
        weights: Option<&[f64]>,
        config: &OptimConfig,
    ) -> (DVector<f64>, usize, bool) {
        let to_beta = |d: &[f64]| offset + map * DVector::from_column_slice(d);
        let objective = |d: &[f64]| self.penalized_raw(to_beta(d).as_slice(), weights);
        let x0: Vec<f64> = (map.transpose() * (start - offset)).as_slice().to_vec();
        let steps = self.simplex_steps(map, start);
        let smooth = match self.spec.kind {
            ResidualKind::Npqiv { gamma } if config.smooth_start => {
                Some(self.smoothed_start(offset, map, &x0, weights, gamma))
            }
            _ => None,
        };
        let opts = SimplexOptions {
            max_iters: config.max_iters,
            xtol: config.xtol,
            ftol: config.ftol,
        };
        let mut best = nelder_mead(objective, &x0, &steps, opts);
        let mut iterations = best.iterations;
        // second basin: the smoothed-criterion solution
        if let Some(sm) = smooth {
            let m = nelder_mead(objective, sm.as_slice(), &steps, opts);
            iterations += m.iterations;
            if m.f < best.f {
                best = m;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for _ in 0..config.restarts {
            let restart: Vec<f64> = best
                .x
                .iter()
                .zip(&steps)
                .map(|(x, s)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x + s * z
                })
                .collect();
            let m = nelder_mead(objective, &restart, &steps, opts);
            iterations += m.iterations;
            if m.f < best.f {
                best = m;
            }
        }
        (to_beta(&best.x), iterations, best.converged)
    }

    /// Restricted PSMD fit under `phi(beta) = phi0`.
    pub fn fit_restricted(
        &self,
        functional: &Functional,
        phi0: f64,
        config: &OptimConfig,
        weights: Option<&[f64]>,
        init: Option<&DVector<f64>>,
    ) -> Result<FitResult> {
        self.check_weights(weights)?;
        if let Some(b) = init {
            self.check_beta(b)?;
        }
        let basis = &self.spec.qbasis;
        let tol = 1e-6 * (1.0 + phi0.abs());
        let fit = if functional.is_linear() {
            let g = functional.gradient(basis, &DVector::zeros(self.k()))?;
            self.linear_restricted(&g, phi0, config, weights, init)?
        } else {
            match self.spec.kind {
                ResidualKind::Npiv => self.penalty_continuation(functional, phi0, weights, init)?,
                ResidualKind::Npqiv { .. } => self.successive_linearization(functional, phi0, config, weights, init)?,
            }
        };
        let achieved = functional.value(basis, &fit.beta)?;
        if (achieved - phi0).abs() > tol || !achieved.is_finite() {
            return Err(Error::Infeasible {
                violation: (achieved - phi0).abs(),
            });
        }
        Ok(fit)
    }

    /// Exact elimination for `g' beta = target`.
    fn linear_restricted(
        &self,
        g: &DVector<f64>,
        target: f64,
        config: &OptimConfig,
        weights: Option<&[f64]>,
        init: Option<&DVector<f64>>,
    ) -> Result<FitResult> {
        let gg = g.norm_squared();
        if gg == 0.0 {
            return Err(Error::Infeasible {
                violation: target.abs(),
            });
        }
        let base = g * (target / gg);
        let k = self.k();
        if k == 1 {
            return Ok(self.result(base, weights, 0, true, FitMethod::ClosedForm));
        }
        let null = orthogonal_complement(g);
        let (h, b) = self.quadratic_pieces(weights);
        let hn = null.transpose() * &h * &null;
        let rhs = null.transpose() * (&b - &h * &base);
        let closed = &base + &null * (pinv(&hn, None) * rhs);
        match self.spec.kind {
            ResidualKind::Npiv => Ok(self.result(closed, weights, 1, true, FitMethod::ClosedForm)),
            ResidualKind::Npqiv { .. } => {
                let mut start = closed;
                if let Some(b0) = init {
                    // project the supplied start onto the constraint
                    let proj = &base + &null * (null.transpose() * (b0 - &base));
                    if self.penalized_raw(proj.as_slice(), weights) < self.penalized_raw(start.as_slice(), weights) {
                        start = proj;
                    }
                }
                let (beta, iters, conv) = self.simplex(&base, &null, &start, weights, config);
                Ok(self.result(beta, weights, iters, conv, FitMethod::Simplex))
            }
        }
    }

    /// Pull `beta` onto `phi(beta) = phi0` along the functional's gradient.
    fn restore_feasibility(&self, functional: &Functional, phi0: f64, beta: &mut DVector<f64>) -> Result<()> {
        let basis = &self.spec.qbasis;
        let tol = 1e-6 * (1.0 + phi0.abs());
        for _ in 0..200 {
            let v = functional.value(basis, beta)? - phi0;
            if v.abs() <= 1e-3 * tol {
                break;
            }
            let g = functional.gradient(basis, beta)?;
            let gg = g.norm_squared();
            if gg == 0.0 || !gg.is_finite() {
                break;
            }
            *beta -= g * (v / gg);
        }
        Ok(())
    }

    /// Quadratic-penalty continuation `c (phi - phi0)^2`,
    /// `c = {1e2, 1e4, 1e6} n`, each stage solved by damped Gauss-Newton.
    fn penalty_continuation(
        &self,
        functional: &Functional,
        phi0: f64,
        weights: Option<&[f64]>,
        init: Option<&DVector<f64>>,
    ) -> Result<FitResult> {
        let basis = &self.spec.qbasis;
        let (h, b) = self.quadratic_pieces(weights);
        let n = self.n() as f64;
        let mut beta = match init {
            Some(b0) => b0.clone(),
            None => pinv(&h, None) * &b,
        };
        let objective = |beta: &DVector<f64>, c: f64| -> Result<f64> {
            let v = functional.value(basis, beta)? - phi0;
            Ok(beta.dot(&(&h * beta)) - 2.0 * b.dot(beta) + c * v * v)
        };
        let mut iterations = 0;
        for c in [1e2 * n, 1e4 * n, 1e6 * n] {
            for _ in 0..100 {
                iterations += 1;
                let v = functional.value(basis, &beta)? - phi0;
                let g = functional.gradient(basis, &beta)?;
                let grad = &h * &beta - &b + &g * (c * v);
                let hess = &h + &g * g.transpose() * c;
                let step = pinv(&hess, None) * grad;
                let f0 = objective(&beta, c)?;
                let mut t = 1.0;
                let mut moved = false;
                for _ in 0..40 {
                    let cand = &beta - &step * t;
                    let f1 = objective(&cand, c)?;
                    if f1.is_finite() && f1 <= f0 {
                        beta = cand;
                        moved = true;
                        break;
                    }
                    t *= 0.5;
                }
                if !moved || step.amax() * t <= 1e-13 * (1.0 + beta.amax()) {
                    break;
                }
            }
        }
        self.restore_feasibility(functional, phi0, &mut beta)?;
        Ok(self.result(beta, weights, iterations, true, FitMethod::ClosedForm))
    }

    /// Non-smooth criteria with a nonlinear restriction: repeatedly
    /// linearize the restriction and solve the linear-restricted problem.
    fn successive_linearization(
        &self,
        functional: &Functional,
        phi0: f64,
        config: &OptimConfig,
        weights: Option<&[f64]>,
        init: Option<&DVector<f64>>,
    ) -> Result<FitResult> {
        let basis = &self.spec.qbasis;
        let mut beta = match init {
            Some(b) => b.clone(),
            None => self.fit(config, weights, None)?.beta,
        };
        let mut iterations = 0;
        let mut converged = false;
        let mut last = beta.clone();
        for _ in 0..10 {
            let g = functional.gradient(basis, &beta)?;
            let target = phi0 - functional.value(basis, &beta)? + g.dot(&beta);
            let fit = self.linear_restricted(&g, target, config, weights, Some(&beta))?;
            iterations += fit.iterations;
            beta = fit.beta;
            self.restore_feasibility(functional, phi0, &mut beta)?;
            converged = fit.converged;
            if (&beta - &last).amax() <= config.xtol * (1.0 + beta.amax()) {
                break;
            }
            last = beta.clone();
        }
        Ok(self.result(beta, weights, iterations, converged, FitMethod::Simplex))
    }
}

/// Unrestricted PSMD fit of `spec` on `data`.
pub fn fit(spec: &ModelSpec, data: &Dataset, config: &OptimConfig) -> Result<FitResult> {
    SieveProblem::new(spec, data)?.fit(config, None, None)
}

/// Restricted PSMD fit of `spec` on `data` under `phi(h) = phi0`.
pub fn fit_restricted(
    spec: &ModelSpec,
    data: &Dataset,
    functional: &Functional,
    phi0: f64,
    config: &OptimConfig,
) -> Result<FitResult> {
    let problem = SieveProblem::new(spec, data)?;
    let init = problem.fit(config, None, None)?;
    problem.fit_restricted(functional, phi0, config, None, Some(&init.beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSpec;
    use proptest::prelude::*;
    use rand::Rng;

    fn data(n: usize, seed: u64, exogenous: bool) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y2: Vec<f64> = if exogenous {
            x.clone()
        } else {
            x.iter().map(|x| 0.8 * x + rng.random_range(-0.2..0.2)).collect()
        };
        let y1 = y2
            .iter()
            .map(|y| (2.0 * y).sin() + rng.random_range(-0.3..0.3))
            .collect();
        Dataset::from_columns(y1, y2, x).unwrap()
    }

    fn spec(kind: ResidualKind, k: usize, j: usize, lambda: f64) -> ModelSpec {
        ModelSpec::new(
            kind,
            BasisSpec::power_series(k, (-1.5, 1.5)).unwrap(),
            BasisSpec::power_series(j, (-1.5, 1.5)).unwrap(),
            lambda,
            Weighting::Identity,
        )
        .unwrap()
    }

    fn solve(a: DMatrix<f64>, b: DVector<f64>) -> DVector<f64> {
        a.lu().solve(&b).unwrap()
    }

    #[test]
    fn exogenous_npiv_is_ols() {
        let d = data(12, 1, true);
        let s = spec(ResidualKind::Npiv, 3, 3, 0.0);
        let f = fit(&s, &d, &OptimConfig::default()).unwrap();
        assert_eq!(f.method, FitMethod::ClosedForm);
        let q = s.qbasis.eval(d.y2(), 0).unwrap();
        let y = DVector::from_column_slice(d.y1());
        let ols = solve(q.tr_mul(&q), q.tr_mul(&y));
        assert!((&f.beta - ols).amax() < 1e-9);
    }

    #[test]
    fn closed_form_matches_normal_equations() {
        // n^-1 Q'P (P'P)^-1 P'Q beta + lambda R beta = n^-1 Q'P (P'P)^-1 P'y
        let d = data(12, 2, false);
        let s = spec(ResidualKind::Npiv, 3, 5, 1e-3);
        let f = fit(&s, &d, &OptimConfig::default()).unwrap();
        let n = d.n() as f64;
        let q = s.qbasis.eval(d.y2(), 0).unwrap();
        let p = s.pbasis.eval(d.x1(), 0).unwrap();
        let ptp_inv = p.tr_mul(&p).try_inverse().unwrap();
        let y = DVector::from_column_slice(d.y1());
        let qp = q.tr_mul(&p);
        let r = penalty_gram(&s.qbasis, 10).unwrap().r;
        let lhs = &qp * &ptp_inv * qp.transpose() / n + r * s.lambda;
        let rhs = &qp * &ptp_inv * p.tr_mul(&y) / n;
        let oracle = solve(lhs, rhs);
        assert!((&f.beta - &oracle).amax() < 1e-8 * (1.0 + oracle.amax()));
        assert!(f.qhat >= 0.0 && f.penalized_value >= f.qhat);
    }

    #[test]
    fn heavy_penalty_shrinks_to_zero() {
        let d = data(40, 3, false);
        let f = fit(&spec(ResidualKind::Npiv, 4, 6, 1e12), &d, &OptimConfig::default()).unwrap();
        assert!(f.beta.amax() < 1e-9);
    }

    #[test]
    fn closed_form_is_stationary() {
        let d = data(60, 4, false);
        let s = spec(ResidualKind::Npiv, 4, 6, 1e-4);
        let pr = SieveProblem::new(&s, &d).unwrap();
        let f = pr.fit(&OptimConfig::default(), None, None).unwrap();
        for j in 0..4 {
            let h = 1e-5;
            let mut up = f.beta.clone();
            up[j] += h;
            let mut dn = f.beta.clone();
            dn[j] -= h;
            let g = (pr.penalized(&up, None).unwrap() - pr.penalized(&dn, None).unwrap()) / (2.0 * h);
            assert!(g.abs() < 1e-7, "coordinate {j}: {g}");
        }
    }

    #[test]
    fn criterion_shortcut_matches_direct_loop() {
        let d = data(30, 5, false);
        let s = spec(ResidualKind::Npiv, 3, 5, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sigma = SigmaHat::from_values((0..30).map(|_| rng.random_range(0.5..2.0)).collect()).unwrap();
        let pr = SieveProblem::with_sigma(&s, &d, sigma.clone()).unwrap();
        let beta = DVector::from_vec(vec![0.1, 1.2, -0.3]);
        let w: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..3.0)).collect();
        // direct: n^-1 sum_i mhat_i^2 / Sigma_i with mhat from weighted residuals
        let p = pr.cache().p();
        let rho = pr.residuals(&beta);
        let wrho = DVector::from_iterator(30, rho.iter().zip(&w).map(|(r, w)| r * w));
        let m = p * p.tr_mul(p).try_inverse().unwrap() * p.tr_mul(&wrho);
        let direct: f64 = m.iter().zip(sigma.values()).map(|(m, s)| m * m / s).sum::<f64>() / 30.0;
        let fast = pr.criterion(&beta, Some(&w)).unwrap();
        assert!((fast - direct).abs() < 1e-10 * (1.0 + direct));
        let unweighted = models::criterion(&s, &d, &beta, pr.cache(), &sigma).unwrap();
        assert!((pr.criterion(&beta, None).unwrap() - unweighted).abs() < 1e-10 * (1.0 + unweighted));
    }

    #[test]
    fn restricted_linear_matches_kkt() {
        let d = data(12, 6, false);
        let s = spec(ResidualKind::Npiv, 3, 5, 1e-3);
        let pr = SieveProblem::new(&s, &d).unwrap();
        let phi = Functional::point_eval(0.0);
        let f = pr
            .fit_restricted(&phi, 0.0, &OptimConfig::default(), None, None)
            .unwrap();
        let (h, b) = pr.quadratic_pieces(None);
        let g = phi.gradient(&s.qbasis, &DVector::zeros(3)).unwrap();
        // [H g; g' 0] [beta; mu] = [b; 0]
        let mut kkt = DMatrix::zeros(4, 4);
        kkt.view_mut((0, 0), (3, 3)).copy_from(&h);
        kkt.view_mut((0, 3), (3, 1)).copy_from(&g);
        kkt.view_mut((3, 0), (1, 3)).copy_from(&g.transpose());
        let mut rhs = DVector::zeros(4);
        rhs.rows_mut(0, 3).copy_from(&b);
        let sol = solve(kkt, rhs);
        assert!((&f.beta - sol.rows(0, 3)).amax() < 1e-9);
        assert!(s.qbasis.eval_function(&f.beta, 0.0, 0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn nonbinding_restriction_reproduces_fit() {
        let d = data(80, 7, false);
        let s = spec(ResidualKind::Npiv, 4, 6, 1e-4);
        let pr = SieveProblem::new(&s, &d).unwrap();
        let cfg = OptimConfig::default();
        let f = pr.fit(&cfg, None, None).unwrap();
        for phi in [Functional::point_eval(0.2), Functional::exp_point_eval(-0.3)] {
            let v = phi.value(&s.qbasis, &f.beta).unwrap();
            let r = pr.fit_restricted(&phi, v, &cfg, None, Some(&f.beta)).unwrap();
            assert!((r.penalized_value - f.penalized_value).abs() < cfg.ftol);
        }
    }

    #[test]
    fn nonlinear_restriction_agrees_with_equivalent_linear_one() {
        // exp(h(0)) = c is the same restriction as h(0) = ln c
        let d = data(100, 8, false);
        let s = spec(ResidualKind::Npiv, 4, 6, 1e-4);
        let pr = SieveProblem::new(&s, &d).unwrap();
        let cfg = OptimConfig::default();
        let c = 1.6;
        let nl = pr
            .fit_restricted(&Functional::exp_point_eval(0.0), c, &cfg, None, None)
            .unwrap();
        let lin = pr
            .fit_restricted(&Functional::point_eval(0.0), c.ln(), &cfg, None, None)
            .unwrap();
        assert!((nl.beta - lin.beta).amax() < 1e-5);
        assert!(matches!(
            pr.fit_restricted(&Functional::exp_point_eval(0.0), -1.0, &cfg, None, None),
            Err(Error::Infeasible { .. })
        ));
    }

    #[test]
    fn reparametrization_invariance() {
        let d = data(50, 10, false);
        let s = spec(ResidualKind::Npiv, 4, 6, 0.0);
        let a = DMatrix::from_fn(4, 4, |i, j| if i == j { 1.5 } else { 0.3 * (i as f64 - j as f64) });
        let mut t = s.clone();
        t.qbasis = s.qbasis.transformed(a).unwrap();
        let cfg = OptimConfig::default();
        let phi = Functional::point_eval(0.25);
        let f = fit(&s, &d, &cfg).unwrap();
        let g = fit(&t, &d, &cfg).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(1e-300);
        assert!(rel(f.qhat, g.qhat) < 1e-8);
        let pf = phi.value(&s.qbasis, &f.beta).unwrap();
        let pg = phi.value(&t.qbasis, &g.beta).unwrap();
        assert!(rel(pf, pg) < 1e-8);
        for y in [-0.5, 0.0, 0.6] {
            let hf = s.qbasis.eval_function(&f.beta, y, 0).unwrap();
            let hg = t.qbasis.eval_function(&g.beta, y, 0).unwrap();
            assert!(rel(hf, hg) < 1e-8);
        }
    }

    #[test]
    fn npqiv_simplex_improves_on_start() {
        let d = data(150, 11, false);
        let s = spec(ResidualKind::Npqiv { gamma: 0.5 }, 3, 5, 1e-4);
        let pr = SieveProblem::new(&s, &d).unwrap();
        let cfg = OptimConfig {
            restarts: 2,
            ..Default::default()
        };
        let start = pr.closed_form(None).unwrap();
        let f = pr.fit(&cfg, None, None).unwrap();
        assert_eq!(f.method, FitMethod::Simplex);
        assert!(f.penalized_value <= pr.penalized(&start, None).unwrap());
        let again = pr.fit(&cfg, None, None).unwrap();
        assert_eq!(f.beta, again.beta);
        // linear and nonlinear restrictions
        let lin = pr
            .fit_restricted(&Functional::point_eval(0.0), 0.1, &cfg, None, Some(&f.beta))
            .unwrap();
        assert!((s.qbasis.eval_function(&lin.beta, 0.0, 0).unwrap() - 0.1).abs() < 1e-9);
        assert!(lin.penalized_value >= f.penalized_value - cfg.ftol);
        let nl = pr
            .fit_restricted(&Functional::exp_point_eval(0.0), 1.2, &cfg, None, Some(&f.beta))
            .unwrap();
        assert!((s.qbasis.eval_function(&nl.beta, 0.0, 0).unwrap().exp() - 1.2).abs() < 1e-6 * 2.2);
    }

    #[test]
    fn smoothed_start_never_hurts() {
        let s = spec(ResidualKind::Npqiv { gamma: 0.5 }, 4, 6, 1e-4);
        for seed in 0..5 {
            let d = data(300, 40 + seed, false);
            let pr = SieveProblem::new(&s, &d).unwrap();
            let plain = OptimConfig {
                restarts: 0,
                smooth_start: false,
                ..Default::default()
            };
            let smooth = OptimConfig {
                smooth_start: true,
                ..plain
            };
            let a = pr.fit(&plain, None, None).unwrap();
            let b = pr.fit(&smooth, None, None).unwrap();
            assert!(b.penalized_value <= a.penalized_value);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn restriction_never_lowers_criterion(seed in 0u64..10_000, phi0 in -2.0f64..2.0, y in -0.8f64..0.8) {
            let d = data(30, seed, false);
            let s = spec(ResidualKind::Npiv, 3, 5, 1e-4);
            let pr = SieveProblem::new(&s, &d).unwrap();
            let cfg = OptimConfig::default();
            let f = pr.fit(&cfg, None, None).unwrap();
            let r = pr.fit_restricted(&Functional::point_eval(y), phi0, &cfg, None, None).unwrap();
            prop_assert!(r.penalized_value >= f.penalized_value - cfg.ftol);
        }
    }
}
