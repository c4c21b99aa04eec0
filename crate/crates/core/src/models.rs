//! Generalized residuals, weighting and the series-LS conditional mean.

use nalgebra::{DMatrix, DVector};

use crate::basis::{BasisSpec, BasisTemplate};
use crate::data_io::Dataset;
use crate::error::{Error, Result};
use crate::linalg::ProjectionCache;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResidualKind {
    /// `rho = Y1 - h(Y2)`.
    Npiv,
    /// `rho = 1{Y1 <= h(Y2)} - gamma`.
    Npqiv { gamma: f64 },
}

impl ResidualKind {
    pub fn is_smooth(&self) -> bool {
        matches!(self, ResidualKind::Npiv)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weighting {
    Identity,
    KnownScalar(f64),
    /// Series-LS estimate of `Var(rho | X)`; `gamma (1 - gamma)` for NPQIV.
    SeriesSigma0,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ResidualKind,
    pub qbasis: BasisSpec,
    pub pbasis: BasisSpec,
    /// Bases for instrument columns 2.. when a tensor-product sieve is used.
    pub tensor: Vec<BasisSpec>,
    pub lambda: f64,
    pub weighting: Weighting,
    /// Allow kernel-smoothed numeric derivatives for NPQIV.
    pub numeric_derivative: bool,
}

impl ModelSpec {
    pub fn new(
        kind: ResidualKind,
        qbasis: BasisSpec,
        pbasis: BasisSpec,
        lambda: f64,
        weighting: Weighting,
    ) -> Result<Self> {
        if let ResidualKind::Npqiv { gamma } = kind {
            if !(gamma > 0.0 && gamma < 1.0) {
                return Err(Error::Config(format!("quantile {gamma} outside (0, 1)")));
            }
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("penalty weight {lambda} must be >= 0")));
        }
        if let Weighting::KnownScalar(s) = weighting {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Weighting(format!("known scalar weight {s} must be > 0")));
            }
        }
        Ok(Self {
            kind,
            qbasis,
            pbasis,
            tensor: Vec::new(),
            lambda,
            weighting,
            numeric_derivative: false,
        })
    }

    /// Number of sieve coefficients `k`.
    pub fn k(&self) -> usize {
        self.qbasis.dim()
    }

    /// Number of instrument terms `J`.
    pub fn j(&self) -> usize {
        self.tensor.iter().fold(self.pbasis.dim(), |acc, b| acc * b.dim())
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
}

/// Data-independent model description; bases are placed on the data by
/// [`ModelTemplate::instantiate`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTemplate {
    pub kind: ResidualKind,
    pub qbasis: BasisTemplate,
    pub pbasis: BasisTemplate,
    pub lambda: f64,
    pub weighting: Weighting,
    pub tensor: bool,
}

impl ModelTemplate {
    pub fn instantiate(&self, data: &Dataset) -> Result<ModelSpec> {
        let q = self.qbasis.build(data.y2())?;
        let p = self.pbasis.build(data.x1())?;
        let mut spec = ModelSpec::new(self.kind, q, p, self.lambda, self.weighting)?;
        if self.tensor {
            let n = data.n();
            for c in 1..data.x().ncols() {
                let col = &data.x().as_slice()[c * n..(c + 1) * n];
                spec.tensor.push(self.pbasis.build(col)?);
            }
        }
        Ok(spec)
    }
}

/// Per-observation weights `Sigma(X_i) > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaHat {
    values: Vec<f64>,
}

impl SigmaHat {
    pub fn constant(c: f64, n: usize) -> Result<Self> {
        Self::from_values(vec![c; n])
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Weighting(format!("weight {bad} is not positive and finite")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The common value when all weights are equal.
    pub fn as_constant(&self) -> Option<f64> {
        let first = *self.values.first()?;
        self.values.iter().all(|&v| v == first).then_some(first)
    }

    /// Multiply every weight by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::from_values(self.values.iter().map(|v| v * c).collect())
    }
}

/// Instrument basis row at one observation of `X`.
pub fn instrument_row(spec: &ModelSpec, x: &[f64], out: &mut [f64]) -> Result<()> {
    if spec.tensor.is_empty() {
        return spec.pbasis.eval_into(x[0], 0, out);
    }
    let mut acc = spec.pbasis.eval_point(x[0], 0)?.as_slice().to_vec();
    for (c, b) in spec.tensor.iter().enumerate() {
        let row = b.eval_point(x[c + 1], 0)?;
        acc = acc.iter().flat_map(|a| row.iter().map(move |r| a * r)).collect();
    }
    out.copy_from_slice(&acc);
    Ok(())
}

/// Instrument design `P` (`n x J`), rows `p^J(X_i)'`.
pub fn instrument_design(spec: &ModelSpec, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    let j = spec.j();
    let mut p = DMatrix::zeros(n, j);
    let mut row = vec![0.0; j];
    let mut xi = vec![0.0; x.ncols()];
    for i in 0..n {
        for (c, v) in xi.iter_mut().enumerate() {
            *v = x[(i, c)];
        }
        instrument_row(spec, &xi, &mut row)?;
        for (c, v) in row.iter().enumerate() {
            p[(i, c)] = *v;
        }
    }
    Ok(p)
}

/// Structural design `Q` (`n x k`), rows `q^k(Y2_i)'`.
pub fn structural_design(spec: &ModelSpec, data: &Dataset) -> Result<DMatrix<f64>> {
    spec.qbasis.eval(data.y2(), 0)
}

pub fn projection_cache(spec: &ModelSpec, data: &Dataset) -> Result<ProjectionCache> {
    Ok(ProjectionCache::new(instrument_design(spec, data.x())?))
}

fn check_cache(data: &Dataset, cache: &ProjectionCache) -> Result<()> {
    if cache.n() != data.n() {
        return Err(Error::Dimension {
            what: "projection cache rows",
            expected: data.n(),
            got: cache.n(),
        });
    }
    Ok(())
}

/// Residual vector from fitted values `h_i = h(Y2_i)`.
pub fn residuals_from_fitted(kind: ResidualKind, y1: &[f64], fitted: &[f64]) -> DVector<f64> {
    match kind {
        ResidualKind::Npiv => DVector::from_iterator(y1.len(), y1.iter().zip(fitted).map(|(y, h)| y - h)),
        ResidualKind::Npqiv { gamma } => DVector::from_iterator(
            y1.len(),
            y1.iter()
                .zip(fitted)
                .map(|(y, h)| if y <= h { 1.0 - gamma } else { -gamma }),
        ),
    }
}

pub fn residuals(spec: &ModelSpec, data: &Dataset, beta: &DVector<f64>) -> Result<DVector<f64>> {
    spec.check_beta(beta)?;
    let fitted = structural_design(spec, data)? * beta;
    Ok(residuals_from_fitted(spec.kind, data.y1(), fitted.as_slice()))
}

/// Series-LS estimate of `E[rho | X]`, at the sample points or at the
/// instrument rows in `eval_x`.
pub fn m_hat(
    spec: &ModelSpec,
    data: &Dataset,
    beta: &DVector<f64>,
    cache: &ProjectionCache,
    eval_x: Option<&DMatrix<f64>>,
) -> Result<DVector<f64>> {
    check_cache(data, cache)?;
    let rho = residuals(spec, data, beta)?;
    let coef = cache.coefficients(&rho)?;
    match eval_x {
        None => Ok(cache.p() * coef),
        Some(x) => Ok(instrument_design(spec, x)? * coef),
    }
}

/// `n^-1 sum_i m(X_i)^2 / Sigma_i`.
pub fn criterion(
    spec: &ModelSpec,
    data: &Dataset,
    beta: &DVector<f64>,
    cache: &ProjectionCache,
    sigma: &SigmaHat,
) -> Result<f64> {
    check_cache(data, cache)?;
    if sigma.len() != data.n() {
        return Err(Error::Dimension {
            what: "weights",
            expected: data.n(),
            got: sigma.len(),
        });
    }
    let n = data.n() as f64;
    let rho = residuals(spec, data, beta)?;
    if let Some(c) = sigma.as_constant() {
        return Ok(cache.quadform(&rho)? / (n * c));
    }
    let m = cache.project(&rho)?;
    Ok(m.iter().zip(sigma.values()).map(|(m, s)| m * m / s).sum::<f64>() / n)
}

/// Rows `dm(X_i)/dh [q^k]'`. For NPIV this is `P (P'P)^- C'` with
/// `C = sum_j q^k(Y2_j) p^J(X_j)'`, independent of `beta`; the sign
/// convention is `-dm/dh`, which for NPIV drops the minus of `d rho / dh = -q^k`.
pub fn dmhat_matrix(
    spec: &ModelSpec,
    data: &Dataset,
    beta: &DVector<f64>,
    cache: &ProjectionCache,
) -> Result<DMatrix<f64>> {
    check_cache(data, cache)?;
    spec.check_beta(beta)?;
    let q = structural_design(spec, data)?;
    match spec.kind {
        ResidualKind::Npiv => {
            let c = q.tr_mul(cache.p());
            Ok(cache.p() * cache.ptp_pinv() * c.transpose())
        }
        ResidualKind::Npqiv { gamma } => {
            if !spec.numeric_derivative {
                return Err(Error::NonSmoothResidual);
            }
            let n = data.n();
            let fitted = &q * beta;
            let u: Vec<f64> = data.y1().iter().zip(fitted.iter()).map(|(y, h)| y - h).collect();
            let mean = u.iter().sum::<f64>() / n as f64;
            let sd = (u.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            let bw = (n as f64).powf(-0.2) * sd.max(f64::MIN_POSITIVE);
            // kernel-smoothed 1{y <= h} - gamma
            let smooth = |h: &DVector<f64>| -> DVector<f64> {
                DVector::from_iterator(
                    n,
                    data.y1()
                        .iter()
                        .zip(h.iter())
                        .map(|(y, h)| crate::normal::cdf((h - y) / bw) - gamma),
                )
            };
            let mut out = DMatrix::zeros(n, spec.k());
            for j in 0..spec.k() {
                let eps = 1e-6 * beta[j].abs().max(1.0);
                let step = q.column(j) * eps;
                let up = smooth(&(&fitted + &step));
                let dn = smooth(&(&fitted - &step));
                // sign matches the NPIV convention (derivative of -rho)
                let d = (dn - up) / (2.0 * eps);
                out.set_column(j, &cache.project(&d)?);
            }
            Ok(out)
        }
    }
}

/// Series-LS fit of squared residuals, floored below.
pub fn sigma0_series(
    spec: &ModelSpec,
    data: &Dataset,
    beta: &DVector<f64>,
    cache: &ProjectionCache,
    floor: Option<f64>,
) -> Result<SigmaHat> {
    check_cache(data, cache)?;
    if let ResidualKind::Npqiv { gamma } = spec.kind {
        return SigmaHat::constant(gamma * (1.0 - gamma), data.n());
    }
    let u = residuals(spec, data, beta)?;
    let u2 = u.map(|v| v * v);
    let mean = u2.mean();
    if mean <= 0.0 {
        return Err(Error::DegenerateVariance("all residuals are zero".into()));
    }
    let floor = floor.unwrap_or(1e-6 * mean);
    let fit = cache.project(&u2)?;
    SigmaHat::from_values(fit.iter().map(|v| v.max(floor)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y2: Vec<f64> = x.iter().map(|x| 0.7 * x + rng.random_range(-0.3..0.3)).collect();
        let y1: Vec<f64> = y2.iter().map(|y| y.sin() + rng.random_range(-0.5..0.5)).collect();
        Dataset::from_columns(y1, y2, x).unwrap()
    }

    fn spec(kind: ResidualKind, k: usize, j: usize) -> ModelSpec {
        ModelSpec::new(
            kind,
            BasisSpec::power_series(k, (-2.0, 2.0)).unwrap(),
            BasisSpec::power_series(j, (-2.0, 2.0)).unwrap(),
            0.0,
            Weighting::Identity,
        )
        .unwrap()
    }

    #[test]
    fn residual_examples() {
        let d = Dataset::from_columns(vec![1.0, 2.0, 3.0], vec![0.5, -1.0, 2.0], vec![0.0, 1.0, 2.0]).unwrap();
        let s = spec(ResidualKind::Npiv, 2, 2);
        let r0 = residuals(&s, &d, &DVector::zeros(2)).unwrap();
        assert_eq!(r0.as_slice(), d.y1());
        let r = residuals(&s, &d, &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        let expect: Vec<f64> = (0..3).map(|i| d.y1()[i] - 1.0 - d.y2()[i]).collect();
        assert_eq!(r.as_slice(), expect.as_slice());
        let sq = spec(ResidualKind::Npqiv { gamma: 0.5 }, 2, 2);
        let high = residuals(&sq, &d, &DVector::from_vec(vec![1e6, 0.0])).unwrap();
        assert!(high.iter().all(|&v| v == 0.5));
        assert!(residuals(&s, &d, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn mhat_examples() {
        let d = toy_data(4, 1);
        // p = 1, J = 1: m is the mean residual
        let s = spec(ResidualKind::Npiv, 2, 1);
        let cache = projection_cache(&s, &d).unwrap();
        let beta = DVector::from_vec(vec![0.3, -0.2]);
        let m = m_hat(&s, &d, &beta, &cache, None).unwrap();
        let mean = residuals(&s, &d, &beta).unwrap().mean();
        assert!(m.iter().all(|v| (v - mean).abs() < 1e-12));
        let at = m_hat(&s, &d, &beta, &cache, Some(&DMatrix::from_vec(2, 1, vec![5.0, -3.0]))).unwrap();
        assert!(at.iter().all(|v| (v - mean).abs() < 1e-12));
        // J >= n interpolates
        let s4 = spec(ResidualKind::Npiv, 2, 4);
        let c4 = projection_cache(&s4, &d).unwrap();
        let m4 = m_hat(&s4, &d, &beta, &c4, None).unwrap();
        let rho = residuals(&s4, &d, &beta).unwrap();
        assert!((m4 - rho).amax() < 1e-8);
    }

    #[test]
    fn mhat_is_linear_in_residual() {
        let d = toy_data(30, 2);
        let s = spec(ResidualKind::Npiv, 3, 5);
        let cache = projection_cache(&s, &d).unwrap();
        let r1 = residuals(&s, &d, &DVector::from_vec(vec![0.1, 0.2, 0.3])).unwrap();
        let r2 = residuals(&s, &d, &DVector::from_vec(vec![-1.0, 0.5, 0.0])).unwrap();
        let sum = cache.project(&(&r1 + &r2)).unwrap();
        let parts = cache.project(&r1).unwrap() + cache.project(&r2).unwrap();
        assert!((sum - parts).amax() < 1e-10);
    }

    #[test]
    fn criterion_shortcut_matches_loop() {
        let d = toy_data(25, 3);
        let s = spec(ResidualKind::Npiv, 3, 6);
        let cache = projection_cache(&s, &d).unwrap();
        let beta = DVector::from_vec(vec![0.2, 0.9, -0.4]);
        let c = 0.37;
        let fast = criterion(&s, &d, &beta, &cache, &SigmaHat::constant(c, 25).unwrap()).unwrap();
        let m = m_hat(&s, &d, &beta, &cache, None).unwrap();
        let slow: f64 = m.iter().map(|v| v * v / c).sum::<f64>() / 25.0;
        assert!((fast - slow).abs() < 1e-10 * slow.max(1.0));
        let id = criterion(&s, &d, &beta, &cache, &SigmaHat::constant(1.0, 25).unwrap()).unwrap();
        let m2: f64 = m.iter().map(|v| v * v).sum::<f64>() / 25.0;
        assert!((id - m2).abs() < 1e-12);
        assert!(SigmaHat::constant(0.0, 3).is_err());
    }

    #[test]
    fn criterion_zero_residual() {
        let x = vec![0.1, 0.5, -0.3, 0.9];
        let y2 = x.clone();
        let y1: Vec<f64> = y2.iter().map(|y| 1.0 + 2.0 * y).collect();
        let d = Dataset::from_columns(y1, y2, x).unwrap();
        let s = spec(ResidualKind::Npiv, 2, 2);
        let cache = projection_cache(&s, &d).unwrap();
        let q = criterion(
            &s,
            &d,
            &DVector::from_vec(vec![1.0, 2.0]),
            &cache,
            &SigmaHat::constant(1.0, 4).unwrap(),
        )
        .unwrap();
        assert!(q.abs() < 1e-24);
    }

    #[test]
    fn dmhat_examples() {
        let d = toy_data(12, 4);
        // exogenous: Y2 = X, q = p
        let exo = Dataset::from_columns(d.y1().to_vec(), d.x1().to_vec(), d.x1().to_vec()).unwrap();
        let s = spec(ResidualKind::Npiv, 3, 3);
        let cache = projection_cache(&s, &exo).unwrap();
        let dm = dmhat_matrix(&s, &exo, &DVector::zeros(3), &cache).unwrap();
        let q = structural_design(&s, &exo).unwrap();
        assert!((&dm - &q).amax() < 1e-10);
        // constant basis
        let s1 = spec(ResidualKind::Npiv, 1, 4);
        let c1 = projection_cache(&s1, &d).unwrap();
        let d1 = dmhat_matrix(&s1, &d, &DVector::zeros(1), &c1).unwrap();
        assert!(d1.iter().all(|v| (v - 1.0).abs() < 1e-10));
        // beta-independence
        let s3 = spec(ResidualKind::Npiv, 3, 5);
        let c3 = projection_cache(&s3, &d).unwrap();
        let a = dmhat_matrix(&s3, &d, &DVector::from_vec(vec![1.0, 2.0, 3.0]), &c3).unwrap();
        let b = dmhat_matrix(&s3, &d, &DVector::from_vec(vec![-4.0, 0.0, 9.0]), &c3).unwrap();
        assert_eq!(a, b);
        let sq = spec(ResidualKind::Npqiv { gamma: 0.5 }, 3, 5);
        assert!(matches!(
            dmhat_matrix(&sq, &d, &DVector::zeros(3), &c3),
            Err(Error::NonSmoothResidual)
        ));
    }

    #[test]
    fn numeric_derivative_for_npqiv_is_finite() {
        let d = toy_data(40, 5);
        let mut sq = spec(ResidualKind::Npqiv { gamma: 0.5 }, 3, 5);
        sq.numeric_derivative = true;
        let cache = projection_cache(&sq, &d).unwrap();
        let dm = dmhat_matrix(&sq, &d, &DVector::from_vec(vec![0.0, 1.0, 0.0]), &cache).unwrap();
        assert!(dm.iter().all(|v| v.is_finite()));
        // -dm/dh along the constant direction is minus a density
        assert!(dm.column(0).sum() < 0.0);
    }

    #[test]
    fn sigma0_examples() {
        let d = toy_data(20, 6);
        let sq = spec(ResidualKind::Npqiv { gamma: 0.5 }, 3, 5);
        let cache = projection_cache(&sq, &d).unwrap();
        let s0 = sigma0_series(&sq, &d, &DVector::zeros(3), &cache, None).unwrap();
        assert!(s0.values().iter().all(|&v| v == 0.25));

        let s = spec(ResidualKind::Npiv, 2, 1);
        let c1 = projection_cache(&s, &d).unwrap();
        let beta = DVector::from_vec(vec![0.1, 0.5]);
        let s0 = sigma0_series(&s, &d, &beta, &c1, None).unwrap();
        let u = residuals(&s, &d, &beta).unwrap();
        let m2 = u.map(|v| v * v).mean();
        assert!(s0.values().iter().all(|v| (v - m2).abs() < 1e-12));

        // a high-order fit of a spiky u^2 dips below zero somewhere
        let mut y1 = vec![0.0; 20];
        y1[0] = 10.0;
        let spiky = Dataset::from_columns(y1, d.y2().to_vec(), d.x1().to_vec()).unwrap();
        let s8 = spec(ResidualKind::Npiv, 1, 8);
        let c8 = projection_cache(&s8, &spiky).unwrap();
        let raw = c8
            .project(&residuals(&s8, &spiky, &DVector::zeros(1)).unwrap().map(|v| v * v))
            .unwrap();
        assert!(raw.min() < 0.0);
        let s0 = sigma0_series(&s8, &spiky, &DVector::zeros(1), &c8, Some(0.01)).unwrap();
        assert!(s0.values().iter().all(|&v| v >= 0.01));
        assert!(s0.values().contains(&0.01));

        let zero = Dataset::from_columns(vec![0.0; 20], d.y2().to_vec(), d.x1().to_vec()).unwrap();
        assert!(matches!(
            sigma0_series(&s, &zero, &DVector::zeros(2), &c1, None),
            Err(Error::DegenerateVariance(_))
        ));
    }

    #[test]
    fn tensor_instrument_dimension() {
        let x = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let mut s = spec(ResidualKind::Npiv, 2, 3);
        s.tensor.push(BasisSpec::power_series(2, (-1.0, 1.0)).unwrap());
        assert_eq!(s.j(), 6);
        let p = instrument_design(&s, &x).unwrap();
        // p(x) = (1, x1, x1^2) kron (1, x2)
        assert!((p[(0, 1)] - 0.2).abs() < 1e-15);
        assert!((p[(0, 3)] - 0.2 * 0.1).abs() < 1e-15);
    }
}
