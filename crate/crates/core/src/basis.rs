//! Linear sieve bases: power series and truncated-power polynomial splines.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::gauss_legendre;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    /// `1, y, ..., y^(J-1)`.
    PowerSeries,
    /// `1, y, ..., y^r, (y - t_1)_+^r, ..., (y - t_k)_+^r`.
    PolySpline { degree: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec {
    kind: BasisKind,
    dim: usize,
    support: (f64, f64),
    knots: Vec<f64>,
    /// Optional invertible `A` so the basis is `A q(y)`.
    transform: Option<DMatrix<f64>>,
}

impl BasisSpec {
    pub fn power_series(terms: usize, support: (f64, f64)) -> Result<Self> {
        if terms == 0 {
            return Err(Error::Config("power series needs at least one term".into()));
        }
        check_support(support)?;
        Ok(Self {
            kind: BasisKind::PowerSeries,
            dim: terms,
            support,
            knots: Vec::new(),
            transform: None,
        })
    }

    pub fn poly_spline(degree: usize, knots: Vec<f64>, support: (f64, f64)) -> Result<Self> {
        check_support(support)?;
        if knots
            .iter()
            .any(|t| !(t.is_finite() && *t > support.0 && *t < support.1))
        {
            return Err(Error::DegenerateKnots(
                "knots must lie strictly inside the support".into(),
            ));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::DegenerateKnots("knots must be strictly increasing".into()));
        }
        Ok(Self {
            kind: BasisKind::PolySpline { degree },
            dim: degree + 1 + knots.len(),
            support,
            knots,
            transform: None,
        })
    }

    /// The basis `A q(y)` spanning the same sieve space for invertible `A`.
    pub fn transformed(&self, a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != self.dim || a.ncols() != self.dim {
            return Err(Error::Dimension {
                what: "basis transform",
                expected: self.dim,
                got: a.nrows().max(a.ncols()),
            });
        }
        let a = match &self.transform {
            Some(prev) => a * prev,
            None => a,
        };
        Ok(Self {
            transform: Some(a),
            ..self.clone()
        })
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Polynomial degree of the pieces.
    pub fn degree(&self) -> usize {
        match self.kind {
            BasisKind::PowerSeries => self.dim - 1,
            BasisKind::PolySpline { degree } => degree,
        }
    }

    /// Support endpoints with the interior knots in between.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.knots.len() + 2);
        b.push(self.support.0);
        b.extend_from_slice(&self.knots);
        b.push(self.support.1);
        b
    }

    fn check_order(&self, order: usize) -> Result<()> {
        if let BasisKind::PolySpline { degree } = self.kind {
            if order > degree {
                return Err(Error::UnsupportedDerivative { order, degree });
            }
        }
        Ok(())
    }

    /// Writes the `order`-th derivative of every basis function at `y`.
    pub fn eval_into(&self, y: f64, order: usize, out: &mut [f64]) -> Result<()> {
        self.check_order(order)?;
        if out.len() != self.dim {
            return Err(Error::Dimension {
                what: "basis row",
                expected: self.dim,
                got: out.len(),
            });
        }
        let poly_terms = match self.kind {
            BasisKind::PowerSeries => self.dim,
            BasisKind::PolySpline { degree } => degree + 1,
        };
        for (j, o) in out.iter_mut().take(poly_terms).enumerate() {
            *o = monomial_deriv(y, j, order);
        }
        if let BasisKind::PolySpline { degree } = self.kind {
            let coef = falling_factorial(degree, order);
            for (o, &t) in out[poly_terms..].iter_mut().zip(&self.knots) {
                *o = if y > t {
                    coef * (y - t).powi((degree - order) as i32)
                } else {
                    0.0
                };
            }
        }
        if let Some(a) = &self.transform {
            let raw = DVector::from_column_slice(out);
            out.copy_from_slice((a * raw).as_slice());
        }
        Ok(())
    }

    pub fn eval_point(&self, y: f64, order: usize) -> Result<DVector<f64>> {
        let mut row = DVector::zeros(self.dim);
        self.eval_into(y, order, row.as_mut_slice())?;
        Ok(row)
    }

    /// `|points| x dim` matrix of basis derivatives.
    pub fn eval(&self, points: &[f64], order: usize) -> Result<DMatrix<f64>> {
        self.check_order(order)?;
        let mut m = DMatrix::zeros(points.len(), self.dim);
        let mut row = vec![0.0; self.dim];
        for (i, &y) in points.iter().enumerate() {
            self.eval_into(y, order, &mut row)?;
            for (j, v) in row.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        Ok(m)
    }

    /// Value of `h = q' beta` (or its derivative) at `y`.
    pub fn eval_function(&self, beta: &DVector<f64>, y: f64, order: usize) -> Result<f64> {
        if beta.len() != self.dim {
            return Err(Error::Dimension {
                what: "coefficient vector",
                expected: self.dim,
                got: beta.len(),
            });
        }
        Ok(self.eval_point(y, order)?.dot(beta))
    }
}

fn check_support(support: (f64, f64)) -> Result<()> {
    if !(support.0.is_finite() && support.1.is_finite() && support.0 < support.1) {
        return Err(Error::Config(format!("invalid support [{}, {}]", support.0, support.1)));
    }
    Ok(())
}

fn falling_factorial(n: usize, k: usize) -> f64 {
    ((n + 1 - k)..=n).map(|v| v as f64).product()
}

fn monomial_deriv(y: f64, power: usize, order: usize) -> f64 {
    if order > power {
        0.0
    } else {
        falling_factorial(power, order) * y.powi((power - order) as i32)
    }
}

/// Type-7 (linear interpolation) empirical quantile of sorted data.
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn sorted_copy(data: &[f64]) -> Vec<f64> {
    let mut s = data.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    s
}

/// Knots at the empirical `j/(k+1)` quantiles, `j = 1..k`.
pub fn quantile_knots(data: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Config("knot count must be positive".into()));
    }
    let sorted = sorted_copy(data);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < k + 2 {
        return Err(Error::DegenerateKnots(format!(
            "{} knots need at least {} distinct values, found {}",
            k,
            k + 2,
            distinct.len()
        )));
    }
    let knots: Vec<f64> = (1..=k)
        .map(|j| empirical_quantile(&sorted, j as f64 / (k + 1) as f64))
        .collect();
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    if knots.windows(2).any(|w| w[1] <= w[0]) || knots[0] <= lo || knots[k - 1] >= hi {
        return Err(Error::DegenerateKnots(
            "empirical quantiles are tied or sit on the data range".into(),
        ));
    }
    Ok(knots)
}

/// Empirical range of the data widened by `1e-9` on each side.
pub fn empirical_support(data: &[f64]) -> Result<(f64, f64)> {
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Config("empty or non-finite basis data".into()));
    }
    let pad = 1e-9 * (hi - lo).max(1.0);
    Ok((lo - pad, hi + pad))
}

/// Basis description as given on the command line: `pol:J` or `pspline:r:k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisTemplate {
    Pol(usize),
    PSpline { degree: usize, knots: usize },
}

impl BasisTemplate {
    pub fn dim(&self) -> usize {
        match *self {
            BasisTemplate::Pol(j) => j,
            BasisTemplate::PSpline { degree, knots } => degree + 1 + knots,
        }
    }

    /// Instantiates the basis on the empirical support of `data`, placing
    /// spline knots at its quantiles.
    pub fn build(&self, data: &[f64]) -> Result<BasisSpec> {
        let support = empirical_support(data)?;
        match *self {
            BasisTemplate::Pol(j) => BasisSpec::power_series(j, support),
            BasisTemplate::PSpline { degree, knots } => {
                BasisSpec::poly_spline(degree, quantile_knots(data, knots)?, support)
            }
        }
    }
}

impl FromStr for BasisTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad basis `{s}`, expected pol:J or pspline:r:k"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
        match parts.as_slice() {
            ["pol", j] => {
                let j = num(j)?;
                if j == 0 {
                    return Err(bad());
                }
                Ok(BasisTemplate::Pol(j))
            }
            ["pspline", r, k] => Ok(BasisTemplate::PSpline {
                degree: num(r)?,
                knots: num(k)?,
            }),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for BasisTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BasisTemplate::Pol(j) => write!(f, "Pol({j})"),
            BasisTemplate::PSpline { degree, knots } => write!(f, "P-Spline({degree},{knots})"),
        }
    }
}

/// `R = int q q' + int q' q''` over the support, the Gram matrix of
/// `Pen(h) = ||h||^2 + ||h'||^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyGram {
    pub r: DMatrix<f64>,
}

impl PenaltyGram {
    /// `beta' R beta`.
    pub fn value(&self, beta: &DVector<f64>) -> f64 {
        beta.dot(&(&self.r * beta))
    }
}

pub fn penalty_gram(spec: &BasisSpec, quad_nodes: usize) -> Result<PenaltyGram> {
    let k = spec.dim();
    if quad_nodes < k {
        return Err(Error::Config(format!(
            "penalty quadrature needs at least {k} nodes, got {quad_nodes}"
        )));
    }
    let mut r = DMatrix::zeros(k, k);
    let mut q0 = DVector::zeros(k);
    let mut q1 = DVector::zeros(k);
    for piece in spec.breakpoints().windows(2) {
        let (xs, ws) = gauss_legendre(quad_nodes, piece[0], piece[1]);
        for (&y, &w) in xs.iter().zip(&ws) {
            spec.eval_into(y, 0, q0.as_mut_slice())?;
            spec.eval_into(y, 1, q1.as_mut_slice())?;
            r.ger(w, &q0, &q0, 1.0);
            r.ger(w, &q1, &q1, 1.0);
        }
    }
    // exact symmetry
    let r = (&r + r.transpose()) * 0.5;
    Ok(PenaltyGram { r })
}
