//! Scalar functionals of the structural function with sieve gradients.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::basis::{empirical_quantile, BasisSpec};
use crate::error::{Error, Result};
use crate::linalg::gauss_legendre;

/// Weight function `w(y)` for integral functionals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightFn {
    /// `1{lo <= y <= hi}`.
    Indicator { lo: f64, hi: f64 },
    /// `sd^-1 exp(-((y - mean)/sd)^2 / 2) 1{lo <= y <= hi}`.
    Gaussian { mean: f64, sd: f64, lo: f64, hi: f64 },
}

impl WeightFn {
    pub fn eval(&self, y: f64) -> f64 {
        let (lo, hi) = self.range();
        if y < lo || y > hi {
            return 0.0;
        }
        match *self {
            WeightFn::Indicator { .. } => 1.0,
            WeightFn::Gaussian { mean, sd, .. } => (-0.5 * ((y - mean) / sd).powi(2)).exp() / sd,
        }
    }

    pub fn range(&self) -> (f64, f64) {
        match *self {
            WeightFn::Indicator { lo, hi } | WeightFn::Gaussian { lo, hi, .. } => (lo, hi),
        }
    }

    /// Gaussian weight with the sample mean and standard deviation of
    /// `data`, truncated to its `lo_q` and `hi_q` quantiles.
    pub fn gaussian_from_data(data: &[f64], lo_q: f64, hi_q: f64) -> Self {
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let sd = (data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
        let sorted = sorted(data);
        WeightFn::Gaussian {
            mean,
            sd,
            lo: empirical_quantile(&sorted, lo_q),
            hi: empirical_quantile(&sorted, hi_q),
        }
    }

    /// Indicator between two sample quantiles of `data`.
    pub fn indicator_from_data(data: &[f64], lo_q: f64, hi_q: f64) -> Self {
        let sorted = sorted(data);
        WeightFn::Indicator {
            lo: empirical_quantile(&sorted, lo_q),
            hi: empirical_quantile(&sorted, hi_q),
        }
    }
}

fn sorted(data: &[f64]) -> Vec<f64> {
    let mut s = data.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FunctionalKind {
    /// `h(y)`.
    PointEval(f64),
    /// `int w h'`.
    WeightedDeriv(WeightFn),
    /// `(1/2) int w h^2`.
    Quadratic(WeightFn),
    /// `exp(h(y))`.
    ExpPointEval(f64),
    /// `int w (h'')^2`.
    CurvatureQuadratic(WeightFn),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Functional {
    pub kind: FunctionalKind,
    /// Gauss-Legendre nodes per integration piece.
    pub quad_nodes: usize,
}

impl Functional {
    pub fn new(kind: FunctionalKind) -> Self {
        Self { kind, quad_nodes: 64 }
    }

    pub fn point_eval(y: f64) -> Self {
        Self::new(FunctionalKind::PointEval(y))
    }

    pub fn exp_point_eval(y: f64) -> Self {
        Self::new(FunctionalKind::ExpPointEval(y))
    }

    /// Linear functionals have `phi(beta) = g' beta` with fixed `g`.
    pub fn is_linear(&self) -> bool {
        matches!(
            self.kind,
            FunctionalKind::PointEval(_) | FunctionalKind::WeightedDeriv(_)
        )
    }

    fn check(&self, basis: &BasisSpec, beta: &DVector<f64>) -> Result<()> {
        if beta.len() != basis.dim() {
            return Err(Error::Dimension {
                what: "functional coefficients",
                expected: basis.dim(),
                got: beta.len(),
            });
        }
        Ok(())
    }

    /// Quadrature nodes and weights (weight function folded in) over the
    /// part of the support where `w` is positive, split at the knots.
    fn weighted_nodes(&self, basis: &BasisSpec, w: &WeightFn) -> Vec<(f64, f64)> {
        let (a, b) = basis.support();
        let (lo, hi) = w.range();
        let (lo, hi) = (lo.max(a), hi.min(b));
        if lo >= hi {
            return Vec::new();
        }
        let mut cuts = vec![lo];
        cuts.extend(basis.knots().iter().copied().filter(|&t| t > lo && t < hi));
        cuts.push(hi);
        let mut out = Vec::new();
        for piece in cuts.windows(2) {
            let (xs, ws) = gauss_legendre(self.quad_nodes, piece[0], piece[1]);
            out.extend(xs.into_iter().zip(ws).map(|(x, q)| (x, q * w.eval(x))));
        }
        out
    }

    /// `int w d^order q` as a vector.
    fn weighted_integral(&self, basis: &BasisSpec, w: &WeightFn, order: usize) -> Result<DVector<f64>> {
        let mut g = DVector::zeros(basis.dim());
        let mut row = DVector::zeros(basis.dim());
        for (y, wt) in self.weighted_nodes(basis, w) {
            basis.eval_into(y, order, row.as_mut_slice())?;
            g.axpy(wt, &row, 1.0);
        }
        Ok(g)
    }

    /// `int w (d^order q)(d^order q)'`.
    fn weighted_gram(&self, basis: &BasisSpec, w: &WeightFn, order: usize) -> Result<DMatrix<f64>> {
        let k = basis.dim();
        let mut m = DMatrix::zeros(k, k);
        let mut row = DVector::zeros(k);
        for (y, wt) in self.weighted_nodes(basis, w) {
            basis.eval_into(y, order, row.as_mut_slice())?;
            m.ger(wt, &row, &row, 1.0);
        }
        Ok(m)
    }

    pub fn value(&self, basis: &BasisSpec, beta: &DVector<f64>) -> Result<f64> {
        self.check(basis, beta)?;
        Ok(match &self.kind {
            FunctionalKind::PointEval(y) => basis.eval_point(*y, 0)?.dot(beta),
            FunctionalKind::ExpPointEval(y) => basis.eval_point(*y, 0)?.dot(beta).exp(),
            FunctionalKind::WeightedDeriv(w) => self.weighted_integral(basis, w, 1)?.dot(beta),
            FunctionalKind::Quadratic(w) => 0.5 * beta.dot(&(self.weighted_gram(basis, w, 0)? * beta)),
            FunctionalKind::CurvatureQuadratic(w) => beta.dot(&(self.weighted_gram(basis, w, 2)? * beta)),
        })
    }

    /// `d phi / d beta`, the functional's derivative in the sieve directions.
    pub fn gradient(&self, basis: &BasisSpec, beta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(basis, beta)?;
        Ok(match &self.kind {
            FunctionalKind::PointEval(y) => basis.eval_point(*y, 0)?,
            FunctionalKind::ExpPointEval(y) => {
                let q = basis.eval_point(*y, 0)?;
                let h = q.dot(beta);
                q * h.exp()
            }
            FunctionalKind::WeightedDeriv(w) => self.weighted_integral(basis, w, 1)?,
            FunctionalKind::Quadratic(w) => self.weighted_gram(basis, w, 0)? * beta,
            FunctionalKind::CurvatureQuadratic(w) => self.weighted_gram(basis, w, 2)? * beta * 2.0,
        })
    }
}

/// Weight choice before it is placed on data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightTemplate {
    /// Gaussian at the sample moments of `Y2`, truncated at its 1%/99% quantiles.
    Gauss,
    /// Indicator between two sample quantiles of `Y2`.
    Quantiles(f64, f64),
    /// Indicator of a fixed interval.
    Interval(f64, f64),
}

impl WeightTemplate {
    fn resolve(&self, y2: &[f64]) -> WeightFn {
        match *self {
            WeightTemplate::Gauss => WeightFn::gaussian_from_data(y2, 0.01, 0.99),
            WeightTemplate::Quantiles(a, b) => WeightFn::indicator_from_data(y2, a, b),
            WeightTemplate::Interval(lo, hi) => WeightFn::Indicator { lo, hi },
        }
    }
}

/// Functional as written on the command line: `eval:Y`, `expeval:Y`,
/// `wderiv`, `quad`, `curv`, the last three optionally followed by
/// `:gauss`, `:ind:QLO:QHI` or `:interval:LO:HI`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FunctionalTemplate {
    PointEval(f64),
    ExpPointEval(f64),
    WeightedDeriv(WeightTemplate),
    Quadratic(WeightTemplate),
    CurvatureQuadratic(WeightTemplate),
}

impl FunctionalTemplate {
    /// Resolves data-dependent weights from the endogenous regressor.
    pub fn resolve(&self, y2: &[f64]) -> Functional {
        Functional::new(match *self {
            FunctionalTemplate::PointEval(y) => FunctionalKind::PointEval(y),
            FunctionalTemplate::ExpPointEval(y) => FunctionalKind::ExpPointEval(y),
            FunctionalTemplate::WeightedDeriv(w) => FunctionalKind::WeightedDeriv(w.resolve(y2)),
            FunctionalTemplate::Quadratic(w) => FunctionalKind::Quadratic(w.resolve(y2)),
            FunctionalTemplate::CurvatureQuadratic(w) => FunctionalKind::CurvatureQuadratic(w.resolve(y2)),
        })
    }
}

impl FromStr for FunctionalTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad functional `{s}`"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |p: &str| p.parse::<f64>().map_err(|_| bad());
        let weight = |rest: &[&str]| -> Result<WeightTemplate> {
            match rest {
                [] | ["gauss"] => Ok(WeightTemplate::Gauss),
                ["ind", a, b] => Ok(WeightTemplate::Quantiles(num(a)?, num(b)?)),
                ["interval", a, b] => Ok(WeightTemplate::Interval(num(a)?, num(b)?)),
                _ => Err(bad()),
            }
        };
        match parts.as_slice() {
            ["eval", y] => Ok(FunctionalTemplate::PointEval(num(y)?)),
            ["expeval", y] => Ok(FunctionalTemplate::ExpPointEval(num(y)?)),
            ["wderiv", rest @ ..] => Ok(FunctionalTemplate::WeightedDeriv(weight(rest)?)),
            ["quad", rest @ ..] => Ok(FunctionalTemplate::Quadratic(weight(rest)?)),
            ["curv", rest @ ..] => Ok(FunctionalTemplate::CurvatureQuadratic(weight(rest)?)),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for FunctionalTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FunctionalTemplate::PointEval(y) => write!(f, "eval:{y}"),
            FunctionalTemplate::ExpPointEval(y) => write!(f, "expeval:{y}"),
            FunctionalTemplate::WeightedDeriv(_) => write!(f, "wderiv"),
            FunctionalTemplate::Quadratic(_) => write!(f, "quad"),
            FunctionalTemplate::CurvatureQuadratic(_) => write!(f, "curv"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisTemplate;
    use proptest::prelude::*;

    fn unit_weight() -> WeightFn {
        WeightFn::Indicator { lo: -1.0, hi: 1.0 }
    }

    #[test]
    fn value_examples() {
        let b3 = BasisSpec::power_series(3, (-1.0, 1.0)).unwrap();
        let beta = DVector::from_vec(vec![1.5, -2.0, 0.7]);
        assert_eq!(Functional::point_eval(0.0).value(&b3, &beta).unwrap(), 1.5);
        assert_eq!(
            Functional::exp_point_eval(0.0).value(&b3, &DVector::zeros(3)).unwrap(),
            1.0
        );
        let b2 = BasisSpec::power_series(2, (-1.0, 1.0)).unwrap();
        let quad = Functional::new(FunctionalKind::Quadratic(unit_weight()));
        let v = quad.value(&b2, &DVector::from_vec(vec![0.0, 1.0])).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-14);
        assert!(Functional::point_eval(0.0).value(&b2, &beta).is_err());
    }

    #[test]
    fn gradient_examples() {
        let b3 = BasisSpec::power_series(3, (-1.0, 1.0)).unwrap();
        for beta in [DVector::zeros(3), DVector::from_vec(vec![3.0, 1.0, -1.0])] {
            let g = Functional::point_eval(0.5).gradient(&b3, &beta).unwrap();
            assert_eq!(g.as_slice(), &[1.0, 0.5, 0.25]);
        }
        let b2 = BasisSpec::power_series(2, (-1.0, 1.0)).unwrap();
        let g = Functional::exp_point_eval(0.0)
            .gradient(&b2, &DVector::zeros(2))
            .unwrap();
        assert_eq!(g.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn curvature_needs_second_derivative() {
        let lin = BasisSpec::poly_spline(1, vec![0.0], (-1.0, 1.0)).unwrap();
        let f = Functional::new(FunctionalKind::CurvatureQuadratic(unit_weight()));
        assert!(matches!(
            f.value(&lin, &DVector::zeros(3)),
            Err(Error::UnsupportedDerivative { .. })
        ));
    }

    #[test]
    fn curvature_of_linear_function_is_zero() {
        let b = BasisSpec::power_series(4, (-1.0, 1.0)).unwrap();
        let f = Functional::new(FunctionalKind::CurvatureQuadratic(unit_weight()));
        assert_eq!(f.value(&b, &DVector::from_vec(vec![1.0, -3.0, 0.0, 0.0])).unwrap(), 0.0);
        // h = y^2: h'' = 2, int_{-1}^{1} 4 = 8
        let v = f.value(&b, &DVector::from_vec(vec![0.0, 0.0, 1.0, 0.0])).unwrap();
        assert!((v - 8.0).abs() < 1e-12);
    }

    #[test]
    fn parse_templates() {
        assert_eq!(
            "eval:0".parse::<FunctionalTemplate>().unwrap(),
            FunctionalTemplate::PointEval(0.0)
        );
        assert_eq!(
            "curv".parse::<FunctionalTemplate>().unwrap(),
            FunctionalTemplate::CurvatureQuadratic(WeightTemplate::Gauss)
        );
        assert_eq!(
            "quad:ind:0.25:0.75".parse::<FunctionalTemplate>().unwrap(),
            FunctionalTemplate::Quadratic(WeightTemplate::Quantiles(0.25, 0.75))
        );
        assert!("eval".parse::<FunctionalTemplate>().is_err());
        assert!("median".parse::<FunctionalTemplate>().is_err());
    }

    #[test]
    fn gaussian_weight_from_data() {
        let data: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let w = WeightFn::gaussian_from_data(&data, 0.01, 0.99);
        let (lo, hi) = w.range();
        assert!((lo - 0.01).abs() < 1e-12 && (hi - 0.99).abs() < 1e-12);
        assert_eq!(w.eval(0.0), 0.0);
        assert!(w.eval(0.5) > w.eval(0.9));
    }

    fn all_kinds() -> Vec<Functional> {
        let gw = WeightFn::Gaussian {
            mean: 0.1,
            sd: 0.5,
            lo: -0.8,
            hi: 0.9,
        };
        vec![
            Functional::point_eval(0.2),
            Functional::exp_point_eval(-0.1),
            Functional::new(FunctionalKind::WeightedDeriv(gw)),
            Functional::new(FunctionalKind::Quadratic(gw)),
            Functional::new(FunctionalKind::CurvatureQuadratic(gw)),
        ]
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_difference(beta in proptest::collection::vec(-1.0f64..1.0, 7)) {
            let data: Vec<f64> = (0..60).map(|i| (i as f64 * 0.29).sin()).collect();
            let bases = [
                BasisTemplate::Pol(7).build(&data).unwrap(),
                BasisTemplate::PSpline { degree: 3, knots: 3 }.build(&data).unwrap(),
            ];
            let beta = DVector::from_vec(beta);
            for basis in &bases {
                for f in all_kinds() {
                    let g = f.gradient(basis, &beta).unwrap();
                    for j in 0..beta.len() {
                        let h = 1e-6;
                        let mut up = beta.clone();
                        up[j] += h;
                        let mut dn = beta.clone();
                        dn[j] -= h;
                        let fd = (f.value(basis, &up).unwrap() - f.value(basis, &dn).unwrap()) / (2.0 * h);
                        let scale = g.amax().max(1e-3);
                        prop_assert!((fd - g[j]).abs() <= 1e-6 * scale, "{:?} j={} fd={} g={}", f.kind, j, fd, g[j]);
                    }
                }
            }
        }

        #[test]
        fn linear_gradients_ignore_beta(a in proptest::collection::vec(-3.0f64..3.0, 4), b in proptest::collection::vec(-3.0f64..3.0, 4)) {
            let basis = BasisSpec::power_series(4, (-1.0, 1.0)).unwrap();
            for f in all_kinds().into_iter().filter(|f| f.is_linear()) {
                let ga = f.gradient(&basis, &DVector::from_vec(a.clone())).unwrap();
                let gb = f.gradient(&basis, &DVector::from_vec(b.clone())).unwrap();
                prop_assert_eq!(ga, gb);
            }
        }
    }
}
