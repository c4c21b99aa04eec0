//! Numerical kernels shared by the estimators: SVD pseudo-inverse,
//! series-LS projection cache and Gauss-Legendre rules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value cutoff used when none is supplied.
pub fn default_rtol(rows: usize, cols: usize) -> f64 {
    1e-12 * rows.max(cols) as f64
}

/// Moore-Penrose inverse via SVD. Singular values `<= rtol * sigma_max`
/// are treated as zero.
pub fn pinv(m: &DMatrix<f64>, rtol: Option<f64>) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return DMatrix::zeros(cols, rows);
    }
    let rtol = rtol.unwrap_or_else(|| default_rtol(rows, cols));
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.max();
    let cut = rtol * smax;
    let mut out = DMatrix::zeros(cols, rows);
    for (j, &s) in svd.singular_values.iter().enumerate() {
        if s <= cut || s == 0.0 {
            continue;
        }
        let vj = v_t.row(j).transpose();
        let uj = u.column(j);
        out += (vj / s) * uj.transpose();
    }
    out
}

/// Numerical rank with the same cutoff rule as [`pinv`].
pub fn rank(m: &DMatrix<f64>, rtol: Option<f64>) -> usize {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return 0;
    }
    let rtol = rtol.unwrap_or_else(|| default_rtol(rows, cols));
    let sv = m.clone().singular_values();
    let cut = rtol * sv.max();
    sv.iter().filter(|&&s| s > cut && s > 0.0).count()
}

/// Instrument design `P` with the generalized inverse of `P'P`.
#[derive(Debug, Clone)]
pub struct ProjectionCache {
    p: DMatrix<f64>,
    ptp_pinv: DMatrix<f64>,
    rank: usize,
}

impl ProjectionCache {
    /// Builds the cache from the `n x J` design. `(P'P)^-` is assembled from
    /// the SVD of `P` itself, which avoids squaring its condition number.
    pub fn new(p: DMatrix<f64>) -> Self {
        let j = p.ncols();
        let rtol = default_rtol(j, j);
        let svd = p.clone().svd(false, true);
        let v_t = svd.v_t.as_ref().expect("v_t requested");
        let smax2 = svd.singular_values.max().powi(2);
        let mut ptp_pinv = DMatrix::zeros(j, j);
        let mut rank = 0;
        for (idx, &s) in svd.singular_values.iter().enumerate() {
            let s2 = s * s;
            if s2 <= rtol * smax2 || s2 == 0.0 {
                continue;
            }
            rank += 1;
            let v = v_t.row(idx).transpose();
            ptp_pinv += (&v / s2) * v.transpose();
        }
        Self { p, ptp_pinv, rank }
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn ptp_pinv(&self) -> &DMatrix<f64> {
        &self.ptp_pinv
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn n(&self) -> usize {
        self.p.nrows()
    }

    pub fn dim(&self) -> usize {
        self.p.ncols()
    }

    fn check_len(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.n() {
            return Err(Error::Dimension {
                what: "projection input",
                expected: self.n(),
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Series-LS coefficients `(P'P)^- P'v`.
    pub fn coefficients(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(v)?;
        Ok(&self.ptp_pinv * (self.p.tr_mul(v)))
    }

    /// Fitted values `P (P'P)^- P'v`.
    pub fn project(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.p * self.coefficients(v)?)
    }

    /// `v'P(P'P)^-P'v`, the squared norm of the projection of `v`.
    pub fn quadform(&self, v: &DVector<f64>) -> Result<f64> {
        self.check_len(v)?;
        let pv = self.p.tr_mul(v);
        Ok(pv.dot(&(&self.ptp_pinv * &pv)).max(0.0))
    }
}

/// Gauss-Legendre nodes and weights on `[a, b]`.
pub fn gauss_legendre(nodes: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(nodes >= 1, "at least one node required");
    let mut x = vec![0.0; nodes];
    let mut w = vec![0.0; nodes];
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    let m = nodes.div_ceil(2);
    let nf = nodes as f64;
    for i in 0..m {
        // Tricomi initial guess, refined by Newton on P_n
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(nodes, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        let (_, d) = legendre(nodes, z);
        dp = if d != 0.0 { d } else { dp };
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = mid - half * z;
        x[nodes - 1 - i] = mid + half * z;
        w[i] = half * wi;
        w[nodes - 1 - i] = half * wi;
    }
    if nodes % 2 == 1 {
        x[nodes / 2] = mid;
    }
    (x, w)
}

/// `(P_n(z), P_n'(z))` by the three-term recurrence.
fn legendre(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// Orthonormal basis (`k x (k-1)`) of the complement of a nonzero vector,
/// taken from the columns of a Householder reflector.
pub fn orthogonal_complement(g: &DVector<f64>) -> DMatrix<f64> {
    let k = g.len();
    let norm = g.norm();
    let mut u = g / norm;
    let sign = if u[0] >= 0.0 { 1.0 } else { -1.0 };
    u[0] += sign;
    let uu = u.dot(&u);
    let mut h = DMatrix::identity(k, k);
    if uu > 0.0 {
        h -= (&u * u.transpose()) * (2.0 / uu);
    }
    h.columns(1, k - 1).into_owned()
}
