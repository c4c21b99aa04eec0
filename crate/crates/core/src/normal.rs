//! Standard normal and chi-square(1) distribution functions.
//!
//! The CDF uses the Hart rational approximation (double-precision variant),
//! accurate to roughly 1e-14 absolute. The quantile uses Acklam's rational
//! approximation followed by one Halley refinement step.

const SQRT_2PI: f64 = 2.506_628_274_631_000_7;

/// Standard normal CDF.
pub fn cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let z = x.abs();
    let tail = if z > 37.0 {
        0.0
    } else {
        let e = (-0.5 * z * z).exp();
        if z < 7.071_067_811_865_47 {
            let mut num = 3.526_249_659_989_11e-2 * z + 0.700_383_064_443_688;
            num = num * z + 6.373_962_203_531_65;
            num = num * z + 33.912_866_078_383;
            num = num * z + 112.079_291_497_871;
            num = num * z + 221.213_596_169_931;
            num = num * z + 220.206_867_912_376;
            let mut den = 8.838_834_764_831_84e-2 * z + 1.755_667_163_182_64;
            den = den * z + 16.064_177_579_207;
            den = den * z + 86.780_732_202_946_1;
            den = den * z + 296.564_248_779_674;
            den = den * z + 637.333_633_378_831;
            den = den * z + 793.826_512_519_948;
            den = den * z + 440.413_735_824_752;
            e * num / den
        } else {
            let mut b = z + 0.65;
            b = z + 4.0 / b;
            b = z + 3.0 / b;
            b = z + 2.0 / b;
            b = z + 1.0 / b;
            e / b / SQRT_2PI
        }
    };
    if x > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Upper tail `1 - cdf(x)` without cancellation for large positive `x`.
pub fn sf(x: f64) -> f64 {
    cdf(-x)
}

pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Standard normal quantile function. Returns ±inf at the endpoints.
pub fn quantile(p: f64) -> f64 {
    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    // Halley step
    let e = if p < 0.5 { cdf(x) - p } else { (1.0 - p) - sf(x) };
    let u = e * SQRT_2PI * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// Two-sided p-value of a standard normal statistic.
pub fn two_sided_pvalue(stat: f64) -> f64 {
    (2.0 * sf(stat.abs())).clamp(0.0, 1.0)
}

/// Upper-tail probability of a chi-square(1) variate.
pub fn chi2_1_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    (2.0 * sf(x.sqrt())).clamp(0.0, 1.0)
}

/// `level`-quantile of chi-square(1), e.g. 3.8415 for 0.95.
pub fn chi2_1_quantile(level: f64) -> f64 {
    let z = quantile(0.5 + 0.5 * level);
    z * z
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    #[test]
    fn cdf_matches_reference() {
        let n = Normal::new(0.0, 1.0).unwrap();
        for i in -400..=400 {
            let x = i as f64 * 0.02;
            assert!((cdf(x) - n.cdf(x)).abs() < 1e-9, "x={x}");
        }
        assert!((cdf(-9.0) - n.cdf(-9.0)).abs() < 1e-20);
        // erfc-based values
        assert!((cdf(-2.0) - 0.022_750_131_948_179_2).abs() < 1e-16);
        assert!((cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
    }

    #[test]
    fn quantile_inverts_cdf() {
        let n = Normal::new(0.0, 1.0).unwrap();
        for p in [1e-10, 1e-4, 0.01, 0.025, 0.3, 0.5, 0.77, 0.975, 0.999, 1.0 - 1e-9] {
            assert!((quantile(p) - n.inverse_cdf(p)).abs() < 1e-9, "p={p}");
        }
        assert_eq!(quantile(0.5), 0.0);
    }

    #[test]
    fn pvalue_at_196() {
        assert!((two_sided_pvalue(1.96) - 0.05).abs() < 1e-3);
        assert_eq!(two_sided_pvalue(0.0), 1.0);
        assert_eq!(two_sided_pvalue(-1.3), two_sided_pvalue(1.3));
    }

    #[test]
    fn chi2_critical_value() {
        assert!((chi2_1_quantile(0.95) - 3.841_458_820_694_124).abs() < 1e-9);
        assert!((chi2_1_sf(3.841_458_820_694_124) - 0.05).abs() < 1e-12);
    }
}
