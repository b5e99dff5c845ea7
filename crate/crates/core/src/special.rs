//! Special functions: Gamma, a portable natural logarithm, and the inverse
//! standard normal CDF.
//!
//! The inverse CDF and `portable_ln` are the only transcendental pieces in
//! the Gaussian sampling path, and both are evaluated from fixed polynomial
//! or series coefficients using IEEE-exact arithmetic (+, -, *, /, sqrt), so
//! sampled noise is bit-identical across platforms and math libraries.

use crate::error::{Error, Result};

/// Lanczos approximation (g = 7, 9 coefficients) with reflection for x < 0.5.
/// Relative error below 1e-13 on (0, 50].
const LANCZOS_G: f64 = 7.0;
const LANCZOS_P: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

pub fn gamma_fn(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("gamma_fn requires x > 0, got {x}")));
    }
    Ok(gamma_unchecked(x))
}

fn gamma_unchecked(x: f64) -> f64 {
    if x < 0.5 {
        // reflection: Gamma(x) Gamma(1-x) = pi / sin(pi x)
        return std::f64::consts::PI
            / ((std::f64::consts::PI * x).sin() * gamma_unchecked(1.0 - x));
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_P[0];
    for (i, p) in LANCZOS_P.iter().enumerate().skip(1) {
        acc += p / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    (2.0 * std::f64::consts::PI).sqrt() * t.powf(x + 0.5) * (-t).exp() * acc
}

/// Natural logarithm built from exponent extraction plus an atanh series.
/// Uses only +, -, *, / and bit manipulation, so results are identical on
/// every IEEE-754 platform. Accurate to a few ulp, which is far below the
/// resolution the normal quantile tails need.
pub fn portable_ln(x: f64) -> f64 {
    assert!(x > 0.0 && x.is_finite(), "portable_ln domain: {x}");
    let bits = x.to_bits();
    let mut exp = ((bits >> 52) & 0x7ff) as i64 - 1023;
    let mut mantissa = f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | 0x3ff0_0000_0000_0000);
    if exp == -1023 {
        // subnormal: renormalise
        let scaled = x * f64::from_bits(0x4330_0000_0000_0000); // 2^52
        let sb = scaled.to_bits();
        exp = ((sb >> 52) & 0x7ff) as i64 - 1023 - 52;
        mantissa = f64::from_bits((sb & 0x000f_ffff_ffff_ffff) | 0x3ff0_0000_0000_0000);
    }
    // move mantissa into [sqrt(1/2), sqrt(2)) so the series argument is small
    if mantissa > std::f64::consts::SQRT_2 {
        mantissa *= 0.5;
        exp += 1;
    }
    let t = (mantissa - 1.0) / (mantissa + 1.0);
    let t2 = t * t;
    // ln(m) = 2 atanh(t); |t| < 0.1716 so 13 terms reach full precision
    let mut term = t;
    let mut sum = t;
    for k in 1..=13 {
        term *= t2;
        sum += term / (2 * k + 1) as f64;
    }
    2.0 * sum + exp as f64 * std::f64::consts::LN_2
}

// Wichura's AS 241 PPND16 rational approximations.
const PPND_A: [f64; 8] = [
    3.387_132_872_796_366_608e0,
    1.331_416_678_917_843_774_5e2,
    1.971_590_950_306_551_442_7e3,
    1.373_169_376_550_946_112_5e4,
    4.592_195_393_154_987_145_7e4,
    6.726_577_092_700_870_085_3e4,
    3.343_057_558_358_812_810_5e4,
    2.509_080_928_730_122_672_7e3,
];
const PPND_B: [f64; 8] = [
    1.0,
    4.231_333_070_160_091_125_2e1,
    6.871_870_074_920_579_083e2,
    5.394_196_021_424_751_107_7e3,
    2.121_379_430_158_659_586_7e4,
    3.930_789_580_009_271_061e4,
    2.872_908_573_572_194_267_4e4,
    5.226_495_278_852_854_561e3,
];
const PPND_C: [f64; 8] = [
    1.423_437_110_749_683_577_34e0,
    4.630_337_846_156_545_295_9e0,
    5.769_497_221_460_691_405_5e0,
    3.647_848_324_763_204_605_04e0,
    1.270_458_252_452_368_382_58e0,
    2.417_807_251_774_506_117_7e-1,
    2.272_384_498_926_918_458_33e-2,
    7.745_450_142_783_414_076_4e-4,
];
const PPND_D: [f64; 8] = [
    1.0,
    2.053_191_626_637_758_821_87e0,
    1.676_384_830_183_803_849_4e0,
    6.897_673_349_851_000_045_5e-1,
    1.481_039_764_274_800_745_9e-1,
    1.519_866_656_361_645_719_66e-2,
    5.475_938_084_995_344_946e-4,
    1.050_750_071_644_416_843_24e-9,
];
const PPND_E: [f64; 8] = [
    6.657_904_643_501_103_777_2e0,
    5.463_784_911_164_114_369_9e0,
    1.784_826_539_917_291_335_8e0,
    2.965_605_718_285_048_912_3e-1,
    2.653_218_952_657_612_309_3e-2,
    1.242_660_947_388_078_438_6e-3,
    2.711_555_568_743_487_578_15e-5,
    2.010_334_399_292_288_132_65e-7,
];
const PPND_F: [f64; 8] = [
    1.0,
    5.998_322_065_558_879_376_9e-1,
    1.369_298_809_227_358_053_1e-1,
    1.487_536_129_085_061_485_25e-2,
    7.868_691_311_456_132_591e-4,
    1.846_318_317_510_054_681_8e-5,
    1.421_511_758_316_445_888_7e-7,
    2.044_263_103_389_939_785_64e-15,
];

fn poly(coef: &[f64; 8], x: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// Inverse of the standard normal CDF (AS 241, PPND16): relative error
/// around 1e-15 over (0, 1). Panics outside (0, 1).
pub fn inv_std_normal_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "inv_std_normal_cdf domain: {p}");
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&PPND_A, r) / poly(&PPND_B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-portable_ln(r)).sqrt();
    let value = if r <= 5.0 {
        let r = r - 1.6;
        poly(&PPND_C, r) / poly(&PPND_D, r)
    } else {
        let r = r - 5.0;
        poly(&PPND_E, r) / poly(&PPND_F, r)
    };
    if q < 0.0 {
        -value
    } else {
        value
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gamma_identity_and_factorial() {
        assert_relative_eq!(gamma_fn(1.0).unwrap(), 1.0, max_relative = 1e-12);
        assert_relative_eq!(gamma_fn(5.0).unwrap(), 24.0, max_relative = 1e-12);
    }

    #[test]
    fn gamma_half() {
        assert_relative_eq!(
            gamma_fn(0.5).unwrap(),
            std::f64::consts::PI.sqrt(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn gamma_against_high_precision_values() {
        // golden values computed once with 40-digit arithmetic
        let golden = [
            (0.125, 7.533941598797611904699),
            (1.0 / 6.0, 5.566316001780235439228),
            (1.5, 0.8862269254527580136491),
            (7.7, 2769.830362327313660274),
            (12.3, 83385367.8999698547129),
            (24.0, 2.585201673888497664e22),
            (33.3, 7.487577596522706607992e35),
            (50.0, 6.082818640342675608723e62),
        ];
        for (x, want) in golden {
            let got = gamma_fn(x).unwrap();
            assert_relative_eq!(got, want, max_relative = 1e-10);
        }
    }

    #[test]
    fn gamma_rejects_nonpositive() {
        assert!(gamma_fn(0.0).is_err());
        assert!(gamma_fn(-1.5).is_err());
        assert!(gamma_fn(f64::NAN).is_err());
    }

    #[test]
    fn portable_ln_matches_std() {
        let xs = [
            1e-308,
            2.3e-12,
            0.001,
            0.3,
            0.9999999,
            1.0,
            1.0000001,
            2.0,
            std::f64::consts::E,
            10.0,
            12345.678,
            1e20,
            8.7e307,
        ];
        for &x in &xs {
            let err = (portable_ln(x) - x.ln()).abs();
            let scale = x.ln().abs().max(1.0);
            assert!(err <= 4.0 * f64::EPSILON * scale, "x={x}: err={err}");
        }
        assert_eq!(portable_ln(1.0), 0.0);
    }

    #[test]
    fn inv_cdf_symmetry_and_known_points() {
        assert_eq!(inv_std_normal_cdf(0.5), 0.0);
        assert_relative_eq!(
            inv_std_normal_cdf(0.975),
            1.959963984540054,
            max_relative = 1e-12
        );
        // 1 - p is itself rounded, which costs ~ulp(1)/phi(z) in the tail;
        // the tolerance reflects that, not the accuracy of the quantile.
        for &p in &[1e-12, 1e-6, 0.01, 0.2, 0.4999, 0.73, 0.999, 1.0 - 1e-9] {
            let a = inv_std_normal_cdf(p);
            let b = inv_std_normal_cdf(1.0 - p);
            assert_relative_eq!(a, -b, max_relative = 1e-6, epsilon = 1e-4);
        }
    }

    #[test]
    fn inv_cdf_round_trips_through_reference_cdf() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut p = 1e-10;
        while p < 1.0 {
            let z = inv_std_normal_cdf(p);
            let back = normal.cdf(z);
            assert!(
                (back - p).abs() <= 1e-12 + 1e-9 * p,
                "p={p} z={z} back={back}"
            );
            p = if p < 0.001 { p * 3.7 } else { p + 0.000837 };
        }
    }
}
