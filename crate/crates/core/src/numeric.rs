//! Scalar numerics: standard Normal functions, probability clipping,
//! truncated-Normal sampling, and small statistical helpers.

// The rational-approximation constants below carry their published digit
// counts.
#![allow(clippy::excessive_precision)]

use rand::Rng;

/// Probabilities are clipped into `[PROB_CLIP, 1 - PROB_CLIP]` before any
/// division (weighting estimators divide by propensity and principal scores).
pub const PROB_CLIP: f64 = 1e-12;

/// Relative singular-value cutoff for numerical rank decisions.
pub const RANK_TOL: f64 = 1e-8;

pub fn clip_prob(p: f64) -> f64 {
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

/// Standard Normal CDF. Accurate to well below 1e-12 absolute error over the
/// whole line; saturates to exactly 0/1 in the far tails.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / core::f64::consts::SQRT_2)
}

/// Standard Normal upper tail P(Z > x), accurate for large positive x where
/// `1 - cdf(x)` would cancel.
pub fn std_normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / core::f64::consts::SQRT_2)
}

/// Standard Normal density.
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * core::f64::consts::PI).sqrt()
}

/// Standard Normal quantile, Wichura's PPND16 rational approximations
/// (Algorithm AS 241). Relative error is near machine precision over the
/// full open interval; p outside (0,1) saturates to signed infinity.
pub fn std_normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&PPND16_A, r) / poly(&PPND16_B, r);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        poly(&PPND16_C, r) / poly(&PPND16_D, r)
    } else {
        let r = r - 5.0;
        poly(&PPND16_E, r) / poly(&PPND16_F, r)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

fn poly(coef: &[f64], x: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

const PPND16_A: [f64; 8] = [
    3.387_132_872_796_366_608e0,
    1.331_416_678_917_843_774_5e2,
    1.971_590_950_306_551_442_7e3,
    1.373_169_376_550_946_112_5e4,
    4.592_195_393_154_987_145_7e4,
    6.726_577_092_700_870_085_3e4,
    3.343_057_558_358_812_810_5e4,
    2.509_080_928_730_122_672_7e3,
];
const PPND16_B: [f64; 8] = [
    1.0,
    4.231_333_070_160_091_125_2e1,
    6.871_870_074_920_579_083e2,
    5.394_196_021_424_751_107_7e3,
    2.121_379_430_158_659_586_7e4,
    3.930_789_580_009_271_061e4,
    2.872_908_573_572_194_267_4e4,
    5.226_495_278_852_854_561e3,
];
const PPND16_C: [f64; 8] = [
    1.423_437_110_749_683_577_34e0,
    4.630_337_846_156_545_295_9e0,
    5.769_497_221_460_691_405_5e0,
    3.647_848_324_763_204_605_04e0,
    1.270_458_252_452_368_382_58e0,
    2.417_807_251_774_506_117_7e-1,
    2.272_384_498_926_918_458_33e-2,
    7.745_450_142_783_414_076_4e-4,
];
const PPND16_D: [f64; 8] = [
    1.0,
    2.053_191_626_637_758_821_87e0,
    1.676_384_830_183_803_849_4e0,
    6.897_673_349_851_000_045_5e-1,
    1.481_039_764_274_800_745_9e-1,
    1.519_866_656_361_645_719_66e-2,
    5.475_938_084_995_344_946e-4,
    1.050_750_071_644_416_843_24e-9,
];
const PPND16_E: [f64; 8] = [
    6.657_904_643_501_103_777_2e0,
    5.463_784_911_164_114_369_9e0,
    1.784_826_539_917_291_335_8e0,
    2.965_605_718_285_048_912_3e-1,
    2.653_218_952_657_612_309_3e-2,
    1.242_660_947_388_078_438_6e-3,
    2.711_555_568_743_487_578_15e-5,
    2.010_334_399_292_288_132_65e-7,
];
const PPND16_F: [f64; 8] = [
    1.0,
    5.998_322_065_558_879_376_9e-1,
    1.369_298_809_227_358_053_1e-1,
    1.487_536_129_085_061_485_25e-2,
    7.868_691_311_456_132_591e-4,
    1.846_318_317_510_054_681_8e-5,
    1.421_511_758_316_445_888_7e-7,
    2.044_263_103_389_939_785_64e-15,
];

/// Draw Z ~ N(0,1) conditioned on Z > a by inverse-CDF, stable in far tails.
/// No rejection loop: one uniform in, one value out, so the draw sequence is
/// reproducible for any truncation point.
pub fn sample_std_normal_above<R: Rng>(a: f64, rng: &mut R) -> f64 {
    let a = a.clamp(-37.0, 37.0);
    let u: f64 = rng.random();
    if a <= 0.0 {
        let below = std_normal_cdf(a);
        std_normal_quantile(below + u * (1.0 - below))
    } else {
        // Work in the upper tail: target mass v in (0, sf(a)].
        let tail = std_normal_sf(a);
        let v = (tail * (1.0 - u)).max(1e-320);
        -std_normal_quantile(v)
    }
}

/// Draw X ~ N(mean, sd^2) conditioned on X > lower.
pub fn sample_normal_above<R: Rng>(mean: f64, sd: f64, lower: f64, rng: &mut R) -> f64 {
    mean + sd * sample_std_normal_above((lower - mean) / sd, rng)
}

/// Draw X ~ N(mean, sd^2) conditioned on X < upper.
pub fn sample_normal_below<R: Rng>(mean: f64, sd: f64, upper: f64, rng: &mut R) -> f64 {
    -sample_normal_above(-mean, sd, -upper, rng)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (n-1 denominator).
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

pub fn sample_sd(xs: &[f64]) -> f64 {
    sample_variance(xs).sqrt()
}

/// Empirical quantile with linear interpolation between order statistics
/// (the common "type 7" definition).
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    assert!(!xs.is_empty(), "quantile of empty slice");
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn cdf_at_zero_is_half() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
    }

    #[test]
    fn cdf_saturates_in_far_tail() {
        assert!((std_normal_cdf(40.0) - 1.0).abs() < 1e-15);
        assert!(std_normal_cdf(-40.0) < 1e-300);
    }

    #[test]
    fn cdf_matches_two_sided_975_point() {
        // 97.5% point of the standard Normal.
        assert!((std_normal_cdf(1.959964) - 0.975).abs() < 1e-6);
    }

    #[test]
    fn quantile_round_trip() {
        for &p in &[
            1e-300,
            1e-12,
            0.001,
            0.025,
            0.3,
            0.5,
            0.7,
            0.975,
            0.999,
            1.0 - 1e-12,
        ] {
            let x = std_normal_quantile(p);
            let back = std_normal_cdf(x);
            assert!(
                (back - p).abs() <= 1e-12 * p.max(1e-3),
                "p={p}: x={x}, back={back}"
            );
        }
        assert!((std_normal_quantile(0.975) - 1.959963984540054).abs() < 1e-12);
        assert_eq!(std_normal_quantile(0.5), 0.0);
    }

    #[test]
    fn truncated_normal_stays_above_bound_and_matches_moments() {
        let mut rng = RngStream::new(11, 0).rng();
        // Moderate truncation: compare to the analytic truncated-normal mean
        // mu + pdf(a)/(1-cdf(a)) for a = (lower-mu)/sd with mu=0, sd=1, a=1.
        let draws: Vec<f64> = (0..200_000)
            .map(|_| sample_normal_above(0.0, 1.0, 1.0, &mut rng))
            .collect();
        assert!(draws.iter().all(|&x| x > 1.0));
        let expected = std_normal_pdf(1.0) / std_normal_sf(1.0);
        assert!((mean(&draws) - expected).abs() < 0.01, "{}", mean(&draws));
    }

    #[test]
    fn truncated_normal_extreme_bound_is_finite() {
        let mut rng = RngStream::new(11, 1).rng();
        for _ in 0..100 {
            let x = sample_normal_above(-30.0, 1.0, 0.0, &mut rng);
            assert!(x.is_finite() && x > 0.0);
            let y = sample_normal_below(30.0, 1.0, 0.0, &mut rng);
            assert!(y.is_finite() && y < 0.0);
        }
    }

    #[test]
    fn quantile_helpers() {
        let xs = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(quantile(&xs, 0.0), 1.0);
        assert_eq!(quantile(&xs, 1.0), 4.0);
        assert_eq!(median(&xs), 2.5);
    }
}
