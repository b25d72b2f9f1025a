//! Special functions and numerically stable primitives.
//!
//! Everything here is a pure function of its arguments.

use crate::error::{Error, Result};

/// Lower clip applied to every probability before taking its logarithm.
///
/// Saturated softmax outputs produce exact zeros; clipping keeps every log
/// finite (`ln 1e-10 ≈ -23.03`).
pub const PROB_FLOOR: f64 = 1e-10;

/// Euler–Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

// B_{2n} / (2n (2n - 1)) for n = 1..8
const STIRLING: [f64; 8] = [
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360_360.0,
    1.0 / 156.0,
    -3617.0 / 122_400.0,
];

// B_{2n} / (2n) for n = 1..7
const DIGAMMA_ASYMP: [f64; 7] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32_760.0,
    1.0 / 12.0,
];

// B_{2n} for n = 1..7
const TRIGAMMA_ASYMP: [f64; 7] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
];

const ASYMPTOTIC_START: f64 = 10.0;

fn check_positive(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} requires a finite x > 0, got {x}")))
    }
}

/// `ln Γ(x)` for `x > 0`.
///
/// Arguments below 7 are shifted up with `Γ(x + 1) = x Γ(x)`, then the
/// Stirling series is evaluated with eight Bernoulli terms.
pub fn ln_gamma(x: f64) -> Result<f64> {
    check_positive("ln_gamma", x)?;
    Ok(ln_gamma_unchecked(x))
}

pub(crate) fn ln_gamma_unchecked(x: f64) -> f64 {
    let mut z = x;
    let mut shift = 1.0;
    while z < 7.0 {
        shift *= z;
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut pow = inv;
    for c in STIRLING {
        series += c * pow;
        pow *= inv2;
    }
    let stirling = (z - 0.5) * z.ln() - z + HALF_LN_2PI + series;
    if shift == 1.0 {
        stirling
    } else {
        stirling - shift.ln()
    }
}

/// Digamma `ψ(x) = d/dx ln Γ(x)` for `x > 0`.
pub fn digamma(x: f64) -> Result<f64> {
    check_positive("digamma", x)?;
    Ok(digamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(x: f64) -> f64 {
    let mut z = x;
    let mut acc = 0.0;
    while z < ASYMPTOTIC_START {
        acc -= 1.0 / z;
        z += 1.0;
    }
    let inv2 = 1.0 / (z * z);
    let mut series = 0.0;
    let mut pow = inv2;
    for c in DIGAMMA_ASYMP {
        series += c * pow;
        pow *= inv2;
    }
    acc + z.ln() - 0.5 / z - series
}

/// Trigamma `ψ'(x)` for `x > 0`.
pub fn trigamma(x: f64) -> Result<f64> {
    check_positive("trigamma", x)?;
    Ok(trigamma_unchecked(x))
}

pub(crate) fn trigamma_unchecked(x: f64) -> f64 {
    let mut z = x;
    let mut acc = 0.0;
    while z < ASYMPTOTIC_START {
        acc += 1.0 / (z * z);
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut pow = inv2 * inv;
    for c in TRIGAMMA_ASYMP {
        series += c * pow;
        pow *= inv2;
    }
    acc + inv + 0.5 * inv2 + series
}

/// Inverse of the digamma function: returns `x > 0` with `ψ(x) = y`.
///
/// Minka's initialisation followed by Newton steps on `ψ(x) - y`.
pub fn inv_digamma(y: f64) -> Result<f64> {
    if !y.is_finite() {
        return Err(Error::domain(format!("inv_digamma requires finite y, got {y}")));
    }
    let mut x = if y >= -2.22 {
        y.exp() + 0.5
    } else {
        -1.0 / (y + EULER_GAMMA)
    };
    for iter in 0..100 {
        let step = (digamma_unchecked(x) - y) / trigamma_unchecked(x);
        let mut next = x - step;
        // A full Newton step can overshoot past zero when x is tiny.
        if next <= 0.0 {
            next = x / 16.0;
        }
        let done = (next - x).abs() <= 4.0 * f64::EPSILON * x;
        x = next;
        if iter >= 4 && done {
            break;
        }
    }
    Ok(x)
}

/// `ln Σ exp(v_j)`, shifted by the maximum so large entries do not overflow.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    let max = v
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| Error::domain("log_sum_exp of an empty vector"))?;
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return Ok(max);
    }
    let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Writes `ln y_j` into `out` after clipping each score to
/// `[PROB_FLOOR, 1]` and renormalizing.
pub fn clipped_log_probs<T: Copy + Into<f64>>(y: &[T], out: &mut [f64]) {
    debug_assert_eq!(y.len(), out.len());
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(y) {
        let c = v.into().clamp(PROB_FLOOR, 1.0);
        *o = c;
        total += c;
    }
    let ln_total = total.ln();
    for o in out.iter_mut() {
        *o = o.ln() - ln_total;
    }
}

/// Index of the largest entry; the lowest index wins ties. NaN entries are
/// never selected unless every entry is NaN.
pub fn argmax<T: Copy + PartialOrd>(v: &[T]) -> usize {
    let is_nan = |t: T| t.partial_cmp(&t).is_none();
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] || (is_nan(v[best]) && !is_nan(x)) {
            best = i;
        }
    }
    best
}

#[cfg(test)]
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;

    // Reference values computed with mpmath at 40 digits.
    const LN_GAMMA_REF: [(f64, f64); 17] = [
        (1e-06, 13.815509980749431714),
        (0.001, 6.9071788853838536617),
        (0.01, 4.5994798780420217016),
        (0.1, 2.252712651734205902),
        (0.5, 0.57236494292470008707),
        (1.0, 0.0),
        (1.5, -0.12078223763524522235),
        (2.0, 0.0),
        (2.5, 0.28468287047291915963),
        (3.7, 1.4280723266653881292),
        (7.0, 6.5792512120101009951),
        (10.0, 12.801827480081469611),
        (42.5, 115.90007047041453012),
        (100.0, 359.13420536957539878),
        (1234.5, 7550.5509010778948957),
        (100000.0, 1051287.7089736568949),
        (1000000.0, 12815504.56914761166),
    ];

    const DIGAMMA_REF: [(f64, f64); 17] = [
        (1e-06, -1000000.5772140200139),
        (0.001, -1000.5755719318102797),
        (0.01, -100.56088545786867242),
        (0.1, -10.423754940411076232),
        (0.5, -1.9635100260214234794),
        (1.0, -0.57721566490153286061),
        (1.5, 0.036489973978576520559),
        (2.0, 0.42278433509846713939),
        (2.5, 0.70315664064524318723),
        (3.7, 1.1671535393615114409),
        (7.0, 1.8727843350984671394),
        (10.0, 2.2517525890667211076),
        (42.5, 3.7376932365000936171),
        (100.0, 4.6001618527380874002),
        (1234.5, 7.1180162318279978433),
        (100000.0, 11.512920464961895087),
        (1000000.0, 13.815510057964190771),
    ];

    // Absolute 1e-12, widened to a few ulps once |value| is large enough
    // that 1e-12 is below the f64 resolution.
    fn tol(v: f64) -> f64 {
        1e-12_f64.max(8.0 * f64::EPSILON * v.abs())
    }

    #[test]
    fn ln_gamma_closed_forms() {
        assert_eq!(ln_gamma(1.0).unwrap(), 0.0);
        assert!((ln_gamma(0.5).unwrap() - 0.5723649429247001).abs() < 1e-12);
        assert!((ln_gamma(6.0).unwrap() - 120f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ln_gamma_reference_table() {
        for (x, want) in LN_GAMMA_REF {
            let got = ln_gamma(x).unwrap();
            assert!((got - want).abs() <= tol(want), "ln_gamma({x}) = {got}, want {want}");
        }
    }

    #[test]
    fn digamma_reference_table() {
        for (x, want) in DIGAMMA_REF {
            let got = digamma(x).unwrap();
            let t = 1e-10_f64.max(8.0 * f64::EPSILON * want.abs());
            assert!((got - want).abs() <= t, "digamma({x}) = {got}, want {want}");
        }
        assert!((digamma(1.0).unwrap() + EULER_GAMMA).abs() < 1e-12);
        let closed = -EULER_GAMMA - 2.0 * 2f64.ln();
        assert!((digamma(0.5).unwrap() - closed).abs() < 1e-12);
        assert!((digamma(3.5).unwrap() - digamma(2.5).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn trigamma_reference_table() {
        let table = [
            (0.001, 1000001.6425331958273),
            (0.5, 4.9348022005446793094),
            (1.0, 1.6449340668482264365),
            (3.0, 0.39493406684822643647),
            (10.0, 0.10516633568168574612),
            (1000.0, 0.0010005001666666333334),
        ];
        for (x, want) in table {
            let got = trigamma(x).unwrap();
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "trigamma({x})");
        }
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(ln_gamma(0.0), Err(Error::Domain(_))));
        assert!(matches!(ln_gamma(-2.5), Err(Error::Domain(_))));
        assert!(matches!(digamma(0.0), Err(Error::Domain(_))));
        assert!(matches!(digamma(f64::NAN), Err(Error::Domain(_))));
        assert!(matches!(inv_digamma(f64::INFINITY), Err(Error::Domain(_))));
        assert!(matches!(log_sum_exp(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn inv_digamma_examples() {
        let x = inv_digamma(digamma(3.0).unwrap()).unwrap();
        assert!((x - 3.0).abs() < 1e-9);
        assert!((inv_digamma(-0.5772156649).unwrap() - 1.0).abs() < 1e-9);
        let x = inv_digamma(digamma(0.01).unwrap()).unwrap();
        assert!((x - 0.01).abs() < 1e-8);
    }

    #[test]
    fn inv_digamma_residual() {
        for &y in &[-1e6, -1e3, -50.0, -2.3, -2.2, -1.0, 0.0, 0.5, 3.0, 10.0, 20.0] {
            let x = inv_digamma(y).unwrap();
            assert!(x > 0.0);
            let r = (digamma(x).unwrap() - y).abs();
            assert!(r <= 1e-10_f64.max(4.0 * f64::EPSILON * y.abs()), "y={y} x={x} r={r}");
        }
    }

    #[test]
    fn log_sum_exp_examples() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((log_sum_exp(&[1000.0, 1000.0]).unwrap() - 1000.6931471805599).abs() < 1e-9);
        assert_eq!(log_sum_exp(&[-3.2]).unwrap(), -3.2);
        assert!(log_sum_exp(&[-1e4, 1e4]).unwrap().is_finite());
    }

    #[test]
    fn clipping_uses_floor() {
        let mut out = [0.0; 2];
        clipped_log_probs(&[1.0f64, 0.0], &mut out);
        assert!((out[1] - PROB_FLOOR.ln()).abs() < 1e-9);
        assert!(out[0] <= 0.0);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
        assert_eq!(argmax(&[f64::NAN, 0.2]), 1);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn gamma_recurrence(x in 0.1f64..100.0) {
                let lhs = ln_gamma(x + 1.0).unwrap().exp();
                let rhs = x * ln_gamma(x).unwrap().exp();
                prop_assert!(((lhs - rhs) / lhs).abs() <= 1e-10);
            }

            #[test]
            fn digamma_recurrence(x in 0.1f64..100.0) {
                let d = digamma(x + 1.0).unwrap() - digamma(x).unwrap();
                prop_assert!((d - 1.0 / x).abs() <= 1e-10);
            }

            #[test]
            fn inv_digamma_round_trip(e in -3.0f64..4.0) {
                let x = 10f64.powf(e);
                let back = inv_digamma(digamma(x).unwrap()).unwrap();
                prop_assert!((back - x).abs() <= 1e-8);
            }

            #[test]
            fn log_sum_exp_shift(v in prop::collection::vec(-50.0f64..50.0, 1..8), c in -100.0f64..100.0) {
                let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
                let a = log_sum_exp(&shifted).unwrap();
                let b = log_sum_exp(&v).unwrap() + c;
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
