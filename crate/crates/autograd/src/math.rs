//! Branch-light `exp`, `tanh` and `sigmoid` for the hot elementwise paths.
//! Accurate to a few ulp; libm's versions dominate LSTM and conv time.

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
/// Adding this rounds to the nearest integer, left in the low mantissa bits.
const ROUND: f64 = 6_755_399_441_055_744.0;
const OVERFLOW: f64 = 709.782_712_893_384;
const UNDERFLOW: f64 = -745.2;

#[inline(always)]
fn round_bits(v: f64) -> (f64, u64) {
    let t = v + ROUND;
    (t - ROUND, t.to_bits().wrapping_sub(ROUND.to_bits()))
}

#[inline(always)]
fn pow2(k: u64) -> f64 {
    f64::from_bits(k.wrapping_add(1023).wrapping_shl(52))
}

/// Straight-line so that loops over it vectorize.
#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    let xc = x.clamp(UNDERFLOW, OVERFLOW);
    let (kf, k) = round_bits(xc * LOG2E);
    let r = (xc - kf * LN2_HI) - kf * LN2_LO;
    // Taylor series to r^13; |r| <= ln(2)/2.
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    // Two factors keep both exponents normal across the whole range.
    let (_, k1) = round_bits(kf * 0.5);
    let y = p * pow2(k1) * pow2(k.wrapping_sub(k1));
    if x < UNDERFLOW {
        0.0
    } else if x > OVERFLOW {
        f64::INFINITY
    } else {
        y
    }
}

#[inline]
pub(crate) fn tanh(x: f64) -> f64 {
    let t = exp(-2.0 * x.abs());
    ((1.0 - t) / (1.0 + t)).copysign(x)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + exp(-x))
}
