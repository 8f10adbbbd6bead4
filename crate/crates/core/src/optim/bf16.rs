/// Smallest positive normal bfloat16 (same exponent range as `f32`).
const MIN_NORMAL: f64 = f32::MIN_POSITIVE as f64;
/// Spacing of bfloat16 subnormals: 2^-133.
const SUBNORMAL_QUANTUM: f64 = MIN_NORMAL / 128.0;
/// Halfway between the largest finite bfloat16 and 2^128; ties go to
/// infinity because the largest finite mantissa is odd.
const OVERFLOW: f64 = (2.0 - 1.0 / 256.0) * 1.7014118346046923e38; // 2^127

/// Round `x` to the nearest bfloat16 value (ties to even), returned as `f64`.
///
/// Rounds directly from `f64` so there is no double rounding through `f32`.
/// NaN and infinities pass through.
pub fn bf16_round(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    let ax = x.abs();
    if ax >= OVERFLOW {
        return f64::INFINITY.copysign(x);
    }
    if ax < MIN_NORMAL {
        return ((ax / SUBNORMAL_QUANTUM).round_ties_even() * SUBNORMAL_QUANTUM).copysign(x);
    }
    // Keep 7 of the 52 stored mantissa bits.
    const DROP: u32 = 52 - 7;
    let bits = x.to_bits();
    let lsb = (bits >> DROP) & 1;
    let rounded = bits + (1u64 << (DROP - 1)) - 1 + lsb;
    f64::from_bits(rounded & !((1u64 << DROP) - 1))
}

pub fn is_bf16(x: f64) -> bool {
    bf16_round(x).to_bits() == x.to_bits() || x.is_nan()
}
