//! IEEE 754 binary16 conversion used to emulate half-precision execution.
//!
//! Narrowing rounds to nearest, ties to even. Subnormals are kept; values
//! beyond the binary16 range become infinities and NaNs stay NaN.

/// Converts an `f32` to binary16 bits with round-to-nearest-even.
pub fn f32_to_f16_bits(value: f32) -> u16 {
    let x = value.to_bits();
    let sign = ((x >> 16) & 0x8000) as u16;
    let exp = ((x >> 23) & 0xff) as i32;
    let man = x & 0x007f_ffff;

    if exp == 0xff {
        if man == 0 {
            return sign | 0x7c00;
        }
        return sign | 0x7e00 | (man >> 13) as u16;
    }

    let e = exp - 127 + 15;
    if e >= 0x1f {
        return sign | 0x7c00;
    }
    if e <= 0 {
        if e < -10 {
            return sign;
        }
        // Subnormal result: unit is 2^-24.
        let m = man | 0x0080_0000;
        let shift = (14 - e) as u32;
        let mut r = m >> shift;
        let rem = m & ((1 << shift) - 1);
        let halfway = 1 << (shift - 1);
        if rem > halfway || (rem == halfway && r & 1 == 1) {
            r += 1;
        }
        return sign | r as u16;
    }

    let mut h = ((e as u32) << 10) | (man >> 13);
    let rem = man & 0x1fff;
    if rem > 0x1000 || (rem == 0x1000 && h & 1 == 1) {
        // A carry out of the mantissa bumps the exponent, up to infinity.
        h += 1;
    }
    sign | h as u16
}

/// Widens binary16 bits to `f32` (exact).
pub fn f16_bits_to_f32(bits: u16) -> f32 {
    let sign = ((bits & 0x8000) as u32) << 16;
    let exp = ((bits >> 10) & 0x1f) as u32;
    let man = (bits & 0x03ff) as u32;
    let out = match exp {
        0 if man == 0 => sign,
        0 => {
            // Normalize the subnormal.
            let lead = 31 - man.leading_zeros();
            let shift = 10 - lead;
            let man = (man << shift) & 0x03ff;
            let e = 127 - 15 + 1 - shift;
            sign | (e << 23) | (man << 13)
        }
        0x1f => sign | 0x7f80_0000 | (man << 13),
        _ => sign | ((exp + 127 - 15) << 23) | (man << 13),
    };
    f32::from_bits(out)
}

/// Rounds an `f32` through binary16 and back.
#[inline]
pub fn round_f16(value: f32) -> f32 {
    let bits = value.to_bits();
    let mag = bits & 0x7fff_ffff;
    // Binary16 normal range below 65504: drop 13 mantissa bits with RNE in place.
    if (0x3880_0000..0x477f_e000).contains(&mag) {
        let r = (bits + 0x0fff + ((bits >> 13) & 1)) & !0x1fff;
        return f32::from_bits(r);
    }
    f16_bits_to_f32(f32_to_f16_bits(value))
}

pub fn round_slice(data: &mut [f32]) {
    for v in data {
        *v = round_f16(*v);
    }
}
