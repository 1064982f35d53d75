//! Element types and conversions to and from the F32 working precision.
//!
//! Widening (F16, BF16 to F32) is exact. Narrowing (F32 to F16/BF16, F64 to
//! F32) rounds to nearest, ties to even, and saturates to infinity on
//! overflow. F32 and F64 identity paths keep NaN payloads bit-exact.

use std::fmt;
use std::str::FromStr;

use half::{bf16, f16};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elements per parallel conversion chunk.
const CONVERT_CHUNK: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Dtype {
    F32,
    F16,
    BF16,
    F64,
}

impl Dtype {
    pub const ALL: [Dtype; 4] = [Dtype::F32, Dtype::F16, Dtype::BF16, Dtype::F64];

    pub const fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
            Dtype::F64 => 8,
        }
    }

    pub const fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
            Dtype::F64 => "F64",
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F32" => Ok(Dtype::F32),
            "F16" => Ok(Dtype::F16),
            "BF16" => Ok(Dtype::BF16),
            "F64" => Ok(Dtype::F64),
            other => Err(Error::InvalidInput(format!("unknown dtype {other:?}"))),
        }
    }
}

impl TryFrom<String> for Dtype {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Dtype> for String {
    fn from(d: Dtype) -> String {
        d.as_str().to_owned()
    }
}

/// Decode a little-endian buffer of `dtype` elements into F32.
///
/// The buffer length must be a multiple of the element width; trailing
/// partial elements are a caller bug and trip a debug assertion.
pub fn decode_f32(bytes: &[u8], dtype: Dtype) -> Vec<f32> {
    let width = dtype.byte_width();
    debug_assert_eq!(bytes.len() % width, 0);
    let n = bytes.len() / width;
    let mut out = vec![0.0f32; n];
    out.par_chunks_mut(CONVERT_CHUNK)
        .zip(bytes.par_chunks(CONVERT_CHUNK * width))
        .for_each(|(dst, src)| decode_into(src, dtype, dst));
    out
}

fn decode_into(src: &[u8], dtype: Dtype, dst: &mut [f32]) {
    let width = dtype.byte_width();
    let elems = src.chunks_exact(width).zip(dst.iter_mut());
    match dtype {
        Dtype::F32 => elems.for_each(|(b, d)| *d = f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
        Dtype::F16 => elems.for_each(|(b, d)| *d = f16::from_le_bytes([b[0], b[1]]).to_f32()),
        Dtype::BF16 => elems.for_each(|(b, d)| *d = bf16::from_le_bytes([b[0], b[1]]).to_f32()),
        Dtype::F64 => elems.for_each(|(b, d)| {
            *d = f64::from_le_bytes(b.try_into().expect("8-byte chunk")) as f32
        }),
    }
}

/// Encode F32 working values as a little-endian `dtype` buffer.
pub fn encode_f32(values: &[f32], dtype: Dtype) -> Vec<u8> {
    let width = dtype.byte_width();
    let mut out = vec![0u8; values.len() * width];
    out.par_chunks_mut(CONVERT_CHUNK * width)
        .zip(values.par_chunks(CONVERT_CHUNK))
        .for_each(|(dst, src)| encode_into(src, dtype, dst));
    out
}

fn encode_into(src: &[f32], dtype: Dtype, dst: &mut [u8]) {
    let width = dtype.byte_width();
    let elems = dst.chunks_exact_mut(width).zip(src.iter());
    match dtype {
        Dtype::F32 => elems.for_each(|(d, v)| d.copy_from_slice(&v.to_le_bytes())),
        Dtype::F16 => elems.for_each(|(d, v)| d.copy_from_slice(&f16::from_f32(*v).to_le_bytes())),
        Dtype::BF16 => {
            elems.for_each(|(d, v)| d.copy_from_slice(&bf16::from_f32(*v).to_le_bytes()))
        }
        Dtype::F64 => elems.for_each(|(d, v)| d.copy_from_slice(&f64::from(*v).to_le_bytes())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_widths() {
        let widths: Vec<_> = Dtype::ALL.iter().map(|d| d.byte_width()).collect();
        assert_eq!(widths, [4, 2, 2, 8]);
    }

    #[test]
    fn parse_and_display_agree() {
        for d in Dtype::ALL {
            assert_eq!(d.to_string().parse::<Dtype>().unwrap(), d);
        }
        assert!("I8".parse::<Dtype>().is_err());
        assert!("f32".parse::<Dtype>().is_err());
    }

    #[test]
    fn f32_identity() {
        let bytes = encode_f32(&[1.5, -2.0], Dtype::F32);
        assert_eq!(decode_f32(&bytes, Dtype::F32), vec![1.5, -2.0]);
    }

    #[test]
    fn bf16_one() {
        assert_eq!(decode_f32(&0x3F80u16.to_le_bytes(), Dtype::BF16), vec![1.0]);
        assert_eq!(encode_f32(&[1.0], Dtype::BF16), 0x3F80u16.to_le_bytes());
    }

    #[test]
    fn f16_one() {
        assert_eq!(decode_f32(&0x3C00u16.to_le_bytes(), Dtype::F16), vec![1.0]);
    }

    #[test]
    fn narrowing_rounds_to_nearest_even() {
        // 1 + 2^-8 sits exactly between two BF16 neighbours; the even one is 1.0.
        let halfway = 1.0f32 + 2f32.powi(-8);
        assert_eq!(encode_f32(&[halfway], Dtype::BF16), 0x3F80u16.to_le_bytes());
        // 1 + 3*2^-8 ties upward to the even mantissa 0x3F82.
        let halfway_up = 1.0f32 + 3.0 * 2f32.powi(-8);
        assert_eq!(encode_f32(&[halfway_up], Dtype::BF16), 0x3F82u16.to_le_bytes());
        // F16: 1 + 2^-11 ties to 1.0.
        let h = 1.0f32 + 2f32.powi(-11);
        assert_eq!(encode_f32(&[h], Dtype::F16), 0x3C00u16.to_le_bytes());
    }

    #[test]
    fn narrowing_overflow_saturates_to_infinity() {
        let big = encode_f32(&[1.0e6, -1.0e6], Dtype::F16);
        assert_eq!(decode_f32(&big, Dtype::F16), vec![f32::INFINITY, f32::NEG_INFINITY]);
    }

    #[test]
    fn f64_narrowing_uses_rne() {
        let x = 1.0f64 + 2f64.powi(-24); // halfway between 1 and next f32
        let v = decode_f32(&x.to_le_bytes(), Dtype::F64);
        assert_eq!(v, vec![1.0]);
    }

    #[test]
    fn nan_payload_survives_f32_identity() {
        let nan = f32::from_bits(0x7FC0_1234);
        let bytes = encode_f32(&[nan], Dtype::F32);
        assert_eq!(decode_f32(&bytes, Dtype::F32)[0].to_bits(), 0x7FC0_1234);
    }

    #[test]
    fn conversion_across_chunk_boundaries() {
        let n = CONVERT_CHUNK * 2 + 17;
        let v: Vec<f32> = (0..n).map(|i| (i % 256) as f32 * 0.25).collect();
        for d in Dtype::ALL {
            assert_eq!(decode_f32(&encode_f32(&v, d), d), v, "{d}");
        }
    }

    #[test]
    fn f32_identity_on_ten_thousand_seeded_values() {
        use crate::rng::Philox4x32;
        let rng = Philox4x32::new(0xDEC0DE);
        let v: Vec<f32> = (0..10_000u64)
            .map(|i| f32::from_bits(rng.block(i, 0)[0]))
            .filter(|x| !x.is_nan())
            .collect();
        let round = decode_f32(&encode_f32(&v, Dtype::F32), Dtype::F32);
        let bits = |s: &[f32]| s.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&round), bits(&v));
    }

    proptest! {
        #[test]
        fn f16_widening_is_exact_and_injective(bits in any::<u16>()) {
            let h = f16::from_bits(bits);
            prop_assume!(!h.is_nan());
            let wide = decode_f32(&bits.to_le_bytes(), Dtype::F16)[0];
            prop_assert_eq!(encode_f32(&[wide], Dtype::F16), bits.to_le_bytes().to_vec());
        }

        #[test]
        fn bf16_widening_appends_zero_bits(bits in any::<u16>()) {
            prop_assume!(!bf16::from_bits(bits).is_nan());
            let wide = decode_f32(&bits.to_le_bytes(), Dtype::BF16)[0];
            prop_assert_eq!(wide.to_bits(), u32::from(bits) << 16);
            prop_assert_eq!(encode_f32(&[wide], Dtype::BF16), bits.to_le_bytes().to_vec());
        }

        #[test]
        fn f64_representable_values_round_trip(x in any::<f32>()) {
            prop_assume!(!x.is_nan());
            let bytes = encode_f32(&[x], Dtype::F64);
            prop_assert_eq!(decode_f32(&bytes, Dtype::F64)[0].to_bits(), x.to_bits());
        }
    }
}
