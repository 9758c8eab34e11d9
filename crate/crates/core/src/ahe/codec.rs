use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{FromPrimitive, ToPrimitive, Zero};

use super::{AheError, PublicKey};

/// Default fixed-point precision: values are scaled by 2^32.
pub const DEFAULT_SCALE_BITS: u32 = 32;

/// Signed fixed-point encoding of reals into Z_n.
///
/// A real `x` becomes `round(x * 2^scale_bits)`; negative values wrap into the
/// upper half of the plaintext space, so homomorphic addition of encodings
/// matches addition of the reals as long as every partial sum stays below n/2
/// in magnitude.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedPointCodec {
    scale_bits: u32,
    modulus: BigUint,
    half: BigUint,
}

impl FixedPointCodec {
    pub fn new(public_key: &PublicKey, scale_bits: u32) -> Self {
        Self::with_modulus(public_key.n().clone(), scale_bits)
    }

    pub fn with_modulus(modulus: BigUint, scale_bits: u32) -> Self {
        let half = &modulus >> 1u32;
        FixedPointCodec {
            scale_bits,
            modulus,
            half,
        }
    }

    pub fn scale_bits(&self) -> u32 {
        self.scale_bits
    }

    pub fn scale(&self) -> f64 {
        (self.scale_bits as f64).exp2()
    }

    /// Smallest positive difference between two distinct decoded values.
    pub fn resolution(&self) -> f64 {
        1.0 / self.scale()
    }

    pub fn modulus(&self) -> &BigUint {
        &self.modulus
    }

    /// Largest integer magnitude that still decodes with the right sign.
    pub fn half_modulus(&self) -> &BigUint {
        &self.half
    }

    pub fn encode(&self, x: f64) -> Result<BigUint, AheError> {
        if !x.is_finite() {
            return Err(AheError::EncodeOverflow { value: x });
        }
        let scaled = (x * self.scale()).round();
        let magnitude = BigInt::from_f64(scaled.abs())
            .and_then(|v| v.to_biguint())
            .ok_or(AheError::EncodeOverflow { value: x })?;
        if magnitude >= self.half {
            return Err(AheError::EncodeOverflow { value: x });
        }
        if scaled < 0.0 && !magnitude.is_zero() {
            Ok(&self.modulus - magnitude)
        } else {
            Ok(magnitude)
        }
    }

    pub fn decode(&self, m: &BigUint) -> f64 {
        let m = m % &self.modulus;
        let signed = if m > self.half {
            BigInt::from_biguint(Sign::Minus, &self.modulus - &m)
        } else {
            BigInt::from_biguint(Sign::Plus, m)
        };
        // exact division by a power of two keeps full f64 precision
        signed.to_f64().unwrap_or(f64::NAN) / self.scale()
    }
}
