//! Word-level Montgomery multiplication and fixed-base exponentiation.
//!
//! Encryption is the hot path of the guest: every leaf of every tree of every
//! sample costs one fresh randomizer. `FixedBase` stores comb tables of a
//! single base so each randomizer is a handful of multiplications instead of
//! a full modular exponentiation.

use num_bigint::BigUint;

/// Montgomery arithmetic modulo an odd modulus with a runtime limb count.
#[derive(Clone, Debug)]
pub(crate) struct Montgomery {
    modulus: Vec<u64>,
    modulus_big: BigUint,
    /// -m^{-1} mod 2^64
    m_prime: u64,
    /// R^2 mod m, R = 2^(64 * limbs)
    r2: Vec<u64>,
    /// R mod m, i.e. 1 in Montgomery form
    one: Vec<u64>,
}

impl Montgomery {
    pub(crate) fn new(modulus: &BigUint) -> Self {
        assert!(modulus.bit(0), "Montgomery modulus must be odd");
        let limbs = modulus.to_u64_digits();
        let n = limbs.len();

        // Newton iteration for the inverse of m[0] modulo 2^64.
        let mut inv: u64 = 1;
        for _ in 0..6 {
            inv = inv.wrapping_mul(2u64.wrapping_sub(limbs[0].wrapping_mul(inv)));
        }

        let r = BigUint::from(1u8) << (64 * n);
        let one = to_limbs(&(&r % modulus), n);
        let r2 = to_limbs(&((&r * &r) % modulus), n);
        Montgomery {
            modulus: limbs,
            modulus_big: modulus.clone(),
            m_prime: inv.wrapping_neg(),
            r2,
            one,
        }
    }

    pub(crate) fn limbs(&self) -> usize {
        self.modulus.len()
    }

    pub(crate) fn one(&self) -> &[u64] {
        &self.one
    }

    /// out = a * b * R^{-1} mod m. Inputs must be reduced. `scratch` needs limbs + 2 words.
    pub(crate) fn mul(&self, a: &[u64], b: &[u64], out: &mut [u64], scratch: &mut [u64]) {
        match self.modulus.len() {
            8 => self.mul_fixed::<8>(a, b, out),
            16 => self.mul_fixed::<16>(a, b, out),
            32 => self.mul_fixed::<32>(a, b, out),
            64 => self.mul_fixed::<64>(a, b, out),
            _ => self.mul_dyn(a, b, out, scratch),
        }
    }

    fn mul_fixed<const N: usize>(&self, a: &[u64], b: &[u64], out: &mut [u64]) {
        let a: &[u64; N] = a[..N].try_into().unwrap();
        let b: &[u64; N] = b[..N].try_into().unwrap();
        let m: &[u64; N] = self.modulus[..N].try_into().unwrap();
        let mut t = [0u64; N];
        let mut hi: u64 = 0;
        for &bi in b.iter() {
            let bi = bi as u128;
            let mut carry: u128 = 0;
            for j in 0..N {
                let s = t[j] as u128 + (a[j] as u128) * bi + carry;
                t[j] = s as u64;
                carry = s >> 64;
            }
            let s = hi as u128 + carry;
            let top = s as u64;
            let top2 = (s >> 64) as u64;

            let u = t[0].wrapping_mul(self.m_prime) as u128;
            let s = t[0] as u128 + u * m[0] as u128;
            let mut carry = s >> 64;
            for j in 1..N {
                let s = t[j] as u128 + u * m[j] as u128 + carry;
                t[j - 1] = s as u64;
                carry = s >> 64;
            }
            let s = top as u128 + carry;
            t[N - 1] = s as u64;
            hi = top2 + (s >> 64) as u64;
        }
        if hi != 0 || !less_than(&t, m) {
            let mut borrow = 0u64;
            for j in 0..N {
                let (d1, b1) = t[j].overflowing_sub(m[j]);
                let (d2, b2) = d1.overflowing_sub(borrow);
                t[j] = d2;
                borrow = (b1 | b2) as u64;
            }
        }
        out[..N].copy_from_slice(&t);
    }

    fn mul_dyn(&self, a: &[u64], b: &[u64], out: &mut [u64], scratch: &mut [u64]) {
        let n = self.modulus.len();
        let m = &self.modulus;
        let t = &mut scratch[..n + 2];
        t.fill(0);
        for &bi in b.iter().take(n) {
            let bi = bi as u128;
            let mut carry: u128 = 0;
            for j in 0..n {
                let s = t[j] as u128 + (a[j] as u128) * bi + carry;
                t[j] = s as u64;
                carry = s >> 64;
            }
            let s = t[n] as u128 + carry;
            t[n] = s as u64;
            t[n + 1] = (s >> 64) as u64;

            let u = t[0].wrapping_mul(self.m_prime) as u128;
            let s = t[0] as u128 + u * m[0] as u128;
            let mut carry = s >> 64;
            for j in 1..n {
                let s = t[j] as u128 + u * m[j] as u128 + carry;
                t[j - 1] = s as u64;
                carry = s >> 64;
            }
            let s = t[n] as u128 + carry;
            t[n - 1] = s as u64;
            t[n] = t[n + 1] + (s >> 64) as u64;
        }

        if t[n] != 0 || !less_than(&t[..n], m) {
            let mut borrow = 0u64;
            for j in 0..n {
                let (d1, b1) = t[j].overflowing_sub(m[j]);
                let (d2, b2) = d1.overflowing_sub(borrow);
                t[j] = d2;
                borrow = (b1 | b2) as u64;
            }
        }
        out[..n].copy_from_slice(&t[..n]);
    }

    pub(crate) fn to_mont(&self, x: &BigUint) -> Vec<u64> {
        let n = self.limbs();
        let reduced = if x.bits() > 64 * n as u64 || !less_than(&to_limbs(x, n), &self.modulus) {
            x % self.modulus_big()
        } else {
            x.clone()
        };
        let x = to_limbs(&reduced, n);
        let mut out = vec![0u64; n];
        let mut scratch = vec![0u64; n + 2];
        self.mul(&x, &self.r2, &mut out, &mut scratch);
        out
    }

    pub(crate) fn modulus_big(&self) -> &BigUint {
        &self.modulus_big
    }
}

/// Comb tables for `base^e` with a fixed base: entry (i, d) holds
/// base^(d * 2^(window * i)) in Montgomery form.
#[derive(Clone, Debug)]
pub(crate) struct FixedBase {
    mont: Montgomery,
    window: u32,
    windows: usize,
    tables: Vec<u64>,
}

impl FixedBase {
    pub(crate) fn new(mont: Montgomery, base: &BigUint, exponent_bits: u32, window: u32) -> Self {
        assert!((1..=16).contains(&window));
        let n = mont.limbs();
        let windows = (exponent_bits as usize).div_ceil(window as usize);
        let per = 1usize << window;
        let mut tables = vec![0u64; windows * per * n];
        let mut scratch = vec![0u64; n + 2];
        let mut g = mont.to_mont(base);
        let mut next = vec![0u64; n];
        for i in 0..windows {
            let off = i * per * n;
            tables[off..off + n].copy_from_slice(mont.one());
            for d in 1..per {
                let (done, rest) = tables.split_at_mut(off + d * n);
                mont.mul(&done[off + (d - 1) * n..], &g, &mut rest[..n], &mut scratch);
            }
            // g <- g^(2^window) = table[per - 1] * g
            mont.mul(&tables[off + (per - 1) * n..off + per * n], &g, &mut next, &mut scratch);
            std::mem::swap(&mut g, &mut next);
        }
        FixedBase {
            mont,
            window,
            windows,
            tables,
        }
    }

    pub(crate) fn exponent_bits(&self) -> u32 {
        self.windows as u32 * self.window
    }

    /// base^e in Montgomery form; `exp` is little-endian u64 limbs.
    pub(crate) fn pow_mont(&self, exp: &[u64]) -> Vec<u64> {
        let n = self.mont.limbs();
        let per = 1usize << self.window;
        let mut acc = self.mont.one().to_vec();
        let mut tmp = vec![0u64; n];
        let mut scratch = vec![0u64; n + 2];
        for i in 0..self.windows {
            let digit = extract_bits(exp, i * self.window as usize, self.window as usize);
            if digit == 0 {
                continue;
            }
            let off = (i * per + digit) * n;
            self.mont.mul(&acc, &self.tables[off..off + n], &mut tmp, &mut scratch);
            std::mem::swap(&mut acc, &mut tmp);
        }
        acc
    }

    /// base^e * factor mod m in ordinary representation.
    pub(crate) fn pow_times(&self, exp: &[u64], factor: &BigUint) -> BigUint {
        let n = self.mont.limbs();
        let acc = self.pow_mont(exp);
        let f = if factor < self.mont.modulus_big() {
            to_limbs(factor, n)
        } else {
            to_limbs(&(factor % self.mont.modulus_big()), n)
        };
        let mut out = vec![0u64; n];
        let mut scratch = vec![0u64; n + 2];
        // (x R) * f * R^{-1} = x f
        self.mont.mul(&acc, &f, &mut out, &mut scratch);
        from_limbs(&out)
    }
}

fn extract_bits(limbs: &[u64], start: usize, len: usize) -> usize {
    let word = start / 64;
    let shift = start % 64;
    let lo = limbs.get(word).copied().unwrap_or(0) >> shift;
    let hi = if shift + len > 64 && shift > 0 {
        limbs.get(word + 1).copied().unwrap_or(0) << (64 - shift)
    } else {
        0
    };
    ((lo | hi) & ((1u64 << len) - 1)) as usize
}

fn less_than(a: &[u64], b: &[u64]) -> bool {
    for j in (0..a.len()).rev() {
        if a[j] != b[j] {
            return a[j] < b[j];
        }
    }
    false
}

pub(crate) fn to_limbs(x: &BigUint, n: usize) -> Vec<u64> {
    let mut v = x.to_u64_digits();
    v.resize(n, 0);
    v
}

pub(crate) fn from_limbs(limbs: &[u64]) -> BigUint {
    let words: Vec<u32> = limbs
        .iter()
        .flat_map(|&w| [w as u32, (w >> 32) as u32])
        .collect();
    BigUint::new(words)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::RandBigInt;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn odd_modulus(rng: &mut ChaCha20Rng, bits: u64) -> BigUint {
        rng.gen_biguint(bits) | BigUint::from(1u8) | (BigUint::from(1u8) << (bits - 1))
    }

    #[test]
    fn montgomery_product_matches_bigint() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for bits in [64u64, 130, 512, 1024] {
            let m = odd_modulus(&mut rng, bits);
            let mont = Montgomery::new(&m);
            let n = mont.limbs();
            let r_inv_check = BigUint::from(1u8) << (64 * n);
            for _ in 0..50 {
                let a = rng.gen_biguint_below(&m);
                let b = rng.gen_biguint_below(&m);
                let mut out = vec![0u64; n];
                let mut scratch = vec![0u64; n + 2];
                mont.mul(&to_limbs(&a, n), &to_limbs(&b, n), &mut out, &mut scratch);
                // out * R == a * b (mod m)
                let lhs = (from_limbs(&out) * &r_inv_check) % &m;
                assert_eq!(lhs, (&a * &b) % &m);
                assert!(from_limbs(&out) < m);
            }
        }
    }

    #[test]
    fn fixed_base_matches_modpow() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let m = odd_modulus(&mut rng, 256);
        let base = rng.gen_biguint_below(&m);
        for window in [1u32, 4, 7] {
            let fb = FixedBase::new(Montgomery::new(&m), &base, 100, window);
            for _ in 0..30 {
                let e = rng.gen_biguint(100);
                let factor = rng.gen_biguint_below(&m);
                let got = fb.pow_times(&e.to_u64_digits(), &factor);
                assert_eq!(got, (base.modpow(&e, &m) * &factor) % &m);
            }
            assert_eq!(fb.pow_times(&[], &BigUint::from(5u8)), BigUint::from(5u8));
        }
    }
}
