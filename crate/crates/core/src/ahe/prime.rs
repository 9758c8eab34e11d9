use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{CryptoRng, Rng};
use std::sync::OnceLock;

/// Miller-Rabin rounds applied to every prime candidate that survives sieving.
pub const MILLER_RABIN_ROUNDS: usize = 64;

const SIEVE_LIMIT: u32 = 2000;

fn small_primes() -> &'static [u32] {
    static PRIMES: OnceLock<Vec<u32>> = OnceLock::new();
    PRIMES.get_or_init(sieve)
}

fn sieve() -> Vec<u32> {
    let mut is = vec![true; SIEVE_LIMIT as usize];
    is[0] = false;
    is[1] = false;
    let mut i = 2;
    while i * i < SIEVE_LIMIT as usize {
        if is[i] {
            let mut j = i * i;
            while j < SIEVE_LIMIT as usize {
                is[j] = false;
                j += i;
            }
        }
        i += 1;
    }
    (0..SIEVE_LIMIT).filter(|&p| is[p as usize]).collect()
}

/// Probabilistic primality test: trial division by small primes, then
/// `rounds` Miller-Rabin witnesses drawn uniformly from [2, n-2].
pub fn is_probable_prime<R: Rng + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let two = BigUint::from(2u8);
    if *n < two {
        return false;
    }
    for &p in small_primes() {
        let p = BigUint::from(p);
        if *n == p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }

    let n_minus_one = n - 1u8;
    let s = n_minus_one.trailing_zeros().unwrap_or(0);
    let d = &n_minus_one >> s;
    let upper = n - 2u8;

    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &upper);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_one {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_one {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Random prime with exactly `bits` bits and its two top bits set, so the
/// product of two such primes has exactly `2 * bits` bits.
pub fn random_prime<R: Rng + CryptoRng + ?Sized>(bits: u64, rng: &mut R) -> BigUint {
    assert!(bits >= 16, "prime size too small");
    let primes = small_primes();
    loop {
        let mut candidate = rng.gen_biguint(bits);
        candidate.set_bit(bits - 1, true);
        candidate.set_bit(bits - 2, true);
        candidate.set_bit(0, true);
        // cheap rejection before any exponentiation
        if primes
            .iter()
            .any(|&p| (&candidate % p).is_zero() && candidate != BigUint::from(p))
        {
            continue;
        }
        if is_probable_prime(&candidate, MILLER_RABIN_ROUNDS, rng) {
            return candidate;
        }
    }
}

pub(crate) fn lcm(a: &BigUint, b: &BigUint) -> BigUint {
    a.lcm(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn classifies_small_numbers() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let primes: Vec<u32> = (0..200u32)
            .filter(|&k| is_probable_prime(&BigUint::from(k), 16, &mut rng))
            .collect();
        let brute: Vec<u32> = (0..200u32)
            .filter(|&k| k >= 2 && (2..k).all(|d| k % d != 0))
            .collect();
        assert_eq!(primes, brute);
    }

    #[test]
    fn rejects_carmichael_and_semiprimes() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        // 561 and a Carmichael number above the sieve limit
        for c in [561u64, 41041, 825265, 2_147_483_647 * 3] {
            assert!(!is_probable_prime(&BigUint::from(c), 64, &mut rng), "{c}");
        }
        assert!(is_probable_prime(&BigUint::from(2_147_483_647u64), 64, &mut rng));
    }

    #[test]
    fn random_prime_has_requested_size() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let p = random_prime(128, &mut rng);
        assert_eq!(p.bits(), 128);
        assert!(p.bit(126));
    }
}
