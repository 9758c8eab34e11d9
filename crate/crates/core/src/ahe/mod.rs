//! Paillier additively homomorphic encryption.
//!
//! Plaintexts live in Z_n, ciphertexts in Z*_{n^2}. The generator is fixed to
//! g = n + 1, so encryption is `(1 + m n) r^n mod n^2` and decryption uses
//! `L(c^lambda mod n^2) * mu mod n` with `L(u) = (u - 1) / n`.

mod codec;
mod montgomery;
pub mod prime;

use std::fmt;

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{CryptoRng, Rng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use codec::{FixedPointCodec, DEFAULT_SCALE_BITS};
use montgomery::{FixedBase, Montgomery};

/// Smallest modulus accepted by [`keygen`]; only meaningful for tests.
pub const MIN_KEY_BITS: u32 = 128;
/// Key size used when nothing else is requested.
pub const DEFAULT_KEY_BITS: u32 = 2048;
/// Key size of the published benchmark setting. Not secure.
pub const BENCHMARK_KEY_BITS: u32 = 512;

/// Budget for the comb tables of one [`Encryptor`].
const TABLE_BYTES_BUDGET: usize = 16 << 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AheError {
    #[error("key size {0} is invalid: must be even and at least {MIN_KEY_BITS} bits")]
    InvalidKeySize(u32),
    #[error("plaintext is not in [0, n)")]
    PlaintextOutOfRange,
    #[error("scalar is not in [0, n)")]
    ScalarOutOfRange,
    #[error("ciphertext was produced under key {found}, expected {expected}")]
    KeyMismatch { expected: KeyId, found: KeyId },
    #[error("ciphertext value is not a unit modulo n^2")]
    InvalidCiphertext,
    #[error("fixed-point encoding of {value} does not fit in half the plaintext space")]
    EncodeOverflow { value: f64 },
    #[error("malformed key material: {0}")]
    MalformedKey(String),
}

/// Short fingerprint of a public modulus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeyId(pub u64);

impl KeyId {
    fn of_modulus(n: &BigUint) -> Self {
        let digest = Sha256::digest(n.to_bytes_be());
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        KeyId(u64::from_be_bytes(head))
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PublicKeyDoc", into = "PublicKeyDoc")]
pub struct PublicKey {
    n: BigUint,
    g: BigUint,
    nn: BigUint,
    key_bits: u32,
    key_id: KeyId,
}

#[derive(Clone)]
pub struct PrivateKey {
    p: BigUint,
    q: BigUint,
    lambda: BigUint,
    mu: BigUint,
    public: PublicKey,
}

// Keep secret material out of logs.
impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PrivateKey")
            .field("key_id", &self.public.key_id)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Debug)]
pub struct KeyPair {
    pub public: PublicKey,
    pub private: PrivateKey,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Ciphertext {
    value: BigUint,
    key_id: KeyId,
}

impl Ciphertext {
    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn key_id(&self) -> KeyId {
        self.key_id
    }

    /// Rebuilds a ciphertext received off the wire. Only the range is checked
    /// here; [`PublicKey::validate`] performs the full unit test.
    pub fn from_parts(pk: &PublicKey, value: BigUint) -> Result<Self, AheError> {
        if value.is_zero() || value >= pk.nn {
            return Err(AheError::InvalidCiphertext);
        }
        Ok(Ciphertext {
            value,
            key_id: pk.key_id,
        })
    }
}

/// Generates a key pair with a `key_bits`-bit modulus using the thread RNG.
pub fn keygen(key_bits: u32) -> Result<KeyPair, AheError> {
    keygen_with_rng(key_bits, &mut rand::thread_rng())
}

pub fn keygen_with_rng<R: Rng + CryptoRng + ?Sized>(
    key_bits: u32,
    rng: &mut R,
) -> Result<KeyPair, AheError> {
    if key_bits < MIN_KEY_BITS || !key_bits.is_multiple_of(2) {
        return Err(AheError::InvalidKeySize(key_bits));
    }
    let half = (key_bits / 2) as u64;
    loop {
        let p = prime::random_prime(half, rng);
        let q = prime::random_prime(half, rng);
        if p == q {
            continue;
        }
        let n = &p * &q;
        let phi = (&p - 1u8) * (&q - 1u8);
        if !n.gcd(&phi).is_one() {
            continue;
        }
        debug_assert_eq!(n.bits(), key_bits as u64);
        return KeyPair::from_primes(p, q);
    }
}

impl KeyPair {
    pub fn from_primes(p: BigUint, q: BigUint) -> Result<Self, AheError> {
        if p == q || p < BigUint::from(3u8) || q < BigUint::from(3u8) {
            return Err(AheError::MalformedKey("primes must be distinct and odd".into()));
        }
        let public = PublicKey::from_modulus(&p * &q)?;
        let lambda = prime::lcm(&(&p - 1u8), &(&q - 1u8));
        // with g = n + 1, L(g^lambda mod n^2) = lambda mod n
        let mu = (&lambda % &public.n)
            .modinv(&public.n)
            .ok_or_else(|| AheError::MalformedKey("lambda not invertible mod n".into()))?;
        let private = PrivateKey {
            p,
            q,
            lambda,
            mu,
            public: public.clone(),
        };
        Ok(KeyPair { public, private })
    }
}

impl PublicKey {
    pub fn from_modulus(n: BigUint) -> Result<Self, AheError> {
        if n.bits() < MIN_KEY_BITS as u64 || n.is_even() {
            return Err(AheError::MalformedKey("modulus too small or even".into()));
        }
        let g = &n + 1u8;
        let nn = &n * &n;
        let key_bits = n.bits() as u32;
        let key_id = KeyId::of_modulus(&n);
        Ok(PublicKey {
            n,
            g,
            nn,
            key_bits,
            key_id,
        })
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn g(&self) -> &BigUint {
        &self.g
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.nn
    }

    pub fn key_bits(&self) -> u32 {
        self.key_bits
    }

    pub fn key_id(&self) -> KeyId {
        self.key_id
    }

    /// Bytes needed to hold any ciphertext value.
    pub fn ciphertext_bytes(&self) -> usize {
        (self.nn.bits() as usize).div_ceil(8)
    }

    fn check(&self, c: &Ciphertext) -> Result<(), AheError> {
        if c.key_id != self.key_id {
            return Err(AheError::KeyMismatch {
                expected: self.key_id,
                found: c.key_id,
            });
        }
        Ok(())
    }

    /// Full validity check: correct key, value in [1, n^2) and coprime to n^2.
    pub fn validate(&self, c: &Ciphertext) -> Result<(), AheError> {
        self.check(c)?;
        if c.value.is_zero() || c.value >= self.nn || !c.value.gcd(&self.n).is_one() {
            return Err(AheError::InvalidCiphertext);
        }
        Ok(())
    }

    fn random_unit<R: Rng + ?Sized>(&self, rng: &mut R) -> BigUint {
        loop {
            let r = rng.gen_biguint_below(&self.n);
            if !r.is_zero() && r.gcd(&self.n).is_one() {
                return r;
            }
        }
    }

    /// (1 + m n) mod n^2, the deterministic part of an encryption of m.
    fn message_factor(&self, m: &BigUint) -> BigUint {
        (m * &self.n + 1u8) % &self.nn
    }

    pub fn encrypt(&self, m: &BigUint) -> Result<Ciphertext, AheError> {
        self.encrypt_with_rng(m, &mut rand::thread_rng())
    }

    /// Textbook encryption with a uniformly random unit r.
    pub fn encrypt_with_rng<R: Rng + CryptoRng + ?Sized>(
        &self,
        m: &BigUint,
        rng: &mut R,
    ) -> Result<Ciphertext, AheError> {
        if *m >= self.n {
            return Err(AheError::PlaintextOutOfRange);
        }
        let r = self.random_unit(rng);
        let rn = r.modpow(&self.n, &self.nn);
        Ok(Ciphertext {
            value: (self.message_factor(m) * rn) % &self.nn,
            key_id: self.key_id,
        })
    }

    pub fn encrypt_u64(&self, m: u64) -> Result<Ciphertext, AheError> {
        self.encrypt(&BigUint::from(m))
    }

    /// Homomorphic addition: decrypts to (a + b) mod n.
    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, AheError> {
        self.check(a)?;
        self.check(b)?;
        Ok(Ciphertext {
            value: (&a.value * &b.value) % &self.nn,
            key_id: self.key_id,
        })
    }

    /// Homomorphic scalar multiplication: decrypts to (k * a) mod n.
    pub fn scalar_mul(&self, a: &Ciphertext, k: &BigUint) -> Result<Ciphertext, AheError> {
        self.check(a)?;
        if *k >= self.n {
            return Err(AheError::ScalarOutOfRange);
        }
        Ok(Ciphertext {
            value: a.value.modpow(k, &self.nn),
            key_id: self.key_id,
        })
    }

    /// Same plaintext, fresh ciphertext value: multiplies in an encryption of zero.
    pub fn rerandomize(&self, a: &Ciphertext) -> Result<Ciphertext, AheError> {
        let zero = self.encrypt(&BigUint::zero())?;
        self.add(a, &zero)
    }

    /// Sum of many ciphertexts; `None` for an empty input.
    pub fn sum<'a, I>(&self, items: I) -> Result<Option<Ciphertext>, AheError>
    where
        I: IntoIterator<Item = &'a Ciphertext>,
    {
        let mut acc: Option<BigUint> = None;
        for c in items {
            self.check(c)?;
            acc = Some(match acc {
                None => c.value.clone(),
                Some(v) => (v * &c.value) % &self.nn,
            });
        }
        Ok(acc.map(|value| Ciphertext {
            value,
            key_id: self.key_id,
        }))
    }
}

impl PrivateKey {
    pub fn public_key(&self) -> &PublicKey {
        &self.public
    }

    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint, AheError> {
        self.public.check(c)?;
        let pk = &self.public;
        if c.value.is_zero() || c.value >= pk.nn {
            return Err(AheError::InvalidCiphertext);
        }
        let u = c.value.modpow(&self.lambda, &pk.nn);
        let l = (u - 1u8) / &pk.n;
        Ok((l * &self.mu) % &pk.n)
    }

    /// Big-endian encodings of every secret value; used to audit serialized traffic.
    pub fn secret_fingerprints(&self) -> Vec<Vec<u8>> {
        [&self.p, &self.q, &self.lambda, &self.mu]
            .iter()
            .map(|v| v.to_bytes_be())
            .collect()
    }

    pub fn to_document(&self) -> PrivateKeyDoc {
        PrivateKeyDoc {
            key_id: self.public.key_id.to_string(),
            key_bits: self.public.key_bits,
            p: self.p.to_str_radix(10),
            q: self.q.to_str_radix(10),
        }
    }

    pub fn from_document(doc: &PrivateKeyDoc) -> Result<KeyPair, AheError> {
        let parse = |s: &str| {
            BigUint::parse_bytes(s.as_bytes(), 10)
                .ok_or_else(|| AheError::MalformedKey(format!("not a decimal integer: {s}")))
        };
        let pair = KeyPair::from_primes(parse(&doc.p)?, parse(&doc.q)?)?;
        if pair.public.key_id.to_string() != doc.key_id {
            return Err(AheError::MalformedKey("key_id does not match modulus".into()));
        }
        Ok(pair)
    }
}

/// Text form of a public key: decimal integers plus size and fingerprint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicKeyDoc {
    pub n: String,
    pub g: String,
    pub key_bits: u32,
    pub key_id: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrivateKeyDoc {
    pub key_id: String,
    pub key_bits: u32,
    pub p: String,
    pub q: String,
}

impl From<PublicKey> for PublicKeyDoc {
    fn from(pk: PublicKey) -> Self {
        PublicKeyDoc {
            n: pk.n.to_str_radix(10),
            g: pk.g.to_str_radix(10),
            key_bits: pk.key_bits,
            key_id: pk.key_id.to_string(),
        }
    }
}

impl TryFrom<PublicKeyDoc> for PublicKey {
    type Error = AheError;

    fn try_from(doc: PublicKeyDoc) -> Result<Self, AheError> {
        let n = BigUint::parse_bytes(doc.n.as_bytes(), 10)
            .ok_or_else(|| AheError::MalformedKey("n is not a decimal integer".into()))?;
        let pk = PublicKey::from_modulus(n)?;
        if doc.g != pk.g.to_str_radix(10) {
            return Err(AheError::MalformedKey("only g = n + 1 is supported".into()));
        }
        if doc.key_bits != pk.key_bits || doc.key_id != pk.key_id.to_string() {
            return Err(AheError::MalformedKey("key_bits/key_id inconsistent with n".into()));
        }
        Ok(pk)
    }
}

/// Fast encryption for bulk workloads.
///
/// Randomizers are h^a for a fixed random n-th residue h = (-x^2)^n mod n^2
/// and a fresh short exponent a of `key_bits / 2` bits per call (the
/// Damgard-Jurik-Nielsen variant). Comb tables for h make each randomizer a
/// few dozen multiplications. Needs only the public key.
#[derive(Clone, Debug)]
pub struct Encryptor {
    pk: PublicKey,
    base: FixedBase,
}

impl Encryptor {
    pub fn new(pk: &PublicKey) -> Self {
        Self::with_rng(pk, &mut rand::thread_rng())
    }

    pub fn with_rng<R: Rng + CryptoRng + ?Sized>(pk: &PublicKey, rng: &mut R) -> Self {
        let x = pk.random_unit(rng);
        let h = &pk.n - (&x * &x) % &pk.n;
        let hs = h.modpow(&pk.n, &pk.nn);
        let exponent_bits = (pk.key_bits / 2).max(64);
        let mont = Montgomery::new(&pk.nn);
        let window = Self::window_for(exponent_bits, mont.limbs());
        Encryptor {
            pk: pk.clone(),
            base: FixedBase::new(mont, &hs, exponent_bits, window),
        }
    }

    fn window_for(exponent_bits: u32, limbs: usize) -> u32 {
        (1..=12u32)
            .rev()
            .find(|&w| {
                let windows = (exponent_bits as usize).div_ceil(w as usize);
                windows * (1usize << w) * limbs * 8 <= TABLE_BYTES_BUDGET
            })
            .unwrap_or(1)
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.pk
    }

    fn randomized<R: Rng + ?Sized>(&self, factor: &BigUint, rng: &mut R) -> Ciphertext {
        let words = (self.base.exponent_bits() as usize).div_ceil(64);
        let exponent: Vec<u64> = (0..words).map(|_| rng.gen()).collect();
        Ciphertext {
            value: self.base.pow_times(&exponent, factor),
            key_id: self.pk.key_id,
        }
    }

    pub fn encrypt(&self, m: &BigUint) -> Result<Ciphertext, AheError> {
        self.encrypt_with_rng(m, &mut rand::thread_rng())
    }

    pub fn encrypt_with_rng<R: Rng + CryptoRng + ?Sized>(
        &self,
        m: &BigUint,
        rng: &mut R,
    ) -> Result<Ciphertext, AheError> {
        if *m >= self.pk.n {
            return Err(AheError::PlaintextOutOfRange);
        }
        Ok(self.randomized(&self.pk.message_factor(m), rng))
    }

    pub fn encrypt_zero(&self) -> Ciphertext {
        self.randomized(&BigUint::one(), &mut rand::thread_rng())
    }

    pub fn rerandomize(&self, c: &Ciphertext) -> Result<Ciphertext, AheError> {
        self.pk.check(c)?;
        Ok(self.randomized(&c.value, &mut rand::thread_rng()))
    }
}
