//! Raw RSA over 1024-bit moduli: modular exponentiation plus a fixed
//! deterministic zero-padding for the 16-octet authentication nonce. No
//! probabilistic padding on purpose — the simulator must replay exactly.

use num_bigint::{BigInt, BigUint};
use num_integer::Integer;
use num_traits::{One, Signed, Zero};

use super::{CryptoError, Prng, AES_BLOCK_LEN};

/// Octet length of the RSA modulus (1024 bits).
pub const RSA_MODULUS_LEN: usize = 128;

const PRIME_BITS: u64 = 512;
const MILLER_RABIN_ROUNDS: usize = 24;

/// Public half of an RSA key pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RsaPublicKey {
    pub modulus: BigUint,
    pub exponent: BigUint,
}

impl RsaPublicKey {
    /// Modulus as exactly 128 big-endian octets.
    pub fn modulus_bytes(&self) -> [u8; RSA_MODULUS_LEN] {
        let raw = self.modulus.to_bytes_be();
        let mut out = [0u8; RSA_MODULUS_LEN];
        out[RSA_MODULUS_LEN - raw.len()..].copy_from_slice(&raw);
        out
    }

    pub fn encrypt(&self, m: &BigUint) -> Result<BigUint, CryptoError> {
        rsa_apply(&self.exponent, &self.modulus, m)
    }
}

/// An RSA key pair with a 1024-bit modulus.
#[derive(Clone, PartialEq, Eq)]
pub struct RsaKeyPair {
    public: RsaPublicKey,
    private_d: BigUint,
}

impl RsaKeyPair {
    /// Deterministically generates a key pair from the supplied PRNG state:
    /// two 512-bit Miller-Rabin-tested primes with the top two bits forced,
    /// public exponent 65537.
    pub fn generate(prng: &mut Prng) -> Self {
        let e = BigUint::from(65537u32);
        loop {
            let p = generate_prime(prng, &e);
            let q = generate_prime(prng, &e);
            if p == q {
                continue;
            }
            let n = &p * &q;
            debug_assert_eq!(n.bits(), 1024);
            let lambda = (&p - 1u8).lcm(&(&q - 1u8));
            let Some(d) = mod_inverse(&e, &lambda) else {
                continue;
            };
            return Self {
                public: RsaPublicKey {
                    modulus: n,
                    exponent: e,
                },
                private_d: d,
            };
        }
    }

    /// Rebuilds a pair from stored components without re-running generation.
    pub fn from_parts(modulus: BigUint, exponent: BigUint, private_d: BigUint) -> Self {
        Self {
            public: RsaPublicKey { modulus, exponent },
            private_d,
        }
    }

    pub fn public(&self) -> &RsaPublicKey {
        &self.public
    }

    pub fn private_exponent(&self) -> &BigUint {
        &self.private_d
    }

    pub fn decrypt(&self, c: &BigUint) -> Result<BigUint, CryptoError> {
        rsa_apply(&self.private_d, &self.public.modulus, c)
    }
}

impl std::fmt::Debug for RsaKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RsaKeyPair")
            .field("modulus_bits", &self.public.modulus.bits())
            .finish()
    }
}

/// `m ^ exponent mod modulus`; the message must be smaller than the modulus.
pub fn rsa_apply(
    exponent: &BigUint,
    modulus: &BigUint,
    m: &BigUint,
) -> Result<BigUint, CryptoError> {
    if m >= modulus {
        return Err(CryptoError::MessageOutOfRange);
    }
    Ok(m.modpow(exponent, modulus))
}

/// Left-pads a 16-octet nonce with zeros to the 128-octet modulus width and
/// reads it as a big-endian integer.
pub fn rsa_pad_nonce(nonce: &[u8; AES_BLOCK_LEN]) -> BigUint {
    BigUint::from_bytes_be(nonce)
}

/// Serializes a value below a 1024-bit modulus as exactly 128 big-endian
/// octets.
pub fn rsa_to_bytes(value: &BigUint) -> [u8; RSA_MODULUS_LEN] {
    let raw = value.to_bytes_be();
    let mut out = [0u8; RSA_MODULUS_LEN];
    out[RSA_MODULUS_LEN - raw.len()..].copy_from_slice(&raw);
    out
}

/// Inverse of [`rsa_pad_nonce`]: valid only when every padding octet was
/// zero, i.e. the integer fits in 128 bits.
pub fn rsa_unpad_nonce(m: &BigUint) -> Result<[u8; AES_BLOCK_LEN], CryptoError> {
    if m.bits() > 8 * AES_BLOCK_LEN as u64 {
        return Err(CryptoError::InvalidPadding);
    }
    let raw = m.to_bytes_be();
    let mut out = [0u8; AES_BLOCK_LEN];
    out[AES_BLOCK_LEN - raw.len()..].copy_from_slice(&raw);
    Ok(out)
}

fn generate_prime(prng: &mut Prng, e: &BigUint) -> BigUint {
    loop {
        let mut bytes = prng.next_bytes((PRIME_BITS / 8) as usize);
        bytes[0] |= 0xC0; // top two bits keep p*q at exactly 1024 bits
        let last = bytes.len() - 1;
        bytes[last] |= 1;
        let candidate = BigUint::from_bytes_be(&bytes);
        if !passes_trial_division(&candidate) {
            continue;
        }
        if !miller_rabin(&candidate, prng) {
            continue;
        }
        // e must be invertible mod p-1 for the private exponent to exist
        if (&candidate - 1u8).gcd(e).is_one() {
            return candidate;
        }
    }
}

fn passes_trial_division(n: &BigUint) -> bool {
    const SMALL_PRIMES: [u32; 54] = [
        3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
        97, 101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181,
        191, 193, 197, 199, 211, 223, 227, 229, 233, 239, 241, 251, 257,
    ];
    SMALL_PRIMES
        .iter()
        .all(|&p| !(n % BigUint::from(p)).is_zero())
}

fn miller_rabin(n: &BigUint, prng: &mut Prng) -> bool {
    let one = BigUint::one();
    let n_minus_1 = n - &one;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;

    'witness: for _ in 0..MILLER_RABIN_ROUNDS {
        let a = BigUint::from_bytes_be(&prng.next_bytes(32)) % (n - 3u8) + 2u8;
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 0..s.saturating_sub(1) {
            x = x.modpow(&BigUint::from(2u8), n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

fn mod_inverse(a: &BigUint, m: &BigUint) -> Option<BigUint> {
    let a = BigInt::from(a.clone());
    let m = BigInt::from(m.clone());
    let ext = a.extended_gcd(&m);
    if !ext.gcd.is_one() {
        return None;
    }
    let mut x = ext.x % &m;
    if x.is_negative() {
        x += &m;
    }
    x.to_biguint()
}
