//! Deterministic cryptographic primitives shared by the head-end, card, and
//! receiver: AES-128 and two-key 3DES block operations, an AES-CTR keystream,
//! a truncated CBC-MAC, a counter-mode PRNG, and the session-key KDF.
//!
//! Everything here is a pure function of its inputs so simulations replay
//! byte-identically from a seed. None of it is hardened against side
//! channels; this is simulator-grade crypto behind production-shaped APIs.

mod rsa;

pub use rsa::{
    rsa_apply, rsa_pad_nonce, rsa_to_bytes, rsa_unpad_nonce, RsaKeyPair, RsaPublicKey,
    RSA_MODULUS_LEN,
};

use aes::cipher::generic_array::GenericArray;
use aes::cipher::{BlockDecrypt, BlockEncrypt, KeyInit};
use aes::Aes128;
use des::TdesEde2;
use thiserror::Error;

/// Length in octets of an AES-128 key and block.
pub const AES_BLOCK_LEN: usize = 16;
/// Length in octets of a DES block.
pub const DES_BLOCK_LEN: usize = 8;
/// Length in octets of a truncated CBC-MAC tag.
pub const MAC_LEN: usize = 8;
/// Upper bound on a single CTR keystream request.
pub const MAX_KEYSTREAM_LEN: usize = 1 << 20;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("invalid length: expected {expected} octets, got {actual}")]
    InvalidLength { expected: usize, actual: usize },
    #[error("keystream request of {requested} octets exceeds the {MAX_KEYSTREAM_LEN}-octet cap")]
    KeystreamTooLong { requested: usize },
    #[error("message is not smaller than the modulus")]
    MessageOutOfRange,
    #[error("decrypted block has invalid padding")]
    InvalidPadding,
}

/// Whether a block operation runs the forward or inverse permutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Encrypt,
    Decrypt,
}

/// A 128-bit AES key.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Aes128Key([u8; AES_BLOCK_LEN]);

impl Aes128Key {
    pub const fn new(bytes: [u8; AES_BLOCK_LEN]) -> Self {
        Self(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let bytes: [u8; AES_BLOCK_LEN] =
            bytes.try_into().map_err(|_| CryptoError::InvalidLength {
                expected: AES_BLOCK_LEN,
                actual: bytes.len(),
            })?;
        Ok(Self(bytes))
    }

    pub fn as_bytes(&self) -> &[u8; AES_BLOCK_LEN] {
        &self.0
    }
}

impl std::fmt::Debug for Aes128Key {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Aes128Key(..)")
    }
}

/// A two-key triple-DES key laid out as K1 ‖ K2 and applied EDE as K1,K2,K1.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct TdesKey([u8; 16]);

impl TdesKey {
    pub const fn new(bytes: [u8; 16]) -> Self {
        Self(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let bytes: [u8; 16] = bytes.try_into().map_err(|_| CryptoError::InvalidLength {
            expected: 16,
            actual: bytes.len(),
        })?;
        Ok(Self(bytes))
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    fn schedule(&self) -> TdesEde2 {
        TdesEde2::new(GenericArray::from_slice(&self.0))
    }
}

impl std::fmt::Debug for TdesKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "TdesKey(..)")
    }
}

/// Single-block AES-128.
pub fn aes128_block(
    key: &Aes128Key,
    block: &[u8; AES_BLOCK_LEN],
    direction: Direction,
) -> [u8; AES_BLOCK_LEN] {
    let cipher = Aes128::new(GenericArray::from_slice(&key.0));
    let mut buf = GenericArray::clone_from_slice(block);
    match direction {
        Direction::Encrypt => cipher.encrypt_block(&mut buf),
        Direction::Decrypt => cipher.decrypt_block(&mut buf),
    }
    buf.into()
}

/// Single-block two-key EDE triple DES.
pub fn tdes_block(
    key: &TdesKey,
    block: &[u8; DES_BLOCK_LEN],
    direction: Direction,
) -> [u8; DES_BLOCK_LEN] {
    let cipher = key.schedule();
    let mut buf = GenericArray::clone_from_slice(block);
    match direction {
        Direction::Encrypt => cipher.encrypt_block(&mut buf),
        Direction::Decrypt => cipher.decrypt_block(&mut buf),
    }
    buf.into()
}

/// AES-CTR keystream: block i is `AES(key, iv + i)` with the IV read as a
/// 128-bit big-endian counter, truncated to `length` octets.
pub fn ctr_keystream(
    key: &Aes128Key,
    iv: &[u8; AES_BLOCK_LEN],
    length: usize,
) -> Result<Vec<u8>, CryptoError> {
    if length > MAX_KEYSTREAM_LEN {
        return Err(CryptoError::KeystreamTooLong { requested: length });
    }
    let base = u128::from_be_bytes(*iv);
    let mut out = Vec::with_capacity(length);
    let mut index = 0u128;
    while out.len() < length {
        let counter = base.wrapping_add(index).to_be_bytes();
        let block = aes128_block(key, &counter, Direction::Encrypt);
        let take = (length - out.len()).min(AES_BLOCK_LEN);
        out.extend_from_slice(&block[..take]);
        index += 1;
    }
    Ok(out)
}

/// Key for [`cbc_mac`]: the block size follows the cipher.
#[derive(Debug, Clone, Copy)]
pub enum MacKey<'a> {
    Aes(&'a Aes128Key),
    Tdes(&'a TdesKey),
}

/// Truncated CBC-MAC over `length(message) ‖ message`, zero-padded to a block
/// multiple, chained from a zero IV. The 4-octet big-endian length prefix
/// blocks extension; the final block is truncated to 8 octets.
pub fn cbc_mac(key: MacKey<'_>, message: &[u8]) -> [u8; MAC_LEN] {
    let block_len = match key {
        MacKey::Aes(_) => AES_BLOCK_LEN,
        MacKey::Tdes(_) => DES_BLOCK_LEN,
    };
    let mut data = Vec::with_capacity(4 + message.len() + block_len);
    data.extend_from_slice(&(message.len() as u32).to_be_bytes());
    data.extend_from_slice(message);
    while data.len() % block_len != 0 {
        data.push(0);
    }

    let mut chain = vec![0u8; block_len];
    for block in data.chunks_exact(block_len) {
        for (c, b) in chain.iter_mut().zip(block) {
            *c ^= b;
        }
        match key {
            MacKey::Aes(k) => {
                let buf: [u8; AES_BLOCK_LEN] = chain.as_slice().try_into().unwrap();
                chain = aes128_block(k, &buf, Direction::Encrypt).to_vec();
            }
            MacKey::Tdes(k) => {
                let buf: [u8; DES_BLOCK_LEN] = chain.as_slice().try_into().unwrap();
                chain = tdes_block(k, &buf, Direction::Encrypt).to_vec();
            }
        }
    }
    chain[..MAC_LEN].try_into().unwrap()
}

/// Two-key 3DES in CBC mode with a zero IV. Input must be a multiple of the
/// DES block size; the EMM service-key field is exactly two blocks.
pub fn tdes_cbc(key: &TdesKey, data: &[u8], direction: Direction) -> Result<Vec<u8>, CryptoError> {
    if data.len() % DES_BLOCK_LEN != 0 {
        return Err(CryptoError::InvalidLength {
            expected: DES_BLOCK_LEN * (data.len() / DES_BLOCK_LEN + 1),
            actual: data.len(),
        });
    }
    let mut out = Vec::with_capacity(data.len());
    let mut chain = [0u8; DES_BLOCK_LEN];
    for block in data.chunks_exact(DES_BLOCK_LEN) {
        let block: [u8; DES_BLOCK_LEN] = block.try_into().unwrap();
        match direction {
            Direction::Encrypt => {
                let mut buf = block;
                for (b, c) in buf.iter_mut().zip(&chain) {
                    *b ^= c;
                }
                chain = tdes_block(key, &buf, Direction::Encrypt);
                out.extend_from_slice(&chain);
            }
            Direction::Decrypt => {
                let mut plain = tdes_block(key, &block, Direction::Decrypt);
                for (p, c) in plain.iter_mut().zip(&chain) {
                    *p ^= c;
                }
                chain = block;
                out.extend_from_slice(&plain);
            }
        }
    }
    Ok(out)
}

/// Deterministic counter-mode generator. Identical (seed, counter) states
/// produce identical output; the counter advances by one per 16-octet block
/// so no output block repeats before the 128-bit counter wraps.
#[derive(Clone, PartialEq, Eq)]
pub struct Prng {
    seed_key: Aes128Key,
    counter: u128,
}

impl Prng {
    pub fn new(seed_key: Aes128Key, counter: u128) -> Self {
        Self { seed_key, counter }
    }

    pub fn counter(&self) -> u128 {
        self.counter
    }

    /// Draws `length` octets and advances the counter by ceil(length/16).
    pub fn next_bytes(&mut self, length: usize) -> Vec<u8> {
        let iv = self.counter.to_be_bytes();
        // length is bounded by callers well below the keystream cap
        let out = ctr_keystream(&self.seed_key, &iv, length).expect("keystream cap");
        self.counter = self
            .counter
            .wrapping_add(length.div_ceil(AES_BLOCK_LEN) as u128);
        out
    }

    pub fn next_block(&mut self) -> [u8; AES_BLOCK_LEN] {
        self.next_bytes(AES_BLOCK_LEN).try_into().unwrap()
    }

    pub fn next_key(&mut self) -> Aes128Key {
        Aes128Key::new(self.next_block())
    }
}

impl std::fmt::Debug for Prng {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Prng").field("counter", &self.counter).finish()
    }
}

/// Session-key derivation: AES(pairing_secret, n_stb XOR n_card). Both ends
/// compute it from the same nonces, and the XOR makes it order-independent.
pub fn kdf_session(
    n_stb: &[u8; AES_BLOCK_LEN],
    n_card: &[u8; AES_BLOCK_LEN],
    pairing_secret: &Aes128Key,
) -> Aes128Key {
    let mut mixed = [0u8; AES_BLOCK_LEN];
    for (m, (a, b)) in mixed.iter_mut().zip(n_stb.iter().zip(n_card)) {
        *m = a ^ b;
    }
    Aes128Key::new(aes128_block(pairing_secret, &mixed, Direction::Encrypt))
}

/// Known-answer results for every primitive, as `(name, lowercase hex)`
/// pairs. The expected values are pinned in tests against vectors computed
/// with an independent implementation.
pub fn known_answer_report() -> Vec<(&'static str, String)> {
    let aes_key = Aes128Key::new(hex_array("000102030405060708090a0b0c0d0e0f"));
    let aes_pt: [u8; 16] = hex_array("00112233445566778899aabbccddeeff");
    let aes_ct = aes128_block(&aes_key, &aes_pt, Direction::Encrypt);

    let tdes_key = TdesKey::new(hex_array("0123456789abcdef23456789abcdef01"));
    let tdes_pt: [u8; 8] = hex_array("4e6f772069732074");
    let tdes_ct = tdes_block(&tdes_key, &tdes_pt, Direction::Encrypt);

    let rsa_c = rsa_apply(&17u32.into(), &3233u32.into(), &65u32.into()).unwrap();
    let rsa_m = rsa_apply(&2753u32.into(), &3233u32.into(), &rsa_c).unwrap();

    let ctr = ctr_keystream(&aes_key, &[0u8; 16], 16).unwrap();

    let mut prng = Prng::new(
        Aes128Key::new(hex_array("0f0e0d0c0b0a09080706050403020100")),
        0,
    );
    let prng_block = prng.next_block();

    let kdf = kdf_session(
        &hex_array("00000000000000000000000000000001"),
        &hex_array("ffffffffffffffffffffffffffffffff"),
        &Aes128Key::new(hex_array("2b7e151628aed2a6abf7158809cf4f3c")),
    );

    vec![
        ("aes128_encrypt", hex::encode(aes_ct)),
        (
            "aes128_decrypt",
            hex::encode(aes128_block(&aes_key, &aes_ct, Direction::Decrypt)),
        ),
        ("tdes_encrypt", hex::encode(tdes_ct)),
        (
            "tdes_decrypt",
            hex::encode(tdes_block(&tdes_key, &tdes_ct, Direction::Decrypt)),
        ),
        ("rsa_encrypt", format!("{rsa_c:x}")),
        ("rsa_decrypt", format!("{rsa_m:x}")),
        ("ctr_keystream", hex::encode(ctr)),
        (
            "cbc_mac_aes",
            hex::encode(cbc_mac(MacKey::Aes(&aes_key), b"abc")),
        ),
        (
            "cbc_mac_tdes",
            hex::encode(cbc_mac(MacKey::Tdes(&tdes_key), b"abc")),
        ),
        ("prng_block", hex::encode(prng_block)),
        ("kdf_session", hex::encode(kdf.as_bytes())),
    ]
}

fn hex_array<const N: usize>(s: &str) -> [u8; N] {
    let mut out = [0u8; N];
    hex::decode_to_slice(s, &mut out).expect("valid hex literal");
    out
}
