//! Symmetric envelope used for every protocol payload.
//!
//! A [`SealedMessage`] is AES-128-CBC with PKCS#7 padding, followed by an
//! HMAC-SHA256 tag over `iv || ciphertext` (encrypt-then-MAC). The tag is
//! checked in constant time before any decryption output is produced, and a
//! bad padding is reported as [`CryptoError::TagMismatch`] so that callers
//! can never observe the difference.

use std::fmt;

use aes::Aes128;
use cbc::cipher::block_padding::Pkcs7;
use cbc::cipher::{BlockModeDecrypt, BlockModeEncrypt, KeyIvInit};
use hmac::{Hmac, KeyInit, Mac};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

pub const KEY_LEN: usize = 16;
pub const NONCE_LEN: usize = 16;
pub const IV_LEN: usize = 16;
pub const TAG_LEN: usize = 32;
pub const BLOCK_LEN: usize = 16;

/// Plaintexts must be strictly shorter than this.
pub const MAX_PLAINTEXT: usize = 1 << 24;

type HmacSha256 = Hmac<Sha256>;
type Aes128CbcEnc = cbc::Encryptor<Aes128>;
type Aes128CbcDec = cbc::Decryptor<Aes128>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("plaintext of {0} bytes exceeds the envelope limit")]
    SizeError(usize),
    #[error("authentication tag mismatch")]
    TagMismatch,
    #[error("malformed sealed message: {0}")]
    Malformed(&'static str),
    #[error("invalid key or nonce encoding: {0}")]
    Encoding(String),
}

/// A 128-bit symmetric key. `Debug` never prints the key bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SymmetricKey([u8; KEY_LEN]);

impl SymmetricKey {
    pub const fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; KEY_LEN] = bytes
            .try_into()
            .map_err(|_| CryptoError::Encoding(format!("key must be {KEY_LEN} bytes, got {}", bytes.len())))?;
        Ok(Self(arr))
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let bytes = hex::decode(s.trim()).map_err(|e| CryptoError::Encoding(e.to_string()))?;
        Self::from_slice(&bytes)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Short non-secret fingerprint for logs.
    pub fn fingerprint(&self) -> String {
        let digest = mac_parts(self, &[b"fingerprint"]);
        hex::encode(&digest[..4])
    }
}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SymmetricKey({})", self.fingerprint())
    }
}

impl Serialize for SymmetricKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for SymmetricKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// A 128-bit random challenge value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Nonce(pub [u8; NONCE_LEN]);

impl Nonce {
    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; NONCE_LEN] = bytes
            .try_into()
            .map_err(|_| CryptoError::Encoding(format!("nonce must be {NONCE_LEN} bytes")))?;
        Ok(Self(arr))
    }

    pub fn as_bytes(&self) -> &[u8; NONCE_LEN] {
        &self.0
    }
}

/// Cryptographic RNG handle. Seeded handles are deterministic and exist for
/// reproducible tests and simulations.
#[derive(Debug, Clone)]
pub struct KeyRng(ChaCha20Rng);

impl KeyRng {
    pub fn from_entropy() -> Self {
        Self(ChaCha20Rng::from_os_rng())
    }

    pub fn from_seed(seed: u64) -> Self {
        Self(ChaCha20Rng::seed_from_u64(seed))
    }

    pub fn new(seed: Option<u64>) -> Self {
        seed.map_or_else(Self::from_entropy, Self::from_seed)
    }

    /// Derive an independent child stream, e.g. one per device in a fleet.
    pub fn fork(&mut self, label: u64) -> Self {
        let mut seed = [0u8; 32];
        self.0.fill_bytes(&mut seed);
        for (i, b) in label.to_be_bytes().iter().enumerate() {
            seed[i] ^= b;
        }
        Self(ChaCha20Rng::from_seed(seed))
    }

    pub fn key(&mut self) -> SymmetricKey {
        let mut k = [0u8; KEY_LEN];
        self.0.fill_bytes(&mut k);
        SymmetricKey(k)
    }

    pub fn nonce(&mut self) -> Nonce {
        let mut n = [0u8; NONCE_LEN];
        self.0.fill_bytes(&mut n);
        Nonce(n)
    }

    pub fn fill(&mut self, buf: &mut [u8]) {
        self.0.fill_bytes(buf);
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Fresh 128-bit key; a seed makes the output deterministic.
pub fn generate_key(rng_seed: Option<u64>) -> SymmetricKey {
    KeyRng::new(rng_seed).key()
}

/// `iv(16) || tag(32) || ciphertext`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedMessage {
    pub iv: [u8; IV_LEN],
    pub ciphertext: Vec<u8>,
    pub tag: Vec<u8>,
}

impl SealedMessage {
    pub fn encoded_len(&self) -> usize {
        IV_LEN + self.tag.len() + self.ciphertext.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.iv);
        out.extend_from_slice(&self.tag);
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() < IV_LEN + TAG_LEN + BLOCK_LEN {
            return Err(CryptoError::Malformed("too short"));
        }
        let ct = &bytes[IV_LEN + TAG_LEN..];
        if !ct.len().is_multiple_of(BLOCK_LEN) {
            return Err(CryptoError::Malformed("ciphertext is not block aligned"));
        }
        let mut iv = [0u8; IV_LEN];
        iv.copy_from_slice(&bytes[..IV_LEN]);
        Ok(Self {
            iv,
            tag: bytes[IV_LEN..IV_LEN + TAG_LEN].to_vec(),
            ciphertext: ct.to_vec(),
        })
    }
}

pub fn seal(key: &SymmetricKey, plaintext: &[u8], rng: &mut KeyRng) -> Result<SealedMessage, CryptoError> {
    if plaintext.len() >= MAX_PLAINTEXT {
        return Err(CryptoError::SizeError(plaintext.len()));
    }
    let mut iv = [0u8; IV_LEN];
    rng.fill(&mut iv);
    Ok(seal_with_iv(key, plaintext, iv))
}

pub(crate) fn seal_with_iv(key: &SymmetricKey, plaintext: &[u8], iv: [u8; IV_LEN]) -> SealedMessage {
    let ciphertext = Aes128CbcEnc::new(key.as_bytes().into(), &iv.into()).encrypt_padded_vec::<Pkcs7>(plaintext);
    let tag = mac_parts(key, &[&iv, &ciphertext]).to_vec();
    SealedMessage { iv, ciphertext, tag }
}

pub fn open(key: &SymmetricKey, msg: &SealedMessage) -> Result<Vec<u8>, CryptoError> {
    if msg.ciphertext.is_empty() || !msg.ciphertext.len().is_multiple_of(BLOCK_LEN) {
        return Err(CryptoError::TagMismatch);
    }
    if !verify_mac(key, &[&msg.iv, &msg.ciphertext], &msg.tag) {
        return Err(CryptoError::TagMismatch);
    }
    Aes128CbcDec::new(key.as_bytes().into(), &msg.iv.into())
        .decrypt_padded_vec::<Pkcs7>(&msg.ciphertext)
        .map_err(|_| CryptoError::TagMismatch)
}

/// HMAC-SHA256 over the concatenation of `parts`.
pub fn mac_parts(key: &SymmetricKey, parts: &[&[u8]]) -> [u8; TAG_LEN] {
    let mut mac = <HmacSha256 as KeyInit>::new_from_slice(key.as_bytes()).expect("hmac accepts any key length");
    for p in parts {
        mac.update(p);
    }
    mac.finalize().into_bytes().into()
}

/// Constant-time tag check; a tag of the wrong length is rejected.
pub fn verify_mac(key: &SymmetricKey, parts: &[&[u8]], tag: &[u8]) -> bool {
    let mut mac = <HmacSha256 as KeyInit>::new_from_slice(key.as_bytes()).expect("hmac accepts any key length");
    for p in parts {
        mac.update(p);
    }
    mac.verify_slice(tag).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use aes::cipher::{BlockCipherEncrypt, block_padding::NoPadding};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn h(s: &str) -> Vec<u8> {
        hex::decode(s).unwrap()
    }

    #[test]
    fn seeded_keys_are_deterministic() {
        assert_eq!(generate_key(Some(7)), generate_key(Some(7)));
        assert_ne!(generate_key(Some(7)), generate_key(Some(8)));
    }

    #[test]
    fn unseeded_keys_do_not_collide() {
        // Birthday bound: p(collision) <= n^2 / 2^(bits+1).
        let n = 10_000f64;
        let bound = n * n / 2f64.powi(129);
        assert!(bound < 1e-30);
        let keys: HashSet<_> = (0..10_000).map(|_| generate_key(None)).collect();
        assert_eq!(keys.len(), 10_000);
    }

    #[test]
    fn fips197_aes128_block() {
        let key = h("000102030405060708090a0b0c0d0e0f");
        let cipher = <Aes128 as aes::cipher::KeyInit>::new_from_slice(&key).unwrap();
        let mut block = aes::Block::try_from(&h("00112233445566778899aabbccddeeff")[..]).unwrap();
        cipher.encrypt_block(&mut block);
        assert_eq!(block.to_vec(), h("69c4e0d86a7b0430d8cdb78070b4c55a"));
    }

    #[test]
    fn sp800_38a_cbc_aes128() {
        let key: [u8; 16] = h("2b7e151628aed2a6abf7158809cf4f3c").try_into().unwrap();
        let iv: [u8; 16] = h("000102030405060708090a0b0c0d0e0f").try_into().unwrap();
        let pt = h(concat!(
            "6bc1bee22e409f96e93d7e117393172a",
            "ae2d8a571e03ac9c9eb76fac45af8e51",
            "30c81c46a35ce411e5fbc1191a0a52ef",
            "f69f2445df4f9b17ad2b417be66c3710"
        ));
        let ct = Aes128CbcEnc::new(&key.into(), &iv.into()).encrypt_padded_vec::<NoPadding>(&pt);
        assert_eq!(
            ct,
            h(concat!(
                "7649abac8119b246cee98e9b12e9197d",
                "5086cb9b507219ee95db113a917678b2",
                "73bed6b8e3c1743b7116e69e22229516",
                "3ff1caa1681fac09120eca307586e1a7"
            ))
        );
    }

    #[test]
    fn rfc4231_hmac_sha256() {
        let mut mac = <HmacSha256 as KeyInit>::new_from_slice(&[0x0b; 20]).unwrap();
        mac.update(b"Hi There");
        assert_eq!(
            mac.finalize().into_bytes().to_vec(),
            h("b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7")
        );
        let mut mac = <HmacSha256 as KeyInit>::new_from_slice(b"Jefe").unwrap();
        mac.update(b"what do ya want for nothing?");
        assert_eq!(
            mac.finalize().into_bytes().to_vec(),
            h("5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843")
        );
    }

    #[test]
    fn round_trip_empty_and_one_kib() {
        let mut rng = KeyRng::from_seed(1);
        let k = rng.key();
        let sealed = seal(&k, b"", &mut rng).unwrap();
        assert_eq!(sealed.ciphertext.len(), 16);
        assert_eq!(open(&k, &sealed).unwrap(), b"");

        let mut m = vec![0u8; 1024];
        rng.fill(&mut m);
        let sealed = seal(&k, &m, &mut rng).unwrap();
        assert_eq!(open(&k, &sealed).unwrap(), m);
    }

    #[test]
    fn iv_is_fresh_per_seal() {
        let mut rng = KeyRng::from_seed(2);
        let k = rng.key();
        let a = seal(&k, b"same", &mut rng).unwrap();
        let b = seal(&k, b"same", &mut rng).unwrap();
        assert_ne!(a.iv, b.iv);
        assert_ne!(a.ciphertext, b.ciphertext);
    }

    #[test]
    fn oversize_plaintext_rejected() {
        let mut rng = KeyRng::from_seed(3);
        let k = rng.key();
        let big = vec![0u8; MAX_PLAINTEXT];
        assert_eq!(seal(&k, &big, &mut rng), Err(CryptoError::SizeError(MAX_PLAINTEXT)));
    }

    #[test]
    fn wrong_key_and_truncated_tag_rejected() {
        let mut rng = KeyRng::from_seed(4);
        let (k1, k2) = (rng.key(), rng.key());
        let mut sealed = seal(&k1, b"payload", &mut rng).unwrap();
        assert_eq!(open(&k2, &sealed), Err(CryptoError::TagMismatch));
        sealed.tag.pop();
        assert_eq!(open(&k1, &sealed), Err(CryptoError::TagMismatch));
    }

    #[test]
    fn authentic_bad_padding_looks_like_tag_failure() {
        let mut rng = KeyRng::from_seed(5);
        let k = rng.key();
        let iv = [9u8; IV_LEN];
        // A block whose decryption ends in 0x00 is never valid PKCS#7.
        let ct = Aes128CbcEnc::new(k.as_bytes().into(), &iv.into()).encrypt_padded_vec::<NoPadding>(&[0u8; 16]);
        let tag = mac_parts(&k, &[&iv, &ct]).to_vec();
        let msg = SealedMessage { iv, ciphertext: ct, tag };
        assert_eq!(open(&k, &msg), Err(CryptoError::TagMismatch));
    }

    #[test]
    fn wire_encoding_layout() {
        let mut rng = KeyRng::from_seed(6);
        let k = rng.key();
        let sealed = seal(&k, b"abc", &mut rng).unwrap();
        let bytes = sealed.to_bytes();
        assert_eq!(&bytes[..16], &sealed.iv);
        assert_eq!(&bytes[16..48], &sealed.tag[..]);
        assert_eq!(&bytes[48..], &sealed.ciphertext[..]);
        assert_eq!(SealedMessage::from_bytes(&bytes).unwrap(), sealed);
        assert!(SealedMessage::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn open_inverts_seal(seed in any::<u64>(), m in proptest::collection::vec(any::<u8>(), 0..300)) {
            let mut rng = KeyRng::from_seed(seed);
            let k = rng.key();
            let sealed = seal(&k, &m, &mut rng).unwrap();
            prop_assert_eq!(open(&k, &sealed).unwrap(), m);
        }

        #[test]
        fn any_single_bit_flip_is_rejected(seed in any::<u64>(), m in proptest::collection::vec(any::<u8>(), 0..64), pos in any::<prop::sample::Index>()) {
            let mut rng = KeyRng::from_seed(seed);
            let k = rng.key();
            let mut bytes = seal(&k, &m, &mut rng).unwrap().to_bytes();
            let bit = pos.index(bytes.len() * 8);
            bytes[bit / 8] ^= 1 << (bit % 8);
            let tampered = SealedMessage::from_bytes(&bytes).unwrap();
            prop_assert_eq!(open(&k, &tampered), Err(CryptoError::TagMismatch));
        }

        #[test]
        fn distinct_keys_never_open(seed in any::<u64>(), m in proptest::collection::vec(any::<u8>(), 0..64)) {
            let mut rng = KeyRng::from_seed(seed);
            let (k1, k2) = (rng.key(), rng.key());
            prop_assume!(k1 != k2);
            let sealed = seal(&k1, &m, &mut rng).unwrap();
            prop_assert!(open(&k2, &sealed).is_err());
        }

        #[test]
        fn seeded_streams_are_identical(seed in any::<u64>()) {
            let mut a = KeyRng::from_seed(seed);
            let mut b = KeyRng::from_seed(seed);
            let (mut x, mut y) = ([0u8; 64], [0u8; 64]);
            a.fill(&mut x);
            b.fill(&mut y);
            prop_assert_eq!(x, y);
        }
    }
}
