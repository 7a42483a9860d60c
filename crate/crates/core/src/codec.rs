//! Face output codes and the sealed-record envelope.
//!
//! A code packs 48 sign-quantization bits from an embedding plus a 16-bit
//! disambiguation sequence into 64 payload bits, rendered as
//! `FC-` + 16 base32 characters + `-` + 2 base32 checksum characters. The
//! checksum is the top 10 bits of a CRC-16/CCITT-FALSE over the payload.
//!
//! Sealed records wrap plaintext in authenticated encryption with the byte
//! layout `version(1) | nonce(16) | len(u32 le) | ciphertext | tag(16)`.

use crate::faceml::Embedding;
use crate::wire::{Reader, WireError, Writer};
use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{Key, XChaCha20Poly1305, XNonce};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Number of quantization bits carried by a code.
pub const QUANT_BITS: usize = 48;

const QUANT_MASK: u64 = (1 << QUANT_BITS) - 1;
const ALPHABET: &[u8; 32] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ234567";
const CODE_LEN: usize = 22; // "FC-" + 16 + "-" + 2
const ENVELOPE_VERSION: u8 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("malformed face output code")]
    MalformedCode,
    #[error("face output code checksum mismatch")]
    ChecksumError,
    #[error("embedding has no weights to quantize")]
    EmptyEmbedding,
    #[error("seal key must be 32 bytes, got {got}")]
    KeyError { got: usize },
    #[error("sealed record failed authentication")]
    AuthenticationFailure,
}

const fn crc_table() -> [u16; 256] {
    let mut table = [0u16; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = (i as u16) << 8;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 0x8000 != 0 {
                (crc << 1) ^ 0x1021
            } else {
                crc << 1
            };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

static CRC_TABLE: [u16; 256] = crc_table();

/// CRC-16/CCITT-FALSE: polynomial 0x1021, init 0xFFFF, no reflection.
pub fn crc16_ccitt_false(bytes: &[u8]) -> u16 {
    let mut crc = 0xFFFFu16;
    for &b in bytes {
        crc = (crc << 8) ^ CRC_TABLE[(((crc >> 8) ^ b as u16) & 0xFF) as usize];
    }
    crc
}

fn decode_char(c: u8) -> Option<u64> {
    match c {
        b'A'..=b'Z' => Some((c - b'A') as u64),
        b'2'..=b'7' => Some((c - b'2') as u64 + 26),
        _ => None,
    }
}

/// A face output code: the text primary key for one human identity.
///
/// Codes order numerically by `(quantization bits, seq)` — the canonical
/// storage order. Match tie-breaking compares rendered text instead.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FaceOutputCode {
    quant: u64,
    seq: u16,
}

impl FaceOutputCode {
    pub fn new(quant: u64, seq: u16) -> Self {
        debug_assert_eq!(quant & !QUANT_MASK, 0, "quantization bits exceed 48");
        Self {
            quant: quant & QUANT_MASK,
            seq,
        }
    }

    /// Quantizes an embedding: bit `i` is 1 when weight `i` is >= 0 (zero
    /// counts as positive), for the first 48 weights; missing bits are 0.
    pub fn derive(embedding: &Embedding, seq: u16) -> Result<Self, CodecError> {
        let weights = embedding.weights();
        if weights.is_empty() {
            return Err(CodecError::EmptyEmbedding);
        }
        Ok(Self::new(quantize(weights), seq))
    }

    pub fn quant_bits(&self) -> u64 {
        self.quant
    }

    pub fn seq(&self) -> u16 {
        self.seq
    }

    /// Renders the canonical text form.
    pub fn render(&self) -> String {
        let payload = (self.quant << 16) | self.seq as u64;
        // 64 payload bits followed by 16 zero pad bits fill 16 base32 chars.
        let stream = (payload as u128) << 16;
        let mut text = String::with_capacity(CODE_LEN);
        text.push_str("FC-");
        for group in 0..16 {
            let index = ((stream >> (80 - 5 * (group + 1))) & 31) as usize;
            text.push(ALPHABET[index] as char);
        }
        text.push('-');
        let check = crc16_ccitt_false(&payload.to_be_bytes()) >> 6;
        text.push(ALPHABET[((check >> 5) & 31) as usize] as char);
        text.push(ALPHABET[(check & 31) as usize] as char);
        text
    }

    /// Parses canonical text, validating grammar, pad bits and checksum.
    pub fn parse(text: &str) -> Result<Self, CodecError> {
        let bytes = text.as_bytes();
        if bytes.len() != CODE_LEN || &bytes[..3] != b"FC-" || bytes[19] != b'-' {
            return Err(CodecError::MalformedCode);
        }
        let mut stream: u128 = 0;
        for &c in &bytes[3..19] {
            stream = (stream << 5) | decode_char(c).ok_or(CodecError::MalformedCode)? as u128;
        }
        if stream & 0xFFFF != 0 {
            // Non-zero pad bits cannot come from render().
            return Err(CodecError::MalformedCode);
        }
        let payload = (stream >> 16) as u64;
        let mut check: u16 = 0;
        for &c in &bytes[20..22] {
            check = (check << 5) | decode_char(c).ok_or(CodecError::MalformedCode)? as u16;
        }
        if check != crc16_ccitt_false(&payload.to_be_bytes()) >> 6 {
            return Err(CodecError::ChecksumError);
        }
        Ok(Self {
            quant: payload >> 16,
            seq: payload as u16,
        })
    }

    /// Hamming distance over the 48 quantization bits; seq is excluded.
    pub fn hamming(&self, other: &Self) -> u32 {
        ((self.quant ^ other.quant) & QUANT_MASK).count_ones()
    }
}

/// Sign-quantizes up to the first 48 weights into packed bits, first weight
/// in the most significant position.
pub fn quantize(weights: &[f64]) -> u64 {
    let mut bits = 0u64;
    for (i, &w) in weights.iter().take(QUANT_BITS).enumerate() {
        if w >= 0.0 {
            bits |= 1 << (QUANT_BITS - 1 - i);
        }
    }
    bits
}

impl std::fmt::Display for FaceOutputCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.render())
    }
}

impl Serialize for FaceOutputCode {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.render())
    }
}

impl<'de> Deserialize<'de> for FaceOutputCode {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        FaceOutputCode::parse(&text).map_err(D::Error::custom)
    }
}

/// 32-byte symmetric key for sealing code records.
#[derive(Clone)]
pub struct SealKey([u8; 32]);

impl SealKey {
    pub fn from_slice(bytes: &[u8]) -> Result<Self, CodecError> {
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| CodecError::KeyError { got: bytes.len() })?;
        Ok(Self(arr))
    }

    pub fn from_hex(hex: &str) -> Result<Self, CodecError> {
        if hex.len() != 64 {
            return Err(CodecError::KeyError { got: hex.len() / 2 });
        }
        let mut bytes = [0u8; 32];
        for (i, chunk) in hex.as_bytes().chunks(2).enumerate() {
            let s = std::str::from_utf8(chunk).map_err(|_| CodecError::KeyError { got: 0 })?;
            bytes[i] = u8::from_str_radix(s, 16).map_err(|_| CodecError::KeyError { got: 0 })?;
        }
        Ok(Self(bytes))
    }

    /// Verifies and decrypts a sealed record.
    pub fn open(&self, record: &SealedRecord) -> Result<Vec<u8>, CodecError> {
        if record.version != ENVELOPE_VERSION {
            return Err(CodecError::AuthenticationFailure);
        }
        let mut xnonce = [0u8; 24];
        xnonce[..16].copy_from_slice(&record.nonce);
        let cipher = XChaCha20Poly1305::new(Key::from_slice(&self.0));
        let mut combined = record.ciphertext.clone();
        combined.extend_from_slice(&record.tag);
        cipher
            .decrypt(XNonce::from_slice(&xnonce), combined.as_slice())
            .map_err(|_| CodecError::AuthenticationFailure)
    }
}

impl std::fmt::Debug for SealKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SealKey(..)")
    }
}

/// Authenticated envelope for a record at rest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SealedRecord {
    pub version: u8,
    pub nonce: [u8; 16],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; 16],
}

impl SealedRecord {
    pub fn write_to(&self, w: &mut Writer) {
        w.put_u8(self.version);
        w.put_raw(&self.nonce);
        w.put_u32(self.ciphertext.len() as u32);
        w.put_raw(&self.ciphertext);
        w.put_raw(&self.tag);
    }

    pub fn read_from(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let version = r.u8()?;
        let nonce: [u8; 16] = r.take(16)?.try_into().unwrap();
        let len = r.u32()? as usize;
        let ciphertext = r.take(len)?.to_vec();
        let tag: [u8; 16] = r.take(16)?.try_into().unwrap();
        Ok(Self {
            version,
            nonce,
            ciphertext,
            tag,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write_to(&mut w);
        w.into_bytes()
    }

    /// Truncation and tag damage are indistinguishable to callers.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let record = Self::read_from(&mut r).map_err(|_| CodecError::AuthenticationFailure)?;
        if !r.is_empty() {
            return Err(CodecError::AuthenticationFailure);
        }
        Ok(record)
    }
}

/// Seals records under one key with a keyed deterministic nonce stream.
///
/// Nonces are drawn from a ChaCha stream keyed by `(seal key, stream id)` at
/// a persisted position, which gives the uniqueness of random nonces while
/// keeping a node's output a pure function of its operation history. The
/// position must be persisted and restored so a restarted node never reuses
/// a nonce. Callers serialize access through the node's writer lock.
pub struct Sealer {
    key: SealKey,
    stream: ChaCha20Rng,
    sealed_count: u64,
}

impl Sealer {
    pub fn new(key: SealKey, stream_id: &str, sealed_count: u64) -> Self {
        let mut seed = key.0;
        for (i, b) in stream_id.bytes().enumerate() {
            seed[i % 32] ^= b.wrapping_add((i / 32) as u8);
        }
        let mut stream = ChaCha20Rng::from_seed(seed);
        // One 16-byte nonce consumes exactly four stream words.
        stream.set_word_pos(sealed_count as u128 * 4);
        Self {
            key,
            stream,
            sealed_count,
        }
    }

    /// Number of seals performed; persisted so the nonce stream resumes
    /// past every nonce already used.
    pub fn sealed_count(&self) -> u64 {
        self.sealed_count
    }

    pub fn key(&self) -> &SealKey {
        &self.key
    }

    pub fn seal(&mut self, plaintext: &[u8]) -> SealedRecord {
        let mut nonce = [0u8; 16];
        self.stream.fill_bytes(&mut nonce);
        self.sealed_count += 1;
        let mut xnonce = [0u8; 24];
        xnonce[..16].copy_from_slice(&nonce);
        let cipher = XChaCha20Poly1305::new(Key::from_slice(&self.key.0));
        let mut combined = cipher
            .encrypt(XNonce::from_slice(&xnonce), plaintext)
            .expect("in-memory encryption cannot fail");
        let tag_start = combined.len() - 16;
        let tag: [u8; 16] = combined[tag_start..].try_into().unwrap();
        combined.truncate(tag_start);
        SealedRecord {
            version: ENVELOPE_VERSION,
            nonce,
            ciphertext: combined,
            tag,
        }
    }

    pub fn open(&self, record: &SealedRecord) -> Result<Vec<u8>, CodecError> {
        self.key.open(record)
    }
}

fn seal_with_nonce(key: &SealKey, nonce: [u8; 16], plaintext: &[u8]) -> SealedRecord {
    let mut xnonce = [0u8; 24];
    xnonce[..16].copy_from_slice(&nonce);
    let cipher = XChaCha20Poly1305::new(Key::from_slice(&key.0));
    let mut combined = cipher
        .encrypt(XNonce::from_slice(&xnonce), plaintext)
        .expect("in-memory encryption cannot fail");
    let tag_start = combined.len() - 16;
    let tag: [u8; 16] = combined[tag_start..].try_into().unwrap();
    combined.truncate(tag_start);
    SealedRecord {
        version: ENVELOPE_VERSION,
        nonce,
        ciphertext: combined,
        tag,
    }
}

/// Re-seals text whose record was re-keyed during conflict resolution. The
/// nonce derives from the original envelope, so every node that resolves
/// the same conflict computes identical replacement bytes.
pub(crate) fn reseal_derived(
    key: &SealKey,
    original: &SealedRecord,
    plaintext: &[u8],
) -> SealedRecord {
    let mut seed = key.0;
    for (i, b) in original
        .nonce
        .iter()
        .chain(&original.tag)
        .cloned()
        .enumerate()
    {
        seed[i % 32] ^= b.wrapping_mul(2).wrapping_add(1);
    }
    let mut stream = ChaCha20Rng::from_seed(seed);
    let mut nonce = [0u8; 16];
    stream.fill_bytes(&mut nonce);
    seal_with_nonce(key, nonce, plaintext)
}
