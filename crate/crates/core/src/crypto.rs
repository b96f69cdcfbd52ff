//! Segment keys, the encrypted segment container, and hash-chain checks.
//!
//! Container layout (all integers big-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "OCTV"
//!      4     1  version (0x01)
//!      5     1  scheme (0x01 single-key, 0x02 chunked)
//!      6    12  nonce
//!     18     n  AES-256-GCM ciphertext, header bytes 0..6 as associated data
//!   18+n    16  tag
//! ```
//!
//! For the chunked scheme the outer plaintext is
//! `chunk_count (u16) || { chunk_index (u16) || len (u32) || nonce (12) || ciphertext||tag }*`
//! where every chunk is sealed under a key derived from its token.

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use rand::rngs::OsRng;
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;
use zeroize::Zeroize;

use crate::protocol::{KeyPacket, VideoId, HASH_PREFIX_LEN, KEY_LEN, TOKEN_LEN, VIDEO_ID_LEN};

pub const MAGIC: [u8; 4] = *b"OCTV";
pub const VERSION: u8 = 0x01;
pub const SCHEME_SINGLE: u8 = 0x01;
pub const SCHEME_CHUNKED: u8 = 0x02;
pub const HEADER_LEN: usize = 6;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
/// Fixed overhead of a single-key container.
pub const CONTAINER_OVERHEAD: usize = HEADER_LEN + NONCE_LEN + TAG_LEN;

const CHUNK_RECORD_HEADER: usize = 2 + 4 + NONCE_LEN;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("randomness source unavailable: {0}")]
    Randomness(String),
    #[error("container format error: {0}")]
    Format(String),
    #[error("integrity check failed")]
    Integrity,
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, CryptoError>;

/// 256-bit segment key. Zeroed on drop and never printed.
#[derive(Clone, PartialEq, Eq)]
pub struct SegmentKey([u8; KEY_LEN]);

impl SegmentKey {
    pub fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }

    fn cipher(&self) -> Aes256Gcm {
        Aes256Gcm::new_from_slice(&self.0).expect("32-byte key")
    }
}

impl Drop for SegmentKey {
    fn drop(&mut self) {
        self.0.zeroize();
    }
}

impl std::fmt::Debug for SegmentKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SegmentKey(<redacted>)")
    }
}

/// A short per-chunk secret, advertised during the chunk it unlocks.
#[derive(Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ChunkToken {
    #[serde(with = "hex_array")]
    pub token: [u8; TOKEN_LEN],
    pub chunk_index: u16,
    pub video_id: VideoId,
}

impl std::fmt::Debug for ChunkToken {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChunkToken")
            .field("chunk_index", &self.chunk_index)
            .field("video_id", &self.video_id)
            .finish_non_exhaustive()
    }
}

pub(crate) mod hex_array {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer, const N: usize>(v: &[u8; N], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(d: D) -> Result<[u8; N], D::Error> {
        let s = String::deserialize(d)?;
        let mut out = [0u8; N];
        hex::decode_to_slice(&s, &mut out).map_err(D::Error::custom)?;
        Ok(out)
    }
}

fn fill_random(buf: &mut [u8]) -> Result<()> {
    OsRng
        .try_fill_bytes(buf)
        .map_err(|e| CryptoError::Randomness(e.to_string()))
}

pub fn generate_key() -> Result<SegmentKey> {
    let mut bytes = [0u8; KEY_LEN];
    fill_random(&mut bytes)?;
    Ok(SegmentKey(bytes))
}

pub fn generate_video_id() -> Result<VideoId> {
    let mut bytes = [0u8; VIDEO_ID_LEN];
    fill_random(&mut bytes)?;
    Ok(VideoId(bytes))
}

pub fn generate_token() -> Result<[u8; TOKEN_LEN]> {
    let mut bytes = [0u8; TOKEN_LEN];
    fill_random(&mut bytes)?;
    Ok(bytes)
}

fn header(scheme: u8) -> [u8; HEADER_LEN] {
    [MAGIC[0], MAGIC[1], MAGIC[2], MAGIC[3], VERSION, scheme]
}

fn seal(key: &SegmentKey, nonce: &[u8; NONCE_LEN], aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
    key.cipher()
        .encrypt(Nonce::from_slice(nonce), Payload { msg: plaintext, aad })
        .expect("AES-GCM encryption of in-memory buffer")
}

fn open(key: &SegmentKey, nonce: &[u8], aad: &[u8], body: &[u8]) -> Result<Vec<u8>> {
    key.cipher()
        .decrypt(Nonce::from_slice(nonce), Payload { msg: body, aad })
        .map_err(|_| CryptoError::Integrity)
}

fn seal_container(scheme: u8, key: &SegmentKey, plaintext: &[u8]) -> Result<Vec<u8>> {
    let mut nonce = [0u8; NONCE_LEN];
    fill_random(&mut nonce)?;
    let head = header(scheme);
    let body = seal(key, &nonce, &head, plaintext);
    let mut out = Vec::with_capacity(HEADER_LEN + NONCE_LEN + body.len());
    out.extend_from_slice(&head);
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&body);
    Ok(out)
}

/// Reads the scheme byte after checking magic and version.
pub fn container_scheme(container: &[u8]) -> Result<u8> {
    if container.len() < CONTAINER_OVERHEAD {
        return Err(CryptoError::Format(format!(
            "container too short: {} bytes",
            container.len()
        )));
    }
    if container[..4] != MAGIC {
        return Err(CryptoError::Format("bad magic".into()));
    }
    if container[4] != VERSION {
        return Err(CryptoError::Format(format!(
            "unsupported version {:#04x}",
            container[4]
        )));
    }
    match container[5] {
        s @ (SCHEME_SINGLE | SCHEME_CHUNKED) => Ok(s),
        other => Err(CryptoError::Format(format!("unknown scheme {other:#04x}"))),
    }
}

fn open_container(expected_scheme: u8, container: &[u8], key: &SegmentKey) -> Result<Vec<u8>> {
    let scheme = container_scheme(container)?;
    if scheme != expected_scheme {
        return Err(CryptoError::Format(format!(
            "expected scheme {expected_scheme:#04x}, found {scheme:#04x}"
        )));
    }
    open(
        key,
        &container[HEADER_LEN..HEADER_LEN + NONCE_LEN],
        &container[..HEADER_LEN],
        &container[HEADER_LEN + NONCE_LEN..],
    )
}

/// Seals a whole segment under one key (scheme 0x01).
pub fn encrypt_segment(plaintext: &[u8], key: &SegmentKey) -> Result<Vec<u8>> {
    seal_container(SCHEME_SINGLE, key, plaintext)
}

pub fn decrypt_segment(container: &[u8], key: &SegmentKey) -> Result<Vec<u8>> {
    open_container(SCHEME_SINGLE, container, key)
}

/// First 21 bytes of SHA-256 over a stored container.
pub fn hash_prefix(stored_file: &[u8]) -> [u8; HASH_PREFIX_LEN] {
    let digest = Sha256::digest(stored_file);
    digest[..HASH_PREFIX_LEN].try_into().unwrap()
}

/// SHA-256(token || video_id || chunk_index BE).
pub fn derive_chunk_key(token: &ChunkToken) -> SegmentKey {
    let mut h = Sha256::new();
    h.update(token.token);
    h.update(token.video_id.0);
    h.update(token.chunk_index.to_be_bytes());
    SegmentKey(h.finalize().into())
}

/// Byte ranges of each chunk: equal ceil-sized slices, remainder last.
pub fn chunk_ranges(len: usize, chunk_count: usize) -> Vec<std::ops::Range<usize>> {
    let size = len.div_ceil(chunk_count.max(1));
    (0..chunk_count)
        .map(|i| {
            let start = (i * size).min(len);
            let end = if i + 1 == chunk_count {
                len
            } else {
                ((i + 1) * size).min(len)
            };
            start..end
        })
        .collect()
}

/// Scheme 0x02: each chunk sealed under its token-derived key, then the
/// whole record list sealed under `final_key`.
pub fn encrypt_segment_chunked(
    plaintext: &[u8],
    chunk_count: usize,
    final_key: &SegmentKey,
    tokens: &[ChunkToken],
) -> Result<Vec<u8>> {
    if chunk_count == 0 || chunk_count > u16::MAX as usize {
        return Err(CryptoError::Config(format!(
            "chunk_count must be 1..=65535, got {chunk_count}"
        )));
    }
    if tokens.len() != chunk_count {
        return Err(CryptoError::Config(format!(
            "{} tokens supplied for {chunk_count} chunks",
            tokens.len()
        )));
    }
    let video_id = tokens[0].video_id;
    for (i, t) in tokens.iter().enumerate() {
        if t.video_id != video_id {
            return Err(CryptoError::Config(format!(
                "token {i} belongs to video {}, expected {video_id}",
                t.video_id
            )));
        }
        if t.chunk_index as usize != i {
            return Err(CryptoError::Config(format!(
                "token {i} carries chunk index {}",
                t.chunk_index
            )));
        }
    }

    let mut inner = Vec::with_capacity(2 + plaintext.len() + chunk_count * (CHUNK_RECORD_HEADER + TAG_LEN));
    inner.extend_from_slice(&(chunk_count as u16).to_be_bytes());
    for (token, range) in tokens.iter().zip(chunk_ranges(plaintext.len(), chunk_count)) {
        let mut nonce = [0u8; NONCE_LEN];
        fill_random(&mut nonce)?;
        let index = token.chunk_index.to_be_bytes();
        let sealed = seal(&derive_chunk_key(token), &nonce, &chunk_aad(&video_id, &index), &plaintext[range]);
        inner.extend_from_slice(&index);
        inner.extend_from_slice(&(sealed.len() as u32).to_be_bytes());
        inner.extend_from_slice(&nonce);
        inner.extend_from_slice(&sealed);
    }
    let out = seal_container(SCHEME_CHUNKED, final_key, &inner);
    inner.zeroize();
    out
}

fn chunk_aad(video_id: &VideoId, index: &[u8; 2]) -> [u8; VIDEO_ID_LEN + 2] {
    let mut aad = [0u8; VIDEO_ID_LEN + 2];
    aad[..VIDEO_ID_LEN].copy_from_slice(&video_id.0);
    aad[VIDEO_ID_LEN..].copy_from_slice(index);
    aad
}

#[derive(Clone, PartialEq, Eq)]
pub enum ChunkContent {
    Plaintext(Vec<u8>),
    Locked,
}

impl std::fmt::Debug for ChunkContent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChunkContent::Plaintext(p) => write!(f, "Plaintext({} bytes)", p.len()),
            ChunkContent::Locked => f.write_str("Locked"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkResult {
    pub chunk_index: u16,
    pub content: ChunkContent,
}

struct ChunkRecord<'a> {
    index: u16,
    nonce: &'a [u8],
    sealed: &'a [u8],
}

fn parse_chunk_records(inner: &[u8]) -> Result<Vec<ChunkRecord<'_>>> {
    let bad = |msg: String| CryptoError::Format(format!("chunk table: {msg}"));
    if inner.len() < 2 {
        return Err(bad("missing chunk count".into()));
    }
    let count = u16::from_be_bytes([inner[0], inner[1]]) as usize;
    let mut records = Vec::with_capacity(count);
    let mut rest = &inner[2..];
    for expected in 0..count {
        if rest.len() < CHUNK_RECORD_HEADER {
            return Err(bad(format!("record {expected} truncated")));
        }
        let index = u16::from_be_bytes([rest[0], rest[1]]);
        if index as usize != expected {
            return Err(bad(format!("record {expected} has index {index}")));
        }
        let len = u32::from_be_bytes(rest[2..6].try_into().unwrap()) as usize;
        let nonce = &rest[6..CHUNK_RECORD_HEADER];
        let body = &rest[CHUNK_RECORD_HEADER..];
        if body.len() < len || len < TAG_LEN {
            return Err(bad(format!("record {expected} length {len} out of bounds")));
        }
        records.push(ChunkRecord {
            index,
            nonce,
            sealed: &body[..len],
        });
        rest = &body[len..];
    }
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    Ok(records)
}

/// Opens the outer layer, then every chunk for which a token is held.
/// Chunks without a usable token come back as [`ChunkContent::Locked`].
pub fn decrypt_segment_chunked(
    container: &[u8],
    final_key: &SegmentKey,
    tokens: &[ChunkToken],
) -> Result<Vec<ChunkResult>> {
    let mut inner = open_container(SCHEME_CHUNKED, container, final_key)?;
    let results = parse_chunk_records(&inner).map(|records| {
        records
            .iter()
            .map(|rec| {
                let content = tokens
                    .iter()
                    .filter(|t| t.chunk_index == rec.index)
                    .find_map(|t| {
                        let index = rec.index.to_be_bytes();
                        open(&derive_chunk_key(t), rec.nonce, &chunk_aad(&t.video_id, &index), rec.sealed).ok()
                    })
                    .map_or(ChunkContent::Locked, ChunkContent::Plaintext);
                ChunkResult {
                    chunk_index: rec.index,
                    content,
                }
            })
            .collect()
    });
    inner.zeroize();
    results
}

/// Per-link verdict of a hash-chain check. Entry `i` describes the link
/// from packet `i` back to stored file `i - 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkStatus {
    Ok,
    Mismatch,
    /// First packet with the all-zero sentinel prefix.
    NoPredecessor,
    /// First packet whose predecessor is not part of the checked range.
    Unanchored,
    /// The predecessor's stored file was not available.
    Unavailable,
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct HashChainReport {
    pub statuses: Vec<LinkStatus>,
    /// Index of the first stored file whose hash disagrees with its successor packet.
    pub first_mismatch: Option<usize>,
}

impl HashChainReport {
    pub fn all_ok(&self) -> bool {
        self.first_mismatch.is_none() && !self.statuses.contains(&LinkStatus::Unavailable)
    }

    /// Indices of stored files flagged as modified.
    pub fn mismatched_files(&self) -> Vec<usize> {
        self.statuses
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == LinkStatus::Mismatch)
            .map(|(i, _)| i - 1)
            .collect()
    }
}

/// One segment as seen by a verifier: its stored container (if available)
/// and the predecessor prefix its own key packet announced.
#[derive(Clone, Copy, Debug)]
pub struct ChainLink<'a> {
    pub stored_file: Option<&'a [u8]>,
    pub prev_hash_prefix: [u8; HASH_PREFIX_LEN],
}

pub fn verify_links(links: &[ChainLink<'_>]) -> HashChainReport {
    let statuses: Vec<LinkStatus> = links
        .iter()
        .enumerate()
        .map(|(i, link)| {
            if i == 0 {
                return if link.prev_hash_prefix == [0u8; HASH_PREFIX_LEN] {
                    LinkStatus::NoPredecessor
                } else {
                    LinkStatus::Unanchored
                };
            }
            match links[i - 1].stored_file {
                None => LinkStatus::Unavailable,
                Some(file) if hash_prefix(file) == link.prev_hash_prefix => LinkStatus::Ok,
                Some(_) => LinkStatus::Mismatch,
            }
        })
        .collect();
    let first_mismatch = statuses
        .iter()
        .position(|s| *s == LinkStatus::Mismatch)
        .map(|i| i - 1);
    HashChainReport {
        statuses,
        first_mismatch,
    }
}

/// Checks segments ordered by sequence: each item is a stored container and
/// the key packet that was broadcast for that same segment.
pub fn verify_chain(items: &[(&[u8], &KeyPacket)]) -> HashChainReport {
    let links: Vec<ChainLink<'_>> = items
        .iter()
        .map(|(file, packet)| ChainLink {
            stored_file: Some(file),
            prev_hash_prefix: packet.prev_hash_prefix,
        })
        .collect();
    verify_links(&links)
}
