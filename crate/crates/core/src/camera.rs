//! The camera daemon.
//!
//! A [`Camera`] is a state machine driven by a clock. Each segment gets a
//! fresh key and video id; its key packet is published on characteristic
//! 0x0011 at segment start and a beacon prompting listeners to read it is
//! re-advertised every `advert_interval_ms`. The packet carries the hash
//! prefix of the previous stored container. At the boundary the plaintext
//! buffer is sealed, hashed and handed to the upload policy of the
//! configured [`Mode`].
//!
//! Plaintext and keys live in memory only. Nothing is written anywhere
//! except ciphertext through the [`ObjectStore`].

use std::collections::{HashSet, VecDeque};
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use zeroize::Zeroize;

use crate::crypto::{
    self, encrypt_segment, encrypt_segment_chunked, hash_prefix, ChunkToken, CryptoError,
    SegmentKey,
};
use crate::protocol::{
    self, encode_advertisement, encode_characteristic, encode_key_packet, format_video_url,
    Advertisement, CameraDescriptor, DescriptorField, KeyPacket, Location, Mode, VideoId,
    CAMERA_ID_LEN, HASH_PREFIX_LEN, UUID_BASE_KEY, UUID_KEY,
};
use crate::store::{Extension, ObjectKey, ObjectStore, StoreError};
use crate::transport::{Address, Broadcaster};

const MAX_BACKOFF_MS: u64 = 30_000;
const FIRST_BACKOFF_MS: u64 = 1_000;
const VIDEO_ID_ATTEMPTS: usize = 3;
const DEFAULT_WITHHELD_BUDGET: usize = 256 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("segment {0} not found")]
    NotFound(VideoId),
    #[error("release requires manual mode, camera is in {0} mode")]
    InvalidMode(Mode),
    #[error("could not allocate an unused video id after {0} attempts")]
    VideoIdExhausted(usize),
    #[error("segment key reused")]
    KeyReuse,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Protocol(#[from] protocol::ProtocolError),
    #[error("frame source: {0}")]
    Source(String),
}

pub type Result<T> = std::result::Result<T, CameraError>;

// ---------------------------------------------------------------------------
// Clocks

pub trait Clock {
    fn now_ms(&self) -> u64;
    fn sleep_until(&self, t_ms: u64);
}

/// Wall clock, milliseconds since the Unix epoch.
#[derive(Clone, Copy, Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }

    fn sleep_until(&self, t_ms: u64) {
        let now = self.now_ms();
        if t_ms > now {
            std::thread::sleep(Duration::from_millis(t_ms - now));
        }
    }
}

/// Manually advanced clock; sleeping jumps straight to the deadline.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now: AtomicU64,
}

impl VirtualClock {
    pub fn new(start_ms: u64) -> Self {
        Self {
            now: AtomicU64::new(start_ms),
        }
    }

    pub fn advance(&self, ms: u64) {
        self.now.fetch_add(ms, Ordering::SeqCst);
    }

    pub fn set(&self, t_ms: u64) {
        self.now.fetch_max(t_ms, Ordering::SeqCst);
    }
}

impl Clock for VirtualClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }

    fn sleep_until(&self, t_ms: u64) {
        self.set(t_ms);
    }
}

// ---------------------------------------------------------------------------
// Frame sources

/// Bytes captured over a time window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub timestamp_ms: u64,
    pub data: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Capture {
    pub frame: Frame,
    /// No more bytes will follow.
    pub exhausted: bool,
}

pub trait FrameSource {
    /// Anchors the source's timeline at `origin_ms`.
    fn start(&mut self, origin_ms: u64);
    /// Everything captured since the previous call, up to `until_ms`.
    fn capture(&mut self, until_ms: u64) -> Capture;
}

fn bytes_by(origin_ms: u64, t_ms: u64, rate: u64) -> u64 {
    (t_ms.saturating_sub(origin_ms) as u128 * rate as u128 / 1000) as u64
}

/// Deterministic pseudo-random byte stream at a fixed byte rate.
pub struct SyntheticFrames {
    rng: ChaCha20Rng,
    rate: u64,
    origin_ms: u64,
    last_ms: u64,
    produced: u64,
    limit: Option<u64>,
    block: [u8; 64],
    block_pos: usize,
}

/// Same seed, same bytes; the stream does not depend on how it is sliced.
pub fn synthetic_frames(seed: u64, rate_bytes_per_s: u64) -> SyntheticFrames {
    assert!(rate_bytes_per_s > 0, "rate must be positive");
    SyntheticFrames {
        rng: ChaCha20Rng::seed_from_u64(seed),
        rate: rate_bytes_per_s,
        origin_ms: 0,
        last_ms: 0,
        produced: 0,
        limit: None,
        block: [0; 64],
        block_pos: 64,
    }
}

impl SyntheticFrames {
    /// Stop after `total` bytes.
    pub fn with_limit(mut self, total: u64) -> Self {
        self.limit = Some(total);
        self
    }

    /// The next `n` bytes of the stream, independent of timing.
    pub fn take_bytes(&mut self, n: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.block_pos == self.block.len() {
                self.rng.fill_bytes(&mut self.block);
                self.block_pos = 0;
            }
            let take = (n - out.len()).min(self.block.len() - self.block_pos);
            out.extend_from_slice(&self.block[self.block_pos..self.block_pos + take]);
            self.block_pos += take;
        }
        out
    }
}

impl FrameSource for SyntheticFrames {
    fn start(&mut self, origin_ms: u64) {
        self.origin_ms = origin_ms;
        self.last_ms = origin_ms;
    }

    fn capture(&mut self, until_ms: u64) -> Capture {
        let timestamp_ms = self.last_ms;
        let mut target = bytes_by(self.origin_ms, until_ms.max(self.last_ms), self.rate);
        if let Some(limit) = self.limit {
            target = target.min(limit);
        }
        let n = target.saturating_sub(self.produced) as usize;
        let data = self.take_bytes(n);
        self.produced += n as u64;
        self.last_ms = until_ms.max(self.last_ms);
        Capture {
            frame: Frame { timestamp_ms, data },
            exhausted: self.limit.is_some_and(|l| self.produced >= l),
        }
    }
}

/// Replays a file at a fixed byte rate; exhausted at end of file.
pub struct FileFrames {
    file: File,
    rate: u64,
    origin_ms: u64,
    last_ms: u64,
    produced: u64,
    eof: bool,
}

impl FileFrames {
    pub fn open(path: &Path, rate_bytes_per_s: u64) -> Result<Self> {
        if rate_bytes_per_s == 0 {
            return Err(CameraError::Config("rate_bytes_per_s must be > 0".into()));
        }
        let file = File::open(path)
            .map_err(|e| CameraError::Source(format!("{}: {e}", path.display())))?;
        Ok(Self {
            file,
            rate: rate_bytes_per_s,
            origin_ms: 0,
            last_ms: 0,
            produced: 0,
            eof: false,
        })
    }
}

impl FrameSource for FileFrames {
    fn start(&mut self, origin_ms: u64) {
        self.origin_ms = origin_ms;
        self.last_ms = origin_ms;
    }

    fn capture(&mut self, until_ms: u64) -> Capture {
        let timestamp_ms = self.last_ms;
        let want = bytes_by(self.origin_ms, until_ms.max(self.last_ms), self.rate)
            .saturating_sub(self.produced) as usize;
        let mut data = vec![0u8; want];
        let mut filled = 0;
        while filled < want && !self.eof {
            match self.file.read(&mut data[filled..]) {
                Ok(0) | Err(_) => self.eof = true,
                Ok(n) => filled += n,
            }
        }
        data.truncate(filled);
        self.produced += filled as u64;
        self.last_ms = until_ms.max(self.last_ms);
        Capture {
            frame: Frame { timestamp_ms, data },
            exhausted: self.eof,
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunking {
    pub chunk_count: u16,
    pub token_advert_interval_ms: u64,
}

/// Reduced-rate second stream: every `rate_divisor`-th byte of each segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseTier {
    pub rate_divisor: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SourceSpec {
    Synthetic {
        seed: u64,
        rate_bytes_per_s: u64,
        #[serde(default)]
        limit_bytes: Option<u64>,
    },
    File {
        path: PathBuf,
        rate_bytes_per_s: u64,
    },
}

impl SourceSpec {
    pub fn open(&self) -> Result<Box<dyn FrameSource + Send>> {
        match self {
            SourceSpec::Synthetic {
                seed,
                rate_bytes_per_s,
                limit_bytes,
            } => {
                if *rate_bytes_per_s == 0 {
                    return Err(CameraError::Config("rate_bytes_per_s must be > 0".into()));
                }
                let mut src = synthetic_frames(*seed, *rate_bytes_per_s);
                if let Some(l) = limit_bytes {
                    src = src.with_limit(*l);
                }
                Ok(Box::new(src))
            }
            SourceSpec::File {
                path,
                rate_bytes_per_s,
            } => Ok(Box::new(FileFrames::open(path, *rate_bytes_per_s)?)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StoreTarget {
    Directory(PathBuf),
    Http(String),
}

impl StoreTarget {
    pub fn parse(s: &str) -> Self {
        if s.starts_with("http://") || s.starts_with("https://") {
            StoreTarget::Http(s.to_string())
        } else {
            StoreTarget::Directory(PathBuf::from(s.strip_prefix("dir:").unwrap_or(s)))
        }
    }

    pub fn open(&self) -> Result<Box<dyn ObjectStore + Send + Sync>> {
        Ok(match self {
            StoreTarget::Directory(p) => Box::new(crate::store::FsStore::open(p)?),
            StoreTarget::Http(url) => Box::new(crate::store::HttpStore::new(url)),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraConfig {
    pub descriptor: CameraDescriptor,
    pub camera_id: [u8; CAMERA_ID_LEN],
    pub segment_interval_s: u32,
    pub advert_interval_ms: u64,
    pub mode: Mode,
    pub delay_s: u64,
    pub chunking: Option<Chunking>,
    pub base_tier: Option<BaseTier>,
    pub store_target: StoreTarget,
    pub source: SourceSpec,
    /// Ciphertext bytes buffered for withheld segments before the oldest is dropped.
    pub withheld_budget_bytes: usize,
}

impl CameraConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CameraError::Config(m));
        if self.segment_interval_s == 0 || self.segment_interval_s > u16::MAX as u32 {
            return bad(format!(
                "segment_interval_s must be 1..=65535, got {}",
                self.segment_interval_s
            ));
        }
        if self.advert_interval_ms < 20 {
            return bad(format!(
                "advert_interval_ms must be >= 20, got {}",
                self.advert_interval_ms
            ));
        }
        if self.mode == Mode::Delayed && self.delay_s == 0 {
            return bad("delayed mode requires delay_s > 0".into());
        }
        if self.descriptor.mode != self.mode {
            return bad(format!(
                "descriptor advertises {} but camera runs in {} mode",
                self.descriptor.mode, self.mode
            ));
        }
        if let Some(c) = self.chunking {
            if c.chunk_count == 0 {
                return bad("chunk_count must be >= 1".into());
            }
            if c.token_advert_interval_ms < 20 {
                return bad("token_advert_interval_ms must be >= 20".into());
            }
        }
        if let Some(b) = self.base_tier {
            if b.rate_divisor < 2 {
                return bad("base_tier.rate_divisor must be >= 2".into());
            }
        }
        self.descriptor.validate()?;
        Ok(())
    }

    pub fn extension(&self) -> Extension {
        match protocol::template_extension(&self.descriptor.url_template) {
            Ok("jpg") => Extension::Jpg,
            _ => Extension::Mp4,
        }
    }

    pub fn address(&self) -> Address {
        Address::for_camera(&self.camera_id)
    }

    /// Parses the TOML configuration file format (see the repository docs).
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: ConfigFile =
            toml::from_str(text).map_err(|e| CameraError::Config(e.to_string()))?;
        let mut camera_id = [0u8; CAMERA_ID_LEN];
        hex::decode_to_slice(&file.camera_id, &mut camera_id).map_err(|e| {
            CameraError::Config(format!("camera_id must be 16 hex characters: {e}"))
        })?;
        let cfg = CameraConfig {
            descriptor: CameraDescriptor {
                name: file.descriptor.name,
                mode: file.mode,
                location: file.descriptor.location,
                url_template: file.descriptor.url_template,
            },
            camera_id,
            segment_interval_s: file.segment_interval_s,
            advert_interval_ms: file.advert_interval_ms,
            mode: file.mode,
            delay_s: file.delay_s,
            chunking: file.chunking,
            base_tier: file.base_tier,
            store_target: StoreTarget::parse(&file.store),
            source: file.source,
            withheld_budget_bytes: file.withheld_budget_bytes,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DescriptorFile {
    name: String,
    location: Location,
    url_template: String,
}

fn default_advert_interval() -> u64 {
    1000
}

fn default_budget() -> usize {
    DEFAULT_WITHHELD_BUDGET
}

#[derive(Deserialize)]
struct ConfigFile {
    camera_id: String,
    segment_interval_s: u32,
    #[serde(default = "default_advert_interval")]
    advert_interval_ms: u64,
    mode: Mode,
    #[serde(default)]
    delay_s: u64,
    store: String,
    #[serde(default = "default_budget")]
    withheld_budget_bytes: usize,
    descriptor: DescriptorFile,
    source: SourceSpec,
    chunking: Option<Chunking>,
    base_tier: Option<BaseTier>,
}

// ---------------------------------------------------------------------------
// Segments

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Full,
    Base,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UploadState {
    Pending,
    Uploaded,
    Withheld,
    /// Evicted from the withheld buffer or abandoned at shutdown.
    Dropped,
}

/// A finalized segment. The ciphertext is erased once uploaded.
#[derive(Debug)]
pub struct SegmentRecord {
    pub tier: Tier,
    pub video_id: VideoId,
    pub seq: u8,
    pub key: SegmentKey,
    pub start_ms: u64,
    pub end_ms: u64,
    pub container: Option<Vec<u8>>,
    pub hash_prefix: [u8; HASH_PREFIX_LEN],
    pub upload: UploadState,
}

impl SegmentRecord {
    fn erase(&mut self) {
        if let Some(mut c) = self.container.take() {
            c.zeroize();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SegmentSummary {
    pub tier: Tier,
    pub video_id: VideoId,
    pub seq: u8,
    pub start_ms: u64,
    pub end_ms: u64,
    pub stored_bytes: usize,
    pub upload: UploadState,
}

/// Result of a rotation: what was finalized and what is broadcast next.
#[derive(Debug)]
pub struct Rotation {
    pub finalized: SegmentRecord,
    pub finalized_base: Option<SegmentRecord>,
    /// Absent when recording stopped at this boundary.
    pub next: Option<KeyPacket>,
}

fn hex21(h: &[u8; HASH_PREFIX_LEN]) -> String {
    hex::encode(h)
}

/// One structured log record. Never contains key material or plaintext.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum CameraEvent {
    SegmentStarted {
        time_ms: u64,
        tier: Tier,
        seq: u8,
        video_id: VideoId,
        prev_hash_prefix: String,
    },
    Rotation {
        time_ms: u64,
        tier: Tier,
        seq: u8,
        video_id: VideoId,
        start_ms: u64,
        end_ms: u64,
        plaintext_bytes: usize,
        stored_bytes: usize,
        prev_hash_prefix: String,
        hash_prefix: String,
        url: String,
    },
    Upload {
        time_ms: u64,
        video_id: VideoId,
        attempt: u32,
    },
    UploadFailed {
        time_ms: u64,
        video_id: VideoId,
        attempt: u32,
        error: String,
        retry_at_ms: u64,
    },
    Withheld {
        time_ms: u64,
        video_id: VideoId,
    },
    Release {
        time_ms: u64,
        video_id: VideoId,
    },
    Evicted {
        time_ms: u64,
        video_id: VideoId,
    },
    Dropped {
        time_ms: u64,
        video_id: VideoId,
    },
    Shutdown {
        time_ms: u64,
        reason: String,
    },
}

struct ActiveStream {
    video_id: VideoId,
    key: SegmentKey,
    packet: KeyPacket,
}

impl Drop for ActiveStream {
    fn drop(&mut self) {
        self.packet.key.zeroize();
    }
}

struct ActiveSegment {
    seq: u8,
    start_ms: u64,
    end_ms: u64,
    plaintext: Vec<u8>,
    full: ActiveStream,
    base: Option<ActiveStream>,
    tokens: Vec<ChunkToken>,
}

impl Drop for ActiveSegment {
    fn drop(&mut self) {
        self.plaintext.zeroize();
        for t in &mut self.tokens {
            t.token.zeroize();
        }
    }
}

struct PendingUpload {
    record: SegmentRecord,
    due_ms: u64,
    attempt: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Idle,
    Recording,
    Stopped,
}

pub struct Camera<B: Broadcaster, O: ObjectStore> {
    config: CameraConfig,
    source: Box<dyn FrameSource + Send>,
    transport: B,
    store: O,
    phase: Phase,
    active: Option<ActiveSegment>,
    next_seq: u8,
    prev_prefix: [u8; HASH_PREFIX_LEN],
    base_prev_prefix: [u8; HASH_PREFIX_LEN],
    next_advert_ms: u64,
    next_token_ms: u64,
    pending: Vec<PendingUpload>,
    withheld: VecDeque<SegmentRecord>,
    summaries: Vec<SegmentSummary>,
    key_fingerprints: HashSet<[u8; 32]>,
    events: Vec<CameraEvent>,
}

impl<B: Broadcaster, O: ObjectStore> Camera<B, O> {
    pub fn new(
        config: CameraConfig,
        source: Box<dyn FrameSource + Send>,
        transport: B,
        store: O,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            source,
            transport,
            store,
            phase: Phase::Idle,
            active: None,
            next_seq: 0,
            prev_prefix: [0; HASH_PREFIX_LEN],
            base_prev_prefix: [0; HASH_PREFIX_LEN],
            next_advert_ms: 0,
            next_token_ms: 0,
            pending: Vec::new(),
            withheld: VecDeque::new(),
            summaries: Vec::new(),
            key_fingerprints: HashSet::new(),
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &CameraConfig {
        &self.config
    }

    pub fn transport(&self) -> &B {
        &self.transport
    }

    pub fn store(&self) -> &O {
        &self.store
    }

    /// Drains structured events accumulated since the last call.
    pub fn take_events(&mut self) -> Vec<CameraEvent> {
        std::mem::take(&mut self.events)
    }

    /// SHA-256 fingerprints of every segment key used so far.
    pub fn key_fingerprints(&self) -> &HashSet<[u8; 32]> {
        &self.key_fingerprints
    }

    pub fn segments(&self) -> &[SegmentSummary] {
        &self.summaries
    }

    /// Currently broadcast key packet.
    pub fn current_packet(&self) -> Option<&KeyPacket> {
        self.active.as_ref().map(|a| &a.full.packet)
    }

    pub fn withheld_ids(&self) -> Vec<VideoId> {
        self.withheld.iter().map(|r| r.video_id).collect()
    }

    pub fn is_recording(&self) -> bool {
        self.phase == Phase::Recording
    }

    /// Recording has stopped and nothing is left to upload or release.
    pub fn is_finished(&self) -> bool {
        self.phase == Phase::Stopped && self.pending.is_empty() && self.withheld.is_empty()
    }

    /// Earliest time at which [`Camera::step`] has work to do.
    pub fn next_deadline(&self) -> Option<u64> {
        let mut next = self.pending.iter().map(|p| p.due_ms).min();
        if let Some(a) = &self.active {
            let mut cands = vec![a.end_ms, self.next_advert_ms];
            if self.config.chunking.is_some() {
                cands.push(self.next_token_ms);
            }
            let m = cands.into_iter().min().unwrap();
            next = Some(next.map_or(m, |n| n.min(m)));
        }
        next
    }

    fn publish_descriptor(&self, now: u64) -> Result<()> {
        for field in DescriptorField::ALL {
            let _ = self.transport.publish(
                field.uuid_suffix(),
                &encode_characteristic(&self.config.descriptor, field),
                now,
            );
        }
        Ok(())
    }

    fn register_key(&mut self, key: &SegmentKey) -> Result<()> {
        let fp: [u8; 32] = Sha256::digest(key.as_bytes()).into();
        if !self.key_fingerprints.insert(fp) {
            return Err(CameraError::KeyReuse);
        }
        Ok(())
    }

    fn fresh_video_id(&self, taken: &[VideoId]) -> Result<VideoId> {
        let ext = self.config.extension();
        for _ in 0..VIDEO_ID_ATTEMPTS {
            let id = crypto::generate_video_id()?;
            if taken.contains(&id) || self.summaries.iter().any(|s| s.video_id == id) {
                continue;
            }
            // an unreachable store cannot report a collision; accept the id
            if !self.store.exists(&ObjectKey::new(id, ext)).unwrap_or(false) {
                return Ok(id);
            }
        }
        Err(CameraError::VideoIdExhausted(VIDEO_ID_ATTEMPTS))
    }

    fn new_stream(&mut self, seq: u8, prev: [u8; HASH_PREFIX_LEN], taken: &[VideoId]) -> Result<ActiveStream> {
        let key = crypto::generate_key()?;
        self.register_key(&key)?;
        let video_id = self.fresh_video_id(taken)?;
        let packet = KeyPacket {
            key: *key.as_bytes(),
            seq,
            reconnect_interval_s: self.config.segment_interval_s as u16,
            video_id,
            prev_hash_prefix: prev,
        };
        Ok(ActiveStream {
            video_id,
            key,
            packet,
        })
    }

    fn begin_segment(&mut self, start_ms: u64) -> Result<KeyPacket> {
        let seq = self.next_seq;
        let full = self.new_stream(seq, self.prev_prefix, &[])?;
        let base = match self.config.base_tier {
            Some(_) => Some(self.new_stream(seq, self.base_prev_prefix, &[full.video_id])?),
            None => None,
        };
        let tokens = match self.config.chunking {
            Some(c) => (0..c.chunk_count)
                .map(|i| {
                    Ok(ChunkToken {
                        token: crypto::generate_token()?,
                        chunk_index: i,
                        video_id: full.video_id,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        let end_ms = start_ms + self.config.segment_interval_s as u64 * 1000;

        let _ = self
            .transport
            .publish(UUID_KEY, &encode_key_packet(&full.packet), start_ms);
        self.events.push(CameraEvent::SegmentStarted {
            time_ms: start_ms,
            tier: Tier::Full,
            seq,
            video_id: full.video_id,
            prev_hash_prefix: hex21(&full.packet.prev_hash_prefix),
        });
        if let Some(b) = &base {
            let _ = self
                .transport
                .publish(UUID_BASE_KEY, &encode_key_packet(&b.packet), start_ms);
            self.events.push(CameraEvent::SegmentStarted {
                time_ms: start_ms,
                tier: Tier::Base,
                seq,
                video_id: b.video_id,
                prev_hash_prefix: hex21(&b.packet.prev_hash_prefix),
            });
        }
        let packet = full.packet.clone();
        self.active = Some(ActiveSegment {
            seq,
            start_ms,
            end_ms,
            plaintext: Vec::new(),
            full,
            base,
            tokens,
        });
        self.next_seq = seq.wrapping_add(1);
        self.next_advert_ms = start_ms;
        self.next_token_ms = start_ms;
        Ok(packet)
    }

    fn seal(&self, seg: &ActiveSegment) -> Result<Vec<u8>> {
        Ok(match self.config.chunking {
            Some(c) => encrypt_segment_chunked(
                &seg.plaintext,
                c.chunk_count as usize,
                &seg.full.key,
                &seg.tokens,
            )?,
            None => encrypt_segment(&seg.plaintext, &seg.full.key)?,
        })
    }

    fn finalize(&mut self, mut seg: ActiveSegment, end_ms: u64) -> Result<(SegmentRecord, Option<SegmentRecord>)> {
        let container = self.seal(&seg)?;
        let prefix = hash_prefix(&container);
        self.prev_prefix = prefix;
        let url = format_video_url(&self.config.descriptor.url_template, &seg.full.video_id)?;
        self.events.push(CameraEvent::Rotation {
            time_ms: end_ms,
            tier: Tier::Full,
            seq: seg.seq,
            video_id: seg.full.video_id,
            start_ms: seg.start_ms,
            end_ms,
            plaintext_bytes: seg.plaintext.len(),
            stored_bytes: container.len(),
            prev_hash_prefix: hex21(&seg.full.packet.prev_hash_prefix),
            hash_prefix: hex21(&prefix),
            url,
        });
        let full = SegmentRecord {
            tier: Tier::Full,
            video_id: seg.full.video_id,
            seq: seg.seq,
            key: seg.full.key.clone(),
            start_ms: seg.start_ms,
            end_ms,
            container: Some(container),
            hash_prefix: prefix,
            upload: UploadState::Pending,
        };

        let base = match (self.config.base_tier, seg.base.take()) {
            (Some(tier), Some(stream)) => {
                let mut reduced: Vec<u8> = seg
                    .plaintext
                    .iter()
                    .step_by(tier.rate_divisor as usize)
                    .copied()
                    .collect();
                let container = encrypt_segment(&reduced, &stream.key)?;
                let prefix = hash_prefix(&container);
                self.base_prev_prefix = prefix;
                let url = format_video_url(&self.config.descriptor.url_template, &stream.video_id)?;
                self.events.push(CameraEvent::Rotation {
                    time_ms: end_ms,
                    tier: Tier::Base,
                    seq: seg.seq,
                    video_id: stream.video_id,
                    start_ms: seg.start_ms,
                    end_ms,
                    plaintext_bytes: reduced.len(),
                    stored_bytes: container.len(),
                    prev_hash_prefix: hex21(&stream.packet.prev_hash_prefix),
                    hash_prefix: hex21(&prefix),
                    url,
                });
                reduced.zeroize();
                Some(SegmentRecord {
                    tier: Tier::Base,
                    video_id: stream.video_id,
                    seq: seg.seq,
                    key: stream.key.clone(),
                    start_ms: seg.start_ms,
                    end_ms,
                    container: Some(container),
                    hash_prefix: prefix,
                    upload: UploadState::Pending,
                })
            }
            _ => None,
        };
        Ok((full, base))
    }

    /// Finalizes the segment in progress at `boundary_ms` and, unless
    /// recording stops, starts the next one.
    pub fn rotate_segment(&mut self, boundary_ms: u64) -> Result<Rotation> {
        let mut seg = self
            .active
            .take()
            .ok_or_else(|| CameraError::Config("no segment in progress".into()))?;
        let cap = self.source.capture(boundary_ms);
        seg.plaintext.extend_from_slice(&cap.frame.data);
        let (finalized, finalized_base) = self.finalize(seg, boundary_ms)?;
        let next = if cap.exhausted || self.phase == Phase::Stopped {
            self.phase = Phase::Stopped;
            self.events.push(CameraEvent::Shutdown {
                time_ms: boundary_ms,
                reason: "frame source exhausted".into(),
            });
            None
        } else {
            Some(self.begin_segment(boundary_ms)?)
        };
        Ok(Rotation {
            finalized,
            finalized_base,
            next,
        })
    }

    fn summarize(&mut self, rec: &SegmentRecord) {
        let stored_bytes = rec.container.as_ref().map_or(0, Vec::len);
        if let Some(s) = self
            .summaries
            .iter_mut()
            .find(|s| s.video_id == rec.video_id)
        {
            s.upload = rec.upload;
            return;
        }
        self.summaries.push(SegmentSummary {
            tier: rec.tier,
            video_id: rec.video_id,
            seq: rec.seq,
            start_ms: rec.start_ms,
            end_ms: rec.end_ms,
            stored_bytes,
            upload: rec.upload,
        });
    }

    fn dispatch(&mut self, mut rec: SegmentRecord, boundary_ms: u64) {
        match self.config.mode {
            Mode::Auto | Mode::Delayed => {
                let due_ms = if self.config.mode == Mode::Auto {
                    boundary_ms
                } else {
                    boundary_ms + self.config.delay_s * 1000
                };
                rec.upload = UploadState::Pending;
                self.summarize(&rec);
                self.pending.push(PendingUpload {
                    record: rec,
                    due_ms,
                    attempt: 0,
                });
            }
            Mode::Manual => {
                rec.upload = UploadState::Withheld;
                self.summarize(&rec);
                self.events.push(CameraEvent::Withheld {
                    time_ms: boundary_ms,
                    video_id: rec.video_id,
                });
                self.withheld.push_back(rec);
                self.enforce_budget(boundary_ms);
            }
        }
    }

    fn enforce_budget(&mut self, now: u64) {
        let held = |w: &VecDeque<SegmentRecord>| -> usize {
            w.iter().map(|r| r.container.as_ref().map_or(0, Vec::len)).sum()
        };
        while self.withheld.len() > 1 && held(&self.withheld) > self.config.withheld_budget_bytes {
            let mut old = self.withheld.pop_front().unwrap();
            old.erase();
            old.upload = UploadState::Dropped;
            self.summarize(&old);
            self.events.push(CameraEvent::Evicted {
                time_ms: now,
                video_id: old.video_id,
            });
        }
    }

    fn try_upload(&mut self, rec: &mut SegmentRecord) -> std::result::Result<(), StoreError> {
        let key = ObjectKey::new(rec.video_id, self.config.extension());
        let bytes = rec
            .container
            .as_ref()
            .ok_or_else(|| StoreError::Io("ciphertext already erased".into()))?;
        match self.store.put(&key, bytes) {
            // a conflict on retry means an earlier attempt landed
            Ok(()) | Err(StoreError::Conflict(_)) => {
                rec.erase();
                rec.upload = UploadState::Uploaded;
                Ok(())
            }
            Err(e) => Err(e),
        }
    }

    fn run_uploads(&mut self, now: u64) {
        let mut i = 0;
        while i < self.pending.len() {
            if self.pending[i].due_ms > now {
                i += 1;
                continue;
            }
            let mut job = self.pending.swap_remove(i);
            job.attempt += 1;
            match self.try_upload(&mut job.record) {
                Ok(()) => {
                    self.events.push(CameraEvent::Upload {
                        time_ms: now,
                        video_id: job.record.video_id,
                        attempt: job.attempt,
                    });
                    self.summarize(&job.record);
                }
                Err(e) => {
                    let backoff = FIRST_BACKOFF_MS
                        .saturating_mul(1u64 << (job.attempt - 1).min(16))
                        .min(MAX_BACKOFF_MS);
                    job.due_ms = now + backoff;
                    self.events.push(CameraEvent::UploadFailed {
                        time_ms: now,
                        video_id: job.record.video_id,
                        attempt: job.attempt,
                        error: e.to_string(),
                        retry_at_ms: job.due_ms,
                    });
                    self.pending.push(job);
                    // keep relative order stable for the remaining jobs
                    let last = self.pending.len() - 1;
                    self.pending.swap(i, last);
                    i += 1;
                }
            }
        }
        self.pending.sort_by_key(|p| (p.due_ms, p.record.start_ms));
    }

    fn advertise(&mut self, now: u64) {
        let Some(seg) = &self.active else { return };
        if now >= self.next_advert_ms {
            let beacon = encode_advertisement(&Advertisement::Beacon {
                camera_id: self.config.camera_id,
                seq: seg.seq,
            });
            let _ = self.transport.advertise(&beacon, now);
            self.next_advert_ms = now + self.config.advert_interval_ms;
        }
        if let Some(c) = self.config.chunking {
            if now >= self.next_token_ms {
                let span = (seg.end_ms - seg.start_ms).max(1);
                let idx = ((now - seg.start_ms) as u128 * c.chunk_count as u128 / span as u128)
                    .min(c.chunk_count as u128 - 1) as usize;
                let t = &seg.tokens[idx];
                let adv = encode_advertisement(&Advertisement::Token {
                    video_id: t.video_id,
                    chunk_index: t.chunk_index,
                    token: t.token,
                });
                let _ = self.transport.advertise(&adv, now);
                self.next_token_ms = now + c.token_advert_interval_ms;
            }
        }
    }

    /// Advances the camera to `now`: rotates every boundary passed, emits due
    /// advertisements and runs due uploads.
    pub fn step(&mut self, now: u64) -> Result<()> {
        if self.phase == Phase::Idle {
            self.source.start(now);
            self.publish_descriptor(now)?;
            self.phase = Phase::Recording;
            self.begin_segment(now)?;
        }
        while self.phase == Phase::Recording {
            let Some(end) = self.active.as_ref().map(|a| a.end_ms) else { break };
            if now < end {
                break;
            }
            let rot = self.rotate_segment(end)?;
            self.dispatch(rot.finalized, end);
            if let Some(b) = rot.finalized_base {
                self.dispatch(b, end);
            }
            self.run_uploads(end.min(now));
        }
        if self.phase == Phase::Recording {
            let cap = self.source.capture(now);
            if let Some(a) = self.active.as_mut() {
                a.plaintext.extend_from_slice(&cap.frame.data);
            }
            if cap.exhausted {
                self.finish_recording(now, "frame source exhausted")?;
            }
        }
        self.advertise(now);
        self.run_uploads(now);
        Ok(())
    }

    fn finish_recording(&mut self, now: u64, reason: &str) -> Result<()> {
        if let Some(mut seg) = self.active.take() {
            let cap = self.source.capture(now);
            seg.plaintext.extend_from_slice(&cap.frame.data);
            let (full, base) = self.finalize(seg, now)?;
            self.dispatch(full, now);
            if let Some(b) = base {
                self.dispatch(b, now);
            }
        }
        if self.phase != Phase::Stopped {
            self.phase = Phase::Stopped;
            self.events.push(CameraEvent::Shutdown {
                time_ms: now,
                reason: reason.to_string(),
            });
        }
        Ok(())
    }

    /// Graceful stop: finalizes the current segment, uploads whatever is due
    /// and drops the rest (ciphertext is never persisted locally).
    pub fn shutdown(&mut self, now: u64) -> Result<()> {
        if self.phase == Phase::Idle {
            self.phase = Phase::Stopped;
            return Ok(());
        }
        self.finish_recording(now, "stop requested")?;
        self.run_uploads(now);
        let abandoned: Vec<SegmentRecord> = self
            .pending
            .drain(..)
            .map(|p| p.record)
            .chain(self.withheld.drain(..))
            .collect();
        for mut rec in abandoned {
            rec.erase();
            rec.upload = UploadState::Dropped;
            self.summarize(&rec);
            self.events.push(CameraEvent::Dropped {
                time_ms: now,
                video_id: rec.video_id,
            });
        }
        Ok(())
    }

    /// Operator release of a withheld segment (manual mode only).
    pub fn release_segment(&mut self, video_id: VideoId, now: u64) -> Result<()> {
        if self.config.mode != Mode::Manual {
            return Err(CameraError::InvalidMode(self.config.mode));
        }
        let pos = self
            .withheld
            .iter()
            .position(|r| r.video_id == video_id)
            .ok_or(CameraError::NotFound(video_id))?;
        let mut rec = self.withheld.remove(pos).unwrap();
        match self.try_upload(&mut rec) {
            Ok(()) => {
                self.summarize(&rec);
                self.events.push(CameraEvent::Release {
                    time_ms: now,
                    video_id,
                });
                Ok(())
            }
            Err(e) => {
                self.withheld.insert(pos, rec);
                Err(e.into())
            }
        }
    }
}

/// Drives `camera` against `clock` until it finishes or `stop` is set.
/// `on_step` runs after every step; the daemon uses it to print events and
/// serve release requests.
pub fn run_camera_with<B, O, C, F>(
    camera: &mut Camera<B, O>,
    clock: &C,
    stop: &AtomicBool,
    poll_ms: u64,
    mut on_step: F,
) -> Result<()>
where
    B: Broadcaster,
    O: ObjectStore,
    C: Clock + ?Sized,
    F: FnMut(&mut Camera<B, O>, u64),
{
    loop {
        let now = clock.now_ms();
        if stop.load(Ordering::SeqCst) {
            camera.shutdown(now)?;
            on_step(camera, now);
            return Ok(());
        }
        camera.step(now)?;
        on_step(camera, now);
        if camera.is_finished() {
            return Ok(());
        }
        let wake = camera
            .next_deadline()
            .unwrap_or(now + poll_ms)
            .min(now + poll_ms)
            .max(now + 1);
        clock.sleep_until(wake);
    }
}

/// Runs until the source is exhausted and all uploads are done, or `stop`.
pub fn run_camera<B: Broadcaster, O: ObjectStore, C: Clock + ?Sized>(
    camera: &mut Camera<B, O>,
    clock: &C,
    stop: &AtomicBool,
) -> Result<()> {
    run_camera_with(camera, clock, stop, 100, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::decrypt_segment;
    use crate::protocol::decode_key_packet;
    use crate::store::FsStore;
    use crate::transport::{Medium, Peer, PeerKind, RecordKind};
    use std::sync::Arc;

    fn config(mode: Mode, interval: u32) -> CameraConfig {
        CameraConfig {
            descriptor: CameraDescriptor {
                name: "Test cam".into(),
                mode,
                location: Location::Description("bench".into()),
                url_template: "http://127.0.0.1:1/{id}.mp4".into(),
            },
            camera_id: [0xC0, 0xFF, 0xEE, 0, 0, 0, 0, 1],
            segment_interval_s: interval,
            advert_interval_ms: 500,
            mode,
            delay_s: if mode == Mode::Delayed { 3 } else { 0 },
            chunking: None,
            base_tier: None,
            store_target: StoreTarget::Directory("unused".into()),
            source: SourceSpec::Synthetic {
                seed: 1,
                rate_bytes_per_s: 1000,
                limit_bytes: None,
            },
            withheld_budget_bytes: DEFAULT_WITHHELD_BUDGET,
        }
    }

    struct Rig {
        medium: Medium,
        store: Arc<FsStore>,
        _dir: tempfile::TempDir,
        camera: Camera<crate::transport::MediumPort, Arc<FsStore>>,
    }

    fn rig(cfg: CameraConfig, source: SyntheticFrames) -> Rig {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(FsStore::open(dir.path()).unwrap());
        let medium = Medium::loopback();
        let addr = cfg.address();
        medium
            .register(Peer { address: addr, position: None, kind: PeerKind::Camera })
            .unwrap();
        let camera = Camera::new(cfg, Box::new(source), medium.port(addr), store.clone()).unwrap();
        Rig { medium, store, _dir: dir, camera }
    }

    fn published_packets(m: &Medium) -> Vec<KeyPacket> {
        m.log()
            .into_iter()
            .filter(|r| r.kind == RecordKind::Publish && r.uuid == Some(UUID_KEY))
            .map(|r| decode_key_packet(&hex::decode(r.payload_hex).unwrap()).unwrap())
            .collect()
    }

    fn drive(camera: &mut Camera<crate::transport::MediumPort, Arc<FsStore>>, clock: &VirtualClock, until: u64) {
        loop {
            let now = clock.now_ms();
            camera.step(now).unwrap();
            if now >= until {
                break;
            }
            let next = camera.next_deadline().unwrap_or(until).min(until).max(now + 1);
            clock.sleep_until(next);
        }
    }

    #[test]
    fn synthetic_source_is_deterministic() {
        let mut a = synthetic_frames(7, 1000);
        let mut b = synthetic_frames(7, 1000);
        let mut c = synthetic_frames(8, 1000);
        assert_eq!(a.take_bytes(4096), b.take_bytes(4096));
        let mut a = synthetic_frames(7, 1000);
        assert_ne!(a.take_bytes(4096), c.take_bytes(4096));

        let mut sliced = synthetic_frames(7, 1000);
        sliced.start(0);
        let mut got = Vec::new();
        for t in [3u64, 10, 999, 1000, 1500, 2000] {
            got.extend(sliced.capture(t).frame.data);
        }
        assert_eq!(got.len(), 2000);
        assert_eq!(got, synthetic_frames(7, 1000).take_bytes(2000));
    }

    #[test]
    fn synthetic_limit_exhausts() {
        let mut s = synthetic_frames(1, 1000).with_limit(1500);
        s.start(0);
        assert!(!s.capture(1000).exhausted);
        let c = s.capture(5000);
        assert!(c.exhausted);
        assert_eq!(c.frame.data.len(), 500);
    }

    #[test]
    fn config_validation() {
        let mut c = config(Mode::Auto, 0);
        assert!(c.validate().is_err());
        c.segment_interval_s = 2;
        c.advert_interval_ms = 10;
        assert!(c.validate().is_err());
        let mut d = config(Mode::Delayed, 2);
        d.delay_s = 0;
        assert!(d.validate().is_err());
        let mut e = config(Mode::Auto, 2);
        e.descriptor.mode = Mode::Manual;
        assert!(e.validate().is_err());
        assert!(config(Mode::Auto, 2).validate().is_ok());
    }

    #[test]
    fn config_from_toml() {
        let text = r#"
            camera_id = "0102030405060708"
            segment_interval_s = 60
            mode = "delayed"
            delay_s = 300
            store = "http://127.0.0.1:8080"

            [descriptor]
            name = "Kitchen"
            location = { lat = 54.97, lon = -1.62 }
            url_template = "http://127.0.0.1:8080/{id}.jpg"

            [source]
            kind = "synthetic"
            seed = 9
            rate_bytes_per_s = 2000

            [chunking]
            chunk_count = 10
            token_advert_interval_ms = 6000
        "#;
        let cfg = CameraConfig::from_toml(text).unwrap();
        assert_eq!(cfg.camera_id, [1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(cfg.mode, Mode::Delayed);
        assert_eq!(cfg.descriptor.mode, Mode::Delayed);
        assert_eq!(cfg.advert_interval_ms, 1000);
        assert_eq!(cfg.extension(), Extension::Jpg);
        assert_eq!(cfg.store_target, StoreTarget::Http("http://127.0.0.1:8080".into()));
        assert_eq!(cfg.chunking.unwrap().chunk_count, 10);
        assert!(CameraConfig::from_toml(&text.replace("delay_s = 300", "delay_s = 0")).is_err());
    }

    #[test]
    fn auto_mode_three_segments() {
        let clock = VirtualClock::new(10_000);
        let mut r = rig(config(Mode::Auto, 2), synthetic_frames(5, 1000));
        drive(&mut r.camera, &clock, 16_000);
        assert_eq!(r.store.list().unwrap().len(), 3);
        let packets = published_packets(&r.medium);
        let seqs: Vec<u8> = packets.iter().map(|p| p.seq).collect();
        assert_eq!(&seqs[..3], &[0, 1, 2]);
        let ids: HashSet<VideoId> = packets.iter().map(|p| p.video_id).collect();
        assert_eq!(ids.len(), packets.len());
        for p in &packets[..3] {
            assert_eq!(p.reconnect_interval_s, 2);
            let obj = r.store.get(&ObjectKey::new(p.video_id, Extension::Mp4)).unwrap();
            assert_eq!(&obj[..4], b"OCTV");
            assert_eq!(decrypt_segment(&obj, &SegmentKey::from_bytes(p.key)).unwrap().len(), 2000);
        }
    }

    #[test]
    fn rotation_links_hash_and_refreshes_key() {
        let mut r = rig(config(Mode::Auto, 2), synthetic_frames(5, 1000));
        r.camera.step(0).unwrap();
        let first = r.camera.current_packet().unwrap().clone();
        assert_eq!(first.prev_hash_prefix, [0u8; 21]);
        let rot = r.camera.rotate_segment(2000).unwrap();
        let next = rot.next.unwrap();
        let container = rot.finalized.container.as_ref().unwrap();
        let independent: [u8; 21] = Sha256::digest(container)[..21].try_into().unwrap();
        assert_eq!(next.prev_hash_prefix, independent);
        assert_ne!(next.key, first.key);
        assert_ne!(next.video_id, first.video_id);
        assert_eq!(next.seq, 1);
    }

    #[test]
    fn seq_wraps() {
        let mut r = rig(config(Mode::Auto, 1), synthetic_frames(5, 10));
        r.camera.step(0).unwrap();
        for i in 1..=257u64 {
            r.camera.step(i * 1000).unwrap();
        }
        let seqs: Vec<u8> = published_packets(&r.medium).iter().map(|p| p.seq).collect();
        assert_eq!(seqs[255], 255);
        assert_eq!(seqs[256], 0);
        assert_eq!(r.camera.key_fingerprints().len(), 258);
    }

    #[test]
    fn manual_mode_withholds_until_release() {
        let clock = VirtualClock::new(0);
        let mut r = rig(config(Mode::Manual, 2), synthetic_frames(5, 1000));
        drive(&mut r.camera, &clock, 6_500);
        assert!(r.store.list().unwrap().is_empty());
        assert!(published_packets(&r.medium).len() >= 3);
        let withheld = r.camera.withheld_ids();
        assert_eq!(withheld.len(), 3);

        r.camera.release_segment(withheld[1], 7_000).unwrap();
        assert_eq!(r.store.list().unwrap(), vec![ObjectKey::new(withheld[1], Extension::Mp4)]);
        assert_eq!(r.camera.withheld_ids().len(), 2);
        assert!(matches!(
            r.camera.release_segment(withheld[1], 7_000),
            Err(CameraError::NotFound(_))
        ));
        assert!(matches!(
            r.camera.release_segment(VideoId([9; 8]), 7_000),
            Err(CameraError::NotFound(_))
        ));
    }

    #[test]
    fn release_outside_manual_mode() {
        let mut r = rig(config(Mode::Auto, 2), synthetic_frames(5, 1000));
        r.camera.step(0).unwrap();
        assert!(matches!(
            r.camera.release_segment(VideoId([1; 8]), 0),
            Err(CameraError::InvalidMode(Mode::Auto))
        ));
    }

    #[test]
    fn delayed_mode_uploads_after_delay() {
        let clock = VirtualClock::new(0);
        let mut r = rig(config(Mode::Delayed, 2), synthetic_frames(5, 1000));
        drive(&mut r.camera, &clock, 4_999);
        assert!(r.store.list().unwrap().is_empty());
        drive(&mut r.camera, &clock, 5_000);
        assert_eq!(r.store.list().unwrap().len(), 1);
    }

    #[test]
    fn withheld_budget_evicts_oldest() {
        let mut cfg = config(Mode::Manual, 1);
        cfg.withheld_budget_bytes = 2 * (1000 + 34);
        let mut r = rig(cfg, synthetic_frames(5, 1000));
        for t in 0..=4 {
            r.camera.step(t * 1000).unwrap();
        }
        assert_eq!(r.camera.withheld_ids().len(), 2);
        let evicted = r
            .camera
            .take_events()
            .into_iter()
            .filter(|e| matches!(e, CameraEvent::Evicted { .. }))
            .count();
        assert_eq!(evicted, 2);
    }

    struct FlakyStore {
        inner: FsStore,
        failures_left: std::sync::Mutex<u32>,
    }

    impl ObjectStore for FlakyStore {
        fn put(&self, key: &ObjectKey, bytes: &[u8]) -> std::result::Result<(), StoreError> {
            let mut left = self.failures_left.lock().unwrap();
            if *left > 0 {
                *left -= 1;
                return Err(StoreError::Unreachable("down".into()));
            }
            self.inner.put(key, bytes)
        }
        fn exists(&self, key: &ObjectKey) -> std::result::Result<bool, StoreError> {
            self.inner.exists(key)
        }
    }

    #[test]
    fn upload_retries_with_backoff_without_blocking_broadcast() {
        let dir = tempfile::tempdir().unwrap();
        let inner = FsStore::open(dir.path()).unwrap();
        let store = FlakyStore { inner: inner.clone(), failures_left: std::sync::Mutex::new(2) };
        let medium = Medium::loopback();
        let cfg = config(Mode::Auto, 2);
        medium.register(Peer { address: cfg.address(), position: None, kind: PeerKind::Camera }).unwrap();
        let mut cam = Camera::new(cfg.clone(), Box::new(synthetic_frames(1, 100)), medium.port(cfg.address()), store).unwrap();
        let clock = VirtualClock::new(0);
        loop {
            let now = clock.now_ms();
            cam.step(now).unwrap();
            if now >= 9_000 {
                break;
            }
            clock.sleep_until(cam.next_deadline().unwrap().min(9_000));
        }
        let failures: Vec<(u32, u64, u64)> = cam
            .take_events()
            .into_iter()
            .filter_map(|e| match e {
                CameraEvent::UploadFailed { attempt, time_ms, retry_at_ms, .. } => Some((attempt, time_ms, retry_at_ms)),
                _ => None,
            })
            .collect();
        assert_eq!(failures, vec![(1, 2000, 3000), (2, 3000, 5000)]);
        // beacons kept flowing while the store was down
        let beacons = medium.log().iter().filter(|r| r.kind == RecordKind::Publish).count();
        assert!(beacons >= 5);
        assert_eq!(inner.list().unwrap().len(), 4);
    }

    #[test]
    fn exhausted_source_shuts_down_cleanly() {
        let clock = VirtualClock::new(0);
        let mut r = rig(config(Mode::Auto, 2), synthetic_frames(3, 1000).with_limit(5000));
        let stop = AtomicBool::new(false);
        run_camera(&mut r.camera, &clock, &stop).unwrap();
        assert!(r.camera.is_finished());
        let sizes: Vec<usize> = r.camera.segments().iter().map(|s| s.stored_bytes).collect();
        assert_eq!(sizes, vec![2034, 2034, 1034]);
        assert_eq!(r.store.list().unwrap().len(), 3);
    }

    #[test]
    fn base_tier_stream() {
        let mut cfg = config(Mode::Auto, 2);
        cfg.base_tier = Some(BaseTier { rate_divisor: 4 });
        let clock = VirtualClock::new(0);
        let mut r = rig(cfg, synthetic_frames(3, 1000));
        drive(&mut r.camera, &clock, 4_000);
        let base: Vec<&SegmentSummary> = r.camera.segments().iter().filter(|s| s.tier == Tier::Base).collect();
        assert_eq!(base.len(), 2);
        assert!(base.iter().all(|s| s.stored_bytes == 500 + 34));
        let base_reads = r.medium.log().iter().filter(|l| l.uuid == Some(UUID_BASE_KEY)).count();
        assert_eq!(base_reads, 3);
    }

    #[test]
    fn token_adverts_follow_chunks() {
        let mut cfg = config(Mode::Auto, 10);
        cfg.chunking = Some(Chunking { chunk_count: 5, token_advert_interval_ms: 2000 });
        let mut r = rig(cfg, synthetic_frames(3, 100));
        let listener = Address([7; 6]);
        r.medium.register(Peer { address: listener, position: None, kind: PeerKind::Listener }).unwrap();
        let clock = VirtualClock::new(0);
        drive(&mut r.camera, &clock, 9_999);
        let chunks: Vec<u16> = r
            .medium
            .receive(listener)
            .into_iter()
            .filter_map(|rx| match protocol::decode_advertisement(&rx.payload).unwrap() {
                Advertisement::Token { chunk_index, .. } => Some(chunk_index),
                _ => None,
            })
            .collect();
        assert_eq!(chunks, vec![0, 1, 2, 3, 4]);
    }
}
