//! The listener side: collect key packets from nearby cameras into a wallet,
//! group them into sessions and later fetch and decrypt footage.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::camera::Tier;
use crate::crypto::{
    self, decrypt_segment, decrypt_segment_chunked, hash_prefix, ChunkContent, ChunkResult,
    ChunkToken, CryptoError, SegmentKey,
};
use crate::crypto::hex_array;
use crate::protocol::{
    decode_advertisement, decode_descriptor, decode_key_packet, format_video_url, Advertisement,
    CameraDescriptor, KeyPacket, Location, Mode, VideoId, HASH_PREFIX_LEN, KEY_LEN, UUID_BASE_KEY,
    UUID_KEY, UUID_LOCATION, UUID_MODE, UUID_NAME, UUID_URL_FORMAT,
};
use crate::store::{Fetcher, StoreError};
use crate::transport::{Address, Scanner};

pub const WALLET_HEADER: &str = "OCTV-WALLET v1";

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("wallet line {line}: {reason}")]
    WalletFormat { line: usize, reason: String },
    #[error("wallet io: {0}")]
    Io(#[from] std::io::Error),
    #[error("footage {0} is withheld or unavailable")]
    Unavailable(VideoId),
    #[error("fetch failed: {0}")]
    Fetch(String),
    #[error("footage {video_id} failed integrity check (chain: {chain})")]
    Integrity { video_id: VideoId, chain: ChainCheck },
    #[error("footage {0} is malformed: {1}")]
    Format(VideoId, String),
    #[error(transparent)]
    Protocol(#[from] crate::protocol::ProtocolError),
}

pub type Result<T> = std::result::Result<T, ClientError>;

/// A key packet together with what the listener knew about its sender.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyRecord {
    pub camera_address: Address,
    pub camera_name: String,
    pub mode: Mode,
    pub location: Location,
    pub url_template: String,
    #[serde(with = "hex_array")]
    pub key: [u8; KEY_LEN],
    pub seq: u8,
    pub reconnect_interval_s: u16,
    pub video_id: VideoId,
    #[serde(with = "hex_array")]
    pub prev_hash_prefix: [u8; HASH_PREFIX_LEN],
    pub received_at_ms: u64,
    #[serde(default = "full_tier")]
    pub tier: Tier,
}

fn full_tier() -> Tier {
    Tier::Full
}

impl std::fmt::Debug for KeyRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyRecord")
            .field("camera_address", &self.camera_address)
            .field("camera_name", &self.camera_name)
            .field("seq", &self.seq)
            .field("video_id", &self.video_id)
            .field("received_at_ms", &self.received_at_ms)
            .field("tier", &self.tier)
            .finish_non_exhaustive()
    }
}

impl KeyRecord {
    pub fn new(
        camera_address: Address,
        descriptor: &CameraDescriptor,
        packet: &KeyPacket,
        received_at_ms: u64,
        tier: Tier,
    ) -> Self {
        Self {
            camera_address,
            camera_name: descriptor.name.clone(),
            mode: descriptor.mode,
            location: descriptor.location.clone(),
            url_template: descriptor.url_template.clone(),
            key: packet.key,
            seq: packet.seq,
            reconnect_interval_s: packet.reconnect_interval_s,
            video_id: packet.video_id,
            prev_hash_prefix: packet.prev_hash_prefix,
            received_at_ms,
            tier,
        }
    }

    pub fn url(&self) -> Result<String> {
        Ok(format_video_url(&self.url_template, &self.video_id)?)
    }

    fn identity(&self) -> (Address, VideoId, u8) {
        (self.camera_address, self.video_id, self.seq)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    #[serde(flatten)]
    pub token: ChunkToken,
    pub received_at_ms: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum WalletEntry {
    Key(KeyRecord),
    Token(TokenRecord),
}

/// Everything a listener has collected. Records are deduplicated on
/// (camera address, video id, seq); tokens on (video id, chunk index, token).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Wallet {
    records: Vec<KeyRecord>,
    tokens: Vec<TokenRecord>,
}

impl Wallet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[KeyRecord] {
        &self.records
    }

    pub fn tokens(&self) -> &[TokenRecord] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Returns false if the record was already held.
    pub fn ingest(&mut self, record: KeyRecord) -> bool {
        if self.records.iter().any(|r| r.identity() == record.identity()) {
            return false;
        }
        self.records.push(record);
        true
    }

    pub fn ingest_token(&mut self, token: ChunkToken, received_at_ms: u64) -> bool {
        if self.tokens.iter().any(|t| t.token == token) {
            return false;
        }
        self.tokens.push(TokenRecord {
            token,
            received_at_ms,
        });
        true
    }

    pub fn find(&self, video_id: &VideoId) -> Option<&KeyRecord> {
        self.records.iter().find(|r| r.video_id == *video_id)
    }

    /// Tokens held for `video_id`, ordered by chunk index.
    pub fn tokens_for(&self, video_id: &VideoId) -> Vec<ChunkToken> {
        let mut out: Vec<ChunkToken> = self
            .tokens
            .iter()
            .filter(|t| t.token.video_id == *video_id)
            .map(|t| t.token.clone())
            .collect();
        out.sort_by_key(|t| t.chunk_index);
        out
    }

    /// The record broadcast right after `record` by the same camera on the
    /// same tier, if held.
    pub fn successor_of(&self, record: &KeyRecord) -> Option<&KeyRecord> {
        self.records
            .iter()
            .filter(|r| {
                r.camera_address == record.camera_address
                    && r.tier == record.tier
                    && r.seq == record.seq.wrapping_add(1)
                    && r.received_at_ms >= record.received_at_ms
            })
            .min_by_key(|r| r.received_at_ms)
    }

    /// Adds everything from `other`; returns how many entries were new.
    pub fn merge(&mut self, other: Wallet) -> usize {
        let mut added = 0;
        for r in other.records {
            added += self.ingest(r) as usize;
        }
        for t in other.tokens {
            added += self.ingest_token(t.token, t.received_at_ms) as usize;
        }
        added
    }

    pub fn load(path: &Path) -> Result<Self> {
        match fs::File::open(path) {
            Ok(f) => import_wallet(f),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Wallet::new()),
            Err(e) => Err(e.into()),
        }
    }

    /// Writes the whole wallet, replacing `path` atomically.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            write_wallet(&mut f, self.records.iter(), self.tokens.iter())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

fn checksum(json: &str) -> String {
    hex::encode(&Sha256::digest(json.as_bytes())[..4])
}

fn write_wallet<'a, W: Write>(
    out: &mut W,
    records: impl Iterator<Item = &'a KeyRecord>,
    tokens: impl Iterator<Item = &'a TokenRecord>,
) -> Result<()> {
    writeln!(out, "{WALLET_HEADER}")?;
    let mut line = |entry: &WalletEntry| -> Result<()> {
        let json = serde_json::to_string(entry).expect("wallet entries serialize");
        writeln!(out, "{} {}", checksum(&json), json)?;
        Ok(())
    };
    for r in records {
        line(&WalletEntry::Key(r.clone()))?;
    }
    for t in tokens {
        line(&WalletEntry::Token(t.clone()))?;
    }
    Ok(())
}

/// Exports records received within `[from_ms, to_ms]` and the tokens that go
/// with them. An empty range still produces a valid (header-only) file.
pub fn export_wallet<W: Write>(wallet: &Wallet, from_ms: u64, to_ms: u64, mut out: W) -> Result<()> {
    let records: Vec<&KeyRecord> = wallet
        .records
        .iter()
        .filter(|r| (from_ms..=to_ms).contains(&r.received_at_ms))
        .collect();
    let tokens: Vec<&TokenRecord> = wallet
        .tokens
        .iter()
        .filter(|t| {
            (from_ms..=to_ms).contains(&t.received_at_ms)
                || records.iter().any(|r| r.video_id == t.token.video_id)
        })
        .collect();
    write_wallet(&mut out, records.into_iter(), tokens.into_iter())?;
    out.flush()?;
    Ok(())
}

pub fn import_wallet<R: Read>(input: R) -> Result<Wallet> {
    let mut wallet = Wallet::new();
    let reader = BufReader::new(input);
    let mut saw_header = false;
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let line = line?;
        let err = |reason: &str| ClientError::WalletFormat {
            line: n,
            reason: reason.to_string(),
        };
        if !saw_header {
            if line.trim_end() != WALLET_HEADER {
                return Err(err("missing or unsupported wallet header"));
            }
            saw_header = true;
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (sum, json) = line.split_once(' ').ok_or_else(|| err("missing checksum"))?;
        if checksum(json) != sum {
            return Err(err("checksum mismatch"));
        }
        let entry: WalletEntry = serde_json::from_str(json).map_err(|e| err(&e.to_string()))?;
        match entry {
            WalletEntry::Key(r) => {
                wallet.ingest(r);
            }
            WalletEntry::Token(t) => {
                wallet.ingest_token(t.token, t.received_at_ms);
            }
        }
    }
    if !saw_header {
        return Err(ClientError::WalletFormat {
            line: 1,
            reason: "empty file".into(),
        });
    }
    Ok(wallet)
}

// ---------------------------------------------------------------------------
// Sessions

/// How records are split into sessions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRule {
    /// A gap longer than this many reconnect intervals starts a new session...
    pub ri_multiplier: u32,
    /// ...unless it is shorter than this floor.
    pub min_gap_s: u64,
    /// Cameras with coordinates closer than this are one location.
    pub merge_radius_m: f64,
}

impl Default for GapRule {
    fn default() -> Self {
        Self {
            ri_multiplier: 2,
            min_gap_s: 90,
            merge_radius_m: 25.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Session {
    pub cameras: Vec<Address>,
    pub camera_names: Vec<String>,
    pub start_ms: u64,
    pub end_ms: u64,
    pub video_ids: Vec<VideoId>,
    /// Indices into [`Wallet::records`].
    #[serde(skip)]
    pub record_indices: Vec<usize>,
}

/// Great-circle distance in metres.
pub fn haversine_m(a: (f64, f64), b: (f64, f64)) -> f64 {
    const R: f64 = 6_371_000.0;
    let (lat1, lat2) = (a.0.to_radians(), b.0.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.1 - a.1).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * R * h.sqrt().min(1.0).asin()
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Groups records by location, then splits each location's timeline where
/// the gap between consecutive records exceeds
/// `max(ri_multiplier * RI, min_gap_s)`. The result does not depend on the
/// order in which records were ingested.
pub fn group_sessions(wallet: &Wallet, rule: &GapRule) -> Vec<Session> {
    // one location per camera: the one from its latest record
    let mut cams: BTreeMap<Address, &KeyRecord> = BTreeMap::new();
    for r in &wallet.records {
        let e = cams.entry(r.camera_address).or_insert(r);
        if (r.received_at_ms, r.video_id) > (e.received_at_ms, e.video_id) {
            *e = r;
        }
    }
    let addrs: Vec<Address> = cams.keys().copied().collect();
    let mut parent: Vec<usize> = (0..addrs.len()).collect();
    for i in 0..addrs.len() {
        for j in i + 1..addrs.len() {
            let same = match (&cams[&addrs[i]].location, &cams[&addrs[j]].location) {
                (
                    Location::Coordinates { lat: a1, lon: o1 },
                    Location::Coordinates { lat: a2, lon: o2 },
                ) => haversine_m((*a1, *o1), (*a2, *o2)) <= rule.merge_radius_m,
                (Location::Description(a), Location::Description(b)) => a == b,
                _ => false,
            };
            if same {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
    }
    let group_of: HashMap<Address, usize> = (0..addrs.len())
        .map(|i| (addrs[i], find(&mut parent, i)))
        .collect();

    let mut by_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, r) in wallet.records.iter().enumerate() {
        by_group.entry(group_of[&r.camera_address]).or_default().push(idx);
    }

    let mut sessions = Vec::new();
    for (_, mut idxs) in by_group {
        let recs = &wallet.records;
        idxs.sort_by(|&a, &b| {
            let (ra, rb) = (&recs[a], &recs[b]);
            (ra.received_at_ms, ra.camera_address, ra.seq, ra.video_id, ra.tier as u8)
                .cmp(&(rb.received_at_ms, rb.camera_address, rb.seq, rb.video_id, rb.tier as u8))
        });
        let mut current: Vec<usize> = Vec::new();
        for idx in idxs {
            if let Some(&last) = current.last() {
                let prev = &recs[last];
                let threshold = (rule.ri_multiplier as u64 * prev.reconnect_interval_s as u64 * 1000)
                    .max(rule.min_gap_s * 1000);
                if recs[idx].received_at_ms - prev.received_at_ms > threshold {
                    sessions.push(make_session(wallet, std::mem::take(&mut current)));
                }
            }
            current.push(idx);
        }
        if !current.is_empty() {
            sessions.push(make_session(wallet, current));
        }
    }
    sessions.sort_by_key(|s| (s.start_ms, s.cameras.first().copied()));
    sessions
}

fn make_session(wallet: &Wallet, idxs: Vec<usize>) -> Session {
    let recs: Vec<&KeyRecord> = idxs.iter().map(|&i| &wallet.records[i]).collect();
    let mut cameras: Vec<Address> = recs.iter().map(|r| r.camera_address).collect();
    cameras.sort();
    cameras.dedup();
    let mut camera_names: Vec<String> = recs.iter().map(|r| r.camera_name.clone()).collect();
    camera_names.sort();
    camera_names.dedup();
    Session {
        cameras,
        camera_names,
        start_ms: recs.iter().map(|r| r.received_at_ms).min().unwrap_or(0),
        end_ms: recs.iter().map(|r| r.received_at_ms).max().unwrap_or(0),
        video_ids: recs.iter().map(|r| r.video_id).collect(),
        record_indices: idxs,
    }
}

// ---------------------------------------------------------------------------
// Fetching

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChainCheck {
    /// The successor packet's prefix matches the fetched file.
    Confirmed,
    Mismatch,
    /// No successor packet is held, so the file cannot be checked.
    NoSuccessor,
}

impl std::fmt::Display for ChainCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ChainCheck::Confirmed => "confirmed",
            ChainCheck::Mismatch => "mismatch",
            ChainCheck::NoSuccessor => "no successor",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Footage {
    Whole(Vec<u8>),
    Chunked(Vec<ChunkResult>),
}

impl Footage {
    /// Concatenated plaintext of everything that could be opened.
    pub fn plaintext(&self) -> Vec<u8> {
        match self {
            Footage::Whole(p) => p.clone(),
            Footage::Chunked(chunks) => chunks
                .iter()
                .filter_map(|c| match &c.content {
                    ChunkContent::Plaintext(p) => Some(p.as_slice()),
                    ChunkContent::Locked => None,
                })
                .flatten()
                .copied()
                .collect(),
        }
    }

    pub fn locked_chunks(&self) -> Vec<u16> {
        match self {
            Footage::Whole(_) => Vec::new(),
            Footage::Chunked(chunks) => chunks
                .iter()
                .filter(|c| c.content == ChunkContent::Locked)
                .map(|c| c.chunk_index)
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decrypted {
    pub video_id: VideoId,
    pub footage: Footage,
    pub chain: ChainCheck,
    pub stored_bytes: usize,
}

fn chain_check(container: &[u8], successor: Option<&KeyRecord>) -> ChainCheck {
    match successor {
        None => ChainCheck::NoSuccessor,
        Some(s) if s.prev_hash_prefix == hash_prefix(container) => ChainCheck::Confirmed,
        Some(_) => ChainCheck::Mismatch,
    }
}

/// Fetches the footage for `record` and opens it. Chunked containers are
/// opened with whatever `tokens` cover; the rest come back locked.
pub fn fetch_and_decrypt<F: Fetcher + ?Sized>(
    record: &KeyRecord,
    tokens: &[ChunkToken],
    fetcher: &F,
    successor: Option<&KeyRecord>,
) -> Result<Decrypted> {
    let url = record.url()?;
    let container = match fetcher.fetch(&url) {
        Ok(c) => c,
        Err(StoreError::NotFound(_)) => return Err(ClientError::Unavailable(record.video_id)),
        Err(e) => return Err(ClientError::Fetch(e.to_string())),
    };
    let chain = chain_check(&container, successor);
    let key = SegmentKey::from_bytes(record.key);
    let map = |e: CryptoError| match e {
        CryptoError::Integrity => ClientError::Integrity {
            video_id: record.video_id,
            chain,
        },
        other => ClientError::Format(record.video_id, other.to_string()),
    };
    let scheme = crypto::container_scheme(&container).map_err(map)?;
    let footage = if scheme == crypto::SCHEME_CHUNKED {
        Footage::Chunked(decrypt_segment_chunked(&container, &key, tokens).map_err(map)?)
    } else {
        Footage::Whole(decrypt_segment(&container, &key).map_err(map)?)
    };
    Ok(Decrypted {
        video_id: record.video_id,
        footage,
        chain,
        stored_bytes: container.len(),
    })
}

// ---------------------------------------------------------------------------
// Listening

/// Turns advertisements heard by a [`Scanner`] into wallet entries.
pub struct Listener<S: Scanner> {
    scanner: S,
    wallet: Wallet,
    last_seq: HashMap<Address, u8>,
}

impl<S: Scanner> Listener<S> {
    pub fn new(scanner: S, wallet: Wallet) -> Self {
        Self {
            scanner,
            wallet,
            last_seq: HashMap::new(),
        }
    }

    pub fn wallet(&self) -> &Wallet {
        &self.wallet
    }

    pub fn into_wallet(self) -> Wallet {
        self.wallet
    }

    /// Hands over everything collected so far, leaving an empty wallet.
    pub fn take_wallet(&mut self) -> Wallet {
        std::mem::take(&mut self.wallet)
    }

    pub fn scanner(&self) -> &S {
        &self.scanner
    }

    fn read_camera(&self, camera: Address, now: u64) -> Option<(CameraDescriptor, Vec<(Tier, KeyPacket)>)> {
        let read = |uuid| self.scanner.read(camera, uuid, now);
        let descriptor = decode_descriptor(
            &read(UUID_NAME).ok()?,
            &read(UUID_MODE).ok()?,
            &read(UUID_LOCATION).ok()?,
            &read(UUID_URL_FORMAT).ok()?,
        )
        .ok()?;
        let mut packets = vec![(Tier::Full, decode_key_packet(&read(UUID_KEY).ok()?).ok()?)];
        if let Ok(bytes) = read(UUID_BASE_KEY) {
            if let Ok(p) = decode_key_packet(&bytes) {
                packets.push((Tier::Base, p));
            }
        }
        Some((descriptor, packets))
    }

    /// Processes everything received since the last poll. Returns the number
    /// of new key records.
    pub fn poll(&mut self, now_ms: u64) -> usize {
        let mut added = 0;
        for rx in self.scanner.receive() {
            match decode_advertisement(&rx.payload) {
                Ok(Advertisement::Beacon { seq, .. }) => {
                    if self.last_seq.get(&rx.sender) == Some(&seq) {
                        continue;
                    }
                    // a failed read leaves the seq unseen so the next beacon retries
                    if let Some((descriptor, packets)) = self.read_camera(rx.sender, now_ms) {
                        self.last_seq.insert(rx.sender, seq);
                        for (tier, packet) in packets {
                            let rec = KeyRecord::new(rx.sender, &descriptor, &packet, now_ms, tier);
                            added += self.wallet.ingest(rec) as usize;
                        }
                    }
                }
                Ok(Advertisement::Token {
                    video_id,
                    chunk_index,
                    token,
                }) => {
                    self.wallet.ingest_token(
                        ChunkToken {
                            token,
                            chunk_index,
                            video_id,
                        },
                        now_ms,
                    );
                }
                Err(_) => {}
            }
        }
        added
    }
}
