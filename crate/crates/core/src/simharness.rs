//! Discrete-time 2D simulation of who ends up holding which keys.
//!
//! Cameras have a view sector and a radio disc. Subjects move along
//! piecewise-linear trajectories. Each timestep cameras advertise over a
//! spatial [`Medium`]; subjects that hear a beacon read the key
//! characteristic. The report then compares what each subject can decrypt
//! with what they were actually in view for.
//!
//! Definitions used throughout:
//!
//! * a subject is *in view* of a camera at a timestep when its position is
//!   within `view_depth_m` of the camera and its bearing is within
//!   `fov_deg / 2` of `orientation_deg` (degrees counter-clockwise from +x);
//!   each in-view timestep counts for the whole step;
//! * **bleed** counts held segment keys for segments during which the
//!   subject was never in view;
//! * **over-share** sums, over held segments, the segment duration minus the
//!   in-view time within it. With chunk tokens only chunks whose token was
//!   also held count, so the sum runs over held chunks instead.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{
    decode_advertisement, decode_key_packet, encode_advertisement, encode_key_packet,
    Advertisement, KeyPacket, VideoId, UUID_BASE_KEY, UUID_KEY,
};
use crate::transport::{Address, DeliveryRecord, Medium, Peer, PeerKind, RangeModel};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scenario: {0}")]
    Config(String),
    #[error("scenario file: {0}")]
    Parse(String),
    #[error(transparent)]
    Transport(#[from] crate::transport::TransportError),
    #[error("report output: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Radio {
    pub radius_m: f64,
    #[serde(default)]
    pub loss_probability: f64,
}

fn one_second() -> f64 {
    1.0
}

fn one() -> u16 {
    1
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimCamera {
    pub name: String,
    pub position: (f64, f64),
    pub orientation_deg: f64,
    pub fov_deg: f64,
    pub view_depth_m: f64,
    pub segment_interval_s: u32,
    #[serde(default = "one_second")]
    pub advert_interval_s: f64,
    /// Falls back to the scenario's `default_radio`.
    #[serde(default)]
    pub radio: Option<Radio>,
    /// 1 means single-key segments without tokens.
    #[serde(default = "one")]
    pub chunk_count: u16,
    #[serde(default)]
    pub base_tier: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subject {
    pub name: String,
    #[serde(default = "yes")]
    pub trusted: bool,
    /// `(time_s, x, y)`; position is interpolated linearly between waypoints
    /// and held constant outside them.
    pub waypoints: Vec<(f64, f64, f64)>,
}

impl Subject {
    pub fn position_at(&self, t_s: f64) -> (f64, f64) {
        let w = &self.waypoints;
        if t_s <= w[0].0 {
            return (w[0].1, w[0].2);
        }
        for pair in w.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if t_s <= b.0 {
                let f = (t_s - a.0) / (b.0 - a.0);
                return (a.1 + f * (b.1 - a.1), a.2 + f * (b.2 - a.2));
            }
        }
        let last = w[w.len() - 1];
        (last.1, last.2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub duration_s: f64,
    #[serde(default = "one_second")]
    pub timestep_s: f64,
    #[serde(default)]
    pub default_radio: Option<Radio>,
    pub cameras: Vec<SimCamera>,
    #[serde(default)]
    pub subjects: Vec<Subject>,
}

fn ms(s: f64) -> u64 {
    (s * 1000.0).round() as u64
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn radio_of(&self, cam: &SimCamera) -> Option<Radio> {
        cam.radio.or(self.default_radio)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SimError::Config(m));
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return bad("duration_s must be positive".into());
        }
        if ms(self.timestep_s) == 0 {
            return bad("timestep_s must be at least 1 ms".into());
        }
        let mut names = BTreeSet::new();
        for c in &self.cameras {
            if !names.insert(&c.name) {
                return bad(format!("duplicate camera name {:?}", c.name));
            }
            if !(c.fov_deg > 0.0 && c.fov_deg <= 360.0) {
                return bad(format!("camera {}: fov_deg must be in (0, 360], got {}", c.name, c.fov_deg));
            }
            if !(c.view_depth_m >= 0.0) {
                return bad(format!("camera {}: view_depth_m must be >= 0", c.name));
            }
            if c.segment_interval_s == 0 || c.segment_interval_s > u16::MAX as u32 {
                return bad(format!("camera {}: segment_interval_s must be 1..=65535", c.name));
            }
            if ms(c.advert_interval_s) < 20 {
                return bad(format!("camera {}: advert_interval_s must be >= 0.02", c.name));
            }
            if c.chunk_count == 0 {
                return bad(format!("camera {}: chunk_count must be >= 1", c.name));
            }
            let radio = self
                .radio_of(c)
                .ok_or_else(|| SimError::Config(format!("camera {}: no radio and no default_radio", c.name)))?;
            RangeModel::new(radio.radius_m, radio.loss_probability, 0)
                .validate()
                .map_err(|e| SimError::Config(format!("camera {}: {e}", c.name)))?;
        }
        let mut names = BTreeSet::new();
        for s in &self.subjects {
            if !names.insert(&s.name) {
                return bad(format!("duplicate subject name {:?}", s.name));
            }
            if s.waypoints.is_empty() {
                return bad(format!("subject {}: no waypoints", s.name));
            }
            if s.waypoints.windows(2).any(|w| !(w[1].0 > w[0].0)) {
                return bad(format!("subject {}: waypoint times must be strictly increasing", s.name));
            }
        }
        Ok(())
    }
}

/// Sector membership test; a subject standing on the camera is in view.
pub fn in_view(cam: &SimCamera, p: (f64, f64)) -> bool {
    let (dx, dy) = (p.0 - cam.position.0, p.1 - cam.position.1);
    let d = dx.hypot(dy);
    if d > cam.view_depth_m {
        return false;
    }
    if d == 0.0 || cam.fov_deg >= 360.0 {
        return true;
    }
    let bearing = dy.atan2(dx).to_degrees();
    let diff = (bearing - cam.orientation_deg).rem_euclid(360.0);
    let diff = if diff > 180.0 { 360.0 - diff } else { diff };
    diff <= cam.fov_deg / 2.0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub keys_received: u64,
    /// Keys for segments the subject was never in view of.
    pub bleed: u64,
    pub over_share_s: f64,
    pub tokens_received: u64,
    pub base_keys_received: u64,
    pub in_view_s: f64,
}

impl Metrics {
    fn add(&mut self, o: &Metrics) {
        self.keys_received += o.keys_received;
        self.bleed += o.bleed;
        self.over_share_s += o.over_share_s;
        self.tokens_received += o.tokens_received;
        self.base_keys_received += o.base_keys_received;
        self.in_view_s += o.in_view_s;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairMetrics {
    pub subject: String,
    pub camera: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NamedMetrics {
    pub name: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleedReport {
    pub seed: u64,
    pub duration_s: f64,
    pub timestep_s: f64,
    pub pairs: Vec<PairMetrics>,
    pub subjects: Vec<NamedMetrics>,
    pub cameras: Vec<NamedMetrics>,
    pub totals: Metrics,
}

impl BleedReport {
    pub fn pair(&self, subject: &str, camera: &str) -> Option<&Metrics> {
        self.pairs
            .iter()
            .find(|p| p.subject == subject && p.camera == camera)
            .map(|p| &p.metrics)
    }

    pub fn subject(&self, name: &str) -> Option<&Metrics> {
        self.subjects.iter().find(|s| s.name == name).map(|s| &s.metrics)
    }

    pub fn write_json<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, self).map_err(std::io::Error::from)?;
        writeln!(out)?;
        Ok(())
    }

    /// One row per (subject, camera) pair plus one `*` row per subject.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let rows = self
            .pairs
            .iter()
            .map(|p| (p.subject.as_str(), p.camera.as_str(), &p.metrics))
            .chain(self.subjects.iter().map(|s| (s.name.as_str(), "*", &s.metrics)));
        w.write_record([
            "subject",
            "camera",
            "keys_received",
            "bleed",
            "over_share_s",
            "tokens_received",
            "base_keys_received",
            "in_view_s",
        ])
        .map_err(csv_err)?;
        for (subject, camera, m) in rows {
            w.write_record([
                subject.to_string(),
                camera.to_string(),
                m.keys_received.to_string(),
                m.bleed.to_string(),
                format!("{:.3}", m.over_share_s),
                m.tokens_received.to_string(),
                m.base_keys_received.to_string(),
                format!("{:.3}", m.in_view_s),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> SimError {
    SimError::Io(std::io::Error::other(e))
}

pub struct SimOutcome {
    pub report: BleedReport,
    pub deliveries: Vec<DeliveryRecord>,
}

fn camera_address(i: usize) -> Address {
    Address([0xCA, 0x11, 0, 0, (i >> 8) as u8, i as u8])
}

// Tokens go out on their own radio identity so that adding them does not
// shift the loss draws of the beacons.
fn token_address(i: usize) -> Address {
    Address([0xCA, 0x70, 0, 0, (i >> 8) as u8, i as u8])
}

fn subject_address(i: usize) -> Address {
    Address([0x5B, 0, 0, 0, (i >> 8) as u8, i as u8])
}

fn video_id(cam: usize, seg: u64, base: bool) -> VideoId {
    let mut id = [0u8; 8];
    id[0] = (cam >> 8) as u8;
    id[1] = cam as u8;
    id[2] = if base { 0xBA } else { 0xF0 };
    id[3..].copy_from_slice(&seg.to_be_bytes()[3..]);
    VideoId(id)
}

fn mix_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Segment `s` of a camera spans `[s*I, min((s+1)*I, duration))`.
pub fn segment_span(interval_ms: u64, duration_ms: u64, s: u64) -> (u64, u64) {
    let start = s * interval_ms;
    (start, ((s + 1) * interval_ms).min(duration_ms))
}

/// Chunk `j` covers the instants `t` of the segment with
/// `floor((t - start) * n / len) == j`.
pub fn chunk_span(start: u64, end: u64, n: u16, j: u16) -> (u64, u64) {
    let len = end - start;
    let at = |k: u64| start + (k * len).div_ceil(n as u64);
    (at(j as u64), at(j as u64 + 1))
}

fn chunk_at(start: u64, end: u64, n: u16, t: u64) -> u16 {
    (((t - start) as u128 * n as u128) / (end - start) as u128) as u16
}

fn overlap(a: (u64, u64), b: (u64, u64)) -> u64 {
    a.1.min(b.1).saturating_sub(a.0.max(b.0))
}

#[derive(Default)]
struct Holdings {
    segments: BTreeSet<u64>,
    base_segments: BTreeSet<u64>,
    chunks: BTreeSet<(u64, u16)>,
}

/// Runs `scenario` deterministically under `seed`.
pub fn run_scenario(scenario: &Scenario, seed: u64) -> Result<SimOutcome> {
    run_scenario_with(scenario, seed, true)
}

/// As [`run_scenario`]; `log` controls whether deliveries are recorded.
pub fn run_scenario_with(scenario: &Scenario, seed: u64, log: bool) -> Result<SimOutcome> {
    scenario.validate()?;
    let duration_ms = ms(scenario.duration_s);
    let dt = ms(scenario.timestep_s);
    let medium = Medium::loopback();
    medium.set_logging(log);

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for (i, c) in scenario.cameras.iter().enumerate() {
        let radio = scenario.radio_of(c).expect("validated");
        let range = RangeModel::new(radio.radius_m, radio.loss_probability, mix_seed(seed, i));
        for addr in [camera_address(i), token_address(i)] {
            medium.register(Peer {
                address: addr,
                position: Some(c.position),
                kind: PeerKind::Camera,
            })?;
            medium.set_range(addr, range)?;
        }
    }
    for (i, s) in scenario.subjects.iter().enumerate() {
        medium.register(Peer {
            address: subject_address(i),
            position: Some(s.position_at(0.0)),
            kind: PeerKind::Listener,
        })?;
    }

    let ncam = scenario.cameras.len();
    let nsub = scenario.subjects.len();
    let mut published: Vec<Option<u64>> = vec![None; ncam];
    let mut tokens: BTreeMap<(usize, u64, u16), [u8; 16]> = BTreeMap::new();
    let mut holdings: Vec<Vec<Holdings>> = (0..nsub)
        .map(|_| (0..ncam).map(|_| Holdings::default()).collect())
        .collect();
    let mut view_steps: Vec<Vec<Vec<u64>>> = vec![vec![Vec::new(); ncam]; nsub];

    let mut t = 0;
    while t < duration_ms {
        let step_end = (t + dt).min(duration_ms);
        for (i, s) in scenario.subjects.iter().enumerate() {
            let p = s.position_at(t as f64 / 1000.0);
            medium.set_position(subject_address(i), Some(p))?;
            for (j, c) in scenario.cameras.iter().enumerate() {
                if in_view(c, p) {
                    view_steps[i][j].push(t);
                }
            }
        }

        for (j, c) in scenario.cameras.iter().enumerate() {
            let interval = c.segment_interval_s as u64 * 1000;
            let advert = ms(c.advert_interval_s);
            // beacons at every advert instant of the step, counted from segment start
            let mut a = t;
            while a < step_end {
                let seg = a / interval;
                let (start, end) = segment_span(interval, duration_ms, seg);
                let next = start + (a - start).div_ceil(advert) * advert;
                if next >= end {
                    a = end;
                    continue;
                }
                if next >= step_end {
                    break;
                }
                if published[j] != Some(seg) {
                    publish_segment(&medium, &mut rng, j, c, seg, next)?;
                    published[j] = Some(seg);
                }
                let beacon = encode_advertisement(&Advertisement::Beacon {
                    camera_id: [0xCA, 0x11, 0, 0, (j >> 8) as u8, j as u8, 0, 0],
                    seq: seg as u8,
                });
                medium.advertise(camera_address(j), &beacon, next)?;
                a = next + 1;
            }
            if c.chunk_count > 1 {
                // one token advert per chunk overlapping the step
                let mut a = t;
                while a < step_end {
                    let seg = a / interval;
                    let (start, end) = segment_span(interval, duration_ms, seg);
                    let k = chunk_at(start, end, c.chunk_count, a);
                    let span = chunk_span(start, end, c.chunk_count, k);
                    let token = *tokens.entry((j, seg, k)).or_insert_with(|| {
                        let mut b = [0u8; 16];
                        rng.fill_bytes(&mut b);
                        b
                    });
                    let adv = encode_advertisement(&Advertisement::Token {
                        video_id: video_id(j, seg, false),
                        chunk_index: k,
                        token,
                    });
                    medium.advertise(token_address(j), &adv, a)?;
                    a = span.1.min(end);
                }
            }
        }

        for (i, s) in scenario.subjects.iter().enumerate() {
            for rx in medium.receive(subject_address(i)) {
                match decode_advertisement(&rx.payload) {
                    Ok(Advertisement::Beacon { .. }) => {
                        let j = rx.sender.0[5] as usize | (rx.sender.0[4] as usize) << 8;
                        let c = &scenario.cameras[j];
                        let uuid = if s.trusted { UUID_KEY } else { UUID_BASE_KEY };
                        if !s.trusted && !c.base_tier {
                            continue;
                        }
                        if let Ok(bytes) = medium.read_characteristic(subject_address(i), rx.sender, uuid, rx.timestamp_ms) {
                            let packet = decode_key_packet(&bytes).expect("sim packets are well formed");
                            let seg = u64::from_be_bytes({
                                let mut b = [0u8; 8];
                                b[3..].copy_from_slice(&packet.video_id.0[3..]);
                                b
                            });
                            let h = &mut holdings[i][j];
                            if s.trusted {
                                h.segments.insert(seg);
                            } else {
                                h.base_segments.insert(seg);
                            }
                        }
                    }
                    Ok(Advertisement::Token { video_id, chunk_index, .. }) => {
                        let j = rx.sender.0[5] as usize | (rx.sender.0[4] as usize) << 8;
                        let seg = u64::from_be_bytes({
                            let mut b = [0u8; 8];
                            b[3..].copy_from_slice(&video_id.0[3..]);
                            b
                        });
                        holdings[i][j].chunks.insert((seg, chunk_index));
                    }
                    Err(_) => {}
                }
            }
        }
        t = step_end;
    }

    let mut pairs = Vec::new();
    let mut subjects = Vec::new();
    let mut cam_totals = vec![Metrics::default(); ncam];
    let mut totals = Metrics::default();
    for (i, s) in scenario.subjects.iter().enumerate() {
        let mut sub_total = Metrics::default();
        for (j, c) in scenario.cameras.iter().enumerate() {
            let m = pair_metrics(
                &holdings[i][j],
                &view_steps[i][j],
                c,
                duration_ms,
                dt,
            );
            sub_total.add(&m);
            cam_totals[j].add(&m);
            totals.add(&m);
            pairs.push(PairMetrics {
                subject: s.name.clone(),
                camera: c.name.clone(),
                metrics: m,
            });
        }
        subjects.push(NamedMetrics {
            name: s.name.clone(),
            metrics: sub_total,
        });
    }
    let cameras = scenario
        .cameras
        .iter()
        .zip(cam_totals)
        .map(|(c, m)| NamedMetrics {
            name: c.name.clone(),
            metrics: m,
        })
        .collect();

    Ok(SimOutcome {
        report: BleedReport {
            seed,
            duration_s: scenario.duration_s,
            timestep_s: scenario.timestep_s,
            pairs,
            subjects,
            cameras,
            totals,
        },
        deliveries: medium.log(),
    })
}

fn publish_segment(
    medium: &Medium,
    rng: &mut ChaCha20Rng,
    j: usize,
    c: &SimCamera,
    seg: u64,
    now: u64,
) -> Result<()> {
    for (uuid, base) in [(UUID_KEY, false), (UUID_BASE_KEY, true)] {
        if base && !c.base_tier {
            medium.withdraw(camera_address(j), uuid);
            continue;
        }
        let mut key = [0u8; 32];
        rng.fill_bytes(&mut key);
        let packet = KeyPacket {
            key,
            seq: seg as u8,
            reconnect_interval_s: c.segment_interval_s as u16,
            video_id: video_id(j, seg, base),
            prev_hash_prefix: [0; 21],
        };
        medium.publish(camera_address(j), uuid, &encode_key_packet(&packet), now)?;
    }
    Ok(())
}

fn pair_metrics(h: &Holdings, view_steps: &[u64], c: &SimCamera, duration_ms: u64, dt: u64) -> Metrics {
    let interval = c.segment_interval_s as u64 * 1000;
    let in_view_ms = |span: (u64, u64)| -> u64 {
        view_steps
            .iter()
            .map(|&t| overlap((t, (t + dt).min(duration_ms)), span))
            .sum()
    };
    let mut m = Metrics {
        keys_received: h.segments.len() as u64,
        tokens_received: h.chunks.len() as u64,
        base_keys_received: h.base_segments.len() as u64,
        in_view_s: view_steps
            .iter()
            .map(|&t| (t + dt).min(duration_ms) - t)
            .sum::<u64>() as f64
            / 1000.0,
        ..Metrics::default()
    };
    let mut over_ms = 0u64;
    for &seg in &h.segments {
        let (start, end) = segment_span(interval, duration_ms, seg);
        let seen = in_view_ms((start, end));
        if seen == 0 {
            m.bleed += 1;
        }
        if c.chunk_count > 1 {
            for k in 0..c.chunk_count {
                if h.chunks.contains(&(seg, k)) {
                    let span = chunk_span(start, end, c.chunk_count, k);
                    over_ms += (span.1 - span.0) - in_view_ms(span);
                }
            }
        } else {
            over_ms += (end - start) - seen;
        }
    }
    m.over_share_s = over_ms as f64 / 1000.0;
    m
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GranularityComparison {
    pub interval_s: u32,
    pub chunk_count: u16,
    pub coarse: BleedReport,
    pub chunked: BleedReport,
}

/// Same scenario, seed and trajectories, once with single-key segments of
/// `coarse_interval_s` and once with `chunk_count` tokens per segment.
pub fn compare_granularity(
    scenario: &Scenario,
    seed: u64,
    coarse_interval_s: u32,
    chunk_count: u16,
) -> Result<GranularityComparison> {
    if chunk_count < 2 {
        return Err(SimError::Config("chunk_count must be >= 2".into()));
    }
    let with = |n: u16| {
        let mut s = scenario.clone();
        for c in &mut s.cameras {
            c.segment_interval_s = coarse_interval_s;
            c.chunk_count = n;
        }
        s
    };
    let coarse = run_scenario_with(&with(1), seed, false)?.report;
    let chunked = run_scenario_with(&with(chunk_count), seed, false)?.report;
    Ok(GranularityComparison {
        interval_s: coarse_interval_s,
        chunk_count,
        coarse,
        chunked,
    })
}
