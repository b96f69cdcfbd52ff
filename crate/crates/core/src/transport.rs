//! BLE-like broadcast medium.
//!
//! A [`Medium`] is an in-process broker: peers register with an address and
//! an optional position, cameras advertise short payloads and publish
//! characteristic values, listeners scan and read. Every delivery attempt is
//! appended to a single totally ordered log.
//!
//! In spatial mode a payload reaches a scanner when the scanner lies inside
//! the sender's radio disc and an independent loss draw succeeds. The draw is
//! keyed by (seed, sender, receiver, emission index), never by geometry, so
//! growing the radius can only add deliveries.
//!
//! [`udp`] carries the same surface over loopback datagrams for
//! multi-process demos.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::protocol::{CAMERA_ID_LEN, MAX_ADVERTISEMENT_LEN};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("payload of {0} bytes exceeds the 31-byte advertisement limit")]
    PayloadTooLarge(usize),
    #[error("peer {0} is out of range")]
    Unreachable(Address),
    #[error("no such characteristic {0:#06x}")]
    NoSuchCharacteristic(u16),
    #[error("unknown peer {0}")]
    UnknownPeer(Address),
    #[error("address {0} already registered")]
    DuplicateAddress(Address),
    #[error("transport i/o: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, TransportError>;

/// 6-byte transport address, printed colon-separated.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Address(pub [u8; 6]);

impl Address {
    /// Transport address a camera uses: the first six bytes of its id.
    pub fn for_camera(camera_id: &[u8; CAMERA_ID_LEN]) -> Self {
        Address(camera_id[..6].try_into().unwrap())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let cleaned: String = s.chars().filter(|c| *c != ':').collect();
        let mut out = [0u8; 6];
        hex::decode_to_slice(cleaned, &mut out).ok()?;
        Some(Address(out))
    }
}

impl std::fmt::Display for Address {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|b| format!("{b:02x}")).collect();
        f.write_str(&parts.join(":"))
    }
}

impl std::fmt::Debug for Address {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Address({self})")
    }
}

impl Serialize for Address {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Address {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Address::from_hex(&s).ok_or_else(|| serde::de::Error::custom(format!("bad address {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeerKind {
    Camera,
    Listener,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Peer {
    pub address: Address,
    pub position: Option<(f64, f64)>,
    pub kind: PeerKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeModel {
    pub radius_m: f64,
    #[serde(default)]
    pub loss_probability: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

impl RangeModel {
    pub fn new(radius_m: f64, loss_probability: f64, rng_seed: u64) -> Self {
        Self {
            radius_m,
            loss_probability,
            rng_seed,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.radius_m > 0.0) || !self.radius_m.is_finite() {
            return Err(format!("radius_m must be positive, got {}", self.radius_m));
        }
        if !(0.0..=1.0).contains(&self.loss_probability) {
            return Err(format!(
                "loss_probability must lie in [0, 1], got {}",
                self.loss_probability
            ));
        }
        Ok(())
    }
}

/// Uniform draw in [0, 1) fixed by its key.
fn loss_draw(seed: u64, sender: Address, receiver: Address, emission: u64) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(sender.0);
    h.update(receiver.0);
    h.update(emission.to_be_bytes());
    let d = h.finalize();
    let v = u64::from_be_bytes(d[..8].try_into().unwrap());
    (v >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reception {
    pub sender: Address,
    pub payload: Vec<u8>,
    pub timestamp_ms: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Advert,
    Read,
    Publish,
}

/// One line of the delivery log. For reads, `sender` is the camera that
/// served the value and `receiver` the reader.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryRecord {
    pub time_ms: u64,
    pub kind: RecordKind,
    pub sender: Address,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub receiver: Option<Address>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub uuid: Option<u16>,
    pub payload_hex: String,
    pub delivered: bool,
}

#[derive(Debug)]
struct PeerState {
    peer: Peer,
    range: Option<RangeModel>,
    scanning: bool,
    inbox: VecDeque<Reception>,
    characteristics: BTreeMap<u16, Vec<u8>>,
    emissions: u64,
}

#[derive(Debug)]
struct MediumState {
    default_range: Option<RangeModel>,
    peers: BTreeMap<Address, PeerState>,
    log: Vec<DeliveryRecord>,
    logging: bool,
}

impl MediumState {
    fn range_for(&self, sender: &PeerState) -> Option<RangeModel> {
        sender.range.or(self.default_range)
    }

    fn in_range(range: Option<RangeModel>, a: &Peer, b: &Peer) -> bool {
        let Some(range) = range else { return true };
        match (a.position, b.position) {
            (Some((ax, ay)), Some((bx, by))) => (ax - bx).hypot(ay - by) <= range.radius_m,
            _ => false,
        }
    }

    fn push_log(&mut self, rec: DeliveryRecord) {
        if self.logging {
            self.log.push(rec);
        }
    }
}

/// Shared handle to a simulated broadcast medium. Clones refer to the same
/// medium; separate instances never exchange traffic.
#[derive(Clone, Debug)]
pub struct Medium {
    inner: Arc<Mutex<MediumState>>,
}

impl Medium {
    fn with_range(default_range: Option<RangeModel>) -> Self {
        Self {
            inner: Arc::new(Mutex::new(MediumState {
                default_range,
                peers: BTreeMap::new(),
                log: Vec::new(),
                logging: true,
            })),
        }
    }

    /// Infinite radius, zero loss.
    pub fn loopback() -> Self {
        Self::with_range(None)
    }

    /// Disc propagation with the given default model for every sender.
    pub fn spatial(range: RangeModel) -> Self {
        Self::with_range(Some(range))
    }

    fn state(&self) -> MutexGuard<'_, MediumState> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Registers a peer; listeners start scanning immediately.
    pub fn register(&self, peer: Peer) -> Result<()> {
        let mut st = self.state();
        if st.peers.contains_key(&peer.address) {
            return Err(TransportError::DuplicateAddress(peer.address));
        }
        let scanning = peer.kind == PeerKind::Listener;
        st.peers.insert(
            peer.address,
            PeerState {
                peer,
                range: None,
                scanning,
                inbox: VecDeque::new(),
                characteristics: BTreeMap::new(),
                emissions: 0,
            },
        );
        Ok(())
    }

    /// A [`MediumPort`] bound to an already registered address.
    pub fn port(&self, address: Address) -> MediumPort {
        MediumPort {
            medium: self.clone(),
            address,
        }
    }

    pub fn set_position(&self, address: Address, position: Option<(f64, f64)>) -> Result<()> {
        let mut st = self.state();
        let p = st
            .peers
            .get_mut(&address)
            .ok_or(TransportError::UnknownPeer(address))?;
        p.peer.position = position;
        Ok(())
    }

    /// Overrides the radio model used when `address` transmits.
    pub fn set_range(&self, address: Address, range: RangeModel) -> Result<()> {
        let mut st = self.state();
        let p = st
            .peers
            .get_mut(&address)
            .ok_or(TransportError::UnknownPeer(address))?;
        p.range = Some(range);
        Ok(())
    }

    pub fn set_scanning(&self, address: Address, scanning: bool) -> Result<()> {
        let mut st = self.state();
        let p = st
            .peers
            .get_mut(&address)
            .ok_or(TransportError::UnknownPeer(address))?;
        p.scanning = scanning;
        Ok(())
    }

    /// Turns delivery logging on or off (on by default).
    pub fn set_logging(&self, on: bool) {
        self.state().logging = on;
    }

    /// Broadcasts `payload` to every scanning peer. Returns how many received it.
    pub fn advertise(&self, sender: Address, payload: &[u8], now_ms: u64) -> Result<usize> {
        if payload.len() > MAX_ADVERTISEMENT_LEN {
            return Err(TransportError::PayloadTooLarge(payload.len()));
        }
        let mut st = self.state();
        let st = &mut *st;
        let src = st
            .peers
            .get_mut(&sender)
            .ok_or(TransportError::UnknownPeer(sender))?;
        let emission = src.emissions;
        src.emissions += 1;
        let src_peer = src.peer.clone();
        let range = st.range_for(&st.peers[&sender]);

        let receivers: Vec<Address> = st
            .peers
            .iter()
            .filter(|(addr, p)| **addr != sender && p.scanning)
            .map(|(addr, _)| *addr)
            .collect();
        let payload_hex = hex::encode(payload);
        let mut delivered = 0;
        for addr in receivers {
            let rx = st.peers.get(&addr).unwrap();
            let reach = MediumState::in_range(range, &src_peer, &rx.peer);
            let kept = match range {
                Some(r) if r.loss_probability > 0.0 => {
                    loss_draw(r.rng_seed, sender, addr, emission) >= r.loss_probability
                }
                _ => true,
            };
            let ok = reach && kept;
            if ok {
                delivered += 1;
                st.peers.get_mut(&addr).unwrap().inbox.push_back(Reception {
                    sender,
                    payload: payload.to_vec(),
                    timestamp_ms: now_ms,
                });
            }
            st.push_log(DeliveryRecord {
                time_ms: now_ms,
                kind: RecordKind::Advert,
                sender,
                receiver: Some(addr),
                uuid: None,
                payload_hex: payload_hex.clone(),
                delivered: ok,
            });
        }
        Ok(delivered)
    }

    /// Drains everything `address` has received so far, in emission order.
    pub fn receive(&self, address: Address) -> Vec<Reception> {
        let mut st = self.state();
        st.peers
            .get_mut(&address)
            .map(|p| p.inbox.drain(..).collect())
            .unwrap_or_default()
    }

    /// Sets the current value of a camera characteristic.
    pub fn publish(&self, camera: Address, uuid: u16, value: &[u8], now_ms: u64) -> Result<()> {
        let mut st = self.state();
        let p = st
            .peers
            .get_mut(&camera)
            .ok_or(TransportError::UnknownPeer(camera))?;
        p.characteristics.insert(uuid, value.to_vec());
        st.push_log(DeliveryRecord {
            time_ms: now_ms,
            kind: RecordKind::Publish,
            sender: camera,
            receiver: None,
            uuid: Some(uuid),
            payload_hex: hex::encode(value),
            delivered: true,
        });
        Ok(())
    }

    pub fn withdraw(&self, camera: Address, uuid: u16) {
        if let Some(p) = self.state().peers.get_mut(&camera) {
            p.characteristics.remove(&uuid);
        }
    }

    /// Connect-and-read: the reader must be inside the camera's radius now.
    pub fn read_characteristic(
        &self,
        listener: Address,
        camera: Address,
        uuid: u16,
        now_ms: u64,
    ) -> Result<Vec<u8>> {
        let mut st = self.state();
        let cam = st
            .peers
            .get(&camera)
            .ok_or(TransportError::UnknownPeer(camera))?;
        let reader = st
            .peers
            .get(&listener)
            .ok_or(TransportError::UnknownPeer(listener))?;
        let reach = MediumState::in_range(st.range_for(cam), &cam.peer, &reader.peer);
        let value = cam.characteristics.get(&uuid).cloned();
        let outcome = match (reach, value) {
            (false, _) => Err(TransportError::Unreachable(camera)),
            (true, None) => Err(TransportError::NoSuchCharacteristic(uuid)),
            (true, Some(v)) => Ok(v),
        };
        st.push_log(DeliveryRecord {
            time_ms: now_ms,
            kind: RecordKind::Read,
            sender: camera,
            receiver: Some(listener),
            uuid: Some(uuid),
            payload_hex: outcome.as_ref().map(hex::encode).unwrap_or_default(),
            delivered: outcome.is_ok(),
        });
        outcome
    }

    pub fn log(&self) -> Vec<DeliveryRecord> {
        self.state().log.clone()
    }

    /// Writes the delivery log as JSON lines.
    pub fn write_log<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for rec in self.state().log.iter() {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Camera-side view of a transport.
pub trait Broadcaster {
    fn address(&self) -> Address;
    fn advertise(&self, payload: &[u8], now_ms: u64) -> Result<usize>;
    fn publish(&self, uuid: u16, value: &[u8], now_ms: u64) -> Result<()>;
}

/// Listener-side view of a transport.
pub trait Scanner {
    fn address(&self) -> Address;
    fn receive(&self) -> Vec<Reception>;
    fn read(&self, camera: Address, uuid: u16, now_ms: u64) -> Result<Vec<u8>>;
}

/// A registered address on a [`Medium`].
#[derive(Clone, Debug)]
pub struct MediumPort {
    medium: Medium,
    address: Address,
}

impl MediumPort {
    pub fn medium(&self) -> &Medium {
        &self.medium
    }
}

impl Broadcaster for MediumPort {
    fn address(&self) -> Address {
        self.address
    }

    fn advertise(&self, payload: &[u8], now_ms: u64) -> Result<usize> {
        self.medium.advertise(self.address, payload, now_ms)
    }

    fn publish(&self, uuid: u16, value: &[u8], now_ms: u64) -> Result<()> {
        self.medium.publish(self.address, uuid, value, now_ms)
    }
}

impl Scanner for MediumPort {
    fn address(&self) -> Address {
        self.address
    }

    fn receive(&self) -> Vec<Reception> {
        self.medium.receive(self.address)
    }

    fn read(&self, camera: Address, uuid: u16, now_ms: u64) -> Result<Vec<u8>> {
        self.medium
            .read_characteristic(self.address, camera, uuid, now_ms)
    }
}

/// In-process transport with infinite radius and no loss.
pub fn loopback_transport() -> Medium {
    Medium::loopback()
}

pub mod udp {
    //! Loopback datagram backing for the broadcast surface.
    //!
    //! Datagrams, first byte is the type:
    //!
    //! ```text
    //! 'S'                      listener -> camera   subscribe (renew every few seconds)
    //! 'A' addr(6) payload      camera   -> listener advertisement
    //! 'R' uuid(2)              listener -> camera   characteristic read
    //! 'V' uuid(2) value        camera   -> listener read response
    //! 'E' uuid(2)              camera   -> listener no such characteristic
    //! ```

    use super::*;
    use std::collections::HashMap;
    use std::net::{SocketAddr, UdpSocket};
    use std::sync::atomic::{AtomicBool, Ordering};
    use std::thread::JoinHandle;
    use std::time::{Duration, Instant};

    const SUBSCRIPTION_TTL: Duration = Duration::from_secs(10);
    const RENEW_EVERY: Duration = Duration::from_secs(2);
    const READ_TIMEOUT: Duration = Duration::from_millis(1500);

    fn io(e: std::io::Error) -> TransportError {
        TransportError::Io(e.to_string())
    }

    #[derive(Default)]
    struct LinkState {
        characteristics: BTreeMap<u16, Vec<u8>>,
        subscribers: HashMap<SocketAddr, Instant>,
    }

    /// Camera end: serves reads and pushes advertisements to subscribers.
    pub struct UdpCameraLink {
        socket: UdpSocket,
        address: Address,
        state: Arc<Mutex<LinkState>>,
        stop: Arc<AtomicBool>,
        worker: Option<JoinHandle<()>>,
    }

    impl UdpCameraLink {
        pub fn bind(bind: SocketAddr, address: Address) -> Result<Self> {
            let socket = UdpSocket::bind(bind).map_err(io)?;
            socket
                .set_read_timeout(Some(Duration::from_millis(100)))
                .map_err(io)?;
            let state = Arc::new(Mutex::new(LinkState::default()));
            let stop = Arc::new(AtomicBool::new(false));
            let worker = {
                let socket = socket.try_clone().map_err(io)?;
                let state = state.clone();
                let stop = stop.clone();
                std::thread::spawn(move || serve(socket, state, stop))
            };
            Ok(Self {
                socket,
                address,
                state,
                stop,
                worker: Some(worker),
            })
        }

        pub fn local_addr(&self) -> Result<SocketAddr> {
            self.socket.local_addr().map_err(io)
        }
    }

    fn serve(socket: UdpSocket, state: Arc<Mutex<LinkState>>, stop: Arc<AtomicBool>) {
        let mut buf = [0u8; 2048];
        while !stop.load(Ordering::Relaxed) {
            let Ok((n, from)) = socket.recv_from(&mut buf) else {
                continue;
            };
            let msg = &buf[..n];
            let reply = {
                let mut st = state.lock().unwrap_or_else(|e| e.into_inner());
                match msg.first() {
                    Some(b'S') => {
                        st.subscribers.insert(from, Instant::now());
                        None
                    }
                    Some(b'R') if n == 3 => {
                        let uuid = u16::from_be_bytes([msg[1], msg[2]]);
                        Some(match st.characteristics.get(&uuid) {
                            Some(v) => [b"V".as_slice(), &msg[1..3], v].concat(),
                            None => vec![b'E', msg[1], msg[2]],
                        })
                    }
                    _ => None,
                }
            };
            if let Some(reply) = reply {
                let _ = socket.send_to(&reply, from);
            }
        }
    }

    impl Drop for UdpCameraLink {
        fn drop(&mut self) {
            self.stop.store(true, Ordering::Relaxed);
            if let Some(w) = self.worker.take() {
                let _ = w.join();
            }
        }
    }

    impl Broadcaster for UdpCameraLink {
        fn address(&self) -> Address {
            self.address
        }

        fn advertise(&self, payload: &[u8], _now_ms: u64) -> Result<usize> {
            if payload.len() > MAX_ADVERTISEMENT_LEN {
                return Err(TransportError::PayloadTooLarge(payload.len()));
            }
            let targets: Vec<SocketAddr> = {
                let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
                st.subscribers
                    .retain(|_, seen| seen.elapsed() < SUBSCRIPTION_TTL);
                st.subscribers.keys().copied().collect()
            };
            let msg = [b"A".as_slice(), &self.address.0, payload].concat();
            let mut sent = 0;
            for t in targets {
                if self.socket.send_to(&msg, t).is_ok() {
                    sent += 1;
                }
            }
            Ok(sent)
        }

        fn publish(&self, uuid: u16, value: &[u8], _now_ms: u64) -> Result<()> {
            self.state
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .characteristics
                .insert(uuid, value.to_vec());
            Ok(())
        }
    }

    /// Listener end, attached to one camera link.
    pub struct UdpScanner {
        socket: UdpSocket,
        camera: SocketAddr,
        address: Address,
        pending: Mutex<VecDeque<Reception>>,
        last_subscribe: Mutex<Instant>,
        started: Instant,
    }

    impl UdpScanner {
        pub fn connect(camera: SocketAddr, address: Address) -> Result<Self> {
            let socket = UdpSocket::bind("127.0.0.1:0").map_err(io)?;
            socket.send_to(b"S", camera).map_err(io)?;
            Ok(Self {
                socket,
                camera,
                address,
                pending: Mutex::new(VecDeque::new()),
                last_subscribe: Mutex::new(Instant::now()),
                started: Instant::now(),
            })
        }

        fn renew(&self) {
            let mut last = self.last_subscribe.lock().unwrap_or_else(|e| e.into_inner());
            if last.elapsed() >= RENEW_EVERY {
                let _ = self.socket.send_to(b"S", self.camera);
                *last = Instant::now();
            }
        }

        fn stash_advert(&self, msg: &[u8]) {
            if msg.len() >= 7 && msg[0] == b'A' {
                self.pending
                    .lock()
                    .unwrap_or_else(|e| e.into_inner())
                    .push_back(Reception {
                        sender: Address(msg[1..7].try_into().unwrap()),
                        payload: msg[7..].to_vec(),
                        timestamp_ms: self.started.elapsed().as_millis() as u64,
                    });
            }
        }
    }

    impl Scanner for UdpScanner {
        fn address(&self) -> Address {
            self.address
        }

        fn receive(&self) -> Vec<Reception> {
            self.renew();
            let _ = self.socket.set_nonblocking(true);
            let mut buf = [0u8; 2048];
            while let Ok((n, from)) = self.socket.recv_from(&mut buf) {
                if from == self.camera {
                    self.stash_advert(&buf[..n]);
                }
            }
            let _ = self.socket.set_nonblocking(false);
            self.pending
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .drain(..)
                .collect()
        }

        fn read(&self, camera: Address, uuid: u16, _now_ms: u64) -> Result<Vec<u8>> {
            let mut req = vec![b'R'];
            req.extend_from_slice(&uuid.to_be_bytes());
            self.socket.send_to(&req, self.camera).map_err(io)?;
            let deadline = Instant::now() + READ_TIMEOUT;
            let mut buf = [0u8; 2048];
            loop {
                let left = deadline.saturating_duration_since(Instant::now());
                if left.is_zero() {
                    return Err(TransportError::Unreachable(camera));
                }
                self.socket.set_read_timeout(Some(left)).map_err(io)?;
                let (n, from) = match self.socket.recv_from(&mut buf) {
                    Ok(x) => x,
                    Err(_) => return Err(TransportError::Unreachable(camera)),
                };
                if from != self.camera || n < 3 {
                    continue;
                }
                let msg = &buf[..n];
                let same_uuid = msg[1..3] == uuid.to_be_bytes();
                match msg[0] {
                    b'V' if same_uuid => return Ok(msg[3..].to_vec()),
                    b'E' if same_uuid => return Err(TransportError::NoSuchCharacteristic(uuid)),
                    b'A' => self.stash_advert(msg),
                    _ => {}
                }
            }
        }
    }
}
