//! Wire codecs shared by cameras, listening clients and third-party tools.
//!
//! Every multi-byte integer is big-endian. The layouts here are the
//! compatibility surface of the system, so changes are breaking.
//!
//! Key packet (64 bytes):
//!
//! ```text
//!  0..32   segment key
//! 32       sequence number
//! 33..35   reconnect interval, seconds (u16 BE)
//! 35..43   video id
//! 43..64   first 21 bytes of SHA-256 of the previous stored segment
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const KEY_LEN: usize = 32;
pub const VIDEO_ID_LEN: usize = 8;
pub const CAMERA_ID_LEN: usize = 8;
pub const HASH_PREFIX_LEN: usize = 21;
pub const TOKEN_LEN: usize = 16;
pub const KEY_PACKET_LEN: usize = 64;

/// Legacy advertisement payload limit.
pub const MAX_ADVERTISEMENT_LEN: usize = 31;

/// Characteristic suffixes exposed by a camera.
pub const UUID_NAME: u16 = 0x0001;
pub const UUID_MODE: u16 = 0x0002;
pub const UUID_LOCATION: u16 = 0x0003;
pub const UUID_URL_FORMAT: u16 = 0x0004;
pub const UUID_KEY: u16 = 0x0011;
/// Extension: key packet of the reduced-rate (base access) stream.
pub const UUID_BASE_KEY: u16 = 0x0012;

const UUID_PREFIX: &str = "cc92cc92-ca19-0000-0000-00000000";
const ID_PLACEHOLDER: &str = "{id}";

const ADV_BEACON: u8 = 0x01;
const ADV_TOKEN: u8 = 0x02;
const BEACON_LEN: usize = 1 + CAMERA_ID_LEN + 1;
const TOKEN_ADV_LEN: usize = 1 + VIDEO_ID_LEN + 2 + TOKEN_LEN;

const LOCATION_COORDINATES: u8 = 0x00;
const LOCATION_TEXT: u8 = 0x01;

const MAX_NAME_LEN: usize = 64;
const MAX_LOCATION_TEXT_LEN: usize = 256;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("malformed key packet: expected 64 bytes, got {0}")]
    MalformedPacket(usize),
    #[error("characteristic suffix {0:#x} exceeds 16 bits")]
    UuidRange(u32),
    #[error("url template must contain exactly one {{id}} placeholder, found {0}")]
    Template(usize),
    #[error("invalid url template: {0}")]
    TemplateSyntax(String),
    #[error("url does not match template: {0}")]
    UrlParse(String),
    #[error("invalid characteristic value: {0}")]
    Characteristic(String),
    #[error("invalid advertisement: {0}")]
    Advertisement(String),
    #[error("invalid descriptor: {0}")]
    Descriptor(String),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

/// Opaque 8-byte footage identifier; rendered as 16 lowercase hex characters.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct VideoId(pub [u8; VIDEO_ID_LEN]);

impl VideoId {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        if s.len() != 2 * VIDEO_ID_LEN {
            return Err(ProtocolError::UrlParse(format!(
                "video id must be 16 hex characters, got {}",
                s.len()
            )));
        }
        let mut out = [0u8; VIDEO_ID_LEN];
        hex::decode_to_slice(s, &mut out)
            .map_err(|e| ProtocolError::UrlParse(format!("video id {s:?}: {e}")))?;
        Ok(Self(out))
    }
}

impl std::fmt::Debug for VideoId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "VideoId({})", self.to_hex())
    }
}

impl Serialize for VideoId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for VideoId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        VideoId::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

impl std::str::FromStr for VideoId {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self> {
        VideoId::from_hex(&s.to_ascii_lowercase())
    }
}

impl std::fmt::Display for VideoId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// The unit a camera hands to listeners for each segment.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyPacket {
    pub key: [u8; KEY_LEN],
    pub seq: u8,
    pub reconnect_interval_s: u16,
    pub video_id: VideoId,
    pub prev_hash_prefix: [u8; HASH_PREFIX_LEN],
}

impl std::fmt::Debug for KeyPacket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyPacket")
            .field("key", &"<redacted>")
            .field("seq", &self.seq)
            .field("reconnect_interval_s", &self.reconnect_interval_s)
            .field("video_id", &self.video_id)
            .field("prev_hash_prefix", &hex::encode(self.prev_hash_prefix))
            .finish()
    }
}

pub fn encode_key_packet(packet: &KeyPacket) -> [u8; KEY_PACKET_LEN] {
    let mut out = [0u8; KEY_PACKET_LEN];
    out[..32].copy_from_slice(&packet.key);
    out[32] = packet.seq;
    out[33..35].copy_from_slice(&packet.reconnect_interval_s.to_be_bytes());
    out[35..43].copy_from_slice(&packet.video_id.0);
    out[43..].copy_from_slice(&packet.prev_hash_prefix);
    out
}

pub fn decode_key_packet(bytes: &[u8]) -> Result<KeyPacket> {
    if bytes.len() != KEY_PACKET_LEN {
        return Err(ProtocolError::MalformedPacket(bytes.len()));
    }
    let mut key = [0u8; KEY_LEN];
    key.copy_from_slice(&bytes[..32]);
    let mut video_id = [0u8; VIDEO_ID_LEN];
    video_id.copy_from_slice(&bytes[35..43]);
    let mut prev_hash_prefix = [0u8; HASH_PREFIX_LEN];
    prev_hash_prefix.copy_from_slice(&bytes[43..]);
    Ok(KeyPacket {
        key,
        seq: bytes[32],
        reconnect_interval_s: u16::from_be_bytes([bytes[33], bytes[34]]),
        video_id: VideoId(video_id),
        prev_hash_prefix,
    })
}

/// Full UUID string for a camera characteristic suffix.
pub fn characteristic_uuid(suffix: u32) -> Result<String> {
    if suffix > 0xFFFF {
        return Err(ProtocolError::UuidRange(suffix));
    }
    Ok(format!("{UUID_PREFIX}{suffix:04x}"))
}

/// Inverse of [`characteristic_uuid`].
pub fn parse_characteristic_uuid(uuid: &str) -> Option<u16> {
    let tail = uuid.to_ascii_lowercase();
    let tail = tail.strip_prefix(UUID_PREFIX)?;
    if tail.len() != 4 {
        return None;
    }
    u16::from_str_radix(tail, 16).ok()
}

/// Availability policy advertised by a camera.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Uploaded at the segment boundary.
    Auto,
    /// Withheld until the operator releases it.
    Manual,
    /// Uploaded after a fixed review delay.
    Delayed,
}

impl Mode {
    pub fn to_byte(self) -> u8 {
        match self {
            Mode::Auto => 0x00,
            Mode::Manual => 0x01,
            Mode::Delayed => 0x02,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0x00 => Ok(Mode::Auto),
            0x01 => Ok(Mode::Manual),
            0x02 => Ok(Mode::Delayed),
            other => Err(ProtocolError::Characteristic(format!(
                "unknown mode byte {other:#04x}"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Auto => "auto",
            Mode::Manual => "manual",
            Mode::Delayed => "delayed",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Location {
    Coordinates { lat: f64, lon: f64 },
    Description(String),
}

/// Discoverable camera metadata, one characteristic per field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraDescriptor {
    pub name: String,
    pub mode: Mode,
    pub location: Location,
    pub url_template: String,
}

impl CameraDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.len() > MAX_NAME_LEN {
            return Err(ProtocolError::Descriptor(format!(
                "name must be 1-{MAX_NAME_LEN} bytes, got {}",
                self.name.len()
            )));
        }
        if let Location::Description(text) = &self.location {
            if text.len() > MAX_LOCATION_TEXT_LEN {
                return Err(ProtocolError::Descriptor(format!(
                    "location description exceeds {MAX_LOCATION_TEXT_LEN} bytes"
                )));
            }
        }
        template_extension(&self.url_template)?;
        Ok(())
    }

    /// Coordinates, when the location is given as such.
    pub fn coordinates(&self) -> Option<(f64, f64)> {
        match self.location {
            Location::Coordinates { lat, lon } => Some((lat, lon)),
            Location::Description(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DescriptorField {
    Name,
    Mode,
    Location,
    UrlFormat,
}

impl DescriptorField {
    pub fn uuid_suffix(self) -> u16 {
        match self {
            DescriptorField::Name => UUID_NAME,
            DescriptorField::Mode => UUID_MODE,
            DescriptorField::Location => UUID_LOCATION,
            DescriptorField::UrlFormat => UUID_URL_FORMAT,
        }
    }

    pub const ALL: [DescriptorField; 4] = [
        DescriptorField::Name,
        DescriptorField::Mode,
        DescriptorField::Location,
        DescriptorField::UrlFormat,
    ];
}

/// A decoded characteristic value.
#[derive(Clone, Debug, PartialEq)]
pub enum FieldValue {
    Name(String),
    Mode(Mode),
    Location(Location),
    UrlFormat(String),
}

pub fn encode_characteristic(descriptor: &CameraDescriptor, which: DescriptorField) -> Vec<u8> {
    match which {
        DescriptorField::Name => descriptor.name.as_bytes().to_vec(),
        DescriptorField::Mode => vec![descriptor.mode.to_byte()],
        DescriptorField::Location => match &descriptor.location {
            Location::Coordinates { lat, lon } => {
                let mut out = Vec::with_capacity(17);
                out.push(LOCATION_COORDINATES);
                out.extend_from_slice(&lat.to_be_bytes());
                out.extend_from_slice(&lon.to_be_bytes());
                out
            }
            Location::Description(text) => {
                let mut out = Vec::with_capacity(1 + text.len());
                out.push(LOCATION_TEXT);
                out.extend_from_slice(text.as_bytes());
                out
            }
        },
        DescriptorField::UrlFormat => descriptor.url_template.as_bytes().to_vec(),
    }
}

fn utf8(bytes: &[u8], what: &str) -> Result<String> {
    String::from_utf8(bytes.to_vec())
        .map_err(|_| ProtocolError::Characteristic(format!("{what} is not valid UTF-8")))
}

pub fn decode_characteristic(which: DescriptorField, bytes: &[u8]) -> Result<FieldValue> {
    match which {
        DescriptorField::Name => Ok(FieldValue::Name(utf8(bytes, "name")?)),
        DescriptorField::UrlFormat => Ok(FieldValue::UrlFormat(utf8(bytes, "url format")?)),
        DescriptorField::Mode => match bytes {
            [b] => Ok(FieldValue::Mode(Mode::from_byte(*b)?)),
            _ => Err(ProtocolError::Characteristic(format!(
                "mode must be 1 byte, got {}",
                bytes.len()
            ))),
        },
        DescriptorField::Location => match bytes.split_first() {
            Some((&LOCATION_COORDINATES, rest)) => {
                if rest.len() != 16 {
                    return Err(ProtocolError::Characteristic(format!(
                        "coordinates must be 16 bytes, got {}",
                        rest.len()
                    )));
                }
                let lat = f64::from_be_bytes(rest[..8].try_into().unwrap());
                let lon = f64::from_be_bytes(rest[8..].try_into().unwrap());
                Ok(FieldValue::Location(Location::Coordinates { lat, lon }))
            }
            Some((&LOCATION_TEXT, rest)) => Ok(FieldValue::Location(Location::Description(
                utf8(rest, "location")?,
            ))),
            Some((other, _)) => Err(ProtocolError::Characteristic(format!(
                "unknown location type {other:#04x}"
            ))),
            None => Err(ProtocolError::Characteristic("empty location".into())),
        },
    }
}

/// Rebuilds a descriptor from the four characteristic values.
pub fn decode_descriptor(
    name: &[u8],
    mode: &[u8],
    location: &[u8],
    url_format: &[u8],
) -> Result<CameraDescriptor> {
    let FieldValue::Name(name) = decode_characteristic(DescriptorField::Name, name)? else {
        unreachable!()
    };
    let FieldValue::Mode(mode) = decode_characteristic(DescriptorField::Mode, mode)? else {
        unreachable!()
    };
    let FieldValue::Location(location) =
        decode_characteristic(DescriptorField::Location, location)?
    else {
        unreachable!()
    };
    let FieldValue::UrlFormat(url_template) =
        decode_characteristic(DescriptorField::UrlFormat, url_format)?
    else {
        unreachable!()
    };
    let descriptor = CameraDescriptor {
        name,
        mode,
        location,
        url_template,
    };
    descriptor.validate()?;
    Ok(descriptor)
}

fn split_template(template: &str) -> Result<(&str, &str)> {
    let count = template.matches(ID_PLACEHOLDER).count();
    if count != 1 {
        return Err(ProtocolError::Template(count));
    }
    let at = template.find(ID_PLACEHOLDER).unwrap();
    Ok((&template[..at], &template[at + ID_PLACEHOLDER.len()..]))
}

/// File extension a template produces ("mp4" or "jpg").
pub fn template_extension(template: &str) -> Result<&str> {
    let (head, tail) = split_template(template)?;
    let Some((scheme, rest)) = head.split_once("://") else {
        return Err(ProtocolError::TemplateSyntax(format!(
            "{template:?} has no scheme"
        )));
    };
    if scheme.is_empty()
        || !scheme
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "+-.".contains(c))
        || rest.is_empty()
        || !head.ends_with('/')
    {
        return Err(ProtocolError::TemplateSyntax(format!(
            "{template:?} is not of the form <scheme>://<host>/{{id}}.<ext>"
        )));
    }
    match tail {
        ".mp4" => Ok("mp4"),
        ".jpg" => Ok("jpg"),
        _ => Err(ProtocolError::TemplateSyntax(format!(
            "{template:?} must end in {{id}}.mp4 or {{id}}.jpg"
        ))),
    }
}

pub fn format_video_url(template: &str, video_id: &VideoId) -> Result<String> {
    let (head, tail) = split_template(template)?;
    Ok(format!("{head}{}{tail}", video_id.to_hex()))
}

pub fn parse_video_url(url: &str, template: &str) -> Result<VideoId> {
    let (head, tail) = split_template(template)?;
    let id = url
        .strip_prefix(head)
        .and_then(|rest| rest.strip_suffix(tail))
        .ok_or_else(|| ProtocolError::UrlParse(format!("{url:?} does not match {template:?}")))?;
    if id.len() != 16 || !id.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(ProtocolError::UrlParse(format!(
            "id field {id:?} is not 16 hex characters"
        )));
    }
    VideoId::from_hex(&id.to_ascii_lowercase())
}

/// Broadcast payloads. Token adverts carry no camera id; the receiver
/// attributes them to the transport sender address.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Advertisement {
    Beacon {
        camera_id: [u8; CAMERA_ID_LEN],
        seq: u8,
    },
    Token {
        video_id: VideoId,
        chunk_index: u16,
        token: [u8; TOKEN_LEN],
    },
}

pub fn encode_advertisement(adv: &Advertisement) -> Vec<u8> {
    match adv {
        Advertisement::Beacon { camera_id, seq } => {
            let mut out = Vec::with_capacity(BEACON_LEN);
            out.push(ADV_BEACON);
            out.extend_from_slice(camera_id);
            out.push(*seq);
            out
        }
        Advertisement::Token {
            video_id,
            chunk_index,
            token,
        } => {
            let mut out = Vec::with_capacity(TOKEN_ADV_LEN);
            out.push(ADV_TOKEN);
            out.extend_from_slice(&video_id.0);
            out.extend_from_slice(&chunk_index.to_be_bytes());
            out.extend_from_slice(token);
            out
        }
    }
}

pub fn decode_advertisement(bytes: &[u8]) -> Result<Advertisement> {
    match bytes.first() {
        Some(&ADV_BEACON) => {
            if bytes.len() != BEACON_LEN {
                return Err(ProtocolError::Advertisement(format!(
                    "beacon must be {BEACON_LEN} bytes, got {}",
                    bytes.len()
                )));
            }
            Ok(Advertisement::Beacon {
                camera_id: bytes[1..9].try_into().unwrap(),
                seq: bytes[9],
            })
        }
        Some(&ADV_TOKEN) => {
            if bytes.len() != TOKEN_ADV_LEN {
                return Err(ProtocolError::Advertisement(format!(
                    "token advert must be {TOKEN_ADV_LEN} bytes, got {}",
                    bytes.len()
                )));
            }
            Ok(Advertisement::Token {
                video_id: VideoId(bytes[1..9].try_into().unwrap()),
                chunk_index: u16::from_be_bytes([bytes[9], bytes[10]]),
                token: bytes[11..27].try_into().unwrap(),
            })
        }
        Some(other) => Err(ProtocolError::Advertisement(format!(
            "unknown kind byte {other:#04x}"
        ))),
        None => Err(ProtocolError::Advertisement("empty payload".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_descriptor() -> CameraDescriptor {
        CameraDescriptor {
            name: "Kitchen".into(),
            mode: Mode::Delayed,
            location: Location::Coordinates {
                lat: 54.9733,
                lon: -1.6253,
            },
            url_template: "https://files.example/{id}.mp4".into(),
        }
    }

    #[test]
    fn key_packet_known_vector() {
        let packet = KeyPacket {
            key: [0x11; 32],
            seq: 5,
            reconnect_interval_s: 60,
            video_id: VideoId([1, 2, 3, 4, 5, 6, 7, 8]),
            prev_hash_prefix: [0xAA; 21],
        };
        let expected = format!(
            "{}05003c0102030405060708{}",
            "11".repeat(32),
            "aa".repeat(21)
        );
        assert_eq!(hex::encode(encode_key_packet(&packet)), expected);
    }

    #[test]
    fn key_packet_zero_and_max() {
        let zero = KeyPacket {
            key: [0; 32],
            seq: 0,
            reconnect_interval_s: 0,
            video_id: VideoId::default(),
            prev_hash_prefix: [0; 21],
        };
        assert_eq!(encode_key_packet(&zero), [0u8; 64]);
        assert_eq!(decode_key_packet(&[0u8; 64]).unwrap(), zero);

        let max = KeyPacket {
            seq: 255,
            reconnect_interval_s: 65535,
            ..zero
        };
        let bytes = encode_key_packet(&max);
        assert_eq!(bytes[32], 0xFF);
        assert_eq!(&bytes[33..35], &[0xFF, 0xFF]);
    }

    #[test]
    fn key_packet_wrong_length() {
        assert_eq!(
            decode_key_packet(&[0u8; 63]),
            Err(ProtocolError::MalformedPacket(63))
        );
        assert_eq!(
            decode_key_packet(&[0u8; 65]),
            Err(ProtocolError::MalformedPacket(65))
        );
    }

    #[test]
    fn uuids() {
        assert_eq!(
            characteristic_uuid(0x0001).unwrap(),
            "cc92cc92-ca19-0000-0000-000000000001"
        );
        assert_eq!(
            characteristic_uuid(0x0011).unwrap(),
            "cc92cc92-ca19-0000-0000-000000000011"
        );
        assert_eq!(
            characteristic_uuid(0x10000),
            Err(ProtocolError::UuidRange(0x10000))
        );
        assert_eq!(
            parse_characteristic_uuid("cc92cc92-ca19-0000-0000-000000000012"),
            Some(0x12)
        );
    }

    #[test]
    fn video_urls() {
        let t = "https://files.example/{id}.mp4";
        let id = VideoId([0x00, 0x11, 0x22, 0x33, 0x44, 0x55, 0x66, 0x77]);
        assert_eq!(
            format_video_url(t, &id).unwrap(),
            "https://files.example/0011223344556677.mp4"
        );
        assert_eq!(
            format_video_url(t, &VideoId::default()).unwrap(),
            "https://files.example/0000000000000000.mp4"
        );
        assert_eq!(
            format_video_url("https://files.example/x.mp4", &id),
            Err(ProtocolError::Template(0))
        );
        assert_eq!(
            format_video_url("https://x/{id}/{id}.mp4", &id),
            Err(ProtocolError::Template(2))
        );

        assert!(parse_video_url("https://files.example/zzzzzzzzzzzzzzzz.mp4", t).is_err());
        assert!(parse_video_url("https://files.example/00112233445566.mp4", t).is_err());
        assert!(parse_video_url("https://other.example/0011223344556677.mp4", t).is_err());
    }

    #[test]
    fn template_extensions() {
        assert_eq!(template_extension("http://h/{id}.jpg").unwrap(), "jpg");
        assert_eq!(template_extension("https://h:80/a/{id}.mp4").unwrap(), "mp4");
        assert!(template_extension("http://h/{id}.avi").is_err());
        assert!(template_extension("h/{id}.mp4").is_err());
    }

    #[test]
    fn mode_bytes() {
        let mut d = sample_descriptor();
        d.mode = Mode::Auto;
        assert_eq!(encode_characteristic(&d, DescriptorField::Mode), vec![0x00]);
        d.mode = Mode::Manual;
        assert_eq!(encode_characteristic(&d, DescriptorField::Mode), vec![0x01]);
        d.mode = Mode::Delayed;
        assert_eq!(encode_characteristic(&d, DescriptorField::Mode), vec![0x02]);
        assert!(decode_characteristic(DescriptorField::Mode, &[0x03]).is_err());
    }

    #[test]
    fn location_encoding() {
        let d = sample_descriptor();
        let bytes = encode_characteristic(&d, DescriptorField::Location);
        assert_eq!(bytes.len(), 17);
        assert_eq!(bytes[0], 0x00);
        assert_eq!(&bytes[1..9], &54.9733f64.to_be_bytes());
        let mut truncated = vec![0x00];
        truncated.extend_from_slice(&[0u8; 8]);
        assert_eq!(truncated.len(), 9);
        assert!(decode_characteristic(DescriptorField::Location, &truncated).is_err());
        assert!(decode_characteristic(DescriptorField::Location, &[0x01, 0xFF]).is_err());
        assert!(decode_characteristic(DescriptorField::Name, &[0xC3]).is_err());
    }

    #[test]
    fn descriptor_roundtrip_all_fields() {
        for d in [
            sample_descriptor(),
            CameraDescriptor {
                location: Location::Description("Level 2, east stairwell".into()),
                ..sample_descriptor()
            },
        ] {
            let values: Vec<Vec<u8>> = DescriptorField::ALL
                .iter()
                .map(|w| encode_characteristic(&d, *w))
                .collect();
            let back = decode_descriptor(&values[0], &values[1], &values[2], &values[3]).unwrap();
            assert_eq!(back, d);
        }
    }

    #[test]
    fn beacon_vector() {
        let adv = Advertisement::Beacon {
            camera_id: [0x01; 8],
            seq: 7,
        };
        let bytes = encode_advertisement(&adv);
        assert_eq!(hex::encode(&bytes), format!("{}07", "01".repeat(9)));
        assert_eq!(decode_advertisement(&bytes).unwrap(), adv);
    }

    #[test]
    fn token_advert_fits_budget() {
        let adv = Advertisement::Token {
            video_id: VideoId([9; 8]),
            chunk_index: 0x0102,
            token: [0x5A; 16],
        };
        let bytes = encode_advertisement(&adv);
        assert_eq!(bytes.len(), 27);
        assert!(bytes.len() <= MAX_ADVERTISEMENT_LEN);
        assert_eq!(&bytes[9..11], &[0x01, 0x02]);
        assert!(decode_advertisement(&[0x03; 10]).is_err());
        assert!(decode_advertisement(&bytes[..26]).is_err());
    }

    prop_compose! {
        fn arb_packet()(key in any::<[u8; 32]>(), seq in any::<u8>(), ri in any::<u16>(),
                        vid in any::<[u8; 8]>(), prev in any::<[u8; 21]>()) -> KeyPacket {
            KeyPacket { key, seq, reconnect_interval_s: ri, video_id: VideoId(vid), prev_hash_prefix: prev }
        }
    }

    proptest! {
        #[test]
        fn key_packet_roundtrip(p in arb_packet()) {
            let bytes = encode_key_packet(&p);
            prop_assert_eq!(bytes.len(), 64);
            prop_assert_eq!(decode_key_packet(&bytes).unwrap(), p);
        }

        #[test]
        fn uuid_pattern(suffix in 0u32..=0xFFFF) {
            let uuid = characteristic_uuid(suffix).unwrap();
            prop_assert_eq!(uuid.len(), 36);
            prop_assert!(uuid.starts_with("cc92cc92-ca19-0000-0000-00000000"));
            prop_assert!(uuid[32..].bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)));
            prop_assert_eq!(parse_characteristic_uuid(&uuid), Some(suffix as u16));
        }

        #[test]
        fn url_roundtrip(vid in any::<[u8; 8]>(), jpg in any::<bool>()) {
            let t = if jpg { "http://127.0.0.1:8080/footage/{id}.jpg" } else { "https://files.example/{id}.mp4" };
            let id = VideoId(vid);
            let url = format_video_url(t, &id).unwrap();
            prop_assert_eq!(parse_video_url(&url, t).unwrap(), id);
        }

        #[test]
        fn advertisement_roundtrip(cam in any::<[u8; 8]>(), seq in any::<u8>(), vid in any::<[u8; 8]>(),
                                   idx in any::<u16>(), token in any::<[u8; 16]>(), beacon in any::<bool>()) {
            let adv = if beacon {
                Advertisement::Beacon { camera_id: cam, seq }
            } else {
                Advertisement::Token { video_id: VideoId(vid), chunk_index: idx, token }
            };
            let bytes = encode_advertisement(&adv);
            prop_assert!(bytes.len() <= MAX_ADVERTISEMENT_LEN);
            prop_assert_eq!(decode_advertisement(&bytes).unwrap(), adv);
        }

        #[test]
        fn coordinates_roundtrip(lat in -90.0f64..90.0, lon in -180.0f64..180.0, name in "[a-zA-Z ]{1,64}") {
            let d = CameraDescriptor { name, mode: Mode::Auto, location: Location::Coordinates { lat, lon },
                                       url_template: "http://h/{id}.mp4".into() };
            for w in DescriptorField::ALL {
                let v = decode_characteristic(w, &encode_characteristic(&d, w)).unwrap();
                let expected = match w {
                    DescriptorField::Name => FieldValue::Name(d.name.clone()),
                    DescriptorField::Mode => FieldValue::Mode(d.mode),
                    DescriptorField::Location => FieldValue::Location(d.location.clone()),
                    DescriptorField::UrlFormat => FieldValue::UrlFormat(d.url_template.clone()),
                };
                prop_assert_eq!(v, expected);
            }
        }
    }
}
