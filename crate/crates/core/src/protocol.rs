//! Wire protocol v1.
//!
//! Every exchange is a single line of JSON terminated by `\n`. The envelope
//! always carries `v` (protocol version, currently 1), `sender` and `kind`;
//! the remaining keys depend on the kind. Binary payloads travel as
//! `{"len": <raw byte count>, "data": <base64>}`. Unknown keys are ignored so
//! newer peers can add fields; an unknown `kind` decodes as an `ERROR`
//! message with code [`codes::UNKNOWN_KIND`].
//!
//! The same codec is used between agents and the tracker and between agents.

use std::fmt;
use std::io::{self, BufRead, Read, Write};
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::{MetricTriple, ValidationPolicy, WorkTotals};

pub const PROTOCOL_VERSION: u32 = 1;
/// Upper bound on an encoded frame, newline included.
pub const MAX_FRAME_BYTES: usize = 16 * 1024 * 1024;
pub const DEFAULT_TRACKER_PORT: u16 = 6888;
pub const DEFAULT_PEER_PORT: u16 = 6889;

/// Error codes carried by `ERROR` messages.
pub mod codes {
    pub const NO_WORK: &str = "NO_WORK";
    /// Every part of the app has an accepted result.
    pub const APP_COMPLETE: &str = "APP_COMPLETE";
    pub const UNKNOWN_APP: &str = "UNKNOWN_APP";
    pub const UNKNOWN_KIND: &str = "UNKNOWN_KIND";
    pub const BAD_REQUEST: &str = "BAD_REQUEST";
    pub const UNEXPECTED: &str = "UNEXPECTED";
    /// STATUS_UPDATE or DROP_NOTICE from a host the tracker does not know.
    pub const UNKNOWN_HOST: &str = "UNKNOWN_HOST";
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_BYTES} byte limit")]
    FrameTooLarge(usize),
    #[error("malformed frame: {0}")]
    Parse(String),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u64),
    #[error("connection closed before a complete frame arrived")]
    Closed,
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl ProtocolError {
    /// Whether the error came from the transport rather than the peer's bytes.
    pub fn is_io(&self) -> bool {
        matches!(self, ProtocolError::Io(_) | ProtocolError::Closed)
    }
}

#[derive(Debug, Error)]
#[error("invalid identifier: {0}")]
pub struct IdParseError(String);

/// 128-bit volunteer identity, rendered as 32 lowercase hex characters.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId([u8; 16]);

impl NodeId {
    pub fn random() -> Self {
        NodeId(rand::random())
    }

    pub const fn from_bytes(b: [u8; 16]) -> Self {
        NodeId(b)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }
}

/// SHA-256 of the application file bytes, rendered as 64 lowercase hex
/// characters.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AppId([u8; 32]);

impl AppId {
    pub fn of(app_bytes: &[u8]) -> Self {
        let digest = Sha256::digest(app_bytes);
        let mut out = [0u8; 32];
        out.copy_from_slice(digest.as_slice());
        AppId(out)
    }

    pub const fn from_bytes(b: [u8; 32]) -> Self {
        AppId(b)
    }

    pub fn matches(&self, app_bytes: &[u8]) -> bool {
        AppId::of(app_bytes) == *self
    }

    /// First 8 hex characters, for log lines.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

macro_rules! hex_id {
    ($ty:ident, $len:expr) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&hex::encode(self.0))
            }
        }

        impl fmt::Debug for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($ty), self)
            }
        }

        impl FromStr for $ty {
            type Err = IdParseError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let s = s.trim();
                if s.len() != $len * 2 || s.bytes().any(|b| b.is_ascii_uppercase()) {
                    return Err(IdParseError(s.to_string()));
                }
                let mut out = [0u8; $len];
                hex::decode_to_slice(s, &mut out).map_err(|_| IdParseError(s.to_string()))?;
                Ok($ty(out))
            }
        }

        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_string())
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(D::Error::custom)
            }
        }
    };
}

hex_id!(NodeId, 16);
hex_id!(AppId, 32);

/// Raw bytes with their declared length.
#[derive(Clone, PartialEq, Eq, Default)]
pub struct Payload(pub Vec<u8>);

impl Payload {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.0
    }
}

impl fmt::Debug for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Payload({} bytes)", self.0.len())
    }
}

impl From<Vec<u8>> for Payload {
    fn from(v: Vec<u8>) -> Self {
        Payload(v)
    }
}

#[derive(Serialize, Deserialize)]
struct PayloadRepr<'a> {
    len: u64,
    #[serde(borrow)]
    data: std::borrow::Cow<'a, str>,
}

impl Serialize for Payload {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PayloadRepr {
            len: self.0.len() as u64,
            data: B64.encode(&self.0).into(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Payload {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = PayloadRepr::deserialize(d)?;
        let bytes = B64.decode(repr.data.as_bytes()).map_err(D::Error::custom)?;
        if bytes.len() as u64 != repr.len {
            return Err(D::Error::custom(format!(
                "payload declares {} bytes but carries {}",
                repr.len,
                bytes.len()
            )));
        }
        Ok(Payload(bytes))
    }
}

/// What a seeder reports about one of its applications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppStatus {
    pub app: AppId,
    pub part_count: u32,
    pub parts_remaining: u32,
    pub policy: ValidationPolicy,
    /// Accepted work so far, one representative run per accepted part.
    #[serde(default)]
    pub work: WorkTotals,
}

/// One application as published in the applications list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppAnnouncement {
    pub app: AppId,
    pub host: NodeId,
    /// `host:port` where the host serves work requests.
    pub address: String,
    /// Replicated `(d, p, w)` for the application's policy.
    pub metrics: MetricTriple,
    pub part_count: u32,
    pub parts_remaining: u32,
    pub policy: ValidationPolicy,
    /// Raw accepted-work sums the metrics were computed from.
    #[serde(default)]
    pub work: WorkTotals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Body {
    /// First contact with the tracker; answered with `LIST_PUSH`.
    Hello { address: String },
    /// Seeder publishes its applications; answered with `LIST_PUSH`.
    Offer { address: String, apps: Vec<AppStatus> },
    ListPush { revision: u64, apps: Vec<AppAnnouncement> },
    Ping,
    Pong,
    /// Seeder refreshes its applications' state; doubles as a heartbeat.
    StatusUpdate { apps: Vec<AppStatus> },
    WorkRequest {
        app: AppId,
        /// Send the application file along with the data part.
        want_app: bool,
        /// Re-request a part already assigned to the sender.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        part: Option<u32>,
    },
    AppPayload { app: AppId, payload: Payload },
    DataPayload { app: AppId, part: u32, deadline: f64, payload: Payload },
    ResultSubmit {
        app: AppId,
        part: u32,
        payload: Payload,
        /// Bytes received for this cycle (application file + data part).
        reported_d: u64,
        /// Share of `reported_d` that was the application file.
        app_bytes: u64,
        reported_w: f64,
    },
    ResultAck { app: AppId, part: u32 },
    ResultReject { app: AppId, part: u32, reason: String },
    DropNotice { app: AppId },
    Error { code: String, detail: String },
}

impl Body {
    pub fn kind(&self) -> &'static str {
        match self {
            Body::Hello { .. } => "HELLO",
            Body::Offer { .. } => "OFFER",
            Body::ListPush { .. } => "LIST_PUSH",
            Body::Ping => "PING",
            Body::Pong => "PONG",
            Body::StatusUpdate { .. } => "STATUS_UPDATE",
            Body::WorkRequest { .. } => "WORK_REQUEST",
            Body::AppPayload { .. } => "APP_PAYLOAD",
            Body::DataPayload { .. } => "DATA_PAYLOAD",
            Body::ResultSubmit { .. } => "RESULT_SUBMIT",
            Body::ResultAck { .. } => "RESULT_ACK",
            Body::ResultReject { .. } => "RESULT_REJECT",
            Body::DropNotice { .. } => "DROP_NOTICE",
            Body::Error { .. } => "ERROR",
        }
    }

    pub fn error(code: &str, detail: impl Into<String>) -> Body {
        Body::Error { code: code.to_string(), detail: detail.into() }
    }
}

pub const KINDS: [&str; 14] = [
    "HELLO",
    "OFFER",
    "LIST_PUSH",
    "PING",
    "PONG",
    "STATUS_UPDATE",
    "WORK_REQUEST",
    "APP_PAYLOAD",
    "DATA_PAYLOAD",
    "RESULT_SUBMIT",
    "RESULT_ACK",
    "RESULT_REJECT",
    "DROP_NOTICE",
    "ERROR",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub sender: NodeId,
    pub body: Body,
}

impl Message {
    pub fn new(sender: NodeId, body: Body) -> Self {
        Self { sender, body }
    }

    pub fn kind(&self) -> &'static str {
        self.body.kind()
    }
}

#[derive(Serialize)]
struct WireOut<'a> {
    v: u32,
    sender: &'a NodeId,
    #[serde(flatten)]
    body: &'a Body,
}

#[derive(Deserialize)]
struct WireIn {
    sender: NodeId,
    #[serde(flatten)]
    body: Body,
}

pub fn encode(msg: &Message) -> Result<Vec<u8>, ProtocolError> {
    let wire = WireOut { v: PROTOCOL_VERSION, sender: &msg.sender, body: &msg.body };
    let mut out = serde_json::to_vec(&wire).map_err(|e| ProtocolError::Parse(e.to_string()))?;
    out.push(b'\n');
    if out.len() > MAX_FRAME_BYTES {
        return Err(ProtocolError::FrameTooLarge(out.len()));
    }
    Ok(out)
}

/// Decodes exactly one newline-terminated frame.
pub fn decode(bytes: &[u8]) -> Result<Message, ProtocolError> {
    if bytes.len() > MAX_FRAME_BYTES {
        return Err(ProtocolError::FrameTooLarge(bytes.len()));
    }
    let line = match bytes.split_last() {
        Some((b'\n', rest)) => rest,
        _ => return Err(ProtocolError::Parse("frame is not newline-terminated".into())),
    };
    if line.contains(&b'\n') {
        return Err(ProtocolError::Parse("frame contains more than one line".into()));
    }
    let value: serde_json::Value =
        serde_json::from_slice(line).map_err(|e| ProtocolError::Parse(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ProtocolError::Parse("frame is not an object".into()))?;
    match obj.get("v").and_then(|v| v.as_u64()) {
        Some(v) if v == PROTOCOL_VERSION as u64 => {}
        Some(v) => return Err(ProtocolError::UnsupportedVersion(v)),
        None => return Err(ProtocolError::Parse("missing protocol version".into())),
    }
    let kind = obj
        .get("kind")
        .and_then(|k| k.as_str())
        .ok_or_else(|| ProtocolError::Parse("missing kind".into()))?;
    if !KINDS.contains(&kind) {
        let sender: NodeId = obj
            .get("sender")
            .and_then(|s| s.as_str())
            .ok_or_else(|| ProtocolError::Parse("missing sender".into()))?
            .parse()
            .map_err(|e: IdParseError| ProtocolError::Parse(e.to_string()))?;
        return Ok(Message::new(sender, Body::error(codes::UNKNOWN_KIND, kind)));
    }
    let wire: WireIn =
        serde_json::from_value(value).map_err(|e| ProtocolError::Parse(e.to_string()))?;
    Ok(Message::new(wire.sender, wire.body))
}

pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> Result<(), ProtocolError> {
    let bytes = encode(msg)?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. `Ok(None)` on a clean end of stream before any byte.
pub fn read_frame<R: BufRead>(r: &mut R) -> Result<Option<Message>, ProtocolError> {
    let mut buf = Vec::new();
    let n = r.by_ref().take(MAX_FRAME_BYTES as u64 + 1).read_until(b'\n', &mut buf)?;
    if n == 0 {
        return Ok(None);
    }
    if buf.len() > MAX_FRAME_BYTES {
        return Err(ProtocolError::FrameTooLarge(buf.len()));
    }
    if buf.last() != Some(&b'\n') {
        return Err(ProtocolError::Closed);
    }
    decode(&buf).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n() -> NodeId {
        NodeId::from_bytes([0xab; 16])
    }

    #[test]
    fn ping_is_one_line() {
        let bytes = encode(&Message::new(n(), Body::Ping)).unwrap();
        let text = std::str::from_utf8(&bytes).unwrap();
        assert!(text.ends_with('\n'));
        assert_eq!(text.matches('\n').count(), 1);
        assert!(text.contains("\"kind\":\"PING\""));
        assert!(text.contains(&format!("\"sender\":\"{}\"", n())));
        assert_eq!(decode(&bytes).unwrap(), Message::new(n(), Body::Ping));
    }

    #[test]
    fn pong_round_trip() {
        let m = Message::new(n(), Body::Pong);
        assert_eq!(decode(&encode(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn app_payload_declares_raw_length() {
        let app = vec![7u8; 4096];
        let m = Message::new(n(), Body::AppPayload { app: AppId::of(&app), payload: app.into() });
        let bytes = encode(&m).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(v["payload"]["len"], 4096);
        assert_eq!(decode(&bytes).unwrap(), m);
    }

    #[test]
    fn truncated_frame_is_parse_error() {
        let bytes = encode(&Message::new(n(), Body::Pong)).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(decode(cut), Err(ProtocolError::Parse(_))));
        let mut cut = cut.to_vec();
        cut.push(b'\n');
        assert!(matches!(decode(&cut), Err(ProtocolError::Parse(_))));
    }

    #[test]
    fn wrong_version_rejected() {
        let line = format!("{{\"v\":2,\"sender\":\"{}\",\"kind\":\"PING\"}}\n", n());
        assert!(matches!(decode(line.as_bytes()), Err(ProtocolError::UnsupportedVersion(2))));
    }

    #[test]
    fn unknown_kind_classified_as_error() {
        let line = format!("{{\"v\":1,\"sender\":\"{}\",\"kind\":\"GOSSIP\"}}\n", n());
        let m = decode(line.as_bytes()).unwrap();
        assert_eq!(m.body, Body::error(codes::UNKNOWN_KIND, "GOSSIP"));
    }

    #[test]
    fn unknown_fields_ignored() {
        let line = format!(
            "{{\"v\":1,\"sender\":\"{}\",\"kind\":\"DROP_NOTICE\",\"app\":\"{}\",\"extra\":[1,2]}}\n",
            n(),
            AppId::of(b"x")
        );
        let m = decode(line.as_bytes()).unwrap();
        assert_eq!(m.body, Body::DropNotice { app: AppId::of(b"x") });
    }

    #[test]
    fn length_mismatch_rejected() {
        let line = format!(
            "{{\"v\":1,\"sender\":\"{}\",\"kind\":\"APP_PAYLOAD\",\"app\":\"{}\",\"payload\":{{\"len\":4,\"data\":\"AAA=\"}}}}\n",
            n(),
            AppId::of(b"x")
        );
        assert!(matches!(decode(line.as_bytes()), Err(ProtocolError::Parse(_))));
    }

    #[test]
    fn oversize_payload_rejected() {
        let big = vec![0u8; MAX_FRAME_BYTES];
        let m = Message::new(n(), Body::AppPayload { app: AppId::of(b"x"), payload: big.into() });
        assert!(matches!(encode(&m), Err(ProtocolError::FrameTooLarge(_))));
    }

    #[test]
    fn five_mib_part_round_trips() {
        let data: Vec<u8> = (0..5 * 1024 * 1024).map(|i| (i * 31 % 251) as u8).collect();
        let m = Message::new(
            n(),
            Body::DataPayload { app: AppId::of(b"x"), part: 9, deadline: 12.5, payload: data.clone().into() },
        );
        match decode(&encode(&m).unwrap()).unwrap().body {
            Body::DataPayload { payload, .. } => assert_eq!(payload.0, data),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ids_render_lowercase_hex() {
        let id = NodeId::from_bytes([0xAB; 16]);
        assert_eq!(id.to_string(), "ab".repeat(16));
        assert_eq!(id.to_string().parse::<NodeId>().unwrap(), id);
        assert!("AB".repeat(16).parse::<NodeId>().is_err());
        assert!("abc".parse::<NodeId>().is_err());
        assert!(AppId::of(b"abc").matches(b"abc"));
        assert!(!AppId::of(b"abc").matches(b"abd"));
    }

    #[test]
    fn read_frame_stream() {
        let mut buf = encode(&Message::new(n(), Body::Ping)).unwrap();
        buf.extend(encode(&Message::new(n(), Body::Pong)).unwrap());
        let mut r = io::Cursor::new(buf);
        assert_eq!(read_frame(&mut r).unwrap().unwrap().body, Body::Ping);
        assert_eq!(read_frame(&mut r).unwrap().unwrap().body, Body::Pong);
        assert!(read_frame(&mut r).unwrap().is_none());
    }
}
