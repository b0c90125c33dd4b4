//! Length-prefixed JSON framing for scheduler/worker and worker/worker traffic.
//!
//! A frame is a 32-bit big-endian body length followed by a UTF-8 JSON object
//! whose `"type"` field names one of the messages below. Bodies are capped at
//! 16 MiB. There is no goodbye message: a preempted worker simply vanishes.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    Awareness, BlobKey, BlobRef, ContextId, ContextRecipe, GpuModel, InferenceItem, ItemId, ResourceRequest, TaskId,
    WorkerId,
};

pub const MAX_FRAME_BYTES: usize = 16 * 1024 * 1024;
pub const HEADER_BYTES: usize = 4;

/// Every value the `"type"` field may take.
pub const MESSAGE_TYPES: &[&str] = &[
    "REGISTER",
    "INSTALL_CONTEXT",
    "CONTEXT_READY",
    "INSTALL_FAILED",
    "INVOKE",
    "INVOKE_FAILED",
    "RESULT",
    "TRANSFER_GET",
    "TRANSFER_DATA",
    "TRANSFER_ERROR",
    "HEARTBEAT",
    "SHUTDOWN",
];

/// Where a worker should obtain a context template.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstallSource {
    Fs,
    /// Peer-transfer address of a worker already hosting the context.
    Peer(String),
}

impl InstallSource {
    pub fn is_peer(&self) -> bool {
        matches!(self, InstallSource::Peer(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "SUPPORTED")]
    Supported,
    #[serde(rename = "REFUTED")]
    Refuted,
    #[serde(rename = "NOT ENOUGH INFO")]
    NotEnoughInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub item_id: ItemId,
    pub verdict_token: Verdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InstallFailure {
    InsufficientDisk,
    BadRecipe,
    Busy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InvokeFailure {
    ContextMissing,
    Busy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TransferFailure {
    NotFound,
    Busy,
}

/// Per-stage emulated seconds, keyed by stage name.
pub type Timings = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Message {
    Register {
        worker_id: WorkerId,
        gpu_model: GpuModel,
        resources: ResourceRequest,
        cache_inventory: Vec<BlobKey>,
        /// Address other workers use for peer transfers.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        peer_address: Option<String>,
    },
    InstallContext {
        recipe: ContextRecipe,
        source: InstallSource,
    },
    ContextReady {
        context_id: ContextId,
        build_seconds: f64,
        /// Source the template actually came from, after any fallback.
        fetched_from: InstallSource,
        #[serde(default)]
        timings: Timings,
    },
    InstallFailed {
        context_id: ContextId,
        reason: InstallFailure,
    },
    Invoke {
        task_id: TaskId,
        attempt: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        context_id: Option<ContextId>,
        awareness: Awareness,
        items: Vec<InferenceItem>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        inputs: Vec<BlobRef>,
    },
    InvokeFailed {
        task_id: TaskId,
        attempt: u32,
        reason: InvokeFailure,
    },
    Result {
        task_id: TaskId,
        attempt: u32,
        item_results: Vec<ItemResult>,
        timings: Timings,
    },
    TransferGet {
        context_id: ContextId,
    },
    TransferData {
        context_id: ContextId,
        declared_bytes: u64,
    },
    TransferError {
        context_id: ContextId,
        reason: TransferFailure,
    },
    Heartbeat {
        worker_id: WorkerId,
        emulated_clock: f64,
    },
    Shutdown {},
}

impl Message {
    pub fn type_name(&self) -> &'static str {
        match self {
            Message::Register { .. } => "REGISTER",
            Message::InstallContext { .. } => "INSTALL_CONTEXT",
            Message::ContextReady { .. } => "CONTEXT_READY",
            Message::InstallFailed { .. } => "INSTALL_FAILED",
            Message::Invoke { .. } => "INVOKE",
            Message::InvokeFailed { .. } => "INVOKE_FAILED",
            Message::Result { .. } => "RESULT",
            Message::TransferGet { .. } => "TRANSFER_GET",
            Message::TransferData { .. } => "TRANSFER_DATA",
            Message::TransferError { .. } => "TRANSFER_ERROR",
            Message::Heartbeat { .. } => "HEARTBEAT",
            Message::Shutdown {} => "SHUTDOWN",
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("frame body of {0} bytes exceeds the 16 MiB limit")]
    Oversize(usize),
    #[error("truncated frame: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("frame body is not valid UTF-8")]
    NotUtf8,
    #[error("frame body has no string \"type\" field")]
    MissingType,
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("malformed {kind} message: {detail}")]
    Malformed { kind: String, detail: String },
}

/// Serializes `msg` into a complete frame.
pub fn encode(msg: &Message) -> Result<Vec<u8>, ProtocolError> {
    let body = serde_json::to_vec(msg).expect("messages always serialize");
    if body.len() > MAX_FRAME_BYTES {
        return Err(ProtocolError::Oversize(body.len()));
    }
    let mut frame = Vec::with_capacity(HEADER_BYTES + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    Ok(frame)
}

/// Parses exactly one complete frame.
pub fn decode(frame: &[u8]) -> Result<Message, ProtocolError> {
    if frame.len() < HEADER_BYTES {
        return Err(ProtocolError::Truncated {
            needed: HEADER_BYTES,
            have: frame.len(),
        });
    }
    let len = body_length(frame[..HEADER_BYTES].try_into().unwrap())?;
    let have = frame.len() - HEADER_BYTES;
    if have < len {
        return Err(ProtocolError::Truncated {
            needed: HEADER_BYTES + len,
            have: frame.len(),
        });
    }
    if have > len {
        return Err(ProtocolError::TrailingBytes(have - len));
    }
    decode_body(&frame[HEADER_BYTES..])
}

fn body_length(header: [u8; 4]) -> Result<usize, ProtocolError> {
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(ProtocolError::Oversize(len));
    }
    Ok(len)
}

/// Parses a frame body (the JSON object without its length prefix).
pub fn decode_body(body: &[u8]) -> Result<Message, ProtocolError> {
    let text = std::str::from_utf8(body).map_err(|_| ProtocolError::NotUtf8)?;
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ProtocolError::Malformed {
        kind: "?".to_string(),
        detail: e.to_string(),
    })?;
    let kind = value
        .get("type")
        .and_then(|t| t.as_str())
        .ok_or(ProtocolError::MissingType)?
        .to_string();
    if !MESSAGE_TYPES.contains(&kind.as_str()) {
        return Err(ProtocolError::UnknownType(kind));
    }
    serde_json::from_value(value).map_err(|e| ProtocolError::Malformed {
        kind,
        detail: e.to_string(),
    })
}

/// Incremental decoder for one connection: feed it bytes in whatever chunks
/// the socket delivers and pull complete messages out.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete message, `Ok(None)` if more bytes are needed.
    pub fn next_message(&mut self) -> Result<Option<Message>, ProtocolError> {
        if self.buf.len() < HEADER_BYTES {
            return Ok(None);
        }
        let len = body_length(self.buf[..HEADER_BYTES].try_into().unwrap())?;
        if self.buf.len() < HEADER_BYTES + len {
            return Ok(None);
        }
        let msg = decode_body(&self.buf[HEADER_BYTES..HEADER_BYTES + len]);
        self.buf.drain(..HEADER_BYTES + len);
        msg.map(Some)
    }

    /// Bytes held back waiting for the rest of a frame.
    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> io::Result<()> {
    let frame = encode(msg).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    w.write_all(&frame)
}

/// Blocking read of one message; `Ok(None)` on a clean end of stream between frames.
pub fn read_message<R: Read>(r: &mut R) -> io::Result<Option<Message>> {
    let mut header = [0u8; HEADER_BYTES];
    match r.read_exact(&mut header) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = body_length(header).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    decode_body(&body)
        .map(Some)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn heartbeat() -> Message {
        Message::Heartbeat {
            worker_id: WorkerId::new("w1"),
            emulated_clock: 12.5,
        }
    }

    #[test]
    fn heartbeat_round_trip() {
        let m = heartbeat();
        assert_eq!(decode(&encode(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn frame_layout_is_big_endian_length_then_json() {
        let frame = encode(&Message::Shutdown {}).unwrap();
        let body = br#"{"type":"SHUTDOWN"}"#;
        assert_eq!(&frame[..4], &(body.len() as u32).to_be_bytes());
        assert_eq!(&frame[4..], body);
    }

    #[test]
    fn install_source_wire_shape() {
        let fs = serde_json::to_string(&InstallSource::Fs).unwrap();
        let peer = serde_json::to_string(&InstallSource::Peer("10.0.0.2:7000".into())).unwrap();
        assert_eq!(fs, r#""fs""#);
        assert_eq!(peer, r#"{"peer":"10.0.0.2:7000"}"#);
    }

    #[test]
    fn verdict_wire_names() {
        assert_eq!(
            serde_json::to_string(&Verdict::NotEnoughInfo).unwrap(),
            r#""NOT ENOUGH INFO""#
        );
    }

    #[test]
    fn oversize_header_rejected() {
        let mut frame = ((MAX_FRAME_BYTES + 1) as u32).to_be_bytes().to_vec();
        frame.extend_from_slice(b"{}");
        assert_eq!(decode(&frame), Err(ProtocolError::Oversize(MAX_FRAME_BYTES + 1)));
        let mut dec = FrameDecoder::new();
        dec.push(&frame[..4]);
        assert_eq!(dec.next_message(), Err(ProtocolError::Oversize(MAX_FRAME_BYTES + 1)));
    }

    #[test]
    fn exactly_max_length_is_not_oversize() {
        let frame = (MAX_FRAME_BYTES as u32).to_be_bytes();
        assert!(matches!(decode(&frame), Err(ProtocolError::Truncated { .. })));
    }

    #[test]
    fn distinct_errors() {
        let frame = encode(&heartbeat()).unwrap();
        assert!(matches!(
            decode(&frame[..frame.len() - 1]),
            Err(ProtocolError::Truncated { .. })
        ));
        assert!(matches!(
            decode(&frame[..2]),
            Err(ProtocolError::Truncated { needed: 4, have: 2 })
        ));

        let mut extra = frame.clone();
        extra.push(b' ');
        assert_eq!(decode(&extra), Err(ProtocolError::TrailingBytes(1)));

        let body = br#"{"type":"GOODBYE"}"#;
        let mut unknown = (body.len() as u32).to_be_bytes().to_vec();
        unknown.extend_from_slice(body);
        assert_eq!(decode(&unknown), Err(ProtocolError::UnknownType("GOODBYE".into())));

        let body = br#"{"kind":"HEARTBEAT"}"#;
        let mut untyped = (body.len() as u32).to_be_bytes().to_vec();
        untyped.extend_from_slice(body);
        assert_eq!(decode(&untyped), Err(ProtocolError::MissingType));

        let body = br#"{"type":"HEARTBEAT"}"#;
        let mut missing = (body.len() as u32).to_be_bytes().to_vec();
        missing.extend_from_slice(body);
        assert!(matches!(decode(&missing), Err(ProtocolError::Malformed { .. })));

        let body = [0xffu8, 0xfe];
        let mut bad = (body.len() as u32).to_be_bytes().to_vec();
        bad.extend_from_slice(&body);
        assert_eq!(decode(&bad), Err(ProtocolError::NotUtf8));
    }

    #[test]
    fn blocking_stream_helpers() {
        let mut wire = Vec::new();
        write_message(&mut wire, &heartbeat()).unwrap();
        write_message(&mut wire, &Message::Shutdown {}).unwrap();
        let mut cursor = io::Cursor::new(wire);
        assert_eq!(read_message(&mut cursor).unwrap(), Some(heartbeat()));
        assert_eq!(read_message(&mut cursor).unwrap(), Some(Message::Shutdown {}));
        assert_eq!(read_message(&mut cursor).unwrap(), None);
    }
}
