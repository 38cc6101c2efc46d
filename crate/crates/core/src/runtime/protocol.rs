//! Wire messages and their framing.
//!
//! A frame is a 4-byte big-endian body length followed by a UTF-8 JSON
//! object `{"v":1,"kind":..,"round":..,"sender":..,"token":..,"payload":..}`.
//! Parameter blocks travel as JSON number arrays (shortest round-trip
//! formatting, so values survive bit-exactly) and model bytes as base64.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::model::{ModelSpec, ParamBlock};
use crate::wrapper::WrapperMode;

pub const PROTOCOL_VERSION: u32 = 1;
/// Default cap on a frame body.
pub const DEFAULT_MAX_FRAME: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("frame body of {len} bytes exceeds the {max}-byte limit")]
    Oversize { len: usize, max: usize },
    #[error("truncated frame: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{0} trailing bytes after frame")]
    Trailing(usize),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unsupported protocol version {0}")]
    Version(u32),
    #[error("unknown message kind {0:?}")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MessageKind {
    Register,
    RegisterAck,
    RoundStart,
    Update,
    ModelShare,
    ModelShareAck,
    Done,
    Error,
}

impl MessageKind {
    pub const ALL: [MessageKind; 8] = [
        MessageKind::Register,
        MessageKind::RegisterAck,
        MessageKind::RoundStart,
        MessageKind::Update,
        MessageKind::ModelShare,
        MessageKind::ModelShareAck,
        MessageKind::Done,
        MessageKind::Error,
    ];

    fn name(self) -> &'static str {
        match self {
            MessageKind::Register => "Register",
            MessageKind::RegisterAck => "RegisterAck",
            MessageKind::RoundStart => "RoundStart",
            MessageKind::Update => "Update",
            MessageKind::ModelShare => "ModelShare",
            MessageKind::ModelShareAck => "ModelShareAck",
            MessageKind::Done => "Done",
            MessageKind::Error => "Error",
        }
    }

    fn parse(s: &str) -> Option<MessageKind> {
        MessageKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Kind-specific message body. The kind of a message is determined by its
/// payload variant, so a message can never carry the wrong body.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Register { mode: WrapperMode, translator: Option<ModelSpec> },
    RegisterAck { roster: Vec<String> },
    RoundStart { params: Vec<ParamBlock> },
    Update { params: Vec<ParamBlock>, n_samples: u64, loss: f64 },
    ModelShare { model: Vec<u8> },
    ModelShareAck,
    /// Final global parameters for stacking; `None` when nothing was averaged.
    Done { params: Option<Vec<ParamBlock>> },
    Error { message: String },
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::Register { .. } => MessageKind::Register,
            Payload::RegisterAck { .. } => MessageKind::RegisterAck,
            Payload::RoundStart { .. } => MessageKind::RoundStart,
            Payload::Update { .. } => MessageKind::Update,
            Payload::ModelShare { .. } => MessageKind::ModelShare,
            Payload::ModelShareAck => MessageKind::ModelShareAck,
            Payload::Done { .. } => MessageKind::Done,
            Payload::Error { .. } => MessageKind::Error,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub round: u32,
    pub sender: String,
    pub token: String,
    pub payload: Payload,
}

impl Message {
    pub fn new(round: u32, sender: impl Into<String>, token: impl Into<String>, payload: Payload) -> Self {
        Message { round, sender: sender.into(), token: token.into(), payload }
    }

    pub fn kind(&self) -> MessageKind {
        self.payload.kind()
    }

    pub fn error(round: u32, sender: &str, token: &str, message: impl Into<String>) -> Self {
        Message::new(round, sender, token, Payload::Error { message: message.into() })
    }
}

#[derive(Serialize, Deserialize)]
struct RegisterBody {
    mode: WrapperMode,
    translator: Option<ModelSpec>,
}

#[derive(Serialize, Deserialize)]
struct RosterBody {
    roster: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ParamsBody {
    params: Vec<ParamBlock>,
}

#[derive(Serialize, Deserialize)]
struct UpdateBody {
    params: Vec<ParamBlock>,
    n_samples: u64,
    loss: f64,
}

#[derive(Serialize, Deserialize)]
struct ModelBody {
    model: String,
}

#[derive(Serialize, Deserialize)]
struct DoneBody {
    params: Option<Vec<ParamBlock>>,
}

#[derive(Serialize, Deserialize)]
struct ErrorBody {
    message: String,
}

#[derive(Serialize)]
struct WireOut<'a> {
    v: u32,
    kind: &'a str,
    round: u32,
    sender: &'a str,
    token: &'a str,
    payload: serde_json::Value,
}

#[derive(Deserialize)]
struct WireIn {
    v: u32,
    kind: String,
    round: u32,
    sender: String,
    token: String,
    #[serde(default)]
    payload: serde_json::Value,
}

fn to_value<T: Serialize>(body: &T) -> serde_json::Value {
    serde_json::to_value(body).expect("payload bodies are plain data")
}

fn b64() -> base64::engine::GeneralPurpose {
    base64::engine::general_purpose::STANDARD
}

/// JSON body of a message, without the length prefix.
pub fn encode_body(msg: &Message) -> Vec<u8> {
    use serde_json::Value;
    let payload = match &msg.payload {
        Payload::Register { mode, translator } => to_value(&RegisterBody { mode: *mode, translator: *translator }),
        Payload::RegisterAck { roster } => to_value(&RosterBody { roster: roster.clone() }),
        Payload::RoundStart { params } => to_value(&ParamsBody { params: params.clone() }),
        Payload::Update { params, n_samples, loss } => {
            to_value(&UpdateBody { params: params.clone(), n_samples: *n_samples, loss: *loss })
        }
        Payload::ModelShare { model } => to_value(&ModelBody { model: b64().encode(model) }),
        Payload::ModelShareAck => Value::Null,
        Payload::Done { params } => to_value(&DoneBody { params: params.clone() }),
        Payload::Error { message } => to_value(&ErrorBody { message: message.clone() }),
    };
    let wire = WireOut {
        v: PROTOCOL_VERSION,
        kind: msg.kind().name(),
        round: msg.round,
        sender: &msg.sender,
        token: &msg.token,
        payload,
    };
    serde_json::to_vec(&wire).expect("wire message is always serializable")
}

/// Length-prefixed frame.
pub fn encode(msg: &Message) -> Vec<u8> {
    let body = encode_body(msg);
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

fn from_value<T: for<'de> Deserialize<'de>>(kind: MessageKind, v: serde_json::Value) -> Result<T, ProtocolError> {
    serde_json::from_value(v).map_err(|e| ProtocolError::Malformed(format!("bad {kind} payload: {e}")))
}

pub fn decode_body(body: &[u8]) -> Result<Message, ProtocolError> {
    let wire: WireIn = serde_json::from_slice(body).map_err(|e| ProtocolError::Malformed(format!("{e}")))?;
    if wire.v != PROTOCOL_VERSION {
        return Err(ProtocolError::Version(wire.v));
    }
    let kind = MessageKind::parse(&wire.kind).ok_or(ProtocolError::UnknownKind(wire.kind))?;
    let p = wire.payload;
    let payload = match kind {
        MessageKind::Register => {
            let b: RegisterBody = from_value(kind, p)?;
            Payload::Register { mode: b.mode, translator: b.translator }
        }
        MessageKind::RegisterAck => Payload::RegisterAck { roster: from_value::<RosterBody>(kind, p)?.roster },
        MessageKind::RoundStart => Payload::RoundStart { params: from_value::<ParamsBody>(kind, p)?.params },
        MessageKind::Update => {
            let b: UpdateBody = from_value(kind, p)?;
            Payload::Update { params: b.params, n_samples: b.n_samples, loss: b.loss }
        }
        MessageKind::ModelShare => {
            let b: ModelBody = from_value(kind, p)?;
            let model = b64()
                .decode(b.model.as_bytes())
                .map_err(|e| ProtocolError::Malformed(format!("bad base64 model: {e}")))?;
            Payload::ModelShare { model }
        }
        MessageKind::ModelShareAck => {
            if !p.is_null() {
                return Err(ProtocolError::Malformed("ModelShareAck carries no payload".into()));
            }
            Payload::ModelShareAck
        }
        MessageKind::Done => Payload::Done { params: from_value::<DoneBody>(kind, p)?.params },
        MessageKind::Error => Payload::Error { message: from_value::<ErrorBody>(kind, p)?.message },
    };
    let blocks = match &payload {
        Payload::RoundStart { params } | Payload::Update { params, .. } => Some(params),
        Payload::Done { params } => params.as_ref(),
        _ => None,
    };
    if let Some(params) = blocks {
        check_blocks(params)?;
    }
    Ok(Message { round: wire.round, sender: wire.sender, token: wire.token, payload })
}

fn check_blocks(blocks: &[ParamBlock]) -> Result<(), ProtocolError> {
    for b in blocks {
        let expected: Option<usize> = b.shape.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d));
        if expected != Some(b.values.len()) {
            return Err(ProtocolError::Malformed(format!(
                "block {:?} has {} values for shape {:?}",
                b.name,
                b.values.len(),
                b.shape
            )));
        }
    }
    Ok(())
}

/// Decodes exactly one complete frame.
pub fn decode(frame: &[u8]) -> Result<Message, ProtocolError> {
    decode_with_limit(frame, DEFAULT_MAX_FRAME)
}

pub fn decode_with_limit(frame: &[u8], max: usize) -> Result<Message, ProtocolError> {
    if frame.len() < 4 {
        return Err(ProtocolError::Truncated { needed: 4, have: frame.len() });
    }
    let len = u32::from_be_bytes([frame[0], frame[1], frame[2], frame[3]]) as usize;
    if len > max {
        return Err(ProtocolError::Oversize { len, max });
    }
    let body = &frame[4..];
    if body.len() < len {
        return Err(ProtocolError::Truncated { needed: len, have: body.len() });
    }
    if body.len() > len {
        return Err(ProtocolError::Trailing(body.len() - len));
    }
    decode_body(body)
}

/// Incremental decoder for a byte stream. Partial frames are buffered until
/// complete; an oversize length poisons the stream.
#[derive(Debug)]
pub struct FrameDecoder {
    buf: VecDeque<u8>,
    max: usize,
    poisoned: bool,
}

impl Default for FrameDecoder {
    fn default() -> Self {
        FrameDecoder::new(DEFAULT_MAX_FRAME)
    }
}

impl FrameDecoder {
    pub fn new(max: usize) -> Self {
        FrameDecoder { buf: VecDeque::new(), max, poisoned: false }
    }

    pub fn push(&mut self, bytes: &[u8]) {
        if !self.poisoned {
            self.buf.extend(bytes);
        }
    }

    /// Bytes held for an incomplete frame.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    /// Next complete message, `None` if more bytes are needed.
    pub fn next_message(&mut self) -> Option<Result<Message, ProtocolError>> {
        if self.poisoned || self.buf.len() < 4 {
            return None;
        }
        let len = u32::from_be_bytes([self.buf[0], self.buf[1], self.buf[2], self.buf[3]]) as usize;
        if len > self.max {
            self.poisoned = true;
            self.buf.clear();
            return Some(Err(ProtocolError::Oversize { len, max: self.max }));
        }
        if self.buf.len() < 4 + len {
            return None;
        }
        self.buf.drain(..4);
        let body: Vec<u8> = self.buf.drain(..len).collect();
        Some(decode_body(&body))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn register() -> Message {
        Message::new(0, "0", "tok", Payload::Register { mode: WrapperMode::Stacking, translator: None })
    }

    #[test]
    fn register_round_trips() {
        let m = register();
        assert_eq!(decode(&encode(&m)).unwrap(), m);
    }

    #[test]
    fn body_layout_is_fixed() {
        let m = Message::new(3, "1", "t", Payload::ModelShareAck);
        let body = encode_body(&m);
        assert_eq!(
            core::str::from_utf8(&body).unwrap(),
            r#"{"v":1,"kind":"ModelShareAck","round":3,"sender":"1","token":"t","payload":null}"#
        );
        assert_eq!(&encode(&m)[..4], &(body.len() as u32).to_be_bytes());
    }

    #[test]
    fn update_values_are_bit_exact() {
        let params = vec![ParamBlock { name: "w".into(), shape: vec![4], values: vec![2.0, 4.0, 0.1, 1.0 / 3.0] }];
        let m = Message::new(1, "a", "t", Payload::Update { params: params.clone(), n_samples: 5, loss: 0.25 });
        match decode(&encode(&m)).unwrap().payload {
            Payload::Update { params: got, .. } => {
                for (a, b) in got[0].values.iter().zip(&params[0].values) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn short_body_is_truncated_not_partial() {
        let mut frame = 10u32.to_be_bytes().to_vec();
        frame.extend_from_slice(b"{\"v\":");
        assert_eq!(decode(&frame), Err(ProtocolError::Truncated { needed: 10, have: 5 }));
        let mut dec = FrameDecoder::default();
        dec.push(&frame);
        assert!(dec.next_message().is_none());
        assert_eq!(dec.pending(), 9);
    }

    #[test]
    fn oversize_and_unknown_kind() {
        let frame = 100u32.to_be_bytes();
        assert_eq!(decode_with_limit(&frame, 10), Err(ProtocolError::Oversize { len: 100, max: 10 }));
        let body = br#"{"v":1,"kind":"Gossip","round":0,"sender":"x","token":"t","payload":null}"#;
        assert!(matches!(decode_body(body), Err(ProtocolError::UnknownKind(k)) if k == "Gossip"));
        let body = br#"{"v":2,"kind":"Done","round":0,"sender":"x","token":"t","payload":null}"#;
        assert_eq!(decode_body(body), Err(ProtocolError::Version(2)));
    }

    #[test]
    fn payload_must_match_kind() {
        let body = br#"{"v":1,"kind":"RoundStart","round":1,"sender":"s","token":"t","payload":null}"#;
        assert!(matches!(decode_body(body), Err(ProtocolError::Malformed(_))));
        let body = br#"{"v":1,"kind":"RoundStart","round":1,"sender":"s","token":"t","payload":{"params":[{"name":"w","shape":[2],"values":[1.0]}]}}"#;
        assert!(matches!(decode_body(body), Err(ProtocolError::Malformed(_))));
    }

    #[test]
    fn concatenated_frames_split_anywhere() {
        let msgs = vec![
            register(),
            Message::new(0, "server", "tok", Payload::RegisterAck { roster: vec!["0".into(), "1".into()] }),
            Message::new(2, "1", "tok", Payload::ModelShare { model: vec![0, 1, 2, 255] }),
            Message::new(2, "server", "tok", Payload::Done { params: None }),
        ];
        let stream: Vec<u8> = msgs.iter().flat_map(encode).collect();
        for step in [1, 3, 7, stream.len()] {
            let mut dec = FrameDecoder::default();
            let mut out = Vec::new();
            for chunk in stream.chunks(step) {
                dec.push(chunk);
                while let Some(m) = dec.next_message() {
                    out.push(m.unwrap());
                }
            }
            assert_eq!(out, msgs);
            assert_eq!(dec.pending(), 0);
        }
    }
}
