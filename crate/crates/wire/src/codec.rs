//! Frame layout and message encoding.
//!
//! A frame is a big-endian `u32` length counting the type byte plus the
//! payload, the type byte, then the payload. Control messages carry canonical
//! JSON (sorted keys, no whitespace). Model messages carry a little-endian
//! `u32` round index, for updates a little-endian `u64` sample count, then the
//! parameter blob.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use fedqot_core::fedavg::Hyperparams;
use fedqot_core::nn::{self, ModelSpec, ParameterVector};
use fedqot_core::qot::canonical_json;

use crate::error::{Result, WireError};

pub const PROTOCOL_VERSION: u32 = 1;
/// Largest accepted value of the length prefix.
pub const MAX_FRAME_LEN: u32 = 64 * 1024 * 1024;

pub const TYPE_HELLO: u8 = 0x01;
pub const TYPE_ELIGIBLE: u8 = 0x02;
pub const TYPE_TRAIN_CONFIG: u8 = 0x03;
pub const TYPE_GLOBAL_MODEL: u8 = 0x04;
pub const TYPE_LOCAL_UPDATE: u8 = 0x05;
pub const TYPE_DONE: u8 = 0x06;
pub const TYPE_ERROR: u8 = 0x7F;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hello {
    pub ecn_id: String,
    pub n_samples: u64,
    #[serde(with = "hex_u64")]
    pub schema_hash: u64,
    pub protocol_version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Eligible {
    pub accepted: bool,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model_spec: ModelSpec,
    pub hyperparams: Hyperparams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Done {
    pub final_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorInfo {
    pub code: String,
    pub detail: String,
}

impl ErrorInfo {
    pub fn new(code: &str, detail: impl Into<String>) -> Self {
        Self { code: code.into(), detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    Eligible(Eligible),
    TrainConfig(TrainConfig),
    GlobalModel { round_index: u32, params: ParameterVector },
    LocalUpdate { round_index: u32, n_samples: u64, params: ParameterVector },
    Done(Done),
    Error(ErrorInfo),
}

impl Message {
    pub fn type_code(&self) -> u8 {
        match self {
            Message::Hello(_) => TYPE_HELLO,
            Message::Eligible(_) => TYPE_ELIGIBLE,
            Message::TrainConfig(_) => TYPE_TRAIN_CONFIG,
            Message::GlobalModel { .. } => TYPE_GLOBAL_MODEL,
            Message::LocalUpdate { .. } => TYPE_LOCAL_UPDATE,
            Message::Done(_) => TYPE_DONE,
            Message::Error(_) => TYPE_ERROR,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::Hello(_) => "HELLO",
            Message::Eligible(_) => "ELIGIBLE",
            Message::TrainConfig(_) => "TRAIN_CONFIG",
            Message::GlobalModel { .. } => "GLOBAL_MODEL",
            Message::LocalUpdate { .. } => "LOCAL_UPDATE",
            Message::Done(_) => "DONE",
            Message::Error(_) => "ERROR",
        }
    }

    fn payload(&self) -> Vec<u8> {
        match self {
            Message::Hello(m) => canonical_json(m).into_bytes(),
            Message::Eligible(m) => canonical_json(m).into_bytes(),
            Message::TrainConfig(m) => canonical_json(m).into_bytes(),
            Message::Done(m) => canonical_json(m).into_bytes(),
            Message::Error(m) => canonical_json(m).into_bytes(),
            Message::GlobalModel { round_index, params } => {
                let mut out = round_index.to_le_bytes().to_vec();
                out.extend_from_slice(&nn::serialize_params(params));
                out
            }
            Message::LocalUpdate { round_index, n_samples, params } => {
                let mut out = round_index.to_le_bytes().to_vec();
                out.extend_from_slice(&n_samples.to_le_bytes());
                out.extend_from_slice(&nn::serialize_params(params));
                out
            }
        }
    }
}

/// Whether a type code carries JSON (`Some(false)`), a parameter blob
/// (`Some(true)`), or is unknown (`None`).
pub fn carries_blob(type_code: u8) -> Option<bool> {
    match type_code {
        TYPE_HELLO | TYPE_ELIGIBLE | TYPE_TRAIN_CONFIG | TYPE_DONE | TYPE_ERROR => Some(false),
        TYPE_GLOBAL_MODEL | TYPE_LOCAL_UPDATE => Some(true),
        _ => None,
    }
}

pub fn encode_frame(msg: &Message) -> Vec<u8> {
    let payload = msg.payload();
    let len = u32::try_from(payload.len() + 1).expect("payload fits the length prefix");
    let mut out = Vec::with_capacity(payload.len() + 5);
    out.extend_from_slice(&len.to_be_bytes());
    out.push(msg.type_code());
    out.extend_from_slice(&payload);
    out
}

fn check_len(len: u32) -> Result<()> {
    if len == 0 {
        return Err(WireError::Protocol("frame length 0 leaves no room for a type byte".into()));
    }
    if len > MAX_FRAME_LEN {
        return Err(WireError::Protocol(format!("frame length {len} exceeds limit {MAX_FRAME_LEN}")));
    }
    Ok(())
}

/// Decodes exactly one frame. Short input is a closed-stream error, extra
/// bytes after the frame a protocol error.
pub fn decode_frame(bytes: &[u8]) -> Result<Message> {
    let (msg, used) = decode_prefix(bytes)?.ok_or_else(|| WireError::Closed("input ends inside a frame".into()))?;
    if used != bytes.len() {
        return Err(WireError::Protocol(format!("{} trailing bytes after frame", bytes.len() - used)));
    }
    Ok(msg)
}

/// Decodes the first frame of `bytes`, returning it with the number of bytes
/// consumed, or `None` when the frame is incomplete.
pub fn decode_prefix(bytes: &[u8]) -> Result<Option<(Message, usize)>> {
    let Some(head) = bytes.get(..4) else { return Ok(None) };
    let len = u32::from_be_bytes(head.try_into().expect("4 bytes"));
    check_len(len)?;
    let end = 4 + len as usize;
    let Some(body) = bytes.get(4..end) else { return Ok(None) };
    Ok(Some((decode_payload(body[0], &body[1..])?, end)))
}

fn json<T: DeserializeOwned + Serialize>(payload: &[u8]) -> Result<T> {
    serde_json::from_slice(payload).map_err(|e| WireError::Format(format!("bad JSON payload: {e}")))
}

fn blob(bytes: &[u8]) -> Result<ParameterVector> {
    nn::deserialize_params_any(bytes).map_err(|e| WireError::Format(e.to_string()))
}

fn split_u32(payload: &[u8]) -> Result<(u32, &[u8])> {
    match payload.split_first_chunk::<4>() {
        Some((head, rest)) => Ok((u32::from_le_bytes(*head), rest)),
        None => Err(WireError::Format("model payload shorter than its round index".into())),
    }
}

pub fn decode_payload(type_code: u8, payload: &[u8]) -> Result<Message> {
    Ok(match type_code {
        TYPE_HELLO => Message::Hello(json(payload)?),
        TYPE_ELIGIBLE => Message::Eligible(json(payload)?),
        TYPE_TRAIN_CONFIG => Message::TrainConfig(json(payload)?),
        TYPE_DONE => Message::Done(json(payload)?),
        TYPE_ERROR => Message::Error(json(payload)?),
        TYPE_GLOBAL_MODEL => {
            let (round_index, rest) = split_u32(payload)?;
            Message::GlobalModel { round_index, params: blob(rest)? }
        }
        TYPE_LOCAL_UPDATE => {
            let (round_index, rest) = split_u32(payload)?;
            let (n, rest) = rest
                .split_first_chunk::<8>()
                .ok_or_else(|| WireError::Format("update payload shorter than its sample count".into()))?;
            Message::LocalUpdate { round_index, n_samples: u64::from_le_bytes(*n), params: blob(rest)? }
        }
        other => return Err(WireError::Protocol(format!("unknown message type 0x{other:02X}"))),
    })
}

/// Reads one frame. `Ok(None)` means the peer closed cleanly between frames.
pub async fn read_frame<R: AsyncRead + Unpin>(reader: &mut R) -> Result<Option<Message>> {
    let mut head = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = reader.read(&mut head[filled..]).await?;
        if n == 0 {
            return if filled == 0 {
                Ok(None)
            } else {
                Err(WireError::Closed("stream ended inside a length prefix".into()))
            };
        }
        filled += n;
    }
    let len = u32::from_be_bytes(head);
    check_len(len)?;
    let mut body = vec![0u8; len as usize];
    reader.read_exact(&mut body).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => WireError::Closed("stream ended inside a frame".into()),
        _ => WireError::Io(e),
    })?;
    decode_payload(body[0], &body[1..]).map(Some)
}

pub async fn write_frame<W: AsyncWrite + Unpin>(writer: &mut W, msg: &Message) -> Result<()> {
    writer.write_all(&encode_frame(msg)).await?;
    writer.flush().await?;
    Ok(())
}

/// Schema hashes travel as 16 lowercase hex digits: JSON numbers are not
/// reliably 64-bit.
mod hex_u64 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:016x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let text = String::deserialize(d)?;
        if text.len() != 16 || !text.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
            return Err(serde::de::Error::custom(format!("schema_hash `{text}` is not 16 lowercase hex digits")));
        }
        u64::from_str_radix(&text, 16).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params() -> ParameterVector {
        nn::init_params(&ModelSpec::new(2, vec![2], 2).unwrap(), 1)
    }

    #[test]
    fn hello_round_trip() {
        let msg = Message::Hello(Hello {
            ecn_id: "ecn-000".into(),
            n_samples: 11_739,
            schema_hash: 0x0123_4567_89ab_cdef,
            protocol_version: PROTOCOL_VERSION,
        });
        let bytes = encode_frame(&msg);
        let text = std::str::from_utf8(&bytes[5..]).unwrap();
        assert_eq!(
            text,
            r#"{"ecn_id":"ecn-000","n_samples":11739,"protocol_version":1,"schema_hash":"0123456789abcdef"}"#
        );
        assert_eq!(u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize, bytes.len() - 4);
        assert_eq!(bytes[4], TYPE_HELLO);
        assert_eq!(decode_frame(&bytes).unwrap(), msg);
    }

    #[test]
    fn model_payload_layout() {
        let params = small_params();
        let msg = Message::LocalUpdate { round_index: 3, n_samples: 10, params: params.clone() };
        let bytes = encode_frame(&msg);
        assert_eq!(bytes.len(), 4 + 1 + 4 + 8 + 112);
        assert_eq!(&bytes[5..9], &3u32.to_le_bytes());
        assert_eq!(&bytes[9..17], &10u64.to_le_bytes());
        assert_eq!(&bytes[17..], nn::serialize_params(&params).as_slice());
        assert_eq!(decode_frame(&bytes).unwrap(), msg);
    }

    #[test]
    fn every_message_round_trips() {
        let msgs = vec![
            Message::Eligible(Eligible { accepted: false, reason: "schema mismatch".into() }),
            Message::TrainConfig(TrainConfig {
                model_spec: ModelSpec::new(9, vec![3072], 2).unwrap(),
                hyperparams: Hyperparams::default(),
            }),
            Message::GlobalModel { round_index: 30, params: small_params() },
            Message::Done(Done { final_accuracy: Some(0.8989) }),
            Message::Done(Done { final_accuracy: None }),
            Message::Error(ErrorInfo::new("protocol", "unexpected HELLO")),
        ];
        for msg in msgs {
            let bytes = encode_frame(&msg);
            let back = decode_frame(&bytes).unwrap();
            assert_eq!(back, msg);
            assert_eq!(encode_frame(&back), bytes);
        }
    }

    #[test]
    fn oversize_length_rejected_before_reading_body() {
        let mut bytes = u32::MAX.to_be_bytes().to_vec();
        bytes.push(TYPE_HELLO);
        assert!(matches!(decode_frame(&bytes), Err(WireError::Protocol(_))));
        assert!(matches!(decode_frame(&[0, 0, 0, 0]), Err(WireError::Protocol(_))));
    }

    #[test]
    fn typed_errors() {
        let unknown = [0, 0, 0, 1, 0x42];
        assert!(matches!(decode_frame(&unknown), Err(WireError::Protocol(_))));
        let bad_json = [0, 0, 0, 3, TYPE_DONE, b'{', b'x'];
        assert!(matches!(decode_frame(&bad_json), Err(WireError::Format(_))));
        let short_model = [0, 0, 0, 3, TYPE_GLOBAL_MODEL, 1, 0];
        assert!(matches!(decode_frame(&short_model), Err(WireError::Format(_))));
        let mut trailing = encode_frame(&Message::Done(Done { final_accuracy: None }));
        trailing.push(0);
        assert!(matches!(decode_frame(&trailing), Err(WireError::Protocol(_))));
        assert!(matches!(decode_frame(&[0, 0]), Err(WireError::Closed(_))));
        let hello = r#"{"ecn_id":"a","n_samples":1,"protocol_version":1,"schema_hash":"XYZ"}"#;
        let mut frame = ((hello.len() + 1) as u32).to_be_bytes().to_vec();
        frame.push(TYPE_HELLO);
        frame.extend_from_slice(hello.as_bytes());
        assert!(matches!(decode_frame(&frame), Err(WireError::Format(_))));
    }

    #[tokio::test]
    async fn stream_reader_handles_eof_positions() {
        let frame = encode_frame(&Message::Done(Done { final_accuracy: Some(1.0) }));
        let mut two = frame.clone();
        two.extend_from_slice(&frame);
        let mut reader = two.as_slice();
        assert!(read_frame(&mut reader).await.unwrap().is_some());
        assert!(read_frame(&mut reader).await.unwrap().is_some());
        assert!(read_frame(&mut reader).await.unwrap().is_none());
        let mut cut = &frame[..frame.len() - 1];
        assert!(matches!(read_frame(&mut cut).await, Err(WireError::Closed(_))));
        let mut cut = &frame[..2];
        assert!(matches!(read_frame(&mut cut).await, Err(WireError::Closed(_))));
    }
}
