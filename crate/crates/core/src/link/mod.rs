//! Serial framing between the processing unit and the servo microcontroller.
//!
//! ```text
//! +------+----------+--------+-----------------+----------+
//! | SOF  | MSG_TYPE | LENGTH | PAYLOAD         | CHECKSUM |
//! | 0xAA | 1 byte   | 0..=16 | LENGTH bytes    | 1 byte   |
//! +------+----------+--------+-----------------+----------+
//! ```
//!
//! The checksum covers MSG_TYPE, LENGTH and PAYLOAD. The default is a plain
//! XOR of those bytes; a CRC-8 (poly 0x07, init 0x00) variant can be selected
//! when both ends agree. Multi-byte fields are big-endian.
//!
//! | type | message      | payload                          |
//! |------|--------------|----------------------------------|
//! | 0x01 | `DETECTED`   | class code (0x01..=0x06)          |
//! | 0x02 | `ACK`        | acknowledged message type         |
//! | 0x03 | `SERVO_DONE` | servo id (1..=3), direction (0 CW, 1 CCW) |
//! | 0x04 | `BIN_COUNT`  | bin (1..=6), count u16            |
//! | 0x05 | `LEVEL`      | bin (1..=6), distance in mm u16   |
//! | 0x06 | `STOP_ALL`   | empty                             |
//! | 0x07 | `DUMP`       | bin (1..=6)                       |
//! | 0x08 | `BELT`       | 0 stop, 1 run                     |

pub mod mcu;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::domain::{BinIndex, Direction, ServoCommand, ServoId, WasteClass};

pub const SOF: u8 = 0xAA;
pub const MAX_PAYLOAD: usize = 16;
/// SOF, type, length and checksum.
pub const FRAME_OVERHEAD: usize = 4;

pub mod msg_type {
    pub const DETECTED: u8 = 0x01;
    pub const ACK: u8 = 0x02;
    pub const SERVO_DONE: u8 = 0x03;
    pub const BIN_COUNT: u8 = 0x04;
    pub const LEVEL: u8 = 0x05;
    pub const STOP_ALL: u8 = 0x06;
    pub const DUMP: u8 = 0x07;
    pub const BELT: u8 = 0x08;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChecksumKind {
    #[default]
    Xor,
    Crc8,
}

impl ChecksumKind {
    pub fn compute(self, bytes: &[u8]) -> u8 {
        match self {
            ChecksumKind::Xor => bytes.iter().fold(0, |acc, b| acc ^ b),
            ChecksumKind::Crc8 => crc8(bytes),
        }
    }
}

fn crc8(bytes: &[u8]) -> u8 {
    let mut crc = 0u8;
    for &b in bytes {
        crc ^= b;
        for _ in 0..8 {
            crc = if crc & 0x80 != 0 { (crc << 1) ^ 0x07 } else { crc << 1 };
        }
    }
    crc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "msg", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LinkMessage {
    Detected { class: WasteClass },
    Ack { ref_type: u8 },
    ServoDone { command: ServoCommand },
    BinCount { bin: BinIndex, count: u16 },
    Level { bin: BinIndex, distance_mm: u16 },
    StopAll,
    Dump { bin: BinIndex },
    Belt { run: bool },
}

impl LinkMessage {
    pub fn msg_type(&self) -> u8 {
        use msg_type::*;
        match self {
            LinkMessage::Detected { .. } => DETECTED,
            LinkMessage::Ack { .. } => ACK,
            LinkMessage::ServoDone { .. } => SERVO_DONE,
            LinkMessage::BinCount { .. } => BIN_COUNT,
            LinkMessage::Level { .. } => LEVEL,
            LinkMessage::StopAll => STOP_ALL,
            LinkMessage::Dump { .. } => DUMP,
            LinkMessage::Belt { .. } => BELT,
        }
    }

    fn payload(&self) -> ([u8; 3], usize) {
        match *self {
            LinkMessage::Detected { class } => ([class.code(), 0, 0], 1),
            LinkMessage::Ack { ref_type } => ([ref_type, 0, 0], 1),
            LinkMessage::ServoDone { command } => {
                ([command.servo.get(), command.direction.wire(), 0], 2)
            }
            LinkMessage::BinCount { bin, count } => {
                let [hi, lo] = count.to_be_bytes();
                ([bin.get(), hi, lo], 3)
            }
            LinkMessage::Level { bin, distance_mm } => {
                let [hi, lo] = distance_mm.to_be_bytes();
                ([bin.get(), hi, lo], 3)
            }
            LinkMessage::StopAll => ([0; 3], 0),
            LinkMessage::Dump { bin } => ([bin.get(), 0, 0], 1),
            LinkMessage::Belt { run } => ([u8::from(run), 0, 0], 1),
        }
    }
}

/// Payload length required for each known message type.
pub fn expected_length(msg_type: u8) -> Option<usize> {
    use msg_type::*;
    match msg_type {
        DETECTED | ACK | DUMP | BELT => Some(1),
        SERVO_DONE => Some(2),
        BIN_COUNT | LEVEL => Some(3),
        STOP_ALL => Some(0),
        _ => None,
    }
}

impl fmt::Display for LinkMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinkMessage::Detected { class } => write!(f, "DETECTED({class})"),
            LinkMessage::Ack { ref_type } => write!(f, "ACK(0x{ref_type:02X})"),
            LinkMessage::ServoDone { command } => write!(
                f,
                "SERVO_DONE(servo {}, {})",
                command.servo,
                command.direction.slug().to_uppercase()
            ),
            LinkMessage::BinCount { bin, count } => write!(f, "BIN_COUNT(bin {bin}, count {count})"),
            LinkMessage::Level { bin, distance_mm } => {
                write!(f, "LEVEL(bin {bin}, {distance_mm} mm)")
            }
            LinkMessage::StopAll => f.write_str("STOP_ALL"),
            LinkMessage::Dump { bin } => write!(f, "DUMP(bin {bin})"),
            LinkMessage::Belt { run } => write!(f, "BELT({})", u8::from(*run)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("bad start-of-frame byte 0x{0:02X}")]
    BadSof(u8),
    #[error("bad checksum: expected 0x{expected:02X}, found 0x{found:02X}")]
    BadChecksum { expected: u8, found: u8 },
    #[error("bad length {length} for message type 0x{msg_type:02X}")]
    BadLength { msg_type: u8, length: u8 },
    #[error("unknown message type 0x{0:02X}")]
    UnknownType(u8),
    #[error("field value 0x{value:02X} out of range for message type 0x{msg_type:02X}")]
    BadPayload { msg_type: u8, value: u8 },
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
}

/// Stateless frame codec.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Codec {
    pub checksum: ChecksumKind,
}

impl Codec {
    pub const fn new(checksum: ChecksumKind) -> Self {
        Codec { checksum }
    }

    pub fn encode(&self, msg: &LinkMessage) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_OVERHEAD + 3);
        self.encode_into(msg, &mut out);
        out
    }

    pub fn encode_into(&self, msg: &LinkMessage, out: &mut Vec<u8>) {
        let (payload, len) = msg.payload();
        let start = out.len();
        out.push(SOF);
        out.push(msg.msg_type());
        out.push(len as u8);
        out.extend_from_slice(&payload[..len]);
        let sum = self.checksum.compute(&out[start + 1..]);
        out.push(sum);
    }

    /// Decodes one frame from the start of `bytes`, returning the message and
    /// the number of bytes consumed.
    pub fn decode(&self, bytes: &[u8]) -> Result<(LinkMessage, usize), DecodeError> {
        let Some(&first) = bytes.first() else {
            return Err(DecodeError::Truncated { needed: FRAME_OVERHEAD, available: 0 });
        };
        if first != SOF {
            return Err(DecodeError::BadSof(first));
        }
        if bytes.len() < 3 {
            return Err(DecodeError::Truncated { needed: FRAME_OVERHEAD, available: bytes.len() });
        }
        let ty = bytes[1];
        let length = bytes[2];
        if usize::from(length) > MAX_PAYLOAD {
            return Err(DecodeError::BadLength { msg_type: ty, length });
        }
        // Reject impossible headers before waiting for a body, so a stray SOF
        // in noise cannot stall the stream.
        let want = expected_length(ty).ok_or(DecodeError::UnknownType(ty))?;
        if want != usize::from(length) {
            return Err(DecodeError::BadLength { msg_type: ty, length });
        }
        let total = FRAME_OVERHEAD + usize::from(length);
        if bytes.len() < total {
            return Err(DecodeError::Truncated { needed: total, available: bytes.len() });
        }
        let expected = self.checksum.compute(&bytes[1..total - 1]);
        let found = bytes[total - 1];
        if expected != found {
            return Err(DecodeError::BadChecksum { expected, found });
        }
        let msg = parse_payload(ty, &bytes[3..total - 1])?;
        Ok((msg, total))
    }
}

fn parse_payload(ty: u8, p: &[u8]) -> Result<LinkMessage, DecodeError> {
    use msg_type::*;
    let bad = |value: u8| DecodeError::BadPayload { msg_type: ty, value };
    let bin = |b: u8| BinIndex::new(b).ok_or(bad(b));
    Ok(match ty {
        DETECTED => LinkMessage::Detected { class: WasteClass::from_code(p[0]).ok_or(bad(p[0]))? },
        ACK => LinkMessage::Ack { ref_type: p[0] },
        SERVO_DONE => {
            let servo = ServoId::new(p[0]).ok_or(bad(p[0]))?;
            let direction = Direction::from_wire(p[1]).ok_or(bad(p[1]))?;
            LinkMessage::ServoDone { command: ServoCommand { servo, direction } }
        }
        BIN_COUNT => LinkMessage::BinCount { bin: bin(p[0])?, count: u16::from_be_bytes([p[1], p[2]]) },
        LEVEL => LinkMessage::Level { bin: bin(p[0])?, distance_mm: u16::from_be_bytes([p[1], p[2]]) },
        STOP_ALL => LinkMessage::StopAll,
        DUMP => LinkMessage::Dump { bin: bin(p[0])? },
        BELT => match p[0] {
            0 => LinkMessage::Belt { run: false },
            1 => LinkMessage::Belt { run: true },
            v => return Err(bad(v)),
        },
        other => return Err(DecodeError::UnknownType(other)),
    })
}

/// Encodes with the default XOR checksum.
pub fn encode_frame(msg: &LinkMessage) -> Vec<u8> {
    Codec::default().encode(msg)
}

/// Decodes exactly one frame occupying all of `bytes` with the default checksum.
pub fn decode_frame(bytes: &[u8]) -> Result<LinkMessage, DecodeError> {
    let (msg, used) = Codec::default().decode(bytes)?;
    if used != bytes.len() {
        let length = bytes[2];
        return Err(DecodeError::BadLength { msg_type: bytes[1], length });
    }
    Ok(msg)
}

/// An item produced by the stream decoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StreamItem {
    Message(LinkMessage),
    /// A frame was rejected; `skipped` bytes were discarded while resynchronizing.
    Error { error: DecodeError, skipped: usize },
}

/// Incremental decoder that tolerates garbage and split reads.
///
/// After any error it drops the offending SOF byte and scans forward to the
/// next 0xAA, so a valid frame following arbitrary noise is recovered.
#[derive(Debug, Default)]
pub struct StreamDecoder {
    codec: Codec,
    buf: Vec<u8>,
}

impl StreamDecoder {
    pub fn new(codec: Codec) -> Self {
        StreamDecoder { codec, buf: Vec::new() }
    }

    pub fn push(&mut self, bytes: &[u8]) -> Vec<StreamItem> {
        self.buf.extend_from_slice(bytes);
        let mut out = Vec::new();
        let mut pos = 0;
        loop {
            // skip to the next SOF
            match self.buf[pos..].iter().position(|&b| b == SOF) {
                Some(off) => {
                    if off > 0 {
                        out.push(StreamItem::Error {
                            error: DecodeError::BadSof(self.buf[pos]),
                            skipped: off,
                        });
                    }
                    pos += off;
                }
                None => {
                    if pos < self.buf.len() {
                        out.push(StreamItem::Error {
                            error: DecodeError::BadSof(self.buf[pos]),
                            skipped: self.buf.len() - pos,
                        });
                    }
                    pos = self.buf.len();
                    break;
                }
            }
            match self.codec.decode(&self.buf[pos..]) {
                Ok((msg, used)) => {
                    out.push(StreamItem::Message(msg));
                    pos += used;
                }
                Err(DecodeError::Truncated { .. }) => break,
                Err(error) => {
                    out.push(StreamItem::Error { error, skipped: 1 });
                    pos += 1;
                }
            }
        }
        self.buf.drain(..pos);
        out
    }

    /// Bytes held back waiting for the rest of a frame.
    pub fn pending(&self) -> &[u8] {
        &self.buf
    }
}

/// Splits a byte stream into frames for display, one line per frame or error.
pub fn annotate(codec: Codec, bytes: &[u8]) -> Vec<String> {
    let mut lines = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        match bytes[pos..].iter().position(|&b| b == SOF) {
            Some(0) => {}
            Some(off) => {
                lines.push(format!("{:<24} ; skipped {off} byte(s) before SOF", hex(&bytes[pos..pos + off])));
                pos += off;
            }
            None => {
                lines.push(format!("{:<24} ; no frame", hex(&bytes[pos..])));
                break;
            }
        }
        match codec.decode(&bytes[pos..]) {
            Ok((msg, used)) => {
                lines.push(format!("{:<24} ; {msg}", hex(&bytes[pos..pos + used])));
                pos += used;
            }
            Err(e @ DecodeError::Truncated { .. }) => {
                lines.push(format!("{:<24} ; {e}", hex(&bytes[pos..])));
                break;
            }
            Err(e) => {
                lines.push(format!("{:<24} ; {e}", hex(&bytes[pos..pos + 1])));
                pos += 1;
            }
        }
    }
    lines
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02X}")).collect::<Vec<_>>().join(" ")
}

/// Parses whitespace-separated hex bytes such as `AA 06 00 06` or `aa060006`.
pub fn parse_hex(text: &str) -> Result<Vec<u8>, String> {
    let digits: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    if digits.len() % 2 != 0 {
        return Err("odd number of hex digits".into());
    }
    (0..digits.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&digits[i..i + 2], 16)
                .map_err(|_| format!("invalid hex byte `{}`", &digits[i..i + 2]))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bin(i: u8) -> BinIndex {
        BinIndex::new(i).unwrap()
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_frame(&LinkMessage::StopAll), vec![0xAA, 0x06, 0x00, 0x06]);
        assert_eq!(
            encode_frame(&LinkMessage::Detected { class: WasteClass::Plastic }),
            vec![0xAA, 0x01, 0x01, 0x01, 0x01]
        );
        assert_eq!(
            encode_frame(&LinkMessage::BinCount { bin: bin(3), count: 0 }),
            vec![0xAA, 0x04, 0x03, 0x03, 0x00, 0x00, 0x04]
        );
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_frame(&[0xAA, 0x06, 0x00, 0x06]), Ok(LinkMessage::StopAll));
        assert_eq!(
            decode_frame(&[0xAA, 0x06, 0x00, 0x07]),
            Err(DecodeError::BadChecksum { expected: 0x06, found: 0x07 })
        );
        assert!(matches!(decode_frame(&[0x55, 0x06, 0x00, 0x06]), Err(DecodeError::BadSof(0x55))));
        assert!(matches!(decode_frame(&[0xAA, 0x06]), Err(DecodeError::Truncated { .. })));
        assert!(matches!(decode_frame(&[]), Err(DecodeError::Truncated { .. })));
        // unknown type with a valid checksum
        assert_eq!(decode_frame(&[0xAA, 0x09, 0x00, 0x09]), Err(DecodeError::UnknownType(0x09)));
        // length field beyond the maximum
        assert!(matches!(
            decode_frame(&[0xAA, 0x01, 0x11, 0x00]),
            Err(DecodeError::BadLength { length: 0x11, .. })
        ));
        // DETECTED with a class code outside 1..=6
        assert!(matches!(
            decode_frame(&[0xAA, 0x01, 0x01, 0x07, 0x07]),
            Err(DecodeError::BadPayload { value: 0x07, .. })
        ));
    }

    #[test]
    fn multibyte_fields_are_big_endian() {
        let f = encode_frame(&LinkMessage::Level { bin: bin(2), distance_mm: 0x01F4 });
        assert_eq!(&f[3..6], &[0x02, 0x01, 0xF4]);
    }

    #[test]
    fn crc8_variant_round_trips() {
        let codec = Codec::new(ChecksumKind::Crc8);
        // CRC-8/SMBUS check value over "123456789"
        assert_eq!(crc8(b"123456789"), 0xF4);
        let msg = LinkMessage::BinCount { bin: bin(4), count: 513 };
        let bytes = codec.encode(&msg);
        assert_eq!(codec.decode(&bytes), Ok((msg, bytes.len())));
        assert!(Codec::default().decode(&bytes).is_err());
    }

    #[test]
    fn stream_decoder_handles_split_and_garbage() {
        let mut dec = StreamDecoder::default();
        let mut bytes = vec![0x00, 0x13, 0x37];
        bytes.extend(encode_frame(&LinkMessage::Dump { bin: bin(5) }));
        bytes.extend(encode_frame(&LinkMessage::Belt { run: true }));
        let (a, b) = bytes.split_at(5);
        let mut msgs = Vec::new();
        for part in [a, b] {
            for item in dec.push(part) {
                if let StreamItem::Message(m) = item {
                    msgs.push(m);
                }
            }
        }
        assert_eq!(msgs, vec![LinkMessage::Dump { bin: bin(5) }, LinkMessage::Belt { run: true }]);
        assert!(dec.pending().is_empty());
    }

    #[test]
    fn stream_decoder_resyncs_after_bad_frame() {
        let mut dec = StreamDecoder::default();
        let mut bytes = vec![0xAA, 0x06, 0x00, 0x07];
        bytes.extend(encode_frame(&LinkMessage::StopAll));
        let items = dec.push(&bytes);
        assert!(items.iter().any(|i| matches!(i, StreamItem::Error { .. })));
        assert_eq!(items.last(), Some(&StreamItem::Message(LinkMessage::StopAll)));
    }

    #[test]
    fn annotate_marks_frames() {
        let bytes = parse_hex("01 AA 06 00 06 AA 06 00 07").unwrap();
        let lines = annotate(Codec::default(), &bytes);
        assert!(lines[0].contains("skipped 1"));
        assert!(lines[1].starts_with("AA 06 00 06") && lines[1].ends_with("STOP_ALL"));
        assert!(lines[2].contains("bad checksum"));
    }

    #[test]
    fn parse_hex_rejects_junk() {
        assert_eq!(parse_hex("aa0600 06").unwrap(), vec![0xAA, 0x06, 0x00, 0x06]);
        assert!(parse_hex("A").is_err());
        assert!(parse_hex("ZZ").is_err());
    }
}
