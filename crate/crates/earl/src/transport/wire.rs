//! The framed wire format.
//!
//! Every message is one frame, integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "EARL"
//! 4       1     version (0x01)
//! 5       1     frame type (data 0x01, barrier 0x02, done 0x03, error 0x04)
//! 6       4     header_len u32
//! 10      8     payload_len u64
//! 18      ..    header (header_len bytes)
//! 18+h    ..    payload (payload_len bytes)
//! ```
//!
//! The header is step_id u64, name_len u32, the UTF-8 tensor name, then
//! src u32, dst u32, row_start u64, row_end u64, row_bytes u64, so
//! `header_len == 44 + name_len`. A data frame's payload is exactly
//! `(row_end - row_start) * row_bytes` bytes of row data; barrier and
//! done frames carry no payload; an error frame's payload is a UTF-8
//! message. Lengths are capped so a corrupted length field can never
//! commit the reader to an absurd allocation, and [`decode`] insists on
//! consuming its input exactly.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"EARL";
pub const VERSION: u8 = 0x01;
/// Preamble bytes before the variable-length header.
pub const PREAMBLE_LEN: usize = 18;
/// Fixed header bytes around the variable-length tensor name.
pub const HEADER_FIXED_LEN: u32 = 44;
pub const MAX_HEADER_LEN: u32 = 64 * 1024;
pub const MAX_PAYLOAD_LEN: u64 = 1 << 30;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("bad magic byte {found:#04x} at frame offset {offset}")]
    BadMagic { offset: usize, found: u8 },
    #[error("unsupported wire version {found:#04x}")]
    BadVersion { found: u8 },
    #[error("unknown frame type {found:#04x}")]
    UnknownFrameType { found: u8 },
    #[error("header length {len} exceeds the {MAX_HEADER_LEN}-byte cap")]
    OversizedHeader { len: u32 },
    #[error("payload length {len} exceeds the {MAX_PAYLOAD_LEN}-byte cap")]
    OversizedPayload { len: u64 },
    #[error("header length {len} does not match its fields ({want} bytes)")]
    HeaderSizeMismatch { len: u32, want: u64 },
    #[error("tensor name is not valid UTF-8")]
    BadTensorName,
    #[error("row range [{start}, {end}) is invalid")]
    BadRowRange { start: u64, end: u64 },
    #[error("{frame_type:?} frame carries {payload_len} payload bytes, expected {expected}")]
    PayloadMismatch {
        frame_type: FrameType,
        payload_len: u64,
        expected: u64,
    },
    #[error("frame truncated at offset {offset}")]
    Truncated { offset: usize },
    #[error("frame has {extra} trailing bytes")]
    TrailingBytes { extra: usize },
    #[error("error frame message is not valid UTF-8")]
    BadErrorMessage,
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameType {
    Data = 0x01,
    Barrier = 0x02,
    Done = 0x03,
    Error = 0x04,
}

impl FrameType {
    fn from_byte(b: u8) -> Result<Self, WireError> {
        match b {
            0x01 => Ok(FrameType::Data),
            0x02 => Ok(FrameType::Barrier),
            0x03 => Ok(FrameType::Done),
            0x04 => Ok(FrameType::Error),
            found => Err(WireError::UnknownFrameType { found }),
        }
    }
}

/// Routing metadata carried by every frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameHeader {
    pub step_id: u64,
    pub tensor_name: String,
    pub src: u32,
    pub dst: u32,
    pub row_start: u64,
    pub row_end: u64,
    pub row_bytes: u64,
}

impl FrameHeader {
    pub fn control(step_id: u64, tag: &str, src: u32, dst: u32) -> Self {
        FrameHeader {
            step_id,
            tensor_name: tag.to_string(),
            src,
            dst,
            row_start: 0,
            row_end: 0,
            row_bytes: 0,
        }
    }

    pub fn rows(&self) -> u64 {
        self.row_end - self.row_start
    }

    fn encoded_len(&self) -> u64 {
        HEADER_FIXED_LEN as u64 + self.tensor_name.len() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub frame_type: FrameType,
    pub header: FrameHeader,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn data(header: FrameHeader, payload: Vec<u8>) -> Self {
        Frame {
            frame_type: FrameType::Data,
            header,
            payload,
        }
    }

    pub fn barrier(step_id: u64, tag: &str, src: u32, dst: u32) -> Self {
        Frame {
            frame_type: FrameType::Barrier,
            header: FrameHeader::control(step_id, tag, src, dst),
            payload: Vec::new(),
        }
    }

    pub fn done(src: u32, dst: u32) -> Self {
        Frame {
            frame_type: FrameType::Done,
            header: FrameHeader::control(0, "", src, dst),
            payload: Vec::new(),
        }
    }

    pub fn error(src: u32, dst: u32, message: &str) -> Self {
        Frame {
            frame_type: FrameType::Error,
            header: FrameHeader::control(0, "", src, dst),
            payload: message.as_bytes().to_vec(),
        }
    }

    /// Expected payload length for the frame's type, if the type
    /// constrains it.
    fn expected_payload_len(
        frame_type: FrameType,
        header: &FrameHeader,
    ) -> Result<Option<u64>, WireError> {
        match frame_type {
            FrameType::Data => {
                let expected = header
                    .rows()
                    .checked_mul(header.row_bytes)
                    .ok_or(WireError::OversizedPayload { len: u64::MAX })?;
                Ok(Some(expected))
            }
            FrameType::Barrier | FrameType::Done => Ok(Some(0)),
            FrameType::Error => Ok(None),
        }
    }

    fn validate(&self) -> Result<(), WireError> {
        if self.header.row_end < self.header.row_start {
            return Err(WireError::BadRowRange {
                start: self.header.row_start,
                end: self.header.row_end,
            });
        }
        if self.header.encoded_len() > MAX_HEADER_LEN as u64 {
            return Err(WireError::OversizedHeader {
                len: self.header.encoded_len() as u32,
            });
        }
        if self.payload.len() as u64 > MAX_PAYLOAD_LEN {
            return Err(WireError::OversizedPayload {
                len: self.payload.len() as u64,
            });
        }
        if let Some(expected) = Self::expected_payload_len(self.frame_type, &self.header)? {
            if self.payload.len() as u64 != expected {
                return Err(WireError::PayloadMismatch {
                    frame_type: self.frame_type,
                    payload_len: self.payload.len() as u64,
                    expected,
                });
            }
        }
        if self.frame_type == FrameType::Error && std::str::from_utf8(&self.payload).is_err() {
            return Err(WireError::BadErrorMessage);
        }
        Ok(())
    }

    /// Preamble plus header bytes; a data payload can then be streamed
    /// behind them.
    pub fn encode_prefix(
        frame_type: FrameType,
        header: &FrameHeader,
        payload_len: u64,
    ) -> Result<Vec<u8>, WireError> {
        let header_len = header.encoded_len();
        if header_len > MAX_HEADER_LEN as u64 {
            return Err(WireError::OversizedHeader {
                len: header_len as u32,
            });
        }
        if payload_len > MAX_PAYLOAD_LEN {
            return Err(WireError::OversizedPayload { len: payload_len });
        }
        let mut out = Vec::with_capacity(PREAMBLE_LEN + header_len as usize);
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(frame_type as u8);
        out.extend_from_slice(&(header_len as u32).to_le_bytes());
        out.extend_from_slice(&payload_len.to_le_bytes());
        out.extend_from_slice(&header.step_id.to_le_bytes());
        out.extend_from_slice(&(header.tensor_name.len() as u32).to_le_bytes());
        out.extend_from_slice(header.tensor_name.as_bytes());
        out.extend_from_slice(&header.src.to_le_bytes());
        out.extend_from_slice(&header.dst.to_le_bytes());
        out.extend_from_slice(&header.row_start.to_le_bytes());
        out.extend_from_slice(&header.row_end.to_le_bytes());
        out.extend_from_slice(&header.row_bytes.to_le_bytes());
        Ok(out)
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        self.validate()?;
        let mut out =
            Self::encode_prefix(self.frame_type, &self.header, self.payload.len() as u64)?;
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), WireError> {
        w.write_all(&self.encode()?)?;
        Ok(())
    }
}

fn le_u32(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(buf[at..at + 4].try_into().unwrap())
}

fn le_u64(buf: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(buf[at..at + 8].try_into().unwrap())
}

struct Preamble {
    frame_type: FrameType,
    header_len: u32,
    payload_len: u64,
}

fn parse_preamble(buf: &[u8; PREAMBLE_LEN]) -> Result<Preamble, WireError> {
    for (offset, (&got, &want)) in buf.iter().zip(MAGIC.iter()).enumerate() {
        if got != want {
            return Err(WireError::BadMagic { offset, found: got });
        }
    }
    if buf[4] != VERSION {
        return Err(WireError::BadVersion { found: buf[4] });
    }
    let frame_type = FrameType::from_byte(buf[5])?;
    let header_len = le_u32(buf, 6);
    if header_len > MAX_HEADER_LEN {
        return Err(WireError::OversizedHeader { len: header_len });
    }
    let payload_len = le_u64(buf, 10);
    if payload_len > MAX_PAYLOAD_LEN {
        return Err(WireError::OversizedPayload { len: payload_len });
    }
    Ok(Preamble {
        frame_type,
        header_len,
        payload_len,
    })
}

fn parse_header(buf: &[u8]) -> Result<FrameHeader, WireError> {
    let len = buf.len() as u32;
    if len < HEADER_FIXED_LEN {
        return Err(WireError::HeaderSizeMismatch {
            len,
            want: HEADER_FIXED_LEN as u64,
        });
    }
    let step_id = le_u64(buf, 0);
    let name_len = le_u32(buf, 8) as u64;
    let want = HEADER_FIXED_LEN as u64 + name_len;
    if len as u64 != want {
        return Err(WireError::HeaderSizeMismatch { len, want });
    }
    let name_end = 12 + name_len as usize;
    let tensor_name = std::str::from_utf8(&buf[12..name_end])
        .map_err(|_| WireError::BadTensorName)?
        .to_string();
    Ok(FrameHeader {
        step_id,
        tensor_name,
        src: le_u32(buf, name_end),
        dst: le_u32(buf, name_end + 4),
        row_start: le_u64(buf, name_end + 8),
        row_end: le_u64(buf, name_end + 16),
        row_bytes: le_u64(buf, name_end + 24),
    })
}

/// Decodes one frame from a byte slice, consuming it exactly.
pub fn decode(buf: &[u8]) -> Result<Frame, WireError> {
    if buf.len() < PREAMBLE_LEN {
        return Err(WireError::Truncated { offset: buf.len() });
    }
    let preamble: &[u8; PREAMBLE_LEN] = buf[..PREAMBLE_LEN].try_into().unwrap();
    let p = parse_preamble(preamble)?;
    let total = PREAMBLE_LEN as u64 + p.header_len as u64 + p.payload_len;
    if (buf.len() as u64) < total {
        return Err(WireError::Truncated { offset: buf.len() });
    }
    if buf.len() as u64 > total {
        return Err(WireError::TrailingBytes {
            extra: (buf.len() as u64 - total) as usize,
        });
    }
    let header_end = PREAMBLE_LEN + p.header_len as usize;
    let header = parse_header(&buf[PREAMBLE_LEN..header_end])?;
    let frame = Frame {
        frame_type: p.frame_type,
        header,
        payload: buf[header_end..].to_vec(),
    };
    frame.validate()?;
    Ok(frame)
}

/// Reads one frame from a stream. `Ok(None)` means the stream ended
/// cleanly before any frame byte; ending mid-frame is an error.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>, WireError> {
    let mut preamble = [0u8; PREAMBLE_LEN];
    let mut filled = 0;
    while filled < PREAMBLE_LEN {
        let n = r.read(&mut preamble[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(WireError::Truncated { offset: filled });
        }
        filled += n;
    }
    let p = parse_preamble(&preamble)?;
    let mut header_buf = vec![0u8; p.header_len as usize];
    r.read_exact(&mut header_buf)?;
    let header = parse_header(&header_buf)?;
    let mut payload = vec![0u8; p.payload_len as usize];
    r.read_exact(&mut payload)?;
    let frame = Frame {
        frame_type: p.frame_type,
        header,
        payload,
    };
    frame.validate()?;
    Ok(Some(frame))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_data_frame() -> Frame {
        Frame::data(
            FrameHeader {
                step_id: 7,
                tensor_name: "log_probs".into(),
                src: 2,
                dst: 5,
                row_start: 8,
                row_end: 12,
                row_bytes: 3,
            },
            (0..12).collect(),
        )
    }

    #[test]
    fn golden_frame_layout() {
        let bytes = sample_data_frame().encode().unwrap();
        assert_eq!(&bytes[0..4], b"EARL");
        assert_eq!(bytes[4], 0x01);
        assert_eq!(bytes[5], 0x01);
        // header_len = 44 + "log_probs".len() = 53
        assert_eq!(le_u32(&bytes, 6), 53);
        assert_eq!(le_u64(&bytes, 10), 12);
        assert_eq!(le_u64(&bytes, 18), 7);
        assert_eq!(le_u32(&bytes, 26), 9);
        assert_eq!(&bytes[30..39], b"log_probs");
        assert_eq!(le_u32(&bytes, 39), 2);
        assert_eq!(le_u32(&bytes, 43), 5);
        assert_eq!(le_u64(&bytes, 47), 8);
        assert_eq!(le_u64(&bytes, 55), 12);
        assert_eq!(le_u64(&bytes, 63), 3);
        assert_eq!(bytes.len(), 18 + 53 + 12);
    }

    #[test]
    fn roundtrip_all_frame_types() {
        let frames = [
            sample_data_frame(),
            Frame::barrier(3, "@barrier", 1, 0),
            Frame::done(4, 0),
            Frame::error(2, 0, "worker 2 lost a row"),
        ];
        for f in frames {
            let bytes = f.encode().unwrap();
            assert_eq!(decode(&bytes).unwrap(), f);
            let mut cursor = std::io::Cursor::new(bytes);
            assert_eq!(read_frame(&mut cursor).unwrap().unwrap(), f);
            assert!(read_frame(&mut cursor).unwrap().is_none());
        }
    }

    #[test]
    fn data_payload_must_match_rows() {
        let mut f = sample_data_frame();
        f.payload.pop();
        assert!(matches!(
            f.encode(),
            Err(WireError::PayloadMismatch { expected: 12, .. })
        ));
    }

    #[test]
    fn corrupting_any_protected_preamble_byte_rejects() {
        let bytes = sample_data_frame().encode().unwrap();
        // Everything except the frame-type byte at offset 5: magic,
        // version, header_len, payload_len.
        let protected: Vec<usize> = (0..5).chain(6..18).collect();
        for &offset in &protected {
            for delta in 1..=255u8 {
                let mut bad = bytes.clone();
                bad[offset] = bad[offset].wrapping_add(delta);
                assert!(
                    decode(&bad).is_err(),
                    "offset {offset} delta {delta} decoded"
                );
            }
        }
    }

    #[test]
    fn truncation_and_trailing_bytes_reject() {
        let bytes = sample_data_frame().encode().unwrap();
        for cut in 0..bytes.len() {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut} decoded");
        }
        let mut extended = bytes.clone();
        extended.push(0);
        assert!(matches!(
            decode(&extended),
            Err(WireError::TrailingBytes { extra: 1 })
        ));
    }

    #[test]
    fn caps_are_enforced() {
        let mut bytes = sample_data_frame().encode().unwrap();
        bytes[6..10].copy_from_slice(&(MAX_HEADER_LEN + 1).to_le_bytes());
        assert!(matches!(decode(&bytes), Err(WireError::OversizedHeader { .. })));
        let mut bytes = sample_data_frame().encode().unwrap();
        bytes[10..18].copy_from_slice(&(MAX_PAYLOAD_LEN + 1).to_le_bytes());
        assert!(matches!(decode(&bytes), Err(WireError::OversizedPayload { .. })));
    }

    #[test]
    fn bad_magic_names_the_offset() {
        let mut bytes = sample_data_frame().encode().unwrap();
        bytes[2] ^= 0xff;
        match decode(&bytes) {
            Err(WireError::BadMagic { offset: 2, .. }) => {}
            other => panic!("expected BadMagic at offset 2, got {other:?}"),
        }
    }

    #[test]
    fn error_frames_require_utf8() {
        let mut bytes = Frame::error(1, 0, "xx").encode().unwrap();
        let n = bytes.len();
        bytes[n - 2] = 0xff;
        bytes[n - 1] = 0xfe;
        assert!(matches!(decode(&bytes), Err(WireError::BadErrorMessage)));
    }

    fn arb_frame() -> impl Strategy<Value = Frame> {
        let name = proptest::string::string_regex("[a-z_]{0,12}").unwrap();
        (
            0u8..4,
            any::<u64>(),
            name,
            any::<u32>(),
            any::<u32>(),
            0u64..1_000,
            0u64..16,
            0u64..64,
            proptest::string::string_regex("[ -~]{0,40}").unwrap(),
        )
            .prop_map(|(kind, step, name, src, dst, start, rows, row_bytes, msg)| {
                let header = FrameHeader {
                    step_id: step,
                    tensor_name: name,
                    src,
                    dst,
                    row_start: start,
                    row_end: start + rows,
                    row_bytes,
                };
                match kind {
                    0 => {
                        let payload = vec![0xabu8; (rows * row_bytes) as usize];
                        Frame::data(header, payload)
                    }
                    1 => Frame {
                        frame_type: FrameType::Barrier,
                        header: FrameHeader { row_start: 0, row_end: 0, row_bytes: 0, ..header },
                        payload: Vec::new(),
                    },
                    2 => Frame {
                        frame_type: FrameType::Done,
                        header: FrameHeader { row_start: 0, row_end: 0, row_bytes: 0, ..header },
                        payload: Vec::new(),
                    },
                    _ => Frame {
                        frame_type: FrameType::Error,
                        header: FrameHeader { row_start: 0, row_end: 0, row_bytes: 0, ..header },
                        payload: msg.into_bytes(),
                    },
                }
            })
    }

    proptest! {
        #[test]
        fn random_frames_roundtrip(f in arb_frame()) {
            let bytes = f.encode().unwrap();
            prop_assert_eq!(decode(&bytes).unwrap(), f);
        }
    }
}
