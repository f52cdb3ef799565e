//! Frame format and payload grammar shared by device, agent and cloud.
//!
//! Frame: `len(4, BE) || msg_type(1) || header_len(1) || header || body`,
//! where `len` counts everything after itself. Protocol bodies are
//! [`SealedMessage`] bytes whose plaintext starts with the frame's
//! `msg_type`, binding the envelope to its intent.

use std::fmt;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{CryptoError, Nonce, SealedMessage, SymmetricKey, KEY_LEN, NONCE_LEN, TAG_LEN};

pub const MAX_FRAME_LEN: usize = 64 * 1024;
pub const ID_LEN: usize = 12;
pub const PO_LEN: usize = 8;
pub const MAX_CONNECTION_INFO: usize = 512;

/// Marker closing a confirm payload.
pub const SUCCESS_TX: u8 = 0x01;
/// Marker opening a cloud-key request payload.
pub const REQUEST_TX: u8 = 0x02;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("frame too large: {0} bytes")]
    TooLarge(usize),
    #[error("truncated frame")]
    Truncated,
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("bad header for {0:?}")]
    BadHeader(MsgType),
    #[error("payload does not match {0:?} layout")]
    BadPayload(MsgType),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

macro_rules! hex_newtype {
    ($name:ident, $len:expr) => {
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub fn from_slice(b: &[u8]) -> Option<Self> {
                b.try_into().ok().map(Self)
            }

            pub fn from_hex(s: &str) -> Result<Self, String> {
                let v = hex::decode(s.trim()).map_err(|e| e.to_string())?;
                Self::from_slice(&v).ok_or_else(|| format!("expected {} bytes, got {}", $len, v.len()))
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.to_hex())
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                Self::from_hex(&s).map_err(serde::de::Error::custom)
            }
        }
    };
}

hex_newtype!(DeviceId, ID_LEN);
hex_newtype!(ProductOrder, PO_LEN);

impl DeviceId {
    /// Deterministic synthetic chip ID for emulated fleets.
    pub fn synthetic(index: u64) -> Self {
        let mut id = [0u8; ID_LEN];
        id[..4].copy_from_slice(b"STM\x32");
        id[4..].copy_from_slice(&index.to_be_bytes());
        Self(id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeviceIdentity {
    pub id: DeviceId,
    pub po: ProductOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum MsgType {
    AkRequest = 0x01,
    AkResponse = 0x02,
    AkConfirm = 0x03,
    AkAck = 0x04,
    CkRequest = 0x11,
    CkResponse = 0x12,
    CkConfirm = 0x13,
    CkAck = 0x14,
    Error = 0x7F,
}

impl MsgType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0x01 => Self::AkRequest,
            0x02 => Self::AkResponse,
            0x03 => Self::AkConfirm,
            0x04 => Self::AkAck,
            0x11 => Self::CkRequest,
            0x12 => Self::CkResponse,
            0x13 => Self::CkConfirm,
            0x14 => Self::CkAck,
            0x7F => Self::Error,
            _ => return None,
        })
    }
}

/// Error codes carried in unauthenticated `Error` frames. They never carry
/// secrets and do not distinguish between decryption failure causes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum ErrorCode {
    UnknownPo = 1,
    AlreadyProvisioned = 2,
    CloudUnavailable = 3,
    Busy = 4,
    Rejected = 5,
    Revoked = 6,
    Malformed = 7,
    NoSession = 8,
}

impl ErrorCode {
    pub fn from_code(c: u8) -> Self {
        match c {
            1 => Self::UnknownPo,
            2 => Self::AlreadyProvisioned,
            3 => Self::CloudUnavailable,
            4 => Self::Busy,
            6 => Self::Revoked,
            7 => Self::Malformed,
            8 => Self::NoSession,
            _ => Self::Rejected,
        }
    }
}

/// Untyped transport frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u8,
    pub header: Vec<u8>,
    pub body: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: u8, header: Vec<u8>, body: Vec<u8>) -> Self {
        Self { msg_type, header, body }
    }

    /// Bytes after the length prefix.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + self.header.len() + self.body.len());
        out.push(self.msg_type);
        out.push(self.header.len() as u8);
        out.extend_from_slice(&self.header);
        out.extend_from_slice(&self.body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() < 2 {
            return Err(WireError::Truncated);
        }
        let hlen = bytes[1] as usize;
        if bytes.len() < 2 + hlen {
            return Err(WireError::Truncated);
        }
        Ok(Self {
            msg_type: bytes[0],
            header: bytes[2..2 + hlen].to_vec(),
            body: bytes[2 + hlen..].to_vec(),
        })
    }

    /// Full wire encoding including the length prefix.
    pub fn encode(&self) -> Vec<u8> {
        let inner = self.to_bytes();
        let mut out = Vec::with_capacity(4 + inner.len());
        out.extend_from_slice(&(inner.len() as u32).to_be_bytes());
        out.extend_from_slice(&inner);
        out
    }
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<(), WireError> {
    let bytes = frame.encode();
    if bytes.len() - 4 > MAX_FRAME_LEN {
        return Err(WireError::TooLarge(bytes.len() - 4));
    }
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Returns `Ok(None)` on a clean EOF before any byte of a frame.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>, WireError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(WireError::Truncated),
            n => got += n,
        }
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::TooLarge(len));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::Truncated,
        _ => WireError::Io(e),
    })?;
    Frame::from_bytes(&buf).map(Some)
}

/// A device/agent protocol message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolMessage {
    pub msg_type: MsgType,
    pub header: Vec<u8>,
    pub body: Option<SealedMessage>,
}

impl ProtocolMessage {
    pub fn sealed(msg_type: MsgType, header: Vec<u8>, body: SealedMessage) -> Self {
        Self { msg_type, header, body: Some(body) }
    }

    pub fn error(code: ErrorCode) -> Self {
        Self { msg_type: MsgType::Error, header: vec![code as u8], body: None }
    }

    pub fn error_code(&self) -> Option<ErrorCode> {
        (self.msg_type == MsgType::Error).then(|| ErrorCode::from_code(self.header.first().copied().unwrap_or(0)))
    }

    pub fn to_frame(&self) -> Frame {
        Frame::new(
            self.msg_type.code(),
            self.header.clone(),
            self.body.as_ref().map(SealedMessage::to_bytes).unwrap_or_default(),
        )
    }

    pub fn from_frame(frame: &Frame) -> Result<Self, WireError> {
        let msg_type = MsgType::from_code(frame.msg_type).ok_or(WireError::UnknownType(frame.msg_type))?;
        let body = if frame.body.is_empty() { None } else { Some(SealedMessage::from_bytes(&frame.body)?) };
        Ok(Self { msg_type, header: frame.header.clone(), body })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_frame().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        Self::from_frame(&Frame::from_bytes(bytes)?)
    }
}

/// Headers per message type.
pub mod header {
    use super::*;

    pub fn ak_request(po: ProductOrder, rotating: Option<DeviceId>) -> Vec<u8> {
        let mut h = po.0.to_vec();
        if let Some(id) = rotating {
            h.extend_from_slice(&id.0);
        }
        h
    }

    /// `(po, Some(id))` for a rotation request, `(po, None)` for first issue.
    pub fn parse_ak_request(h: &[u8]) -> Result<(ProductOrder, Option<DeviceId>), WireError> {
        match h.len() {
            PO_LEN => Ok((ProductOrder::from_slice(h).expect("len checked"), None)),
            n if n == PO_LEN + ID_LEN => Ok((
                ProductOrder::from_slice(&h[..PO_LEN]).expect("len checked"),
                DeviceId::from_slice(&h[PO_LEN..]),
            )),
            _ => Err(WireError::BadHeader(MsgType::AkRequest)),
        }
    }

    pub fn id(id: DeviceId) -> Vec<u8> {
        id.0.to_vec()
    }

    pub fn parse_id(t: MsgType, h: &[u8]) -> Result<DeviceId, WireError> {
        DeviceId::from_slice(h).ok_or(WireError::BadHeader(t))
    }
}

fn take<'a>(buf: &mut &'a [u8], n: usize, t: MsgType) -> Result<&'a [u8], WireError> {
    if buf.len() < n {
        return Err(WireError::BadPayload(t));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn nonce(buf: &mut &[u8], t: MsgType) -> Result<Nonce, WireError> {
    Ok(Nonce::from_slice(take(buf, NONCE_LEN, t)?).expect("len checked"))
}

fn key(buf: &mut &[u8], t: MsgType) -> Result<SymmetricKey, WireError> {
    Ok(SymmetricKey::from_slice(take(buf, KEY_LEN, t)?).expect("len checked"))
}

fn open_payload(t: MsgType, plain: &[u8]) -> Result<&[u8], WireError> {
    match plain.split_first() {
        Some((&code, rest)) if code == t.code() => Ok(rest),
        _ => Err(WireError::BadPayload(t)),
    }
}

fn finish(buf: &[u8], t: MsgType) -> Result<(), WireError> {
    if buf.is_empty() {
        Ok(())
    } else {
        Err(WireError::BadPayload(t))
    }
}

/// `type || id || nonce1`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AkRequestPayload {
    pub id: DeviceId,
    pub nonce1: Nonce,
}

impl AkRequestPayload {
    const T: MsgType = MsgType::AkRequest;

    pub fn encode(&self) -> Vec<u8> {
        [&[Self::T.code()][..], &self.id.0, &self.nonce1.0].concat()
    }

    pub fn decode(plain: &[u8]) -> Result<Self, WireError> {
        let mut b = open_payload(Self::T, plain)?;
        let id = DeviceId::from_slice(take(&mut b, ID_LEN, Self::T)?).expect("len checked");
        let nonce1 = nonce(&mut b, Self::T)?;
        finish(b, Self::T)?;
        Ok(Self { id, nonce1 })
    }
}

/// `type || ak || nonce1 || nonce2`; travels with `HMAC(ak, ak || nonce1 || nonce2)`
/// in the frame header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AkResponsePayload {
    pub ak: SymmetricKey,
    pub nonce1: Nonce,
    pub nonce2: Nonce,
}

impl AkResponsePayload {
    const T: MsgType = MsgType::AkResponse;

    pub fn encode(&self) -> Vec<u8> {
        [&[Self::T.code()][..], self.ak.as_bytes(), &self.nonce1.0, &self.nonce2.0].concat()
    }

    pub fn decode(plain: &[u8]) -> Result<Self, WireError> {
        let mut b = open_payload(Self::T, plain)?;
        let ak = key(&mut b, Self::T)?;
        let nonce1 = nonce(&mut b, Self::T)?;
        let nonce2 = nonce(&mut b, Self::T)?;
        finish(b, Self::T)?;
        Ok(Self { ak, nonce1, nonce2 })
    }

    /// The fields covered by the agent-key HMAC.
    pub fn mac_input(&self) -> Vec<u8> {
        [&self.ak.as_bytes()[..], &self.nonce1.0, &self.nonce2.0].concat()
    }

    pub fn parse_mac_header(h: &[u8]) -> Result<[u8; TAG_LEN], WireError> {
        h.try_into().map_err(|_| WireError::BadHeader(Self::T))
    }
}

/// `type || nonce2 || nonce3 || successTX`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AkConfirmPayload {
    pub nonce2: Nonce,
    pub nonce3: Nonce,
}

impl AkConfirmPayload {
    const T: MsgType = MsgType::AkConfirm;

    pub fn encode(&self) -> Vec<u8> {
        [&[Self::T.code()][..], &self.nonce2.0, &self.nonce3.0, &[SUCCESS_TX]].concat()
    }

    pub fn decode(plain: &[u8]) -> Result<Self, WireError> {
        let mut b = open_payload(Self::T, plain)?;
        let nonce2 = nonce(&mut b, Self::T)?;
        let nonce3 = nonce(&mut b, Self::T)?;
        if take(&mut b, 1, Self::T)? != [SUCCESS_TX] {
            return Err(WireError::BadPayload(Self::T));
        }
        finish(b, Self::T)?;
        Ok(Self { nonce2, nonce3 })
    }
}

/// `type || requestTX || nonce1`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CkRequestPayload {
    pub nonce1: Nonce,
}

impl CkRequestPayload {
    const T: MsgType = MsgType::CkRequest;

    pub fn encode(&self) -> Vec<u8> {
        [&[Self::T.code(), REQUEST_TX][..], &self.nonce1.0].concat()
    }

    pub fn decode(plain: &[u8]) -> Result<Self, WireError> {
        let mut b = open_payload(Self::T, plain)?;
        if take(&mut b, 1, Self::T)? != [REQUEST_TX] {
            return Err(WireError::BadPayload(Self::T));
        }
        let nonce1 = nonce(&mut b, Self::T)?;
        finish(b, Self::T)?;
        Ok(Self { nonce1 })
    }
}

/// `type || cloud_key || len(2, BE) || connection_info || nonce1 || nonce2`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CkResponsePayload {
    pub cloud_key: SymmetricKey,
    pub connection_info: Vec<u8>,
    pub nonce1: Nonce,
    pub nonce2: Nonce,
}

impl CkResponsePayload {
    const T: MsgType = MsgType::CkResponse;

    pub fn encode(&self) -> Vec<u8> {
        let len = (self.connection_info.len() as u16).to_be_bytes();
        [
            &[Self::T.code()][..],
            self.cloud_key.as_bytes(),
            &len,
            &self.connection_info,
            &self.nonce1.0,
            &self.nonce2.0,
        ]
        .concat()
    }

    pub fn decode(plain: &[u8]) -> Result<Self, WireError> {
        let mut b = open_payload(Self::T, plain)?;
        let cloud_key = key(&mut b, Self::T)?;
        let len = u16::from_be_bytes(take(&mut b, 2, Self::T)?.try_into().expect("len checked")) as usize;
        if len > MAX_CONNECTION_INFO {
            return Err(WireError::BadPayload(Self::T));
        }
        let connection_info = take(&mut b, len, Self::T)?.to_vec();
        let nonce1 = nonce(&mut b, Self::T)?;
        let nonce2 = nonce(&mut b, Self::T)?;
        finish(b, Self::T)?;
        Ok(Self { cloud_key, connection_info, nonce1, nonce2 })
    }
}

/// `type || successTX || nonce2 || nonce3`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CkConfirmPayload {
    pub nonce2: Nonce,
    pub nonce3: Nonce,
}

impl CkConfirmPayload {
    const T: MsgType = MsgType::CkConfirm;

    pub fn encode(&self) -> Vec<u8> {
        [&[Self::T.code(), SUCCESS_TX][..], &self.nonce2.0, &self.nonce3.0].concat()
    }

    pub fn decode(plain: &[u8]) -> Result<Self, WireError> {
        let mut b = open_payload(Self::T, plain)?;
        if take(&mut b, 1, Self::T)? != [SUCCESS_TX] {
            return Err(WireError::BadPayload(Self::T));
        }
        let nonce2 = nonce(&mut b, Self::T)?;
        let nonce3 = nonce(&mut b, Self::T)?;
        finish(b, Self::T)?;
        Ok(Self { nonce2, nonce3 })
    }
}

/// `type || nonce3` for both acknowledgement types.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AckPayload {
    pub nonce3: Nonce,
}

impl AckPayload {
    pub fn encode(&self, t: MsgType) -> Vec<u8> {
        [&[t.code()][..], &self.nonce3.0].concat()
    }

    pub fn decode(t: MsgType, plain: &[u8]) -> Result<Self, WireError> {
        let mut b = open_payload(t, plain)?;
        let nonce3 = nonce(&mut b, t)?;
        finish(b, t)?;
        Ok(Self { nonce3 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{seal, KeyRng};
    use proptest::prelude::*;

    #[test]
    fn frame_layout_is_length_type_header_body() {
        let f = Frame::new(0x03, vec![0xAA, 0xBB], vec![1, 2, 3]);
        assert_eq!(f.encode(), vec![0, 0, 0, 7, 0x03, 2, 0xAA, 0xBB, 1, 2, 3]);
        let mut cur = std::io::Cursor::new(f.encode());
        assert_eq!(read_frame(&mut cur).unwrap().unwrap(), f);
        assert!(read_frame(&mut cur).unwrap().is_none());
    }

    #[test]
    fn oversized_and_truncated_frames_rejected() {
        let mut big = (MAX_FRAME_LEN as u32 + 1).to_be_bytes().to_vec();
        big.extend([0; 8]);
        assert!(matches!(read_frame(&mut big.as_slice()), Err(WireError::TooLarge(_))));
        let short = [0, 0, 0, 9, 1, 0];
        assert!(matches!(read_frame(&mut &short[..]), Err(WireError::Truncated)));
    }

    #[test]
    fn payload_field_order() {
        let n = |b: u8| Nonce([b; 16]);
        let id = DeviceId([7; 12]);
        let p = AkRequestPayload { id, nonce1: n(1) }.encode();
        assert_eq!(p.len(), 1 + 12 + 16);
        assert_eq!(p[0], MsgType::AkRequest.code());
        assert_eq!(&p[1..13], &[7; 12]);

        let ak = SymmetricKey::from_bytes([9; 16]);
        let p = AkResponsePayload { ak, nonce1: n(1), nonce2: n(2) }.encode();
        assert_eq!(&p[1..17], &[9; 16]);
        assert_eq!(&p[17..33], &[1; 16]);
        assert_eq!(&p[33..49], &[2; 16]);

        let p = AkConfirmPayload { nonce2: n(2), nonce3: n(3) }.encode();
        assert_eq!(p.last(), Some(&SUCCESS_TX));
        assert_eq!(&p[1..17], &[2; 16]);

        let p = CkRequestPayload { nonce1: n(4) }.encode();
        assert_eq!(&p[..2], &[MsgType::CkRequest.code(), REQUEST_TX]);

        let p = CkResponsePayload { cloud_key: ak, connection_info: b"abc".to_vec(), nonce1: n(1), nonce2: n(2) }.encode();
        assert_eq!(&p[17..19], &[0, 3]);
        assert_eq!(&p[19..22], b"abc");

        let p = CkConfirmPayload { nonce2: n(2), nonce3: n(3) }.encode();
        assert_eq!(&p[..2], &[MsgType::CkConfirm.code(), SUCCESS_TX]);
    }

    #[test]
    fn payload_type_binding_is_enforced() {
        let confirm = AkConfirmPayload { nonce2: Nonce([2; 16]), nonce3: Nonce([3; 16]) }.encode();
        assert!(AckPayload::decode(MsgType::AkAck, &confirm).is_err());
        let mut wrong_marker = confirm.clone();
        *wrong_marker.last_mut().unwrap() = 0x00;
        assert!(AkConfirmPayload::decode(&wrong_marker).is_err());
        let mut trailing = confirm;
        trailing.push(0);
        assert!(AkConfirmPayload::decode(&trailing).is_err());
    }

    #[test]
    fn oversize_connection_info_rejected() {
        let p = CkResponsePayload {
            cloud_key: SymmetricKey::from_bytes([1; 16]),
            connection_info: vec![b'x'; MAX_CONNECTION_INFO + 1],
            nonce1: Nonce([0; 16]),
            nonce2: Nonce([0; 16]),
        };
        assert!(CkResponsePayload::decode(&p.encode()).is_err());
    }

    #[test]
    fn ak_request_header_variants() {
        let po = ProductOrder([1; 8]);
        let id = DeviceId([2; 12]);
        assert_eq!(header::parse_ak_request(&header::ak_request(po, None)).unwrap(), (po, None));
        assert_eq!(header::parse_ak_request(&header::ak_request(po, Some(id))).unwrap(), (po, Some(id)));
        assert!(header::parse_ak_request(&[0; 5]).is_err());
    }

    #[test]
    fn error_frames_carry_only_a_code() {
        let m = ProtocolMessage::error(ErrorCode::AlreadyProvisioned);
        let back = ProtocolMessage::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back.error_code(), Some(ErrorCode::AlreadyProvisioned));
        assert!(back.body.is_none());
    }

    proptest! {
        #[test]
        fn protocol_message_survives_framing(seed in any::<u64>(), hdr in proptest::collection::vec(any::<u8>(), 0..40), m in proptest::collection::vec(any::<u8>(), 0..200)) {
            let mut rng = KeyRng::from_seed(seed);
            let k = rng.key();
            let msg = ProtocolMessage::sealed(MsgType::CkResponse, hdr, seal(&k, &m, &mut rng).unwrap());
            let mut buf = Vec::new();
            write_frame(&mut buf, &msg.to_frame()).unwrap();
            let frame = read_frame(&mut buf.as_slice()).unwrap().unwrap();
            prop_assert_eq!(ProtocolMessage::from_frame(&frame).unwrap(), msg);
        }
    }
}
