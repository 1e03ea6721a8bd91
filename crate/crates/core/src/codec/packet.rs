//! Simplified 188-octet transport packet: a 4-octet header and a fixed
//! 184-octet payload. Header layout:
//!
//! ```text
//! byte 0        sync, always 0x47
//! byte 1        bits 4..0 = pid[12..8], bits 7..5 reserved zero
//! byte 2        pid[7..0]
//! byte 3        bits 7..6 = scrambling control, bits 5..4 reserved zero,
//!               bits 3..0 = continuity counter
//! ```

use super::CodecError;

pub const PACKET_LEN: usize = 188;
pub const PAYLOAD_LEN: usize = 184;
pub const SYNC_BYTE: u8 = 0x47;

const PID_MAX: u16 = 0x1FFF;

/// Scrambling state signalled in the packet header. `01` is reserved and
/// never valid on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScramblingControl {
    Clear,
    EvenKey,
    OddKey,
}

impl ScramblingControl {
    pub fn bits(self) -> u8 {
        match self {
            Self::Clear => 0b00,
            Self::EvenKey => 0b10,
            Self::OddKey => 0b11,
        }
    }

    pub fn from_bits(bits: u8) -> Result<Self, CodecError> {
        match bits {
            0b00 => Ok(Self::Clear),
            0b10 => Ok(Self::EvenKey),
            0b11 => Ok(Self::OddKey),
            _ => Err(CodecError::Format {
                what: "reserved scrambling control 01",
            }),
        }
    }

    pub fn from_parity(parity: crate::keys::Parity) -> Self {
        match parity {
            crate::keys::Parity::Even => Self::EvenKey,
            crate::keys::Parity::Odd => Self::OddKey,
        }
    }

    pub fn parity(self) -> Option<crate::keys::Parity> {
        match self {
            Self::Clear => None,
            Self::EvenKey => Some(crate::keys::Parity::Even),
            Self::OddKey => Some(crate::keys::Parity::Odd),
        }
    }
}

/// A transport packet. `pid` is 13 bits and `continuity` 4 bits; encoding
/// rejects out-of-range values.
#[derive(Clone, PartialEq, Eq)]
pub struct TsPacket {
    pub pid: u16,
    pub scrambling_control: ScramblingControl,
    pub continuity: u8,
    pub payload: [u8; PAYLOAD_LEN],
}

impl TsPacket {
    /// A clear packet with the payload copied in and zero-padded.
    pub fn clear(pid: u16, continuity: u8, body: &[u8]) -> Result<Self, CodecError> {
        if body.len() > PAYLOAD_LEN {
            return Err(CodecError::Length {
                what: "packet payload",
                expected: PAYLOAD_LEN,
                actual: body.len(),
            });
        }
        let mut payload = [0u8; PAYLOAD_LEN];
        payload[..body.len()].copy_from_slice(body);
        Ok(Self {
            pid,
            scrambling_control: ScramblingControl::Clear,
            continuity,
            payload,
        })
    }
}

impl std::fmt::Debug for TsPacket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TsPacket")
            .field("pid", &self.pid)
            .field("scrambling_control", &self.scrambling_control)
            .field("continuity", &self.continuity)
            .finish_non_exhaustive()
    }
}

pub fn encode_packet(p: &TsPacket) -> Result<[u8; PACKET_LEN], CodecError> {
    if p.pid > PID_MAX {
        return Err(CodecError::Format { what: "pid exceeds 13 bits" });
    }
    if p.continuity > 0x0F {
        return Err(CodecError::Format {
            what: "continuity exceeds 4 bits",
        });
    }
    let mut out = [0u8; PACKET_LEN];
    out[0] = SYNC_BYTE;
    out[1] = (p.pid >> 8) as u8;
    out[2] = (p.pid & 0xFF) as u8;
    out[3] = (p.scrambling_control.bits() << 6) | p.continuity;
    out[4..].copy_from_slice(&p.payload);
    Ok(out)
}

pub fn decode_packet(bytes: &[u8]) -> Result<TsPacket, CodecError> {
    if bytes.len() != PACKET_LEN {
        return Err(CodecError::Length {
            what: "packet",
            expected: PACKET_LEN,
            actual: bytes.len(),
        });
    }
    if bytes[0] != SYNC_BYTE {
        return Err(CodecError::Sync { found: bytes[0] });
    }
    if bytes[1] & 0xE0 != 0 {
        return Err(CodecError::Format {
            what: "reserved pid bits set",
        });
    }
    let pid = (u16::from(bytes[1]) << 8) | u16::from(bytes[2]);
    if bytes[3] & 0x30 != 0 {
        return Err(CodecError::Format {
            what: "reserved header bits set",
        });
    }
    let scrambling_control = ScramblingControl::from_bits(bytes[3] >> 6)?;
    let continuity = bytes[3] & 0x0F;
    Ok(TsPacket {
        pid,
        scrambling_control,
        continuity,
        payload: bytes[4..].try_into().unwrap(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clear_packet_header_layout() {
        let p = TsPacket::clear(0x100, 0, &[]).unwrap();
        let bytes = encode_packet(&p).unwrap();
        assert_eq!(&bytes[..4], &[0x47, 0x01, 0x00, 0x00]);
        assert_eq!(bytes.len(), PACKET_LEN);
    }

    #[test]
    fn scrambled_header_carries_parity_and_continuity() {
        let mut p = TsPacket::clear(0x1FFF, 0x0C, &[1, 2, 3]).unwrap();
        p.scrambling_control = ScramblingControl::OddKey;
        let bytes = encode_packet(&p).unwrap();
        assert_eq!(&bytes[..4], &[0x47, 0x1F, 0xFF, 0xCC]);
        assert_eq!(decode_packet(&bytes).unwrap(), p);
    }

    #[test]
    fn bad_sync_is_a_sync_error() {
        let p = TsPacket::clear(1, 0, &[]).unwrap();
        let mut bytes = encode_packet(&p).unwrap();
        bytes[0] = 0x48;
        assert_eq!(decode_packet(&bytes), Err(CodecError::Sync { found: 0x48 }));
    }

    #[test]
    fn wrong_length_is_a_length_error() {
        assert!(matches!(
            decode_packet(&[0x47; 187]),
            Err(CodecError::Length { what: "packet", .. })
        ));
    }

    #[test]
    fn reserved_scrambling_control_is_rejected() {
        let p = TsPacket::clear(1, 0, &[]).unwrap();
        let mut bytes = encode_packet(&p).unwrap();
        bytes[3] = 0b0100_0000;
        assert!(matches!(decode_packet(&bytes), Err(CodecError::Format { .. })));
    }

    #[test]
    fn out_of_range_fields_refuse_to_encode() {
        let mut p = TsPacket::clear(1, 0, &[]).unwrap();
        p.pid = 0x2000;
        assert!(encode_packet(&p).is_err());
        p.pid = 1;
        p.continuity = 16;
        assert!(encode_packet(&p).is_err());
    }
}
