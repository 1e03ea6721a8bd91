//! ISO 7816-4 short APDUs (cases 1–4). Command bodies carry up to 255
//! octets; a response expects up to 256 where an Le of 0x00 means 256.

use super::CodecError;

/// Common status words used by the card.
pub mod sw {
    pub const SUCCESS: u16 = 0x9000;
    pub const WRONG_LENGTH: u16 = 0x6700;
    pub const SECURITY_STATUS_NOT_SATISFIED: u16 = 0x6982;
    pub const CONDITIONS_NOT_SATISFIED: u16 = 0x6985;
    pub const FILE_NOT_FOUND: u16 = 0x6A82;
    pub const NOT_ENOUGH_SPACE: u16 = 0x6A84;
    pub const REFERENCE_NOT_FOUND: u16 = 0x6A88;
    pub const INS_NOT_SUPPORTED: u16 = 0x6D00;
}

/// A command APDU. `le`, when present, is the expected response length in
/// the range 1..=256 (256 is encoded as 0x00 on the wire).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandApdu {
    pub cla: u8,
    pub ins: u8,
    pub p1: u8,
    pub p2: u8,
    pub data: Vec<u8>,
    pub le: Option<u16>,
}

impl CommandApdu {
    /// Case-1 command: header only.
    pub fn new(cla: u8, ins: u8, p1: u8, p2: u8) -> Self {
        Self { cla, ins, p1, p2, data: Vec::new(), le: None }
    }

    /// Case-3 command: header plus data.
    pub fn with_data(cla: u8, ins: u8, p1: u8, p2: u8, data: Vec<u8>) -> Self {
        Self { cla, ins, p1, p2, data, le: None }
    }

    /// Case-2 command: header plus expected response length.
    pub fn expecting(cla: u8, ins: u8, p1: u8, p2: u8, le: u16) -> Self {
        Self { cla, ins, p1, p2, data: Vec::new(), le: Some(le) }
    }
}

/// A response APDU: optional data followed by the two status octets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseApdu {
    pub data: Vec<u8>,
    pub sw1: u8,
    pub sw2: u8,
}

impl ResponseApdu {
    pub fn status(sw: u16) -> Self {
        Self { data: Vec::new(), sw1: (sw >> 8) as u8, sw2: (sw & 0xFF) as u8 }
    }

    pub fn with_data(data: Vec<u8>, sw: u16) -> Self {
        Self { data, sw1: (sw >> 8) as u8, sw2: (sw & 0xFF) as u8 }
    }

    pub fn sw(&self) -> u16 {
        (u16::from(self.sw1) << 8) | u16::from(self.sw2)
    }
}

pub fn encode_apdu_command(cmd: &CommandApdu) -> Result<Vec<u8>, CodecError> {
    if cmd.data.len() > 255 {
        return Err(CodecError::Length {
            what: "apdu command data",
            expected: 255,
            actual: cmd.data.len(),
        });
    }
    if let Some(le) = cmd.le {
        if le == 0 || le > 256 {
            return Err(CodecError::Format { what: "le out of range" });
        }
    }
    let mut out = vec![cmd.cla, cmd.ins, cmd.p1, cmd.p2];
    if !cmd.data.is_empty() {
        out.push(cmd.data.len() as u8);
        out.extend_from_slice(&cmd.data);
    }
    if let Some(le) = cmd.le {
        out.push(if le == 256 { 0 } else { le as u8 });
    }
    Ok(out)
}

pub fn decode_apdu_command(bytes: &[u8]) -> Result<CommandApdu, CodecError> {
    if bytes.len() < 4 {
        return Err(CodecError::Length {
            what: "apdu command",
            expected: 4,
            actual: bytes.len(),
        });
    }
    let (cla, ins, p1, p2) = (bytes[0], bytes[1], bytes[2], bytes[3]);
    let rest = &bytes[4..];
    let (data, le) = match rest {
        [] => (Vec::new(), None),
        [le] => (Vec::new(), Some(decode_le(*le))),
        _ => {
            let lc = rest[0] as usize;
            if lc == 0 {
                // short form never encodes Lc = 0
                return Err(CodecError::Format { what: "zero lc" });
            }
            match rest.len() {
                n if n == 1 + lc => (rest[1..].to_vec(), None),
                n if n == 1 + lc + 1 => (rest[1..1 + lc].to_vec(), Some(decode_le(rest[1 + lc]))),
                _ => {
                    return Err(CodecError::Length {
                        what: "apdu command body",
                        expected: 1 + lc,
                        actual: rest.len(),
                    })
                }
            }
        }
    };
    Ok(CommandApdu { cla, ins, p1, p2, data, le })
}

fn decode_le(byte: u8) -> u16 {
    if byte == 0 {
        256
    } else {
        u16::from(byte)
    }
}

pub fn encode_apdu_response(resp: &ResponseApdu) -> Result<Vec<u8>, CodecError> {
    if resp.data.len() > 256 {
        return Err(CodecError::Length {
            what: "apdu response data",
            expected: 256,
            actual: resp.data.len(),
        });
    }
    let mut out = resp.data.clone();
    out.push(resp.sw1);
    out.push(resp.sw2);
    Ok(out)
}

pub fn decode_apdu_response(bytes: &[u8]) -> Result<ResponseApdu, CodecError> {
    if bytes.len() < 2 {
        return Err(CodecError::Length {
            what: "apdu response",
            expected: 2,
            actual: bytes.len(),
        });
    }
    if bytes.len() > 256 + 2 {
        return Err(CodecError::Length {
            what: "apdu response",
            expected: 258,
            actual: bytes.len(),
        });
    }
    Ok(ResponseApdu {
        data: bytes[..bytes.len() - 2].to_vec(),
        sw1: bytes[bytes.len() - 2],
        sw2: bytes[bytes.len() - 1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn select_is_case_3_framing() {
        let cmd = CommandApdu::with_data(0x00, 0xA4, 0x04, 0x00, vec![0xA1, 0xB2, 0xC3, 0xD4, 0xE5]);
        let bytes = encode_apdu_command(&cmd).unwrap();
        assert_eq!(hex::encode(&bytes), "00a4040005a1b2c3d4e5");
        assert_eq!(decode_apdu_command(&bytes).unwrap(), cmd);
    }

    #[test]
    fn empty_response_is_just_the_status_word() {
        let resp = ResponseApdu::status(0x9000);
        let bytes = encode_apdu_response(&resp).unwrap();
        assert_eq!(hex::encode(&bytes), "9000");
        assert_eq!(decode_apdu_response(&bytes).unwrap().sw(), 0x9000);
    }

    #[test]
    fn all_four_cases_round_trip() {
        let cases = [
            CommandApdu::new(0x80, 0x10, 0, 0),
            CommandApdu::expecting(0x80, 0x10, 0, 0, 136),
            CommandApdu::with_data(0x80, 0x40, 0, 0, vec![9; 40]),
            CommandApdu { le: Some(256), ..CommandApdu::with_data(0x80, 0x42, 0, 0, vec![1; 50]) },
        ];
        for cmd in cases {
            let bytes = encode_apdu_command(&cmd).unwrap();
            assert_eq!(decode_apdu_command(&bytes).unwrap(), cmd);
        }
    }

    #[test]
    fn le_256_encodes_as_zero_byte() {
        let cmd = CommandApdu::expecting(0, 1, 2, 3, 256);
        let bytes = encode_apdu_command(&cmd).unwrap();
        assert_eq!(bytes, vec![0, 1, 2, 3, 0]);
        assert_eq!(decode_apdu_command(&bytes).unwrap().le, Some(256));
    }

    #[test]
    fn lc_mismatch_is_a_length_error() {
        // header + lc=5 but only 3 data octets
        let bytes = [0x00, 0xA4, 0x04, 0x00, 0x05, 0x01, 0x02, 0x03];
        assert!(matches!(
            decode_apdu_command(&bytes),
            Err(CodecError::Length { what: "apdu command body", .. })
        ));
    }

    #[test]
    fn oversized_command_data_refuses_to_encode() {
        let cmd = CommandApdu::with_data(0, 0, 0, 0, vec![0; 256]);
        assert!(encode_apdu_command(&cmd).is_err());
    }

    #[test]
    fn truncated_response_is_rejected() {
        assert!(decode_apdu_response(&[0x90]).is_err());
    }
}
