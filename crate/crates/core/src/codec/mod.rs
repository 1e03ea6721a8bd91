//! Bit-exact encoders and decoders for the broadcast and card interfaces:
//! 188-octet transport packets, ECM/EMM sections, and ISO 7816-4 short
//! APDUs. Every decoder is strict — reserved bits must be zero and lengths
//! must match exactly — so `encode(decode(b)) == b` on the valid domain.

mod apdu;
mod message;
mod packet;

pub use apdu::{
    decode_apdu_command, decode_apdu_response, encode_apdu_command, encode_apdu_response,
    CommandApdu, ResponseApdu, sw,
};
pub use message::{
    decode_ecm, decode_emm, ecm_from_payload, emm_from_payload, encode_ecm, encode_emm,
    section_payload, Ecm, Emm, EmmAddress, Entitlement, ECM_LEN, ECM_TABLE_ID, EMM_BASE_LEN,
    EMM_MAX_ENTITLEMENTS, EMM_TABLE_ID, ENTITLEMENT_LEN,
};
pub use packet::{
    decode_packet, encode_packet, ScramblingControl, TsPacket, PACKET_LEN, PAYLOAD_LEN, SYNC_BYTE,
};

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("bad sync byte 0x{found:02x}")]
    Sync { found: u8 },
    #[error("bad length for {what}: expected {expected} octets, got {actual}")]
    Length {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("malformed {what}")]
    Format { what: &'static str },
}

/// One trace line for a command APDU: `>` followed by lowercase hex.
pub fn trace_command_line(bytes: &[u8]) -> String {
    format!(">{}", hex::encode(bytes))
}

/// One trace line for a response APDU: `<` followed by lowercase hex.
pub fn trace_response_line(bytes: &[u8]) -> String {
    format!("<{}", hex::encode(bytes))
}
