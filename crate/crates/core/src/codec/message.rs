//! Entitlement message layouts. All multi-octet integers are big-endian.
//!
//! ECM (fixed 50 octets):
//! table_id(1)=0x80 ‖ channel_id(2) ‖ sk_generation(1) ‖ period_index(4) ‖
//! product_id(2) ‖ enc_cw_even(16) ‖ enc_cw_odd(16) ‖ mac(8)
//!
//! EMM (34 + 4·n octets):
//! table_id(1)=0x88 ‖ address_type(1) ‖ card_id(4) ‖ sk_generation(1) ‖
//! channel_id(2) ‖ enc_sk(16) ‖ entitlement_count(1) ‖ n × (product_id(2) ‖
//! expiry_day(2)) ‖ mac(8)
//!
//! The MAC in each message covers every preceding octet; verifying it is the
//! card's job, not the codec's.

use serde::{Deserialize, Serialize};

use super::CodecError;

pub const ECM_TABLE_ID: u8 = 0x80;
pub const ECM_LEN: usize = 50;

pub const EMM_TABLE_ID: u8 = 0x88;
/// EMM length with zero entitlements.
pub const EMM_BASE_LEN: usize = 34;
pub const EMM_MAX_ENTITLEMENTS: usize = 16;
pub const ENTITLEMENT_LEN: usize = 4;

const GLOBAL_CARD_ID: u32 = 0xFFFF_FFFF;

/// Access right to one product, valid through `expiry_day` (days since the
/// simulation epoch, inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Entitlement {
    pub product_id: u16,
    pub expiry_day: u16,
}

/// Entitlement control message: both control-word parities encrypted under
/// the service key, plus the access criteria to check them against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ecm {
    pub channel_id: u16,
    pub sk_generation: u8,
    pub period_index: u32,
    pub product_id: u16,
    pub enc_cw_even: [u8; 16],
    pub enc_cw_odd: [u8; 16],
    pub mac: [u8; 8],
}

impl Ecm {
    /// The octets covered by the MAC: the full encoding minus the tag.
    pub fn mac_input(&self) -> [u8; ECM_LEN - 8] {
        encode_ecm(self)[..ECM_LEN - 8].try_into().unwrap()
    }
}

/// EMM addressing mode. A unique EMM targets one card; a global EMM is for
/// every card and carries the all-ones card id on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmmAddress {
    Unique(u32),
    Global,
}

/// Entitlement management message: the service key encrypted under one
/// card's individual key, plus entitlement grants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Emm {
    pub address: EmmAddress,
    pub sk_generation: u8,
    pub channel_id: u16,
    pub enc_sk: [u8; 16],
    pub entitlements: Vec<Entitlement>,
    pub mac: [u8; 8],
}

impl Emm {
    pub fn encoded_len(&self) -> usize {
        EMM_BASE_LEN + ENTITLEMENT_LEN * self.entitlements.len()
    }

    /// The octets covered by the MAC: the full encoding minus the tag.
    pub fn mac_input(&self) -> Result<Vec<u8>, CodecError> {
        let mut bytes = encode_emm(self)?;
        bytes.truncate(bytes.len() - 8);
        Ok(bytes)
    }
}

pub fn encode_ecm(m: &Ecm) -> [u8; ECM_LEN] {
    let mut out = [0u8; ECM_LEN];
    out[0] = ECM_TABLE_ID;
    out[1..3].copy_from_slice(&m.channel_id.to_be_bytes());
    out[3] = m.sk_generation;
    out[4..8].copy_from_slice(&m.period_index.to_be_bytes());
    out[8..10].copy_from_slice(&m.product_id.to_be_bytes());
    out[10..26].copy_from_slice(&m.enc_cw_even);
    out[26..42].copy_from_slice(&m.enc_cw_odd);
    out[42..].copy_from_slice(&m.mac);
    out
}

pub fn decode_ecm(bytes: &[u8]) -> Result<Ecm, CodecError> {
    if bytes.len() != ECM_LEN {
        return Err(CodecError::Length {
            what: "ecm",
            expected: ECM_LEN,
            actual: bytes.len(),
        });
    }
    if bytes[0] != ECM_TABLE_ID {
        return Err(CodecError::Format { what: "ecm table id" });
    }
    Ok(Ecm {
        channel_id: u16::from_be_bytes(bytes[1..3].try_into().unwrap()),
        sk_generation: bytes[3],
        period_index: u32::from_be_bytes(bytes[4..8].try_into().unwrap()),
        product_id: u16::from_be_bytes(bytes[8..10].try_into().unwrap()),
        enc_cw_even: bytes[10..26].try_into().unwrap(),
        enc_cw_odd: bytes[26..42].try_into().unwrap(),
        mac: bytes[42..].try_into().unwrap(),
    })
}

pub fn encode_emm(m: &Emm) -> Result<Vec<u8>, CodecError> {
    if m.entitlements.len() > EMM_MAX_ENTITLEMENTS {
        return Err(CodecError::Format {
            what: "emm entitlement count exceeds 16",
        });
    }
    let (address_type, card_id) = match m.address {
        EmmAddress::Unique(id) => (0u8, id),
        EmmAddress::Global => (1u8, GLOBAL_CARD_ID),
    };
    let mut out = Vec::with_capacity(m.encoded_len());
    out.push(EMM_TABLE_ID);
    out.push(address_type);
    out.extend_from_slice(&card_id.to_be_bytes());
    out.push(m.sk_generation);
    out.extend_from_slice(&m.channel_id.to_be_bytes());
    out.extend_from_slice(&m.enc_sk);
    out.push(m.entitlements.len() as u8);
    for e in &m.entitlements {
        out.extend_from_slice(&e.product_id.to_be_bytes());
        out.extend_from_slice(&e.expiry_day.to_be_bytes());
    }
    out.extend_from_slice(&m.mac);
    Ok(out)
}

pub fn decode_emm(bytes: &[u8]) -> Result<Emm, CodecError> {
    if bytes.len() < EMM_BASE_LEN {
        return Err(CodecError::Length {
            what: "emm",
            expected: EMM_BASE_LEN,
            actual: bytes.len(),
        });
    }
    if bytes[0] != EMM_TABLE_ID {
        return Err(CodecError::Format { what: "emm table id" });
    }
    let card_id = u32::from_be_bytes(bytes[2..6].try_into().unwrap());
    let address = match bytes[1] {
        0 => EmmAddress::Unique(card_id),
        1 if card_id == GLOBAL_CARD_ID => EmmAddress::Global,
        1 => {
            return Err(CodecError::Format {
                what: "global emm without all-ones card id",
            })
        }
        _ => return Err(CodecError::Format { what: "emm address type" }),
    };
    let count = bytes[25] as usize;
    if count > EMM_MAX_ENTITLEMENTS {
        return Err(CodecError::Format {
            what: "emm entitlement count exceeds 16",
        });
    }
    let expected = EMM_BASE_LEN + ENTITLEMENT_LEN * count;
    if bytes.len() != expected {
        return Err(CodecError::Length {
            what: "emm",
            expected,
            actual: bytes.len(),
        });
    }
    let mut entitlements = Vec::with_capacity(count);
    for chunk in bytes[26..26 + ENTITLEMENT_LEN * count].chunks_exact(ENTITLEMENT_LEN) {
        entitlements.push(Entitlement {
            product_id: u16::from_be_bytes(chunk[..2].try_into().unwrap()),
            expiry_day: u16::from_be_bytes(chunk[2..].try_into().unwrap()),
        });
    }
    Ok(Emm {
        address,
        sk_generation: bytes[6],
        channel_id: u16::from_be_bytes(bytes[7..9].try_into().unwrap()),
        enc_sk: bytes[9..25].try_into().unwrap(),
        entitlements,
        mac: bytes[expected - 8..].try_into().unwrap(),
    })
}

/// Pads a section body into a 184-octet packet payload with 0xFF fill.
/// Every ECM/EMM in this protocol fits one packet, so there is no
/// segmentation or reassembly.
pub fn section_payload(body: &[u8]) -> Result<[u8; 184], CodecError> {
    if body.len() > 184 {
        return Err(CodecError::Length {
            what: "section body",
            expected: 184,
            actual: body.len(),
        });
    }
    let mut out = [0xFFu8; 184];
    out[..body.len()].copy_from_slice(body);
    Ok(out)
}

/// Extracts an ECM from a packet payload written by [`section_payload`].
pub fn ecm_from_payload(payload: &[u8; 184]) -> Result<Ecm, CodecError> {
    let ecm = decode_ecm(&payload[..ECM_LEN])?;
    if payload[ECM_LEN..].iter().any(|&b| b != 0xFF) {
        return Err(CodecError::Format { what: "ecm payload padding" });
    }
    Ok(ecm)
}

/// Extracts an EMM from a packet payload written by [`section_payload`].
pub fn emm_from_payload(payload: &[u8; 184]) -> Result<Emm, CodecError> {
    if payload[0] != EMM_TABLE_ID {
        return Err(CodecError::Format { what: "emm table id" });
    }
    let count = payload[25] as usize;
    if count > EMM_MAX_ENTITLEMENTS {
        return Err(CodecError::Format {
            what: "emm entitlement count exceeds 16",
        });
    }
    let len = EMM_BASE_LEN + ENTITLEMENT_LEN * count;
    let emm = decode_emm(&payload[..len])?;
    if payload[len..].iter().any(|&b| b != 0xFF) {
        return Err(CodecError::Format { what: "emm payload padding" });
    }
    Ok(emm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_ecm() -> Ecm {
        Ecm {
            channel_id: 0x0102,
            sk_generation: 3,
            period_index: 0x0A0B0C0D,
            product_id: 0x2030,
            enc_cw_even: [0x11; 16],
            enc_cw_odd: [0x22; 16],
            mac: [0x33; 8],
        }
    }

    fn sample_emm(n: usize) -> Emm {
        Emm {
            address: EmmAddress::Unique(0xDEADBEEF),
            sk_generation: 1,
            channel_id: 7,
            enc_sk: [0x44; 16],
            entitlements: (0..n)
                .map(|i| Entitlement {
                    product_id: i as u16,
                    expiry_day: 100 + i as u16,
                })
                .collect(),
            mac: [0x55; 8],
        }
    }

    #[test]
    fn zeroed_ecm_is_fifty_octets_starting_with_table_id() {
        let ecm = Ecm {
            channel_id: 0,
            sk_generation: 0,
            period_index: 0,
            product_id: 0,
            enc_cw_even: [0; 16],
            enc_cw_odd: [0; 16],
            mac: [0; 8],
        };
        let bytes = encode_ecm(&ecm);
        assert_eq!(bytes.len(), ECM_LEN);
        assert_eq!(bytes[0], 0x80);
        assert!(bytes[1..].iter().all(|&b| b == 0));
    }

    #[test]
    fn ecm_round_trip() {
        let ecm = sample_ecm();
        assert_eq!(decode_ecm(&encode_ecm(&ecm)).unwrap(), ecm);
    }

    #[test]
    fn ecm_rejects_wrong_table_id_and_truncation() {
        let mut bytes = encode_ecm(&sample_ecm());
        assert!(matches!(
            decode_ecm(&bytes[..49]),
            Err(CodecError::Length { what: "ecm", .. })
        ));
        bytes[0] = 0x81;
        assert!(matches!(decode_ecm(&bytes), Err(CodecError::Format { .. })));
    }

    #[test]
    fn emm_lengths_follow_the_layout() {
        assert_eq!(encode_emm(&sample_emm(0)).unwrap().len(), EMM_BASE_LEN);
        assert_eq!(
            encode_emm(&sample_emm(2)).unwrap().len(),
            EMM_BASE_LEN + 2 * ENTITLEMENT_LEN
        );
    }

    #[test]
    fn emm_round_trip_unique_and_global() {
        for emm in [sample_emm(3), Emm { address: EmmAddress::Global, ..sample_emm(0) }] {
            let bytes = encode_emm(&emm).unwrap();
            assert_eq!(decode_emm(&bytes).unwrap(), emm);
        }
    }

    #[test]
    fn emm_rejects_count_length_mismatch() {
        let mut bytes = encode_emm(&sample_emm(2)).unwrap();
        bytes[25] = 3;
        assert!(matches!(decode_emm(&bytes), Err(CodecError::Length { .. })));
    }

    #[test]
    fn emm_rejects_more_than_sixteen_entitlements() {
        assert!(encode_emm(&sample_emm(17)).is_err());
        // a forged count in the header is caught before the length check
        let mut bytes = encode_emm(&sample_emm(0)).unwrap();
        bytes[25] = 17;
        bytes.extend_from_slice(&[0; 17 * ENTITLEMENT_LEN]);
        assert!(matches!(decode_emm(&bytes), Err(CodecError::Format { .. })));
    }

    #[test]
    fn emm_rejects_bad_address_type() {
        let mut bytes = encode_emm(&sample_emm(0)).unwrap();
        bytes[1] = 2;
        assert!(matches!(decode_emm(&bytes), Err(CodecError::Format { .. })));
    }

    #[test]
    fn sections_survive_payload_padding() {
        let ecm = sample_ecm();
        let payload = section_payload(&encode_ecm(&ecm)).unwrap();
        assert_eq!(ecm_from_payload(&payload).unwrap(), ecm);

        let emm = sample_emm(5);
        let payload = section_payload(&encode_emm(&emm).unwrap()).unwrap();
        assert_eq!(emm_from_payload(&payload).unwrap(), emm);
    }

    #[test]
    fn payload_with_damaged_padding_is_rejected() {
        let mut payload = section_payload(&encode_ecm(&sample_ecm())).unwrap();
        payload[ECM_LEN] = 0x00;
        assert!(ecm_from_payload(&payload).is_err());
    }
}
