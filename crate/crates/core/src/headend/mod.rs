//! Transmit side: the subscriber database (SMS/SAS), ECM/EMM builders,
//! content scrambling, and the multiplexer that interleaves everything into
//! one packet stream.

mod db;
mod mux;

pub use db::{SubscriberDb, SubscriberRecord};
pub use mux::{Mux, MuxTick};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, Ecm, Emm, EmmAddress, ScramblingControl, TsPacket, EMM_MAX_ENTITLEMENTS};
use crate::crypto::{aes128_block, cbc_mac, tdes_cbc, CryptoError, Direction, MacKey};
use crate::keys::{packet_keystream, ControlWord, KeyError, Parity, ServiceKey};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HeadendError {
    #[error("card {0} is already registered")]
    Duplicate(u32),
    #[error("card {0} is not registered")]
    NotFound(u32),
    #[error("{0} entitlements exceed the {EMM_MAX_ENTITLEMENTS}-entry EMM capacity")]
    Capacity(usize),
    #[error("packet is already scrambled")]
    AlreadyScrambled,
    #[error("mux clock went backwards: {last} ms then {now} ms")]
    ClockRegression { last: u64, now: u64 },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Key(#[from] KeyError),
}

/// Broadcast layout and cadence for one channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPlan {
    pub channel_id: u16,
    pub pid_content: u16,
    pub pid_ecm: u16,
    pub pid_emm: u16,
    pub product_id: u16,
    #[serde(default = "default_cw_period_ms")]
    pub cw_period_ms: u64,
    #[serde(default = "default_ecm_interval_ms")]
    pub ecm_interval_ms: u64,
    #[serde(default = "default_emm_cycle_ms")]
    pub emm_cycle_ms: u64,
    #[serde(default = "default_content_packets_per_tick")]
    pub content_packets_per_tick: u32,
}

fn default_cw_period_ms() -> u64 {
    10_000
}
fn default_ecm_interval_ms() -> u64 {
    100
}
fn default_emm_cycle_ms() -> u64 {
    1_000
}
fn default_content_packets_per_tick() -> u32 {
    10
}

impl ChannelPlan {
    /// Conventional plan for a channel id: PIDs are carved out of a per-
    /// channel block of eight and the product id equals the channel id.
    pub fn for_channel(channel_id: u16) -> Self {
        let base = 0x100 + channel_id * 8;
        Self {
            channel_id,
            pid_content: base,
            pid_ecm: base + 1,
            pid_emm: base + 2,
            product_id: channel_id,
            cw_period_ms: default_cw_period_ms(),
            ecm_interval_ms: default_ecm_interval_ms(),
            emm_cycle_ms: default_emm_cycle_ms(),
            content_packets_per_tick: default_content_packets_per_tick(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.pid_content == self.pid_ecm
            || self.pid_content == self.pid_emm
            || self.pid_ecm == self.pid_emm
        {
            return Err(format!("channel {}: PIDs must be pairwise distinct", self.channel_id));
        }
        for pid in [self.pid_content, self.pid_ecm, self.pid_emm] {
            if pid > 0x1FFF {
                return Err(format!("channel {}: pid {pid} exceeds 13 bits", self.channel_id));
            }
        }
        if self.cw_period_ms == 0 || self.ecm_interval_ms == 0 || self.emm_cycle_ms == 0 {
            return Err(format!("channel {}: intervals must be positive", self.channel_id));
        }
        Ok(())
    }
}

/// Builds the unique-addressed EMM carrying the current service key and the
/// subscriber's entitlements, MAC'd under the individual key.
pub fn build_emm(
    record: &SubscriberRecord,
    sk: &ServiceKey,
    channel_id: u16,
) -> Result<Emm, HeadendError> {
    if record.entitlements.len() > EMM_MAX_ENTITLEMENTS {
        return Err(HeadendError::Capacity(record.entitlements.len()));
    }
    let enc_sk: [u8; 16] = tdes_cbc(
        &record.individual_key.key,
        sk.key.as_bytes(),
        Direction::Encrypt,
    )?
    .try_into()
    .unwrap();
    let mut emm = Emm {
        address: EmmAddress::Unique(record.card_id),
        sk_generation: sk.generation,
        channel_id,
        enc_sk,
        entitlements: record.entitlements.clone(),
        mac: [0; 8],
    };
    emm.mac = cbc_mac(MacKey::Tdes(&record.individual_key.key), &emm.mac_input()?);
    Ok(emm)
}

/// Builds the ECM for one crypto period: both parities' control words
/// encrypted under the service key, MAC'd under the service key.
pub fn build_ecm(
    plan: &ChannelPlan,
    sk: &ServiceKey,
    cw_even: &ControlWord,
    cw_odd: &ControlWord,
    period_index: u32,
) -> Ecm {
    let mut ecm = Ecm {
        channel_id: plan.channel_id,
        sk_generation: sk.generation,
        period_index,
        product_id: plan.product_id,
        enc_cw_even: aes128_block(&sk.key, cw_even.as_bytes(), Direction::Encrypt),
        enc_cw_odd: aes128_block(&sk.key, cw_odd.as_bytes(), Direction::Encrypt),
        mac: [0; 8],
    };
    ecm.mac = cbc_mac(MacKey::Aes(&sk.key), &ecm.mac_input());
    ecm
}

/// XORs the payload with the control-word keystream and marks the packet
/// with the period's parity. The 4-octet header is never touched.
pub fn scramble_packet(
    p: &TsPacket,
    cw: &ControlWord,
    parity: Parity,
    channel_id: u16,
    period_index: u32,
) -> Result<TsPacket, HeadendError> {
    if p.scrambling_control != ScramblingControl::Clear {
        return Err(HeadendError::AlreadyScrambled);
    }
    let keystream = packet_keystream(cw, channel_id, period_index, p.continuity);
    let mut out = p.clone();
    for (b, k) in out.payload.iter_mut().zip(&keystream) {
        *b ^= k;
    }
    out.scrambling_control = ScramblingControl::from_parity(parity);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{Aes128Key, Prng};
    use crate::keys::{cw_generate, individual_key_generate, parity_of, service_key_generate};

    fn seed(byte: u8) -> Aes128Key {
        Aes128Key::new([byte; 16])
    }

    fn sample_record(card_id: u32) -> SubscriberRecord {
        let master = seed(1);
        SubscriberRecord {
            card_id,
            individual_key: individual_key_generate(&master, card_id),
            entitlements: vec![crate::codec::Entitlement { product_id: 1, expiry_day: 365 }],
            pairing_secret: crate::keys::pairing_secret_generate(&master, card_id),
            rsa_public: crate::crypto::RsaPublicKey {
                modulus: 3233u32.into(),
                exponent: 17u32.into(),
            },
        }
    }

    #[test]
    fn emm_round_trips_the_service_key() {
        let record = sample_record(42);
        let sk = service_key_generate(&seed(1), 1, 0);
        let emm = build_emm(&record, &sk, 1).unwrap();
        let recovered = tdes_cbc(
            &record.individual_key.key,
            &emm.enc_sk,
            Direction::Decrypt,
        )
        .unwrap();
        assert_eq!(recovered, sk.key.as_bytes());
        assert_eq!(emm.entitlements, record.entitlements);
    }

    #[test]
    fn emm_mac_fails_under_another_cards_key() {
        let sk = service_key_generate(&seed(1), 1, 0);
        let mut rejected = 0;
        for card in 0u32..1000 {
            let record = sample_record(card);
            let other = individual_key_generate(&seed(1), card + 10_000);
            let emm = build_emm(&record, &sk, 1).unwrap();
            let forged = cbc_mac(MacKey::Tdes(&other.key), &emm.mac_input().unwrap());
            if forged != emm.mac {
                rejected += 1;
            }
        }
        assert!(rejected >= 999, "only {rejected}/1000 cross-card MACs differed");
    }

    #[test]
    fn emm_with_zero_entitlements_has_base_length() {
        let mut record = sample_record(7);
        record.entitlements.clear();
        let sk = service_key_generate(&seed(1), 1, 0);
        let emm = build_emm(&record, &sk, 1).unwrap();
        assert_eq!(crate::codec::encode_emm(&emm).unwrap().len(), crate::codec::EMM_BASE_LEN);
    }

    #[test]
    fn emm_capacity_is_enforced() {
        let mut record = sample_record(7);
        record.entitlements = (0..17)
            .map(|i| crate::codec::Entitlement { product_id: i, expiry_day: 1 })
            .collect();
        let sk = service_key_generate(&seed(1), 1, 0);
        assert_eq!(
            build_emm(&record, &sk, 1),
            Err(HeadendError::Capacity(17))
        );
    }

    #[test]
    fn ecm_round_trips_both_control_words() {
        let plan = ChannelPlan::for_channel(1);
        let sk = service_key_generate(&seed(1), 1, 0);
        let cw_even = cw_generate(&seed(1), 1, 0);
        let cw_odd = cw_generate(&seed(1), 1, 1);
        let ecm = build_ecm(&plan, &sk, &cw_even, &cw_odd, 0);
        assert_eq!(
            aes128_block(&sk.key, &ecm.enc_cw_even, Direction::Decrypt),
            *cw_even.as_bytes()
        );
        assert_eq!(
            aes128_block(&sk.key, &ecm.enc_cw_odd, Direction::Decrypt),
            *cw_odd.as_bytes()
        );
    }

    #[test]
    fn ecm_mac_detects_any_bit_flip() {
        let plan = ChannelPlan::for_channel(1);
        let sk = service_key_generate(&seed(2), 1, 0);
        let ecm = build_ecm(
            &plan,
            &sk,
            &cw_generate(&seed(2), 1, 0),
            &cw_generate(&seed(2), 1, 1),
            0,
        );
        let reference = ecm.mac_input();
        let mut prng = Prng::new(seed(3), 0);
        for _ in 0..1000 {
            let bit = prng.next_bytes(2);
            let bit = (usize::from(bit[0]) << 8 | usize::from(bit[1])) % (reference.len() * 8);
            let mut flipped = reference;
            flipped[bit / 8] ^= 1 << (bit % 8);
            assert_ne!(cbc_mac(MacKey::Aes(&sk.key), &flipped), ecm.mac);
        }
    }

    #[test]
    fn scramble_is_an_involution_that_spares_the_header() {
        let cw = cw_generate(&seed(4), 1, 5);
        let mut prng = Prng::new(seed(5), 0);
        for i in 0..100 {
            let p = TsPacket::clear(0x100, i % 16, &prng.next_bytes(184)).unwrap();
            let scrambled = scramble_packet(&p, &cw, parity_of(5), 1, 5).unwrap();
            assert_eq!(scrambled.pid, p.pid);
            assert_eq!(scrambled.continuity, p.continuity);
            assert_eq!(scrambled.scrambling_control, ScramblingControl::OddKey);
            assert_ne!(scrambled.payload, p.payload);
            let clear = crate::receiver::descramble_packet(&scrambled, &cw, 1, 5);
            assert_eq!(clear, p);
        }
    }

    #[test]
    fn scrambling_twice_is_a_state_error() {
        let cw = cw_generate(&seed(4), 1, 0);
        let p = TsPacket::clear(0x100, 0, b"x").unwrap();
        let once = scramble_packet(&p, &cw, Parity::Even, 1, 0).unwrap();
        assert_eq!(
            scramble_packet(&once, &cw, Parity::Even, 1, 0),
            Err(HeadendError::AlreadyScrambled)
        );
    }

    #[test]
    fn scrambled_payload_differs_from_clear() {
        let mut prng = Prng::new(seed(6), 0);
        let mut same = 0;
        for i in 0..10_000u32 {
            let cw = cw_generate(&seed(6), 1, i);
            let p = TsPacket::clear(0x100, (i % 16) as u8, &prng.next_bytes(184)).unwrap();
            let s = scramble_packet(&p, &cw, parity_of(i), 1, i).unwrap();
            if s.payload == p.payload {
                same += 1;
            }
        }
        assert_eq!(same, 0);
    }

    #[test]
    fn plan_validation_catches_pid_collisions() {
        let mut plan = ChannelPlan::for_channel(1);
        plan.pid_ecm = plan.pid_content;
        assert!(plan.validate().is_err());
        assert!(ChannelPlan::for_channel(1).validate().is_ok());
    }
}
