//! Single-channel multiplexer driven by a logical clock. Each tick emits,
//! in order: any due EMM, any due ECM, then the tick's content packets. EMMs
//! go out first so a card that just joined holds the service key before the
//! same tick's ECM reaches it.

use crate::codec::{encode_ecm, encode_emm, section_payload, TsPacket};
use crate::crypto::{Aes128Key, Prng};
use crate::keys::{
    crypto_period_of, cw_generate, domain_prng, parity_of, service_key_generate, ControlWord,
    KeyDomain, Parity, ServiceKey,
};

use super::{build_ecm, build_emm, scramble_packet, ChannelPlan, HeadendError, SubscriberDb};

/// Output of one mux tick: broadcast packets plus the clear twins of the
/// content packets, recorded for end-to-end verification.
#[derive(Debug, Default)]
pub struct MuxTick {
    pub packets: Vec<TsPacket>,
    pub clear_content: Vec<TsPacket>,
}

/// Per-channel transmit state machine.
pub struct Mux {
    plan: ChannelPlan,
    master_seed: Aes128Key,
    sk: ServiceKey,
    next_ecm_ms: u64,
    next_emm_ms: u64,
    emm_cursor: usize,
    cc_content: u8,
    cc_ecm: u8,
    cc_emm: u8,
    last_now: Option<u64>,
    content_prng: Prng,
}

impl Mux {
    pub fn new(plan: ChannelPlan, master_seed: Aes128Key) -> Self {
        let sk = service_key_generate(&master_seed, plan.channel_id, 0);
        let content_prng = domain_prng(
            &master_seed,
            KeyDomain::ContentPayload,
            u64::from(plan.channel_id) << 32,
        );
        Self {
            plan,
            master_seed,
            sk,
            next_ecm_ms: 0,
            next_emm_ms: 0,
            emm_cursor: 0,
            cc_content: 0,
            cc_ecm: 0,
            cc_emm: 0,
            last_now: None,
            content_prng,
        }
    }

    pub fn plan(&self) -> &ChannelPlan {
        &self.plan
    }

    pub fn service_key(&self) -> &ServiceKey {
        &self.sk
    }

    /// Rotates the service key to the next generation and returns it.
    pub fn rekey(&mut self) -> u8 {
        let next = self.sk.generation.wrapping_add(1);
        self.sk = service_key_generate(&self.master_seed, self.plan.channel_id, next);
        next
    }

    fn control_words(&self, period_index: u32) -> (ControlWord, ControlWord) {
        let now = cw_generate(&self.master_seed, self.plan.channel_id, period_index);
        let next = cw_generate(
            &self.master_seed,
            self.plan.channel_id,
            period_index.wrapping_add(1),
        );
        (now, next)
    }

    /// Advances the mux to `now_ms` and emits that tick's packets. The clock
    /// must never run backwards.
    pub fn tick(&mut self, db: &SubscriberDb, now_ms: u64) -> Result<MuxTick, HeadendError> {
        if let Some(last) = self.last_now {
            if now_ms < last {
                return Err(HeadendError::ClockRegression { last, now: now_ms });
            }
        }
        self.last_now = Some(now_ms);

        let period = crypto_period_of(now_ms, self.plan.cw_period_ms)?;
        let parity = parity_of(period);
        let (cw_now, cw_next) = self.control_words(period);
        // The ECM always carries the current and the next period's words,
        // slotted by parity so receivers can cross boundaries without a gap.
        let (cw_even, cw_odd) = match parity {
            Parity::Even => (cw_now, cw_next),
            Parity::Odd => (cw_next, cw_now),
        };

        let mut out = MuxTick::default();

        while self.next_emm_ms <= now_ms {
            self.next_emm_ms += self.plan.emm_cycle_ms;
            // Round-robin over active subscribers; inactive ones (no
            // entitlements at all) drop out of the cycle and stop receiving
            // service-key updates.
            let active: Vec<_> = db.iter().filter(|r| !r.entitlements.is_empty()).collect();
            if active.is_empty() {
                continue;
            }
            let record = active[self.emm_cursor % active.len()];
            self.emm_cursor = (self.emm_cursor + 1) % active.len();
            let emm = build_emm(record, &self.sk, self.plan.channel_id)?;
            let payload = section_payload(&encode_emm(&emm)?)?;
            out.packets.push(TsPacket::clear(self.plan.pid_emm, self.cc_emm, &payload)?);
            self.cc_emm = (self.cc_emm + 1) & 0x0F;
        }

        while self.next_ecm_ms <= now_ms {
            self.next_ecm_ms += self.plan.ecm_interval_ms;
            let ecm = build_ecm(&self.plan, &self.sk, &cw_even, &cw_odd, period);
            let payload = section_payload(&encode_ecm(&ecm))?;
            out.packets.push(TsPacket::clear(self.plan.pid_ecm, self.cc_ecm, &payload)?);
            self.cc_ecm = (self.cc_ecm + 1) & 0x0F;
        }

        for _ in 0..self.plan.content_packets_per_tick {
            let body = self.content_prng.next_bytes(184);
            let clear = TsPacket::clear(self.plan.pid_content, self.cc_content, &body)?;
            self.cc_content = (self.cc_content + 1) & 0x0F;
            let scrambled =
                scramble_packet(&clear, &cw_now, parity, self.plan.channel_id, period)?;
            out.clear_content.push(clear);
            out.packets.push(scrambled);
        }

        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{ecm_from_payload, emm_from_payload, ScramblingControl};
    use crate::crypto::{aes128_block, Direction};
    use crate::headend::SubscriberRecord;
    use crate::keys::{individual_key_generate, pairing_secret_generate};

    fn seed() -> Aes128Key {
        Aes128Key::new([0x21; 16])
    }

    fn db_with_subscribers(n: u32) -> SubscriberDb {
        let mut db = SubscriberDb::new();
        for card_id in 1..=n {
            db.register(SubscriberRecord {
                card_id,
                individual_key: individual_key_generate(&seed(), card_id),
                entitlements: vec![crate::codec::Entitlement { product_id: 1, expiry_day: 365 }],
                pairing_secret: pairing_secret_generate(&seed(), card_id),
                rsa_public: crate::crypto::RsaPublicKey {
                    modulus: 3233u32.into(),
                    exponent: 17u32.into(),
                },
            })
            .unwrap();
        }
        db
    }

    fn run(mux: &mut Mux, db: &SubscriberDb, duration_ms: u64) -> Vec<TsPacket> {
        let mut packets = Vec::new();
        let mut now = 0;
        while now < duration_ms {
            packets.extend(mux.tick(db, now).unwrap().packets);
            now += 10;
        }
        packets
    }

    #[test]
    fn ten_ecm_packets_per_second_at_default_cadence() {
        let mut mux = Mux::new(ChannelPlan::for_channel(1), seed());
        let db = db_with_subscribers(1);
        let packets = run(&mut mux, &db, 1000);
        let ecm_count = packets.iter().filter(|p| p.pid == mux.plan().pid_ecm).count();
        assert_eq!(ecm_count, 10);
    }

    #[test]
    fn control_word_changes_six_times_over_sixty_seconds() {
        let mut mux = Mux::new(ChannelPlan::for_channel(1), seed());
        let db = db_with_subscribers(1);
        let packets = run(&mut mux, &db, 60_000);
        let mut cws = std::collections::BTreeSet::new();
        let sk = *mux.service_key();
        for p in packets.iter().filter(|p| p.pid == mux.plan().pid_ecm) {
            let ecm = ecm_from_payload(&p.payload).unwrap();
            // active word of the period: slot selected by the period parity
            let enc = match parity_of(ecm.period_index) {
                Parity::Even => ecm.enc_cw_even,
                Parity::Odd => ecm.enc_cw_odd,
            };
            cws.insert(aes128_block(&sk.key, &enc, Direction::Decrypt));
        }
        assert_eq!(cws.len(), 6);
    }

    #[test]
    fn no_subscribers_means_no_emm_packets() {
        let mut mux = Mux::new(ChannelPlan::for_channel(1), seed());
        let db = SubscriberDb::new();
        let packets = run(&mut mux, &db, 5_000);
        assert!(packets.iter().all(|p| p.pid != mux.plan().pid_emm));
    }

    #[test]
    fn subscribers_without_entitlements_leave_the_emm_cycle() {
        let mut db = db_with_subscribers(2);
        db.revoke(1, 1).unwrap();
        let mut mux = Mux::new(ChannelPlan::for_channel(1), seed());
        let packets = run(&mut mux, &db, 5_000);
        for p in packets.iter().filter(|p| p.pid == 0x100 + 8 + 2) {
            let emm = emm_from_payload(&p.payload).unwrap();
            assert_eq!(emm.address, crate::codec::EmmAddress::Unique(2));
        }
    }

    #[test]
    fn emm_round_robin_covers_all_active_subscribers() {
        let db = db_with_subscribers(3);
        let mut mux = Mux::new(ChannelPlan::for_channel(1), seed());
        let packets = run(&mut mux, &db, 6_000);
        let mut seen = std::collections::BTreeSet::new();
        for p in packets.iter().filter(|p| p.pid == mux.plan().pid_emm) {
            if let crate::codec::EmmAddress::Unique(id) =
                emm_from_payload(&p.payload).unwrap().address
            {
                seen.insert(id);
            }
        }
        assert_eq!(seen, [1u32, 2, 3].into_iter().collect());
    }

    #[test]
    fn clock_regression_is_rejected() {
        let mut mux = Mux::new(ChannelPlan::for_channel(1), seed());
        let db = db_with_subscribers(1);
        mux.tick(&db, 100).unwrap();
        assert_eq!(
            mux.tick(&db, 99).unwrap_err(),
            HeadendError::ClockRegression { last: 100, now: 99 }
        );
    }

    #[test]
    fn content_parity_matches_the_period() {
        let mut mux = Mux::new(ChannelPlan::for_channel(1), seed());
        let db = db_with_subscribers(1);
        let mut now = 0;
        while now < 25_000 {
            let tick = mux.tick(&db, now).unwrap();
            let expected = match parity_of(crypto_period_of(now, 10_000).unwrap()) {
                Parity::Even => ScramblingControl::EvenKey,
                Parity::Odd => ScramblingControl::OddKey,
            };
            for p in tick.packets.iter().filter(|p| p.pid == mux.plan().pid_content) {
                assert_eq!(p.scrambling_control, expected);
            }
            now += 1000;
        }
    }

    #[test]
    fn stream_is_deterministic_from_the_seed() {
        let db = db_with_subscribers(2);
        let mut a = Mux::new(ChannelPlan::for_channel(1), seed());
        let mut b = Mux::new(ChannelPlan::for_channel(1), seed());
        for now in (0..2_000).step_by(10) {
            assert_eq!(a.tick(&db, now).unwrap().packets, b.tick(&db, now).unwrap().packets);
        }
    }

    #[test]
    fn rekey_bumps_the_generation_in_following_messages() {
        let db = db_with_subscribers(1);
        let mut mux = Mux::new(ChannelPlan::for_channel(1), seed());
        mux.tick(&db, 0).unwrap();
        assert_eq!(mux.rekey(), 1);
        let tick = mux.tick(&db, 1_000).unwrap();
        for p in &tick.packets {
            if p.pid == mux.plan().pid_ecm {
                assert_eq!(ecm_from_payload(&p.payload).unwrap().sk_generation, 1);
            }
            if p.pid == mux.plan().pid_emm {
                assert_eq!(emm_from_payload(&p.payload).unwrap().sk_generation, 1);
            }
        }
    }
}
