//! The virtual smart card: an applet-style state machine behind an ISO
//! 7816-4 command interface, with EEPROM/RAM accounting and a per-primitive
//! latency model injected from measured hardware costs.
//!
//! Command set (CLA, INS):
//!
//! ```text
//! 00 A4  SELECT            applet selection by AID, resets the session
//! 80 10  GET CARD INFO     card_id ‖ rsa modulus ‖ rsa exponent
//! 80 20  AUTHENTICATE-1    host nonce in, wrapped card nonce out
//! 80 22  AUTHENTICATE-2    session-key proof in
//! 80 40  PROCESS EMM       store service key, merge entitlements
//! 80 42  PROCESS ECM       release both control words under session key
//! 80 44  GET STATUS        diagnostics snapshot
//! ```

mod store;

pub use store::{
    CardPersistentStore, CardProvisioning, ProvisioningError, CA_APPLET_AID,
    EEPROM_BUDGET, ENTITLEMENT_EEPROM_COST, RAM_BUDGET, SERVICE_KEY_EEPROM_COST,
};

use serde::{Deserialize, Serialize};

use crate::codec::{
    decode_apdu_command, decode_ecm, decode_emm, encode_apdu_response, sw, CommandApdu,
    EmmAddress, ResponseApdu,
};
use crate::crypto::{
    aes128_block, cbc_mac, kdf_session, rsa_unpad_nonce, tdes_cbc, Aes128Key, Direction, MacKey,
    Prng,
};
use crate::keys::{ServiceKey, SessionKey};

use num_bigint::BigUint;

pub const INS_SELECT: u8 = 0xA4;
pub const INS_GET_CARD_INFO: u8 = 0x10;
pub const INS_AUTHENTICATE_1: u8 = 0x20;
pub const INS_AUTHENTICATE_2: u8 = 0x22;
pub const INS_PROCESS_EMM: u8 = 0x40;
pub const INS_PROCESS_ECM: u8 = 0x42;
pub const INS_GET_STATUS: u8 = 0x44;

/// CLA for the proprietary conditional-access commands.
pub const CLA_CA: u8 = 0x80;

/// Mask XORed into the card nonce for the authenticate-2 proof.
pub const AUTH_PROOF_MASK: u8 = 0x55;

/// RAM charged while a session is open.
pub const SESSION_RAM_COST: u16 = 64;

/// Per-invocation costs in milliseconds, mirroring measured card hardware.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    pub tdes_ms: u64,
    pub aes_ms: u64,
    pub rsa_ms: u64,
    pub rng_ms: u64,
    pub apdu_transport_ms: u64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            tdes_ms: 5,
            aes_ms: 10,
            rsa_ms: 100,
            rng_ms: 1,
            apdu_transport_ms: 2,
        }
    }
}

/// How many times each primitive ran while handling one command.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PrimitiveCounts {
    pub tdes: u32,
    pub aes: u32,
    pub rsa: u32,
    pub rng: u32,
}

impl PrimitiveCounts {
    pub fn cost_ms(&self, model: &LatencyModel) -> u64 {
        u64::from(self.tdes) * model.tdes_ms
            + u64::from(self.aes) * model.aes_ms
            + u64::from(self.rsa) * model.rsa_ms
            + u64::from(self.rng) * model.rng_ms
    }
}

/// Card applet lifecycle within one session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Lifecycle {
    Idle,
    Selected,
    Authenticated,
}

/// Volatile (RAM) session state; cleared on reset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CardSession {
    pub lifecycle: Lifecycle,
    n_stb: Option<[u8; 16]>,
    n_card: Option<[u8; 16]>,
    pending_key: Option<Aes128Key>,
    session_key: Option<SessionKey>,
    pub ram_used: u16,
}

impl Default for CardSession {
    fn default() -> Self {
        Self {
            lifecycle: Lifecycle::Idle,
            n_stb: None,
            n_card: None,
            pending_key: None,
            session_key: None,
            ram_used: 0,
        }
    }
}

impl CardSession {
    pub fn session_key(&self) -> Option<&SessionKey> {
        self.session_key.as_ref()
    }
}

/// Result of processing one command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApduOutcome {
    pub response: ResponseApdu,
    pub elapsed_ms: u64,
    pub counts: PrimitiveCounts,
}

/// One virtual card. Strictly serial: one command in flight at a time.
pub struct Card {
    store: CardPersistentStore,
    session: CardSession,
    latency: LatencyModel,
    nonce_prng: Prng,
}

impl Card {
    pub fn new(provisioning: CardProvisioning, latency: LatencyModel, nonce_prng: Prng) -> Self {
        Self {
            store: CardPersistentStore::from_provisioning(provisioning),
            session: CardSession::default(),
            latency,
            nonce_prng,
        }
    }

    pub fn store(&self) -> &CardPersistentStore {
        &self.store
    }

    pub fn session(&self) -> &CardSession {
        &self.session
    }

    pub fn latency(&self) -> &LatencyModel {
        &self.latency
    }

    /// Advances the card's notion of the current simulation day, used for
    /// entitlement expiry checks.
    pub fn set_day(&mut self, day: u16) {
        self.store.current_day = day;
    }

    /// Power cycle: the session is wiped, the persistent store survives.
    pub fn reset(&mut self) {
        self.session = CardSession::default();
    }

    /// Processes one decoded command.
    pub fn process(&mut self, cmd: &CommandApdu) -> ApduOutcome {
        let mut counts = PrimitiveCounts::default();
        let response = self.dispatch(cmd, &mut counts);
        debug_assert!(self.session.ram_used <= RAM_BUDGET);
        debug_assert!(self.store.eeprom_used <= EEPROM_BUDGET);
        ApduOutcome {
            response,
            elapsed_ms: self.latency.apdu_transport_ms + counts.cost_ms(&self.latency),
            counts,
        }
    }

    /// Raw transport entry point: malformed command bytes earn a status
    /// word, never a crash.
    pub fn process_raw(&mut self, bytes: &[u8]) -> (Vec<u8>, u64) {
        match decode_apdu_command(bytes) {
            Ok(cmd) => {
                let outcome = self.process(&cmd);
                (
                    encode_apdu_response(&outcome.response).expect("responses fit short APDUs"),
                    outcome.elapsed_ms,
                )
            }
            Err(_) => (
                encode_apdu_response(&ResponseApdu::status(sw::WRONG_LENGTH)).unwrap(),
                self.latency.apdu_transport_ms,
            ),
        }
    }

    fn dispatch(&mut self, cmd: &CommandApdu, counts: &mut PrimitiveCounts) -> ResponseApdu {
        match (cmd.cla, cmd.ins) {
            (0x00, INS_SELECT) => self.handle_select(cmd),
            (CLA_CA, INS_GET_CARD_INFO) => self.handle_get_card_info(),
            (CLA_CA, INS_AUTHENTICATE_1) => self.handle_authenticate_1(cmd, counts),
            (CLA_CA, INS_AUTHENTICATE_2) => self.handle_authenticate_2(cmd, counts),
            (CLA_CA, INS_PROCESS_EMM) => self.handle_process_emm(cmd, counts),
            (CLA_CA, INS_PROCESS_ECM) => self.handle_process_ecm(cmd, counts),
            (CLA_CA, INS_GET_STATUS) => self.handle_get_status(),
            _ => ResponseApdu::status(sw::INS_NOT_SUPPORTED),
        }
    }

    fn wipe_auth(&mut self) {
        self.session.n_stb = None;
        self.session.n_card = None;
        self.session.pending_key = None;
        self.session.session_key = None;
        if self.session.lifecycle == Lifecycle::Authenticated {
            self.session.lifecycle = Lifecycle::Selected;
        }
    }

    fn handle_select(&mut self, cmd: &CommandApdu) -> ResponseApdu {
        if cmd.p1 != 0x04 || cmd.p2 != 0x00 {
            return ResponseApdu::status(sw::CONDITIONS_NOT_SATISFIED);
        }
        if cmd.data.is_empty() {
            return ResponseApdu::status(sw::WRONG_LENGTH);
        }
        if cmd.data != self.store.aid {
            return ResponseApdu::status(sw::FILE_NOT_FOUND);
        }
        self.session = CardSession {
            lifecycle: Lifecycle::Selected,
            ram_used: SESSION_RAM_COST,
            ..CardSession::default()
        };
        ResponseApdu::status(sw::SUCCESS)
    }

    fn handle_get_card_info(&mut self) -> ResponseApdu {
        if self.session.lifecycle == Lifecycle::Idle {
            return ResponseApdu::status(sw::CONDITIONS_NOT_SATISFIED);
        }
        let mut data = Vec::with_capacity(136);
        data.extend_from_slice(&self.store.card_id.to_be_bytes());
        data.extend_from_slice(&self.store.rsa.public().modulus_bytes());
        let e = self
            .store
            .rsa
            .public()
            .exponent
            .iter_u64_digits()
            .next()
            .unwrap_or(0) as u32;
        data.extend_from_slice(&e.to_be_bytes());
        ResponseApdu::with_data(data, sw::SUCCESS)
    }

    fn handle_authenticate_1(
        &mut self,
        cmd: &CommandApdu,
        counts: &mut PrimitiveCounts,
    ) -> ResponseApdu {
        if self.session.lifecycle != Lifecycle::Selected {
            return ResponseApdu::status(sw::CONDITIONS_NOT_SATISFIED);
        }
        if cmd.data.len() != 128 {
            return ResponseApdu::status(sw::WRONG_LENGTH);
        }

        counts.rsa += 1;
        let ciphertext = BigUint::from_bytes_be(&cmd.data);
        let n_stb = self
            .store
            .rsa
            .decrypt(&ciphertext)
            .and_then(|m| rsa_unpad_nonce(&m));
        let n_stb = match n_stb {
            Ok(nonce) => nonce,
            Err(_) => {
                self.wipe_auth();
                return ResponseApdu::status(sw::SECURITY_STATUS_NOT_SATISFIED);
            }
        };

        counts.rng += 1;
        let n_card = self.nonce_prng.next_block();

        counts.aes += 1;
        let pending = kdf_session(&n_stb, &n_card, &self.store.pairing_secret);

        // The card nonce travels wrapped under the host nonce, so only the
        // host that chose N_stb can unwrap it.
        counts.aes += 1;
        let wrapped = aes128_block(&Aes128Key::new(n_stb), &n_card, Direction::Encrypt);

        self.session.n_stb = Some(n_stb);
        self.session.n_card = Some(n_card);
        self.session.pending_key = Some(pending);
        self.session.session_key = None;
        ResponseApdu::with_data(wrapped.to_vec(), sw::SUCCESS)
    }

    fn handle_authenticate_2(
        &mut self,
        cmd: &CommandApdu,
        counts: &mut PrimitiveCounts,
    ) -> ResponseApdu {
        let (Some(n_card), Some(pending)) = (self.session.n_card, self.session.pending_key) else {
            return ResponseApdu::status(sw::CONDITIONS_NOT_SATISFIED);
        };
        if self.session.lifecycle != Lifecycle::Selected {
            return ResponseApdu::status(sw::CONDITIONS_NOT_SATISFIED);
        }
        if cmd.data.len() != 16 {
            return ResponseApdu::status(sw::WRONG_LENGTH);
        }

        counts.aes += 1;
        let mut masked = n_card;
        for b in &mut masked {
            *b ^= AUTH_PROOF_MASK;
        }
        let expected = aes128_block(&pending, &masked, Direction::Encrypt);
        if cmd.data != expected {
            self.wipe_auth();
            return ResponseApdu::status(sw::SECURITY_STATUS_NOT_SATISFIED);
        }

        self.session.lifecycle = Lifecycle::Authenticated;
        self.session.session_key = Some(SessionKey::from_kdf(pending));
        self.session.n_stb = None;
        self.session.n_card = None;
        self.session.pending_key = None;
        ResponseApdu::status(sw::SUCCESS)
    }

    fn handle_process_emm(
        &mut self,
        cmd: &CommandApdu,
        counts: &mut PrimitiveCounts,
    ) -> ResponseApdu {
        if self.session.lifecycle == Lifecycle::Idle {
            return ResponseApdu::status(sw::CONDITIONS_NOT_SATISFIED);
        }
        let Ok(emm) = decode_emm(&cmd.data) else {
            return ResponseApdu::status(sw::WRONG_LENGTH);
        };

        match emm.address {
            EmmAddress::Unique(id) if id != self.store.card_id => {
                return ResponseApdu::status(sw::CONDITIONS_NOT_SATISFIED);
            }
            _ => {}
        }

        counts.tdes += 1;
        let Ok(mac_input) = emm.mac_input() else {
            return ResponseApdu::status(sw::WRONG_LENGTH);
        };
        if cbc_mac(MacKey::Tdes(&self.store.individual_key.key), &mac_input) != emm.mac {
            return ResponseApdu::status(sw::SECURITY_STATUS_NOT_SATISFIED);
        }

        counts.tdes += 1;
        let sk_bytes = tdes_cbc(
            &self.store.individual_key.key,
            &emm.enc_sk,
            Direction::Decrypt,
        )
        .expect("enc_sk is two DES blocks");
        let service_key = ServiceKey {
            key: Aes128Key::from_slice(&sk_bytes).unwrap(),
            generation: emm.sk_generation,
        };

        let cost = self.store.merge_cost(emm.channel_id, &emm.entitlements);
        if self.store.eeprom_used + cost > EEPROM_BUDGET {
            return ResponseApdu::status(sw::NOT_ENOUGH_SPACE);
        }
        self.store.service_keys.insert(emm.channel_id, service_key);
        for e in &emm.entitlements {
            self.store.entitlements.insert(e.product_id, e.expiry_day);
        }
        self.store.eeprom_used += cost;
        ResponseApdu::status(sw::SUCCESS)
    }

    fn handle_process_ecm(
        &mut self,
        cmd: &CommandApdu,
        counts: &mut PrimitiveCounts,
    ) -> ResponseApdu {
        if self.session.lifecycle != Lifecycle::Authenticated {
            return ResponseApdu::status(sw::CONDITIONS_NOT_SATISFIED);
        }
        let session_key = *self.session.session_key.as_ref().expect("authenticated").key();
        let Ok(ecm) = decode_ecm(&cmd.data) else {
            return ResponseApdu::status(sw::WRONG_LENGTH);
        };

        let Some(service_key) = self.store.service_keys.get(&ecm.channel_id) else {
            return ResponseApdu::status(sw::REFERENCE_NOT_FOUND);
        };
        if service_key.generation != ecm.sk_generation {
            return ResponseApdu::status(sw::REFERENCE_NOT_FOUND);
        }
        let sk = service_key.key;

        counts.aes += 1;
        if cbc_mac(MacKey::Aes(&sk), &ecm.mac_input()) != ecm.mac {
            return ResponseApdu::status(sw::SECURITY_STATUS_NOT_SATISFIED);
        }

        let entitled = self
            .store
            .entitlements
            .get(&ecm.product_id)
            .is_some_and(|&expiry| expiry >= self.store.current_day);
        if !entitled {
            return ResponseApdu::status(sw::SECURITY_STATUS_NOT_SATISFIED);
        }

        counts.aes += 2;
        let cw_even = aes128_block(&sk, &ecm.enc_cw_even, Direction::Decrypt);
        let cw_odd = aes128_block(&sk, &ecm.enc_cw_odd, Direction::Decrypt);

        // Control words leave the card only under the session key.
        counts.aes += 2;
        let mut data = Vec::with_capacity(32);
        data.extend_from_slice(&aes128_block(&session_key, &cw_even, Direction::Encrypt));
        data.extend_from_slice(&aes128_block(&session_key, &cw_odd, Direction::Encrypt));
        ResponseApdu::with_data(data, sw::SUCCESS)
    }

    /// Diagnostics snapshot:
    /// entitlement_count(2) ‖ eeprom_used(4) ‖ sk_count(1) ‖ up to 8 ×
    /// (channel_id(2) ‖ generation(1)) ‖ up to 40 × (product_id(2) ‖
    /// expiry_day(2)). Counts are totals; the lists are truncated to fit a
    /// short APDU.
    fn handle_get_status(&mut self) -> ResponseApdu {
        if self.session.lifecycle == Lifecycle::Idle {
            return ResponseApdu::status(sw::CONDITIONS_NOT_SATISFIED);
        }
        let mut data = Vec::new();
        let ent_count = self.store.entitlements.len().min(u16::MAX as usize) as u16;
        data.extend_from_slice(&ent_count.to_be_bytes());
        data.extend_from_slice(&self.store.eeprom_used.to_be_bytes());
        data.push(self.store.service_keys.len().min(255) as u8);
        for (channel, sk) in self.store.service_keys.iter().take(8) {
            data.extend_from_slice(&channel.to_be_bytes());
            data.push(sk.generation);
        }
        for (&product, &expiry) in self.store.entitlements.iter().take(40) {
            data.extend_from_slice(&product.to_be_bytes());
            data.extend_from_slice(&expiry.to_be_bytes());
        }
        ResponseApdu::with_data(data, sw::SUCCESS)
    }
}

impl std::fmt::Debug for Card {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Card")
            .field("card_id", &self.store.card_id)
            .field("lifecycle", &self.session.lifecycle)
            .finish_non_exhaustive()
    }
}
