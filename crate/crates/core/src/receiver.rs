//! The set-top-box side: mutual authentication with the card, PID/address
//! filtering, ECM forwarding, and payload descrambling driven by one logical
//! clock.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::card::{
    Card, LatencyModel, CLA_CA, AUTH_PROOF_MASK, INS_AUTHENTICATE_1, INS_AUTHENTICATE_2,
    INS_GET_CARD_INFO, INS_PROCESS_ECM, INS_PROCESS_EMM, INS_SELECT,
};
use crate::codec::{
    decode_apdu_response, ecm_from_payload, emm_from_payload, encode_apdu_command, encode_ecm,
    sw, CodecError, CommandApdu, EmmAddress, ScramblingControl, TsPacket, ECM_TABLE_ID,
    EMM_TABLE_ID,
};
use crate::crypto::{
    aes128_block, kdf_session, rsa_apply, rsa_pad_nonce, rsa_to_bytes, Aes128Key, Direction,
    Prng,
};
use crate::keys::{packet_keystream, parity_of, ControlWord, Parity, SessionKey};

use num_bigint::BigUint;

/// Synchronous request/response channel to a card: raw command bytes in,
/// raw response bytes plus modelled elapsed milliseconds out.
pub trait ApduTransport {
    fn exchange_raw(&mut self, command: &[u8]) -> (Vec<u8>, u64);
}

impl ApduTransport for Card {
    fn exchange_raw(&mut self, command: &[u8]) -> (Vec<u8>, u64) {
        self.process_raw(command)
    }
}

/// Wraps a transport and records `>`/`<` hex trace lines per exchange.
pub struct TracingTransport<T> {
    inner: T,
    lines: Vec<String>,
}

impl<T> TracingTransport<T> {
    pub fn new(inner: T) -> Self {
        Self { inner, lines: Vec::new() }
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn into_parts(self) -> (T, Vec<String>) {
        (self.inner, self.lines)
    }

    pub fn inner_mut(&mut self) -> &mut T {
        &mut self.inner
    }
}

impl<T: ApduTransport> ApduTransport for TracingTransport<T> {
    fn exchange_raw(&mut self, command: &[u8]) -> (Vec<u8>, u64) {
        self.lines.push(crate::codec::trace_command_line(command));
        let (response, elapsed) = self.inner.exchange_raw(command);
        self.lines.push(crate::codec::trace_response_line(&response));
        (response, elapsed)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AuthError {
    #[error("{step} answered with status {sw:04x}")]
    Status { step: &'static str, sw: u16 },
    #[error("{step} returned a malformed response")]
    Malformed { step: &'static str },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReceiverError {
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// When a control word became usable, per crypto period.
pub type CwDeliveries = BTreeMap<u32, u64>;

/// Counters a scenario run reports on.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescrambleMetrics {
    pub packets_total: u64,
    /// Scrambled packets successfully descrambled.
    pub packets_clear_ok: u64,
    /// Scrambled packets dropped because no fresh matching-parity control
    /// word was loaded.
    pub packets_gap: u64,
    /// Everything else: signalling consumed by the receiver and traffic that
    /// was already clear.
    pub packets_passthrough: u64,
    pub auth_elapsed_ms: u64,
    /// Card round-trip time of every forwarded ECM.
    pub ecm_latencies_ms: Vec<u64>,
    /// Status-word histogram of ECM responses, keyed by hex status.
    pub ecm_responses: BTreeMap<String, u64>,
    /// First time each period's control word was loaded.
    pub cw_deliveries: CwDeliveries,
    pub first_ecm_period: Option<u32>,
    pub last_ecm_period: Option<u32>,
}

#[derive(Debug, Clone, Copy)]
struct CwSlot {
    cw: ControlWord,
    period_index: u32,
}

/// Receiver state machine. Holds only link-layer secrets (pairing secret and
/// the derived session key) — never individual or service keys.
pub struct Receiver {
    aid: Vec<u8>,
    pairing_secret: Aes128Key,
    latency: LatencyModel,
    stb_prng: Prng,
    card_id: Option<u32>,
    pid_ecm: Option<u16>,
    pid_emm: Option<u16>,
    pid_content: Option<u16>,
    channel_id: Option<u16>,
    current_period: Option<u32>,
    slot_even: Option<CwSlot>,
    slot_odd: Option<CwSlot>,
    session_key: Option<SessionKey>,
    forwarded: Option<(u32, u8)>,
    metrics: DescrambleMetrics,
}

impl Receiver {
    /// A receiver that discovers the ECM/EMM PIDs by sniffing table ids on
    /// clear packets.
    pub fn new(aid: Vec<u8>, pairing_secret: Aes128Key, latency: LatencyModel, stb_prng: Prng) -> Self {
        Self {
            aid,
            pairing_secret,
            latency,
            stb_prng,
            card_id: None,
            pid_ecm: None,
            pid_emm: None,
            pid_content: None,
            channel_id: None,
            current_period: None,
            slot_even: None,
            slot_odd: None,
            session_key: None,
            forwarded: None,
            metrics: DescrambleMetrics::default(),
        }
    }

    /// Pins the signalling PIDs up front instead of sniffing.
    pub fn with_pids(mut self, pid_ecm: u16, pid_emm: u16) -> Self {
        self.pid_ecm = Some(pid_ecm);
        self.pid_emm = Some(pid_emm);
        self
    }

    /// Restricts the receiver to one service: packets on any other PID than
    /// the pinned content and signalling PIDs are dropped unprocessed.
    pub fn with_content_pid(mut self, pid_content: u16) -> Self {
        self.pid_content = Some(pid_content);
        self
    }

    pub fn metrics(&self) -> &DescrambleMetrics {
        &self.metrics
    }

    pub fn session_key(&self) -> Option<&SessionKey> {
        self.session_key.as_ref()
    }

    pub fn card_id(&self) -> Option<u32> {
        self.card_id
    }

    fn exchange<T: ApduTransport>(
        card: &mut T,
        cmd: &CommandApdu,
        step: &'static str,
    ) -> Result<(crate::codec::ResponseApdu, u64), AuthError> {
        let bytes = encode_apdu_command(cmd).map_err(|_| AuthError::Malformed { step })?;
        let (raw, elapsed) = card.exchange_raw(&bytes);
        let resp = decode_apdu_response(&raw).map_err(|_| AuthError::Malformed { step })?;
        Ok((resp, elapsed))
    }

    /// Runs SELECT, GET CARD INFO, and the two authentication steps. On
    /// success both ends hold the same session key and the receiver knows
    /// the card id to filter EMMs by. The recorded elapsed time covers the
    /// four exchanges plus the receiver's own RSA encryption and nonce draw.
    pub fn auth_flow<T: ApduTransport>(&mut self, card: &mut T) -> Result<(), AuthError> {
        let mut elapsed_total = 0u64;

        let select = CommandApdu::with_data(0x00, INS_SELECT, 0x04, 0x00, self.aid.clone());
        let (resp, elapsed) = Self::exchange(card, &select, "select")?;
        elapsed_total += elapsed;
        if resp.sw() != sw::SUCCESS {
            return Err(AuthError::Status { step: "select", sw: resp.sw() });
        }

        let info = CommandApdu::expecting(CLA_CA, INS_GET_CARD_INFO, 0, 0, 136);
        let (resp, elapsed) = Self::exchange(card, &info, "get card info")?;
        elapsed_total += elapsed;
        if resp.sw() != sw::SUCCESS {
            return Err(AuthError::Status { step: "get card info", sw: resp.sw() });
        }
        if resp.data.len() != 136 {
            return Err(AuthError::Malformed { step: "get card info" });
        }
        let card_id = u32::from_be_bytes(resp.data[..4].try_into().unwrap());
        let modulus = BigUint::from_bytes_be(&resp.data[4..132]);
        let exponent = BigUint::from_bytes_be(&resp.data[132..136]);

        // Nonce draw and RSA encryption are the receiver-side costs of the
        // handshake; symmetric operations on the STB are not modelled.
        let n_stb = self.stb_prng.next_block();
        elapsed_total += self.latency.rng_ms;
        let ciphertext = rsa_apply(&exponent, &modulus, &rsa_pad_nonce(&n_stb))
            .map_err(|_| AuthError::Malformed { step: "authenticate-1" })?;
        elapsed_total += self.latency.rsa_ms;

        let auth1 = CommandApdu::with_data(
            CLA_CA,
            INS_AUTHENTICATE_1,
            0,
            0,
            rsa_to_bytes(&ciphertext).to_vec(),
        );
        let (resp, elapsed) = Self::exchange(card, &auth1, "authenticate-1")?;
        elapsed_total += elapsed;
        if resp.sw() != sw::SUCCESS {
            return Err(AuthError::Status { step: "authenticate-1", sw: resp.sw() });
        }
        let wrapped: [u8; 16] = resp
            .data
            .as_slice()
            .try_into()
            .map_err(|_| AuthError::Malformed { step: "authenticate-1" })?;
        let n_card = aes128_block(&Aes128Key::new(n_stb), &wrapped, Direction::Decrypt);
        let session = kdf_session(&n_stb, &n_card, &self.pairing_secret);

        let mut masked = n_card;
        for b in &mut masked {
            *b ^= AUTH_PROOF_MASK;
        }
        let proof = aes128_block(&session, &masked, Direction::Encrypt);
        let auth2 = CommandApdu::with_data(CLA_CA, INS_AUTHENTICATE_2, 0, 0, proof.to_vec());
        let (resp, elapsed) = Self::exchange(card, &auth2, "authenticate-2")?;
        elapsed_total += elapsed;
        if resp.sw() != sw::SUCCESS {
            return Err(AuthError::Status { step: "authenticate-2", sw: resp.sw() });
        }

        self.card_id = Some(card_id);
        self.session_key = Some(SessionKey::from_kdf(session));
        self.metrics.auth_elapsed_ms = elapsed_total;
        Ok(())
    }

    /// Demultiplexes one packet: signalling is decoded and forwarded to the
    /// card, content is descrambled when a fresh control word is loaded.
    /// Returns the clear packet for content, `None` for consumed signalling
    /// or gaps.
    pub fn on_packet<T: ApduTransport>(
        &mut self,
        packet: &TsPacket,
        card: &mut T,
        now_ms: u64,
    ) -> Result<Option<TsPacket>, ReceiverError> {
        self.metrics.packets_total += 1;
        self.sniff_pids(packet);

        if self.pid_ecm == Some(packet.pid) {
            self.metrics.packets_passthrough += 1;
            self.handle_ecm(packet, card, now_ms)?;
            return Ok(None);
        }
        if self.pid_emm == Some(packet.pid) {
            self.metrics.packets_passthrough += 1;
            self.handle_emm(packet, card)?;
            return Ok(None);
        }
        if let Some(pid_content) = self.pid_content {
            if packet.pid != pid_content {
                self.metrics.packets_passthrough += 1;
                return Ok(None);
            }
        }

        match packet.scrambling_control.parity() {
            None => {
                self.metrics.packets_passthrough += 1;
                Ok(Some(packet.clone()))
            }
            Some(parity) => match self.usable_slot(parity) {
                Some(slot) => {
                    let channel = self.channel_id.expect("slots imply a known channel");
                    let clear = descramble_packet(packet, &slot.cw, channel, slot.period_index);
                    self.metrics.packets_clear_ok += 1;
                    Ok(Some(clear))
                }
                None => {
                    self.metrics.packets_gap += 1;
                    Ok(None)
                }
            },
        }
    }

    /// The slot for a parity, if loaded and not stale. A slot is fresh while
    /// its period is the current ECM period or the next one.
    fn usable_slot(&self, parity: Parity) -> Option<CwSlot> {
        let slot = match parity {
            Parity::Even => self.slot_even,
            Parity::Odd => self.slot_odd,
        }?;
        let current = self.current_period?;
        (slot.period_index >= current).then_some(slot)
    }

    fn sniff_pids(&mut self, packet: &TsPacket) {
        if packet.scrambling_control != ScramblingControl::Clear {
            return;
        }
        if self.pid_ecm.is_none()
            && packet.payload[0] == ECM_TABLE_ID
            && ecm_from_payload(&packet.payload).is_ok()
        {
            self.pid_ecm = Some(packet.pid);
        }
        if self.pid_emm.is_none()
            && packet.payload[0] == EMM_TABLE_ID
            && emm_from_payload(&packet.payload).is_ok()
        {
            self.pid_emm = Some(packet.pid);
        }
    }

    fn handle_ecm<T: ApduTransport>(
        &mut self,
        packet: &TsPacket,
        card: &mut T,
        now_ms: u64,
    ) -> Result<(), ReceiverError> {
        let ecm = ecm_from_payload(&packet.payload)?;
        self.channel_id = Some(ecm.channel_id);
        self.current_period = Some(self.current_period.unwrap_or(0).max(ecm.period_index));
        if self.metrics.first_ecm_period.is_none() {
            self.metrics.first_ecm_period = Some(ecm.period_index);
        }
        self.metrics.last_ecm_period = Some(ecm.period_index);

        // One forward per (period, generation); the head-end repeats ECMs
        // for join latency, not for reprocessing.
        if self.forwarded == Some((ecm.period_index, ecm.sk_generation)) {
            return Ok(());
        }
        let Some(session) = self.session_key else {
            return Ok(());
        };
        self.forwarded = Some((ecm.period_index, ecm.sk_generation));

        let cmd = CommandApdu::with_data(CLA_CA, INS_PROCESS_ECM, 0, 0, encode_ecm(&ecm).to_vec());
        let Ok((resp, elapsed)) = Self::exchange(card, &cmd, "process ecm") else {
            return Ok(());
        };
        self.metrics.ecm_latencies_ms.push(elapsed);
        *self
            .metrics
            .ecm_responses
            .entry(format!("{:04x}", resp.sw()))
            .or_insert(0) += 1;

        if resp.sw() != sw::SUCCESS || resp.data.len() != 32 {
            return Ok(());
        }
        let even: [u8; 16] = resp.data[..16].try_into().unwrap();
        let odd: [u8; 16] = resp.data[16..].try_into().unwrap();
        let cw_even = ControlWord::from_bytes(aes128_block(session.key(), &even, Direction::Decrypt));
        let cw_odd = ControlWord::from_bytes(aes128_block(session.key(), &odd, Direction::Decrypt));

        let (period_even, period_odd) = match parity_of(ecm.period_index) {
            Parity::Even => (ecm.period_index, ecm.period_index + 1),
            Parity::Odd => (ecm.period_index + 1, ecm.period_index),
        };
        self.slot_even = Some(CwSlot { cw: cw_even, period_index: period_even });
        self.slot_odd = Some(CwSlot { cw: cw_odd, period_index: period_odd });
        self.metrics.cw_deliveries.entry(period_even).or_insert(now_ms);
        self.metrics.cw_deliveries.entry(period_odd).or_insert(now_ms);
        Ok(())
    }

    fn handle_emm<T: ApduTransport>(
        &mut self,
        packet: &TsPacket,
        card: &mut T,
    ) -> Result<(), ReceiverError> {
        let emm = emm_from_payload(&packet.payload)?;
        let forward = match emm.address {
            EmmAddress::Global => true,
            EmmAddress::Unique(id) => self.card_id == Some(id),
        };
        if !forward {
            return Ok(());
        }
        let bytes = crate::codec::encode_emm(&emm)?;
        let cmd = CommandApdu::with_data(CLA_CA, INS_PROCESS_EMM, 0, 0, bytes);
        let _ = Self::exchange(card, &cmd, "process emm");
        Ok(())
    }
}

impl std::fmt::Debug for Receiver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Receiver")
            .field("card_id", &self.card_id)
            .field("pid_ecm", &self.pid_ecm)
            .field("pid_emm", &self.pid_emm)
            .field("channel_id", &self.channel_id)
            .field("current_period", &self.current_period)
            .field("authenticated", &self.session_key.is_some())
            .field("metrics", &self.metrics)
            .finish()
    }
}

/// Exact inverse of the head-end scrambler: XORs the same keystream and
/// resets the scrambling control to clear.
pub fn descramble_packet(
    p: &TsPacket,
    cw: &ControlWord,
    channel_id: u16,
    period_index: u32,
) -> TsPacket {
    let keystream = packet_keystream(cw, channel_id, period_index, p.continuity);
    let mut out = p.clone();
    for (b, k) in out.payload.iter_mut().zip(&keystream) {
        *b ^= k;
    }
    out.scrambling_control = ScramblingControl::Clear;
    out
}
