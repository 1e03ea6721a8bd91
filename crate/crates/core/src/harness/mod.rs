//! Scenario runner: wires head-end, cards, and receivers together under one
//! logical clock and judges the result against the timing budgets.

mod report;
mod scenario;

pub use report::{verify_deadlines, DeadlineVerdicts, ReceiverReport, Report};
pub use scenario::{
    subscriber_record, Budgets, CardSpec, ReceiverSpec, Scenario, ScenarioError, ScenarioEvent,
    TimedEvent,
};

use std::collections::BTreeMap;

use thiserror::Error;

use crate::card::{Card, CardProvisioning};
use crate::codec::encode_packet;
use crate::headend::{HeadendError, Mux, SubscriberDb};
use crate::keys::{domain_prng, KeyDomain};
use crate::receiver::{AuthError, Receiver, ReceiverError, TracingTransport};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Headend(#[from] HeadendError),
    #[error("card {card_id} authentication failed: {source}")]
    Auth {
        card_id: u32,
        #[source]
        source: AuthError,
    },
    #[error("card {card_id} receiver failed: {source}")]
    Receiver {
        card_id: u32,
        #[source]
        source: ReceiverError,
    },
    #[error(transparent)]
    Codec(#[from] crate::codec::CodecError),
}

/// Everything a run produces, in memory. The CLI decides what lands where
/// on disk; file contents are exactly these bytes.
pub struct ScenarioArtifacts {
    /// The broadcast stream: concatenated 188-octet packets.
    pub stream: Vec<u8>,
    /// Clear content reference per channel, same packet framing.
    pub clear_references: BTreeMap<u16, Vec<u8>>,
    /// Descrambled output per card, same packet framing.
    pub receiver_outputs: BTreeMap<u32, Vec<u8>>,
    /// APDU trace per card, one `>`/`<` line per transfer.
    pub traces: BTreeMap<u32, String>,
    /// The subscriber database as persisted JSON (initial state, before
    /// scheduled events).
    pub db_json: String,
    pub report: Report,
}

struct ReceiverRig {
    card_id: u32,
    channel_id: u16,
    receiver: Receiver,
    transport: TracingTransport<Card>,
    output: Vec<u8>,
}

/// Runs one scenario start to finish: provisioning, registration,
/// authentication, streaming, and deadline verification.
pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioArtifacts, HarnessError> {
    scenario.validate()?;
    let seed = scenario.master_seed;

    let mut provisionings: BTreeMap<u32, CardProvisioning> = BTreeMap::new();
    let mut db = SubscriberDb::new();
    for card in &scenario.cards {
        let provisioning = CardProvisioning::derive(&seed, card.card_id);
        db.register(subscriber_record(&provisioning, card.entitlements.clone()))?;
        provisionings.insert(card.card_id, provisioning);
    }
    let db_json = db.to_json();

    let mut muxes: BTreeMap<u16, Mux> = scenario
        .channels
        .iter()
        .map(|plan| (plan.channel_id, Mux::new(plan.clone(), seed)))
        .collect();

    let mut rigs: Vec<ReceiverRig> = Vec::new();
    for spec in &scenario.receivers {
        let provisioning = provisionings[&spec.card_id].clone();
        let plan = muxes[&spec.channel_id].plan().clone();
        let card = Card::new(
            provisioning.clone(),
            scenario.latency,
            domain_prng(&seed, KeyDomain::CardNonce, u64::from(spec.card_id)),
        );
        let receiver = Receiver::new(
            provisioning.aid.clone(),
            provisioning.pairing_secret,
            scenario.latency,
            domain_prng(&seed, KeyDomain::StbNonce, u64::from(spec.card_id)),
        )
        .with_pids(plan.pid_ecm, plan.pid_emm)
        .with_content_pid(plan.pid_content);
        rigs.push(ReceiverRig {
            card_id: spec.card_id,
            channel_id: spec.channel_id,
            receiver,
            transport: TracingTransport::new(card),
            output: Vec::new(),
        });
    }

    // Authentication happens at insertion, before the stream is consumed.
    for rig in &mut rigs {
        rig.receiver
            .auth_flow(&mut rig.transport)
            .map_err(|source| HarnessError::Auth { card_id: rig.card_id, source })?;
    }

    let mut events: Vec<&TimedEvent> = scenario.events.iter().collect();
    events.sort_by_key(|e| e.at_ms);
    let mut next_event = 0usize;

    let mut stream = Vec::new();
    let mut clear_references: BTreeMap<u16, Vec<u8>> =
        scenario.channels.iter().map(|p| (p.channel_id, Vec::new())).collect();

    let mut now_ms = 0;
    while now_ms < scenario.duration_ms {
        while next_event < events.len() && events[next_event].at_ms <= now_ms {
            match events[next_event].event {
                ScenarioEvent::Grant { card_id, product_id, expiry_day } => {
                    db.grant(card_id, product_id, expiry_day)?;
                }
                ScenarioEvent::Revoke { card_id, product_id } => {
                    db.revoke(card_id, product_id)?;
                }
                ScenarioEvent::Rekey { channel_id } => {
                    muxes.get_mut(&channel_id).expect("validated").rekey();
                }
            }
            next_event += 1;
        }

        for plan in &scenario.channels {
            let tick = muxes
                .get_mut(&plan.channel_id)
                .expect("validated")
                .tick(&db, now_ms)?;
            let clear_ref = clear_references.get_mut(&plan.channel_id).unwrap();
            for p in &tick.clear_content {
                clear_ref.extend_from_slice(&encode_packet(p)?);
            }
            for p in &tick.packets {
                stream.extend_from_slice(&encode_packet(p)?);
                for rig in &mut rigs {
                    let clear = rig
                        .receiver
                        .on_packet(p, &mut rig.transport, now_ms)
                        .map_err(|source| HarnessError::Receiver { card_id: rig.card_id, source })?;
                    if let Some(clear) = clear {
                        rig.output.extend_from_slice(&encode_packet(&clear)?);
                    }
                }
            }
        }
        now_ms += scenario.tick_ms;
    }

    let mut receiver_reports = Vec::new();
    let mut receiver_outputs = BTreeMap::new();
    let mut traces = BTreeMap::new();
    for rig in rigs {
        let period_ms = muxes[&rig.channel_id].plan().cw_period_ms;
        let metrics = rig.receiver.metrics().clone();
        let verdicts = verify_deadlines(&metrics, &scenario.budgets, period_ms);
        receiver_reports.push(ReceiverReport {
            card_id: rig.card_id,
            channel_id: rig.channel_id,
            trace_file: format!("card_{}.trace.log", rig.card_id),
            metrics,
            verdicts,
        });
        receiver_outputs.insert(rig.card_id, rig.output);
        let (_, lines) = rig.transport.into_parts();
        let mut trace = lines.join("\n");
        trace.push('\n');
        traces.insert(rig.card_id, trace);
    }

    let pass = receiver_reports.iter().all(|r| r.verdicts.all_pass());
    let report = Report {
        master_seed_hex: hex::encode(seed.as_bytes()),
        duration_ms: scenario.duration_ms,
        budgets: scenario.budgets,
        receivers: receiver_reports,
        pass,
    };

    Ok(ScenarioArtifacts {
        stream,
        clear_references,
        receiver_outputs,
        traces,
        db_json,
        report,
    })
}
