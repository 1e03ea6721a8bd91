//! Scenario definition: everything a run needs, pinned by one master seed so
//! re-running reproduces every byte.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::card::{CardProvisioning, LatencyModel};
use crate::codec::Entitlement;
use crate::crypto::Aes128Key;
use crate::headend::{ChannelPlan, SubscriberRecord};

/// Deadline budgets the report is judged against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budgets {
    pub auth_budget_ms: u64,
    pub ecm_roundtrip_budget_ms: u64,
}

impl Default for Budgets {
    fn default() -> Self {
        Self { auth_budget_ms: 3_000, ecm_roundtrip_budget_ms: 100 }
    }
}

/// One card in a scenario and its initial grants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardSpec {
    pub card_id: u32,
    #[serde(default)]
    pub entitlements: Vec<Entitlement>,
}

/// One receiver, tuned to one channel with one card inserted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceiverSpec {
    pub card_id: u32,
    pub channel_id: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScenarioEvent {
    Grant { card_id: u32, product_id: u16, expiry_day: u16 },
    Revoke { card_id: u32, product_id: u16 },
    Rekey { channel_id: u16 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub at_ms: u64,
    #[serde(flatten)]
    pub event: ScenarioEvent,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid scenario: {}", problems.join("; "))]
pub struct ScenarioError {
    pub problems: Vec<String>,
}

/// A full simulation input. JSON-serializable; the master seed is carried
/// as 32 hex digits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(rename = "master_seed_hex", with = "seed_hex")]
    pub master_seed: Aes128Key,
    pub duration_ms: u64,
    #[serde(default = "default_tick_ms")]
    pub tick_ms: u64,
    #[serde(default)]
    pub latency: LatencyModel,
    #[serde(default)]
    pub budgets: Budgets,
    pub channels: Vec<ChannelPlan>,
    pub cards: Vec<CardSpec>,
    pub receivers: Vec<ReceiverSpec>,
    #[serde(default)]
    pub events: Vec<TimedEvent>,
}

fn default_tick_ms() -> u64 {
    10
}

impl Scenario {
    /// The canonical happy-path scenario: one channel, one entitled card,
    /// sixty simulated seconds at the default cadences.
    pub fn entitled_default(master_seed: Aes128Key) -> Self {
        Self {
            master_seed,
            duration_ms: 60_000,
            tick_ms: default_tick_ms(),
            latency: LatencyModel::default(),
            budgets: Budgets::default(),
            channels: vec![ChannelPlan::for_channel(1)],
            cards: vec![CardSpec {
                card_id: 1001,
                entitlements: vec![Entitlement { product_id: 1, expiry_day: 365 }],
            }],
            receivers: vec![ReceiverSpec { card_id: 1001, channel_id: 1 }],
            events: Vec::new(),
        }
    }

    /// Same shape, but the card's only entitlement is for a product the
    /// channel never broadcasts: it still receives service keys but every
    /// ECM must be refused.
    pub fn unentitled_default(master_seed: Aes128Key) -> Self {
        let mut scenario = Self::entitled_default(master_seed);
        scenario.cards[0].entitlements = vec![Entitlement { product_id: 999, expiry_day: 365 }];
        scenario
    }

    /// Happy path with a revocation plus service-key rotation at 30 s.
    pub fn revocation_default(master_seed: Aes128Key) -> Self {
        let mut scenario = Self::entitled_default(master_seed);
        scenario.events = vec![
            TimedEvent { at_ms: 30_000, event: ScenarioEvent::Revoke { card_id: 1001, product_id: 1 } },
            TimedEvent { at_ms: 30_000, event: ScenarioEvent::Rekey { channel_id: 1 } },
        ];
        scenario
    }

    pub fn to_json(&self) -> String {
        let mut json = serde_json::to_string_pretty(self).expect("scenario serializes");
        json.push('\n');
        json
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }

    /// Checks the whole scenario and reports every problem at once.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut problems = Vec::new();

        if self.duration_ms == 0 {
            problems.push("duration_ms must be positive".into());
        }
        if self.tick_ms == 0 {
            problems.push("tick_ms must be positive".into());
        }
        if self.channels.is_empty() {
            problems.push("at least one channel is required".into());
        }

        let mut channel_ids = std::collections::BTreeSet::new();
        let mut pids = std::collections::BTreeSet::new();
        for plan in &self.channels {
            if let Err(problem) = plan.validate() {
                problems.push(problem);
            }
            if !channel_ids.insert(plan.channel_id) {
                problems.push(format!("duplicate channel id {}", plan.channel_id));
            }
            for pid in [plan.pid_content, plan.pid_ecm, plan.pid_emm] {
                if !pids.insert(pid) {
                    problems.push(format!("pid {pid:#05x} is used by more than one stream"));
                }
            }
        }

        let mut card_ids = std::collections::BTreeSet::new();
        for card in &self.cards {
            if !card_ids.insert(card.card_id) {
                problems.push(format!("duplicate card id {}", card.card_id));
            }
            if card.entitlements.len() > crate::codec::EMM_MAX_ENTITLEMENTS {
                problems.push(format!(
                    "card {} starts with more than {} entitlements",
                    card.card_id,
                    crate::codec::EMM_MAX_ENTITLEMENTS
                ));
            }
            if card.card_id == 0xFFFF_FFFF {
                problems.push("card id 0xffffffff is reserved for global addressing".into());
            }
        }

        let mut receiver_cards = std::collections::BTreeSet::new();
        for r in &self.receivers {
            if !card_ids.contains(&r.card_id) {
                problems.push(format!("receiver references unknown card {}", r.card_id));
            }
            if !channel_ids.contains(&r.channel_id) {
                problems.push(format!("receiver references unknown channel {}", r.channel_id));
            }
            if !receiver_cards.insert(r.card_id) {
                problems.push(format!("card {} is inserted in more than one receiver", r.card_id));
            }
        }

        for e in &self.events {
            let referenced_card = match e.event {
                ScenarioEvent::Grant { card_id, .. } | ScenarioEvent::Revoke { card_id, .. } => {
                    Some(card_id)
                }
                ScenarioEvent::Rekey { .. } => None,
            };
            if let Some(card_id) = referenced_card {
                if !card_ids.contains(&card_id) {
                    problems.push(format!("event at {} ms references unknown card {card_id}", e.at_ms));
                }
            }
            if let ScenarioEvent::Rekey { channel_id } = e.event {
                if !channel_ids.contains(&channel_id) {
                    problems.push(format!(
                        "event at {} ms references unknown channel {channel_id}",
                        e.at_ms
                    ));
                }
            }
        }

        if problems.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError { problems })
        }
    }
}

/// Builds the head-end's view of a provisioned card.
pub fn subscriber_record(
    provisioning: &CardProvisioning,
    entitlements: Vec<Entitlement>,
) -> SubscriberRecord {
    SubscriberRecord {
        card_id: provisioning.card_id,
        individual_key: provisioning.individual_key,
        entitlements,
        pairing_secret: provisioning.pairing_secret,
        rsa_public: provisioning.rsa.public().clone(),
    }
}

mod seed_hex {
    use super::Aes128Key;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(key: &Aes128Key, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(key.as_bytes()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Aes128Key, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = hex::decode(&text).map_err(serde::de::Error::custom)?;
        Aes128Key::from_slice(&bytes).map_err(serde::de::Error::custom)
    }
}
