//! Card-resident state: the provisioning bundle burned in at
//! personalisation and the persistent store that survives resets.

use std::collections::BTreeMap;
use std::path::Path;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{Aes128Key, RsaKeyPair, TdesKey};
use crate::keys::{IndividualKey, ServiceKey};

/// EEPROM capacity in octets (72K).
pub const EEPROM_BUDGET: u32 = 73_728;
/// RAM capacity in octets (4K).
pub const RAM_BUDGET: u16 = 4_096;
/// EEPROM charged per stored entitlement.
pub const ENTITLEMENT_EEPROM_COST: u32 = 8;
/// EEPROM charged per stored service key.
pub const SERVICE_KEY_EEPROM_COST: u32 = 24;

/// AID of the conditional-access applet every simulated card installs.
pub const CA_APPLET_AID: [u8; 8] = [0xF0, 0x43, 0x41, 0x53, 0x53, 0x49, 0x4D, 0x31];

/// Personalisation data for one card.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CardProvisioning {
    pub card_id: u32,
    pub individual_key: IndividualKey,
    pub pairing_secret: Aes128Key,
    pub rsa: RsaKeyPair,
    pub aid: Vec<u8>,
}

impl CardProvisioning {
    /// Deterministically derives a card's personalisation bundle from the
    /// master seed; RSA generation draws from the card's own counter range.
    pub fn derive(master_seed: &Aes128Key, card_id: u32) -> Self {
        let mut rsa_prng = crate::keys::domain_prng(
            master_seed,
            crate::keys::KeyDomain::RsaGeneration,
            u64::from(card_id) << 32,
        );
        Self {
            card_id,
            individual_key: crate::keys::individual_key_generate(master_seed, card_id),
            pairing_secret: crate::keys::pairing_secret_generate(master_seed, card_id),
            rsa: RsaKeyPair::generate(&mut rsa_prng),
            aid: CA_APPLET_AID.to_vec(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ProvisioningError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("bad provisioning field: {0}")]
    BadField(String),
}

#[derive(Serialize, Deserialize)]
struct ProvisioningFile {
    card_id: u32,
    ik_hex: String,
    pairing_hex: String,
    rsa_n_hex: String,
    rsa_e: u64,
    rsa_d_hex: String,
    aid_hex: String,
}

impl CardProvisioning {
    pub fn to_json(&self) -> String {
        let file = ProvisioningFile {
            card_id: self.card_id,
            ik_hex: hex::encode(self.individual_key.key.as_bytes()),
            pairing_hex: hex::encode(self.pairing_secret.as_bytes()),
            rsa_n_hex: hex::encode(self.rsa.public().modulus_bytes()),
            rsa_e: self
                .rsa
                .public()
                .exponent
                .iter_u64_digits()
                .next()
                .unwrap_or(0),
            rsa_d_hex: self.rsa.private_exponent().to_str_radix(16),
            aid_hex: hex::encode(&self.aid),
        };
        let mut json = serde_json::to_string_pretty(&file).expect("provisioning serializes");
        json.push('\n');
        json
    }

    pub fn from_json(json: &str) -> Result<Self, ProvisioningError> {
        let file: ProvisioningFile = serde_json::from_str(json)?;
        let bad = |what: &str| ProvisioningError::BadField(what.to_string());
        let ik = hex::decode(&file.ik_hex).map_err(|_| bad("ik_hex"))?;
        let pairing = hex::decode(&file.pairing_hex).map_err(|_| bad("pairing_hex"))?;
        let n = hex::decode(&file.rsa_n_hex).map_err(|_| bad("rsa_n_hex"))?;
        let d = BigUint::parse_bytes(file.rsa_d_hex.as_bytes(), 16).ok_or_else(|| bad("rsa_d_hex"))?;
        let aid = hex::decode(&file.aid_hex).map_err(|_| bad("aid_hex"))?;
        Ok(Self {
            card_id: file.card_id,
            individual_key: IndividualKey {
                key: TdesKey::from_slice(&ik).map_err(|e| bad(&e.to_string()))?,
                card_id: file.card_id,
            },
            pairing_secret: Aes128Key::from_slice(&pairing).map_err(|e| bad(&e.to_string()))?,
            rsa: RsaKeyPair::from_parts(
                BigUint::from_bytes_be(&n),
                BigUint::from(file.rsa_e),
                d,
            ),
            aid,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ProvisioningError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ProvisioningError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Persistent (EEPROM) card state. Survives resets; every mutation charges
/// the EEPROM model and rejections must leave it bit-identical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CardPersistentStore {
    pub card_id: u32,
    pub individual_key: IndividualKey,
    pub pairing_secret: Aes128Key,
    pub rsa: RsaKeyPair,
    pub aid: Vec<u8>,
    pub service_keys: BTreeMap<u16, ServiceKey>,
    /// product id → expiry day
    pub entitlements: BTreeMap<u16, u16>,
    pub eeprom_used: u32,
    pub current_day: u16,
}

impl CardPersistentStore {
    pub fn from_provisioning(p: CardProvisioning) -> Self {
        Self {
            card_id: p.card_id,
            individual_key: p.individual_key,
            pairing_secret: p.pairing_secret,
            rsa: p.rsa,
            aid: p.aid,
            service_keys: BTreeMap::new(),
            entitlements: BTreeMap::new(),
            eeprom_used: 0,
            current_day: 0,
        }
    }

    /// EEPROM cost of merging the given service key and entitlements, given
    /// what is already stored. Replacements are free; only new slots charge.
    pub fn merge_cost(&self, channel_id: u16, entitlements: &[crate::codec::Entitlement]) -> u32 {
        let mut cost = 0;
        if !self.service_keys.contains_key(&channel_id) {
            cost += SERVICE_KEY_EEPROM_COST;
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in entitlements {
            if !self.entitlements.contains_key(&e.product_id) && seen.insert(e.product_id) {
                cost += ENTITLEMENT_EEPROM_COST;
            }
        }
        cost
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Entitlement;
    use crate::crypto::Prng;

    #[test]
    fn provisioning_json_round_trip() {
        let p = CardProvisioning::derive(&Aes128Key::new([0x77; 16]), 1001);
        let q = CardProvisioning::from_json(&p.to_json()).unwrap();
        assert_eq!(q, p);
    }

    #[test]
    fn derivation_is_deterministic_and_per_card() {
        let seed = Aes128Key::new([0x78; 16]);
        let a = CardProvisioning::derive(&seed, 1);
        let b = CardProvisioning::derive(&seed, 1);
        assert_eq!(a, b);
        let c = CardProvisioning::derive(&seed, 2);
        assert_ne!(a.individual_key.key.as_bytes(), c.individual_key.key.as_bytes());
        assert_ne!(a.rsa.public(), c.rsa.public());
    }

    #[test]
    fn merge_cost_counts_only_new_slots() {
        let mut store = CardPersistentStore::from_provisioning(CardProvisioning::derive(
            &Aes128Key::new([0x79; 16]),
            1,
        ));
        let ents = [
            Entitlement { product_id: 1, expiry_day: 10 },
            Entitlement { product_id: 2, expiry_day: 10 },
        ];
        assert_eq!(store.merge_cost(5, &ents), SERVICE_KEY_EEPROM_COST + 16);
        store.service_keys.insert(
            5,
            crate::keys::ServiceKey { key: Prng::new(Aes128Key::new([1; 16]), 0).next_key(), generation: 0 },
        );
        store.entitlements.insert(1, 10);
        assert_eq!(store.merge_cost(5, &ents), ENTITLEMENT_EEPROM_COST);
    }
}
