//! Subscriber database: the SMS side holding individual keys, pairing
//! secrets, card public keys, and entitlements. Persists to a JSON list.

use std::collections::BTreeMap;
use std::path::Path;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Entitlement;
use crate::crypto::{Aes128Key, RsaPublicKey, TdesKey};
use crate::keys::IndividualKey;

use super::HeadendError;

/// One subscriber as known to the head-end.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubscriberRecord {
    pub card_id: u32,
    pub individual_key: IndividualKey,
    pub entitlements: Vec<Entitlement>,
    pub pairing_secret: Aes128Key,
    pub rsa_public: RsaPublicKey,
}

impl SubscriberRecord {
    pub fn entitled_to(&self, product_id: u16) -> bool {
        self.entitlements.iter().any(|e| e.product_id == product_id)
    }
}

#[derive(Debug, Error)]
pub enum DbPersistError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("record {card_id}: {problem}")]
    BadRecord { card_id: u32, problem: String },
}

/// Subscriber records keyed by card id. Iteration order is the card-id
/// order, which keeps EMM scheduling and persistence deterministic.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SubscriberDb {
    records: BTreeMap<u32, SubscriberRecord>,
}

impl SubscriberDb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, card_id: u32) -> Option<&SubscriberRecord> {
        self.records.get(&card_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &SubscriberRecord> {
        self.records.values()
    }

    pub fn register(&mut self, record: SubscriberRecord) -> Result<(), HeadendError> {
        if self.records.contains_key(&record.card_id) {
            return Err(HeadendError::Duplicate(record.card_id));
        }
        self.records.insert(record.card_id, record);
        Ok(())
    }

    /// Grants or refreshes one entitlement; an existing grant for the same
    /// product is overwritten rather than duplicated.
    pub fn grant(
        &mut self,
        card_id: u32,
        product_id: u16,
        expiry_day: u16,
    ) -> Result<(), HeadendError> {
        let record = self
            .records
            .get_mut(&card_id)
            .ok_or(HeadendError::NotFound(card_id))?;
        match record
            .entitlements
            .iter_mut()
            .find(|e| e.product_id == product_id)
        {
            Some(e) => e.expiry_day = expiry_day,
            None => {
                record.entitlements.push(Entitlement { product_id, expiry_day });
                record.entitlements.sort();
            }
        }
        Ok(())
    }

    /// Removes every entitlement for the product.
    pub fn revoke(&mut self, card_id: u32, product_id: u16) -> Result<(), HeadendError> {
        let record = self
            .records
            .get_mut(&card_id)
            .ok_or(HeadendError::NotFound(card_id))?;
        record.entitlements.retain(|e| e.product_id != product_id);
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let entries: Vec<DbEntry> = self.records.values().map(DbEntry::from).collect();
        let mut json = serde_json::to_string_pretty(&entries).expect("db serializes");
        json.push('\n');
        json
    }

    pub fn from_json(json: &str) -> Result<Self, DbPersistError> {
        let entries: Vec<DbEntry> = serde_json::from_str(json)?;
        let mut db = Self::new();
        for entry in entries {
            let card_id = entry.card_id;
            let record = entry.into_record().map_err(|problem| {
                DbPersistError::BadRecord { card_id, problem }
            })?;
            if db.records.insert(record.card_id, record).is_some() {
                return Err(DbPersistError::BadRecord {
                    card_id,
                    problem: "duplicate card id".into(),
                });
            }
        }
        Ok(db)
    }

    pub fn save(&self, path: &Path) -> Result<(), DbPersistError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DbPersistError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Wire form of one subscriber record in the JSON file.
#[derive(Serialize, Deserialize)]
struct DbEntry {
    card_id: u32,
    ik_hex: String,
    pairing_hex: String,
    rsa_n_hex: String,
    rsa_e: u64,
    entitlements: Vec<Entitlement>,
}

impl From<&SubscriberRecord> for DbEntry {
    fn from(r: &SubscriberRecord) -> Self {
        Self {
            card_id: r.card_id,
            ik_hex: hex::encode(r.individual_key.key.as_bytes()),
            pairing_hex: hex::encode(r.pairing_secret.as_bytes()),
            rsa_n_hex: hex::encode(r.rsa_public.modulus_bytes()),
            rsa_e: biguint_to_u64(&r.rsa_public.exponent),
            entitlements: r.entitlements.clone(),
        }
    }
}

impl DbEntry {
    fn into_record(self) -> Result<SubscriberRecord, String> {
        let ik = decode_hex_key(&self.ik_hex)?;
        let pairing = decode_hex_key(&self.pairing_hex)?;
        let modulus_bytes = hex::decode(&self.rsa_n_hex).map_err(|e| e.to_string())?;
        let mut entitlements = self.entitlements;
        entitlements.sort();
        Ok(SubscriberRecord {
            card_id: self.card_id,
            individual_key: IndividualKey {
                key: TdesKey::from_slice(&ik).map_err(|e| e.to_string())?,
                card_id: self.card_id,
            },
            entitlements,
            pairing_secret: Aes128Key::from_slice(&pairing).map_err(|e| e.to_string())?,
            rsa_public: RsaPublicKey {
                modulus: BigUint::from_bytes_be(&modulus_bytes),
                exponent: BigUint::from(self.rsa_e),
            },
        })
    }
}

fn decode_hex_key(hex_str: &str) -> Result<Vec<u8>, String> {
    hex::decode(hex_str).map_err(|e| e.to_string())
}

fn biguint_to_u64(n: &BigUint) -> u64 {
    n.iter_u64_digits().next().unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keys::{individual_key_generate, pairing_secret_generate};

    fn record(card_id: u32) -> SubscriberRecord {
        let master = Aes128Key::new([9; 16]);
        SubscriberRecord {
            card_id,
            individual_key: individual_key_generate(&master, card_id),
            entitlements: Vec::new(),
            pairing_secret: pairing_secret_generate(&master, card_id),
            rsa_public: RsaPublicKey {
                modulus: BigUint::from(0xC0FFEEu32) << 1000,
                exponent: 65537u32.into(),
            },
        }
    }

    #[test]
    fn register_then_duplicate() {
        let mut db = SubscriberDb::new();
        db.register(record(1)).unwrap();
        assert_eq!(db.len(), 1);
        assert_eq!(db.register(record(1)), Err(HeadendError::Duplicate(1)));
        assert_eq!(db.len(), 1);
    }

    #[test]
    fn grant_revoke_restores_initial_state() {
        let mut db = SubscriberDb::new();
        db.register(record(1)).unwrap();
        let before = db.get(1).unwrap().entitlements.clone();
        db.grant(1, 7, 100).unwrap();
        assert!(db.get(1).unwrap().entitled_to(7));
        db.revoke(1, 7).unwrap();
        assert_eq!(db.get(1).unwrap().entitlements, before);
    }

    #[test]
    fn regrant_overwrites_expiry_without_duplicates() {
        let mut db = SubscriberDb::new();
        db.register(record(1)).unwrap();
        db.grant(1, 7, 100).unwrap();
        db.grant(1, 7, 200).unwrap();
        let ents = &db.get(1).unwrap().entitlements;
        assert_eq!(ents.len(), 1);
        assert_eq!(ents[0].expiry_day, 200);
    }

    #[test]
    fn unknown_card_is_not_found() {
        let mut db = SubscriberDb::new();
        assert_eq!(db.grant(5, 1, 1), Err(HeadendError::NotFound(5)));
        assert_eq!(db.revoke(5, 1), Err(HeadendError::NotFound(5)));
    }

    #[test]
    fn json_round_trip_preserves_equality() {
        let mut db = SubscriberDb::new();
        db.register(record(1)).unwrap();
        db.register(record(2)).unwrap();
        db.grant(2, 3, 42).unwrap();
        let reloaded = SubscriberDb::from_json(&db.to_json()).unwrap();
        assert_eq!(reloaded, db);
    }
}
