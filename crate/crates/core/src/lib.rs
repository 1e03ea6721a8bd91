//! Desk-scale conditional access system simulator for pay-TV: a head-end
//! that scrambles content and emits entitlement messages, a virtual ISO 7816
//! smart card running the access-control state machine, a receiver that
//! filters, authenticates, and descrambles, and a harness that replays the
//! whole pipeline deterministically from one seed and checks its timing
//! budgets against an injected latency model.

pub mod card;
pub mod codec;
pub mod crypto;
pub mod harness;
pub mod headend;
pub mod keys;
pub mod receiver;

pub use card::{Card, CardProvisioning, LatencyModel};
pub use codec::{CommandApdu, Ecm, Emm, Entitlement, ResponseApdu, TsPacket};
pub use harness::{run_scenario, Budgets, Report, Scenario};
pub use headend::{ChannelPlan, Mux, SubscriberDb, SubscriberRecord};
pub use keys::{ControlWord, IndividualKey, Parity, ServiceKey, SessionKey};
pub use receiver::{DescrambleMetrics, Receiver};
