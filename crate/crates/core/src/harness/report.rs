//! Deadline verification and the run report.

use serde::{Deserialize, Serialize};

use crate::receiver::DescrambleMetrics;

use super::scenario::Budgets;

/// Pass/fail results of the three timing checks for one receiver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeadlineVerdicts {
    /// Authentication finished within the budget.
    pub auth_within_budget: bool,
    /// Every forwarded ECM round trip fit the budget.
    pub ecm_roundtrips_within_budget: bool,
    /// Each period's control word was loaded before the period began.
    pub cw_before_each_boundary: bool,
}

impl DeadlineVerdicts {
    pub fn all_pass(&self) -> bool {
        self.auth_within_budget && self.ecm_roundtrips_within_budget && self.cw_before_each_boundary
    }
}

/// Judges one receiver's recorded metrics against the budgets. The
/// control-word check covers every period after the first ECM was seen: its
/// word must have been delivered strictly before the period boundary.
pub fn verify_deadlines(
    metrics: &DescrambleMetrics,
    budgets: &Budgets,
    period_ms: u64,
) -> DeadlineVerdicts {
    let auth_within_budget = metrics.auth_elapsed_ms <= budgets.auth_budget_ms;
    let ecm_roundtrips_within_budget = metrics
        .ecm_latencies_ms
        .iter()
        .all(|&l| l <= budgets.ecm_roundtrip_budget_ms);

    let cw_before_each_boundary = match (metrics.first_ecm_period, metrics.last_ecm_period) {
        (Some(first), Some(last)) => (first + 1..=last).all(|period| {
            metrics
                .cw_deliveries
                .get(&period)
                .is_some_and(|&at| at < u64::from(period) * period_ms)
        }),
        _ => false,
    };

    DeadlineVerdicts {
        auth_within_budget,
        ecm_roundtrips_within_budget,
        cw_before_each_boundary,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceiverReport {
    pub card_id: u32,
    pub channel_id: u16,
    pub trace_file: String,
    pub metrics: DescrambleMetrics,
    pub verdicts: DeadlineVerdicts,
}

/// Whole-run report; serialized with stable field and key order so equal
/// runs produce identical bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub master_seed_hex: String,
    pub duration_ms: u64,
    pub budgets: Budgets,
    pub receivers: Vec<ReceiverReport>,
    pub pass: bool,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut json = serde_json::to_string_pretty(self).expect("report serializes");
        json.push('\n');
        json
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }

    /// One human-readable line per verdict, for CLI output.
    pub fn verdict_lines(&self) -> Vec<String> {
        let mut lines = Vec::new();
        for r in &self.receivers {
            let v = &r.verdicts;
            lines.push(format!(
                "card {} auth_within_budget: {} ({} ms <= {} ms)",
                r.card_id,
                pass_str(v.auth_within_budget),
                r.metrics.auth_elapsed_ms,
                self.budgets.auth_budget_ms
            ));
            let worst = r.metrics.ecm_latencies_ms.iter().max().copied().unwrap_or(0);
            lines.push(format!(
                "card {} ecm_roundtrips_within_budget: {} (worst {} ms <= {} ms over {} forwards)",
                r.card_id,
                pass_str(v.ecm_roundtrips_within_budget),
                worst,
                self.budgets.ecm_roundtrip_budget_ms,
                r.metrics.ecm_latencies_ms.len()
            ));
            lines.push(format!(
                "card {} cw_before_each_boundary: {}",
                r.card_id,
                pass_str(v.cw_before_each_boundary)
            ));
        }
        lines.push(format!("overall: {}", pass_str(self.pass)));
        lines
    }
}

fn pass_str(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "FAIL"
    }
}
