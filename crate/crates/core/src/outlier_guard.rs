//! Performance-based outlier suspension.
//!
//! A round qualifies when global accuracy drops by at least `Acc_th` percent,
//! or global loss rises by at least `Loss_th` percent, relative to the
//! previous round. Every participant of a qualifying round accumulates one
//! count; a client whose cumulative count reaches `X_n` is suspended for the
//! next `ST_n` rounds and its count starts over.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{ClientId, Round};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GuardError {
    #[error("invalid guard config: {0}")]
    InvalidConfig(String),
    #[error("performance event for round {got} arrived, expected round {expected}")]
    OutOfOrder { expected: Round, got: Round },
    #[error("unknown client {0}")]
    UnknownClient(ClientId),
    #[error("non-finite metric in round {0}")]
    NonFinite(Round),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlagReason {
    #[serde(rename = "ACC_TH")]
    AccuracyDrop,
    #[serde(rename = "LOSS_TH")]
    LossRise,
}

impl FlagReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FlagReason::AccuracyDrop => "ACC_TH",
            FlagReason::LossRise => "LOSS_TH",
        }
    }
}

impl fmt::Display for FlagReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FlagReason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ACC_TH" => Ok(FlagReason::AccuracyDrop),
            "LOSS_TH" => Ok(FlagReason::LossRise),
            other => Err(format!("unknown flag reason {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardConfig {
    /// Relative accuracy decrease, in percent, that makes a round qualify.
    pub acc_threshold_pct: f64,
    /// Relative loss increase, in percent, that makes a round qualify.
    pub loss_threshold_pct: f64,
    /// Qualifying participations before suspension (`X_n`).
    pub qualifying_rounds: u32,
    /// Suspension length in rounds (`ST_n`).
    pub suspension_rounds: u32,
    /// Decrement participants' counts on clean rounds.
    pub decay_on_clean: bool,
}

impl Default for GuardConfig {
    fn default() -> Self {
        Self {
            acc_threshold_pct: 5.0,
            loss_threshold_pct: 5.0,
            qualifying_rounds: 3,
            suspension_rounds: 10,
            decay_on_clean: false,
        }
    }
}

impl GuardConfig {
    pub fn validate(&self) -> Result<(), GuardError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.acc_threshold_pct) || !positive(self.loss_threshold_pct) {
            return Err(GuardError::InvalidConfig(
                "thresholds must be positive".into(),
            ));
        }
        if self.qualifying_rounds < 1 || self.suspension_rounds < 1 {
            return Err(GuardError::InvalidConfig(
                "qualifying_rounds and suspension_rounds must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Global metrics observed after round `round` together with its participants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceEvent {
    pub round: Round,
    pub accuracy: f64,
    pub loss: f64,
    pub participants: Vec<ClientId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flag {
    pub round: Round,
    pub reason: FlagReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuspicionEntry {
    pub qualifying_round_count: u32,
    pub suspension_end: Option<Round>,
    pub flag_history: Vec<Flag>,
    pub times_suspended: u32,
}

/// Outcome of feeding one event to the ledger.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoundVerdict {
    /// Thresholds crossed this round; empty for a clean round.
    pub reasons: Vec<FlagReason>,
    pub newly_suspended: Vec<ClientId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Baseline {
    round: Round,
    accuracy: f64,
    loss: f64,
}

/// Per-client suspicion state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuspicionLedger {
    entries: Vec<SuspicionEntry>,
    baseline: Option<Baseline>,
}

/// Relative change of `current` against `previous`; zero when `previous` is not positive.
pub fn relative_change(previous: f64, current: f64) -> f64 {
    if previous > 0.0 {
        (current - previous) / previous
    } else {
        0.0
    }
}

impl SuspicionLedger {
    pub fn new(total_clients: usize) -> Self {
        Self {
            entries: vec![SuspicionEntry::default(); total_clients],
            baseline: None,
        }
    }

    pub fn entries(&self) -> &[SuspicionEntry] {
        &self.entries
    }

    pub fn entry(&self, client: ClientId) -> Result<&SuspicionEntry, GuardError> {
        self.entries
            .get(client.index())
            .ok_or(GuardError::UnknownClient(client))
    }

    /// Thresholds crossed between the stored baseline and `event`.
    pub fn crossed(&self, event: &PerformanceEvent, cfg: &GuardConfig) -> Vec<FlagReason> {
        let Some(prev) = self.baseline else {
            return Vec::new();
        };
        let mut reasons = Vec::new();
        if relative_change(prev.accuracy, event.accuracy) <= -cfg.acc_threshold_pct / 100.0 {
            reasons.push(FlagReason::AccuracyDrop);
        }
        if relative_change(prev.loss, event.loss) >= cfg.loss_threshold_pct / 100.0 {
            reasons.push(FlagReason::LossRise);
        }
        reasons
    }

    /// Feeds the metrics of one round. The first event only sets the baseline.
    pub fn record_round(
        &mut self,
        event: &PerformanceEvent,
        cfg: &GuardConfig,
    ) -> Result<RoundVerdict, GuardError> {
        cfg.validate()?;
        if let Some(prev) = self.baseline {
            if event.round != prev.round + 1 {
                return Err(GuardError::OutOfOrder {
                    expected: prev.round + 1,
                    got: event.round,
                });
            }
        }
        if !event.accuracy.is_finite() || !event.loss.is_finite() {
            return Err(GuardError::NonFinite(event.round));
        }
        if let Some(&bad) = event
            .participants
            .iter()
            .find(|id| id.index() >= self.entries.len())
        {
            return Err(GuardError::UnknownClient(bad));
        }

        let reasons = self.crossed(event, cfg);
        let mut verdict = RoundVerdict {
            reasons: reasons.clone(),
            newly_suspended: Vec::new(),
        };
        for &id in &event.participants {
            let entry = &mut self.entries[id.index()];
            if reasons.is_empty() {
                if cfg.decay_on_clean {
                    entry.qualifying_round_count = entry.qualifying_round_count.saturating_sub(1);
                }
                continue;
            }
            entry.qualifying_round_count += 1;
            entry
                .flag_history
                .extend(reasons.iter().map(|&reason| Flag {
                    round: event.round,
                    reason,
                }));
            if entry.qualifying_round_count >= cfg.qualifying_rounds {
                entry.qualifying_round_count = 0;
                entry.suspension_end = Some(event.round + cfg.suspension_rounds);
                entry.times_suspended += 1;
                verdict.newly_suspended.push(id);
            }
        }

        self.baseline = Some(Baseline {
            round: event.round,
            accuracy: event.accuracy,
            loss: event.loss,
        });
        Ok(verdict)
    }

    /// True iff the client has a suspension ending at or after `round`.
    pub fn is_suspended(&self, client: ClientId, round: Round) -> Result<bool, GuardError> {
        Ok(self
            .entry(client)?
            .suspension_end
            .is_some_and(|end| round <= end))
    }

    pub fn ever_suspended(&self) -> Vec<ClientId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.times_suspended > 0)
            .map(|(i, _)| ClientId(i as u32))
            .collect()
    }

    pub fn suspended_count(&self, round: Round) -> usize {
        self.entries
            .iter()
            .filter(|e| e.suspension_end.is_some_and(|end| round <= end))
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn event(round: Round, accuracy: f64, loss: f64, ids: &[u32]) -> PerformanceEvent {
        PerformanceEvent {
            round,
            accuracy,
            loss,
            participants: ids.iter().map(|&i| ClientId(i)).collect(),
        }
    }

    #[test]
    fn accuracy_drop_suspends_immediately_with_single_count() {
        let cfg = GuardConfig {
            qualifying_rounds: 1,
            ..GuardConfig::default()
        };
        let mut ledger = SuspicionLedger::new(10);
        ledger
            .record_round(&event(1, 0.60, 1.0, &[1, 2]), &cfg)
            .unwrap();
        // (0.55 - 0.60) / 0.60 = -0.0833 <= -0.05
        assert!(relative_change(0.60, 0.55) < -0.083);
        let v = ledger
            .record_round(&event(2, 0.55, 1.0, &[3, 7]), &cfg)
            .unwrap();
        assert_eq!(v.reasons, vec![FlagReason::AccuracyDrop]);
        assert_eq!(v.newly_suspended, vec![ClientId(3), ClientId(7)]);
        assert_eq!(ledger.entry(ClientId(3)).unwrap().suspension_end, Some(12));
        assert!(!ledger.is_suspended(ClientId(1), 3).unwrap());
    }

    #[test]
    fn improving_metrics_flag_nobody() {
        let cfg = GuardConfig::default();
        let mut ledger = SuspicionLedger::new(4);
        for (round, (acc, loss)) in [(0.3, 2.0), (0.4, 1.5), (0.5, 1.2), (0.7, 0.9)]
            .into_iter()
            .enumerate()
        {
            let v = ledger
                .record_round(&event(round as u32 + 1, acc, loss, &[0, 1, 2, 3]), &cfg)
                .unwrap();
            assert!(v.reasons.is_empty());
        }
        assert!(ledger
            .entries()
            .iter()
            .all(|e| e.qualifying_round_count == 0));
    }

    #[test]
    fn count_at_threshold_minus_one_triggers_suspension_and_resets() {
        let cfg = GuardConfig::default();
        let mut ledger = SuspicionLedger::new(2);
        ledger
            .record_round(&event(1, 0.5, 1.0, &[0]), &cfg)
            .unwrap();
        ledger
            .record_round(&event(2, 0.5, 1.2, &[0]), &cfg)
            .unwrap();
        ledger
            .record_round(&event(3, 0.5, 1.5, &[0]), &cfg)
            .unwrap();
        assert_eq!(ledger.entry(ClientId(0)).unwrap().qualifying_round_count, 2);
        let v = ledger
            .record_round(&event(4, 0.5, 1.9, &[0, 1]), &cfg)
            .unwrap();
        assert_eq!(v.reasons, vec![FlagReason::LossRise]);
        assert_eq!(v.newly_suspended, vec![ClientId(0)]);
        let e = ledger.entry(ClientId(0)).unwrap();
        assert_eq!(e.suspension_end, Some(4 + cfg.suspension_rounds));
        assert_eq!(e.qualifying_round_count, 0);
        assert_eq!(e.flag_history.len(), 3);
        assert_eq!(ledger.entry(ClientId(1)).unwrap().qualifying_round_count, 1);
    }

    #[test]
    fn suspension_boundary_is_inclusive() {
        let cfg = GuardConfig {
            qualifying_rounds: 1,
            suspension_rounds: 10,
            ..GuardConfig::default()
        };
        let mut ledger = SuspicionLedger::new(3);
        ledger.record_round(&event(1, 0.8, 0.5, &[]), &cfg).unwrap();
        ledger
            .record_round(&event(2, 0.5, 0.5, &[0]), &cfg)
            .unwrap();
        assert!(ledger.is_suspended(ClientId(0), 12).unwrap());
        assert!(!ledger.is_suspended(ClientId(0), 13).unwrap());
        assert!(!ledger.is_suspended(ClientId(2), 5).unwrap());
        assert_eq!(
            ledger.is_suspended(ClientId(9), 5),
            Err(GuardError::UnknownClient(ClientId(9)))
        );
    }

    #[test]
    fn both_thresholds_count_once_log_twice() {
        let cfg = GuardConfig::default();
        let mut ledger = SuspicionLedger::new(1);
        ledger
            .record_round(&event(1, 0.8, 0.5, &[0]), &cfg)
            .unwrap();
        let v = ledger
            .record_round(&event(2, 0.6, 0.9, &[0]), &cfg)
            .unwrap();
        assert_eq!(v.reasons.len(), 2);
        let e = ledger.entry(ClientId(0)).unwrap();
        assert_eq!(e.qualifying_round_count, 1);
        assert_eq!(e.flag_history.len(), 2);
    }

    #[test]
    fn out_of_order_events_rejected() {
        let cfg = GuardConfig::default();
        let mut ledger = SuspicionLedger::new(1);
        ledger
            .record_round(&event(1, 0.8, 0.5, &[0]), &cfg)
            .unwrap();
        assert_eq!(
            ledger.record_round(&event(3, 0.8, 0.5, &[0]), &cfg),
            Err(GuardError::OutOfOrder {
                expected: 2,
                got: 3
            })
        );
        assert_eq!(
            ledger.record_round(&event(1, 0.8, 0.5, &[0]), &cfg),
            Err(GuardError::OutOfOrder {
                expected: 2,
                got: 1
            })
        );
    }

    #[test]
    fn decay_on_clean_lowers_counts() {
        let cfg = GuardConfig {
            decay_on_clean: true,
            ..GuardConfig::default()
        };
        let mut ledger = SuspicionLedger::new(1);
        ledger
            .record_round(&event(1, 0.8, 0.5, &[0]), &cfg)
            .unwrap();
        ledger
            .record_round(&event(2, 0.7, 0.5, &[0]), &cfg)
            .unwrap();
        assert_eq!(ledger.entry(ClientId(0)).unwrap().qualifying_round_count, 1);
        ledger
            .record_round(&event(3, 0.8, 0.4, &[0]), &cfg)
            .unwrap();
        assert_eq!(ledger.entry(ClientId(0)).unwrap().qualifying_round_count, 0);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = GuardConfig {
            qualifying_rounds: 0,
            ..GuardConfig::default()
        };
        let mut ledger = SuspicionLedger::new(1);
        assert!(matches!(
            ledger.record_round(&event(1, 0.5, 0.5, &[0]), &cfg),
            Err(GuardError::InvalidConfig(_))
        ));
    }
}
