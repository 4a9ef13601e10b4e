//! Sampling equalizer: client tracker records and the per-round client
//! selection rule.
//!
//! Each round is planned in four steps, applied in order:
//!
//! 1. on every `lambda`-th round, up to `min(lambda_max, Slots_a)` clients that
//!    have never been selected are pulled in (ascending id);
//! 2. up to `min(m, remaining Slots_a)` clients whose gap reached `gap_max` and
//!    that are still under the participation cap are force-selected, largest
//!    gap first;
//! 3. the rest of the population is filtered on `gap_min`, the participation
//!    cap, suspension and availability;
//! 4. the remaining slots are filled uniformly at random, without replacement,
//!    from the filtered pool.
//!
//! All functions are pure: records go in, plans and new records come out.

use std::collections::HashSet;
use std::fmt;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{ClientId, Round};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectorError {
    #[error("invalid selection config: {0}")]
    InvalidConfig(String),
    #[error("tracker holds {actual} records but the config declares {expected} clients")]
    RecordCount { expected: usize, actual: usize },
    #[error("tracker record at position {position} belongs to client {found}")]
    RecordOrder { position: usize, found: ClientId },
    #[error("rounds are numbered from 1")]
    RoundZero,
    #[error("client {client} was selected but already reached the cap of {cap} selections")]
    CapExceeded { client: ClientId, cap: u32 },
    #[error("plan selects unknown client {0}")]
    UnknownClient(ClientId),
    #[error("plan selects client {0} more than once")]
    DuplicateSelection(ClientId),
}

/// Participation history of one client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientTrackerRecord {
    pub client_id: ClientId,
    /// Number of rounds the client was selected in (`T_i`).
    pub times_selected: u32,
    /// Consecutive rounds not selected since the last selection, or since
    /// round 0 for a client that was never selected (`G_i`).
    pub gap: u32,
    pub ever_selected: bool,
    /// Last round of an active suspension; 0 means not suspended.
    pub suspended_until: Round,
    /// Availability for the round being planned.
    pub available: bool,
    /// Rounds spent suspended, used to attribute audit misses.
    pub suspended_rounds: u32,
    /// Rounds spent unavailable, used to attribute audit misses.
    pub unavailable_rounds: u32,
}

impl ClientTrackerRecord {
    pub fn new(client_id: ClientId) -> Self {
        Self {
            client_id,
            times_selected: 0,
            gap: 0,
            ever_selected: false,
            suspended_until: 0,
            available: true,
            suspended_rounds: 0,
            unavailable_rounds: 0,
        }
    }

    pub fn is_suspended(&self, round: Round) -> bool {
        self.suspended_until != 0 && round <= self.suspended_until
    }

    /// Available and not suspended at `round`.
    pub fn can_participate(&self, round: Round) -> bool {
        self.available && !self.is_suspended(round)
    }
}

/// Fresh tracker records for clients `0..total_clients`.
pub fn new_tracker(total_clients: usize) -> Vec<ClientTrackerRecord> {
    (0..total_clients as u32)
        .map(|id| ClientTrackerRecord::new(ClientId(id)))
        .collect()
}

/// Scheduling knobs of the sampling equalizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Population size `K`.
    pub total_clients: usize,
    /// Clients per round `n`.
    pub per_round: usize,
    /// Hard cap on selections per client (`N_Cmax`).
    pub max_participation: u32,
    /// Audit target for selections per client (`N_Cmin`).
    pub min_participation: u32,
    /// Rounds a client must sit out before reselection.
    pub gap_min: u32,
    /// Gap at which a client is force-selected.
    pub gap_max: u32,
    /// Interval (in rounds) at which never-selected clients are injected.
    pub lambda: u32,
    /// Cap on never-selected clients injected per interval round.
    pub lambda_max: usize,
    /// Cap on overlooked clients force-selected per round (`m`).
    pub max_overlooked: usize,
    /// Fraction of `per_round` reserved for forced inclusions (`Slots_a`).
    pub slots_fraction: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            total_clients: 100,
            per_round: 10,
            max_participation: 10,
            min_participation: 1,
            gap_min: 1,
            gap_max: 10,
            lambda: 10,
            lambda_max: 2,
            max_overlooked: 3,
            slots_fraction: 0.5,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectorError> {
        let fail = |msg: String| Err(SelectorError::InvalidConfig(msg));
        if self.total_clients == 0 {
            return fail("total_clients must be positive".into());
        }
        if self.per_round == 0 || self.per_round > self.total_clients {
            return fail(format!(
                "per_round must be in 1..={}, got {}",
                self.total_clients, self.per_round
            ));
        }
        if self.min_participation < 1 || self.min_participation > self.max_participation {
            return fail(format!(
                "need 1 <= min_participation <= max_participation, got {} and {}",
                self.min_participation, self.max_participation
            ));
        }
        if self.gap_min < 1 {
            return fail("gap_min must be at least 1".into());
        }
        if self.gap_max <= self.gap_min {
            return fail(format!(
                "gap_max ({}) must exceed gap_min ({})",
                self.gap_max, self.gap_min
            ));
        }
        if self.lambda < 1 {
            return fail("lambda must be at least 1".into());
        }
        if self.lambda_max + self.max_overlooked > self.per_round {
            return fail(format!(
                "lambda_max + max_overlooked ({} + {}) exceeds per_round ({})",
                self.lambda_max, self.max_overlooked, self.per_round
            ));
        }
        if !(0.0..=1.0).contains(&self.slots_fraction) {
            return fail(format!(
                "slots_fraction must be in [0, 1], got {}",
                self.slots_fraction
            ));
        }
        Ok(())
    }
}

/// Clients chosen for one round and the step that chose each of them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub round: Round,
    /// Forced-unutilized first, then forced-overlooked, then random fill.
    pub selected: Vec<ClientId>,
    pub forced_unutilized: Vec<ClientId>,
    pub forced_overlooked: Vec<ClientId>,
    pub random_fill: Vec<ClientId>,
    /// Fewer than `per_round` clients could be selected.
    pub underfilled: bool,
}

impl RoundPlan {
    pub fn empty(round: Round) -> Self {
        Self {
            round,
            selected: Vec::new(),
            forced_unutilized: Vec::new(),
            forced_overlooked: Vec::new(),
            random_fill: Vec::new(),
            underfilled: false,
        }
    }

    pub fn contains(&self, client: ClientId) -> bool {
        self.selected.contains(&client)
    }
}

/// Per-round budget shared by both forced-inclusion steps: `ceil(slots_fraction * n)`.
pub fn slots_available(cfg: &SelectionConfig, _round: Round) -> usize {
    let raw = cfg.slots_fraction * cfg.per_round as f64;
    // 0.7 * 10 is 7.000000000000001 in binary floating point.
    let slots = (raw - 1e-9).ceil().max(0.0) as usize;
    slots.min(cfg.per_round)
}

fn check_records(
    records: &[ClientTrackerRecord],
    total_clients: usize,
) -> Result<(), SelectorError> {
    if records.len() != total_clients {
        return Err(SelectorError::RecordCount {
            expected: total_clients,
            actual: records.len(),
        });
    }
    for (position, rec) in records.iter().enumerate() {
        if rec.client_id.index() != position {
            return Err(SelectorError::RecordOrder {
                position,
                found: rec.client_id,
            });
        }
    }
    Ok(())
}

/// Plans round `round` under the fairness constraints.
///
/// An over-constrained state yields a short plan with `underfilled` set
/// rather than an error. Errors are reserved for malformed inputs.
pub fn select_round<R: Rng + ?Sized>(
    records: &[ClientTrackerRecord],
    cfg: &SelectionConfig,
    round: Round,
    rng: &mut R,
) -> Result<RoundPlan, SelectorError> {
    cfg.validate()?;
    check_records(records, cfg.total_clients)?;
    if round == 0 {
        return Err(SelectorError::RoundZero);
    }

    let mut plan = RoundPlan::empty(round);
    let mut chosen = vec![false; records.len()];
    let mut slots = slots_available(cfg, round);

    if round % cfg.lambda == 0 {
        let budget = cfg.lambda_max.min(slots);
        plan.forced_unutilized = records
            .iter()
            .filter(|r| !r.ever_selected && r.can_participate(round))
            .take(budget)
            .map(|r| r.client_id)
            .collect();
        for id in &plan.forced_unutilized {
            chosen[id.index()] = true;
        }
        slots -= plan.forced_unutilized.len();
    }

    let budget = cfg.max_overlooked.min(slots);
    if budget > 0 {
        let mut overlooked: Vec<&ClientTrackerRecord> = records
            .iter()
            .filter(|r| {
                !chosen[r.client_id.index()]
                    && r.gap >= cfg.gap_max
                    && r.times_selected < cfg.max_participation
                    && r.can_participate(round)
            })
            .collect();
        // Largest gap first; ties by ascending id.
        overlooked.sort_by(|a, b| b.gap.cmp(&a.gap).then(a.client_id.cmp(&b.client_id)));
        plan.forced_overlooked = overlooked
            .into_iter()
            .take(budget)
            .map(|r| r.client_id)
            .collect();
        for id in &plan.forced_overlooked {
            chosen[id.index()] = true;
        }
    }

    let pool: Vec<ClientId> = records
        .iter()
        .filter(|r| {
            !chosen[r.client_id.index()]
                && (!r.ever_selected || r.gap >= cfg.gap_min)
                && r.times_selected < cfg.max_participation
                && r.can_participate(round)
        })
        .map(|r| r.client_id)
        .collect();

    let forced = plan.forced_unutilized.len() + plan.forced_overlooked.len();
    let wanted = cfg.per_round.saturating_sub(forced);
    let take = wanted.min(pool.len());
    plan.random_fill = index::sample(rng, pool.len(), take)
        .into_iter()
        .map(|i| pool[i])
        .collect();

    plan.selected = plan
        .forced_unutilized
        .iter()
        .chain(&plan.forced_overlooked)
        .chain(&plan.random_fill)
        .copied()
        .collect();
    plan.underfilled = plan.selected.len() < cfg.per_round;
    Ok(plan)
}

/// Uniform-random baseline: `per_round` clients drawn without replacement from
/// those that can participate, ignoring all tracker constraints.
pub fn select_random<R: Rng + ?Sized>(
    records: &[ClientTrackerRecord],
    per_round: usize,
    round: Round,
    rng: &mut R,
) -> Result<RoundPlan, SelectorError> {
    if round == 0 {
        return Err(SelectorError::RoundZero);
    }
    let pool: Vec<ClientId> = records
        .iter()
        .filter(|r| r.can_participate(round))
        .map(|r| r.client_id)
        .collect();
    let take = per_round.min(pool.len());
    let mut plan = RoundPlan::empty(round);
    plan.random_fill = index::sample(rng, pool.len(), take)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    plan.selected = plan.random_fill.clone();
    plan.underfilled = plan.selected.len() < per_round;
    Ok(plan)
}

/// Applies a plan to the tracker: selected clients get `T_i += 1, G_i = 0`,
/// everyone else `G_i += 1`.
///
/// Rejects a plan that selects a client already at `max_participation`.
pub fn update_tracker(
    records: &[ClientTrackerRecord],
    plan: &RoundPlan,
    cfg: &SelectionConfig,
) -> Result<Vec<ClientTrackerRecord>, SelectorError> {
    apply_plan(records, plan, Some(cfg.max_participation))
}

/// [`update_tracker`] without the participation cap, for the random baseline.
pub fn update_tracker_uncapped(
    records: &[ClientTrackerRecord],
    plan: &RoundPlan,
) -> Result<Vec<ClientTrackerRecord>, SelectorError> {
    apply_plan(records, plan, None)
}

fn apply_plan(
    records: &[ClientTrackerRecord],
    plan: &RoundPlan,
    cap: Option<u32>,
) -> Result<Vec<ClientTrackerRecord>, SelectorError> {
    let mut in_plan = vec![false; records.len()];
    for &id in &plan.selected {
        let rec = records
            .get(id.index())
            .filter(|r| r.client_id == id)
            .ok_or(SelectorError::UnknownClient(id))?;
        if in_plan[id.index()] {
            return Err(SelectorError::DuplicateSelection(id));
        }
        if let Some(cap) = cap {
            if rec.times_selected >= cap {
                return Err(SelectorError::CapExceeded { client: id, cap });
            }
        }
        in_plan[id.index()] = true;
    }

    Ok(records
        .iter()
        .zip(&in_plan)
        .map(|(rec, &picked)| {
            let mut next = rec.clone();
            if picked {
                next.times_selected += 1;
                next.gap = 0;
                next.ever_selected = true;
            } else {
                next.gap += 1;
                if rec.is_suspended(plan.round) {
                    next.suspended_rounds += 1;
                }
                if !rec.available {
                    next.unavailable_rounds += 1;
                }
            }
            next
        })
        .collect())
}

/// Why a client ended below the participation floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MissCause {
    Suspension,
    Unavailability,
    /// Neither suspended nor unavailable: the run was too short or too
    /// constrained to reach the floor.
    Scheduling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundViolation {
    BelowMin(MissCause),
    AboveMax,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientAudit {
    pub client_id: ClientId,
    pub times_selected: u32,
    pub violation: Option<BoundViolation>,
}

impl ClientAudit {
    pub fn within_bounds(&self) -> bool {
        self.violation.is_none()
    }
}

/// Participation-bound audit at the end of training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub total_rounds: u32,
    pub min_participation: u32,
    pub max_participation: u32,
    pub clients: Vec<ClientAudit>,
}

impl AuditReport {
    pub fn violations(&self) -> usize {
        self.clients.iter().filter(|c| !c.within_bounds()).count()
    }

    pub fn count(&self, kind: BoundViolation) -> usize {
        self.clients
            .iter()
            .filter(|c| c.violation == Some(kind))
            .count()
    }

    pub fn below_min(&self) -> usize {
        self.clients
            .iter()
            .filter(|c| matches!(c.violation, Some(BoundViolation::BelowMin(_))))
            .count()
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "participation bounds [{}, {}] over {} rounds, {} clients",
            self.min_participation,
            self.max_participation,
            self.total_rounds,
            self.clients.len()
        )?;
        for c in self.clients.iter().filter(|c| !c.within_bounds()) {
            let what = match c.violation {
                Some(BoundViolation::AboveMax) => "above max".to_string(),
                Some(BoundViolation::BelowMin(cause)) => format!("below min ({cause:?})"),
                None => unreachable!(),
            };
            writeln!(
                f,
                "  client {:>5}: selected {:>4} times, {}",
                c.client_id, c.times_selected, what
            )?;
        }
        writeln!(f, "violations: {}", self.violations())?;
        writeln!(
            f,
            "  above max:              {}",
            self.count(BoundViolation::AboveMax)
        )?;
        for cause in [
            MissCause::Suspension,
            MissCause::Unavailability,
            MissCause::Scheduling,
        ] {
            writeln!(
                f,
                "  below min ({:<14}) {}",
                format!("{cause:?}):"),
                self.count(BoundViolation::BelowMin(cause))
            )?;
        }
        Ok(())
    }
}

/// Checks `min_participation <= T_i <= max_participation` for every client.
pub fn end_of_training_audit(
    records: &[ClientTrackerRecord],
    cfg: &SelectionConfig,
    total_rounds: u32,
) -> AuditReport {
    let clients = records
        .iter()
        .map(|r| {
            let violation = if r.times_selected > cfg.max_participation {
                Some(BoundViolation::AboveMax)
            } else if r.times_selected < cfg.min_participation {
                let cause = if r.suspended_rounds > 0 {
                    MissCause::Suspension
                } else if r.unavailable_rounds > 0 {
                    MissCause::Unavailability
                } else {
                    MissCause::Scheduling
                };
                Some(BoundViolation::BelowMin(cause))
            } else {
                None
            };
            ClientAudit {
                client_id: r.client_id,
                times_selected: r.times_selected,
                violation,
            }
        })
        .collect();
    AuditReport {
        total_rounds,
        min_participation: cfg.min_participation,
        max_participation: cfg.max_participation,
        clients,
    }
}

/// Ids present in more than one of the plan's subsets, or in `selected`
/// without being in any subset. Empty for a well-formed plan.
pub fn plan_inconsistencies(plan: &RoundPlan) -> Vec<ClientId> {
    let mut seen = HashSet::new();
    let mut bad = Vec::new();
    for id in plan
        .forced_unutilized
        .iter()
        .chain(&plan.forced_overlooked)
        .chain(&plan.random_fill)
    {
        if !seen.insert(*id) {
            bad.push(*id);
        }
    }
    let selected: HashSet<_> = plan.selected.iter().copied().collect();
    if selected.len() != plan.selected.len() || selected != seen {
        bad.extend(selected.symmetric_difference(&seen).copied());
    }
    bad
}
