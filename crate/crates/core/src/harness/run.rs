//! The round loop: availability, selection, local training, aggregation,
//! evaluation, outlier tracking and tracker update.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Policy, TimingMode};
use super::HarnessError;
use crate::data_fabric::{self, FederatedDataset};
use crate::fl_engine::{self, Model, SoftmaxRegression};
use crate::metrics::{self, ConvergenceRecord, FairnessInput, RoundMetrics};
use crate::outlier_guard::{FlagReason, PerformanceEvent, SuspicionLedger};
use crate::selector::{self, ClientTrackerRecord, RoundPlan};
use crate::types::{derive_seed, ClientId, Round};

// Stream tags for seeds that are not tied to a client.
const DATA_STREAM: ClientId = ClientId(u32::MAX);
const AVAILABILITY_STREAM: ClientId = ClientId(u32::MAX - 1);
const SELECTION_STREAM: ClientId = ClientId(u32::MAX - 2);
const ROLE_STREAM: ClientId = ClientId(u32::MAX - 3);
const LATENCY_STREAM: ClientId = ClientId(u32::MAX - 4);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Select,
    Flag,
    Suspend,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Select => "select",
            EventKind::Flag => "flag",
            EventKind::Suspend => "suspend",
        }
    }
}

/// One line of `events.log`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunEvent {
    pub round: Round,
    pub kind: EventKind,
    pub client: ClientId,
    /// `unutilized` / `overlooked` / `random` for selections, `ACC_TH` /
    /// `LOSS_TH` for flags and suspensions.
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: Round,
    pub accuracy: f64,
    pub loss: f64,
    /// Pooled training loss over every client's local data.
    pub train_loss: f64,
    pub elapsed_s: f64,
    pub selected: Vec<ClientId>,
    pub n_suspended: usize,
    pub underfilled: bool,
    pub flag_reasons: Vec<FlagReason>,
    pub newly_suspended: Vec<ClientId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientFairness {
    pub client_id: ClientId,
    pub participation: u32,
    pub quality: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub jfi: f64,
    pub clients: Vec<ClientFairness>,
}

impl FairnessReport {
    /// Population variance of the participation counts.
    pub fn participation_variance(&self) -> f64 {
        let n = self.clients.len() as f64;
        let mean = self
            .clients
            .iter()
            .map(|c| c.participation as f64)
            .sum::<f64>()
            / n;
        self.clients
            .iter()
            .map(|c| (c.participation as f64 - mean).powi(2))
            .sum::<f64>()
            / n
    }
}

/// Which clients were made noisy or malicious for a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientRoles {
    pub poisoners: Vec<ClientId>,
    pub noisy: Vec<ClientId>,
}

/// Everything a run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
    pub roles: ClientRoles,
    pub reports: Vec<RoundReport>,
    pub tracker: Vec<ClientTrackerRecord>,
    pub ledger: SuspicionLedger,
    pub fairness: FairnessReport,
    pub events: Vec<RunEvent>,
}

impl RunLog {
    pub fn policy(&self) -> Policy {
        self.config.policy
    }

    pub fn record(&self) -> ConvergenceRecord {
        let mut record = ConvergenceRecord::default();
        for r in &self.reports {
            record.push(RoundMetrics {
                round: r.round,
                elapsed_s: r.elapsed_s,
                accuracy: r.accuracy,
                loss: r.loss,
            });
        }
        record
    }
}

/// Generates the run's dataset and applies label noise and poisoning.
pub fn build_dataset(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(FederatedDataset, ClientRoles), HarnessError> {
    let k = cfg.total_clients();
    let mut spec = cfg.data.clone();
    spec.seed = derive_seed(seed, 0, DATA_STREAM);
    let mut data = data_fabric::generate(&spec, k)?;

    let mut ids: Vec<ClientId> = (0..k as u32).map(ClientId).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        0,
        ROLE_STREAM,
    )));
    let noisy_count = (cfg.noisy_fraction * k as f64).round() as usize;
    let mut roles = ClientRoles {
        poisoners: ids[..cfg.poisoners].to_vec(),
        noisy: ids[cfg.poisoners..cfg.poisoners + noisy_count].to_vec(),
    };
    roles.poisoners.sort();
    roles.noisy.sort();

    for &id in &roles.noisy {
        let c = &data.clients[id.index()];
        data.clients[id.index()] =
            data_fabric::inject_label_noise(c, cfg.noise_level, derive_seed(seed, 1, id));
    }
    for &id in &roles.poisoners {
        let c = &data.clients[id.index()];
        data.clients[id.index()] =
            data_fabric::mark_poisoned(c, cfg.poison_mode, derive_seed(seed, 2, id));
    }
    Ok((data, roles))
}

/// Quality-weighted participation fairness from final tracker records.
pub fn fairness_report(
    tracker: &[ClientTrackerRecord],
    data: &FederatedDataset,
) -> Result<FairnessReport, HarnessError> {
    let module = |e: metrics::MetricsError| HarnessError::Module {
        round: 0,
        module: "metrics",
        message: e.to_string(),
    };
    let clients = tracker
        .iter()
        .zip(&data.clients)
        .map(|(rec, c)| {
            let quality = metrics::data_quality(c.true_n_class, c.true_p_noisy, c.num_classes)
                .map_err(module)?;
            Ok(ClientFairness {
                client_id: rec.client_id,
                participation: rec.times_selected,
                quality,
                ratio: rec.times_selected as f64 / quality,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let inputs: Vec<FairnessInput> = clients
        .iter()
        .map(|c| FairnessInput::new(c.participation as f64, c.quality))
        .collect();
    let jfi = metrics::jain_fairness_index(&inputs).map_err(module)?;
    Ok(FairnessReport { jfi, clients })
}

fn client_latencies(cfg: &ExperimentConfig, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, LATENCY_STREAM));
    (0..cfg.total_clients())
        .map(|_| cfg.latency_base_s * (1.0 + cfg.latency_spread * rng.random::<f64>()))
        .collect()
}

fn select_events(plan: &RoundPlan, events: &mut Vec<RunEvent>) {
    let groups = [
        (&plan.forced_unutilized, "unutilized"),
        (&plan.forced_overlooked, "overlooked"),
        (&plan.random_fill, "random"),
    ];
    for (ids, reason) in groups {
        events.extend(ids.iter().map(|&client| RunEvent {
            round: plan.round,
            kind: EventKind::Select,
            client,
            reason: reason.to_string(),
        }));
    }
}

/// Runs one seed of an experiment.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunLog, HarnessError> {
    cfg.validate()?;
    let (data, roles) = build_dataset(cfg, seed)?;
    run_on_dataset(cfg, seed, &data, roles)
}

/// Runs the round loop on an already built dataset.
pub fn run_on_dataset(
    cfg: &ExperimentConfig,
    seed: u64,
    data: &FederatedDataset,
    roles: ClientRoles,
) -> Result<RunLog, HarnessError> {
    let k = cfg.total_clients();
    if data.clients.len() != k {
        return Err(HarnessError::Config(format!(
            "dataset has {} clients, config declares {k}",
            data.clients.len()
        )));
    }
    let model = SoftmaxRegression::new(cfg.data.num_classes, cfg.data.num_features);
    let mut params = model.init_params();
    let mut tracker = selector::new_tracker(k);
    let mut ledger = SuspicionLedger::new(k);
    let mut availability_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, AVAILABILITY_STREAM));
    let mut selection_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, SELECTION_STREAM));
    let latencies = client_latencies(cfg, seed);
    let client_samples: Vec<&[crate::types::Sample]> =
        data.clients.iter().map(|c| c.samples.as_slice()).collect();

    let mut reports = Vec::with_capacity(cfg.total_rounds as usize);
    let mut events = Vec::new();
    let mut elapsed = 0.0;

    for round in 1..=cfg.total_rounds {
        let started = Instant::now();
        let fail = |module: &'static str, message: String| HarnessError::Module {
            round,
            module,
            message,
        };

        for (rec, entry) in tracker.iter_mut().zip(ledger.entries()) {
            rec.available =
                cfg.availability >= 1.0 || availability_rng.random_bool(cfg.availability);
            rec.suspended_until = entry.suspension_end.unwrap_or(0);
        }
        let n_suspended = tracker.iter().filter(|r| r.is_suspended(round)).count();

        let plan = match cfg.policy {
            Policy::FairEquity => {
                selector::select_round(&tracker, &cfg.selection, round, &mut selection_rng)
            }
            Policy::Random => selector::select_random(
                &tracker,
                cfg.selection.per_round,
                round,
                &mut selection_rng,
            ),
        }
        .map_err(|e| fail("selector", e.to_string()))?;
        select_events(&plan, &mut events);

        let updates = plan
            .selected
            .par_iter()
            .map(|&id| {
                fl_engine::local_train(
                    &model,
                    &params,
                    &data.clients[id.index()],
                    &cfg.train,
                    derive_seed(seed, round, id),
                )
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| fail("fl_engine", e.to_string()))?;
        if !updates.is_empty() {
            params = fl_engine::aggregate(
                &params,
                &updates,
                cfg.train.global_lr_at(round),
                cfg.train.weighted_aggregation,
            )
            .map_err(|e| fail("fl_engine", e.to_string()))?;
        }
        let eval = fl_engine::evaluate(&model, &params, &data.test)
            .map_err(|e| fail("fl_engine", e.to_string()))?;
        let train_loss = fl_engine::global_loss(&model, &params, client_samples.iter().copied())
            .map_err(|e| fail("fl_engine", e.to_string()))?;

        let verdict = if cfg.policy == Policy::FairEquity {
            let event = PerformanceEvent {
                round,
                accuracy: eval.accuracy,
                loss: eval.loss,
                participants: plan.selected.clone(),
            };
            ledger
                .record_round(&event, &cfg.guard)
                .map_err(|e| fail("outlier_guard", e.to_string()))?
        } else {
            Default::default()
        };
        for &client in &plan.selected {
            for reason in &verdict.reasons {
                events.push(RunEvent {
                    round,
                    kind: EventKind::Flag,
                    client,
                    reason: reason.to_string(),
                });
            }
        }
        for &client in &verdict.newly_suspended {
            events.push(RunEvent {
                round,
                kind: EventKind::Suspend,
                client,
                reason: verdict
                    .reasons
                    .iter()
                    .map(|r| r.as_str())
                    .collect::<Vec<_>>()
                    .join("+"),
            });
        }

        tracker = match cfg.policy {
            Policy::FairEquity => selector::update_tracker(&tracker, &plan, &cfg.selection),
            Policy::Random => selector::update_tracker_uncapped(&tracker, &plan),
        }
        .map_err(|e| fail("selector", e.to_string()))?;

        elapsed += match cfg.timing {
            TimingMode::Simulated => plan
                .selected
                .iter()
                .map(|id| latencies[id.index()])
                .fold(0.0, f64::max),
            TimingMode::Measured => started.elapsed().as_secs_f64(),
        };

        reports.push(RoundReport {
            round,
            accuracy: eval.accuracy,
            loss: eval.loss,
            train_loss,
            elapsed_s: elapsed,
            selected: plan.selected,
            n_suspended,
            underfilled: plan.underfilled,
            flag_reasons: verdict.reasons,
            newly_suspended: verdict.newly_suspended,
        });
    }

    let fairness = fairness_report(&tracker, data)?;
    let run_cfg = cfg.with_seed(seed);
    Ok(RunLog {
        config_fingerprint: run_cfg.fingerprint(),
        dataset_fingerprint: run_cfg.dataset_fingerprint(),
        config: run_cfg,
        seed,
        roles,
        reports,
        tracker,
        ledger,
        fairness,
        events,
    })
}

/// Runs every seed listed in the config.
pub fn run_all_seeds(cfg: &ExperimentConfig) -> Result<Vec<RunLog>, HarnessError> {
    cfg.seeds.iter().map(|&s| run_experiment(cfg, s)).collect()
}
