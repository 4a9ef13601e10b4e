//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional and falls back to its default; unknown or repeated keys are
//! errors. [`ExperimentConfig::canonical`] renders every key in a fixed
//! order, and its SHA-256 is the config fingerprint.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::data_fabric::{DatasetSpec, PoisonMode};
use crate::fl_engine::TrainConfig;
use crate::outlier_guard::GuardConfig;
use crate::selector::SelectionConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Policy {
    #[serde(rename = "fairequity")]
    FairEquity,
    #[serde(rename = "random")]
    Random,
}

impl Policy {
    pub fn as_str(self) -> &'static str {
        match self {
            Policy::FairEquity => "fairequity",
            Policy::Random => "random",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fairequity" => Ok(Policy::FairEquity),
            "random" => Ok(Policy::Random),
            other => Err(HarnessError::Config(format!(
                "unknown policy {other:?} (expected fairequity or random)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimingMode {
    /// Round duration is the latency of the slowest selected client.
    Simulated,
    /// Round duration is the measured compute time (not reproducible).
    Measured,
}

impl TimingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TimingMode::Simulated => "simulated",
            TimingMode::Measured => "measured",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub selection: SelectionConfig,
    pub guard: GuardConfig,
    pub train: TrainConfig,
    /// Shape of the synthetic data. Its `seed` is ignored: every run derives
    /// the dataset seed from the run seed.
    pub data: DatasetSpec,
    pub total_rounds: u32,
    pub policy: Policy,
    /// Per-round, per-client availability probability.
    pub availability: f64,
    pub seeds: Vec<u64>,
    /// Share of clients that receive label noise.
    pub noisy_fraction: f64,
    /// Label-noise fraction applied to each noisy client.
    pub noise_level: f64,
    /// Number of poisoning clients.
    pub poisoners: usize,
    pub poison_mode: PoisonMode,
    /// Accuracy level used for rounds/time-to-accuracy.
    pub target_accuracy: f64,
    pub timing: TimingMode,
    pub latency_base_s: f64,
    /// Client latency is `base * (1 + spread * u)` with `u ~ U(0, 1)` drawn once per client.
    pub latency_spread: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            selection: SelectionConfig::default(),
            guard: GuardConfig::default(),
            train: TrainConfig::default(),
            data: DatasetSpec::default(),
            total_rounds: 100,
            policy: Policy::FairEquity,
            availability: 1.0,
            seeds: vec![1],
            noisy_fraction: 0.2,
            noise_level: 0.3,
            poisoners: 0,
            poison_mode: PoisonMode::UpdateNegate,
            target_accuracy: 0.85,
            timing: TimingMode::Simulated,
            latency_base_s: 1.0,
            latency_spread: 1.0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, HarnessError>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| HarnessError::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

impl ExperimentConfig {
    pub fn total_clients(&self) -> usize {
        self.selection.total_clients
    }

    /// Parses the text format. Missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("line {}: expected `key = value`", i + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(HarnessError::Config(format!(
                    "line {}: duplicate key {key:?}",
                    i + 1
                )));
            }
            cfg.set(key, value)
                .map_err(|e| HarnessError::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let v = value;
        match key {
            "policy" => self.policy = v.parse()?,
            "total_rounds" => self.total_rounds = parse(key, v)?,
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .map(|s| parse::<u64>(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "availability" => self.availability = parse(key, v)?,
            "target_accuracy" => self.target_accuracy = parse(key, v)?,
            "timing" => {
                self.timing = match v {
                    "simulated" => TimingMode::Simulated,
                    "measured" => TimingMode::Measured,
                    other => {
                        return Err(HarnessError::Config(format!(
                            "timing: unknown mode {other:?}"
                        )))
                    }
                }
            }
            "latency_base_s" => self.latency_base_s = parse(key, v)?,
            "latency_spread" => self.latency_spread = parse(key, v)?,

            "clients" => self.selection.total_clients = parse(key, v)?,
            "per_round" => self.selection.per_round = parse(key, v)?,
            "max_participation" => self.selection.max_participation = parse(key, v)?,
            "min_participation" => self.selection.min_participation = parse(key, v)?,
            "gap_min" => self.selection.gap_min = parse(key, v)?,
            "gap_max" => self.selection.gap_max = parse(key, v)?,
            "lambda" => self.selection.lambda = parse(key, v)?,
            "lambda_max" => self.selection.lambda_max = parse(key, v)?,
            "max_overlooked" => self.selection.max_overlooked = parse(key, v)?,
            "slots_fraction" => self.selection.slots_fraction = parse(key, v)?,

            "acc_threshold_pct" => self.guard.acc_threshold_pct = parse(key, v)?,
            "loss_threshold_pct" => self.guard.loss_threshold_pct = parse(key, v)?,
            "qualifying_rounds" => self.guard.qualifying_rounds = parse(key, v)?,
            "suspension_rounds" => self.guard.suspension_rounds = parse(key, v)?,
            "decay_on_clean" => self.guard.decay_on_clean = parse(key, v)?,

            "local_epochs" => self.train.local_epochs = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "local_lr" => self.train.local_lr = parse(key, v)?,
            "global_lr" => self.train.global_lr = parse(key, v)?,
            "global_lr_decay" => self.train.global_lr_decay = parse(key, v)?,
            "weighted_aggregation" => self.train.weighted_aggregation = parse(key, v)?,
            "poison_scale" => self.train.poison_scale = parse(key, v)?,

            "num_classes" => self.data.num_classes = parse(key, v)?,
            "num_features" => self.data.num_features = parse(key, v)?,
            "samples_per_class" => self.data.samples_per_class = parse(key, v)?,
            "test_samples_per_class" => self.data.test_samples_per_class = parse(key, v)?,
            "shards_per_client" => self.data.shards_per_client = parse(key, v)?,
            "shard_size" => self.data.shard_size = parse(key, v)?,
            "class_separation" => self.data.class_separation = parse(key, v)?,
            "shard_purity" => self.data.shard_purity = parse(key, v)?,

            "noisy_fraction" => self.noisy_fraction = parse(key, v)?,
            "noise_level" => self.noise_level = parse(key, v)?,
            "poisoners" => self.poisoners = parse(key, v)?,
            "poison_mode" => {
                self.poison_mode = v.parse().map_err(|e: crate::data_fabric::DataError| {
                    HarnessError::Config(e.to_string())
                })?
            }
            other => return Err(HarnessError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Keys shaping the federated dataset, except the seed.
    fn dataset_entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        vec![
            ("clients", self.selection.total_clients.to_string()),
            ("num_classes", d.num_classes.to_string()),
            ("num_features", d.num_features.to_string()),
            ("samples_per_class", d.samples_per_class.to_string()),
            (
                "test_samples_per_class",
                d.test_samples_per_class.to_string(),
            ),
            ("shards_per_client", d.shards_per_client.to_string()),
            ("shard_size", d.shard_size.to_string()),
            ("class_separation", d.class_separation.to_string()),
            ("shard_purity", d.shard_purity.to_string()),
            ("noisy_fraction", self.noisy_fraction.to_string()),
            ("noise_level", self.noise_level.to_string()),
            ("poisoners", self.poisoners.to_string()),
            ("poison_mode", self.poison_mode.to_string()),
        ]
    }

    /// Every key with its canonical text value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.selection;
        let g = &self.guard;
        let t = &self.train;
        let seeds = self
            .seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let mut out = vec![
            ("policy", self.policy.to_string()),
            ("total_rounds", self.total_rounds.to_string()),
            ("seeds", seeds),
            ("availability", self.availability.to_string()),
            ("target_accuracy", self.target_accuracy.to_string()),
            ("timing", self.timing.as_str().to_string()),
            ("latency_base_s", self.latency_base_s.to_string()),
            ("latency_spread", self.latency_spread.to_string()),
            ("per_round", s.per_round.to_string()),
            ("max_participation", s.max_participation.to_string()),
            ("min_participation", s.min_participation.to_string()),
            ("gap_min", s.gap_min.to_string()),
            ("gap_max", s.gap_max.to_string()),
            ("lambda", s.lambda.to_string()),
            ("lambda_max", s.lambda_max.to_string()),
            ("max_overlooked", s.max_overlooked.to_string()),
            ("slots_fraction", s.slots_fraction.to_string()),
            ("acc_threshold_pct", g.acc_threshold_pct.to_string()),
            ("loss_threshold_pct", g.loss_threshold_pct.to_string()),
            ("qualifying_rounds", g.qualifying_rounds.to_string()),
            ("suspension_rounds", g.suspension_rounds.to_string()),
            ("decay_on_clean", g.decay_on_clean.to_string()),
            ("local_epochs", t.local_epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("local_lr", t.local_lr.to_string()),
            ("global_lr", t.global_lr.to_string()),
            ("global_lr_decay", t.global_lr_decay.to_string()),
            ("weighted_aggregation", t.weighted_aggregation.to_string()),
            ("poison_scale", t.poison_scale.to_string()),
        ];
        out.extend(self.dataset_entries());
        out
    }

    /// Canonical serialization; parsing it yields an equal config.
    pub fn canonical(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 (hex) of the canonical serialization.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Fingerprint of everything that shapes the dataset except the seed.
    pub fn dataset_fingerprint(&self) -> String {
        let text: String = self
            .dataset_entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Fingerprint of the experimental arm: the full config minus its seeds.
    pub fn arm_fingerprint(&self) -> String {
        let text: String = self
            .entries()
            .into_iter()
            .filter(|(k, _)| *k != "seeds")
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Copy restricted to a single seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seeds: vec![seed],
            ..self.clone()
        }
    }

    pub fn with_policy(&self, policy: Policy) -> Self {
        Self {
            policy,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: String| Err(HarnessError::Config(m));
        self.selection
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.guard
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.data
            .validate(self.selection.total_clients)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.total_rounds < 1 {
            return fail("total_rounds must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return fail("at least one seed is required".into());
        }
        if !(0.0..=1.0).contains(&self.availability) {
            return fail("availability must be in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.noisy_fraction) || !(0.0..=1.0).contains(&self.noise_level) {
            return fail("noisy_fraction and noise_level must be in [0, 1]".into());
        }
        let noisy = (self.noisy_fraction * self.total_clients() as f64).round() as usize;
        if self.poisoners + noisy > self.total_clients() {
            return fail(format!(
                "{} poisoners plus {noisy} noisy clients exceed {} clients",
                self.poisoners,
                self.total_clients()
            ));
        }
        if !(self.target_accuracy > 0.0 && self.target_accuracy <= 1.0) {
            return fail("target_accuracy must be in (0, 1]".into());
        }
        if !(self.latency_base_s.is_finite() && self.latency_base_s >= 0.0)
            || !(self.latency_spread.is_finite() && self.latency_spread >= 0.0)
        {
            return fail("latency_base_s and latency_spread must be non-negative".into());
        }
        Ok(())
    }
}
