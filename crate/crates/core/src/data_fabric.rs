//! Synthetic federated data: class-conditional Gaussian clusters cut into
//! mostly-single-class shards and dealt out to clients, plus label noise and
//! poisoning markers.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{ClientId, Sample};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("shard plan needs {needed} samples but only {available} exist")]
    InsufficientSamples { needed: usize, available: usize },
    #[error("unknown poisoning mode {0:?} (expected label_flip_all or update_negate)")]
    UnknownPoisonMode(String),
    #[error("dataset file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub num_features: usize,
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub shards_per_client: usize,
    pub shard_size: usize,
    /// Distance of each class mean from the origin.
    pub class_separation: f64,
    /// 1.0 gives single-class shards; lower values mix a random share of
    /// samples across the class-sorted pool before cutting.
    pub shard_purity: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            num_features: 20,
            samples_per_class: 2000,
            test_samples_per_class: 100,
            shards_per_client: 2,
            shard_size: 100,
            class_separation: 3.0,
            shard_purity: 0.8,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn total_samples(&self) -> usize {
        self.num_classes * self.samples_per_class
    }

    pub fn validate(&self, total_clients: usize) -> Result<(), DataError> {
        let fail = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2");
        }
        if self.num_features == 0 {
            return fail("num_features must be positive");
        }
        if self.shards_per_client == 0 || self.shard_size == 0 {
            return fail("shards_per_client and shard_size must be positive");
        }
        if total_clients == 0 {
            return fail("at least one client is required");
        }
        if self.test_samples_per_class == 0 {
            return fail("test_samples_per_class must be positive");
        }
        if !(self.class_separation.is_finite() && self.class_separation > 0.0) {
            return fail("class_separation must be positive");
        }
        if !(0.0..=1.0).contains(&self.shard_purity) {
            return fail("shard_purity must be in [0, 1]");
        }
        let needed = self.shard_size * self.shards_per_client * total_clients;
        if needed > self.total_samples() {
            return Err(DataError::InsufficientSamples {
                needed,
                available: self.total_samples(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoisonMode {
    /// Every label replaced by a different class.
    LabelFlipAll,
    /// The client's update is negated and scaled at training time.
    UpdateNegate,
}

impl PoisonMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PoisonMode::LabelFlipAll => "label_flip_all",
            PoisonMode::UpdateNegate => "update_negate",
        }
    }
}

impl fmt::Display for PoisonMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoisonMode {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "label_flip_all" => Ok(PoisonMode::LabelFlipAll),
            "update_negate" => Ok(PoisonMode::UpdateNegate),
            other => Err(DataError::UnknownPoisonMode(other.to_string())),
        }
    }
}

/// One client's local data plus its ground-truth quality descriptors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: ClientId,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
    /// Distinct labels present before any noise was injected.
    pub true_n_class: usize,
    pub true_p_noisy: f64,
    pub poison: Option<PoisonMode>,
}

impl ClientDataset {
    pub fn new(client_id: ClientId, num_classes: usize, samples: Vec<Sample>) -> Self {
        let true_n_class = distinct_labels(&samples);
        Self {
            client_id,
            num_classes,
            samples,
            true_n_class,
            true_p_noisy: 0.0,
            poison: None,
        }
    }

    pub fn is_poisoned(&self) -> bool {
        self.poison.is_some()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn distinct_labels(samples: &[Sample]) -> usize {
    samples
        .iter()
        .map(|s| s.label)
        .collect::<BTreeSet<_>>()
        .len()
}

/// Client datasets and a clean held-out test set drawn from the same clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedDataset {
    pub spec: DatasetSpec,
    pub clients: Vec<ClientDataset>,
    pub test: Vec<Sample>,
}

fn class_means(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..spec.num_classes)
        .map(|_| {
            let dir: Vec<f64> = (0..spec.num_features)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = dir
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            dir.iter()
                .map(|v| v / norm * spec.class_separation)
                .collect()
        })
        .collect()
}

fn draw(mean: &[f64], label: usize, rng: &mut ChaCha8Rng) -> Sample {
    let features = mean
        .iter()
        .map(|m| m + rng.sample::<f64, _>(StandardNormal))
        .collect();
    Sample::new(features, label)
}

/// Start offset of each shard in the class-sorted pool.
pub fn shard_starts(total_samples: usize, total_shards: usize) -> Vec<usize> {
    (0..total_shards)
        .map(|j| j * total_samples / total_shards)
        .collect()
}

/// Builds the federated dataset for `total_clients` clients. Deterministic in `spec.seed`.
pub fn generate(spec: &DatasetSpec, total_clients: usize) -> Result<FederatedDataset, DataError> {
    spec.validate(total_clients)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = class_means(spec, &mut rng);

    let mut pool: Vec<Sample> = Vec::with_capacity(spec.total_samples());
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            pool.push(draw(mean, label, &mut rng));
        }
    }

    let mixed = ((1.0 - spec.shard_purity) * pool.len() as f64).round() as usize;
    if mixed > 1 {
        let positions = index::sample(&mut rng, pool.len(), mixed).into_vec();
        let mut targets = positions.clone();
        targets.shuffle(&mut rng);
        let moved: Vec<Sample> = positions.iter().map(|&p| pool[p].clone()).collect();
        for (sample, &target) in moved.into_iter().zip(&targets) {
            pool[target] = sample;
        }
    }

    let total_shards = total_clients * spec.shards_per_client;
    let starts = shard_starts(pool.len(), total_shards);
    let mut order: Vec<usize> = (0..total_shards).collect();
    order.shuffle(&mut rng);

    let clients = order
        .chunks(spec.shards_per_client)
        .enumerate()
        .map(|(client, shards)| {
            let samples = shards
                .iter()
                .flat_map(|&s| pool[starts[s]..starts[s] + spec.shard_size].iter().cloned())
                .collect();
            ClientDataset::new(ClientId(client as u32), spec.num_classes, samples)
        })
        .collect();

    let test = means
        .iter()
        .enumerate()
        .flat_map(|(label, mean)| {
            (0..spec.test_samples_per_class)
                .map(|_| draw(mean, label, &mut rng))
                .collect::<Vec<_>>()
        })
        .collect();

    Ok(FederatedDataset {
        spec: spec.clone(),
        clients,
        test,
    })
}

/// Flips exactly `round(p_noisy * |samples|)` labels, each to a uniformly
/// random different class.
pub fn inject_label_noise(dataset: &ClientDataset, p_noisy: f64, seed: u64) -> ClientDataset {
    let mut out = dataset.clone();
    let p = p_noisy.clamp(0.0, 1.0);
    let n = out.samples.len();
    let flips = (p * n as f64).round() as usize;
    if flips == 0 || out.num_classes < 2 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in index::sample(&mut rng, n, flips) {
        let old = out.samples[i].label;
        let mut new = rng.random_range(0..out.num_classes - 1);
        if new >= old {
            new += 1;
        }
        out.samples[i].label = new;
    }
    out.true_p_noisy = flips as f64 / n as f64;
    out
}

/// Marks a client as malicious. `LabelFlipAll` rewrites every label now;
/// `UpdateNegate` takes effect inside local training.
pub fn mark_poisoned(dataset: &ClientDataset, mode: PoisonMode, seed: u64) -> ClientDataset {
    let mut out = match mode {
        PoisonMode::LabelFlipAll => inject_label_noise(dataset, 1.0, seed),
        PoisonMode::UpdateNegate => dataset.clone(),
    };
    out.poison = Some(mode);
    out
}

const HEADER: &str = "# fairequity dataset v1";

/// Writes the dataset in the line-oriented text format:
///
/// ```text
/// # fairequity dataset v1
/// num_classes = 10
/// ...                                   (one `key = value` line per spec field)
/// clients = 100
/// meta,<client_id>,<true_n_class>,<true_p_noisy>,<poison|none>
/// <client_id>,<label>,<f1>,...,<fd>    (training rows)
/// test,<label>,<f1>,...,<fd>           (held-out rows)
/// ```
///
/// Floats use the shortest representation that round-trips exactly.
pub fn write_dataset<W: Write>(data: &FederatedDataset, mut out: W) -> Result<(), DataError> {
    let s = &data.spec;
    writeln!(out, "{HEADER}")?;
    writeln!(out, "num_classes = {}", s.num_classes)?;
    writeln!(out, "num_features = {}", s.num_features)?;
    writeln!(out, "samples_per_class = {}", s.samples_per_class)?;
    writeln!(out, "test_samples_per_class = {}", s.test_samples_per_class)?;
    writeln!(out, "shards_per_client = {}", s.shards_per_client)?;
    writeln!(out, "shard_size = {}", s.shard_size)?;
    writeln!(out, "class_separation = {}", s.class_separation)?;
    writeln!(out, "shard_purity = {}", s.shard_purity)?;
    writeln!(out, "seed = {}", s.seed)?;
    writeln!(out, "clients = {}", data.clients.len())?;
    for c in &data.clients {
        let poison = c.poison.map_or("none", PoisonMode::as_str);
        writeln!(
            out,
            "meta,{},{},{},{}",
            c.client_id, c.true_n_class, c.true_p_noisy, poison
        )?;
    }
    let row = |out: &mut W, key: &str, sample: &Sample| -> std::io::Result<()> {
        write!(out, "{key},{}", sample.label)?;
        for v in &sample.features {
            write!(out, ",{v}")?;
        }
        writeln!(out)
    };
    for c in &data.clients {
        let key = c.client_id.to_string();
        for sample in &c.samples {
            row(&mut out, &key, sample)?;
        }
    }
    for sample in &data.test {
        row(&mut out, "test", sample)?;
    }
    Ok(())
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset<R: BufRead>(input: R) -> Result<FederatedDataset, DataError> {
    let mut spec = DatasetSpec::default();
    let mut clients: Vec<ClientDataset> = Vec::new();
    let mut declared_clients: Option<usize> = None;
    let mut test = Vec::new();

    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let err = |message: String| DataError::Parse {
            line: lineno,
            message,
        };
        let line = line.trim();
        if lineno == 1 {
            if line != HEADER {
                return Err(err(format!("expected header {HEADER:?}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        if let Some((key, value)) = line.split_once('=') {
            let (key, value) = (key.trim(), value.trim());
            let int = || {
                value
                    .parse::<usize>()
                    .map_err(|e| err(format!("{key}: {e}")))
            };
            let float = || value.parse::<f64>().map_err(|e| err(format!("{key}: {e}")));
            match key {
                "num_classes" => spec.num_classes = int()?,
                "num_features" => spec.num_features = int()?,
                "samples_per_class" => spec.samples_per_class = int()?,
                "test_samples_per_class" => spec.test_samples_per_class = int()?,
                "shards_per_client" => spec.shards_per_client = int()?,
                "shard_size" => spec.shard_size = int()?,
                "class_separation" => spec.class_separation = float()?,
                "shard_purity" => spec.shard_purity = float()?,
                "seed" => spec.seed = value.parse().map_err(|e| err(format!("seed: {e}")))?,
                "clients" => declared_clients = Some(int()?),
                other => return Err(err(format!("unknown key {other:?}"))),
            }
            continue;
        }

        let fields: Vec<&str> = line.split(',').collect();
        if fields[0] == "meta" {
            if fields.len() != 5 {
                return Err(err("meta row needs 5 fields".into()));
            }
            let id: u32 = fields[1]
                .parse()
                .map_err(|e| err(format!("client id: {e}")))?;
            if id as usize != clients.len() {
                return Err(err(format!("meta rows out of order at client {id}")));
            }
            let mut c = ClientDataset::new(ClientId(id), spec.num_classes, Vec::new());
            c.true_n_class = fields[2]
                .parse()
                .map_err(|e| err(format!("n_class: {e}")))?;
            c.true_p_noisy = fields[3]
                .parse()
                .map_err(|e| err(format!("p_noisy: {e}")))?;
            c.poison = match fields[4] {
                "none" => None,
                mode => Some(mode.parse().map_err(|e: DataError| err(e.to_string()))?),
            };
            clients.push(c);
            continue;
        }

        if fields.len() != spec.num_features + 2 {
            return Err(err(format!(
                "expected {} fields, found {}",
                spec.num_features + 2,
                fields.len()
            )));
        }
        let label: usize = fields[1].parse().map_err(|e| err(format!("label: {e}")))?;
        if label >= spec.num_classes {
            return Err(err(format!("label {label} out of range")));
        }
        let features = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| err(format!("feature: {e}")))?;
        let sample = Sample::new(features, label);
        if fields[0] == "test" {
            test.push(sample);
        } else {
            let id: usize = fields[0]
                .parse()
                .map_err(|e| err(format!("client id: {e}")))?;
            clients
                .get_mut(id)
                .ok_or_else(|| err(format!("row for undeclared client {id}")))?
                .samples
                .push(sample);
        }
    }

    if let Some(n) = declared_clients {
        if n != clients.len() {
            return Err(DataError::Parse {
                line: 0,
                message: format!("declared {n} clients but found {}", clients.len()),
            });
        }
    }
    Ok(FederatedDataset {
        spec,
        clients,
        test,
    })
}
