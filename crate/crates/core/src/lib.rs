//! Fair and equitable client selection for federated learning, with a
//! minimal FedAvg engine and a seeded simulation harness.
//!
//! The selection policy keeps per-client participation records, enforces a
//! minimum reselection gap and a participation cap, force-includes clients
//! that were overlooked for too long or never used, and temporarily suspends
//! clients that keep showing up in rounds where global accuracy or loss
//! degrades.

pub mod data_fabric;
pub mod fl_engine;
pub mod harness;
pub mod metrics;
pub mod outlier_guard;
pub mod selector;
pub mod types;

pub use data_fabric::{ClientDataset, DatasetSpec, FederatedDataset, PoisonMode};
pub use fl_engine::{LocalUpdate, Model, ModelParams, SoftmaxRegression, TrainConfig};
pub use harness::{ExperimentConfig, HarnessError, Policy, RunLog};
pub use metrics::{ConvergenceRecord, FairnessInput};
pub use outlier_guard::{GuardConfig, PerformanceEvent, SuspicionLedger};
pub use selector::{ClientTrackerRecord, RoundPlan, SelectionConfig};
pub use types::{ClientId, Round, Sample};
