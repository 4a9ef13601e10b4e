//! Side-by-side comparison of experimental arms, medians over seeds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Policy};
use super::run::{run_all_seeds, RunLog};
use super::HarnessError;
use crate::metrics::ConvergenceRecord;

/// The parts of a finished run that comparisons need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub policy: Policy,
    pub seed: u64,
    pub arm_fingerprint: String,
    pub dataset_fingerprint: String,
    pub target_accuracy: f64,
    pub jfi: f64,
    pub record: ConvergenceRecord,
}

impl RunSummary {
    pub fn from_log(log: &RunLog) -> Self {
        Self {
            policy: log.policy(),
            seed: log.seed,
            arm_fingerprint: log.config.arm_fingerprint(),
            dataset_fingerprint: log.dataset_fingerprint.clone(),
            target_accuracy: log.config.target_accuracy,
            jfi: log.fairness.jfi,
            record: log.record(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub policy: Policy,
    pub runs: usize,
    pub jfi: f64,
    pub max_accuracy: f64,
    /// `None` when the median run never reached the target.
    pub rounds_to_accuracy: Option<f64>,
    pub time_to_accuracy: Option<f64>,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub target_accuracy: f64,
    pub rows: Vec<ComparisonRow>,
}

pub const CSV_HEADER: &str =
    "label,policy,runs,jfi,max_accuracy,rounds_to_accuracy,time_to_accuracy_s,final_loss";

impl ComparisonTable {
    pub fn row(&self, label: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Fixed column order; unreached targets are written as `NA`.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), |v| v.to_string());
        let mut out = String::new();
        writeln!(out, "{CSV_HEADER}").unwrap();
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.label,
                r.policy,
                r.runs,
                r.jfi,
                r.max_accuracy,
                opt(r.rounds_to_accuracy),
                opt(r.time_to_accuracy),
                r.final_loss
            )
            .unwrap();
        }
        out
    }
}

/// Median with `None` treated as +infinity; `None` if the median is infinite.
pub fn median_of(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let mut v: Vec<f64> = values
        .into_iter()
        .map(|x| x.unwrap_or(f64::INFINITY))
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    let m = if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    };
    m.is_finite().then_some(m)
}

fn build_row(label: String, runs: &[&RunSummary], target: f64) -> ComparisonRow {
    let med = |f: &dyn Fn(&RunSummary) -> Option<f64>| median_of(runs.iter().map(|r| f(r)));
    ComparisonRow {
        label,
        policy: runs[0].policy,
        runs: runs.len(),
        jfi: med(&|r| Some(r.jfi)).unwrap_or(f64::NAN),
        max_accuracy: med(&|r| r.record.max_accuracy()).unwrap_or(f64::NAN),
        rounds_to_accuracy: med(&|r| r.record.rounds_to_accuracy(target).map(f64::from)),
        time_to_accuracy: med(&|r| r.record.time_to_accuracy(target)),
        final_loss: med(&|r| r.record.final_loss()).unwrap_or(f64::NAN),
    }
}

fn check_comparable(runs: &[&RunSummary]) -> Result<f64, HarnessError> {
    let first = runs
        .first()
        .ok_or_else(|| HarnessError::Compare("nothing to compare".into()))?;
    for r in runs {
        if r.dataset_fingerprint != first.dataset_fingerprint {
            return Err(HarnessError::Compare(format!(
                "runs use different datasets ({} vs {})",
                &first.dataset_fingerprint[..12.min(first.dataset_fingerprint.len())],
                &r.dataset_fingerprint[..12.min(r.dataset_fingerprint.len())]
            )));
        }
        if r.target_accuracy != first.target_accuracy {
            return Err(HarnessError::Compare(
                "runs use different target accuracies".into(),
            ));
        }
    }
    Ok(first.target_accuracy)
}

fn labels(policies: &[Policy]) -> Vec<String> {
    policies
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let clash = policies.iter().filter(|q| *q == p).count() > 1;
            if clash {
                format!("{p}#{}", i + 1)
            } else {
                p.to_string()
            }
        })
        .collect()
}

/// Groups finished runs into arms (same config up to the seed), one row each.
pub fn compare_runs(runs: &[RunSummary]) -> Result<ComparisonTable, HarnessError> {
    if runs.len() < 2 {
        return Err(HarnessError::Compare(
            "need at least two runs to compare".into(),
        ));
    }
    let all: Vec<&RunSummary> = runs.iter().collect();
    let target = check_comparable(&all)?;

    let mut arms: Vec<(String, Vec<&RunSummary>)> = Vec::new();
    for r in runs {
        match arms.iter_mut().find(|(fp, _)| *fp == r.arm_fingerprint) {
            Some((_, members)) => members.push(r),
            None => arms.push((r.arm_fingerprint.clone(), vec![r])),
        }
    }
    let policies: Vec<Policy> = arms.iter().map(|(_, m)| m[0].policy).collect();
    let rows = labels(&policies)
        .into_iter()
        .zip(&arms)
        .map(|(label, (_, members))| build_row(label, members, target))
        .collect();
    Ok(ComparisonTable {
        target_accuracy: target,
        rows,
    })
}

/// Runs every config over its seeds and reports one row per config.
pub fn compare(configs: &[ExperimentConfig]) -> Result<ComparisonTable, HarnessError> {
    if configs.len() < 2 {
        return Err(HarnessError::Compare(
            "need at least two configs to compare".into(),
        ));
    }
    let fp = configs[0].dataset_fingerprint();
    if configs.iter().any(|c| c.dataset_fingerprint() != fp) {
        return Err(HarnessError::Compare(
            "configs describe different datasets".into(),
        ));
    }
    let per_config: Vec<Vec<RunSummary>> = configs
        .iter()
        .map(|c| Ok(run_all_seeds(c)?.iter().map(RunSummary::from_log).collect()))
        .collect::<Result<_, HarnessError>>()?;
    let all: Vec<&RunSummary> = per_config.iter().flatten().collect();
    let target = check_comparable(&all)?;

    let policies: Vec<Policy> = configs.iter().map(|c| c.policy).collect();
    let rows = labels(&policies)
        .into_iter()
        .zip(&per_config)
        .map(|(label, runs)| build_row(label, &runs.iter().collect::<Vec<_>>(), target))
        .collect();
    Ok(ComparisonTable {
        target_accuracy: target,
        rows,
    })
}
