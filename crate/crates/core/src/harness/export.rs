//! Run directory layout.
//!
//! | file                 | content                                                          |
//! |----------------------|------------------------------------------------------------------|
//! | `metrics.csv`        | `round,accuracy,loss,elapsed_s,n_selected,n_suspended`           |
//! | `fairness.json`      | per-client `participation`, `quality`, `ratio`, plus `jfi`        |
//! | `events.log`         | `round,type,client_id,reason` per selection, flag and suspension |
//! | `config.fingerprint` | SHA-256 of the canonical config                                  |
//! | `config.txt`         | canonical config (single seed)                                   |
//! | `tracker.csv`        | final client tracker records                                     |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::compare::RunSummary;
use super::config::ExperimentConfig;
use super::run::{FairnessReport, RunLog};
use super::HarnessError;
use crate::metrics::{ConvergenceRecord, RoundMetrics};
use crate::selector::ClientTrackerRecord;
use crate::types::ClientId;

pub const METRICS_FILE: &str = "metrics.csv";
pub const FAIRNESS_FILE: &str = "fairness.json";
pub const EVENTS_FILE: &str = "events.log";
pub const FINGERPRINT_FILE: &str = "config.fingerprint";
pub const CONFIG_FILE: &str = "config.txt";
pub const TRACKER_FILE: &str = "tracker.csv";

pub const METRICS_HEADER: &str = "round,accuracy,loss,elapsed_s,n_selected,n_suspended";
const TRACKER_HEADER: &str =
    "client_id,times_selected,gap,ever_selected,suspended_until,suspended_rounds,unavailable_rounds";

pub fn metrics_csv(log: &RunLog) -> String {
    let mut out = String::new();
    writeln!(out, "{METRICS_HEADER}").unwrap();
    for r in &log.reports {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.round,
            r.accuracy,
            r.loss,
            r.elapsed_s,
            r.selected.len(),
            r.n_suspended
        )
        .unwrap();
    }
    out
}

pub fn events_log(log: &RunLog) -> String {
    log.events
        .iter()
        .map(|e| {
            format!(
                "{},{},{},{}\n",
                e.round,
                e.kind.as_str(),
                e.client,
                e.reason
            )
        })
        .collect()
}

pub fn tracker_csv(records: &[ClientTrackerRecord]) -> String {
    let mut out = String::new();
    writeln!(out, "{TRACKER_HEADER}").unwrap();
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.client_id,
            r.times_selected,
            r.gap,
            r.ever_selected,
            r.suspended_until,
            r.suspended_rounds,
            r.unavailable_rounds
        )
        .unwrap();
    }
    out
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), HarnessError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(io_err(&path))
}

fn read(dir: &Path, name: &str) -> Result<(PathBuf, String), HarnessError> {
    let path = dir.join(name);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok((path, text))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> HarnessError {
    HarnessError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Writes every run artifact into `dir`, creating it if needed.
pub fn write_run(log: &RunLog, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write(dir, METRICS_FILE, &metrics_csv(log))?;
    let fairness = serde_json::to_string_pretty(&log.fairness)
        .map_err(|e| HarnessError::Compare(e.to_string()))?;
    write(dir, FAIRNESS_FILE, &(fairness + "\n"))?;
    write(dir, EVENTS_FILE, &events_log(log))?;
    write(
        dir,
        FINGERPRINT_FILE,
        &format!("{}\n", log.config_fingerprint),
    )?;
    write(dir, CONFIG_FILE, &log.config.canonical())?;
    write(dir, TRACKER_FILE, &tracker_csv(&log.tracker))?;
    Ok(())
}

pub fn is_run_dir(dir: &Path) -> bool {
    dir.join(METRICS_FILE).is_file() && dir.join(CONFIG_FILE).is_file()
}

/// Reads `config.txt` and checks it against `config.fingerprint`.
pub fn read_config(dir: &Path) -> Result<ExperimentConfig, HarnessError> {
    let (_, text) = read(dir, CONFIG_FILE)?;
    let cfg = ExperimentConfig::parse(&text)?;
    let (path, fp) = read(dir, FINGERPRINT_FILE)?;
    if fp.trim() != cfg.fingerprint() {
        return Err(parse_err(&path, 1, "fingerprint does not match config.txt"));
    }
    Ok(cfg)
}

pub fn read_metrics(dir: &Path) -> Result<ConvergenceRecord, HarnessError> {
    let (path, text) = read(dir, METRICS_FILE)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(parse_err(&path, 1, "unexpected header"));
    }
    let mut record = ConvergenceRecord::default();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let bad = |m: String| parse_err(&path, i + 2, m);
        if f.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(e.to_string()));
        record.push(RoundMetrics {
            round: f[0].parse().map_err(|e| bad(format!("round: {e}")))?,
            accuracy: num(f[1])?,
            loss: num(f[2])?,
            elapsed_s: num(f[3])?,
        });
    }
    Ok(record)
}

pub fn read_fairness(dir: &Path) -> Result<FairnessReport, HarnessError> {
    let (path, text) = read(dir, FAIRNESS_FILE)?;
    serde_json::from_str(&text).map_err(|e| parse_err(&path, e.line(), e.to_string()))
}

pub fn read_tracker(dir: &Path) -> Result<Vec<ClientTrackerRecord>, HarnessError> {
    let (path, text) = read(dir, TRACKER_FILE)?;
    let mut lines = text.lines();
    if lines.next() != Some(TRACKER_HEADER) {
        return Err(parse_err(&path, 1, "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |m: String| parse_err(&path, i + 2, m);
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(format!("expected 7 fields, found {}", f.len())));
            }
            let int = |s: &str| s.parse::<u32>().map_err(|e| bad(e.to_string()));
            Ok(ClientTrackerRecord {
                client_id: ClientId(int(f[0])?),
                times_selected: int(f[1])?,
                gap: int(f[2])?,
                ever_selected: f[3].parse().map_err(|e| bad(format!("{e}")))?,
                suspended_until: int(f[4])?,
                available: true,
                suspended_rounds: int(f[5])?,
                unavailable_rounds: int(f[6])?,
            })
        })
        .collect()
}

/// Loads what [`super::compare_runs`] needs from a run directory.
pub fn read_summary(dir: &Path) -> Result<RunSummary, HarnessError> {
    let cfg = read_config(dir)?;
    let fairness = read_fairness(dir)?;
    Ok(RunSummary {
        policy: cfg.policy,
        seed: cfg.seeds[0],
        arm_fingerprint: cfg.arm_fingerprint(),
        dataset_fingerprint: cfg.dataset_fingerprint(),
        target_accuracy: cfg.target_accuracy,
        jfi: fairness.jfi,
        record: read_metrics(dir)?,
    })
}

/// `dir` itself if it is a run directory, otherwise its run subdirectories in name order.
pub fn discover_runs(dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    if is_run_dir(dir) {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_run_dir(p))
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(HarnessError::Compare(format!(
            "{} holds no run directories",
            dir.display()
        )));
    }
    Ok(found)
}
