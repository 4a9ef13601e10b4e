use std::fs;

use fairequity_core::harness::compare::{compare, compare_runs, RunSummary, CSV_HEADER};
use fairequity_core::harness::export::{
    discover_runs, read_config, read_fairness, read_summary, read_tracker, write_run,
};
use fairequity_core::harness::{run_experiment, ExperimentConfig, HarnessError, Policy};
use sha2::{Digest, Sha256};

fn small() -> ExperimentConfig {
    ExperimentConfig::parse(
        "clients = 20\n\
         per_round = 4\n\
         total_rounds = 15\n\
         max_participation = 5\n\
         gap_max = 4\n\
         lambda_max = 1\n\
         max_overlooked = 2\n\
         num_features = 5\n\
         samples_per_class = 40\n\
         shard_size = 10\n\
         test_samples_per_class = 10\n\
         poisoners = 1\n\
         seeds = 1,2,3\n",
    )
    .unwrap()
}

#[test]
fn identical_seeds_write_identical_artifacts() {
    let cfg = small();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_run(&run_experiment(&cfg, 5).unwrap(), a.path()).unwrap();
    write_run(&run_experiment(&cfg, 5).unwrap(), b.path()).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.len() >= 4);
    for name in names {
        assert_eq!(
            fs::read(a.path().join(&name)).unwrap(),
            fs::read(b.path().join(&name)).unwrap(),
            "{name:?}"
        );
    }

    let other = tempfile::tempdir().unwrap();
    write_run(&run_experiment(&cfg, 6).unwrap(), other.path()).unwrap();
    assert_ne!(
        fs::read(a.path().join("metrics.csv")).unwrap(),
        fs::read(other.path().join("metrics.csv")).unwrap()
    );
}

#[test]
fn fingerprint_is_the_hash_of_the_written_config() {
    let log = run_experiment(&small(), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run(&log, dir.path()).unwrap();

    let text = fs::read_to_string(dir.path().join("config.txt")).unwrap();
    let expected = hex::encode(Sha256::digest(text.as_bytes()));
    let stored = fs::read_to_string(dir.path().join("config.fingerprint")).unwrap();
    assert_eq!(stored.trim(), expected);
    assert_eq!(read_config(dir.path()).unwrap(), small().with_seed(2));

    fs::write(
        dir.path().join("config.txt"),
        text.replace("per_round = 4", "per_round = 3"),
    )
    .unwrap();
    assert!(matches!(
        read_config(dir.path()),
        Err(HarnessError::Parse { .. })
    ));
}

#[test]
fn artifacts_read_back_losslessly() {
    let log = run_experiment(&small(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run(&log, dir.path()).unwrap();

    assert_eq!(
        read_summary(dir.path()).unwrap(),
        RunSummary::from_log(&log)
    );
    assert_eq!(read_fairness(dir.path()).unwrap(), log.fairness);
    let tracker = read_tracker(dir.path()).unwrap();
    assert_eq!(tracker.len(), log.tracker.len());
    for (a, b) in tracker.iter().zip(&log.tracker) {
        assert_eq!(
            (a.times_selected, a.gap, a.suspended_until),
            (b.times_selected, b.gap, b.suspended_until)
        );
    }

    let events = fs::read_to_string(dir.path().join("events.log")).unwrap();
    let selections = events
        .lines()
        .filter(|l| l.split(',').nth(1) == Some("select"))
        .count();
    assert_eq!(
        selections,
        log.reports.iter().map(|r| r.selected.len()).sum::<usize>()
    );
    for line in events.lines() {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 4, "{line}");
        assert!(["select", "flag", "suspend"].contains(&f[1]), "{line}");
        f[0].parse::<u32>().unwrap();
        f[2].parse::<u32>().unwrap();
    }

    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next(),
        Some("round,accuracy,loss,elapsed_s,n_selected,n_suspended")
    );
    assert_eq!(metrics.lines().count(), 16);
}

#[test]
fn identical_configs_compare_to_identical_rows() {
    let cfg = small();
    let table = compare(&[cfg.clone(), cfg]).unwrap();
    assert_eq!(table.rows.len(), 2);
    let (a, b) = (&table.rows[0], &table.rows[1]);
    assert_eq!(
        (a.label.as_str(), b.label.as_str()),
        ("fairequity#1", "fairequity#2")
    );
    assert_eq!(a.jfi, b.jfi);
    assert_eq!(a.max_accuracy, b.max_accuracy);
    assert_eq!(a.rounds_to_accuracy, b.rounds_to_accuracy);
    assert_eq!(a.time_to_accuracy, b.time_to_accuracy);
    assert_eq!(a.final_loss, b.final_loss);

    let csv = table.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    assert_eq!(
        CSV_HEADER,
        "label,policy,runs,jfi,max_accuracy,rounds_to_accuracy,time_to_accuracy_s,final_loss"
    );
    for line in lines {
        assert_eq!(line.split(',').count(), 8);
    }
}

#[test]
fn different_datasets_are_not_compared() {
    let a = small();
    let mut b = small().with_policy(Policy::Random);
    b.noise_level = 0.5;
    assert!(matches!(
        compare(&[a.clone(), b.clone()]),
        Err(HarnessError::Compare(_))
    ));

    let runs = vec![
        RunSummary::from_log(&run_experiment(&a, 1).unwrap()),
        RunSummary::from_log(&run_experiment(&b, 1).unwrap()),
    ];
    assert!(matches!(compare_runs(&runs), Err(HarnessError::Compare(_))));
}

#[test]
fn run_directories_group_into_arms() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small();
    for policy in [Policy::FairEquity, Policy::Random] {
        for &seed in &cfg.seeds {
            let log = run_experiment(&cfg.with_policy(policy), seed).unwrap();
            write_run(&log, &root.path().join(format!("{policy}-seed-{seed}"))).unwrap();
        }
    }
    let dirs = discover_runs(root.path()).unwrap();
    assert_eq!(dirs.len(), 6);
    let summaries: Vec<RunSummary> = dirs.iter().map(|d| read_summary(d).unwrap()).collect();
    let table = compare_runs(&summaries).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert!(table.rows.iter().all(|r| r.runs == 3));
    assert!(table.row("fairequity").is_some() && table.row("random").is_some());
}

#[test]
fn failures_name_their_module() {
    let mut cfg = small();
    cfg.train.local_lr = 1e308;
    let err = run_experiment(&cfg, 1).unwrap_err();
    assert_eq!(err.module(), "fl_engine", "{err}");

    let err = ExperimentConfig::parse("per_round = 500\n").unwrap_err();
    assert_eq!(err.module(), "harness");
    let err = ExperimentConfig::parse("bogus = 1\n").unwrap_err();
    assert!(err.to_string().contains("bogus"));
}

#[test]
fn guard_only_acts_under_fairequity() {
    let cfg = ExperimentConfig::parse(include_str!("../../../configs/outlier.conf")).unwrap();
    let fair = run_experiment(&cfg, 1).unwrap();
    let random = run_experiment(&cfg.with_policy(Policy::Random), 1).unwrap();
    assert_eq!(fair.roles, random.roles);
    assert!(fair
        .roles
        .poisoners
        .iter()
        .all(|p| fair.ledger.ever_suspended().contains(p)));
    assert!(random.ledger.ever_suspended().is_empty());
    // A client suspended after round k sits out rounds k+1 ..= k+suspension_rounds.
    let span = cfg.guard.suspension_rounds;
    for r in &fair.reports {
        for id in &r.newly_suspended {
            for later in fair
                .reports
                .iter()
                .filter(|x| x.round > r.round && x.round <= r.round + span)
            {
                assert!(
                    !later.selected.contains(id),
                    "client {id} selected in round {}",
                    later.round
                );
            }
        }
    }
}

#[test]
fn fairequity_is_fairer_on_the_scenarios() {
    for text in [
        include_str!("../../../configs/default.conf"),
        include_str!("../../../configs/noisy_poisoned.conf"),
    ] {
        let mut cfg = ExperimentConfig::parse(text).unwrap();
        cfg.seeds = vec![1, 2];
        let table = compare(&[
            cfg.with_policy(Policy::FairEquity),
            cfg.with_policy(Policy::Random),
        ])
        .unwrap();
        let f = table.row("fairequity").unwrap();
        let r = table.row("random").unwrap();
        assert!(f.jfi > r.jfi, "{} vs {}", f.jfi, r.jfi);
    }
}
