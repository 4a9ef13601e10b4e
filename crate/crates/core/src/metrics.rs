//! Quality-weighted Jain fairness and convergence measures.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::Round;

/// Floor applied to normalized quality so that `S_i / Q_i` stays finite.
pub const QUALITY_FLOOR: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("n_class {n_class} outside 1..={total}")]
    ClassCount { n_class: usize, total: usize },
    #[error("p_noisy {0} outside [0, 1]")]
    NoiseFraction(f64),
    #[error("fairness index needs at least one client")]
    NoClients,
    #[error("fairness index undefined: no client participated")]
    NoParticipation,
    #[error("quality of client {index} must be positive, got {value}")]
    Quality { index: usize, value: f64 },
    #[error("participation of client {index} must be finite and non-negative, got {value}")]
    Participation { index: usize, value: f64 },
}

/// Normalized data quality in `[QUALITY_FLOOR, 1]`.
///
/// The raw score `n_class * (1 - p_noisy)` is scaled by the total class count
/// and the `[0.5, 1]` band is mapped affinely onto `[0, 1]`; anything at or
/// below 0.5 is floored.
pub fn data_quality(
    n_class: usize,
    p_noisy: f64,
    num_classes_total: usize,
) -> Result<f64, MetricsError> {
    if n_class < 1 || n_class > num_classes_total {
        return Err(MetricsError::ClassCount {
            n_class,
            total: num_classes_total,
        });
    }
    if !(0.0..=1.0).contains(&p_noisy) {
        return Err(MetricsError::NoiseFraction(p_noisy));
    }
    let raw = n_class as f64 * (1.0 - p_noisy);
    let scaled = raw / num_classes_total as f64;
    Ok(((scaled - 0.5) / 0.5).clamp(QUALITY_FLOOR, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessInput {
    /// Participation count `S_i`.
    pub participation: f64,
    /// Normalized quality `Q_i`.
    pub quality: f64,
}

impl FairnessInput {
    pub fn new(participation: f64, quality: f64) -> Self {
        Self {
            participation,
            quality,
        }
    }

    pub fn ratio(&self) -> f64 {
        self.participation / self.quality
    }
}

/// Jain's index over `r_i = S_i / Q_i`: `(sum r)^2 / (n * sum r^2)`.
pub fn jain_fairness_index(inputs: &[FairnessInput]) -> Result<f64, MetricsError> {
    if inputs.is_empty() {
        return Err(MetricsError::NoClients);
    }
    for (index, i) in inputs.iter().enumerate() {
        if !(i.quality.is_finite() && i.quality > 0.0) {
            return Err(MetricsError::Quality {
                index,
                value: i.quality,
            });
        }
        if !(i.participation.is_finite() && i.participation >= 0.0) {
            return Err(MetricsError::Participation {
                index,
                value: i.participation,
            });
        }
    }
    if inputs.iter().all(|i| i.participation == 0.0) {
        return Err(MetricsError::NoParticipation);
    }
    // Dividing by the largest ratio keeps the squares in range.
    let max = inputs.iter().map(FairnessInput::ratio).fold(0.0, f64::max);
    let (sum, sum_sq) = inputs.iter().fold((0.0, 0.0), |(s, sq), i| {
        let r = i.ratio() / max;
        (s + r, sq + r * r)
    });
    Ok((sum * sum / (inputs.len() as f64 * sum_sq)).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: Round,
    /// Cumulative elapsed time at the end of the round, in seconds.
    pub elapsed_s: f64,
    pub accuracy: f64,
    pub loss: f64,
}

/// Per-round global accuracy, loss and elapsed time of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub rounds: Vec<RoundMetrics>,
}

impl ConvergenceRecord {
    pub fn push(&mut self, m: RoundMetrics) {
        debug_assert!(self
            .rounds
            .last()
            .is_none_or(|last| last.elapsed_s <= m.elapsed_s));
        self.rounds.push(m);
    }

    fn first_reaching(&self, target: f64) -> Option<&RoundMetrics> {
        self.rounds.iter().find(|m| m.accuracy >= target)
    }

    /// First round whose accuracy is at least `target` (`RA_A`).
    pub fn rounds_to_accuracy(&self, target: f64) -> Option<Round> {
        self.first_reaching(target).map(|m| m.round)
    }

    /// Elapsed time at the first round reaching `target` (`TA_A`).
    pub fn time_to_accuracy(&self, target: f64) -> Option<f64> {
        self.first_reaching(target).map(|m| m.elapsed_s)
    }

    pub fn max_accuracy(&self) -> Option<f64> {
        self.rounds.iter().map(|m| m.accuracy).reduce(f64::max)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rounds.last().map(|m| m.loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(s: &[f64], q: &[f64]) -> Vec<FairnessInput> {
        s.iter()
            .zip(q)
            .map(|(&s, &q)| FairnessInput::new(s, q))
            .collect()
    }

    #[test]
    fn quality_examples() {
        assert_eq!(data_quality(10, 0.0, 10).unwrap(), 1.0);
        // scaled 0.75 -> (0.75 - 0.5) / 0.5
        assert!((data_quality(10, 0.25, 10).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(data_quality(5, 0.0, 10).unwrap(), QUALITY_FLOOR);
        assert_eq!(data_quality(3, 0.5, 10).unwrap(), QUALITY_FLOOR);
        assert!(matches!(
            data_quality(0, 0.0, 10),
            Err(MetricsError::ClassCount { .. })
        ));
        assert!(matches!(
            data_quality(11, 0.0, 10),
            Err(MetricsError::ClassCount { .. })
        ));
        assert_eq!(
            data_quality(5, 1.5, 10),
            Err(MetricsError::NoiseFraction(1.5))
        );
    }

    #[test]
    fn jfi_examples() {
        assert_eq!(
            jain_fairness_index(&inputs(&[3.0; 5], &[0.5; 5])).unwrap(),
            1.0
        );
        assert_eq!(
            jain_fairness_index(&inputs(&[4.0, 0.0, 0.0, 0.0], &[1.0; 4])).unwrap(),
            0.25
        );
        let v = jain_fairness_index(&inputs(&[2.0, 1.0], &[1.0, 1.0])).unwrap();
        assert!((v - 0.9).abs() < 1e-15);
        // equal ratios through proportional participation
        let v = jain_fairness_index(&inputs(&[2.0, 1.0], &[1.0, 0.5])).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn jfi_errors() {
        assert_eq!(jain_fairness_index(&[]), Err(MetricsError::NoClients));
        assert_eq!(
            jain_fairness_index(&inputs(&[0.0, 0.0], &[1.0, 1.0])),
            Err(MetricsError::NoParticipation)
        );
        assert!(matches!(
            jain_fairness_index(&inputs(&[1.0, 1.0], &[1.0, 0.0])),
            Err(MetricsError::Quality { index: 1, .. })
        ));
    }

    fn record(acc: &[f64]) -> ConvergenceRecord {
        let mut r = ConvergenceRecord::default();
        for (i, &a) in acc.iter().enumerate() {
            r.push(RoundMetrics {
                round: i as u32 + 1,
                elapsed_s: 2.5 * (i + 1) as f64,
                accuracy: a,
                loss: 1.0 - a,
            });
        }
        r
    }

    #[test]
    fn rounds_and_time_to_accuracy() {
        let r = record(&[0.3, 0.5, 0.7]);
        assert_eq!(r.rounds_to_accuracy(0.5), Some(2));
        assert_eq!(r.rounds_to_accuracy(0.71), None);
        assert_eq!(r.time_to_accuracy(0.7), Some(7.5));
        assert_eq!(r.time_to_accuracy(0.9), None);
        assert_eq!(r.max_accuracy(), Some(0.7));
        assert!((r.final_loss().unwrap() - 0.3).abs() < 1e-15);
    }
}
