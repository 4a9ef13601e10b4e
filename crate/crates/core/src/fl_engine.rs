//! Minimal FedAvg: per-sample cross-entropy, local mini-batch SGD and the
//! unweighted delta-averaging aggregation rule.
//!
//! The model is pluggable through [`Model`]; [`SoftmaxRegression`] is the
//! default multinomial logistic regression.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_fabric::{ClientDataset, PoisonMode};
use crate::types::{ClientId, Round, Sample};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("feature vector has {got} entries, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parameter vector has {got} entries, model expects {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("local training diverged on client {0}")]
    Diverged(ClientId),
    #[error("no local updates to aggregate")]
    NoUpdates,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

/// Flat parameter vector of the shared model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelParams(pub Vec<f64>);

impl ModelParams {
    pub fn zeros(dim: usize) -> Self {
        ModelParams(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// A differentiable classifier over flat parameters.
pub trait Model: Sync {
    fn num_params(&self) -> usize;

    fn num_classes(&self) -> usize;

    /// Class scores (logits) for one feature vector.
    fn scores(&self, params: &ModelParams, x: &[f64]) -> Result<Vec<f64>, EngineError>;

    /// Adds `scale * d loss / d params` for one sample into `grad` and
    /// returns that sample's loss.
    fn accumulate_gradient(
        &self,
        params: &ModelParams,
        x: &[f64],
        y: usize,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64, EngineError>;

    fn init_params(&self) -> ModelParams {
        ModelParams::zeros(self.num_params())
    }

    /// Cross-entropy of the softmax of the scores.
    fn sample_loss(&self, params: &ModelParams, x: &[f64], y: usize) -> Result<f64, EngineError> {
        self.check_label(y)?;
        let scores = self.scores(params, x)?;
        Ok(log_sum_exp(&scores) - scores[y])
    }

    fn sample_gradient(
        &self,
        params: &ModelParams,
        x: &[f64],
        y: usize,
    ) -> Result<Vec<f64>, EngineError> {
        let mut grad = vec![0.0; self.num_params()];
        self.accumulate_gradient(params, x, y, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Arg-max class; ties go to the lowest index.
    fn predict(&self, params: &ModelParams, x: &[f64]) -> Result<usize, EngineError> {
        let scores = self.scores(params, x)?;
        let mut best = 0;
        for (c, &s) in scores.iter().enumerate().skip(1) {
            if s > scores[best] {
                best = c;
            }
        }
        Ok(best)
    }

    fn check_label(&self, y: usize) -> Result<(), EngineError> {
        if y >= self.num_classes() {
            return Err(EngineError::InvalidLabel {
                label: y,
                num_classes: self.num_classes(),
            });
        }
        Ok(())
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Multinomial logistic regression. Parameter layout: one weight row of
/// `num_features` entries per class, then one bias per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SoftmaxRegression {
    pub num_classes: usize,
    pub num_features: usize,
}

impl SoftmaxRegression {
    pub fn new(num_classes: usize, num_features: usize) -> Self {
        Self {
            num_classes,
            num_features,
        }
    }

    fn check(&self, params: &ModelParams, x: &[f64]) -> Result<(), EngineError> {
        if params.len() != self.num_params() {
            return Err(EngineError::ParamLength {
                expected: self.num_params(),
                got: params.len(),
            });
        }
        if x.len() != self.num_features {
            return Err(EngineError::DimensionMismatch {
                expected: self.num_features,
                got: x.len(),
            });
        }
        Ok(())
    }
}

impl Model for SoftmaxRegression {
    fn num_params(&self) -> usize {
        self.num_classes * (self.num_features + 1)
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn scores(&self, params: &ModelParams, x: &[f64]) -> Result<Vec<f64>, EngineError> {
        self.check(params, x)?;
        let w = params.as_slice();
        let bias = &w[self.num_classes * self.num_features..];
        Ok(w.chunks_exact(self.num_features)
            .take(self.num_classes)
            .zip(bias)
            .map(|(row, b)| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b)
            .collect())
    }

    fn accumulate_gradient(
        &self,
        params: &ModelParams,
        x: &[f64],
        y: usize,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64, EngineError> {
        self.check_label(y)?;
        let scores = self.scores(params, x)?;
        let lse = log_sum_exp(&scores);
        let f = self.num_features;
        let bias_offset = self.num_classes * f;
        for (c, &s) in scores.iter().enumerate() {
            // softmax residual p_c - [c == y]
            let residual = (s - lse).exp() - if c == y { 1.0 } else { 0.0 };
            let r = scale * residual;
            for (g, xj) in grad[c * f..(c + 1) * f].iter_mut().zip(x) {
                *g += r * xj;
            }
            grad[bias_offset + c] += r;
        }
        Ok(lse - scores[y])
    }
}

/// Mean sample loss over one client's data.
pub fn local_loss<M: Model + ?Sized>(
    model: &M,
    params: &ModelParams,
    samples: &[Sample],
) -> Result<f64, EngineError> {
    if samples.is_empty() {
        return Err(EngineError::EmptyDataset);
    }
    let total = samples
        .iter()
        .map(|s| model.sample_loss(params, &s.features, s.label))
        .sum::<Result<f64, _>>()?;
    Ok(total / samples.len() as f64)
}

/// Sample-weighted pooled mean loss across all clients' data.
pub fn global_loss<'a, M, I>(
    model: &M,
    params: &ModelParams,
    datasets: I,
) -> Result<f64, EngineError>
where
    M: Model + ?Sized,
    I: IntoIterator<Item = &'a [Sample]>,
{
    let mut total = 0.0;
    let mut count = 0usize;
    for samples in datasets {
        for s in samples {
            total += model.sample_loss(params, &s.features, s.label)?;
        }
        count += samples.len();
    }
    if count == 0 {
        return Err(EngineError::EmptyDataset);
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub local_epochs: u32,
    pub batch_size: usize,
    pub local_lr: f64,
    /// Server learning rate for round 1.
    pub global_lr: f64,
    /// Per-round multiplicative decay of the server learning rate; 1.0 keeps it constant.
    pub global_lr_decay: f64,
    /// Weight deltas by sample count instead of the plain mean.
    pub weighted_aggregation: bool,
    /// Factor applied to a negated update by `update_negate` poisoners.
    pub poison_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            local_epochs: 1,
            batch_size: 10,
            local_lr: 0.05,
            global_lr: 1.0,
            global_lr_decay: 1.0,
            weighted_aggregation: false,
            poison_scale: 8.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let fail = |m: &str| Err(EngineError::InvalidConfig(m.to_string()));
        if self.local_epochs == 0 || self.batch_size == 0 {
            return fail("local_epochs and batch_size must be positive");
        }
        if !(self.local_lr.is_finite() && self.local_lr >= 0.0) {
            return fail("local_lr must be finite and non-negative");
        }
        if !(self.global_lr.is_finite() && self.global_lr > 0.0) {
            return fail("global_lr must be positive");
        }
        if !(self.global_lr_decay.is_finite() && self.global_lr_decay > 0.0) {
            return fail("global_lr_decay must be positive");
        }
        if !(self.poison_scale.is_finite() && self.poison_scale >= 0.0) {
            return fail("poison_scale must be finite and non-negative");
        }
        Ok(())
    }

    /// Server learning rate at `round` (1-based).
    pub fn global_lr_at(&self, round: Round) -> f64 {
        self.global_lr * self.global_lr_decay.powi(round.saturating_sub(1) as i32)
    }
}

/// A client's contribution to one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalUpdate {
    pub client_id: ClientId,
    /// Local parameters minus the global parameters the client started from.
    pub delta: Vec<f64>,
    pub sample_count: usize,
    /// Mean loss of the trained local model on the client's own data.
    pub local_loss: f64,
}

/// Mini-batch SGD from `global` on the client's data.
///
/// Batches are reshuffled every epoch from `seed`; the last partial batch is
/// kept. `update_negate` poisoners return `-poison_scale * delta`.
pub fn local_train<M: Model + ?Sized>(
    model: &M,
    global: &ModelParams,
    client: &ClientDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<LocalUpdate, EngineError> {
    cfg.validate()?;
    if client.samples.is_empty() {
        return Err(EngineError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = global.clone();
    let mut grad = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..client.samples.len()).collect();

    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = &client.samples[i];
                model.accumulate_gradient(&params, &s.features, s.label, scale, &mut grad)?;
            }
            for (p, g) in params.0.iter_mut().zip(&grad) {
                *p -= cfg.local_lr * g;
            }
        }
        if !params.is_finite() {
            return Err(EngineError::Diverged(client.client_id));
        }
    }

    let loss = local_loss(model, &params, &client.samples)?;
    let mut delta: Vec<f64> = params.0.iter().zip(&global.0).map(|(l, g)| l - g).collect();
    if client.poison == Some(PoisonMode::UpdateNegate) {
        delta.iter_mut().for_each(|d| *d *= -cfg.poison_scale);
    }
    Ok(LocalUpdate {
        client_id: client.client_id,
        delta,
        sample_count: client.samples.len(),
        local_loss: loss,
    })
}

/// `w(q+1) = w(q) + alpha * mean(deltas)`, or the sample-weighted mean when
/// `weighted` is set.
pub fn aggregate(
    global: &ModelParams,
    updates: &[LocalUpdate],
    alpha: f64,
    weighted: bool,
) -> Result<ModelParams, EngineError> {
    if updates.is_empty() {
        return Err(EngineError::NoUpdates);
    }
    let dim = global.len();
    if let Some(bad) = updates.iter().find(|u| u.delta.len() != dim) {
        return Err(EngineError::ParamLength {
            expected: dim,
            got: bad.delta.len(),
        });
    }
    let weights: Vec<f64> = if weighted {
        let total: usize = updates.iter().map(|u| u.sample_count).sum();
        if total == 0 {
            return Err(EngineError::EmptyDataset);
        }
        updates
            .iter()
            .map(|u| u.sample_count as f64 / total as f64)
            .collect()
    } else {
        vec![1.0 / updates.len() as f64; updates.len()]
    };

    let mut sum = vec![0.0; dim];
    for (u, w) in updates.iter().zip(&weights) {
        for (s, d) in sum.iter_mut().zip(&u.delta) {
            *s += w * d;
        }
    }
    Ok(ModelParams(
        global
            .0
            .iter()
            .zip(&sum)
            .map(|(g, s)| g + alpha * s)
            .collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Arg-max accuracy and mean loss on a held-out set.
pub fn evaluate<M: Model + ?Sized>(
    model: &M,
    params: &ModelParams,
    test: &[Sample],
) -> Result<Evaluation, EngineError> {
    if test.is_empty() {
        return Err(EngineError::EmptyDataset);
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for s in test {
        if model.predict(params, &s.features)? == s.label {
            correct += 1;
        }
        loss += model.sample_loss(params, &s.features, s.label)?;
    }
    let n = test.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn client(samples: Vec<Sample>) -> ClientDataset {
        ClientDataset::new(ClientId(0), 2, samples)
    }

    #[test]
    fn zero_weights_binary_loss_is_ln2() {
        let m = SoftmaxRegression::new(2, 3);
        let p = m.init_params();
        let loss = m.sample_loss(&p, &[0.3, -1.0, 2.0], 1).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_prediction_has_vanishing_loss_and_gradient() {
        let m = SoftmaxRegression::new(2, 1);
        // bias gap of 60 favours class 0
        let p = ModelParams(vec![0.0, 0.0, 30.0, -30.0]);
        let loss = m.sample_loss(&p, &[1.0], 0).unwrap();
        assert!((0.0..1e-25).contains(&loss));
        let g = m.sample_gradient(&p, &[1.0], 0).unwrap();
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-25);
    }

    #[test]
    fn loss_matches_direct_softmax() {
        let m = SoftmaxRegression::new(3, 2);
        let p = ModelParams(vec![0.5, -0.25, 1.0, 0.75, -1.5, 0.125, 0.1, -0.2, 0.3]);
        let x = [0.4, -1.1];
        let z: Vec<f64> = (0..3)
            .map(|c| p.0[2 * c] * x[0] + p.0[2 * c + 1] * x[1] + p.0[6 + c])
            .collect();
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let expected = -(e[2] / e.iter().sum::<f64>()).ln();
        let loss = m.sample_loss(&p, &x, 2).unwrap();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_gradient_is_half_residual() {
        let m = SoftmaxRegression::new(2, 3);
        let x = [1.0, -2.0, 0.5];
        let g = m.sample_gradient(&m.init_params(), &x, 1).unwrap();
        for j in 0..3 {
            assert_eq!(g[3 + j], -0.5 * x[j]);
            assert_eq!(g[j], 0.5 * x[j]);
        }
        assert_eq!(&g[6..], &[0.5, -0.5]);
    }

    #[test]
    fn dimension_and_label_errors() {
        let m = SoftmaxRegression::new(2, 3);
        let p = m.init_params();
        assert_eq!(
            m.sample_loss(&p, &[1.0], 0),
            Err(EngineError::DimensionMismatch {
                expected: 3,
                got: 1
            })
        );
        assert!(matches!(
            m.sample_loss(&p, &[1.0, 2.0, 3.0], 2),
            Err(EngineError::InvalidLabel { .. })
        ));
        assert!(matches!(
            m.sample_loss(&ModelParams::zeros(2), &[1.0, 2.0, 3.0], 0),
            Err(EngineError::ParamLength { .. })
        ));
    }

    #[test]
    fn local_loss_is_mean() {
        let m = SoftmaxRegression::new(2, 1);
        let p = ModelParams(vec![1.0, -1.0, 0.0, 0.5]);
        let a = Sample::new(vec![0.5], 0);
        let b = Sample::new(vec![-2.0], 1);
        let la = m.sample_loss(&p, &a.features, a.label).unwrap();
        let lb = m.sample_loss(&p, &b.features, b.label).unwrap();
        assert_eq!(local_loss(&m, &p, std::slice::from_ref(&a)).unwrap(), la);
        assert!((local_loss(&m, &p, &[a, b]).unwrap() - (la + lb) / 2.0).abs() < 1e-15);
        assert_eq!(local_loss(&m, &p, &[]), Err(EngineError::EmptyDataset));
    }

    #[test]
    fn global_loss_pools_samples() {
        let m = SoftmaxRegression::new(2, 1);
        let p = ModelParams(vec![0.3, -0.7, 0.1, 0.0]);
        let c1 = vec![Sample::new(vec![1.0], 0)];
        let c2 = vec![
            Sample::new(vec![2.0], 1),
            Sample::new(vec![-1.0], 0),
            Sample::new(vec![0.5], 1),
        ];
        let pooled: f64 = c1
            .iter()
            .chain(&c2)
            .map(|s| m.sample_loss(&p, &s.features, s.label).unwrap())
            .sum::<f64>()
            / 4.0;
        let g = global_loss(&m, &p, [c1.as_slice(), c2.as_slice()]).unwrap();
        assert!((g - pooled).abs() < 1e-12);
        assert_eq!(
            global_loss(&m, &p, [c2.as_slice()]).unwrap(),
            local_loss(&m, &p, &c2).unwrap()
        );
        let empty: [&[Sample]; 2] = [&[], &[]];
        assert_eq!(global_loss(&m, &p, empty), Err(EngineError::EmptyDataset));
    }

    #[test]
    fn zero_learning_rate_gives_zero_delta() {
        let m = SoftmaxRegression::new(2, 2);
        let data = client(vec![
            Sample::new(vec![1.0, 0.0], 0),
            Sample::new(vec![0.0, 1.0], 1),
        ]);
        let cfg = TrainConfig {
            local_lr: 0.0,
            ..TrainConfig::default()
        };
        let u = local_train(&m, &m.init_params(), &data, &cfg, 1).unwrap();
        assert!(u.delta.iter().all(|d| *d == 0.0));
        let negated = ClientDataset {
            poison: Some(PoisonMode::UpdateNegate),
            ..data
        };
        let cfg = TrainConfig {
            poison_scale: 1.0,
            ..cfg
        };
        let u = local_train(&m, &m.init_params(), &negated, &cfg, 1).unwrap();
        assert!(u.delta.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn single_full_batch_step_is_mean_gradient() {
        let m = SoftmaxRegression::new(3, 2);
        let samples = vec![
            Sample::new(vec![1.0, 0.5], 0),
            Sample::new(vec![-0.3, 2.0], 2),
            Sample::new(vec![0.7, -1.2], 1),
        ];
        let global = ModelParams(vec![0.1, 0.2, -0.3, 0.0, 0.5, -0.1, 0.05, 0.0, -0.05]);
        let cfg = TrainConfig {
            local_epochs: 1,
            batch_size: samples.len(),
            local_lr: 0.2,
            ..TrainConfig::default()
        };
        let u = local_train(&m, &global, &client(samples.clone()), &cfg, 5).unwrap();
        let mut mean = vec![0.0; m.num_params()];
        for s in &samples {
            let g = m.sample_gradient(&global, &s.features, s.label).unwrap();
            for (acc, v) in mean.iter_mut().zip(g) {
                *acc += v / 3.0;
            }
        }
        for (d, g) in u.delta.iter().zip(&mean) {
            assert!((d + 0.2 * g).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_seeds_identical_updates() {
        let m = SoftmaxRegression::new(2, 2);
        let samples: Vec<Sample> = (0..25)
            .map(|i| Sample::new(vec![i as f64 / 10.0, 1.0 - i as f64 / 20.0], i % 2))
            .collect();
        let cfg = TrainConfig {
            local_epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let a = local_train(&m, &m.init_params(), &client(samples.clone()), &cfg, 9).unwrap();
        let b = local_train(&m, &m.init_params(), &client(samples), &cfg, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_names_the_client() {
        let m = SoftmaxRegression::new(2, 1);
        let data = ClientDataset::new(
            ClientId(42),
            2,
            vec![Sample::new(vec![1e300], 0), Sample::new(vec![-1e300], 1)],
        );
        let cfg = TrainConfig {
            local_lr: 1e10,
            ..TrainConfig::default()
        };
        assert_eq!(
            local_train(&m, &m.init_params(), &data, &cfg, 0),
            Err(EngineError::Diverged(ClientId(42)))
        );
    }

    fn update(delta: Vec<f64>, n: usize) -> LocalUpdate {
        LocalUpdate {
            client_id: ClientId(0),
            delta,
            sample_count: n,
            local_loss: 0.0,
        }
    }

    #[test]
    fn aggregate_examples() {
        let g = ModelParams(vec![0.0, 0.0]);
        let out = aggregate(
            &g,
            &[update(vec![1.0, 1.0], 1), update(vec![3.0, 3.0], 1)],
            1.0,
            false,
        )
        .unwrap();
        assert_eq!(out.0, vec![2.0, 2.0]);

        let g = ModelParams(vec![0.5, -1.0]);
        let out = aggregate(&g, &[update(vec![0.25, 2.0], 4)], 1.0, false).unwrap();
        assert_eq!(out.0, vec![0.75, 1.0]);

        let out = aggregate(
            &ModelParams(vec![0.0]),
            &[update(vec![1.0], 1), update(vec![4.0], 3)],
            1.0,
            true,
        )
        .unwrap();
        assert_eq!(out.0, vec![3.25]);

        assert_eq!(aggregate(&g, &[], 1.0, false), Err(EngineError::NoUpdates));
        assert!(matches!(
            aggregate(&g, &[update(vec![1.0], 1)], 1.0, false),
            Err(EngineError::ParamLength { .. })
        ));
    }

    #[test]
    fn evaluate_examples() {
        let m = SoftmaxRegression::new(2, 1);
        let balanced = vec![Sample::new(vec![1.0], 0), Sample::new(vec![-1.0], 1)];
        let e = evaluate(&m, &m.init_params(), &balanced).unwrap();
        assert_eq!(e.accuracy, 0.5);
        assert!((e.loss - std::f64::consts::LN_2).abs() < 1e-15);

        let p = ModelParams(vec![2.0, -2.0, 0.0, 0.0]);
        let single = [Sample::new(vec![1.0], 0)];
        let e = evaluate(&m, &p, &single).unwrap();
        assert_eq!(e.accuracy, 1.0);
        assert_eq!(e.loss, m.sample_loss(&p, &[1.0], 0).unwrap());
        assert_eq!(evaluate(&m, &p, &[]), Err(EngineError::EmptyDataset));
    }

    #[test]
    fn global_lr_schedule() {
        let cfg = TrainConfig {
            global_lr: 2.0,
            global_lr_decay: 0.5,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.global_lr_at(1), 2.0);
        assert_eq!(cfg.global_lr_at(3), 0.5);
    }
}
