//! Mini-batch training with Adam or SGD, learning-rate halving and early
//! stopping on validation loss.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Samples, Split, VectorDataset};
use crate::error::{Error, Result};
use crate::infercalib::{accuracy, predict_logits, write_commented_csv, DEFAULT_N_MC};
use crate::model::{Model, ModelParams};
use crate::netcore::cross_entropy;
use crate::stream::{derive_seed, stream};

pub const TAG_INIT: u64 = 1;
pub const TAG_SHUFFLE: u64 = 2;
pub const TAG_MASKS: u64 = 3;
pub const TAG_VAL: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        epsilon: f64,
    },
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_eps(),
        }
    }
}

fn default_epochs() -> usize {
    50
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-3
}
fn default_early_stop() -> usize {
    10
}
fn default_halving() -> usize {
    2
}
fn default_n_mc() -> usize {
    DEFAULT_N_MC
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Epochs without validation improvement before stopping; 0 disables.
    #[serde(default = "default_early_stop")]
    pub early_stop_patience: usize,
    /// Epochs without validation improvement before halving the learning
    /// rate; 0 disables.
    #[serde(default = "default_halving")]
    pub lr_halving_patience: usize,
    #[serde(default)]
    pub seed: u64,
    /// Monte-Carlo samples for continuum validation.
    #[serde(default = "default_n_mc")]
    pub val_n_mc: usize,
    /// Store measured epoch durations; off by default so that replays write
    /// identical histories.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            optimizer: Optimizer::default(),
            early_stop_patience: default_early_stop(),
            lr_halving_patience: default_halving(),
            seed: 0,
            val_n_mc: default_n_mc(),
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.val_n_mc == 0 {
            return Err(Error::Config("val_n_mc must be >= 1".into()));
        }
        match self.optimizer {
            Optimizer::Adam { beta1, beta2, epsilon } => {
                for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
                    if !(b > 0.0 && b < 1.0) {
                        return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
                    }
                }
                if epsilon.is_nan() || epsilon <= 0.0 {
                    return Err(Error::Config(format!("epsilon must be > 0, got {epsilon}")));
                }
            }
            Optimizer::Sgd { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update at step `t >= 1`.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters, {} gradients, optimizer state for {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if t == 0 {
        return Err(Error::InvalidParameter("Adam step index starts at 1".into()));
    }
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Plain or heavy-ball SGD; `velocity` holds the momentum buffer.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) -> Result<()> {
    if params.len() != grads.len() || velocity.len() != params.len() {
        return Err(Error::ShapeMismatch("SGD buffers differ in length".into()));
    }
    for i in 0..params.len() {
        velocity[i] = momentum * velocity[i] + grads[i];
        params[i] -= lr * velocity[i];
    }
    Ok(())
}

enum OptState {
    Adam(AdamState),
    Sgd(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub learning_rate: f64,
    /// 0 unless wall-time recording is enabled.
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
    /// Index into `records` of the lowest validation loss.
    pub best_epoch: Option<usize>,
}

impl RunHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.map(|i| &self.records[i])
    }

    pub fn write_csv(&self, path: &Path, comments: &[(String, String)]) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .records
            .iter()
            .map(|r| {
                vec![
                    r.epoch.to_string(),
                    r.train_loss.to_string(),
                    r.val_loss.to_string(),
                    r.val_acc.to_string(),
                    r.wall_ms.to_string(),
                ]
            })
            .collect();
        write_commented_csv(path, comments, &["epoch", "train_loss", "val_loss", "val_acc", "wall_ms"], &rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub n: usize,
}

/// Accuracy and mean cross-entropy; continuum models predict through
/// Monte-Carlo inference with `n_mc` paths.
pub fn evaluate(model: &Model, params: &ModelParams, samples: &Samples<'_>, n_mc: usize, seed: u64) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::EmptySplit("evaluation"));
    }
    let logits = predict_logits(model, params, samples, n_mc, seed)?;
    let mut loss = 0.0;
    for (l, &y) in logits.iter().zip(&samples.labels) {
        loss += cross_entropy(l, y)?;
    }
    Ok(Metrics {
        accuracy: accuracy(&logits, &samples.labels),
        mean_loss: loss / samples.len() as f64,
        n: samples.len(),
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss (the initial
    /// parameters when no epoch ran).
    pub params: ModelParams,
    pub history: RunHistory,
}

/// Trains from a seeded initialization. Every random choice derives from
/// `config.seed`: initialization, per-epoch shuffling, one mask stream per
/// processed sample, and validation paths.
pub fn train_loop(model: &Model, config: &TrainConfig, dataset: &VectorDataset) -> Result<TrainOutcome> {
    let params = model.init_params(&mut stream(derive_seed(config.seed, TAG_INIT), 0))?;
    train_from(model, config, dataset, params)
}

pub fn train_from(
    model: &Model,
    config: &TrainConfig,
    dataset: &VectorDataset,
    mut params: ModelParams,
) -> Result<TrainOutcome> {
    config.validate()?;
    model.check_params(&params)?;
    if dataset.d_x() != model.config().d_x {
        return Err(Error::ShapeMismatch(format!(
            "dataset has {} features, model expects {}",
            dataset.d_x(),
            model.config().d_x
        )));
    }
    let train = dataset.nonempty_samples(Split::Train)?;
    let val = dataset.nonempty_samples(Split::Val)?;
    let mut history = RunHistory::default();
    let mut best = params.clone();
    if config.epochs == 0 {
        return Ok(TrainOutcome { params, history });
    }

    let n_params = params.param_count();
    let mut opt = match config.optimizer {
        Optimizer::Adam { .. } => OptState::Adam(AdamState::new(n_params)),
        Optimizer::Sgd { .. } => OptState::Sgd(vec![0.0; n_params]),
    };
    let mask_root = derive_seed(config.seed, TAG_MASKS);
    let val_seed = derive_seed(config.seed, TAG_VAL);
    let mut lr = config.learning_rate;
    let mut step: u64 = 0;
    let mut processed: u64 = 0;
    let mut best_loss = f64::INFINITY;
    let mut since_best = 0;
    let mut plateau = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut stream(derive_seed(config.seed, TAG_SHUFFLE), epoch as u64));
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| train.xs[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let seeds: Vec<u64> = (0..batch.len() as u64).map(|k| derive_seed(mask_root, processed + k)).collect();
            processed += batch.len() as u64;
            let (loss, grads) = model.loss_and_grads(&params, &xs, &labels, &seeds)?;
            loss_sum += loss * batch.len() as f64;
            step += 1;
            let mut flat = params.flatten();
            let g = grads.flatten();
            match (&mut opt, config.optimizer) {
                (OptState::Adam(state), Optimizer::Adam { beta1, beta2, epsilon }) => {
                    adam_step(&mut flat, &g, state, lr, beta1, beta2, epsilon, step)?
                }
                (OptState::Sgd(vel), Optimizer::Sgd { momentum }) => sgd_step(&mut flat, &g, vel, lr, momentum)?,
                _ => unreachable!("optimizer state matches its config"),
            }
            params.assign(&flat)?;
        }
        let metrics = evaluate(model, &params, &val, config.val_n_mc, val_seed)?;
        history.records.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            val_loss: metrics.mean_loss,
            val_acc: metrics.accuracy,
            learning_rate: lr,
            wall_ms: if config.record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        });
        if metrics.mean_loss < best_loss {
            best_loss = metrics.mean_loss;
            best = params.clone();
            history.best_epoch = Some(history.records.len() - 1);
            since_best = 0;
            plateau = 0;
        } else {
            since_best += 1;
            plateau += 1;
        }
        log::debug!(
            "epoch {} train {:.4} val {:.4} acc {:.3}",
            epoch + 1,
            loss_sum / train.len() as f64,
            metrics.mean_loss,
            metrics.accuracy
        );
        if config.early_stop_patience > 0 && since_best >= config.early_stop_patience {
            break;
        }
        if config.lr_halving_patience > 0 && plateau >= config.lr_halving_patience {
            lr *= 0.5;
            plateau = 0;
        }
    }
    Ok(TrainOutcome { params: best, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_blobs, prepare};
    use crate::model::{DropoutMode, ModelConfig};
    use crate::netcore::Activation;
    use crate::odeint::{GridMode, Method, StepScheme};

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1, 0.9, 0.999, 1e-8, 1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, 0.1, 0.9, 0.999, 1e-8, 1).unwrap();
        // m_hat = 1, v_hat = 1
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_matches_hand_recurrence() {
        let mut p = vec![0.5];
        let mut s = AdamState::new(1);
        let grads = [0.3, -0.2, 0.7];
        let (mut m, mut v, mut q) = (0.0f64, 0.0f64, 0.5f64);
        for (k, &g) in grads.iter().enumerate() {
            let t = k as i32 + 1;
            adam_step(&mut p, &[g], &mut s, 0.01, 0.9, 0.999, 1e-8, t as u64).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            q -= 0.01 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!((p[0] - q).abs() < 1e-15);
    }

    #[test]
    fn adam_shape_errors() {
        let mut s = AdamState::new(1);
        assert!(matches!(
            adam_step(&mut [0.0, 0.0], &[1.0], &mut s, 0.1, 0.9, 0.999, 1e-8, 1),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn sgd_momentum() {
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.5).unwrap();
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.5).unwrap();
        assert!((p[0] - (1.0 - 0.1 - 0.15)).abs() < 1e-15);
    }

    #[test]
    fn config_defaults_from_json() {
        let c: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!(c.lr_halving_patience, 2);
        assert_eq!(c.early_stop_patience, 10);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
        let bad = TrainConfig {
            optimizer: Optimizer::Adam { beta1: 1.0, beta2: 0.999, epsilon: 1e-8 },
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    fn small_model(dropout: DropoutMode) -> Model {
        Model::new(ModelConfig {
            d_x: 2,
            d_z: 2,
            n_classes: 2,
            horizon: 1.0,
            scheme: StepScheme::new(Method::Euler, 4).unwrap(),
            grid: GridMode::EventAligned,
            dropout,
            drift_hidden: vec![8],
            drift_activation: Activation::Tanh,
            classifier_hidden: vec![],
            classifier_activation: Activation::Tanh,
        })
        .unwrap()
    }

    fn separable() -> VectorDataset {
        prepare(&gen_gaussian_blobs(2, 2, 12.0, 0.5, 60, 3).unwrap(), 0).unwrap()
    }

    #[test]
    fn separable_data_reaches_full_validation_accuracy() {
        let model = small_model(DropoutMode::None);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-2,
            seed: 1,
            ..TrainConfig::default()
        };
        let out = train_loop(&model, &cfg, &separable()).unwrap();
        let best = out.history.best().unwrap();
        assert_eq!(best.val_acc, 1.0, "{:?}", out.history.records.last());
        let val = separable();
        let m = evaluate(&model, &out.params, &val.samples(Split::Val), 1, 0).unwrap();
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let model = small_model(DropoutMode::None);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let out = train_loop(&model, &cfg, &separable()).unwrap();
        let init = model.init_params(&mut stream(derive_seed(0, TAG_INIT), 0)).unwrap();
        assert_eq!(out.params, init);
        assert!(out.history.records.is_empty());
    }

    #[test]
    fn training_replays_exactly() {
        for dropout in [DropoutMode::Continuum { p: 0.3, m: 5.0 }, DropoutMode::NaiveDrift { p: 0.2 }] {
            let model = small_model(dropout);
            let cfg = TrainConfig { epochs: 3, batch_size: 8, seed: 5, ..TrainConfig::default() };
            let a = train_loop(&model, &cfg, &separable()).unwrap();
            let b = train_loop(&model, &cfg, &separable()).unwrap();
            assert_eq!(a.history, b.history);
            assert_eq!(a.params, b.params);
        }
    }

    #[test]
    fn best_epoch_is_never_worse_than_last() {
        let model = small_model(DropoutMode::Continuum { p: 0.4, m: 5.0 });
        let cfg = TrainConfig { epochs: 8, batch_size: 8, learning_rate: 0.05, seed: 2, ..TrainConfig::default() };
        let out = train_loop(&model, &cfg, &separable()).unwrap();
        let best = out.history.best().unwrap().val_loss;
        assert!(out.history.records.iter().all(|r| best <= r.val_loss));
    }

    #[test]
    fn missing_validation_split_is_reported() {
        let model = small_model(DropoutMode::None);
        let ds = gen_gaussian_blobs(2, 2, 2.0, 1.0, 10, 0).unwrap();
        let err = train_loop(&model, &TrainConfig::default(), &ds).unwrap_err();
        assert!(matches!(err, Error::EmptySplit("val")));
    }

    #[test]
    fn constant_logits_score_half_on_balanced_data() {
        let model = small_model(DropoutMode::None);
        let mut params = model.init_params(&mut stream(0, 0)).unwrap();
        for s in params.mlp.slices_mut() {
            s.fill(0.0);
        }
        params.mlp.layers_mut()[0].bias[1] = 1.0;
        let ds = separable();
        let m = evaluate(&model, &params, &ds.samples(Split::Test), 1, 0).unwrap();
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn history_csv_layout() {
        let h = RunHistory {
            records: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.25,
                val_acc: 1.0,
                learning_rate: 1e-3,
                wall_ms: 0,
            }],
            best_epoch: Some(0),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        h.write_csv(&path, &[("config_hash".into(), "abc".into())]).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "# config_hash=abc\nepoch,train_loss,val_loss,val_acc,wall_ms\n1,0.5,0.25,1,0\n"
        );
    }
}
