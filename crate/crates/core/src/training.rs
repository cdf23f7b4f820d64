//! Adam training with early stopping, k-fold cross-validation and the fold
//! ensemble used downstream.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{
    augment, Activation, FunctionalModel, ModelCheckpoint, NormalizationStats, Sample, Weights,
};
use crate::rng::{derive_seed, rng_from_seed};

pub const ENSEMBLE_FORMAT: &str = "hubbard-functional-ensemble";
pub const ENSEMBLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub augment: bool,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 2000,
            patience: 100,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            augment: true,
            folds: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.batch_size > 0
            && self.max_epochs > 0
            && self.patience > 0
            && self.patience < self.max_epochs
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.folds >= 2;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    /// Mean normalized batch loss per epoch.
    pub train_loss: Vec<f64>,
    /// Normalized validation loss per epoch.
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(w: &Weights) -> Self {
        let zeros: Vec<Vec<f64>> = w.slices().iter().map(|s| vec![0.0; s.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn update(&mut self, w: &mut Weights, g: &Weights, c: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (((p, gs), m), v) in w
            .slices_mut()
            .into_iter()
            .zip(g.slices())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gs[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gs[i] * gs[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= c.learning_rate * mh / (vh.sqrt() + c.epsilon);
            }
        }
    }
}

fn design(samples: &[Sample], stats: &NormalizationStats) -> (Array2<f64>, Array1<f64>) {
    let l = samples.first().map_or(0, |s| s.rho.len());
    let x = Array2::from_shape_fn((samples.len(), l), |(i, j)| stats.normalize_rho(samples[i].rho[j]));
    let y = Array1::from_iter(samples.iter().map(|s| stats.normalize_f(s.f)));
    (x, y)
}

fn check_samples(samples: &[Sample]) -> Result<usize> {
    let l = samples
        .first()
        .map(|s| s.rho.len())
        .ok_or_else(|| Error::Training("empty training split".into()))?;
    if let Some(bad) = samples.iter().find(|s| s.rho.len() != l) {
        return Err(Error::DimensionMismatch {
            expected: l,
            found: bad.rho.len(),
        });
    }
    Ok(l)
}

/// Trains one model; normalization is fitted on `train` only.
pub fn train_fold(
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
) -> Result<(FunctionalModel, TrainingHistory)> {
    config.validate()?;
    let l = check_samples(train)?;
    if !val.is_empty() && check_samples(val)? != l {
        return Err(Error::DimensionMismatch {
            expected: l,
            found: val[0].rho.len(),
        });
    }
    let stats = NormalizationStats::from_samples(train)?;
    let expand = |s: &[Sample]| if config.augment { augment(s) } else { s.to_vec() };
    let (x_train, y_train) = design(&expand(train), &stats);
    let (x_val, y_val) = design(&expand(val), &stats);

    let mut rng = rng_from_seed(derive_seed(config.seed, 0, "train"));
    let mut model = FunctionalModel::new(stats, Weights::random(l, &mut rng), Activation::Softplus);
    let mut adam = Adam::new(&model.weights);
    let mut order: Vec<usize> = (0..x_train.nrows()).collect();
    let mut history = TrainingHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        epochs_run: 0,
    };
    let mut best = (f64::INFINITY, model.weights.clone());

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let xb = x_train.select(Axis(0), batch);
            let yb = y_train.select(Axis(0), batch);
            let (loss, grad) = model.loss_gradient(xb.view(), &yb);
            total += loss * batch.len() as f64;
            adam.update(&mut model.weights, &grad, config);
        }
        let train_loss = total / order.len() as f64;
        let val_loss = if x_val.nrows() > 0 {
            let r = model.forward_normalized(x_val.view()) - &y_val;
            r.mapv(|v| v * v).mean().unwrap()
        } else {
            train_loss
        };
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Training(format!(
                "loss diverged at epoch {epoch} with config {config:?}"
            )));
        }
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        history.epochs_run = epoch + 1;
        if val_loss < best.0 {
            best = (val_loss, model.weights.clone());
            history.best_epoch = epoch;
        } else if epoch - history.best_epoch >= config.patience {
            break;
        }
    }
    model.weights = best.1;
    Ok((model, history))
}

/// Seeded fold labels: shuffled indices cut into `k` contiguous chunks whose
/// sizes differ by at most one.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(derive_seed(seed, 0, "folds")));
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = n / k + usize::from(f < n % k);
        let mut chunk = idx[start..start + size].to_vec();
        chunk.sort_unstable();
        out.push(chunk);
        start += size;
    }
    out
}

/// SHA-256 over the raw bits of every density entry and label.
pub fn fingerprint(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        for r in &s.rho {
            h.update(r.to_bits().to_le_bytes());
        }
        h.update(s.f.to_bits().to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedEnsemble {
    pub members: Vec<FunctionalModel>,
    /// Physical-unit MSE of each member on its held-out fold.
    pub fold_val_mse: Vec<f64>,
    pub histories: Vec<TrainingHistory>,
    pub config: TrainConfig,
    pub fingerprint: String,
}

impl TrainedEnsemble {
    pub fn mean_cv_mse(&self) -> f64 {
        self.fold_val_mse.iter().sum::<f64>() / self.fold_val_mse.len() as f64
    }

    pub fn std_cv_mse(&self) -> f64 {
        let m = self.mean_cv_mse();
        (self.fold_val_mse.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
            / self.fold_val_mse.len() as f64)
            .sqrt()
    }

    pub fn sites(&self) -> usize {
        self.members[0].sites()
    }

    pub fn predict(&self, rho: &[f64]) -> Result<f64> {
        let mut sum = 0.0;
        for m in &self.members {
            sum += m.predict(rho)?;
        }
        Ok(sum / self.members.len() as f64)
    }

    pub fn predict_batch(&self, rhos: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; rhos.len()];
        for m in &self.members {
            for (a, p) in acc.iter_mut().zip(m.predict_batch(rhos)?) {
                *a += p;
            }
        }
        let k = self.members.len() as f64;
        Ok(acc.into_iter().map(|a| a / k).collect())
    }

    pub fn value_and_gradient(&self, rho: &[f64]) -> Result<(f64, Vec<f64>)> {
        let k = self.members.len() as f64;
        let mut value = 0.0;
        let mut grad = vec![0.0; rho.len()];
        for m in &self.members {
            let (v, g) = m.value_and_gradient(rho)?;
            value += v / k;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b / k;
            }
        }
        Ok((value, grad))
    }

    pub fn to_checkpoint(&self) -> EnsembleCheckpoint {
        EnsembleCheckpoint {
            format: ENSEMBLE_FORMAT.into(),
            version: ENSEMBLE_VERSION,
            config: self.config,
            fingerprint: self.fingerprint.clone(),
            fold_val_mse: self.fold_val_mse.clone(),
            histories: self.histories.clone(),
            members: self.members.iter().map(|m| m.to_checkpoint()).collect(),
        }
    }

    pub fn from_checkpoint(c: &EnsembleCheckpoint) -> Result<Self> {
        if c.format != ENSEMBLE_FORMAT || c.version != ENSEMBLE_VERSION {
            return Err(Error::Serde(format!("unsupported ensemble {} v{}", c.format, c.version)));
        }
        if c.members.is_empty() || c.members.len() != c.fold_val_mse.len() {
            return Err(Error::Serde("ensemble member count mismatch".into()));
        }
        Ok(Self {
            members: c
                .members
                .iter()
                .map(FunctionalModel::from_checkpoint)
                .collect::<Result<_>>()?,
            fold_val_mse: c.fold_val_mse.clone(),
            histories: c.histories.clone(),
            config: c.config,
            fingerprint: c.fingerprint.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleCheckpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub fingerprint: String,
    pub fold_val_mse: Vec<f64>,
    pub histories: Vec<TrainingHistory>,
    pub members: Vec<ModelCheckpoint>,
}

/// Trains one member per fold on the remaining folds.
pub fn cross_validate(samples: &[Sample], config: &TrainConfig) -> Result<TrainedEnsemble> {
    config.validate()?;
    check_samples(samples)?;
    if samples.len() < config.folds {
        return Err(Error::Training(format!(
            "{} samples cannot fill {} folds",
            samples.len(),
            config.folds
        )));
    }
    let folds = fold_assignment(samples.len(), config.folds, config.seed);
    let results: Vec<Result<(FunctionalModel, TrainingHistory, f64)>> = (0..config.folds)
        .into_par_iter()
        .map(|f| {
            let val: Vec<Sample> = folds[f].iter().map(|&i| samples[i].clone()).collect();
            let train: Vec<Sample> = folds
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, idx)| idx.iter().map(|&i| samples[i].clone()))
                .collect();
            let fold_config = TrainConfig {
                seed: derive_seed(config.seed, f as u64, "fold"),
                ..*config
            };
            let (model, history) = train_fold(&train, &val, &fold_config)?;
            let preds = model.predict_batch(&val.iter().map(|s| s.rho.clone()).collect::<Vec<_>>())?;
            let mse = preds.iter().zip(&val).map(|(p, s)| (p - s.f).powi(2)).sum::<f64>() / val.len() as f64;
            Ok((model, history, mse))
        })
        .collect();
    let mut ensemble = TrainedEnsemble {
        members: Vec::new(),
        fold_val_mse: Vec::new(),
        histories: Vec::new(),
        config: *config,
        fingerprint: fingerprint(samples),
    };
    for r in results {
        let (m, h, mse) = r?;
        ensemble.members.push(m);
        ensemble.histories.push(h);
        ensemble.fold_val_mse.push(mse);
    }
    Ok(ensemble)
}
