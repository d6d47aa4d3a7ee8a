//! Dataset splitting, MSE loss, Adam, the training loop and regression
//! metrics.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamSet, Real, Tensor, TensorError, Var};
use crate::frame::FrameDataset;
use crate::seed::sub_seed;
use crate::vit::{ViTModel, VitError};

/// Frames per no-grad forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Split and shuffle seed. Not part of the serialized config: pipelines
    /// set it from their single top-level seed.
    #[serde(skip)]
    pub seed: u64,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Denominator floor of the percentage error, newtons.
    pub mape_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 200,
            seed: 0,
            split: [0.70, 0.15, 0.15],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            mape_floor: 0.05,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config: {key} {reason}")]
    Config { key: &'static str, reason: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("loss needs at least one sample")]
    EmptyBatch,
    #[error("dataset frames are {got:?} but the model expects {expected:?}")]
    Incompatible {
        expected: [usize; 3],
        got: [usize; 3],
    },
    #[error("parameter {index}: {reason}")]
    StateMismatch { index: usize, reason: String },
    #[error("predictions and targets differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite {what} at epoch {epoch}")]
    NonFinite { what: &'static str, epoch: usize },
    #[error(transparent)]
    Model(#[from] VitError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn config_err(key: &'static str, reason: impl Into<String>) -> TrainError {
    TrainError::Config {
        key,
        reason: reason.into(),
    }
}

/// Checks split fractions: each in [0, 1], summing to 1 within 1e-9.
pub fn validate_ratios(ratios: [f64; 3]) -> Result<(), TrainError> {
    if ratios
        .iter()
        .any(|r| !(r.is_finite() && (0.0..=1.0).contains(r)))
    {
        return Err(config_err(
            "split",
            format!("fractions must lie in [0, 1], got {ratios:?}"),
        ));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(config_err(
            "split",
            format!("fractions must sum to 1, got {sum}"),
        ));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(config_err("learning_rate", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size", "must be >= 1"));
        }
        validate_ratios(self.split)?;
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(config_err(key, format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(config_err("eps", "must be > 0"));
        }
        if !(self.mape_floor.is_finite() && self.mape_floor > 0.0) {
            return Err(config_err("mape_floor", "must be > 0"));
        }
        Ok(())
    }
}

/// Index partition produced by [`split_indices`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n` cut into train/val/test.
///
/// Validation and test sizes are `floor(n * ratio)`; the remainder goes to
/// training.
pub fn split_indices(n: usize, ratios: [f64; 3], seed: u64) -> Result<SplitIndices, TrainError> {
    if n == 0 {
        return Err(TrainError::EmptyDataset);
    }
    validate_ratios(ratios)?;
    let count = |r: f64| ((n as f64 * r + 1e-9).floor() as usize).min(n);
    let n_val = count(ratios[1]);
    let n_test = count(ratios[2]).min(n - n_val);
    let n_train = n - n_val - n_test;

    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(
        seed,
        "train.split",
    )));
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(SplitIndices {
        train: idx,
        val,
        test,
    })
}

pub fn split_dataset(
    ds: &FrameDataset,
    ratios: [f64; 3],
    seed: u64,
) -> Result<(FrameDataset, FrameDataset, FrameDataset), TrainError> {
    let s = split_indices(ds.len(), ratios, seed)?;
    Ok((ds.subset(&s.train), ds.subset(&s.val), ds.subset(&s.test)))
}

/// Mean squared error of `[B, 1]` predictions, recorded on `g`.
pub fn mse_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var, TrainError> {
    if g.value(pred).numel() == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros: Vec<Vec<T>> = params
            .iter()
            .map(|p| vec![T::zero(); p.value.numel()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(TrainError::StateMismatch {
            index: grads.len().min(state.m.len()),
            reason: format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let n = p.value.numel();
        if g.shape() != p.value.shape() || state.m[i].len() != n || state.v[i].len() != n {
            return Err(TrainError::StateMismatch {
                index: i,
                reason: format!(
                    "{} has shape {:?}, gradient {:?}",
                    p.name,
                    p.value.shape(),
                    g.shape()
                ),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let c1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let c2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::from_f64(cfg.learning_rate), T::from_f64(cfg.eps));
    let one = T::one();
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let g = grads[i].data()[j];
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

fn check_compatible<T: Real>(model: &ViTModel<T>, ds: &FrameDataset) -> Result<(), TrainError> {
    let c = &model.config;
    let expected = [c.in_channels, c.image_size, c.image_size];
    let got = [ds.channels, ds.height, ds.width];
    if expected != got {
        return Err(TrainError::Incompatible { expected, got });
    }
    Ok(())
}

/// `[B, C, H, W]` batch and `[B, 1]` targets for the given frames.
pub fn batch_tensors<T: Real>(ds: &FrameDataset, idx: &[usize]) -> (Tensor<T>, Tensor<T>) {
    let frame_len = ds.channels * ds.height * ds.width;
    let mut x = Vec::with_capacity(idx.len() * frame_len);
    for &i in idx {
        x.extend(ds.frames[i].data.iter().map(|&v| T::from_f64(v as f64)));
    }
    let y = idx
        .iter()
        .map(|&i| T::from_f64(ds.labels[i] as f64))
        .collect();
    (
        Tensor::new(&[idx.len(), ds.channels, ds.height, ds.width], x)
            .expect("frame sizes checked"),
        Tensor::new(&[idx.len(), 1], y).expect("one label per frame"),
    )
}

/// Predicted force for every frame of `ds`, in dataset order.
pub fn predict_dataset<T: Real>(
    model: &ViTModel<T>,
    ds: &FrameDataset,
) -> Result<Vec<f64>, TrainError> {
    check_compatible(model, ds)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut out = Vec::with_capacity(ds.len());
    for chunk in all.chunks(EVAL_CHUNK) {
        let (x, _) = batch_tensors::<T>(ds, chunk);
        out.extend(model.forward(&x)?.data().iter().map(|v| v.as_f64()));
    }
    Ok(out)
}

fn dataset_mse<T: Real>(model: &ViTModel<T>, ds: &FrameDataset) -> Result<f64, TrainError> {
    let pred = predict_dataset(model, ds)?;
    let sum: f64 = pred
        .iter()
        .zip(&ds.labels)
        .map(|(p, &y)| (p - y as f64).powi(2))
        .sum();
    Ok(sum / ds.len() as f64)
}

/// Losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Sample-weighted mean of the mini-batch losses seen during the epoch.
    pub train_mse: f64,
    /// `None` when the validation split is empty.
    pub val_mse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters of the epoch with the lowest validation loss (training
    /// loss when there is no validation split); the initial model when no
    /// epoch ran.
    pub best: ViTModel<T>,
    pub best_epoch: Option<usize>,
    /// Parameters after the last epoch.
    pub last: ViTModel<T>,
    pub log: Vec<EpochLog>,
    /// Training-split MSE of the initial model.
    pub initial_train_mse: f64,
}

/// Mini-batch Adam on MSE with best-validation checkpointing.
///
/// Batches are drawn from a seeded shuffle of the training split every
/// epoch, so equal inputs give bit-identical logs and parameters.
pub fn train<T: Real>(
    model: &ViTModel<T>,
    train_ds: &FrameDataset,
    val_ds: &FrameDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    check_compatible(model, train_ds)?;
    if !val_ds.is_empty() {
        check_compatible(model, val_ds)?;
    }

    let initial_train_mse = dataset_mse(model, train_ds)?;
    let mut current = model.clone();
    let mut best = model.clone();
    let mut best_score = f64::INFINITY;
    let mut best_epoch = None;
    let mut state = AdamState::new(&current.params);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "train.shuffle"));
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = batch_tensors::<T>(train_ds, batch);
            let mut g = Graph::new();
            let vars = current.bind(&mut g);
            let trace = current.forward_graph(&mut g, &vars, &x)?;
            let target = g.constant(y);
            let loss = mse_loss(&mut g, trace.output, target)?;
            let loss_value = g.value(loss).data()[0].as_f64();
            if !loss_value.is_finite() {
                return Err(TrainError::NonFinite {
                    what: "training loss",
                    epoch,
                });
            }
            loss_sum += loss_value * batch.len() as f64;
            g.backward(loss)?;
            let grads: Vec<Tensor<T>> = vars
                .all
                .iter()
                .zip(current.params.iter())
                .map(|(&v, p)| {
                    g.take_grad(v)
                        .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
                })
                .collect();
            adam_step(&mut current.params, &grads, &mut state, cfg)?;
        }
        let train_mse = loss_sum / train_ds.len() as f64;
        let val_mse = if val_ds.is_empty() {
            None
        } else {
            let v = dataset_mse(&current, val_ds)?;
            if !v.is_finite() {
                return Err(TrainError::NonFinite {
                    what: "validation loss",
                    epoch,
                });
            }
            Some(v)
        };
        let score = val_mse.unwrap_or(train_mse);
        if score < best_score {
            best_score = score;
            best_epoch = Some(epoch);
            best = current.clone();
        }
        let entry = EpochLog {
            epoch,
            train_mse,
            val_mse,
        };
        on_epoch(&entry);
        log.push(entry);
    }

    Ok(TrainOutcome {
        best,
        best_epoch,
        last: current,
        log,
        initial_train_mse,
    })
}

/// `epoch,train_mse,val_mse` CSV; an empty validation split leaves the last
/// column blank.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_mse,val_mse\n");
    for e in log {
        let val = e.val_mse.map(|v| v.to_string()).unwrap_or_default();
        writeln!(s, "{},{},{}", e.epoch, e.train_mse, val).expect("write to string");
    }
    s
}

/// Regression quality on a set of predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Root mean squared error, newtons.
    #[serde(rename = "rmse_n")]
    pub rmse: f64,
    /// Coefficient of determination; `None` when every target is equal.
    pub r2: Option<f64>,
    /// Mean of `|pred - y| / max(|y|, floor)`.
    pub mape: f64,
    pub n: usize,
}

impl Metrics {
    pub fn mse(&self) -> f64 {
        self.rmse * self.rmse
    }
}

pub fn compute_metrics(
    pred: &[f64],
    target: &[f64],
    mape_floor: f64,
) -> Result<Metrics, TrainError> {
    if pred.len() != target.len() {
        return Err(TrainError::LengthMismatch(pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let n = pred.len() as f64;
    let mean_y = target.iter().sum::<f64>() / n;
    let (mut ss_res, mut ss_tot, mut ape) = (0.0, 0.0, 0.0);
    for (&p, &y) in pred.iter().zip(target) {
        ss_res += (p - y) * (p - y);
        ss_tot += (y - mean_y) * (y - mean_y);
        ape += (p - y).abs() / y.abs().max(mape_floor);
    }
    Ok(Metrics {
        rmse: (ss_res / n).sqrt(),
        r2: (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot),
        mape: ape / n,
        n: pred.len(),
    })
}

pub fn evaluate<T: Real>(
    model: &ViTModel<T>,
    ds: &FrameDataset,
    mape_floor: f64,
) -> Result<Metrics, TrainError> {
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let pred = predict_dataset(model, ds)?;
    let target: Vec<f64> = ds.labels.iter().map(|&y| y as f64).collect();
    compute_metrics(&pred, &target, mape_floor)
}
