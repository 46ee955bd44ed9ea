//! Minibatch training with early stopping, and model checkpoints.

use std::cell::RefCell;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::graph::RegionGraph;
use crate::models::{mse_loss, ForwardCtx, Model, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::params::{NamedTensor, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// First epoch at which stopping may trigger.
    pub patience_start_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 300,
            patience: 50,
            patience_start_epoch: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("max_epochs and batch_size must be positive"));
        }
        if self.patience_start_epoch > self.max_epochs {
            return Err(Error::invalid(format!(
                "patience_start_epoch {} exceeds max_epochs {}",
                self.patience_start_epoch, self.max_epochs
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Tracks the best validation loss. Epochs are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopper {
    patience: usize,
    start_epoch: usize,
    best: f64,
    best_epoch: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, start_epoch: usize) -> Self {
        EarlyStopper {
            patience,
            start_epoch,
            best: f64::INFINITY,
            best_epoch: 0,
        }
    }

    /// Records `loss` for `epoch`; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        let improved = loss < self.best;
        if improved {
            self.best = loss;
            self.best_epoch = epoch;
        }
        improved
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        epoch >= self.start_epoch && epoch - self.best_epoch >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Per-epoch losses and where training stopped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub epochs_run: usize,
}

/// Drives `epoch_fn(epoch) -> (train_loss, val_loss)` under the early
/// stopping rule, calling `on_best` whenever validation improves.
pub fn run_epochs(
    tc: &TrainConfig,
    mut epoch_fn: impl FnMut(usize) -> Result<(f64, f64)>,
    mut on_best: impl FnMut(usize),
) -> Result<TrainHistory> {
    tc.validate()?;
    let mut stopper = EarlyStopper::new(tc.patience, tc.patience_start_epoch);
    let mut history = TrainHistory::default();
    for epoch in 1..=tc.max_epochs {
        let (train, val) = epoch_fn(epoch)?;
        if !train.is_finite() || !val.is_finite() {
            return Err(Error::Divergence {
                epoch,
                reason: format!("loss became {}", if train.is_finite() { val } else { train }),
            });
        }
        history.train_loss.push(train);
        history.val_loss.push(val);
        history.epochs_run = epoch;
        if stopper.observe(epoch, val) {
            on_best(epoch);
        }
        if stopper.should_stop(epoch) {
            break;
        }
    }
    history.best_epoch = stopper.best_epoch();
    history.best_val = stopper.best();
    Ok(history)
}

/// Feature scale: mean case count over the training inputs, or 1 if they
/// are all zero.
pub fn feature_scale(samples: &[&Sample], window: usize) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in samples {
        for t in &s.inputs {
            for i in 0..t.rows() {
                sum += t.row_slice(i)[..window].iter().map(|v| v.abs()).sum::<f64>();
                count += window;
            }
        }
    }
    let m = if count == 0 { 0.0 } else { sum / count as f64 };
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

fn targets(model: &Model, batch: &[&Sample]) -> Tensor {
    let values: Vec<f64> = batch
        .iter()
        .flat_map(|s| s.target.iter().map(|y| y / model.scale()))
        .collect();
    Tensor::column(&values)
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::Divergence {
            epoch,
            reason: format!("{op} produced a non-finite value"),
        },
        other => other,
    }
}

/// Mean MSE in scaled units over `samples`, in evaluation mode.
pub fn evaluation_loss(model: &Model, samples: &[&Sample], batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("loss over zero samples"));
    }
    let mut total = 0.0;
    let mut rows = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let inputs: Vec<&[Tensor]> = chunk.iter().map(|s| s.inputs.as_slice()).collect();
        let steps = model.stack_inputs(&inputs)?;
        let tape = Tape::new();
        let bound = model.params().bind(&tape, false);
        let pred = model.forward(&mut ForwardCtx::eval(), &bound, &tape, &steps)?;
        let target = tape.constant(targets(model, chunk));
        let loss = mse_loss(pred, target)?.value().item();
        let m = pred.value().rows();
        total += loss * m as f64;
        rows += m;
    }
    Ok(total / rows as f64)
}

/// One epoch of shuffled minibatch Adam; returns the mean training loss.
fn train_epoch(
    model: &mut Model,
    adam: &mut Adam,
    train: &[&Sample],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut rows = 0usize;
    for chunk in order.chunks(batch_size) {
        let batch: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
        let inputs: Vec<&[Tensor]> = batch.iter().map(|s| s.inputs.as_slice()).collect();
        let steps = model.stack_inputs(&inputs)?;
        let target = targets(model, &batch);
        let tape = Tape::new();
        let bound = model.params().bind(&tape, true);
        let mut ctx = ForwardCtx::train(Some(&mut *rng));
        let pred = model.forward(&mut ctx, &bound, &tape, &steps).map_err(diverged(epoch))?;
        let loss = mse_loss(pred, tape.constant(target))?;
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                epoch,
                reason: format!("training loss became {value}"),
            });
        }
        let grads = bound.gradients(&tape.backward(loss).map_err(diverged(epoch))?)?;
        let stats = ctx.stats().to_vec();
        drop(ctx);
        adam.step(model.params_mut(), &grads).map_err(diverged(epoch))?;
        model.update_running_stats(&stats)?;
        let m = pred.value().rows();
        total += value * m as f64;
        rows += m;
    }
    Ok(total / rows as f64)
}

/// Where a checkpoint's training window ended.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingWindow {
    /// Forecast origin day index.
    pub origin: usize,
    /// Last day whose target was used for training.
    pub train_end: usize,
}

/// Trains a fresh model on `train`, selecting the epoch with the lowest
/// validation MSE.
pub fn fit(
    config: &ModelConfig,
    graph: &RegionGraph,
    train: &[&Sample],
    val: &[&Sample],
    tc: &TrainConfig,
    window: TrainingWindow,
) -> Result<(ModelCheckpoint, TrainHistory)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid(format!(
            "training needs nonempty splits, got {} train and {} validation samples",
            train.len(),
            val.len()
        )));
    }
    let mut model = Model::new(config.clone(), graph.clone())?;
    model.set_scale(feature_scale(train, config.window))?;
    let mut adam = Adam::new(AdamConfig {
        learning_rate: tc.learning_rate,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut best = model.clone();
    let current = RefCell::new(model);
    let history = run_epochs(
        tc,
        |epoch| {
            let mut m = current.borrow_mut();
            let tl = train_epoch(&mut m, &mut adam, train, tc.batch_size, &mut rng, epoch)?;
            let vl = evaluation_loss(&m, val, tc.batch_size).map_err(diverged(epoch))?;
            Ok((tl, vl))
        },
        |_| best = current.borrow().clone(),
    )?;
    let ckpt = ModelCheckpoint::from_model(&best, window, history.best_val, history.best_epoch);
    Ok((ckpt, history))
}

/// A trained model with the metadata needed to reproduce its predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub graph: RegionGraph,
    pub scale: f64,
    pub params: Vec<NamedTensor>,
    pub buffers: Vec<NamedTensor>,
    pub window: TrainingWindow,
    pub best_val_loss: f64,
    pub best_epoch: usize,
}

impl ModelCheckpoint {
    pub fn from_model(model: &Model, window: TrainingWindow, best_val_loss: f64, best_epoch: usize) -> Self {
        let (params, buffers) = model.params().to_named();
        ModelCheckpoint {
            config: model.config().clone(),
            graph: model.graph().clone(),
            scale: model.scale(),
            params,
            buffers,
            window,
            best_val_loss,
            best_epoch,
        }
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn model(&self) -> Result<Model> {
        let store = ParamStore::from_named(&self.params, &self.buffers)?;
        Model::from_parts(self.config.clone(), self.graph.clone(), store, self.scale)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        ModelCheckpoint::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_windows, WindowSpec};
    use crate::models::ModelKind;

    #[test]
    fn stopper_respects_start_epoch() {
        let mut s = EarlyStopper::new(50, 100);
        s.observe(1, 1.0);
        for e in 2..100 {
            s.observe(e, 2.0);
            assert!(!s.should_stop(e), "{e}");
        }
        assert!(s.should_stop(100));
    }

    #[test]
    fn plateau_stops_after_patience() {
        let tc = TrainConfig::default();
        let h = run_epochs(&tc, |e| Ok((1.0, if e <= 100 { 1.0 / e as f64 } else { 0.5 })), |_| {}).unwrap();
        assert_eq!(h.best_epoch, 100);
        assert_eq!(h.epochs_run, 150);
        let late = run_epochs(&tc, |e| Ok((1.0, if e <= 180 { 1.0 / e as f64 } else { 1.0 })), |_| {}).unwrap();
        assert_eq!(late.epochs_run, 230);
        let never = run_epochs(&tc, |e| Ok((1.0, 1.0 / e as f64)), |_| {}).unwrap();
        assert_eq!(never.epochs_run, 300);
    }

    #[test]
    fn nan_loss_reports_epoch() {
        let tc = TrainConfig::default();
        match run_epochs(&tc, |e| Ok((if e == 7 { f64::NAN } else { 1.0 }, 1.0)), |_| {}) {
            Err(Error::Divergence { epoch, .. }) => assert_eq!(epoch, 7),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_invariants() {
        let bad = TrainConfig {
            max_epochs: 50,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    fn toy() -> (RegionGraph, Vec<Sample>) {
        let g = RegionGraph::new(vec!["a".into(), "b".into(), "c".into()], &[(0, 1), (1, 2)]).unwrap();
        let series: Vec<Vec<f64>> = (0..3).map(|u| (0..30).map(|t| ((t * (u + 2)) % 7) as f64).collect()).collect();
        let spec = WindowSpec {
            window: 3,
            horizon: 1,
            context: 1,
        };
        (g, build_windows(&series, None, &spec).unwrap())
    }

    fn tiny(kind: ModelKind) -> ModelConfig {
        let mut c = ModelConfig::new(kind, 1);
        c.hidden = 4;
        c.window = 3;
        c.context = 1;
        c.lstm_hidden = 4;
        c.cluster_sizes = if kind.is_multiresolution() { vec![2] } else { Vec::new() };
        c
    }

    #[test]
    fn single_epoch_run() {
        let (g, samples) = toy();
        let refs: Vec<&Sample> = samples.iter().collect();
        let tc = TrainConfig {
            max_epochs: 1,
            patience_start_epoch: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let (ckpt, h) = fit(&tiny(ModelKind::Mpnn), &g, &refs[..20], &refs[20..], &tc, TrainingWindow::default()).unwrap();
        assert_eq!((h.epochs_run, ckpt.best_epoch), (1, 1));
        assert_eq!(h.val_loss[0], ckpt.best_val_loss);
        let m = ckpt.model().unwrap();
        assert_eq!(evaluation_loss(&m, &refs[20..], 8).unwrap(), ckpt.best_val_loss);
    }

    #[test]
    fn training_is_deterministic_and_lowers_loss() {
        let (g, samples) = toy();
        let refs: Vec<&Sample> = samples.iter().collect();
        let tc = TrainConfig {
            max_epochs: 30,
            patience_start_epoch: 30,
            batch_size: 8,
            learning_rate: 1e-2,
            seed: 3,
            ..TrainConfig::default()
        };
        let run = || fit(&tiny(ModelKind::Mpnn), &g, &refs[..20], &refs[20..], &tc, TrainingWindow::default()).unwrap();
        let (a, ha) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        assert!(ha.train_loss.last().unwrap() < &ha.train_loss[0]);
    }

    #[test]
    fn checkpoint_json_round_trip() {
        let (g, samples) = toy();
        let mut cfg = tiny(ModelKind::Mgnn);
        cfg.seed = 4;
        let mut m = Model::new(cfg, g).unwrap();
        m.set_scale(3.7).unwrap();
        let ckpt = ModelCheckpoint::from_model(&m, TrainingWindow { origin: 20, train_end: 6 }, 0.25, 9);
        let back = ModelCheckpoint::from_json(&ckpt.to_json().unwrap()).unwrap();
        assert_eq!(back, ckpt);
        let x = &samples[0].inputs;
        let p1 = m.predict(x).unwrap();
        let p2 = back.model().unwrap().predict(x).unwrap();
        assert!(p1.iter().zip(&p2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
