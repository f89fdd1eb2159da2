//! Minibatch training with early stopping on the test loss.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor4, Var};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Parallelism};
use crate::preprocess::{DataSet, Sample, Split};
use crate::unet::{forward_on_tape, ModelState, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Optimizer {
    #[default]
    Adam,
    /// Plain `w ← w − η·g`.
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a test-loss improvement before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub optimizer: Optimizer,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 150,
            patience: 20,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            optimizer: Optimizer::Adam,
            seed: 42,
            parallelism: Parallelism::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate", format!("{}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::invalid("training", "batch size, epochs and patience must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid(name, format!("{b} is not in (0, 1)")));
            }
        }
        if self.epsilon.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || !self.epsilon.is_finite() {
            return Err(Error::invalid("epsilon", format!("{}", self.epsilon)));
        }
        Ok(())
    }
}

/// Adam moment estimates, one pair of buffers per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
    /// Completed update steps.
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Param]) -> Self {
        AdamState {
            first: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            step: 0,
        }
    }
}

fn check_grads(params: &[Param], grads: &[Vec<f32>]) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::invalid("gradients", format!("{} for {} parameters", grads.len(), params.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.data.len() != g.len() {
            return Err(Error::invalid("gradients", format!("missing or misshapen gradient for {}", p.name)));
        }
    }
    Ok(())
}

pub fn sgd_step(params: &mut [Param], grads: &[Vec<f32>], learning_rate: f64) -> Result<()> {
    check_grads(params, grads)?;
    let lr = learning_rate as f32;
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, &gi) in p.data.iter_mut().zip(g) {
            *w -= lr * gi;
        }
    }
    Ok(())
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [Param], grads: &[Vec<f32>], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    check_grads(params, grads)?;
    if state.first.len() != params.len() {
        return Err(Error::invalid("optimizer state", "does not match the parameter list"));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let c1 = (1.0 - cfg.beta1.powi(t)) as f32;
    let c2 = (1.0 - cfg.beta2.powi(t)) as f32;
    let (lr, eps) = (cfg.learning_rate as f32, cfg.epsilon as f32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p.data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-sample MSE over the training batches of this epoch.
    pub train_loss: f64,
    /// Mean per-sample MSE over the test split after the epoch's updates.
    pub test_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
}

impl History {
    /// `epoch,train_loss,test_loss` with round-trippable floats.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,test_loss\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{}", e.epoch, e.train_loss, e.test_loss);
        }
        s
    }

    pub fn best_test_loss(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.test_loss).reduce(f64::min)
    }
}

/// A frame pair in training precision.
#[derive(Debug, Clone)]
pub struct Frame {
    pub input: Tensor4<f32>,
    pub target: Tensor4<f32>,
}

impl Frame {
    pub fn from_sample(s: &Sample) -> Self {
        let (h, w) = (s.input.height(), s.input.width());
        let cvt = |v: &[f64]| Tensor4::new([1, 1, h, w], v.iter().map(|&x| x as f32).collect()).expect("frame dims");
        Frame { input: cvt(s.input.values()), target: cvt(s.target.values()) }
    }
}

/// Per-sample MSE and its gradient with respect to every parameter.
pub fn sample_gradient(model: &ModelState, tensors: &[Tensor4<f32>], frame: &Frame) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut tape = Tape::new();
    let params: Vec<Var> = tensors.iter().map(|t| tape.param(t.clone())).collect();
    let x = tape.constant(frame.input.clone());
    let y = forward_on_tape(&mut tape, &model.config, &params, x)?;
    let target = tape.constant(frame.target.clone());
    let loss = tape.mse_loss(y, target)?;
    tape.backward(loss)?;
    let value = tape.value(loss).data()[0] as f64;
    let grads =
        params.iter().map(|&p| tape.take_grad(p).expect("backward populates every parameter").into_data()).collect();
    Ok((value, grads))
}

/// Per-sample MSE of `frames` without updating anything, in frame order.
pub fn frame_losses(model: &ModelState, frames: &[&Frame], mode: Parallelism) -> Result<Vec<f64>> {
    let tensors = model.tensors::<f32>();
    map_indexed(frames.len(), mode, |i| {
        let mut tape = Tape::new();
        let params: Vec<Var> = tensors.iter().map(|t| tape.constant(t.clone())).collect();
        let x = tape.constant(frames[i].input.clone());
        let y = forward_on_tape(&mut tape, &model.config, &params, x)?;
        let target = tape.constant(frames[i].target.clone());
        let loss = tape.mse_loss(y, target)?;
        Ok(tape.value(loss).data()[0] as f64)
    })
    .into_iter()
    .collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean per-sample MSE over the given split.
pub fn split_loss(model: &ModelState, dataset: &DataSet, which: Split, mode: Parallelism) -> Result<f64> {
    let frames: Vec<Frame> = dataset.split_samples(which).map(Frame::from_sample).collect();
    if frames.is_empty() {
        return Err(Error::invalid("dataset", format!("empty {} split", which.as_str())));
    }
    Ok(mean(&frame_losses(model, &frames.iter().collect::<Vec<_>>(), mode)?))
}

/// Train `model` on `dataset` and return the weights from the epoch with the
/// lowest test loss, plus the per-epoch history.
///
/// Batch gradients are the mean of per-sample gradients summed in batch
/// order, so the result is bit-identical with or without parallel workers.
pub fn train(dataset: &DataSet, model: ModelState, cfg: &TrainConfig) -> Result<(ModelState, History)> {
    train_with_observer(dataset, model, cfg, |_| {})
}

/// [`train`], calling `observe` after every epoch.
pub fn train_with_observer(
    dataset: &DataSet,
    mut model: ModelState,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&EpochStats),
) -> Result<(ModelState, History)> {
    cfg.validate()?;
    model.config.validate()?;
    if model.config.frame_size != dataset.config.frame_size {
        return Err(Error::shape(format!(
            "model frame size {} vs dataset frame size {}",
            model.config.frame_size, dataset.config.frame_size
        )));
    }
    let train_frames: Vec<Frame> = dataset.split_samples(Split::Train).map(Frame::from_sample).collect();
    let test_frames: Vec<Frame> = dataset.split_samples(Split::Test).map(Frame::from_sample).collect();
    if train_frames.is_empty() || test_frames.is_empty() {
        return Err(Error::invalid("dataset", "training needs at least one train and one test sample"));
    }
    let test_refs: Vec<&Frame> = test_frames.iter().collect();

    model.norm = dataset.norm;
    model.pitch_nm = dataset.pitch_nm;
    if cfg.optimizer == Optimizer::Adam && model.adam.is_none() {
        model.adam = Some(AdamState::new(&model.params));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_frames.len()).collect();
    let mut history = History::default();
    let mut best: Option<(f64, ModelState)> = None;
    let mut since_best = 0;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sample_loss = vec![0.0; train_frames.len()];
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let tensors = model.tensors::<f32>();
            let results = map_indexed(batch.len(), cfg.parallelism, |i| {
                sample_gradient(&model, &tensors, &train_frames[batch[i]])
            });
            let mut sum: Option<Vec<Vec<f32>>> = None;
            for (i, r) in results.into_iter().enumerate() {
                let (loss, grads) = r?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite { epoch, batch: Some(b) });
                }
                sample_loss[batch[i]] = loss;
                match sum.as_mut() {
                    None => sum = Some(grads),
                    Some(acc) => {
                        acc.iter_mut().zip(&grads).for_each(|(a, g)| a.iter_mut().zip(g).for_each(|(x, y)| *x += y))
                    }
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f32;
            grads.iter_mut().for_each(|g| g.iter_mut().for_each(|x| *x *= inv));
            match cfg.optimizer {
                Optimizer::Adam => {
                    let adam = model.adam.as_mut().expect("initialized above");
                    adam_step(&mut model.params, &grads, adam, cfg)?
                }
                Optimizer::Sgd => sgd_step(&mut model.params, &grads, cfg.learning_rate)?,
            }
        }

        let test_loss = mean(&frame_losses(&model, &test_refs, cfg.parallelism)?);
        if !test_loss.is_finite() {
            return Err(Error::NonFinite { epoch, batch: None });
        }
        let stats = EpochStats { epoch, train_loss: mean(&sample_loss), test_loss };
        history.epochs.push(stats);
        observe(&stats);

        if best.as_ref().is_none_or(|(b, _)| test_loss < *b) {
            model.epoch = epoch as u32;
            best = Some((test_loss, model.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_model) = best.expect("at least one epoch");
    Ok((best_model, history))
}
