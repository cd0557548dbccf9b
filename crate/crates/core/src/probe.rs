//! Frame-level linear phoneme probe.
//!
//! Multinomial logistic regression over per-frame representations, trained by
//! seeded mini-batch gradient descent on the softmax cross-entropy.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Ix1, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{read_tensors, write_tensors, DatasetManifest, LabeledUtterance, PhonemeInventory, TensorStore};
use crate::model::{AttentionOverride, Encoder, HeadMask};
use crate::synth::InjectionPlan;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub num_steps: usize,
    pub seed: u64,
    pub l2_penalty: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { learning_rate: 0.1, batch_size: 256, num_steps: 50_000, seed: 0, l2_penalty: 0.0 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::BadProbeConfig(format!("learning rate {}", self.learning_rate)));
        }
        if self.num_steps == 0 || self.batch_size == 0 {
            return Err(Error::BadProbeConfig("num_steps and batch_size must be at least 1".into()));
        }
        if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite()) {
            return Err(Error::BadProbeConfig(format!("l2 penalty {}", self.l2_penalty)));
        }
        Ok(())
    }
}

/// `logits = x . weight + bias`; `weight` is `input_dim x classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ProbeModel {
    pub fn zeros(input_dim: usize, classes: usize) -> Self {
        Self { weight: Array2::zeros((input_dim, classes)), bias: Array1::zeros(classes) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.weight.ncols()
    }

    pub fn logits(&self, inputs: ArrayView2<'_, f64>) -> Array2<f64> {
        inputs.dot(&self.weight) + &self.bias
    }

    pub fn probabilities(&self, inputs: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut p = self.logits(inputs);
        softmax_rows(&mut p);
        p
    }

    pub fn predict(&self, inputs: ArrayView2<'_, f64>) -> Vec<usize> {
        self.logits(inputs)
            .outer_iter()
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

pub(crate) fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// Mean cross-entropy of `labels` under the model, plus `l2/2 * |weight|^2`,
/// with its gradient with respect to weight and bias.
pub fn loss_and_gradient(
    model: &ProbeModel,
    inputs: ArrayView2<'_, f64>,
    labels: &[usize],
    l2_penalty: f64,
) -> (f64, Array2<f64>, Array1<f64>) {
    let n = labels.len() as f64;
    let mut p = model.probabilities(inputs);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let py = p[[i, y]];
        // f64::max would swallow a NaN here.
        loss -= if py.is_nan() { py } else { py.max(f64::MIN_POSITIVE).ln() };
        p[[i, y]] -= 1.0;
    }
    loss /= n;
    loss += 0.5 * l2_penalty * model.weight.iter().map(|w| w * w).sum::<f64>();
    let mut grad_w = inputs.t().dot(&p) / n;
    grad_w.scaled_add(l2_penalty, &model.weight);
    let grad_b = p.sum_axis(Axis(0)) / n;
    (loss, grad_w, grad_b)
}

/// All frames of a set of utterances, stacked.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl FrameSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Where per-frame probe inputs come from.
#[derive(Clone, Copy)]
pub enum Representer<'a> {
    /// The input features themselves.
    RawFeatures,
    /// Final-layer encoder outputs under a head mask, optionally with battery
    /// patterns injected as attention overrides.
    Encoder { encoder: &'a Encoder, mask: &'a HeadMask, injection: Option<&'a InjectionPlan> },
}

impl Representer<'_> {
    pub fn represent(&self, utt: &LabeledUtterance) -> Result<Array2<f64>> {
        match self {
            Representer::RawFeatures => Ok(utt.features.data().mapv(f64::from)),
            Representer::Encoder { encoder, mask, injection } => {
                let overrides = match injection {
                    Some(plan) => plan.override_for(utterance_key(utt.id()), utt.num_frames())?,
                    None => AttentionOverride::default(),
                };
                encoder.represent(&utt.features, mask, &overrides)
            }
        }
    }
}

/// Stable 64-bit key of an utterance id (FNV-1a), used to derive per-utterance seeds.
pub fn utterance_key(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Represents every utterance (in parallel) and stacks the frames in order.
pub fn frame_set(utterances: &[LabeledUtterance], representer: &Representer<'_>) -> Result<FrameSet> {
    let parts: Vec<Array2<f64>> =
        utterances.par_iter().map(|u| representer.represent(u)).collect::<Result<_>>()?;
    let labels: Vec<usize> = utterances.iter().flat_map(|u| u.labels.labels.iter().copied()).collect();
    let dim = parts.first().map_or(0, |p| p.ncols());
    let views: Vec<ArrayView2<'_, f64>> = parts.iter().map(|p| p.view()).collect();
    let inputs = if views.is_empty() {
        Array2::zeros((0, dim))
    } else {
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))?
    };
    Ok(FrameSet { inputs, labels })
}

/// Trains on pre-computed frames.
pub fn train_on_frames(frames: &FrameSet, num_classes: usize, config: &ProbeConfig) -> Result<ProbeModel> {
    config.validate()?;
    if frames.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if let Some(&y) = frames.labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::InventoryMismatch { probe: num_classes, inventory: y + 1 });
    }
    let mut model = ProbeModel::zeros(frames.inputs.ncols(), num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = frames.len();
    const WINDOW: usize = 1000;
    let (mut window_loss, mut prev_window) = (0.0, f64::INFINITY);
    let mut batch_labels = vec![0usize; config.batch_size];
    for step in 0..config.num_steps {
        let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..n)).collect();
        let batch = frames.inputs.select(Axis(0), &idx);
        for (slot, &i) in batch_labels.iter_mut().zip(&idx) {
            *slot = frames.labels[i];
        }
        let (loss, gw, gb) = loss_and_gradient(&model, batch.view(), &batch_labels, config.l2_penalty);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        model.weight.scaled_add(-config.learning_rate, &gw);
        model.bias.scaled_add(-config.learning_rate, &gb);
        window_loss += loss;
        if (step + 1) % WINDOW == 0 {
            let avg = window_loss / WINDOW as f64;
            if avg > prev_window {
                log::warn!("probe loss rose from {prev_window:.6} to {avg:.6} in window ending at step {}", step + 1);
            } else {
                log::debug!("probe step {}: mean loss {avg:.6}", step + 1);
            }
            prev_window = avg;
            window_loss = 0.0;
        }
    }
    Ok(model)
}

pub fn train_probe(
    train: &[LabeledUtterance],
    inventory: &PhonemeInventory,
    representer: &Representer<'_>,
    config: &ProbeConfig,
) -> Result<ProbeModel> {
    config.validate()?;
    let frames = frame_set(train, representer)?;
    train_on_frames(&frames, inventory.len(), config)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[[true, predicted]]` frame counts.
    pub confusion: Array2<u64>,
    pub total_frames: usize,
}

pub fn eval_on_frames(model: &ProbeModel, frames: &FrameSet) -> Result<Evaluation> {
    let p = model.num_classes();
    if frames.inputs.ncols() != model.input_dim() && !frames.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "inputs have dim {}, probe expects {}",
            frames.inputs.ncols(),
            model.input_dim()
        )));
    }
    let mut confusion = Array2::<u64>::zeros((p, p));
    let predicted = model.predict(frames.inputs.view());
    let mut correct = 0usize;
    for (&y, &yhat) in frames.labels.iter().zip(&predicted) {
        if y >= p {
            return Err(Error::InventoryMismatch { probe: p, inventory: y + 1 });
        }
        confusion[[y, yhat]] += 1;
        correct += usize::from(y == yhat);
    }
    let accuracy = if frames.is_empty() { 0.0 } else { correct as f64 / frames.len() as f64 };
    Ok(Evaluation { accuracy, confusion, total_frames: frames.len() })
}

pub fn eval_probe(
    model: &ProbeModel,
    inventory: &PhonemeInventory,
    utterances: &[LabeledUtterance],
    representer: &Representer<'_>,
) -> Result<Evaluation> {
    if model.num_classes() != inventory.len() {
        return Err(Error::InventoryMismatch { probe: model.num_classes(), inventory: inventory.len() });
    }
    eval_on_frames(model, &frame_set(utterances, representer)?)
}

/// Seeded utterance-level split; both sides keep manifest order.
pub fn split_indices(count: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::BadRatio(ratio));
    }
    if count < 2 {
        return Err(Error::TooFewUtterances(count));
    }
    let n_train = ((ratio * count as f64).round() as usize).clamp(1, count - 1);
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split_dataset(manifest: &DatasetManifest, ratio: f64, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    let (train, test) = split_indices(manifest.len(), ratio, seed)?;
    let pick = |ix: &[usize]| manifest.with_entries(ix.iter().map(|&i| manifest.entries[i].clone()).collect());
    Ok((pick(&train)?, pick(&test)?))
}

pub fn save_probe(model: &ProbeModel, path: impl AsRef<Path>) -> Result<()> {
    let mut store = TensorStore::new();
    store.insert("probe.weight", model.weight.mapv(|v| v as f32).into_dyn());
    store.insert("probe.bias", model.bias.mapv(|v| v as f32).into_dyn());
    write_tensors(&store, path)
}

pub fn load_probe(path: impl AsRef<Path>) -> Result<ProbeModel> {
    let store = read_tensors(path)?;
    let w = store.get("probe.weight").ok_or_else(|| Error::MissingTensor("probe.weight".into()))?;
    let b = store.get("probe.bias").ok_or_else(|| Error::MissingTensor("probe.bias".into()))?;
    let shape_err = |name: &str, found: &[usize]| Error::ShapeMismatch(format!("`{name}` has shape {found:?}"));
    let weight = w.view().into_dimensionality::<Ix2>().map_err(|_| shape_err("probe.weight", w.shape()))?;
    let bias = b.view().into_dimensionality::<Ix1>().map_err(|_| shape_err("probe.bias", b.shape()))?;
    if bias.len() != weight.ncols() {
        return Err(shape_err("probe.bias", b.shape()));
    }
    Ok(ProbeModel { weight: weight.mapv(f64::from), bias: bias.mapv(f64::from) })
}
