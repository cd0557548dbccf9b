//! Minimal post-norm transformer encoder with head masking and attention overrides.
//!
//! Per layer: multi-head scaled dot-product self-attention, residual, layer
//! norm, ReLU feed-forward, residual, layer norm. Sinusoidal positions are
//! added after the input projection. Forward pass only.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayD, ArrayViewMut2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{read_tensors, write_tensors, AttentionDump, FeatureMatrix, TensorStore};
use crate::metrics::HeadId;

const LAYER_NORM_EPS: f64 = 1e-5;
/// Row-sum tolerance for override matrices and the dumps the encoder emits.
pub const MODEL_ROW_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub feedforward_dim: usize,
    pub feature_dim: usize,
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 3,
            num_heads: 12,
            model_dim: 48,
            feedforward_dim: 96,
            feature_dim: 16,
            max_frames: 1024,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("model_dim", self.model_dim),
            ("feedforward_dim", self.feedforward_dim),
            ("feature_dim", self.feature_dim),
            ("max_frames", self.max_frames),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::BadConfig(format!("{name} must be at least 1")));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::BadConfig(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn contains(&self, head: HeadId) -> bool {
        head.layer < self.num_layers && head.head < self.num_heads
    }

    /// Tensor names and shapes the config calls for, in file order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (f, d, ff) = (self.feature_dim, self.model_dim, self.feedforward_dim);
        let mut out = vec![("input.weight".to_string(), vec![f, d]), ("input.bias".to_string(), vec![d])];
        for l in 0..self.num_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            for n in ["attn.query", "attn.key", "attn.value", "attn.output"] {
                out.push((p(n), vec![d, d]));
            }
            out.push((p("ffn.w1"), vec![d, ff]));
            out.push((p("ffn.b1"), vec![ff]));
            out.push((p("ffn.w2"), vec![ff, d]));
            out.push((p("ffn.b2"), vec![d]));
            for n in ["norm1.gain", "norm1.bias", "norm2.gain", "norm2.bias"] {
                out.push((p(n), vec![d]));
            }
        }
        out
    }

    /// `key=value` lines; `#` starts a comment.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.fields() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    fn fields(&self) -> [(&'static str, u64); 7] {
        [
            ("num_layers", self.num_layers as u64),
            ("num_heads", self.num_heads as u64),
            ("model_dim", self.model_dim as u64),
            ("feedforward_dim", self.feedforward_dim as u64),
            ("feature_dim", self.feature_dim as u64),
            ("max_frames", self.max_frames as u64),
            ("seed", self.seed),
        ]
    }

    /// Parses `key=value` text; absent keys keep their defaults.
    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, i + 1, "expected key=value"))?;
            let value: u64 = value
                .trim()
                .parse()
                .map_err(|_| Error::parse(origin, i + 1, format!("`{}` is not an integer", value.trim())))?;
            let as_usize = value as usize;
            match key.trim() {
                "num_layers" => cfg.num_layers = as_usize,
                "num_heads" => cfg.num_heads = as_usize,
                "model_dim" => cfg.model_dim = as_usize,
                "feedforward_dim" => cfg.feedforward_dim = as_usize,
                "feature_dim" => cfg.feature_dim = as_usize,
                "max_frames" => cfg.max_frames = as_usize,
                "seed" => cfg.seed = value,
                other => return Err(Error::parse(origin, i + 1, format!("unknown key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&crate::io::read_text(path)?, path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Encoder parameters checked against a config.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    tensors: TensorStore,
}

impl ModelWeights {
    pub fn from_store(config: ModelConfig, tensors: TensorStore) -> Result<Self> {
        config.validate()?;
        for (name, shape) in config.tensor_shapes() {
            let t = tensors.expect(&name, &shape)?;
            if let Some(index) = t.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: format!("tensor `{name}`"), index });
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &TensorStore {
        &self.tensors
    }

    /// Mutable access for constructing controlled models; shapes must be preserved.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut ArrayD<f32>> {
        self.tensors.get_mut(name)
    }
}

/// Seeded initialization: matrices uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`,
/// zero biases, unit layer-norm gains.
pub fn init_weights(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = TensorStore::new();
    for (name, shape) in config.tensor_shapes() {
        let tensor = if shape.len() == 2 {
            let bound = 1.0 / (shape[0] as f32).sqrt();
            ArrayD::from_shape_simple_fn(IxDyn(&shape), || rng.random_range(-bound..=bound))
        } else if name.ends_with(".gain") {
            ArrayD::ones(IxDyn(&shape))
        } else {
            ArrayD::zeros(IxDyn(&shape))
        };
        store.insert(name, tensor);
    }
    ModelWeights::from_store(config.clone(), store)
}

pub fn save_weights(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    write_tensors(&weights.tensors, path)
}

pub fn load_weights(path: impl AsRef<Path>, config: &ModelConfig) -> Result<ModelWeights> {
    ModelWeights::from_store(config.clone(), read_tensors(path)?)
}

/// Heads whose context output is zeroed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HeadMask {
    masked: BTreeSet<HeadId>,
}

impl HeadMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all(layers: usize, heads: usize) -> Self {
        (0..layers).flat_map(|l| (0..heads).map(move |h| HeadId::new(l, h))).collect()
    }

    pub fn insert(&mut self, head: HeadId) -> bool {
        self.masked.insert(head)
    }

    pub fn contains(&self, head: HeadId) -> bool {
        self.masked.contains(&head)
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = HeadId> + '_ {
        self.masked.iter().copied()
    }
}

impl FromIterator<HeadId> for HeadMask {
    fn from_iter<I: IntoIterator<Item = HeadId>>(iter: I) -> Self {
        Self { masked: iter.into_iter().collect() }
    }
}

/// Attention matrices substituted for the computed ones, per head.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionOverride {
    heads: BTreeMap<HeadId, Array2<f64>>,
}

impl AttentionOverride {
    pub fn insert(&mut self, head: HeadId, matrix: Array2<f64>) {
        self.heads.insert(head, matrix);
    }

    pub fn get(&self, head: HeadId) -> Option<&Array2<f64>> {
        self.heads.get(&head)
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    fn validate(&self, config: &ModelConfig, frames: usize) -> Result<()> {
        for (&head, m) in &self.heads {
            if !config.contains(head) {
                return Err(Error::HeadOutsideModel(head));
            }
            if m.dim() != (frames, frames) {
                return Err(Error::BadOverride {
                    head,
                    message: format!("shape {:?}, utterance has {frames} frames", m.dim()),
                });
            }
            for (q, row) in m.outer_iter().enumerate() {
                if row.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                    return Err(Error::BadOverride { head, message: format!("row {q} has a bad entry") });
                }
                let sum = row.sum();
                if (sum - 1.0).abs() > MODEL_ROW_TOLERANCE {
                    return Err(Error::BadOverride { head, message: format!("row {q} sums to {sum}") });
                }
            }
        }
        Ok(())
    }
}

struct LayerParams {
    query: Array2<f64>,
    key: Array2<f64>,
    value: Array2<f64>,
    output: Array2<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    norm1: (Array1<f64>, Array1<f64>),
    norm2: (Array1<f64>, Array1<f64>),
}

/// Output of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `frames x model_dim` final-layer representations.
    pub representations: Array2<f64>,
    pub dump: AttentionDump,
}

/// Immutable, f64-widened copy of the weights, ready for repeated forward passes.
pub struct Encoder {
    config: ModelConfig,
    input_weight: Array2<f64>,
    input_bias: Array1<f64>,
    layers: Vec<LayerParams>,
}

fn matrix(store: &TensorStore, name: &str) -> Array2<f64> {
    store
        .get(name)
        .expect("validated by ModelWeights")
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("rank checked")
        .mapv(f64::from)
}

fn vector(store: &TensorStore, name: &str) -> Array1<f64> {
    store
        .get(name)
        .expect("validated by ModelWeights")
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("rank checked")
        .mapv(f64::from)
}

pub fn sinusoidal_positions(frames: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((frames, dim), |(t, j)| {
        let i = (j / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * i / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn layer_norm(x: &mut Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) {
    for mut row in x.outer_iter_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.iter_mut().zip(gain.iter().zip(bias)).for_each(|(v, (g, b))| *v = (*v - mean) * inv * g + b);
    }
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// The single place that defines what masking a head means: its context
/// vectors are zeroed before the output projection.
fn mask_head_context(mut context: ArrayViewMut2<'_, f64>) {
    context.fill(0.0);
}

impl Encoder {
    pub fn new(weights: &ModelWeights) -> Self {
        let t = &weights.tensors;
        let layers = (0..weights.config.num_layers)
            .map(|l| {
                let n = |x: &str| format!("layers.{l}.{x}");
                LayerParams {
                    query: matrix(t, &n("attn.query")),
                    key: matrix(t, &n("attn.key")),
                    value: matrix(t, &n("attn.value")),
                    output: matrix(t, &n("attn.output")),
                    w1: matrix(t, &n("ffn.w1")),
                    b1: vector(t, &n("ffn.b1")),
                    w2: matrix(t, &n("ffn.w2")),
                    b2: vector(t, &n("ffn.b2")),
                    norm1: (vector(t, &n("norm1.gain")), vector(t, &n("norm1.bias"))),
                    norm2: (vector(t, &n("norm2.gain")), vector(t, &n("norm2.bias"))),
                }
            })
            .collect();
        Self {
            config: weights.config.clone(),
            input_weight: matrix(t, "input.weight"),
            input_bias: vector(t, "input.bias"),
            layers,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn embed(&self, features: &FeatureMatrix) -> Result<Array2<f64>> {
        let (frames, dim) = features.data().dim();
        if dim != self.config.feature_dim {
            return Err(Error::ShapeMismatch(format!(
                "features have dim {dim}, model expects {}",
                self.config.feature_dim
            )));
        }
        if frames > self.config.max_frames {
            return Err(Error::ShapeMismatch(format!(
                "{frames} frames exceed max_frames {}",
                self.config.max_frames
            )));
        }
        if frames == 0 {
            return Err(Error::ShapeMismatch("utterance has no frames".into()));
        }
        let x = features.data().mapv(f64::from).dot(&self.input_weight) + &self.input_bias;
        Ok(x + sinusoidal_positions(frames, self.config.model_dim))
    }

    fn feed_forward(layer: &LayerParams, x: &mut Array2<f64>) {
        let mut hidden = x.dot(&layer.w1) + &layer.b1;
        hidden.mapv_inplace(|v| v.max(0.0));
        let ff = hidden.dot(&layer.w2) + &layer.b2;
        *x += &ff;
        layer_norm(x, &layer.norm2.0, &layer.norm2.1);
    }

    /// Runs the encoder, recording every head's attention in the dump.
    pub fn forward(
        &self,
        features: &FeatureMatrix,
        mask: &HeadMask,
        overrides: &AttentionOverride,
    ) -> Result<ForwardOutput> {
        let (representations, heads) = self.run(features, mask, overrides, true)?;
        let dump = AttentionDump::from_heads(&features.utterance_id, &heads, MODEL_ROW_TOLERANCE)?;
        Ok(ForwardOutput { representations, dump })
    }

    /// Like [`Encoder::forward`] but skips building the dump.
    pub fn represent(
        &self,
        features: &FeatureMatrix,
        mask: &HeadMask,
        overrides: &AttentionOverride,
    ) -> Result<Array2<f64>> {
        Ok(self.run(features, mask, overrides, false)?.0)
    }

    fn run(
        &self,
        features: &FeatureMatrix,
        mask: &HeadMask,
        overrides: &AttentionOverride,
        record: bool,
    ) -> Result<(Array2<f64>, Vec<Vec<Array2<f64>>>)> {
        if let Some(h) = mask.iter().find(|h| !self.config.contains(*h)) {
            return Err(Error::HeadOutsideModel(h));
        }
        let mut x = self.embed(features)?;
        let frames = x.nrows();
        overrides.validate(&self.config, frames)?;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut recorded = Vec::with_capacity(if record { self.layers.len() } else { 0 });
        for (l, layer) in self.layers.iter().enumerate() {
            let q = x.dot(&layer.query);
            let k = x.dot(&layer.key);
            let v = x.dot(&layer.value);
            let mut context = Array2::<f64>::zeros((frames, self.config.model_dim));
            let mut layer_heads = Vec::with_capacity(self.config.num_heads);
            for h in 0..self.config.num_heads {
                let id = HeadId::new(l, h);
                let cols = s![.., h * dh..(h + 1) * dh];
                let attn = match overrides.get(id) {
                    Some(m) => m.clone(),
                    None => {
                        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                        softmax_rows(&mut scores);
                        scores
                    }
                };
                let mut ctx = context.slice_mut(cols);
                ctx.assign(&attn.dot(&v.slice(cols)));
                if mask.contains(id) {
                    mask_head_context(ctx);
                }
                if record {
                    layer_heads.push(attn);
                }
            }
            x += &context.dot(&layer.output);
            layer_norm(&mut x, &layer.norm1.0, &layer.norm1.1);
            Self::feed_forward(layer, &mut x);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation { layer: l });
            }
            if record {
                recorded.push(layer_heads);
            }
        }
        Ok((x, recorded))
    }

    /// The encoder with every attention sublayer removed: embedding, then per
    /// layer `norm1(x)` followed by the feed-forward block.
    pub fn forward_without_attention(&self, features: &FeatureMatrix) -> Result<Array2<f64>> {
        let mut x = self.embed(features)?;
        for (l, layer) in self.layers.iter().enumerate() {
            layer_norm(&mut x, &layer.norm1.0, &layer.norm1.1);
            Self::feed_forward(layer, &mut x);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation { layer: l });
            }
        }
        Ok(x)
    }
}

/// One-shot forward pass; prefer [`Encoder`] when running many utterances.
pub fn forward(
    features: &FeatureMatrix,
    weights: &ModelWeights,
    mask: &HeadMask,
    overrides: &AttentionOverride,
) -> Result<ForwardOutput> {
    Encoder::new(weights).forward(features, mask, overrides)
}

/// Sum of squares of every tensor value; a cheap fingerprint for comparing weights.
pub fn weights_checksum(weights: &ModelWeights) -> f64 {
    weights
        .tensors
        .iter()
        .map(|(_, t)| t.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>())
        .sum()
}
