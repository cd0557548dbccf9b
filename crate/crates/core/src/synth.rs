//! Ground-truth attention patterns and synthetic labeled datasets.
//!
//! Three pattern families stand in for the head archetypes:
//!
//! * diagonal: each row is a Gaussian bump centred on its own frame;
//! * vertical: each row puts its mass on one shared column;
//! * global: each row is an independent symmetric Dirichlet draw.
//!
//! `noise_level` mixes every row with the uniform distribution.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Geometric, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{
    write_features, write_frame_labels, write_inventory, write_manifest, AttentionDump,
    DatasetManifest, FeatureMatrix, FrameLabels, LabeledUtterance, ManifestEntry, PhonemeInventory,
    SIL, UNK,
};
use crate::metrics::{Category, HeadId};
use crate::model::AttentionOverride;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PatternKind {
    /// Gaussian band around the diagonal; `bandwidth` is the standard deviation in frames.
    Diagonal { bandwidth: f64 },
    /// All rows attend to column `floor(fraction * T)`.
    Vertical { target_column_fraction: f64 },
    /// Rows drawn from a symmetric Dirichlet with this concentration.
    Global { concentration: f64 },
}

impl PatternKind {
    pub fn category(&self) -> Category {
        match self {
            PatternKind::Diagonal { .. } => Category::Diagonal,
            PatternKind::Vertical { .. } => Category::Vertical,
            PatternKind::Global { .. } => Category::Global,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternSpec {
    pub kind: PatternKind,
    pub noise_level: f64,
    pub seed: u64,
}

impl PatternSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.noise_level) {
            return Err(Error::BadSpec(format!("noise level {} outside [0, 1)", self.noise_level)));
        }
        match self.kind {
            PatternKind::Diagonal { bandwidth } if !(bandwidth >= 1.0 && bandwidth.is_finite()) => {
                Err(Error::BadSpec(format!("bandwidth {bandwidth} < 1")))
            }
            PatternKind::Vertical { target_column_fraction: f }
                if !(0.0..=1.0).contains(&f) =>
            {
                Err(Error::BadSpec(format!("column fraction {f} outside [0, 1]")))
            }
            PatternKind::Global { concentration: c } if !(c > 0.0 && c.is_finite()) => {
                Err(Error::BadSpec(format!("concentration {c} must be positive")))
            }
            _ => Ok(()),
        }
    }
}

fn normalize(row: &mut [f64]) {
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|x| *x /= s);
}

/// A `frames x frames` row-stochastic matrix following `spec`.
pub fn synth_attention(spec: &PatternSpec, frames: usize) -> Result<Array2<f64>> {
    spec.validate()?;
    if frames == 0 {
        return Err(Error::BadSpec("pattern needs at least one frame".into()));
    }
    let t = frames;
    let mut m = Array2::<f64>::zeros((t, t));
    match spec.kind {
        PatternKind::Diagonal { bandwidth } => {
            let denom = 2.0 * bandwidth * bandwidth;
            for q in 0..t {
                let mut row: Vec<f64> =
                    (0..t).map(|k| (-((k as f64 - q as f64).powi(2)) / denom).exp()).collect();
                normalize(&mut row);
                m.row_mut(q).assign(&Array1::from(row));
            }
        }
        PatternKind::Vertical { target_column_fraction } => {
            let col = ((target_column_fraction * t as f64).floor() as usize).min(t - 1);
            m.column_mut(col).fill(1.0);
        }
        PatternKind::Global { concentration } => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let gamma = Gamma::new(concentration, 1.0).expect("validated concentration");
            for q in 0..t {
                let row = loop {
                    let mut r: Vec<f64> = (0..t).map(|_| gamma.sample(&mut rng)).collect();
                    let s: f64 = r.iter().sum();
                    // tiny concentrations can underflow every draw
                    if s > 0.0 && s.is_finite() {
                        normalize(&mut r);
                        break r;
                    }
                };
                m.row_mut(q).assign(&Array1::from(row));
            }
        }
    }
    if spec.noise_level > 0.0 {
        let n = spec.noise_level;
        m.mapv_inplace(|a| (1.0 - n) * a + n / t as f64);
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatteryHead {
    pub spec: PatternSpec,
    pub matrix: Array2<f64>,
    pub category: Category,
}

/// Parameter ranges used by [`generate_battery`]; wide enough to vary the
/// patterns, narrow enough that each stays clearly inside its category.
pub mod battery_ranges {
    pub const DIAGONAL_BANDWIDTH: (f64, f64) = (1.0, 2.5);
    pub const DIAGONAL_NOISE: (f64, f64) = (0.0, 0.05);
    pub const VERTICAL_FRACTION: (f64, f64) = (0.0, 1.0);
    pub const VERTICAL_NOISE: (f64, f64) = (0.0, 0.1);
    pub const GLOBAL_CONCENTRATION: (f64, f64) = (1.0, 10.0);
    pub const GLOBAL_NOISE: (f64, f64) = (0.0, 0.05);
}

/// Random pattern specs, `per_category` of each kind, ordered diagonal, vertical, global.
pub fn battery_specs(per_category: usize, seed: u64) -> Vec<PatternSpec> {
    use battery_ranges::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |(lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
    let mut specs = Vec::with_capacity(3 * per_category);
    for _ in 0..per_category {
        let kind = PatternKind::Diagonal { bandwidth: draw(DIAGONAL_BANDWIDTH) };
        specs.push((kind, draw(DIAGONAL_NOISE)));
    }
    for _ in 0..per_category {
        let kind = PatternKind::Vertical { target_column_fraction: draw(VERTICAL_FRACTION) };
        specs.push((kind, draw(VERTICAL_NOISE)));
    }
    for _ in 0..per_category {
        let kind = PatternKind::Global { concentration: draw(GLOBAL_CONCENTRATION) };
        specs.push((kind, draw(GLOBAL_NOISE)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    specs
        .into_iter()
        .map(|(kind, noise_level)| PatternSpec { kind, noise_level, seed: rng.random() })
        .collect()
}

pub fn generate_battery(frames: usize, per_category: usize, seed: u64) -> Result<Vec<BatteryHead>> {
    battery_specs(per_category, seed)
        .into_iter()
        .map(|spec| {
            Ok(BatteryHead { matrix: synth_attention(&spec, frames)?, category: spec.kind.category(), spec })
        })
        .collect()
}

/// Packs a battery into a single-layer dump, one head per battery entry.
pub fn battery_dump(utterance_id: &str, battery: &[BatteryHead]) -> Result<AttentionDump> {
    let heads = vec![battery.iter().map(|b| b.matrix.clone()).collect::<Vec<_>>()];
    AttentionDump::from_heads(utterance_id, &heads, 1e-6)
}

/// Battery patterns assigned to model heads; regenerated per utterance length.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionPlan {
    pub heads: Vec<(HeadId, PatternSpec)>,
}

impl InjectionPlan {
    /// Spreads a `per_category` battery over a `layers x heads` model in a seeded random order.
    ///
    /// Requires `layers * heads == 3 * per_category`.
    pub fn from_battery(layers: usize, heads: usize, per_category: usize, seed: u64) -> Result<Self> {
        if layers * heads != 3 * per_category {
            return Err(Error::BadSpec(format!(
                "{layers}x{heads} heads cannot hold {} battery patterns",
                3 * per_category
            )));
        }
        let specs = battery_specs(per_category, seed);
        let mut slots: Vec<HeadId> =
            (0..layers).flat_map(|l| (0..heads).map(move |h| HeadId::new(l, h))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        slots.shuffle(&mut rng);
        let mut assigned: Vec<(HeadId, PatternSpec)> = slots.into_iter().zip(specs).collect();
        assigned.sort_by_key(|(h, _)| *h);
        Ok(Self { heads: assigned })
    }

    pub fn category_of(&self, head: HeadId) -> Option<Category> {
        self.heads.iter().find(|(h, _)| *h == head).map(|(_, s)| s.kind.category())
    }

    /// Overrides for the utterance with key `key` (see [`crate::probe::utterance_key`])
    /// and length `frames`.
    pub fn override_for(&self, key: u64, frames: usize) -> Result<AttentionOverride> {
        let mut ov = AttentionOverride::default();
        for (head, spec) in &self.heads {
            let spec = PatternSpec {
                seed: spec.seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15),
                ..*spec
            };
            ov.insert(*head, synth_attention(&spec, frames)?);
        }
        Ok(ov)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SynthMode {
    /// Label is the class of the segment that emitted the frame.
    Local,
    /// Frames of dependent-class segments carry no class-specific features; their
    /// label is `dependent[i mod len]` where `i` is the position (in
    /// `trigger_classes`) of the most recent trigger segment's class.
    Harmony { trigger_classes: Vec<usize>, dependent_classes: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDatasetConfig {
    pub num_utterances: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub prototype_noise: f64,
    pub mode: SynthMode,
    pub seed: u64,
}

impl Default for SynthDatasetConfig {
    fn default() -> Self {
        Self {
            num_utterances: 20,
            min_frames: 40,
            max_frames: 80,
            num_classes: 4,
            feature_dim: 16,
            prototype_noise: 0.1,
            mode: SynthMode::Local,
            seed: 0,
        }
    }
}

/// Mean segment length in frames.
pub const MEAN_SEGMENT_FRAMES: f64 = 8.0;

impl SynthDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadDatasetConfig(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.num_utterances == 0 || self.feature_dim == 0 {
            return bad("utterance count and feature dim must be positive".into());
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad(format!("bad frame range {}..={}", self.min_frames, self.max_frames));
        }
        if !(self.prototype_noise >= 0.0 && self.prototype_noise.is_finite()) {
            return bad(format!("prototype noise {} must be >= 0", self.prototype_noise));
        }
        if let SynthMode::Harmony { trigger_classes, dependent_classes } = &self.mode {
            if trigger_classes.is_empty() || dependent_classes.is_empty() {
                return bad("harmony mode needs trigger and dependent classes".into());
            }
            if let Some(c) =
                trigger_classes.iter().chain(dependent_classes).find(|&&c| c >= self.num_classes)
            {
                return bad(format!("class {c} outside 0..{}", self.num_classes));
            }
            if trigger_classes.iter().any(|c| dependent_classes.contains(c)) {
                return bad("trigger and dependent classes overlap".into());
            }
        }
        Ok(())
    }

    pub fn inventory(&self) -> PhonemeInventory {
        let symbols = (0..self.num_classes).map(|i| match i {
            0 => SIL.to_string(),
            1 => UNK.to_string(),
            _ => format!("p{i}"),
        });
        PhonemeInventory::new(symbols).expect("at least two unique symbols")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub inventory: PhonemeInventory,
    pub utterances: Vec<LabeledUtterance>,
}

fn utterance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index as u64);
    rng.set_stream(1);
    rng
}

/// Class prototypes (one per class, plus the harmony carrier as the last row).
fn prototypes(config: &SynthDatasetConfig) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Array2::from_shape_simple_fn((config.num_classes + 1, config.feature_dim), || normal.sample(&mut rng))
}

pub fn generate_dataset(config: &SynthDatasetConfig) -> Result<SynthDataset> {
    config.validate()?;
    let protos = prototypes(config);
    let carrier = config.num_classes;
    let utterances = (0..config.num_utterances)
        .into_par_iter()
        .map(|i| {
            let mut rng = utterance_rng(config.seed, i);
            let frames = rng.random_range(config.min_frames..=config.max_frames);
            let seg_len = Geometric::new(1.0 / MEAN_SEGMENT_FRAMES).expect("valid p");
            let noise = Normal::new(0.0, config.prototype_noise).expect("validated noise");
            let mut labels = Vec::with_capacity(frames);
            let mut feats = Array2::<f32>::zeros((frames, config.feature_dim));
            let mut last_trigger: Option<usize> = None;
            while labels.len() < frames {
                let len = (seg_len.sample(&mut rng) as usize + 1).min(frames - labels.len());
                let (label, proto) = match &config.mode {
                    SynthMode::Local => {
                        let c = rng.random_range(0..config.num_classes);
                        (c, c)
                    }
                    SynthMode::Harmony { trigger_classes, dependent_classes } => {
                        let c = if labels.is_empty() {
                            trigger_classes[rng.random_range(0..trigger_classes.len())]
                        } else {
                            rng.random_range(0..config.num_classes)
                        };
                        if let Some(pos) = trigger_classes.iter().position(|&t| t == c) {
                            last_trigger = Some(pos);
                            (c, c)
                        } else if dependent_classes.contains(&c) {
                            let pos = last_trigger.expect("utterances open with a trigger");
                            (dependent_classes[pos % dependent_classes.len()], carrier)
                        } else {
                            (c, c)
                        }
                    }
                };
                for _ in 0..len {
                    let t = labels.len();
                    for f in 0..config.feature_dim {
                        let v = protos[[proto, f]] + if config.prototype_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        feats[[t, f]] = v as f32;
                    }
                    labels.push(label);
                }
            }
            let id = format!("utt{i:05}");
            LabeledUtterance::new(FeatureMatrix::new(id.clone(), feats)?, FrameLabels::new(id, labels))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthDataset { inventory: config.inventory(), utterances })
}

/// Writes features, labels, the inventory and a manifest into `dir`; returns the manifest path.
pub fn write_dataset(dataset: &SynthDataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_inventory(&dataset.inventory, dir.join("inventory.txt"))?;
    let mut entries = Vec::with_capacity(dataset.utterances.len());
    for utt in &dataset.utterances {
        let id = utt.id().to_string();
        let features = PathBuf::from(format!("{id}.fea"));
        let labels = PathBuf::from(format!("{id}.lab"));
        write_features(&utt.features, dir.join(&features))?;
        write_frame_labels(&utt.labels, dir.join(&labels))?;
        entries.push(ManifestEntry { id, features, labels, attention: None });
    }
    let manifest = DatasetManifest::new("inventory.txt", entries, dir)?;
    let path = dir.join("manifest.toml");
    write_manifest(&manifest, &path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{matrix_diagonalness, matrix_globalness, matrix_verticality};

    fn spec(kind: PatternKind, noise_level: f64, seed: u64) -> PatternSpec {
        PatternSpec { kind, noise_level, seed }
    }

    fn assert_stochastic(m: &Array2<f64>) {
        for row in m.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn narrow_diagonal_beats_uniform() {
        let m = synth_attention(&spec(PatternKind::Diagonal { bandwidth: 1.0 }, 0.0, 0), 4).unwrap();
        assert_stochastic(&m);
        let d = matrix_diagonalness(m.view()).unwrap();
        assert!(d > -0.3125 && d < 0.0, "{d}");
    }

    #[test]
    fn vertical_at_column_zero_is_maximally_vertical() {
        let m = synth_attention(&spec(PatternKind::Vertical { target_column_fraction: 0.0 }, 0.0, 0), 4)
            .unwrap();
        assert!(m.column(0).iter().all(|&x| x == 1.0));
        assert_eq!(matrix_verticality(m.view()).unwrap(), 0.0);
        let last = synth_attention(&spec(PatternKind::Vertical { target_column_fraction: 1.0 }, 0.0, 0), 4)
            .unwrap();
        assert!(last.column(3).iter().all(|&x| x == 1.0));
    }

    #[test]
    fn dirichlet_entropy_matches_expectation() {
        // E[H] of a symmetric Dirichlet(1) over T outcomes is H_T - 1 (harmonic number).
        let t = 64;
        let expected: f64 = (1..=t).map(|k| 1.0 / k as f64).sum::<f64>() - 1.0;
        let mean: f64 = (0..100u64)
            .map(|s| {
                let m = synth_attention(&spec(PatternKind::Global { concentration: 1.0 }, 0.0, s), t).unwrap();
                assert_stochastic(&m);
                matrix_globalness(m.view()).unwrap()
            })
            .sum::<f64>()
            / 100.0;
        assert!((mean - expected).abs() < 0.01, "mean {mean} vs {expected}");
    }

    #[test]
    fn bad_specs() {
        assert!(synth_attention(&spec(PatternKind::Diagonal { bandwidth: 0.5 }, 0.0, 0), 4).is_err());
        assert!(synth_attention(&spec(PatternKind::Global { concentration: 0.0 }, 0.0, 0), 4).is_err());
        assert!(synth_attention(&spec(PatternKind::Vertical { target_column_fraction: 1.5 }, 0.0, 0), 4)
            .is_err());
        assert!(synth_attention(&spec(PatternKind::Diagonal { bandwidth: 1.0 }, 1.0, 0), 4).is_err());
        assert!(synth_attention(&spec(PatternKind::Diagonal { bandwidth: 1.0 }, 0.0, 0), 0).is_err());
    }

    #[test]
    fn battery_shape_and_determinism() {
        assert!(generate_battery(50, 0, 3).unwrap().is_empty());
        let a = generate_battery(50, 12, 3).unwrap();
        assert_eq!(a.len(), 36);
        assert_eq!(a, generate_battery(50, 12, 3).unwrap());
        assert_ne!(a, generate_battery(50, 12, 4).unwrap());
        for b in &a {
            assert_stochastic(&b.matrix);
        }
        let dump = battery_dump("b", &a).unwrap();
        assert_eq!((dump.num_layers(), dump.num_heads(), dump.num_frames()), (1, 36, 50));
    }

    #[test]
    fn injection_plan_covers_every_head_once() {
        let plan = InjectionPlan::from_battery(3, 12, 12, 9).unwrap();
        assert_eq!(plan.heads.len(), 36);
        for c in Category::ALL {
            assert_eq!(plan.heads.iter().filter(|(_, s)| s.kind.category() == c).count(), 12);
        }
        let ov = plan.override_for(4, 20).unwrap();
        assert_eq!(ov.len(), 36);
        assert_eq!(ov, plan.override_for(4, 20).unwrap());
        assert!(InjectionPlan::from_battery(2, 12, 12, 9).is_err());
    }

    #[test]
    fn dataset_is_deterministic_and_consistent() {
        let cfg = SynthDatasetConfig { num_utterances: 5, ..Default::default() };
        let a = generate_dataset(&cfg).unwrap();
        assert_eq!(a, generate_dataset(&cfg).unwrap());
        for u in &a.utterances {
            assert!((40..=80).contains(&u.num_frames()));
            u.labels.check_against(&a.inventory).unwrap();
        }
    }

    #[test]
    fn harmony_dependent_frames_share_features_and_follow_trigger() {
        let cfg = SynthDatasetConfig {
            num_utterances: 10,
            num_classes: 6,
            prototype_noise: 0.0,
            mode: SynthMode::Harmony { trigger_classes: vec![2, 3], dependent_classes: vec![4, 5] },
            ..Default::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let mut carrier: Option<Vec<f32>> = None;
        for u in &ds.utterances {
            assert!([2, 3].contains(&u.labels.labels[0]));
            let mut last = None;
            for (t, &l) in u.labels.labels.iter().enumerate() {
                if l == 2 || l == 3 {
                    last = Some(l);
                }
                if l == 4 || l == 5 {
                    assert_eq!(l, if last == Some(2) { 4 } else { 5 });
                    let row = u.features.data().row(t).to_vec();
                    match &carrier {
                        Some(c) => assert_eq!(c, &row),
                        None => carrier = Some(row),
                    }
                }
            }
        }
        assert!(carrier.is_some());
    }

    #[test]
    fn harmony_config_validation() {
        let mut cfg = SynthDatasetConfig {
            mode: SynthMode::Harmony { trigger_classes: vec![2], dependent_classes: vec![2, 3] },
            ..Default::default()
        };
        assert!(matches!(generate_dataset(&cfg), Err(Error::BadDatasetConfig(_))));
        cfg.mode = SynthMode::Harmony { trigger_classes: vec![2], dependent_classes: vec![9] };
        assert!(matches!(generate_dataset(&cfg), Err(Error::BadDatasetConfig(_))));
        cfg.mode = SynthMode::Local;
        cfg.num_classes = 1;
        assert!(matches!(generate_dataset(&cfg), Err(Error::BadDatasetConfig(_))));
    }
}
