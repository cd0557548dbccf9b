//! Attention-head analysis for speech self-attention encoders.
//!
//! Scores heads as global, vertical or diagonal, builds phoneme relation maps,
//! trains linear frame probes, and measures probe accuracy while heads are
//! masked. A small encoder and synthetic attention patterns make every step
//! runnable without a pretrained checkpoint.

pub mod ablation;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod prm;
pub mod probe;
pub mod report;
pub mod synth;

pub use ablation::{ablate_cumulative, emit_curve, parse_curve, rank_heads, AblationCurve, AblationSetup};
pub use error::{Error, Result};
pub use io::{
    AttentionDump, DatasetManifest, FeatureMatrix, FrameLabels, FrameSpec, LabeledUtterance, PhonemeInventory,
    TensorStore,
};
pub use metrics::{categorize, category_counts, score_all, score_heads, Category, CategoryCounts, HeadCategory, HeadId, HeadScores};
pub use model::{init_weights, AttentionOverride, Encoder, HeadMask, ModelConfig, ModelWeights};
pub use prm::{prm_aggregate, HeadSelection, PRMatrix};
pub use probe::{eval_probe, split_dataset, train_probe, Evaluation, ProbeConfig, ProbeModel, Representer};
pub use synth::{generate_battery, generate_dataset, InjectionPlan, PatternKind, PatternSpec, SynthDatasetConfig, SynthMode};
