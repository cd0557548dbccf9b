//! Fixtures shared by the benchmarks.

use attnprobe_core::io::{AttentionDump, FrameLabels, INGEST_ROW_TOLERANCE};
use attnprobe_core::synth::SynthDataset;
use attnprobe_core::{generate_battery, generate_dataset, SynthDatasetConfig};

/// A model-shaped dump (`layers x heads` battery heads) of `frames` frames.
pub fn battery_dump(layers: usize, heads: usize, frames: usize, seed: u64) -> AttentionDump {
    let total = layers * heads;
    let per_category = total.div_ceil(3);
    let battery = generate_battery(frames, per_category, seed).expect("valid battery");
    let matrices: Vec<Vec<_>> = (0..layers)
        .map(|l| (0..heads).map(|h| battery[l * heads + h].matrix.clone()).collect())
        .collect();
    AttentionDump::from_heads(format!("bench{seed}"), &matrices, INGEST_ROW_TOLERANCE).expect("stochastic rows")
}

/// Frame labels cycling through `classes` in runs of 8.
pub fn labels(frames: usize, classes: usize, seed: u64) -> FrameLabels {
    FrameLabels::new(format!("bench{seed}"), (0..frames).map(|i| (i / 8 + seed as usize) % classes).collect())
}

pub fn dataset(utterances: usize, seed: u64) -> SynthDataset {
    generate_dataset(&SynthDatasetConfig { num_utterances: utterances, seed, ..Default::default() }).expect("valid config")
}
