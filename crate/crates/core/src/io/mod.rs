//! On-disk formats and frame-level label conversion.
//!
//! Binary files (`ATT1`, `FEA1`, `WGT1`) are little-endian with IEEE-754
//! binary32 payloads in row-major order. Text files (labels, inventories,
//! manifests) are UTF-8 and are written in a canonical form, so that a
//! read followed by a write reproduces the input byte for byte whenever
//! the input was itself canonical.

mod alignment;
mod attention;
mod binary;
mod features;
mod inventory;
mod labels;
mod manifest;
mod weights;

pub use alignment::{frames_from_times, read_time_alignment, FrameSpec, PhoneInterval, TimeAlignment};
pub use attention::{
    encode_attention_dump, read_attention_dump, write_attention_dump, AttentionDump,
    INGEST_ROW_TOLERANCE,
};
pub use features::{encode_features, read_features, write_features, FeatureMatrix};
pub use inventory::{read_inventory, write_inventory, PhonemeInventory, SIL, UNK};
pub use labels::{read_frame_labels, write_frame_labels, FrameLabels};
pub use manifest::{read_manifest, write_manifest, DatasetManifest, LabeledUtterance, ManifestEntry};
pub use weights::{encode_tensors, read_tensors, write_tensors, TensorStore};

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|e| {
        let offset = e.utf8_error().valid_up_to();
        let line = e.as_bytes()[..offset].iter().filter(|&&b| b == b'\n').count() + 1;
        Error::parse(path, line, format!("invalid utf-8 at byte offset {offset}"))
    })
}

/// Utterance id derived from a file name, used when a format carries no id.
pub(crate) fn stem_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}
