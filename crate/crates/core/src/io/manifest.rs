//! Dataset manifests.
//!
//! A manifest is a TOML document naming the inventory file and one record
//! per utterance. Relative paths resolve against the manifest's directory.
//!
//! ```toml
//! inventory = "inventory.txt"
//!
//! [[utterance]]
//! id = "utt0000"
//! features = "utt0000.fea"
//! labels = "utt0000.lab"
//! attention = "utt0000.att"   # optional
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    read_attention_dump, read_features, read_frame_labels, read_inventory, AttentionDump,
    FeatureMatrix, FrameLabels, PhonemeInventory,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub features: PathBuf,
    pub labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    inventory: PathBuf,
    #[serde(default, rename = "utterance")]
    utterances: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub inventory_path: PathBuf,
    pub entries: Vec<ManifestEntry>,
    base_dir: PathBuf,
}

/// Features and frame labels of one utterance, checked for agreement.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledUtterance {
    pub features: FeatureMatrix,
    pub labels: FrameLabels,
}

impl LabeledUtterance {
    pub fn new(features: FeatureMatrix, labels: FrameLabels) -> Result<Self> {
        if features.num_frames() != labels.len() {
            return Err(Error::FrameCountMismatch {
                utterance: labels.utterance_id.clone(),
                what: "features",
                expected: labels.len(),
                found: features.num_frames(),
            });
        }
        Ok(Self { features, labels })
    }

    pub fn id(&self) -> &str {
        &self.labels.utterance_id
    }

    pub fn num_frames(&self) -> usize {
        self.labels.len()
    }
}

impl DatasetManifest {
    pub fn new(
        inventory_path: impl Into<PathBuf>,
        entries: Vec<ManifestEntry>,
        base_dir: impl Into<PathBuf>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateUtterance(e.id.clone()));
            }
        }
        Ok(Self { inventory_path: inventory_path.into(), entries, base_dir: base_dir.into() })
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Same base directory and inventory, different entries.
    pub fn with_entries(&self, entries: Vec<ManifestEntry>) -> Result<Self> {
        Self::new(self.inventory_path.clone(), entries, self.base_dir.clone())
    }

    /// Re-expresses every path so the manifest can be written into `new_base`.
    pub fn rebased(&self, new_base: impl Into<PathBuf>) -> Self {
        let new_base = new_base.into();
        if new_base == self.base_dir {
            return self.clone();
        }
        let abs = |p: &Path| self.resolve(p);
        Self {
            inventory_path: abs(&self.inventory_path),
            entries: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    id: e.id.clone(),
                    features: abs(&e.features),
                    labels: abs(&e.labels),
                    attention: e.attention.as_deref().map(abs),
                })
                .collect(),
            base_dir: new_base,
        }
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn load_inventory(&self) -> Result<PhonemeInventory> {
        read_inventory(self.resolve(&self.inventory_path))
    }

    pub fn load_utterance(&self, entry: &ManifestEntry, inventory: &PhonemeInventory) -> Result<LabeledUtterance> {
        let mut features = read_features(self.resolve(&entry.features))?;
        features.utterance_id = entry.id.clone();
        let mut labels = read_frame_labels(self.resolve(&entry.labels))?;
        labels.utterance_id = entry.id.clone();
        labels.check_against(inventory)?;
        LabeledUtterance::new(features, labels)
    }

    pub fn load_attention(&self, entry: &ManifestEntry) -> Result<AttentionDump> {
        let path = entry
            .attention
            .as_deref()
            .ok_or_else(|| Error::MissingAttention { utterance: entry.id.clone() })?;
        let mut dump = read_attention_dump(self.resolve(path))?;
        dump.utterance_id = entry.id.clone();
        Ok(dump)
    }

    pub fn load_all(&self) -> Result<(PhonemeInventory, Vec<LabeledUtterance>)> {
        let inventory = self.load_inventory()?;
        let utts = self
            .entries
            .iter()
            .map(|e| self.load_utterance(e, &inventory))
            .collect::<Result<Vec<_>>>()?;
        Ok((inventory, utts))
    }

    /// Loads every referenced file and checks frame counts agree across them.
    pub fn validate(&self) -> Result<()> {
        let inventory = self.load_inventory()?;
        for entry in &self.entries {
            let utt = self.load_utterance(entry, &inventory)?;
            if entry.attention.is_some() {
                let dump = self.load_attention(entry)?;
                if dump.num_frames() != utt.num_frames() {
                    return Err(Error::FrameCountMismatch {
                        utterance: entry.id.clone(),
                        what: "attention",
                        expected: utt.num_frames(),
                        found: dump.num_frames(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        let doc = ManifestDoc { inventory: self.inventory_path.clone(), utterances: self.entries.clone() };
        toml::to_string(&doc).expect("manifest paths are valid utf-8")
    }

    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>, origin: &Path) -> Result<Self> {
        let doc: ManifestDoc = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(1, |s| text[..s.start].matches('\n').count() + 1);
            Error::parse(origin, line, e.message().to_string())
        })?;
        Self::new(doc.inventory, doc.utterances, base_dir)
    }
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    super::write_bytes(path.as_ref(), manifest.to_toml().as_bytes())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = super::read_text(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::from_toml(&text, base, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_ids_rejected() {
        let e = ManifestEntry { id: "a".into(), features: "a.fea".into(), labels: "a.lab".into(), attention: None };
        let err = DatasetManifest::new("inv.txt", vec![e.clone(), e], ".").unwrap_err();
        assert!(matches!(err, Error::DuplicateUtterance(id) if id == "a"));
    }

    #[test]
    fn parse_error_has_line() {
        let text = "inventory = \"i.txt\"\n\n[[utterance]]\nid = \"a\"\nfeatures = 3\nlabels = \"a.lab\"\n";
        match DatasetManifest::from_toml(text, ".", Path::new("m.toml")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn canonical_text_round_trip() {
        let text = "inventory = \"i.txt\"\n\n[[utterance]]\nid = \"a\"\nfeatures = \"a.fea\"\nlabels = \"a.lab\"\nattention = \"a.att\"\n\n[[utterance]]\nid = \"b\"\nfeatures = \"b.fea\"\nlabels = \"b.lab\"\n";
        let m = DatasetManifest::from_toml(text, ".", Path::new("m.toml")).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.to_toml(), text);
    }
}
