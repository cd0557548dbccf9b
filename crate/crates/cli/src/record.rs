use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use attnprobe_core::DatasetManifest;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Provenance written next to every output.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub subcommand: &'static str,
    pub config: serde_json::Value,
    pub resolved: BTreeMap<String, serde_json::Value>,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<PathBuf, String>,
    pub outputs: Vec<PathBuf>,
    pub wall_time_seconds: f64,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunRecord {
    pub fn new(subcommand: &'static str, config: &impl Serialize, seed: Option<u64>) -> anyhow::Result<Self> {
        Ok(Self {
            subcommand,
            config: serde_json::to_value(config)?,
            resolved: BTreeMap::new(),
            seed,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            wall_time_seconds: 0.0,
            started: Some(Instant::now()),
        })
    }

    pub fn resolve(&mut self, key: &str, value: impl Serialize) {
        self.resolved.insert(key.into(), serde_json::to_value(value).expect("plain data serializes"));
    }

    /// Records the sha256 of an input file.
    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        let bytes = std::fs::read(path).map_err(|e| attnprobe_core::Error::Io { path: path.into(), source: e })?;
        self.inputs.insert(path.to_path_buf(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    /// Records a manifest and every file it references.
    pub fn manifest(&mut self, path: &Path, manifest: &DatasetManifest) -> anyhow::Result<()> {
        self.input(path)?;
        self.input(&manifest.resolve(&manifest.inventory_path))?;
        for e in &manifest.entries {
            self.input(&manifest.resolve(&e.features))?;
            self.input(&manifest.resolve(&e.labels))?;
            if let Some(a) = &e.attention {
                self.input(&manifest.resolve(a))?;
            }
        }
        Ok(())
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    pub fn write(mut self, path: &Path) -> anyhow::Result<()> {
        self.wall_time_seconds = self.started.map_or(0.0, |s| s.elapsed().as_secs_f64());
        let mut text = serde_json::to_string_pretty(&self)?;
        text.push('\n');
        std::fs::write(path, text)
            .map_err(|e| attnprobe_core::Error::Io { path: path.into(), source: e })
            .with_context(|| "writing run record")?;
        Ok(())
    }
}

/// `<out>.run.json` for a file output.
pub fn beside(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".run.json");
    out.with_file_name(name)
}
