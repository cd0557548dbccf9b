use std::path::Path;

use super::PhonemeInventory;
use crate::error::{Error, Result};

/// One class id per frame of an utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameLabels {
    pub utterance_id: String,
    pub labels: Vec<usize>,
}

impl FrameLabels {
    pub fn new(utterance_id: impl Into<String>, labels: Vec<usize>) -> Self {
        Self { utterance_id: utterance_id.into(), labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn check_against(&self, inventory: &PhonemeInventory) -> Result<()> {
        let size = inventory.len();
        match self.labels.iter().position(|&l| l >= size) {
            Some(frame) => Err(Error::LabelOutOfRange { frame, label: self.labels[frame], size }),
            None => Ok(()),
        }
    }
}

pub fn write_frame_labels(labels: &FrameLabels, path: impl AsRef<Path>) -> Result<()> {
    let ids: Vec<String> = labels.labels.iter().map(usize::to_string).collect();
    let text = format!("{}\n{}\n", labels.utterance_id, ids.join(" "));
    super::write_bytes(path.as_ref(), text.as_bytes())
}

pub fn read_frame_labels(path: impl AsRef<Path>) -> Result<FrameLabels> {
    let path = path.as_ref();
    let text = super::read_text(path)?;
    let mut lines = text.lines();
    let id = lines
        .next()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::parse(path, 1, "missing utterance id"))?;
    let ids_line = lines.next().ok_or_else(|| Error::parse(path, 2, "missing label line"))?;
    let mut labels = Vec::new();
    for tok in ids_line.split_whitespace() {
        labels.push(
            tok.parse::<usize>()
                .map_err(|_| Error::parse(path, 2, format!("`{tok}` is not a class id")))?,
        );
    }
    if let Some((i, _)) = lines.enumerate().find(|(_, l)| !l.trim().is_empty()) {
        return Err(Error::parse(path, i + 3, "unexpected content after label line"));
    }
    Ok(FrameLabels::new(id, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn id_equal_to_inventory_size_is_out_of_range() {
        let symbols: Vec<String> =
            ["sil", "unk"].into_iter().map(String::from).chain((2..48).map(|i| format!("p{i}"))).collect();
        let inv = PhonemeInventory::new(symbols).unwrap();
        assert_eq!(inv.len(), 48);
        let ok = FrameLabels::new("u", vec![0, 47]);
        ok.check_against(&inv).unwrap();
        let bad = FrameLabels::new("u", vec![0, 47, 48]);
        assert!(matches!(
            bad.check_against(&inv),
            Err(Error::LabelOutOfRange { frame: 2, label: 48, size: 48 })
        ));
    }

    #[test]
    fn parse_errors_carry_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.lab");
        std::fs::write(&p, "u1\n0 1 x\n").unwrap();
        assert!(matches!(read_frame_labels(&p), Err(Error::Parse { line: 2, .. })));
        std::fs::write(&p, "u1\n0 1\n3\n").unwrap();
        assert!(matches!(read_frame_labels(&p), Err(Error::Parse { line: 3, .. })));
    }
}
