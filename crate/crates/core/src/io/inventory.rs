use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const SIL: &str = "sil";
pub const UNK: &str = "unk";

/// Ordered phone symbols; a symbol's position is its class id.
///
/// Always contains the reserved `sil` and `unk` classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeInventory {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl PhonemeInventory {
    pub fn new<S: Into<String>>(symbols: impl IntoIterator<Item = S>) -> Result<Self> {
        let symbols: Vec<String> = symbols.into_iter().map(Into::into).collect();
        if symbols.is_empty() {
            return Err(Error::EmptyInventory);
        }
        if symbols.len() < 2 {
            return Err(Error::InventoryTooSmall(symbols.len()));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::DuplicateSymbol(s.clone()));
            }
        }
        for reserved in [SIL, UNK] {
            if !index.contains_key(reserved) {
                return Err(Error::MissingReservedSymbol(reserved));
            }
        }
        Ok(Self { symbols, index })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn sil(&self) -> usize {
        self.index[SIL]
    }

    pub fn unk(&self) -> usize {
        self.index[UNK]
    }

    /// Class id of `symbol`, falling back to `unk`.
    pub fn id_or_unk(&self, symbol: &str) -> usize {
        self.id(symbol).unwrap_or_else(|| self.unk())
    }
}

pub fn write_inventory(inventory: &PhonemeInventory, path: impl AsRef<Path>) -> Result<()> {
    let mut text = String::new();
    for s in &inventory.symbols {
        text.push_str(s);
        text.push('\n');
    }
    super::write_bytes(path.as_ref(), text.as_bytes())
}

pub fn read_inventory(path: impl AsRef<Path>) -> Result<PhonemeInventory> {
    let path = path.as_ref();
    let text = super::read_text(path)?;
    let mut symbols = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let sym = line.trim();
        if sym.is_empty() {
            return Err(Error::parse(path, i + 1, "empty symbol"));
        }
        if sym.chars().any(char::is_whitespace) {
            return Err(Error::parse(path, i + 1, format!("symbol `{sym}` contains whitespace")));
        }
        symbols.push(sym.to_string());
    }
    PhonemeInventory::new(symbols)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn requires_reserved_and_unique() {
        assert!(matches!(PhonemeInventory::new(["sil", "a"]), Err(Error::MissingReservedSymbol("unk"))));
        assert!(matches!(
            PhonemeInventory::new(["sil", "unk", "sil"]),
            Err(Error::DuplicateSymbol(s)) if s == "sil"
        ));
        assert!(matches!(PhonemeInventory::new(Vec::<String>::new()), Err(Error::EmptyInventory)));
        assert!(matches!(PhonemeInventory::new(["sil"]), Err(Error::InventoryTooSmall(1))));
        let inv = PhonemeInventory::new(["unk", "sil"]).unwrap();
        assert_eq!((inv.sil(), inv.unk(), inv.id_or_unk("zz")), (1, 0, 0));
    }

    #[test]
    fn blank_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("inv.txt");
        std::fs::write(&p, "sil\nunk\n\na\n").unwrap();
        match read_inventory(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
