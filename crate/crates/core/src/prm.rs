//! Phoneme relation maps.
//!
//! `mean[m][n]` is the average attention a query frame labeled `m` pays to a
//! key frame labeled `n`, pooled over every ordered frame pair (including
//! `q == k`), every selected head and every utterance. Rows are the attending
//! phone, columns the attended-to phone.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{AttentionDump, FrameLabels, PhonemeInventory};
use crate::report::fmt_float;

#[derive(Debug, Clone, PartialEq)]
pub struct PRMatrix {
    inventory: PhonemeInventory,
    sums: Array2<f64>,
    counts: Array2<u64>,
}

impl PRMatrix {
    pub fn new(inventory: PhonemeInventory) -> Self {
        let p = inventory.len();
        Self { inventory, sums: Array2::zeros((p, p)), counts: Array2::zeros((p, p)) }
    }

    pub fn inventory(&self) -> &PhonemeInventory {
        &self.inventory
    }

    pub fn sums(&self) -> &Array2<f64> {
        &self.sums
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    /// Adds every ordered frame pair of one head's attention matrix.
    pub fn accumulate(&mut self, attention: ArrayView2<'_, f64>, labels: &[usize]) -> Result<()> {
        let (rows, cols) = attention.dim();
        if rows != cols {
            return Err(Error::NotSquare { rows, cols });
        }
        if rows != labels.len() {
            return Err(Error::LengthMismatch { attention: rows, labels: labels.len() });
        }
        let p = self.inventory.len();
        if let Some(frame) = labels.iter().position(|&l| l >= p) {
            return Err(Error::LabelOutOfRange { frame, label: labels[frame], size: p });
        }
        for (q, row) in attention.outer_iter().enumerate() {
            let m = labels[q];
            for (k, &a) in row.iter().enumerate() {
                self.sums[[m, labels[k]]] += a;
            }
        }
        let mut hist = vec![0u64; p];
        for &l in labels {
            hist[l] += 1;
        }
        for (m, &cm) in hist.iter().enumerate().filter(|(_, &c)| c > 0) {
            for (n, &cn) in hist.iter().enumerate() {
                self.counts[[m, n]] += cm * cn;
            }
        }
        Ok(())
    }

    /// Adds another accumulator's sums and counts.
    pub fn merge(&mut self, other: &PRMatrix) -> Result<()> {
        if other.inventory.len() != self.inventory.len() {
            return Err(Error::PrmInventoryMismatch { left: self.inventory.len(), right: other.inventory.len() });
        }
        self.sums += &other.sums;
        self.counts += &other.counts;
        Ok(())
    }

    /// `sums / counts`, with 0 where a pair never occurred.
    pub fn mean(&self) -> Array2<f64> {
        Array2::from_shape_fn(self.sums.dim(), |ix| {
            let c = self.counts[ix];
            if c == 0 {
                0.0
            } else {
                self.sums[ix] / c as f64
            }
        })
    }

    /// Swaps the attender/attended roles.
    pub fn transposed(&self) -> Self {
        Self {
            inventory: self.inventory.clone(),
            sums: self.sums.t().to_owned(),
            counts: self.counts.t().to_owned(),
        }
    }

    /// Fraction of populated rows whose largest mean cell is the diagonal one.
    pub fn self_relation_fraction(&self) -> Option<f64> {
        let mean = self.mean();
        let mut populated = 0usize;
        let mut selfish = 0usize;
        for (m, row) in mean.outer_iter().enumerate() {
            if self.counts.row(m).iter().all(|&c| c == 0) {
                continue;
            }
            populated += 1;
            let mut best = 0;
            for (n, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = n;
                }
            }
            selfish += usize::from(best == m);
        }
        (populated > 0).then(|| selfish as f64 / populated as f64)
    }
}

/// Functional form of [`PRMatrix::accumulate`].
pub fn prm_accumulate(attention: ArrayView2<'_, f64>, labels: &FrameLabels, mut acc: PRMatrix) -> Result<PRMatrix> {
    acc.accumulate(attention, &labels.labels)?;
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadSelection {
    All,
    Only(Vec<usize>),
}

/// Pools attention of the selected heads of `layer` over the first
/// `max_utterances` utterances, merging per-utterance partial sums in order.
pub fn prm_aggregate(
    utterances: &[(&AttentionDump, &FrameLabels)],
    inventory: &PhonemeInventory,
    layer: usize,
    heads: &HeadSelection,
    max_utterances: usize,
) -> Result<PRMatrix> {
    let used = &utterances[..utterances.len().min(max_utterances)];
    for (dump, labels) in used {
        if layer >= dump.num_layers() {
            return Err(Error::LayerOutOfRange { layer, layers: dump.num_layers() });
        }
        if dump.num_frames() != labels.len() {
            return Err(Error::LengthMismatch { attention: dump.num_frames(), labels: labels.len() });
        }
    }
    let partials: Vec<PRMatrix> = used
        .par_iter()
        .map(|(dump, labels)| {
            let head_ids: Vec<usize> = match heads {
                HeadSelection::All => (0..dump.num_heads()).collect(),
                HeadSelection::Only(h) => h.clone(),
            };
            if head_ids.is_empty() {
                return Err(Error::EmptyHeadSet);
            }
            let mut acc = PRMatrix::new(inventory.clone());
            for h in head_ids {
                if h >= dump.num_heads() {
                    return Err(Error::HeadOutOfRange { head: h, heads: dump.num_heads() });
                }
                acc.accumulate(dump.head_f64(layer, h).view(), &labels.labels)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    if matches!(heads, HeadSelection::Only(h) if h.is_empty()) {
        return Err(Error::EmptyHeadSet);
    }
    let mut total = PRMatrix::new(inventory.clone());
    for part in &partials {
        total.merge(part)?;
    }
    Ok(total)
}

fn grid_csv<T>(symbols: &[String], cell: impl Fn(usize, usize) -> T) -> String
where
    T: std::fmt::Display,
{
    let mut out = String::new();
    for s in symbols {
        out.push(',');
        out.push_str(s);
    }
    out.push('\n');
    for (m, s) in symbols.iter().enumerate() {
        out.push_str(s);
        for n in 0..symbols.len() {
            let _ = write!(out, ",{}", cell(m, n));
        }
        out.push('\n');
    }
    out
}

/// Mean matrix as CSV with a symbol header row and column.
pub fn prm_csv(prm: &PRMatrix) -> String {
    let mean = prm.mean();
    grid_csv(prm.inventory.symbols(), |m, n| fmt_float(mean[[m, n]]))
}

/// 1 where the pair occurred at least once, 0 otherwise.
pub fn prm_mask_csv(prm: &PRMatrix) -> String {
    grid_csv(prm.inventory.symbols(), |m, n| u8::from(prm.counts[[m, n]] > 0))
}

/// Binary 8-bit PGM of the mean matrix, min-max normalized.
pub fn prm_pgm(prm: &PRMatrix) -> Vec<u8> {
    let mean = prm.mean();
    let p = mean.nrows();
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{p} {p}\n255\n").into_bytes();
    for &v in mean.iter() {
        let level = if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() } else { 0.0 };
        out.push(level as u8);
    }
    out
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

/// Writes `path` (mean CSV), `<stem>.mask.csv`, and with `pgm` also `<stem>.pgm`.
/// Returns every path written.
pub fn export_prm(prm: &PRMatrix, path: impl AsRef<Path>, pgm: bool) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let mut written = vec![path.to_path_buf(), sidecar(path, ".mask.csv")];
    crate::io::write_bytes(path, prm_csv(prm).as_bytes())?;
    crate::io::write_bytes(&written[1], prm_mask_csv(prm).as_bytes())?;
    if pgm {
        let p = sidecar(path, ".pgm");
        crate::io::write_bytes(&p, &prm_pgm(prm))?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array4};

    fn inv2() -> PhonemeInventory {
        PhonemeInventory::new(["sil", "unk"]).unwrap()
    }

    #[test]
    fn two_frame_example() {
        let a = array![[0.7, 0.3], [0.4, 0.6]];
        let acc = prm_accumulate(a.view(), &FrameLabels::new("u", vec![0, 1]), PRMatrix::new(inv2())).unwrap();
        assert_eq!(acc.mean(), a);
        assert_eq!(prm_csv(&acc), ",sil,unk\nsil,0.7,0.3\nunk,0.4,0.6\n");
    }

    #[test]
    fn single_frame_is_one() {
        let acc = prm_accumulate(array![[1.0]].view(), &FrameLabels::new("u", vec![0]), PRMatrix::new(inv2())).unwrap();
        assert_eq!(acc.mean()[[0, 0]], 1.0);
        assert_eq!(acc.counts()[[1, 1]], 0);
        assert_eq!(prm_mask_csv(&acc), ",sil,unk\nsil,1,0\nunk,0,0\n");
    }

    #[test]
    fn uniform_attention_gives_one_over_t() {
        let t = 5;
        let inv = PhonemeInventory::new(["sil", "unk", "a"]).unwrap();
        let mut acc = PRMatrix::new(inv);
        acc.accumulate(Array2::from_elem((t, t), 0.2).view(), &[0, 2, 2, 0, 0]).unwrap();
        let mean = acc.mean();
        for ((m, n), &c) in acc.counts().indexed_iter() {
            if c > 0 {
                assert!((mean[[m, n]] - 0.2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn row_sums_equal_label_counts() {
        let a = array![[0.2, 0.5, 0.3], [0.1, 0.1, 0.8], [0.6, 0.2, 0.2]];
        let mut acc = PRMatrix::new(inv2());
        acc.accumulate(a.view(), &[1, 0, 1]).unwrap();
        let row_sums = acc.sums().sum_axis(ndarray::Axis(1));
        assert!((row_sums[0] - 1.0).abs() < 1e-12);
        assert!((row_sums[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let mut acc = PRMatrix::new(inv2());
        assert!(matches!(
            acc.accumulate(Array2::from_elem((2, 2), 0.5).view(), &[0]),
            Err(Error::LengthMismatch { attention: 2, labels: 1 })
        ));
        let dump = AttentionDump::new("d", Array4::from_elem((1, 2, 2, 2), 0.5), 1e-6).unwrap();
        let labels = FrameLabels::new("d", vec![0, 1]);
        let utts = [(&dump, &labels)];
        assert!(matches!(
            prm_aggregate(&utts, &inv2(), 1, &HeadSelection::All, 10),
            Err(Error::LayerOutOfRange { layer: 1, layers: 1 })
        ));
        assert!(matches!(
            prm_aggregate(&utts, &inv2(), 0, &HeadSelection::Only(vec![]), 10),
            Err(Error::EmptyHeadSet)
        ));
        assert!(matches!(
            prm_aggregate(&utts, &inv2(), 0, &HeadSelection::Only(vec![2]), 10),
            Err(Error::HeadOutOfRange { head: 2, heads: 2 })
        ));
    }

    #[test]
    fn duplicated_utterance_keeps_mean() {
        let mut data = Array4::<f32>::zeros((1, 1, 3, 3));
        data.slice_mut(ndarray::s![0, 0, .., ..]).assign(&array![[0.5, 0.25, 0.25], [0.0, 1.0, 0.0], [0.125, 0.375, 0.5]]);
        let dump = AttentionDump::new("d", data, 1e-6).unwrap();
        let labels = FrameLabels::new("d", vec![0, 1, 1]);
        let one = prm_aggregate(&[(&dump, &labels)], &inv2(), 0, &HeadSelection::All, 10).unwrap();
        let two = prm_aggregate(&[(&dump, &labels), (&dump, &labels)], &inv2(), 0, &HeadSelection::All, 10).unwrap();
        assert_eq!(one.mean(), two.mean());
        assert_eq!(two.counts(), &(one.counts() * 2));
        let capped = prm_aggregate(&[(&dump, &labels), (&dump, &labels)], &inv2(), 0, &HeadSelection::All, 1).unwrap();
        assert_eq!(capped, one);
    }

    #[test]
    fn self_relation_and_transpose() {
        let a = array![[0.9, 0.1], [0.3, 0.7]];
        let mut acc = PRMatrix::new(PhonemeInventory::new(["sil", "unk", "x"]).unwrap());
        acc.accumulate(a.view(), &[0, 1]).unwrap();
        assert_eq!(acc.self_relation_fraction(), Some(1.0));
        assert_eq!(acc.transposed().mean()[[0, 1]], 0.3);
        let empty = PRMatrix::new(inv2());
        assert_eq!(empty.self_relation_fraction(), None);
    }

    #[test]
    fn pgm_layout() {
        let a = array![[0.7, 0.3], [0.4, 0.6]];
        let mut acc = PRMatrix::new(inv2());
        acc.accumulate(a.view(), &[0, 1]).unwrap();
        let bytes = prm_pgm(&acc);
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[255, 0, 64, 191]);
    }

    #[test]
    fn forty_one_symbols_make_a_42_by_42_grid() {
        let symbols: Vec<String> =
            ["sil", "unk"].into_iter().map(String::from).chain((0..39).map(|i| format!("ph{i}"))).collect();
        let acc = PRMatrix::new(PhonemeInventory::new(symbols).unwrap());
        let csv = prm_csv(&acc);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 42);
        assert!(lines.iter().all(|l| l.split(',').count() == 42));
    }
}
