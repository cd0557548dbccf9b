use std::path::Path;

use ndarray::{Array2, Array4, ArrayView2, Axis};

use super::binary::{dim_u32, put_f32s, put_u32, ByteReader};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ATT1";

/// Row-sum tolerance applied to externally produced float32 dumps.
pub const INGEST_ROW_TOLERANCE: f64 = 1e-4;

/// Attention probabilities of every head of a model for one utterance.
///
/// `data[[layer, head, q, k]]` is the weight query frame `q` puts on key
/// frame `k`. Each `(layer, head, q)` row is a probability distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    pub utterance_id: String,
    data: Array4<f32>,
}

impl AttentionDump {
    /// Wraps `data` after checking the shape, sign, and row sums against `tolerance`.
    pub fn new(utterance_id: impl Into<String>, data: Array4<f32>, tolerance: f64) -> Result<Self> {
        let dump = Self { utterance_id: utterance_id.into(), data };
        dump.validate(tolerance)?;
        Ok(dump)
    }

    /// Builds a dump from per-head `T x T` matrices laid out `[layer][head]`.
    pub fn from_heads(
        utterance_id: impl Into<String>,
        heads: &[Vec<Array2<f64>>],
        tolerance: f64,
    ) -> Result<Self> {
        let layers = heads.len();
        let per_layer = heads.first().map_or(0, Vec::len);
        let frames = heads.first().and_then(|l| l.first()).map_or(0, |m| m.nrows());
        let mut data = Array4::<f32>::zeros((layers, per_layer, frames, frames));
        for (l, layer) in heads.iter().enumerate() {
            if layer.len() != per_layer {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l} has {} heads, layer 0 has {per_layer}",
                    layer.len()
                )));
            }
            for (h, m) in layer.iter().enumerate() {
                if m.dim() != (frames, frames) {
                    return Err(Error::ShapeMismatch(format!(
                        "head ({l}, {h}) is {:?}, expected {frames}x{frames}",
                        m.dim()
                    )));
                }
                data.slice_mut(ndarray::s![l, h, .., ..]).assign(&m.mapv(|v| v as f32));
            }
        }
        Self::new(utterance_id, data, tolerance)
    }

    pub fn num_layers(&self) -> usize {
        self.data.dim().0
    }

    pub fn num_heads(&self) -> usize {
        self.data.dim().1
    }

    pub fn num_frames(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn head(&self, layer: usize, head: usize) -> ArrayView2<'_, f32> {
        self.data.index_axis(Axis(0), layer).index_axis_move(Axis(0), head)
    }

    /// One head's matrix widened to f64 for analysis.
    pub fn head_f64(&self, layer: usize, head: usize) -> Array2<f64> {
        self.head(layer, head).mapv(f64::from)
    }

    pub fn validate(&self, tolerance: f64) -> Result<()> {
        let (layers, heads, rows, cols) = self.data.dim();
        for (name, v) in [("layers", layers), ("heads", heads), ("frames", rows)] {
            if v == 0 {
                return Err(Error::DimensionZero { name });
            }
        }
        if rows != cols {
            return Err(Error::NotSquare { rows, cols });
        }
        let mut worst: Option<(usize, usize, usize, f64)> = None;
        for ((l, h), head) in self
            .data
            .outer_iter()
            .enumerate()
            .flat_map(|(l, layer)| layer.into_outer_iter().enumerate().map(move |(h, m)| ((l, h), m)))
        {
            for (q, row) in head.outer_iter().enumerate() {
                let mut sum = 0.0f64;
                for (k, &v) in row.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            what: format!("attention (layer {l}, head {h}, query {q})"),
                            index: k,
                        });
                    }
                    if v < 0.0 {
                        return Err(Error::NegativeAttention {
                            layer: l,
                            head: h,
                            query: q,
                            key: k,
                            value: f64::from(v),
                        });
                    }
                    sum += f64::from(v);
                }
                let dev = (sum - 1.0).abs();
                if dev > tolerance && worst.map_or(true, |w| dev > (w.3 - 1.0).abs()) {
                    worst = Some((l, h, q, sum));
                }
            }
        }
        match worst {
            Some((layer, head, query, sum)) => {
                Err(Error::RowNotStochastic { layer, head, query, sum, tolerance })
            }
            None => Ok(()),
        }
    }
}

pub fn encode_attention_dump(dump: &AttentionDump) -> Vec<u8> {
    let (l, h, t, _) = dump.data.dim();
    let mut out = Vec::with_capacity(16 + 4 * dump.data.len());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, dim_u32("layers", l));
    put_u32(&mut out, dim_u32("heads", h));
    put_u32(&mut out, dim_u32("frames", t));
    put_f32s(&mut out, dump.data.iter());
    out
}

pub fn write_attention_dump(dump: &AttentionDump, path: impl AsRef<Path>) -> Result<()> {
    super::write_bytes(path.as_ref(), &encode_attention_dump(dump))
}

/// Reads and validates an `ATT1` file. The utterance id is taken from the file stem.
pub fn read_attention_dump(path: impl AsRef<Path>) -> Result<AttentionDump> {
    let path = path.as_ref();
    let bytes = super::read_bytes(path)?;
    decode(&bytes, super::stem_id(path))
}

pub(crate) fn decode(bytes: &[u8], utterance_id: String) -> Result<AttentionDump> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    let layers = r.u32()? as usize;
    let heads = r.u32()? as usize;
    let frames = r.u32()? as usize;
    for (name, v) in [("layers", layers), ("heads", heads), ("frames", frames)] {
        if v == 0 {
            return Err(Error::DimensionZero { name });
        }
    }
    let count = [layers, heads, frames, frames]
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(Error::TruncatedFile { offset: r.offset(), needed: usize::MAX, available: 0 })?;
    let values = r.f32s(count)?;
    r.finish()?;
    let data = Array4::from_shape_vec((layers, heads, frames, frames), values)
        .expect("length checked above");
    AttentionDump::new(utterance_id, data, INGEST_ROW_TOLERANCE)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(l: usize, h: usize, t: usize) -> AttentionDump {
        let data = Array4::from_elem((l, h, t, t), 1.0 / t as f32);
        AttentionDump::new("u", data, INGEST_ROW_TOLERANCE).unwrap()
    }

    #[test]
    fn reads_uniform_two_frame_dump() {
        let mut bytes = b"ATT1".to_vec();
        for d in [1u32, 1, 2] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        for _ in 0..4 {
            bytes.extend_from_slice(&0.5f32.to_le_bytes());
        }
        let dump = decode(&bytes, "x".into()).unwrap();
        assert_eq!((dump.num_layers(), dump.num_heads(), dump.num_frames()), (1, 1, 2));
        assert!(dump.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rejects_row_summing_to_point_nine() {
        let mut bytes = b"ATT1".to_vec();
        for d in [1u32, 1, 2] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        for v in [0.5f32, 0.5, 0.5, 0.4] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        match decode(&bytes, "x".into()) {
            Err(Error::RowNotStochastic { query, sum, .. }) => {
                assert_eq!(query, 1);
                assert!((sum - 0.9).abs() < 1e-6);
            }
            other => panic!("expected RowNotStochastic, got {other:?}"),
        }
    }

    #[test]
    fn reports_worst_row() {
        let mut data = Array4::from_elem((1, 1, 3, 3), 1.0f32 / 3.0);
        data[[0, 0, 0, 0]] = 0.5; // sum ~1.17
        data[[0, 0, 2, 0]] = 0.9; // sum ~1.57
        match AttentionDump::new("w", data, INGEST_ROW_TOLERANCE) {
            Err(Error::RowNotStochastic { query, .. }) => assert_eq!(query, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = encode_attention_dump(&uniform(1, 2, 3));
        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(decode(truncated, "t".into()), Err(Error::TruncatedFile { .. })));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, "t".into()), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn zero_dimension_rejected() {
        let mut bytes = b"ATT1".to_vec();
        for d in [1u32, 0, 2] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        assert!(matches!(
            decode(&bytes, "z".into()),
            Err(Error::DimensionZero { name: "heads" })
        ));
    }

    #[test]
    fn file_size_is_header_plus_payload() {
        // magic + three u32 dims, then L*H*T*T float32 values
        let dump = uniform(3, 12, 50);
        assert_eq!(encode_attention_dump(&dump).len(), 4 + 4 * 3 + 4 * (3 * 12 * 50 * 50));
    }

    #[test]
    fn empty_path_is_io_failure() {
        let err = write_attention_dump(&uniform(1, 1, 1), "").unwrap_err();
        assert!(err.is_io());
    }
}
