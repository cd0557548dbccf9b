use std::path::Path;

use ndarray::Array2;

use super::binary::{dim_u32, put_f32s, put_u32, ByteReader};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FEA1";

/// Per-frame input features, `frames x feature_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub utterance_id: String,
    data: Array2<f32>,
}

impl FeatureMatrix {
    pub fn new(utterance_id: impl Into<String>, data: Array2<f32>) -> Result<Self> {
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "feature matrix".into(), index });
        }
        Ok(Self { utterance_id: utterance_id.into(), data })
    }

    pub fn num_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }
}

pub fn encode_features(features: &FeatureMatrix) -> Vec<u8> {
    let (t, f) = features.data.dim();
    let mut out = Vec::with_capacity(12 + 4 * t * f);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, dim_u32("frames", t));
    put_u32(&mut out, dim_u32("feature_dim", f));
    put_f32s(&mut out, features.data.iter());
    out
}

pub fn write_features(features: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    super::write_bytes(path.as_ref(), &encode_features(features))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = super::read_bytes(path)?;
    let mut r = ByteReader::new(&bytes);
    r.magic(MAGIC)?;
    let t = r.u32()? as usize;
    let f = r.u32()? as usize;
    let values = r.f32s(t.checked_mul(f).ok_or(Error::DimensionZero { name: "feature_dim" })?)?;
    r.finish()?;
    let data = Array2::from_shape_vec((t, f), values).expect("length checked");
    FeatureMatrix::new(super::stem_id(path), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nan() {
        let data = Array2::from_shape_vec((1, 2), vec![0.0, f32::NAN]).unwrap();
        assert!(matches!(FeatureMatrix::new("n", data), Err(Error::NonFinite { index: 1, .. })));
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fea");
        let data = Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f32 * 0.25 - 1.0);
        let fm = FeatureMatrix::new("a", data).unwrap();
        write_features(&fm, &path).unwrap();
        assert_eq!(read_features(&path).unwrap(), fm);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 12 + 4 * 6);
    }
}
