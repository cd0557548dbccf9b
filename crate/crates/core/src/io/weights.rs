use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};

use super::binary::{dim_u32, put_f32s, put_u32, ByteReader};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"WGT1";

/// Named float32 tensors in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    tensors: IndexMap<String, ArrayD<f32>>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f32>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f32>> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<ArrayD<f32>> {
        self.tensors.shift_remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Looks up `name` and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&ArrayD<f32>> {
        let t = self.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if t.shape() != shape {
            return Err(Error::ShapeMismatchWithConfig {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t)
    }
}

impl FromIterator<(String, ArrayD<f32>)> for TensorStore {
    fn from_iter<I: IntoIterator<Item = (String, ArrayD<f32>)>>(iter: I) -> Self {
        Self { tensors: iter.into_iter().collect() }
    }
}

pub fn encode_tensors(store: &TensorStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, dim_u32("tensor count", store.len()));
    for (name, t) in store.iter() {
        put_u32(&mut out, dim_u32("name length", name.len()));
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, dim_u32("rank", t.ndim()));
        for &d in t.shape() {
            put_u32(&mut out, dim_u32("dim", d));
        }
        put_f32s(&mut out, t.iter());
    }
    out
}

pub fn write_tensors(store: &TensorStore, path: impl AsRef<Path>) -> Result<()> {
    super::write_bytes(path.as_ref(), &encode_tensors(store))
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<TensorStore> {
    decode(&super::read_bytes(path.as_ref())?)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<TensorStore> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    let count = r.u32()? as usize;
    let mut store = TensorStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let offset = r.offset();
        let name = std::str::from_utf8(r.bytes(name_len)?)
            .map_err(|_| Error::BadTensorName { offset })?
            .to_string();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(
            Error::TruncatedFile { offset: r.offset(), needed: usize::MAX, available: 0 },
        )?;
        let values = r.f32s(numel)?;
        let tensor = ArrayD::from_shape_vec(IxDyn(&dims), values).expect("length checked");
        store.insert(name, tensor);
    }
    r.finish()?;
    Ok(store)
}
