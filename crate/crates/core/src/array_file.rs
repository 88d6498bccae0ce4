//! Named-array container files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "DISANAC1"
//! count     u32      number of arrays
//! repeated `count` times:
//!   name_len u16, name (UTF-8, name_len bytes)
//!   dtype    u8      0 = f64, 1 = i64
//!   ndim     u8
//!   dims     u64 × ndim
//!   payload  row-major elements, 8 bytes each
//! ```
//!
//! Arrays are written in name order, so equal contents give equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{DisaError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DISANAC1";

#[derive(Debug, Clone, PartialEq)]
pub enum Array {
    F64(Tensor),
    I64 { shape: Vec<usize>, data: Vec<i64> },
}

impl Array {
    pub fn shape(&self) -> &[usize] {
        match self {
            Array::F64(t) => t.shape(),
            Array::I64 { shape, .. } => shape,
        }
    }

    pub fn labels(shape: &[usize], data: &[usize]) -> Array {
        Array::I64 { shape: shape.to_vec(), data: data.iter().map(|&v| v as i64).collect() }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedArrays {
    arrays: BTreeMap<String, Array>,
}

impl NamedArrays {
    pub fn new() -> Self {
        NamedArrays::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: Array) {
        self.arrays.insert(name.into(), array);
    }

    pub fn insert_f64(&mut self, name: impl Into<String>, t: Tensor) {
        self.insert(name, Array::F64(t));
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.arrays.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.arrays.iter()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.arrays.get(name) {
            Some(Array::F64(t)) => Ok(t),
            Some(_) => Err(DisaError::Format(format!("array `{name}` is not f64"))),
            None => Err(DisaError::Format(format!("missing array `{name}`"))),
        }
    }

    /// Integer array as non-negative labels.
    pub fn labels(&self, name: &str) -> Result<(Vec<usize>, Vec<usize>)> {
        match self.arrays.get(name) {
            Some(Array::I64 { shape, data }) => {
                let labels = data
                    .iter()
                    .map(|&v| usize::try_from(v).map_err(|_| DisaError::Format(format!("negative label {v} in `{name}`"))))
                    .collect::<Result<Vec<_>>>()?;
                Ok((shape.clone(), labels))
            }
            Some(_) => Err(DisaError::Format(format!("array `{name}` is not i64"))),
            None => Err(DisaError::Format(format!("missing array `{name}`"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, arr) in &self.arrays {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (dtype, shape) = match arr {
                Array::F64(t) => (0u8, t.shape()),
                Array::I64 { shape, .. } => (1u8, shape.as_slice()),
            };
            out.push(dtype);
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match arr {
                Array::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Array::I64 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(DisaError::Format("bad magic, not a named-array container".into()));
        }
        let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| DisaError::Format("array name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(8).ok_or_else(|| DisaError::Format("array too large".into()))?)?;
            let arr = match dtype {
                0 => Array::F64(Tensor::new(&shape, payload.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())?),
                1 => Array::I64 { shape, data: payload.chunks(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect() },
                d => return Err(DisaError::Format(format!("unknown dtype code {d} for `{name}`"))),
            };
            arrays.insert(name, arr);
        }
        if r.pos != bytes.len() {
            return Err(DisaError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(NamedArrays { arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| DisaError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| DisaError::io(path, e))?;
        NamedArrays::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| DisaError::Format("truncated container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_identical(vals in proptest::collection::vec(any::<f64>(), 1..40), labels in proptest::collection::vec(0usize..1000, 0..20)) {
            let mut a = NamedArrays::new();
            a.insert_f64("x.weights", Tensor::new(&[vals.len()], vals.clone()).unwrap());
            a.insert("mask", Array::labels(&[labels.len()], &labels));
            let bytes = a.to_bytes();
            let b = NamedArrays::from_bytes(&bytes).unwrap();
            let back = b.tensor("x.weights").unwrap();
            for (x, y) in back.data().iter().zip(&vals) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
            prop_assert_eq!(b.labels("mask").unwrap().1, labels);
            prop_assert_eq!(b.to_bytes(), bytes);
        }
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let mut a = NamedArrays::new();
        a.insert_f64("t", Tensor::full(&[2, 2], 1.5));
        let bytes = a.to_bytes();
        assert!(NamedArrays::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(NamedArrays::from_bytes(&bad).is_err());
    }
}
