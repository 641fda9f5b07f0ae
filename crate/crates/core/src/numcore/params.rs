use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RTRW";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Register every parameter as a grad-requiring leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph) -> Bound<'g> {
        Bound {
            vars: self.tensors.iter().map(|t| graph.param(t.clone())).collect(),
        }
    }

    /// Register every parameter as a constant (inference, no gradients).
    pub fn bind_frozen<'g>(&self, graph: &'g Graph) -> Bound<'g> {
        Bound {
            vars: self.tensors.iter().map(|t| graph.constant(t.clone())).collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Snapshot layout, all integers little-endian:
    /// `"RTRW"`, version `u32`, tensor count `u32`, then per tensor:
    /// name length `u32`, UTF-8 name, rank `u32`, extents `u64 x rank`,
    /// `f64` payload.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in self.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = read_u32(r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            let rank = read_u32(r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            let tensor = Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?;
            if store.names.contains(&name) {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
            store.add(name, tensor);
        }
        Ok(store)
    }

    /// Copy values from `other` for every name present in both; shapes must agree.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if let Some(src) = other.by_name(name) {
                if src.shape() != t.shape() {
                    return Err(Error::Format(format!(
                        "{name}: snapshot shape {:?} vs model {:?}",
                        src.shape(),
                        t.shape()
                    )));
                }
                t.data_mut().copy_from_slice(src.data());
                copied += 1;
            }
        }
        Ok(copied)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Parameters of a [`ParamStore`] registered on one graph.
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    /// Bind caller-built variables, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var<'g>>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    /// Gradients in store order; zeros for parameters that got none.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|v| v.grad().map(Tensor::into_data).unwrap_or_else(|| vec![0.0; v.numel()]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[1, 2], vec![1.5, -2.0]).unwrap());
        let mut bytes = Vec::new();
        store.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"RTRW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(bytes[16], b'w');
        assert_eq!(u32::from_le_bytes(bytes[17..21].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[21..29].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[29..37].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(bytes[37..45].try_into().unwrap()), 1.5);
        assert_eq!(bytes.len(), 45 + 8);
    }

    #[test]
    fn bad_magic_rejected() {
        let bytes = b"XXXX\x01\x00\x00\x00\x00\x00\x00\x00".to_vec();
        assert!(matches!(
            ParamStore::read_from(&mut bytes.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn truncated_payload_is_io_error() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::vector(&[1.0, 2.0]));
        let mut bytes = Vec::new();
        store.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(ParamStore::read_from(&mut bytes.as_slice()), Err(Error::Io(_))));
    }
}
