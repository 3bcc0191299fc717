//! Named parameter tensors and the binary checkpoint container.
//!
//! Container layout, all integers and reals little-endian:
//!
//! ```text
//! magic     8 bytes  "MOLGAPCK"
//! version   u32      1
//! config    u64 length + UTF-8 JSON
//! entries   u64 count, then per entry:
//!             u32 name length + UTF-8 name
//!             u32 rank, rank × u64 dims
//!             prod(dims) × f64 data
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::autodiff::{Tape, Tensor, Var};
use crate::binio::{get_f64, get_str, get_u32, get_u64, put_f64, put_str, put_u32, put_u64};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MOLGAPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ParamError {
    #[error("unknown parameter `{0}`")]
    Missing(String),
    #[error("duplicate parameter `{0}`")]
    Duplicate(String),
    #[error("parameter `{name}` has shape {actual:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Ordered collection of named tensors. Insertion order is the canonical order
/// used for serialization, gradient vectors and optimizer state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), ParamError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn tensor(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn tensor_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn total_size(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Checks that names and shapes agree with `shapes`, in order.
    pub fn check_shapes(&self, shapes: &[(String, Vec<usize>)]) -> Result<(), ParamError> {
        for (name, expected) in shapes {
            let t = self.get(name).ok_or_else(|| ParamError::Missing(name.clone()))?;
            if t.shape() != expected.as_slice() {
                return Err(ParamError::Shape {
                    name: name.clone(),
                    expected: expected.clone(),
                    actual: t.shape().to_vec(),
                });
            }
        }
        if shapes.len() != self.len() {
            let known: std::collections::HashSet<&str> =
                shapes.iter().map(|(n, _)| n.as_str()).collect();
            if let Some(extra) = self.names.iter().find(|n| !known.contains(n.as_str())) {
                return Err(ParamError::Corrupt(format!("unexpected parameter `{extra}`")));
            }
        }
        Ok(())
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars<'_> {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        ParamVars { store: self, vars }
    }

    /// Text listing of `name<TAB>shape` lines for diffing checkpoints.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (name, t) in self.iter() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            out.push_str(&format!("{name}\t[{}]\n", dims.join(",")));
        }
        out
    }
}

/// Tape handles for every parameter of a store, addressable by name.
pub struct ParamVars<'a> {
    store: &'a ParameterStore,
    vars: Vec<Var>,
}

impl ParamVars<'_> {
    pub fn get(&self, name: &str) -> Result<Var, ParamError> {
        self.store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    /// Gradients aligned with the store order.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars.iter().map(|v| tape.grad(*v)).collect()
    }
}

pub fn write_container(
    w: &mut impl Write,
    config_json: &str,
    store: &ParameterStore,
) -> Result<(), ParamError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    put_u64(w, config_json.len() as u64)?;
    w.write_all(config_json.as_bytes())?;
    put_u64(w, store.len() as u64)?;
    for (name, t) in store.iter() {
        put_str(w, name)?;
        put_u32(w, t.ndim() as u32)?;
        for &d in t.shape() {
            put_u64(w, d as u64)?;
        }
        for &v in t.data() {
            put_f64(w, v)?;
        }
    }
    Ok(())
}

pub fn read_container(r: &mut impl Read) -> Result<(String, ParameterStore), ParamError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ParamError::Magic);
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(ParamError::Version(version));
    }
    let config_len = get_u64(r)? as usize;
    let mut buf = vec![0u8; config_len];
    r.read_exact(&mut buf)?;
    let config = String::from_utf8(buf).map_err(|e| ParamError::Corrupt(e.to_string()))?;
    let count = get_u64(r)?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name = get_str(r)?;
        let rank = get_u32(r)? as usize;
        let shape = (0..rank)
            .map(|_| get_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| get_f64(r)).collect::<Result<Vec<_>, _>>()?;
        let t = Tensor::from_vec(&shape, data).map_err(|e| ParamError::Corrupt(e.to_string()))?;
        store.insert(name, t)?;
    }
    Ok((config, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn container_roundtrip(
            values in proptest::collection::vec(-1e6f64..1e6, 1..40),
            cols in 1usize..5,
        ) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let mut store = ParameterStore::new();
            store.insert("w", Tensor::from_vec(&[rows, cols], values[..rows * cols].to_vec()).unwrap()).unwrap();
            store.insert("s", Tensor::scalar(values[0])).unwrap();
            let mut buf = Vec::new();
            write_container(&mut buf, "{\"k\":1}", &store).unwrap();
            let (cfg, back) = read_container(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(cfg, "{\"k\":1}");
            prop_assert_eq!(back, store);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"NOTACKPT\x01\x00\x00\x00".to_vec();
        assert!(matches!(read_container(&mut bytes.as_slice()), Err(ParamError::Magic)));
    }

    #[test]
    fn manifest_lists_names_and_shapes() {
        let mut store = ParameterStore::new();
        store.insert("a.w", Tensor::zeros(&[2, 3])).unwrap();
        store.insert("a.b", Tensor::zeros(&[3])).unwrap();
        assert_eq!(store.manifest(), "a.w\t[2,3]\na.b\t[3]\n");
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParameterStore::new();
        store.insert("x", Tensor::zeros(&[1])).unwrap();
        assert!(matches!(
            store.insert("x", Tensor::zeros(&[1])),
            Err(ParamError::Duplicate(_))
        ));
    }
}
