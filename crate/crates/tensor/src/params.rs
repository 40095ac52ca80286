//! Named parameter storage, tape bindings, and the checkpoint container.
//!
//! # Checkpoint layout
//!
//! All integers and floats are little-endian.
//!
//! | field        | type                  |
//! |--------------|-----------------------|
//! | magic        | `b"MVFUSECK"`         |
//! | version      | `u32` (currently 1)   |
//! | entry count  | `u32`                 |
//!
//! followed by `count` entries of
//!
//! | field        | type                       |
//! |--------------|----------------------------|
//! | name length  | `u32`                      |
//! | name         | UTF-8 bytes                |
//! | rank         | `u32`                      |
//! | dims         | `u64` x rank               |
//! | values       | `f64` x product(dims)      |

use crate::error::{Result, TensorError};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MVFUSECK";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// An ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique within the store.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Places every parameter on `tape`; gradients are tracked iff `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bindings {
        let vars = self.params.iter().map(|p| tape.leaf(p.value.clone(), trainable)).collect();
        Bindings { vars }
    }

    /// Adds the gradients that reached `bindings` into the stored `grad`s.
    pub fn accumulate_grads(&mut self, bindings: &Bindings, grads: &Gradients) {
        for (p, &v) in self.params.iter_mut().zip(&bindings.vars) {
            if let Some(g) = grads.get(v) {
                for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_sq_norm(&self) -> f64 {
        self.params.iter().flat_map(|p| p.grad.data()).map(|g| g * g).sum()
    }

    pub fn scale_grads(&mut self, k: f64) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= k);
        }
    }

    /// `self ← (1 - rate)·self + rate·online`, parameter by parameter.
    pub fn ema_update(&mut self, online: &ParamStore, rate: f64) {
        assert_eq!(self.params.len(), online.params.len());
        for (t, o) in self.params.iter_mut().zip(&online.params) {
            for (a, b) in t.value.data_mut().iter_mut().zip(o.value.data()) {
                *a = (1.0 - rate) * *a + rate * b;
            }
        }
    }

    /// Writes every value into `ckpt` under `prefix`.
    pub fn export(&self, prefix: &str, ckpt: &mut Checkpoint) {
        for p in &self.params {
            ckpt.insert(format!("{prefix}{}", p.name), p.value.clone());
        }
    }

    /// Restores values written by [`ParamStore::export`]; shapes must match.
    pub fn import(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
        for p in &mut self.params {
            let key = format!("{prefix}{}", p.name);
            let t = ckpt.get(&key).ok_or_else(|| TensorError::Checkpoint(format!("missing entry {key}")))?;
            if t.shape() != p.value.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "{key}: stored shape {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Tape handles for the parameters of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    /// Wraps externally created vars, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl std::ops::Index<ParamId> for Bindings {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// A flat table of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let io = |e: std::io::Error| TensorError::Checkpoint(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(TensorError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r).map_err(io)?;
        if version != VERSION {
            return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r).map_err(io)?;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let len = read_u32(&mut r).map_err(io)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(io)?;
            let name =
                String::from_utf8(name).map_err(|_| TensorError::Checkpoint("entry name is not UTF-8".into()))?;
            let rank = read_u32(&mut r).map_err(io)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(io)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(io)?;
                data.push(f64::from_le_bytes(b));
            }
            ckpt.insert(name, Tensor::new(shape, data)?);
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path.as_ref()).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        self.write_to(std::io::BufWriter::new(file)).map_err(|e| TensorError::Checkpoint(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref()).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_preserves_bits() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new([2, 3], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, 0.0, 1e300]).unwrap());
        store.add("b", Tensor::scalar(0.1));
        let mut ckpt = Checkpoint::new();
        store.export("model/", &mut ckpt);
        let mut bytes = Vec::new();
        ckpt.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, ckpt);

        let mut fresh = ParamStore::new();
        fresh.add("w", Tensor::zeros([2, 3]));
        fresh.add("b", Tensor::scalar(0.0));
        fresh.import("model/", &back).unwrap();
        assert_eq!(fresh.value(ParamId(0)), store.value(ParamId(0)));
    }

    #[test]
    fn import_rejects_shape_change() {
        let mut ckpt = Checkpoint::new();
        ckpt.insert("w", Tensor::zeros([3]));
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros([4]));
        assert!(store.import("", &ckpt).is_err());
    }

    #[test]
    fn truncated_file_is_an_error() {
        let mut ckpt = Checkpoint::new();
        ckpt.insert("w", Tensor::ones([4]));
        let mut bytes = Vec::new();
        ckpt.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::read_from(bytes.as_slice()).is_err());
    }
}
