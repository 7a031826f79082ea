//! Named parameter tensors and the checkpoint file format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic   "PHGT"
//! u32     format version (1)
//! u32     tensor count
//! repeated:
//!   u32   name length, then UTF-8 name bytes
//!   u32   rank, then one u64 per dimension
//!   f64   payload, row-major, product(shape) values
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PHGT";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param { name: name.into(), value, grad: None });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Puts every parameter on the tape as a gradient-tracking leaf.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone(), true)).collect()
    }

    /// Copies gradients from the tape into the grad slots; parameters the loss
    /// never reached get an all-zero gradient.
    pub fn collect_grads(&mut self, tape: &mut Tape, vars: &[Var]) {
        for (p, v) in self.params.iter_mut().zip(vars) {
            p.grad = Some(tape.take_grad(*v).unwrap_or_else(|| vec![0.0; p.value.len()]));
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Overwrites values from `other`, matching by position; shapes must agree.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {}", self.len(), other.len())));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` {:?} does not match `{}` {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            store.add(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(fs::read(path)?.as_slice())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_bytes_are_bit_exact() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_rows(1, 2, vec![1.5, -0.0]));
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let mut expect = b"PHGT".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(b"w");
        expect.extend(2u32.to_le_bytes());
        expect.extend(1u64.to_le_bytes());
        expect.extend(2u64.to_le_bytes());
        expect.extend(1.5f64.to_le_bytes());
        expect.extend((-0.0f64).to_le_bytes());
        assert_eq!(buf, expect);

        let back = ParamStore::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.get(ParamId(0)).value, s.get(ParamId(0)).value);
        assert_eq!(back.get(ParamId(0)).name, "w");
    }

    #[test]
    fn truncated_and_foreign_files_are_rejected() {
        assert!(ParamStore::read_from(&b"NOPE"[..]).is_err());
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(2, 2));
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(ParamStore::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn copy_values_checks_shapes() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::zeros(2, 2));
        let mut b = ParamStore::new();
        b.add("w", Tensor::zeros(2, 3));
        assert!(a.copy_values_from(&b).is_err());
    }
}
