//! Named trainable parameters, deterministic initialisation, and the binary checkpoint format.
//!
//! Checkpoint layout (little-endian): `"CAIMP"`, version `u32`, count `u32`, then per
//! parameter: name length `u16`, UTF-8 name, rank `u8`, each dim `u32`, `f32` payload.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{CaimError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"CAIMP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
    lookup: HashMap<String, usize>,
    rng: ChaCha8Rng,
    seed: u64,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            lookup: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, value: Tensor<F>) -> Result<ParamId> {
        if self.lookup.contains_key(name) {
            return Err(CaimError::Config(format!("parameter {name:?} registered twice")));
        }
        self.lookup.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    /// `U(−bound, bound)` entries drawn from the store's own stream.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| F::from_f64_lossy(rng.random_range(-bound..=bound)));
        self.add(name, t)
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, F::from_f64_lossy(v)))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Same names and shapes, values converted to another precision.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            lookup: self.lookup.clone(),
            rng: ChaCha8Rng::seed_from_u64(self.seed),
            seed: self.seed,
        }
    }

    /// Places every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<F>) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.param(v.clone())).collect() }
    }

    /// Places every parameter on the tape as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape<F>) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.constant(v.clone())).collect() }
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.values.len() as u32).to_le_bytes())?;
        for (name, t) in self.iter() {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len()).map_err(|_| CaimError::Format(format!("name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[t.rank() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_f32_bits().to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R, seed: u64) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = ByteCursor { bytes: &bytes, pos: 0 };
        if cur.take(5)? != CHECKPOINT_MAGIC {
            return Err(CaimError::Format("bad checkpoint magic".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CaimError::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = cur.u32()? as usize;
        let mut store = ParamStore::new(seed);
        for _ in 0..count {
            let len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| CaimError::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = cur.take(1)?[0] as usize;
            let shape: Vec<usize> = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let numel: usize = shape.iter().product();
            let payload = cur.take(numel * 4)?;
            let data =
                payload.chunks_exact(4).map(|c| F::from_f32_bits(u32::from_le_bytes(c.try_into().unwrap()))).collect();
            store.add(&name, Tensor::from_vec(&shape, data)?)?;
        }
        if cur.pos != bytes.len() {
            return Err(CaimError::Format("trailing bytes after checkpoint".into()));
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_checkpoint(std::fs::File::open(path)?, 0)
    }

    /// Copies values from `other` for every name present in both with equal shapes.
    pub fn load_values_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        if other.len() != self.len() {
            return Err(CaimError::Format(format!("checkpoint has {} parameters, model has {}", other.len(), self.len())));
        }
        let mut ids = Vec::with_capacity(other.len());
        for (name, t) in other.iter() {
            let id = self.id(name).ok_or_else(|| CaimError::Format(format!("unknown parameter {name:?}")))?;
            if self.values[id.0].shape() != t.shape() {
                return Err(CaimError::Format(format!(
                    "parameter {name:?} has shape {:?}, checkpoint has {:?}",
                    self.values[id.0].shape(),
                    t.shape()
                )));
            }
            ids.push(id);
        }
        for (id, (_, t)) in ids.into_iter().zip(other.iter()) {
            self.values[id.0] = t.clone();
        }
        Ok(())
    }
}

pub(crate) struct ByteCursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CaimError::Format(format!("truncated: need {} bytes at offset {}, have {}", n, self.pos, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps handles already on a tape, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new(1);
        s.add_const("a", &[2], 0.0).unwrap();
        assert!(s.add_const("a", &[2], 0.0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut s = ParamStore::<f32>::new(9);
        s.add_uniform("enc.w", &[4, 3, 3, 3], 0.5).unwrap();
        s.add_const("enc.b", &[4], 0.25).unwrap();
        s.add_uniform("fc", &[2, 8], 1.0).unwrap();
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..5], b"CAIMP");
        let back = ParamStore::<f32>::read_checkpoint(&buf[..], 0).unwrap();
        assert_eq!(back.len(), 3);
        for ((n1, t1), (n2, t2)) in s.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }
        assert!(ParamStore::<f32>::read_checkpoint(&buf[..buf.len() - 1], 0).is_err());
    }

    #[test]
    fn initialisation_is_seeded() {
        let mk = |seed| {
            let mut s = ParamStore::<f64>::new(seed);
            s.add_uniform("w", &[16], 0.1).unwrap();
            s.get(ParamId(0)).clone()
        };
        assert_eq!(mk(3), mk(3));
        assert_ne!(mk(3), mk(4));
        assert!(mk(3).data().iter().all(|v| v.abs() <= 0.1));
    }
}
