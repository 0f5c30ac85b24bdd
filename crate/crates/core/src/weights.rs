//! `KVLWGT1f` weight container: a typed header plus an ordered list of f32 tensors.
//!
//! Layout (little-endian): magic, `version: u32`, `kind: u32`,
//! `n_meta: u32`, `meta: [u32; n_meta]`, `n_tensors: u32`, then per tensor
//! `rank: u32`, `dims: [u32; rank]`, `data: [f32; prod(dims)]` row-major.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, IxDyn};

use crate::error::{KvLockError, Result};
use crate::io::{hash64, read_file, write_file, ByteReader, ByteWriter};
use crate::scalar::Real;

pub const WEIGHTS_MAGIC: &[u8; 8] = b"KVLWGT1f";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum ModelKind {
    DitLite = 1,
    TinyMlp = 2,
}

impl ModelKind {
    fn from_u32(v: u32) -> Option<Self> {
        match v {
            1 => Some(ModelKind::DitLite),
            2 => Some(ModelKind::TinyMlp),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub kind: ModelKind,
    pub meta: Vec<u32>,
    pub tensors: Vec<ArrayD<f32>>,
}

impl WeightFile {
    pub fn new(kind: ModelKind, meta: Vec<u32>) -> Self {
        Self {
            kind,
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push_matrix<T: Real>(&mut self, m: &Array2<T>) {
        self.tensors.push(m.mapv(|v| v.to_disk()).into_dyn());
    }

    pub fn push_vector<T: Real>(&mut self, v: &Array1<T>) {
        self.tensors.push(v.mapv(|x| x.to_disk()).into_dyn());
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(WEIGHTS_MAGIC)
            .u32(WEIGHTS_VERSION)
            .u32(self.kind as u32)
            .u32(self.meta.len() as u32);
        for &m in &self.meta {
            w.u32(m);
        }
        w.u32(self.tensors.len() as u32);
        for t in &self.tensors {
            w.u32(t.ndim() as u32);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            for &v in t.iter() {
                w.f32(v);
            }
        }
        w.finish()
    }

    pub fn hash(&self) -> u64 {
        hash64(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path, "weights")?;
        let mut r = ByteReader::new(&bytes, path);
        r.magic(WEIGHTS_MAGIC)?;
        let version = r.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(KvLockError::Compatibility(format!(
                "weights version {version}, expected {WEIGHTS_VERSION}"
            )));
        }
        let kind = ModelKind::from_u32(r.u32()?)
            .ok_or_else(|| KvLockError::corrupt(path, "unknown model kind"))?;
        let n_meta = r.u32()? as usize;
        let meta = (0..n_meta).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = dims.iter().product();
            let data = r.f32s(len)?;
            tensors.push(ArrayD::from_shape_vec(IxDyn(&dims), data).expect("length from dims"));
        }
        r.finish()?;
        Ok(Self {
            kind,
            meta,
            tensors,
        })
    }
}

/// Sequential reader over the tensors of a [`WeightFile`].
pub struct TensorCursor<'a> {
    tensors: std::slice::Iter<'a, ArrayD<f32>>,
}

impl<'a> TensorCursor<'a> {
    pub fn new(file: &'a WeightFile) -> Self {
        Self {
            tensors: file.tensors.iter(),
        }
    }

    fn next(&mut self) -> Result<&'a ArrayD<f32>> {
        self.tensors
            .next()
            .ok_or_else(|| KvLockError::Integrity("weight file has too few tensors".into()))
    }

    pub fn matrix<T: Real>(&mut self, rows: usize, cols: usize) -> Result<Array2<T>> {
        let t = self.next()?;
        if t.shape() != [rows, cols] {
            return Err(KvLockError::Integrity(format!(
                "expected {rows}x{cols} tensor, found {:?}",
                t.shape()
            )));
        }
        Ok(t.view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("rank checked")
            .mapv(T::from_disk))
    }

    pub fn vector<T: Real>(&mut self, len: usize) -> Result<Array1<T>> {
        let t = self.next()?;
        if t.shape() != [len] {
            return Err(KvLockError::Integrity(format!(
                "expected vector of {len}, found {:?}",
                t.shape()
            )));
        }
        Ok(t.view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("rank checked")
            .mapv(T::from_disk))
    }

    pub fn finish(mut self) -> Result<()> {
        if self.tensors.next().is_some() {
            return Err(KvLockError::Integrity("weight file has extra tensors".into()));
        }
        Ok(())
    }
}
