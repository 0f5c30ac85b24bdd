//! Background KV memory bank: per-step, per-layer keys and values cached from
//! the noised source trajectory.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::attention::KvEntry;
use crate::error::{KvLockError, Result};
use crate::io::{read_file, write_file, ByteReader, ByteWriter};
use crate::model::DitLite;
use crate::scalar::Real;
use crate::scheduler::NoiseSchedule;
use crate::tensor::Latent4D;

pub const BANK_MAGIC: &[u8; 8] = b"KVLBANK1";
pub const BANK_VERSION: u32 = 1;
const HEADER_BYTES: usize = 8 + 4 * 5 + 8 * 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BankMeta {
    pub steps: usize,
    pub layers: usize,
    pub tokens: usize,
    pub dim: usize,
    pub model_hash: u64,
    pub schedule_hash: u64,
}

/// Entries are stored step-major, layer-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct KvBank<T> {
    meta: BankMeta,
    entries: Vec<KvEntry<T>>,
}

impl<T: Real> KvBank<T> {
    pub fn new(meta: BankMeta, entries: Vec<KvEntry<T>>) -> Result<Self> {
        if entries.len() != meta.steps * meta.layers {
            return Err(KvLockError::Integrity(format!(
                "bank has {} entries, expected {}×{}",
                entries.len(),
                meta.steps,
                meta.layers
            )));
        }
        for (i, e) in entries.iter().enumerate() {
            let want = (meta.tokens, meta.dim);
            if e.keys.dim() != want || e.values.dim() != want {
                return Err(KvLockError::Integrity(format!(
                    "entry {i} has shape {:?}/{:?}, expected {want:?}",
                    e.keys.dim(),
                    e.values.dim()
                )));
            }
            if !e.is_finite() {
                return Err(KvLockError::Numeric(format!(
                    "non-finite value in bank entry (step {}, layer {})",
                    i / meta.layers.max(1),
                    i % meta.layers.max(1)
                )));
            }
        }
        Ok(Self { meta, entries })
    }

    pub fn meta(&self) -> &BankMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, step: usize, layer: usize) -> Option<&KvEntry<T>> {
        if step >= self.meta.steps || layer >= self.meta.layers {
            return None;
        }
        self.entries.get(step * self.meta.layers + layer)
    }

    /// All layers' entries for one sampling step.
    pub fn step_entries(&self, step: usize) -> Option<&[KvEntry<T>]> {
        let l = self.meta.layers;
        (step < self.meta.steps).then(|| &self.entries[step * l..(step + 1) * l])
    }

    pub fn entries(&self) -> &[KvEntry<T>] {
        &self.entries
    }

    /// Fails unless the bank was built by this model under this schedule.
    pub fn check_compatible(&self, model_hash: u64, schedule_hash: u64) -> Result<()> {
        if self.meta.model_hash != model_hash {
            return Err(KvLockError::Compatibility(format!(
                "bank model hash {:016x} does not match run model {:016x}",
                self.meta.model_hash, model_hash
            )));
        }
        if self.meta.schedule_hash != schedule_hash {
            return Err(KvLockError::Compatibility(format!(
                "bank schedule hash {:016x} does not match run schedule {:016x}",
                self.meta.schedule_hash, schedule_hash
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.meta;
        let payload = self.entries.len() * 2 * m.tokens * m.dim * 4;
        let mut w = ByteWriter::with_capacity(HEADER_BYTES + payload);
        w.bytes(BANK_MAGIC)
            .u32(BANK_VERSION)
            .u32(m.steps as u32)
            .u32(m.layers as u32)
            .u32(m.tokens as u32)
            .u32(m.dim as u32)
            .u64(m.model_hash)
            .u64(m.schedule_hash);
        for e in &self.entries {
            for v in e.keys.iter().chain(e.values.iter()) {
                w.f32(v.to_disk());
            }
        }
        w.finish()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    /// Reads a bank without checking its hashes against a run.
    pub fn load_unchecked(path: &Path) -> Result<Self> {
        let buf = read_file(path, "bank")?;
        let mut r = ByteReader::new(&buf, path);
        r.magic(BANK_MAGIC)?;
        let version = r.u32()?;
        if version != BANK_VERSION {
            return Err(KvLockError::corrupt(path, format!("unsupported bank version {version}")));
        }
        let steps = r.u32()? as usize;
        let layers = r.u32()? as usize;
        let tokens = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let meta = BankMeta {
            steps,
            layers,
            tokens,
            dim,
            model_hash: r.u64()?,
            schedule_hash: r.u64()?,
        };
        let expected = steps
            .checked_mul(layers)
            .and_then(|e| e.checked_mul(2 * tokens * dim * 4))
            .ok_or_else(|| KvLockError::corrupt(path, "bank dimensions overflow"))?;
        if buf.len() - HEADER_BYTES != expected {
            return Err(KvLockError::corrupt(
                path,
                format!(
                    "payload is {} bytes, header implies {expected}",
                    buf.len() - HEADER_BYTES
                ),
            ));
        }
        let mut entries = Vec::with_capacity(steps * layers);
        for _ in 0..steps * layers {
            let mut read = || -> Result<Array2<T>> {
                let data: Vec<T> = r.f32s(tokens * dim)?.into_iter().map(T::from_disk).collect();
                Ok(Array2::from_shape_vec((tokens, dim), data).expect("length checked"))
            };
            let keys = read()?;
            let values = read()?;
            entries.push(KvEntry { keys, values });
        }
        r.finish()?;
        Self::new(meta, entries)
    }

    /// Reads a bank and verifies it belongs to the given model and schedule.
    pub fn load(path: &Path, model_hash: u64, schedule_hash: u64) -> Result<Self> {
        let bank = Self::load_unchecked(path)?;
        bank.check_compatible(model_hash, schedule_hash)?;
        Ok(bank)
    }

    /// Bytes held per sampling step: `2·N·d·L·4`.
    pub fn memory_report(&self) -> Vec<StepMemory> {
        let m = &self.meta;
        let per_step = 2 * m.tokens * m.dim * m.layers * std::mem::size_of::<f32>();
        (0..m.steps)
            .map(|step| StepMemory {
                step,
                bytes: per_step as u64,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepMemory {
    pub step: usize,
    pub bytes: u64,
}

pub fn write_memory_report<W: Write>(report: &[StepMemory], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "bytes"])?;
    for r in report {
        w.write_record([r.step.to_string(), r.bytes.to_string()])?;
    }
    w.flush().map_err(|e| KvLockError::Csv(e.into()))?;
    Ok(())
}

/// Caching pass: noises `z0` along the schedule with one shared `eps` and
/// records every layer's K/V at every sampling step.
pub fn build_bank<T: Real>(
    z0: &Latent4D<T>,
    schedule: &NoiseSchedule<T>,
    model: &DitLite<T>,
    cond: &Array1<T>,
    eps_shared: &Latent4D<T>,
) -> Result<KvBank<T>> {
    z0.ensure_same_shape(eps_shared, "shared noise")?;
    let tokens = model.tokens_for(z0.shape())?;
    let layers = model.layers();
    let mut entries = Vec::with_capacity(schedule.steps() * layers);
    for k in 0..schedule.steps() {
        let t = schedule.timestep(k);
        let z_t = schedule.forward_noise(z0, t, eps_shared)?;
        let (_, trace) = model.forward_traced(&z_t, t, cond)?;
        if trace.layers.len() != layers {
            return Err(KvLockError::Integrity(format!(
                "caching pass at step {k} hooked {} of {layers} layers",
                trace.layers.len()
            )));
        }
        for rec in trace.layers {
            entries.push(KvEntry {
                keys: rec.keys,
                values: rec.values,
            });
        }
    }
    let meta = BankMeta {
        steps: schedule.steps(),
        layers,
        tokens,
        dim: model.kv_dim(),
        model_hash: model.hash(),
        schedule_hash: schedule.hash(),
    };
    KvBank::new(meta, entries)
}
