//! Trajectory-variance hallucination detector.
//!
//! Predicted clean latents `x̂₀` are masked, flattened and pushed into a
//! sliding window of `W` vectors. Once full, the per-element sample variance
//! (denominator `W − 1`) averaged over the tracked elements gives the scalar
//! `σ²` compared against `τ`.

use std::collections::VecDeque;

use crate::error::{KvLockError, Result};
use crate::mask::LatentMask;
use crate::scalar::Real;
use crate::tensor::Latent4D;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub tau: f64,
    pub kappa: usize,
    pub window: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            tau: 0.01,
            kappa: 20,
            window: 10,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(KvLockError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.window < 2 {
            return Err(KvLockError::Config(format!(
                "detector window must hold at least 2 vectors, got {}",
                self.window
            )));
        }
        if self.kappa == 0 || self.window > self.kappa {
            return Err(KvLockError::Config(format!(
                "window {} must fit inside the final {} steps",
                self.window, self.kappa
            )));
        }
        Ok(())
    }

    /// True for the final κ of `steps` sampling steps.
    pub fn in_window(&self, k: usize, steps: usize) -> bool {
        k + self.kappa >= steps
    }
}

/// `(1/B)·Σ_b flatten(x̂₀⁽ᵇ⁾ ⊙ m)`, with the mask broadcast over channels.
pub fn masked_reduce<T: Real>(batch: &[Latent4D<T>], mask: &LatentMask) -> Result<Vec<T>> {
    let first = batch
        .first()
        .ok_or_else(|| KvLockError::Shape("masked_reduce needs at least one latent".into()))?;
    let (_, t, h, w) = first.shape();
    let m = mask.array();
    if m.dim() != (1, t, h, w) {
        return Err(KvLockError::Shape(format!(
            "mask {:?} does not broadcast over latent {:?}",
            m.dim(),
            first.shape()
        )));
    }
    if mask.count_ones() == 0 {
        log::warn!("degenerate mask: no foreground elements, detector input is zero");
        return Ok(vec![T::zero(); first.len()]);
    }
    let mut out = vec![T::zero(); first.len()];
    for x in batch {
        x.ensure_same_shape(first, "masked_reduce batch")?;
        for (o, ((_, tt, i, j), &v)) in out.iter_mut().zip(x.array().indexed_iter()) {
            if m[[0, tt, i, j]] != 0 {
                *o += v;
            }
        }
    }
    let inv = T::one() / T::lit(batch.len() as f64);
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

/// Sliding window of reduced `x̂₀` vectors with an incremental per-element
/// mean and sum of squared deviations.
#[derive(Debug, Clone)]
pub struct TrajectoryWindow<T> {
    capacity: usize,
    support: Option<Vec<usize>>,
    buffer: VecDeque<Vec<T>>,
    mean: Vec<T>,
    m2: Vec<T>,
}

impl<T: Real> TrajectoryWindow<T> {
    /// Tracks every element of the pushed vectors.
    pub fn new(capacity: usize) -> Result<Self> {
        Self::build(capacity, None)
    }

    /// Tracks only the listed positions of each pushed vector.
    pub fn with_support(capacity: usize, support: Vec<usize>) -> Result<Self> {
        Self::build(capacity, Some(support))
    }

    fn build(capacity: usize, support: Option<Vec<usize>>) -> Result<Self> {
        if capacity < 2 {
            return Err(KvLockError::Config(format!(
                "window capacity must be at least 2, got {capacity}"
            )));
        }
        Ok(Self {
            capacity,
            support,
            buffer: VecDeque::with_capacity(capacity),
            mean: Vec::new(),
            m2: Vec::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.buffer.len() == self.capacity
    }

    /// Stored (support-restricted) vectors, oldest first.
    pub fn stored(&self) -> impl Iterator<Item = &[T]> {
        self.buffer.iter().map(|v| v.as_slice())
    }

    fn gather(&self, v: &[T]) -> Result<Vec<T>> {
        match &self.support {
            None => Ok(v.to_vec()),
            Some(idx) => idx
                .iter()
                .map(|&i| {
                    v.get(i).copied().ok_or_else(|| {
                        KvLockError::Shape(format!(
                            "support index {i} outside vector of length {}",
                            v.len()
                        ))
                    })
                })
                .collect(),
        }
    }

    /// Appends a vector (evicting the oldest once full) and returns `σ²` when
    /// the window is full.
    pub fn push(&mut self, v: &[T]) -> Result<Option<T>> {
        let x = self.gather(v)?;
        if let Some(front) = self.buffer.front() {
            if front.len() != x.len() {
                return Err(KvLockError::Shape(format!(
                    "window holds vectors of length {}, got {}",
                    front.len(),
                    x.len()
                )));
            }
        } else {
            self.mean = vec![T::zero(); x.len()];
            self.m2 = vec![T::zero(); x.len()];
        }
        if self.is_full() {
            let old = self.buffer.pop_front().expect("full window");
            let n = T::lit(self.capacity as f64);
            for i in 0..x.len() {
                let delta = x[i] - old[i];
                let prev = self.mean[i];
                self.mean[i] = prev + delta / n;
                self.m2[i] += delta * (x[i] - self.mean[i] + old[i] - prev);
            }
        } else {
            let n = T::lit((self.buffer.len() + 1) as f64);
            for i in 0..x.len() {
                let delta = x[i] - self.mean[i];
                self.mean[i] += delta / n;
                self.m2[i] += delta * (x[i] - self.mean[i]);
            }
        }
        self.buffer.push_back(x);
        Ok(self.variance())
    }

    /// Mean per-element sample variance, or `None` until the window is full.
    pub fn variance(&self) -> Option<T> {
        if !self.is_full() {
            return None;
        }
        if self.m2.is_empty() {
            return Some(T::zero());
        }
        let denom = T::lit((self.capacity - 1) as f64);
        let total: T = self.m2.iter().map(|&m| m.max(T::zero()) / denom).sum();
        Some(total / T::lit(self.m2.len() as f64))
    }
}

/// Direct `O(W·n)` recomputation of the window variance.
pub fn window_variance_direct<T: Real>(vectors: &[&[T]]) -> Option<T> {
    let w = vectors.len();
    if w < 2 {
        return None;
    }
    let n = vectors[0].len();
    if n == 0 {
        return Some(T::zero());
    }
    let mut total = T::zero();
    for i in 0..n {
        let mean = vectors.iter().map(|v| v[i]).sum::<T>() / T::lit(w as f64);
        let ss: T = vectors.iter().map(|v| (v[i] - mean) * (v[i] - mean)).sum();
        total += ss / T::lit((w - 1) as f64);
    }
    Some(total / T::lit(n as f64))
}

/// `α = clamp(σ²/τ, 0, 1)` inside the window, 0 otherwise or before the
/// window has filled.
pub fn fusion_rate<T: Real>(sigma2: Option<T>, cfg: &DetectorConfig, in_window: bool) -> T {
    match sigma2 {
        Some(s) if in_window => (s / T::lit(cfg.tau)).clamp_to(T::zero(), T::one()),
        _ => T::zero(),
    }
}

pub fn hallucination_flag<T: Real>(sigma2: Option<T>, cfg: &DetectorConfig, in_window: bool) -> bool {
    matches!(sigma2, Some(s) if in_window && s > T::lit(cfg.tau))
}

/// Post-hoc trajectory variance of a sequence of `x̂₀` values: squared
/// deviations from the trace mean summed and divided by the trace length,
/// then averaged over elements.
pub fn hal_metric<T: Real, V: AsRef<[T]>>(trace: &[V]) -> Result<T> {
    if trace.len() < 2 {
        return Err(KvLockError::Shape(format!(
            "hallucination metric needs at least 2 entries, got {}",
            trace.len()
        )));
    }
    let n = trace[0].as_ref().len();
    if trace.iter().any(|v| v.as_ref().len() != n) {
        return Err(KvLockError::Shape("trace entries differ in length".into()));
    }
    if n == 0 {
        return Ok(T::zero());
    }
    let len = T::lit(trace.len() as f64);
    let mut total = T::zero();
    for i in 0..n {
        let mean = trace.iter().map(|v| v.as_ref()[i]).sum::<T>() / len;
        total += trace
            .iter()
            .map(|v| {
                let d = v.as_ref()[i] - mean;
                d * d
            })
            .sum::<T>()
            / len;
    }
    Ok(total / T::lit(n as f64))
}
