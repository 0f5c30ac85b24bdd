//! Scaled dot-product attention and token-wise KV mixing.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::error::{KvLockError, Result};
use crate::mask::TokenMask;
use crate::scalar::Real;

/// Cached key/value matrices of one layer at one sampling step, each `N × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvEntry<T> {
    pub keys: Array2<T>,
    pub values: Array2<T>,
}

impl<T: Real> KvEntry<T> {
    pub fn tokens(&self) -> usize {
        self.keys.nrows()
    }

    pub fn dim(&self) -> usize {
        self.keys.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.keys.iter().chain(self.values.iter()).all(|v| v.is_finite())
    }
}

/// Per-call description of how cached KV enters self-attention.
#[derive(Debug, Clone, Copy)]
pub struct InjectionPlan<'a, T> {
    pub token_mask: &'a TokenMask,
    /// Fusion rate in `[0, 1]`, shared by every layer of the step.
    pub alpha: T,
    /// True only inside the final κ sampling steps.
    pub active: bool,
}

impl<'a, T: Real> InjectionPlan<'a, T> {
    pub fn inactive(token_mask: &'a TokenMask) -> Self {
        Self {
            token_mask,
            alpha: T::zero(),
            active: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= T::zero() && self.alpha <= T::one()) {
            return Err(KvLockError::Config(format!(
                "fusion rate {} outside [0, 1]",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(scores: &mut Array2<T>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
}

/// Attention weights `softmax(QKᵀ/√d)`.
pub fn attention_weights<T: Real>(q: ArrayView2<T>, k: ArrayView2<T>) -> Result<Array2<T>> {
    if q.ncols() != k.ncols() || q.ncols() == 0 {
        return Err(KvLockError::Shape(format!(
            "query dim {} vs key dim {}",
            q.ncols(),
            k.ncols()
        )));
    }
    let scale = T::one() / T::lit(q.ncols() as f64).sqrt();
    let mut scores = q.dot(&k.t());
    scores.mapv_inplace(|v| v * scale);
    softmax_rows(&mut scores);
    Ok(scores)
}

/// `softmax(QKᵀ/√d)·V`.
pub fn attention<T: Real>(q: ArrayView2<T>, k: ArrayView2<T>, v: ArrayView2<T>) -> Result<Array2<T>> {
    if k.nrows() != v.nrows() {
        return Err(KvLockError::Shape(format!(
            "{} keys vs {} values",
            k.nrows(),
            v.nrows()
        )));
    }
    let weights = attention_weights(q, k)?;
    let out = weights.dot(&v);
    if out.iter().any(|x| !x.is_finite()) {
        return Err(KvLockError::Numeric("non-finite attention output".into()));
    }
    Ok(out)
}

/// Multi-head attention over column blocks of width `d / heads`.
///
/// Returns the concatenated head outputs and the largest deviation of any
/// softmax row sum from 1.
pub fn multi_head_attention<T: Real>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    heads: usize,
) -> Result<(Array2<T>, T)> {
    let d = q.ncols();
    if heads == 0 || d % heads != 0 || k.ncols() != d || v.ncols() != d {
        return Err(KvLockError::Shape(format!(
            "cannot split width {d} into {heads} heads"
        )));
    }
    let hd = d / heads;
    let mut out = Array2::<T>::zeros((q.nrows(), d));
    let mut worst = T::zero();
    for h in 0..heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let w = attention_weights(q.slice(cols), k.slice(cols))?;
        for row in w.rows() {
            worst = worst.max((row.sum() - T::one()).abs());
        }
        out.slice_mut(cols).assign(&w.dot(&v.slice(cols)));
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(KvLockError::Numeric("non-finite attention output".into()));
    }
    Ok((out, worst))
}

/// Token-wise KV interpolation.
///
/// Foreground rows (mask 1) keep the fresh projections; background rows become
/// `α·cached + (1−α)·fresh`.
pub fn mix_kv<T: Real>(
    k_new: &Array2<T>,
    v_new: &Array2<T>,
    entry: &KvEntry<T>,
    plan: &InjectionPlan<'_, T>,
) -> Result<(Array2<T>, Array2<T>)> {
    plan.validate()?;
    let n = k_new.nrows();
    if entry.keys.dim() != k_new.dim()
        || entry.values.dim() != v_new.dim()
        || k_new.dim() != v_new.dim()
    {
        return Err(KvLockError::Compatibility(format!(
            "bank entry {:?} vs model projections {:?}",
            entry.keys.dim(),
            k_new.dim()
        )));
    }
    if plan.token_mask.len() != n {
        return Err(KvLockError::Compatibility(format!(
            "token mask has {} entries, sequence has {n} tokens",
            plan.token_mask.len()
        )));
    }
    let alpha = plan.alpha;
    let keep = T::one() - alpha;
    let mix = |fresh: &Array2<T>, cached: &Array2<T>| {
        let mut out = fresh.clone();
        for (i, (mut row, cached_row)) in out
            .axis_iter_mut(Axis(0))
            .zip(cached.axis_iter(Axis(0)))
            .enumerate()
        {
            if !plan.token_mask.is_foreground(i) {
                Zip::from(&mut row)
                    .and(&cached_row)
                    .for_each(|f, &c| *f = alpha * c + keep * *f);
            }
        }
        out
    };
    Ok((mix(k_new, &entry.keys), mix(v_new, &entry.values)))
}
