//! Reference cross-scale attention.
//!
//! These routines favour clarity over speed: each query row computes its
//! logits against an explicit key subset, subtracts the row maximum and
//! normalises over that subset. They are the ground truth that the tiled
//! kernels in [`crate::kernel`] and the sparse paths are checked against.

use crate::cs4a::SparseIndexSet;
use crate::error::{Error, Result};
use crate::exec::{for_each_chunk, Parallelism};
use crate::geometry::ScaleSchedule;
use crate::tensor::{Real, Tensor};

/// One autoregressive step: queries of `target_scale` against the KV cache
/// of scales `1..=target_scale`.
#[derive(Debug, Clone)]
pub struct AttnWorkload<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub schedule: ScaleSchedule,
    pub target_scale: usize,
}

impl<T: Real> AttnWorkload<T> {
    pub fn new(q: Tensor<T>, k: Tensor<T>, v: Tensor<T>, schedule: ScaleSchedule, target_scale: usize) -> Result<Self> {
        let w = Self { q, k, v, schedule, target_scale };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.check_scale(self.target_scale)?;
        let (b, h, nq, d) = self.q.shape();
        let nk = self.schedule.count(self.target_scale);
        let nkv = self.schedule.prefix(self.target_scale);
        if nq != nk {
            return Err(Error::Shape(format!("q has {nq} rows, scale {} has {nk} tokens", self.target_scale)));
        }
        for (name, t) in [("k", &self.k), ("v", &self.v)] {
            if t.shape() != (b, h, nkv, d) {
                return Err(Error::Shape(format!("{name} has shape {:?}, expected {:?}", t.shape(), (b, h, nkv, d))));
            }
        }
        if d == 0 {
            return Err(Error::Shape("head_dim is zero".into()));
        }
        for (name, t) in [("q", &self.q), ("k", &self.k), ("v", &self.v)] {
            if !t.is_finite() {
                return Err(Error::NonFinite(name));
            }
        }
        Ok(())
    }

    pub fn batch(&self) -> usize {
        self.q.batch()
    }
    pub fn heads(&self) -> usize {
        self.q.heads()
    }
    pub fn head_dim(&self) -> usize {
        self.q.cols()
    }
    pub fn queries(&self) -> usize {
        self.q.rows()
    }
    pub fn kv_len(&self) -> usize {
        self.k.rows()
    }

    /// `1/√D`.
    pub fn softmax_scale(&self) -> T {
        T::one() / T::cast_f64(self.head_dim() as f64).sqrt()
    }

    pub(crate) fn empty_output(&self) -> Tensor<T> {
        Tensor::zeros(self.batch(), self.heads(), self.queries(), self.head_dim())
    }
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Softmax attention of one query row over the keys yielded by `keys`.
/// Writes the output row and, when given, the probability of each key into
/// `probs` (indexed by global key index). Returns `false` if `keys` was empty.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_row<T: Real>(
    q_row: &[T],
    k_head: &[T],
    v_head: &[T],
    d: usize,
    scale: T,
    keys: &[usize],
    out: &mut [T],
    probs: Option<&mut [T]>,
) -> bool {
    if keys.is_empty() {
        return false;
    }
    let logits: Vec<T> = keys.iter().map(|&j| dot(q_row, &k_head[j * d..(j + 1) * d]) * scale).collect();
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let weights: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: T = weights.iter().copied().sum();
    out.iter_mut().for_each(|o| *o = T::zero());
    for (&j, &w) in keys.iter().zip(&weights) {
        let p = w / total;
        for (o, &v) in out.iter_mut().zip(&v_head[j * d..(j + 1) * d]) {
            *o = *o + p * v;
        }
    }
    if let Some(probs) = probs {
        probs.iter_mut().for_each(|p| *p = T::zero());
        for (&j, &w) in keys.iter().zip(&weights) {
            probs[j] = w / total;
        }
    }
    true
}

/// Attention where query `q` of head `(b, h)` sees exactly the keys returned
/// by `keys_for(b, h, q)`. Fails on an empty key set.
fn attend_with<T, F>(w: &AttnWorkload<T>, mode: Parallelism, keys_for: F) -> Result<Tensor<T>>
where
    T: Real,
    F: Fn(usize, usize, usize) -> Vec<usize> + Sync,
{
    let (nh, nq, d) = (w.heads(), w.queries(), w.head_dim());
    let scale = w.softmax_scale();
    let mut out = w.empty_output();
    let empty = std::sync::atomic::AtomicUsize::new(usize::MAX);
    for_each_chunk(out.data_mut(), nq * d, mode, |bh, slab| {
        let (b, h) = (bh / nh, bh % nh);
        let (kh, vh) = (w.k.head(b, h), w.v.head(b, h));
        for (qi, orow) in slab.chunks_mut(d).enumerate() {
            let keys = keys_for(b, h, qi);
            if !attend_row(w.q.row(b, h, qi), kh, vh, d, scale, &keys, orow, None) {
                empty.fetch_min(qi, std::sync::atomic::Ordering::Relaxed);
            }
        }
        0
    });
    let row = empty.into_inner();
    if row != usize::MAX {
        return Err(Error::Config(format!("query {row} has an empty key set")));
    }
    Ok(out)
}

/// `softmax(q kᵀ / √D) v` over the full KV cache, optionally returning the
/// probability tensor `(B, H, N_k, N_≤k)`.
pub fn dense_cross_scale_attention<T: Real>(
    w: &AttnWorkload<T>,
    want_probs: bool,
    mode: Parallelism,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    w.validate()?;
    let (nb, nh, nq, d, nkv) = (w.batch(), w.heads(), w.queries(), w.head_dim(), w.kv_len());
    if !want_probs {
        let all: Vec<usize> = (0..nkv).collect();
        let out = attend_with(w, mode, |_, _, _| all.clone())?;
        return Ok((out, None));
    }
    let mut probs = Tensor::zeros(nb, nh, nq, nkv);
    let mut out = w.empty_output();
    let scale = w.softmax_scale();
    let all: Vec<usize> = (0..nkv).collect();
    for_each_chunk(probs.data_mut(), nq * nkv, mode, |bh, pslab| {
        let (b, h) = (bh / nh, bh % nh);
        let mut orow = vec![T::zero(); d];
        for (qi, prow) in pslab.chunks_mut(nkv).enumerate() {
            attend_row(w.q.row(b, h, qi), w.k.head(b, h), w.v.head(b, h), d, scale, &all, &mut orow, Some(prow));
        }
        0
    });
    for_each_chunk(out.data_mut(), nq * d, mode, |bh, slab| {
        let (b, h) = (bh / nh, bh % nh);
        let vh = w.v.head(b, h);
        for (qi, orow) in slab.chunks_mut(d).enumerate() {
            let prow = probs.row(b, h, qi);
            for (j, &p) in prow.iter().enumerate() {
                for (o, &v) in orow.iter_mut().zip(&vh[j * d..(j + 1) * d]) {
                    *o = *o + p * v;
                }
            }
        }
        0
    });
    Ok((out, Some(probs)))
}

/// Attention of each query block over its own gathered key list, with the
/// softmax renormalised over that list only.
pub fn sparse_attention_over_indices<T: Real>(
    w: &AttnWorkload<T>,
    idx: &SparseIndexSet,
    mode: Parallelism,
) -> Result<Tensor<T>> {
    w.validate()?;
    idx.check_against(w.batch(), w.heads(), w.queries(), w.kv_len())?;
    let c = idx.block();
    attend_with(w, mode, |b, h, q| idx.list(b, h, q / c).to_vec())
}

/// Dense attention restricted to keys for which `allow(query, key)` holds.
pub fn masked_dense_attention<T, F>(w: &AttnWorkload<T>, allow: F, mode: Parallelism) -> Result<Tensor<T>>
where
    T: Real,
    F: Fn(usize, usize) -> bool + Sync,
{
    w.validate()?;
    let nkv = w.kv_len();
    attend_with(w, mode, |_, _, q| (0..nkv).filter(|&j| allow(q, j)).collect())
}

/// Dense attention over the first `m` scales of the KV cache only.
pub fn truncated_kv_attention<T: Real>(w: &AttnWorkload<T>, m: usize, mode: Parallelism) -> Result<Tensor<T>> {
    w.validate()?;
    if m == 0 || m > w.target_scale {
        return Err(Error::ScaleOutOfRange { scale: m, num_scales: w.target_scale });
    }
    let keys: Vec<usize> = (0..w.schedule.prefix(m)).collect();
    attend_with(w, mode, |_, _, _| keys.clone())
}
