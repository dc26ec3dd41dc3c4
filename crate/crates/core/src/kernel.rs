//! Tiled attention kernels.
//!
//! Every kernel in the crate funnels into [`attend_packed`]: a block of
//! query rows against a contiguous run of keys/values, processed in KV
//! tiles with a running max and running denominator per row. The dense
//! kernel hands it the KV cache directly; the sparse kernels first gather
//! their active key ranges into a per-worker packed buffer.
//!
//! Each call reports the multiply-accumulates it performed (`2·rows·keys·D`:
//! one `QKᵀ` and one `PV` product per query-key pair), which is what the
//! FLOP estimators in [`crate::analysis`] are checked against.

use std::ops::Range;

use crate::attention::AttnWorkload;
use crate::error::{Error, Result};
use crate::exec::{for_each_chunk, Parallelism};
use crate::tensor::{Real, Tensor};

/// Keys per KV tile.
const KV_TILE: usize = 64;

/// Query rows per work unit of the dense kernel.
pub const DENSE_QUERY_BLOCK: usize = 128;

#[inline]
fn dot8<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s = s + x * y;
    }
    s
}

#[inline]
fn axpy<T: Real>(out: &mut [T], p: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = *o + p * v;
    }
}

/// Attention of `rows` query rows (`q`, row-major `rows × d`) over `n` packed
/// keys and values, written into `out` (`rows × d`). Returns the MAC count.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_packed<T: Real>(
    q: &[T],
    keys: &[T],
    vals: &[T],
    d: usize,
    scale: T,
    out: &mut [T],
    state: &mut Vec<(T, T)>,
    scores: &mut Vec<T>,
) -> u64 {
    let rows = q.len() / d;
    let n = keys.len() / d;
    debug_assert!(n > 0, "attend_packed needs at least one key");
    state.clear();
    state.resize(rows, (T::neg_infinity(), T::zero()));
    out.iter_mut().for_each(|o| *o = T::zero());
    scores.resize(KV_TILE, T::zero());

    let mut start = 0;
    while start < n {
        let len = KV_TILE.min(n - start);
        let kt = &keys[start * d..(start + len) * d];
        let vt = &vals[start * d..(start + len) * d];
        for r in 0..rows {
            let qr = &q[r * d..(r + 1) * d];
            let mut tmax = T::neg_infinity();
            for (j, s) in scores[..len].iter_mut().enumerate() {
                *s = dot8(qr, &kt[j * d..(j + 1) * d]) * scale;
                tmax = tmax.max(*s);
            }
            let (m, l) = state[r];
            let acc = &mut out[r * d..(r + 1) * d];
            let m_new = m.max(tmax);
            let mut l_new = l;
            if m_new > m && l > T::zero() {
                let corr = (m - m_new).exp();
                l_new = l * corr;
                acc.iter_mut().for_each(|a| *a = *a * corr);
            }
            for (j, &s) in scores[..len].iter().enumerate() {
                let p = (s - m_new).exp();
                l_new = l_new + p;
                axpy(acc, p, &vt[j * d..(j + 1) * d]);
            }
            state[r] = (m_new, l_new);
        }
        start += len;
    }
    for (r, &(_, l)) in state.iter().enumerate() {
        let inv = T::one() / l;
        out[r * d..(r + 1) * d].iter_mut().for_each(|a| *a = *a * inv);
    }
    2 * (rows * n * d) as u64
}

/// Scratch owned by one worker; never shared.
#[derive(Default)]
struct Scratch<T> {
    keys: Vec<T>,
    vals: Vec<T>,
    state: Vec<(T, T)>,
    scores: Vec<T>,
}

impl<T: Real> Scratch<T> {
    #[allow(clippy::too_many_arguments)]
    fn run(
        &mut self,
        q: &[T],
        k_head: &[T],
        v_head: &[T],
        ranges: &[Range<usize>],
        d: usize,
        scale: T,
        out: &mut [T],
    ) -> u64 {
        if let [r] = ranges {
            return attend_packed(
                q,
                &k_head[r.start * d..r.end * d],
                &v_head[r.start * d..r.end * d],
                d,
                scale,
                out,
                &mut self.state,
                &mut self.scores,
            );
        }
        self.keys.clear();
        self.vals.clear();
        for r in ranges {
            self.keys.extend_from_slice(&k_head[r.start * d..r.end * d]);
            self.vals.extend_from_slice(&v_head[r.start * d..r.end * d]);
        }
        attend_packed(q, &self.keys, &self.vals, d, scale, out, &mut self.state, &mut self.scores)
    }
}

/// Merges a sorted index list into maximal contiguous ranges.
pub fn index_ranges(indices: &[usize]) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = Vec::new();
    for &j in indices {
        match out.last_mut() {
            Some(r) if r.end == j => r.end += 1,
            _ => out.push(j..j + 1),
        }
    }
    out
}

/// Generic gather-pack driver. Query rows are cut into blocks of
/// `query_block`; block `g` of head `(b, h)` attends over the key ranges
/// returned by `ranges_for(b, h, g)`. Returns the output and the MAC count.
pub fn gather_pack_attention<T, F>(
    w: &AttnWorkload<T>,
    query_block: usize,
    mode: Parallelism,
    ranges_for: F,
) -> Result<(Tensor<T>, u64)>
where
    T: Real,
    F: Fn(usize, usize, usize) -> Vec<Range<usize>> + Sync,
{
    if query_block == 0 {
        return Err(Error::Config("query block size must be positive".into()));
    }
    let (nh, nq, d) = (w.heads(), w.queries(), w.head_dim());
    let scale = w.softmax_scale();
    let blocks = nq.div_ceil(query_block);
    // Validate every block before doing any work.
    for b in 0..w.batch() {
        for h in 0..nh {
            for g in 0..blocks {
                let ranges = ranges_for(b, h, g);
                if ranges.iter().all(|r| r.is_empty()) {
                    return Err(Error::EmptyIndexList { batch: b, head: h, block: g });
                }
                if let Some(r) = ranges.iter().find(|r| r.end > w.kv_len()) {
                    return Err(Error::IndexOutOfRange { index: r.end - 1, limit: w.kv_len() });
                }
            }
        }
    }
    let mut out = w.empty_output();
    let macs = for_each_chunk(out.data_mut(), nq * d, mode, |bh, slab| {
        let (b, h) = (bh / nh, bh % nh);
        let (qh, kh, vh) = (w.q.head(b, h), w.k.head(b, h), w.v.head(b, h));
        for_each_chunk(slab, query_block * d, mode, |g, oblock| {
            let q0 = g * query_block * d;
            let qb = &qh[q0..q0 + oblock.len()];
            let ranges: Vec<Range<usize>> = ranges_for(b, h, g).into_iter().filter(|r| !r.is_empty()).collect();
            let mut scratch = Scratch::default();
            scratch.run(qb, kh, vh, &ranges, d, scale, oblock)
        })
    });
    Ok((out, macs))
}

/// Dense cross-scale attention through the tiled kernel. Returns the output
/// and its MAC count (`2·N_k·N_≤k·D` per head).
pub fn dense_attention_kernel<T: Real>(w: &AttnWorkload<T>, mode: Parallelism) -> Result<(Tensor<T>, u64)> {
    w.validate()?;
    let n = w.kv_len();
    gather_pack_attention(w, DENSE_QUERY_BLOCK, mode, |_, _, _| std::iter::once(0..n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::dense_cross_scale_attention;
    use crate::attention::tests::random_workload;

    #[test]
    fn ranges_merge_runs() {
        assert_eq!(index_ranges(&[0, 1, 2, 5, 7, 8]), vec![0..3, 5..6, 7..9]);
        assert!(index_ranges(&[]).is_empty());
    }

    #[test]
    fn dense_kernel_matches_reference() {
        // 300 keys spans several KV tiles with a ragged last one.
        let w = random_workload(7, &[1, 2, 4, 6, 8, 13], 6, 1, 2, 12);
        let (reference, _) = dense_cross_scale_attention(&w, false, Parallelism::Sequential).unwrap();
        for mode in [Parallelism::Sequential, Parallelism::Parallel] {
            let (o, macs) = dense_attention_kernel(&w, mode).unwrap();
            assert!(o.max_abs_diff(&reference) < 1e-12);
            assert_eq!(macs, 2 * 2 * 169 * w.kv_len() as u64 * 12);
        }
    }

    #[test]
    fn f32_kernel_close_to_f64_reference() {
        let w = random_workload(8, &[1, 2, 4, 8], 4, 1, 1, 16);
        let (reference, _) = dense_cross_scale_attention(&w, false, Parallelism::Sequential).unwrap();
        let w32 = AttnWorkload::new(w.q.cast::<f32>(), w.k.cast(), w.v.cast(), w.schedule.clone(), 4).unwrap();
        let (o, _) = dense_attention_kernel(&w32, Parallelism::Parallel).unwrap();
        assert!(o.cast::<f64>().max_abs_diff(&reference) < 1e-5);
    }

    #[test]
    fn large_logits_stay_finite() {
        let mut w = random_workload(2, &[1, 2, 4], 3, 1, 1, 4);
        w.q.data_mut().iter_mut().for_each(|x| *x *= 400.0);
        let (o, _) = dense_attention_kernel(&w, Parallelism::Sequential).unwrap();
        assert!(o.is_finite());
        let (reference, _) = dense_cross_scale_attention(&w, false, Parallelism::Sequential).unwrap();
        assert!(o.max_abs_diff(&reference) < 1e-9);
    }

    #[test]
    fn empty_block_is_an_error() {
        let w = random_workload(2, &[1, 2], 2, 1, 1, 2);
        let r = gather_pack_attention(&w, 2, Parallelism::Sequential, |_, _, g| {
            if g == 1 {
                Vec::new()
            } else {
                std::iter::once(0..1).collect()
            }
        });
        assert!(matches!(r, Err(Error::EmptyIndexList { block: 1, .. })));
        let r = gather_pack_attention(&w, 2, Parallelism::Sequential, |_, _, _| std::iter::once(0..9).collect());
        assert!(matches!(r, Err(Error::IndexOutOfRange { .. })));
    }
}
