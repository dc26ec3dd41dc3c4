//! FLOP estimators, similarity and error instruments, and the report record.
//!
//! A FLOP here is one multiply or one add of the `QKᵀ` and `PV` products, so
//! a query–key pair evaluated at head dimension `D` costs `2·D`. Softmax and
//! exponentials are not counted. All estimators are per `(batch, head)`
//! unless the name says otherwise.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::AttnWorkload;
use crate::cs4a::{dense_block_topk, SparseIndexSet};
use crate::csla::{block_mask_direct, token_mask_query, CslaConfig};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::geometry::{delinearize, ScaleSchedule};
use crate::kernel::{dense_attention_kernel, gather_pack_attention, DENSE_QUERY_BLOCK};
use crate::rng::SplitMix64;
use crate::tensor::{Real, Tensor};

/// `2·D·N_k·N_≤k`.
pub fn flops_dense(schedule: &ScaleSchedule, k: usize, d: usize) -> Result<u64> {
    schedule.check_scale(k)?;
    Ok(2 * (d * schedule.count(k) * schedule.prefix(k)) as u64)
}

/// Closed-form CS⁴A cost from decision scale `s` through target `k`:
/// dense attention at `s`, its column sums, the residual pass over the
/// top-`α` keys, then `2·D·α·N_k'·N_≤k'` for every later scale.
///
/// The column-sum term is counted as one addition per probability entry
/// (`N_S·N_≤S`), which is what a streaming implementation performs. `c` only
/// fixes the block partition; the per-block top-k cost does not depend on it.
pub fn flops_cs4a(schedule: &ScaleSchedule, s: usize, k: usize, d: usize, alpha: f64, c: usize) -> Result<f64> {
    schedule.check_scale(s)?;
    schedule.check_scale(k)?;
    if s >= k {
        return Err(Error::Config(format!("decision scale {s} must precede target scale {k}")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) || c == 0 {
        return Err(Error::Config(format!("need 0 < α ≤ 1 and C ≥ 1 (got α={alpha}, C={c})")));
    }
    let (ns, cs) = (schedule.count(s) as f64, schedule.prefix(s) as f64);
    let d = d as f64;
    let mut total = 2.0 * d * ns * cs + ns * cs + 2.0 * d * ns * (alpha * cs).round().max(1.0);
    for kk in s + 1..=k {
        total += 2.0 * d * alpha * schedule.count(kk) as f64 * schedule.prefix(kk) as f64;
    }
    Ok(total)
}

/// CS⁴A cost split by stage, computed from the index sets that were
/// actually used. Totals over every `(batch, head)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cs4aFlops {
    pub decision_dense: u64,
    pub column_sum: u64,
    pub cache: u64,
    pub update: u64,
}

impl Cs4aFlops {
    pub fn total(&self) -> u64 {
        self.decision_dense + self.column_sum + self.cache + self.update
    }
}

/// `decision` is the top-k set at the decision scale (whose workload had
/// `kv_len_s` keys); `updates` are the mapped sets of each later scale.
/// Top-`α` after mapping is not exactly `α·N_≤k` (de-duplication, sink
/// union), so this is the count a kernel must match.
pub fn flops_cs4a_exact(
    d: usize,
    decision: &SparseIndexSet,
    kv_len_s: usize,
    updates: &[&SparseIndexSet],
) -> Cs4aFlops {
    let heads = (decision.batch() * decision.heads()) as u64;
    let probs = heads * (decision.queries() * kv_len_s) as u64;
    Cs4aFlops {
        decision_dense: 2 * d as u64 * probs,
        column_sum: probs,
        cache: 2 * d as u64 * decision.active_pairs(),
        update: updates.iter().map(|u| 2 * d as u64 * u.active_pairs()).sum(),
    }
}

/// Block-level CSLA cost: every active `B×B` tile is computed densely
/// (ragged tiles at their true extent). Equals the block-sparse kernel's
/// MAC counter.
pub fn flops_csla(schedule: &ScaleSchedule, k: usize, d: usize, cfg: &CslaConfig) -> Result<u64> {
    let mask = block_mask_direct(schedule, k, cfg)?;
    Ok(2 * d as u64 * mask.active_pairs())
}

/// Token-level CSLA cost: `2·D` per visible query–key pair.
pub fn flops_csla_token(schedule: &ScaleSchedule, k: usize, d: usize, cfg: &CslaConfig) -> Result<u64> {
    let mut pairs = 0u64;
    for q in 0..schedule.count(k) {
        pairs += token_mask_query(schedule, k, cfg, q)?.len() as u64;
    }
    Ok(2 * d as u64 * pairs)
}

/// `2·D·N_k·(C_sink + Σ w_h²)`: every window fully inside its grid.
pub fn flops_csla_bound(schedule: &ScaleSchedule, k: usize, d: usize, cfg: &CslaConfig) -> Result<u64> {
    schedule.check_scale(k)?;
    cfg.validate()?;
    let sink = schedule.prefix(cfg.sink_scales.min(k));
    let local: usize = cfg.scale_windows(schedule, k).iter().map(|&(_, w)| w * w).sum();
    Ok(2 * (d * schedule.count(k) * (sink + local)) as u64)
}

/// Cosine of two equal-length vectors; 0 when either has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
}

/// For head `(b, h)`: the sub-block `A^(k,i)` of `p_k` flattened, and
/// `A^(k−1,i−1)` of `p_prev` nearest-neighbour upsampled to the same shape.
pub fn cross_scale_blocks<T: Real>(
    p_k: &Tensor<T>,
    p_prev: &Tensor<T>,
    schedule: &ScaleSchedule,
    k: usize,
    i: usize,
    b: usize,
    h: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    schedule.check_scale(k)?;
    if k < 2 || i < 2 || i > k {
        return Err(Error::Config(format!("need 2 ≤ i ≤ k (got i={i}, k={k})")));
    }
    let expect_k = (schedule.count(k), schedule.prefix(k));
    let expect_prev = (schedule.count(k - 1), schedule.prefix(k - 1));
    if (p_k.rows(), p_k.cols()) != expect_k || (p_prev.rows(), p_prev.cols()) != expect_prev {
        return Err(Error::Shape(format!(
            "probability maps are {}×{} and {}×{}, expected {:?} and {:?}",
            p_k.rows(),
            p_k.cols(),
            p_prev.rows(),
            p_prev.cols(),
            expect_k,
            expect_prev
        )));
    }
    if (p_k.batch(), p_k.heads()) != (p_prev.batch(), p_prev.heads()) || b >= p_k.batch() || h >= p_k.heads() {
        return Err(Error::Shape("batch/head mismatch between probability maps".into()));
    }
    let (sq, sq0) = (schedule.side(k), schedule.side(k - 1));
    let (sc, sc0) = (schedule.side(i), schedule.side(i - 1));
    let (c_off, c0_off) = (schedule.prefix(i - 1), schedule.prefix(i - 2));
    let src_col: Vec<usize> = (0..sc * sc)
        .map(|c| {
            let (x, y) = delinearize(c, sc)?;
            Ok(c0_off + (x * sc0 / sc) * sc0 + y * sc0 / sc)
        })
        .collect::<Result<_>>()?;
    let n = sq * sq * sc * sc;
    let (mut target, mut up) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for q in 0..sq * sq {
        let (x, y) = delinearize(q, sq)?;
        let q0 = (x * sq0 / sq) * sq0 + y * sq0 / sq;
        let row = p_k.row(b, h, q);
        let row0 = p_prev.row(b, h, q0);
        for (c, &src) in src_col.iter().enumerate() {
            target.push(row[c_off + c].as_f64());
            up.push(row0[src].as_f64());
        }
    }
    Ok((target, up))
}

/// Cosine similarity between `A^(k,i)` and upsampled `A^(k−1,i−1)`, one value per `(b, h)`.
pub fn cross_scale_similarity<T: Real>(
    p_k: &Tensor<T>,
    p_prev: &Tensor<T>,
    schedule: &ScaleSchedule,
    k: usize,
    i: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(p_k.batch() * p_k.heads());
    for b in 0..p_k.batch() {
        for h in 0..p_k.heads() {
            let (t, u) = cross_scale_blocks(p_k, p_prev, schedule, k, i, b, h)?;
            out.push(cosine_similarity(&t, &u));
        }
    }
    Ok(out)
}

/// Same as [`cross_scale_similarity`] with the upsampled map randomly permuted.
pub fn shuffled_similarity<T: Real>(
    p_k: &Tensor<T>,
    p_prev: &Tensor<T>,
    schedule: &ScaleSchedule,
    k: usize,
    i: usize,
    rng: &mut SplitMix64,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for b in 0..p_k.batch() {
        for h in 0..p_k.heads() {
            let (t, mut u) = cross_scale_blocks(p_k, p_prev, schedule, k, i, b, h)?;
            rng.shuffle(&mut u);
            out.push(cosine_similarity(&t, &u));
        }
    }
    Ok(out)
}

/// `(m, ‖o_m − o_dense‖_F / ‖o_dense‖_F)` where `o_m` attends only to the first `m` scales.
pub fn sink_retention_curve<T: Real>(
    w: &AttnWorkload<T>,
    m_values: &[usize],
    mode: Parallelism,
) -> Result<Vec<(usize, f64)>> {
    let (dense, _) = dense_attention_kernel(w, mode)?;
    m_values
        .iter()
        .map(|&m| {
            if m == 0 || m > w.target_scale {
                return Err(Error::ScaleOutOfRange { scale: m, num_scales: w.target_scale });
            }
            let len = w.schedule.prefix(m);
            let (o, _) =
                gather_pack_attention(w, DENSE_QUERY_BLOCK, mode, |_, _, _| std::iter::once(0..len).collect())?;
            Ok((m, o.relative_error(&dense)))
        })
        .collect()
}

/// Mean over blocks of `|pred ∩ truth| / |truth|`.
pub fn recall_against(pred: &SparseIndexSet, truth: &SparseIndexSet) -> Result<f64> {
    if (pred.batch(), pred.heads(), pred.queries(), pred.block())
        != (truth.batch(), truth.heads(), truth.queries(), truth.block())
    {
        return Err(Error::Shape("prediction and truth use different block layouts".into()));
    }
    let n = pred.lists().len();
    if n == 0 {
        return Err(Error::Shape("no index lists".into()));
    }
    let mut sum = 0.0;
    for (p, t) in pred.lists().iter().zip(truth.lists()) {
        if t.is_empty() {
            return Err(Error::Shape("empty truth list".into()));
        }
        let hit = t.iter().filter(|j| p.binary_search(j).is_ok()).count();
        sum += hit as f64 / t.len() as f64;
    }
    Ok(sum / n as f64)
}

/// Recall of `pred` against the dense top-`k_true` keys of each query block of `w`.
pub fn selection_recall<T: Real>(
    pred: &SparseIndexSet,
    w: &AttnWorkload<T>,
    k_true: usize,
    mode: Parallelism,
) -> Result<f64> {
    pred.check_against(w.batch(), w.heads(), w.queries(), w.kv_len())?;
    let (_, truth, _) = dense_block_topk(w, pred.block(), k_true, mode)?;
    recall_against(pred, &truth)
}

/// Uniformly random lists with the same sizes as `like`, drawn from `0..kv_len`.
pub fn random_index_set_like(like: &SparseIndexSet, kv_len: usize, rng: &mut SplitMix64) -> Result<SparseIndexSet> {
    let lists = like
        .lists()
        .iter()
        .map(|l| {
            if l.len() > kv_len {
                return Err(Error::Config(format!("cannot draw {} distinct keys from {kv_len}", l.len())));
            }
            // Floyd's algorithm: `len` distinct draws without a full permutation.
            let mut picked = std::collections::BTreeSet::new();
            for j in kv_len - l.len()..kv_len {
                let t = rng.below(j as u64 + 1) as usize;
                if !picked.insert(t) {
                    picked.insert(j);
                }
            }
            Ok(picked.into_iter().collect())
        })
        .collect::<Result<_>>()?;
    SparseIndexSet::new(like.batch(), like.heads(), like.queries(), like.block(), lists)
}

/// Outcome of one named invariant check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Machine-readable result of a harness command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Report {
    pub command: String,
    pub seed: u64,
    /// The harness config as `key → value` text, exactly as serialized.
    pub config: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub series: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<Check>,
}

impl Report {
    pub fn new(command: &str, seed: u64, config: BTreeMap<String, String>) -> Self {
        Self { command: command.to_string(), seed, config, ..Default::default() }
    }

    pub fn metric(&mut self, name: &str, value: f64) -> &mut Self {
        self.metrics.insert(name.to_string(), value);
        self
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) -> &mut Self {
        self.checks.push(Check { name: name.to_string(), passed, detail: detail.into() });
        self
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self
            .metrics
            .iter()
            .map(|(k, &v)| (k, v))
            .chain(self.series.iter().flat_map(|(k, v)| v.iter().map(move |&x| (k, x))))
            .find(|(_, v)| !v.is_finite());
        match bad {
            Some((k, v)) => Err(Error::Config(format!("metric '{k}' is not finite ({v})"))),
            None => Ok(()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("bad report JSON: {e}")))
    }
}
