//! Cross-scale self-similar sparse attention.
//!
//! At the decision scale `S` the dense attention probabilities are summed
//! over each query block of `C` rows ("column sums") and the top-k keys of
//! every block are kept. The residual `o_cache = o_dense − sparse(inds)` is
//! stored. At a later scale `K` the kept indices are mapped onto the larger
//! KV cache, either linearly or by decompose–align–project, unioned with the
//! sink prefix, and used for a gathered sparse update that is added to the
//! upsampled residual.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{attend_row, AttnWorkload};
use crate::error::{Error, Result};
use crate::exec::{map_range, Parallelism};
use crate::geometry::{delinearize, ScaleSchedule};
use crate::kernel::{gather_pack_attention, index_ranges};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MappingMode {
    Linear,
    #[default]
    Dap,
}

impl fmt::Display for MappingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MappingMode::Linear => "linear",
            MappingMode::Dap => "dap",
        })
    }
}

impl FromStr for MappingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "linear" => Ok(MappingMode::Linear),
            "dap" => Ok(MappingMode::Dap),
            other => Err(Error::Config(format!("unknown mapping_mode '{other}' (expected linear|dap)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cs4aConfig {
    pub decision_scale: usize,
    pub topk_fraction: f64,
    pub query_block: usize,
    pub sink_scales: usize,
    pub mapping_mode: MappingMode,
    pub use_cache: bool,
}

impl Default for Cs4aConfig {
    fn default() -> Self {
        Self {
            decision_scale: 11,
            topk_fraction: 0.2,
            query_block: 192,
            sink_scales: 5,
            mapping_mode: MappingMode::Dap,
            use_cache: true,
        }
    }
}

impl Cs4aConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.topk_fraction > 0.0 && self.topk_fraction <= 1.0) {
            return Err(Error::Config(format!("topk_fraction {} not in (0, 1]", self.topk_fraction)));
        }
        if self.query_block == 0 {
            return Err(Error::Config("query_block must be ≥ 1".into()));
        }
        if self.decision_scale == 0 {
            return Err(Error::Config("decision_scale must be ≥ 1".into()));
        }
        Ok(())
    }

    /// `max(1, round(α·n))`, capped at `n`.
    pub fn topk_count(&self, n: usize) -> usize {
        topk_count(self.topk_fraction, n)
    }
}

pub fn topk_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Per `(batch, head, query block)` sorted, duplicate-free key lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseIndexSet {
    batch: usize,
    heads: usize,
    queries: usize,
    block: usize,
    lists: Vec<Vec<usize>>,
}

impl SparseIndexSet {
    pub fn new(batch: usize, heads: usize, queries: usize, block: usize, lists: Vec<Vec<usize>>) -> Result<Self> {
        if block == 0 {
            return Err(Error::Config("query block size must be positive".into()));
        }
        let expected = batch * heads * queries.div_ceil(block);
        if lists.len() != expected {
            return Err(Error::Shape(format!("{} index lists, expected {expected}", lists.len())));
        }
        if let Some(pos) = lists.iter().position(|l| l.windows(2).any(|w| w[0] >= w[1])) {
            return Err(Error::Config(format!("index list {pos} is not strictly increasing")));
        }
        Ok(Self { batch, heads, queries, block, lists })
    }

    /// Builds a set from arbitrary lists, sorting and de-duplicating each.
    pub fn from_unsorted(
        batch: usize,
        heads: usize,
        queries: usize,
        block: usize,
        mut lists: Vec<Vec<usize>>,
    ) -> Result<Self> {
        for l in &mut lists {
            l.sort_unstable();
            l.dedup();
        }
        Self::new(batch, heads, queries, block, lists)
    }

    /// The same list (all keys `0..kv_len`) for every block.
    pub fn full(batch: usize, heads: usize, queries: usize, block: usize, kv_len: usize) -> Result<Self> {
        let n = batch * heads * queries.div_ceil(block.max(1));
        Self::new(batch, heads, queries, block, vec![(0..kv_len).collect(); n])
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
    pub fn heads(&self) -> usize {
        self.heads
    }
    pub fn queries(&self) -> usize {
        self.queries
    }
    pub fn block(&self) -> usize {
        self.block
    }
    pub fn blocks(&self) -> usize {
        self.queries.div_ceil(self.block)
    }

    /// Rows of query block `g` (the last block may be short).
    pub fn block_rows(&self, g: usize) -> usize {
        self.block.min(self.queries - g * self.block)
    }

    pub fn list(&self, b: usize, h: usize, g: usize) -> &[usize] {
        &self.lists[(b * self.heads + h) * self.blocks() + g]
    }

    pub fn lists(&self) -> &[Vec<usize>] {
        &self.lists
    }

    pub fn max_index(&self) -> Option<usize> {
        self.lists.iter().filter_map(|l| l.last().copied()).max()
    }

    /// Σ over blocks of `rows(block) × |list|`: query–key pairs a sparse kernel evaluates.
    pub fn active_pairs(&self) -> u64 {
        let g = self.blocks();
        self.lists.iter().enumerate().map(|(i, l)| (self.block_rows(i % g) * l.len()) as u64).sum()
    }

    pub fn check_against(&self, batch: usize, heads: usize, queries: usize, kv_len: usize) -> Result<()> {
        if (self.batch, self.heads, self.queries) != (batch, heads, queries) {
            return Err(Error::Shape(format!(
                "index set is for (B={}, H={}, N={}), workload is (B={batch}, H={heads}, N={queries})",
                self.batch, self.heads, self.queries
            )));
        }
        if let Some((i, _)) = self.lists.iter().enumerate().find(|(_, l)| l.is_empty()) {
            let g = self.blocks();
            return Err(Error::EmptyIndexList { batch: i / (g * heads), head: (i / g) % heads, block: i % g });
        }
        if let Some(m) = self.max_index() {
            if m >= kv_len {
                return Err(Error::IndexOutOfRange { index: m, limit: kv_len });
            }
        }
        Ok(())
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Sums probability rows over query blocks of `c` rows: `(B, H, N, M)` → `(B, H, ⌈N/c⌉, M)`.
/// The final block may hold fewer than `c` rows.
pub fn column_sum<T: Real>(probs: &Tensor<T>, c: usize) -> Result<Tensor<T>> {
    if c == 0 {
        return Err(Error::Shape("column-sum block size must be positive".into()));
    }
    let (nb, nh, n, m) = probs.shape();
    let g = n.div_ceil(c);
    let mut out = Tensor::zeros(nb, nh, g, m);
    for b in 0..nb {
        for h in 0..nh {
            let src = probs.head(b, h);
            let dst = out.head_mut(b, h);
            for q in 0..n {
                add_into(&mut dst[(q / c) * m..(q / c + 1) * m], &src[q * m..(q + 1) * m]);
            }
        }
    }
    Ok(out)
}

/// Indices of the `k` largest entries of `row`, ties toward the lower index, ascending.
pub fn topk_row<T: Real>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let cmp = |a: &usize, b: &usize| row[*b].partial_cmp(&row[*a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

/// Top-`k` keys of every column-sum row. `queries` and `block` describe the
/// query blocking the rows of `sums` came from.
pub fn topk_indices<T: Real>(sums: &Tensor<T>, k: usize, queries: usize, block: usize) -> Result<SparseIndexSet> {
    let (nb, nh, g, m) = sums.shape();
    if k == 0 || k > m {
        return Err(Error::Config(format!("top-k count {k} not in [1, {m}]")));
    }
    if queries.div_ceil(block.max(1)) != g {
        return Err(Error::Shape(format!("{g} column-sum rows for {queries} queries in blocks of {block}")));
    }
    let mut lists = Vec::with_capacity(nb * nh * g);
    for b in 0..nb {
        for h in 0..nh {
            for i in 0..g {
                lists.push(topk_row(sums.row(b, h, i), k));
            }
        }
    }
    SparseIndexSet::new(nb, nh, queries, block, lists)
}

/// Instrumented operation counts of the decision step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionCounts {
    /// MACs of the dense attention at `S`.
    pub dense_macs: u64,
    /// Additions performed by the column sums.
    pub column_sum_adds: u64,
    /// MACs of the sparse pass used for the residual.
    pub cache_macs: u64,
}

#[derive(Debug, Clone)]
pub struct DecisionArtifacts<T> {
    pub scale: usize,
    pub side: usize,
    pub o_dense: Tensor<T>,
    pub inds: SparseIndexSet,
    pub o_cache: Tensor<T>,
    pub counts: DecisionCounts,
}

/// Dense attention whose probability rows are streamed into per-block
/// column sums, followed by top-`k` per block. Never materialises the full
/// probability tensor.
pub fn dense_block_topk<T: Real>(
    w: &AttnWorkload<T>,
    c: usize,
    k: usize,
    mode: Parallelism,
) -> Result<(Tensor<T>, SparseIndexSet, DecisionCounts)> {
    w.validate()?;
    let (nb, nh, nq, d, nkv) = (w.batch(), w.heads(), w.queries(), w.head_dim(), w.kv_len());
    if c == 0 {
        return Err(Error::Config("query block must be ≥ 1".into()));
    }
    if k == 0 || k > nkv {
        return Err(Error::Config(format!("top-k count {k} not in [1, {nkv}]")));
    }
    let g = nq.div_ceil(c);
    let scale = w.softmax_scale();
    let all: Vec<usize> = (0..nkv).collect();

    let per_head = map_range(nb * nh, mode, |bh| {
        let (b, h) = (bh / nh, bh % nh);
        let (kh, vh) = (w.k.head(b, h), w.v.head(b, h));
        let mut out = vec![T::zero(); nq * d];
        let mut sums = vec![T::zero(); g * nkv];
        let mut prow = vec![T::zero(); nkv];
        let mut macs = 0u64;
        let mut adds = 0u64;
        for qi in 0..nq {
            attend_row(w.q.row(b, h, qi), kh, vh, d, scale, &all, &mut out[qi * d..(qi + 1) * d], Some(&mut prow));
            macs += 2 * (nkv * d) as u64;
            add_into(&mut sums[(qi / c) * nkv..(qi / c + 1) * nkv], &prow);
            adds += nkv as u64;
        }
        let lists: Vec<Vec<usize>> = (0..g).map(|i| topk_row(&sums[i * nkv..(i + 1) * nkv], k)).collect();
        (out, lists, macs, adds)
    });

    let mut dense = Vec::with_capacity(nb * nh * nq * d);
    let mut lists = Vec::with_capacity(nb * nh * g);
    let mut counts = DecisionCounts::default();
    for (out, l, macs, adds) in per_head {
        dense.extend(out);
        lists.extend(l);
        counts.dense_macs += macs;
        counts.column_sum_adds += adds;
    }
    Ok((Tensor::from_vec(nb, nh, nq, d, dense)?, SparseIndexSet::new(nb, nh, nq, c, lists)?, counts))
}

/// Dense attention, column sums and top-k at the decision scale, plus the
/// residual `o_dense − sparse(inds)`.
pub fn compute_decision_artifacts<T: Real>(
    w: &AttnWorkload<T>,
    cfg: &Cs4aConfig,
    mode: Parallelism,
) -> Result<DecisionArtifacts<T>> {
    cfg.validate()?;
    w.validate()?;
    if w.target_scale != cfg.decision_scale {
        return Err(Error::Config(format!(
            "workload is at scale {}, decision scale is {}",
            w.target_scale, cfg.decision_scale
        )));
    }
    let k = cfg.topk_count(w.kv_len());
    let (o_dense, inds, mut counts) = dense_block_topk(w, cfg.query_block, k, mode)?;
    let (sparse, cache_macs) = sparse_index_attention(w, &inds, mode)?;
    counts.cache_macs = cache_macs;
    let o_cache = o_dense.sub(&sparse)?;
    Ok(DecisionArtifacts {
        scale: w.target_scale,
        side: w.schedule.side(w.target_scale),
        o_dense,
        inds,
        o_cache,
        counts,
    })
}

/// Gather-pack attention over an index set through the tiled kernel.
pub fn sparse_index_attention<T: Real>(
    w: &AttnWorkload<T>,
    idx: &SparseIndexSet,
    mode: Parallelism,
) -> Result<(Tensor<T>, u64)> {
    idx.check_against(w.batch(), w.heads(), w.queries(), w.kv_len())?;
    gather_pack_attention(w, idx.block(), mode, |b, h, g| index_ranges(idx.list(b, h, g)))
}

/// Source block of target block `g_k` under nearest-neighbour correspondence
/// in normalised coordinates: `round_half_up((g_k + ½)/G_K · G_S − ½)`,
/// clamped to `[0, G_S)`.
pub fn map_query_block(g_k: usize, g_s: usize, g_kcount: usize) -> Result<usize> {
    if g_k >= g_kcount {
        return Err(Error::IndexOutOfRange { index: g_k, limit: g_kcount });
    }
    if g_s == 0 {
        return Err(Error::Config("source has no query blocks".into()));
    }
    // round_half_up(x − ½) = floor(x) with x = (2g+1)·G_S / (2·G_K)
    Ok(((2 * g_k + 1) * g_s / (2 * g_kcount)).min(g_s - 1))
}

/// Element-wise `floor(N_k/N_S · j)`, clamped to `kv_len − 1`, keeping the
/// source block structure.
pub fn map_indices_linear(inds: &SparseIndexSet, n_s: usize, n_k: usize, kv_len: usize) -> Result<SparseIndexSet> {
    if n_s == 0 || n_k < n_s || kv_len == 0 {
        return Err(Error::Config(format!("linear mapping needs 0 < N_S ≤ N_k (got {n_s}, {n_k})")));
    }
    let lists = inds
        .lists()
        .iter()
        .map(|l| {
            let mut m: Vec<usize> = l.iter().map(|&j| (j * n_k / n_s).min(kv_len - 1)).collect();
            m.dedup();
            m
        })
        .collect();
    SparseIndexSet::new(inds.batch(), inds.heads(), inds.queries(), inds.block(), lists)
}

/// Decompose–align–project for a single global index. `None` when the
/// aligned scale falls below scale 1.
pub fn map_index_dap(schedule: &ScaleSchedule, j: usize, s: usize, k: usize) -> Result<Option<usize>> {
    let so = schedule.decompose(j)?;
    if so.scale > s {
        return Err(Error::IndexOutOfRange { index: j, limit: schedule.prefix(s) });
    }
    let shift = k - s;
    let target = so.scale + shift;
    if target < 1 {
        return Ok(None);
    }
    let offset = schedule.project_offset(so.offset, so.scale, target)?;
    Ok(Some(schedule.prefix(target - 1) + offset))
}

fn union_sink(mut list: Vec<usize>, sink_len: usize) -> Vec<usize> {
    list.extend(0..sink_len);
    list.sort_unstable();
    list.dedup();
    list
}

/// Re-blocks a source-scale index set onto the query blocks of a target
/// scale through [`map_query_block`], unioning the sink prefix.
pub fn rebase_blocks(src: &SparseIndexSet, target_queries: usize, sink_len: usize) -> Result<SparseIndexSet> {
    let c = src.block();
    let gk = target_queries.div_ceil(c);
    let gs = src.blocks();
    let mut lists = Vec::with_capacity(src.batch() * src.heads() * gk);
    for b in 0..src.batch() {
        for h in 0..src.heads() {
            for g in 0..gk {
                let from = map_query_block(g, gs, gk)?;
                lists.push(union_sink(src.list(b, h, from).to_vec(), sink_len));
            }
        }
    }
    SparseIndexSet::new(src.batch(), src.heads(), target_queries, c, lists)
}

/// Maps a decision-scale index set to target scale `k`: each target query
/// block takes its source block's indices through decompose–align–project
/// (`l' = k − (s − l)`, spatial floor projection), dropping indices whose
/// aligned scale would be below 1, then unions the first `sink_scales` scales.
pub fn map_indices_dap(
    schedule: &ScaleSchedule,
    inds: &SparseIndexSet,
    s: usize,
    k: usize,
    sink_scales: usize,
) -> Result<SparseIndexSet> {
    schedule.check_scale(s)?;
    schedule.check_scale(k)?;
    if s >= k {
        return Err(Error::Config(format!("decision scale {s} must precede target scale {k}")));
    }
    if sink_scales > s {
        return Err(Error::Config(format!("sink_scales {sink_scales} exceeds decision scale {s}")));
    }
    let mapped_src: Vec<Vec<usize>> = inds
        .lists()
        .iter()
        .map(|l| {
            l.iter()
                .map(|&j| map_index_dap(schedule, j, s, k))
                .filter_map(|r| r.transpose())
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let src = SparseIndexSet::from_unsorted(inds.batch(), inds.heads(), inds.queries(), inds.block(), mapped_src)?;
    rebase_blocks(&src, schedule.count(k), schedule.prefix(sink_scales))
}

/// Nearest-neighbour upsampling of per-query rows from a `side_s²` grid to a `side_k²` grid.
pub fn upsample_cache<T: Real>(o_cache: &Tensor<T>, side_s: usize, side_k: usize) -> Result<Tensor<T>> {
    let (nb, nh, n, d) = o_cache.shape();
    if n != side_s * side_s {
        return Err(Error::Shape(format!("cache has {n} rows, grid side {side_s}")));
    }
    if side_s == 0 || side_k < side_s {
        return Err(Error::Shape(format!("cannot upsample side {side_s} to {side_k}")));
    }
    let mut out = Tensor::zeros(nb, nh, side_k * side_k, d);
    for b in 0..nb {
        for h in 0..nh {
            let src = o_cache.head(b, h);
            let dst = out.head_mut(b, h);
            for (q, row) in dst.chunks_mut(d).enumerate() {
                let (x, y) = delinearize(q, side_k)?;
                let (sx, sy) = (x * side_s / side_k, y * side_s / side_k);
                let sq = sx * side_s + sy;
                row.copy_from_slice(&src[sq * d..(sq + 1) * d]);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Cs4aOutput<T> {
    pub output: Tensor<T>,
    pub indices: SparseIndexSet,
    /// MACs of the sparse update.
    pub macs: u64,
}

/// Index set at target scale `w.target_scale` for the configured mapping.
pub fn target_indices<T: Real>(
    w: &AttnWorkload<T>,
    art: &DecisionArtifacts<T>,
    cfg: &Cs4aConfig,
) -> Result<SparseIndexSet> {
    let (s, k) = (art.scale, w.target_scale);
    if s >= k {
        return Err(Error::Config(format!("target scale {k} must follow decision scale {s}")));
    }
    let sched = &w.schedule;
    let sink = sched.prefix(cfg.sink_scales.min(s));
    match cfg.mapping_mode {
        MappingMode::Dap => map_indices_dap(sched, &art.inds, s, k, cfg.sink_scales.min(s)),
        MappingMode::Linear => {
            let lin = map_indices_linear(&art.inds, sched.count(s), sched.count(k), w.kv_len())?;
            rebase_blocks(&lin, w.queries(), sink)
        }
    }
}

/// Sparse update over explicit target indices, plus the upsampled residual when `use_cache`.
pub fn cs4a_attention_with_indices<T: Real>(
    w: &AttnWorkload<T>,
    art: &DecisionArtifacts<T>,
    indices: SparseIndexSet,
    use_cache: bool,
    mode: Parallelism,
) -> Result<Cs4aOutput<T>> {
    if (art.o_cache.batch(), art.o_cache.heads(), art.o_cache.cols()) != (w.batch(), w.heads(), w.head_dim()) {
        return Err(Error::Shape("decision artifacts and workload disagree on (B, H, D)".into()));
    }
    let (delta, macs) = sparse_index_attention(w, &indices, mode)?;
    let output = if use_cache {
        upsample_cache(&art.o_cache, art.side, w.schedule.side(w.target_scale))?.add(&delta)?
    } else {
        delta
    };
    Ok(Cs4aOutput { output, indices, macs })
}

pub fn cs4a_attention<T: Real>(
    w: &AttnWorkload<T>,
    art: &DecisionArtifacts<T>,
    cfg: &Cs4aConfig,
    mode: Parallelism,
) -> Result<Cs4aOutput<T>> {
    cfg.validate()?;
    w.validate()?;
    let indices = target_indices(w, art, cfg)?;
    cs4a_attention_with_indices(w, art, indices, cfg.use_cache, mode)
}
