//! Cross-scale local sparse attention.
//!
//! A query at target scale `K` sees (a) every key of the first
//! `sink_scales` scales, and (b) on each windowed historical scale `h`, the
//! keys within Chebyshev radius `⌊w_h/2⌋` of the query's position aligned
//! onto scale `h`'s grid. Windows clip at grid edges. The token mask is
//! OR-aggregated into `B × B` tiles and the kernel runs dense math on the
//! active tiles only.

use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::AttnWorkload;
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::geometry::{align_axis, ScaleSchedule};
use crate::kernel::gather_pack_attention;
use crate::tensor::{Real, Tensor};

/// Treatment of historical scales between the sink prefix and the windowed tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum IntermediatePolicy {
    #[default]
    Masked,
    Windowed(usize),
}

impl fmt::Display for IntermediatePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IntermediatePolicy::Masked => f.write_str("masked"),
            IntermediatePolicy::Windowed(w) => write!(f, "windowed({w})"),
        }
    }
}

impl FromStr for IntermediatePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "masked" {
            return Ok(IntermediatePolicy::Masked);
        }
        s.strip_prefix("windowed(")
            .and_then(|r| r.strip_suffix(')'))
            .and_then(|n| n.trim().parse().ok())
            .map(IntermediatePolicy::Windowed)
            .ok_or_else(|| Error::Config(format!("unknown intermediate_policy '{s}' (expected masked | windowed(w))")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CslaConfig {
    pub sink_scales: usize,
    /// Window sizes of the last `windows.len()` historical scales, oldest first.
    pub windows: Vec<usize>,
    pub block: usize,
    pub intermediate: IntermediatePolicy,
}

impl Default for CslaConfig {
    fn default() -> Self {
        Self { sink_scales: 5, windows: vec![3, 5, 7], block: 128, intermediate: IntermediatePolicy::Masked }
    }
}

impl CslaConfig {
    pub fn validate(&self) -> Result<()> {
        let mut all = self.windows.clone();
        if let IntermediatePolicy::Windowed(w) = self.intermediate {
            all.push(w);
        }
        if let Some(w) = all.iter().find(|&&w| w == 0 || w % 2 == 0) {
            return Err(Error::Config(format!("window size {w} must be odd and ≥ 1")));
        }
        if self.block == 0 {
            return Err(Error::Config("block must be ≥ 1".into()));
        }
        Ok(())
    }

    /// `(scale, window)` pairs for target scale `k`, excluding scales already
    /// inside the sink prefix.
    pub fn scale_windows(&self, schedule: &ScaleSchedule, k: usize) -> Vec<(usize, usize)> {
        let n = self.windows.len();
        let mut out = Vec::new();
        let tail_start = (k + 1).saturating_sub(n).max(1);
        if let IntermediatePolicy::Windowed(w) = self.intermediate {
            for h in self.sink_scales + 1..tail_start {
                out.push((h, w));
            }
        }
        for (i, &w) in self.windows.iter().enumerate() {
            // windows[i] belongs to scale k - (n - 1 - i)
            let back = n - 1 - i;
            if back >= k {
                continue;
            }
            let h = k - back;
            if h > self.sink_scales && h <= schedule.num_scales() {
                out.push((h, w));
            }
        }
        out
    }
}

/// Row-major packed boolean matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    words: usize,
    bits: Vec<u64>,
}

impl BitMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        let words = cols.div_ceil(64);
        Self { rows, cols, words, bits: vec![0; rows * words] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.words + c / 64] >> (c % 64) & 1 == 1
    }

    pub fn set(&mut self, r: usize, c: usize) {
        self.bits[r * self.words + c / 64] |= 1 << (c % 64);
    }

    /// Sets columns `[range.start, range.end)` of row `r`.
    pub fn set_range(&mut self, r: usize, range: Range<usize>) {
        let row = &mut self.bits[r * self.words..(r + 1) * self.words];
        let mut c = range.start;
        while c < range.end {
            let (w, bit) = (c / 64, c % 64);
            let span = (64 - bit).min(range.end - c);
            let m = if span == 64 { u64::MAX } else { ((1u64 << span) - 1) << bit };
            row[w] |= m;
            c += span;
        }
    }

    pub fn fill(&mut self) {
        for r in 0..self.rows {
            self.set_range(r, 0..self.cols);
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn row_ones(&self, r: usize) -> impl Iterator<Item = usize> + '_ {
        let row = &self.bits[r * self.words..(r + 1) * self.words];
        row.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    None
                } else {
                    let t = w.trailing_zeros() as usize;
                    w &= w - 1;
                    Some(wi * 64 + t)
                }
            })
        })
    }
}

/// Block-level mask over `(⌈N_k/B⌉, ⌈N_≤k/B⌉)` tiles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    grid: BitMatrix,
    block: usize,
    queries: usize,
    kv_len: usize,
}

impl BlockMask {
    pub fn empty(queries: usize, kv_len: usize, block: usize) -> Self {
        Self { grid: BitMatrix::new(queries.div_ceil(block), kv_len.div_ceil(block)), block, queries, kv_len }
    }

    pub fn full(queries: usize, kv_len: usize, block: usize) -> Self {
        let mut m = Self::empty(queries, kv_len, block);
        m.grid.fill();
        m
    }

    pub fn grid(&self) -> &BitMatrix {
        &self.grid
    }
    pub fn block(&self) -> usize {
        self.block
    }
    pub fn queries(&self) -> usize {
        self.queries
    }
    pub fn kv_len(&self) -> usize {
        self.kv_len
    }
    pub fn rows(&self) -> usize {
        self.grid.rows()
    }
    pub fn cols(&self) -> usize {
        self.grid.cols()
    }

    pub fn is_active(&self, u: usize, v: usize) -> bool {
        self.grid.get(u, v)
    }

    pub fn set_active(&mut self, u: usize, v: usize) {
        self.grid.set(u, v);
    }

    pub fn active_count(&self) -> usize {
        self.grid.count_ones()
    }

    /// Whether the token pair `(q, j)` falls inside an active tile.
    pub fn allows(&self, q: usize, j: usize) -> bool {
        self.grid.get(q / self.block, j / self.block)
    }

    /// Key ranges covered by the active tiles of row `u`, merged and clipped to the KV length.
    pub fn key_ranges(&self, u: usize) -> Vec<Range<usize>> {
        let mut out: Vec<Range<usize>> = Vec::new();
        for v in self.grid.row_ones(u) {
            let r = v * self.block..((v + 1) * self.block).min(self.kv_len);
            match out.last_mut() {
                Some(last) if last.end == r.start => last.end = r.end,
                _ => out.push(r),
            }
        }
        out
    }

    /// Query–key pairs inside active tiles, counting ragged tiles at their true extent.
    pub fn active_pairs(&self) -> u64 {
        (0..self.rows())
            .map(|u| {
                let rows = self.block.min(self.queries - u * self.block) as u64;
                let keys: usize = self.key_ranges(u).iter().map(|r| r.len()).sum();
                rows * keys as u64
            })
            .sum()
    }

    /// Binary PGM (P5), one pixel per tile, active = 255.
    pub fn write_pgm(&self, mut w: impl Write) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.cols(), self.rows())?;
        let mut row = vec![0u8; self.cols()];
        for u in 0..self.rows() {
            for (v, px) in row.iter_mut().enumerate() {
                *px = if self.is_active(u, v) { 255 } else { 0 };
            }
            w.write_all(&row)?;
        }
        Ok(())
    }

    /// CSV of active `(u, v)` pairs with a `u,v` header.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "u,v")?;
        for u in 0..self.rows() {
            for v in self.grid.row_ones(u) {
                writeln!(w, "{u},{v}")?;
            }
        }
        Ok(())
    }
}

/// `1 − active/total` over the full tile grid.
pub fn mask_sparsity(mask: &BlockMask) -> f64 {
    let total = mask.rows() * mask.cols();
    if total == 0 {
        return 1.0;
    }
    1.0 - mask.active_count() as f64 / total as f64
}

/// Key rows and key columns of the window on scale `h` around aligned `(ax, ay)`.
fn window_bounds(ax: usize, ay_lo: usize, ay_hi: usize, radius: usize, side: usize) -> (Range<usize>, Range<usize>) {
    let rows = ax.saturating_sub(radius)..(ax + radius + 1).min(side);
    let cols = ay_lo.saturating_sub(radius)..(ay_hi + radius + 1).min(side);
    (rows, cols)
}

fn check_target(schedule: &ScaleSchedule, k: usize, cfg: &CslaConfig) -> Result<()> {
    cfg.validate()?;
    schedule.check_scale(k)?;
    if cfg.sink_scales > k {
        return Err(Error::Config(format!("sink_scales {} exceeds target scale {k}", cfg.sink_scales)));
    }
    Ok(())
}

/// Active global KV indices of query `q` at target scale `k`, ascending.
pub fn token_mask_query(schedule: &ScaleSchedule, k: usize, cfg: &CslaConfig, q: usize) -> Result<Vec<usize>> {
    check_target(schedule, k, cfg)?;
    let sk = schedule.side(k);
    if q >= sk * sk {
        return Err(Error::IndexOutOfRange { index: q, limit: sk * sk });
    }
    let (x, y) = (q / sk, q % sk);
    let mut keys: Vec<usize> = (0..schedule.prefix(cfg.sink_scales)).collect();
    let mut windows = cfg.scale_windows(schedule, k);
    windows.sort_unstable();
    for (h, w) in windows {
        let sh = schedule.side(h);
        let (ax, ay) = (align_axis(x, sk, sh), align_axis(y, sk, sh));
        let (rows, cols) = window_bounds(ax, ay, ay, w / 2, sh);
        let base = schedule.prefix(h - 1);
        for r in rows {
            keys.extend(cols.clone().map(|c| base + r * sh + c));
        }
    }
    keys.sort_unstable();
    keys.dedup();
    Ok(keys)
}

/// Full token-level mask `(N_k, N_≤k)`.
pub fn token_mask(schedule: &ScaleSchedule, k: usize, cfg: &CslaConfig) -> Result<BitMatrix> {
    check_target(schedule, k, cfg)?;
    let sk = schedule.side(k);
    let mut m = BitMatrix::new(sk * sk, schedule.prefix(k));
    let sink = schedule.prefix(cfg.sink_scales);
    let windows = cfg.scale_windows(schedule, k);
    for q in 0..sk * sk {
        let (x, y) = (q / sk, q % sk);
        m.set_range(q, 0..sink);
        for &(h, w) in &windows {
            let sh = schedule.side(h);
            let (ax, ay) = (align_axis(x, sk, sh), align_axis(y, sk, sh));
            let (rows, cols) = window_bounds(ax, ay, ay, w / 2, sh);
            let base = schedule.prefix(h - 1);
            for r in rows {
                m.set_range(q, base + r * sh + cols.start..base + r * sh + cols.end);
            }
        }
    }
    Ok(m)
}

/// Fraction of inactive query–key pairs in the token mask, without materialising it.
pub fn token_sparsity(schedule: &ScaleSchedule, k: usize, cfg: &CslaConfig) -> Result<f64> {
    let nq = schedule.count(k);
    let mut active = 0usize;
    for q in 0..nq {
        active += token_mask_query(schedule, k, cfg, q)?.len();
    }
    Ok(1.0 - active as f64 / (nq * schedule.prefix(k)) as f64)
}

/// OR-aggregates a token mask into `b × b` tiles; edge tiles may be ragged.
pub fn block_aggregate(tokens: &BitMatrix, b: usize) -> Result<BlockMask> {
    if b == 0 {
        return Err(Error::Config("block must be ≥ 1".into()));
    }
    let mut mask = BlockMask::empty(tokens.rows(), tokens.cols(), b);
    for q in 0..tokens.rows() {
        let mut last = usize::MAX;
        for j in tokens.row_ones(q) {
            let v = j / b;
            if v != last {
                mask.set_active(q / b, v);
                last = v;
            }
        }
    }
    Ok(mask)
}

/// Block mask built directly at tile granularity: for each query tile, the
/// key-column span that each window band of each query row can reach is
/// marked, plus the sink prefix. Identical to aggregating the token mask.
pub fn block_mask_direct(schedule: &ScaleSchedule, k: usize, cfg: &CslaConfig) -> Result<BlockMask> {
    check_target(schedule, k, cfg)?;
    let b = cfg.block;
    let sk = schedule.side(k);
    let nq = sk * sk;
    let mut mask = BlockMask::empty(nq, schedule.prefix(k), b);
    let sink = schedule.prefix(cfg.sink_scales);
    let windows = cfg.scale_windows(schedule, k);
    for u in 0..mask.rows() {
        let (q0, q1) = (u * b, ((u + 1) * b).min(nq));
        if sink > 0 {
            for v in 0..=(sink - 1) / b {
                mask.set_active(u, v);
            }
        }
        let (x0, x1) = (q0 / sk, (q1 - 1) / sk);
        for x in x0..=x1 {
            let y0 = if x == x0 { q0 % sk } else { 0 };
            let y1 = if x == x1 { (q1 - 1) % sk } else { sk - 1 };
            for &(h, w) in &windows {
                let sh = schedule.side(h);
                let ax = align_axis(x, sk, sh);
                let (ay0, ay1) = (align_axis(y0, sk, sh), align_axis(y1, sk, sh));
                let (rows, cols) = window_bounds(ax, ay0, ay1, w / 2, sh);
                let base = schedule.prefix(h - 1);
                for r in rows {
                    let first = base + r * sh + cols.start;
                    let last = base + r * sh + cols.end - 1;
                    for v in first / b..=last / b {
                        mask.set_active(u, v);
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Block-sparse attention: every query tile gathers the keys/values of its
/// active tiles into a packed buffer and runs one softmax over them.
/// Returns the output and the MAC count.
pub fn block_sparse_attention<T: Real>(
    w: &AttnWorkload<T>,
    mask: &BlockMask,
    mode: Parallelism,
) -> Result<(Tensor<T>, u64)> {
    w.validate()?;
    if mask.queries() != w.queries() || mask.kv_len() != w.kv_len() {
        return Err(Error::Shape(format!(
            "mask is for {}×{}, workload is {}×{}",
            mask.queries(),
            mask.kv_len(),
            w.queries(),
            w.kv_len()
        )));
    }
    let ranges: Vec<Vec<Range<usize>>> = (0..mask.rows()).map(|u| mask.key_ranges(u)).collect();
    if let Some(row) = ranges.iter().position(|r| r.is_empty()) {
        return Err(Error::EmptyMaskRow { row });
    }
    gather_pack_attention(w, mask.block(), mode, |_, _, u| ranges[u].clone())
}
