//! Seeded synthetic Q/K/V.
//!
//! Each role (query, key, value) and scale draws from its own SplitMix64
//! stream through Box–Muller, laid out `(batch, head, token, dim)`. In
//! `random` mode every scale is i.i.d. unit Gaussian. In `self_similar` mode
//! scale 1 is i.i.d. and scale `l` is the nearest-neighbour upsample of scale
//! `l − 1` plus `σ`-scaled noise from scale `l`'s stream, for all three roles.
//!
//! Keys and values of scale `l` do not depend on the target scale, so the
//! workloads of one family share a consistent KV cache.

use crate::attention::AttnWorkload;
use crate::error::{Error, Result};
use crate::geometry::ScaleSchedule;
use crate::harness::config::{HarnessConfig, WorkloadMode};
use crate::rng::{Gaussian, Role, SplitMix64};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone)]
pub struct WorkloadGenerator {
    pub schedule: ScaleSchedule,
    pub batch: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mode: WorkloadMode,
    pub sigma: f64,
    pub seed: u64,
}

impl WorkloadGenerator {
    pub fn from_config(cfg: &HarnessConfig) -> Result<Self> {
        Ok(Self {
            schedule: cfg.schedule()?,
            batch: cfg.batch,
            heads: cfg.heads,
            head_dim: cfg.head_dim,
            mode: cfg.workload,
            sigma: cfg.sigma,
            seed: cfg.seed,
        })
    }

    fn noise(&self, role: Role, l: usize) -> Vec<f64> {
        let n = self.batch * self.heads * self.schedule.count(l) * self.head_dim;
        let mut g = Gaussian::new(SplitMix64::for_stream(self.seed, role, l as u64));
        (0..n).map(|_| g.sample()).collect()
    }

    /// Tokens of scales `1..=k` for one role, each `(B, H, N_l, D)` flattened.
    pub fn scale_tokens(&self, role: Role, k: usize) -> Result<Vec<Vec<f64>>> {
        self.schedule.check_scale(k)?;
        let (bh, d) = (self.batch * self.heads, self.head_dim);
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(k);
        for l in 1..=k {
            let z = self.noise(role, l);
            let tokens = match (self.mode, out.last()) {
                (WorkloadMode::SelfSimilar, Some(prev)) => {
                    let (s, s0) = (self.schedule.side(l), self.schedule.side(l - 1));
                    let (n, n0) = (s * s, s0 * s0);
                    let mut t = vec![0.0; bh * n * d];
                    for hb in 0..bh {
                        for q in 0..n {
                            let (x, y) = (q / s, q % s);
                            let src = (x * s0 / s) * s0 + y * s0 / s;
                            let dst = (hb * n + q) * d;
                            let from = (hb * n0 + src) * d;
                            for c in 0..d {
                                t[dst + c] = prev[from + c] + self.sigma * z[dst + c];
                            }
                        }
                    }
                    t
                }
                _ => z,
            };
            out.push(tokens);
        }
        Ok(out)
    }

    /// Concatenates scales `1..=k` along the token axis: `(B, H, N_≤k, D)`.
    fn concat<T: Real>(&self, scales: &[Vec<f64>], k: usize) -> Result<Tensor<T>> {
        let (bh, d) = (self.batch * self.heads, self.head_dim);
        let total = self.schedule.prefix(k);
        let mut data = Vec::with_capacity(bh * total * d);
        for hb in 0..bh {
            for (l, t) in scales.iter().take(k).enumerate() {
                let n = self.schedule.count(l + 1) * d;
                data.extend(t[hb * n..(hb + 1) * n].iter().map(|&x| T::cast_f64(x)));
            }
        }
        Tensor::from_vec(self.batch, self.heads, total, d, data)
    }

    fn assemble<T: Real>(
        &self,
        q: &[Vec<f64>],
        k: &[Vec<f64>],
        v: &[Vec<f64>],
        scale: usize,
    ) -> Result<AttnWorkload<T>> {
        let n = self.schedule.count(scale);
        let q = Tensor::from_vec(
            self.batch,
            self.heads,
            n,
            self.head_dim,
            q[scale - 1].iter().map(|&x| T::cast_f64(x)).collect(),
        )?;
        AttnWorkload::new(q, self.concat(k, scale)?, self.concat(v, scale)?, self.schedule.clone(), scale)
    }

    /// The workload of one step at scale `k`.
    pub fn workload<T: Real>(&self, k: usize) -> Result<AttnWorkload<T>> {
        Ok(self.family(k, k)?.pop().expect("one workload"))
    }

    /// Workloads for steps `s..=k`, generated from one set of token streams.
    pub fn family<T: Real>(&self, s: usize, k: usize) -> Result<Vec<AttnWorkload<T>>> {
        if s == 0 || s > k {
            return Err(Error::Config(format!("invalid scale range {s}..={k}")));
        }
        let q = self.scale_tokens(Role::Query, k)?;
        let kk = self.scale_tokens(Role::Key, k)?;
        let v = self.scale_tokens(Role::Value, k)?;
        (s..=k).map(|l| self.assemble(&q, &kk, &v, l)).collect()
    }
}
