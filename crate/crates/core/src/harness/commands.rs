//! The four harness subcommands. Each returns a [`Report`]; files go to the
//! output directory when one is given.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::analysis::{
    cross_scale_similarity, flops_cs4a, flops_cs4a_exact, flops_csla, flops_csla_bound, flops_csla_token, flops_dense,
    random_index_set_like, recall_against, shuffled_similarity, sink_retention_curve, Report,
};
use crate::attention::{dense_cross_scale_attention, masked_dense_attention, AttnWorkload};
use crate::cs4a::{
    column_sum, compute_decision_artifacts, cs4a_attention, dense_block_topk, map_index_dap, map_indices_dap,
    map_indices_linear, rebase_blocks, topk_count, topk_indices, topk_row,
};
use crate::csla::{
    block_aggregate, block_mask_direct, block_sparse_attention, mask_sparsity, token_mask, token_sparsity, CslaConfig,
};
use crate::error::Result;
use crate::exec::{single_threaded, Parallelism};
use crate::harness::config::HarnessConfig;
use crate::harness::workload::WorkloadGenerator;
use crate::kernel::dense_attention_kernel;
use crate::rng::{Role, SplitMix64};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Mask,
    Verify,
    Bench,
    Analyze,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Mask => "mask",
            Command::Verify => "verify",
            Command::Bench => "bench",
            Command::Analyze => "analyze",
        }
    }
}

/// Writes `name` under `out` (created if needed) and returns the path.
fn emit(out: Option<&Path>, name: &str, bytes: &[u8]) -> Result<Option<PathBuf>> {
    let Some(dir) = out else { return Ok(None) };
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, bytes)?;
    Ok(Some(path))
}

/// Runs `cmd`. The report is also written as `<cmd>.json` when `out` is set.
pub fn run(cmd: Command, cfg: &HarnessConfig, out: Option<&Path>) -> Result<Report> {
    cfg.validate()?;
    let mut report = Report::new(cmd.name(), cfg.seed, cfg.to_map());
    match cmd {
        Command::Mask => mask(cfg, out, &mut report)?,
        Command::Verify => verify(cfg, &mut report)?,
        Command::Bench => bench(cfg, &mut report)?,
        Command::Analyze => analyze(cfg, out, &mut report)?,
    }
    emit(out, &format!("{}.json", cmd.name()), report.to_json()?.as_bytes())?;
    Ok(report)
}

/// Ablation grid of window lists and sink bounds, labelled for reports.
pub fn ablation_grid(base: &CslaConfig) -> Vec<(String, CslaConfig)> {
    let mut out = Vec::new();
    for w in [[1, 3, 5], [3, 3, 3], [3, 5, 7], [5, 7, 9], [7, 9, 11]] {
        let label = format!("windows_{}_{}_{}", w[0], w[1], w[2]);
        out.push((label, CslaConfig { windows: w.to_vec(), sink_scales: 5, ..base.clone() }));
    }
    for s in [6, 7, 8] {
        out.push((format!("sink_{s}"), CslaConfig { windows: vec![3, 5, 7], sink_scales: s, ..base.clone() }));
    }
    out.push(("no_sink".into(), CslaConfig { windows: vec![3, 5, 7], sink_scales: 0, ..base.clone() }));
    out
}

fn mask(cfg: &HarnessConfig, out: Option<&Path>, report: &mut Report) -> Result<()> {
    let sched = cfg.schedule()?;
    let k = cfg.target_scale;
    let m = block_mask_direct(&sched, k, &cfg.csla)?;
    let d = cfg.head_dim;
    report
        .metric("block_sparsity", mask_sparsity(&m))
        .metric("token_sparsity", token_sparsity(&sched, k, &cfg.csla)?)
        .metric("active_blocks", m.active_count() as f64)
        .metric("total_blocks", (m.rows() * m.cols()) as f64)
        .metric("flops_dense_per_head", flops_dense(&sched, k, d)? as f64)
        .metric("flops_csla_per_head", flops_csla(&sched, k, d, &cfg.csla)? as f64)
        .metric("flops_csla_token_per_head", flops_csla_token(&sched, k, d, &cfg.csla)? as f64)
        .metric("flops_csla_bound_per_head", flops_csla_bound(&sched, k, d, &cfg.csla)? as f64);

    let mut pgm = Vec::new();
    m.write_pgm(&mut pgm)?;
    emit(out, &format!("mask_b{}.pgm", cfg.csla.block), &pgm)?;
    let mut csv = Vec::new();
    m.write_csv(&mut csv)?;
    emit(out, &format!("mask_b{}.csv", cfg.csla.block), &csv)?;

    let mut table = String::from("config,block_sparsity,token_sparsity\n");
    for (label, c) in ablation_grid(&cfg.csla) {
        if c.sink_scales > k {
            continue;
        }
        let bs = mask_sparsity(&block_mask_direct(&sched, k, &c)?);
        let ts = token_sparsity(&sched, k, &c)?;
        report.metric(&format!("ablation_{label}"), bs);
        table.push_str(&format!("{label},{bs},{ts}\n"));
    }
    emit(out, "sparsity.csv", table.as_bytes())?;
    Ok(())
}

type CheckFn<'a> = Box<dyn Fn() -> Result<(bool, String)> + 'a>;

fn verify(cfg: &HarnessConfig, report: &mut Report) -> Result<()> {
    let sched = cfg.schedule()?;
    let (s, k) = (cfg.cs4a.decision_scale, cfg.target_scale);
    // Numerical checks run on one (batch, head) at a small head dimension.
    let gen = WorkloadGenerator {
        batch: 1,
        heads: 1,
        head_dim: cfg.head_dim.min(16),
        ..WorkloadGenerator::from_config(cfg)?
    };
    let small_k = k.min(9);
    let checks: Vec<(&str, CheckFn)> = vec![
        (
            "schedule_cumulative",
            Box::new(|| {
                let ok =
                    (1..=sched.num_scales()).all(|l| sched.prefix(l) - sched.prefix(l - 1) == sched.side(l).pow(2));
                Ok((ok, format!("{} scales, {} tokens", sched.num_scales(), sched.total_tokens())))
            }),
        ),
        (
            "decompose_round_trip",
            Box::new(|| {
                for j in 0..sched.total_tokens() {
                    if sched.recompose(sched.decompose(j)?)? != j {
                        return Ok((false, format!("index {j}")));
                    }
                }
                Ok((true, format!("{} indices", sched.total_tokens())))
            }),
        ),
        (
            "dense_kernel_vs_reference",
            Box::new(|| {
                let w: AttnWorkload<f64> = gen.workload(small_k)?;
                let (r, _) = dense_cross_scale_attention(&w, false, Parallelism::Parallel)?;
                let (o, _) = dense_attention_kernel(&w, Parallelism::Parallel)?;
                let e = o.max_abs_diff(&r);
                Ok((e <= 1e-10, format!("max abs diff {e:e} at scale {small_k}")))
            }),
        ),
        (
            "block_mask_direct_equals_aggregate",
            Box::new(|| {
                let tokens = token_mask(&sched, k, &cfg.csla)?;
                for b in [cfg.csla.block, 64, 1] {
                    let c = CslaConfig { block: b, ..cfg.csla.clone() };
                    if block_mask_direct(&sched, k, &c)? != block_aggregate(&tokens, b)? {
                        return Ok((false, format!("differs at B={b}")));
                    }
                }
                Ok((true, format!("B ∈ {{{}, 64, 1}}", cfg.csla.block)))
            }),
        ),
        (
            "mask_rows_nonempty",
            Box::new(|| {
                let m = block_mask_direct(&sched, k, &cfg.csla)?;
                let empty = (0..m.rows()).filter(|&u| m.key_ranges(u).is_empty()).count();
                Ok((empty == 0 || cfg.csla.sink_scales == 0, format!("{empty} empty rows")))
            }),
        ),
        (
            "block_sparse_vs_masked_dense",
            Box::new(|| {
                let w: AttnWorkload<f64> = gen.workload(k)?;
                let w32 = AttnWorkload::new(w.q.cast::<f32>(), w.k.cast(), w.v.cast(), w.schedule.clone(), k)?;
                let m = block_mask_direct(&sched, k, &cfg.csla)?;
                let (o32, macs) = block_sparse_attention(&w32, &m, Parallelism::Parallel)?;
                let r32 = masked_dense_attention(&w32, |q, j| m.allows(q, j), Parallelism::Parallel)?;
                let (o, _) = block_sparse_attention(&w, &m, Parallelism::Parallel)?;
                let r = masked_dense_attention(&w, |q, j| m.allows(q, j), Parallelism::Parallel)?;
                let (e32, e64) = (o32.max_abs_diff(&r32), o.max_abs_diff(&r));
                let flops = flops_csla(&sched, k, w.head_dim(), &cfg.csla)?;
                Ok((
                    e32 <= 1e-5 && e64 <= 1e-10 && macs == flops,
                    format!("max abs diff f32 {e32:e}, f64 {e64:e}; MACs {macs} vs estimate {flops}"),
                ))
            }),
        ),
        (
            "cs4a_reconstruction",
            Box::new(|| {
                let w: AttnWorkload<f64> = gen.workload(s)?;
                let art = compute_decision_artifacts(&w, &cfg.cs4a, Parallelism::Parallel)?;
                let sparse = crate::attention::sparse_attention_over_indices(&w, &art.inds, Parallelism::Parallel)?;
                let e = art.o_cache.add(&sparse)?.max_abs_diff(&art.o_dense);
                Ok((e <= 1e-10, format!("max abs diff {e:e} at scale {s}")))
            }),
        ),
        (
            "dap_mapping_properties",
            Box::new(|| {
                let w: AttnWorkload<f64> = gen.workload(s)?;
                let kk = topk_count(cfg.cs4a.topk_fraction, w.kv_len());
                let (_, inds, _) = dense_block_topk(&w, cfg.cs4a.query_block, kk, Parallelism::Parallel)?;
                let mapped = map_indices_dap(&sched, &inds, s, k, cfg.cs4a.sink_scales)?;
                let sink = sched.prefix(cfg.cs4a.sink_scales);
                let sorted = mapped.lists().iter().all(|l| l.windows(2).all(|p| p[0] < p[1]));
                let in_range = mapped.max_index().is_some_and(|m| m < sched.prefix(k));
                let has_sink = mapped
                    .lists()
                    .iter()
                    .all(|l| l.len() >= sink && l[..sink].iter().enumerate().all(|(i, &j)| i == j));
                let mut aligned = true;
                for j in 0..sched.prefix(s) {
                    let l = sched.decompose(j)?.scale;
                    if let Some(t) = map_index_dap(&sched, j, s, k)? {
                        aligned &= sched.decompose(t)?.scale == l + (k - s);
                    }
                }
                let lin = rebase_blocks(
                    &map_indices_linear(&inds, sched.count(s), sched.count(k), sched.prefix(k))?,
                    sched.count(k),
                    sink,
                )?;
                let lin_ok = lin.max_index().is_some_and(|m| m < sched.prefix(k));
                let ok = sorted && in_range && has_sink && aligned && lin_ok;
                Ok((ok, format!("sorted {sorted}, range {in_range}, sink {has_sink}, alignment {aligned}, linear range {lin_ok}")))
            }),
        ),
        (
            "cs4a_flops_match_counters",
            Box::new(|| {
                let fam: Vec<AttnWorkload<f64>> = gen.family(s, k)?;
                let art = compute_decision_artifacts(&fam[0], &cfg.cs4a, Parallelism::Parallel)?;
                let mut counted = art.counts.dense_macs + art.counts.column_sum_adds + art.counts.cache_macs;
                let mut sets = Vec::new();
                for w in &fam[1..] {
                    let o = cs4a_attention(w, &art, &cfg.cs4a, Parallelism::Parallel)?;
                    counted += o.macs;
                    sets.push(o.indices);
                }
                let refs: Vec<_> = sets.iter().collect();
                let est = flops_cs4a_exact(gen.head_dim, &art.inds, fam[0].kv_len(), &refs).total();
                Ok((est == counted, format!("estimate {est}, counters {counted}")))
            }),
        ),
        (
            "csla_flops_ordering",
            Box::new(|| {
                let d = cfg.head_dim;
                let (e, t, b, full) = (
                    flops_csla(&sched, k, d, &cfg.csla)?,
                    flops_csla_token(&sched, k, d, &cfg.csla)?,
                    flops_csla_bound(&sched, k, d, &cfg.csla)?,
                    flops_dense(&sched, k, d)?,
                );
                Ok((t <= b && b <= full && e <= full, format!("token {t} ≤ bound {b} ≤ dense {full}; block {e}")))
            }),
        ),
        (
            "column_sum_and_topk_oracles",
            Box::new(|| {
                let mut rng = SplitMix64::for_stream(cfg.seed, Role::Baseline, 0);
                for trial in 0..200 {
                    let (n, m, c) = (1 + rng.below(12) as usize, 1 + rng.below(20) as usize, 1 + rng.below(6) as usize);
                    let p = Tensor::from_fn(1, 1, n, m, |_, _, _, _| (rng.below(8) as f64) / 8.0);
                    let sums = column_sum(&p, c)?;
                    for g in 0..n.div_ceil(c) {
                        for j in 0..m {
                            let brute: f64 = (g * c..((g + 1) * c).min(n)).map(|q| p.get(0, 0, q, j)).sum();
                            if brute != sums.get(0, 0, g, j) {
                                return Ok((false, format!("column sum, trial {trial}")));
                            }
                        }
                    }
                    let kk = 1 + rng.below(m as u64) as usize;
                    let idx = topk_indices(&sums, kk, n, c)?;
                    for g in 0..n.div_ceil(c) {
                        let row = sums.row(0, 0, g);
                        let mut order: Vec<usize> = (0..m).collect();
                        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
                        let mut want = order[..kk].to_vec();
                        want.sort_unstable();
                        if idx.list(0, 0, g) != want.as_slice() || topk_row(row, kk) != want {
                            return Ok((false, format!("top-k, trial {trial}")));
                        }
                    }
                }
                Ok((true, "200 trials".into()))
            }),
        ),
    ];
    for (name, f) in checks {
        let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        report.check(name, passed, detail);
    }
    let passed = report.checks.iter().filter(|c| c.passed).count();
    let total = report.checks.len();
    report.metric("checks_passed", passed as f64).metric("checks_total", total as f64);
    Ok(())
}

/// Process exit status for a finished report: 0 when every check passed, 1 otherwise.
pub fn exit_status(report: &Report) -> u8 {
    if report.all_passed() {
        0
    } else {
        1
    }
}

/// Median wall time in seconds of `runs` calls after `warmups` discarded ones.
pub fn median_time<R>(warmups: usize, runs: usize, mut f: impl FnMut() -> Result<R>) -> Result<f64> {
    for _ in 0..warmups {
        f()?;
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs.max(1) {
        let t = Instant::now();
        std::hint::black_box(f()?);
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let n = times.len();
    Ok(if n % 2 == 1 { times[n / 2] } else { 0.5 * (times[n / 2 - 1] + times[n / 2]) })
}

fn bench(cfg: &HarnessConfig, report: &mut Report) -> Result<()> {
    let sched = cfg.schedule()?;
    let (s, k, d) = (cfg.cs4a.decision_scale, cfg.target_scale, cfg.head_dim);
    let gen = WorkloadGenerator::from_config(cfg)?;
    let fam: Vec<AttnWorkload<f32>> = gen.family(s, k)?;
    let (ws, wk) = (&fam[0], fam.last().expect("non-empty family"));
    let mask = block_mask_direct(&sched, k, &cfg.csla)?;
    let seq = Parallelism::Sequential;
    let (warm, runs) = (cfg.bench_warmups, cfg.bench_runs);

    let (dense_s, csla_s, cs4a_s, decision_s, cs4a_out) = single_threaded(|| -> Result<_> {
        let dense_s = median_time(warm, runs, || dense_attention_kernel(wk, seq))?;
        let csla_s = median_time(warm, runs, || block_sparse_attention(wk, &mask, seq))?;
        let t = Instant::now();
        let art = compute_decision_artifacts(ws, &cfg.cs4a, seq)?;
        let decision_s = t.elapsed().as_secs_f64();
        let cs4a_s = median_time(warm, runs, || cs4a_attention(wk, &art, &cfg.cs4a, seq))?;
        let out = cs4a_attention(wk, &art, &cfg.cs4a, seq)?;
        Ok((dense_s, csla_s, cs4a_s, decision_s, out))
    })?;

    let heads = (cfg.batch * cfg.heads) as f64;
    let sp_csla = dense_s / csla_s;
    let sp_cs4a = dense_s / cs4a_s;
    let split = cfg.layer_split;
    let fd = flops_dense(&sched, k, d)? as f64 * heads;
    let fc = flops_csla(&sched, k, d, &cfg.csla)? as f64 * heads;
    report
        .metric("dense_s", dense_s)
        .metric("csla_s", csla_s)
        .metric("cs4a_s", cs4a_s)
        .metric("cs4a_decision_s", decision_s)
        .metric("speedup_csla", sp_csla)
        .metric("speedup_cs4a", sp_cs4a)
        .metric("speedup_layer_blend", 1.0 / (split / sp_cs4a + (1.0 - split) / sp_csla))
        .metric("flops_dense", fd)
        .metric("flops_csla", fc)
        .metric("flops_cs4a_update", cs4a_out.macs as f64)
        .metric(
            "flops_cs4a_analytic_per_head",
            flops_cs4a(&sched, s, k, d, cfg.cs4a.topk_fraction, cfg.cs4a.query_block)?,
        )
        .metric("flop_ratio_csla", fd / fc)
        .metric("flop_ratio_cs4a", fd / cs4a_out.macs as f64)
        .metric("block_sparsity", mask_sparsity(&mask));
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn analyze(cfg: &HarnessConfig, out: Option<&Path>, report: &mut Report) -> Result<()> {
    let sched = cfg.schedule()?;
    let k = cfg.target_scale;
    let par = Parallelism::Parallel;
    let gen = WorkloadGenerator::from_config(cfg)?;
    let fam: Vec<AttnWorkload<f64>> = gen.family(1, k)?;

    // Similarity between consecutive scales' probability maps.
    let kmax = cfg.analyze_max_scale.min(k);
    let mut rng = SplitMix64::for_stream(cfg.seed, Role::Shuffle, 0);
    let mut csv = String::from("k,i,cosine,shuffled\n");
    let (mut sims, mut shuf) = (Vec::new(), Vec::new());
    let mut prev: Option<Tensor<f64>> = None;
    for w in fam.iter().take(kmax) {
        let (_, p) = dense_cross_scale_attention(w, true, par)?;
        let p = p.expect("probabilities requested");
        if let Some(pp) = &prev {
            let kk = w.target_scale;
            for i in 2..=kk {
                let a = mean(&cross_scale_similarity(&p, pp, &sched, kk, i)?);
                let b = mean(&shuffled_similarity(&p, pp, &sched, kk, i, &mut rng)?);
                csv.push_str(&format!("{kk},{i},{a},{b}\n"));
                sims.push(a);
                shuf.push(b);
            }
        }
        prev = Some(p);
    }
    report.metric("similarity_mean", mean(&sims)).metric("similarity_shuffled_mean", mean(&shuf));
    emit(out, "similarity.csv", csv.as_bytes())?;

    // Output error when only the first m scales of the cache are kept.
    let wk = fam.last().expect("non-empty family");
    let ms: Vec<usize> = (1..=k).collect();
    let curve = sink_retention_curve(wk, &ms, par)?;
    let mut csv = String::from("m,relative_error\n");
    for &(m, e) in &curve {
        csv.push_str(&format!("{m},{e}\n"));
    }
    report.series.insert("sink_retention".into(), curve.iter().map(|&(_, e)| e).collect());
    emit(out, "sink_curve.csv", csv.as_bytes())?;

    // Recall of indices mapped from each candidate decision scale.
    let c = cfg.cs4a.query_block;
    let k_true = topk_count(cfg.cs4a.topk_fraction, wk.kv_len());
    let (_, truth, _) = dense_block_topk(wk, c, k_true, par)?;
    let sink_scales = cfg.cs4a.sink_scales;
    let mut rng = SplitMix64::for_stream(cfg.seed, Role::Baseline, k as u64);
    let mut csv = String::from("decision_scale,recall_dap,recall_linear,recall_random\n");
    let mut dap_series = Vec::new();
    for sd in sink_scales.max(1)..k {
        let w = &fam[sd - 1];
        let kk = topk_count(cfg.cs4a.topk_fraction, w.kv_len());
        let (_, inds, _) = dense_block_topk(w, c, kk, par)?;
        let dap = map_indices_dap(&sched, &inds, sd, k, sink_scales)?;
        let lin = rebase_blocks(
            &map_indices_linear(&inds, sched.count(sd), sched.count(k), wk.kv_len())?,
            wk.queries(),
            sched.prefix(sink_scales),
        )?;
        let random = random_index_set_like(&dap, wk.kv_len(), &mut rng)?;
        let (rd, rl, rr) =
            (recall_against(&dap, &truth)?, recall_against(&lin, &truth)?, recall_against(&random, &truth)?);
        csv.push_str(&format!("{sd},{rd},{rl},{rr}\n"));
        report.metric(&format!("recall_dap_s{sd}"), rd).metric(&format!("recall_random_s{sd}"), rr);
        dap_series.push(rd);
    }
    report.series.insert("recall_dap".into(), dap_series);
    emit(out, "recall.csv", csv.as_bytes())?;
    Ok(())
}
