use proptest::prelude::*;

use sparse_scale_attn::analysis::random_index_set_like;
use sparse_scale_attn::analysis::{
    cross_scale_similarity, flops_cs4a, flops_csla, flops_dense, shuffled_similarity, Report,
};
use sparse_scale_attn::attention::{
    dense_cross_scale_attention, masked_dense_attention, sparse_attention_over_indices,
};
use sparse_scale_attn::cs4a::{
    column_sum, dense_block_topk, map_index_dap, map_indices_dap, map_indices_linear, topk_indices, topk_row,
    SparseIndexSet,
};
use sparse_scale_attn::csla::{
    block_aggregate, block_mask_direct, block_sparse_attention, mask_sparsity, token_mask, token_sparsity, CslaConfig,
    IntermediatePolicy,
};
use sparse_scale_attn::harness::{WorkloadGenerator, WorkloadMode};
use sparse_scale_attn::rng::{Role, SplitMix64};
use sparse_scale_attn::{AttnWorkload, Parallelism, ScaleSchedule, Tensor};

const SEQ: Parallelism = Parallelism::Sequential;

/// Non-decreasing side lists starting at 1.
fn schedule() -> impl Strategy<Value = ScaleSchedule> {
    prop::collection::vec(0usize..4, 1..6).prop_map(|steps| {
        let mut sides = vec![1];
        for s in steps {
            let last = *sides.last().unwrap();
            sides.push(last + s);
        }
        ScaleSchedule::new(&sides).unwrap()
    })
}

fn odd() -> impl Strategy<Value = usize> {
    (0usize..5).prop_map(|x| 2 * x + 1)
}

fn csla_config(max_sink: usize) -> impl Strategy<Value = CslaConfig> {
    (0..=max_sink, prop::collection::vec(odd(), 0..4), 1usize..20, prop::option::of(odd())).prop_map(
        |(sink_scales, windows, block, win)| CslaConfig {
            sink_scales,
            windows,
            block,
            intermediate: win.map_or(IntermediatePolicy::Masked, IntermediatePolicy::Windowed),
        },
    )
}

fn generator(sides: &[usize], heads: usize, d: usize, seed: u64, mode: WorkloadMode) -> WorkloadGenerator {
    WorkloadGenerator {
        schedule: ScaleSchedule::new(sides).unwrap(),
        batch: 1,
        heads,
        head_dim: d,
        mode,
        sigma: 0.1,
        seed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decompose_recompose_is_identity(sched in schedule()) {
        for j in 0..sched.total_tokens() {
            let so = sched.decompose(j).unwrap();
            prop_assert!(so.offset < sched.count(so.scale));
            prop_assert_eq!(sched.recompose(so).unwrap(), j);
        }
    }

    #[test]
    fn dap_preserves_relative_scale(sched in schedule(), a in 0usize..6, b in 0usize..6) {
        let n = sched.num_scales();
        prop_assume!(n >= 2);
        let s = 1 + a % (n - 1);
        let k = s + 1 + b % (n - s);
        for j in 0..sched.prefix(s) {
            let l = sched.decompose(j).unwrap().scale;
            let t = map_index_dap(&sched, j, s, k).unwrap().unwrap();
            prop_assert!(t < sched.prefix(k));
            prop_assert_eq!(sched.decompose(t).unwrap().scale, l + (k - s));
        }
    }

    #[test]
    fn mapped_sets_are_sorted_in_range_with_sink(
        sched in schedule(),
        seed in any::<u64>(),
        block in 1usize..8,
        sink_pick in 0usize..8,
    ) {
        let n = sched.num_scales();
        prop_assume!(n >= 2);
        let s = n - 1;
        let sink = sink_pick % (s + 1);
        let mut rng = SplitMix64::new(seed);
        let nq = sched.count(s);
        let g = nq.div_ceil(block);
        let lists: Vec<Vec<usize>> = (0..g)
            .map(|_| (0..sched.prefix(s)).filter(|_| rng.below(3) == 0).collect())
            .collect();
        let src = SparseIndexSet::new(1, 1, nq, block, lists).unwrap();
        let mapped = map_indices_dap(&sched, &src, s, n, sink).unwrap();
        let lin = map_indices_linear(&src, nq, sched.count(n), sched.prefix(n)).unwrap();
        for l in mapped.lists() {
            prop_assert!(l.windows(2).all(|p| p[0] < p[1]));
            prop_assert!(l.iter().all(|&j| j < sched.prefix(n)));
            prop_assert!(l.len() >= sched.prefix(sink));
            prop_assert!((0..sched.prefix(sink)).all(|j| l[j] == j));
        }
        for l in lin.lists() {
            prop_assert!(l.windows(2).all(|p| p[0] < p[1]));
            prop_assert!(l.iter().all(|&j| j < sched.prefix(n)));
        }
    }

    #[test]
    fn direct_mask_equals_aggregated_token_mask(sched in schedule(), cfg in csla_config(3)) {
        let k = sched.num_scales();
        let cfg = CslaConfig { sink_scales: cfg.sink_scales.min(k), ..cfg };
        let tokens = token_mask(&sched, k, &cfg).unwrap();
        let direct = block_mask_direct(&sched, k, &cfg).unwrap();
        prop_assert_eq!(&direct, &block_aggregate(&tokens, cfg.block).unwrap());
        // Tiles and coarser tiles only merge active regions.
        let tok = token_sparsity(&sched, k, &cfg).unwrap();
        prop_assert!(tokens.count_ones() as u64 <= direct.active_pairs());
        let coarse = block_mask_direct(&sched, k, &CslaConfig { block: 2 * cfg.block, ..cfg.clone() }).unwrap();
        prop_assert!(direct.active_pairs() <= coarse.active_pairs());
        // With ragged tiles the tile fraction can move either way; on an even grid it cannot.
        let (nq, nkv) = (sched.count(k), sched.prefix(k));
        if nq % (2 * cfg.block) == 0 && nkv % (2 * cfg.block) == 0 {
            prop_assert!(tok >= mask_sparsity(&direct) - 1e-15);
            prop_assert!(mask_sparsity(&direct) >= mask_sparsity(&coarse) - 1e-15);
        }
    }

    #[test]
    fn enlarging_a_window_never_increases_sparsity(sched in schedule(), cfg in csla_config(2), pick in 0usize..4) {
        let k = sched.num_scales();
        prop_assume!(!cfg.windows.is_empty());
        let cfg = CslaConfig { sink_scales: cfg.sink_scales.min(k), ..cfg };
        let mut wider = cfg.clone();
        let i = pick % wider.windows.len();
        wider.windows[i] += 2;
        let (a, b) = (
            mask_sparsity(&block_mask_direct(&sched, k, &cfg).unwrap()),
            mask_sparsity(&block_mask_direct(&sched, k, &wider).unwrap()),
        );
        prop_assert!(b <= a);
        prop_assert!(token_sparsity(&sched, k, &wider).unwrap() <= token_sparsity(&sched, k, &cfg).unwrap());
    }

    #[test]
    fn block_sparse_kernel_matches_masked_dense(seed in any::<u64>(), cfg in csla_config(2), d in 1usize..6) {
        let sides = [1, 2, 3, 5, 6];
        let cfg = CslaConfig { sink_scales: cfg.sink_scales.max(1), ..cfg };
        let w: AttnWorkload<f64> = generator(&sides, 2, d, seed, WorkloadMode::Random).workload(5).unwrap();
        let mask = block_mask_direct(&w.schedule, 5, &cfg).unwrap();
        let (o, macs) = block_sparse_attention(&w, &mask, SEQ).unwrap();
        let r = masked_dense_attention(&w, |q, j| mask.allows(q, j), SEQ).unwrap();
        prop_assert!(o.max_abs_diff(&r) <= 1e-12);
        prop_assert_eq!(macs, 2 * flops_csla(&w.schedule, 5, d, &cfg).unwrap());
    }

    #[test]
    fn column_sum_matches_double_loop(seed in any::<u64>(), n in 1usize..20, m in 1usize..20, c in 1usize..9) {
        let mut rng = SplitMix64::new(seed);
        let p = Tensor::from_fn(1, 1, n, m, |_, _, _, _| rng.next_f64());
        let sums = column_sum(&p, c).unwrap();
        prop_assert_eq!(sums.rows(), n.div_ceil(c));
        for g in 0..n.div_ceil(c) {
            for j in 0..m {
                let mut brute = 0.0;
                for q in g * c..((g + 1) * c).min(n) {
                    brute += p.get(0, 0, q, j);
                }
                prop_assert_eq!(brute, sums.get(0, 0, g, j));
            }
        }
    }

    #[test]
    fn report_json_round_trips(
        metrics in prop::collection::btree_map("[a-z_]{1,12}", -1e12f64..1e12, 0..8),
        series in prop::collection::vec(-1e3f64..1e3, 0..6),
        seed in any::<u64>(),
    ) {
        let mut r = Report::new("mask", seed, Default::default());
        for (k, v) in &metrics {
            r.metric(k, *v);
        }
        if !series.is_empty() {
            r.series.insert("curve".into(), series);
        }
        r.check("x", seed % 2 == 0, "detail");
        let back = Report::from_json(&r.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, r);
    }
}

#[test]
fn topk_matches_full_sort_oracle() {
    let mut rng = SplitMix64::new(77);
    for _ in 0..1000 {
        let m = 7 + rng.below(30) as usize;
        let row: Vec<f64> = (0..m).map(|_| rng.below(10) as f64).collect();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        let mut want = order[..7].to_vec();
        want.sort_unstable();
        assert_eq!(topk_row(&row, 7), want);
        let t = Tensor::from_vec(1, 1, 1, m, row).unwrap();
        assert_eq!(topk_indices(&t, 7, 1, 1).unwrap().list(0, 0, 0), want.as_slice());
    }
}

#[test]
fn exact_topk_beats_random_set_of_same_size() {
    let sides = [1, 2, 4, 6];
    let seeds = 100;
    let (mut exact_err, mut random_err) = (0.0, 0.0);
    for seed in 0..seeds {
        let w: AttnWorkload<f64> = generator(&sides, 2, 8, seed, WorkloadMode::Random).workload(4).unwrap();
        let (dense, _) = dense_cross_scale_attention(&w, false, SEQ).unwrap();
        let (_, exact, _) = dense_block_topk(&w, 8, 12, SEQ).unwrap();
        let mut rng = SplitMix64::for_stream(seed, Role::Baseline, 0);
        let random = random_index_set_like(&exact, w.kv_len(), &mut rng).unwrap();
        exact_err += sparse_attention_over_indices(&w, &exact, SEQ).unwrap().relative_error(&dense);
        random_err += sparse_attention_over_indices(&w, &random, SEQ).unwrap().relative_error(&dense);
    }
    let (e, r) = (exact_err / seeds as f64, random_err / seeds as f64);
    assert!(e < r, "mean relative error: exact {e}, random {r}");
}

#[test]
fn self_similar_maps_beat_shuffled_baseline() {
    let sides = [1, 2, 4, 6, 8];
    let w: Vec<AttnWorkload<f64>> = generator(&sides, 2, 8, 4, WorkloadMode::SelfSimilar).family(1, 5).unwrap();
    let probs: Vec<Tensor<f64>> =
        w.iter().map(|x| dense_cross_scale_attention(x, true, SEQ).unwrap().1.unwrap()).collect();
    let mut rng = SplitMix64::for_stream(4, Role::Shuffle, 0);
    let (mut sim, mut shuf, mut n) = (0.0, 0.0, 0.0);
    for k in 2..=5 {
        for i in 2..=k {
            let a = cross_scale_similarity(&probs[k - 1], &probs[k - 2], &w[0].schedule, k, i).unwrap();
            let b = shuffled_similarity(&probs[k - 1], &probs[k - 2], &w[0].schedule, k, i, &mut rng).unwrap();
            sim += a.iter().sum::<f64>();
            shuf += b.iter().sum::<f64>();
            n += a.len() as f64;
        }
    }
    assert!(sim / n > shuf / n, "mean similarity {} vs shuffled {}", sim / n, shuf / n);
}

#[test]
fn cs4a_closed_form_is_affine_in_alpha() {
    let sched = ScaleSchedule::infinity_1k();
    let f = |a: f64| flops_cs4a(&sched, 11, 13, 128, a, 192).unwrap();
    let (f1, f2, f3) = (f(0.1), f(0.3), f(0.5));
    // The residual term rounds α·N_≤S to an integer, worth at most 2·D·N_S.
    let slack = 2.0 * 128.0 * 1600.0;
    assert!(((f3 - f2) - (f2 - f1)).abs() <= 2.0 * slack);
    // At α = 1 the estimate covers a dense pass over every scale plus the column sums.
    let dense: u64 = (11..=13).map(|k| flops_dense(&sched, k, 128).unwrap()).sum();
    assert!(f(1.0) >= dense as f64);
}

#[test]
fn sink_only_mask_cost_is_padded_sink() {
    let sched = ScaleSchedule::infinity_1k();
    let cfg = CslaConfig { windows: vec![], ..CslaConfig::default() };
    // The 121 sink keys sit in the first 128-wide tile column, which is computed whole.
    let est = flops_csla(&sched, 13, 128, &cfg).unwrap();
    assert_eq!(est, 2 * 128 * 4096 * 121u64.div_ceil(128) * 128);
}
