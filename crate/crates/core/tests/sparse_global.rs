use alternating_attention::attention::{global_full_attention, AttentionLayer};
use alternating_attention::numcore::{ParamStore, Tape, Tensor};
use alternating_attention::routing::SparsityRatio;
use alternating_attention::sparse_global::{
    assemble_global_kv, compress_frame, grid_indices, sparse_global_cross_attention, AdaptiveBlock, BlockConfig,
    Compression, GlobalAttention, RoutingMode, SparsityBranch, Variant,
};
use alternating_attention::tokens::{TokenBatch, TokenLayout};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn ratio(s: &str) -> SparsityRatio {
    s.parse().unwrap()
}

/// Branch whose weight matrix is exactly `w` (F_w zeroed, bias = w).
fn fixed_weight_branch(
    store: &mut ParamStore<f64>,
    k: SparsityRatio,
    m: usize,
    d: usize,
    w: Tensor<f64>,
) -> SparsityBranch {
    let b = SparsityBranch::new("br", k, m, d, 0).unwrap();
    store.set("br.fw.w", Tensor::zeros(&[d, b.compressed]));
    store.set("br.bias", w);
    b
}

fn compress(store: &ParamStore<f64>, b: &SparsityBranch, x: &Tensor<f64>) -> Tensor<f64> {
    let tape = Tape::with_params(store);
    let c = compress_frame(&tape, tape.constant(x.clone()), b).unwrap();
    (*tape.value(c)).clone()
}

#[test]
fn selection_matrix_picks_leading_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[8, 4]);
    let mut store = ParamStore::new(0);
    let sel = Tensor::from_fn(&[8, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    let b = fixed_weight_branch(&mut store, ratio("1/2"), 8, 4, sel);
    let c = compress(&store, &b, &x);
    for r in 0..4 {
        assert_eq!(c.row(r), x.row(r));
    }
}

#[test]
fn zero_weights_give_zero_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[8, 4]);
    let mut store = ParamStore::new(0);
    let b = fixed_weight_branch(&mut store, ratio("3/4"), 8, 4, Tensor::zeros(&[8, 2]));
    assert!(compress(&store, &b, &x).data().iter().all(|&v| v == 0.0));
}

#[test]
fn quarter_weights_average_the_frame() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[4, 5]);
    let mut store = ParamStore::new(0);
    let b = fixed_weight_branch(&mut store, ratio("3/4"), 4, 5, Tensor::full(&[4, 1], 0.25));
    let c = compress(&store, &b, &x);
    assert_eq!(c.shape(), &[1, 5]);
    for col in 0..5 {
        let mean: f64 = (0..4).map(|r| x.at(r, col)).sum::<f64>() * 0.25;
        assert!((c.at(0, col) - mean).abs() < 1e-12);
    }
}

#[test]
fn compression_rejects_wrong_frame_shape() {
    let mut store = ParamStore::<f64>::new(0);
    let b = SparsityBranch::new("br", ratio("1/2"), 8, 4, 0).unwrap();
    b.init(&mut store).unwrap();
    let tape = Tape::with_params(&store);
    assert!(compress_frame(&tape, tape.constant(Tensor::zeros(&[9, 4])), &b).is_err());
}

#[test]
fn compressed_count_law() {
    for m in 4..=64 {
        for k in SparsityRatio::default_branches() {
            let expect = (m as f64 * (1.0 - k.value())).floor() as usize;
            let got = SparsityBranch::new("b", k, m, 4, 0).map(|b| b.compressed).unwrap_or(0);
            assert_eq!(got, expect, "M={m} k={k}");
        }
    }
}

#[test]
fn key_value_set_sizes() {
    let tape = Tape::<f64>::new();
    let c = |n| tape.constant(Tensor::zeros(&[n, 4]));
    assert_eq!(
        tape.shape(assemble_global_kv(&tape, &[c(3)], c(0), None).unwrap())[0],
        3
    );
    assert_eq!(
        tape.shape(assemble_global_kv(&tape, &[c(4)], c(1), Some(c(17))).unwrap())[0],
        17 + 4 + 1
    );
    let three = [c(4), c(4), c(4)];
    assert_eq!(
        tape.shape(assemble_global_kv(&tape, &three, c(6), None).unwrap())[0],
        18
    );
}

#[test]
fn key_value_order_is_ref_then_compressed_then_specials() {
    let tape = Tape::<f64>::new();
    let c = |v: f64, n| tape.constant(Tensor::full(&[n, 1], v));
    let kv = assemble_global_kv(&tape, &[c(1.0, 2), c(2.0, 1)], c(3.0, 2), Some(c(0.0, 1))).unwrap();
    assert_eq!(tape.value(kv).data(), &[0.0, 1.0, 1.0, 2.0, 3.0, 3.0]);
}

#[test]
fn single_key_output_is_projected_value() {
    let layer = AttentionLayer::new("a", 4, 2).unwrap();
    let mut store = ParamStore::<f64>::new(4);
    layer.init(&mut store).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let kv = random(&mut rng, &[1, 4]);
    let tape = Tape::with_params(&store);
    let o = sparse_global_cross_attention(
        &tape,
        &layer,
        tape.constant(random(&mut rng, &[6, 4])),
        tape.constant(kv.clone()),
    )
    .unwrap();
    let expect = kv
        .matmul(store.get("a.wv").unwrap())
        .unwrap()
        .matmul(store.get("a.wo").unwrap())
        .unwrap();
    for r in 0..6 {
        for c in 0..4 {
            assert!((tape.value(o).at(r, c) - expect.at(0, c)).abs() < 1e-12);
        }
    }
    assert!(sparse_global_cross_attention(
        &tape,
        &layer,
        tape.constant(kv.clone()),
        tape.constant(Tensor::zeros(&[0, 4]))
    )
    .is_err());
}

/// Sparse cross-attention over identity-compressed frames plus specials vs
/// dense global attention.
fn identity_equivalence(seed: u64, frames: usize, m: usize, s: usize) -> f64 {
    let d = 8;
    let layout = TokenLayout::new(frames, m, s, d).unwrap();
    let layer = AttentionLayer::new("g", d, 2).unwrap();
    let mut store = ParamStore::<f64>::new(seed);
    layer.init(&mut store).unwrap();
    let b = fixed_weight_branch(&mut store, SparsityRatio::DENSE, m, d, Tensor::eye(m));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tape = Tape::with_params(&store);
    let batch = TokenBatch::from_tensor(&tape, layout, random(&mut rng, &[layout.total(), d])).unwrap();
    let compressed: Vec<_> = (0..frames)
        .map(|i| {
            let rows: Vec<usize> = layout.patch_rows(i).collect();
            compress_frame(&tape, tape.gather_rows(batch.tokens, &rows).unwrap(), &b).unwrap()
        })
        .collect();
    let specials = tape.gather_rows(batch.tokens, &layout.all_special_rows()).unwrap();
    let kv = assemble_global_kv(&tape, &compressed, specials, None).unwrap();
    let sparse = sparse_global_cross_attention(&tape, &layer, batch.tokens, kv).unwrap();
    let full = global_full_attention(&tape, &layer, &batch).unwrap();
    tape.value(sparse).max_abs_diff(&tape.value(full.tokens))
}

#[test]
fn identity_compression_matches_full_attention() {
    for seed in 0..20 {
        let frames = 1 + (seed as usize % 4);
        let m = 2 + (seed as usize * 3) % 7;
        let dev = identity_equivalence(seed, frames, m, seed as usize % 3);
        assert!(dev < 1e-10, "seed {seed}: {dev}");
    }
}

fn block_cfg(m: usize, ratios: &[&str]) -> BlockConfig {
    let mut cfg = BlockConfig::new(8, 2, m, 1, ratios.iter().map(|r| ratio(r)).collect());
    cfg.ffn_hidden = 16;
    cfg
}

fn run_block(block: &AdaptiveBlock, store: &ParamStore<f64>, layout: TokenLayout, x: &Tensor<f64>) -> Tensor<f64> {
    let tape = Tape::with_params(store);
    let b = TokenBatch::from_tensor(&tape, layout, x.clone()).unwrap();
    let out = block.forward(&tape, &b).unwrap();
    (*tape.value(out.batch.tokens)).clone()
}

#[test]
fn zeroed_output_paths_make_the_block_an_identity() {
    let block = AdaptiveBlock::new("blk", block_cfg(8, &["1/2", "3/4", "7/8"]), Variant::Full).unwrap();
    let mut store = ParamStore::<f64>::new(5);
    block.init(&mut store).unwrap();
    for w in [
        "blk.global.wv",
        "blk.global.wo",
        "blk.frame.wv",
        "blk.frame.wo",
        "blk.ffn.w2",
    ] {
        store.zero_prefix(w);
    }
    let layout = TokenLayout::new(3, 8, 1, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[layout.total(), 8]);
    assert_eq!(run_block(&block, &store, layout, &x), x);
}

/// Dense-branch block with `W = I` and the reference block share every
/// other parameter name.
fn dense_pair(compression: Compression) -> (AdaptiveBlock, AdaptiveBlock, ParamStore<f64>) {
    let mut cfg = block_cfg(6, &["0"]);
    cfg.ref_frame_dense = false;
    let sparse = AdaptiveBlock::with_mode(
        "blk",
        cfg.clone(),
        GlobalAttention::Adaptive {
            routing: RoutingMode::Fixed(0),
            compression,
        },
    )
    .unwrap();
    let full = AdaptiveBlock::new("blk", cfg, Variant::BaselineFullAttn).unwrap();
    let mut store = ParamStore::<f64>::new(6);
    sparse.init(&mut store).unwrap();
    if compression == Compression::Learned {
        store.set("blk.branch0.fw.w", Tensor::zeros(&[8, 6]));
        store.set("blk.branch0.bias", Tensor::eye(6));
    }
    (sparse, full, store)
}

#[test]
fn identity_selection_block_matches_full_block() {
    let (sparse, full, store) = dense_pair(Compression::Learned);
    let layout = TokenLayout::new(3, 6, 1, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[layout.total(), 8]);
    let dev = run_block(&sparse, &store, layout, &x).max_abs_diff(&run_block(&full, &store, layout, &x));
    assert!(dev < 1e-8, "{dev}");
}

#[test]
fn degenerate_merge_matches_full_block() {
    let (merge, full, store) = dense_pair(Compression::MergeUpsample);
    let layout = TokenLayout::new(4, 6, 1, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, &[layout.total(), 8]);
    let dev = run_block(&merge, &store, layout, &x).max_abs_diff(&run_block(&full, &store, layout, &x));
    assert!(dev < 1e-8, "{dev}");
}

#[test]
fn round_robin_variant_assigns_by_frame_index() {
    let block = AdaptiveBlock::new("blk", block_cfg(8, &["1/2", "3/4", "7/8"]), Variant::V1).unwrap();
    let mut store = ParamStore::<f64>::new(9);
    block.init(&mut store).unwrap();
    let layout = TokenLayout::new(3, 8, 1, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tape = Tape::with_params(&store);
    let b = TokenBatch::from_tensor(&tape, layout, random(&mut rng, &[layout.total(), 8])).unwrap();
    let out = block.forward(&tape, &b).unwrap();
    assert_eq!(out.routing.unwrap().branch_index, vec![0, 1, 2]);
}

#[test]
fn grid_variant_keeps_every_other_token() {
    assert_eq!(grid_indices(8, 4), vec![0, 2, 4, 6]);
    let mut cfg = block_cfg(8, &["1/2"]);
    cfg.ref_frame_dense = false;
    let block = AdaptiveBlock::new("blk", cfg, Variant::V3).unwrap();
    let mut store = ParamStore::<f64>::new(10);
    block.init(&mut store).unwrap();
    let layout = TokenLayout::new(2, 8, 1, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&mut rng, &[layout.total(), 8]);
    let tape = Tape::with_params(&store);
    let b = TokenBatch::from_tensor(&tape, layout, x).unwrap();
    let normed = {
        let g = tape.param("blk.norm1.gamma").unwrap();
        let be = tape.param("blk.norm1.beta").unwrap();
        tape.value(tape.layernorm(b.tokens, g, be, block.cfg.eps).unwrap())
    };
    let (_, trace) = block.forward_traced(&tape, &b).unwrap();
    let kv = trace.compressed_kv.unwrap();
    for i in 0..2 {
        for (slot, j) in [0, 2, 4, 6].into_iter().enumerate() {
            assert_eq!(kv.row(i * 4 + slot), normed.row(layout.patch_rows(i).start + j));
        }
    }
}

#[test]
fn single_branch_variant_drops_gating() {
    let block = AdaptiveBlock::new("blk", block_cfg(8, &["1/2", "3/4"]), Variant::V2).unwrap();
    assert!(block.gating.is_none());
    assert_eq!(block.branches.len(), 1);
}

#[test]
fn gradients_reach_every_parameter_family() {
    let block = AdaptiveBlock::new("blk", block_cfg(8, &["1/2", "3/4", "7/8"]), Variant::Full).unwrap();
    let mut store = ParamStore::<f64>::new(11);
    block.init(&mut store).unwrap();
    let layout = TokenLayout::new(4, 8, 1, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tape = Tape::with_params(&store);
    let b = TokenBatch::from_tensor(&tape, layout, random(&mut rng, &[layout.total(), 8])).unwrap();
    let out = block.forward(&tape, &b).unwrap();
    let sq = tape.mul(out.batch.tokens, out.batch.tokens).unwrap();
    let grads = tape.backward(tape.sum(sq)).unwrap();
    let routing = out.routing.unwrap();
    for name in store.names() {
        let unused_branch =
            (0..3).any(|br| name.starts_with(&format!("blk.branch{br}.")) && !routing.branch_index.contains(&br));
        if !unused_branch {
            assert!(grads.norm(name) > 0.0, "{name} has no gradient");
        }
    }
}

#[test]
fn trace_exposes_weight_matrices() {
    let block = AdaptiveBlock::new("blk", block_cfg(8, &["1/2", "3/4", "7/8"]), Variant::Full).unwrap();
    let mut store = ParamStore::<f64>::new(12);
    block.init(&mut store).unwrap();
    let layout = TokenLayout::new(2, 8, 1, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let tape = Tape::with_params(&store);
    let b = TokenBatch::from_tensor(&tape, layout, random(&mut rng, &[layout.total(), 8])).unwrap();
    let (out, trace) = block.forward_traced(&tape, &b).unwrap();
    let routing = out.routing.unwrap();
    assert_eq!(trace.weight_matrices.len(), 2);
    for (w, &br) in trace.weight_matrices.iter().zip(&routing.branch_index) {
        assert_eq!(w.shape(), &[8, block.branches[br].compressed]);
    }
    assert_eq!(trace.compressed_kv.unwrap().rows(), block.kv_len(&routing.branch_index));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn frame_permutation_is_equivariant(seed in 0u64..1000, shift in 1usize..3) {
        let mut cfg = block_cfg(8, &["1/2", "3/4", "7/8"]);
        cfg.ref_frame_dense = false;
        let block = AdaptiveBlock::new("blk", cfg, Variant::Full).unwrap();
        let mut store = ParamStore::<f64>::new(seed);
        block.init(&mut store).unwrap();
        let layout = TokenLayout::new(3, 8, 1, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[layout.total(), 8]);
        let frame_perm: Vec<usize> = (0..3).map(|i| (i + shift) % 3).collect();
        let rows: Vec<usize> = frame_perm.iter().flat_map(|&f| layout.frame_rows(f)).collect();
        let a = run_block(&block, &store, layout, &x);
        let b = run_block(&block, &store, layout, &x.gather_rows(&rows));
        prop_assert!(a.gather_rows(&rows).max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn joint_key_permutation_is_invisible(seed in 0u64..1000) {
        let layer = AttentionLayer::new("a", 4, 2).unwrap();
        let mut store = ParamStore::<f64>::new(seed);
        layer.init(&mut store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random(&mut rng, &[5, 4]);
        let kv = random(&mut rng, &[6, 4]);
        let tape = Tape::with_params(&store);
        let q = tape.constant(q);
        let a = sparse_global_cross_attention(&tape, &layer, q, tape.constant(kv.clone())).unwrap();
        let b = sparse_global_cross_attention(&tape, &layer, q, tape.constant(kv.gather_rows(&[5, 3, 1, 0, 2, 4]))).unwrap();
        prop_assert!(tape.value(a).max_abs_diff(&tape.value(b)) < 1e-10);
    }
}
