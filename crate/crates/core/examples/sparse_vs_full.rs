//! Sparse global attention against dense global attention.
//!
//! With identity compression every token is its own representative, so the
//! cross-attention must reproduce dense attention to round-off. A trained-size
//! block then shows how much the key/value set shrinks under real branches.
//!
//!     cargo run --release --example sparse_vs_full

use alternating_attention::numcore::{ParamStore, Tape, Tensor};
use alternating_attention::routing::SparsityRatio;
use alternating_attention::sparse_global::{identity_equivalence, AdaptiveBlock, BlockConfig, Variant};
use alternating_attention::tokens::{TokenBatch, TokenLayout};

fn main() -> alternating_attention::Result<()> {
    println!("seed  L  M  S  max |sparse - full|");
    for seed in 0..8 {
        let c = identity_equivalence(seed, 16, 2)?;
        println!(
            "{seed:>4} {:>2} {:>2} {:>2}  {:.2e}",
            c.frames, c.patches, c.specials, c.max_dev
        );
    }

    let (frames, patches, specials, dim) = (6, 64, 1, 32);
    let cfg = BlockConfig::new(dim, 2, patches, specials, SparsityRatio::default_branches());
    let layout = TokenLayout::new(frames, patches, specials, dim)?;
    let x = Tensor::<f64>::from_fn(&[layout.total(), dim], |i| ((i * 7919) % 1000) as f64 / 500.0 - 1.0);

    println!("\nvariant               kv tokens  MACs");
    for variant in [Variant::BaselineFullAttn, Variant::Full] {
        let block = AdaptiveBlock::new("blk", cfg.clone(), variant)?;
        let mut store = ParamStore::new(1);
        block.init(&mut store)?;
        let tape = Tape::with_params(&store).inference();
        let batch = TokenBatch::from_tensor(&tape, layout, x.clone())?;
        let out = block.forward(&tape, &batch)?;
        let kv = match &out.routing {
            Some(d) => block.kv_len(&d.branch_index),
            None => layout.total(),
        };
        println!("{:<21} {kv:>9}  {}", variant.to_string(), tape.macs());
    }
    Ok(())
}
