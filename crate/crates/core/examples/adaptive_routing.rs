//! Per-frame gating: pooled frame features are scored, each frame picks one
//! sparsity branch, and the straight-through weights carry the gradient.
//!
//!     cargo run --release --example adaptive_routing

use alternating_attention::numcore::{ParamStore, Tape, Tensor};
use alternating_attention::routing::{
    frame_pool, gate, occupancy, route_stats_table, straight_through, GatingLayer, SparsityRatio,
};
use alternating_attention::tokens::{TokenBatch, TokenLayout};

fn main() -> alternating_attention::Result<()> {
    let ratios = SparsityRatio::default_branches();
    let (frames, patches, dim) = (8, 16, 16);
    let layer = GatingLayer::new("gate", dim, 32, ratios.len())?;
    let mut store = ParamStore::<f64>::new(3);
    layer.init(&mut store)?;

    // Frames differ in mean intensity so the gate has something to separate.
    let layout = TokenLayout::new(frames, patches, 1, dim)?;
    let x = Tensor::from_fn(&[layout.total(), dim], |i| {
        let frame = i / (dim * layout.per_frame());
        frame as f64 * 0.5 - 2.0 + ((i * 31) % 17) as f64 * 0.05
    });

    let tape = Tape::with_params(&store);
    let batch = TokenBatch::from_tensor(&tape, layout, x)?;
    let decision = gate(&tape, frame_pool(&tape, &batch)?, &layer, &ratios)?;
    let st = straight_through(&tape, &decision)?;
    let st = tape.value(st);

    println!("frame  probabilities              branch  k      ST row");
    for f in 0..frames {
        let p = decision.probs.row(f);
        println!(
            "{f:>5}  [{:.3} {:.3} {:.3}]    {:>6}  {:<6} {:?}",
            p[0],
            p[1],
            p[2],
            decision.branch_index[f],
            decision.k_selected[f].to_string(),
            st.row(f)
        );
    }
    println!("\nmean k = {:.4}", decision.mean_k());
    print!(
        "{}",
        route_stats_table(&ratios, &occupancy(std::slice::from_ref(&decision)))
    );
    Ok(())
}
