//! Finite-difference check of every parameter gradient of the training loss.
//!
//! Routing is recorded on the analytic pass and replayed on the perturbed
//! passes, so the check covers the straight-through surrogate exactly.
//!
//!     cargo run --release --example gradient_check

use alternating_attention::training::{gradcheck_total_loss, LossConfig, ToyConfig};

fn main() -> alternating_attention::Result<()> {
    let model = ToyConfig::gradcheck();
    println!(
        "model: L={} M={} S={} D={} H={} blocks={} ratios={:?}",
        model.frames,
        model.patches(),
        model.specials,
        model.dim,
        model.heads,
        model.blocks,
        model.ratios.iter().map(ToString::to_string).collect::<Vec<_>>()
    );
    for entropy_enabled in [false, true] {
        let loss = LossConfig {
            entropy_enabled,
            ..LossConfig::default()
        };
        let r = gradcheck_total_loss(&model, &loss, 0, 1e-5)?;
        println!(
            "entropy={entropy_enabled:<5} entries={} worst={:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e}) {}",
            r.entries,
            r.worst_rel_err,
            r.worst_param,
            r.worst_index,
            r.analytic,
            r.numeric,
            if r.passes(1e-4) { "ok" } else { "FAILED" }
        );
    }
    Ok(())
}
