//! Multiply-add accounting: closed forms against the instrumented tape
//! counter, then the speedup as frames grow.
//!
//!     cargo run --release --example flop_accounting

use alternating_attention::bench::{counted_macs, flop_count_frame, flop_count_full, flop_count_sparse, BenchConfig};
use alternating_attention::routing::SparsityRatio;

fn main() -> alternating_attention::Result<()> {
    let cfg = BenchConfig {
        patches: 16,
        dim: 16,
        heads: 2,
        ..BenchConfig::default()
    };
    println!("L   layer   formula      counted");
    for frames in [2, 3, 5] {
        let (frame, full, sparse) = counted_macs::<f32>(&cfg, frames)?;
        let ks = cfg.assignment(frames);
        let rows = [
            (
                "frame",
                flop_count_frame(frames, cfg.patches, cfg.specials, cfg.dim, cfg.heads),
                frame,
            ),
            (
                "full",
                flop_count_full(frames, cfg.patches, cfg.specials, cfg.dim, cfg.heads),
                full,
            ),
            (
                "sparse",
                flop_count_sparse(cfg.patches, cfg.specials, cfg.dim, cfg.heads, &ks, cfg.ref_frame_dense),
                sparse,
            ),
        ];
        for (name, formula, counted) in rows {
            println!("{frames:<3} {name:<7} {formula:<12} {counted}");
        }
    }

    println!("\nspeedup full/sparse, M=64, D=32, H=2, S=0, no reference frame");
    println!("L      k=3/4   k=15/16");
    for frames in [4, 16, 64, 256, 1024] {
        let s = |k: &str| {
            let ks = vec![k.parse::<SparsityRatio>().expect("literal ratio"); frames];
            flop_count_full(frames, 64, 0, 32, 2) as f64 / flop_count_sparse(64, 0, 32, 2, &ks, false) as f64
        };
        println!("{frames:<6} {:<7.3} {:.3}", s("3/4"), s("15/16"));
    }
    Ok(())
}
