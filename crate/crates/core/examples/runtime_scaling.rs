//! Wall-clock of frame, dense global and sparse global attention as the
//! number of frames grows.
//!
//! Frame counts come from the command line; the default sweep is kept short.
//!
//!     cargo run --release --example runtime_scaling -- 8 16 32

use alternating_attention::bench::{reports_csv, run_bench, BenchConfig};

fn main() -> alternating_attention::Result<()> {
    let frame_counts: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let cfg = BenchConfig {
        frame_counts: if frame_counts.is_empty() {
            vec![4, 8, 16]
        } else {
            frame_counts
        },
        reps: 3,
        ..BenchConfig::default()
    };
    let reports = run_bench::<f32>(&cfg)?;
    print!("{}", reports_csv(&reports));
    println!();
    for r in &reports {
        println!(
            "L={:<3} global/frame {:>6.1}x   full/sparse measured {:>5.2}x analytic {:>5.2}x",
            r.frames,
            r.global_frame_ratio(),
            r.speedup_measured(),
            r.speedup_analytic()
        );
        for w in &r.warnings {
            eprintln!("warning: {w}");
        }
    }
    Ok(())
}
