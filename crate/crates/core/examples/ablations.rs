//! Full model against the four ablations on one seed, plus the structural
//! checks each ablation must satisfy.
//!
//!     cargo run --release --example ablations

use alternating_attention::ablation::run_ablation;
use alternating_attention::training::{LossConfig, ToyConfig, TrainConfig};

fn main() -> alternating_attention::Result<()> {
    let train = TrainConfig {
        steps: 200,
        ..TrainConfig::default()
    };
    let report = run_ablation::<f32>(&ToyConfig::default(), &LossConfig::default(), &train)?;
    print!("{}", report.table());
    println!();
    print!("{}", report.checks_text());
    Ok(())
}
