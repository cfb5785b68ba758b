//! Paired toy training runs with and without the sparsity regulariser.
//!
//!     cargo run --release --example train_toy

use alternating_attention::training::{train_toy, LossConfig, ToyConfig, TrainConfig};

fn main() -> alternating_attention::Result<()> {
    let model = ToyConfig::default();
    let train = TrainConfig::default();
    let mut runs = Vec::new();
    for lambda_reg in [0.0, 0.01] {
        let loss = LossConfig {
            lambda_reg,
            ..LossConfig::default()
        };
        runs.push((lambda_reg, train_toy::<f32>(&model, &loss, &train)?));
    }

    println!("step   task(λ=0)   task(λ=0.01)  k(λ=0)  k(λ=0.01)");
    let (a, b) = (&runs[0].1.records, &runs[1].1.records);
    for (x, y) in a
        .iter()
        .zip(b)
        .filter(|(x, _)| x.step % 50 == 0 || x.step + 1 == train.steps)
    {
        println!(
            "{:<6} {:<11.5} {:<13.5} {:<7.3} {:.3}",
            x.step, x.task_loss, y.task_loss, x.mean_k, y.mean_k
        );
    }
    println!();
    for (lambda, rep) in &runs {
        println!(
            "λ={lambda:<5} held-out task loss {:.5} -> {:.5}, mean k {:.4} -> {:.4}",
            rep.initial.task_loss, rep.last.task_loss, rep.initial.mean_k, rep.last.mean_k
        );
    }
    Ok(())
}
