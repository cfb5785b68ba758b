//! Representative tokens per branch: `W_i = F_w(x_i) + B_k` and
//! `x^c_i = W_iᵀ·x_i`, next to the grid and merge baselines.
//!
//!     cargo run --release --example compressed_tokens

use alternating_attention::numcore::{ParamStore, Tape, Tensor};
use alternating_attention::routing::SparsityRatio;
use alternating_attention::sparse_global::{compress_frame, grid_indices, merge_groups, SparsityBranch};

fn main() -> alternating_attention::Result<()> {
    let (patches, dim) = (196, 64);
    let mut store = ParamStore::<f32>::new(0);
    let x = Tensor::<f32>::from_fn(&[patches, dim], |i| ((i % 97) as f32 / 48.0) - 1.0);

    println!("k      M_k  W_i shape    x^c shape   F_w MACs");
    for (b, ratio) in SparsityRatio::default_branches().into_iter().enumerate() {
        let branch = SparsityBranch::new(format!("branch{b}"), ratio, patches, dim, 0)?;
        branch.init(&mut store)?;
        let tape = Tape::with_params(&store).inference();
        let xi = tape.constant(x.clone());
        let w = branch.weight_matrix(&tape, xi)?;
        let xc = compress_frame(&tape, xi, &branch)?;
        println!(
            "{:<6} {:>3}  {:<11}  {:<10}  {}",
            ratio.to_string(),
            branch.compressed,
            format!("{:?}", tape.shape(w)),
            format!("{:?}", tape.shape(xc)),
            branch.fw_macs()
        );
    }

    println!("\ngrid selection, M=8, M_k=4: {:?}", grid_indices(8, 4));
    println!("grid selection, M=196, M_k=21: {:?}", grid_indices(196, 21));
    println!("merge groups, M=10, M_k=4: {:?}", merge_groups(10, 4));
    Ok(())
}
