//! Variant comparison harness: trains each ablation on the same seed and
//! checks the structural properties each substitution must have.

use std::fmt::Write as _;

use crate::error::Result;
use crate::numcore::{ParamStore, Scalar, Tape, Tensor};
use crate::routing::SparsityRatio;
use crate::sparse_global::{
    grid_indices, AdaptiveBlock, BlockConfig, Compression, GlobalAttention, RoutingMode, Variant,
};
use crate::tokens::{TokenBatch, TokenLayout};
use crate::training::{train_toy, EvalStats, LossConfig, ToyConfig, TrainConfig};

/// Variants compared by [`run_ablation`], in table order.
pub const ABLATION_VARIANTS: [Variant; 5] = [Variant::Full, Variant::V1, Variant::V2, Variant::V3, Variant::V4];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub initial: EvalStats,
    pub last: EvalStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StructuralCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub ratios: Vec<SparsityRatio>,
    pub rows: Vec<AblationRow>,
    pub checks: Vec<StructuralCheck>,
}

impl AblationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Tab-separated comparison: losses, mean sparsity and per-block occupancy.
    pub fn table(&self) -> String {
        let mut s = String::from("variant\ttask_loss_initial\ttask_loss_final\tmean_k");
        for b in 0..self.rows.first().map_or(0, |r| r.last.occupancy.len()) {
            for k in &self.ratios {
                let _ = write!(s, "\tblock{b}_k={k}");
            }
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(
                s,
                "{}\t{:.6}\t{:.6}\t{:.6}",
                r.variant, r.initial.task_loss, r.last.task_loss, r.last.mean_k
            );
            for block in &r.last.occupancy {
                // V2 routes over a single branch.
                for b in 0..self.ratios.len() {
                    let _ = write!(s, "\t{:.4}", block.get(b).copied().unwrap_or(0.0));
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn checks_text(&self) -> String {
        self.checks
            .iter()
            .map(|c| format!("{}\t{}\t{}\n", c.name, if c.passed { "pass" } else { "FAIL" }, c.detail))
            .collect()
    }
}

/// Trains every variant and runs the structural checks.
pub fn run_ablation<T: Scalar>(model: &ToyConfig, loss: &LossConfig, train: &TrainConfig) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for variant in ABLATION_VARIANTS {
        let cfg = ToyConfig {
            variant,
            ..model.clone()
        };
        let rep = train_toy::<T>(&cfg, loss, train)?;
        rows.push(AblationRow {
            variant,
            initial: rep.initial,
            last: rep.last,
        });
    }
    let checks = vec![
        round_robin_check(model, train.seed)?,
        grid_check(train.seed)?,
        degenerate_merge_check(train.seed)?,
    ];
    Ok(AblationReport {
        ratios: model.ratios.clone(),
        rows,
        checks,
    })
}

fn random_tokens(layout: TokenLayout, seed: u64) -> Tensor<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[layout.total(), layout.dim], |_| rng.random_range(-1.0..1.0))
}

/// V1 over `3·n` frames must give every branch exactly a third of the frames.
fn round_robin_check(model: &ToyConfig, seed: u64) -> Result<StructuralCheck> {
    let n = model.ratios.len();
    let mut cfg = BlockConfig::new(8, 2, model.patches(), 1, model.ratios.clone());
    cfg.ffn_hidden = 16;
    let block = AdaptiveBlock::new("v1", cfg, Variant::V1)?;
    let mut store = ParamStore::<f64>::new(seed);
    block.init(&mut store)?;
    let layout = TokenLayout::new(3 * n, model.patches(), 1, 8)?;
    let tape = Tape::with_params(&store).inference();
    let batch = TokenBatch::from_tensor(&tape, layout, random_tokens(layout, seed))?;
    let idx = block
        .forward(&tape, &batch)?
        .routing
        .map(|d| d.branch_index)
        .unwrap_or_default();
    let expect: Vec<usize> = (0..3 * n).map(|i| i % n).collect();
    Ok(StructuralCheck {
        name: "v1_round_robin",
        passed: idx == expect,
        detail: format!("branch_index={idx:?}"),
    })
}

/// V3 with `M=8, M_k=4` keeps patches {0,2,4,6} of every frame.
fn grid_check(seed: u64) -> Result<StructuralCheck> {
    let half: SparsityRatio = SparsityRatio::new(1, 2)?;
    let mut cfg = BlockConfig::new(8, 2, 8, 1, vec![half]);
    cfg.ref_frame_dense = false;
    cfg.ffn_hidden = 16;
    let block = AdaptiveBlock::new("v3", cfg, Variant::V3)?;
    let mut store = ParamStore::<f64>::new(seed);
    block.init(&mut store)?;
    let layout = TokenLayout::new(2, 8, 1, 8)?;
    let tape = Tape::with_params(&store).inference();
    let batch = TokenBatch::from_tensor(&tape, layout, random_tokens(layout, seed))?;
    let g = tape.param("v3.norm1.gamma")?;
    let b = tape.param("v3.norm1.beta")?;
    let normed = tape.value(tape.layernorm(batch.tokens, g, b, block.cfg.eps)?);
    let (_, trace) = block.forward_traced(&tape, &batch)?;
    let kv = trace.compressed_kv.unwrap_or_else(|| Tensor::zeros(&[0, 8]));
    let picked = grid_indices(8, 4);
    let mut passed = picked == [0, 2, 4, 6] && kv.rows() == 2 * 4 + 2;
    if passed {
        for i in 0..2 {
            for (slot, &j) in picked.iter().enumerate() {
                passed &= kv.row(i * 4 + slot) == normed.row(layout.patch_rows(i).start + j);
            }
        }
    }
    Ok(StructuralCheck {
        name: "v3_grid_indices",
        passed,
        detail: format!("indices={picked:?}"),
    })
}

/// V4 with `M_k = M` against the dense block on shared weights.
fn degenerate_merge_check(seed: u64) -> Result<StructuralCheck> {
    let mut cfg = BlockConfig::new(8, 2, 8, 1, vec![SparsityRatio::DENSE]);
    cfg.ref_frame_dense = false;
    cfg.ffn_hidden = 16;
    let merge = AdaptiveBlock::with_mode(
        "v4",
        cfg.clone(),
        GlobalAttention::Adaptive {
            routing: RoutingMode::Fixed(0),
            compression: Compression::MergeUpsample,
        },
    )?;
    let full = AdaptiveBlock::new("v4", cfg, Variant::BaselineFullAttn)?;
    let mut store = ParamStore::<f64>::new(seed);
    merge.init(&mut store)?;
    let layout = TokenLayout::new(3, 8, 1, 8)?;
    let x = random_tokens(layout, seed);
    let run = |b: &AdaptiveBlock| -> Result<Tensor<f64>> {
        let tape = Tape::with_params(&store).inference();
        let batch = TokenBatch::from_tensor(&tape, layout, x.clone())?;
        Ok((*tape.value(b.forward(&tape, &batch)?.batch.tokens)).clone())
    };
    let dev = run(&merge)?.max_abs_diff(&run(&full)?);
    Ok(StructuralCheck {
        name: "v4_degenerate_merge",
        passed: dev < 1e-8,
        detail: format!("max_dev={dev:.3e}"),
    })
}
