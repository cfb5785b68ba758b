//! Multiply-add accounting and wall-clock comparison of frame, dense global
//! and adaptive sparse global attention.
//!
//! Counts are multiply-adds. Softmax is charged [`SOFTMAX_MACS_PER_ENTRY`]
//! per score entry and per head (max, exp-sum, normalise). Bias additions,
//! layer norms and gathers are not counted.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::attention::{frame_attention, global_full_attention, AttentionLayer};
use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Scalar, Tape, Tensor, SOFTMAX_MACS_PER_ENTRY};
use crate::routing::{round_robin, SparsityRatio};
use crate::sparse_global::{assemble_global_kv, compress_frame, sparse_global_cross_attention, SparsityBranch};
use crate::tokens::{TokenBatch, TokenLayout};

/// Dense global attention over `T = L·(M+S)` tokens:
/// `4·T·D² + 2·T²·D + c_s·H·T²`.
pub fn flop_count_full(frames: usize, patches: usize, specials: usize, dim: usize, heads: usize) -> u64 {
    let t = (frames * (patches + specials)) as u64;
    let (d, h) = (dim as u64, heads as u64);
    4 * t * d * d + 2 * t * t * d + SOFTMAX_MACS_PER_ENTRY * h * t * t
}

/// Key/value count `T_c = Σ_i M_k(i) + L·S (+ M+S with a dense reference frame)`.
pub fn compressed_len(patches: usize, specials: usize, ks: &[SparsityRatio], ref_frame: bool) -> usize {
    let reduced: usize = ks.iter().map(|k| k.compressed_count(patches)).sum();
    reduced + ks.len() * specials + if ref_frame { patches + specials } else { 0 }
}

/// Sparse global attention with frame `i` compressed at `ks[i]`:
/// `Σ_i 2·M·D·M_k(i)` (linear `F_w` and `W_iᵀ·x_i`) plus cross-attention
/// `2·T·D² + 2·T_c·D² + 2·T·T_c·D + c_s·H·T·T_c`.
pub fn flop_count_sparse(
    patches: usize,
    specials: usize,
    dim: usize,
    heads: usize,
    ks: &[SparsityRatio],
    ref_frame: bool,
) -> u64 {
    let t = (ks.len() * (patches + specials)) as u64;
    let tc = compressed_len(patches, specials, ks, ref_frame) as u64;
    let (m, d, h) = (patches as u64, dim as u64, heads as u64);
    let compression: u64 = ks.iter().map(|k| 2 * m * d * k.compressed_count(patches) as u64).sum();
    compression + 2 * t * d * d + 2 * tc * d * d + 2 * t * tc * d + SOFTMAX_MACS_PER_ENTRY * h * t * tc
}

/// Per-frame attention: `4·T·D² + L·(2·(M+S)²·D + c_s·H·(M+S)²)`.
pub fn flop_count_frame(frames: usize, patches: usize, specials: usize, dim: usize, heads: usize) -> u64 {
    let n = (patches + specials) as u64;
    let (l, d, h) = (frames as u64, dim as u64, heads as u64);
    4 * l * n * d * d + l * (2 * n * n * d + SOFTMAX_MACS_PER_ENTRY * h * n * n)
}

/// Peak live activations of dense global attention, in bytes: input, Q, K,
/// V, output (`5·T·D`) and one head's worth of scores per head (`H·T²`).
pub fn mem_estimate_full(
    frames: usize,
    patches: usize,
    specials: usize,
    dim: usize,
    heads: usize,
    bytes: usize,
) -> u64 {
    let t = (frames * (patches + specials)) as u64;
    bytes as u64 * (5 * t * dim as u64 + heads as u64 * t * t)
}

/// Sparse counterpart: input, Q and output (`3·T·D`), compressed set, K, V
/// (`3·T_c·D`), the largest per-frame weight matrix and `H·T·T_c` scores.
pub fn mem_estimate_sparse(
    patches: usize,
    specials: usize,
    dim: usize,
    heads: usize,
    ks: &[SparsityRatio],
    ref_frame: bool,
    bytes: usize,
) -> u64 {
    let t = (ks.len() * (patches + specials)) as u64;
    let tc = compressed_len(patches, specials, ks, ref_frame) as u64;
    let w = ks.iter().map(|k| k.compressed_count(patches)).max().unwrap_or(0) as u64 * patches as u64;
    bytes as u64 * (3 * t * dim as u64 + 3 * tc * dim as u64 + w + heads as u64 * t * tc)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub frame_counts: Vec<usize>,
    pub patches: usize,
    pub specials: usize,
    pub dim: usize,
    pub heads: usize,
    /// Frames are assigned to these ratios round-robin.
    pub ratios: Vec<SparsityRatio>,
    pub ref_frame_dense: bool,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            frame_counts: vec![16, 32, 64],
            patches: 196,
            specials: 1,
            dim: 64,
            heads: 4,
            ratios: SparsityRatio::default_branches(),
            ref_frame_dense: true,
            reps: 9,
            warmup: 2,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps < 3 {
            return Err(Error::config("bench needs at least 3 repetitions"));
        }
        if self.frame_counts.is_empty() || self.frame_counts.contains(&0) {
            return Err(Error::config("frame counts must be positive"));
        }
        if self.ratios.is_empty() {
            return Err(Error::config("bench needs at least one ratio"));
        }
        for r in &self.ratios {
            if r.compressed_count(self.patches) == 0 {
                return Err(Error::config(format!(
                    "ratio {r} leaves no token for M={}",
                    self.patches
                )));
            }
        }
        AttentionLayer::new("bench", self.dim, self.heads).map(|_| ())
    }

    /// Per-frame ratios for `frames` frames.
    pub fn assignment(&self, frames: usize) -> Vec<SparsityRatio> {
        round_robin(frames, self.ratios.len())
            .into_iter()
            .map(|b| self.ratios[b])
            .collect()
    }
}

/// Wall-clock summary over the timed repetitions, in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timing {
    pub mean: f64,
    pub median: f64,
    pub stddev: f64,
}

impl Timing {
    fn of(samples: &[Duration]) -> Self {
        let mut ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let n = ms.len().max(1) as f64;
        let mean = ms.iter().sum::<f64>() / n;
        let var = ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mid = ms.len() / 2;
        let median = if ms.is_empty() {
            0.0
        } else if ms.len() % 2 == 1 {
            ms[mid]
        } else {
            0.5 * (ms[mid - 1] + ms[mid])
        };
        Self {
            mean,
            median,
            stddev: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub frames: usize,
    pub patches: usize,
    pub specials: usize,
    pub dim: usize,
    pub heads: usize,
    pub ks: Vec<SparsityRatio>,
    pub ref_frame_dense: bool,
    pub flops_full: u64,
    pub flops_sparse: u64,
    pub flops_frame: u64,
    /// Multiply-adds recorded by the instrumented kernels during the timed runs.
    pub counted_full: u64,
    pub counted_sparse: u64,
    pub counted_frame: u64,
    pub mem_full: u64,
    pub mem_sparse: u64,
    pub frame: Timing,
    pub full: Timing,
    pub sparse: Timing,
    pub warnings: Vec<String>,
}

impl BenchReport {
    pub fn k_mean(&self) -> f64 {
        self.ks.iter().map(SparsityRatio::value).sum::<f64>() / self.ks.len().max(1) as f64
    }

    pub fn speedup_analytic(&self) -> f64 {
        self.flops_full as f64 / self.flops_sparse as f64
    }

    pub fn speedup_measured(&self) -> f64 {
        self.full.median / self.sparse.median
    }

    /// Dense global over frame attention, measured.
    pub fn global_frame_ratio(&self) -> f64 {
        self.full.median / self.frame.median
    }
}

pub const CSV_HEADER: &str =
    "L,M,S,D,H,k_mean,flops_full,flops_sparse,ms_frame,ms_full,ms_sparse,speedup_analytic,speedup_measured";

/// Columns that depend on the clock.
pub const TIMING_COLUMNS: [&str; 4] = ["ms_frame", "ms_full", "ms_sparse", "speedup_measured"];

pub fn reports_csv(reports: &[BenchReport]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{},{},{:.4},{:.4},{:.4},{:.4},{:.4}",
            r.frames,
            r.patches,
            r.specials,
            r.dim,
            r.heads,
            r.k_mean(),
            r.flops_full,
            r.flops_sparse,
            r.frame.median,
            r.full.median,
            r.sparse.median,
            r.speedup_analytic(),
            r.speedup_measured()
        );
    }
    s
}

/// One `L,series,metric,value` row per measurement, for plotting.
pub fn reports_long_csv(reports: &[BenchReport]) -> String {
    let mut s = String::from("L,series,metric,value\n");
    for r in reports {
        let rows: [(&str, &str, String); 12] = [
            ("frame", "flops", r.flops_frame.to_string()),
            ("full", "flops", r.flops_full.to_string()),
            ("sparse", "flops", r.flops_sparse.to_string()),
            ("full", "mem_bytes", r.mem_full.to_string()),
            ("sparse", "mem_bytes", r.mem_sparse.to_string()),
            ("frame", "ms_median", format!("{:.4}", r.frame.median)),
            ("full", "ms_median", format!("{:.4}", r.full.median)),
            ("sparse", "ms_median", format!("{:.4}", r.sparse.median)),
            ("frame", "ms_stddev", format!("{:.4}", r.frame.stddev)),
            ("full", "ms_stddev", format!("{:.4}", r.full.stddev)),
            ("sparse", "ms_stddev", format!("{:.4}", r.sparse.stddev)),
            (
                "full_over_sparse",
                "speedup_analytic",
                format!("{:.4}", r.speedup_analytic()),
            ),
        ];
        for (series, metric, value) in rows {
            let _ = writeln!(s, "{},{series},{metric},{value}", r.frames);
        }
    }
    s
}

/// Removes the clock-dependent columns from a [`reports_csv`] body.
pub fn strip_timing_columns(csv: &str) -> String {
    let mut lines = csv.lines();
    let Some(header) = lines.next() else {
        return String::new();
    };
    let keep: Vec<bool> = header.split(',').map(|c| !TIMING_COLUMNS.contains(&c)).collect();
    let pick = |line: &str| {
        line.split(',')
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(v, _)| v)
            .collect::<Vec<_>>()
            .join(",")
    };
    let mut out = pick(header);
    out.push('\n');
    for line in lines {
        out.push_str(&pick(line));
        out.push('\n');
    }
    out
}

/// Smallest observable step of the monotonic clock.
pub fn clock_tick() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Weights shared by the three timed layers.
struct BenchModel<T> {
    layer: AttentionLayer,
    branches: Vec<SparsityBranch>,
    store: ParamStore<T>,
}

impl<T: Scalar> BenchModel<T> {
    fn new(cfg: &BenchConfig) -> Result<Self> {
        let layer = AttentionLayer::new("attn", cfg.dim, cfg.heads)?;
        let mut store = ParamStore::new(cfg.seed);
        layer.init(&mut store)?;
        let branches = cfg
            .ratios
            .iter()
            .enumerate()
            .map(|(b, &k)| SparsityBranch::new(format!("branch{b}"), k, cfg.patches, cfg.dim, 0))
            .collect::<Result<Vec<_>>>()?;
        for b in &branches {
            b.init(&mut store)?;
        }
        Ok(Self { layer, branches, store })
    }
}

/// Sparse global attention for a fixed per-frame branch assignment; returns
/// the output tokens' tape and the multiply-adds it charged.
fn sparse_global_layer<T: Scalar>(
    model: &BenchModel<T>,
    layout: TokenLayout,
    x: &Tensor<T>,
    assignment: &[usize],
    ref_frame: bool,
) -> Result<u64> {
    let tape = Tape::with_params(&model.store).inference();
    let batch = TokenBatch::from_tensor(&tape, layout, x.clone())?;
    let mut compressed = Vec::with_capacity(layout.frames);
    for (i, &b) in assignment.iter().enumerate() {
        let rows: Vec<usize> = layout.patch_rows(i).collect();
        let x_i = tape.gather_rows(batch.tokens, &rows)?;
        compressed.push(compress_frame(&tape, x_i, &model.branches[b])?);
    }
    let specials = tape.gather_rows(batch.tokens, &layout.all_special_rows())?;
    let dense_ref = if ref_frame {
        let rows: Vec<usize> = layout.frame_rows(0).collect();
        Some(tape.gather_rows(batch.tokens, &rows)?)
    } else {
        None
    };
    let kv = assemble_global_kv(&tape, &compressed, specials, dense_ref)?;
    sparse_global_cross_attention(&tape, &model.layer, batch.tokens, kv)?;
    Ok(tape.macs())
}

fn full_layer<T: Scalar>(model: &BenchModel<T>, layout: TokenLayout, x: &Tensor<T>) -> Result<u64> {
    let tape = Tape::with_params(&model.store).inference();
    let batch = TokenBatch::from_tensor(&tape, layout, x.clone())?;
    global_full_attention(&tape, &model.layer, &batch)?;
    Ok(tape.macs())
}

fn frame_layer<T: Scalar>(model: &BenchModel<T>, layout: TokenLayout, x: &Tensor<T>) -> Result<u64> {
    let tape = Tape::with_params(&model.store).inference();
    let batch = TokenBatch::from_tensor(&tape, layout, x.clone())?;
    frame_attention(&tape, &model.layer, &batch)?;
    Ok(tape.macs())
}

fn time<F: FnMut() -> Result<u64>>(warmup: usize, reps: usize, mut f: F) -> Result<(Vec<Duration>, u64)> {
    let mut macs = 0;
    for _ in 0..warmup {
        macs = f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        macs = f()?;
        samples.push(start.elapsed());
    }
    Ok((samples, macs))
}

/// Counts, estimates and times the three attention layers for every frame count.
pub fn run_bench<T: Scalar>(cfg: &BenchConfig) -> Result<Vec<BenchReport>> {
    cfg.validate()?;
    let model = BenchModel::<T>::new(cfg)?;
    let tick = clock_tick();
    let mut out = Vec::with_capacity(cfg.frame_counts.len());
    for &frames in &cfg.frame_counts {
        let layout = TokenLayout::new(frames, cfg.patches, cfg.specials, cfg.dim)?;
        let x = Tensor::from_fn(&[layout.total(), cfg.dim], |i| {
            T::of(((i as f64 * 0.618_033_988_75 + cfg.seed as f64 * 0.1).fract() - 0.5) * 2.0)
        });
        let assignment = round_robin(frames, cfg.ratios.len());
        let ks = cfg.assignment(frames);

        let (frame_t, counted_frame) = time(cfg.warmup, cfg.reps, || frame_layer(&model, layout, &x))?;
        let (full_t, counted_full) = time(cfg.warmup, cfg.reps, || full_layer(&model, layout, &x))?;
        let (sparse_t, counted_sparse) = time(cfg.warmup, cfg.reps, || {
            sparse_global_layer(&model, layout, &x, &assignment, cfg.ref_frame_dense)
        })?;

        let mut warnings = Vec::new();
        for (name, samples) in [("frame", &frame_t), ("full", &full_t), ("sparse", &sparse_t)] {
            let mut s = samples.clone();
            s.sort();
            if s[s.len() / 2] < tick * 10 {
                warnings.push(format!(
                    "L={frames} {name}: median below 10 clock ticks ({tick:?}); increase the problem size"
                ));
            }
        }

        out.push(BenchReport {
            frames,
            patches: cfg.patches,
            specials: cfg.specials,
            dim: cfg.dim,
            heads: cfg.heads,
            flops_full: flop_count_full(frames, cfg.patches, cfg.specials, cfg.dim, cfg.heads),
            flops_sparse: flop_count_sparse(cfg.patches, cfg.specials, cfg.dim, cfg.heads, &ks, cfg.ref_frame_dense),
            flops_frame: flop_count_frame(frames, cfg.patches, cfg.specials, cfg.dim, cfg.heads),
            counted_full,
            counted_sparse,
            counted_frame,
            mem_full: mem_estimate_full(frames, cfg.patches, cfg.specials, cfg.dim, cfg.heads, T::BYTES),
            mem_sparse: mem_estimate_sparse(
                cfg.patches,
                cfg.specials,
                cfg.dim,
                cfg.heads,
                &ks,
                cfg.ref_frame_dense,
                T::BYTES,
            ),
            ks,
            ref_frame_dense: cfg.ref_frame_dense,
            frame: Timing::of(&frame_t),
            full: Timing::of(&full_t),
            sparse: Timing::of(&sparse_t),
            warnings,
        });
    }
    Ok(out)
}

/// Multiply-adds charged by one instrumented pass of each layer, without timing.
pub fn counted_macs<T: Scalar>(cfg: &BenchConfig, frames: usize) -> Result<(u64, u64, u64)> {
    let model = BenchModel::<T>::new(cfg)?;
    let layout = TokenLayout::new(frames, cfg.patches, cfg.specials, cfg.dim)?;
    let x = Tensor::zeros(&[layout.total(), cfg.dim]);
    let assignment = round_robin(frames, cfg.ratios.len());
    Ok((
        frame_layer(&model, layout, &x)?,
        full_layer(&model, layout, &x)?,
        sparse_global_layer(&model, layout, &x, &assignment, cfg.ref_frame_dense)?,
    ))
}
