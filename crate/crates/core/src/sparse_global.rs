//! Adaptive sparse global attention and the adaptive alternating block.
//!
//! Each frame's patch tokens `x_i ∈ R^{M×D}` are summarised by a per-frame
//! weight matrix `W_i = F_w(x_i) + B_k ∈ R^{M×M_k}` into `M_k = ⌊M(1−k)⌋`
//! representative tokens `W_iᵀ·x_i`. The representatives of all frames, the
//! special tokens, and optionally the reference frame's dense tokens form the
//! key/value set that every dense token attends to.

use std::fmt;
use std::str::FromStr;

use crate::attention::{frame_attention, multi_head, AttentionLayer};
use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::routing::{
    fixed_routing, frame_pool, gate, round_robin, selection_weight, straight_through, validate_branches, GatingLayer,
    RoutingDecision, SparsityRatio,
};
use crate::tokens::TokenBatch;

/// One compression pathway: ratio `k`, its weight generator `F_w` and bias `B_k`.
///
/// `F_w` maps each patch token (row) from `D` to `M_k` scores. With
/// `fw_hidden = 0` it is a single linear map (`fw.w [D, M_k]`); otherwise a
/// GELU MLP `fw.w1 [D, h]`, `fw.b1 [h]`, `fw.w2 [h, M_k]`. `bias` is `[M, M_k]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsityBranch {
    pub prefix: String,
    pub ratio: SparsityRatio,
    pub patches: usize,
    pub dim: usize,
    pub compressed: usize,
    pub fw_hidden: usize,
}

impl SparsityBranch {
    pub fn new(
        prefix: impl Into<String>,
        ratio: SparsityRatio,
        patches: usize,
        dim: usize,
        fw_hidden: usize,
    ) -> Result<Self> {
        let compressed = ratio.compressed_count(patches);
        if compressed < 1 {
            return Err(Error::config(format!(
                "ratio {ratio} leaves no representative token for M={patches}"
            )));
        }
        if compressed > patches {
            return Err(Error::config("compression must not expand the token count"));
        }
        Ok(Self {
            prefix: prefix.into(),
            ratio,
            patches,
            dim,
            compressed,
            fw_hidden,
        })
    }

    pub fn name(&self, w: &str) -> String {
        format!("{}.{w}", self.prefix)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.fw_hidden == 0 {
            store.xavier(&self.name("fw.w"), self.dim, self.compressed)?;
        } else {
            store.xavier(&self.name("fw.w1"), self.dim, self.fw_hidden)?;
            store.zeros(&self.name("fw.b1"), &[self.fw_hidden])?;
            store.xavier(&self.name("fw.w2"), self.fw_hidden, self.compressed)?;
        }
        store.zeros(&self.name("bias"), &[self.patches, self.compressed])
    }

    /// `W_i = F_w(x_i) + B_k`, shape `[M, M_k]`.
    pub fn weight_matrix<T: Scalar>(&self, tape: &Tape<'_, T>, x_i: Var) -> Result<Var> {
        let scores = if self.fw_hidden == 0 {
            tape.matmul(x_i, tape.param(&self.name("fw.w"))?)?
        } else {
            let h = tape.matmul(x_i, tape.param(&self.name("fw.w1"))?)?;
            let h = tape.add_row(h, tape.param(&self.name("fw.b1"))?)?;
            let h = tape.gelu(h);
            tape.matmul(h, tape.param(&self.name("fw.w2"))?)?
        };
        tape.add(scores, tape.param(&self.name("bias"))?)
    }

    /// Multiply-adds of `F_w` over one frame.
    pub fn fw_macs(&self) -> u64 {
        let (m, d, mk) = (self.patches as u64, self.dim as u64, self.compressed as u64);
        match self.fw_hidden as u64 {
            0 => m * d * mk,
            h => m * d * h + m * h * mk,
        }
    }
}

/// Representative tokens `W_iᵀ·x_i` (`[M_k, D]`) of one frame's patch tokens.
pub fn compress_frame<T: Scalar>(tape: &Tape<'_, T>, x_i: Var, branch: &SparsityBranch) -> Result<Var> {
    let shape = tape.shape(x_i);
    if shape != [branch.patches, branch.dim] {
        return Err(Error::shape("compress_frame", &shape, &[branch.patches, branch.dim]));
    }
    let (w, _) = compress_frame_with_weights(tape, x_i, branch)?;
    Ok(w)
}

fn compress_frame_with_weights<T: Scalar>(tape: &Tape<'_, T>, x_i: Var, branch: &SparsityBranch) -> Result<(Var, Var)> {
    let w = branch.weight_matrix(tape, x_i)?;
    let wt = tape.transpose(w)?;
    Ok((tape.matmul(wt, x_i)?, w))
}

/// Global key/value set: reference-frame dense tokens (if given), then each
/// frame's representatives in frame order, then all special tokens in frame order.
pub fn assemble_global_kv<T: Scalar>(
    tape: &Tape<'_, T>,
    compressed: &[Var],
    specials: Var,
    dense_ref: Option<Var>,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(compressed.len() + 2);
    parts.extend(dense_ref);
    parts.extend_from_slice(compressed);
    parts.push(specials);
    tape.concat_rows(&parts)
}

/// Every dense token queries the compressed set: `CrossAttn(x'·W^Q, x^c·W^K, x^c·W^V)`.
pub fn sparse_global_cross_attention<T: Scalar>(
    tape: &Tape<'_, T>,
    layer: &AttentionLayer,
    x_dense: Var,
    x_c: Var,
) -> Result<Var> {
    if tape.shape(x_c)[0] == 0 {
        return Err(Error::config("compressed key/value set is empty"));
    }
    multi_head(tape, layer, x_dense, x_c)
}

/// Patch indices kept by grid selection: every `⌈M/M_k⌉`-th token from 0.
/// When that stride would run past the frame, tokens are spread as `⌊j·M/M_k⌋`.
pub fn grid_indices(patches: usize, compressed: usize) -> Vec<usize> {
    let stride = patches.div_ceil(compressed.max(1));
    if compressed == 0 || (compressed - 1) * stride < patches {
        (0..compressed).map(|j| j * stride).collect()
    } else {
        (0..compressed).map(|j| j * patches / compressed).collect()
    }
}

/// Contiguous groups merged into one token each: group `j` covers
/// `⌊j·M/M_k⌋ .. ⌊(j+1)·M/M_k⌋`.
pub fn merge_groups(patches: usize, compressed: usize) -> Vec<std::ops::Range<usize>> {
    (0..compressed)
        .map(|j| j * patches / compressed..(j + 1) * patches / compressed)
        .collect()
}

/// How frames are assigned to branches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RoutingMode {
    Gated,
    /// Frame `i` to branch `i mod n`.
    RoundRobin,
    /// Every frame to one branch.
    Fixed(usize),
}

/// How a frame's patch tokens are reduced to `M_k` tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Compression {
    /// `W_iᵀ·x_i` with `W_i = F_w(x_i) + B_k`.
    Learned,
    /// Keep tokens at [`grid_indices`].
    Grid,
    /// Mean-merge [`merge_groups`], attend among merged tokens and specials,
    /// then copy each merged output back to its group (nearest-neighbour upsampling).
    MergeUpsample,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GlobalAttention {
    Adaptive {
        routing: RoutingMode,
        compression: Compression,
    },
    Full,
}

/// The full model and its ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Gated routing, learned representative tokens.
    Full,
    /// Round-robin routing over all branches.
    V1,
    /// One branch only.
    V2,
    /// Gated routing, grid token selection.
    V3,
    /// Gated routing, merged-token global attention with upsampling.
    V4,
    /// Dense alternating attention.
    BaselineFullAttn,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::V1,
        Variant::V2,
        Variant::V3,
        Variant::V4,
        Variant::BaselineFullAttn,
    ];

    pub fn global_attention(&self) -> GlobalAttention {
        use Compression::*;
        let adaptive = |routing, compression| GlobalAttention::Adaptive { routing, compression };
        match self {
            Variant::Full => adaptive(RoutingMode::Gated, Learned),
            Variant::V1 => adaptive(RoutingMode::RoundRobin, Learned),
            Variant::V2 => adaptive(RoutingMode::Fixed(0), Learned),
            Variant::V3 => adaptive(RoutingMode::Gated, Grid),
            Variant::V4 => adaptive(RoutingMode::Gated, MergeUpsample),
            Variant::BaselineFullAttn => GlobalAttention::Full,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::V1 => "V1",
            Variant::V2 => "V2",
            Variant::V3 => "V3",
            Variant::V4 => "V4",
            Variant::BaselineFullAttn => "baseline-full-attn",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" | "adaptive" => Ok(Variant::Full),
            "v1" => Ok(Variant::V1),
            "v2" => Ok(Variant::V2),
            "v3" => Ok(Variant::V3),
            "v4" => Ok(Variant::V4),
            "baseline-full-attn" | "baseline" => Ok(Variant::BaselineFullAttn),
            other => Err(Error::config(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub patches: usize,
    pub specials: usize,
    pub ratios: Vec<SparsityRatio>,
    pub gate_hidden: usize,
    pub ffn_hidden: usize,
    pub fw_hidden: usize,
    pub ref_frame_dense: bool,
    pub eps: f64,
}

impl BlockConfig {
    pub fn new(dim: usize, heads: usize, patches: usize, specials: usize, ratios: Vec<SparsityRatio>) -> Self {
        Self {
            dim,
            heads,
            patches,
            specials,
            ratios,
            gate_hidden: dim,
            ffn_hidden: 4 * dim,
            fw_hidden: 0,
            ref_frame_dense: true,
            eps: 1e-5,
        }
    }
}

/// `x ↦ W2·gelu(W1·x + b1) + b2`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeedForward {
    pub prefix: String,
    pub dim: usize,
    pub hidden: usize,
}

impl FeedForward {
    pub fn name(&self, w: &str) -> String {
        format!("{}.{w}", self.prefix)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.xavier(&self.name("w1"), self.dim, self.hidden)?;
        store.zeros(&self.name("b1"), &[self.hidden])?;
        store.xavier(&self.name("w2"), self.hidden, self.dim)?;
        store.zeros(&self.name("b2"), &[self.dim])
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<'_, T>, x: Var) -> Result<Var> {
        let h = tape.matmul(x, tape.param(&self.name("w1"))?)?;
        let h = tape.add_row(h, tape.param(&self.name("b1"))?)?;
        let h = tape.gelu(h);
        let y = tape.matmul(h, tape.param(&self.name("w2"))?)?;
        tape.add_row(y, tape.param(&self.name("b2"))?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerNormParams {
    pub prefix: String,
    pub dim: usize,
}

impl LayerNormParams {
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.ones(&format!("{}.gamma", self.prefix), &[self.dim])?;
        store.zeros(&format!("{}.beta", self.prefix), &[self.dim])
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<'_, T>, x: Var, eps: f64) -> Result<Var> {
        let g = tape.param(&format!("{}.gamma", self.prefix))?;
        let b = tape.param(&format!("{}.beta", self.prefix))?;
        tape.layernorm(x, g, b, eps)
    }
}

/// Result of one block: updated tokens and, for adaptive variants, the routing.
#[derive(Clone, Debug)]
pub struct BlockOutput<T> {
    pub batch: TokenBatch,
    pub routing: Option<RoutingDecision<T>>,
}

/// Intermediate values captured by [`AdaptiveBlock::forward_traced`].
#[derive(Clone, Debug, Default)]
pub struct BlockTrace<T> {
    /// `W_i` per frame (learned compression only).
    pub weight_matrices: Vec<Tensor<T>>,
    /// The assembled key/value set `x^c`.
    pub compressed_kv: Option<Tensor<T>>,
}

/// One adaptive alternating attention block: pre-norm residual sublayers
/// (sparse global attention, then frame attention, then a feed-forward MLP).
#[derive(Clone, Debug)]
pub struct AdaptiveBlock {
    pub prefix: String,
    pub cfg: BlockConfig,
    pub global: GlobalAttention,
    pub gating: Option<GatingLayer>,
    pub branches: Vec<SparsityBranch>,
    pub global_attn: AttentionLayer,
    pub frame_attn: AttentionLayer,
    pub ffn: FeedForward,
    pub norms: [LayerNormParams; 3],
}

impl AdaptiveBlock {
    /// Block for a named variant. V2 keeps only the first configured ratio.
    pub fn new(prefix: &str, cfg: BlockConfig, variant: Variant) -> Result<Self> {
        let mut cfg = cfg;
        if variant == Variant::V2 {
            cfg.ratios.truncate(1);
        }
        if matches!(variant, Variant::V4) {
            cfg.ref_frame_dense = false;
        }
        Self::with_mode(prefix, cfg, variant.global_attention())
    }

    pub fn with_mode(prefix: &str, cfg: BlockConfig, global: GlobalAttention) -> Result<Self> {
        let routing_needs_gate = matches!(
            &global,
            GlobalAttention::Adaptive {
                routing: RoutingMode::Gated,
                ..
            }
        );
        if routing_needs_gate {
            validate_branches(&cfg.ratios)?;
        }
        if cfg.ratios.is_empty() && global != GlobalAttention::Full {
            return Err(Error::config("adaptive block needs at least one branch"));
        }
        if let GlobalAttention::Adaptive {
            routing: RoutingMode::Fixed(b),
            ..
        } = &global
        {
            if *b >= cfg.ratios.len() {
                return Err(Error::config(format!("fixed branch {b} out of range")));
            }
        }
        let gating = if routing_needs_gate {
            Some(GatingLayer::new(
                format!("{prefix}.gate"),
                cfg.dim,
                cfg.gate_hidden,
                cfg.ratios.len(),
            )?)
        } else {
            None
        };
        let learned = matches!(
            &global,
            GlobalAttention::Adaptive {
                compression: Compression::Learned,
                ..
            }
        );
        let branches = if global == GlobalAttention::Full {
            Vec::new()
        } else {
            cfg.ratios
                .iter()
                .enumerate()
                .map(|(b, &r)| {
                    let fw_hidden = if learned { cfg.fw_hidden } else { 0 };
                    SparsityBranch::new(format!("{prefix}.branch{b}"), r, cfg.patches, cfg.dim, fw_hidden)
                })
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Self {
            global_attn: AttentionLayer::new(format!("{prefix}.global"), cfg.dim, cfg.heads)?,
            frame_attn: AttentionLayer::new(format!("{prefix}.frame"), cfg.dim, cfg.heads)?,
            ffn: FeedForward {
                prefix: format!("{prefix}.ffn"),
                dim: cfg.dim,
                hidden: cfg.ffn_hidden,
            },
            norms: [1, 2, 3].map(|i| LayerNormParams {
                prefix: format!("{prefix}.norm{i}"),
                dim: cfg.dim,
            }),
            prefix: prefix.to_string(),
            gating,
            branches,
            global,
            cfg,
        })
    }

    fn uses_learned_weights(&self) -> bool {
        matches!(
            self.global,
            GlobalAttention::Adaptive {
                compression: Compression::Learned,
                ..
            }
        )
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some(g) = &self.gating {
            g.init(store)?;
        }
        if self.uses_learned_weights() {
            for b in &self.branches {
                b.init(store)?;
            }
        }
        self.global_attn.init(store)?;
        self.frame_attn.init(store)?;
        self.ffn.init(store)?;
        for n in &self.norms {
            n.init(store)?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<'_, T>, batch: &TokenBatch) -> Result<BlockOutput<T>> {
        self.run(tape, batch, None)
    }

    pub fn forward_traced<T: Scalar>(
        &self,
        tape: &Tape<'_, T>,
        batch: &TokenBatch,
    ) -> Result<(BlockOutput<T>, BlockTrace<T>)> {
        let mut trace = BlockTrace {
            weight_matrices: Vec::new(),
            compressed_kv: None,
        };
        let out = self.run(tape, batch, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn run<T: Scalar>(
        &self,
        tape: &Tape<'_, T>,
        batch: &TokenBatch,
        trace: Option<&mut BlockTrace<T>>,
    ) -> Result<BlockOutput<T>> {
        self.check_layout(batch)?;
        let eps = self.cfg.eps;
        let x = batch.tokens;

        let xn = self.norms[0].forward(tape, x, eps)?;
        let (global, routing) = self.global_sublayer(tape, &batch.with_tokens(xn), trace)?;
        let x = tape.add(x, global)?;

        let xn = self.norms[1].forward(tape, x, eps)?;
        let local = frame_attention(tape, &self.frame_attn, &batch.with_tokens(xn))?;
        let x = tape.add(x, local.tokens)?;

        let xn = self.norms[2].forward(tape, x, eps)?;
        let f = self.ffn.forward(tape, xn)?;
        let x = tape.add(x, f)?;

        Ok(BlockOutput {
            batch: batch.with_tokens(x),
            routing,
        })
    }

    fn check_layout(&self, batch: &TokenBatch) -> Result<()> {
        let l = &batch.layout;
        if l.patches != self.cfg.patches || l.specials != self.cfg.specials || l.dim != self.cfg.dim {
            return Err(Error::shape(
                "adaptive block",
                &[l.patches, l.specials, l.dim],
                &[self.cfg.patches, self.cfg.specials, self.cfg.dim],
            ));
        }
        Ok(())
    }

    /// Routing alone, on already-normalised tokens.
    pub fn route<T: Scalar>(&self, tape: &Tape<'_, T>, normed: &TokenBatch) -> Result<RoutingDecision<T>> {
        let frames = normed.layout.frames;
        let routing = match &self.global {
            GlobalAttention::Adaptive { routing, .. } => routing,
            GlobalAttention::Full => return Err(Error::config("dense block has no routing")),
        };
        match routing {
            RoutingMode::Gated => {
                let pooled = frame_pool(tape, normed)?;
                let g = self.gating.as_ref().expect("gated block has a gate");
                gate(tape, pooled, g, &self.cfg.ratios)
            }
            RoutingMode::RoundRobin => {
                fixed_routing(tape, &round_robin(frames, self.cfg.ratios.len()), &self.cfg.ratios)
            }
            RoutingMode::Fixed(b) => fixed_routing(tape, &vec![*b; frames], &self.cfg.ratios),
        }
    }

    /// Global-attention sublayer on normalised tokens; returns its residual
    /// branch output and the routing (if any).
    pub fn global_sublayer<T: Scalar>(
        &self,
        tape: &Tape<'_, T>,
        normed: &TokenBatch,
        mut trace: Option<&mut BlockTrace<T>>,
    ) -> Result<(Var, Option<RoutingDecision<T>>)> {
        let compression = match &self.global {
            GlobalAttention::Full => {
                let out = multi_head(tape, &self.global_attn, normed.tokens, normed.tokens)?;
                return Ok((out, None));
            }
            GlobalAttention::Adaptive { compression, .. } => *compression,
        };
        let layout = normed.layout;
        let xn = normed.tokens;
        let decision = self.route(tape, normed)?;
        let selection = straight_through(tape, &decision)?;
        let specials = tape.gather_rows(xn, &layout.all_special_rows())?;

        let mut reduced = Vec::with_capacity(layout.frames);
        for i in 0..layout.frames {
            let branch = &self.branches[decision.branch_index[i]];
            let rows: Vec<usize> = layout.patch_rows(i).collect();
            let tokens = match compression {
                Compression::Learned => {
                    let x_i = tape.gather_rows(xn, &rows)?;
                    let (c, w) = compress_frame_with_weights(tape, x_i, branch)?;
                    if let Some(t) = trace.as_deref_mut() {
                        t.weight_matrices.push((*tape.value(w)).clone());
                    }
                    c
                }
                Compression::Grid => {
                    let keep: Vec<usize> = grid_indices(layout.patches, branch.compressed)
                        .into_iter()
                        .map(|j| rows[j])
                        .collect();
                    tape.gather_rows(xn, &keep)?
                }
                Compression::MergeUpsample => {
                    let groups: Vec<Vec<usize>> = merge_groups(layout.patches, branch.compressed)
                        .into_iter()
                        .map(|g| g.map(|j| rows[j]).collect())
                        .collect();
                    tape.group_mean(xn, &groups)?
                }
            };
            let s = selection_weight(tape, selection, &decision, i)?;
            reduced.push(tape.scale_by(tokens, s)?);
        }

        let out = if compression == Compression::MergeUpsample {
            let merged = tape.concat_rows(&reduced)?;
            let set = tape.concat_rows(&[merged, specials])?;
            if let Some(t) = trace {
                t.compressed_kv = Some((*tape.value(set)).clone());
            }
            let y = multi_head(tape, &self.global_attn, set, set)?;
            tape.gather_rows(y, &self.upsample_index(&decision, layout.frames))?
        } else {
            let dense_ref = if self.cfg.ref_frame_dense {
                let rows: Vec<usize> = layout.frame_rows(0).collect();
                Some(tape.gather_rows(xn, &rows)?)
            } else {
                None
            };
            let x_c = assemble_global_kv(tape, &reduced, specials, dense_ref)?;
            if let Some(t) = trace {
                t.compressed_kv = Some((*tape.value(x_c)).clone());
            }
            sparse_global_cross_attention(tape, &self.global_attn, xn, x_c)?
        };
        Ok((out, Some(decision)))
    }

    /// Row of the merged-attention output that each dense token copies.
    fn upsample_index<T: Scalar>(&self, decision: &RoutingDecision<T>, frames: usize) -> Vec<usize> {
        let (m, s) = (self.cfg.patches, self.cfg.specials);
        let counts: Vec<usize> = decision
            .branch_index
            .iter()
            .map(|&b| self.branches[b].compressed)
            .collect();
        let merged_total: usize = counts.iter().sum();
        let mut out = Vec::with_capacity(frames * (m + s));
        let mut offset = 0;
        for (i, &mk) in counts.iter().enumerate() {
            for (g, range) in merge_groups(m, mk).into_iter().enumerate() {
                out.extend(std::iter::repeat_n(offset + g, range.len()));
            }
            out.extend((0..s).map(|j| merged_total + i * s + j));
            offset += mk;
        }
        out
    }

    /// Size of the key/value set for a given assignment.
    pub fn kv_len(&self, branch_index: &[usize]) -> usize {
        let reduced: usize = branch_index.iter().map(|&b| self.branches[b].compressed).sum();
        let refs = if self.cfg.ref_frame_dense {
            self.cfg.patches + self.cfg.specials
        } else {
            0
        };
        reduced + branch_index.len() * self.cfg.specials + refs
    }
}

/// Forward of one block under a named variant.
pub fn ablation_variant<T: Scalar>(
    tape: &Tape<'_, T>,
    base: &AdaptiveBlock,
    batch: &TokenBatch,
    variant: Variant,
) -> Result<BlockOutput<T>> {
    let block = AdaptiveBlock::new(&base.prefix, base.cfg.clone(), variant)?;
    block.forward(tape, batch)
}

/// Outcome of one identity-compression comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquivalenceCase {
    pub seed: u64,
    pub frames: usize,
    pub patches: usize,
    pub specials: usize,
    pub max_dev: f64,
}

/// Compresses every frame with `W_i = I` (a `k = 0` branch), appends the
/// special tokens, and compares sparse cross-attention with dense global
/// attention on random tokens. Sizes are drawn from `seed`: `L ≤ 4`, `M ≤ 8`.
pub fn identity_equivalence(seed: u64, dim: usize, heads: usize) -> Result<EquivalenceCase> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let frames = rng.random_range(1..=4);
    let patches = rng.random_range(2..=8);
    let specials = rng.random_range(0..=2);
    let layout = crate::tokens::TokenLayout::new(frames, patches, specials, dim)?;
    let layer = AttentionLayer::new("global", dim, heads)?;
    let mut store = ParamStore::<f64>::new(seed);
    layer.init(&mut store)?;
    let branch = SparsityBranch::new("identity", SparsityRatio::DENSE, patches, dim, 0)?;
    store.set(&branch.name("fw.w"), Tensor::zeros(&[dim, patches]));
    store.set(&branch.name("bias"), Tensor::eye(patches));
    let x = Tensor::from_fn(&[layout.total(), dim], |_| rng.random_range(-1.0..1.0));

    let tape = Tape::with_params(&store).inference();
    let batch = TokenBatch::from_tensor(&tape, layout, x)?;
    let compressed = (0..frames)
        .map(|i| {
            let rows: Vec<usize> = layout.patch_rows(i).collect();
            compress_frame(&tape, tape.gather_rows(batch.tokens, &rows)?, &branch)
        })
        .collect::<Result<Vec<_>>>()?;
    let specials_v = tape.gather_rows(batch.tokens, &layout.all_special_rows())?;
    let kv = assemble_global_kv(&tape, &compressed, specials_v, None)?;
    let sparse = sparse_global_cross_attention(&tape, &layer, batch.tokens, kv)?;
    let full = crate::attention::global_full_attention(&tape, &layer, &batch)?;
    Ok(EquivalenceCase {
        seed,
        frames,
        patches,
        specials,
        max_dev: tape.value(sparse).max_abs_diff(&tape.value(full.tokens)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_stride() {
        assert_eq!(grid_indices(8, 4), vec![0, 2, 4, 6]);
        assert_eq!(grid_indices(16, 4), vec![0, 4, 8, 12]);
        assert_eq!(grid_indices(10, 4), vec![0, 3, 6, 9]);
        assert_eq!(grid_indices(8, 7), vec![0, 1, 2, 3, 4, 5, 6]);
        assert_eq!(grid_indices(16, 1), vec![0]);
    }

    #[test]
    fn merge_groups_partition() {
        let g = merge_groups(10, 4);
        assert_eq!(g, vec![0..2, 2..5, 5..7, 7..10]);
        assert_eq!(merge_groups(4, 4), vec![0..1, 1..2, 2..3, 3..4]);
    }

    #[test]
    fn branch_rejects_empty_compression() {
        let r: SparsityRatio = "8/9".parse().unwrap();
        assert!(SparsityBranch::new("b", r, 8, 4, 0).is_err());
        assert_eq!(SparsityBranch::new("b", r, 9, 4, 0).unwrap().compressed, 1);
        assert_eq!(
            SparsityBranch::new("b", SparsityRatio::DENSE, 9, 4, 0)
                .unwrap()
                .compressed,
            9
        );
    }

    #[test]
    fn variant_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("V9".parse::<Variant>().is_err());
    }
}
