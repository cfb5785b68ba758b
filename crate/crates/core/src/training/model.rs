use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::routing::{validate_branches, RoutingDecision, SparsityRatio};
use crate::sparse_global::{AdaptiveBlock, BlockConfig, BlockTrace, LayerNormParams, Variant};
use crate::tokens::{extract_patches, Patchifier, PatchifierConfig, TokenBatch};

/// Shape and variant of the toy multi-view model.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub frames: usize,
    /// Patch grid rows and columns per frame; `M = grid_h·grid_w`.
    pub grid_h: usize,
    pub grid_w: usize,
    /// Patch side in pixels.
    pub patch: usize,
    pub specials: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ratios: Vec<SparsityRatio>,
    pub gate_hidden: usize,
    pub fw_hidden: usize,
    pub ffn_mult: usize,
    pub ref_frame_dense: bool,
    pub variant: Variant,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            frames: 4,
            grid_h: 4,
            grid_w: 4,
            patch: 4,
            specials: 1,
            dim: 32,
            heads: 2,
            blocks: 2,
            ratios: SparsityRatio::default_branches(),
            gate_hidden: 32,
            fw_hidden: 0,
            ffn_mult: 4,
            ref_frame_dense: true,
            variant: Variant::Full,
        }
    }
}

impl ToyConfig {
    /// Small configuration for finite-difference checks: `L=3, M=8, S=1,
    /// D=16, H=2, N=2`. `M=8` leaves no token at `k=8/9`, so the branches
    /// are `{1/2, 3/4, 7/8}`.
    pub fn gradcheck() -> Self {
        Self {
            frames: 3,
            grid_h: 2,
            grid_w: 4,
            patch: 2,
            specials: 1,
            dim: 16,
            heads: 2,
            blocks: 2,
            ratios: ["1/2", "3/4", "7/8"]
                .iter()
                .map(|r| r.parse().expect("literal ratio"))
                .collect(),
            gate_hidden: 16,
            fw_hidden: 0,
            ffn_mult: 4,
            ref_frame_dense: true,
            variant: Variant::Full,
        }
    }

    pub fn patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.grid_h * self.patch, self.grid_w * self.patch)
    }

    pub fn patchifier(&self) -> PatchifierConfig {
        let (h, w) = self.image_size();
        PatchifierConfig {
            image_h: h,
            image_w: w,
            patch: self.patch,
            dim: self.dim,
            specials: self.specials,
            max_frames: self.frames,
        }
    }

    pub fn block(&self) -> BlockConfig {
        let mut b = BlockConfig::new(self.dim, self.heads, self.patches(), self.specials, self.ratios.clone());
        b.gate_hidden = self.gate_hidden;
        b.fw_hidden = self.fw_hidden;
        b.ffn_hidden = self.ffn_mult * self.dim;
        b.ref_frame_dense = self.ref_frame_dense;
        b
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.blocks == 0 {
            return Err(Error::config("frames and blocks must be positive"));
        }
        if self.patches() < 2 {
            return Err(Error::config("need at least two patches per frame"));
        }
        if self.variant != Variant::BaselineFullAttn {
            validate_branches(&self.ratios)?;
            for r in &self.ratios {
                if r.compressed_count(self.patches()) == 0 {
                    return Err(Error::config(format!(
                        "ratio {r} leaves no token for M={}",
                        self.patches()
                    )));
                }
            }
        }
        self.patchifier().validate()
    }
}

/// Patchifier, `N` blocks, and a linear head predicting each patch's pixels.
#[derive(Clone, Debug)]
pub struct ToyModel {
    pub cfg: ToyConfig,
    pub patchifier: Patchifier,
    pub blocks: Vec<AdaptiveBlock>,
    pub head_norm: LayerNormParams,
}

/// Model output for one batch of frames.
#[derive(Clone, Debug)]
pub struct ModelOutput<T> {
    /// Per-patch pixel predictions `[L·M, p²]`.
    pub pred: Var,
    pub tokens: TokenBatch,
    /// One decision per adaptive block.
    pub decisions: Vec<RoutingDecision<T>>,
}

impl ToyModel {
    pub const HEAD_W: &'static str = "head.w";
    pub const HEAD_B: &'static str = "head.b";

    pub fn new(cfg: ToyConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.blocks)
            .map(|n| AdaptiveBlock::new(&format!("block{n}"), cfg.block(), cfg.variant))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patchifier: Patchifier::new(cfg.patchifier())?,
            head_norm: LayerNormParams {
                prefix: "head.norm".into(),
                dim: cfg.dim,
            },
            blocks,
            cfg,
        })
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new(seed);
        self.patchifier.init(&mut store)?;
        for b in &self.blocks {
            b.init(&mut store)?;
        }
        self.head_norm.init(&mut store)?;
        store.xavier(Self::HEAD_W, self.cfg.dim, self.cfg.patch * self.cfg.patch)?;
        store.zeros(Self::HEAD_B, &[self.cfg.patch * self.cfg.patch])?;
        Ok(store)
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<'_, T>, images: &Tensor<T>) -> Result<ModelOutput<T>> {
        self.run(tape, images, None)
    }

    /// Forward pass that also records each block's intermediate values.
    pub fn forward_traced<T: Scalar>(
        &self,
        tape: &Tape<'_, T>,
        images: &Tensor<T>,
    ) -> Result<(ModelOutput<T>, Vec<BlockTrace<T>>)> {
        let mut traces = Vec::new();
        let out = self.run(tape, images, Some(&mut traces))?;
        Ok((out, traces))
    }

    fn run<T: Scalar>(
        &self,
        tape: &Tape<'_, T>,
        images: &Tensor<T>,
        mut traces: Option<&mut Vec<BlockTrace<T>>>,
    ) -> Result<ModelOutput<T>> {
        let mut batch = self.patchifier.forward(tape, images)?;
        let mut decisions = Vec::new();
        for b in &self.blocks {
            let out = match traces.as_deref_mut() {
                Some(ts) => {
                    let (out, t) = b.forward_traced(tape, &batch)?;
                    ts.push(t);
                    out
                }
                None => b.forward(tape, &batch)?,
            };
            decisions.extend(out.routing);
            batch = out.batch;
        }
        let patches = tape.gather_rows(batch.tokens, &batch.layout.all_patch_rows())?;
        let h = self.head_norm.forward(tape, patches, 1e-5)?;
        let pred = tape.matmul(h, tape.param(Self::HEAD_W)?)?;
        let pred = tape.add_row(pred, tape.param(Self::HEAD_B)?)?;
        Ok(ModelOutput {
            pred,
            tokens: batch,
            decisions,
        })
    }
}

/// Regression target: patch `j` of every frame is the mean of patch `j`
/// over all input frames. `[L·M, p²]`, same layout as the predictions.
pub fn cross_frame_target<T: Scalar>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let flat = extract_patches(images, patch)?;
    let frames = images.shape()[0];
    let per_frame = flat.rows() / frames;
    let width = flat.cols();
    let mut mean = vec![T::zero(); per_frame * width];
    for i in 0..frames {
        let block = &flat.data()[i * per_frame * width..(i + 1) * per_frame * width];
        for (m, &v) in mean.iter_mut().zip(block) {
            *m = *m + v;
        }
    }
    let inv = T::of(1.0 / frames as f64);
    for m in &mut mean {
        *m = *m * inv;
    }
    let data: Vec<T> = (0..frames).flat_map(|_| mean.iter().copied()).collect();
    Tensor::new(flat.shape(), data)
}
