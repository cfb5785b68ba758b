//! Token sequences: patchified synthetic frames plus per-frame special tokens.
//!
//! Layout is frame-major. Frame `i` occupies rows `i·(M+S) .. (i+1)·(M+S)`;
//! within a frame the `M` patch tokens come first, then the `S` special
//! (camera / register) tokens.

use std::f64::consts::PI;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub frames: usize,
    pub patches: usize,
    pub specials: usize,
    pub dim: usize,
}

impl TokenLayout {
    pub fn new(frames: usize, patches: usize, specials: usize, dim: usize) -> Result<Self> {
        if frames < 1 || patches < 2 || dim < 2 {
            return Err(Error::config(format!(
                "token layout needs L>=1, M>=2, D>=2 (got L={frames}, M={patches}, D={dim})"
            )));
        }
        Ok(Self {
            frames,
            patches,
            specials,
            dim,
        })
    }

    pub fn per_frame(&self) -> usize {
        self.patches + self.specials
    }

    pub fn total(&self) -> usize {
        self.frames * self.per_frame()
    }

    pub fn frame_rows(&self, frame: usize) -> Range<usize> {
        let s = frame * self.per_frame();
        s..s + self.per_frame()
    }

    pub fn patch_rows(&self, frame: usize) -> Range<usize> {
        let s = frame * self.per_frame();
        s..s + self.patches
    }

    pub fn special_rows(&self, frame: usize) -> Range<usize> {
        let s = frame * self.per_frame() + self.patches;
        s..s + self.specials
    }

    /// Patch rows of every frame, frame order.
    pub fn all_patch_rows(&self) -> Vec<usize> {
        (0..self.frames).flat_map(|i| self.patch_rows(i)).collect()
    }

    /// Special rows of every frame, frame order.
    pub fn all_special_rows(&self) -> Vec<usize> {
        (0..self.frames).flat_map(|i| self.special_rows(i)).collect()
    }
}

/// `L × (M+S) × D` tokens recorded on a tape, stored as a `[L·(M+S), D]` matrix.
#[derive(Clone, Copy, Debug)]
pub struct TokenBatch {
    pub layout: TokenLayout,
    pub tokens: Var,
}

impl TokenBatch {
    pub fn new<T: Scalar>(tape: &Tape<'_, T>, layout: TokenLayout, tokens: Var) -> Result<Self> {
        let shape = tape.shape(tokens);
        if shape != [layout.total(), layout.dim] {
            return Err(Error::shape("token batch", &shape, &[layout.total(), layout.dim]));
        }
        Ok(Self { layout, tokens })
    }

    /// Wraps a plain `[L·(M+S), D]` (or `[L, M+S, D]`) tensor as a constant.
    pub fn from_tensor<T: Scalar>(tape: &Tape<'_, T>, layout: TokenLayout, t: Tensor<T>) -> Result<Self> {
        let t = t.reshape(&[layout.total(), layout.dim])?;
        let v = tape.constant(t);
        Self::new(tape, layout, v)
    }

    pub fn with_tokens(&self, tokens: Var) -> Self {
        Self { tokens, ..*self }
    }

    /// Tokens of one frame, `[M+S, D]`.
    pub fn frame<T: Scalar>(&self, tape: &Tape<'_, T>, frame: usize) -> Result<Var> {
        let idx: Vec<usize> = self.layout.frame_rows(frame).collect();
        tape.gather_rows(self.tokens, &idx)
    }
}

/// Disjoint patch / special views of a batch.
#[derive(Clone, Copy, Debug)]
pub struct SplitTokens {
    /// `[L·M, D]`, frame order.
    pub patches: Var,
    /// `[L·S, D]`, frame order; zero rows when `S = 0`.
    pub specials: Var,
}

pub fn split_patch_special<T: Scalar>(tape: &Tape<'_, T>, batch: &TokenBatch) -> Result<SplitTokens> {
    Ok(SplitTokens {
        patches: tape.gather_rows(batch.tokens, &batch.layout.all_patch_rows())?,
        specials: tape.gather_rows(batch.tokens, &batch.layout.all_special_rows())?,
    })
}

/// Inverse of [`split_patch_special`].
pub fn recombine<T: Scalar>(tape: &Tape<'_, T>, layout: TokenLayout, split: SplitTokens) -> Result<TokenBatch> {
    let joined = tape.concat_rows(&[split.patches, split.specials])?;
    let n_patch = layout.frames * layout.patches;
    let mut order = Vec::with_capacity(layout.total());
    for i in 0..layout.frames {
        order.extend(i * layout.patches..(i + 1) * layout.patches);
        order.extend((i * layout.specials..(i + 1) * layout.specials).map(|r| n_patch + r));
    }
    let tokens = tape.gather_rows(joined, &order)?;
    TokenBatch::new(tape, layout, tokens)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchifierConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub dim: usize,
    pub specials: usize,
    pub max_frames: usize,
}

impl PatchifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.image_h.is_multiple_of(self.patch) || !self.image_w.is_multiple_of(self.patch) {
            return Err(Error::config(format!(
                "image {}x{} not divisible by patch side {}",
                self.image_h, self.image_w, self.patch
            )));
        }
        if self.max_frames == 0 {
            return Err(Error::config("max_frames must be positive"));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        (self.image_h / self.patch) * (self.image_w / self.patch)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch
    }
}

/// Linear stand-in for a visual encoder. Parameters live under `patchify.*`:
/// `projection [P, D]`, `pos_embed [M, D]`, `frame_embed [max_frames, D]`
/// and, when `S > 0`, `special_init [S, D]`.
#[derive(Clone, Debug)]
pub struct Patchifier {
    pub cfg: PatchifierConfig,
}

impl Patchifier {
    pub const PROJECTION: &'static str = "patchify.projection";
    pub const POS_EMBED: &'static str = "patchify.pos_embed";
    pub const FRAME_EMBED: &'static str = "patchify.frame_embed";
    pub const SPECIAL_INIT: &'static str = "patchify.special_init";

    pub fn new(cfg: PatchifierConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let c = &self.cfg;
        store.xavier(Self::PROJECTION, c.patch_len(), c.dim)?;
        store.xavier(Self::POS_EMBED, c.patches(), c.dim)?;
        store.xavier(Self::FRAME_EMBED, c.max_frames, c.dim)?;
        if c.specials > 0 {
            store.xavier(Self::SPECIAL_INIT, c.specials, c.dim)?;
        }
        Ok(())
    }

    pub fn layout(&self, frames: usize) -> Result<TokenLayout> {
        TokenLayout::new(frames, self.cfg.patches(), self.cfg.specials, self.cfg.dim)
    }

    /// `token(i, j) = patch_j(frame_i)·projection + pos_embed[j] + frame_embed[i]`,
    /// followed by the shared special tokens of each frame.
    pub fn forward<T: Scalar>(&self, tape: &Tape<'_, T>, images: &Tensor<T>) -> Result<TokenBatch> {
        let c = &self.cfg;
        let frames = images_frames(images, c)?;
        if frames > c.max_frames {
            return Err(Error::config(format!(
                "{frames} frames exceed max_frames {}",
                c.max_frames
            )));
        }
        let layout = self.layout(frames)?;
        let m = c.patches();

        let flat = tape.constant(extract_patches(images, c.patch)?);
        let proj = tape.param(Self::PROJECTION)?;
        let mut x = tape.matmul(flat, proj)?;

        let pos_idx: Vec<usize> = (0..frames).flat_map(|_| 0..m).collect();
        let pos = tape.gather_rows(tape.param(Self::POS_EMBED)?, &pos_idx)?;
        x = tape.add(x, pos)?;
        let frame_idx: Vec<usize> = (0..frames).flat_map(|i| std::iter::repeat_n(i, m)).collect();
        let fe = tape.gather_rows(tape.param(Self::FRAME_EMBED)?, &frame_idx)?;
        x = tape.add(x, fe)?;

        let specials = if c.specials > 0 {
            let idx: Vec<usize> = (0..frames).flat_map(|_| 0..c.specials).collect();
            tape.gather_rows(tape.param(Self::SPECIAL_INIT)?, &idx)?
        } else {
            tape.constant(Tensor::new(&[0, c.dim], Vec::new())?)
        };
        recombine(tape, layout, SplitTokens { patches: x, specials })
    }
}

fn images_frames<T: Scalar>(images: &Tensor<T>, c: &PatchifierConfig) -> Result<usize> {
    match images.shape() {
        &[l, h, w] if h == c.image_h && w == c.image_w && l >= 1 => Ok(l),
        s => Err(Error::shape("patchify", s, &[0, c.image_h, c.image_w])),
    }
}

/// `[L, H, W]` images → `[L·M, p²]` flattened patches, patches in raster
/// order, pixels row-major within a patch.
pub fn extract_patches<T: Scalar>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let &[l, h, w] = images.shape() else {
        return Err(Error::shape("extract_patches", images.shape(), &[0, 0, 0]));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::config(format!(
            "image {h}x{w} not divisible by patch side {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(images.numel());
    for i in 0..l {
        let img = &images.data()[i * h * w..(i + 1) * h * w];
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..patch {
                    let row = (py * patch + y) * w + px * patch;
                    data.extend_from_slice(&img[row..row + patch]);
                }
            }
        }
    }
    Tensor::new(&[l * gh * gw, patch * patch], data)
}

/// Seeded multi-view stand-in: every frame is a shifted crop of one smooth
/// random scene plus a little per-frame noise.
#[derive(Clone, Debug)]
pub struct SceneGenerator {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    rng: ChaCha8Rng,
}

impl SceneGenerator {
    const WAVES: usize = 6;
    const MAX_SHIFT: usize = 3;
    const NOISE: f64 = 0.05;

    pub fn new(frames: usize, height: usize, width: usize, seed: u64) -> Self {
        Self {
            frames,
            height,
            width,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Next batch of `[frames, height, width]` images.
    pub fn next_batch<T: Scalar>(&mut self) -> Tensor<T> {
        let waves: Vec<(f64, f64, f64, f64)> = (0..Self::WAVES)
            .map(|_| {
                (
                    self.rng.random_range(0.2..1.0),
                    self.rng.random_range(0.05..0.6),
                    self.rng.random_range(0.05..0.6),
                    self.rng.random_range(0.0..2.0 * PI),
                )
            })
            .collect();
        let norm = 1.0 / (Self::WAVES as f64).sqrt();
        let (h, w) = (self.height, self.width);
        let mut data = Vec::with_capacity(self.frames * h * w);
        for _ in 0..self.frames {
            let dy = self.rng.random_range(0..=Self::MAX_SHIFT) as f64;
            let dx = self.rng.random_range(0..=Self::MAX_SHIFT) as f64;
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = (y as f64 + dy, x as f64 + dx);
                    let v: f64 = waves
                        .iter()
                        .map(|&(a, fy, fx, ph)| a * (fy * sy + fx * sx + ph).sin())
                        .sum();
                    let noise = self.rng.random_range(-Self::NOISE..Self::NOISE);
                    data.push(T::of(v * norm + noise));
                }
            }
        }
        Tensor::new(&[self.frames, h, w], data).expect("generator shape")
    }
}
