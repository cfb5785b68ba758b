//! Attention kernels: scaled dot-product, multi-head plumbing, per-frame
//! self-attention and the dense cross-frame baseline.

use crate::error::{Error, Result};
use crate::numcore::{softmax_in_place, ParamStore, Scalar, Tape, Tensor, Var};
use crate::tokens::TokenBatch;

/// Bias-free multi-head attention weights `wq`, `wk`, `wv`, `wo` (all `D × D`)
/// stored under `prefix`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionLayer {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
}

impl AttentionLayer {
    pub fn new(prefix: impl Into<String>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            prefix: prefix.into(),
            dim,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn name(&self, w: &str) -> String {
        format!("{}.{w}", self.prefix)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for w in ["wq", "wk", "wv", "wo"] {
            store.xavier(&self.name(w), self.dim, self.dim)?;
        }
        Ok(())
    }

    fn weight<T: Scalar>(&self, tape: &Tape<'_, T>, w: &str) -> Result<Var> {
        tape.param(&self.name(w))
    }
}

/// `softmax(q·kᵀ/√d)·v` for a single head.
pub fn scaled_dot_attention<T: Scalar>(tape: &Tape<'_, T>, q: Var, k: Var, v: Var) -> Result<Var> {
    tape.attention(q, k, v, 1)
}

/// Queries from `x_q`, keys and values from `x_kv`; heads concatenated and
/// projected by `wo`.
pub fn multi_head<T: Scalar>(tape: &Tape<'_, T>, layer: &AttentionLayer, x_q: Var, x_kv: Var) -> Result<Var> {
    let q = tape.matmul(x_q, layer.weight(tape, "wq")?)?;
    let k = tape.matmul(x_kv, layer.weight(tape, "wk")?)?;
    let v = tape.matmul(x_kv, layer.weight(tape, "wv")?)?;
    let o = tape.attention(q, k, v, layer.heads)?;
    tape.matmul(o, layer.weight(tape, "wo")?)
}

/// Self-attention confined to each frame's `M+S` tokens.
pub fn frame_attention<T: Scalar>(
    tape: &Tape<'_, T>,
    layer: &AttentionLayer,
    batch: &TokenBatch,
) -> Result<TokenBatch> {
    let x = batch.tokens;
    let q = tape.matmul(x, layer.weight(tape, "wq")?)?;
    let k = tape.matmul(x, layer.weight(tape, "wk")?)?;
    let v = tape.matmul(x, layer.weight(tape, "wv")?)?;
    let mut per_frame = Vec::with_capacity(batch.layout.frames);
    for i in 0..batch.layout.frames {
        let rows: Vec<usize> = batch.layout.frame_rows(i).collect();
        let qi = tape.gather_rows(q, &rows)?;
        let ki = tape.gather_rows(k, &rows)?;
        let vi = tape.gather_rows(v, &rows)?;
        per_frame.push(tape.attention(qi, ki, vi, layer.heads)?);
    }
    // Frames are contiguous row blocks, so concatenation restores the layout.
    let o = tape.concat_rows(&per_frame)?;
    let out = tape.matmul(o, layer.weight(tape, "wo")?)?;
    Ok(batch.with_tokens(out))
}

/// Self-attention over all `L·(M+S)` tokens jointly.
pub fn global_full_attention<T: Scalar>(
    tape: &Tape<'_, T>,
    layer: &AttentionLayer,
    batch: &TokenBatch,
) -> Result<TokenBatch> {
    let out = multi_head(tape, layer, batch.tokens, batch.tokens)?;
    Ok(batch.with_tokens(out))
}

/// Row-stochastic single-head weights `softmax(q·kᵀ/√d)`, for inspection.
pub fn attention_weights<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    if q.cols() != k.cols() {
        return Err(Error::shape("attention_weights", q.shape(), k.shape()));
    }
    let scale = T::of(1.0 / (q.cols() as f64).sqrt());
    let mut s = q.matmul(&k.transpose())?.map(|v| v * scale);
    let c = s.cols();
    for row in s.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    Ok(s)
}

/// Plain-text matrix block: a `name rows cols` line followed by one
/// whitespace-separated row per line.
pub fn matrix_text<T: Scalar>(name: &str, t: &Tensor<T>) -> String {
    let (rows, cols) = (t.rows(), t.cols());
    let mut s = format!("{name} {rows} {cols}\n");
    for r in 0..rows {
        let line: Vec<String> = t.row(r).iter().map(|v| format!("{:.8e}", v.f64())).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        assert!(AttentionLayer::new("a", 10, 4).is_err());
        assert!(AttentionLayer::new("a", 8, 0).is_err());
        assert_eq!(AttentionLayer::new("a", 8, 4).unwrap().head_dim(), 2);
    }

    #[test]
    fn mismatched_width_is_a_shape_error() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::zeros(&[2, 4]));
        let k = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(scaled_dot_attention(&tape, q, k, k), Err(Error::Shape { .. })));
    }

    #[test]
    fn matrix_text_layout() {
        let t = Tensor::<f64>::from_rows(&[&[1.0, 2.0]]).unwrap();
        assert_eq!(matrix_text("w", &t), "w 1 2\n1.00000000e0 2.00000000e0\n");
    }
}
