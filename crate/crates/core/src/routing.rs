//! Adaptive sparsity selection: pool each frame's patch tokens, score the
//! pooled vector with a small gating MLP, and route the frame to exactly one
//! sparsity branch.
//!
//! Routing is hard in every forward pass. Training gradients reach the gate
//! through a straight-through selection `one_hot + (p − detach(p))`, whose
//! forward value is exactly the one-hot vector.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::tokens::TokenBatch;

/// Fraction `k` of a frame's patch tokens removed by compression, held as an
/// exact fraction so that `⌊M(1−k)⌋` never suffers from rounding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SparsityRatio {
    num: u64,
    den: u64,
}

impl SparsityRatio {
    /// No compression (`k = 0`); only useful for oracle constructions.
    pub const DENSE: SparsityRatio = SparsityRatio { num: 0, den: 1 };

    /// `num/den`, which must lie in `[0, 1)`.
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 || num >= den {
            return Err(Error::config(format!("sparsity ratio {num}/{den} outside [0, 1)")));
        }
        let g = gcd(num, den);
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `1 − k`.
    pub fn keep_fraction(&self) -> f64 {
        (self.den - self.num) as f64 / self.den as f64
    }

    /// `⌊M(1−k)⌋`.
    pub fn compressed_count(&self, patches: usize) -> usize {
        (patches as u128 * (self.den - self.num) as u128 / self.den as u128) as usize
    }

    /// The ratio set `{3/4, 8/9, 15/16}`.
    pub fn default_branches() -> Vec<SparsityRatio> {
        vec![
            SparsityRatio { num: 3, den: 4 },
            SparsityRatio { num: 8, den: 9 },
            SparsityRatio { num: 15, den: 16 },
        ]
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a.max(1)
    } else {
        gcd(b, a % b)
    }
}

impl fmt::Display for SparsityRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for SparsityRatio {
    type Err = Error;

    /// Accepts `a/b` or a plain decimal such as `0.75`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::config(format!("cannot parse sparsity ratio '{s}'"));
        if let Some((a, b)) = s.split_once('/') {
            let a = a.trim().parse().map_err(|_| bad())?;
            let b = b.trim().parse().map_err(|_| bad())?;
            return Self::new(a, b);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if int.chars().any(|c| !c.is_ascii_digit()) || frac.chars().any(|c| !c.is_ascii_digit()) || frac.len() > 12 {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let whole: u64 = if int.is_empty() {
            0
        } else {
            int.parse().map_err(|_| bad())?
        };
        let part: u64 = if frac.is_empty() {
            0
        } else {
            frac.parse().map_err(|_| bad())?
        };
        Self::new(whole * den + part, den)
    }
}

/// Checks that a routing branch list is usable: every ratio in `(0, 1)`,
/// strictly increasing.
pub fn validate_branches(ratios: &[SparsityRatio]) -> Result<()> {
    if ratios.is_empty() {
        return Err(Error::config("at least one sparsity branch is required"));
    }
    for r in ratios {
        if r.num == 0 {
            return Err(Error::config(format!("sparsity ratio {r} outside (0, 1)")));
        }
    }
    for w in ratios.windows(2) {
        if w[0].value() >= w[1].value() {
            return Err(Error::config(format!(
                "sparsity ratios must increase: {} then {}",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

/// Two-layer gating MLP `D → D_h → n_branches` with a GELU in between.
/// Parameters: `w1 [D, D_h]`, `b1 [D_h]`, `w2 [D_h, n]`, `b2 [n]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GatingLayer {
    pub prefix: String,
    pub dim: usize,
    pub hidden: usize,
    pub branches: usize,
}

impl GatingLayer {
    pub fn new(prefix: impl Into<String>, dim: usize, hidden: usize, branches: usize) -> Result<Self> {
        if branches == 0 || hidden == 0 {
            return Err(Error::config("gating needs at least one branch and a hidden width"));
        }
        Ok(Self {
            prefix: prefix.into(),
            dim,
            hidden,
            branches,
        })
    }

    pub fn name(&self, w: &str) -> String {
        format!("{}.{w}", self.prefix)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.xavier(&self.name("w1"), self.dim, self.hidden)?;
        store.zeros(&self.name("b1"), &[self.hidden])?;
        store.xavier(&self.name("w2"), self.hidden, self.branches)?;
        store.zeros(&self.name("b2"), &[self.branches])?;
        Ok(())
    }

    /// Gating scores `[L, n]` for pooled frames `[L, D]`.
    pub fn logits<T: Scalar>(&self, tape: &Tape<'_, T>, pooled: Var) -> Result<Var> {
        let h = tape.matmul(pooled, tape.param(&self.name("w1"))?)?;
        let h = tape.add_row(h, tape.param(&self.name("b1"))?)?;
        let h = tape.gelu(h);
        let z = tape.matmul(h, tape.param(&self.name("w2"))?)?;
        tape.add_row(z, tape.param(&self.name("b2"))?)
    }
}

/// Per-frame routing of one block.
#[derive(Clone, Debug)]
pub struct RoutingDecision<T> {
    /// Branch probabilities `[L, n]`, one row per frame.
    pub probs: Tensor<T>,
    /// Selected branch per frame.
    pub branch_index: Vec<usize>,
    /// Ratio of the selected branch per frame.
    pub k_selected: Vec<SparsityRatio>,
    /// Branch ratio list the decision was made over.
    pub ratios: Vec<SparsityRatio>,
    /// Differentiable probabilities on the tape.
    pub probs_var: Var,
    /// Stop-gradient copy of `probs_var`.
    pub probs_detached: Var,
}

impl<T: Scalar> RoutingDecision<T> {
    pub fn frames(&self) -> usize {
        self.branch_index.len()
    }

    pub fn k_values(&self) -> Vec<f64> {
        self.k_selected.iter().map(SparsityRatio::value).collect()
    }

    pub fn mean_k(&self) -> f64 {
        self.k_values().iter().sum::<f64>() / self.frames().max(1) as f64
    }
}

/// Arithmetic mean of each frame's patch tokens (special tokens excluded): `[L, D]`.
pub fn frame_pool<T: Scalar>(tape: &Tape<'_, T>, batch: &TokenBatch) -> Result<Var> {
    let groups: Vec<Vec<usize>> = (0..batch.layout.frames)
        .map(|i| batch.layout.patch_rows(i).collect())
        .collect();
    tape.group_mean(batch.tokens, &groups)
}

/// Scores pooled frames and selects one branch per frame.
pub fn gate<T: Scalar>(
    tape: &Tape<'_, T>,
    pooled: Var,
    layer: &GatingLayer,
    ratios: &[SparsityRatio],
) -> Result<RoutingDecision<T>> {
    validate_branches(ratios)?;
    if layer.branches != ratios.len() {
        return Err(Error::config(format!(
            "gating produces {} scores but {} ratios were given",
            layer.branches,
            ratios.len()
        )));
    }
    let logits = layer.logits(tape, pooled)?;
    route_from_logits(tape, logits, ratios)
}

/// Softmax over gating scores followed by hard selection. Ties go to the
/// lowest branch index, i.e. the least sparse branch.
pub fn route_from_logits<T: Scalar>(
    tape: &Tape<'_, T>,
    logits: Var,
    ratios: &[SparsityRatio],
) -> Result<RoutingDecision<T>> {
    let shape = tape.shape(logits);
    if shape.len() != 2 || shape[1] != ratios.len() {
        return Err(Error::shape("route", &shape, &[0, ratios.len()]));
    }
    let probs_var = tape.softmax_rows(logits)?;
    let probs_detached = tape.detach(probs_var)?;
    // Selection reads the detached copy, so replayed passes keep the same routing.
    let frozen = tape.value(probs_detached);
    let branch_index: Vec<usize> = (0..frozen.rows()).map(|r| argmax_lowest(frozen.row(r))).collect();
    Ok(RoutingDecision {
        probs: (*tape.value(probs_var)).clone(),
        k_selected: branch_index.iter().map(|&b| ratios[b]).collect(),
        branch_index,
        ratios: ratios.to_vec(),
        probs_var,
        probs_detached,
    })
}

/// Non-learned routing (`assignment[i]` is the branch of frame `i`); the
/// probabilities are the one-hot rows themselves.
pub fn fixed_routing<T: Scalar>(
    tape: &Tape<'_, T>,
    assignment: &[usize],
    ratios: &[SparsityRatio],
) -> Result<RoutingDecision<T>> {
    if let Some(&b) = assignment.iter().find(|&&b| b >= ratios.len()) {
        return Err(Error::config(format!(
            "branch {b} out of range for {} ratios",
            ratios.len()
        )));
    }
    let probs = one_hot::<T>(assignment, ratios.len());
    let probs_var = tape.constant(probs.clone());
    Ok(RoutingDecision {
        probs,
        branch_index: assignment.to_vec(),
        k_selected: assignment.iter().map(|&b| ratios[b]).collect(),
        ratios: ratios.to_vec(),
        probs_var,
        probs_detached: probs_var,
    })
}

/// Frame `i` goes to branch `i mod n`.
pub fn round_robin(frames: usize, branches: usize) -> Vec<usize> {
    (0..frames).map(|i| i % branches.max(1)).collect()
}

fn argmax_lowest<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn one_hot<T: Scalar>(index: &[usize], width: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[index.len(), width]);
    for (r, &b) in index.iter().enumerate() {
        t.data_mut()[r * width + b] = T::one();
    }
    t
}

/// `one_hot + (probs − detach(probs))`: equal to the one-hot rows in value,
/// with the gradient of `probs`.
pub fn straight_through<T: Scalar>(tape: &Tape<'_, T>, decision: &RoutingDecision<T>) -> Result<Var> {
    let hard = tape.constant(one_hot::<T>(&decision.branch_index, decision.ratios.len()));
    let delta = tape.sub(decision.probs_var, decision.probs_detached)?;
    tape.add(hard, delta)
}

/// Straight-through weight of the branch selected for `frame`; value exactly 1.
pub fn selection_weight<T: Scalar>(
    tape: &Tape<'_, T>,
    selection: Var,
    decision: &RoutingDecision<T>,
    frame: usize,
) -> Result<Var> {
    tape.pick(selection, frame, decision.branch_index[frame])
}

/// Fraction of frames routed to each branch, one row per block.
pub fn occupancy<T: Scalar>(decisions: &[RoutingDecision<T>]) -> Vec<Vec<f64>> {
    decisions
        .iter()
        .map(|d| {
            let mut counts = vec![0usize; d.ratios.len()];
            for &b in &d.branch_index {
                counts[b] += 1;
            }
            counts.iter().map(|&c| c as f64 / d.frames().max(1) as f64).collect()
        })
        .collect()
}

/// Plain-text block × branch occupancy table.
pub fn route_stats_table(ratios: &[SparsityRatio], occupancy: &[Vec<f64>]) -> String {
    let mut s = String::from("block");
    for r in ratios {
        s.push_str(&format!("\tk={r}"));
    }
    s.push('\n');
    for (n, row) in occupancy.iter().enumerate() {
        s.push_str(&n.to_string());
        for v in row {
            s.push_str(&format!("\t{v:.4}"));
        }
        s.push('\n');
    }
    s
}
