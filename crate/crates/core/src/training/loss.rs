use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tape, Tensor, Var};
use crate::routing::RoutingDecision;

/// Weights of the regulariser in `task + λ·(reg + entropy)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_reg: f64,
    pub entropy_enabled: bool,
    /// Scale of the entropy term relative to the sparsity term, inside `λ`.
    pub entropy_coeff: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 0.01,
            entropy_enabled: false,
            entropy_coeff: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::config(format!(
                "lambda_reg must be >= 0, got {}",
                self.lambda_reg
            )));
        }
        if !self.entropy_coeff.is_finite() {
            return Err(Error::config("entropy_coeff must be finite"));
        }
        Ok(())
    }
}

/// `Σ_n Σ_i Σ_b p_b·(1 − k_b)`: the expected kept fraction under the
/// branch probabilities. Equals `Σ_n Σ_i (1 − k_selected)` for one-hot rows.
pub fn sparsity_reg_loss<T: Scalar>(tape: &Tape<'_, T>, decisions: &[RoutingDecision<T>]) -> Result<Var> {
    let mut total = tape.constant(Tensor::scalar(T::zero()));
    for d in decisions {
        let keep: Vec<T> = d.ratios.iter().map(|r| T::of(r.keep_fraction())).collect();
        let keep = tape.constant(Tensor::new(&[keep.len(), 1], keep)?);
        let per_frame = tape.matmul(d.probs_var, keep)?;
        total = tape.add(total, tape.sum(per_frame))?;
    }
    Ok(total)
}

/// The hard-routed sum `Σ_n Σ_i (1 − k_selected)`.
pub fn hard_reg_value<T: Scalar>(decisions: &[RoutingDecision<T>]) -> f64 {
    decisions
        .iter()
        .flat_map(|d| d.k_selected.iter().map(|k| k.keep_fraction()))
        .sum()
}

/// `Σ_n (1/L)·Σ_i H(p^{n,i})`, natural log, `0·ln 0 = 0`.
pub fn entropy_term<T: Scalar>(tape: &Tape<'_, T>, decisions: &[RoutingDecision<T>]) -> Result<Var> {
    let mut total = tape.constant(Tensor::scalar(T::zero()));
    for d in decisions {
        let h = tape.entropy(d.probs_var);
        let h = tape.scale(h, T::of(1.0 / d.frames().max(1) as f64));
        total = tape.add(total, h)?;
    }
    Ok(total)
}

/// Scalar parts of the training objective, all on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub task: Var,
    pub reg: Var,
    pub entropy: Option<Var>,
    pub total: Var,
}

/// `task + λ·(reg + c·entropy)`; the entropy term only when enabled.
pub fn total_loss<T: Scalar>(
    tape: &Tape<'_, T>,
    task: Var,
    decisions: &[RoutingDecision<T>],
    cfg: &LossConfig,
) -> Result<LossParts> {
    cfg.validate()?;
    let reg = sparsity_reg_loss(tape, decisions)?;
    let entropy = if cfg.entropy_enabled {
        Some(entropy_term(tape, decisions)?)
    } else {
        None
    };
    let total = if cfg.lambda_reg == 0.0 {
        task
    } else {
        let mut r = reg;
        if let Some(h) = entropy {
            r = tape.add(r, tape.scale(h, T::of(cfg.entropy_coeff)))?;
        }
        tape.add(task, tape.scale(r, T::of(cfg.lambda_reg)))?
    };
    Ok(LossParts {
        task,
        reg,
        entropy,
        total,
    })
}

/// Mean squared error against a constant target.
pub fn mse<T: Scalar>(tape: &Tape<'_, T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    let diff = tape.sub(pred, tape.constant(target.clone()))?;
    let sq = tape.sum(tape.mul(diff, diff)?);
    Ok(tape.scale(sq, T::of(1.0 / target.numel().max(1) as f64)))
}
