//! Training objective, toy cross-frame regression task and its training loop.

mod loss;
mod model;
mod optim;

pub use loss::{entropy_term, hard_reg_value, mse, sparsity_reg_loss, total_loss, LossConfig, LossParts};
pub use model::{cross_frame_target, ModelOutput, ToyConfig, ToyModel};
pub use optim::Adam;

use std::fmt::Write as _;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numcore::{
    compare_gradients, finite_diff_grad, GradCheckReport, ParamStore, Scalar, StopGradients, Tape, Tensor,
};
use crate::routing::{occupancy, RoutingDecision};
use crate::tokens::SceneGenerator;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Held-out batches used for the before/after evaluation.
    pub eval_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-3,
            seed: 0,
            eval_batches: 8,
        }
    }
}

/// Everything a training step needs, owned together.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub params: ParamStore<T>,
    pub step: usize,
    pub optimizer: Adam<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub task_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
    pub mean_k: f64,
}

/// Averages over a fixed set of held-out batches.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalStats {
    pub task_loss: f64,
    /// `Σ k_selected / (N·L)`, averaged over batches.
    pub mean_k: f64,
    /// Per block, fraction of frames routed to each branch.
    pub occupancy: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct TrainReport<T> {
    pub records: Vec<StepRecord>,
    pub initial: EvalStats,
    pub last: EvalStats,
    pub params: ParamStore<T>,
}

impl<T> TrainReport<T> {
    pub fn trajectory_csv(&self) -> String {
        let mut s = String::from("step,task_loss,reg_loss,total,mean_k\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:.10e},{:.10e},{:.10e},{:.6}",
                r.step, r.task_loss, r.reg_loss, r.total, r.mean_k
            );
        }
        s
    }
}

fn mean_k<T: Scalar>(decisions: &[RoutingDecision<T>]) -> f64 {
    let (sum, n) = decisions
        .iter()
        .flat_map(|d| d.k_values())
        .fold((0.0, 0usize), |(s, n), k| (s + k, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Training-objective parts for one batch, on `tape`.
pub fn batch_loss<T: Scalar>(
    tape: &Tape<'_, T>,
    model: &ToyModel,
    images: &Tensor<T>,
    loss_cfg: &LossConfig,
) -> Result<(LossParts, Vec<RoutingDecision<T>>)> {
    let out = model.forward(tape, images)?;
    let target = cross_frame_target(images, model.cfg.patch)?;
    let task = mse(tape, out.pred, &target)?;
    let parts = total_loss(tape, task, &out.decisions, loss_cfg)?;
    Ok((parts, out.decisions))
}

fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x005E_ED0F_E7A1
}

/// Mean task loss and routing on held-out batches.
pub fn evaluate<T: Scalar>(model: &ToyModel, params: &ParamStore<T>, seed: u64, batches: usize) -> Result<EvalStats> {
    let (h, w) = model.cfg.image_size();
    let mut gen = SceneGenerator::new(model.cfg.frames, h, w, eval_seed(seed));
    let mut task = 0.0;
    let mut k = 0.0;
    let mut occ: Vec<Vec<f64>> = Vec::new();
    let n = batches.max(1);
    for _ in 0..n {
        let images = gen.next_batch::<T>();
        let tape = Tape::with_params(params).inference();
        let (parts, decisions) = batch_loss(&tape, model, &images, &LossConfig::default())?;
        task += tape.value(parts.task).item().f64();
        k += mean_k(&decisions);
        let o = occupancy(&decisions);
        if occ.is_empty() {
            occ = o;
        } else {
            for (acc, row) in occ.iter_mut().zip(o) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
    }
    for row in &mut occ {
        for v in row {
            *v /= n as f64;
        }
    }
    Ok(EvalStats {
        task_loss: task / n as f64,
        mean_k: k / n as f64,
        occupancy: occ,
    })
}

/// Trains the toy model with Adam on a fresh seeded batch per step.
pub fn train_toy<T: Scalar>(model_cfg: &ToyConfig, loss_cfg: &LossConfig, cfg: &TrainConfig) -> Result<TrainReport<T>> {
    if cfg.steps == 0 {
        return Err(Error::config("steps must be at least 1"));
    }
    loss_cfg.validate()?;
    let model = ToyModel::new(model_cfg.clone())?;
    let mut state = TrainState {
        params: model.init::<T>(cfg.seed)?,
        step: 0,
        optimizer: Adam::new(cfg.lr),
    };
    let initial = evaluate(&model, &state.params, cfg.seed, cfg.eval_batches)?;
    let (h, w) = model_cfg.image_size();
    let mut gen = SceneGenerator::new(model_cfg.frames, h, w, cfg.seed);
    let mut records = Vec::with_capacity(cfg.steps);
    while state.step < cfg.steps {
        let images = gen.next_batch::<T>();
        let tape = Tape::with_params(&state.params);
        let (parts, decisions) = batch_loss(&tape, &model, &images, loss_cfg).map_err(|e| match e {
            Error::Numeric(msg) => Error::Training { step: state.step, msg },
            other => other,
        })?;
        let value = |v| tape.value(v).item().f64();
        let record = StepRecord {
            step: state.step,
            task_loss: value(parts.task),
            reg_loss: value(parts.reg),
            total: value(parts.total),
            mean_k: mean_k(&decisions),
        };
        if !record.total.is_finite() {
            return Err(Error::Training {
                step: state.step,
                msg: format!("non-finite loss {}", record.total),
            });
        }
        let grads = tape.backward(parts.total)?;
        drop(tape);
        state.optimizer.step(&mut state.params, &grads)?;
        records.push(record);
        state.step += 1;
    }
    let last = evaluate(&model, &state.params, cfg.seed, cfg.eval_batches)?;
    Ok(TrainReport {
        records,
        initial,
        last,
        params: state.params,
    })
}

/// Analytic vs central-difference gradient of the total training loss on
/// one seeded batch, at 64-bit. Routing is held at the base point.
pub fn gradcheck_total_loss(
    model_cfg: &ToyConfig,
    loss_cfg: &LossConfig,
    seed: u64,
    step: f64,
) -> Result<GradCheckReport> {
    let model = ToyModel::new(model_cfg.clone())?;
    let params = model.init::<f64>(seed)?;
    let (h, w) = model_cfg.image_size();
    let images = SceneGenerator::new(model_cfg.frames, h, w, seed).next_batch::<f64>();
    let stop = StopGradients::recording();
    let analytic = {
        let tape = Tape::with_params(&params).with_stop_gradients(Rc::clone(&stop));
        let (parts, _) = batch_loss(&tape, &model, &images, loss_cfg)?;
        tape.backward(parts.total)?
    };
    stop.freeze();
    let numeric = finite_diff_grad(
        |p| {
            let tape = Tape::with_params(p).inference().with_stop_gradients(Rc::clone(&stop));
            let (parts, _) = batch_loss(&tape, &model, &images, loss_cfg)?;
            Ok(tape.value(parts.total).item())
        },
        &params,
        step,
    )?;
    compare_gradients(&analytic, &numeric)
}
