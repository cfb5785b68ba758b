use alternating_attention::numcore::{Tape, Tensor};
use alternating_attention::routing::{fixed_routing, route_from_logits, RoutingDecision, SparsityRatio};
use alternating_attention::training::{
    cross_frame_target, entropy_term, hard_reg_value, sparsity_reg_loss, total_loss, train_toy, LossConfig, ToyConfig,
    TrainConfig,
};
use alternating_attention::Error;
use proptest::prelude::*;

fn branches() -> Vec<SparsityRatio> {
    SparsityRatio::default_branches()
}

fn hard(tape: &Tape<'_, f64>, branch: usize, frames: usize) -> RoutingDecision<f64> {
    fixed_routing(tape, &vec![branch; frames], &branches()).unwrap()
}

fn soft(tape: &Tape<'_, f64>, rows: &[&[f64]]) -> RoutingDecision<f64> {
    let logits: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
    let refs: Vec<&[f64]> = logits.iter().map(Vec::as_slice).collect();
    route_from_logits(tape, tape.constant(Tensor::from_rows(&refs).unwrap()), &branches()).unwrap()
}

fn scalar(tape: &Tape<'_, f64>, v: alternating_attention::numcore::Var) -> f64 {
    tape.value(v).item()
}

#[test]
fn hard_routing_to_the_sparsest_branch() {
    let tape = Tape::new();
    let d = vec![hard(&tape, 2, 3), hard(&tape, 2, 3)];
    assert_eq!(scalar(&tape, sparsity_reg_loss(&tape, &d).unwrap()), 0.375);
    assert_eq!(hard_reg_value(&d), 0.375);
}

#[test]
fn hard_routing_to_the_densest_branch() {
    let tape = Tape::new();
    let d = vec![hard(&tape, 0, 4)];
    assert_eq!(scalar(&tape, sparsity_reg_loss(&tape, &d).unwrap()), 1.0);
}

#[test]
fn uniform_probabilities_average_the_kept_fractions() {
    let tape = Tape::new();
    let third = 1.0 / 3.0;
    let d = vec![soft(&tape, &[&[third, third, third]])];
    let expect = (0.25 + 1.0 / 9.0 + 1.0 / 16.0) / 3.0;
    let got = scalar(&tape, sparsity_reg_loss(&tape, &d).unwrap());
    assert!((got - expect).abs() < 1e-15);
    assert!((got - 0.14120).abs() < 5e-6);
}

#[test]
fn entropy_examples() {
    let tape = Tape::new();
    assert_eq!(scalar(&tape, entropy_term(&tape, &[hard(&tape, 1, 5)]).unwrap()), 0.0);
    let third = 1.0 / 3.0;
    let uniform = soft(&tape, &[&[third, third, third], &[third, third, third]]);
    let h = scalar(&tape, entropy_term(&tape, &[uniform]).unwrap());
    assert!((h - 3f64.ln()).abs() < 1e-12);
    let skewed = soft(&tape, &[&[0.5, 0.25, 0.25]]);
    let h = scalar(&tape, entropy_term(&tape, &[skewed]).unwrap());
    assert!((h - 1.5 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn total_loss_examples() {
    let tape = Tape::new();
    let task = tape.constant(Tensor::scalar(1.0));
    let d = vec![hard(&tape, 2, 3), hard(&tape, 2, 3)];

    let none = LossConfig {
        lambda_reg: 0.0,
        ..Default::default()
    };
    assert_eq!(scalar(&tape, total_loss(&tape, task, &d, &none).unwrap().total), 1.0);

    let parts = total_loss(&tape, task, &d, &LossConfig::default()).unwrap();
    assert!((scalar(&tape, parts.total) - 1.00375).abs() < 1e-15);

    let with_entropy = LossConfig {
        entropy_enabled: true,
        ..Default::default()
    };
    let parts_h = total_loss(&tape, task, &d, &with_entropy).unwrap();
    assert_eq!(scalar(&tape, parts_h.entropy.unwrap()), 0.0);
    assert_eq!(scalar(&tape, parts_h.total), scalar(&tape, parts.total));
}

#[test]
fn negative_lambda_is_rejected() {
    let tape = Tape::<f64>::new();
    let task = tape.constant(Tensor::scalar(1.0));
    let cfg = LossConfig {
        lambda_reg: -0.1,
        ..Default::default()
    };
    assert!(matches!(total_loss(&tape, task, &[], &cfg), Err(Error::Config(_))));
}

#[test]
fn target_is_the_cross_frame_mean() {
    let images = Tensor::<f64>::from_fn(&[2, 2, 2], |i| i as f64);
    let t = cross_frame_target(&images, 1).unwrap();
    assert_eq!(t.shape(), &[8, 1]);
    assert_eq!(t.data(), &[2.0, 3.0, 4.0, 5.0, 2.0, 3.0, 4.0, 5.0]);
}

fn short_run(steps: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        steps,
        lr,
        seed: 5,
        eval_batches: 2,
    }
}

fn small_model() -> ToyConfig {
    ToyConfig {
        frames: 3,
        dim: 16,
        gate_hidden: 16,
        ..Default::default()
    }
}

#[test]
fn same_seed_gives_the_same_first_loss() {
    let a = train_toy::<f64>(&small_model(), &LossConfig::default(), &short_run(2, 1e-3)).unwrap();
    let b = train_toy::<f64>(
        &small_model(),
        &LossConfig {
            lambda_reg: 0.0,
            ..Default::default()
        },
        &short_run(1, 1e-3),
    )
    .unwrap();
    assert_eq!(a.records[0].task_loss, b.records[0].task_loss);
    assert_eq!(a.initial, b.initial);
}

#[test]
fn training_reduces_the_task_loss() {
    let rep = train_toy::<f64>(&small_model(), &LossConfig::default(), &short_run(150, 3e-3)).unwrap();
    assert!(
        rep.last.task_loss < rep.initial.task_loss,
        "{:?} -> {:?}",
        rep.initial,
        rep.last
    );
    assert_eq!(rep.trajectory_csv().lines().count(), 151);
}

#[test]
fn divergence_reports_the_step() {
    let err = train_toy::<f32>(&small_model(), &LossConfig::default(), &short_run(50, 1e30)).unwrap_err();
    assert!(matches!(err, Error::Training { step, .. } if step > 0), "{err}");
}

#[test]
fn zero_steps_is_a_config_error() {
    assert!(train_toy::<f64>(&small_model(), &LossConfig::default(), &short_run(0, 1e-3)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn entropy_is_bounded(rows in prop::collection::vec(prop::collection::vec(-8.0f64..8.0, 3), 1..6), blocks in 1usize..4) {
        let tape = Tape::new();
        let flat: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let logits = Tensor::from_rows(&flat).unwrap();
        let d: Vec<_> = (0..blocks)
            .map(|_| route_from_logits(&tape, tape.constant(logits.clone()), &branches()).unwrap())
            .collect();
        let h = scalar(&tape, entropy_term(&tape, &d).unwrap());
        prop_assert!(h >= 0.0 && h <= blocks as f64 * 3f64.ln() + 1e-12);
    }

    #[test]
    fn sparser_hard_routing_lowers_the_regulariser(frames in 1usize..8, from in 0usize..2, step in 1usize..3) {
        let to = (from + step).min(2);
        prop_assume!(to > from);
        let tape = Tape::new();
        let lo = scalar(&tape, sparsity_reg_loss(&tape, &[hard(&tape, to, frames)]).unwrap());
        let hi = scalar(&tape, sparsity_reg_loss(&tape, &[hard(&tape, from, frames)]).unwrap());
        prop_assert!(lo < hi);
    }

    #[test]
    fn hard_surrogate_equals_closed_form(assign in prop::collection::vec(0usize..3, 1..10)) {
        let tape = Tape::new();
        let d = fixed_routing(&tape, &assign, &branches()).unwrap();
        let closed: f64 = assign.iter().map(|&b| branches()[b].keep_fraction()).sum();
        let got = scalar(&tape, sparsity_reg_loss(&tape, std::slice::from_ref(&d)).unwrap());
        prop_assert!((got - closed).abs() <= 1e-15 * closed.max(1.0));
        prop_assert!((hard_reg_value(&[d]) - closed).abs() <= 1e-15 * closed.max(1.0));
    }
}
