use std::rc::Rc;

use alternating_attention::numcore::{
    compare_gradients, finite_diff_grad, ParamStore, StopGradients, Tape, Tensor, Var, DEFAULT_STEP,
};
use alternating_attention::routing::{
    fixed_routing, frame_pool, gate, occupancy, round_robin, route_from_logits, selection_weight, straight_through,
    validate_branches, GatingLayer, SparsityRatio,
};
use alternating_attention::tokens::{TokenBatch, TokenLayout};
use alternating_attention::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ratios() -> Vec<SparsityRatio> {
    SparsityRatio::default_branches()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn ratio_parsing_and_counts() {
    let r: SparsityRatio = "15/16".parse().unwrap();
    assert_eq!(r.compressed_count(64), 4);
    assert_eq!(
        "0.75".parse::<SparsityRatio>().unwrap(),
        SparsityRatio::new(3, 4).unwrap()
    );
    assert_eq!(SparsityRatio::new(8, 9).unwrap().compressed_count(196), 21);
    assert!("1".parse::<SparsityRatio>().is_err());
    assert!("-0.5".parse::<SparsityRatio>().is_err());
}

#[test]
fn branch_lists_are_validated() {
    assert!(validate_branches(&ratios()).is_ok());
    let mut rev = ratios();
    rev.reverse();
    assert!(matches!(validate_branches(&rev), Err(Error::Config(_))));
    assert!(validate_branches(&[SparsityRatio::DENSE]).is_err());
}

#[test]
fn zero_output_layer_gives_uniform_probs_and_first_branch() {
    let layer = GatingLayer::new("g", 4, 4, 3).unwrap();
    let mut store = ParamStore::<f64>::new(1);
    layer.init(&mut store).unwrap();
    store.set("g.w2", Tensor::zeros(&[4, 3]));
    store.set("g.b2", Tensor::zeros(&[3]));
    let tape = Tape::with_params(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pooled = tape.constant(random(&mut rng, &[5, 4]));
    let d = gate(&tape, pooled, &layer, &ratios()).unwrap();
    assert!(d.probs.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    assert_eq!(d.branch_index, vec![0; 5]);
    assert_eq!(d.k_selected, vec![ratios()[0]; 5]);
}

#[test]
fn constructed_logits_select_the_peak() {
    let tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::from_rows(&[&[0.0, 5.0, 0.0]]).unwrap());
    let d = route_from_logits(&tape, logits, &ratios()).unwrap();
    assert_eq!(d.branch_index, vec![1]);
    let z = 2.0 + 5f64.exp();
    assert!((d.probs.at(0, 1) - 5f64.exp() / z).abs() < 1e-15);
    assert!((d.mean_k() - 8.0 / 9.0).abs() < 1e-15);
}

#[test]
fn gate_rejects_width_mismatch() {
    let layer = GatingLayer::new("g", 4, 4, 2).unwrap();
    let mut store = ParamStore::<f64>::new(1);
    layer.init(&mut store).unwrap();
    let tape = Tape::with_params(&store);
    let pooled = tape.constant(Tensor::zeros(&[2, 4]));
    assert!(gate(&tape, pooled, &layer, &ratios()).is_err());
}

#[test]
fn single_branch_routes_everything_to_it() {
    let r = vec![SparsityRatio::new(1, 2).unwrap()];
    let layer = GatingLayer::new("g", 4, 4, 1).unwrap();
    let mut store = ParamStore::<f64>::new(1);
    layer.init(&mut store).unwrap();
    let tape = Tape::with_params(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = gate(&tape, tape.constant(random(&mut rng, &[4, 4])), &layer, &r).unwrap();
    assert_eq!(d.branch_index, vec![0; 4]);
    assert!(d.probs.data().iter().all(|&p| p == 1.0));
}

#[test]
fn straight_through_value_is_exactly_one_hot() {
    let tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::from_rows(&[&[0.3, -1.0, 2.0], &[1.0, 0.5, 0.1]]).unwrap());
    let d = route_from_logits(&tape, logits, &ratios()).unwrap();
    let s = straight_through(&tape, &d).unwrap();
    assert_eq!(tape.value(s).data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
}

#[test]
fn straight_through_gradient_matches_finite_differences() {
    let layer = GatingLayer::new("g", 4, 6, 3).unwrap();
    let mut store = ParamStore::<f64>::new(3);
    layer.init(&mut store).unwrap();
    let layout = TokenLayout::new(3, 4, 1, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[layout.total(), 4]);
    let target = random(&mut rng, &[1, 4]);

    let stop = StopGradients::recording();
    let loss = |tape: &Tape<'_, f64>| -> alternating_attention::Result<Var> {
        let batch = TokenBatch::from_tensor(tape, layout, x.clone())?;
        let d = gate(tape, frame_pool(tape, &batch)?, &layer, &ratios())?;
        let sel = straight_through(tape, &d)?;
        let mut acc = None;
        for i in 0..3 {
            let w = selection_weight(tape, sel, &d, i)?;
            let t = tape.scale_by(tape.constant(target.clone()), w)?;
            let t = tape.mul(t, t)?;
            acc = Some(match acc {
                None => t,
                Some(a) => tape.add(a, t)?,
            });
        }
        Ok(tape.sum(acc.unwrap()))
    };
    let tape = Tape::with_params(&store).with_stop_gradients(Rc::clone(&stop));
    let l = loss(&tape).unwrap();
    let analytic = tape.backward(l).unwrap();
    stop.freeze();
    let numeric = finite_diff_grad(
        |p| {
            let tape = Tape::with_params(p).inference().with_stop_gradients(Rc::clone(&stop));
            Ok(tape.value(loss(&tape)?).item())
        },
        &store,
        DEFAULT_STEP,
    )
    .unwrap();
    let report = compare_gradients(&analytic, &numeric).unwrap();
    assert!(report.passes(1e-4), "{report:?}");
    assert!(analytic.norm("g.w2") > 0.0);
}

#[test]
fn round_robin_occupancy_is_exact() {
    let tape = Tape::<f64>::new();
    let d = fixed_routing(&tape, &round_robin(9, 3), &ratios()).unwrap();
    assert_eq!(d.branch_index, vec![0, 1, 2, 0, 1, 2, 0, 1, 2]);
    let occ = occupancy(&[d]);
    assert_eq!(occ[0], vec![1.0 / 3.0; 3]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn frame_permutation_permutes_routing(seed in 0u64..500, shift in 1usize..4) {
        let layer = GatingLayer::new("g", 4, 4, 3).unwrap();
        let mut store = ParamStore::<f64>::new(seed);
        layer.init(&mut store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pooled = random(&mut rng, &[4, 4]);
        let perm: Vec<usize> = (0..4).map(|i| (i + shift) % 4).collect();
        let tape = Tape::with_params(&store);
        let a = gate(&tape, tape.constant(pooled.clone()), &layer, &ratios()).unwrap();
        let b = gate(&tape, tape.constant(pooled.gather_rows(&perm)), &layer, &ratios()).unwrap();
        let permuted: Vec<usize> = perm.iter().map(|&p| a.branch_index[p]).collect();
        prop_assert_eq!(permuted, b.branch_index);
        prop_assert!(a.probs.gather_rows(&perm).max_abs_diff(&b.probs) < 1e-15);
    }

    #[test]
    fn selection_ignores_positive_logit_scaling(seed in 0u64..500, c in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random(&mut rng, &[6, 3]);
        let tape = Tape::<f64>::new();
        let a = route_from_logits(&tape, tape.constant(logits.clone()), &ratios()).unwrap();
        let b = route_from_logits(&tape, tape.constant(logits.map(|v| v * c)), &ratios()).unwrap();
        prop_assert_eq!(a.branch_index, b.branch_index);
    }

    #[test]
    fn probabilities_are_distributions(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::<f64>::new();
        let d = route_from_logits(&tape, tape.constant(random(&mut rng, &[5, 3]).map(|v| 20.0 * v)), &ratios()).unwrap();
        for r in 0..5 {
            prop_assert!((d.probs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
