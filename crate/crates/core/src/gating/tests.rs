use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use super::Strategy;
use crate::numerics::{finite_diff_grad, relative_error};
use crate::task::{Task, TaskSpec};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_gate(n: usize, l: usize, per_coordinate: bool, seed: u64) -> GatingNetwork {
    let cfg = GateConfig {
        leads: vec![0],
        pooled_len: 12,
        hidden: 8,
        rank: 2,
        per_coordinate,
        ..GateConfig::default()
    };
    GatingNetwork::new(cfg, n, l, &mut rng(seed)).unwrap()
}

/// Scalar-loop oracle for the weighted sum.
fn naive_combine(logits: &[f64], weights: &[f64], n: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; l];
    for j in 0..l {
        let mut acc = 0.0;
        for i in 0..n {
            acc += weights[i * l + j] * logits[i * l + j];
        }
        out[j] = acc;
    }
    out
}

#[test]
fn default_parameter_counts() {
    let g1 = GatingNetwork::new(GateConfig::default(), 3, 1, &mut rng(1)).unwrap();
    assert_eq!(g1.layers[0].trainable_count(), 4 * (64 + 250) + 64);
    assert_eq!(g1.layers[1].trainable_count(), 3 * (3 + 64) + 3);
    let g15 = GatingNetwork::new(GateConfig::default(), 3, 15, &mut rng(1)).unwrap();
    assert_eq!(g15.layers[1].trainable_count(), 4 * (45 + 64) + 45);
    assert_eq!(g15.input_dim(), 250);
}

#[test]
fn equal_scores_give_uniform_weights() {
    let mut g = small_gate(4, 3, true, 2);
    let zeros = vec![0.0; g.layers[1].w0.len()];
    g.layers[1].w0.assign(&zeros).unwrap();
    let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.3 - 1.0).collect();
    let w = g.weights(&x).unwrap();
    assert!(w.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn scalar_weights_are_shared_across_coordinates() {
    let g = small_gate(3, 5, false, 3);
    assert_eq!(g.layers[1].out_dim(), 3);
    let x: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
    let w = g.weights(&x).unwrap();
    for i in 0..3 {
        let row = &w.data()[i * 5..(i + 1) * 5];
        assert!(row.iter().all(|&v| v == row[0]));
    }
}

#[test]
fn wrong_input_length_is_a_dimension_error() {
    let g = small_gate(3, 1, true, 4);
    assert!(matches!(g.weights(&[0.0; 11]), Err(Error::Dimension(_))));
}

#[test]
fn one_hot_and_uniform_combination() {
    let logits = Tensor::new(&[3, 4], (0..12).map(|v| v as f64 * 1.7 - 3.0).collect()).unwrap();
    for j in 0..3 {
        let mut w = vec![0.0; 12];
        w[j * 4..(j + 1) * 4].iter_mut().for_each(|v| *v = 1.0);
        let out = combine(&logits, &Tensor::new(&[3, 4], w).unwrap()).unwrap();
        assert_eq!(out.data(), &logits.data()[j * 4..(j + 1) * 4]);
    }
    let two = Tensor::new(&[2, 2], vec![1.0, 3.0, 3.0, 5.0]).unwrap();
    let out = combine(&two, &Tensor::filled(&[2, 2], 0.5)).unwrap();
    assert_eq!(out.data(), &[2.0, 4.0]);
    assert!(matches!(
        combine(&two, &Tensor::filled(&[2, 3], 0.5)),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn ensemble_output_stores_weighted_sum() {
    let logits = Tensor::new(&[2, 1], vec![2.0, -1.0]).unwrap();
    let weights = Tensor::new(&[2, 1], vec![0.25, 0.75]).unwrap();
    let out = EnsembleOutput::new(logits, weights).unwrap();
    assert_eq!(out.combined.data(), &[2.0 * 0.25 - 0.75]);
}

#[test]
fn gate_gradients_match_finite_differences() {
    let mut g = small_gate(3, 2, true, 5);
    let mut r = rng(6);
    for layer in &mut g.layers {
        let b = Tensor::uniform(layer.b.shape(), 0.7, &mut r);
        layer.b.assign(b.data()).unwrap();
    }
    let x = Tensor::uniform(&[2, 12], 1.0, &mut r);
    let logits = Tensor::uniform(&[2, 3, 2], 2.0, &mut r);
    let targets = [0.3, -1.1];
    let spec = TaskSpec::plain(Task::Age);
    let loss_of = |g: &GatingNetwork| {
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let lv = tape.leaf(&logits);
        let w = g.forward(&mut tape, xv).unwrap();
        let z = ensemble_combine(&mut tape, lv, w).unwrap();
        let z = tape.sum_axis(z, 1).unwrap();
        let z = tape.reshape(z, &[2, 1]).unwrap();
        let l = spec.loss(&mut tape, z, &targets).unwrap();
        (tape, l)
    };
    let (tape, l) = loss_of(&g);
    let grads = tape.backward(l).unwrap();
    for li in 0..2 {
        for which in 0..3 {
            let get = |g: &GatingNetwork| match which {
                0 => g.layers[li].a.clone(),
                1 => g.layers[li].b.clone(),
                _ => g.layers[li].bias.clone(),
            };
            let target = get(&g);
            let analytic = grads.param(target.id()).unwrap().to_vec();
            let fd = finite_diff_grad(
                |probe| {
                    let mut h = g.clone();
                    let t = match which {
                        0 => &mut h.layers[li].a,
                        1 => &mut h.layers[li].b,
                        _ => &mut h.layers[li].bias,
                    };
                    t.assign(probe.data()).unwrap();
                    let (tp, l) = loss_of(&h);
                    tp.value(l)[0]
                },
                &target,
                1e-5,
            );
            let err = relative_error(&analytic, fd.data());
            assert!(err <= 1e-4, "layer {li} tensor {which}: {err:e}");
        }
    }
}

#[test]
fn strategy_tags_round_trip() {
    for s in Strategy::ALL {
        assert_eq!(s.tag().parse::<Strategy>().unwrap(), s);
    }
    assert!(matches!("stacking".parse::<Strategy>(), Err(Error::Usage(_))));
}

#[test]
fn gate_checkpoint_round_trip() {
    let g = small_gate(3, 15, true, 7);
    let mut ck = Checkpoint::new();
    g.write_checkpoint(&mut ck, "gate.arrhythmia");
    let parsed = Checkpoint::parse(&ck.to_text()).unwrap();
    let mut h = small_gate(3, 15, true, 8);
    h.read_checkpoint(&parsed, "gate.arrhythmia").unwrap();
    assert_eq!(g.w0_checksum(), h.w0_checksum());
    let x = vec![0.4; 12];
    assert_eq!(g.weights(&x).unwrap(), h.weights(&x).unwrap());
}

fn one_hot_rows(classes: &[usize], l: usize) -> Vec<f64> {
    classes
        .iter()
        .flat_map(|&c| (0..l).map(move |j| if j == c { 1.0 } else { 0.0 }))
        .collect()
}

#[test]
fn zero_shot_prefers_the_matching_expert() {
    let mut r = rng(9);
    let classes: Vec<usize> = (0..40).map(|_| r.random_range(0..15)).collect();
    let targets: Vec<f64> = classes.iter().map(|&c| c as f64).collect();
    let perfect = one_hot_rows(&classes, 15);
    let noise: Vec<f64> = (0..40 * 15).map(|_| r.random_range(-1.0..1.0)).collect();
    let logits = ExpertLogits::from_experts(&[noise.clone(), perfect.clone(), noise], 15).unwrap();
    let spec = TaskSpec::plain(Task::Arrhythmia);
    let w = zero_shot_confidence_weights(&logits, &spec, &targets).unwrap();
    let max = w.iter().cloned().fold(0.0, f64::max);
    assert_eq!(w[1], max);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let twin = ExpertLogits::from_experts(&[perfect.clone(), perfect], 15).unwrap();
    let w = zero_shot_confidence_weights(&twin, &spec, &targets).unwrap();
    assert_eq!(w, vec![0.5, 0.5]);
}

#[test]
fn zero_shot_rejects_regression() {
    let logits = ExpertLogits::from_experts(&[vec![1.0, 2.0]], 1).unwrap();
    for task in [Task::Rr, Task::Age] {
        let r = zero_shot_confidence_weights(&logits, &TaskSpec::plain(task), &[1.0, 2.0]);
        assert!(matches!(r, Err(Error::NotApplicable(_))));
    }
}

#[test]
fn greedy_single_expert_is_degenerate() {
    let logits = ExpertLogits::from_experts(&[vec![0.1, 0.5, -0.2]], 1).unwrap();
    let w = greedy_search_weights(&logits, &TaskSpec::plain(Task::Age), &[0.0, 1.0, 0.0], 0.1).unwrap();
    assert_eq!(w, vec![1.0]);
    let empty = ExpertLogits::from_experts(&[vec![]], 1).unwrap();
    assert!(matches!(
        greedy_search_weights(&empty, &TaskSpec::plain(Task::Age), &[], 0.1),
        Err(Error::Usage(_))
    ));
}

#[test]
fn greedy_keeps_a_perfect_expert_dominant() {
    let mut r = rng(10);
    let targets: Vec<f64> = (0..60).map(|_| r.random_range(-2.0..2.0)).collect();
    let noisy = |r: &mut ChaCha8Rng| targets.iter().map(|_| r.random_range(-3.0..3.0)).collect::<Vec<f64>>();
    let experts = vec![noisy(&mut r), targets.clone(), noisy(&mut r)];
    let logits = ExpertLogits::from_experts(&experts, 1).unwrap();
    let w = greedy_search_weights(&logits, &TaskSpec::plain(Task::Age), &targets, 0.1).unwrap();
    assert!(w[1] >= 0.9, "{w:?}");
}

#[test]
fn sample_aware_beats_uniform_when_quality_is_visible() {
    // Expert 0 is right when the first input entry is positive, expert 1
    // otherwise.
    let mut r = rng(11);
    let n = 200;
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let (mut e0, mut e1) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let s: f64 = if r.random_bool(0.5) { 1.0 } else { -1.0 };
        let y: f64 = r.random_range(-1.0..1.0);
        let mut x = vec![s];
        x.extend((0..3).map(|_| r.random_range(-0.1..0.1)));
        inputs.push(x);
        targets.push(y);
        let wrong = y + if r.random_bool(0.5) { 2.0 } else { -2.0 };
        if s > 0.0 {
            e0.push(y);
            e1.push(wrong);
        } else {
            e0.push(wrong);
            e1.push(y);
        }
    }
    let logits = ExpertLogits::from_experts(&[e0, e1], 1).unwrap();
    let cfg = GateConfig {
        leads: vec![0],
        pooled_len: 4,
        hidden: 8,
        rank: 2,
        ..GateConfig::default()
    };
    let spec = TaskSpec::plain(Task::Age);
    let training = GateTraining {
        epochs: 60,
        batch_size: 16,
        lr: 1e-2,
        seed: 3,
    };
    let gate = sample_aware_weights_train(&cfg, &inputs, &logits, &spec, &targets, &training).unwrap();
    assert!(gate.trainable().iter().any(|t| t.id() == gate.layers[0].w0.id()));
    let mut combined = Vec::new();
    for (s, x) in inputs.iter().enumerate() {
        let w = gate.weights(x).unwrap();
        assert!((w.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let lg = Tensor::new(&[2, 1], logits.sample(s).to_vec()).unwrap();
        combined.push(combine(&lg, &w).unwrap().data()[0]);
    }
    let trained = spec.loss_value(&combined, &targets).unwrap();
    let uniform = spec.loss_value(&logits.combine_static(&[0.5, 0.5]), &targets).unwrap();
    assert!(trained < 0.5 * uniform, "trained {trained} vs uniform {uniform}");

    let again = sample_aware_weights_train(&cfg, &inputs, &logits, &spec, &targets, &training).unwrap();
    assert_eq!(again.weights(&inputs[0]).unwrap(), gate.weights(&inputs[0]).unwrap());
}

proptest! {
    #[test]
    fn gate_columns_are_distributions(seed in 0u64..5_000, n in 1usize..5, l in 1usize..4, per in any::<bool>()) {
        let mut g = small_gate(n, l, per, seed);
        let mut r = rng(seed ^ 0xabc);
        for layer in &mut g.layers {
            let b = Tensor::uniform(layer.b.shape(), 3.0, &mut r);
            layer.b.assign(b.data()).unwrap();
        }
        let x: Vec<f64> = (0..12).map(|_| r.random_range(-5.0..5.0)).collect();
        let w = g.weights(&x).unwrap();
        for j in 0..l {
            let col: f64 = (0..n).map(|i| w.data()[i * l + j]).sum();
            prop_assert!((col - 1.0).abs() <= 1e-9);
        }
        prop_assert!(w.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn combination_matches_oracle_and_stays_in_envelope(
        seed in 0u64..5_000, n in 1usize..6, l in 1usize..5
    ) {
        let mut r = rng(seed);
        let logits: Vec<f64> = (0..n * l).map(|_| r.random_range(-10.0..10.0)).collect();
        let raw: Vec<f64> = (0..n * l).map(|_| r.random_range(0.0..1.0)).collect();
        let mut weights = raw.clone();
        for j in 0..l {
            let s: f64 = (0..n).map(|i| raw[i * l + j]).sum();
            for i in 0..n {
                weights[i * l + j] = raw[i * l + j] / s;
            }
        }
        let lt = Tensor::new(&[n, l], logits.clone()).unwrap();
        let wt = Tensor::new(&[n, l], weights.clone()).unwrap();
        let got = combine(&lt, &wt).unwrap();
        let want = naive_combine(&logits, &weights, n, l);
        for j in 0..l {
            prop_assert!((got.data()[j] - want[j]).abs() <= 1e-12);
            let lo = (0..n).map(|i| logits[i * l + j]).fold(f64::INFINITY, f64::min);
            let hi = (0..n).map(|i| logits[i * l + j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(got.data()[j] >= lo - 1e-12 && got.data()[j] <= hi + 1e-12);
        }
    }

    #[test]
    fn greedy_never_loses_to_the_best_single_expert(seed in 0u64..2_000, n in 1usize..4) {
        let mut r = rng(seed);
        let targets: Vec<f64> = (0..30).map(|_| r.random_range(-2.0..2.0)).collect();
        let experts: Vec<Vec<f64>> = (0..n)
            .map(|_| targets.iter().map(|t| t + r.random_range(-2.0..2.0)).collect())
            .collect();
        let logits = ExpertLogits::from_experts(&experts, 1).unwrap();
        let spec = TaskSpec::plain(Task::Age);
        let w = greedy_search_weights(&logits, &spec, &targets, 0.1).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let ours = spec.score(&logits.combine_static(&w), &targets).unwrap();
        let best = experts.iter().map(|e| spec.score(e, &targets).unwrap()).fold(f64::INFINITY, f64::min);
        prop_assert!(ours <= best);
    }
}
