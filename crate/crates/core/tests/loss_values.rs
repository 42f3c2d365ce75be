//! Weighted cross-entropy: frozen values, analytic invariants and a
//! finite-difference check of the gradient.

use convmorph::loss::{
    class_weights, weighted_cross_entropy, wce_gradient, LossBatch, Reduction,
};
use convmorph::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(logits: Vec<f64>, classes: usize, labels: Vec<usize>) -> LossBatch {
    let n = labels.len();
    LossBatch::new(Tensor::new(vec![n, classes], logits).unwrap(), labels).unwrap()
}

#[test]
fn weights_match_hand_computed_values() {
    assert_eq!(class_weights(&[100, 300]).unwrap().as_slice(), &[1.5, 0.5]);
    assert_eq!(
        class_weights(&[1, 1, 2]).unwrap().as_slice(),
        &[1.2, 1.2, 0.6]
    );
    assert_eq!(class_weights(&[100, 100]).unwrap().as_slice(), &[1.0, 1.0]);
}

#[test]
fn weights_reject_empty_and_zero_counts() {
    assert!(matches!(class_weights(&[]), Err(Error::Loss(_))));
    assert!(matches!(class_weights(&[5, 0, 3]), Err(Error::Loss(_))));
}

#[test]
fn weights_average_to_one_and_balance_class_mass() {
    let counts = [7u64, 19, 3, 1000, 42];
    let w = class_weights(&counts).unwrap();
    let mean: f64 = w.as_slice().iter().sum::<f64>() / counts.len() as f64;
    assert!((mean - 1.0).abs() <= 1e-12, "weights average to {mean}");
    // count * weight is the same for every class.
    let mass: Vec<f64> = counts
        .iter()
        .zip(w.as_slice())
        .map(|(&n, &wk)| n as f64 * wk)
        .collect();
    for m in &mass[1..] {
        assert!((m - mass[0]).abs() <= 1e-9, "class masses differ: {mass:?}");
    }
    // Rarer classes weigh strictly more.
    assert!(w.get(2).unwrap() > w.get(0).unwrap());
    assert!(w.get(0).unwrap() > w.get(3).unwrap());
}

#[test]
fn single_sample_losses_match_hand_computed_values() {
    // Uniform two-class logits: plain ln 2.
    let b = batch(vec![0.0, 0.0], 2, vec![0]);
    let w = class_weights(&[50, 50]).unwrap();
    let loss = weighted_cross_entropy(&b, &w, Reduction::Sum).unwrap();
    assert!((loss - 0.6931471805599453).abs() <= 1e-15, "got {loss}");

    // Misclassified sample with a down-weighted label.
    let b = batch(vec![2.0, 0.0], 2, vec![1]);
    let w = class_weights(&[100, 300]).unwrap();
    let loss = weighted_cross_entropy(&b, &w, Reduction::Sum).unwrap();
    assert!((loss - 1.0634640055214863).abs() <= 1e-15, "got {loss}");
}

#[test]
fn batch_reductions_match_hand_computed_values() {
    let b = batch(vec![0.0, 0.0, 2.0, 0.0], 2, vec![0, 1]);
    let w = class_weights(&[100, 300]).unwrap();
    let sum = weighted_cross_entropy(&b, &w, Reduction::Sum).unwrap();
    let mean = weighted_cross_entropy(&b, &w, Reduction::Mean).unwrap();
    assert!((sum - 2.103184776361404).abs() <= 1e-15, "got {sum}");
    // The mean divides by the summed sample weights (1.5 + 0.5), not the
    // sample count — here they coincide at 2 by construction.
    assert!((mean - 1.051592388180702).abs() <= 1e-15, "got {mean}");
}

#[test]
fn mean_reduction_divides_by_total_sample_weight() {
    // Three samples, all labelled with the heavy class.
    let b = batch(vec![0.3, -0.7, 1.1, 0.2, -2.0, 0.4], 2, vec![0, 0, 0]);
    let w = class_weights(&[10, 990]).unwrap();
    let sum = weighted_cross_entropy(&b, &w, Reduction::Sum).unwrap();
    let mean = weighted_cross_entropy(&b, &w, Reduction::Mean).unwrap();
    let weight_total = 3.0 * w.get(0).unwrap();
    assert!(
        (mean - sum / weight_total).abs() <= 1e-12,
        "mean {mean} is not sum {sum} over total weight {weight_total}"
    );
}

#[test]
fn gradient_matches_hand_computed_values() {
    let b = batch(vec![0.0, 0.0, 2.0, 0.0], 2, vec![0, 1]);
    let w = class_weights(&[100, 300]).unwrap();
    let g = wce_gradient(&b, &w).unwrap();
    assert_eq!(g.shape(), &[2, 2]);
    let expected = [
        -0.75,
        0.75,
        0.4403985389889412,
        -0.4403985389889412,
    ];
    for (i, (a, e)) in g.data().iter().zip(&expected).enumerate() {
        assert!((a - e).abs() <= 1e-15, "gradient element {i}: {a} vs {e}");
    }
}

#[test]
fn unweighted_gradient_at_uniform_logits_is_half_half() {
    let b = batch(vec![0.0, 0.0], 2, vec![0]);
    let w = class_weights(&[1, 1]).unwrap();
    let g = wce_gradient(&b, &w).unwrap();
    assert_eq!(g.data(), &[-0.5, 0.5]);
}

#[test]
fn gradient_rows_sum_to_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..50 {
        let n = rng.gen_range(1..=8);
        let classes = rng.gen_range(2..=10);
        let logits: Vec<f64> = (0..n * classes).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let counts: Vec<u64> = (0..classes).map(|_| rng.gen_range(1..500)).collect();
        let b = batch(logits, classes, labels);
        let w = class_weights(&counts).unwrap();
        let g = wce_gradient(&b, &w).unwrap();
        for i in 0..n {
            let row_sum: f64 = g.data()[i * classes..(i + 1) * classes].iter().sum();
            assert!(
                row_sum.abs() <= 1e-12,
                "row {i} sums to {row_sum} for a {n}x{classes} batch"
            );
        }
    }
}

#[test]
fn gradient_agrees_with_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let step = 1e-5;
    for round in 0..10 {
        let n = rng.gen_range(1..=4);
        let classes = rng.gen_range(2..=6);
        let logits: Vec<f64> = (0..n * classes).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let counts: Vec<u64> = (0..classes).map(|_| rng.gen_range(1..200)).collect();
        let w = class_weights(&counts).unwrap();

        let base = batch(logits.clone(), classes, labels.clone());
        let g = wce_gradient(&base, &w).unwrap();

        for idx in 0..logits.len() {
            let mut plus = logits.clone();
            plus[idx] += step;
            let mut minus = logits.clone();
            minus[idx] -= step;
            let lp = weighted_cross_entropy(&batch(plus, classes, labels.clone()), &w, Reduction::Sum)
                .unwrap();
            let lm =
                weighted_cross_entropy(&batch(minus, classes, labels.clone()), &w, Reduction::Sum)
                    .unwrap();
            let numeric = (lp - lm) / (2.0 * step);
            let analytic = g.data()[idx];
            assert!(
                (numeric - analytic).abs() <= 1e-6,
                "round {round}, logit {idx}: finite difference {numeric} vs gradient {analytic}"
            );
        }
    }
}

#[test]
fn huge_logits_do_not_overflow() {
    let w = class_weights(&[1, 1]).unwrap();

    let correct = batch(vec![1000.0, 0.0], 2, vec![0]);
    let loss = weighted_cross_entropy(&correct, &w, Reduction::Sum).unwrap();
    assert!(loss == 0.0, "confident correct answer costs {loss}");

    let wrong = batch(vec![1000.0, 0.0], 2, vec![1]);
    let loss = weighted_cross_entropy(&wrong, &w, Reduction::Sum).unwrap();
    assert!(loss == 1000.0, "confident wrong answer costs {loss}");

    let g = wce_gradient(&wrong, &w).unwrap();
    assert_eq!(g.data(), &[1.0, -1.0]);
}

#[test]
fn loss_is_invariant_under_logit_shifts() {
    let w = class_weights(&[3, 5, 2]).unwrap();
    let logits = vec![0.2, -1.3, 0.7, 2.0, 0.0, -0.5];
    let labels = vec![2, 0];
    let base = weighted_cross_entropy(&batch(logits.clone(), 3, labels.clone()), &w, Reduction::Sum)
        .unwrap();
    for shift in [-100.0, -1.0, 1.0, 100.0] {
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let loss =
            weighted_cross_entropy(&batch(shifted, 3, labels.clone()), &w, Reduction::Sum).unwrap();
        assert!(
            (loss - base).abs() <= 1e-10,
            "shift {shift} moved the loss from {base} to {loss}"
        );
    }
}

#[test]
fn batches_validate_their_inputs() {
    // Label out of range.
    let err = LossBatch::new(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), vec![2]).unwrap_err();
    assert!(matches!(err, Error::LabelOutOfRange { label: 2, classes: 2 }));

    // Non-finite logits.
    let err =
        LossBatch::new(Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap(), vec![0]).unwrap_err();
    assert!(matches!(err, Error::Loss(_)));

    // Wrong label count.
    let err = LossBatch::new(Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap(), vec![0]).unwrap_err();
    assert!(matches!(err, Error::Loss(_)));

    // Rank-1 logits.
    let err = LossBatch::new(Tensor::new(vec![2], vec![0.0; 2]).unwrap(), vec![0]).unwrap_err();
    assert!(matches!(err, Error::Loss(_)));

    // Weight/class mismatch at evaluation time.
    let b = batch(vec![0.0, 0.0], 2, vec![0]);
    let w3 = class_weights(&[1, 1, 1]).unwrap();
    assert!(matches!(
        weighted_cross_entropy(&b, &w3, Reduction::Sum),
        Err(Error::Loss(_))
    ));
}

#[test]
fn f32_logits_widen_into_the_f64_path() {
    let logits: Tensor<f32> = Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap();
    let b = LossBatch::from_logits(&logits, vec![1]).unwrap();
    let w = class_weights(&[100, 300]).unwrap();
    let loss = weighted_cross_entropy(&b, &w, Reduction::Sum).unwrap();
    assert!((loss - 1.0634640055214863).abs() <= 1e-15, "got {loss}");
}
