mod common;

use common::GradCheck;
use vader_core::encoder::{batch_gradients, loss_gradients, EncoderParams};

#[test]
fn analytic_gradients_match_central_differences() {
    let mut rng = common::rng(2024);
    let (mut checked, mut skipped) = (0, 0);
    let mut worst: f64 = 0.0;
    while checked < 150 {
        match common::gradient_check_instance(&mut rng) {
            GradCheck::Checked(e) => {
                checked += 1;
                worst = worst.max(e);
            }
            GradCheck::Skipped => skipped += 1,
        }
        assert!(skipped < 1000, "too many instances sit on a kink");
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn batch_gradient_is_the_sum_of_single_gradients() {
    let mut rng = common::rng(9);
    let params = EncoderParams::init(4, 5, 3, &mut rng);
    let xs: Vec<Vec<f64>> = (0..9).map(|k| (0..4).map(|c| ((k * 7 + c * 3) % 11) as f64 / 5.0 - 1.0).collect()).collect();
    let triplets: Vec<(&[f64], &[f64], &[f64])> =
        (0..3).map(|k| (xs[3 * k].as_slice(), xs[3 * k + 1].as_slice(), xs[3 * k + 2].as_slice())).collect();
    let (loss, grads) = batch_gradients(&params, &triplets, 1.0).unwrap();
    let mut total = 0.0;
    let mut sum = vec![0.0; params.num_params()];
    for (a, p, n) in &triplets {
        let (l, g) = loss_gradients(&params, a, p, n, 1.0).unwrap();
        total += l;
        for (s, x) in sum.iter_mut().zip(g.flatten()) {
            *s += x;
        }
    }
    assert!((loss - total).abs() < 1e-12);
    for (a, b) in grads.flatten().iter().zip(&sum) {
        assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
    }
}
