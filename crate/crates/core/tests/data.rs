//! Synthetic task statistics and the loss.

use mks_core::data::{bce_loss, gen_synthetic, SyntheticConfig};
use mks_core::{Shape, Tensor};

#[test]
fn blob_count_is_uniform_over_zero_to_four() {
    let cfg = SyntheticConfig::new(32, 32, 4);
    let samples = gen_synthetic(2024, 10_000, &cfg).unwrap();
    let mut hist = [0usize; 5];
    for s in &samples {
        hist[s.blobs.len()] += 1;
    }
    let mean = samples.iter().map(|s| s.blobs.len()).sum::<usize>() as f64 / samples.len() as f64;
    assert!((mean - 2.0).abs() < 0.1, "mean blob count {mean}");
    // each count close to 1/5 of the samples
    assert!(hist.iter().all(|&n| (1700..=2300).contains(&n)), "{hist:?}");
    for s in &samples[..200] {
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let on = s.target.data().iter().filter(|&&v| v == 1.0).count();
        assert!(on <= s.blobs.len() && (on > 0) == !s.blobs.is_empty());
    }
}

#[test]
fn bce_of_zero_logits_is_ln2_with_centered_gradient() {
    let z = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
    let y = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let (loss, grad) = bce_loss(&z, &y).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    assert_eq!(grad.data(), &[0.125, -0.125, -0.125, 0.125]);
}
