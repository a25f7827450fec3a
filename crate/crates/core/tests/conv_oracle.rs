//! Optimized convolution against the loop-nest reference on randomized
//! dense, depthwise, dilated, strided and grouped instances.

use mks_core::ops::{conv2d_backward, conv2d_forward, ConvSpec};
use mks_core::reference;
use mks_core::rng::SplitMix64;
use mks_core::{Shape, Tensor};
use proptest::prelude::*;

fn random(shape: Shape, rng: &mut SplitMix64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
}

/// `max |a − b| / max |b|`: relative error in the max norm.
fn rel_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    diff / b.max_abs().max(f64::MIN_POSITIVE)
}

/// Instance `i` of the randomized sweep; cycles through the three families.
fn instance(i: usize, rng: &mut SplitMix64) -> ConvSpec {
    let pick = |rng: &mut SplitMix64, lo: u64, hi: u64| (lo + rng.below(hi - lo + 1)) as usize;
    match i % 3 {
        0 => {
            let k = 2 * pick(rng, 0, 2) + 1;
            ConvSpec::dense(pick(rng, 1, 4), pick(rng, 1, 4), k)
                .with_stride(pick(rng, 1, 2))
                .with_padding(pick(rng, 0, (k / 2) as u64))
        }
        1 => {
            let k = 2 * pick(rng, 1, 3) + 1;
            let d = pick(rng, 1, 3);
            ConvSpec::depthwise(pick(rng, 1, 5), k, d, (k - 1) * d / 2)
        }
        _ => {
            let g = pick(rng, 1, 2);
            let k = pick(rng, 1, 4);
            ConvSpec::dense(g * pick(rng, 1, 3), g * pick(rng, 1, 3), k)
                .with_groups(g)
                .with_dilation(pick(rng, 1, 3))
                .with_padding(pick(rng, 0, 3))
                .with_stride(pick(rng, 1, 3))
        }
    }
}

#[test]
fn two_hundred_random_instances_match_the_reference() {
    let mut rng = SplitMix64::new(0xc0417);
    let mut worst = 0.0f64;
    let mut run = 0;
    while run < 200 {
        let spec = instance(run, &mut rng);
        let (sh, sw) = spec.span();
        let h = sh.saturating_sub(2 * spec.padding).max(1) + rng.below(7) as usize;
        let w = sw.saturating_sub(2 * spec.padding).max(1) + rng.below(7) as usize;
        let x = random(Shape::new(1 + rng.below(2) as usize, spec.in_channels, h, w), &mut rng);
        let weight = random(spec.weight_shape(), &mut rng);
        let bias = random(Shape::vector(1, spec.out_channels), &mut rng);
        let with_bias = rng.below(2) == 0;
        let b = with_bias.then_some(&bias);
        let fast = conv2d_forward(&x, &weight, b, &spec).unwrap();
        let slow = reference::conv2d(&x, &weight, b, &spec);
        let err = rel_error(&fast, &slow);
        assert!(
            err < 1e-12,
            "instance {run} {spec:?} on {}: relative error {err:e}",
            x.shape()
        );
        worst = worst.max(err);
        run += 1;
    }
    println!("worst relative error over {run} instances: {worst:e}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    /// The input gradient is the adjoint of the forward map:
    /// `⟨conv(x), g⟩ = ⟨x, conv_backward(g)⟩`, and the weight gradient satisfies
    /// the same identity in the weights.
    #[test]
    fn backward_is_the_adjoint(seed in any::<u64>(), k in 1usize..4, d in 1usize..3, s in 1usize..3, g in 1usize..3) {
        let mut rng = SplitMix64::new(seed);
        let spec = ConvSpec::dense(2 * g, 2 * g, k).with_dilation(d).with_stride(s).with_groups(g).with_padding(k / 2);
        let x = random(Shape::new(2, 2 * g, 7, 6), &mut rng);
        let w = random(spec.weight_shape(), &mut rng);
        let y = conv2d_forward(&x, &w, None, &spec).unwrap();
        let gy = random(y.shape(), &mut rng);
        let grads = conv2d_backward(&gy, &x, &w, &spec, false).unwrap();
        let lhs = y.dot(&gy).unwrap();
        prop_assert!((lhs - x.dot(&grads.input).unwrap()).abs() <= 1e-11 * (1.0 + lhs.abs()));
        prop_assert!((lhs - w.dot(&grads.weight).unwrap()).abs() <= 1e-11 * (1.0 + lhs.abs()));
    }
}
