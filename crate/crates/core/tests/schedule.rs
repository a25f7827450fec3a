//! Branch kernel schedule: closed forms and size preservation.

use mks_core::attention::KernelSchedule;
use mks_core::nn::Conv2d;
use mks_core::ops::conv2d_forward;
use mks_core::rng::SplitMix64;
use mks_core::{Shape, Tensor};

#[test]
fn schedule_matches_closed_forms_and_preserves_size() {
    let mut rng = SplitMix64::new(17);
    for s in 1..=6usize {
        for max in (5..=21usize).step_by(2) {
            let sched = KernelSchedule::new(s, max).unwrap();
            assert_eq!(sched.branches(), s);
            for (i, b) in sched.entries().iter().enumerate() {
                let k = (5 + 2 * i).min(max);
                let d = i + 1;
                assert_eq!(
                    (b.size, b.dilation, b.padding),
                    (k, d, (k - 1) * d / 2),
                    "S={s} max={max} branch {i}"
                );
                // size preservation on a random input with odd and even sides
                let (h, w) = (3 + rng.below(9) as usize, 2 + rng.below(9) as usize);
                let spec = b.depthwise(2);
                let conv = Conv2d::<f64>::new(spec, false, &mut rng).unwrap();
                let x = Tensor::from_fn(Shape::new(1, 2, h, w), |_| rng.normal());
                let y = conv2d_forward(&x, &conv.weight.value, None, &spec).unwrap();
                assert_eq!(y.shape(), x.shape(), "S={s} max={max} branch {i}");
            }
        }
    }
}

#[test]
fn invalid_schedules_are_rejected() {
    assert!(KernelSchedule::new(0, 7).is_err());
    assert!(KernelSchedule::new(2, 6).is_err());
    assert!(KernelSchedule::new(2, 3).is_err());
}
