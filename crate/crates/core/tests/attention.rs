//! Contracts of the spatial and channel attention modules.

use mks_core::attention::{ChannelAttention, ChannelAttentionConfig, SpatialAttention, SpatialAttentionConfig};
use mks_core::nn::Module;
use mks_core::ops::{mul_broadcast, Mode};
use mks_core::rng::SplitMix64;
use mks_core::{Shape, Tensor};

fn normal(shape: Shape, rng: &mut SplitMix64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

#[test]
fn selection_maps_are_open_unit_interval_with_one_map_per_branch() {
    let mut rng = SplitMix64::new(21);
    for (c, s) in [(4, 2), (6, 3), (8, 4)] {
        let mut sa = SpatialAttention::<f64>::new(SpatialAttentionConfig::new(c, s, 9), &mut rng).unwrap();
        let x = normal(Shape::new(2, c, 9, 7), &mut rng);
        let features = sa.extract(&x, Mode::Train).unwrap();
        let (parts, t) = sa.transform(&features).unwrap();
        assert_eq!(parts.len(), s);
        assert!(parts.iter().all(|p| p.shape() == Shape::new(2, c / s, 9, 7)));
        let sig = sa.attention(&t).unwrap();
        assert_eq!(sig.shape(), Shape::new(2, s, 9, 7));
        assert!(sig.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn one_hot_selection_picks_a_single_branch() {
    let mut rng = SplitMix64::new(22);
    let (c, s) = (6, 3);
    let mut sa = SpatialAttention::<f64>::new(SpatialAttentionConfig::new(c, s, 9), &mut rng).unwrap();
    let x = normal(Shape::new(2, c, 6, 5), &mut rng);
    let features = sa.extract(&x, Mode::Train).unwrap();
    let (parts, _) = sa.transform(&features).unwrap();
    for pick in 0..s {
        let mut sig = Tensor::zeros(Shape::new(2, s, 6, 5));
        for b in 0..2 {
            sig.plane_mut(b, pick).fill(1.0);
        }
        let fused = sa.fuse(&x, &parts, &sig).unwrap();
        let expect = mul_broadcast(&x, &sa.out_conv.infer(&parts[pick]).unwrap()).unwrap();
        assert_eq!(fused, expect, "branch {pick}");
    }
}

#[test]
fn channel_attention_rescales_each_channel_uniformly() {
    let mut rng = SplitMix64::new(23);
    let mut ca = ChannelAttention::<f64>::new(ChannelAttentionConfig::new(8, 4), &mut rng).unwrap();
    let x = Tensor::from_fn(Shape::new(2, 8, 5, 6), |_| {
        // bounded away from zero so the ratio is well defined
        let v = rng.uniform_range(0.2, 2.0);
        if rng.below(2) == 0 {
            v
        } else {
            -v
        }
    });
    for mode in [Mode::Train, Mode::Eval] {
        let y = ca.forward(&x, mode).unwrap();
        for b in 0..2 {
            for ch in 0..8 {
                let ratios: Vec<f64> = y.plane(b, ch).iter().zip(x.plane(b, ch)).map(|(o, i)| o / i).collect();
                let r0 = ratios[0];
                assert!(r0 > 0.0 && r0 < 1.0, "gate {r0} outside (0, 1)");
                for r in &ratios {
                    assert!((r - r0).abs() <= 1e-12 * r0, "({b}, {ch}): {r} vs {r0}");
                }
            }
        }
    }
}
