//! FLOPs and parameter counting: hand closed forms, the instrumented
//! multiply-accumulate counters and the dense-versus-depthwise comparison.

use mks_core::backbone::{count_flops, count_params_closed_form, layer_costs, BackboneConfig, Model, Variant};
use mks_core::nn::{Conv2d, Linear, Module};
use mks_core::ops::{ConvSpec, Mode};
use mks_core::rng::SplitMix64;
use mks_core::{Shape, Tensor};

/// `(spec, input, hand-computed FLOPs, hand-computed params incl. bias)`.
fn conv_fixtures() -> [(ConvSpec, Shape, u64, u64); 4] {
    [
        // 8·3·3·3 MACs per output × 32·32 outputs
        (
            ConvSpec::dense(3, 8, 3),
            Shape::new(1, 3, 32, 32),
            2 * 8 * 27 * 1024,
            8 * 27 + 8,
        ),
        // one 7×7 tap set per channel
        (
            ConvSpec::depthwise(16, 7, 2, 6),
            Shape::new(1, 16, 16, 16),
            2 * 16 * 49 * 256,
            16 * 49 + 16,
        ),
        (
            ConvSpec::pointwise(16, 32),
            Shape::new(1, 16, 8, 8),
            2 * 16 * 32 * 64,
            16 * 32 + 32,
        ),
        // stride 2 halves both sides: 8×8 outputs
        (
            ConvSpec::dense(8, 16, 3).with_stride(2),
            Shape::new(1, 8, 16, 16),
            2 * 16 * 72 * 64,
            16 * 72 + 16,
        ),
    ]
}

#[test]
fn fixture_layers_match_closed_forms() {
    let mut rng = SplitMix64::new(5);
    for (spec, input, flops, params) in conv_fixtures() {
        assert_eq!(2 * spec.macs(input).unwrap(), flops, "{spec:?}");
        let mut conv = Conv2d::<f64>::new(spec, true, &mut rng).unwrap();
        assert_eq!(conv.num_params() as u64, params, "{spec:?}");
        conv.forward(&Tensor::zeros(input), Mode::Eval).unwrap();
        assert_eq!(2 * conv.macs(), flops, "{spec:?}");
    }
    // fully connected 64 → 16 on a batch of one
    let mut fc = Linear::<f64>::new(64, 16, &mut rng).unwrap();
    assert_eq!(fc.num_params(), 64 * 16 + 16);
    fc.forward(&Tensor::zeros(Shape::vector(1, 64)), Mode::Eval).unwrap();
    assert_eq!(2 * fc.macs(), 2 * 64 * 16);
}

#[test]
fn backbone_counts_match_instrumented_forward() {
    for variant in Variant::ALL {
        let config = BackboneConfig::tiny().with_variant(variant);
        let mut model = Model::<f32>::seeded(config.clone(), 1).unwrap();
        let x = Tensor::full(Shape::new(1, 3, 64, 64), 0.5f32);
        model.reset_macs();
        model.forward(&x, Mode::Eval).unwrap();
        assert_eq!(2 * model.macs(), count_flops(&config, 64, 64).unwrap(), "{variant}");
        assert_eq!(
            model.num_params() as u64,
            count_params_closed_form(&config).unwrap(),
            "{variant}"
        );
        let listed: u64 = layer_costs(&config, 64, 64).unwrap().iter().map(|l| l.params).sum();
        assert_eq!(listed, model.num_params() as u64);
    }
}

#[test]
fn dilated_depthwise_is_cheaper_than_dense_span() {
    let input = Shape::new(1, 32, 16, 16);
    let dense = ConvSpec::dense(32, 32, 13);
    let dilated = ConvSpec::depthwise(32, 7, 2, 6);
    assert_eq!(dense.span(), dilated.span());
    assert_eq!(dense.output_shape(input).unwrap(), dilated.output_shape(input).unwrap());
    assert!(dense.macs(input).unwrap() > dilated.macs(input).unwrap());
    // dense: C²·169 per pixel; dilated depthwise: C·49 per pixel
    assert_eq!(dense.macs(input).unwrap(), 32 * 32 * 169 * 256);
    assert_eq!(dilated.macs(input).unwrap(), 32 * 49 * 256);
}
