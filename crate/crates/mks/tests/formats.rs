//! Bit-exact round trips of the tensor dump and the weight file.

use mks::format::{self, AnyTensor};
use mks_core::backbone::{BackboneConfig, Model, Variant};
use mks_core::nn::Module;
use mks_core::rng::SplitMix64;
use mks_core::{Shape, Tensor};
use proptest::prelude::*;

fn bits32(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn model_weights_round_trip_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    for variant in Variant::ALL {
        let model = Model::<f32>::seeded(BackboneConfig::tiny().with_variant(variant), 11).unwrap();
        let path = dir.path().join(format!("{}.mksw", variant.name()));
        format::save_weights(&path, &model).unwrap();

        let mut fresh = Model::<f32>::seeded(BackboneConfig::tiny().with_variant(variant), 12).unwrap();
        format::load_model(&mut fresh, format::load_weights(&path).unwrap()).unwrap();
        let (a, b) = (model.state_dict(), fresh.state_dict());
        assert_eq!(a.len(), b.len());
        for ((na, pa), (nb, pb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(bits32(&pa.value), bits32(&pb.value), "{na}");
        }
        // buffers travel too, but only learnable tensors count as parameters
        assert!(a.values().any(|p| !p.is_learnable()));
        let learnable: usize = a.values().filter(|p| p.is_learnable()).map(|p| p.value.numel()).sum();
        assert_eq!(learnable, model.num_params());

        let again = dir.path().join("again.mksw");
        format::save_weights(&again, &fresh).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }
}

#[test]
fn loading_into_a_different_architecture_fails() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("full.mksw");
    let full = Model::<f32>::seeded(BackboneConfig::tiny(), 1).unwrap();
    format::save_weights(&path, &full).unwrap();
    let mut base = Model::<f32>::seeded(BackboneConfig::tiny().with_variant(Variant::Base), 1).unwrap();
    assert!(format::load_model(&mut base, format::load_weights(&path).unwrap()).is_err());
    let mut wide = Model::<f64>::seeded(BackboneConfig::tiny(), 1).unwrap();
    assert!(format::load_model(&mut wide, format::load_weights(&path).unwrap()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn tensor_dump_round_trips_any_bits(seed in any::<u64>(), dims in prop::array::uniform4(1usize..5), double in any::<bool>()) {
        let mut rng = SplitMix64::new(seed);
        let shape = Shape::from_dims(dims);
        // raw bit patterns, including NaNs, infinities and subnormals
        let t = if double {
            AnyTensor::F64(Tensor::from_fn(shape, |_| f64::from_bits(rng.next_u64())))
        } else {
            AnyTensor::F32(Tensor::from_fn(shape, |_| f32::from_bits(rng.next_u64() as u32)))
        };
        let mut buf = Vec::new();
        format::write_tensor(&mut buf, &t).unwrap();
        let back = format::read_tensor(&mut buf.as_slice()).unwrap();
        let mut again = Vec::new();
        format::write_tensor(&mut again, &back).unwrap();
        prop_assert_eq!(buf, again);
        prop_assert_eq!(back.shape(), shape);
    }
}
