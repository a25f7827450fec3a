//! Training harness smoke tests on a small configuration.

use mks_core::backbone::{BackboneConfig, PatchEmbedConfig, StageConfig, Variant};
use mks_core::train::{train, TrainConfig};

fn small() -> TrainConfig {
    let model = BackboneConfig {
        in_channels: 3,
        patch_embed: PatchEmbedConfig {
            kernel: 4,
            stride: 4,
            channels: 8,
        },
        stages: vec![StageConfig {
            depth: 1,
            channels: 8,
            branches: 2,
            max_size: 7,
            reduction: 4,
            downsample: false,
        }],
        variant: Variant::BaseSaCa,
    };
    TrainConfig {
        model,
        height: 32,
        width: 32,
        train_samples: 256,
        val_samples: 32,
        batch_size: 8,
        epochs: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn first_epoch_lowers_validation_loss() {
    for v in Variant::ALL {
        let out = train(&small(), v, 3).unwrap();
        let h = &out.history;
        println!("{v}: {:?}", h.iter().map(|m| (m.loss, m.ap)).collect::<Vec<_>>());
        assert!(h[1].loss < h[0].loss, "{v}: {} !< {}", h[1].loss, h[0].loss);
    }
}

#[test]
fn same_seed_same_history_bits() {
    let bits = |seed| -> Vec<(u64, u64, u64)> {
        train(&small(), Variant::BaseSaCa, seed)
            .unwrap()
            .history
            .iter()
            .map(|m| (m.loss.to_bits(), m.ap.to_bits(), m.train_loss.to_bits()))
            .collect()
    };
    assert_eq!(bits(9), bits(9));
    assert_ne!(bits(9), bits(10));
}
