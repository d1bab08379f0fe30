use camcon::data::{make_splits, synthetic_dataset, SplitConfig, SplitName};
use camcon::trainer::{cam_disagreement, derive_seed, unit_image};
use camcon::{
    build_backbone, evaluate, sample_augmentation, train, AugmentPolicy, BackboneConfig, DepthPreset, InputShape,
    LayerId, TrainMode, TrainingConfig,
};

fn model_config(seed: u64) -> BackboneConfig {
    BackboneConfig {
        depth_preset: DepthPreset::Tiny,
        num_classes: 10,
        input_shape: InputShape { height: 16, width: 16, channels: 3 },
        seed,
    }
}

#[test]
fn full_training_improves_map_agreement_on_held_out_images() {
    let raw = synthetic_dataset(400, SplitName::Train, 3);
    let test = synthetic_dataset(32, SplitName::Test, 4);
    let split = make_splits(&raw, &SplitConfig { labeled_count: 80, ratio: 2.0, val_fraction: 0.2, seed: 0 }).unwrap();
    let layer = LayerId::new(3).unwrap();
    let config = TrainingConfig {
        epochs: 4,
        batch_size: 16,
        target_layer: layer,
        mode: TrainMode::Full,
        ..Default::default()
    };
    let policy = AugmentPolicy { image_size: (16, 16), ..Default::default() };
    let input = model_config(0).input_shape;
    let probe: Vec<_> = (0..test.len()).map(|i| unit_image(test.image(i), input)).collect();
    let records: Vec<_> = (0..probe.len() as u64)
        .map(|i| sample_augmentation(derive_seed(&[9, i]), &policy).unwrap())
        .collect();

    let initial = build_backbone(&model_config(0)).unwrap();
    let before = cam_disagreement(&initial, &probe, &records, layer).unwrap();
    let (trained, metrics) = train(build_backbone(&model_config(0)).unwrap(), &split, config, policy).unwrap();
    let after = cam_disagreement(&trained, &probe, &records, layer).unwrap();
    assert!(after < before, "disagreement {before} -> {after}");
    assert!(metrics.last().unwrap().l_s < metrics[0].l_s);
    assert!(evaluate(&trained, &split.validation).unwrap() > 0.1);
}
