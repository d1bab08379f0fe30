//! Shared inputs for the benchmarks.

use camcon::data::{make_splits, synthetic_dataset, DatasetSplit, SplitConfig, SplitName};
use camcon::{build_backbone, Backbone, BackboneConfig, DepthPreset, InputShape};

pub fn tiny_model(side: usize) -> Backbone {
    build_backbone(&BackboneConfig {
        depth_preset: DepthPreset::Tiny,
        num_classes: 10,
        input_shape: InputShape { height: side, width: side, channels: 3 },
        seed: 0,
    })
    .expect("valid preset")
}

pub fn small_split(labeled: usize) -> DatasetSplit {
    let raw = synthetic_dataset(labeled * 5, SplitName::Train, 0);
    make_splits(&raw, &SplitConfig { labeled_count: labeled, ratio: 1.0, val_fraction: 0.2, seed: 0 })
        .expect("split fits")
}
