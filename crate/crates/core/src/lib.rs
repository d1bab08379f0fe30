pub mod augment;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod losses;
pub mod optim;
mod sampling;
pub mod toy;
pub mod trainer;

pub use augment::{apply_to_image, replay_spatial, sample_augmentation, AugmentPolicy, AugmentationRecord, ReplayedCam};
pub use backbone::{build_backbone, list_target_layers, Backbone, BackboneConfig, Classifier, DepthPreset, ForwardResult, InputShape, LayerId};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{load_cifar10, make_splits, paired_iterator, DatasetSplit, RawDataset, SplitConfig, SplitManifest};
pub use error::{Error, Result};
pub use gradcam::{compute_cam, normalize_cam, upsample_cam, CamBatch, CamMap};
pub use losses::{combined_loss, gradcam_consistency_loss, pseudo_label_loss, supervised_loss, LossBreakdown, LossWeights};
pub use optim::OptimizerKind;
pub use trainer::{cam_disagreement, evaluate, train, CamClassSource, EpochMetrics, LoopStyle, TrainMode, Trainer, TrainingConfig};
