//! Small vision transformer with a MoASE adapter parallel to each MLP.

mod checkpoint;
mod config;
mod encode;
mod freeze;
mod params;
mod pretrain;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{BackboneConfig, ModelConfig};
pub use encode::{argmax_rows, encode, one_hot, predict, soft_cross_entropy, ActivationHook, Encoded, Prediction};
pub use freeze::{freeze_partition, trainable_tensors, trainable_view, FreezeMode, Partition};
pub use params::{BackboneParams, BlockParams, HeadParams, ModelParams, StemParams};
pub use pretrain::{accuracy, pretrain_source, PretrainConfig, Pretrained};
