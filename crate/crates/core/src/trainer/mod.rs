//! Clip normalization, regime selection, the training loop and checkpoints.

mod checkpoint;
mod clip;
mod config;
mod model;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_model, save_model, Checkpoint, RngState, FORMAT_VERSION, MAGIC};
pub use clip::{normalize_clip, VideoClip};
pub use config::{Regime, RegimeOverrides, TrainConfig};
pub use model::{ClipMeta, LayeredVideoModel, ModelSpec};
pub use train::{train, LogHeader, LogRecord, TrainOutcome, Trainer};
