//! Dual-branch segmentation network, projection head and teacher EMA.

pub mod backbone;
pub mod checkpoint;
pub mod head;
pub mod layers;
pub mod params;

pub use backbone::{forward, DualOutput, HiddenPattern};
pub use checkpoint::{Checkpoint, CheckpointScalars};
pub use head::{project, DropoutMask, SliceEmbeddingMatrix};
pub use params::{ema_update, ema_update_in_place, ArchDescriptor, ParamSet};
