//! Staged training: text pretraining, codebook clustering, image-text
//! alignment and joint fine-tuning, with resumable checkpoints.

mod batching;
mod checkpoint;
mod config;
mod desk;
pub mod losses;
mod stages;
mod trainer;

pub use batching::{data_hash, make_batches, TrainExample};
pub use checkpoint::{Checkpoint, LogEntry, ResumeState, Snapshot, StageRecord, FORMAT_VERSION, MAGIC};
pub use config::{EmaSource, StageConfig};
pub use desk::{image_splits, text_splits, DeskData, DeskSpec, RawData, Splits, LINE_CHARS};
pub use stages::{code_agreement, run_stage1, run_stage2, run_stage3, run_stage4};
pub use trainer::StageReport;
