//! Preprocessing filters: kernel representation, application, PSNR
//! matching, training against a differentiable quality score, and sweeps.

mod apply;
mod kernel;
mod objective;
mod sweep;
mod train;

pub use apply::{alpha_for_psnr, apply_filter, filter_luma, mean_psnr, psnr, quantize8};
pub use kernel::{unsharp_kernel, KernelFilter, MAX_KERNEL_SIZE};
pub use objective::{filter_frames, filtered_score, filtered_score_value, OutputMode};
pub use sweep::{alpha_sweep, write_sweep_csv, SweepRow};
pub use train::{
    clips_psnr, clips_score, matched_score, train_filter, validation_score, Checkpoint, LogRow,
    MatchedScore, StopReason, TrainConfig, TrainOutcome,
};
