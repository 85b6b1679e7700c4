//! Online continual test-time adaptation: an EMA teacher produces
//! augmentation-averaged pseudo-labels, the student's adapters are trained
//! against them with an optional proximal pull toward the teacher.

mod augment;
mod losses;
mod state;
mod stream;

pub use augment::{Augmentation, AugmentationSet};
pub use losses::{consistency_loss, hp_loss, pseudo_label, PseudoLabel};
pub use state::{adapt_step, ema_update, AdaptConfig, AdaptState, StepOutput};
pub use stream::{
    metrics_from_records, read_metrics_csv, run_stream, run_stream_with, write_metrics_csv, BankEntry, BatchRecord, FeatureBank, RunMetrics,
    SegmentError, StreamRun,
};
