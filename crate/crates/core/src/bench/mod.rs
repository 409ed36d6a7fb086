//! Accuracy, throughput, FID and sweep benchmarks plus report rendering.

pub mod accuracy;
pub mod fps;
pub mod render;
pub mod stats;
pub mod sweep;

pub use self::accuracy::{topk_accuracy, AccuracyError};
pub use self::fps::{measure_fps, ClipInput, FpsError, FpsMode, FpsReport, FpsRun};
pub use self::render::{
    render_report, AccuracyRow, AccuracyTable, BenchReport, FidReport, ReportFormat, TopkReport,
};
pub use self::stats::{fid, fid_from_features, gaussian_stats, GaussianStats, StatsError};
pub use self::sweep::{
    run_batch_sweep, run_sweep, BatchRow, BatchSweepReport, SweepError, SweepReport, SweepRow, SweepSpec,
    DEFAULT_SWEEP_PROMPT, DEFAULT_SWEEP_STEPS,
};
