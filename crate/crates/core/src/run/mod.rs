//! Run orchestration behind the command-line front end: configuration,
//! training and evaluation, checkpoints, gradient-check suites, cost reports
//! and attention-map inspection.

mod checkpoint;
mod config;
mod report;
mod suite;
mod train;

pub use checkpoint::{decode_blobs, encode_blobs, load_checkpoint, read_blobs, restore, save_checkpoint, write_blobs};
pub use config::{DatasetSource, RunConfig, ScheduleKind, Task};
pub use report::{build_report, inspect_weights, inventory, run_inspect, Costs, OverheadRow, Report, SiteMap, WEIGHTS_FILE};
pub use suite::{run_suite, Scope, UnitResult, TOLERANCE};
pub use train::{
    evaluate, load_datasets, load_network, run_eval, run_training, train, Datasets, MetricsRecord, TrainOutcome,
    CHECKPOINT_FILE, MANIFEST_FILE, METRICS_FILE,
};
