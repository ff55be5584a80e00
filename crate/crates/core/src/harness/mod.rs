//! Run directories, ablation sweeps, trace aggregation and the model-level
//! gradient check behind the `guide` binary.

mod gradcheck;
mod grid;
mod report;
mod run;

pub use gradcheck::{grad_check_config, model_grad_check, GroupSummary, ModelGradCheck};
pub use grid::AblationGrid;
pub use report::{
    aggregate, aggregate_records, collect_traces, mean_sd, CheckStatus, OrderingCheck, Report, ReportRow,
    ORDERING_TOLERANCE, PROBE_DEPTH,
};
pub use run::{
    build_stamp, prepare_output_dir, read_trace, run_single, Manifest, RunSummary, CHECKPOINT_FILE, MANIFEST_FILE,
    PLOT_FILE, TRACE_FILE,
};
