//! Experiment configs, the train / prune / evaluate pipeline, rating
//! aggregation and plot data.

mod config;
mod ratings;
mod report;
mod run;

pub use config::{
    BpeCorpus, DataConfig, EvalSection, ExperimentConfig, ModelSection, OodSet, PruningSection, Regime, TrainSection,
};
pub use ratings::{aggregate_ratings, read_ratings_csv, RatingRecord, RatingSummary, System};
pub use report::{
    emit_plot_data, read_report, strip_timing, write_rows, BucketEval, Failure, ModelStats, PlotKind, ReportRow,
    Status, TestSetEval, TestSetKind, TIMING_FIELDS,
};
pub use run::{
    checkpoint_path, decodes_path, evaluate_checkpoint, prepare_data, run_experiment, score_test_set, sparsity_tag,
    train_model, Evaluation, PreparedData, RunOptions, RunSummary, TestSet, BPE_FILE, OUT_DIR_ENV, REPORT_FILE,
    THREADS_ENV,
};

#[cfg(test)]
mod tests;
