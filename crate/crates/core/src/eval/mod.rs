//! Participant-grouped cross-validation, statistics and the experiment matrix.

pub mod experiment;
pub mod folds;
pub mod report;
pub mod stats;

pub use experiment::{architectures, build_teacher, fit_scheme, run_experiment, AlphaRecord, CellResult, CellRole, ExperimentConfig, ExperimentReport, Scheme};
pub use folds::{make_folds, FoldPlan};
pub use report::{emit_report, parse_results, read_results, results_to_csv, significance_marks, SignificanceMark};
pub use stats::{accuracy, paired_t_test, predicted_classes, TTest};
