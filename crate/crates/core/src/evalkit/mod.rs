//! Capability-retention evaluation: metrics, task files, model scoring and
//! the base/fine-tuned report.

pub mod metrics;
pub mod report;
pub mod scoring;
pub mod tasks;

pub use metrics::{
    accuracy_norm, choice_accuracy, delta_ability, extract_number, forgetting_rate, knowledge_loss,
    normalize_text, numeric_accuracies, paired_t_test, wald_ci, ChoiceRecord, CompletionRecord,
    NumericRecord, TTest,
};
pub use report::{
    compare, evaluate_pair, render_table, resolve, EvalConfig, EvalRecords, MetricReport, Predictor,
};
pub use scoring::{score_multiple_choice, Scorer};
pub use tasks::{load_task_file, parse_task_file, TaskKind, TaskSet};
