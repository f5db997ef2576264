//! Training, evaluation, persistence and the experiment drivers behind the
//! command-line tool.

pub mod ablation;
pub mod analyze;
pub mod archive;
pub mod config;
pub mod dump;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod train;

pub use ablation::{
    ablation_acp, ablation_cat, ablation_isolation, cat_ablation_values, param_matched_baseline, AblationRow,
    AblationTable, ACP_ABLATION_VALUES, CAT_ABLATION_VALUES, TOY_CAT_ABLATION_VALUES,
};
pub use analyze::{attention_images, cka_report, pca_images};
pub use config::{DataConfig, RunConfig, Schedule, TrainConfig};
pub use dump::{dump_model, load_dump, Dump};
pub use gradcheck::{registered_checks, run_suite, SuiteRow};
pub use metrics::{score, MetricsRecord, Prediction, Scores};
pub use optim::Adam;
pub use train::{batch_loss, load_data, predict, train_and_evaluate, Batch, RunOutcome, Trainer};
