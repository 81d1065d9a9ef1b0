//! Experiment orchestration: configuration, multi-seed runs, CSV records,
//! held-out state-prediction error and cross-seed reports.

pub mod config;
pub mod mse;
pub mod presets;
pub mod record;
pub mod report;
pub mod run;

pub use config::{parse_kv, ExperimentConfig};
pub use mse::{affine_fit, held_out_mse, HeldOutMse};
pub use presets::{preset, PRESETS};
pub use record::{read_csv, write_csv, RunRecord, SCHEMA_VERSION};
pub use report::{bin_curve, mean_std, report, sign_test_p, BINS};
pub use run::{experiment_dir, run_experiment, run_one, run_id, Manifest, RunSummary};
