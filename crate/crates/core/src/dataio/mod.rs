//! ECG records, label matrices, dataset files and preprocessing.

mod format;
mod manifest;
mod record;
mod resample;
mod stratify;
pub mod synthetic;
mod task;
mod window;
mod znorm;

pub use format::{dataset_digest, encode_bin, load_dataset, read_manifest, save_dataset, Dataset, SignalFormat, BIN_MAGIC};
pub use manifest::{DatasetManifest, RecordEntry, Sex, Split, SplitManifest, Stratum};
pub use record::EcgRecord;
pub use resample::resample;
pub use stratify::{halvings, iterative_stratification, stratified_subsample, MAX_HALVINGS};
pub use synthetic::{generate_synthetic_dataset, SyntheticSpec};
pub use task::{Category, LabelKind, LabelMatrix, TaskKind, TaskSpec};
pub use window::{random_crop, sliding_windows, stack_records, window_samples};
pub use znorm::{apply_znorm, fit_znorm, inverse_znorm, ZNormStats, ZNormStatus};
