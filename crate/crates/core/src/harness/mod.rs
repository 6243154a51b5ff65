//! Training, evaluation, ablation, Grad-CAM and plotting.

pub mod ablation;
pub mod config;
pub mod dataset;
pub mod gradcam;
pub mod pipeline;
pub mod plot;
pub mod train;

pub use ablation::{module_grid, mask_grid, run_ablation_grid, AblationRow, AblationTable, ModelDelta};
pub use config::RunConfig;
pub use dataset::{ImageStore, Prepared, Preprocessor, Records};
pub use gradcam::{gradcam, gradcam_from, CamTarget, Heatmap};
pub use train::{evaluate_checkpoint, predict, train, EpochRecord, TrainOutcome};
