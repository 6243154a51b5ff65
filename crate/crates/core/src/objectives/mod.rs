//! Losses and evaluation metrics.

pub mod loss;
pub mod metrics;

pub use loss::{
    emd_with_grad, kld_with_grad, loss_emd, loss_kld, loss_weighted_mse, weighted_mse_with_grad, LossBatch, LossKind,
    ScoreMode,
};
pub use metrics::{evaluate, pearson, spearman, MetricReport, Scores};
