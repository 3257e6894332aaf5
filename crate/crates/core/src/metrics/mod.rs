//! Evaluation: image and prior metrics, test-time fusion and reports.

pub mod image;
pub mod landmarks;
pub mod report;
pub mod tta;

pub use image::{luma, mse, parsing_metrics, psnr, ssim, ssim_channels, ssim_plane, ParsingScores};
pub use landmarks::{landmarks_from_heatmaps, nrmse, Nrmse};
pub use report::{estimator, evaluate, run_name, Aggregate, Estimator, MetricReport, Row};
pub use tta::{fuse_dihedral, tta_fuse};
