//! Training pipelines: image fitting and signed-distance regression.

mod image;
mod metrics;
mod sdf;
mod train;

pub use image::{all_pixel_coords, pixel_coords, render, Image, ImageSampling, ImageTask};
pub use metrics::{mse, psnr, ssim, PSNR_IDENTICAL};
pub use sdf::{
    analytic_sdf, relative_error, render_sdf_slice, sdf_eval_metrics, split_counts, PointSet, SdfField, SdfMetrics, SdfOracle,
    SdfTask, Shape, SliceAxis, DEFAULT_EPS, DEFAULT_NEAR_SIGMA,
};
pub use train::{sampling_rng, train, MetricsRow, Task, TrainOptions, TrainState, CSV_HEADER};
