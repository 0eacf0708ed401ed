//! Image and text metrics, evaluation reports and the two studies.

pub mod quality;
pub mod report;
pub mod study;

pub use quality::{levenshtein, mse, ned, psnr, psnr_from_mse, ssim, PSNR_CAP};
pub use report::{Aggregate, MetricReport, MetricRow, UNAVAILABLE};
pub use study::{
    bilinear_baseline, eval_caption, fidelity_sweep, noise_study, NoiseStudyConfig, PromptMode, SweepConfig,
};
