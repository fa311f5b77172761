//! SSIM and the results table.

mod report;
mod ssim;

pub use report::{append_results, read_results, ResultRow, RESULT_COLUMNS};
pub use ssim::{mean_ssim, ssim, SsimParams};
