//! Pure metric kernels. Everything here is reentrant.

mod image;
mod stats;
mod text;

pub use image::{
    laplacian_variance, mean_ssim, phash64, phash_positions, phash_similarity, ssim_binarized,
    Hash64,
};
pub use stats::{average_ranks, pearson_r, spearman_rho, Spearman};
pub use text::{anls, cer, levenshtein, normalize_text, ANLS_TAU};
