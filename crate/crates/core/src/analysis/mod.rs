//! Readers over dumped features and attention maps: PCA projections,
//! linear and kernel CKA, and Otsu-based attention enhancement.
//!
//! Every function here is pure; inputs are never modified.

mod cka;
mod eigen;
mod image;
mod otsu;
mod pca;

pub use cka::{kernel_cka, linear_cka, summarize, tokens_of, Bandwidth, CkaReport, CkaRow, CkaVariant, Summary};
pub use eigen::symmetric_eigen;
pub use image::{scale_to_u8, write_pgm, write_ppm};
pub use otsu::{attention_map_enhance, otsu, otsu_threshold, Otsu, OTSU_BINS};
pub use pca::{pca_project, Pca};
