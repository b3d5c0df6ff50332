//! Dense matrices and the linear-algebra kernels built on them.

mod matrix;
mod spectral;
mod svd;

pub use matrix::Matrix;
pub use spectral::{
    effective_rank, effective_rank_of, energy_ratio, energy_ratios_of, frobenius_norm,
    spectral_norm, stable_rank,
};
pub use svd::{singular_values, truncated_svd, SvdFactors};

pub(crate) use spectral::check_rank;
