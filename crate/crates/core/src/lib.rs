//! Sampling of Gaussian and log-normal random fields on scattered point sets.
//!
//! The covariance matrix `C_ij = rho(x_i, x_j)` is compressed into an
//! H²-matrix `C_p` (tensor Chebyshev interpolation on a geometric cluster
//! tree), and samples are formed as `C_p^{1/2} z` for standard-normal `z`
//! using one of two matrix-free iterations:
//!
//! * a Krylov method that projects onto `span{z, Cz, ..., C^{k-1} z}` and takes
//!   a small dense square root there ([`sqrt_iter::sqrt_apply_krylov`]);
//! * a coupled Newton-Schulz recursion that needs no inner products
//!   ([`sqrt_iter::sqrt_apply_schulz`]).
//!
//! Each H²-matrix product costs `O(p^{2d} N)`, so a sample costs `O(N)` for a
//! fixed iteration budget.
//!
//! ```
//! use h2field::prelude::*;
//!
//! let ps = generate_lowdiscrepancy(8, 2).unwrap();
//! let kernel = Kernel::matern(MaternParams::new(1.0, 0.5, 0.5, 2).unwrap());
//! let tree = build_cluster_tree(&ps, 20).unwrap();
//! let blocks = build_block_tree(&tree, 1.0);
//! let c = H2Matrix::assemble(&kernel, &ps, &blocks, 4).unwrap();
//!
//! let z = vec![1.0; ps.len()];
//! let out = sqrt_apply_krylov(&c, &z, &KrylovOptions::default()).unwrap();
//! assert_eq!(out.y.len(), ps.len());
//! ```

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod config;
pub mod dense;
pub mod error;
pub mod experiments;
pub mod h2;
pub mod kernels;
pub mod linop;
pub mod oracle;
pub mod pointset;
pub mod rng;
pub mod sampler;
pub mod sqrt_iter;

pub use error::{Error, ErrorClass, Result};

/// Commonly used items.
pub mod prelude {
    pub use crate::cluster::{build_block_tree, build_cluster_tree, BlockClusterTree, ClusterTree};
    pub use crate::dense::DenseSymMatrix;
    pub use crate::error::{Error, Result};
    pub use crate::h2::H2Matrix;
    pub use crate::kernels::{assemble_dense, Kernel, MaternParams};
    pub use crate::linop::LinearOperator;
    pub use crate::pointset::{generate_grid, generate_lowdiscrepancy, BBox, PointSet};
    pub use crate::sampler::{sample_field, SampleConfig};
    pub use crate::sqrt_iter::{
        choose_scaling, sqrt_apply_krylov, sqrt_apply_schulz, KrylovOptions, ScalingPolicy,
    };
}

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
mod readme {}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/quickstart.md")]
    mod quickstart {}
    #[doc = include_str!("../../../book/src/points.md")]
    mod points {}
    #[doc = include_str!("../../../book/src/compression.md")]
    mod compression {}
    #[doc = include_str!("../../../book/src/square_roots.md")]
    mod square_roots {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
}
