//! Discrete-velocity linear transport on a periodic heterogeneous medium:
//! collision operators and their constrained pseudo-inverses, singular cell
//! problems in the scattering/heterogeneity ratio, effective elliptic
//! operators and diffusion tensors, macroscopic density expansions, a direct
//! solver for the full transport equation on the macro torus, and a harness
//! that sweeps the two small parameters and fits every claimed convergence
//! order.
//!
//! The two small parameters are the mean free path `epsilon` and the cell
//! size `alpha`; everything here lives in the regime
//! `epsilon << alpha << 1`, parametrized by `eta = epsilon / alpha`.
//!
//! Organization mirrors the problem: [`grids`] and [`kernel`] build the
//! discrete setting, [`collision`] the per-cell-point operators,
//! [`cell_transport`] the singular cell operator and its correctors,
//! [`effective`] the homogenized elliptic operators and expansion bundle,
//! [`macroscale`] the macroscopic densities, [`transport_direct`] the full
//! phase-space solve, and [`harness`] the configuration, composite
//! approximant, and convergence studies.

pub mod cell_transport;
pub mod collision;
pub mod effective;
pub mod error;
pub mod fields;
pub mod grids;
pub mod harness;
pub mod kernel;
pub mod macroscale;
pub mod oracle;
pub mod spectral;
pub mod transport_direct;

pub use error::{Error, Result};
