//! Multivariable Appell sums over positive definite lattices, the formal
//! Fourier expansions they generate, and their non-holomorphic completions.
//!
//! The crate is organised in layers:
//!   * [`ratmat`]: exact rational matrices, Hermite normal forms and
//!     ellipsoid enumeration, the arithmetic substrate for everything else
//!   * [`lattice`]: positive definite lattices with distinguished vector
//!     tuples, their signature `(N, M)` doublings and glue group data
//!   * [`fseries`]: truncated Fourier series in `q` and lattice `w`
//!     variables with exact rational coefficients
//!   * [`appell`]: kernels of the Appell sums, their pole-free variants,
//!     boundary generating functions and a battery of exact functional
//!     identities
//!   * [`errfun`]: iterated Gaussian error functions and their Fourier
//!     counterparts, evaluated to controlled accuracy
//!   * [`completion`]: modular completion of the Appell sums, built either
//!     term by term or from boundary data, plus residual checks under the
//!     modular group

pub mod appell;
pub mod completion;
pub mod errfun;
pub mod fseries;
pub mod lattice;
pub mod ratmat;
