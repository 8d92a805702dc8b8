//! Monte Carlo laboratory for level-set percolation of the Gaussian free field
//! on `Z^d` (`d >= 3`), random interlacements, and the couplings between them
//! on the metric (cable) graph.
//!
//! The crate is organised bottom-up:
//!
//! * [`lattice`]: boxes, edges, cable points, and indexing.
//! * [`greens`]: the full-space Green function `g = (2d I - A)^{-1}`, killed
//!   Green functions, equilibrium measures and capacities.
//! * [`gff`]: Gaussian free field samplers (spectral and dense), the Markov
//!   decomposition, and conditional sampling.
//! * [`cable`]: Brownian-bridge formulas on cable edges and edge-mark sampling.
//! * [`interlace`]: random interlacement sampling on finite windows, local
//!   times, exact Laplace functionals, and growth/connectivity experiments.
//! * [`iso`]: the second Ray-Knight-type identity between `(phi + sqrt(2u))^2/2`
//!   and `ell + gamma^2/2`, with the sign-rule coupling.
//! * [`perc`]: level-set configurations, cluster labelling, crossing curves,
//!   critical-level estimation, and the local sign-flip experiment.
//! * [`renorm`]: the multi-scale event recursion, seed events, bad star-paths,
//!   cascade witnesses, and decoupling checks.
//!
//! All randomness flows through [`rng::Stream`], a counter-based splittable
//! seed tree, so every experiment is reproducible from a single `u64`.

pub mod cable;
pub mod error;
pub mod gff;
pub mod greens;
pub mod interlace;
pub mod iso;
pub mod lattice;
pub mod perc;
pub mod renorm;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
