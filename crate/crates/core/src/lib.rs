//! Spatial statistics for multitype marked point patterns.
//!
//! The crate covers the full pipeline used when tissue images are analysed
//! as point patterns: observation-window inference, kernel intensity
//! surfaces (fixed and adaptive bandwidth), segregation and relative-risk
//! inference, inhomogeneous second-order descriptors (K, L, g, F, G, J),
//! Monte Carlo null models, global envelope tests based on extreme rank
//! lengths, cross-sample functional inference, and overdispersed count
//! regression with cluster-robust errors.
//!
//! All Monte Carlo machinery takes an explicit seed and derives one stream
//! per replicate, so results are identical regardless of thread count.

pub mod counts;
pub mod envelopes;
pub mod field;
pub mod geometry;
pub mod groupstats;
pub mod intensity;
pub mod nullmodels;
pub mod pattern;
pub mod report;
pub mod rng;
pub mod secondorder;

/// Library version string (recorded in run manifests).
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
