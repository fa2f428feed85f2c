//! Transmittance statistics of free-space optical channels under atmospheric
//! turbulence, modeled with the circular-beam approximation.
//!
//! The crate is organized around a single calibrated artifact, the
//! [`pdt::CircularBeamPdt`]: the probability distribution of the random
//! aperture transmittance `η` of a fading optical link. The surrounding
//! modules provide
//!
//! - [`channel`]: physical channel description and derived dimensionless
//!   parameters (wavenumber, Fresnel number, Rytov parameter, coherence
//!   radius);
//! - [`numerics`]: special functions (scaled modified Bessel, Marcum Q),
//!   adaptive quadrature, a deterministic counter-style RNG contract, and a
//!   small box-constrained least-squares solver;
//! - [`pdt`]: the conditional and total circular-beam PDT, its moments, CDF,
//!   and inverse-CDF sampling;
//! - [`matching`]: the two calibration routes (squared-spot-radius moments
//!   and transmittance moments) plus constant-loss handling;
//! - [`analytic`]: weak-turbulence closed forms for the beam and
//!   transmittance moments (Huygens-Kirchhoff phase approximation);
//! - [`simulator`]: the sparse-spectrum phase-screen split-step Monte-Carlo
//!   oracle producing per-realization `(η, x₀, y₀, S)` samples;
//! - [`stats`]: empirical summaries, Kolmogorov-Smirnov distances, and
//!   density estimates used for validation;
//! - [`quantum`]: transfer of nonclassical light properties (Mandel Q,
//!   click-counting Binomial Q_N, quadrature squeezing) through a fading
//!   channel;
//! - [`cli`]: the `turbulux` command-line pipelines.

pub mod analytic;
pub mod channel;
pub mod cli;
pub mod matching;
pub mod numerics;
pub mod pdt;
pub mod quantum;
pub mod simulator;
pub mod stats;
