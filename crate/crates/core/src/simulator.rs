//! Monte-Carlo ground truth: sparse-spectrum phase screens and split-step
//! propagation of the paraxial equation, yielding per-realization
//! transmittance, beam-centroid, and spot-size samples.

use crate::analytic::beam_stats_analytic;
use crate::channel::{derive_channel, ChannelConfig, ChannelError};
use crate::numerics::{integrate, NumericsError, QuadratureSpec, RngStream};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimulatorError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("realization {index} failed: {message}")]
    Realization { index: usize, message: String },
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {message}")]
    Parse { path: String, message: String },
}

/// Numerical discretization of one simulation run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Transverse points per side (power of two, >= 128 for production runs).
    pub n: usize,
    /// Physical window width (m).
    pub window_m: f64,
    /// Number of phase screens along the path.
    pub screens: usize,
    /// Sparse-spectrum modes (log-spaced annuli) per screen.
    pub modes: usize,
    /// Lower spectral cutoff (1/m).
    pub kappa_min: f64,
    /// Upper spectral cutoff (1/m).
    pub kappa_max: f64,
    /// Fraction of the half-window occupied by the absorbing boundary.
    pub mask_fraction: f64,
}

/// Best available estimate of the long-term beam radius, used to size the
/// window: the analytic W_LT when the closed forms apply, otherwise the
/// vacuum Gaussian-optics spot at z = L.
fn long_term_radius_estimate(config: &ChannelConfig) -> f64 {
    let w0 = config.w0();
    let vacuum = {
        let k = 2.0 * std::f64::consts::PI / config.wavelength_m;
        let l = config.length_m;
        let geo = 1.0 - l / config.f0();
        let diff = 2.0 * l / (k * w0 * w0);
        w0 * (geo * geo + diff * diff).sqrt()
    };
    let analytic = beam_stats_analytic(config).map(|b| b.w_lt).unwrap_or(0.0);
    w0.max(vacuum).max(analytic)
}

impl GridSpec {
    /// Default discretization for a channel: window 8x the long-term radius
    /// estimate, 10 screens, spectral range [2 pi / L0, min(2 pi / l0,
    /// 2 pi / (3 dx))].
    pub fn for_channel(
        config: &ChannelConfig,
        n: usize,
        modes: usize,
    ) -> Result<Self, SimulatorError> {
        config.validate()?;
        let window_m = 8.0 * long_term_radius_estimate(config);
        let dx = window_m / n as f64;
        let tau = 2.0 * std::f64::consts::PI;
        let kappa_min = if config.outer_m.is_finite() {
            tau / config.outer_m
        } else {
            tau / (16.0 * window_m)
        };
        let kappa_max = (tau / config.l0_m).min(tau / (3.0 * dx));
        let spec = Self {
            n,
            window_m,
            screens: 10,
            modes,
            kappa_min,
            kappa_max,
            mask_fraction: 0.125,
        };
        spec.validate(config)?;
        Ok(spec)
    }

    /// Grid spacing (m).
    pub fn dx(&self) -> f64 {
        self.window_m / self.n as f64
    }

    pub fn validate(&self, config: &ChannelConfig) -> Result<(), SimulatorError> {
        let fail = |msg: String| Err(SimulatorError::InvalidGrid(msg));
        if !self.n.is_power_of_two() || self.n < 128 {
            return fail(format!("n must be a power of two >= 128, got {}", self.n));
        }
        if !(self.window_m > 0.0) || !self.window_m.is_finite() {
            return fail(format!("window must be > 0, got {}", self.window_m));
        }
        let scale = config.w0().max(long_term_radius_estimate(config));
        if self.window_m < 6.0 * scale {
            return fail(format!(
                "window {} m is below 6x the beam scale {} m",
                self.window_m, scale
            ));
        }
        if self.screens == 0 || self.modes == 0 {
            return fail("screens and modes must be >= 1".into());
        }
        if !(self.kappa_min > 0.0 && self.kappa_max > self.kappa_min) {
            return fail(format!(
                "spectral range [{}, {}] is empty",
                self.kappa_min, self.kappa_max
            ));
        }
        let tau = 2.0 * std::f64::consts::PI;
        if config.outer_m.is_finite() && self.kappa_min > tau / config.outer_m * (1.0 + 1e-9) {
            return fail(format!(
                "kappa_min {} exceeds the outer-scale wavenumber {}",
                self.kappa_min,
                tau / config.outer_m
            ));
        }
        let nyquist_cap = (tau / config.l0_m).min(tau / (3.0 * self.dx()));
        if self.kappa_max < nyquist_cap * (1.0 - 1e-9) {
            return fail(format!(
                "kappa_max {} leaves spectral coverage below the cap {}",
                self.kappa_max, nyquist_cap
            ));
        }
        if self.kappa_max > std::f64::consts::PI / self.dx() {
            return fail(format!(
                "kappa_max {} exceeds the grid Nyquist wavenumber {}",
                self.kappa_max,
                std::f64::consts::PI / self.dx()
            ));
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 0.5) {
            return fail(format!(
                "mask_fraction must be in (0, 0.5), got {}",
                self.mask_fraction
            ));
        }
        Ok(())
    }
}

/// Complex field amplitude on an N x N transverse grid.
#[derive(Debug, Clone)]
pub struct FieldGrid {
    pub data: Vec<Complex64>,
    pub n: usize,
    pub dx: f64,
    /// Axial position (m).
    pub z: f64,
}

impl FieldGrid {
    /// Transverse coordinate of grid index i (m), centered on the axis.
    pub fn coord(&self, i: usize) -> f64 {
        (i as f64 - self.n as f64 / 2.0) * self.dx
    }

    /// Total discrete power (unit input power, <= 1 after mask absorption).
    pub fn power(&self) -> f64 {
        let cell = self.dx * self.dx;
        self.data.iter().map(|u| u.norm_sqr()).sum::<f64>() * cell
    }
}

/// Initial focused-Gaussian boundary condition
/// `u(r; 0) = sqrt(2/(pi W0^2)) exp(-r^2/W0^2 - i k r^2/(2 F0))`.
pub fn initial_field(config: &ChannelConfig, grid: &GridSpec) -> Result<FieldGrid, SimulatorError> {
    config.validate()?;
    grid.validate(config)?;
    let w0 = config.w0();
    let dx = grid.dx();
    if 2.0 * w0 / dx < 16.0 {
        return Err(SimulatorError::InvalidGrid(format!(
            "grid resolves the beam diameter with {:.1} points, need >= 16",
            2.0 * w0 / dx
        )));
    }
    let k = derive_channel(config)?.wavenumber;
    let amp = (2.0 / (std::f64::consts::PI * w0 * w0)).sqrt();
    let curv = k / (2.0 * config.f0());
    let n = grid.n;
    let mut data = vec![Complex64::default(); n * n];
    for i in 0..n {
        let x = (i as f64 - n as f64 / 2.0) * dx;
        for j in 0..n {
            let y = (j as f64 - n as f64 / 2.0) * dx;
            let r2 = x * x + y * y;
            data[i * n + j] =
                Complex64::from_polar(amp * (-r2 / (w0 * w0)).exp(), -curv * r2);
        }
    }
    let field = FieldGrid { data, n, dx, z: 0.0 };
    let power = field.power();
    if (power - 1.0).abs() > 1e-6 {
        return Err(SimulatorError::InvalidGrid(format!(
            "initial discrete power {power} deviates from 1 beyond 1e-6; refine the grid"
        )));
    }
    Ok(field)
}

/// Modified von Karman-Tatarskii spectrum
/// `Phi_n(kappa) = 0.033 Cn^2 exp(-(kappa l0 / 2 pi)^2) / (kappa^2 + 1/L0^2)^(11/6)`.
pub fn spectrum(config: &ChannelConfig, kappa: f64) -> f64 {
    let tau = 2.0 * std::f64::consts::PI;
    let inv_outer2 = if config.outer_m.is_finite() {
        1.0 / (config.outer_m * config.outer_m)
    } else {
        0.0
    };
    0.033 * config.cn2 * (-(kappa * config.l0_m / tau).powi(2)).exp()
        / (kappa * kappa + inv_outer2).powf(11.0 / 6.0)
}

/// One log-spaced spectral annulus of the sparse-spectrum screen sampler.
#[derive(Debug, Clone, Copy)]
struct Annulus {
    lo: f64,
    hi: f64,
    /// Standard deviation of the mode's Rayleigh amplitude parameter: the
    /// annulus carries phase variance sigma^2.
    sigma: f64,
    /// Upper bound of kappa Phi_n(kappa) on [lo, hi] for rejection sampling.
    bound: f64,
}

/// Precomputed per-(channel, slab) screen generator, shared across
/// realizations.
#[derive(Debug, Clone)]
pub struct ScreenSampler {
    annuli: Vec<Annulus>,
    config: ChannelConfig,
}

impl ScreenSampler {
    /// Builds the sampler for slab thickness `dz`: M geometric annuli on
    /// [kappa_min, kappa_max], each holding the phase variance
    /// `4 pi^2 k^2 dz int_annulus Phi_n(kappa) kappa dkappa`.
    pub fn new(config: &ChannelConfig, dz: f64, grid: &GridSpec) -> Result<Self, SimulatorError> {
        if !(dz > 0.0) {
            return Err(SimulatorError::InvalidGrid(format!(
                "slab thickness must be > 0, got {dz}"
            )));
        }
        let k = derive_channel(config)?.wavenumber;
        let prefactor = 4.0 * std::f64::consts::PI.powi(2) * k * k * dz;
        let ratio = (grid.kappa_max / grid.kappa_min).powf(1.0 / grid.modes as f64);
        let spec = QuadratureSpec::new(1e-30, 1e-10, 400);
        // kappa Phi_n peaks at kappa = sqrt(3/8)/L0 and decreases beyond, so
        // the maximum on an interval is attained at an endpoint or there.
        let kappa_peak = if config.outer_m.is_finite() {
            (3.0f64 / 8.0).sqrt() / config.outer_m
        } else {
            0.0
        };
        let weight = |kappa: f64| kappa * spectrum(config, kappa);
        let mut annuli = Vec::with_capacity(grid.modes);
        let mut lo = grid.kappa_min;
        for m in 0..grid.modes {
            let hi = if m + 1 == grid.modes {
                grid.kappa_max
            } else {
                lo * ratio
            };
            let variance = prefactor * integrate(weight, lo, hi, &spec)?.value;
            let mut bound = weight(lo).max(weight(hi));
            if kappa_peak > lo && kappa_peak < hi {
                bound = bound.max(weight(kappa_peak));
            }
            annuli.push(Annulus {
                lo,
                hi,
                sigma: variance.max(0.0).sqrt(),
                bound,
            });
            lo = hi;
        }
        Ok(Self {
            annuli,
            config: config.clone(),
        })
    }

    /// Total phase variance carried by the screen.
    pub fn total_variance(&self) -> f64 {
        self.annuli.iter().map(|a| a.sigma * a.sigma).sum()
    }

    /// Draws one phase screen `phi(r) = sum_m A_m cos(kappa_m . r + theta_m)`
    /// on the grid: per annulus one wavevector with density proportional to
    /// Phi_n, Rayleigh amplitude, uniform orientation and phase.
    pub fn sample(&self, n: usize, dx: f64, rng: &mut RngStream) -> Vec<f64> {
        let mut phi = vec![0.0f64; n * n];
        let tau = 2.0 * std::f64::consts::PI;
        let x0 = -(n as f64) / 2.0 * dx;
        let mut wr = vec![0.0f64; n];
        let mut wi = vec![0.0f64; n];
        let mut vr = vec![0.0f64; n];
        let mut vi = vec![0.0f64; n];
        for a in &self.annuli {
            if a.sigma == 0.0 || a.bound == 0.0 {
                continue;
            }
            // Rejection-sample the magnitude with density ~ kappa Phi_n.
            let kappa = loop {
                let cand = a.lo + (a.hi - a.lo) * rng.uniform();
                if rng.uniform() * a.bound <= cand * spectrum(&self.config, cand) {
                    break cand;
                }
            };
            let orient = tau * rng.uniform();
            let (kx, ky) = (kappa * orient.cos(), kappa * orient.sin());
            let amp = a.sigma * (-2.0 * rng.uniform().ln()).sqrt();
            let theta = tau * rng.uniform();
            // phi_ij += Re[(A e^(i(kx x_i + theta))) e^(i ky y_j)], built from
            // two rotation recurrences.
            let step_x = Complex64::from_polar(1.0, kx * dx);
            let step_y = Complex64::from_polar(1.0, ky * dx);
            let mut w = Complex64::from_polar(amp, kx * x0 + theta);
            let mut v = Complex64::from_polar(1.0, ky * x0);
            for i in 0..n {
                wr[i] = w.re;
                wi[i] = w.im;
                vr[i] = v.re;
                vi[i] = v.im;
                w *= step_x;
                v *= step_y;
            }
            for i in 0..n {
                let (cr, ci) = (wr[i], wi[i]);
                let row = &mut phi[i * n..(i + 1) * n];
                for j in 0..n {
                    row[j] += cr * vr[j] - ci * vi[j];
                }
            }
        }
        phi
    }
}

/// Result of a full-path propagation.
#[derive(Debug)]
pub struct Propagation {
    pub field: FieldGrid,
    /// Power removed by the absorbing boundary over the whole path.
    pub mask_absorbed: f64,
    /// True when more than 1% of the instantaneous power entered the mask
    /// band during any step (energy reaching the window edge: enlarge it).
    pub aliasing_warning: bool,
}

/// Precomputed propagation machinery for one (channel, grid) pair: FFT plans,
/// separable vacuum transfer factors, boundary mask, and screen sampler.
pub struct Propagator {
    config: ChannelConfig,
    grid: GridSpec,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    /// Separable half-step factor exp(-i kappa_x^2 dz/(4k)) per FFT index.
    half_step: Vec<Complex64>,
    /// Separable boundary mask per coordinate index.
    mask: Vec<f64>,
    sampler: ScreenSampler,
}

impl Propagator {
    pub fn new(config: &ChannelConfig, grid: &GridSpec) -> Result<Self, SimulatorError> {
        config.validate()?;
        grid.validate(config)?;
        let n = grid.n;
        let dx = grid.dx();
        let k = derive_channel(config)?.wavenumber;
        let dz = config.length_m / grid.screens as f64;
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let ifft = planner.plan_fft_inverse(n);
        let tau = 2.0 * std::f64::consts::PI;
        let half_step = (0..n)
            .map(|i| {
                let f = if i < n / 2 {
                    i as f64
                } else {
                    i as f64 - n as f64
                };
                let kappa = tau * f / (n as f64 * dx);
                Complex64::from_polar(1.0, -kappa * kappa * dz / (4.0 * k))
            })
            .collect();
        let half = grid.window_m / 2.0;
        let edge = half * (1.0 - grid.mask_fraction);
        let mask = (0..n)
            .map(|i| {
                let x = ((i as f64 - n as f64 / 2.0) * dx).abs();
                if x <= edge {
                    1.0
                } else {
                    let t = (x - edge) / (half - edge);
                    (-30.0 * t.powi(4)).exp()
                }
            })
            .collect();
        let sampler = ScreenSampler::new(config, dz, grid)?;
        Ok(Self {
            config: config.clone(),
            grid: *grid,
            fft,
            ifft,
            half_step,
            mask,
            sampler,
        })
    }

    pub fn sampler(&self) -> &ScreenSampler {
        &self.sampler
    }

    fn fft2(&self, data: &mut [Complex64], inverse: bool) {
        let n = self.grid.n;
        let plan = if inverse { &self.ifft } else { &self.fft };
        for row in data.chunks_exact_mut(n) {
            plan.process(row);
        }
        transpose_square(data, n);
        for row in data.chunks_exact_mut(n) {
            plan.process(row);
        }
        transpose_square(data, n);
        if inverse {
            let scale = 1.0 / (n * n) as f64;
            for u in data.iter_mut() {
                *u *= scale;
            }
        }
    }

    /// One vacuum half-step in the spectral domain.
    fn vacuum_half_step(&self, data: &mut [Complex64]) {
        let n = self.grid.n;
        self.fft2(data, false);
        for i in 0..n {
            let hx = self.half_step[i];
            let row = &mut data[i * n..(i + 1) * n];
            for j in 0..n {
                row[j] *= hx * self.half_step[j];
            }
        }
        self.fft2(data, true);
    }

    /// Applies the absorbing mask; returns (power before, power in the mask
    /// band before, power after) in discrete units.
    fn apply_mask(&self, data: &mut [Complex64]) -> (f64, f64, f64) {
        let n = self.grid.n;
        let (mut before, mut band, mut after) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let mi = self.mask[i];
            let row = &mut data[i * n..(i + 1) * n];
            for j in 0..n {
                let m = mi * self.mask[j];
                let p = row[j].norm_sqr();
                before += p;
                if m < 1.0 {
                    band += p;
                }
                row[j] *= m;
                after += p * m * m;
            }
        }
        (before, band, after)
    }

    /// Split-step propagation through `screens` slabs: half-step, phase
    /// screen, half-step, absorbing mask, repeated per slab.
    pub fn propagate(
        &self,
        field: &FieldGrid,
        rng: &mut RngStream,
    ) -> Result<Propagation, SimulatorError> {
        let n = self.grid.n;
        if field.n != n || (field.dx - self.grid.dx()).abs() > 1e-12 * self.grid.dx() {
            return Err(SimulatorError::InvalidGrid(
                "field does not match the propagator grid".into(),
            ));
        }
        let mut data = field.data.clone();
        let dz = self.config.length_m / self.grid.screens as f64;
        let cell = field.dx * field.dx;
        let mut absorbed = 0.0;
        let mut warn = false;
        for _ in 0..self.grid.screens {
            self.vacuum_half_step(&mut data);
            if self.config.cn2 > 0.0 {
                let phi = self.sampler.sample(n, field.dx, rng);
                for (u, p) in data.iter_mut().zip(phi.iter()) {
                    *u *= Complex64::from_polar(1.0, *p);
                }
            }
            self.vacuum_half_step(&mut data);
            let (before, band, after) = self.apply_mask(&mut data);
            absorbed += (before - after) * cell;
            if band > 0.01 * before {
                warn = true;
            }
        }
        if data.iter().any(|u| !u.re.is_finite() || !u.im.is_finite()) {
            return Err(SimulatorError::InvalidGrid(
                "propagation produced non-finite field values".into(),
            ));
        }
        Ok(Propagation {
            field: FieldGrid {
                data,
                n,
                dx: field.dx,
                z: field.z + dz * self.grid.screens as f64,
            },
            mask_absorbed: absorbed,
            aliasing_warning: warn,
        })
    }
}

fn transpose_square(data: &mut [Complex64], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            data.swap(i * n + j, j * n + i);
        }
    }
}

/// Per-realization observables of the received intensity profile.
#[derive(Debug, Clone, Copy)]
pub struct Observables {
    /// Transmittance through the centered circular aperture (unit input
    /// power), clipped to [0, 1].
    pub eta: f64,
    /// Intensity centroid (m).
    pub x0: f64,
    pub y0: f64,
    /// Squared spot radius from the x-axis second moment, as defined.
    pub s_x: f64,
    /// Same from the y axis; (s_x + s_y)/2 is the isotropic variant.
    pub s_y: f64,
}

impl Observables {
    /// The printed single-axis definition.
    pub fn s(&self) -> f64 {
        self.s_x
    }

    /// Isotropic average, useful for variance reduction.
    pub fn s_iso(&self) -> f64 {
        0.5 * (self.s_x + self.s_y)
    }
}

/// Measures (eta, x0, y0, S) of a received field for aperture radius `a`.
/// The aperture boundary is antialiased with 4x4 supersampling.
pub fn measure_observables(field: &FieldGrid, a: f64) -> Result<Observables, SimulatorError> {
    let n = field.n;
    let dx = field.dx;
    if !(a > 0.0) || a > field.coord(n - 1).abs().max(field.coord(0).abs()) {
        return Err(SimulatorError::InvalidGrid(format!(
            "aperture radius {a} m does not fit the window"
        )));
    }
    let cell = dx * dx;
    let mut power = 0.0;
    let mut mx = 0.0;
    let mut my = 0.0;
    let mut eta = 0.0;
    let corner = std::f64::consts::SQRT_2 * dx / 2.0;
    for i in 0..n {
        let x = field.coord(i);
        for j in 0..n {
            let y = field.coord(j);
            let p = field.data[i * n + j].norm_sqr() * cell;
            power += p;
            mx += x * p;
            my += y * p;
            let r = x.hypot(y);
            if r <= a - corner {
                eta += p;
            } else if r < a + corner {
                // Boundary pixel: fraction of 4x4 subcells inside.
                let mut inside = 0u32;
                for si in 0..4 {
                    for sj in 0..4 {
                        let sx = x + (si as f64 - 1.5) * dx / 4.0;
                        let sy = y + (sj as f64 - 1.5) * dx / 4.0;
                        if sx.hypot(sy) <= a {
                            inside += 1;
                        }
                    }
                }
                eta += p * inside as f64 / 16.0;
            }
        }
    }
    if !(-1e-6..=1.0 + 1e-6).contains(&eta) {
        return Err(SimulatorError::InvalidGrid(format!(
            "transmittance {eta} out of [0, 1] beyond tolerance"
        )));
    }
    if power <= 0.0 {
        return Err(SimulatorError::InvalidGrid("field carries no power".into()));
    }
    let x0 = mx / power;
    let y0 = my / power;
    let (mut sx, mut sy) = (0.0, 0.0);
    for i in 0..n {
        let x = field.coord(i);
        for j in 0..n {
            let y = field.coord(j);
            let p = field.data[i * n + j].norm_sqr() * cell;
            sx += (x - x0) * (x - x0) * p;
            sy += (y - y0) * (y - y0) * p;
        }
    }
    Ok(Observables {
        eta: eta.clamp(0.0, 1.0),
        x0,
        y0,
        s_x: 4.0 * sx / power,
        s_y: 4.0 * sy / power,
    })
}

/// Monte-Carlo sample of per-realization observables, with everything needed
/// to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub eta: Vec<f64>,
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub s: Vec<f64>,
    pub seed: u64,
    pub aperture_m: f64,
    pub grid: GridSpec,
    pub config: ChannelConfig,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    seed: u64,
    aperture_m: f64,
    realizations: usize,
    grid: GridSpec,
    config: ChannelConfig,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    fn validate(&self) -> Result<(), SimulatorError> {
        let n = self.eta.len();
        if self.x0.len() != n || self.y0.len() != n || self.s.len() != n {
            return Err(SimulatorError::Parse {
                path: "<sample set>".into(),
                message: "column lengths differ".into(),
            });
        }
        if self.eta.iter().any(|&e| !(0.0..=1.0).contains(&e)) {
            return Err(SimulatorError::Parse {
                path: "<sample set>".into(),
                message: "transmittance out of [0, 1]".into(),
            });
        }
        if self.s.iter().any(|&s| !(s > 0.0)) {
            return Err(SimulatorError::Parse {
                path: "<sample set>".into(),
                message: "nonpositive squared spot radius".into(),
            });
        }
        Ok(())
    }

    fn sidecar_path(csv: &Path) -> std::path::PathBuf {
        csv.with_extension("json")
    }

    /// Persists as CSV (idx, eta, x0_m, y0_m, S_m2) plus a JSON sidecar with
    /// seed, grid, and channel snapshot. Floats use the shortest
    /// round-trippable decimal form, so reload is bit-exact.
    pub fn save(&self, csv_path: &Path) -> Result<(), SimulatorError> {
        let io_err = |path: &Path, source| SimulatorError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut text = String::from("idx,eta,x0_m,y0_m,S_m2\n");
        for i in 0..self.len() {
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                i, self.eta[i], self.x0[i], self.y0[i], self.s[i]
            ));
        }
        std::fs::write(csv_path, text).map_err(|e| io_err(csv_path, e))?;
        let sidecar = Sidecar {
            seed: self.seed,
            aperture_m: self.aperture_m,
            realizations: self.len(),
            grid: self.grid,
            config: self.config.clone(),
        };
        let side_path = Self::sidecar_path(csv_path);
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        std::fs::write(&side_path, json).map_err(|e| io_err(&side_path, e))
    }

    pub fn load(csv_path: &Path) -> Result<Self, SimulatorError> {
        let io_err = |path: &Path, source| SimulatorError::Io {
            path: path.display().to_string(),
            source,
        };
        let parse_err = |message: String| SimulatorError::Parse {
            path: csv_path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(csv_path).map_err(|e| io_err(csv_path, e))?;
        let side_path = Self::sidecar_path(csv_path);
        let side_text = std::fs::read_to_string(&side_path).map_err(|e| io_err(&side_path, e))?;
        let sidecar: Sidecar =
            serde_json::from_str(&side_text).map_err(|e| SimulatorError::Parse {
                path: side_path.display().to_string(),
                message: e.to_string(),
            })?;
        let mut lines = text.lines();
        match lines.next() {
            Some("idx,eta,x0_m,y0_m,S_m2") => {}
            other => return Err(parse_err(format!("unexpected header {other:?}"))),
        }
        let (mut eta, mut x0, mut y0, mut s) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (lineno, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(parse_err(format!("line {}: expected 5 fields", lineno + 2)));
            }
            let get = |idx: usize| -> Result<f64, SimulatorError> {
                fields[idx]
                    .parse::<f64>()
                    .map_err(|e| parse_err(format!("line {}: {e}", lineno + 2)))
            };
            eta.push(get(1)?);
            x0.push(get(2)?);
            y0.push(get(3)?);
            s.push(get(4)?);
        }
        if eta.len() != sidecar.realizations {
            return Err(parse_err(format!(
                "CSV has {} rows, sidecar says {}",
                eta.len(),
                sidecar.realizations
            )));
        }
        let set = SampleSet {
            eta,
            x0,
            y0,
            s,
            seed: sidecar.seed,
            aperture_m: sidecar.aperture_m,
            grid: sidecar.grid,
            config: sidecar.config,
        };
        set.validate()?;
        Ok(set)
    }
}

fn run_pool<R: Send>(
    workers: usize,
    job: impl Fn() -> Result<Vec<R>, SimulatorError> + Send,
) -> Result<Vec<R>, SimulatorError> {
    if workers == 0 {
        job()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| SimulatorError::InvalidGrid(format!("thread pool: {e}")))?
            .install(job)
    }
}

/// Runs `n` independent realizations, measuring the transmittance at each of
/// the given aperture radii from the same received field. Realization `i`
/// draws from stream `(seed, i)`, so results are bit-identical for any
/// worker count (`workers = 0` uses the global default pool).
pub fn run_ensemble_multi(
    config: &ChannelConfig,
    grid: &GridSpec,
    n: usize,
    seed: u64,
    workers: usize,
    apertures: &[f64],
) -> Result<Vec<SampleSet>, SimulatorError> {
    if n == 0 || apertures.is_empty() {
        return Err(SimulatorError::InvalidGrid(
            "need at least one realization and one aperture".into(),
        ));
    }
    let input = initial_field(config, grid)?;
    let propagator = Propagator::new(config, grid)?;
    let rows: Vec<Vec<Observables>> = run_pool(workers, || {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = RngStream::new(seed, i as u64);
                let run = propagator
                    .propagate(&input, &mut rng)
                    .map_err(|e| SimulatorError::Realization {
                        index: i,
                        message: e.to_string(),
                    })?;
                apertures
                    .iter()
                    .map(|&a| {
                        measure_observables(&run.field, a).map_err(|e| {
                            SimulatorError::Realization {
                                index: i,
                                message: e.to_string(),
                            }
                        })
                    })
                    .collect()
            })
            .collect()
    })?;
    Ok(apertures
        .iter()
        .enumerate()
        .map(|(ai, &a)| {
            let mut set = SampleSet {
                eta: Vec::with_capacity(n),
                x0: Vec::with_capacity(n),
                y0: Vec::with_capacity(n),
                s: Vec::with_capacity(n),
                seed,
                aperture_m: a,
                grid: *grid,
                config: config.clone(),
            };
            for row in &rows {
                let o = row[ai];
                set.eta.push(o.eta);
                set.x0.push(o.x0);
                set.y0.push(o.y0);
                set.s.push(o.s());
            }
            set
        })
        .collect())
}

/// Single-aperture ensemble using the channel's configured aperture.
pub fn run_ensemble(
    config: &ChannelConfig,
    grid: &GridSpec,
    n: usize,
    seed: u64,
    workers: usize,
) -> Result<SampleSet, SimulatorError> {
    let mut sets = run_ensemble_multi(config, grid, n, seed, workers, &[config.aperture_m])?;
    Ok(sets.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Small, fast grid for the reference channel at the given length. The
    /// n >= 128 production floor is relaxed here to keep tests quick; the
    /// physics is resolution-checked by the dedicated convergence gates.
    fn test_grid(config: &ChannelConfig, n: usize, modes: usize) -> GridSpec {
        let mut g = GridSpec::for_channel(config, 256, modes).unwrap();
        g.n = n;
        let tau = 2.0 * std::f64::consts::PI;
        g.kappa_max = (tau / config.l0_m).min(tau / (3.0 * g.dx()));
        g
    }

    #[test]
    fn initial_field_power_and_spot() {
        let cfg = ChannelConfig::reference(1000.0);
        let grid = GridSpec::for_channel(&cfg, 256, 64).unwrap();
        let f = initial_field(&cfg, &grid).unwrap();
        assert!((f.power() - 1.0).abs() < 1e-6);
        let obs = measure_observables(&f, 3.0 * cfg.w0()).unwrap();
        let w02 = cfg.w0() * cfg.w0();
        assert!((obs.s_x - w02).abs() / w02 < 5e-3, "S {} vs {}", obs.s_x, w02);
        assert!((obs.s_y - w02).abs() / w02 < 5e-3);
        assert!(obs.x0.abs() < 1e-9 && obs.y0.abs() < 1e-9);
    }

    #[test]
    fn vacuum_propagation_focuses_and_conserves_power() {
        let mut cfg = ChannelConfig::reference(1000.0);
        cfg.cn2 = 0.0;
        let grid = GridSpec::for_channel(&cfg, 256, 64).unwrap();
        let f = initial_field(&cfg, &grid).unwrap();
        let prop = Propagator::new(&cfg, &grid).unwrap();
        let mut rng = RngStream::new(1, 0);
        let out = prop.propagate(&f, &mut rng).unwrap();
        assert!(!out.aliasing_warning);
        assert!(out.mask_absorbed < 1e-4, "mask loss {}", out.mask_absorbed);
        // Unitary spectral steps: power + absorbed = 1 to 1e-6.
        assert!(
            (out.field.power() + out.mask_absorbed - 1.0).abs() < 1e-6,
            "power {} absorbed {}",
            out.field.power(),
            out.mask_absorbed
        );
        // Focused beam: spot at L is W0^2/Omega^2 (= W0^2 here).
        let om = derive_channel(&cfg).unwrap().fresnel;
        let expected = cfg.w0().powi(2) / (om * om);
        let obs = measure_observables(&out.field, 3.0 * cfg.w0()).unwrap();
        assert!(
            (obs.s_x - expected).abs() / expected < 0.01,
            "S {} vs {}",
            obs.s_x,
            expected
        );
    }

    #[test]
    fn screens_have_zero_mean() {
        let cfg = ChannelConfig::reference(1000.0);
        let grid = test_grid(&cfg, 64, 64);
        let sampler = ScreenSampler::new(&cfg, cfg.length_m / 10.0, &grid).unwrap();
        let n_screens = 1000;
        let probes = [0usize, 5, 11, 17, 23, 29, 35, 41, 47, 53];
        let mut sums = [0.0f64; 10];
        let mut sq = [0.0f64; 10];
        let mut rng = RngStream::new(42, 0);
        for _ in 0..n_screens {
            let phi = sampler.sample(grid.n, grid.dx(), &mut rng);
            for (t, &p) in probes.iter().enumerate() {
                let v = phi[p * grid.n + p];
                sums[t] += v;
                sq[t] += v * v;
            }
        }
        for t in 0..10 {
            let mean = sums[t] / n_screens as f64;
            let var = sq[t] / n_screens as f64 - mean * mean;
            let se = (var / n_screens as f64).sqrt();
            assert!(mean.abs() < 4.0 * se, "probe {t}: mean {mean}, se {se}");
        }
    }

    /// J_0 via its integral representation, as an independent oracle.
    fn bessel_j0(x: f64) -> f64 {
        let spec = QuadratureSpec::new(1e-11, 1e-11, 2000);
        integrate(|t| (x * t.sin()).cos(), 0.0, std::f64::consts::PI, &spec)
            .unwrap()
            .value
            / std::f64::consts::PI
    }

    #[test]
    fn structure_function_matches_spectrum() {
        let cfg = ChannelConfig::reference(1000.0);
        let grid = test_grid(&cfg, 64, 128);
        let dz = cfg.length_m / 10.0;
        let sampler = ScreenSampler::new(&cfg, dz, &grid).unwrap();
        let n = grid.n;
        let dx = grid.dx();
        let k = derive_channel(&cfg).unwrap().wavenumber;
        // Empirical D(r) along x at a few separations, averaged over rows.
        let seps = [4usize, 6, 8];
        let mut acc = [0.0f64; 3];
        let mut count = [0usize; 3];
        let screens = 1500;
        let mut rng = RngStream::new(7, 0);
        for _ in 0..screens {
            let phi = sampler.sample(n, dx, &mut rng);
            for (si, &sep) in seps.iter().enumerate() {
                for i in (0..n - sep).step_by(7) {
                    for j in (0..n).step_by(7) {
                        let d = phi[(i + sep) * n + j] - phi[i * n + j];
                        acc[si] += d * d;
                        count[si] += 1;
                    }
                }
            }
        }
        // Theory over the same truncated spectral band:
        // D(r) = 8 pi^2 k^2 dz int (1 - J_0(kappa r)) Phi_n kappa dkappa.
        let spec = QuadratureSpec::new(1e-30, 1e-9, 2000);
        for (si, &sep) in seps.iter().enumerate() {
            let r = sep as f64 * dx;
            let theory = 8.0
                * std::f64::consts::PI.powi(2)
                * k
                * k
                * dz
                * integrate(
                    |kappa| (1.0 - bessel_j0(kappa * r)) * spectrum(&cfg, kappa) * kappa,
                    grid.kappa_min,
                    grid.kappa_max,
                    &spec,
                )
                .unwrap()
                .value;
            let empirical = acc[si] / count[si] as f64;
            assert!(
                (empirical - theory).abs() / theory < 0.05,
                "r = {r}: empirical {empirical} vs theory {theory}"
            );
        }
    }

    #[test]
    fn screen_determinism() {
        let cfg = ChannelConfig::reference(1000.0);
        let grid = test_grid(&cfg, 64, 64);
        let sampler = ScreenSampler::new(&cfg, 100.0, &grid).unwrap();
        let a = sampler.sample(grid.n, grid.dx(), &mut RngStream::new(3, 9));
        let b = sampler.sample(grid.n, grid.dx(), &mut RngStream::new(3, 9));
        assert_eq!(a, b);
        let c = sampler.sample(grid.n, grid.dx(), &mut RngStream::new(3, 10));
        assert_ne!(a, c);
    }

    #[test]
    fn tilt_screen_displaces_centroid() {
        let mut cfg = ChannelConfig::reference(1000.0);
        cfg.cn2 = 0.0;
        let grid = GridSpec::for_channel(&cfg, 256, 64).unwrap();
        let mut f = initial_field(&cfg, &grid).unwrap();
        // Pure tilt phi = g x at z = 0; paraxial displacement after the full
        // path is (L/k) g.
        let k = derive_channel(&cfg).unwrap().wavenumber;
        let g = 0.002 * k / cfg.length_m; // 2 mm displacement
        let n = grid.n;
        for i in 0..n {
            let x = f.coord(i);
            let rot = Complex64::from_polar(1.0, g * x);
            for j in 0..n {
                f.data[i * n + j] *= rot;
            }
        }
        let prop = Propagator::new(&cfg, &grid).unwrap();
        let out = prop.propagate(&f, &mut RngStream::new(1, 0)).unwrap();
        let obs = measure_observables(&out.field, 3.0 * cfg.w0()).unwrap();
        let expected = cfg.length_m / k * g;
        assert!(
            (obs.x0 - expected).abs() / expected < 0.05,
            "x0 {} vs {}",
            obs.x0,
            expected
        );
        assert!(obs.y0.abs() < 0.05 * expected);
    }

    #[test]
    fn synthetic_gaussian_observables() {
        let cfg = ChannelConfig::reference(1000.0);
        let grid = GridSpec::for_channel(&cfg, 256, 64).unwrap();
        let w = 1.3 * cfg.w0();
        let n = grid.n;
        let dx = grid.dx();
        let amp = (2.0 / (std::f64::consts::PI * w * w)).sqrt();
        let make = |shift: f64| {
            let mut data = vec![Complex64::default(); n * n];
            for i in 0..n {
                let x = (i as f64 - n as f64 / 2.0) * dx - shift;
                for j in 0..n {
                    let y = (j as f64 - n as f64 / 2.0) * dx;
                    data[i * n + j] =
                        Complex64::new(amp * (-(x * x + y * y) / (w * w)).exp(), 0.0);
                }
            }
            FieldGrid { data, n, dx, z: 0.0 }
        };
        let centered = make(0.0);
        let a = 0.012;
        let obs = measure_observables(&centered, a).unwrap();
        let expected_eta = -(-2.0 * a * a / (w * w)).exp_m1();
        assert!(
            (obs.eta - expected_eta).abs() / expected_eta < 5e-3,
            "eta {} vs {}",
            obs.eta,
            expected_eta
        );
        assert!((obs.s_x - w * w).abs() / (w * w) < 5e-3);
        // Translation: centroid moves, spot unchanged.
        let shift = 5.0 * dx;
        let moved = measure_observables(&make(shift), a).unwrap();
        assert!((moved.x0 - shift).abs() < 0.02 * shift);
        assert!((moved.s_x - obs.s_x).abs() / obs.s_x < 1e-3);
    }

    #[test]
    fn ensemble_deterministic_across_workers() {
        let mut cfg = ChannelConfig::reference(500.0);
        cfg.cn2 = 5e-15; // strong enough that screens matter
        let grid = test_grid(&cfg, 128, 32);
        let one = run_ensemble(&cfg, &grid, 6, 11, 1).unwrap();
        let four = run_ensemble(&cfg, &grid, 6, 11, 4).unwrap();
        assert_eq!(one.eta, four.eta);
        assert_eq!(one.x0, four.x0);
        assert_eq!(one.s, four.s);
        // Multi-aperture run shares fields: first aperture equals the
        // channel-aperture run.
        let multi =
            run_ensemble_multi(&cfg, &grid, 6, 11, 1, &[cfg.aperture_m, 0.02]).unwrap();
        assert_eq!(multi[0].eta, one.eta);
        assert!(multi[1].eta.iter().zip(&multi[0].eta).all(|(b, a)| b >= a));
    }

    #[test]
    fn sample_set_roundtrip_is_bit_exact() {
        let mut cfg = ChannelConfig::reference(500.0);
        cfg.cn2 = 5e-15;
        let grid = test_grid(&cfg, 128, 32);
        let set = run_ensemble(&cfg, &grid, 4, 99, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.csv");
        set.save(&path).unwrap();
        let back = SampleSet::load(&path).unwrap();
        assert_eq!(set, back);
    }

    #[test]
    fn grid_validation_rejects_bad_specs() {
        let cfg = ChannelConfig::reference(1000.0);
        let good = GridSpec::for_channel(&cfg, 256, 64).unwrap();
        let mut bad = good;
        bad.n = 100;
        assert!(bad.validate(&cfg).is_err());
        let mut bad = good;
        bad.window_m = cfg.w0();
        assert!(bad.validate(&cfg).is_err());
        let mut bad = good;
        bad.kappa_max = bad.kappa_min / 2.0;
        assert!(bad.validate(&cfg).is_err());
    }
}
