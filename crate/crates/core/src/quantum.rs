//! Transfer of nonclassical light properties through a fading channel:
//! Mandel Q, click-counting Binomial Q_N, and quadrature squeezing of
//! displaced squeezed states under a random transmittance.

use crate::numerics::gauss_legendre;
use crate::pdt::{CircularBeamPdt, PdtError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QuantumError {
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("cutoff {cutoff} too small: needs >= {required} and tail mass {tail:e} >= 1e-10")]
    CutoffTooSmall {
        cutoff: usize,
        required: usize,
        tail: f64,
    },
    #[error("invalid transmittance averager: {0}")]
    InvalidAverager(String),
    #[error("mean transmittance is zero")]
    ZeroMeanTransmittance,
    #[error(transparent)]
    Pdt(#[from] PdtError),
}

/// Pure displaced squeezed state D(alpha0) S(chi) |0> with real amplitude and
/// amplitude-squeezed orientation (x-quadrature variance reduced for
/// chi > 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianInputState {
    alpha0: f64,
    chi: f64,
}

impl GaussianInputState {
    pub fn new(alpha0: f64, chi: f64) -> Result<Self, QuantumError> {
        if !(alpha0 >= 0.0) || !alpha0.is_finite() || !(chi >= 0.0) || !chi.is_finite() {
            return Err(QuantumError::InvalidState(format!(
                "need alpha0 >= 0 and chi >= 0, got alpha0 = {alpha0}, chi = {chi}"
            )));
        }
        Ok(Self { alpha0, chi })
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    pub fn chi(&self) -> f64 {
        self.chi
    }

    /// Smallest admissible Fock cutoff for this state.
    pub fn min_cutoff(&self) -> usize {
        let n = self.mean_n();
        (4.0 * n + 10.0 * n.sqrt() + 20.0).ceil() as usize
    }

    fn mean_n(&self) -> f64 {
        self.alpha0 * self.alpha0 + self.chi.sinh().powi(2)
    }
}

/// First and second photon-number and x-quadrature moments of the input;
/// x is normalized so the vacuum variance is 1/2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputMoments {
    pub mean_n: f64,
    pub var_n: f64,
    /// Mandel Q = var_n / mean_n - 1; None for the vacuum state.
    pub mandel_q: Option<f64>,
    /// <x> = sqrt(2) alpha0.
    pub mean_x: f64,
    /// Normally ordered quadrature variance <:dx^2:> = (e^(-2 chi) - 1)/2.
    pub x_var_normal: f64,
}

pub fn input_gaussian_moments(state: &GaussianInputState) -> InputMoments {
    let (a2, chi) = (state.alpha0 * state.alpha0, state.chi);
    let (sh, ch) = (chi.sinh(), chi.cosh());
    let mean_n = a2 + sh * sh;
    let var_n = a2 * (-2.0 * chi).exp() + 2.0 * sh * sh * ch * ch;
    InputMoments {
        mean_n,
        var_n,
        mandel_q: if mean_n > 0.0 {
            Some(var_n / mean_n - 1.0)
        } else {
            None
        },
        mean_x: std::f64::consts::SQRT_2 * state.alpha0,
        x_var_normal: ((-2.0 * chi).exp() - 1.0) / 2.0,
    }
}

/// Photon-number distribution of the state up to `cutoff` (inclusive),
/// normalized against the full norm so the omitted tail mass is < 1e-10.
/// Amplitudes come from the eigen-relation
/// `(a cosh(chi) + a^dag sinh(chi)) |psi> = alpha0 e^chi |psi>`, i.e.
/// `c_{n+1} = (alpha0 e^chi c_n - sinh(chi) sqrt(n) c_{n-1}) /
/// (cosh(chi) sqrt(n+1))`, with rescaling against overflow.
pub fn photon_distribution(
    state: &GaussianInputState,
    cutoff: usize,
) -> Result<Vec<f64>, QuantumError> {
    let required = state.min_cutoff();
    if cutoff < required {
        return Err(QuantumError::CutoffTooSmall {
            cutoff,
            required,
            tail: f64::NAN,
        });
    }
    // Extend past the cutoff so the discarded mass can be estimated; the
    // amplitudes decay super-exponentially beyond the classical region.
    let buffer = 60;
    let len = cutoff + 1 + buffer;
    let mut c = vec![0.0f64; len];
    c[0] = 1.0;
    let drive = state.alpha0 * state.chi.exp();
    let (sh, ch) = (state.chi.sinh(), state.chi.cosh());
    for n in 0..len - 1 {
        let prev = if n == 0 { 0.0 } else { c[n - 1] };
        c[n + 1] = (drive * c[n] - sh * (n as f64).sqrt() * prev) / (ch * ((n + 1) as f64).sqrt());
        if c[n + 1].abs() > 1e120 {
            for v in c[..=n + 1].iter_mut() {
                *v *= 1e-120;
            }
        }
    }
    let norm: f64 = c.iter().map(|v| v * v).sum();
    let tail: f64 = c[cutoff + 1..].iter().map(|v| v * v).sum::<f64>() / norm;
    if !(tail < 1e-10) {
        return Err(QuantumError::CutoffTooSmall {
            cutoff,
            required,
            tail,
        });
    }
    Ok(c[..=cutoff].iter().map(|v| v * v / norm).collect())
}

/// Photon-number distribution after a loss channel of fixed transmittance:
/// `p_m(eta) = sum_{j >= m} p_j C(j, m) eta^m (1 - eta)^(j - m)`.
pub fn attenuated_photon_dist(
    state: &GaussianInputState,
    eta: f64,
    cutoff: usize,
) -> Result<Vec<f64>, QuantumError> {
    let p = photon_distribution(state, cutoff)?;
    Ok(binomial_loss(&p, eta))
}

/// Applies the binomial loss map to a photon-number distribution.
fn binomial_loss(p: &[f64], eta: f64) -> Vec<f64> {
    debug_assert!((0.0..=1.0).contains(&eta));
    if eta == 1.0 {
        return p.to_vec();
    }
    let len = p.len();
    let mut out = vec![0.0f64; len];
    if eta == 0.0 {
        out[0] = 1.0;
        return out;
    }
    for m in 0..len {
        // w = C(j, m) eta^m (1 - eta)^(j - m), advanced in j from j = m.
        let mut w = eta.powi(m as i32);
        let mut acc = 0.0;
        for j in m..len {
            acc += p[j] * w;
            w *= (1.0 - eta) * (j + 1) as f64 / (j + 1 - m) as f64;
        }
        out[m] = acc;
    }
    out
}

/// An array of N on-off detectors receiving equal shares of the beam.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClickDetector {
    n: usize,
}

impl ClickDetector {
    pub fn new(n: usize) -> Result<Self, QuantumError> {
        if n == 0 {
            return Err(QuantumError::InvalidState(
                "need at least one detector".into(),
            ));
        }
        Ok(Self { n })
    }

    pub fn count(&self) -> usize {
        self.n
    }
}

/// Click-number distribution for a fixed photon-number distribution:
/// `c_n = sum_m p_m C(N, n) sum_j (-1)^j C(n, j) ((n - j)/N)^m`. Evaluated by
/// the equivalent (and numerically stable, all-positive) occupancy
/// recurrence: T(m+1, n) = T(m, n) n/N + T(m, n-1) (N - n + 1)/N, the law of
/// occupied boxes after m uniform throws into N boxes.
fn click_distribution(p: &[f64], detectors: usize) -> Vec<f64> {
    let nd = detectors;
    let kmax = nd.min(p.len() - 1);
    let mut occupancy = vec![0.0f64; kmax + 1];
    occupancy[0] = 1.0;
    let mut clicks = vec![0.0f64; nd + 1];
    let ndf = nd as f64;
    for (m, &pm) in p.iter().enumerate() {
        for (n, &o) in occupancy.iter().enumerate() {
            clicks[n] += pm * o;
        }
        if m + 1 < p.len() {
            for n in (0..=kmax).rev() {
                let stay = occupancy[n] * n as f64 / ndf;
                let grow = if n > 0 {
                    occupancy[n - 1] * (ndf - (n - 1) as f64) / ndf
                } else {
                    0.0
                };
                occupancy[n] = stay + grow;
            }
        }
    }
    clicks
}

/// The transmittance measure a quantum observable is averaged over: a
/// calibrated model, an empirical sample, or a deterministic channel, each
/// combined with the constant (deterministic) transmittance eta_c.
#[derive(Debug, Clone)]
pub enum AveragerSource {
    PointMass(f64),
    Model(Box<CircularBeamPdt>),
    Sample(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct EtaAverager {
    source: AveragerSource,
    eta_c: f64,
}

/// Nodes of the 129-point Gauss-Legendre rule mapped to [0, 1].
const MODEL_NODES: usize = 129;

impl EtaAverager {
    pub fn new(source: AveragerSource, eta_c: f64) -> Result<Self, QuantumError> {
        if !(eta_c > 0.0 && eta_c <= 1.0) {
            return Err(QuantumError::InvalidAverager(format!(
                "eta_c must be in (0, 1], got {eta_c}"
            )));
        }
        match &source {
            AveragerSource::PointMass(eta) => {
                if !(0.0..=1.0).contains(eta) {
                    return Err(QuantumError::InvalidAverager(format!(
                        "point mass at {eta} outside [0, 1]"
                    )));
                }
            }
            AveragerSource::Sample(etas) => {
                if etas.is_empty() {
                    return Err(QuantumError::InvalidAverager("empty sample".into()));
                }
                if etas.iter().any(|e| !(0.0..=1.0).contains(e)) {
                    return Err(QuantumError::InvalidAverager(
                        "sample transmittance outside [0, 1]".into(),
                    ));
                }
            }
            AveragerSource::Model(_) => {}
        }
        Ok(Self { source, eta_c })
    }

    pub fn point_mass(eta: f64, eta_c: f64) -> Result<Self, QuantumError> {
        Self::new(AveragerSource::PointMass(eta), eta_c)
    }

    pub fn model(pdt: CircularBeamPdt, eta_c: f64) -> Result<Self, QuantumError> {
        Self::new(AveragerSource::Model(Box::new(pdt)), eta_c)
    }

    pub fn sample(etas: Vec<f64>, eta_c: f64) -> Result<Self, QuantumError> {
        Self::new(AveragerSource::Sample(etas), eta_c)
    }

    pub fn eta_c(&self) -> f64 {
        self.eta_c
    }

    /// Fractional moment <(eta_c eta)^p> of the induced measure.
    pub fn moment(&self, p: f64) -> Result<f64, QuantumError> {
        let bare = match &self.source {
            AveragerSource::PointMass(eta) => eta.powf(p),
            AveragerSource::Model(pdt) => pdt.moment(p)?,
            AveragerSource::Sample(etas) => {
                etas.iter().map(|e| e.powf(p)).sum::<f64>() / etas.len() as f64
            }
        };
        Ok(self.eta_c.powf(p) * bare)
    }

    /// Averages a vector-valued observable of the effective transmittance
    /// eta_c eta over the measure. Model averaging uses the 129-node
    /// Gauss-Legendre rule in the CDF variable (the probability integral
    /// transform), inverting the model CDF by bisection at each node.
    pub fn average<F>(&self, dim: usize, mut f: F) -> Result<Vec<f64>, QuantumError>
    where
        F: FnMut(f64) -> Result<Vec<f64>, QuantumError>,
    {
        match &self.source {
            AveragerSource::PointMass(eta) => f(self.eta_c * eta),
            AveragerSource::Sample(etas) => {
                let mut acc = vec![0.0f64; dim];
                for &e in etas {
                    for (a, v) in acc.iter_mut().zip(f(self.eta_c * e)?) {
                        *a += v;
                    }
                }
                let n = etas.len() as f64;
                acc.iter_mut().for_each(|a| *a /= n);
                Ok(acc)
            }
            AveragerSource::Model(pdt) => {
                let (nodes, weights) = gauss_legendre(MODEL_NODES);
                let mut acc = vec![0.0f64; dim];
                for (x, w) in nodes.iter().zip(&weights) {
                    let u = (x + 1.0) / 2.0;
                    let eta = invert_model_cdf(pdt, u)?;
                    for (a, v) in acc.iter_mut().zip(f(self.eta_c * eta)?) {
                        *a += (w / 2.0) * v;
                    }
                }
                Ok(acc)
            }
        }
    }

    /// Variance of the transmission coefficient T = sqrt(eta_c eta),
    /// <dT^2> = <eta> - <sqrt(eta)>^2 >= 0.
    pub fn transmission_variance(&self) -> Result<f64, QuantumError> {
        let mean = self.moment(1.0)?;
        let mean_sqrt = self.moment(0.5)?;
        let var = mean - mean_sqrt * mean_sqrt;
        debug_assert!(var >= -1e-12, "Jensen violated: {var}");
        Ok(var.max(0.0))
    }
}

fn invert_model_cdf(pdt: &CircularBeamPdt, u: f64) -> Result<f64, QuantumError> {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if pdt.cdf(mid)? < u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Output Mandel parameter of a fading channel:
/// `Q_out = (<eta^2>/<eta>) Q_in + (<d eta^2>/<eta>) <n>_in`.
pub fn mandel_q_out(
    q_in: f64,
    mean_n_in: f64,
    averager: &EtaAverager,
) -> Result<f64, QuantumError> {
    let m1 = averager.moment(1.0)?;
    let m2 = averager.moment(2.0)?;
    if m1 <= 0.0 {
        return Err(QuantumError::ZeroMeanTransmittance);
    }
    Ok(m2 / m1 * q_in + (m2 - m1 * m1) / m1 * mean_n_in)
}

/// Click statistics of the state through the fading channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ClickReport {
    /// P_n for n = 0..=N clicks.
    pub p: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    /// Binomial parameter Q_N = N <dn^2> / (<n>(N - <n>)) - 1; None when the
    /// 0/0 limit is hit (vacuum input).
    pub q_n: Option<f64>,
}

pub fn click_statistics(
    state: &GaussianInputState,
    detector: ClickDetector,
    averager: &EtaAverager,
    cutoff: usize,
) -> Result<ClickReport, QuantumError> {
    let photons = photon_distribution(state, cutoff)?;
    let nd = detector.count();
    let p = averager.average(nd + 1, |eta| {
        Ok(click_distribution(&binomial_loss(&photons, eta), nd))
    })?;
    let mean: f64 = p.iter().enumerate().map(|(n, q)| n as f64 * q).sum();
    let mean_sq: f64 = p
        .iter()
        .enumerate()
        .map(|(n, q)| (n * n) as f64 * q)
        .sum();
    let variance = mean_sq - mean * mean;
    let denom = mean * (nd as f64 - mean);
    let q_n = if denom > 0.0 {
        Some(nd as f64 * variance / denom - 1.0)
    } else {
        None
    };
    Ok(ClickReport {
        p,
        mean,
        variance,
        q_n,
    })
}

/// Output x-quadrature variance (vacuum level 1/2) of the state through the
/// fading channel:
/// `<:dx^2:>_out = <eta> <:dx^2:>_in + <dT^2> <x>_in^2`.
pub fn squeezing_out(
    state: &GaussianInputState,
    averager: &EtaAverager,
) -> Result<f64, QuantumError> {
    let input = input_gaussian_moments(state);
    let mean_eta = averager.moment(1.0)?;
    let dt2 = averager.transmission_variance()?;
    let normal = mean_eta * input.x_var_normal + dt2 * input.mean_x * input.mean_x;
    Ok(normal + 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use crate::pdt::{Convention, LogNormalParams};
    use approx::assert_relative_eq;
    use statrs::function::gamma::ln_gamma;

    fn ln_choose(n: usize, k: usize) -> f64 {
        ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
    }

    #[test]
    fn coherent_state_moments() {
        let state = GaussianInputState::new(1.5, 0.0).unwrap();
        let m = input_gaussian_moments(&state);
        assert_relative_eq!(m.mean_n, 2.25);
        assert_relative_eq!(m.mandel_q.unwrap(), 0.0, epsilon = 1e-15);
        assert_relative_eq!(m.x_var_normal, 0.0);
        assert_relative_eq!(m.mean_x, std::f64::consts::SQRT_2 * 1.5);
    }

    #[test]
    fn squeezed_vacuum_against_closed_form() {
        let chi = 0.4f64;
        let state = GaussianInputState::new(0.0, chi).unwrap();
        let m = input_gaussian_moments(&state);
        assert_relative_eq!(m.mean_n, chi.sinh().powi(2), max_relative = 1e-14);
        assert_relative_eq!(
            m.var_n,
            2.0 * chi.sinh().powi(2) * chi.cosh().powi(2),
            max_relative = 1e-14
        );
        // Independent closed form for squeezed vacuum:
        // p_{2k} = (2k)! tanh^{2k} / (cosh (2^k k!)^2), odd terms zero.
        let p = photon_distribution(&state, state.min_cutoff()).unwrap();
        let tanh = chi.tanh();
        for (n, &pn) in p.iter().enumerate() {
            if n % 2 == 1 {
                assert!(pn.abs() < 1e-300, "odd p_{n} = {pn}");
            } else {
                let k = n / 2;
                let ln_p = ln_gamma(n as f64 + 1.0) + n as f64 * tanh.abs().ln()
                    - chi.cosh().ln()
                    - 2.0 * (k as f64 * 2.0f64.ln() + ln_gamma(k as f64 + 1.0));
                assert_relative_eq!(pn, ln_p.exp(), max_relative = 1e-10, epsilon = 1e-16);
            }
        }
        // Parity survives an eta = 1 loss channel.
        let lossless = attenuated_photon_dist(&state, 1.0, state.min_cutoff()).unwrap();
        assert!(lossless.iter().skip(1).step_by(2).all(|&v| v < 1e-300));
    }

    #[test]
    fn coherent_state_under_loss_is_poisson() {
        let alpha0 = 2.0f64;
        let eta = 0.37;
        let state = GaussianInputState::new(alpha0, 0.0).unwrap();
        let cutoff = state.min_cutoff();
        let p = attenuated_photon_dist(&state, eta, cutoff).unwrap();
        let mean = eta * alpha0 * alpha0;
        let mut tv = 0.0;
        for (n, &pn) in p.iter().enumerate() {
            let ln_poisson = n as f64 * mean.ln() - mean - ln_gamma(n as f64 + 1.0);
            tv += (pn - ln_poisson.exp()).abs();
        }
        assert!(tv / 2.0 < 1e-10, "total variation {tv}");
        let total: f64 = p.iter().sum();
        assert!((1.0 - 1e-10..=1.0 + 1e-12).contains(&total));
    }

    #[test]
    fn cutoff_errors() {
        let state = GaussianInputState::new(6.0, 0.4).unwrap();
        assert!(matches!(
            photon_distribution(&state, 30),
            Err(QuantumError::CutoffTooSmall { .. })
        ));
        // Large-amplitude state still normalizes at the required cutoff.
        let p = photon_distribution(&state, state.min_cutoff()).unwrap();
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    /// Dense number-basis oracle: builds D(alpha) S(chi) |0> by applying the
    /// matrix exponentials of alpha (a^dag - a) and chi/2 (a^2 - a^dag^2) to
    /// the vacuum vector via split Taylor steps.
    fn dense_oracle_state(alpha0: f64, chi: f64, dim: usize) -> Vec<f64> {
        // Matrices in the number basis (real for our parameters).
        let mut squeeze = vec![0.0f64; dim * dim];
        let mut displace = vec![0.0f64; dim * dim];
        for n in 0..dim {
            let nf = n as f64;
            if n + 1 < dim {
                // a: <n|a|n+1> = sqrt(n+1); a^dag transposed.
                displace[n * dim + n + 1] += alpha0 * (nf + 1.0).sqrt() * -1.0;
                displace[(n + 1) * dim + n] += alpha0 * (nf + 1.0).sqrt();
            }
            if n + 2 < dim {
                // a^2: <n|a^2|n+2> = sqrt((n+1)(n+2)).
                let s = ((nf + 1.0) * (nf + 2.0)).sqrt();
                squeeze[n * dim + n + 2] += chi / 2.0 * s;
                squeeze[(n + 2) * dim + n] += -chi / 2.0 * s;
            }
        }
        let apply_exp = |m: &[f64], v: &[f64]| -> Vec<f64> {
            // e^M v via 64 split steps of a 24-term Taylor series.
            let steps = 64;
            let mut out = v.to_vec();
            for _ in 0..steps {
                let mut term = out.clone();
                let mut acc = out.clone();
                for k in 1..24 {
                    let mut next = vec![0.0f64; dim];
                    for i in 0..dim {
                        let row = &m[i * dim..(i + 1) * dim];
                        next[i] = row
                            .iter()
                            .zip(&term)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / (steps as f64 * k as f64);
                    }
                    for (a, t) in acc.iter_mut().zip(&next) {
                        *a += t;
                    }
                    term = next;
                }
                out = acc;
            }
            out
        };
        let mut v = vec![0.0f64; dim];
        v[0] = 1.0;
        let squeezed = apply_exp(&squeeze, &v);
        apply_exp(&displace, &squeezed)
    }

    /// Independent loss + click oracle: log-domain binomial loss map and the
    /// direct inclusion-exclusion click sum.
    fn oracle_clicks(p: &[f64], eta: f64, detectors: usize) -> Vec<f64> {
        let len = p.len();
        let mut lossy = vec![0.0f64; len];
        for m in 0..len {
            for j in m..len {
                let ln_w = ln_choose(j, m)
                    + m as f64 * eta.ln()
                    + (j - m) as f64 * (1.0 - eta).ln_1p_guard();
                lossy[m] += p[j] * ln_w.exp();
            }
        }
        let ndf = detectors as f64;
        let mut clicks = vec![0.0f64; detectors + 1];
        for (n, c) in clicks.iter_mut().enumerate() {
            for (m, &pm) in lossy.iter().enumerate() {
                let mut inner = 0.0;
                for j in 0..=n {
                    let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                    inner +=
                        sign * ln_choose(n, j).exp() * ((n - j) as f64 / ndf).powi(m as i32);
                }
                *c += pm * ln_choose(detectors, n).exp() * inner;
            }
        }
        clicks
    }

    trait LnGuard {
        fn ln_1p_guard(&self) -> f64;
    }
    impl LnGuard for f64 {
        // ln of an already-computed (1 - eta); guards the eta = 1 edge.
        fn ln_1p_guard(&self) -> f64 {
            if *self <= 0.0 {
                f64::NEG_INFINITY
            } else {
                self.ln()
            }
        }
    }

    #[test]
    fn pipeline_matches_dense_oracle() {
        for &(alpha0, chi) in &[(2.0, 0.5), (1.0, 0.0), (0.5, 0.3)] {
            let state = GaussianInputState::new(alpha0, chi).unwrap();
            let dim = 64;
            let oracle = dense_oracle_state(alpha0, chi, dim);
            let cutoff = state.min_cutoff().max(40);
            let p = photon_distribution(&state, cutoff).unwrap();
            for n in 0..dim.min(cutoff + 1) - 10 {
                assert_relative_eq!(
                    p[n],
                    oracle[n] * oracle[n],
                    max_relative = 1e-8,
                    epsilon = 1e-12
                );
            }
            // Loss + clicks against the independent inclusion-exclusion sum.
            let eta = 0.6;
            let detectors = 4;
            let ours = click_distribution(&binomial_loss(&p, eta), detectors);
            let oracle_p: Vec<f64> = oracle.iter().map(|a| a * a).collect();
            let reference = oracle_clicks(&oracle_p[..40.min(cutoff + 1)], eta, detectors);
            for (a, b) in ours.iter().zip(&reference) {
                assert_relative_eq!(a, b, max_relative = 1e-7, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn coherent_clicks_through_point_mass_are_binomial() {
        let alpha0 = 1.8f64;
        let eta = 0.55;
        let detectors = 7;
        let state = GaussianInputState::new(alpha0, 0.0).unwrap();
        let averager = EtaAverager::point_mass(eta, 1.0).unwrap();
        let report = click_statistics(
            &state,
            ClickDetector::new(detectors).unwrap(),
            &averager,
            state.min_cutoff(),
        )
        .unwrap();
        let q = 1.0 - (-eta * alpha0 * alpha0 / detectors as f64).exp();
        for (n, &pn) in report.p.iter().enumerate() {
            let binom = ln_choose(detectors, n).exp()
                * q.powi(n as i32)
                * (1.0 - q).powi((detectors - n) as i32);
            assert!((pn - binom).abs() < 1e-12, "P_{n} = {pn} vs {binom}");
        }
    }

    #[test]
    fn vacuum_input_clicks_and_squeezing() {
        let vacuum = GaussianInputState::new(0.0, 0.0).unwrap();
        let averager = EtaAverager::point_mass(0.5, 0.9).unwrap();
        let report = click_statistics(
            &vacuum,
            ClickDetector::new(5).unwrap(),
            &averager,
            vacuum.min_cutoff(),
        )
        .unwrap();
        assert_relative_eq!(report.p[0], 1.0, max_relative = 1e-14);
        assert!(report.q_n.is_none());
        assert_relative_eq!(squeezing_out(&vacuum, &averager).unwrap(), 0.5);
        let sample = EtaAverager::sample(vec![0.2, 0.9, 0.4], 1.0).unwrap();
        assert_relative_eq!(squeezing_out(&vacuum, &sample).unwrap(), 0.5);
    }

    #[test]
    fn mandel_relation_limits() {
        let averager = EtaAverager::point_mass(0.6, 1.0).unwrap();
        assert_relative_eq!(
            mandel_q_out(-0.3, 4.0, &averager).unwrap(),
            0.6 * -0.3,
            max_relative = 1e-13
        );
        // Coherent input through a fluctuating channel stays classical.
        let sample = EtaAverager::sample(vec![0.2, 0.4, 0.9, 0.7], 1.0).unwrap();
        assert!(mandel_q_out(0.0, 4.0, &sample).unwrap() >= 0.0);
    }

    #[test]
    fn point_mass_squeezing_scales_linearly() {
        let state = GaussianInputState::new(0.0, 0.34657).unwrap();
        let input = input_gaussian_moments(&state);
        let eta = 0.62;
        let averager = EtaAverager::point_mass(eta, 1.0).unwrap();
        let out = squeezing_out(&state, &averager).unwrap();
        assert_relative_eq!(
            out - 0.5,
            eta * input.x_var_normal,
            max_relative = 1e-12
        );
    }

    #[test]
    fn binomial_q_approaches_mandel_q_for_many_detectors() {
        let state = GaussianInputState::new(1.0, 0.3).unwrap();
        let input = input_gaussian_moments(&state);
        let eta = 0.7;
        let averager = EtaAverager::point_mass(eta, 1.0).unwrap();
        let report = click_statistics(
            &state,
            ClickDetector::new(256).unwrap(),
            &averager,
            state.min_cutoff(),
        )
        .unwrap();
        let q_mandel = mandel_q_out(input.mandel_q.unwrap(), input.mean_n, &averager).unwrap();
        let q256 = report.q_n.unwrap();
        assert!(
            (q256 - q_mandel).abs() / q_mandel.abs() < 0.02,
            "Q_256 {q256} vs Mandel {q_mandel}"
        );
    }

    fn test_model() -> CircularBeamPdt {
        CircularBeamPdt::new(
            4e-6,
            LogNormalParams::new((2.89e-4f64).ln(), 0.05).unwrap(),
            0.012,
            Convention::GaussianConsistent,
        )
        .unwrap()
    }

    #[test]
    fn model_averager_matches_moment_route() {
        let model = test_model();
        let averager = EtaAverager::model(model.clone(), 1.0).unwrap();
        // Average eta and eta^2 through the Gauss-Legendre CDF-space rule and
        // compare with the model's own moment quadratures; the 129-node rule
        // resolves these to a few 1e-6 relative.
        let gl = averager
            .average(2, |eta| Ok(vec![eta, eta * eta]))
            .unwrap();
        assert_relative_eq!(gl[0], model.moment(1.0).unwrap(), max_relative = 1e-5);
        assert_relative_eq!(gl[1], model.moment(2.0).unwrap(), max_relative = 1e-5);
        assert!(averager.transmission_variance().unwrap() >= 0.0);
        // eta_c folds multiplicatively into every moment.
        let folded = EtaAverager::model(model.clone(), 0.48).unwrap();
        assert_relative_eq!(
            folded.moment(2.0).unwrap(),
            0.48 * 0.48 * averager.moment(2.0).unwrap(),
            max_relative = 1e-13
        );
    }

    #[test]
    fn jensen_holds_for_random_sample_averagers() {
        let mut rng = RngStream::new(17, 0);
        for _ in 0..50 {
            let n = 2 + (rng.uniform() * 30.0) as usize;
            let etas: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let averager = EtaAverager::sample(etas, 1.0).unwrap();
            assert!(averager.transmission_variance().unwrap() >= 0.0);
        }
    }

    #[test]
    fn averager_validation() {
        assert!(EtaAverager::point_mass(1.2, 1.0).is_err());
        assert!(EtaAverager::point_mass(0.5, 0.0).is_err());
        assert!(EtaAverager::sample(vec![], 1.0).is_err());
        assert!(EtaAverager::sample(vec![0.5, -0.1], 1.0).is_err());
        let zero = EtaAverager::point_mass(0.0, 1.0).unwrap();
        assert!(matches!(
            mandel_q_out(0.0, 1.0, &zero),
            Err(QuantumError::ZeroMeanTransmittance)
        ));
    }
}
