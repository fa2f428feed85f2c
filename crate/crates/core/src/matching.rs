//! Calibration of the circular-beam PDT: matching the log-normal spot-size
//! distribution either to moments of S or to transmittance moments, plus
//! constant-loss handling.

use crate::numerics::{
    integrate, least_squares_2, marcum_q1, Bounds2, NumericsError, QuadratureSpec, RngStream,
};
use crate::pdt::{CircularBeamPdt, LogNormalParams, PdtError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MatchingError {
    #[error("invalid moments: {0}")]
    InvalidMoments(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Pdt(#[from] PdtError),
    #[error("transmittance-moment matching did not converge (residual norm {residual_norm:.3e} after {iterations} iterations)")]
    NonConvergence {
        residual_norm: f64,
        iterations: usize,
    },
}

/// Beam statistics consumed by S-moment matching: beam-wandering variance
/// and the first two moments of the squared spot radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamStats {
    /// Variance of one beam-centroid coordinate (m^2).
    pub sigma_bw2: f64,
    /// Mean squared spot radius <S> (m^2).
    pub mean_s: f64,
    /// Second moment <S^2> (m^4).
    pub mean_s2: f64,
}

impl BeamStats {
    pub fn new(sigma_bw2: f64, mean_s: f64, mean_s2: f64) -> Result<Self, MatchingError> {
        if !(sigma_bw2 >= 0.0) || !(mean_s > 0.0) || !(mean_s2 > 0.0) {
            return Err(MatchingError::InvalidMoments(format!(
                "beam statistics must be nonnegative with positive spot moments, got sigma_bw2 = {sigma_bw2}, <S> = {mean_s}, <S^2> = {mean_s2}"
            )));
        }
        if mean_s2 < mean_s * mean_s * (1.0 - 1e-12) {
            return Err(MatchingError::InvalidMoments(format!(
                "<S^2> = {mean_s2} < <S>^2 = {}",
                mean_s * mean_s
            )));
        }
        Ok(Self {
            sigma_bw2,
            mean_s,
            mean_s2,
        })
    }
}

/// Transmittance moments consumed by eta-moment matching. The optional
/// `mean_sqrt` (<sqrt(eta)>) is used by the squeezing transfer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaMoments {
    pub mean: f64,
    pub mean_sq: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_sqrt: Option<f64>,
}

impl EtaMoments {
    pub fn new(mean: f64, mean_sq: f64, mean_sqrt: Option<f64>) -> Result<Self, MatchingError> {
        if !(0.0..=1.0).contains(&mean) || !(0.0..=1.0).contains(&mean_sq) {
            return Err(MatchingError::InvalidMoments(format!(
                "transmittance moments must lie in [0, 1], got <eta> = {mean}, <eta^2> = {mean_sq}"
            )));
        }
        if mean_sq > mean {
            return Err(MatchingError::InvalidMoments(format!(
                "<eta^2> = {mean_sq} > <eta> = {mean}"
            )));
        }
        if mean * mean > mean_sq * (1.0 + 1e-12) {
            return Err(MatchingError::InvalidMoments(format!(
                "<eta>^2 = {} > <eta^2> = {mean_sq}",
                mean * mean
            )));
        }
        if let Some(ms) = mean_sqrt {
            if ms * ms > mean * (1.0 + 1e-12) || mean > ms + 1e-12 {
                return Err(MatchingError::InvalidMoments(format!(
                    "<sqrt(eta)> = {ms} inconsistent with <eta> = {mean}"
                )));
            }
        }
        Ok(Self {
            mean,
            mean_sq,
            mean_sqrt,
        })
    }
}

/// Log-normal parameters reproducing the given first two moments of S:
/// mu = ln(<S>^2 / sqrt(<S^2>)), sigma^2 = ln(<S^2>/<S>^2).
pub fn lognormal_from_s_moments(
    mean_s: f64,
    mean_s2: f64,
) -> Result<LogNormalParams, MatchingError> {
    if !(mean_s > 0.0) || !(mean_s2 > 0.0) {
        return Err(MatchingError::InvalidMoments(format!(
            "S moments must be positive, got <S> = {mean_s}, <S^2> = {mean_s2}"
        )));
    }
    let ratio = mean_s2 / (mean_s * mean_s);
    if ratio < 1.0 {
        return Err(MatchingError::InvalidMoments(format!(
            "<S^2> = {mean_s2} < <S>^2 = {}",
            mean_s * mean_s
        )));
    }
    let mu = (mean_s * mean_s / mean_s2.sqrt()).ln();
    let sigma2 = ratio.ln();
    Ok(LogNormalParams::new(mu, sigma2)?)
}

/// Exact first two transmittance moments of a Gaussian beam of squared spot
/// radius `s` whose centroid wanders with per-axis variance `x0sq`, through
/// a circular aperture of radius `aperture` (Esposito's closed forms).
pub fn conditional_eta_moments(
    s: f64,
    x0sq: f64,
    aperture: f64,
) -> Result<(f64, f64), MatchingError> {
    if !(s > 0.0) || !(aperture > 0.0) || x0sq < 0.0 {
        return Err(MatchingError::InvalidMoments(format!(
            "conditional moments require S > 0, a > 0, <x_0^2> >= 0; got S = {s}, a = {aperture}, <x_0^2> = {x0sq}"
        )));
    }
    let a2 = aperture * aperture;
    let mean = -(-2.0 * a2 / (4.0 * x0sq + s)).exp_m1();
    if x0sq == 0.0 {
        // p -> infinity limit: the beam never moves, eta is deterministic.
        let eta = -(-2.0 * a2 / s).exp_m1();
        return Ok((eta, eta * eta));
    }
    let p = s / (8.0 * x0sq);
    let beta = 1.0 / (2.0 * p + 1.0);
    let alpha =
        2.0 * aperture / s.sqrt() * (2.0 * p * (p + 1.0) / (2.0 * p * p + 3.0 * p + 1.0)).sqrt();
    let q = (1.0 - beta * beta).sqrt();
    let bracket =
        1.0 - marcum_q1(alpha / q, alpha * beta / q)? + marcum_q1(alpha * beta / q, alpha / q)?;
    let mean_sq = 1.0 - 2.0 * (1.0 - mean) + (-0.5 * alpha * alpha).exp() * bracket;
    Ok((mean, mean_sq.clamp(0.0, 1.0)))
}

/// Forward map of eta-moment matching: the conditional Esposito moments
/// mixed over the log-normal S distribution.
pub fn forward_eta_moments(
    lognormal: &LogNormalParams,
    sigma_bw2: f64,
    aperture: f64,
) -> Result<(f64, f64), MatchingError> {
    if lognormal.sigma2 == 0.0 {
        return conditional_eta_moments(lognormal.mu.exp(), sigma_bw2, aperture);
    }
    let sigma = lognormal.sigma2.sqrt();
    let (lo, hi) = (lognormal.mu - 10.0 * sigma, lognormal.mu + 10.0 * sigma);
    let spec = QuadratureSpec::new(1e-12, 1e-9, 2000);
    let weight = |ln_s: f64| {
        (-(ln_s - lognormal.mu).powi(2) / (2.0 * lognormal.sigma2)).exp()
            / (sigma * (2.0 * std::f64::consts::PI).sqrt())
    };
    let m1 = integrate(
        |ln_s| match conditional_eta_moments(ln_s.exp(), sigma_bw2, aperture) {
            Ok((m, _)) => m * weight(ln_s),
            Err(_) => f64::NAN,
        },
        lo,
        hi,
        &spec,
    )?;
    let m2 = integrate(
        |ln_s| match conditional_eta_moments(ln_s.exp(), sigma_bw2, aperture) {
            Ok((_, m)) => m * weight(ln_s),
            Err(_) => f64::NAN,
        },
        lo,
        hi,
        &spec,
    )?;
    if m1.value.is_nan() || m2.value.is_nan() {
        return Err(MatchingError::InvalidMoments(
            "conditional moments failed inside the S mixture".into(),
        ));
    }
    Ok((m1.value.clamp(0.0, 1.0), m2.value.clamp(0.0, 1.0)))
}

/// Largest sigma^2 for which P(S > 10 <S>) < 1% under the log-normal, i.e.
/// the root of erfc((ln 10 - sigma^2/2)/(sigma sqrt 2))/2 = 0.01.
pub fn sigma2_tail_bound() -> f64 {
    let tail = |sigma2: f64| {
        let sigma = sigma2.sqrt();
        0.5 * statrs::function::erf::erfc(
            (std::f64::consts::LN_10 - 0.5 * sigma2) / (sigma * std::f64::consts::SQRT_2),
        )
    };
    let (mut lo, mut hi) = (1e-6, 4.0);
    debug_assert!(tail(lo) < 0.01 && tail(hi) > 0.01);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if tail(mid) < 0.01 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Outcome of transmittance-moment matching.
#[derive(Debug, Clone, Copy)]
pub struct MatchReport {
    pub lognormal: LogNormalParams,
    /// Euclidean norm of the relative moment residuals at the solution.
    pub residual_norm: f64,
    /// True when the solution is pinned at the constraint box with the
    /// gradient pointing outward (infeasible targets, not masked).
    pub boundary_active: bool,
    pub iterations: usize,
}

/// Calibrates (mu, sigma^2) so the forward map reproduces the target
/// transmittance moments, by box-constrained least squares on relative
/// residuals.
///
/// The box follows the method's prescription: the log-normal mean stays
/// within a factor of five of the initial guess mean, and sigma^2 within
/// (1e-6, min(2, tail bound)) where the tail bound keeps
/// P(S > 10 <S>) < 1%. The solver runs in (ln mean, sigma^2) coordinates so
/// both constraints are plain box bounds.
pub fn match_eta_moments(
    targets: &EtaMoments,
    sigma_bw2: f64,
    aperture: f64,
    init: &LogNormalParams,
) -> Result<MatchReport, MatchingError> {
    EtaMoments::new(targets.mean, targets.mean_sq, targets.mean_sqrt)?;
    if targets.mean <= 0.0 {
        return Err(MatchingError::InvalidMoments(
            "target <eta> must be positive".into(),
        ));
    }
    let ln5 = 5.0_f64.ln();
    let ln_mean0 = init.mean().ln();
    let sigma2_hi = 2.0_f64.min(sigma2_tail_bound());
    let bounds = Bounds2 {
        lo: [ln_mean0 - ln5, 1e-6],
        hi: [ln_mean0 + ln5, sigma2_hi],
    };
    let residuals = |p: [f64; 2]| {
        let sigma2 = p[1];
        let lognormal = LogNormalParams {
            mu: p[0] - 0.5 * sigma2,
            sigma2,
        };
        match forward_eta_moments(&lognormal, sigma_bw2, aperture) {
            Ok((m1, m2)) => [
                (m1 - targets.mean) / targets.mean,
                (m2 - targets.mean_sq) / targets.mean_sq,
            ],
            // Large finite penalty keeps the solver inside usable territory.
            Err(_) => [1e6, 1e6],
        }
    };
    let p0 = [ln_mean0, init.sigma2.clamp(1e-6, sigma2_hi)];
    let outcome = least_squares_2(residuals, p0, bounds)?;
    let lognormal = LogNormalParams {
        mu: outcome.params[0] - 0.5 * outcome.params[1],
        sigma2: outcome.params[1],
    };
    if !outcome.at_boundary() && outcome.residual_norm > 1e-6 {
        return Err(MatchingError::NonConvergence {
            residual_norm: outcome.residual_norm,
            iterations: outcome.iterations,
        });
    }
    Ok(MatchReport {
        lognormal,
        residual_norm: outcome.residual_norm,
        boundary_active: outcome.at_boundary(),
        iterations: outcome.iterations,
    })
}

/// Deterministic transmittance for a total constant loss in dB.
pub fn transmittance_from_db(loss_db: f64) -> f64 {
    10f64.powf(-loss_db / 10.0)
}

/// Rewrites matching targets to absorb a constant transmittance `eta_c`:
/// <eta> -> eta_c <eta>, <eta^2> -> eta_c^2 <eta^2>,
/// <sqrt(eta)> -> sqrt(eta_c) <sqrt(eta)>.
pub fn fold_constant_loss(targets: &EtaMoments, eta_c: f64) -> Result<EtaMoments, MatchingError> {
    if !(eta_c > 0.0 && eta_c <= 1.0) {
        return Err(MatchingError::InvalidMoments(format!(
            "constant transmittance must lie in (0, 1], got {eta_c}"
        )));
    }
    EtaMoments::new(
        eta_c * targets.mean,
        eta_c * eta_c * targets.mean_sq,
        targets.mean_sqrt.map(|m| eta_c.sqrt() * m),
    )
}

/// A calibrated PDT with a constant loss applied by rescaling:
/// `P_loss(eta) = eta_c^-1 P(eta/eta_c)`, support [0, eta_c).
#[derive(Debug, Clone)]
pub struct RescaledPdt {
    model: CircularBeamPdt,
    eta_c: f64,
}

impl RescaledPdt {
    pub fn new(model: CircularBeamPdt, eta_c: f64) -> Result<Self, MatchingError> {
        if !(eta_c > 0.0 && eta_c <= 1.0) {
            return Err(MatchingError::InvalidMoments(format!(
                "constant transmittance must lie in (0, 1], got {eta_c}"
            )));
        }
        Ok(Self { model, eta_c })
    }

    pub fn eta_c(&self) -> f64 {
        self.eta_c
    }

    pub fn inner(&self) -> &CircularBeamPdt {
        &self.model
    }

    pub fn density(&self, eta: f64) -> Result<f64, MatchingError> {
        Ok(self.model.density(eta / self.eta_c)? / self.eta_c)
    }

    pub fn cdf(&self, eta: f64) -> Result<f64, MatchingError> {
        Ok(self.model.cdf(eta / self.eta_c)?)
    }

    /// <eta^p> of the rescaled density is eta_c^p times the original moment.
    pub fn moment(&self, p: f64) -> Result<f64, MatchingError> {
        Ok(self.eta_c.powf(p) * self.model.moment(p)?)
    }

    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<Vec<f64>, MatchingError> {
        let mut samples = self.model.sample(n, rng)?;
        for eta in &mut samples {
            *eta *= self.eta_c;
        }
        Ok(samples)
    }
}
