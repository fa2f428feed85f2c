//! The circular-beam probability distribution of transmittance (PDT):
//! conditional family, log-normal spot-size mixture, total density, CDF,
//! moments, and inverse-CDF sampling.

use crate::numerics::{bessel_i_scaled, integrate, NumericsError, QuadratureSpec, RngStream};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PdtError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid PDT model: {0}")]
    InvalidModel(String),
    #[error("conditional PDT shape parameter is nonpositive at S = {s} m^2 under the as-printed convention")]
    InvalidShape { s: f64 },
}

/// Convention for the maximal conditional transmittance `eta_0(S)`.
///
/// The printed form `1 - exp(-a^2/S)` is inconsistent with the Gaussian
/// intensity profile the model itself assumes (a centered aperture integral
/// of that profile gives `1 - exp(-2 a^2/S)`) and breaks the moment ordering
/// `<eta^2> <= <eta>` in tested regimes. The Gaussian-consistent form is the
/// default; the printed one is retained behind this flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Convention {
    #[serde(rename = "as-printed")]
    AsPrinted,
    #[default]
    #[serde(rename = "gaussian-consistent")]
    GaussianConsistent,
}

impl Convention {
    /// Coefficient c in `eta_0 = 1 - exp(-c a^2 / S)`.
    fn eta0_coefficient(self) -> f64 {
        match self {
            Convention::AsPrinted => 1.0,
            Convention::GaussianConsistent => 2.0,
        }
    }
}

/// Parameters of the conditional (fixed-S) PDT.
#[derive(Debug, Clone, Copy)]
pub struct ConditionalParams {
    /// Maximal transmittance for the given spot size.
    pub eta0: f64,
    /// Shape parameter of the log-Weibull-type law.
    pub lambda_shape: f64,
    /// Scale parameter (m).
    pub r_scale: f64,
}

/// Log-normal parameters of the squared beam-spot radius S.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalParams {
    /// Location: mu = <ln S> (log of m^2).
    pub mu: f64,
    /// Scale: sigma^2 = Var(ln S), dimensionless.
    pub sigma2: f64,
}

impl LogNormalParams {
    pub fn new(mu: f64, sigma2: f64) -> Result<Self, PdtError> {
        if !mu.is_finite() || !sigma2.is_finite() || sigma2 < 0.0 {
            return Err(PdtError::InvalidModel(format!(
                "log-normal parameters must be finite with sigma2 >= 0, got mu = {mu}, sigma2 = {sigma2}"
            )));
        }
        Ok(Self { mu, sigma2 })
    }

    /// Mean of S: exp(mu + sigma^2/2).
    pub fn mean(&self) -> f64 {
        (self.mu + 0.5 * self.sigma2).exp()
    }

    /// Density in S (1/m^2).
    pub fn density(&self, s: f64) -> f64 {
        if s <= 0.0 || self.sigma2 == 0.0 {
            return 0.0;
        }
        let sigma = self.sigma2.sqrt();
        (-(s.ln() - self.mu).powi(2) / (2.0 * self.sigma2)).exp()
            / (s * sigma * (2.0 * std::f64::consts::PI).sqrt())
    }

    /// Density of ln S, i.e. a normal in s = ln S.
    fn density_log(&self, ln_s: f64) -> f64 {
        let sigma = self.sigma2.sqrt();
        (-(ln_s - self.mu).powi(2) / (2.0 * self.sigma2)).exp()
            / (sigma * (2.0 * std::f64::consts::PI).sqrt())
    }
}

/// Stable evaluation of `1 - e^(-t) I_0(t)`, the denominator appearing in
/// the shape and scale parameters. Direct subtraction cancels for small t.
fn one_minus_i0e(t: f64) -> Result<f64, NumericsError> {
    if t < 1e-4 {
        // 1 - e^-t I_0(t) = t - 3/4 t^2 + 5/12 t^3 - 0.182292 t^4 + ...
        Ok(t * (1.0 - t * (0.75 - t * (5.0 / 12.0 - t * 0.18229166666666666))))
    } else {
        Ok(1.0 - bessel_i_scaled(0, t)?)
    }
}

/// Conditional-PDT parameters `(eta_0, lambda, R)` for a fixed squared spot
/// radius `s` and aperture radius `a`.
pub fn conditional_params(
    s: f64,
    aperture: f64,
    convention: Convention,
) -> Result<ConditionalParams, PdtError> {
    if !(s > 0.0) || !(aperture > 0.0) {
        return Err(PdtError::InvalidModel(format!(
            "conditional_params requires S > 0 and a > 0, got S = {s}, a = {aperture}"
        )));
    }
    let x = aperture * aperture / s;
    let c = convention.eta0_coefficient();
    // eta_0 = 1 - exp(-c a^2/S); -expm1 keeps precision for small exponents
    // and saturates cleanly at 1 for a^2/S > 350.
    let eta0 = -(-c * x).exp_m1();
    let t = 4.0 * x;
    let i1e = bessel_i_scaled(1, t)?;
    let denom = one_minus_i0e(t)?;
    // ln(2 eta_0 / (1 - e^-t I_0(t)))
    let log_term = (2.0 * eta0 / denom).ln();
    if !(log_term > 0.0) {
        return Err(PdtError::InvalidShape { s });
    }
    let lambda_shape = 8.0 * x * (i1e / denom) / log_term;
    let r_scale = aperture * log_term.powf(-1.0 / lambda_shape);
    Ok(ConditionalParams {
        eta0,
        lambda_shape,
        r_scale,
    })
}

/// `ln(eta_0/eta)` evaluated through log1p so that eta -> eta_0 does not
/// underflow.
fn log_ratio(eta: f64, eta0: f64) -> f64 {
    -((eta - eta0) / eta0).ln_1p()
}

impl ConditionalParams {
    /// Density of the conditional PDT at `eta` for beam-wandering variance
    /// `sigma_bw2`.
    pub fn density(&self, eta: f64, sigma_bw2: f64) -> f64 {
        if eta <= 0.0 || eta >= self.eta0 {
            return 0.0;
        }
        let l = log_ratio(eta, self.eta0);
        let r2 = self.r_scale * self.r_scale;
        let lam = self.lambda_shape;
        let exponent = -r2 / (2.0 * sigma_bw2) * l.powf(2.0 / lam);
        r2 / (sigma_bw2 * eta * lam) * l.powf(2.0 / lam - 1.0) * exponent.exp()
    }

    /// Closed-form CDF: `F(eta|S) = exp(-R^2/(2 sigma_bw^2) ln(eta_0/eta)^(2/lambda))`.
    pub fn cdf(&self, eta: f64, sigma_bw2: f64) -> f64 {
        if eta <= 0.0 {
            return 0.0;
        }
        if eta >= self.eta0 {
            return 1.0;
        }
        let l = log_ratio(eta, self.eta0);
        let r2 = self.r_scale * self.r_scale;
        (-r2 / (2.0 * sigma_bw2) * l.powf(2.0 / self.lambda_shape)).exp()
    }

    /// Inverse CDF (exact, from the log-Weibull structure).
    pub fn inverse_cdf(&self, u: f64, sigma_bw2: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&u));
        if u <= 0.0 {
            return 0.0;
        }
        if u >= 1.0 {
            return self.eta0;
        }
        let r2 = self.r_scale * self.r_scale;
        let l = (2.0 * sigma_bw2 * (-u.ln()) / r2).powf(0.5 * self.lambda_shape);
        self.eta0 * (-l).exp()
    }
}

/// Conditional PDT density for a fixed spot size (convenience wrapper).
pub fn conditional_pdt(
    eta: f64,
    s: f64,
    sigma_bw2: f64,
    aperture: f64,
    convention: Convention,
) -> Result<f64, PdtError> {
    Ok(conditional_params(s, aperture, convention)?.density(eta, sigma_bw2))
}

/// Calibrated circular-beam PDT: beam-wandering variance, log-normal spot
/// distribution, aperture, and the eta_0 convention.
#[derive(Debug, Clone, PartialEq)]
pub struct CircularBeamPdt {
    sigma_bw2: f64,
    lognormal: LogNormalParams,
    aperture: f64,
    convention: Convention,
}

#[derive(Serialize, Deserialize)]
struct CircularBeamPdtWire {
    sigma_bw2: f64,
    mu: f64,
    sigma2: f64,
    aperture_m: f64,
    convention: Convention,
}

impl Serialize for CircularBeamPdt {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        CircularBeamPdtWire {
            sigma_bw2: self.sigma_bw2,
            mu: self.lognormal.mu,
            sigma2: self.lognormal.sigma2,
            aperture_m: self.aperture,
            convention: self.convention,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CircularBeamPdt {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let wire = CircularBeamPdtWire::deserialize(d)?;
        CircularBeamPdt::new(
            wire.sigma_bw2,
            LogNormalParams {
                mu: wire.mu,
                sigma2: wire.sigma2,
            },
            wire.aperture_m,
            wire.convention,
        )
        .map_err(serde::de::Error::custom)
    }
}

impl CircularBeamPdt {
    pub fn new(
        sigma_bw2: f64,
        lognormal: LogNormalParams,
        aperture: f64,
        convention: Convention,
    ) -> Result<Self, PdtError> {
        if !(sigma_bw2 > 0.0) || !sigma_bw2.is_finite() {
            return Err(PdtError::InvalidModel(format!(
                "sigma_bw2 must be > 0, got {sigma_bw2}"
            )));
        }
        if !(aperture > 0.0) || !aperture.is_finite() {
            return Err(PdtError::InvalidModel(format!(
                "aperture must be > 0, got {aperture}"
            )));
        }
        LogNormalParams::new(lognormal.mu, lognormal.sigma2)?;
        Ok(Self {
            sigma_bw2,
            lognormal,
            aperture,
            convention,
        })
    }

    pub fn sigma_bw2(&self) -> f64 {
        self.sigma_bw2
    }

    pub fn lognormal(&self) -> LogNormalParams {
        self.lognormal
    }

    pub fn aperture(&self) -> f64 {
        self.aperture
    }

    pub fn convention(&self) -> Convention {
        self.convention
    }

    /// Support cutoff in S for a given transmittance: `eta_0(S) > eta`
    /// exactly when `S < s_max(eta)`.
    pub fn s_max(&self, eta: f64) -> f64 {
        let c = self.convention.eta0_coefficient();
        let a2 = self.aperture * self.aperture;
        if eta <= 0.0 {
            return f64::INFINITY;
        }
        if eta >= 1.0 {
            return 0.0;
        }
        c * a2 / -(-eta).ln_1p()
    }

    fn outer_log_bounds(&self) -> (f64, f64) {
        let sigma = self.lognormal.sigma2.sqrt();
        (
            self.lognormal.mu - 10.0 * sigma,
            self.lognormal.mu + 10.0 * sigma,
        )
    }

    /// Total PDT density: the conditional PDT mixed over the log-normal S
    /// distribution, integrated on log S up to the analytic support cutoff.
    pub fn density(&self, eta: f64) -> Result<f64, PdtError> {
        if eta <= 0.0 || eta >= 1.0 {
            return Ok(0.0);
        }
        if self.lognormal.sigma2 == 0.0 {
            let params =
                conditional_params(self.lognormal.mu.exp(), self.aperture, self.convention)?;
            return Ok(params.density(eta, self.sigma_bw2));
        }
        let (lo, hi0) = self.outer_log_bounds();
        let hi = hi0.min(self.s_max(eta).ln());
        if hi <= lo {
            return Ok(0.0);
        }
        let spec = QuadratureSpec::new(1e-12, 1e-9, 4000);
        let f = |ln_s: f64| {
            let s = ln_s.exp();
            match conditional_params(s, self.aperture, self.convention) {
                Ok(p) => p.density(eta, self.sigma_bw2) * self.lognormal.density_log(ln_s),
                Err(_) => f64::NAN,
            }
        };
        let r = integrate(f, lo, hi, &spec)?;
        if r.value.is_nan() {
            return Err(PdtError::InvalidShape { s: hi.exp() });
        }
        Ok(r.value.max(0.0))
    }

    /// Total CDF via the closed-form conditional CDF mixed over S (one
    /// quadrature per evaluation point).
    pub fn cdf(&self, eta: f64) -> Result<f64, PdtError> {
        if eta <= 0.0 {
            return Ok(0.0);
        }
        if eta >= 1.0 {
            return Ok(1.0);
        }
        if self.lognormal.sigma2 == 0.0 {
            let params =
                conditional_params(self.lognormal.mu.exp(), self.aperture, self.convention)?;
            return Ok(params.cdf(eta, self.sigma_bw2));
        }
        let (lo, hi) = self.outer_log_bounds();
        let spec = QuadratureSpec::new(1e-11, 1e-9, 4000);
        let f = |ln_s: f64| {
            let s = ln_s.exp();
            match conditional_params(s, self.aperture, self.convention) {
                Ok(p) => p.cdf(eta, self.sigma_bw2) * self.lognormal.density_log(ln_s),
                Err(_) => f64::NAN,
            }
        };
        let r = integrate(f, lo, hi, &spec)?;
        if r.value.is_nan() {
            return Err(PdtError::InvalidShape { s: hi.exp() });
        }
        Ok(r.value.clamp(0.0, 1.0))
    }

    /// Moment `<eta^p>` for any p > 0 by nested adaptive quadrature.
    ///
    /// The inner integral runs in the conditional CDF variable, where the
    /// integrand `eta(u)^p` is bounded and smooth, so endpoint singularities
    /// of the density never appear.
    pub fn moment(&self, p: f64) -> Result<f64, PdtError> {
        if !(p > 0.0) {
            return Err(PdtError::InvalidModel(format!(
                "moment order must be > 0, got {p}"
            )));
        }
        let inner_spec = QuadratureSpec::new(1e-11, 1e-10, 2000);
        let conditional_moment = |s: f64| -> Result<f64, PdtError> {
            let params = conditional_params(s, self.aperture, self.convention)?;
            let r = integrate(
                |u| params.inverse_cdf(u, self.sigma_bw2).powf(p),
                0.0,
                1.0,
                &inner_spec,
            )?;
            Ok(r.value)
        };
        if self.lognormal.sigma2 == 0.0 {
            return conditional_moment(self.lognormal.mu.exp());
        }
        let (lo, hi) = self.outer_log_bounds();
        let spec = QuadratureSpec::new(1e-10, 1e-9, 2000);
        let f = |ln_s: f64| match conditional_moment(ln_s.exp()) {
            Ok(m) => m * self.lognormal.density_log(ln_s),
            Err(_) => f64::NAN,
        };
        let r = integrate(f, lo, hi, &spec)?;
        if r.value.is_nan() {
            return Err(PdtError::InvalidShape { s: hi.exp() });
        }
        Ok(r.value.clamp(0.0, 1.0))
    }

    /// Draws `n` transmittance samples: S from the log-normal, then eta by
    /// the closed-form conditional inverse CDF. All samples lie in [0, 1).
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<Vec<f64>, PdtError> {
        let sigma = self.lognormal.sigma2.sqrt();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let s = (self.lognormal.mu + sigma * rng.normal()).exp();
            let params = conditional_params(s, self.aperture, self.convention)?;
            let u = rng.uniform();
            out.push(params.inverse_cdf(u, self.sigma_bw2).min(1.0 - f64::EPSILON));
        }
        Ok(out)
    }
}
