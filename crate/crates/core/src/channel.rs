//! Physical channel description and the derived dimensionless parameters
//! used by every other module.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::f64::consts::PI;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("invalid channel config: {0}")]
    InvalidConfig(String),
    #[error("failed to read channel config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse channel config {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
}

/// Initial beam-spot radius: either an explicit value in meters or the
/// Fresnel-matched choice `W0 = sqrt(L lambda / pi)` (which makes the Fresnel
/// number exactly 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpotRadius {
    Meters(f64),
    Fresnel,
}

impl Serialize for SpotRadius {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            SpotRadius::Meters(v) => s.serialize_f64(*v),
            SpotRadius::Fresnel => s.serialize_str("fresnel"),
        }
    }
}

impl<'de> Deserialize<'de> for SpotRadius {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(SpotRadius::Meters(v)),
            Raw::Str(s) if s == "fresnel" => Ok(SpotRadius::Fresnel),
            Raw::Str(s) => Err(D::Error::custom(format!(
                "w0_m must be a number or \"fresnel\", got {s:?}"
            ))),
        }
    }
}

// Length fields that admit +inf (JSON has no infinity literal, so the string
// "inf" is accepted and emitted).
fn serialize_maybe_inf<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn deserialize_maybe_inf<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Str(s) if s == "inf" || s == "+inf" => Ok(f64::INFINITY),
        Raw::Str(s) => Err(D::Error::custom(format!(
            "expected a number or \"inf\", got {s:?}"
        ))),
    }
}

fn default_eta_c() -> f64 {
    1.0
}

/// Physical description of a horizontal free-space channel with a
/// homogeneous turbulence path.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChannelConfig {
    /// Optical wavelength (m).
    pub wavelength_m: f64,
    /// Propagation path length (m).
    pub length_m: f64,
    /// Initial beam-spot radius (m) or the Fresnel-matched choice.
    pub w0_m: SpotRadius,
    /// Wavefront radius at the transmitter (m); defaults to the path length
    /// (focused beam), +inf means collimated.
    #[serde(
        default,
        serialize_with = "serialize_maybe_inf",
        deserialize_with = "deserialize_maybe_inf"
    )]
    pub f0_m: f64,
    /// Index-of-refraction structure constant (m^(-2/3)).
    pub cn2: f64,
    /// Inner scale of turbulence (m).
    pub l0_m: f64,
    /// Outer scale of turbulence (m); +inf allowed.
    #[serde(
        serialize_with = "serialize_maybe_inf",
        deserialize_with = "deserialize_maybe_inf"
    )]
    pub outer_m: f64,
    /// Receiver aperture radius (m).
    pub aperture_m: f64,
    /// Constant-loss efficiency in (0, 1].
    #[serde(default = "default_eta_c")]
    pub eta_c: f64,
}

impl ChannelConfig {
    /// Resolved initial spot radius in meters.
    pub fn w0(&self) -> f64 {
        match self.w0_m {
            SpotRadius::Meters(v) => v,
            SpotRadius::Fresnel => (self.length_m * self.wavelength_m / PI).sqrt(),
        }
    }

    /// Wavefront radius, with the `f0_m = 0` serde default resolved to the
    /// focused choice `F0 = L`.
    pub fn f0(&self) -> f64 {
        if self.f0_m == 0.0 {
            self.length_m
        } else {
            self.f0_m
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        let fail = |msg: String| Err(ChannelError::InvalidConfig(msg));
        if !(self.wavelength_m > 0.0) || !self.wavelength_m.is_finite() {
            return fail(format!("wavelength_m must be > 0, got {}", self.wavelength_m));
        }
        if !(self.length_m > 0.0) || !self.length_m.is_finite() {
            return fail(format!("length_m must be > 0, got {}", self.length_m));
        }
        let w0 = self.w0();
        if !(w0 > 0.0) || !w0.is_finite() {
            return fail(format!("w0_m must be > 0, got {w0}"));
        }
        if !(self.f0() > 0.0) {
            return fail(format!("f0_m must be > 0, got {}", self.f0()));
        }
        if !(self.cn2 >= 0.0) || !self.cn2.is_finite() {
            return fail(format!("cn2 must be >= 0, got {}", self.cn2));
        }
        if !(self.l0_m > 0.0) {
            return fail(format!("l0_m must be > 0, got {}", self.l0_m));
        }
        if !(self.outer_m > 0.0) {
            return fail(format!("outer_m must be > 0, got {}", self.outer_m));
        }
        if self.l0_m >= self.outer_m {
            return fail(format!(
                "inner scale l0_m = {} must be smaller than outer scale outer_m = {}",
                self.l0_m, self.outer_m
            ));
        }
        if !(self.aperture_m > 0.0) || !self.aperture_m.is_finite() {
            return fail(format!("aperture_m must be > 0, got {}", self.aperture_m));
        }
        if !(self.eta_c > 0.0 && self.eta_c <= 1.0) {
            return fail(format!("eta_c must be in (0, 1], got {}", self.eta_c));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ChannelError> {
        let text = std::fs::read_to_string(path).map_err(|source| ChannelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: ChannelConfig =
            serde_json::from_str(&text).map_err(|source| ChannelError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        config.validate()?;
        Ok(config)
    }
}

/// Derived dimensionless channel parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct DerivedChannel {
    /// Wavenumber k = 2 pi / lambda (1/m).
    pub wavenumber: f64,
    /// Fresnel number Omega = k W0^2 / (2 L).
    pub fresnel: f64,
    /// Rytov parameter sigma_R^2 = 1.23 Cn^2 k^(7/6) L^(11/6).
    pub rytov: f64,
    /// Spatial coherence radius rho_0 = (1.46 Cn^2 k^2 L)^(-3/5) (m).
    ///
    /// Printed with exponent -5/3 in the source material; -3/5 is the only
    /// dimensionally consistent reading (it yields meters) and is what is
    /// implemented here.
    pub coherence_radius: f64,
}

/// Computes the derived dimensionless parameters of a channel.
///
/// Pure function of the config: identical inputs yield bit-identical outputs.
pub fn derive_channel(config: &ChannelConfig) -> Result<DerivedChannel, ChannelError> {
    config.validate()?;
    let k = 2.0 * PI / config.wavelength_m;
    let w0 = config.w0();
    let length = config.length_m;
    let fresnel = k * w0 * w0 / (2.0 * length);
    let rytov = 1.23 * config.cn2 * k.powf(7.0 / 6.0) * length.powf(11.0 / 6.0);
    let coherence_radius = if config.cn2 > 0.0 {
        (1.46 * config.cn2 * k * k * length).powf(-3.0 / 5.0)
    } else {
        f64::INFINITY
    };
    Ok(DerivedChannel {
        wavenumber: k,
        fresnel,
        rytov,
        coherence_radius,
    })
}

impl ChannelConfig {
    /// The reference channel used throughout validation: 808 nm, Fresnel
    /// spot, Cn^2 = 1e-15 m^(-2/3), focused beam.
    pub fn reference(length_m: f64) -> ChannelConfig {
        ChannelConfig {
            wavelength_m: 808e-9,
            length_m,
            w0_m: SpotRadius::Fresnel,
            f0_m: length_m,
            cn2: 1e-15,
            l0_m: 1e-6,
            outer_m: 5e3,
            aperture_m: 0.012,
            eta_c: 1.0,
        }
    }
}
