//! Empirical statistics and goodness-of-fit tools used to validate the
//! calibrated transmittance model against Monte-Carlo sample sets.

use crate::matching::{lognormal_from_s_moments, EtaMoments, MatchingError};
use crate::pdt::{CircularBeamPdt, PdtError};
use crate::simulator::SampleSet;
use statrs::function::erf::erfc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("sample contains a nonpositive value")]
    NonPositiveSample,
    #[error("degenerate sample: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Pdt(#[from] PdtError),
    #[error(transparent)]
    Matching(#[from] MatchingError),
}

/// Sample moments of one Monte-Carlo ensemble.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmpiricalSummary {
    pub n: usize,
    pub mean_eta: f64,
    pub mean_eta_sq: f64,
    pub mean_sqrt_eta: f64,
    /// Unbiased sample variance of the transmittance.
    pub var_eta: f64,
    /// Per-axis beam-wandering variance, pooled over both centroid axes.
    pub sigma_bw2: f64,
    pub mean_s: f64,
    pub mean_s2: f64,
    /// Pearson correlation between S and the squared centroid coordinate,
    /// corr(S, x0^2) = (<S x0^2> - <S><x0^2>) / sqrt(Var S Var x0^2).
    pub corr_s_x0sq: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    (sum / n as f64, n)
}

/// Computes the moment summary of a sample set. The Pearson coefficient uses
/// plain sample moments (the normalizations cancel); the variances use the
/// unbiased estimator.
pub fn summarize(samples: &SampleSet) -> Result<EmpiricalSummary, StatsError> {
    let n = samples.len();
    if n < 2 {
        return Err(StatsError::TooFewSamples { needed: 2, got: n });
    }
    let nf = n as f64;
    let (mean_eta, _) = mean(samples.eta.iter().copied());
    let (mean_eta_sq, _) = mean(samples.eta.iter().map(|e| e * e));
    let (mean_sqrt_eta, _) = mean(samples.eta.iter().map(|e| e.sqrt()));
    let var_eta = samples
        .eta
        .iter()
        .map(|e| (e - mean_eta) * (e - mean_eta))
        .sum::<f64>()
        / (nf - 1.0);
    let (mx, _) = mean(samples.x0.iter().copied());
    let (my, _) = mean(samples.y0.iter().copied());
    let ssx: f64 = samples.x0.iter().map(|x| (x - mx) * (x - mx)).sum();
    let ssy: f64 = samples.y0.iter().map(|y| (y - my) * (y - my)).sum();
    let sigma_bw2 = (ssx + ssy) / (2.0 * (nf - 1.0));
    let (mean_s, _) = mean(samples.s.iter().copied());
    let (mean_s2, _) = mean(samples.s.iter().map(|s| s * s));
    let (mean_x2, _) = mean(samples.x0.iter().map(|x| x * x));
    let (mean_x4, _) = mean(samples.x0.iter().map(|x| x.powi(4)));
    let (mean_sx2, _) = mean(samples.s.iter().zip(&samples.x0).map(|(s, x)| s * x * x));
    let var_s = mean_s2 - mean_s * mean_s;
    let var_x2 = mean_x4 - mean_x2 * mean_x2;
    if var_s <= 0.0 || var_x2 <= 0.0 {
        return Err(StatsError::Degenerate(
            "zero variance in S or x0^2; correlation undefined".into(),
        ));
    }
    let corr = (mean_sx2 - mean_s * mean_x2) / (var_s * var_x2).sqrt();
    Ok(EmpiricalSummary {
        n,
        mean_eta,
        mean_eta_sq,
        mean_sqrt_eta,
        var_eta,
        sigma_bw2,
        mean_s,
        mean_s2,
        corr_s_x0sq: corr.clamp(-1.0, 1.0),
    })
}

impl EmpiricalSummary {
    /// The transmittance moments of the sample, ready for calibration.
    pub fn eta_moments(&self) -> Result<EtaMoments, StatsError> {
        Ok(EtaMoments::new(
            self.mean_eta,
            self.mean_eta_sq,
            Some(self.mean_sqrt_eta),
        )?)
    }
}

/// Kolmogorov-Smirnov distance `sup |F_N - F|` between the empirical CDF of
/// `sample` and the reference CDF, evaluated exactly over the order
/// statistics.
pub fn ks_statistic<E>(
    sample: &[f64],
    mut cdf: impl FnMut(f64) -> Result<f64, E>,
) -> Result<f64, E> {
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite sample"));
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x)?;
        let upper = ((i + 1) as f64 / n - f).abs();
        let lower = (i as f64 / n - f).abs();
        d = d.max(upper).max(lower);
    }
    Ok(d)
}

/// Parameter-estimation route for the log-normal reference inside
/// [`ks_lognormal`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogNormalFit {
    /// Exact maximum likelihood: sample mean and variance of ln S.
    MaxLikelihood,
    /// Match the first two raw moments of S.
    Moments,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsLogNormalReport {
    pub d_n: f64,
    pub mu: f64,
    pub sigma2: f64,
}

/// Fits a log-normal to the squared-spot-radius sample and returns the KS
/// distance of the sample to the fit,
/// `F(S) = erfc((mu - ln S)/(sigma sqrt(2)))/2` evaluated at the order
/// statistics.
pub fn ks_lognormal(s: &[f64], fit: LogNormalFit) -> Result<KsLogNormalReport, StatsError> {
    if s.len() < 10 {
        return Err(StatsError::TooFewSamples {
            needed: 10,
            got: s.len(),
        });
    }
    if s.iter().any(|&v| !(v > 0.0)) {
        return Err(StatsError::NonPositiveSample);
    }
    let n = s.len() as f64;
    let (mu, sigma2) = match fit {
        LogNormalFit::MaxLikelihood => {
            let mu = s.iter().map(|v| v.ln()).sum::<f64>() / n;
            let sigma2 = s.iter().map(|v| (v.ln() - mu) * (v.ln() - mu)).sum::<f64>() / n;
            (mu, sigma2)
        }
        LogNormalFit::Moments => {
            let m1 = s.iter().sum::<f64>() / n;
            let m2 = s.iter().map(|v| v * v).sum::<f64>() / n;
            let p = lognormal_from_s_moments(m1, m2)?;
            (p.mu, p.sigma2)
        }
    };
    if sigma2 <= 0.0 {
        return Err(StatsError::Degenerate(
            "constant sample: log-normal fit has zero variance".into(),
        ));
    }
    let sigma = sigma2.sqrt();
    let d_n = ks_statistic::<StatsError>(s, |v| {
        Ok(0.5 * erfc((mu - v.ln()) / (sigma * std::f64::consts::SQRT_2)))
    })?;
    Ok(KsLogNormalReport { d_n, mu, sigma2 })
}

/// KS distance between a transmittance sample and a calibrated model CDF.
pub fn ks_pdt(eta: &[f64], model: &CircularBeamPdt) -> Result<f64, StatsError> {
    if eta.len() < 10 {
        return Err(StatsError::TooFewSamples {
            needed: 10,
            got: eta.len(),
        });
    }
    Ok(ks_statistic(eta, |e| model.cdf(e))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityKind {
    /// Freedman-Diaconis histogram.
    Histogram,
    /// Gaussian kernel estimate with Silverman bandwidth.
    Kernel,
}

/// A density tabulated on a grid with per-point quadrature weights, so that
/// `sum(density * weight)` is its integral.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedDensity {
    pub x: Vec<f64>,
    pub density: Vec<f64>,
    pub weight: Vec<f64>,
}

impl TabulatedDensity {
    pub fn integral(&self) -> f64 {
        self.density
            .iter()
            .zip(&self.weight)
            .map(|(d, w)| d * w)
            .sum()
    }

    /// Two-column CSV (x, density) ready for plotting.
    pub fn to_csv(&self, x_label: &str) -> String {
        let mut out = format!("{x_label},density\n");
        for (x, d) in self.x.iter().zip(&self.density) {
            out.push_str(&format!("{x},{d}\n"));
        }
        out
    }
}

fn quartiles(sorted: &[f64]) -> (f64, f64) {
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        if i + 1 < sorted.len() {
            sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
        } else {
            sorted[i]
        }
    };
    (q(0.25), q(0.75))
}

/// Nonparametric density estimate of a positive or real sample.
pub fn density_estimate(sample: &[f64], kind: DensityKind) -> Result<TabulatedDensity, StatsError> {
    let n = sample.len();
    if n < 10 {
        return Err(StatsError::TooFewSamples { needed: 10, got: n });
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite sample"));
    let (lo, hi) = (sorted[0], sorted[n - 1]);
    let (q1, q3) = quartiles(&sorted);
    let iqr = q3 - q1;
    if !(hi > lo) {
        return Err(StatsError::Degenerate("constant sample".into()));
    }
    let nf = n as f64;
    match kind {
        DensityKind::Histogram => {
            let width = if iqr > 0.0 {
                2.0 * iqr / nf.cbrt()
            } else {
                (hi - lo) / nf.cbrt()
            };
            let bins = (((hi - lo) / width).ceil() as usize).clamp(1, n);
            let width = (hi - lo) / bins as f64;
            let mut counts = vec![0usize; bins];
            for &v in &sorted {
                let b = (((v - lo) / width) as usize).min(bins - 1);
                counts[b] += 1;
            }
            let x = (0..bins)
                .map(|b| lo + (b as f64 + 0.5) * width)
                .collect();
            let density = counts.iter().map(|&c| c as f64 / (nf * width)).collect();
            Ok(TabulatedDensity {
                x,
                density,
                weight: vec![width; bins],
            })
        }
        DensityKind::Kernel => {
            let mean = sorted.iter().sum::<f64>() / nf;
            let sd = (sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (nf - 1.0))
                .sqrt();
            let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
            let h = 0.9 * spread * nf.powf(-0.2);
            if !(h > 0.0) {
                return Err(StatsError::Degenerate("zero kernel bandwidth".into()));
            }
            // Grid padded by 4h so the Gaussian tails leave < 1e-4 outside.
            let (a, b) = (lo - 4.0 * h, hi + 4.0 * h);
            let points = 401usize;
            let dx = (b - a) / (points - 1) as f64;
            let mut x = Vec::with_capacity(points);
            let mut density = Vec::with_capacity(points);
            let norm = 1.0 / (nf * h * (2.0 * std::f64::consts::PI).sqrt());
            for p in 0..points {
                let xp = a + p as f64 * dx;
                // Kernels beyond 8 bandwidths contribute < 1e-14 each.
                let start = sorted.partition_point(|&v| v < xp - 8.0 * h);
                let end = sorted.partition_point(|&v| v <= xp + 8.0 * h);
                let sum: f64 = sorted[start..end]
                    .iter()
                    .map(|&v| (-0.5 * ((xp - v) / h).powi(2)).exp())
                    .sum();
                x.push(xp);
                density.push(norm * sum);
            }
            // Trapezoid weights.
            let mut weight = vec![dx; points];
            weight[0] = dx / 2.0;
            weight[points - 1] = dx / 2.0;
            Ok(TabulatedDensity { x, density, weight })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelConfig;
    use crate::numerics::RngStream;
    use crate::pdt::Convention;
    use crate::simulator::GridSpec;
    use approx::assert_relative_eq;

    fn toy_set(eta: Vec<f64>, x0: Vec<f64>, y0: Vec<f64>, s: Vec<f64>) -> SampleSet {
        let config = ChannelConfig::reference(1000.0);
        let grid = GridSpec::for_channel(&config, 256, 64).unwrap();
        SampleSet {
            eta,
            x0,
            y0,
            s,
            seed: 0,
            aperture_m: config.aperture_m,
            grid,
            config,
        }
    }

    #[test]
    fn hand_sample_moments() {
        let set = toy_set(
            vec![0.1, 0.2, 0.3, 0.4],
            vec![1e-3, -2e-3, 3e-3, -4e-3],
            vec![0.0, 1e-3, -1e-3, 2e-3],
            vec![1e-4, 2e-4, 3e-4, 4e-4],
        );
        let sum = summarize(&set).unwrap();
        assert_relative_eq!(sum.mean_eta, 0.25);
        assert_relative_eq!(sum.mean_eta_sq, 0.075);
        assert_relative_eq!(sum.var_eta, 0.05 / 3.0, max_relative = 1e-14);
    }

    #[test]
    fn constant_sample_is_degenerate() {
        let set = toy_set(
            vec![0.5; 4],
            vec![1e-3; 4],
            vec![1e-3; 4],
            vec![2e-4; 4],
        );
        assert!(matches!(
            summarize(&set),
            Err(StatsError::Degenerate(_))
        ));
    }

    #[test]
    fn exact_linear_relation_gives_unit_correlation() {
        let x0 = vec![1e-3, -2e-3, 3e-3, -4e-3, 5e-4];
        let s: Vec<f64> = x0.iter().map(|x| 50.0 * x * x).collect();
        let n = x0.len();
        let set = toy_set(vec![0.5; n], x0, vec![0.0; n], s);
        let sum = summarize(&set).unwrap();
        assert_relative_eq!(sum.corr_s_x0sq, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn summary_is_permutation_invariant() {
        let mut rng = RngStream::new(5, 0);
        let n = 50;
        let eta: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let x0: Vec<f64> = (0..n).map(|_| 1e-3 * rng.normal()).collect();
        let y0: Vec<f64> = (0..n).map(|_| 1e-3 * rng.normal()).collect();
        let s: Vec<f64> = (0..n).map(|_| 1e-4 * (1.0 + rng.uniform())).collect();
        let set = toy_set(eta.clone(), x0.clone(), y0.clone(), s.clone());
        let perm: Vec<usize> = (0..n).rev().collect();
        let pick = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let shuffled = toy_set(pick(&eta), pick(&x0), pick(&y0), pick(&s));
        let a = summarize(&set).unwrap();
        let b = summarize(&shuffled).unwrap();
        assert_relative_eq!(a.mean_eta, b.mean_eta, max_relative = 1e-13);
        assert_relative_eq!(a.corr_s_x0sq, b.corr_s_x0sq, max_relative = 1e-12);
        assert_relative_eq!(a.sigma_bw2, b.sigma_bw2, max_relative = 1e-12);
    }

    #[test]
    fn ks_lognormal_accepts_true_lognormal() {
        let mut rng = RngStream::new(11, 0);
        let n = 10_000;
        let (mu, sigma) = (-8.0f64, 0.3f64);
        let s: Vec<f64> = (0..n).map(|_| (mu + sigma * rng.normal()).exp()).collect();
        let gate = 1.63 / (n as f64).sqrt();
        let mle = ks_lognormal(&s, LogNormalFit::MaxLikelihood).unwrap();
        assert!(mle.d_n < gate, "MLE D_N {} >= {gate}", mle.d_n);
        assert!((mle.mu - mu).abs() < 0.02);
        let mm = ks_lognormal(&s, LogNormalFit::Moments).unwrap();
        assert!(mm.d_n < gate, "moment D_N {} >= {gate}", mm.d_n);
        assert!((0.0..=1.0).contains(&mle.d_n));
    }

    #[test]
    fn ks_lognormal_rejects_bad_input() {
        assert!(matches!(
            ks_lognormal(&[1.0; 5], LogNormalFit::MaxLikelihood),
            Err(StatsError::TooFewSamples { .. })
        ));
        let mut s = vec![1.0; 12];
        s[3] = -1.0;
        assert!(matches!(
            ks_lognormal(&s, LogNormalFit::MaxLikelihood),
            Err(StatsError::NonPositiveSample)
        ));
    }

    #[test]
    fn ks_is_invariant_under_monotone_reparameterization() {
        let mut rng = RngStream::new(21, 0);
        let eta: Vec<f64> = (0..200).map(|_| rng.uniform()).collect();
        // Reference CDF F(x) = x on [0, 1]; transformed sample eta^2 against
        // F(sqrt(x)) must give the identical statistic.
        let d1 = ks_statistic::<StatsError>(&eta, |x| Ok(x.clamp(0.0, 1.0))).unwrap();
        let squared: Vec<f64> = eta.iter().map(|e| e * e).collect();
        let d2 =
            ks_statistic::<StatsError>(&squared, |x| Ok(x.sqrt().clamp(0.0, 1.0))).unwrap();
        assert_relative_eq!(d1, d2, max_relative = 1e-14);
    }

    fn test_model() -> CircularBeamPdt {
        CircularBeamPdt::new(
            4e-6,
            crate::pdt::LogNormalParams::new((2.89e-4f64).ln(), 0.05).unwrap(),
            0.012,
            Convention::GaussianConsistent,
        )
        .unwrap()
    }

    #[test]
    fn ks_pdt_self_consistency() {
        let model = test_model();
        assert!((model.cdf(1.0).unwrap() - 1.0).abs() < 1e-6);
        let n = 10_000;
        let sample = model.sample(n, &mut RngStream::new(31, 0)).unwrap();
        let d = ks_pdt(&sample, &model).unwrap();
        let gate = 1.63 / (n as f64).sqrt();
        assert!(d < gate, "D_N {d} >= {gate}");
    }

    #[test]
    fn histogram_density_normalizes() {
        let mut rng = RngStream::new(41, 0);
        let sample: Vec<f64> = (0..5000).map(|_| rng.uniform()).collect();
        let hist = density_estimate(&sample, DensityKind::Histogram).unwrap();
        assert!((hist.integral() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn kernel_density_of_uniform_sample() {
        let mut rng = RngStream::new(43, 0);
        let n = 100_000;
        let sample: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let kde = density_estimate(&sample, DensityKind::Kernel).unwrap();
        assert!((kde.integral() - 1.0).abs() < 1e-3, "integral {}", kde.integral());
        for (x, d) in kde.x.iter().zip(&kde.density) {
            if (0.1..=0.9).contains(x) {
                assert!((d - 1.0).abs() < 0.05, "density {d} at {x}");
            }
        }
        let csv = kde.to_csv("x");
        assert!(csv.starts_with("x,density\n"));
        assert_eq!(csv.lines().count(), kde.x.len() + 1);
    }
}
