//! Command-line orchestration: configuration ingestion, the
//! derive/simulate/calibrate/validate/apply pipelines, and artifact emission.
//!
//! Every run writes a versioned JSON manifest listing the resolved
//! configuration, seed, and all output files; replaying the recorded argv
//! with the same seed reproduces the CSV outputs byte for byte.

use crate::analytic::{beam_stats_analytic, beam_wandering_prefactor, eta_moments_analytic};
use crate::channel::{derive_channel, ChannelConfig};
use crate::matching::{
    lognormal_from_s_moments, match_eta_moments, transmittance_from_db, EtaMoments, RescaledPdt,
};
use crate::pdt::{CircularBeamPdt, Convention};
use crate::quantum::{
    click_statistics, input_gaussian_moments, mandel_q_out, squeezing_out, ClickDetector,
    EtaAverager, GaussianInputState,
};
use crate::simulator::{run_ensemble, GridSpec, SampleSet};
use crate::stats::{ks_lognormal, ks_statistic, summarize, LogNormalFit};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Failure modes with their process exit codes: usage 2, configuration 3,
/// runtime 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Run(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Config(m) | CliError::Run(m) => m,
        }
    }
}

/// Versioned record of one invocation: what ran, with which inputs, and
/// which files it produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub command: String,
    pub argv: Vec<String>,
    pub tool_version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<ChannelConfig>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub steps: Vec<String>,
    pub wall_clock_s: f64,
}

#[derive(Parser, Debug)]
#[command(
    name = "turbulux",
    version,
    about = "Transmittance statistics of turbulent free-space optical channels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads for the simulator (0 = default pool); falls back to
    /// the TURBULUX_WORKERS environment variable.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Report format for scalar outputs.
    #[arg(long, global = true, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
    /// Print the execution plan as JSON and exit without writing files.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Derived channel parameters and analytic beam/transmittance moments.
    Params(ParamsArgs),
    /// Monte-Carlo ensemble of (eta, x0, y0, S) samples.
    Simulate(SimulateArgs),
    /// Calibrate the circular-beam transmittance model.
    Calibrate(CalibrateArgs),
    /// Calibrate and tabulate the model density and CDF.
    Pdt(CalibrateArgs),
    /// Goodness of fit of a calibrated model against a sample set.
    Validate(ValidateArgs),
    /// Nonclassicality transfer sweeps (Mandel Q, Binomial Q_N, squeezing).
    Quantum(QuantumArgs),
}

#[derive(Args, Debug)]
struct ParamsArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum, default_value_t = VariantArg::GaussianConsistent)]
    variant: VariantArg,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Number of realizations.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Transverse grid points per side.
    #[arg(long, default_value_t = 256)]
    grid: usize,
    #[arg(long, default_value_t = 4242)]
    seed: u64,
}

#[derive(Args, Debug, Clone)]
struct CalibrateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::EtaMoments)]
    method: MethodArg,
    /// Where the matched moments come from.
    #[arg(long, value_enum, default_value_t = SourceArg::Analytic)]
    source: SourceArg,
    /// Sample set CSV (required when --source sample).
    #[arg(long)]
    sample: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = VariantArg::GaussianConsistent)]
    variant: VariantArg,
    /// Constant (deterministic) loss in dB, folded in by rescaling.
    #[arg(long)]
    loss_db: Option<f64>,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[command(flatten)]
    cal: CalibrateArgs,
}

#[derive(Args, Debug)]
struct QuantumArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    quantity: QuantityArg,
    #[arg(long, default_value_t = 0.0)]
    alpha0: f64,
    #[arg(long, default_value_t = 0.0)]
    chi: f64,
    /// On-off detectors for the binomial quantity.
    #[arg(long, default_value_t = 7)]
    detectors: usize,
    /// Aperture radii (mm) to sweep with analytic calibration.
    #[arg(long = "aperture-mm", value_delimiter = ',')]
    aperture_mm: Vec<f64>,
    /// Sample set CSVs; each contributes one sweep point at its own
    /// aperture, calibrated from its moments, plus a direct sample average.
    #[arg(long)]
    sample: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = MethodArg::EtaMoments)]
    method: MethodArg,
    #[arg(long, value_enum, default_value_t = VariantArg::GaussianConsistent)]
    variant: VariantArg,
    #[arg(long)]
    loss_db: Option<f64>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum VariantArg {
    AsPrinted,
    GaussianConsistent,
}

impl From<VariantArg> for Convention {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::AsPrinted => Convention::AsPrinted,
            VariantArg::GaussianConsistent => Convention::GaussianConsistent,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum MethodArg {
    SMoments,
    EtaMoments,
}

impl MethodArg {
    fn name(&self) -> &'static str {
        match self {
            MethodArg::SMoments => "s-moments",
            MethodArg::EtaMoments => "eta-moments",
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum SourceArg {
    Analytic,
    Sample,
}

impl SourceArg {
    fn name(&self) -> &'static str {
        match self {
            SourceArg::Analytic => "analytic",
            SourceArg::Sample => "sample",
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum QuantityArg {
    Mandel,
    Binomial,
    Squeezing,
}

impl QuantityArg {
    fn name(&self) -> &'static str {
        match self {
            QuantityArg::Mandel => "mandel",
            QuantityArg::Binomial => "binomial",
            QuantityArg::Squeezing => "squeezing",
        }
    }
}

/// A parsed invocation plus its planned manifest.
#[derive(Debug)]
pub struct Plan {
    cli: Cli,
    manifest: RunManifest,
}

impl Plan {
    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn dry_run(&self) -> bool {
        self.cli.dry_run
    }
}

fn load_config(path: &Path) -> Result<ChannelConfig, CliError> {
    let config = ChannelConfig::load(path)
        .map_err(|e| CliError::Config(format!("channel: {e} ({})", path.display())))?;
    config
        .validate()
        .map_err(|e| CliError::Config(format!("channel: {e}")))?;
    Ok(config)
}

fn report_name(base: &str, format: FormatArg) -> String {
    match format {
        FormatArg::Csv => format!("{base}.csv"),
        FormatArg::Json => format!("{base}.json"),
    }
}

/// Parses argv and lays out the run: resolved configuration, pipeline steps,
/// and the exact files the run will produce.
pub fn parse_and_plan(argv: &[String]) -> Result<Plan, CliError> {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            return Err(CliError::Usage(e.to_string()));
        }
    };
    let mut steps = Vec::new();
    let mut outputs = Vec::new();
    let mut inputs = Vec::new();
    let mut seed = None;
    let out = |name: &str, cli: &Cli| cli.out.join(name).display().to_string();
    let (command, config) = match &cli.command {
        Command::Params(a) => {
            let config = load_config(&a.config)?;
            inputs.push(a.config.display().to_string());
            steps.push("derive channel parameters".into());
            steps.push("evaluate analytic beam and transmittance moments".into());
            outputs.push(out(&report_name("params", cli.format), &cli));
            ("params", Some(config))
        }
        Command::Simulate(a) => {
            let config = load_config(&a.config)?;
            if a.samples == 0 {
                return Err(CliError::Config("simulate: need --samples >= 1".into()));
            }
            inputs.push(a.config.display().to_string());
            seed = Some(a.seed);
            steps.push(format!(
                "run {} realizations on a {}^2 grid",
                a.samples, a.grid
            ));
            outputs.push(out("samples.csv", &cli));
            outputs.push(out("samples.json", &cli));
            ("simulate", Some(config))
        }
        Command::Calibrate(a) | Command::Pdt(a) => {
            let config = load_config(&a.config)?;
            inputs.push(a.config.display().to_string());
            if a.source == SourceArg::Sample {
                let sample = a.sample.as_ref().ok_or_else(|| {
                    CliError::Usage("--source sample requires --sample PATH".into())
                })?;
                inputs.push(sample.display().to_string());
            }
            steps.push(format!(
                "calibrate: {} matching from {} moments",
                a.method.name(),
                a.source.name()
            ));
            outputs.push(out("model.json", &cli));
            if matches!(cli.command, Command::Pdt(_)) {
                steps.push("tabulate density and CDF".into());
                outputs.push(out("pdt_density.csv", &cli));
                outputs.push(out("pdt_cdf.csv", &cli));
                ("pdt", Some(config))
            } else {
                ("calibrate", Some(config))
            }
        }
        Command::Validate(a) => {
            let config = load_config(&a.cal.config)?;
            let sample = a.cal.sample.as_ref().ok_or_else(|| {
                CliError::Usage("validate requires --sample PATH".into())
            })?;
            inputs.push(a.cal.config.display().to_string());
            inputs.push(sample.display().to_string());
            steps.push(format!(
                "calibrate: {} matching from {} moments",
                a.cal.method.name(),
                a.cal.source.name()
            ));
            steps.push("Kolmogorov-Smirnov tests vs the sample".into());
            outputs.push(out(&report_name("validate", cli.format), &cli));
            ("validate", Some(config))
        }
        Command::Quantum(a) => {
            let config = load_config(&a.config)?;
            if a.aperture_mm.is_empty() && a.sample.is_empty() {
                return Err(CliError::Usage(
                    "quantum requires --aperture-mm or --sample".into(),
                ));
            }
            inputs.push(a.config.display().to_string());
            for s in &a.sample {
                inputs.push(s.display().to_string());
            }
            steps.push(format!(
                "sweep {} over {} aperture points and {} sample sets",
                a.quantity.name(),
                a.aperture_mm.len(),
                a.sample.len()
            ));
            outputs.push(out("quantum.csv", &cli));
            ("quantum", Some(config))
        }
    };
    outputs.push(out("manifest.json", &cli));
    Ok(Plan {
        manifest: RunManifest {
            schema: "v1".into(),
            command: command.into(),
            argv: argv.to_vec(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config,
            inputs,
            outputs,
            steps,
            wall_clock_s: 0.0,
        },
        cli,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Run(format!("io: failed to write {}: {e}", path.display())))
}

/// Scalar report rendered as key,value CSV or a flat JSON object.
fn write_report(
    path: &Path,
    rows: &[(&str, f64)],
    format: FormatArg,
) -> Result<(), CliError> {
    let mut text = String::new();
    match format {
        FormatArg::Csv => {
            text.push_str("key,value\n");
            for (k, v) in rows {
                let _ = writeln!(text, "{k},{v}");
            }
        }
        FormatArg::Json => {
            let map: serde_json::Map<String, serde_json::Value> = rows
                .iter()
                .map(|(k, v)| ((*k).to_string(), serde_json::json!(v)))
                .collect();
            text = serde_json::to_string_pretty(&map).expect("report serializes");
            text.push('\n');
        }
    }
    write_text(path, &text)
}

/// Calibrated model bundled with the constant-loss factor and provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredModel {
    model: CircularBeamPdt,
    eta_c: f64,
    method: String,
    source: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    residual_norm: Option<f64>,
}

fn load_sample(path: &Path) -> Result<SampleSet, CliError> {
    SampleSet::load(path).map_err(|e| CliError::Run(format!("simulator: {e}")))
}

fn resolve_eta_c(config: &ChannelConfig, loss_db: Option<f64>) -> f64 {
    loss_db.map(transmittance_from_db).unwrap_or(config.eta_c)
}

fn calibrate(args: &CalibrateArgs, config: &ChannelConfig) -> Result<StoredModel, CliError> {
    let convention: Convention = args.variant.into();
    let (sigma_bw2, mean_s, mean_s2, targets): (f64, f64, f64, Option<EtaMoments>) =
        match args.source {
            SourceArg::Analytic => {
                let beam =
                    beam_stats_analytic(config).map_err(|e| CliError::Run(format!("analytic: {e}")))?;
                let targets = match args.method {
                    MethodArg::SMoments => None,
                    MethodArg::EtaMoments => {
                        let m = eta_moments_analytic(config, convention)
                            .map_err(|e| CliError::Run(format!("analytic: {e}")))?;
                        if !m.valid_pair {
                            return Err(CliError::Run(format!(
                                "analytic: moment pair <eta> = {}, <eta^2> = {} is not a valid \
                                 distribution's; use --variant gaussian-consistent",
                                m.moments.mean, m.moments.mean_sq
                            )));
                        }
                        Some(m.moments)
                    }
                };
                (
                    beam.stats.sigma_bw2,
                    beam.stats.mean_s,
                    beam.stats.mean_s2,
                    targets,
                )
            }
            SourceArg::Sample => {
                let path = args.sample.as_ref().expect("checked during planning");
                let set = load_sample(path)?;
                let summary = summarize(&set).map_err(|e| CliError::Run(format!("stats: {e}")))?;
                let targets = match args.method {
                    MethodArg::SMoments => None,
                    MethodArg::EtaMoments => Some(
                        summary
                            .eta_moments()
                            .map_err(|e| CliError::Run(format!("stats: {e}")))?,
                    ),
                };
                (summary.sigma_bw2, summary.mean_s, summary.mean_s2, targets)
            }
        };
    let init = lognormal_from_s_moments(mean_s, mean_s2)
        .map_err(|e| CliError::Run(format!("matching: {e}")))?;
    let (lognormal, residual_norm) = match targets {
        None => (init, None),
        Some(targets) => {
            let report = match_eta_moments(&targets, sigma_bw2, config.aperture_m, &init)
                .map_err(|e| CliError::Run(format!("matching: {e}")))?;
            (report.lognormal, Some(report.residual_norm))
        }
    };
    let model = CircularBeamPdt::new(sigma_bw2, lognormal, config.aperture_m, convention)
        .map_err(|e| CliError::Run(format!("pdt: {e}")))?;
    Ok(StoredModel {
        model,
        eta_c: resolve_eta_c(config, args.loss_db),
        method: args.method.name().into(),
        source: args.source.name().into(),
        residual_norm,
    })
}

fn rescaled(stored: &StoredModel) -> Result<RescaledPdt, CliError> {
    RescaledPdt::new(stored.model.clone(), stored.eta_c)
        .map_err(|e| CliError::Run(format!("matching: {e}")))
}

fn run_params(args: &ParamsArgs, cli: &Cli, config: &ChannelConfig) -> Result<(), CliError> {
    let derived = derive_channel(config).map_err(|e| CliError::Run(format!("channel: {e}")))?;
    let mut rows = vec![
        ("w0_m", config.w0()),
        ("wavenumber_1_per_m", derived.wavenumber),
        ("fresnel_number", derived.fresnel),
        ("rytov_parameter", derived.rytov),
        ("coherence_radius_m", derived.coherence_radius),
    ];
    match beam_stats_analytic(config) {
        Ok(beam) => {
            rows.push(("sigma_bw2_m2", beam.stats.sigma_bw2));
            rows.push(("mean_s_m2", beam.stats.mean_s));
            rows.push(("mean_s2_m4", beam.stats.mean_s2));
            rows.push(("w_lt_m", beam.w_lt));
            rows.push(("weak_turbulence", f64::from(u8::from(beam.weak_turbulence))));
        }
        Err(e) => eprintln!("analytic beam moments unavailable: {e}"),
    }
    match eta_moments_analytic(config, args.variant.into()) {
        Ok(m) => {
            rows.push(("mean_eta", m.moments.mean));
            rows.push(("mean_eta_sq", m.moments.mean_sq));
            rows.push(("eta_pair_valid", f64::from(u8::from(m.valid_pair))));
        }
        Err(e) => eprintln!("analytic transmittance moments unavailable: {e}"),
    }
    if let Ok(p) = beam_wandering_prefactor(config) {
        rows.push(("beam_wandering_prefactor", p));
    }
    write_report(
        &cli.out.join(report_name("params", cli.format)),
        &rows,
        cli.format,
    )
}

fn resolve_workers(cli: &Cli) -> Result<usize, CliError> {
    if let Some(w) = cli.workers {
        return Ok(w);
    }
    match std::env::var("TURBULUX_WORKERS") {
        Ok(v) => v
            .parse()
            .map_err(|_| CliError::Usage(format!("TURBULUX_WORKERS is not a count: {v:?}"))),
        Err(_) => Ok(0),
    }
}

fn run_simulate(args: &SimulateArgs, cli: &Cli, config: &ChannelConfig) -> Result<(), CliError> {
    let workers = resolve_workers(cli)?;
    let grid = GridSpec::for_channel(config, args.grid, 512)
        .map_err(|e| CliError::Config(format!("simulator: {e}")))?;
    let set = run_ensemble(config, &grid, args.samples, args.seed, workers)
        .map_err(|e| CliError::Run(format!("simulator: {e}")))?;
    set.save(&cli.out.join("samples.csv"))
        .map_err(|e| CliError::Run(format!("simulator: {e}")))
}

fn tabulate_pdt(stored: &StoredModel, cli: &Cli) -> Result<(), CliError> {
    let model = rescaled(stored)?;
    let points = 511usize;
    let mut density = String::from("eta,density\n");
    let mut cdf = String::from("eta,cdf\n");
    for j in 1..=points {
        let eta = stored.eta_c * j as f64 / (points + 1) as f64;
        let d = model
            .density(eta)
            .map_err(|e| CliError::Run(format!("pdt: {e}")))?;
        let c = model
            .cdf(eta)
            .map_err(|e| CliError::Run(format!("pdt: {e}")))?;
        let _ = writeln!(density, "{eta},{d}");
        let _ = writeln!(cdf, "{eta},{c}");
    }
    write_text(&cli.out.join("pdt_density.csv"), &density)?;
    write_text(&cli.out.join("pdt_cdf.csv"), &cdf)
}

fn run_validate(args: &ValidateArgs, cli: &Cli, config: &ChannelConfig) -> Result<(), CliError> {
    let stored = calibrate(&args.cal, config)?;
    write_text(
        &cli.out.join("model.json"),
        &serde_json::to_string_pretty(&stored).expect("model serializes"),
    )
    .ok();
    let path = args.cal.sample.as_ref().expect("checked during planning");
    let set = load_sample(path)?;
    let summary = summarize(&set).map_err(|e| CliError::Run(format!("stats: {e}")))?;
    let model = rescaled(&stored)?;
    let ks_eta = ks_statistic(&set.eta, |e| model.cdf(e))
        .map_err(|e| CliError::Run(format!("stats: {e}")))?;
    let ks_s = ks_lognormal(&set.s, LogNormalFit::MaxLikelihood)
        .map_err(|e| CliError::Run(format!("stats: {e}")))?;
    let rows = vec![
        ("n", summary.n as f64),
        ("mean_eta", summary.mean_eta),
        ("mean_eta_sq", summary.mean_eta_sq),
        ("var_eta", summary.var_eta),
        ("sigma_bw2_m2", summary.sigma_bw2),
        ("mean_s_m2", summary.mean_s),
        ("mean_s2_m4", summary.mean_s2),
        ("corr_s_x0sq", summary.corr_s_x0sq),
        ("ks_eta_model", ks_eta),
        ("ks_s_lognormal", ks_s.d_n),
        ("fit_mu", ks_s.mu),
        ("fit_sigma2", ks_s.sigma2),
        ("model_residual_norm", stored.residual_norm.unwrap_or(f64::NAN)),
    ];
    write_report(
        &cli.out.join(report_name("validate", cli.format)),
        &rows,
        cli.format,
    )
}

fn quantum_value(
    quantity: QuantityArg,
    state: &GaussianInputState,
    detectors: usize,
    averager: &EtaAverager,
) -> Result<f64, CliError> {
    let err = |e| CliError::Run(format!("quantum: {e}"));
    match quantity {
        QuantityArg::Mandel => {
            let input = input_gaussian_moments(state);
            mandel_q_out(input.mandel_q.unwrap_or(0.0), input.mean_n, averager).map_err(err)
        }
        QuantityArg::Binomial => {
            let detector = ClickDetector::new(detectors).map_err(err)?;
            let report =
                click_statistics(state, detector, averager, state.min_cutoff()).map_err(err)?;
            Ok(report.q_n.unwrap_or(f64::NAN))
        }
        QuantityArg::Squeezing => squeezing_out(state, averager).map_err(err),
    }
}

fn run_quantum(args: &QuantumArgs, cli: &Cli, config: &ChannelConfig) -> Result<(), CliError> {
    let state = GaussianInputState::new(args.alpha0, args.chi)
        .map_err(|e| CliError::Config(format!("quantum: {e}")))?;
    let eta_c = resolve_eta_c(config, args.loss_db);
    let has_samples = !args.sample.is_empty();
    let mut csv = if has_samples {
        String::from("a_mm,model,sample\n")
    } else {
        String::from("a_mm,model\n")
    };
    let cal_args = |config: &ChannelConfig, source: SourceArg, sample: Option<PathBuf>| {
        CalibrateArgs {
            config: args.config.clone(),
            method: args.method,
            source,
            sample,
            variant: args.variant,
            loss_db: args.loss_db,
        }
        .into_model(config)
    };
    for &a_mm in &args.aperture_mm {
        let mut cfg = config.clone();
        cfg.aperture_m = a_mm / 1000.0;
        let stored = cal_args(&cfg, SourceArg::Analytic, None)?;
        let averager = EtaAverager::model(stored.model.clone(), eta_c)
            .map_err(|e| CliError::Run(format!("quantum: {e}")))?;
        let value = quantum_value(args.quantity, &state, args.detectors, &averager)?;
        if has_samples {
            let _ = writeln!(csv, "{a_mm},{value},");
        } else {
            let _ = writeln!(csv, "{a_mm},{value}");
        }
    }
    for path in &args.sample {
        let set = load_sample(path)?;
        let mut cfg = set.config.clone();
        cfg.aperture_m = set.aperture_m;
        let stored = cal_args(&cfg, SourceArg::Sample, Some(path.clone()))?;
        let averager = EtaAverager::model(stored.model.clone(), eta_c)
            .map_err(|e| CliError::Run(format!("quantum: {e}")))?;
        let model_value = quantum_value(args.quantity, &state, args.detectors, &averager)?;
        let direct = EtaAverager::sample(set.eta.clone(), eta_c)
            .map_err(|e| CliError::Run(format!("quantum: {e}")))?;
        let sample_value = quantum_value(args.quantity, &state, args.detectors, &direct)?;
        let _ = writeln!(csv, "{},{model_value},{sample_value}", set.aperture_m * 1000.0);
    }
    write_text(&cli.out.join("quantum.csv"), &csv)
}

impl CalibrateArgs {
    fn into_model(self, config: &ChannelConfig) -> Result<StoredModel, CliError> {
        calibrate(&self, config)
    }
}

/// Runs a planned invocation; the manifest (with final wall-clock) is
/// written to the output directory before returning, also when the pipeline
/// fails.
pub fn execute(plan: Plan) -> i32 {
    let Plan { cli, mut manifest } = plan;
    let started = std::time::Instant::now();
    if let Err(e) = std::fs::create_dir_all(&cli.out) {
        eprintln!("error: cannot create {}: {e}", cli.out.display());
        return 1;
    }
    let config = manifest.config.clone().expect("all commands carry a config");
    let result = match &cli.command {
        Command::Params(a) => run_params(a, &cli, &config),
        Command::Simulate(a) => run_simulate(a, &cli, &config),
        Command::Calibrate(a) => calibrate(a, &config).and_then(|stored| {
            write_text(
                &cli.out.join("model.json"),
                &serde_json::to_string_pretty(&stored).expect("model serializes"),
            )
        }),
        Command::Pdt(a) => calibrate(a, &config).and_then(|stored| {
            write_text(
                &cli.out.join("model.json"),
                &serde_json::to_string_pretty(&stored).expect("model serializes"),
            )?;
            tabulate_pdt(&stored, &cli)
        }),
        Command::Validate(a) => run_validate(a, &cli, &config),
        Command::Quantum(a) => run_quantum(a, &cli, &config),
    };
    manifest.wall_clock_s = started.elapsed().as_secs_f64();
    let manifest_path = cli.out.join("manifest.json");
    if let Err(e) = write_text(
        &manifest_path,
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    ) {
        eprintln!("error: {}", e.message());
        return 1;
    }
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

/// Full entry point: parse, plan, and run (or print the plan for a dry run).
pub fn main_entry() -> i32 {
    let argv: Vec<String> = std::env::args().collect();
    match parse_and_plan(&argv) {
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
        Ok(plan) => {
            if plan.dry_run() {
                println!(
                    "{}",
                    serde_json::to_string_pretty(plan.manifest()).expect("manifest serializes")
                );
                0
            } else {
                execute(plan)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(args: &[&str]) -> Result<Plan, CliError> {
        let argv: Vec<String> = std::iter::once("turbulux".to_string())
            .chain(args.iter().map(|s| s.to_string()))
            .collect();
        parse_and_plan(&argv)
    }

    fn write_config(dir: &Path) -> PathBuf {
        let path = dir.join("channel.json");
        let config = ChannelConfig::reference(1000.0);
        std::fs::write(&path, serde_json::to_string(&config).unwrap()).unwrap();
        path
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        let err = plan(&["params", "--bogus"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn missing_config_is_config_error() {
        let err = plan(&["params", "--config", "/nonexistent/ch.json"]).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn zero_samples_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path());
        let err = plan(&[
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--samples",
            "0",
        ])
        .unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn pdt_plan_lists_calibrate_then_tabulate() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path());
        let plan = plan(&[
            "pdt",
            "--config",
            config.to_str().unwrap(),
            "--method",
            "eta-moments",
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .unwrap();
        let m = plan.manifest();
        assert_eq!(m.schema, "v1");
        assert_eq!(m.command, "pdt");
        assert!(m.steps[0].contains("calibrate: eta-moments"));
        assert!(m.steps[1].contains("tabulate"));
        assert!(m.outputs.iter().any(|o| o.ends_with("pdt_density.csv")));
        assert!(m.outputs.iter().any(|o| o.ends_with("manifest.json")));
    }

    #[test]
    fn sample_source_requires_sample_path() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path());
        let err = plan(&[
            "calibrate",
            "--config",
            config.to_str().unwrap(),
            "--source",
            "sample",
        ])
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
