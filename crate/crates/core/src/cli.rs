//! Command-line front end.
//!
//! Every subcommand takes the same flat parameter set. Parameters come from
//! an optional `key = value` file (`--config`), overridden by flags. The
//! merged configuration is validated, printed as JSON, and hashed; the hash
//! is written into every output file.
//!
//! Exit codes: 0 success, 1 error, 2 a computed quantity violated its bound.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::approximation::{
    check_regime, fit_scaling_exponent, run_justification, run_sweep, Horizon, JustificationConfig,
    JustificationReport, Regime, ScalingFit,
};
use crate::dnls::{l2_conserved, DnlsModel, EnvelopeState};
use crate::error::{LabError, Result};
use crate::integrators::{
    integrate_with, CsvTrajectoryWriter, DkgFlow, EnvelopeFlow, IntegratorConfig, Scheme,
};
use crate::lattice::{energy_dkg, sites, Dkg, LatticeState, ModelParams};
use crate::normal_form::{
    decay_certificate, fitted_thresholds, h_omega, keff_energy, sqrt_circulant, thresholds,
};
use crate::solitons::{
    breather_return_error, build_breather_initial, parse_seeds, solve_soliton, SolitonProfile,
};

/// Environment variable holding the worker count for `sweep`.
pub const WORKERS_ENV: &str = "DKG_LAB_WORKERS";

fn version() -> &'static str {
    static VERSION: std::sync::OnceLock<String> = std::sync::OnceLock::new();
    VERSION.get_or_init(|| {
        format!(
            "{} ({} build, {}-{})",
            env!("CARGO_PKG_VERSION"),
            if cfg!(debug_assertions) {
                "debug"
            } else {
                "release"
            },
            std::env::consts::ARCH,
            std::env::consts::OS,
        )
    })
}

#[derive(Debug, Parser)]
#[command(name = "dkg-lab", version = version(), about = "Discrete Klein-Gordon lattices and their dNLS envelopes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    SimulateDkg,
    SimulateDnls,
    Justify,
    JustifyExtended,
    Normalform,
    Thresholds,
    Soliton,
    BreatherReturn,
    Sweep,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate the dKG chain with Störmer–Verlet.
    SimulateDkg(Flags),
    /// Integrate an envelope equation with RK4.
    SimulateDnls(Flags),
    /// Chain vs. ansatz error on [0, tau0/rho]; `--sweep` fits the eps exponent.
    Justify(Flags),
    /// Chain vs. ansatz error on [0, A |ln rho| / rho].
    JustifyExtended(Flags),
    /// Coefficients of the square-root circulant and their decay.
    Normalform(Flags),
    /// Energy thresholds of the nonlinear normal form.
    Thresholds(Flags),
    /// Stationary envelope soliton by Newton iteration.
    Soliton(Flags),
    /// Period-by-period return error of the ansatz breather.
    BreatherReturn(Flags),
    /// Parallel `justify` sweep; output is independent of the worker count.
    Sweep(Flags),
}

impl Command {
    fn split(self) -> (CommandKind, Flags) {
        match self {
            Command::SimulateDkg(f) => (CommandKind::SimulateDkg, f),
            Command::SimulateDnls(f) => (CommandKind::SimulateDnls, f),
            Command::Justify(f) => (CommandKind::Justify, f),
            Command::JustifyExtended(f) => (CommandKind::JustifyExtended, f),
            Command::Normalform(f) => (CommandKind::Normalform, f),
            Command::Thresholds(f) => (CommandKind::Thresholds, f),
            Command::Soliton(f) => (CommandKind::Soliton, f),
            Command::BreatherReturn(f) => (CommandKind::BreatherReturn, f),
            Command::Sweep(f) => (CommandKind::Sweep, f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Standard,
    Generalized,
    Normalform,
}

/// How `rho` follows `eps` when not given explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RhoRule {
    Eps,
    Eps2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Soliton,
    Random,
}

/// Raw flags; `None` means "not given" so that the config file can fill it.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// `key = value` file merged under the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long, value_enum)]
    pub rho_rule: Option<RhoRule>,
    /// Half size; the chain has 2N+1 sites.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub tau0: Option<f64>,
    /// Constant A of the extended horizon.
    #[arg(long)]
    pub horizon_a: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// End time for the simulate commands (model clock).
    #[arg(long)]
    pub t_end: Option<f64>,
    /// Comma-separated list of eps values.
    #[arg(long, value_delimiter = ',')]
    pub sweep: Option<Vec<f64>>,
    /// Record every `stride` steps.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Initial deviation in units of the bound scale.
    #[arg(long)]
    pub perturbation: Option<f64>,
    #[arg(long)]
    pub omega_s: Option<f64>,
    #[arg(long)]
    pub nu: Option<f64>,
    /// Soliton seed sites, e.g. `0:+,1:-`.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub periods: Option<usize>,
    #[arg(long)]
    pub order: Option<u8>,
    #[arg(long)]
    pub c_h1: Option<f64>,
    #[arg(long)]
    pub c_zeta0: Option<f64>,
    /// Reference constant for the extended-horizon check.
    #[arg(long)]
    pub c_ref: Option<f64>,
    /// Largest accepted error / bound-scale ratio.
    #[arg(long)]
    pub max_ratio: Option<f64>,
    #[arg(long, value_enum)]
    pub init: Option<InitKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write a log-log SVG for sweeps.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub svg: Option<bool>,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| LabError::Config(format!("cannot parse {key} = {value:?}")))
}

fn parse_enum<T: ValueEnum>(key: &str, value: &str) -> Result<T> {
    T::from_str(value, true)
        .map_err(|_| LabError::Config(format!("cannot parse {key} = {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_value(key, s.trim()))
        .collect()
}

impl Flags {
    /// Fills the fields not given on the command line from a config file.
    fn merge_file(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                LabError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim().replace('-', "_");
            let value = value.trim();
            macro_rules! fill {
                ($field:ident, $parse:expr) => {
                    if self.$field.is_none() {
                        self.$field = Some($parse);
                    }
                };
            }
            match key.as_str() {
                "out" => fill!(out, PathBuf::from(value)),
                "epsilon" => fill!(epsilon, parse_value(&key, value)?),
                "rho" => fill!(rho, parse_value(&key, value)?),
                "rho_rule" => fill!(rho_rule, parse_enum(&key, value)?),
                "n" => fill!(n, parse_value(&key, value)?),
                "model" => fill!(model, parse_enum(&key, value)?),
                "tau0" => fill!(tau0, parse_value(&key, value)?),
                "horizon_a" => fill!(horizon_a, parse_value(&key, value)?),
                "alpha" => fill!(alpha, parse_value(&key, value)?),
                "dt" => fill!(dt, parse_value(&key, value)?),
                "t_end" => fill!(t_end, parse_value(&key, value)?),
                "sweep" => fill!(sweep, parse_list(&key, value)?),
                "stride" => fill!(stride, parse_value(&key, value)?),
                "perturbation" => fill!(perturbation, parse_value(&key, value)?),
                "omega_s" => fill!(omega_s, parse_value(&key, value)?),
                "nu" => fill!(nu, parse_value(&key, value)?),
                "seeds" => fill!(seeds, value.to_string()),
                "periods" => fill!(periods, parse_value(&key, value)?),
                "order" => fill!(order, parse_value(&key, value)?),
                "c_h1" => fill!(c_h1, parse_value(&key, value)?),
                "c_zeta0" => fill!(c_zeta0, parse_value(&key, value)?),
                "c_ref" => fill!(c_ref, parse_value(&key, value)?),
                "max_ratio" => fill!(max_ratio, parse_value(&key, value)?),
                "init" => fill!(init, parse_enum(&key, value)?),
                "seed" => fill!(seed, parse_value(&key, value)?),
                "svg" => fill!(svg, parse_value(&key, value)?),
                _ => {
                    return Err(LabError::Config(format!(
                        "line {}: unknown key {key:?}",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Fully resolved experiment. Serialized (without the output directory) it is
/// the canonical form that gets hashed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub command: CommandKind,
    pub epsilon: f64,
    /// One `rho` per entry of `sweep`, or a single value.
    pub rho: Vec<f64>,
    pub rho_rule: Option<RhoRule>,
    pub n: usize,
    pub model: ModelKind,
    pub tau0: f64,
    pub horizon_a: f64,
    pub alpha: f64,
    pub dt: f64,
    pub t_end: f64,
    pub sweep: Vec<f64>,
    pub stride: usize,
    pub perturbation: f64,
    pub omega_s: f64,
    pub nu: Option<f64>,
    pub seeds: String,
    pub periods: usize,
    pub order: u8,
    pub c_h1: Option<f64>,
    pub c_zeta0: Option<f64>,
    pub c_ref: Option<f64>,
    pub max_ratio: f64,
    pub init: InitKind,
    pub seed: u64,
    pub svg: bool,
    #[serde(skip)]
    pub out: PathBuf,
}

impl ExperimentConfig {
    fn from_flags(command: CommandKind, mut flags: Flags) -> Result<Self> {
        if let Some(path) = flags.config.clone() {
            let text = fs::read_to_string(&path)
                .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
            flags.merge_file(&text)?;
        }
        let model = flags.model.unwrap_or(ModelKind::Standard);
        let epsilon = flags.epsilon.unwrap_or(0.05);
        let is_sweep = command == CommandKind::Sweep || flags.sweep.is_some();
        let sweep = match (command, flags.sweep) {
            (CommandKind::Sweep, None) => vec![0.1, 0.05, 0.025],
            (_, s) => s.unwrap_or_default(),
        };
        if is_sweep && flags.rho.is_some() {
            return Err(LabError::Config(
                "rho cannot be fixed during an eps sweep; use rho_rule".into(),
            ));
        }
        let rho_rule = match (flags.rho, flags.rho_rule) {
            (Some(_), Some(_)) => {
                return Err(LabError::Config(
                    "give either rho or rho_rule, not both".into(),
                ))
            }
            (Some(_), None) => None,
            (None, rule) => Some(rule.unwrap_or(match model {
                ModelKind::Generalized => RhoRule::Eps2,
                _ => RhoRule::Eps,
            })),
        };
        let follow = |eps: f64| match rho_rule {
            Some(RhoRule::Eps) => eps,
            Some(RhoRule::Eps2) => eps * eps,
            None => flags.rho.unwrap_or(eps),
        };
        let rho = if is_sweep {
            sweep.iter().map(|&e| follow(e)).collect()
        } else {
            vec![follow(epsilon)]
        };
        let config = ExperimentConfig {
            command,
            epsilon,
            rho,
            rho_rule,
            n: flags.n.unwrap_or(64),
            model,
            tau0: flags.tau0.unwrap_or(1.0),
            horizon_a: flags.horizon_a.unwrap_or(0.5),
            alpha: flags.alpha.unwrap_or(0.5),
            dt: flags.dt.unwrap_or(1e-3),
            t_end: flags.t_end.unwrap_or(10.0),
            sweep,
            stride: flags.stride.unwrap_or(100),
            perturbation: flags.perturbation.unwrap_or(0.0),
            omega_s: flags.omega_s.unwrap_or(1.5),
            nu: flags.nu,
            seeds: flags.seeds.unwrap_or_else(|| "0:+".into()),
            periods: flags.periods.unwrap_or(3),
            order: flags.order.unwrap_or(1),
            c_h1: flags.c_h1,
            c_zeta0: flags.c_zeta0,
            c_ref: flags.c_ref,
            max_ratio: flags.max_ratio.unwrap_or(10.0),
            init: flags.init.unwrap_or(InitKind::Soliton),
            seed: flags.seed.unwrap_or(0),
            svg: flags.svg.unwrap_or(false),
            out: flags.out.unwrap_or_else(|| PathBuf::from("out")),
        };
        config.validate()?;
        Ok(config)
    }

    /// `(eps, rho)` pairs this experiment runs on.
    pub fn points(&self) -> Vec<(f64, f64)> {
        if self.sweep.is_empty() {
            vec![(self.epsilon, self.rho[0])]
        } else {
            self.sweep
                .iter()
                .copied()
                .zip(self.rho.iter().copied())
                .collect()
        }
    }

    fn regime(&self) -> Result<Regime> {
        match self.model {
            ModelKind::Standard => Ok(Regime::Standard),
            ModelKind::Generalized => Ok(Regime::Generalized),
            ModelKind::Normalform => Err(LabError::Config(
                "justification runs need model standard or generalized".into(),
            )),
        }
    }

    fn horizon(&self) -> Horizon {
        match self.command {
            CommandKind::JustifyExtended => Horizon::T0Star {
                a: self.horizon_a,
                alpha: self.alpha,
            },
            _ => Horizon::T0 { tau0: self.tau0 },
        }
    }

    /// Checks every precondition the chosen subcommand relies on.
    pub fn validate(&self) -> Result<()> {
        use CommandKind::*;
        for (eps, rho) in self.points() {
            ModelParams::new(eps, rho, self.n)?;
        }
        if !(self.dt > 0.0 && self.dt <= crate::integrators::MAX_DT) {
            return Err(LabError::domain(format!(
                "dt = {} must lie in (0, 0.1]",
                self.dt
            )));
        }
        if self.stride == 0 {
            return Err(LabError::domain("stride must be positive"));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(LabError::domain("t_end must be finite and non-negative"));
        }
        if !(self.max_ratio > 0.0) {
            return Err(LabError::domain("max_ratio must be positive"));
        }
        if !matches!(self.order, 1 | 2) {
            return Err(LabError::domain(format!(
                "order {} is not 1 or 2",
                self.order
            )));
        }
        let seeds = parse_seeds(&self.seeds)?;
        if seeds.iter().any(|s| s.site.unsigned_abs() > self.n) {
            return Err(LabError::domain(format!(
                "seed sites must lie in -{0}..={0}",
                self.n
            )));
        }
        if matches!(self.command, Justify | JustifyExtended | Sweep) {
            let regime = self.regime()?;
            for (eps, rho) in self.points() {
                check_regime(regime, self.horizon(), eps, rho)?;
            }
            if self.command == Sweep && self.sweep.len() < 3 {
                return Err(LabError::Config(
                    "a sweep needs at least 3 eps values".into(),
                ));
            }
        }
        let needs_soliton = matches!(self.command, Soliton | BreatherReturn)
            || (self.init == InitKind::Soliton
                && matches!(
                    self.command,
                    SimulateDkg | SimulateDnls | Justify | JustifyExtended | Sweep
                ));
        if needs_soliton && !(self.omega_s.abs() > 1.0) {
            return Err(LabError::domain(format!(
                "soliton frequency {} must lie outside the linear band [-1, 1]",
                self.omega_s
            )));
        }
        if matches!(self.command, BreatherReturn | SimulateDkg) {
            let (eps, rho) = self.points()[0];
            if let Some(nu) = self.nu {
                if (nu - rho / eps).abs() > 1e-12 * nu.abs().max(1.0) {
                    return Err(LabError::domain(format!(
                        "breather profiles need nu = rho / eps = {}, got nu = {nu}",
                        rho / eps
                    )));
                }
            }
        }
        if self.command == Thresholds && !(self.epsilon > 0.0 && self.n >= 2) {
            return Err(LabError::domain("thresholds need N >= 2"));
        }
        Ok(())
    }

    /// Canonical JSON (no output directory).
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Parses argv (including the program name) and the optional config file.
pub fn parse_and_validate<I, T>(args: I) -> std::result::Result<ExperimentConfig, ParseOutcome>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(ParseOutcome::Clap)?;
    let (kind, flags) = cli.command.split();
    ExperimentConfig::from_flags(kind, flags).map_err(ParseOutcome::Invalid)
}

#[derive(Debug)]
pub enum ParseOutcome {
    Clap(clap::Error),
    Invalid(LabError),
}

/// Result of a run that completed.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Ok,
    /// A computed quantity exceeded its bound.
    Violation(Vec<String>),
}

impl Outcome {
    fn from_findings(findings: Vec<String>) -> Self {
        if findings.is_empty() {
            Outcome::Ok
        } else {
            Outcome::Violation(findings)
        }
    }
}

struct Output<'a> {
    dir: &'a Path,
    hash: String,
}

impl Output<'_> {
    fn comment(&self) -> String {
        format!("config_hash={}", self.hash)
    }

    fn write_csv(&self, name: &str, body: &str) -> Result<()> {
        let text = if body.starts_with('#') {
            body.to_string()
        } else {
            format!("# {}\n{body}", self.comment())
        };
        fs::write(self.dir.join(name), text)?;
        Ok(())
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut v = serde_json::to_value(value)?;
        if let serde_json::Value::Object(map) = &mut v {
            map.insert("config_hash".into(), self.hash.clone().into());
        }
        let mut text = serde_json::to_string_pretty(&v)?;
        text.push('\n');
        fs::write(self.dir.join(name), text)?;
        Ok(())
    }
}

fn random_envelope(m: usize, seed: u64) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|_| Complex64::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)))
        .collect()
}

fn profile_for(config: &ExperimentConfig, nu: f64) -> Result<SolitonProfile> {
    solve_soliton(config.omega_s, nu, config.n, &parse_seeds(&config.seeds)?)
}

fn initial_envelope(config: &ExperimentConfig, eps: f64, rho: f64) -> Result<Vec<Complex64>> {
    match config.init {
        InitKind::Random => Ok(random_envelope(sites(config.n), config.seed)),
        InitKind::Soliton => {
            let nu = config.nu.unwrap_or(match config.model {
                ModelKind::Standard => rho / eps,
                _ => 1.0,
            });
            Ok(profile_for(config, nu)?.envelope())
        }
    }
}

/// Executes a validated configuration, writing into `config.out`.
pub fn run(config: &ExperimentConfig) -> Result<Outcome> {
    fs::create_dir_all(&config.out)?;
    let out = Output {
        dir: &config.out,
        hash: config.hash(),
    };
    let mut text = serde_json::to_string_pretty(config)?;
    text.push('\n');
    fs::write(config.out.join("config.json"), text)?;
    match config.command {
        CommandKind::SimulateDkg => simulate_dkg(config, &out),
        CommandKind::SimulateDnls => simulate_dnls(config, &out),
        CommandKind::Justify => justify(config, &out, false),
        CommandKind::Sweep => justify(config, &out, true),
        CommandKind::JustifyExtended => justify_extended(config, &out),
        CommandKind::Normalform => normalform(config, &out),
        CommandKind::Thresholds => threshold_cmd(config, &out),
        CommandKind::Soliton => soliton(config, &out),
        CommandKind::BreatherReturn => breather(config, &out),
    }
}

#[derive(Serialize)]
struct SimulationSummary {
    t_end: f64,
    steps: usize,
    initial_invariant: f64,
    final_invariant: f64,
    relative_drift: f64,
}

fn relative_drift(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        (b - a).abs()
    } else {
        ((b - a) / a).abs()
    }
}

fn simulate_dkg(config: &ExperimentConfig, out: &Output) -> Result<Outcome> {
    let (eps, rho) = config.points()[0];
    let dkg = Dkg::new(eps, rho);
    let state = match config.init {
        InitKind::Soliton => build_breather_initial(&profile_for(config, rho / eps)?, eps, rho)?,
        InitKind::Random => {
            let a = random_envelope(2 * sites(config.n), config.seed);
            let (x, y) = a.split_at(sites(config.n));
            LatticeState::new(
                x.iter().map(|z| z.re).collect(),
                y.iter().map(|z| z.re).collect(),
                0.0,
            )?
        }
    };
    let e0 = energy_dkg(&state, &dkg);
    let ic = IntegratorConfig::new(config.dt, config.t_end, config.stride, Scheme::Verlet)?;
    let mut energy = |s: &LatticeState, d: &mut crate::integrators::Diagnostics| {
        d.insert("energy".into(), energy_dkg(s, &dkg));
    };
    let mut norm = |s: &LatticeState, d: &mut crate::integrators::Diagnostics| {
        d.insert(
            "l2_x".into(),
            crate::lattice::l2_norm(&s.x).unwrap_or(f64::NAN),
        );
    };
    let mut writer = CsvTrajectoryWriter::new(Vec::new()).with_comment(out.comment());
    let last = integrate_with(
        &DkgFlow(dkg),
        state,
        &ic,
        &mut [&mut energy, &mut norm],
        |t, s, d| writer.write(t, s, d),
    )?;
    fs::write(out.dir.join("trajectory.csv"), writer.finish()?)?;
    out.write_csv("final_state.csv", &last.to_csv()?)?;
    let e1 = energy_dkg(&last, &dkg);
    out.write_json(
        "summary.json",
        &SimulationSummary {
            t_end: last.t,
            steps: ic.steps(),
            initial_invariant: e0,
            final_invariant: e1,
            relative_drift: relative_drift(e0, e1),
        },
    )?;
    Ok(Outcome::Ok)
}

fn simulate_dnls(config: &ExperimentConfig, out: &Output) -> Result<Outcome> {
    let (eps, rho) = config.points()[0];
    let model = match config.model {
        ModelKind::Standard => DnlsModel::Standard {
            nu: config.nu.unwrap_or(rho / eps),
        },
        ModelKind::Generalized => DnlsModel::Generalized {
            delta: rho / (eps * eps),
            epsilon: eps,
        },
        ModelKind::Normalform => sqrt_circulant(config.n, eps)?.dnls_model(config.order)?,
    };
    model.validate()?;
    let coeffs = match config.model {
        ModelKind::Normalform => Some(sqrt_circulant(config.n, eps)?),
        _ => None,
    };
    let a0 = initial_envelope(config, eps, rho)?;
    let state = EnvelopeState::new(a0, 0.0)?;
    let n0 = l2_conserved(&state.a);
    let ic = IntegratorConfig::new(config.dt, config.t_end, config.stride, Scheme::Rk4)?;
    let mut norm = |s: &EnvelopeState, d: &mut crate::integrators::Diagnostics| {
        d.insert("l2_squared".into(), l2_conserved(&s.a));
    };
    let order = config.order;
    let mut hamiltonian = |s: &EnvelopeState, d: &mut crate::integrators::Diagnostics| {
        if let Some(c) = &coeffs {
            d.insert(
                "k_eff".into(),
                keff_energy(&s.a, c, order).unwrap_or(f64::NAN),
            );
            d.insert("h_omega".into(), h_omega(&s.a, c.omega));
        }
    };
    let mut writer = CsvTrajectoryWriter::new(Vec::new()).with_comment(out.comment());
    let last = integrate_with(
        &EnvelopeFlow(model),
        state,
        &ic,
        &mut [&mut norm, &mut hamiltonian],
        |t, s, d| writer.write(t, s, d),
    )?;
    fs::write(out.dir.join("trajectory.csv"), writer.finish()?)?;
    out.write_csv("final_state.csv", &last.to_csv()?)?;
    let n1 = l2_conserved(&last.a);
    out.write_json(
        "summary.json",
        &SimulationSummary {
            t_end: last.tau,
            steps: ic.steps(),
            initial_invariant: n0,
            final_invariant: n1,
            relative_drift: relative_drift(n0, n1),
        },
    )?;
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct JustifySummary {
    points: Vec<crate::approximation::JustificationSummary>,
    fit: Option<ScalingFit>,
    expected_slope: Option<f64>,
    findings: Vec<String>,
}

/// Exponent of `rho^{-1} eps^p` along the sweep when `rho` follows a rule.
fn expected_slope(regime: Regime, rule: Option<RhoRule>) -> Option<f64> {
    let p = regime.order() as f64;
    match rule {
        Some(RhoRule::Eps) => Some(p - 1.0),
        Some(RhoRule::Eps2) => Some(p - 2.0),
        None => None,
    }
}

/// Allowed deviation of a fitted slope from its prediction.
pub const SLOPE_TOLERANCE: f64 = 0.2;

fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v.trim().parse().map_err(|_| {
            LabError::Config(format!("{WORKERS_ENV} = {v:?} is not a worker count"))
        })?;
        builder = builder.num_threads(n.max(1));
    }
    builder
        .build()
        .map_err(|e| LabError::Config(format!("cannot start worker pool: {e}")))
}

fn justification_configs(config: &ExperimentConfig) -> Result<Vec<JustificationConfig>> {
    let regime = config.regime()?;
    config
        .points()
        .into_iter()
        .map(|(eps, rho)| {
            let mut jc = JustificationConfig::new(
                eps,
                rho,
                regime,
                config.horizon(),
                initial_envelope(config, eps, rho)?,
            );
            jc.dt = config.dt;
            jc.sample_stride = config.stride;
            jc.perturbation = config.perturbation;
            Ok(jc)
        })
        .collect()
}

fn justify(config: &ExperimentConfig, out: &Output, parallel: bool) -> Result<Outcome> {
    let configs = justification_configs(config)?;
    let reports: Vec<JustificationReport> = if parallel {
        worker_pool()?.install(|| run_sweep(&configs))?
    } else {
        configs
            .iter()
            .map(run_justification)
            .collect::<Result<_>>()?
    };
    let mut findings = Vec::new();
    for (i, r) in reports.iter().enumerate() {
        out.write_csv(
            &format!("justify_{i:02}.csv"),
            &r.to_csv(Some(&out.comment()))?,
        )?;
        if r.ratio > config.max_ratio {
            findings.push(format!(
                "eps = {}: sup error / bound scale = {} exceeds {}",
                r.epsilon, r.ratio, config.max_ratio
            ));
        }
    }
    let (fit, expected) = if reports.len() >= 3 {
        let pairs: Vec<(f64, f64)> = reports.iter().map(|r| (r.epsilon, r.sup_error)).collect();
        let fit = fit_scaling_exponent(&pairs)?;
        let expected = expected_slope(config.regime()?, config.rho_rule);
        if let Some(e) = expected {
            if (fit.slope - e).abs() > SLOPE_TOLERANCE {
                findings.push(format!(
                    "fitted slope {} is not within {SLOPE_TOLERANCE} of {e}",
                    fit.slope
                ));
            }
        }
        if config.svg {
            let svg = loglog_svg(&pairs, Some(fit), "sup error vs eps", "eps", "sup error");
            fs::write(out.dir.join("scaling.svg"), svg)?;
        }
        (Some(fit), expected)
    } else {
        (None, None)
    };
    out.write_json(
        "summary.json",
        &JustifySummary {
            points: reports.iter().map(JustificationReport::summary).collect(),
            fit,
            expected_slope: expected,
            findings: findings.clone(),
        },
    )?;
    Ok(Outcome::from_findings(findings))
}

#[derive(Serialize)]
struct ExtendedSummary {
    point: crate::approximation::JustificationSummary,
    c_ref: f64,
    c_ref_measured: bool,
    allowed: f64,
    pass: bool,
}

fn justify_extended(config: &ExperimentConfig, out: &Output) -> Result<Outcome> {
    let jc = justification_configs(config)?.remove(0);
    let (c_ref, measured) = match config.c_ref {
        Some(c) => (c, false),
        None => {
            let mut short = jc.clone();
            short.horizon = Horizon::T0 { tau0: config.tau0 };
            (run_justification(&short)?.ratio, true)
        }
    };
    let report = run_justification(&jc)?;
    out.write_csv(
        "justify_extended.csv",
        &report.to_csv(Some(&out.comment()))?,
    )?;
    let allowed = c_ref * report.bound_scale;
    let pass = report.sup_error <= allowed;
    out.write_json(
        "summary.json",
        &ExtendedSummary {
            point: report.summary(),
            c_ref,
            c_ref_measured: measured,
            allowed,
            pass,
        },
    )?;
    Ok(Outcome::from_findings(if pass {
        vec![]
    } else {
        vec![format!(
            "sup error {} exceeds {allowed} on the extended horizon",
            report.sup_error
        )]
    }))
}

#[derive(Serialize)]
struct NormalFormOutput {
    coefficients: crate::normal_form::NormalFormCoeffs,
    certificate: crate::normal_form::DecayCertificate,
}

/// Tolerance on the consecutive-ratio decay check.
pub const DECAY_TOLERANCE: f64 = 0.1;

fn normalform(config: &ExperimentConfig, out: &Output) -> Result<Outcome> {
    let coefficients = sqrt_circulant(config.n, config.epsilon)?;
    let certificate = decay_certificate(&coefficients, DECAY_TOLERANCE);
    out.write_csv("decay.csv", &coefficients.decay_csv(Some(&out.comment()))?)?;
    out.write_json(
        "coefficients.json",
        &NormalFormOutput {
            coefficients,
            certificate,
        },
    )?;
    Ok(Outcome::from_findings(if certificate.holds {
        vec![]
    } else {
        vec![format!("decay certificate fails: {certificate:?}")]
    }))
}

fn threshold_cmd(config: &ExperimentConfig, out: &Output) -> Result<Outcome> {
    let eps = config.epsilon;
    let result = match (config.c_zeta0, config.c_h1) {
        (Some(cz), Some(ch)) => thresholds(cz, ch, eps, sqrt_circulant(config.n, eps)?.omega),
        (None, None) => fitted_thresholds(config.n, eps),
        _ => Err(LabError::Config(
            "give both c_zeta0 and c_h1 or neither".into(),
        )),
    };
    match result {
        Ok(t) => {
            out.write_json("thresholds.json", &t)?;
            Ok(Outcome::Ok)
        }
        Err(LabError::ThresholdViolated { f_eps }) => {
            let mut body = BTreeMap::new();
            body.insert("f_eps", f_eps);
            out.write_json("thresholds.json", &body)?;
            Ok(Outcome::Violation(vec![format!(
                "f(eps) = {f_eps} <= 1: the threshold construction does not apply"
            )]))
        }
        Err(e) => Err(e),
    }
}

fn soliton(config: &ExperimentConfig, out: &Output) -> Result<Outcome> {
    let (eps, rho) = config.points()[0];
    let profile = profile_for(config, config.nu.unwrap_or(rho / eps))?;
    out.write_csv("profile.csv", &profile.to_csv()?)?;
    out.write_json("profile.json", &profile)?;
    Ok(Outcome::Ok)
}

/// Return errors above `factor * eps` are reported as violations.
pub const RETURN_ERROR_FACTOR: f64 = 10.0;

fn breather(config: &ExperimentConfig, out: &Output) -> Result<Outcome> {
    let (eps, rho) = config.points()[0];
    let profile = profile_for(config, rho / eps)?;
    let r = breather_return_error(&profile, eps, rho, config.periods, config.dt, config.tau0)?;
    out.write_csv("return.csv", &r.to_csv(Some(&out.comment()))?)?;
    out.write_json("summary.json", &r)?;
    let limit = RETURN_ERROR_FACTOR * eps;
    let findings = r
        .errors
        .iter()
        .enumerate()
        .filter(|(_, e)| **e > limit)
        .map(|(k, e)| format!("return error {e} after {} periods exceeds {limit}", k + 1))
        .collect();
    Ok(Outcome::from_findings(findings))
}

/// Log-log scatter plot with an optional fitted line `exp(b) x^s`.
pub fn loglog_svg(
    points: &[(f64, f64)],
    fit: Option<ScalingFit>,
    title: &str,
    xlabel: &str,
    ylabel: &str,
) -> String {
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const PAD: f64 = 50.0;
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.log10(), y.log10()))
        .collect();
    let span = |v: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
            (lo.min(x), hi.max(x))
        });
        if lo.is_finite() && hi > lo {
            (lo - 0.05 * (hi - lo), hi + 0.05 * (hi - lo))
        } else {
            (lo - 0.5, lo + 0.5)
        }
    };
    let (x0, x1) = span(&mut logs.iter().map(|p| p.0));
    let (y0, y1) = span(&mut logs.iter().map(|p| p.1));
    let px = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="25" text-anchor="middle">{title}</text>"#,
        W / 2.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">log10 {xlabel}</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">log10 {ylabel}</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (x, y) in &logs {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="steelblue"/>"#,
            px(*x),
            py(*y)
        );
    }
    if let Some(f) = fit {
        let line = |x: f64| {
            (f.slope * x * std::f64::consts::LN_10 + f.intercept) / std::f64::consts::LN_10
        };
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="firebrick"/>"#,
            px(x0),
            py(line(x0)),
            px(x1),
            py(line(x1))
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">slope {:.3}</text>"#,
            PAD + 8.0,
            PAD + 18.0,
            f.slope
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Entry point used by the binary.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let config = match parse_and_validate(args) {
        Ok(c) => c,
        Err(ParseOutcome::Clap(e)) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
        Err(ParseOutcome::Invalid(e)) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let mut shown = serde_json::to_value(&config).expect("config serializes");
    if let serde_json::Value::Object(map) = &mut shown {
        map.insert("out".into(), config.out.display().to_string().into());
        map.insert("config_hash".into(), config.hash().into());
    }
    println!("{}", serde_json::to_string_pretty(&shown).expect("json"));
    info!("writing to {}", config.out.display());
    match run(&config) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Violation(findings)) => {
            for f in findings {
                eprintln!("bound violation: {f}");
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
