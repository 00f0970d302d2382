//! Subcommands of the `hevc-energy` binary.
//!
//! Every command returns a [`CommandOutcome`] carrying both renderings, so
//! the binary only has to pick one and exit with the outcome's code.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::calibration::{
    fit_constants, fit_per_feature, read_dataset, simulate, spanning_features, write_dataset,
    DatasetHeader, SimulatorConfig, ValueRange,
};
use crate::error::{Error, Result};
use crate::measurement::{decoder_energy, integrate_power_log, EnergyMeasurement, PowerLog};
use crate::model::{
    builtin_constants, builtin_profile_text, estimate, relative_error, EnergyConstants, EstimateReport,
    ModelKind,
};
use crate::trace::{aggregate_trace_file, FeatureCounts, FieldPolicy};

/// Environment variable naming the default constants profile.
pub const PROFILE_ENV: &str = "HEVC_ENERGY_CONSTANTS";

/// Largest relative error reported for the accurate model on the evaluation set.
pub const ACCURATE_ERROR_BOUND: f64 = 0.032;
/// Same for the simplified model, excluding the low-QP sequence.
pub const SIMPLIFIED_ERROR_BOUND: f64 = 0.041;
/// Distance from a bound within which an error counts as sitting on it.
pub const BOUND_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    #[default]
    Text,
    Machine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum ModelChoice {
    Accurate,
    Simplified,
    #[default]
    Both,
}

impl ModelChoice {
    fn kinds(self) -> &'static [ModelKind] {
        match self {
            ModelChoice::Accurate => &[ModelKind::Accurate],
            ModelChoice::Simplified => &[ModelKind::Simplified],
            ModelChoice::Both => &[ModelKind::Accurate, ModelKind::Simplified],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum CalibrationMethod {
    #[default]
    Joint,
    PerFeature,
}

#[derive(Debug, Parser)]
#[command(name = "hevc-energy", version, about = "HEVC intra decoding energy estimation and calibration")]
pub struct Cli {
    /// Ignore unknown trace fields (with a warning) instead of failing.
    #[arg(long, global = true)]
    pub lenient: bool,

    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Text)]
    pub format: OutputFormat,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate decoding energy for a feature trace.
    Estimate {
        trace: PathBuf,
        #[arg(long, env = PROFILE_ENV)]
        constants: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ModelChoice::Both)]
        model: ModelChoice,
    },
    /// Print the feature counts of a trace.
    Aggregate { trace: PathBuf },
    /// Integrate a current log into energy, optionally subtracting an idle log.
    PowerIntegrate {
        log: PathBuf,
        #[arg(long)]
        idle: Option<PathBuf>,
    },
    /// Fit energy constants to a measurement dataset.
    Calibrate {
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = CalibrationMethod::Joint)]
        method: CalibrationMethod,
        /// Profile supplying the constants a per-feature fit does not touch.
        #[arg(long, env = PROFILE_ENV)]
        constants: Option<PathBuf>,
        /// Use every coefficient value in the value fit, not only those below 256.
        #[arg(long)]
        all_values: bool,
    },
    /// Generate a synthetic measurement dataset from known constants.
    Simulate {
        config: PathBuf,
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare model estimates against a measured energy.
    Compare {
        trace: PathBuf,
        /// Measured decoding energy in joules.
        #[arg(allow_negative_numbers = true)]
        measured: f64,
        #[arg(long, env = PROFILE_ENV)]
        constants: Option<PathBuf>,
    },
    /// Print the active constants profile (built-in unless overridden).
    Constants {
        #[arg(long, env = PROFILE_ENV)]
        constants: Option<PathBuf>,
    },
    /// Write a feature corpus that spans every model direction.
    Design {
        #[arg(long)]
        rows: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Result of one command: exit status plus human and machine renderings.
#[derive(Clone, Debug, PartialEq)]
pub struct CommandOutcome {
    /// 0 success, 1 validation failure, 2 numeric or degenerate failure,
    /// 3 I/O failure.
    pub exit_code: i32,
    pub text: String,
    pub machine: Value,
}

impl CommandOutcome {
    fn ok(text: String, machine: Value) -> Self {
        CommandOutcome {
            exit_code: 0,
            text,
            machine,
        }
    }

    fn from_error(err: &Error) -> Self {
        let mut machine = json!({ "error": { "code": err.exit_code(), "message": err.to_string() } });
        if let Error::Unidentifiable(names) = err {
            machine["error"]["unidentifiable"] = json!(names);
        }
        CommandOutcome {
            exit_code: err.exit_code(),
            text: format!("error: {err}\n"),
            machine,
        }
    }

    pub fn render(&self, format: OutputFormat) -> String {
        match format {
            OutputFormat::Text => self.text.clone(),
            OutputFormat::Machine => {
                let mut s = serde_json::to_string_pretty(&self.machine).expect("JSON values serialize");
                s.push('\n');
                s
            }
        }
    }
}

/// Joules with six significant digits.
pub fn fmt_joules(v: f64) -> String {
    // Adding zero turns -0.0 into 0.0 so empty terms print without a sign.
    format!("{:.5e}", v + 0.0)
}

pub fn run(cli: &Cli) -> CommandOutcome {
    let policy = if cli.lenient {
        FieldPolicy::Lenient
    } else {
        FieldPolicy::Strict
    };
    let result = match &cli.command {
        Command::Estimate {
            trace,
            constants,
            model,
        } => cmd_estimate(trace, constants.as_deref(), *model, policy),
        Command::Aggregate { trace } => cmd_aggregate(trace, policy),
        Command::PowerIntegrate { log, idle } => cmd_power_integrate(log, idle.as_deref()),
        Command::Calibrate {
            dataset,
            out,
            method,
            constants,
            all_values,
        } => {
            let range = if *all_values {
                ValueRange::All
            } else {
                ValueRange::Below256
            };
            cmd_calibrate(dataset, out, *method, constants.as_deref(), range, policy)
        }
        Command::Simulate {
            config,
            features,
            out,
        } => cmd_simulate(config, features, out, policy),
        Command::Compare {
            trace,
            measured,
            constants,
        } => cmd_compare(trace, *measured, constants.as_deref(), policy),
        Command::Constants { constants } => cmd_constants(constants.as_deref()),
        Command::Design { rows, seed, out } => cmd_design(*rows, *seed, out),
    };
    result.unwrap_or_else(|e| CommandOutcome::from_error(&e))
}

/// Profile from `path`, or the built-in constants.
pub fn resolve_constants(path: Option<&Path>) -> Result<EnergyConstants> {
    match path {
        Some(p) => EnergyConstants::load(p),
        None => Ok(builtin_constants()),
    }
}

fn render_report(out: &mut String, report: &EstimateReport) {
    out.push_str(&format!(
        "{} model: {} J\n",
        report.model.name(),
        fmt_joules(report.total)
    ));
    for (name, value) in report.terms.named() {
        out.push_str(&format!("  {name:<11} {} J\n", fmt_joules(value)));
    }
    for w in &report.warnings {
        out.push_str(&format!("  warning: {w}\n"));
    }
}

fn render_counts(out: &mut String, f: &FeatureCounts) {
    out.push_str(&format!("n_slice      {}\nqp           {}\n", f.n_slice, f.qp));
    out.push_str("n_mode_depth   d1 d2 d3 d4\n");
    for class in crate::trace::ModeClass::ALL {
        let row = f.n_mode_depth[class.index()];
        out.push_str(&format!(
            "  {:<4} {} {} {} {}\n",
            class.name(),
            row[0],
            row[1],
            row[2],
            row[3]
        ));
    }
    out.push_str(&format!(
        "n_cbf        {}\nn_coeff      {}\nsum_log2_abs {}\nn_nompm      {}\nn_tsf        {}\n",
        f.n_cbf,
        f.n_coeff,
        f.sum_log2_abs(),
        f.n_nompm,
        f.n_tsf
    ));
}

fn push_warnings(out: &mut String, warnings: &[String]) {
    for w in warnings {
        out.push_str(&format!("warning: {w}\n"));
    }
}

pub fn cmd_estimate(
    trace: &Path,
    constants: Option<&Path>,
    model: ModelChoice,
    policy: FieldPolicy,
) -> Result<CommandOutcome> {
    let k = resolve_constants(constants)?;
    let (features, warnings) = aggregate_trace_file(trace, policy)?;
    let reports: Vec<EstimateReport> = model.kinds().iter().map(|&m| estimate(&features, &k, m)).collect();
    let mut text = String::new();
    push_warnings(&mut text, &warnings);
    text.push_str(&format!(
        "trace {}: {} units, {} slice(s), qp {}\n",
        trace.display(),
        features.n_units(),
        features.n_slice,
        features.qp
    ));
    for r in &reports {
        render_report(&mut text, r);
    }
    let machine = json!({
        "command": "estimate",
        "trace": trace.display().to_string(),
        "features": features,
        "reports": reports,
        "warnings": warnings,
    });
    Ok(CommandOutcome::ok(text, machine))
}

pub fn cmd_aggregate(trace: &Path, policy: FieldPolicy) -> Result<CommandOutcome> {
    let (features, warnings) = aggregate_trace_file(trace, policy)?;
    let mut text = String::new();
    push_warnings(&mut text, &warnings);
    render_counts(&mut text, &features);
    let machine = json!({
        "command": "aggregate",
        "trace": trace.display().to_string(),
        "features": features,
        "warnings": warnings,
    });
    Ok(CommandOutcome::ok(text, machine))
}

pub fn cmd_power_integrate(log: &Path, idle: Option<&Path>) -> Result<CommandOutcome> {
    let all_log = PowerLog::load(log)?;
    let e_all = integrate_power_log(&all_log)?;
    let mut text = format!("E_all  {} J\n", fmt_joules(e_all));
    let mut machine = json!({
        "command": "power-integrate",
        "log": log.display().to_string(),
        "v0_volts": all_log.v0(),
        "shunt_ohms": all_log.r_a(),
        "duration_s": all_log.duration(),
        "e_all": e_all,
        "warnings": [],
    });
    if let Some(idle) = idle {
        let e_idle = integrate_power_log(&PowerLog::load(idle)?)?;
        let dec = decoder_energy(&EnergyMeasurement::new(e_all, e_idle)?);
        text.push_str(&format!("E_idle {} J\nE_dec  {} J\n", fmt_joules(e_idle), fmt_joules(dec.joules)));
        machine["e_idle"] = json!(e_idle);
        machine["e_dec"] = json!(dec.joules);
        if let Some(w) = dec.warning {
            text.push_str(&format!("warning: {w}\n"));
            machine["warnings"] = json!([w]);
        }
    }
    Ok(CommandOutcome::ok(text, machine))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn cmd_calibrate(
    dataset: &Path,
    out: &Path,
    method: CalibrationMethod,
    constants: Option<&Path>,
    range: ValueRange,
    policy: FieldPolicy,
) -> Result<CommandOutcome> {
    let data = read_dataset(dataset, policy)?;
    let mut text = String::new();
    let mut machine = json!({
        "command": "calibrate",
        "dataset": dataset.display().to_string(),
        "out": out.display().to_string(),
    });
    let (fitted, diagnostics) = match method {
        CalibrationMethod::Joint => {
            let pairs = data.pairs();
            let skipped = data.rows.len() - pairs.len();
            let fit = fit_constants(&pairs)?;
            let mut diag = vec![
                format!("method = joint"),
                format!("rows = {}", pairs.len()),
                format!("residual_rms = {:e}", fit.residual_rms),
                format!("condition_number = {:e}", fit.condition_number),
            ];
            if skipped > 0 {
                diag.push(format!("warning: {skipped} sweep rows ignored by the joint fit"));
            }
            if !fit.negative_flags.is_empty() {
                diag.push(format!("negative: {}", fit.negative_flags.join(", ")));
            }
            if let Some(w) = &fit.condition_warning {
                diag.push(format!("warning: {w}"));
            }
            machine["method"] = json!("joint");
            machine["rows"] = json!(pairs.len());
            machine["residual_rms"] = json!(fit.residual_rms);
            machine["condition_number"] = json!(fit.condition_number);
            machine["negative_flags"] = json!(fit.negative_flags);
            machine["condition_warning"] = json!(fit.condition_warning);
            (fit.constants, diag)
        }
        CalibrationMethod::PerFeature => {
            let base = resolve_constants(constants)?;
            let fit = fit_per_feature(&data, &base, range)?;
            let mut diag = vec![format!("method = per-feature")];
            machine["method"] = json!("per-feature");
            if let Some(c) = fit.coeff {
                diag.push(format!(
                    "e_coeff = {:e} (intercept {:e}, residual_rms {:e}, {} points)",
                    c.slope, c.intercept, c.residual_rms, c.points_used
                ));
                machine["coeff_fit"] = json!(c);
            }
            if let Some(v) = fit.value {
                diag.push(format!(
                    "e_val = {:e} (intercept {:e}, residual_rms {:e}, {} points)",
                    v.slope, v.intercept, v.residual_rms, v.points_used
                ));
                machine["value_fit"] = json!(v);
            }
            if fit.ignored_rows > 0 {
                diag.push(format!("warning: {} feature rows ignored by the per-feature fit", fit.ignored_rows));
            }
            let negative: Vec<&str> = [("e_coeff", fit.constants.e_coeff), ("e_val", fit.constants.e_val)]
                .into_iter()
                .filter(|(_, v)| *v < 0.0)
                .map(|(n, _)| n)
                .collect();
            if !negative.is_empty() {
                diag.push(format!("negative: {}", negative.join(", ")));
            }
            machine["negative_flags"] = json!(negative);
            (fit.constants, diag)
        }
    };
    let mut profile = fitted.to_profile_string();
    profile.push_str("# diagnostics\n");
    for line in &diagnostics {
        profile.push_str(&format!("# {line}\n"));
    }
    write_file(out, &profile)?;
    text.push_str(&format!("wrote {}\n", out.display()));
    for line in &diagnostics {
        text.push_str(line);
        text.push('\n');
    }
    machine["constants"] = json!(fitted.entries().into_iter().collect::<std::collections::BTreeMap<_, _>>());
    Ok(CommandOutcome::ok(text, machine))
}

/// Simulator configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatorConfigFile {
    pub seed: u64,
    pub noise_rel: f64,
    /// Truth profile, relative to the config file; built-in when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
}

/// Reads a features file: one JSON object per line, either inline
/// [`FeatureCounts`] or `{"trace": "path"}`.
pub fn read_features_file(path: &Path, policy: FieldPolicy) -> Result<Vec<FeatureCounts>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(text).map_err(|e| Error::parse(&name, idx + 1, e.to_string()))?;
        if let Some(obj) = value.as_object().filter(|o| o.len() == 1 && o.contains_key("trace")) {
            let rel = obj["trace"]
                .as_str()
                .ok_or_else(|| Error::parse(&name, idx + 1, "`trace` must be a path string"))?;
            out.push(aggregate_trace_file(&base.join(rel), policy)?.0);
        } else {
            out.push(serde_json::from_value(value).map_err(|e| Error::parse(&name, idx + 1, e.to_string()))?);
        }
    }
    Ok(out)
}

pub fn write_features_file(path: &Path, features: &[FeatureCounts]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for f in features {
        serde_json::to_writer(&mut w, f).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn cmd_simulate(config: &Path, features: &Path, out: &Path, policy: FieldPolicy) -> Result<CommandOutcome> {
    let text = std::fs::read_to_string(config).map_err(|e| Error::io(config, e))?;
    let cfg: SimulatorConfigFile =
        serde_json::from_str(&text).map_err(|e| Error::parse(&config.display().to_string(), e.line(), e.to_string()))?;
    let truth = match &cfg.truth {
        Some(p) => EnergyConstants::load(&config.parent().unwrap_or(Path::new("")).join(p))?,
        None => builtin_constants(),
    };
    let feats = read_features_file(features, policy)?;
    let pairs = simulate(
        &SimulatorConfig {
            truth,
            noise_rel: cfg.noise_rel,
            seed: cfg.seed,
        },
        &feats,
    )?;
    let header = DatasetHeader {
        seed: Some(cfg.seed),
        noise_rel: Some(cfg.noise_rel),
        ..DatasetHeader::default()
    };
    let mut buf = Vec::new();
    write_dataset(&mut buf, &header, &pairs).map_err(|e| Error::io(out, e))?;
    std::fs::write(out, &buf).map_err(|e| Error::io(out, e))?;
    let text = format!(
        "wrote {} rows to {} (seed {}, noise_rel {})\n",
        pairs.len(),
        out.display(),
        cfg.seed,
        cfg.noise_rel
    );
    let machine = json!({
        "command": "simulate",
        "out": out.display().to_string(),
        "rows": pairs.len(),
        "seed": cfg.seed,
        "noise_rel": cfg.noise_rel,
    });
    Ok(CommandOutcome::ok(text, machine))
}

/// Position of a relative error against a reported bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundStatus {
    Within,
    AtBound,
    Exceeds,
}

pub fn bound_status(error: f64, bound: f64) -> BoundStatus {
    if (error - bound).abs() <= BOUND_TOLERANCE {
        BoundStatus::AtBound
    } else if error < bound {
        BoundStatus::Within
    } else {
        BoundStatus::Exceeds
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub model: ModelKind,
    pub estimate: f64,
    pub relative_error: f64,
    pub bound: f64,
    pub status: BoundStatus,
    pub warnings: Vec<String>,
}

pub fn compare_models(features: &FeatureCounts, k: &EnergyConstants, measured: f64) -> Result<Vec<Comparison>> {
    [(ModelKind::Accurate, ACCURATE_ERROR_BOUND), (ModelKind::Simplified, SIMPLIFIED_ERROR_BOUND)]
        .into_iter()
        .map(|(model, bound)| {
            let report = estimate(features, k, model);
            let err = relative_error(measured, report.total)?;
            Ok(Comparison {
                model,
                estimate: report.total,
                relative_error: err,
                bound,
                status: bound_status(err, bound),
                warnings: report.warnings,
            })
        })
        .collect()
}

pub fn cmd_compare(trace: &Path, measured: f64, constants: Option<&Path>, policy: FieldPolicy) -> Result<CommandOutcome> {
    if !(measured > 0.0 && measured.is_finite()) {
        return Err(Error::Validation(format!(
            "measured energy must be a positive number of joules, got {measured}"
        )));
    }
    let k = resolve_constants(constants)?;
    let (features, warnings) = aggregate_trace_file(trace, policy)?;
    let comparisons = compare_models(&features, &k, measured)?;
    let mut text = String::new();
    push_warnings(&mut text, &warnings);
    text.push_str(&format!("measured    {} J\n", fmt_joules(measured)));
    for c in &comparisons {
        let verdict = match c.status {
            BoundStatus::Within => "within",
            BoundStatus::AtBound => "at",
            BoundStatus::Exceeds => "exceeds",
        };
        text.push_str(&format!(
            "{:<11} {} J  relative error {} ({verdict} reported {}-model bound of {:.1}%)\n",
            c.model.name(),
            fmt_joules(c.estimate),
            fmt_joules(c.relative_error),
            c.model.name(),
            c.bound * 100.0
        ));
        for w in &c.warnings {
            text.push_str(&format!("  warning: {w}\n"));
        }
    }
    let machine = json!({
        "command": "compare",
        "trace": trace.display().to_string(),
        "measured": measured,
        "comparisons": comparisons,
        "warnings": warnings,
    });
    Ok(CommandOutcome::ok(text, machine))
}

pub fn cmd_constants(constants: Option<&Path>) -> Result<CommandOutcome> {
    let (text, k) = match constants {
        Some(p) => {
            let k = EnergyConstants::load(p)?;
            (k.to_profile_string(), k)
        }
        None => (builtin_profile_text().to_string(), builtin_constants()),
    };
    let machine = json!({
        "command": "constants",
        "constants": k.entries().into_iter().collect::<std::collections::BTreeMap<_, _>>(),
    });
    Ok(CommandOutcome::ok(text, machine))
}

pub fn cmd_design(rows: usize, seed: u64, out: &Path) -> Result<CommandOutcome> {
    let feats = spanning_features(rows, seed);
    write_features_file(out, &feats)?;
    Ok(CommandOutcome::ok(
        format!("wrote {rows} feature rows to {}\n", out.display()),
        json!({ "command": "design", "rows": rows, "seed": seed, "out": out.display().to_string() }),
    ))
}
