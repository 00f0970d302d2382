//! Current logs to energies, and the differential per-unit energy method.
//!
//! The supply delivers `V0` while the ampere meter's shunt `R_A` drops
//! `R_A · i(t)`, so the device receives
//! `E = V0 ∫ i dt − R_A ∫ i² dt`.

use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_SUPPLY_VOLTS: f64 = 5.2;
pub const DEFAULT_SHUNT_OHMS: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    /// Seconds.
    pub t: f64,
    /// Amperes.
    pub i: f64,
}

/// A validated current log.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerLog {
    samples: Vec<Sample>,
    v0: f64,
    r_a: f64,
}

impl PowerLog {
    pub fn new(samples: Vec<Sample>, v0: f64, r_a: f64) -> Result<Self> {
        if !(v0 > 0.0 && v0.is_finite()) {
            return Err(Error::Validation(format!("supply voltage must be positive, got {v0}")));
        }
        if !(r_a >= 0.0 && r_a.is_finite()) {
            return Err(Error::Validation(format!("shunt resistance must be nonnegative, got {r_a}")));
        }
        for (k, s) in samples.iter().enumerate() {
            if !s.t.is_finite() || !s.i.is_finite() {
                return Err(Error::Validation(format!("sample {k} is not finite")));
            }
            if s.i < 0.0 {
                return Err(Error::Validation(format!("sample {k}: negative current {}", s.i)));
            }
        }
        if let Some(k) = samples.windows(2).position(|w| w[1].t <= w[0].t) {
            return Err(Error::Validation(format!(
                "timestamps not strictly increasing at sample {}",
                k + 1
            )));
        }
        Ok(PowerLog { samples, v0, r_a })
    }

    /// Log with the default supply voltage and shunt.
    pub fn with_defaults(samples: Vec<Sample>) -> Result<Self> {
        Self::new(samples, DEFAULT_SUPPLY_VOLTS, DEFAULT_SHUNT_OHMS)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn v0(&self) -> f64 {
        self.v0
    }

    pub fn r_a(&self) -> f64 {
        self.r_a
    }

    pub fn duration(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    /// The sub-log covering samples `range` (inclusive of both ends).
    pub fn slice(&self, first: usize, last: usize) -> Result<PowerLog> {
        let samples = self
            .samples
            .get(first..=last)
            .ok_or_else(|| Error::Domain(format!("sample range {first}..={last} out of bounds")))?;
        PowerLog::new(samples.to_vec(), self.v0, self.r_a)
    }

    pub fn load(path: &Path) -> Result<PowerLog> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_power_log(&text, &path.display().to_string())
    }
}

/// `∫ i dt` and `∫ i² dt` with the current taken as linear between samples.
///
/// The first integral is the trapezoidal rule. The second is integrated
/// exactly under the same interpolant, `Δt (a² + ab + b²) / 3`, which
/// collapses to `Δt · a²` on constant segments.
pub fn current_integrals(log: &PowerLog) -> (f64, f64) {
    log.samples.windows(2).fold((0.0, 0.0), |(q, sq), w| {
        let (a, b) = (w[0].i, w[1].i);
        let dt = w[1].t - w[0].t;
        (q + dt * (a + b) / 2.0, sq + dt * (a * a + a * b + b * b) / 3.0)
    })
}

/// Energy delivered to the device over the whole log, in joules.
pub fn integrate_power_log(log: &PowerLog) -> Result<f64> {
    if log.samples.len() < 2 {
        return Err(Error::Domain(format!(
            "need at least 2 samples to integrate, got {}",
            log.samples.len()
        )));
    }
    let (charge, square) = current_integrals(log);
    Ok(log.v0 * charge - log.r_a * square)
}

/// Total energy during decoding and the idle baseline over the same window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyMeasurement {
    pub e_all: f64,
    pub e_idle: f64,
}

impl EnergyMeasurement {
    pub fn new(e_all: f64, e_idle: f64) -> Result<Self> {
        if !(0.0..).contains(&e_all) || !(0.0..).contains(&e_idle) {
            return Err(Error::Validation(format!(
                "energies must be nonnegative (e_all = {e_all}, e_idle = {e_idle})"
            )));
        }
        Ok(EnergyMeasurement { e_all, e_idle })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderEnergy {
    pub joules: f64,
    /// Set when the result is negative, which points at a measurement fault.
    pub warning: Option<String>,
}

/// Decoder-only energy `e_all − e_idle`. Negative results are kept.
pub fn decoder_energy(m: &EnergyMeasurement) -> DecoderEnergy {
    let joules = m.e_all - m.e_idle;
    let warning = (joules < 0.0).then(|| {
        format!(
            "idle energy {:.6e} J exceeds total {:.6e} J; decoder energy is negative",
            m.e_idle, m.e_all
        )
    });
    DecoderEnergy { joules, warning }
}

/// Energy of one unit from a test stream and a reference stream that differ
/// only by `n_units` identically coded units.
pub fn differential_unit_energy(e_test: f64, e_ref: f64, n_units: u64) -> Result<f64> {
    if n_units == 0 {
        return Err(Error::Domain("differential measurement needs at least one unit".into()));
    }
    Ok((e_test - e_ref) / n_units as f64)
}

/// Parses the two-column log format.
///
/// ```text
/// # optional comments
/// v0_volts = 5.2
/// shunt_ohms = 0.1
/// time_s current_a
/// 0.0 0.5
/// 2.0 0.5
/// ```
///
/// Header keys must precede the first sample. Columns may be separated by
/// whitespace or a comma.
pub fn parse_power_log(text: &str, source_name: &str) -> Result<PowerLog> {
    let mut v0 = DEFAULT_SUPPLY_VOLTS;
    let mut r_a = DEFAULT_SHUNT_OHMS;
    let mut samples = Vec::new();
    let mut seen_columns = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((key, value)) = line.split_once('=') {
            if !samples.is_empty() || seen_columns {
                return Err(Error::parse(source_name, line_no, "header key after table start"));
            }
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::parse(source_name, line_no, "bad header value"))?;
            match key.trim() {
                "v0_volts" => v0 = value,
                "shunt_ohms" => r_a = value,
                other => {
                    return Err(Error::parse(source_name, line_no, format!("unknown header key `{other}`")))
                }
            }
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        if fields == ["time_s", "current_a"] {
            if seen_columns || !samples.is_empty() {
                return Err(Error::parse(source_name, line_no, "repeated column header"));
            }
            seen_columns = true;
            continue;
        }
        let [t, i] = fields.as_slice() else {
            return Err(Error::parse(source_name, line_no, "expected two columns: time_s current_a"));
        };
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::parse(source_name, line_no, format!("bad number `{s}`")))
        };
        samples.push(Sample { t: parse(t)?, i: parse(i)? });
    }
    PowerLog::new(samples, v0, r_a).map_err(|e| match e {
        Error::Validation(msg) => Error::Validation(format!("{source_name}: {msg}")),
        other => other,
    })
}
