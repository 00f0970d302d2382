//! Decoding-energy model for HEVC intra bitstreams.
//!
//! * [`trace`] ingests per-TU feature traces and counts model features.
//! * [`model`] holds the energy constants and evaluates the accurate and
//!   simplified estimators.
//! * [`measurement`] turns current logs into energies.
//! * [`calibration`] fits constants to measured datasets and simulates
//!   synthetic ones.
//! * [`cli`] implements the `hevc-energy` subcommands.

pub mod calibration;
pub mod cli;
pub mod error;
pub mod measurement;
pub mod model;
pub mod trace;

pub use calibration::{design_vector, fit_constants, simulate, FitResult, MeasurementPair, SimulatorConfig};
pub use error::{Error, Result};
pub use measurement::{integrate_power_log, PowerLog, Sample};
pub use model::{builtin_constants, estimate_accurate, estimate_simplified, relative_error, EnergyConstants, EstimateReport, ModelKind};
pub use trace::{aggregate, classify_mode, validate_record, FeatureCounts, ModeClass, StreamHeader, TraceRecord};
