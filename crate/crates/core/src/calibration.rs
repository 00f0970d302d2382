//! Recovering energy constants from (features, energy) measurements.
//!
//! Two routes are provided. The joint route solves one least-squares problem
//! over the full accurate-model feature vector. The per-feature route mirrors
//! dedicated sweep experiments: energy against the number of one-valued
//! coefficients gives `e_coeff`, energy against `log2|c|` gives `e_val`.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{builtin_constants, estimate_accurate, EnergyConstants};
use crate::trace::{aggregate_trace_file, FeatureCounts, FieldPolicy, Log2Sum, ModeClass, DEPTHS};

/// Length of the design vector: offset, slices, 16 mode/depth cells, CBF,
/// coefficient count, log2 value sum, non-MPM modes, transform skips.
pub const PARAMETER_COUNT: usize = 23;

const MODE_DEPTH_BASE: usize = 2;
const CBF: usize = 18;
const COEFF: usize = 19;
const VAL: usize = 20;
const NOMPM: usize = 21;
const TSF: usize = 22;

/// Relative singular-value threshold below which a direction counts as
/// unidentifiable (after column equilibration).
const RANK_TOLERANCE: f64 = 1e-10;
/// Condition number above which a full-rank fit still carries a warning.
const CONDITION_WARNING_LIMIT: f64 = 1e8;
/// Number of intra modes falling into each class, used to average the
/// fitted class energies into the per-depth mean.
const MODES_PER_CLASS: [f64; 4] = [1.0, 1.0, 5.0, 28.0];

/// Profile key of each design-vector component.
pub fn parameter_names() -> Vec<String> {
    let mut names = vec!["e0".to_string(), "e_slice".to_string()];
    for class in ModeClass::ALL {
        for d in 1..=DEPTHS {
            names.push(format!("e_mode_depth.{}.{d}", class.name()));
        }
    }
    names.extend(["e_cbf", "e_coeff", "e_val", "e_nompm", "e_tsf"].map(String::from));
    names
}

/// One row of the accurate model's design matrix. The transform-skip
/// component is negated so that every constant stays nonnegative.
pub fn design_vector(f: &FeatureCounts) -> [f64; PARAMETER_COUNT] {
    let mut x = [0.0; PARAMETER_COUNT];
    x[0] = 1.0;
    x[1] = f.n_slice as f64;
    for class in ModeClass::ALL {
        for d in 0..DEPTHS {
            x[MODE_DEPTH_BASE + class.index() * DEPTHS + d] = f.n_mode_depth[class.index()][d] as f64;
        }
    }
    x[CBF] = f.n_cbf as f64;
    x[COEFF] = f.n_coeff as f64;
    x[VAL] = f.sum_log2_abs();
    x[NOMPM] = f.n_nompm as f64;
    x[TSF] = -(f.n_tsf as f64);
    x
}

/// Constants in design-vector order.
pub fn constants_vector(k: &EnergyConstants) -> [f64; PARAMETER_COUNT] {
    let mut v = [0.0; PARAMETER_COUNT];
    v[0] = k.e0;
    v[1] = k.e_slice;
    for c in 0..4 {
        for d in 0..DEPTHS {
            v[MODE_DEPTH_BASE + c * DEPTHS + d] = k.e_mode_depth[c][d];
        }
    }
    v[CBF] = k.e_cbf;
    v[COEFF] = k.e_coeff;
    v[VAL] = k.e_val;
    v[NOMPM] = k.e_nompm;
    v[TSF] = k.e_tsf;
    v
}

/// Inverse of [`constants_vector`]. The per-depth average row is the mean
/// over all 35 intra modes, each class weighted by its mode count.
pub fn constants_from_vector(v: &[f64; PARAMETER_COUNT]) -> EnergyConstants {
    let mut e_mode_depth = [[0.0; DEPTHS]; 4];
    for (c, row) in e_mode_depth.iter_mut().enumerate() {
        for (d, e) in row.iter_mut().enumerate() {
            *e = v[MODE_DEPTH_BASE + c * DEPTHS + d];
        }
    }
    let total_modes: f64 = MODES_PER_CLASS.iter().sum();
    let e_depth_avg = std::array::from_fn(|d| {
        (0..4).map(|c| MODES_PER_CLASS[c] * e_mode_depth[c][d]).sum::<f64>() / total_modes
    });
    EnergyConstants {
        e0: v[0],
        e_slice: v[1],
        e_mode_depth,
        e_depth_avg,
        e_cbf: v[CBF],
        e_coeff: v[COEFF],
        e_val: v[VAL],
        e_nompm: v[NOMPM],
        e_tsf: v[TSF],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementPair {
    pub features: FeatureCounts,
    /// Joules.
    pub energy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub constants: EnergyConstants,
    pub residual_rms: f64,
    /// Names of constants whose fitted value is negative.
    pub negative_flags: Vec<String>,
    pub condition_warning: Option<String>,
    /// Condition number of the column-equilibrated design matrix.
    pub condition_number: f64,
}

/// Ordinary least squares over the accurate model, solved through an SVD of
/// the column-equilibrated design matrix with one step of iterative
/// refinement. Fails with [`Error::Unidentifiable`] when the data cannot
/// separate some constants.
pub fn fit_constants(dataset: &[MeasurementPair]) -> Result<FitResult> {
    let names = parameter_names();
    let rows = dataset.len();
    for (i, pair) in dataset.iter().enumerate() {
        if !pair.energy.is_finite() {
            return Err(Error::Validation(format!("row {i}: energy is not finite")));
        }
        pair.features
            .validate()
            .map_err(|e| Error::Validation(format!("row {i}: {e}")))?;
    }

    let mut x = DMatrix::<f64>::zeros(rows.max(PARAMETER_COUNT), PARAMETER_COUNT);
    let mut y = DVector::<f64>::zeros(rows.max(PARAMETER_COUNT));
    for (i, pair) in dataset.iter().enumerate() {
        for (j, v) in design_vector(&pair.features).into_iter().enumerate() {
            x[(i, j)] = v;
        }
        y[i] = pair.energy;
    }

    let scale: Vec<f64> = (0..PARAMETER_COUNT)
        .map(|j| x.column(j).amax())
        .collect();
    let empty: Vec<String> = (0..PARAMETER_COUNT)
        .filter(|&j| scale[j] == 0.0)
        .map(|j| names[j].clone())
        .collect();
    if !empty.is_empty() {
        return Err(Error::Unidentifiable(empty));
    }
    let mut xs = x.clone();
    for (j, s) in scale.iter().enumerate() {
        xs.column_mut(j).unscale_mut(*s);
    }

    let svd = xs.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let sigma_min = svd.singular_values.min();
    let cutoff = sigma_max * RANK_TOLERANCE;
    if sigma_min <= cutoff || rows < PARAMETER_COUNT {
        let v_t = svd.v_t.as_ref().expect("V computed");
        let mut weight = [0.0; PARAMETER_COUNT];
        for (k, s) in svd.singular_values.iter().enumerate() {
            if *s <= cutoff {
                for j in 0..PARAMETER_COUNT {
                    weight[j] += v_t[(k, j)].powi(2);
                }
            }
        }
        let unidentifiable: Vec<String> = (0..PARAMETER_COUNT)
            .filter(|&j| weight[j] > 1e-12)
            .map(|j| names[j].clone())
            .collect();
        return Err(Error::Unidentifiable(unidentifiable));
    }

    let mut beta = svd.solve(&y, 0.0).map_err(|e| Error::Domain(e.to_string()))?;
    let residual = &y - &xs * &beta;
    beta += svd.solve(&residual, 0.0).map_err(|e| Error::Domain(e.to_string()))?;

    let mut fitted = [0.0; PARAMETER_COUNT];
    for j in 0..PARAMETER_COUNT {
        fitted[j] = beta[j] / scale[j];
    }
    let residual = &y - &x * DVector::from_row_slice(&fitted);
    let residual_rms = (residual.rows(0, rows).norm_squared() / rows as f64).sqrt();

    let condition_number = sigma_max / sigma_min;
    let condition_warning = (condition_number > CONDITION_WARNING_LIMIT).then(|| {
        format!("design matrix condition number {condition_number:.3e}; fitted constants may be unreliable")
    });
    let negative_flags = names
        .iter()
        .zip(fitted)
        .filter(|(_, v)| *v < 0.0)
        .map(|(n, _)| n.clone())
        .collect();
    Ok(FitResult {
        constants: constants_from_vector(&fitted),
        residual_rms,
        negative_flags,
        condition_warning,
        condition_number,
    })
}

/// A fitted straight line `energy = intercept + slope · x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub residual_rms: f64,
    pub points_used: usize,
}

/// Least-squares line through `(x, y)`. Points are sorted first, so the
/// result does not depend on input order.
fn fit_line(points: &mut [(f64, f64)], what: &str) -> Result<LineFit> {
    if let Some((x, y)) = points.iter().find(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Validation(format!("{what}: non-finite point ({x}, {y})")));
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let distinct = points.windows(2).filter(|w| w[0].0 != w[1].0).count() + usize::from(!points.is_empty());
    if distinct < 2 {
        return Err(Error::DegenerateFit(format!(
            "{what}: need at least 2 distinct abscissa values, got {distinct}"
        )));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (sxy, sxx) = points.iter().fold((0.0, 0.0), |(sxy, sxx), &(x, y)| {
        let dx = x - mean_x;
        (sxy + dx * (y - mean_y), sxx + dx * dx)
    });
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let residual_rms = (points
        .iter()
        .map(|&(x, y)| (y - intercept - slope * x).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(LineFit {
        slope,
        intercept,
        residual_rms,
        points_used: points.len(),
    })
}

/// Energy against number of one-valued coefficients; the slope estimates
/// `e_coeff`.
pub fn fit_coeff_energy(points: &[(u64, f64)]) -> Result<LineFit> {
    let mut xy: Vec<(f64, f64)> = points.iter().map(|&(n, e)| (n as f64, e)).collect();
    fit_line(&mut xy, "coefficient-count fit")
}

/// Which points the value-energy fit uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ValueRange {
    /// Only magnitudes below 256, where coefficient values are most frequent.
    #[default]
    Below256,
    All,
}

pub const VALUE_FIT_CUTOFF: u64 = 256;

/// Energy against `log2|value|`; the slope estimates `e_val`. Signed values
/// are folded onto their magnitude.
pub fn fit_value_energy(points: &[(i64, f64)], range: ValueRange) -> Result<LineFit> {
    if let Some((v, _)) = points.iter().find(|(v, _)| *v == 0) {
        return Err(Error::Validation(format!(
            "value fit: coefficient value {v} has no logarithm"
        )));
    }
    let mut xy: Vec<(f64, f64)> = points
        .iter()
        .filter(|(v, _)| range == ValueRange::All || v.unsigned_abs() < VALUE_FIT_CUTOFF)
        .map(|&(v, e)| ((v.unsigned_abs() as f64).log2(), e))
        .collect();
    fit_line(&mut xy, "coefficient-value fit")
}

/// Ground truth for synthetic measurement generation.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatorConfig {
    pub truth: EnergyConstants,
    /// Standard deviation of the multiplicative Gaussian noise.
    pub noise_rel: f64,
    pub seed: u64,
}

fn row_rng(seed: u64, row: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(row as u64);
    rng
}

/// Energies `estimate_accurate(f, truth) · (1 + ε)`, `ε ~ N(0, noise_rel)`.
/// Row `k` draws from its own stream derived from `(seed, k)`.
pub fn simulate(config: &SimulatorConfig, features: &[FeatureCounts]) -> Result<Vec<MeasurementPair>> {
    if !(config.noise_rel >= 0.0 && config.noise_rel.is_finite()) {
        return Err(Error::Validation(format!(
            "noise_rel must be a finite nonnegative number, got {}",
            config.noise_rel
        )));
    }
    let noise = Normal::new(0.0, config.noise_rel).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(features
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let model = estimate_accurate(f, &config.truth).total;
            let energy = if config.noise_rel == 0.0 {
                model
            } else {
                model * (1.0 + noise.sample(&mut row_rng(config.seed, k)))
            };
            MeasurementPair {
                features: f.clone(),
                energy,
            }
        })
        .collect())
}

/// Synthetic feature corpus that excites every design direction.
///
/// Each row carries small background counts plus one dominant feature
/// group, sized so that the group contributes tens of millijoules at the
/// built-in constants. Every second row is a transform-skip row: a large
/// depth-4 population that is either entirely skipped or not skipped at
/// all. The skip term can never exceed about 7% of such a row's energy, so
/// it needs many rows at maximum contrast to be resolved under noise.
pub fn spanning_features(rows: usize, seed: u64) -> Vec<FeatureCounts> {
    let scale = builtin_constants();
    const FOCUS_GROUPS: usize = 21;
    (0..rows)
        .map(|k| {
            let mut rng = row_rng(seed ^ 0x5eed_f00d, k);
            let mut f = FeatureCounts {
                n_slice: rng.random_range(1..=16),
                qp: rng.random_range(22..=45),
                ..Default::default()
            };
            for row in f.n_mode_depth.iter_mut() {
                for n in row.iter_mut() {
                    *n = rng.random_range(0..=3);
                }
            }
            f.n_cbf = rng.random_range(0..=8);
            f.n_nompm = rng.random_range(0..=8);
            let small_coeffs: u64 = rng.random_range(0..=8);
            f.n_coeff = small_coeffs;
            f.log2_sum = Log2Sum::from_f64(small_coeffs as f64 * rng.random_range(0.0..3.0))
                .expect("nonnegative");

            let budget = rng.random_range(0.005..0.08);
            if k % 2 == 1 {
                let c = rng.random_range(0..4);
                let units = (4.0 * budget / scale.e_mode_depth[c][DEPTHS - 1]) as u64;
                f.n_mode_depth[c][DEPTHS - 1] += units;
                if rng.random_bool(0.5) {
                    f.n_tsf = f.n_depth(DEPTHS);
                }
                return f;
            }
            match (k / 2) % FOCUS_GROUPS {
                group @ 0..=15 => {
                    let (c, d) = (group / DEPTHS, group % DEPTHS);
                    f.n_mode_depth[c][d] += (budget / scale.e_mode_depth[c][d]) as u64;
                }
                16 => f.n_cbf += (budget / scale.e_cbf) as u64,
                17 => f.n_coeff += (budget / scale.e_coeff) as u64,
                18 => {
                    let mean_log2 = rng.random_range(1.0..12.0);
                    let extra = (budget / (scale.e_coeff + scale.e_val * mean_log2)) as u64;
                    f.n_coeff += extra;
                    f.log2_sum += Log2Sum::from_f64(extra as f64 * mean_log2).expect("nonnegative");
                }
                19 => f.n_nompm += (budget / scale.e_nompm) as u64,
                _ => f.n_slice += (budget / scale.e_slice) as u64,
            }
            f
        })
        .collect()
}

/// First line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub kind: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_rel: Option<f64>,
}

pub const DATASET_KIND: &str = "hevc-energy-dataset";

impl Default for DatasetHeader {
    fn default() -> Self {
        DatasetHeader {
            kind: DATASET_KIND.to_string(),
            version: 1,
            seed: None,
            noise_rel: None,
        }
    }
}

/// One dataset row after trace references have been resolved.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetRow {
    /// Full feature counts, inline or aggregated from a referenced trace.
    Pair(MeasurementPair),
    /// Stream energy for a number of one-valued coefficients.
    CoeffCount { n_coeff: u64, energy: f64 },
    /// Energy for a coefficient value (sign is ignored by the fit).
    CoeffValue { value: i64, energy: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub rows: Vec<DatasetRow>,
}

impl Dataset {
    pub fn pairs(&self) -> Vec<MeasurementPair> {
        self.rows
            .iter()
            .filter_map(|r| match r {
                DatasetRow::Pair(p) => Some(p.clone()),
                _ => None,
            })
            .collect()
    }
}

fn take_energy(map: &mut Map<String, Value>, source: &str, line: usize) -> Result<f64> {
    let energy = map
        .remove("energy")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| Error::parse(source, line, "row needs a numeric `energy`"))?;
    if !energy.is_finite() {
        return Err(Error::parse(source, line, "energy is not finite"));
    }
    Ok(energy)
}

/// Reads a dataset. Each row is one of
/// `{"features": {..}, "energy": e}`, `{"trace": "path", "energy": e}`,
/// `{"n_coeff": n, "energy": e}` or `{"abs_value": v, "energy": e}`.
/// Trace paths are relative to the dataset file's directory.
pub fn read_dataset(path: &Path, policy: FieldPolicy) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_dataset(BufReader::new(file), &path.display().to_string(), &base, policy)
}

pub fn parse_dataset<R: BufRead>(
    reader: R,
    source: &str,
    base_dir: &Path,
    policy: FieldPolicy,
) -> Result<Dataset> {
    let mut header = None;
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(source, e))?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if header.is_none() {
            let h: DatasetHeader = serde_json::from_str(text)
                .map_err(|e| Error::parse(source, line_no, format!("dataset header: {e}")))?;
            if h.kind != DATASET_KIND {
                return Err(Error::parse(source, line_no, format!("unexpected dataset kind `{}`", h.kind)));
            }
            header = Some(h);
            continue;
        }
        let mut map = match serde_json::from_str::<Value>(text) {
            Ok(Value::Object(map)) => map,
            Ok(_) => return Err(Error::parse(source, line_no, "expected a JSON object")),
            Err(e) => return Err(Error::parse(source, line_no, e.to_string())),
        };
        let energy = take_energy(&mut map, source, line_no)?;
        let row = if let Some(features) = map.remove("features") {
            let features: FeatureCounts = serde_json::from_value(features)
                .map_err(|e| Error::parse(source, line_no, format!("features: {e}")))?;
            DatasetRow::Pair(MeasurementPair { features, energy })
        } else if let Some(trace) = map.remove("trace") {
            let rel = trace
                .as_str()
                .ok_or_else(|| Error::parse(source, line_no, "`trace` must be a path string"))?;
            let trace_path: PathBuf = base_dir.join(rel);
            let (features, _) = aggregate_trace_file(&trace_path, policy)?;
            DatasetRow::Pair(MeasurementPair { features, energy })
        } else if let Some(n) = map.remove("n_coeff") {
            let n_coeff = n
                .as_u64()
                .ok_or_else(|| Error::parse(source, line_no, "`n_coeff` must be a nonnegative integer"))?;
            DatasetRow::CoeffCount { n_coeff, energy }
        } else if let Some(v) = map.remove("abs_value") {
            let value = v
                .as_i64()
                .filter(|v| *v != 0)
                .ok_or_else(|| Error::parse(source, line_no, "`abs_value` must be a nonzero integer"))?;
            DatasetRow::CoeffValue { value, energy }
        } else {
            return Err(Error::parse(
                source,
                line_no,
                "row needs one of `features`, `trace`, `n_coeff`, `abs_value`",
            ));
        };
        if let Some(extra) = map.keys().next() {
            return Err(Error::parse(source, line_no, format!("unknown field `{extra}`")));
        }
        rows.push(row);
    }
    let header = header.ok_or_else(|| Error::parse(source, 0, "missing dataset header"))?;
    Ok(Dataset { header, rows })
}

/// Writes a dataset of inline feature rows.
pub fn write_dataset<W: Write>(mut out: W, header: &DatasetHeader, pairs: &[MeasurementPair]) -> std::io::Result<()> {
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for pair in pairs {
        serde_json::to_writer(&mut out, pair)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Outcome of the per-feature calibration route.
#[derive(Clone, Debug, PartialEq)]
pub struct PerFeatureFit {
    /// `base` with each fitted constant replaced.
    pub constants: EnergyConstants,
    pub coeff: Option<LineFit>,
    pub value: Option<LineFit>,
    pub ignored_rows: usize,
}

/// Fits `e_coeff` from coefficient-count rows and `e_val` from
/// coefficient-value rows; other constants are taken from `base`.
pub fn fit_per_feature(dataset: &Dataset, base: &EnergyConstants, range: ValueRange) -> Result<PerFeatureFit> {
    let mut counts = Vec::new();
    let mut values = Vec::new();
    let mut ignored_rows = 0;
    for row in &dataset.rows {
        match *row {
            DatasetRow::CoeffCount { n_coeff, energy } => counts.push((n_coeff, energy)),
            DatasetRow::CoeffValue { value, energy } => values.push((value, energy)),
            DatasetRow::Pair(_) => ignored_rows += 1,
        }
    }
    if counts.is_empty() && values.is_empty() {
        return Err(Error::Unidentifiable(vec!["e_coeff".into(), "e_val".into()]));
    }
    let coeff = (!counts.is_empty()).then(|| fit_coeff_energy(&counts)).transpose()?;
    let value = (!values.is_empty()).then(|| fit_value_energy(&values, range)).transpose()?;
    let mut constants = base.clone();
    if let Some(fit) = coeff {
        constants.e_coeff = fit.slope;
    }
    if let Some(fit) = value {
        constants.e_val = fit.slope;
    }
    Ok(PerFeatureFit {
        constants,
        coeff,
        value,
        ignored_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_match_profile_keys() {
        let names = parameter_names();
        assert_eq!(names.len(), PARAMETER_COUNT);
        let keys: Vec<String> = builtin_constants().entries().into_iter().map(|(k, _)| k).collect();
        for n in &names {
            assert!(keys.contains(n), "{n}");
        }
    }

    #[test]
    fn zero_features_design_row() {
        let x = design_vector(&FeatureCounts::default());
        assert_eq!(x[0], 1.0);
        assert!(x[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tsf_component_is_negative() {
        let mut f = FeatureCounts::default();
        f.n_mode_depth[0][3] = 3;
        f.n_tsf = 3;
        assert_eq!(design_vector(&f)[TSF], -3.0);
    }

    #[test]
    fn vector_round_trip_preserves_fitted_constants() {
        let k = builtin_constants();
        let back = constants_from_vector(&constants_vector(&k));
        assert_eq!(constants_vector(&back), constants_vector(&k));
        assert_eq!(back.e_mode_depth, k.e_mode_depth);
    }

    #[test]
    fn two_point_fit_interpolates() {
        let fit = fit_coeff_energy(&[(10, 0.03), (110, 0.05)]).unwrap();
        assert!((fit.slope - 2e-4).abs() < 1e-18);
        assert!((fit.intercept - 0.028).abs() < 1e-15);
        assert!(fit.residual_rms < 1e-15);
    }

    #[test]
    fn degenerate_fits() {
        assert!(matches!(fit_coeff_energy(&[(5, 0.1), (5, 0.2)]), Err(Error::DegenerateFit(_))));
        assert!(matches!(fit_coeff_energy(&[]), Err(Error::DegenerateFit(_))));
        let err = fit_value_energy(&[(300, 0.1), (400, 0.2), (7, 0.1)], ValueRange::Below256).unwrap_err();
        assert!(matches!(err, Error::DegenerateFit(_)));
        assert!(fit_value_energy(&[(300, 0.1), (400, 0.2), (7, 0.1)], ValueRange::All).is_ok());
        assert!(fit_value_energy(&[(0, 0.1), (2, 0.2)], ValueRange::All).is_err());
    }

    #[test]
    fn value_fit_intercept_is_unit_value_energy() {
        let fit = fit_value_energy(&[(1, 0.04), (16, 0.05)], ValueRange::Below256).unwrap();
        assert!((fit.intercept - 0.04).abs() < 1e-15);
        assert!((fit.slope - 0.0025).abs() < 1e-15);
    }

    #[test]
    fn signed_values_fold_to_magnitude() {
        let pos: Vec<(i64, f64)> = (1..200).map(|v| (v, 0.04 + 1e-3 * (v as f64).ln())).collect();
        let mixed: Vec<(i64, f64)> = pos.iter().map(|&(v, e)| (if v % 2 == 0 { -v } else { v }, e)).collect();
        assert_eq!(
            fit_value_energy(&pos, ValueRange::Below256).unwrap(),
            fit_value_energy(&mixed, ValueRange::Below256).unwrap()
        );
    }

    #[test]
    fn missing_tsf_column_is_named() {
        let mut feats = spanning_features(200, 3);
        for f in &mut feats {
            f.n_tsf = 0;
        }
        let data = simulate(
            &SimulatorConfig { truth: builtin_constants(), noise_rel: 0.0, seed: 1 },
            &feats,
        )
        .unwrap();
        match fit_constants(&data) {
            Err(Error::Unidentifiable(names)) => assert_eq!(names, vec!["e_tsf".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn collinear_columns_are_both_named() {
        let mut feats = spanning_features(200, 4);
        for f in &mut feats {
            f.n_nompm = f.n_cbf;
        }
        let data = simulate(
            &SimulatorConfig { truth: builtin_constants(), noise_rel: 0.0, seed: 1 },
            &feats,
        )
        .unwrap();
        match fit_constants(&data) {
            Err(Error::Unidentifiable(names)) => {
                assert_eq!(names, vec!["e_cbf".to_string(), "e_nompm".to_string()])
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn too_few_rows_is_unidentifiable() {
        let feats = spanning_features(10, 5);
        let data = simulate(
            &SimulatorConfig { truth: builtin_constants(), noise_rel: 0.0, seed: 1 },
            &feats,
        )
        .unwrap();
        assert!(matches!(fit_constants(&data), Err(Error::Unidentifiable(_))));
    }

    #[test]
    fn negative_constants_are_flagged() {
        let mut truth = builtin_constants();
        truth.e_nompm = -1e-7;
        let data = simulate(
            &SimulatorConfig { truth, noise_rel: 0.0, seed: 1 },
            &spanning_features(100, 6),
        )
        .unwrap();
        let fit = fit_constants(&data).unwrap();
        assert_eq!(fit.negative_flags, vec!["e_nompm".to_string()]);
    }

    #[test]
    fn simulate_rejects_negative_noise() {
        let cfg = SimulatorConfig { truth: builtin_constants(), noise_rel: -0.1, seed: 0 };
        assert!(simulate(&cfg, &[]).is_err());
    }

    #[test]
    fn spanning_features_are_valid() {
        for f in spanning_features(300, 9) {
            f.validate().unwrap();
        }
    }

    #[test]
    fn dataset_rows_parse() {
        let text = format!(
            "{{\"kind\":\"{DATASET_KIND}\",\"version\":1}}\n{{\"n_coeff\":3,\"energy\":0.1}}\n{{\"abs_value\":-7,\"energy\":0.2}}\n"
        );
        let ds = parse_dataset(text.as_bytes(), "d", Path::new("."), FieldPolicy::Strict).unwrap();
        assert_eq!(ds.rows, vec![
            DatasetRow::CoeffCount { n_coeff: 3, energy: 0.1 },
            DatasetRow::CoeffValue { value: -7, energy: 0.2 },
        ]);
        let bad = format!("{{\"kind\":\"{DATASET_KIND}\",\"version\":1}}\n{{\"n_coeff\":3,\"energy\":0.1,\"x\":1}}\n");
        let err = parse_dataset(bad.as_bytes(), "d", Path::new("."), FieldPolicy::Strict).unwrap_err();
        assert!(err.to_string().contains("d:2"), "{err}");
    }

    #[test]
    fn per_feature_requires_sweep_rows() {
        let ds = Dataset { header: DatasetHeader::default(), rows: vec![] };
        assert!(matches!(
            fit_per_feature(&ds, &builtin_constants(), ValueRange::Below256),
            Err(Error::Unidentifiable(_))
        ));
    }
}
