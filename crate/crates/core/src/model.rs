//! Energy constants and the accurate / simplified decoding-energy estimators.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{FeatureCounts, ModeClass, DEPTHS};

/// QP at or below which coefficient values can no longer be neglected.
pub const SIMPLIFIED_MIN_QP: u8 = 30;

const BUILTIN_PROFILE: &str = include_str!("builtin_profile.txt");

/// Model coefficients, all in joules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyConstants {
    /// Fixed start-up and termination energy per decoder run.
    pub e0: f64,
    pub e_slice: f64,
    /// Per-unit energy indexed `[mode class][depth - 1]`.
    pub e_mode_depth: [[f64; DEPTHS]; 4],
    /// Mode-averaged per-unit energy per depth, used by the simplified model.
    pub e_depth_avg: [f64; DEPTHS],
    pub e_cbf: f64,
    pub e_coeff: f64,
    pub e_val: f64,
    pub e_nompm: f64,
    /// Energy saved per transform-skipped unit.
    pub e_tsf: f64,
}

/// Constants measured on the reference platform.
pub fn builtin_constants() -> EnergyConstants {
    static BUILTIN: OnceLock<EnergyConstants> = OnceLock::new();
    BUILTIN
        .get_or_init(|| {
            parse_profile(BUILTIN_PROFILE, "<builtin>").expect("embedded profile is well-formed")
        })
        .clone()
}

/// The embedded profile text, byte for byte.
pub fn builtin_profile_text() -> &'static str {
    BUILTIN_PROFILE
}

impl EnergyConstants {
    /// Every profile key with its value, in canonical order.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("e0".to_string(), self.e0),
            ("e_slice".to_string(), self.e_slice),
        ];
        for class in ModeClass::ALL {
            for d in 0..DEPTHS {
                out.push((
                    format!("e_mode_depth.{}.{}", class.name(), d + 1),
                    self.e_mode_depth[class.index()][d],
                ));
            }
        }
        for d in 0..DEPTHS {
            out.push((format!("e_depth_avg.{}", d + 1), self.e_depth_avg[d]));
        }
        out.extend([
            ("e_cbf".to_string(), self.e_cbf),
            ("e_coeff".to_string(), self.e_coeff),
            ("e_val".to_string(), self.e_val),
            ("e_nompm".to_string(), self.e_nompm),
            ("e_tsf".to_string(), self.e_tsf),
        ]);
        out
    }

    fn slot_mut(&mut self, key: &str) -> Option<&mut f64> {
        match key {
            "e0" => return Some(&mut self.e0),
            "e_slice" => return Some(&mut self.e_slice),
            "e_cbf" => return Some(&mut self.e_cbf),
            "e_coeff" => return Some(&mut self.e_coeff),
            "e_val" => return Some(&mut self.e_val),
            "e_nompm" => return Some(&mut self.e_nompm),
            "e_tsf" => return Some(&mut self.e_tsf),
            _ => {}
        }
        let depth_index = |s: &str| {
            s.parse::<usize>()
                .ok()
                .filter(|d| (1..=DEPTHS).contains(d))
                .map(|d| d - 1)
        };
        if let Some(rest) = key.strip_prefix("e_mode_depth.") {
            let (class, depth) = rest.split_once('.')?;
            let class = ModeClass::from_name(class)?;
            return Some(&mut self.e_mode_depth[class.index()][depth_index(depth)?]);
        }
        if let Some(depth) = key.strip_prefix("e_depth_avg.") {
            return Some(&mut self.e_depth_avg[depth_index(depth)?]);
        }
        None
    }

    /// Renders the flat `key = value` profile format. Values use the
    /// shortest representation that parses back to the same double.
    pub fn to_profile_string(&self) -> String {
        let mut out = String::from("# HEVC intra decoding energy constants [J].\n");
        for (key, value) in self.entries() {
            let _ = writeln!(out, "{key} = {value:e}");
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_profile(&text, &path.display().to_string())
    }
}

/// Parses a constants profile. Every canonical key must appear exactly once.
pub fn parse_profile(text: &str, source_name: &str) -> Result<EnergyConstants> {
    let mut constants = EnergyConstants {
        e0: 0.0,
        e_slice: 0.0,
        e_mode_depth: [[0.0; DEPTHS]; 4],
        e_depth_avg: [0.0; DEPTHS],
        e_cbf: 0.0,
        e_coeff: 0.0,
        e_val: 0.0,
        e_nompm: 0.0,
        e_tsf: 0.0,
    };
    let mut seen = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(source_name, line_no, "expected `key = value`"))?;
        let key = key.trim();
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::parse(source_name, line_no, format!("bad number for `{key}`")))?;
        if !value.is_finite() {
            return Err(Error::parse(source_name, line_no, format!("`{key}` is not finite")));
        }
        let slot = constants
            .slot_mut(key)
            .ok_or_else(|| Error::parse(source_name, line_no, format!("unknown key `{key}`")))?;
        *slot = value;
        if let Some(first) = seen.insert(key.to_string(), line_no) {
            return Err(Error::parse(
                source_name,
                line_no,
                format!("duplicate key `{key}` (first on line {first})"),
            ));
        }
    }
    let missing: Vec<String> = constants
        .entries()
        .into_iter()
        .map(|(k, _)| k)
        .filter(|k| !seen.contains_key(k))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "{source_name}: missing key(s): {}",
            missing.join(", ")
        )));
    }
    Ok(constants)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Accurate,
    Simplified,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Accurate => "accurate",
            ModelKind::Simplified => "simplified",
        }
    }
}

/// Per-term energy contributions. `tsf` carries its sign (≤ 0).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Terms {
    pub offset: f64,
    pub slice: f64,
    pub mode_depth: f64,
    pub cbf: f64,
    pub coeff: f64,
    pub val: f64,
    pub nompm: f64,
    pub tsf: f64,
}

impl Terms {
    pub fn named(&self) -> [(&'static str, f64); 8] {
        [
            ("offset", self.offset),
            ("slice", self.slice),
            ("mode_depth", self.mode_depth),
            ("cbf", self.cbf),
            ("coeff", self.coeff),
            ("val", self.val),
            ("nompm", self.nompm),
            ("tsf", self.tsf),
        ]
    }

    /// Left-to-right sum in the order of [`Terms::named`].
    pub fn sum(&self) -> f64 {
        self.named().iter().fold(0.0, |acc, (_, v)| acc + v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub model: ModelKind,
    pub total: f64,
    pub terms: Terms,
    pub warnings: Vec<String>,
}

/// `Σ_class weight[class] · count[class]` accumulated class by class.
/// Both estimators route their per-depth sums through here so that equal
/// weights give bitwise equal results.
fn depth_term(weights: [f64; 4], counts: [u64; 4]) -> f64 {
    weights
        .iter()
        .zip(counts)
        .fold(0.0, |acc, (w, n)| acc + w * n as f64)
}

fn counts_at(f: &FeatureCounts, d: usize) -> [u64; 4] {
    ModeClass::ALL.map(|c| f.n_mode_depth[c.index()][d])
}

/// Full model: offset, slices, per-mode/depth units, residual terms, MPM and
/// transform-skip corrections.
pub fn estimate_accurate(f: &FeatureCounts, k: &EnergyConstants) -> EstimateReport {
    let mode_depth = (0..DEPTHS).fold(0.0, |acc, d| {
        acc + depth_term(ModeClass::ALL.map(|c| k.e_mode_depth[c.index()][d]), counts_at(f, d))
    });
    let terms = Terms {
        offset: k.e0,
        slice: k.e_slice * f.n_slice as f64,
        mode_depth,
        cbf: k.e_cbf * f.n_cbf as f64,
        coeff: k.e_coeff * f.n_coeff as f64,
        val: k.e_val * f.sum_log2_abs(),
        nompm: k.e_nompm * f.n_nompm as f64,
        tsf: -(k.e_tsf * f.n_tsf as f64),
    };
    EstimateReport {
        model: ModelKind::Accurate,
        total: terms.sum(),
        terms,
        warnings: Vec::new(),
    }
}

/// Reduced model: mode-averaged unit energies, no coefficient values, no MPM
/// or transform-skip terms. Valid for QP above 30.
pub fn estimate_simplified(f: &FeatureCounts, k: &EnergyConstants) -> EstimateReport {
    let mode_depth = (0..DEPTHS).fold(0.0, |acc, d| {
        acc + depth_term([k.e_depth_avg[d]; 4], counts_at(f, d))
    });
    let terms = Terms {
        offset: k.e0,
        slice: k.e_slice * f.n_slice as f64,
        mode_depth,
        cbf: k.e_cbf * f.n_cbf as f64,
        coeff: k.e_coeff * f.n_coeff as f64,
        ..Terms::default()
    };
    let mut warnings = Vec::new();
    if f.qp <= SIMPLIFIED_MIN_QP {
        warnings.push(format!(
            "simplified model invalid for QP ≤ {SIMPLIFIED_MIN_QP} (qp = {})",
            f.qp
        ));
    }
    if f.n_tsf > 0 {
        warnings.push(format!(
            "simplified model ignores {} transform-skipped units",
            f.n_tsf
        ));
    }
    if f.n_nompm > 0 {
        warnings.push(format!(
            "simplified model ignores {} non-MPM intra modes",
            f.n_nompm
        ));
    }
    EstimateReport {
        model: ModelKind::Simplified,
        total: terms.sum(),
        terms,
        warnings,
    }
}

pub fn estimate(f: &FeatureCounts, k: &EnergyConstants, model: ModelKind) -> EstimateReport {
    match model {
        ModelKind::Accurate => estimate_accurate(f, k),
        ModelKind::Simplified => estimate_simplified(f, k),
    }
}

/// `|measured − estimated| / measured`.
pub fn relative_error(measured: f64, estimated: f64) -> Result<f64> {
    if !(measured.is_finite() && measured > 0.0) {
        return Err(Error::Domain(format!(
            "measured energy must be positive, got {measured}"
        )));
    }
    Ok((measured - estimated).abs() / measured)
}

/// Per depth, the largest relative deviation of a mode class from the
/// mode-averaged energy.
pub fn mode_spread(k: &EnergyConstants) -> Result<[f64; DEPTHS]> {
    let mut spread = [0.0; DEPTHS];
    for (d, out) in spread.iter_mut().enumerate() {
        let avg = k.e_depth_avg[d];
        if avg == 0.0 {
            return Err(Error::Domain(format!("e_depth_avg.{} is zero", d + 1)));
        }
        *out = ModeClass::ALL
            .iter()
            .map(|c| (k.e_mode_depth[c.index()][d] - avg).abs() / avg.abs())
            .fold(0.0, f64::max);
    }
    Ok(spread)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{Log2Sum, StreamHeader};

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn builtin_values() {
        let k = builtin_constants();
        assert_eq!(k.e_mode_depth[ModeClass::Pla.index()][0], 2.505e-4);
        assert_eq!(k.e_depth_avg[3], 7.431e-6);
        assert_eq!(k.e_cbf, 9.863e-7);
        assert_eq!(k.e0, 1.579e-2);
        assert_eq!(k.e_slice, 6.250e-4);
        assert_eq!(k.e_tsf, 5.0916e-7);
        assert_eq!(k.e_nompm, 7.413e-7);
        assert_eq!(k.e_coeff, 2.064e-7);
        assert_eq!(k.e_val, 1.729e-7);
    }

    #[test]
    fn builtin_rows_decrease_with_depth_and_are_positive() {
        let k = builtin_constants();
        for row in k.e_mode_depth.iter().chain(std::iter::once(&k.e_depth_avg)) {
            assert!(row.windows(2).all(|w| w[0] > w[1]), "{row:?}");
        }
        assert!(k.entries().iter().all(|(_, v)| *v >= 0.0));
    }

    #[test]
    fn profile_round_trips() {
        let k = builtin_constants();
        let text = k.to_profile_string();
        assert_eq!(parse_profile(&text, "x").unwrap(), k);
    }

    #[test]
    fn profile_rejects_unknown_missing_and_duplicate_keys() {
        let base = builtin_profile_text();
        let err = parse_profile(&format!("{base}e_foo = 1\n"), "p").unwrap_err();
        assert!(err.to_string().contains("unknown key `e_foo`"), "{err}");
        let err = parse_profile(&format!("{base}e0 = 1\n"), "p").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
        let trimmed: String = base.lines().filter(|l| !l.starts_with("e_tsf")).map(|l| format!("{l}\n")).collect();
        let err = parse_profile(&trimmed, "p").unwrap_err();
        assert!(err.to_string().contains("e_tsf"), "{err}");
        let err = parse_profile(&base.replace("e_depth_avg.4", "e_depth_avg.5"), "p").unwrap_err();
        assert!(err.to_string().contains("e_depth_avg.5"), "{err}");
    }

    fn header(qp: u8) -> StreamHeader {
        StreamHeader { n_slice: 1, qp }
    }

    #[test]
    fn accurate_single_planar_unit() {
        let mut f = FeatureCounts::empty(header(32));
        f.n_mode_depth[ModeClass::Pla.index()][0] = 1;
        let r = estimate_accurate(&f, &builtin_constants());
        assert!(close(r.total, 1.66655e-2, 1e-12), "{}", r.total);
        assert_eq!(r.terms.mode_depth, 2.505e-4);
    }

    #[test]
    fn offset_only() {
        let f = FeatureCounts::default();
        let k = builtin_constants();
        assert_eq!(estimate_accurate(&f, &k).total, 1.579e-2);
        assert_eq!(estimate_simplified(&f, &k).total, 1.579e-2);
    }

    #[test]
    fn simplified_substitution_example() {
        let mut f = FeatureCounts::empty(header(45));
        f.n_mode_depth[ModeClass::Ang.index()][1] = 4;
        f.n_cbf = 2;
        f.n_coeff = 10;
        let r = estimate_simplified(&f, &builtin_constants());
        assert!(close(r.total, 1.6669517e-2, 1e-7), "{}", r.total);
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn simplified_warns_on_low_qp_and_ignored_terms() {
        let mut f = FeatureCounts::empty(header(10));
        let r = estimate_simplified(&f, &builtin_constants());
        assert_eq!(r.warnings.len(), 1);
        assert!(r.warnings[0].contains("simplified model invalid for QP ≤ 30"));

        f.qp = 31;
        f.n_mode_depth[0][3] = 2;
        f.n_tsf = 1;
        f.n_nompm = 1;
        let r = estimate_simplified(&f, &builtin_constants());
        assert_eq!(r.warnings.len(), 2, "{:?}", r.warnings);
        let plain = estimate_simplified(&FeatureCounts { n_tsf: 0, n_nompm: 0, ..f.clone() }, &builtin_constants());
        assert_eq!(plain.total, r.total);
    }

    #[test]
    fn tsf_term_is_negative() {
        let mut f = FeatureCounts::empty(header(32));
        f.n_mode_depth[0][3] = 3;
        f.n_tsf = 3;
        let r = estimate_accurate(&f, &builtin_constants());
        assert_eq!(r.terms.tsf, -3.0 * 5.0916e-7);
        assert_eq!(r.total, r.terms.sum());
    }

    #[test]
    fn value_term_uses_log2_sum() {
        let mut f = FeatureCounts::empty(header(32));
        f.n_coeff = 2;
        f.log2_sum = Log2Sum::of_magnitude(8) + Log2Sum::of_magnitude(4);
        let r = estimate_accurate(&f, &builtin_constants());
        assert_eq!(r.terms.val, 5.0 * 1.729e-7);
    }

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(1.0, 1.0).unwrap(), 0.0);
        assert!(close(relative_error(0.5, 0.516).unwrap(), 0.032, 1e-12));
        assert_eq!(relative_error(1.0, 0.0).unwrap(), 1.0);
        assert!(matches!(relative_error(0.0, 1.0), Err(Error::Domain(_))));
        assert!(relative_error(-1.0, 1.0).is_err());
    }

    #[test]
    fn mode_spread_builtin() {
        let s = mode_spread(&builtin_constants()).unwrap();
        // Depth 1 is dominated by the DC class.
        let dc = (2.452e-4f64 - 2.550e-4).abs() / 2.550e-4;
        assert_eq!(s[0], dc);
        assert!((s[0] - 0.0384).abs() < 1e-4);
        assert!(s.iter().all(|&v| v < 0.04), "{s:?}");
    }

    #[test]
    fn mode_spread_degenerate_table() {
        let mut k = builtin_constants();
        for d in 0..DEPTHS {
            for c in 0..4 {
                k.e_mode_depth[c][d] = k.e_depth_avg[d];
            }
        }
        assert_eq!(mode_spread(&k).unwrap(), [0.0; 4]);
        k.e_depth_avg[2] = 0.0;
        assert!(matches!(mode_spread(&k), Err(Error::Domain(_))));
    }
}
