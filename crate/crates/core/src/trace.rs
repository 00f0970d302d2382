//! Per-transform-unit feature traces and their aggregation into model counts.
//!
//! A trace file is line-delimited JSON. The first non-blank line is a header
//! object `{"n_slice": .., "qp": ..}`; every following line describes one
//! transform unit:
//!
//! ```text
//! {"n_slice":1,"qp":32}
//! {"frame":0,"ctu":0,"depth":1,"mode":0,"mpm":true,"tsf":false,"cbf_y":true,"cbf_cb":false,"cbf_cr":false,"coeffs":[1,-4,8]}
//! ```
//!
//! Intra prediction and transform always happen at the same quadtree depth,
//! so one record per TU is also one record per PU.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::ops::{Add, AddAssign};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Number of depth rows in the per-unit energy table.
pub const DEPTHS: usize = 4;
/// Largest valid intra prediction mode index.
pub const MAX_INTRA_MODE: i32 = 34;
/// Largest valid quantization parameter.
pub const MAX_QP: u8 = 51;

/// Energy class of an intra prediction mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeClass {
    /// Planar, mode 0.
    Pla,
    /// DC, mode 1.
    Dc,
    /// Pure horizontal, vertical and diagonal angular modes: 2, 10, 18, 26, 34.
    Hvd,
    /// All remaining angular modes.
    Ang,
}

impl ModeClass {
    pub const ALL: [ModeClass; 4] = [ModeClass::Pla, ModeClass::Dc, ModeClass::Hvd, ModeClass::Ang];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ModeClass::Pla => "pla",
            ModeClass::Dc => "dc",
            ModeClass::Hvd => "hvd",
            ModeClass::Ang => "ang",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ModeClass::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl fmt::Display for ModeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Maps an intra mode index (0..=34) onto its energy class.
pub fn classify_mode(intra_mode: i32) -> Result<ModeClass> {
    match intra_mode {
        0 => Ok(ModeClass::Pla),
        1 => Ok(ModeClass::Dc),
        2 | 10 | 18 | 26 | 34 => Ok(ModeClass::Hvd),
        3..=MAX_INTRA_MODE => Ok(ModeClass::Ang),
        _ => Err(Error::Validation(format!(
            "intra mode {intra_mode} outside 0..={MAX_INTRA_MODE}"
        ))),
    }
}

/// One transform unit as emitted by an instrumented decoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    #[serde(rename = "frame")]
    pub frame_index: u32,
    #[serde(rename = "ctu")]
    pub ctu_index: u32,
    /// Row index 1..=4 of the per-unit energy table.
    pub depth: i32,
    #[serde(rename = "mode")]
    pub intra_mode: i32,
    #[serde(rename = "mpm")]
    pub coded_as_mpm: bool,
    #[serde(rename = "tsf")]
    pub transform_skip: bool,
    pub cbf_y: bool,
    pub cbf_cb: bool,
    pub cbf_cr: bool,
    /// Nonzero coefficient levels of all three color components.
    pub coeffs: Vec<i32>,
}

impl TraceRecord {
    /// Coded block flags in Y, Cb, Cr order.
    pub fn cbf(&self) -> [bool; 3] {
        [self.cbf_y, self.cbf_cb, self.cbf_cr]
    }
}

const RECORD_FIELDS: [&str; 10] = [
    "frame", "ctu", "depth", "mode", "mpm", "tsf", "cbf_y", "cbf_cb", "cbf_cr", "coeffs",
];
const HEADER_FIELDS: [&str; 2] = ["n_slice", "qp"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamHeader {
    pub n_slice: u32,
    pub qp: u8,
}

impl StreamHeader {
    pub fn validate(&self) -> Result<()> {
        if self.n_slice == 0 {
            return Err(Error::Validation("header: n_slice must be at least 1".into()));
        }
        if self.qp > MAX_QP {
            return Err(Error::Validation(format!(
                "header: qp {} outside 0..={MAX_QP}",
                self.qp
            )));
        }
        Ok(())
    }
}

/// A broken [`TraceRecord`] invariant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    DepthOutOfRange(i32),
    ModeOutOfRange(i32),
    TransformSkipOutsideDepth4 { depth: i32 },
    ZeroCoefficient { position: usize },
    CoefficientsWithoutCbf { count: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DepthOutOfRange(d) => write!(f, "depth {d} outside 1..=4"),
            Violation::ModeOutOfRange(m) => {
                write!(f, "intra mode {m} outside 0..={MAX_INTRA_MODE}")
            }
            Violation::TransformSkipOutsideDepth4 { depth } => {
                write!(f, "TSF outside depth 4 (depth {depth})")
            }
            Violation::ZeroCoefficient { position } => {
                write!(f, "zero coefficient listed at position {position}")
            }
            Violation::CoefficientsWithoutCbf { count } => {
                write!(f, "{count} coefficients listed but no CBF set")
            }
        }
    }
}

/// Checks every record invariant and returns all violations found.
pub fn validate_record(record: &TraceRecord) -> std::result::Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    if !(1..=DEPTHS as i32).contains(&record.depth) {
        violations.push(Violation::DepthOutOfRange(record.depth));
    }
    if !(0..=MAX_INTRA_MODE).contains(&record.intra_mode) {
        violations.push(Violation::ModeOutOfRange(record.intra_mode));
    }
    if record.transform_skip && record.depth != DEPTHS as i32 {
        violations.push(Violation::TransformSkipOutsideDepth4 {
            depth: record.depth,
        });
    }
    if let Some(position) = record.coeffs.iter().position(|&c| c == 0) {
        violations.push(Violation::ZeroCoefficient { position });
    }
    if record.cbf() == [false; 3] && !record.coeffs.is_empty() {
        violations.push(Violation::CoefficientsWithoutCbf {
            count: record.coeffs.len(),
        });
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Exact accumulator for `Σ log2|c|`.
///
/// Stored as an integer multiple of 2^-52. `log2(m)` for an integer `m >= 2`
/// lies in `[1, 32)`, so its f64 value is itself a multiple of 2^-52 and the
/// conversion is lossless. Sums are therefore associative, which keeps
/// aggregation bitwise reproducible under any chunking.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Log2Sum(u128);

impl Log2Sum {
    const SCALE: f64 = 4_503_599_627_370_496.0; // 2^52

    pub const ZERO: Log2Sum = Log2Sum(0);

    pub fn of_magnitude(magnitude: u32) -> Self {
        if magnitude <= 1 {
            Log2Sum(0)
        } else {
            Log2Sum((f64::from(magnitude).log2() * Self::SCALE) as u128)
        }
    }

    /// Nearest representable sum to a nonnegative real.
    pub fn from_f64(value: f64) -> Result<Self> {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::Validation(format!(
                "sum_log2_abs must be a finite nonnegative number, got {value}"
            )));
        }
        Ok(Log2Sum((value * Self::SCALE).round() as u128))
    }

    pub fn from_raw(raw: u128) -> Self {
        Log2Sum(raw)
    }

    pub fn raw(self) -> u128 {
        self.0
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / Self::SCALE
    }
}

impl Add for Log2Sum {
    type Output = Log2Sum;
    fn add(self, rhs: Log2Sum) -> Log2Sum {
        Log2Sum(self.0 + rhs.0)
    }
}

impl AddAssign for Log2Sum {
    fn add_assign(&mut self, rhs: Log2Sum) {
        self.0 += rhs.0;
    }
}

/// Feature quantities consumed by the energy model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FeatureCountsRepr", into = "FeatureCountsRepr")]
pub struct FeatureCounts {
    pub n_slice: u64,
    /// TU counts indexed `[mode class][depth - 1]`.
    pub n_mode_depth: [[u64; DEPTHS]; 4],
    /// Set coded block flags, each of Y/Cb/Cr counted separately.
    pub n_cbf: u64,
    pub n_coeff: u64,
    pub log2_sum: Log2Sum,
    pub n_nompm: u64,
    pub n_tsf: u64,
    pub qp: u8,
}

impl FeatureCounts {
    /// Counts with the header fields set and every record-derived field zero.
    pub fn empty(header: StreamHeader) -> Self {
        FeatureCounts {
            n_slice: u64::from(header.n_slice),
            qp: header.qp,
            ..Default::default()
        }
    }

    /// `Σ log2|c|` over all nonzero coefficients.
    pub fn sum_log2_abs(&self) -> f64 {
        self.log2_sum.to_f64()
    }

    pub fn count(&self, class: ModeClass, depth: usize) -> u64 {
        self.n_mode_depth[class.index()][depth - 1]
    }

    /// TU count at `depth` (1-based) summed over mode classes.
    pub fn n_depth(&self, depth: usize) -> u64 {
        self.n_mode_depth.iter().map(|row| row[depth - 1]).sum()
    }

    pub fn n_units(&self) -> u64 {
        self.n_mode_depth.iter().flatten().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tsf > self.n_depth(DEPTHS) {
            return Err(Error::Validation(format!(
                "n_tsf = {} exceeds the {} units at depth 4",
                self.n_tsf,
                self.n_depth(DEPTHS)
            )));
        }
        if self.n_coeff == 0 && self.log2_sum != Log2Sum::ZERO {
            return Err(Error::Validation(
                "sum_log2_abs is nonzero but n_coeff is zero".into(),
            ));
        }
        if self.qp > MAX_QP {
            return Err(Error::Validation(format!("qp {} outside 0..={MAX_QP}", self.qp)));
        }
        Ok(())
    }

    /// Adds the record-derived counts of `other`, keeping this value's
    /// `n_slice` and `qp`. Two aggregates of the same stream combine this way.
    pub fn absorb(&mut self, other: &FeatureCounts) {
        for (row, other_row) in self.n_mode_depth.iter_mut().zip(&other.n_mode_depth) {
            for (n, m) in row.iter_mut().zip(other_row) {
                *n += m;
            }
        }
        self.n_cbf += other.n_cbf;
        self.n_coeff += other.n_coeff;
        self.log2_sum += other.log2_sum;
        self.n_nompm += other.n_nompm;
        self.n_tsf += other.n_tsf;
    }
}

/// Field-wise sum of two feature sets, slices included; `qp` is taken from
/// the left operand.
impl Add for &FeatureCounts {
    type Output = FeatureCounts;
    fn add(self, rhs: &FeatureCounts) -> FeatureCounts {
        let mut out = self.clone();
        out.absorb(rhs);
        out.n_slice += rhs.n_slice;
        out
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModeDepthRepr {
    pla: [u64; DEPTHS],
    dc: [u64; DEPTHS],
    hvd: [u64; DEPTHS],
    ang: [u64; DEPTHS],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureCountsRepr {
    n_slice: u64,
    qp: u8,
    n_mode_depth: ModeDepthRepr,
    n_cbf: u64,
    n_coeff: u64,
    sum_log2_abs: f64,
    /// Exact sum in units of 2^-52 as a decimal string, since it can exceed
    /// the integer range of common JSON readers. Authoritative when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sum_log2_abs_q52: Option<String>,
    n_nompm: u64,
    n_tsf: u64,
}

impl From<FeatureCounts> for FeatureCountsRepr {
    fn from(f: FeatureCounts) -> Self {
        let [pla, dc, hvd, ang] = f.n_mode_depth;
        FeatureCountsRepr {
            n_slice: f.n_slice,
            qp: f.qp,
            n_mode_depth: ModeDepthRepr { pla, dc, hvd, ang },
            n_cbf: f.n_cbf,
            n_coeff: f.n_coeff,
            sum_log2_abs: f.sum_log2_abs(),
            sum_log2_abs_q52: Some(f.log2_sum.raw().to_string()),
            n_nompm: f.n_nompm,
            n_tsf: f.n_tsf,
        }
    }
}

impl TryFrom<FeatureCountsRepr> for FeatureCounts {
    type Error = Error;

    fn try_from(r: FeatureCountsRepr) -> Result<Self> {
        let log2_sum = match r.sum_log2_abs_q52 {
            Some(text) => {
                let raw: u128 = text
                    .parse()
                    .map_err(|_| Error::Validation(format!("sum_log2_abs_q52 {text:?} is not an unsigned integer")))?;
                let exact = Log2Sum::from_raw(raw);
                if (exact.to_f64() - r.sum_log2_abs).abs() > 1e-9 * r.sum_log2_abs.max(1.0) {
                    return Err(Error::Validation(format!(
                        "sum_log2_abs {} disagrees with sum_log2_abs_q52 {}",
                        r.sum_log2_abs, raw
                    )));
                }
                exact
            }
            None => Log2Sum::from_f64(r.sum_log2_abs)?,
        };
        let m = r.n_mode_depth;
        let counts = FeatureCounts {
            n_slice: r.n_slice,
            n_mode_depth: [m.pla, m.dc, m.hvd, m.ang],
            n_cbf: r.n_cbf,
            n_coeff: r.n_coeff,
            log2_sum,
            n_nompm: r.n_nompm,
            n_tsf: r.n_tsf,
            qp: r.qp,
        };
        counts.validate()?;
        Ok(counts)
    }
}

/// Streaming accumulator behind [`aggregate`].
#[derive(Clone, Debug)]
pub struct Aggregator {
    counts: FeatureCounts,
    records: usize,
}

impl Aggregator {
    pub fn new(header: StreamHeader) -> Self {
        Aggregator {
            counts: FeatureCounts::empty(header),
            records: 0,
        }
    }

    /// Validates and counts one record. On failure the error names the
    /// record's position in the stream.
    pub fn push(&mut self, record: &TraceRecord) -> Result<()> {
        let index = self.records;
        self.records += 1;
        if let Err(violations) = validate_record(record) {
            return Err(Error::Validation(format!(
                "record {index} (frame {}, ctu {}): {}",
                record.frame_index, record.ctu_index, violations[0]
            )));
        }
        let class = classify_mode(record.intra_mode)?;
        let c = &mut self.counts;
        c.n_mode_depth[class.index()][record.depth as usize - 1] += 1;
        c.n_cbf += record.cbf().iter().filter(|&&f| f).count() as u64;
        c.n_coeff += record.coeffs.len() as u64;
        for &level in &record.coeffs {
            c.log2_sum += Log2Sum::of_magnitude(level.unsigned_abs());
        }
        c.n_nompm += u64::from(!record.coded_as_mpm);
        c.n_tsf += u64::from(record.transform_skip);
        Ok(())
    }

    pub fn records_seen(&self) -> usize {
        self.records
    }

    pub fn finish(self) -> FeatureCounts {
        self.counts
    }
}

/// Aggregates validated records into model counts.
pub fn aggregate(header: StreamHeader, records: &[TraceRecord]) -> Result<FeatureCounts> {
    header.validate()?;
    let mut agg = Aggregator::new(header);
    for record in records {
        agg.push(record)?;
    }
    Ok(agg.finish())
}

/// Same result as [`aggregate`], computed over `threads` chunks in parallel.
pub fn aggregate_chunked(
    header: StreamHeader,
    records: &[TraceRecord],
    threads: usize,
) -> Result<FeatureCounts> {
    header.validate()?;
    let chunk = records.len().div_ceil(threads.max(1)).max(1);
    let partials: Vec<Result<FeatureCounts>> = std::thread::scope(|scope| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .enumerate()
            .map(|(i, part)| {
                scope.spawn(move || {
                    let mut agg = Aggregator::new(header);
                    agg.records = i * chunk;
                    for record in part {
                        agg.push(record)?;
                    }
                    Ok(agg.finish())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("aggregation worker panicked")).collect()
    });
    let mut total = FeatureCounts::empty(header);
    for part in partials {
        total.absorb(&part?);
    }
    Ok(total)
}

/// A parsed trace: header plus all records, in file order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trace {
    pub header: StreamHeader,
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn aggregate(&self) -> Result<FeatureCounts> {
        aggregate(self.header, &self.records)
    }
}

/// Unknown-field handling for trace ingestion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FieldPolicy {
    /// Unknown fields are a parse error.
    #[default]
    Strict,
    /// Unknown fields are dropped and reported as warnings.
    Lenient,
}

/// Line-by-line trace parser. Yields records after reading the header.
pub struct TraceReader<R> {
    lines: std::io::Lines<R>,
    source_name: String,
    line_no: usize,
    policy: FieldPolicy,
    header: StreamHeader,
    warnings: Vec<String>,
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(reader: R, source_name: &str, policy: FieldPolicy) -> Result<Self> {
        let mut this = TraceReader {
            lines: reader.lines(),
            source_name: source_name.to_string(),
            line_no: 0,
            policy,
            header: StreamHeader { n_slice: 1, qp: 0 },
            warnings: Vec::new(),
        };
        let Some(object) = this.next_object()? else {
            return Err(Error::parse(source_name, 0, "missing header object"));
        };
        let object = this.filter_fields(object, &HEADER_FIELDS)?;
        let header: StreamHeader = this.decode(object)?;
        header
            .validate()
            .map_err(|e| Error::parse(source_name, this.line_no, e.to_string()))?;
        this.header = header;
        Ok(this)
    }

    pub fn header(&self) -> StreamHeader {
        self.header
    }

    pub fn line(&self) -> usize {
        self.line_no
    }

    /// Warnings collected so far (lenient mode only).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn into_warnings(self) -> Vec<String> {
        self.warnings
    }

    fn next_object(&mut self) -> Result<Option<Map<String, Value>>> {
        for line in self.lines.by_ref() {
            self.line_no += 1;
            let line = line.map_err(|e| Error::io(&self.source_name, e))?;
            let text = line.trim();
            if text.is_empty() {
                continue;
            }
            return match serde_json::from_str::<Value>(text) {
                Ok(Value::Object(map)) => Ok(Some(map)),
                Ok(_) => Err(Error::parse(&self.source_name, self.line_no, "expected a JSON object")),
                Err(e) => Err(Error::parse(&self.source_name, self.line_no, e.to_string())),
            };
        }
        Ok(None)
    }

    fn filter_fields(
        &mut self,
        mut object: Map<String, Value>,
        known: &[&str],
    ) -> Result<Map<String, Value>> {
        let unknown: Vec<String> = object
            .keys()
            .filter(|k| !known.contains(&k.as_str()))
            .cloned()
            .collect();
        if unknown.is_empty() {
            return Ok(object);
        }
        match self.policy {
            FieldPolicy::Strict => Err(Error::parse(
                &self.source_name,
                self.line_no,
                format!("unknown field(s): {}", unknown.join(", ")),
            )),
            FieldPolicy::Lenient => {
                for key in unknown {
                    object.remove(&key);
                    self.warnings.push(format!(
                        "{}:{}: ignoring unknown field `{key}`",
                        self.source_name, self.line_no
                    ));
                }
                Ok(object)
            }
        }
    }

    fn decode<T: serde::de::DeserializeOwned>(&self, object: Map<String, Value>) -> Result<T> {
        serde_json::from_value(Value::Object(object))
            .map_err(|e| Error::parse(&self.source_name, self.line_no, e.to_string()))
    }

    fn next_record(&mut self) -> Result<Option<TraceRecord>> {
        let Some(object) = self.next_object()? else {
            return Ok(None);
        };
        let object = self.filter_fields(object, &RECORD_FIELDS)?;
        self.decode(object).map(Some)
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<TraceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_record().transpose()
    }
}

/// Reads a whole trace. Returns the trace plus any lenient-mode warnings.
pub fn read_trace<R: BufRead>(
    reader: R,
    source_name: &str,
    policy: FieldPolicy,
) -> Result<(Trace, Vec<String>)> {
    let mut reader = TraceReader::new(reader, source_name, policy)?;
    let header = reader.header();
    let records = reader.by_ref().collect::<Result<Vec<_>>>()?;
    Ok((Trace { header, records }, reader.into_warnings()))
}

pub fn read_trace_file(path: &Path, policy: FieldPolicy) -> Result<(Trace, Vec<String>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_trace(BufReader::new(file), &path.display().to_string(), policy)
}

/// Aggregates a trace in one streaming pass without materializing records.
/// Validation failures report the file line.
pub fn aggregate_trace_file(path: &Path, policy: FieldPolicy) -> Result<(FeatureCounts, Vec<String>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut reader = TraceReader::new(BufReader::new(file), &name, policy)?;
    let mut agg = Aggregator::new(reader.header());
    while let Some(record) = reader.next() {
        let record = record?;
        agg.push(&record)
            .map_err(|e| Error::parse(&name, reader.line(), e.to_string()))?;
    }
    Ok((agg.finish(), reader.into_warnings()))
}

pub fn write_trace<W: Write>(mut out: W, trace: &Trace) -> std::io::Result<()> {
    serde_json::to_writer(&mut out, &trace.header)?;
    out.write_all(b"\n")?;
    for record in &trace.records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
