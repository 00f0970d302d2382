mod common;

use common::*;
use hevc_energy::trace::{
    aggregate, aggregate_chunked, aggregate_trace_file, read_trace, read_trace_file, write_trace, FeatureCounts,
    FieldPolicy, StreamHeader, Trace, TraceRecord,
};
use hevc_energy::Error;
use proptest::prelude::*;

fn record_strategy() -> impl Strategy<Value = TraceRecord> {
    (
        (0u32..8, 0u32..64, 1i32..=4, 0i32..=34, any::<bool>(), any::<bool>()),
        (any::<bool>(), any::<bool>(), any::<bool>()),
        prop::collection::vec((1i32..=5000).prop_union(-5000i32..=-1), 1..10),
    )
        .prop_map(|((frame, ctu, depth, mode, mpm, tsf), (y, cb, cr), coeffs)| {
            let has_residual = y || cb || cr;
            TraceRecord {
                frame_index: frame,
                ctu_index: ctu,
                depth,
                intra_mode: mode,
                coded_as_mpm: mpm,
                transform_skip: tsf && depth == 4,
                cbf_y: y,
                cbf_cb: cb,
                cbf_cr: cr,
                coeffs: if has_residual { coeffs } else { vec![] },
            }
        })
}

const HEADER: StreamHeader = StreamHeader { n_slice: 3, qp: 37 };

proptest! {
    #[test]
    fn aggregate_is_a_homomorphism(records in prop::collection::vec(record_strategy(), 0..60), split in any::<prop::sample::Index>()) {
        let at = if records.is_empty() { 0 } else { split.index(records.len() + 1) };
        let whole = aggregate(HEADER, &records).unwrap();
        let mut parts = aggregate(HEADER, &records[..at]).unwrap();
        parts.absorb(&aggregate(HEADER, &records[at..]).unwrap());
        prop_assert_eq!(&whole, &parts);
    }

    #[test]
    fn serialize_parse_round_trip(records in prop::collection::vec(record_strategy(), 0..40)) {
        let trace = Trace { header: HEADER, records };
        let mut buf = Vec::new();
        write_trace(&mut buf, &trace).unwrap();
        let (back, warnings) = read_trace(buf.as_slice(), "rt", FieldPolicy::Strict).unwrap();
        prop_assert!(warnings.is_empty());
        prop_assert_eq!(back.aggregate().unwrap(), trace.aggregate().unwrap());
        prop_assert_eq!(back, trace);
    }

    #[test]
    fn aggregate_is_order_independent(mut records in prop::collection::vec(record_strategy(), 0..40)) {
        let a = aggregate(HEADER, &records).unwrap();
        records.reverse();
        prop_assert_eq!(a, aggregate(HEADER, &records).unwrap());
    }
}

#[test]
fn chunked_aggregation_is_bitwise_identical() {
    let mut rng = rng(11);
    let records: Vec<TraceRecord> = (0..5000).map(|_| random_record(&mut rng)).collect();
    let serial = aggregate(HEADER, &records).unwrap();
    for threads in [1, 2, 3, 7, 16] {
        let chunked = aggregate_chunked(HEADER, &records, threads).unwrap();
        assert_eq!(chunked, serial, "threads = {threads}");
        assert_eq!(chunked.sum_log2_abs().to_bits(), serial.sum_log2_abs().to_bits());
    }
}

#[test]
fn chunked_aggregation_reports_global_record_index() {
    let mut rng = rng(12);
    let mut records: Vec<TraceRecord> = (0..100).map(|_| random_record(&mut rng)).collect();
    records[73].depth = 9;
    let err = aggregate_chunked(HEADER, &records, 4).unwrap_err();
    assert!(err.to_string().contains("record 73"), "{err}");
}

#[test]
fn dc_depth2_corpus_matches_brute_force_recount() {
    let path = corpus("dc_depth2_68.trace");
    let (f, _) = aggregate_trace_file(&path, FieldPolicy::Strict).unwrap();
    let expected = brute_force_counts(&std::fs::read_to_string(&path).unwrap());
    assert_eq!(expected["n_mode_depth"][1][1], 68);
    assert_eq!(f.count(hevc_energy::ModeClass::Dc, 2), 68);
    assert_eq!(f.n_units(), 68);
    let mut zeroed = f.clone();
    zeroed.n_mode_depth[1][1] = 0;
    assert_eq!(
        zeroed,
        FeatureCounts { n_slice: 1, qp: 40, ..Default::default() }
    );
}

#[test]
fn mixed_corpus_matches_brute_force_recount() {
    let path = corpus("mixed.trace");
    let (f, _) = aggregate_trace_file(&path, FieldPolicy::Strict).unwrap();
    let expected = brute_force_counts(&std::fs::read_to_string(&path).unwrap());
    let got = serde_json::to_value(&f).unwrap();
    for key in ["n_slice", "qp", "n_mode_depth", "n_cbf", "n_coeff", "n_nompm", "n_tsf"] {
        let want = if key == "n_mode_depth" {
            let m = &expected[key];
            serde_json::json!({"pla": m[0], "dc": m[1], "hvd": m[2], "ang": m[3]})
        } else {
            expected[key].clone()
        };
        assert_eq!(got[key], want, "{key}");
    }
    assert!((f.sum_log2_abs() - expected["sum_log2_abs"].as_f64().unwrap()).abs() < 1e-12);
    assert_eq!(f.n_tsf, 3);
    assert_eq!(f.n_nompm, 1);
}

#[test]
fn random_traces_match_brute_force_recount() {
    let mut rng = rng(13);
    for _ in 0..20 {
        let records: Vec<TraceRecord> = (0..300).map(|_| random_record(&mut rng)).collect();
        let trace = Trace { header: HEADER, records };
        let mut buf = Vec::new();
        write_trace(&mut buf, &trace).unwrap();
        let expected = brute_force_counts(std::str::from_utf8(&buf).unwrap());
        let f = trace.aggregate().unwrap();
        assert_eq!(f.n_cbf, expected["n_cbf"].as_u64().unwrap());
        assert_eq!(f.n_coeff, expected["n_coeff"].as_u64().unwrap());
        assert_eq!(f.n_nompm, expected["n_nompm"].as_u64().unwrap());
        assert_eq!(f.n_tsf, expected["n_tsf"].as_u64().unwrap());
        for c in 0..4 {
            for d in 0..4 {
                assert_eq!(f.n_mode_depth[c][d], expected["n_mode_depth"][c][d].as_u64().unwrap());
            }
        }
        assert!(rel_diff(f.sum_log2_abs(), expected["sum_log2_abs"].as_f64().unwrap()) < 1e-12);
    }
}

fn expect_validation(name: &str, needle: &str, line: usize) {
    let err = aggregate_trace_file(&corpus(name), FieldPolicy::Strict).unwrap_err();
    let msg = err.to_string();
    assert_eq!(err.exit_code(), 1, "{msg}");
    assert!(msg.contains(needle), "{name}: {msg}");
    assert!(msg.contains(&format!("{name}:{line}:")), "{name}: {msg}");
}

#[test]
fn corpus_validation_rules() {
    expect_validation("tsf_outside_depth4.trace", "TSF outside depth 4", 3);
    expect_validation("zero_coefficient.trace", "zero coefficient listed", 2);
    expect_validation("cbf_without_flags.trace", "no CBF set", 3);
}

#[test]
fn malformed_trace_reports_line() {
    let err = read_trace_file(&corpus("malformed.trace"), FieldPolicy::Strict).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
}

#[test]
fn unknown_fields_strict_and_lenient() {
    let err = aggregate_trace_file(&corpus("unknown_field.trace"), FieldPolicy::Strict).unwrap_err();
    assert!(err.to_string().contains("bits"));
    let (f, warnings) = aggregate_trace_file(&corpus("unknown_field.trace"), FieldPolicy::Lenient).unwrap();
    assert_eq!(f.n_units(), 1);
    assert_eq!(warnings.len(), 1);
}
