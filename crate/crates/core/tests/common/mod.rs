//! Independent oracles shared by the integration tests. Nothing here calls
//! the estimator, the aggregator or the integrator under test.

#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;

use hevc_energy::trace::{FeatureCounts, Log2Sum, TraceRecord};
use hevc_energy::EnergyConstants;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

pub fn corpus(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/corpus").join(name)
}

pub fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Accurate-model total re-summed term by term from the serialized forms of
/// the features and the profile keys, largest terms last.
pub fn resum_accurate(f: &FeatureCounts, k: &EnergyConstants) -> f64 {
    let consts: HashMap<String, f64> = k.entries().into_iter().collect();
    let v = serde_json::to_value(f).unwrap();
    let count = |key: &str| v[key].as_u64().unwrap() as f64;
    let mut terms = vec![
        consts["e0"],
        consts["e_slice"] * count("n_slice"),
        consts["e_cbf"] * count("n_cbf"),
        consts["e_coeff"] * count("n_coeff"),
        consts["e_val"] * v["sum_log2_abs"].as_f64().unwrap(),
        consts["e_nompm"] * count("n_nompm"),
        -consts["e_tsf"] * count("n_tsf"),
    ];
    for class in ["pla", "dc", "hvd", "ang"] {
        let row = v["n_mode_depth"][class].as_array().unwrap();
        for (d, n) in row.iter().enumerate() {
            terms.push(consts[&format!("e_mode_depth.{class}.{}", d + 1)] * n.as_u64().unwrap() as f64);
        }
    }
    terms.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    terms.iter().sum()
}

/// Random but valid feature counts with magnitudes typical of a few frames.
pub fn random_features(rng: &mut ChaCha8Rng) -> FeatureCounts {
    let mut f = FeatureCounts {
        n_slice: rng.random_range(1..=32),
        qp: rng.random_range(0..=51),
        ..Default::default()
    };
    for row in f.n_mode_depth.iter_mut() {
        for n in row.iter_mut() {
            *n = rng.random_range(0..=5_000);
        }
    }
    f.n_cbf = rng.random_range(0..=20_000);
    f.n_coeff = rng.random_range(0..=100_000);
    if f.n_coeff > 0 {
        f.log2_sum = Log2Sum::from_f64(f.n_coeff as f64 * rng.random_range(0.0..8.0)).unwrap();
    }
    f.n_nompm = rng.random_range(0..=f.n_units());
    f.n_tsf = rng.random_range(0..=f.n_depth(4));
    f
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random valid trace record.
pub fn random_record(rng: &mut ChaCha8Rng) -> TraceRecord {
    let depth = rng.random_range(1..=4);
    let cbf_y = rng.random_bool(0.6);
    let cbf_cb = rng.random_bool(0.3);
    let cbf_cr = rng.random_bool(0.3);
    let coeffs = if cbf_y || cbf_cb || cbf_cr {
        (0..rng.random_range(1..=12))
            .map(|_| {
                let mag = if rng.random_bool(0.7) { rng.random_range(1..=4) } else { rng.random_range(1..=2000) };
                if rng.random_bool(0.5) { mag } else { -mag }
            })
            .collect()
    } else {
        vec![]
    };
    TraceRecord {
        frame_index: rng.random_range(0..4),
        ctu_index: rng.random_range(0..40),
        depth,
        intra_mode: rng.random_range(0..=34),
        coded_as_mpm: rng.random_bool(0.6),
        transform_skip: depth == 4 && rng.random_bool(0.3),
        cbf_y,
        cbf_cb,
        cbf_cr,
        coeffs,
    }
}

/// Recounts a trace file straight from its JSON lines.
pub fn brute_force_counts(text: &str) -> Value {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    let mut mode_depth = [[0u64; 4]; 4];
    let (mut cbf, mut coeff, mut nompm, mut tsf) = (0u64, 0u64, 0u64, 0u64);
    let mut log2 = 0.0f64;
    for line in lines {
        let r: Value = serde_json::from_str(line).unwrap();
        let mode = r["mode"].as_u64().unwrap();
        let class = match mode {
            0 => 0,
            1 => 1,
            m if m >= 2 && (m - 2) % 8 == 0 => 2,
            _ => 3,
        };
        mode_depth[class][r["depth"].as_u64().unwrap() as usize - 1] += 1;
        for key in ["cbf_y", "cbf_cb", "cbf_cr"] {
            cbf += r[key].as_bool().unwrap() as u64;
        }
        for c in r["coeffs"].as_array().unwrap() {
            coeff += 1;
            log2 += (c.as_i64().unwrap().unsigned_abs() as f64).log2();
        }
        nompm += !r["mpm"].as_bool().unwrap() as u64;
        tsf += r["tsf"].as_bool().unwrap() as u64;
    }
    serde_json::json!({
        "n_slice": header["n_slice"],
        "qp": header["qp"],
        "n_mode_depth": mode_depth,
        "n_cbf": cbf,
        "n_coeff": coeff,
        "sum_log2_abs": log2,
        "n_nompm": nompm,
        "n_tsf": tsf,
    })
}

/// Piecewise-linear current resampled `factor` times more densely, with the
/// instantaneous power `(v0 − r_a·i)·i` integrated by the trapezoidal rule.
pub fn dense_energy(samples: &[(f64, f64)], v0: f64, r_a: f64, factor: usize) -> f64 {
    let power = |i: f64| (v0 - r_a * i) * i;
    let mut total = 0.0;
    for w in samples.windows(2) {
        let ((t0, i0), (t1, i1)) = (w[0], w[1]);
        let h = (t1 - t0) / factor as f64;
        let mut seg = 0.0;
        for s in 0..factor {
            let a = i0 + (i1 - i0) * s as f64 / factor as f64;
            let b = i0 + (i1 - i0) * (s + 1) as f64 / factor as f64;
            seg += h * (power(a) + power(b)) / 2.0;
        }
        total += seg;
    }
    total
}
