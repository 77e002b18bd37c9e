use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn elspin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elspin"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = elspin(args);
    assert!(
        out.status.success(),
        "elspin {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_json(dir: &TempDir, name: &str, v: &Value) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Parses CSV text into a header and rows.
fn table(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn column(text: &str, name: &str) -> Vec<String> {
    let (h, rows) = table(text);
    let i = h.iter().position(|c| c == name).expect("column present");
    rows.into_iter().map(|r| r[i].clone()).collect()
}

fn dark_config(rate: f64, total_s: f64) -> Value {
    json!({
        "seed": 7,
        "resolution_ps": 1,
        "zeeman": {"b_field_t": 0.0, "g_hole": 1.18},
        "emitter": {
            "tau_el_ns": 570, "tau_opt_ns": 431, "capture_rate_per_s": 0,
            "excitation_line": {"kind": "lorentzian", "fwhm_ghz": 2.08}
        },
        "detectors": {
            "collection_efficiency": 1,
            "channels": [
                {"probability": 0.5, "dark_rate_cps": rate},
                {"probability": 0.5, "dark_rate_cps": rate}
            ]
        },
        "timeline": {
            "period_ns": 4000, "total_time_s": total_s,
            "pulses": [{"kind": "electrical", "start_ns": 0, "duration_ns": 150}]
        }
    })
}

#[test]
fn simulate_is_byte_identical_for_fixed_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(&dir, "c.json", &dark_config(2000.0, 2.0));
    let a = dir.path().join("a.ttg");
    let b = dir.path().join("b.ttg");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["simulate", "--config", s(&cfg), "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let c = dir.path().join("c.ttg");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&c), "--seed", "8"]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn dark_only_summary_matches_configured_rate() {
    let dir = TempDir::new().unwrap();
    let rate = 1000.0;
    let t = 10.0;
    let cfg = write_json(&dir, "c.json", &dark_config(rate, t));
    let out = dir.path().join("d.ttg");
    let summary = ok(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    let rates = column(&summary, "rate_cps");
    let sigma = (rate / t).sqrt();
    for r in &rates[..2] {
        let r: f64 = r.parse().unwrap();
        assert!((r - rate).abs() < 5.0 * sigma, "rate {r}");
    }
}

#[test]
fn purcell_reference_parameters() {
    let out = ok(&[
        "purcell",
        "--q-factor",
        "2960",
        "--mode-volume",
        "0.6",
        "--kappa-ghz",
        "77",
        "--detuning-ghz",
        "15.65",
        "--debye-waller",
        "0.23",
        "--quantum-efficiency",
        "0.234",
    ]);
    let v: f64 = column(&out, "purcell_enhancement")[0].parse().unwrap();
    assert_eq!(format!("{v:.1}"), "18.3");
}

#[test]
fn purcell_requires_all_parameters() {
    let out = elspin(&["purcell", "--q-factor", "2960"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn g2_poisson_fixture_is_flat() {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(&dir, "c.json", &dark_config(10_000.0, 20.0));
    let tags = dir.path().join("p.ttg");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&tags)]);
    let csv = ok(&[
        "g2", "--tags", s(&tags), "--period-ns", "4000", "--bin-ns", "40", "--peaks", "20",
    ]);
    let g = column(&csv, "g2_raw");
    assert_eq!(g.len(), 41);
    for v in g {
        let v: f64 = v.parse().unwrap();
        assert!((0.94..=1.06).contains(&v), "g2 {v}");
    }
    let again = ok(&[
        "g2", "--tags", s(&tags), "--period-ns", "4000", "--bin-ns", "40", "--peaks", "20",
    ]);
    assert_eq!(csv, again);
}

#[test]
fn g2_missing_channel_is_an_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(&dir, "c.json", &dark_config(100.0, 0.1));
    let tags = dir.path().join("p.ttg");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&tags)]);
    let out = elspin(&[
        "g2", "--tags", s(&tags), "--channel-b", "5", "--period-ns", "4000", "--bin-ns", "40",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("channel 5"));
}

fn spam_config() -> Value {
    json!({
        "seed": 11,
        "resolution_ps": 1,
        "zeeman": {"b_field_t": 0.35, "g_hole": 1.18},
        "emitter": {
            "tau_el_ns": 570, "tau_opt_ns": 431, "capture_rate_per_s": 1e8,
            "optical_peak_excitation": 1.0,
            "excitation_line": {"kind": "gaussian", "sigma_ghz": 0.05}
        },
        "detectors": {
            "collection_efficiency": 0.5,
            "channels": [
                {"probability": 0.307, "dark_rate_cps": 0,
                 "filter": [{"kind": "bandpass", "center_ghz": 2.02, "fwhm_ghz": 1.0}]},
                {"probability": 0.693, "dark_rate_cps": 0}
            ]
        },
        "timeline": {
            "period_ns": 6250, "total_time_s": 2.0,
            "pulses": [
                {"kind": "electrical", "start_ns": 0, "duration_ns": 150},
                {"kind": "optical", "start_ns": 3000, "duration_ns": 100, "laser_ghz": 2.02}
            ]
        }
    })
}

#[test]
fn spam_zero_background_heralds_perfectly() {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(&dir, "spam.json", &spam_config());
    let same = dir.path().join("same.ttg");
    let cross = dir.path().join("cross.ttg");
    // B sits at +(dE - dH)/2 = +2.02 GHz, C at -2.02 GHz.
    ok(&["simulate", "--config", s(&cfg), "--out", s(&same), "--laser-ghz", "2.02"]);
    ok(&["simulate", "--config", s(&cfg), "--out", s(&cross), "--laser-ghz", "-2.02", "--seed", "12"]);
    let out = elspin(&[
        "spam", "--config", s(&cfg), "--same", s(&same), "--cross", s(&cross), "--peaks", "3",
    ]);
    assert!(out.status.code() == Some(0) || out.status.code() == Some(2));
    let csv = String::from_utf8(out.stdout).unwrap();
    let f = column(&csv, "f_raw");
    let f0: f64 = f[0].parse().unwrap();
    assert!(f0 >= 0.99, "F(0) = {f0}\n{csv}");
    let f1: f64 = f[1].parse().unwrap();
    assert!((f1 - 0.5).abs() < 0.15, "F(1) = {f1}");
}

#[test]
fn unknown_config_key_is_rejected_with_path() {
    let dir = TempDir::new().unwrap();
    let mut cfg = dark_config(100.0, 0.1);
    cfg["detectors"]["channels"][0]["dark_rate"] = json!(5);
    let p = write_json(&dir, "bad.json", &cfg);
    let out = elspin(&["simulate", "--config", s(&p), "--out", s(&dir.path().join("x.ttg"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("detectors.channels[0]"), "{err}");
}

#[test]
fn missing_unit_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let mut cfg = dark_config(100.0, 0.1);
    cfg["emitter"].as_object_mut().unwrap().remove("tau_el_ns");
    let p = write_json(&dir, "bad.json", &cfg);
    let out = elspin(&["simulate", "--config", s(&p), "--out", s(&dir.path().join("x.ttg"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tau_el_ns"));
}

#[test]
fn ple_manifest_monotonicity_is_enforced() {
    let dir = TempDir::new().unwrap();
    let mut cfg = dark_config(500.0, 0.2);
    cfg["timeline"]["pulses"] = json!([
        {"kind": "optical", "start_ns": 0, "duration_ns": 100, "laser_ghz": 0.0}
    ]);
    let cfg = write_json(&dir, "c.json", &cfg);
    for name in ["a.ttg", "b.ttg"] {
        ok(&["simulate", "--config", s(&cfg), "--out", s(&dir.path().join(name))]);
    }
    let seg = |f: f64, t: &str| json!({"laser_ghz": f, "tags": t, "duration_s": 0.2});
    let good = write_json(&dir, "m.json", &json!({"segments": [seg(-1.0, "a.ttg"), seg(1.0, "b.ttg")]}));
    let csv = ok(&["ple", "--manifest", s(&good), "--config", s(&cfg)]);
    assert_eq!(column(&csv, "laser_ghz"), vec!["-1", "1"]);

    let bad = write_json(
        &dir,
        "n.json",
        &json!({"segments": [seg(1.0, "a.ttg"), seg(1.0, "b.ttg")]}),
    );
    let out = elspin(&["ple", "--manifest", s(&bad), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));

    let flagged = write_json(
        &dir,
        "u.json",
        &json!({"unordered": true, "segments": [seg(1.0, "a.ttg"), seg(1.0, "b.ttg")]}),
    );
    ok(&["ple", "--manifest", s(&flagged), "--config", s(&cfg)]);

    let missing = write_json(&dir, "x.json", &json!({"segments": [seg(0.0, "nope.ttg")]}));
    assert_eq!(elspin(&["ple", "--manifest", s(&missing), "--config", s(&cfg)]).status.code(), Some(1));
}
