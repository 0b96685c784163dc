use std::path::Path;
use std::process::{Command, Output};

use pbtrack::output::{read_trace_csv, trace_columns, TRACE_FILE};
use pbtrack::{preset, run_scenario_source, ScenarioSpec, PRESETS};

fn pbtrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pbtrack"))
        .args(args)
        .env_remove(pbtrack::OUT_ENV)
        .output()
        .expect("spawn pbtrack")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

/// Short boost run used where the full preset is not needed.
fn short_boost() -> String {
    preset("boost_table1")
        .unwrap()
        .replace("t_end = 1.5", "t_end = 0.05")
        .replace("[metrics]\n", "[metrics]\nsteady_periods = 1\n")
        .replace("steady_periods = 5\n", "")
}

#[test]
fn presets_parse() {
    for (name, src) in PRESETS {
        let spec = ScenarioSpec::parse(src).unwrap_or_else(|e| panic!("{name}: {e}"));
        spec.resolve().unwrap();
    }
}

#[test]
fn missing_dt_is_a_config_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let src = preset("boost_table1").unwrap().replace("dt = 1e-6\n", "");
    let path = write(dir.path(), "s.toml", &src);
    let out = pbtrack(&["run", &path, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sim.dt"));
}

#[test]
fn unknown_keys_are_rejected() {
    for (from, to, key) in [
        ("Vm = 9.0", "Vm = 9.0\nVpeak = 9.0", "params.Vpeak"),
        ("kp_comp", "kpcomp = 1.0\nkp_comp", "controller.kpcomp"),
        ("record_every", "recordevery = 1\nrecord_every", "sim.recordevery"),
    ] {
        let err = ScenarioSpec::parse(&preset("boost_table1").unwrap().replacen(from, to, 1)).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains(key), "{err}");
    }
}

#[test]
fn semantic_errors_are_config_errors() {
    let base = preset("boost_loadstep").unwrap();
    let cases = [
        base.replace("plant = \"boost_pfc\"", "plant = \"buck\""),
        base.replace("schema_version = 1", "schema_version = 9"),
        base.replace("scale = 0.7", "scale = 0.7\nset = 10.0"),
        base.replace("param = \"R\"", "param = \"Q\""),
        base.replace("mode = \"linear\"", "mode = \"tanh\""),
        base.replace("R = 22.0", "R = -22.0"),
        base.replace("t = 1.5", "t = 9.0"),
    ];
    for src in cases {
        let err = ScenarioSpec::parse(&src).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{err}");
    }
}

#[test]
fn divergence_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let src = preset("mmc_fig7")
        .unwrap()
        .replace("Kp = [[1e-3, 0.0], [0.0, 1e-3]]", "Kp = [[1e3, 0.0], [0.0, 1e3]]");
    let path = write(dir.path(), "s.toml", &src);
    let out = pbtrack(&["run", &path, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("t ="));
}

#[test]
fn trace_csv_round_trips_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_scenario_source(&short_boost(), "test", dir.path()).unwrap();
    let (header, rows) = read_trace_csv(&dir.path().join(TRACE_FILE)).unwrap();
    assert_eq!(header, trace_columns(&out.trace));
    assert_eq!(rows.len(), out.trace.len());
    let tr = &out.trace;
    for (k, row) in rows.iter().enumerate() {
        let mut expect = vec![tr.t[k]];
        for s in [&tr.x, &tr.x_star, &tr.u, &tr.u_star, &tr.y, &tr.z, &tr.aux] {
            expect.extend_from_slice(s.row(k));
        }
        expect.extend([tr.v[k], tr.w[k], tr.supply[k], if tr.saturated[k] { 1.0 } else { 0.0 }]);
        assert_eq!(row.len(), expect.len());
        for (a, b) in row.iter().zip(&expect) {
            assert_eq!(a.to_bits(), b.to_bits(), "row {k}");
        }
    }
}

#[test]
fn run_writes_summary_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "short.toml", &short_boost());
    let out_dir = dir.path().join("o");
    let out = pbtrack(&["run", &path, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["plant"], "boost_pfc");
    assert!(summary["metrics"]["power_factor"].as_f64().unwrap() > 0.0);
    assert!(summary["metrics"]["thd"].as_f64().is_some());
    assert!(summary["saturation"]["fraction"].as_f64().is_some());
    assert!(summary["monitors"]["dissipation"]["max_excess"].as_f64().is_some());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["resolved"]["sim"]["t_end"], 0.05);
    assert_eq!(manifest["scenario_file"]["controller"]["kp_comp"], 1.0);
    assert!(manifest["seed"].is_null());
}

#[test]
fn out_dir_defaults_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "short.toml", &short_boost());
    let out = Command::new(env!("CARGO_BIN_EXE_pbtrack"))
        .args(["run", &path])
        .env(pbtrack::OUT_ENV, dir.path().join("env"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("env/short/trace.csv").exists());
}

#[test]
fn mmc_preset_trace_columns() {
    let dir = tempfile::tempdir().unwrap();
    let src = preset("mmc_fig7").unwrap().replace("t_end = 1.0", "t_end = 0.1");
    let out = run_scenario_source(&src, "test", dir.path()).unwrap();
    let cols = trace_columns(&out.trace);
    for c in ["i_diff", "i_v", "u_CU", "u_CL", "i_diff_ref", "i_v_ref", "u_CU_ref", "u_CL_ref"] {
        assert!(cols.iter().any(|h| h == c), "missing column {c}");
    }
}

#[test]
fn preset_listing_and_printing() {
    let out = pbtrack(&["preset"]);
    let listed = String::from_utf8_lossy(&out.stdout);
    for (name, _) in PRESETS {
        assert!(listed.lines().any(|l| l == *name));
    }
    let out = pbtrack(&["preset", "mmc_fig7", "--print"]);
    assert_eq!(String::from_utf8_lossy(&out.stdout), preset("mmc_fig7").unwrap());
    assert_eq!(pbtrack(&["preset", "nope"]).status.code(), Some(2));
}

#[test]
fn props_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str, extra: &[&str]| {
        let out_dir = dir.path().join(sub);
        let mut args = vec!["props", "--seed", "11", "--count", "4", "--out", out_dir.to_str().unwrap()];
        args.extend_from_slice(extra);
        let out = pbtrack(&args);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read_to_string(out_dir.join("props.json")).unwrap()
    };
    let a = run("a", &[]);
    let b = run("b", &["--sequential"]);
    assert_eq!(a, b);
    assert!(a.contains("\"dissipation_failures\": 0"));
}
