use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_ortho-flow");

fn ortho_flow(out: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--output-dir")
        .arg(out)
        .args(args)
        .env_remove("ORTHO_FLOW_THREADS")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.display().to_string()
}

#[test]
fn missing_config_exits_3_and_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ortho_flow(tmp.path(), &["run", "/no/such/config.toml"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/config.toml"));
}

#[test]
fn typo_in_config_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        "[problem]\nkind = \"oscillator1d\"\n[flow]\ntua = 0.1\n",
    );
    let out = ortho_flow(tmp.path(), &["run", &cfg]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tua"));
}

#[test]
fn oscillator1d_run_writes_all_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "[problem]\nkind = \"oscillator1d\"\n");
    let out = ortho_flow(tmp.path(), &["run", &cfg]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let dir = tmp.path().join("oscillator1d");
    let records = fs::read_to_string(dir.join("records.csv")).unwrap();
    assert_eq!(
        records.lines().next().unwrap(),
        "n,t,energy,energy_shift_corrected,err_E,ortho_err,err_U,dist_class_a,delta_L2"
    );
    let table = fs::read_to_string(dir.join("eigenvalues.csv")).unwrap();
    let lambda: Vec<f64> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    for (l, want) in lambda.iter().zip([0.5, 1.5, 2.5]) {
        assert!((l - want).abs() < 2e-3, "{l}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["schema_version"], 1);
    assert_eq!(summary["reorthogonalizations"], 0);
    assert!(summary["init_distribution"]
        .as_str()
        .unwrap()
        .contains("standard normal"));
    assert!(dir.join("final_state.txt").exists());
}

#[test]
fn same_seed_gives_identical_summaries() {
    let tmp = tempfile::tempdir().unwrap();
    let body = "[problem]\nkind = \"oscillator1d\"\ncells = [64]\n[flow]\nseed = 9\n";
    let cfg = write_config(tmp.path(), "c.toml", body);
    let strip = |dir: &Path| {
        let mut v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("oscillator1d/summary.json")).unwrap())
                .unwrap();
        v["wall_time_s"] = serde_json::Value::Null;
        v
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(ortho_flow(a.path(), &["run", &cfg]).status.code(), Some(0));
    assert_eq!(ortho_flow(b.path(), &["run", &cfg]).status.code(), Some(0));
    assert_eq!(strip(a.path()), strip(b.path()));
}

#[test]
fn max_iter_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        "[problem]\nkind = \"oscillator1d\"\n[flow]\nmax_iter = 3\n",
    );
    let out = ortho_flow(tmp.path(), &["run", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let records = fs::read_to_string(tmp.path().join("oscillator1d/records.csv")).unwrap();
    assert_eq!(records.lines().count(), 5);
}

#[test]
fn compare_against_own_final_state_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "[problem]\nkind = \"oscillator1d\"\n");
    assert_eq!(ortho_flow(tmp.path(), &["run", &cfg]).status.code(), Some(0));
    let out = ortho_flow(
        tmp.path(),
        &["compare", "oscillator1d", "oscillator1d/final_state.txt"],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("oscillator1d/summary.json")).unwrap())
            .unwrap();
    let c = &summary["comparisons"][0];
    for key in ["delta_l2", "dist_class_l2", "dist_class_a"] {
        assert!(c[key].as_f64().unwrap() < 1e-10, "{key} = {}", c[key]);
    }
    assert!(c["err_i"]
        .as_array()
        .unwrap()
        .iter()
        .all(|e| e.as_f64().unwrap() == 0.0));
}

#[test]
fn reference_with_wrong_width_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "[problem]\nkind = \"oscillator1d\"\n");
    let wide = write_config(
        tmp.path(),
        "w.toml",
        "[problem]\nkind = \"oscillator1d\"\nn_orbitals = 4\n[output]\ndir = \"wide\"\n",
    );
    assert_eq!(ortho_flow(tmp.path(), &["run", &cfg]).status.code(), Some(0));
    assert_eq!(
        ortho_flow(tmp.path(), &["reference", &wide]).status.code(),
        Some(0)
    );
    let out = ortho_flow(tmp.path(), &["compare", "oscillator1d", "wide/reference.txt"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn sweep_writes_one_run_per_tau_and_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "[problem]\nkind = \"oscillator1d\"\n");
    let out = ortho_flow(tmp.path(), &["sweep-tau", &cfg, "--taus", "0.1,0.25,0.5"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let base = tmp.path().join("oscillator1d");
    for tau in ["0.1", "0.25", "0.5"] {
        assert!(base.join(format!("tau_{tau}/summary.json")).exists());
    }
    let table = fs::read_to_string(base.join("table.csv")).unwrap();
    assert_eq!(
        table.lines().next().unwrap(),
        "i,lambda_ref,err_i@tau=0.1,err_i@tau=0.25,err_i@tau=0.5"
    );
    let iters: Vec<usize> = table
        .lines()
        .last()
        .unwrap()
        .split(',')
        .skip(2)
        .map(|v| v.parse().unwrap())
        .collect();
    assert!(iters.windows(2).all(|w| w[0] > w[1]), "{iters:?}");
}

#[test]
fn bad_thread_count_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "[problem]\nkind = \"oscillator1d\"\n");
    let out = Command::new(BIN)
        .args(["--output-dir", &tmp.path().display().to_string(), "run", &cfg])
        .env("ORTHO_FLOW_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let out = Command::new(BIN)
        .args(["--output-dir", &tmp.path().display().to_string(), "run", &cfg])
        .env("ORTHO_FLOW_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn usage_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(ortho_flow(tmp.path(), &["frobnicate"]).status.code(), Some(3));
    assert_eq!(ortho_flow(tmp.path(), &["--help"]).status.code(), Some(0));
}
