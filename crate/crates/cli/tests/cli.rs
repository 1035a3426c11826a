use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vtwin(args: &[&str]) -> Output {
    vtwin_env(args, None)
}

fn vtwin_env(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vtwin"));
    cmd.args(args).env_remove("VTWIN_SEED");
    if let Some(s) = seed_env {
        cmd.env("VTWIN_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("vtwin-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn lists_presets() {
    let o = vtwin(&["presets"]);
    assert!(o.status.success());
    let names = stdout(&o);
    for n in ["paper_fig5a", "paper_fig5b", "async_linkage", "mixed_groups"] {
        assert!(names.lines().any(|l| l == n), "{n}");
    }
    let o = vtwin(&["presets", "paper_fig5a"]);
    assert!(stdout(&o).contains("theta = 10.0"));
}

#[test]
fn simulate_writes_report_chain_and_manifest() {
    let dir = scratch("simulate");
    let o = vtwin(&[
        "simulate",
        "preset:mixed_groups",
        "--format",
        "json-lines",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read(dir.join("report.jsonl")).unwrap();
    let m = manifest(&dir);
    assert_eq!(m["report_sha256"], vtwin_privacy::report::sha256_hex(&report));
    assert_eq!(m["seed_source"], "config");
    assert!(dir.join("timelines.csv").exists());

    let chain = dir.join("chain.bin");
    let o = vtwin(&["verify-chain", chain.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("ok:"));

    let mut bytes = fs::read(&chain).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let bad = dir.join("bad.bin");
    fs::write(&bad, bytes).unwrap();
    assert_eq!(vtwin(&["verify-chain", bad.to_str().unwrap()]).status.code(), Some(4));
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn seed_precedence_is_flag_then_env_then_config() {
    let seed_of = |args: &[&str], env: Option<&str>, tag: &str| {
        let dir = scratch(tag);
        let mut full = vec!["optimize", "preset:paper_fig5a", "--out", dir.to_str().unwrap()];
        full.extend_from_slice(args);
        let o = vtwin_env(&full, env);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let m = manifest(&dir);
        let _ = fs::remove_dir_all(&dir);
        (
            m["seeds"][0].as_u64().unwrap(),
            m["seed_source"].as_str().unwrap().to_string(),
        )
    };
    assert_eq!(seed_of(&["--seed", "5"], Some("7"), "flag"), (5, "flag".into()));
    assert_eq!(seed_of(&[], Some("7"), "env"), (7, "env".into()));
    assert_eq!(seed_of(&[], None, "config"), (1, "config".into()));
}

#[test]
fn config_errors_exit_with_2() {
    let o = vtwin_env(&["simulate", "preset:paper_fig5a"], Some("not-a-number"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("VTWIN_SEED"));
    assert_eq!(vtwin(&["simulate", "preset:nope"]).status.code(), Some(2));

    let dir = scratch("badcfg");
    fs::create_dir_all(&dir).unwrap();
    let path = dir.join("bad.toml");
    fs::write(&path, "theta = 10\nperiod = -1\n[[vmus]]\nfrequency = 1\n").unwrap();
    let o = vtwin(&["simulate", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("period"));
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn reproduce_fig5a_csv_rows() {
    let o = vtwin(&["reproduce", "fig5a", "--seeds", "3", "--format", "csv"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().next(), Some("vmu_index,frequency,scheme,utility,seed"));
    assert_eq!(text.lines().count(), 1 + 36);
}

#[test]
fn reproduce_prints_reference_and_is_deterministic() {
    let a = vtwin(&["reproduce", "fig5a", "--seeds", "4"]);
    let b = vtwin(&["reproduce", "fig5a", "--seeds", "4"]);
    assert!(a.status.success());
    assert!(stdout(&a).contains("reference: 33.8%"));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn attack_eval_reports_defenses() {
    let o = vtwin(&["attack-eval", "preset:async_linkage", "--format", "json-lines"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["misbehavior"]["injection_successes"], 0);
    assert_eq!(v["misbehavior"]["impersonation_successes"], 0);
    let global = v["attackers"]
        .as_array()
        .unwrap()
        .iter()
        .find(|a| a["name"] == "global")
        .unwrap();
    assert_eq!(global["mean_tracked_fraction"], 1.0);
}
