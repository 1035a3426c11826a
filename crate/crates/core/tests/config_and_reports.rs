use vtwin_privacy::config::{parse_config, ConfigError, DemandMode};
use vtwin_privacy::ledger::{verify_bytes, Chain, Verdict};
use vtwin_privacy::presets;
use vtwin_privacy::report::{
    fig5a_csv, fig5a_text, fig5b_csv, parse_report_jsonl, report_jsonl, report_table, sha256_hex, timelines_csv,
    vmus_csv, ManifestEntry, RunManifest,
};
use vtwin_privacy::sim::{experiment_fig5a, experiment_fig5b, simulate, FIG5B_BETAS, FIG5B_GROUPS};

#[test]
fn presets_round_trip_through_toml() {
    for name in presets::names() {
        let c = presets::preset(name).unwrap();
        let again = parse_config(&c.to_toml()).unwrap();
        assert_eq!(c, again, "{name}");
    }
}

#[test]
fn unknown_keys_and_bad_values_are_located() {
    let err = parse_config("theta = 10\nperiod = 60\nbogus = 1\n[[vmus]]\nfrequency = 1\n").unwrap_err();
    match err {
        ConfigError::Parse { line, .. } => assert_eq!(line, 3),
        other => panic!("unexpected {other:?}"),
    }
    let err = parse_config("theta = 10\nperiod = 60\n[[vmus]]\nfrequency = 1\n[[vmus]]\nfrequency = -2\n").unwrap_err();
    assert_eq!(
        err,
        ConfigError::Validation {
            path: "vmus[1].frequency".into(),
            message: "must be a finite number >= 0".into()
        }
    );
    assert!(parse_config("period = 60\n[[vmus]]\nfrequency = 1\n").is_err());
}

#[test]
fn fig5a_csv_has_a_row_per_vmu_scheme_and_seed() {
    let base = presets::preset("paper_fig5a").unwrap();
    let table = experiment_fig5a(&base, &[1, 2, 3]).unwrap();
    for mode in [DemandMode::Realized, DemandMode::Expected] {
        let csv = fig5a_csv(&table, mode);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("vmu_index,frequency,scheme,utility,seed"));
        assert_eq!(lines.count(), 6 * 2 * 3);
        assert!(csv.ends_with('\n'));
    }
    let text = fig5a_text(&table);
    assert!(text.contains("reference: 33.8%"));
}

#[test]
fn fig5b_csv_has_a_row_per_group_beta_and_seed() {
    let base = presets::preset("paper_fig5b").unwrap();
    let groups: Vec<Vec<f64>> = FIG5B_GROUPS.iter().map(|g| g.to_vec()).collect();
    let table = experiment_fig5b(&base, &groups, &FIG5B_BETAS, &[4, 5]).unwrap();
    let csv = fig5b_csv(&table, DemandMode::Expected);
    assert_eq!(csv.lines().next(), Some("group,beta,global_utility,seed"));
    assert_eq!(csv.lines().count() - 1, 3 * FIG5B_BETAS.len() * 2);
}

#[test]
fn report_survives_json_lines() {
    let out = simulate(&presets::preset("mixed_groups").unwrap()).unwrap();
    let line = report_jsonl(&out.report);
    assert_eq!(line.matches('\n').count(), 1);
    assert_eq!(parse_report_jsonl(&line).unwrap(), out.report);

    let vmus = vmus_csv(&out.report);
    assert_eq!(vmus.lines().count() - 1, out.report.vmus.len());
    let tl = timelines_csv(&out.report);
    let points: usize = out.report.timelines.iter().map(Vec::len).sum();
    assert_eq!(tl.lines().count() - 1, points);
    assert!(report_table(&out.report).contains("SHA-256"));
}

#[test]
fn exported_chain_reimports_and_verifies() {
    let out = simulate(&presets::preset("mixed_groups").unwrap()).unwrap();
    assert!(out.chain.len() > 1);
    let bytes = out.chain.to_bytes();
    let back = Chain::from_bytes(&bytes).unwrap();
    assert_eq!(back, out.chain);
    assert_eq!(verify_bytes(&bytes), Verdict::Ok);
    assert_eq!(out.report.ledger.head, out.chain.head().to_hex());

    let mut truncated = bytes.clone();
    truncated.truncate(bytes.len() - 7);
    assert!(matches!(verify_bytes(&truncated), Verdict::Invalid { .. }));
}

#[test]
fn manifest_pins_the_report_bytes() {
    let out = simulate(&presets::preset("paper_fig5a").unwrap()).unwrap();
    let report = report_jsonl(&out.report);
    let manifest = RunManifest {
        tool: "vtwin-privacy".into(),
        version: "0".into(),
        command: "simulate".into(),
        config_echo: out.report.config.to_toml(),
        seeds: vec![out.report.header.master_seed],
        seed_source: "config".into(),
        outputs: vec![ManifestEntry {
            path: "report.jsonl".into(),
            sha256: sha256_hex(report.as_bytes()),
        }],
        report_sha256: sha256_hex(report.as_bytes()),
    };
    let parsed: RunManifest = serde_json::from_str(&manifest.to_json()).unwrap();
    assert!(parsed.verify_report(report.as_bytes()));
    let mut tampered = report.into_bytes();
    tampered[10] ^= 1;
    assert!(!parsed.verify_report(&tampered));
}
