//! Small runs of the experiment harness on inline configs.

use mbtrees::harness::{emit_report, load_config, run_experiment, ReportFormat};

fn setup(name: &str, model: &str, config: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("mbtrees-harness-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("model.json"), model).unwrap();
    std::fs::write(dir.join("config.json"), config).unwrap();
    dir
}

#[test]
fn alternating_spec_mixes_evenly() {
    // every type-2 vertex has exactly one type-1 child, so χ = (1/2, 1/2)
    let dir = setup(
        "alt",
        r#"[[{"z": [0, 0], "p": 0.5}, {"z": [0, 2], "p": 0.5}], [{"z": [1, 0], "p": 1.0}]]"#,
        r#"{"criterion": 5, "kind": "type_mixing", "models": [{"kind": "gw", "path": "model.json"}],
            "n_grid": [401], "replicates": 300, "seed": 17, "tolerance": 0.02}"#,
    );
    let r = run_experiment(&load_config(&dir.join("config.json")).unwrap()).unwrap();
    assert!(r.all_pass(), "{}", r.summary());
    for row in &r.rows {
        assert_eq!(row.reference, Some(0.5));
    }
}

#[test]
fn series_are_written_next_to_the_report() {
    let dir = setup(
        "series",
        r#"{"t0": [-1, 0], "alphabet": [{"tree": [-1, 0], "q": 1.0}]}"#,
        r#"{"criterion": 11, "kind": "growth_scaling", "variant": "height_moments",
            "models": [{"kind": "growth", "path": "model.json", "gamma": 0.5}],
            "n_grid": [16, 32, 64], "replicates": 200, "seed": 3, "tolerance": 1.5}"#,
    );
    let r = run_experiment(&load_config(&dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(r.series.len(), 3);
    let out = dir.join("report.csv");
    emit_report(&r, ReportFormat::Csv, &out).unwrap();
    let series = std::fs::read_to_string(dir.join("report_series.csv")).unwrap();
    assert_eq!(series.lines().count(), 4);
    assert!(series.starts_with("criterion_id,series,x,y,stderr\n"));
}

#[test]
fn model_errors_name_the_file() {
    let dir = setup(
        "badmodel",
        r#"[[{"z": [0], "p": 0.5}, {"z": [2], "p": 0.4}]]"#,
        r#"{"criterion": 3, "kind": "gw_limit", "variant": "local_limit",
            "models": [{"kind": "gw", "path": "model.json"}], "n_grid": [10], "seed": 1, "tolerance": 0.05}"#,
    );
    let e = run_experiment(&load_config(&dir.join("config.json")).unwrap()).unwrap_err().to_string();
    assert!(e.contains("model.json") && e.contains("sum to"), "{e}");
}
