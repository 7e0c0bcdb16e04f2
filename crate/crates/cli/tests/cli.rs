use std::fs;
use std::process::Command;

const TINY: &str = r#"{"layers": 1, "d_model": 8, "d_ff": 8, "d_latent": 4, "experts": 6, "k": 2,
    "steps": 6, "batch_size": 16, "eval_batch": 32, "eval_every": 3}"#;

fn lpr(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lpr")).args(args).output().unwrap()
}

#[test]
fn run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("out");
    let o = lpr(&["-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap(), "--seed", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("config_hash,step,test_loss,gini_hard,gini_soft,min_max_hard,min_max_soft,loads_hard,loads_soft,status"));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps_completed"], 6);
    let config: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["seed"], 5);
    let heat = fs::read_to_string(out.join("heatmap.tsv")).unwrap();
    let row: Vec<f64> = heat.trim().split('\t').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row.len(), 6);
    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"experts": 8, "k": 9}"#).unwrap();
    let o = lpr(&["-c", cfg.to_str().unwrap(), "-o", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("k must not exceed M"));

    fs::write(&cfg, "{\n  \"k\": \n}").unwrap();
    let o = lpr(&["-c", cfg.to_str().unwrap(), "-o", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn divergence_exits_3_with_diagnostic_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    let text = TINY.replace(
        "\"steps\": 6,",
        "\"steps\": 6, \"schedule\": {\"base_lr\": 1e300}, \"optimizer\": {\"clip_norm\": 0.0}, \"corpus\": {\"mean_scale\": 1e150},",
    );
    fs::write(&cfg, text).unwrap();
    let out = dir.path().join("out");
    let o = lpr(&["-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(csv.lines().last().unwrap().contains("diverged"));
}

#[test]
fn grid_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("grid");
    let o = lpr(&[
        "-c",
        cfg.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
        "--grid",
        "nk_setting",
        "--values",
        "6-2,6-1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let grid = fs::read_to_string(out.join("grid.csv")).unwrap();
    let lines: Vec<_> = grid.lines().collect();
    assert_eq!(lines[0], "axis,value,test_loss,gini_hard,min_max_hard,gini_soft,min_max_soft,divergence");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("nk_setting,6-2,") && lines[2].starts_with("nk_setting,6-1,"));

    let bad = lpr(&["-o", out.to_str().unwrap(), "--grid", "bogus", "--values", "1"]);
    assert_eq!(bad.status.code(), Some(2));
}
