use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pod")).args(args).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Columns of a Sylvester Hadamard matrix: centered, orthogonal, equal norm.
fn write_flat_spectrum(path: &Path, p: usize) {
    let mut text = (1..=p).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",") + "\n";
    for i in 0..16u32 {
        let row: Vec<String> = (1..=p as u32)
            .map(|j| if (i & j).count_ones() % 2 == 0 { "1" } else { "-1" }.to_string())
            .collect();
        text += &(row.join(",") + "\n");
    }
    fs::write(path, text).unwrap();
}

fn write_regression(path: &Path) {
    let mut text = String::from("x1,x2,y\n");
    for i in 0..40 {
        let x1 = (i as f64 * 0.37).sin();
        let x2 = (i as f64 * 1.13).cos();
        text += &format!("{x1},{x2},{}\n", 2.0 * x1 + 0.1 * x2);
    }
    fs::write(path, text).unwrap();
}

#[test]
fn out_of_range_alpha_is_a_config_error_naming_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_regression(&data);
    let out = pod(&["determine", "--data", data.to_str().unwrap(), "--response", "y", "--alpha", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--alpha"), "{}", stderr(&out));
}

#[test]
fn malformed_study_config_reports_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    fs::write(&config, "{\n  \"name\": \"x\",\n  \"study\": \n}\n").unwrap();
    let out = pod(&["simulate", "--config", config.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("line 4") && err.contains("column"), "{err}");
}

#[test]
fn unknown_baseline_method_lists_the_valid_ones() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_flat_spectrum(&data, 4);
    let out = pod(&["baseline", "--data", data.to_str().unwrap(), "--method", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    for name in ["ic", "er", "kapetanios"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn eigenvalue_ratio_picks_one_on_a_flat_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("flat.csv");
    let out_dir = dir.path().join("out");
    write_flat_spectrum(&data, 6);
    let out = pod(&[
        "baseline", "--data", data.to_str().unwrap(), "--method", "er", "--kmax", "4",
        "--out", out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let result: serde_json::Value = serde_json::from_slice(&fs::read(out_dir.join("result.json")).unwrap()).unwrap();
    assert_eq!(result["k_hat"], 1);
}

#[test]
fn missing_data_file_is_a_data_error() {
    let out = pod(&["determine", "--data", "/nonexistent/d.csv", "--response", "y"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}
