use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sparsity(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparsity"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn gen_fit_metrics_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    ok(&sparsity(
        &["gen", "--d", "8", "--n", "300", "--a", "2", "--seed", "3", "--truth", "-o", "data.actv"],
        cwd,
    ));
    for file in ["data.actv", "data.actv.json", "data.actv.features.actv", "data.actv.coefficients.txt"] {
        assert!(cwd.join(file).exists(), "{file} missing");
    }

    ok(&sparsity(
        &["fit", "data.actv", "-o", "run", "--lambda", "0.05", "--max-alternations", "10", "--dict-factor", "4"],
        cwd,
    ));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(cwd.join("run/fit.json")).unwrap()).unwrap();
    assert_eq!(summary["lambda"], 0.05);
    assert_eq!(summary["dict_size"], 32);

    let out = sparsity(
        &["metrics", "--activations", "data.actv", "--dictionary", "run/dictionary.actv", "--coefficients", "run/coefficients.txt"],
        cwd,
    );
    ok(&out);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["nonzero_entries", "final_loss", "avg_coeff_norm", "normalized_loss", "variance_explained"] {
        assert!(report[key].is_number(), "{key}: {}", report[key]);
    }

    // Same numbers when the coefficients are re-inferred at the fitted λ.
    let out = sparsity(
        &["metrics", "--activations", "data.actv", "--dictionary", "run/dictionary.actv", "--infer", "-o", "m.json"],
        cwd,
    );
    ok(&out);
    let inferred: serde_json::Value = serde_json::from_str(&fs::read_to_string(cwd.join("m.json")).unwrap()).unwrap();
    assert_eq!(inferred["nonzero_entries"], report["nonzero_entries"]);
}

#[test]
fn exp_writes_csv_and_json_with_flags_over_config() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    fs::write(cwd.join("sweep.cfg"), "# tiny sweep\nd = 8\nn = 256\na_grid = 1, 2, 4\nmax_alternations = 5\n").unwrap();
    ok(&sparsity(
        &["exp", "sweep", "-c", "sweep.cfg", "--a-grid", "2", "-s", "adapt_lambda=false", "-o", "out/sweep"],
        cwd,
    ));
    let csv = fs::read_to_string(cwd.join("out/sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "table,dataset,d,m,lambda,metric,value,variance_explained,true_sparsity,wall_time_s,flag,failure"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.starts_with("sweep,sparse_a0002,8,64,")));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(cwd.join("out/sweep.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 4);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    assert_eq!(sparsity(&["--help"], cwd).status.code(), Some(0));
    assert_eq!(sparsity(&["frobnicate"], cwd).status.code(), Some(1));
    assert_eq!(sparsity(&["fit", "missing.actv", "-o", "x"], cwd).status.code(), Some(1));
    assert_eq!(sparsity(&["exp", "sweep", "-s", "a_grid="], cwd).status.code(), Some(1));

    // A λ large enough to zero every coefficient cannot be adapted.
    ok(&sparsity(&["gen", "--d", "4", "--n", "64", "-o", "small.actv"], cwd));
    let out = sparsity(&["fit", "small.actv", "-o", "big", "--lambda", "1e6", "--adapt"], cwd);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
