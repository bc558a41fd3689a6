use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_kantize"));
    c.env("KANTIZE_DATA_DIR", data_dir()).env("RUST_LOG", "warn");
    c
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn kantize")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "kantize {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn cost_kanmlp1_row() {
    let out = ok(&["cost", "--arch", "kanmlp1", "--bw-w", "8", "--bw-a", "8", "--bw-b", "3"]);
    let mut lines = out.lines();
    assert_eq!(
        lines.next().unwrap(),
        "arch,mode,bw_W,bw_A,bw_B,muls_matmul,muls_bspline,bitops,lut_memory_bits,spline_table_bits,fp32_coeff_bits,param_count,fpga_lut_estimate"
    );
    assert_eq!(lines.next().unwrap(), "kanmlp1,fake-quant,8,8,3,47040,75264,5945856,0,0,1505280,47040,70560");
}

#[test]
fn cost_lists_expand_and_json() {
    let out = ok(&["cost", "--arch", "kanmlp1", "--mode", "bspline-lut", "--bw-w", "8", "--bw-a", "8", "--bw-b", "3,8", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["bitops"], 1_128_960);
    assert_eq!(rows[0]["lut_memory_bits"], 2 * 256 * 3);
}

#[test]
fn cost_from_descriptor_file() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../archs/kanmlp2.json");
    let out = ok(&["cost", "--arch", s(&path), "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v[0]["fpga_lut_estimate"], 457_344);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let out = run(&["cost", "--arch", "vgg"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown architecture"));
    let out = run(&["eval", "--model", "/nonexistent/model.kant"]);
    assert!(!out.status.success());
    let out = run(&["cost", "--arch", "kanmlp1", "--format", "xml"]);
    assert!(!out.status.success());
    let out = run(&["sweep", "--bw-w", "8"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no model"));
}

#[test]
fn tabulate_lut_without_model() {
    let dir = tempfile::tempdir().unwrap();
    let lut = dir.path().join("lut.json");
    let out = ok(&["tabulate", "--mode", "bspline-lut", "--bw-a", "4", "--bw-b", "8", "--out", s(&lut)]);
    assert!(out.contains("256 bits"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&lut).unwrap()).unwrap();
    assert_eq!(v["entries"].as_array().unwrap().len(), 33);
    assert!(!run(&["tabulate", "--mode", "bspline-lut", "--bw-a", "4", "--bw-b", "9", "--out", s(&lut)]).status.success());
}

#[test]
fn train_eval_tabulate_sweep_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.kant");
    let loss = dir.path().join("loss.csv");
    ok(&["train", "--epochs", "1", "--subset", "500", "--out", s(&model), "--loss-csv", s(&loss)]);
    let curve = std::fs::read_to_string(&loss).unwrap();
    assert_eq!(curve.lines().count(), 3);

    let fp = ok(&["eval", "--model", s(&model), "--subset", "200"]);
    assert!(fp.lines().nth(1).unwrap().starts_with("fp32,32,32,32,200,"));

    // the LUT path reproduces knot-lattice fake quantization
    let lut = ok(&["eval", "--model", s(&model), "--subset", "200", "--mode", "bspline-lut", "--bw-w", "8", "--bw-a", "4", "--bw-b", "3"]);
    let fq = ok(&[
        "eval", "--model", s(&model), "--subset", "200", "--mode", "fake-quant", "--bw-w", "8", "--bw-a", "4", "--bw-b", "3", "--act-policy",
        "knot-lattice",
    ]);
    let acc = |t: &str| t.lines().nth(1).unwrap().rsplit(',').next().unwrap().to_string();
    assert_eq!(acc(&lut), acc(&fq));

    let tabulated = dir.path().join("t.kant");
    ok(&["tabulate", "--model", s(&model), "--bw-a", "4", "--bw-b", "6", "--out", s(&tabulated)]);
    let st = ok(&["eval", "--model", s(&tabulated), "--mode", "spline-table", "--subset", "200"]);
    assert!(st.lines().nth(1).unwrap().starts_with("spline-table,32,4,6,200,"));
    let cost = ok(&["cost", "--model", s(&model), "--mode", "spline-table", "--bw-a", "4", "--bw-b", "6"]);
    assert!(cost.contains(",752640,"));

    let spec = dir.path().join("spec.json");
    std::fs::write(
        &spec,
        format!(
            r#"{{"model": {:?}, "bw_w": [4, 32], "bw_a": [4, 32], "bw_b": [3, 32], "modes": ["fake-quant", "bspline-lut"], "subset": 150, "seed": 3}}"#,
            s(&model)
        ),
    )
    .unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    ok(&["sweep", "--spec", s(&spec), "--out", s(&out_a), "--name", "kanmlp1"]);
    ok(&["sweep", "--spec", s(&spec), "--out", s(&out_b), "--name", "kanmlp1", "--no-plots"]);
    let csv_a = std::fs::read_to_string(out_a.join("sweep.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read_to_string(out_b.join("sweep.csv")).unwrap());
    // 8 fake-quant rows, 2 LUT rows (A=4 with h=3)
    assert_eq!(csv_a.lines().count(), 1 + 8 + 2);
    assert!(out_a.join("accuracy_vs_bitops.svg").exists());
    assert!(!out_b.join("accuracy_vs_bitops.svg").exists());

    let front = ok(&["pareto", s(&out_a.join("sweep.csv"))]);
    assert_eq!(front, std::fs::read_to_string(out_a.join("pareto_bitops.csv")).unwrap());
    let json = ok(&["pareto", s(&out_a.join("sweep.csv")), "--objective", "memory", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert!(v.as_array().unwrap().iter().all(|p| p["mode"] == "bspline-lut"));

    let plots = dir.path().join("plots");
    ok(&["plot", s(&out_a.join("sweep.csv")), "--out", s(&plots)]);
    let svg = std::fs::read_to_string(plots.join("accuracy_vs_memory.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));

    ok(&["sweep", "--spec", s(&spec), "--out", s(&dir.path().join("j")), "--format", "json", "--no-plots"]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("j/sweep.json")).unwrap()).unwrap();
    assert_eq!(v["points"].as_array().unwrap().len(), 10);
}

#[test]
fn missing_data_dir_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .env("KANTIZE_DATA_DIR", dir.path())
        .args(["train", "--epochs", "1", "--out", s(&dir.path().join("m.kant"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no IDX files"));
}
