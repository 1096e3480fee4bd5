use std::fs;
use std::path::Path;
use std::process::Command;

const TINY: &str = r#"
seed = 9

[corpus]
vocab = 8
sample_len = 12
calibration_samples = 16
heldout_samples = 4
train_samples = 32

[model]
embed_dim = 4
widths = [8, 6]

[training]
epochs = 20
learning_rate = 0.5

[grid]
sparsity = [0.5]
server_group = ["layer", "row", "column"]
strategy = ["one_shot", "iterative"]
scaling = [true, false]
clients = [4]
samples = [16]
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedprune"))
}

fn write_spec(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn without_wall_time(csv_text: &str) -> Vec<String> {
    csv_text
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect()
}

#[test]
fn run_writes_fourteen_rows_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "spec.toml", TINY);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    fs::create_dir(&out_a).unwrap();
    fs::create_dir(&out_b).unwrap();

    let status = bin().arg("run").arg(&spec).arg("--out").arg(&out_a).status().unwrap();
    assert_eq!(status.code(), Some(0));
    let status = bin()
        .env("FEDPRUNE_THREADS", "1")
        .arg("run")
        .arg(&spec)
        .arg("--out")
        .arg(&out_b)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    let a = fs::read_to_string(out_a.join("results.csv")).unwrap();
    let b = fs::read_to_string(out_b.join("results.csv")).unwrap();
    assert_eq!(a.lines().count(), 1 + 14);
    assert_eq!(a.lines().filter(|l| l.starts_with("federated,")).count(), 12);
    assert_eq!(without_wall_time(&a), without_wall_time(&b));
    let archive: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_a.join("results.json")).unwrap()).unwrap();
    assert_eq!(archive["reports"].as_array().unwrap().len(), 14);
}

#[test]
fn json_spec_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let spec: toml::Value = toml::from_str(TINY).unwrap();
    let path = write_spec(dir.path(), "spec.json", &serde_json::to_string(&spec).unwrap());
    let status = bin().arg("run").arg(&path).arg("--out").arg(dir.path()).status().unwrap();
    assert_eq!(status.code(), Some(0));
}

#[test]
fn spec_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "spec.toml", TINY);
    let missing = bin().arg("run").arg(&spec).arg("--out").arg(dir.path().join("missing")).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("does not exist"));

    let bad = write_spec(dir.path(), "bad.toml", &TINY.replace("sparsity = [0.5]", "sparsity = [2.0]"));
    assert_eq!(bin().arg("run").arg(&bad).arg("--out").arg(dir.path()).status().unwrap().code(), Some(2));

    let no_file = bin().arg("run").arg(dir.path().join("nope.toml")).arg("--out").arg(dir.path()).status().unwrap();
    assert_eq!(no_file.code(), Some(2));

    let threads = bin().env("FEDPRUNE_THREADS", "lots").arg("run").arg(&spec).arg("--out").arg(dir.path()).status().unwrap();
    assert_eq!(threads.code(), Some(2));
}

#[test]
fn numerical_failure_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "spec.toml", &TINY.replace("learning_rate = 0.5", "learning_rate = 1e6"));
    let out = bin().arg("run").arg(&spec).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("numerical error"));
}

#[test]
fn sweeps() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "spec.toml", &TINY.replace(
        "server_group = [\"layer\", \"row\", \"column\"]\nstrategy = [\"one_shot\", \"iterative\"]\nscaling = [true, false]",
        "server_group = [\"layer\"]\nstrategy = [\"one_shot\"]\nscaling = [false]",
    ));

    let out = bin()
        .args(["sweep", "--axis", "samples", "--values", "4,16,40"])
        .arg(&spec)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let csv_text = fs::read_to_string(dir.path().join("sweep_samples.csv")).unwrap();
    let rows: Vec<&str> = csv_text.lines().skip(1).collect();
    // three methods per realizable value, one warning row for 40 samples
    assert_eq!(rows.len(), 3 + 3 + 1);
    assert!(rows[..3].iter().all(|r| r.contains(",2,4,")));
    assert!(rows[6].starts_with("skipped,"));

    let out = bin()
        .args(["sweep", "--axis", "clients", "--values", "2,8"])
        .arg(&spec)
        .arg("--out")
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(out.code(), Some(0));
    let csv_text = fs::read_to_string(dir.path().join("sweep_clients.csv")).unwrap();
    assert_eq!(csv_text.lines().count(), 1 + 6);

    let out = bin().args(["sweep", "--axis", "clients", "--values", ""]).arg(&spec).arg("--out").arg(dir.path()).status().unwrap();
    assert_eq!(out.code(), Some(0));
    let csv_text = fs::read_to_string(dir.path().join("sweep_clients.csv")).unwrap();
    assert_eq!(csv_text.lines().count(), 1);

    let bad = bin().args(["sweep", "--axis", "clients", "--values", "2,x"]).arg(&spec).arg("--out").arg(dir.path()).status().unwrap();
    assert_eq!(bad.code(), Some(2));
}

#[test]
fn verify_filter() {
    let out = bin().args(["verify", "--filter", "wire"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PASS wire_roundtrip"));
    assert!(text.contains("1 checks, 0 failed"));
}
