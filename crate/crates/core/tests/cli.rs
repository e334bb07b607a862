use std::path::Path;
use std::process::{Command, Output};

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wiener-gcs"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn complexity_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(dir.path(), &["complexity", "--kind", "separated", "--m", "6", "--n", "8"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "64");
    let o = cli(dir.path(), &["complexity", "--kind", "full", "--m", "6", "--n", "16"]);
    assert_eq!(stdout(&o).trim(), "128");
    let o = cli(dir.path(), &["complexity", "--kind", "gaussian", "--m", "6"]);
    assert_eq!(stdout(&o).trim(), "256");
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(dir.path(), &["gradcheck"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("max_rel_error "));
    assert_eq!(text.lines().last(), Some("PASS"));
}

#[test]
fn invalid_flags_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(dir.path(), &["complexity", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    let o = cli(dir.path(), &["complexity", "--kind", "hexagonal"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn failures_print_a_machine_readable_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(dir.path(), &["sweep", "--system", "lost=does/not/exist", "--grid", "17"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().last().unwrap();
    assert!(line.starts_with("error: kind=missing_checkpoint message="), "{line}");
    assert!(line.contains("`lost`"));

    std::fs::write(dir.path().join("bad.conf"), "stepz = 3\n").unwrap();
    let o = cli(dir.path(), &["--config", "bad.conf", "train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error: kind=parse"));
}

#[test]
fn train_then_export_and_validate() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("tiny.conf"),
        "steps = 2\nbatch_symbols = 128\nwindow = 16\nn_angles = 8\nhidden = 2\n",
    )
    .unwrap();
    let o = cli(dir.path(), &["--config", "tiny.conf", "--seed", "3", "train", "--log-every", "0", "--out", "ckpt"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for file in ["constellation.tsv", "weights.txt", "metadata.txt", "history.tsv"] {
        assert!(dir.path().join("ckpt").join(file).is_file(), "{file}");
    }

    let o = cli(dir.path(), &["export-constellation", "--checkpoint", "ckpt"]);
    assert!(o.status.success());
    let tsv = stdout(&o);
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines.len(), 65);
    assert_eq!(lines[0], "re\tim\tlabel");

    let o = cli(
        dir.path(),
        &["validate", "--checkpoint", "ckpt", "--n-symbols", "1200", "--n-seeds", "2", "--out", "v.txt"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("v.txt")).unwrap();
    assert!(text.lines().any(|l| l.starts_with("mean = ")));
    assert!(text.lines().any(|l| l.starts_with("best_rotation_mean = ")));
}

#[test]
fn sweep_writes_readable_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(
        dir.path(),
        &[
            "--seed", "1", "sweep", "--axis", "snr", "--grid", "16,14", "--system", "q=qam:4",
            "--n-symbols", "2000", "--n-seeds", "2", "--out", "s",
        ],
    );
    // grid must be increasing
    assert_eq!(o.status.code(), Some(1));

    let o = cli(
        dir.path(),
        &[
            "--seed", "1", "sweep", "--axis", "snr", "--grid", "14,16", "--system", "q=qam:4",
            "--system", "g=qam:2", "--n-symbols", "2000", "--n-seeds", "2", "--out", "s",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("s/q.dat")).unwrap();
    let (axis, rows) = wiener_gcs::experiments::parse_table(&text, "q.dat").unwrap();
    assert_eq!(axis, wiener_gcs::experiments::Axis::Snr);
    assert_eq!(rows.len(), 2);
    assert!(rows[0].value < rows[1].value);
    assert!(text.lines().last().unwrap().starts_with("# config_hash="));
    assert!(dir.path().join("s/report.txt").is_file());
}
