use std::fs;
use std::path::Path;
use std::process::{Command, Output};

/// Runs the binary with a whitespace-separated argument line.
fn eet(line: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eet"))
        .args(line.split_whitespace())
        .output()
        .expect("binary runs")
}

fn ok(line: &str) -> String {
    let out = eet(line);
    assert!(
        out.status.success(),
        "`{line}` failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> String {
    path.display().to_string()
}

const SMALL_MODEL: &str = "--blocks 1 --width 8 --heads 2 --mlp-hidden 16";

#[test]
fn help_exits_zero() {
    let out = eet("synth --help");
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
}

#[test]
fn unknown_flag_or_subcommand_exits_two() {
    assert_eq!(eet("synth --bogus").status.code(), Some(2));
    assert_eq!(eet("frobnicate").status.code(), Some(2));
}

#[test]
fn runtime_errors_are_one_tagged_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = p(&dir.path().join("missing.eet"));
    let out = eet(&format!("eval --checkpoint {missing} --data {missing}"));
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error["), "{err}");
}

#[test]
fn synth_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.eet"), dir.path().join("b.eet"));
    for out in [&a, &b] {
        ok(&format!(
            "synth --out {} --samples 12 --seconds 2 --effect spatial --seed 4",
            p(out)
        ));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn joint_train_reruns_reproduce_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = p(&dir.path().join("joint.eet"));
    ok(&format!(
        "synth --out {data} --samples 90 --seconds 3 --seed 7"
    ));
    let mut reports = Vec::new();
    for run in ["first", "second"] {
        let out = dir.path().join(run);
        let stdout = ok(&format!(
            "train --data {data} --out {} --variant s+t {SMALL_MODEL} --folds 5 --epochs 2 --seed 7",
            p(&out)
        ));
        assert!(stdout.contains("variant=s+t folds=5"), "{stdout}");
        reports.push(fs::read(out.join("cv_report.json")).unwrap());
        let csv = fs::read_to_string(out.join("cv_folds.csv")).unwrap();
        assert_eq!(csv.lines().count(), 6);
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn saved_models_evaluate_and_expose_normalized_attention() {
    let dir = tempfile::tempdir().unwrap();
    let data = p(&dir.path().join("d.eet"));
    let runs = dir.path().join("runs");
    let maps = dir.path().join("maps");
    ok(&format!(
        "synth --out {data} --samples 20 --seconds 3 --effect temporal --seed 2"
    ));
    ok(&format!(
        "train --data {data} --out {} --variant st --save-models {SMALL_MODEL} --folds 2 --epochs 1",
        p(&runs)
    ));
    let ckpt = p(&runs.join("fold0.ckpt"));

    let stdout = ok(&format!("eval --checkpoint {ckpt} --data {data}"));
    assert!(
        stdout.starts_with("accuracy=") && stdout.contains("samples=20"),
        "{stdout}"
    );

    ok(&format!(
        "inspect-attn --checkpoint {ckpt} --data {data} --sample 3 --out {}",
        p(&maps)
    ));
    let mut files: Vec<_> = fs::read_dir(&maps)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    // One block, two stages, two heads.
    assert_eq!(files.len(), 4, "{files:?}");
    let tokens = 16 * 3 + 1;
    for file in files {
        let text = fs::read_to_string(&file).unwrap();
        let rows: Vec<Vec<f64>> = text
            .lines()
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), tokens);
        for row in rows {
            assert_eq!(row.len(), tokens);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6, "{}: {sum}", file.display());
        }
    }
}

#[test]
fn gradcheck_and_layout_commands() {
    let stdout = ok("gradcheck --variant st");
    assert!(stdout.contains("st") && stdout.contains("pass"), "{stdout}");
    let table = ok("dump-layout");
    assert!(table.lines().count() > 60, "{table}");
}
