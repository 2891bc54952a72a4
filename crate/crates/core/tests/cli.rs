use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use trex::io::{load_model, read_bench_csv, read_samples, save_model, Fitted, ModelRecord};
use trex::synthetic::planted_model;
use trex::Termination;

fn trex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trex"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn generate(dir: &TempDir, kind: &str, n: usize, m: usize, name: &str) -> PathBuf {
    let file = path(dir, name);
    let out = trex(&[
        "generate",
        "--kind",
        kind,
        "--n",
        &n.to_string(),
        "--m",
        &m.to_string(),
        "--rank",
        "5",
        "--seed",
        "3",
        "--output",
        s(&file),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    file
}

#[test]
fn fit_writes_model_with_requested_rank() {
    let dir = TempDir::new().unwrap();
    let data = generate(&dir, "gaussian", 20, 100, "data.csv");
    let model = path(&dir, "model.txt");
    let out = trex(&[
        "fit",
        "--input",
        s(&data),
        "--output",
        s(&model),
        "--rank",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let summary = String::from_utf8(out.stdout).unwrap();
    assert!(
        summary.starts_with("trex: n=20 m=100 iterations="),
        "{summary}"
    );
    assert!(summary.contains("objective="));
    let record = load_model(&model).unwrap();
    let Fitted::Factor(fitted) = record.fitted else {
        panic!("expected factor model")
    };
    assert_eq!((fitted.dim(), fitted.rank()), (20, 5));
    assert_eq!(record.objective_trace.len(), record.iterations + 1);
}

#[test]
fn every_estimator_fits() {
    let dir = TempDir::new().unwrap();
    let data = generate(&dir, "student-t", 8, 60, "data.csv");
    for est in ["trex", "gfa", "pca"] {
        let model = path(&dir, &format!("{est}.txt"));
        let out = trex(&[
            "fit",
            "--input",
            s(&data),
            "--output",
            s(&model),
            "--estimator",
            est,
            "--rank",
            "2",
        ]);
        assert_eq!(out.status.code(), Some(0), "{est}: {}", stderr(&out));
        assert_eq!(load_model(&model).unwrap().estimator, est);
    }
    let model = path(&dir, "tyler.txt");
    let out = trex(&[
        "fit",
        "--input",
        s(&data),
        "--output",
        s(&model),
        "--estimator",
        "tyler",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(matches!(
        load_model(&model).unwrap().fitted,
        Fitted::Scatter(_)
    ));
}

#[test]
fn ragged_csv_is_a_parse_error_naming_the_row() {
    let dir = TempDir::new().unwrap();
    let data = path(&dir, "bad.csv");
    fs::write(&data, "a,b,c\n1,2,3\n4,5\n7,8,9\n").unwrap();
    let out = trex(&[
        "fit",
        "--input",
        s(&data),
        "--output",
        s(&path(&dir, "m.txt")),
        "--rank",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
}

#[test]
fn missing_rank_and_bad_flags_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    let data = generate(&dir, "gaussian", 6, 30, "data.csv");
    let model = path(&dir, "m.txt");
    assert_eq!(
        trex(&["fit", "--input", s(&data), "--output", s(&model)])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        trex(&[
            "fit",
            "--input",
            s(&data),
            "--output",
            s(&model),
            "--rank",
            "7"
        ])
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        trex(&[
            "fit",
            "--input",
            s(&data),
            "--output",
            s(&model),
            "--rank",
            "2",
            "--tol",
            "0"
        ])
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        trex(&[
            "fit",
            "--input",
            "/nonexistent.csv",
            "--output",
            s(&model),
            "--rank",
            "2"
        ])
        .status
        .code(),
        Some(2)
    );
    assert_eq!(trex(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn zero_sample_is_a_numerical_error() {
    let dir = TempDir::new().unwrap();
    let data = path(&dir, "zero.csv");
    fs::write(&data, "1,2\n0,0\n3,1\n").unwrap();
    let out = trex(&[
        "fit",
        "--input",
        s(&data),
        "--output",
        s(&path(&dir, "m.txt")),
        "--rank",
        "1",
    ]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn tyler_with_few_samples_warns_and_proceeds() {
    let dir = TempDir::new().unwrap();
    let data = generate(&dir, "gaussian", 10, 10, "data.csv");
    let model = path(&dir, "tyler.txt");
    let out = trex(&[
        "fit",
        "--input",
        s(&data),
        "--output",
        s(&model),
        "--estimator",
        "tyler",
        "--fixed-iters",
        "5",
    ]);
    let err = stderr(&out);
    assert!(err.contains("warning"), "{err}");
    assert!(matches!(out.status.code(), Some(0) | Some(3)), "{err}");
}

#[test]
fn bench_zero_reps_is_a_usage_error() {
    let out = trex(&["bench", "--reps", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("reps"));
}

#[test]
fn bench_writes_one_row_per_estimator() {
    let dir = TempDir::new().unwrap();
    let csv = path(&dir, "bench.csv");
    let out = trex(&[
        "bench",
        "--n",
        "12",
        "--m",
        "60,120",
        "--rank",
        "2",
        "--reps",
        "3",
        "--output",
        s(&csv),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let rows = read_bench_csv(&csv).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.failures == 0 && r.mean_mse >= 0.0));
    assert_eq!(rows[0].estimator, "trex");
    assert_eq!(rows[1].estimator, "gfa");

    let report = trex(&["report", "--input", s(&csv)]);
    assert_eq!(report.status.code(), Some(0));
    let table = String::from_utf8(report.stdout).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(table.contains("gaussian_n12_m120_r2"));
}

#[test]
fn tyler_compare_uses_square_sample_size() {
    let dir = TempDir::new().unwrap();
    let csv = path(&dir, "cmp.csv");
    let out = trex(&[
        "bench",
        "--scenario",
        "tyler-compare",
        "--n",
        "10",
        "--rank",
        "2",
        "--reps",
        "2",
        "--output",
        s(&csv),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let rows = read_bench_csv(&csv).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.estimator.as_str()).collect();
    assert_eq!(names, ["trex", "tyler"]);
    assert!(rows[0].scenario.contains("_m11_"));
}

fn subspace_files(dir: &TempDir) -> (PathBuf, PathBuf) {
    let train = path(dir, "train.csv");
    let test = path(dir, "test.csv");
    let out = trex(&[
        "generate",
        "--kind",
        "subspace",
        "--n",
        "30",
        "--m",
        "150",
        "--rank",
        "3",
        "--test-samples",
        "12",
        "--seed",
        "9",
        "--output",
        s(&train),
        "--test-output",
        s(&test),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    (train, test)
}

#[test]
fn subspace_writes_bases_and_out_of_sample_distances() {
    let dir = TempDir::new().unwrap();
    let (train, test) = subspace_files(&dir);
    let outdir = path(&dir, "out");
    let out = trex(&[
        "subspace",
        "--input",
        s(&train),
        "--test-input",
        s(&test),
        "--output",
        s(&outdir),
        "--rank",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for method in ["trex", "pca", "spca"] {
        let basis = read_samples(&outdir.join(format!("basis_{method}.csv"))).unwrap();
        assert_eq!((basis.len(), basis.dim()), (30, 3));
    }
    let text = fs::read_to_string(outdir.join("distances.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("trex,pca,spca"));
    assert_eq!(lines.count(), 12);
    assert_eq!(read_samples(&outdir.join("median.csv")).unwrap().dim(), 30);
}

#[test]
fn subspace_without_test_file_reports_in_sample_distances() {
    let dir = TempDir::new().unwrap();
    let (train, _) = subspace_files(&dir);
    let outdir = path(&dir, "out");
    let out = trex(&[
        "subspace",
        "--input",
        s(&train),
        "--output",
        s(&outdir),
        "--rank",
        "3",
        "--methods",
        "pca",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = fs::read_to_string(outdir.join("distances.csv")).unwrap();
    assert_eq!(text.lines().count(), 151);
    assert!(!outdir.join("basis_trex.csv").exists());
}

#[test]
fn subspace_rank_above_limit_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let data = path(&dir, "small.csv");
    fs::write(&data, "1,2,3\n4,5,7\n").unwrap();
    let out = trex(&[
        "subspace",
        "--input",
        s(&data),
        "--output",
        s(&path(&dir, "o")),
        "--rank",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let data = generate(&dir, "contaminated", 15, 80, "data.csv");
    let run = |tag: &str| {
        let model = path(&dir, &format!("model_{tag}.txt"));
        let bench = path(&dir, &format!("bench_{tag}.csv"));
        let fit = trex(&[
            "--threads",
            "1",
            "fit",
            "--input",
            s(&data),
            "--output",
            s(&model),
            "--rank",
            "3",
        ]);
        assert_eq!(fit.status.code(), Some(0));
        let b = trex(&[
            "--threads",
            "1",
            "bench",
            "--scenario",
            "student-t",
            "--n",
            "10",
            "--m",
            "50",
            "--rank",
            "2",
            "--reps",
            "3",
            "--no-timings",
            "--output",
            s(&bench),
        ]);
        assert_eq!(b.status.code(), Some(0));
        (fs::read(model).unwrap(), fs::read(bench).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn model_file_round_trips_exactly() {
    let dir = TempDir::new().unwrap();
    let file = path(&dir, "planted.txt");
    let model = planted_model(25, 4, 17).unwrap();
    let record = ModelRecord {
        estimator: "planted".into(),
        fitted: Fitted::Factor(model.clone()),
        iterations: 0,
        termination: Termination::ToleranceMet,
        objective_trace: vec![1.0 / 3.0, -2.5e-7],
    };
    save_model(&file, &record).unwrap();
    let back = load_model(&file).unwrap();
    let Fitted::Factor(loaded) = &back.fitted else {
        panic!("expected factor model")
    };
    let worst = (loaded.loadings() - model.loadings())
        .iter()
        .chain((loaded.diag() - model.diag()).iter())
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    assert!(worst <= 1e-15, "{worst}");
    assert_eq!(back, record);
}

#[test]
fn help_lists_defaults() {
    let out = trex(&["fit", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    let help = String::from_utf8(out.stdout).unwrap();
    for default in [
        "[default: 1e-6]",
        "[default: 100]",
        "[default: 50]",
        "[default: 1e-8]",
        "[default: auto]",
        "[default: trex]",
    ] {
        assert!(help.contains(default), "missing {default} in\n{help}");
    }
}
