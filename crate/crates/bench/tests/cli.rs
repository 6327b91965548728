use std::path::Path;
use std::process::{Command, Output};

use threesided_bench::experiments::{MIN_PROB_COLUMNS, SCALING_COLUMNS};
use threesided_bench::workload::RUN_COLUMNS;

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bench"))
        .args(args)
        .output()
        .expect("bench runs")
}

fn run_to(path: &Path, seed: &str) {
    let out = bench(&[
        "run",
        "--structure",
        "pst",
        "--n",
        "1024",
        "--ops",
        "1000",
        "--mix",
        "40:30:30",
        "--seed",
        seed,
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn run_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        dir.path().join("a.csv"),
        dir.path().join("b.csv"),
        dir.path().join("c.csv"),
    );
    run_to(&a, "42");
    run_to(&b, "42");
    run_to(&c, "43");
    let (a, b, c) = (
        std::fs::read(a).unwrap(),
        std::fs::read(b).unwrap(),
        std::fs::read(c).unwrap(),
    );
    assert_eq!(a, b);
    assert_ne!(a, c);
    let text = String::from_utf8(a).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), RUN_COLUMNS.join(","));
    assert_eq!(lines.count(), 10);
}

#[test]
fn ext_run_reports_io() {
    let out = bench(&[
        "run",
        "--structure",
        "ext_wb",
        "--n",
        "500",
        "--ops",
        "200",
        "--block-size",
        "4",
        "--audit-every",
        "20",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let reads = RUN_COLUMNS.iter().position(|c| *c == "io_reads").unwrap();
    let last = text.lines().last().unwrap();
    let v: u64 = last.split(',').nth(reads).unwrap().parse().unwrap();
    assert!(v > 0);
}

#[test]
fn experiments_write_their_headers() {
    let out = bench(&[
        "exp",
        "min-prob",
        "--n",
        "4",
        "--trials",
        "1000",
        "--dist",
        "powerlaw:1,2",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next().unwrap(), MIN_PROB_COLUMNS.join(","));
    assert_eq!(text.lines().count(), 2);

    let out = bench(&[
        "exp",
        "scaling",
        "--structure",
        "wbpst",
        "--sizes",
        "256,512",
        "--queries",
        "20",
        "--check",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next().unwrap(), SCALING_COLUMNS.join(","));
    assert_eq!(text.lines().count(), 1 + 2 * 3);
}

#[test]
fn bad_arguments_are_rejected() {
    for args in [
        &["run", "--structure", "splay", "--n", "10", "--ops", "10"][..],
        &[
            "run",
            "--structure",
            "pst",
            "--n",
            "10",
            "--ops",
            "10",
            "--mix",
            "50:50:50",
        ],
        &[
            "run",
            "--structure",
            "pst",
            "--n",
            "10",
            "--ops",
            "10",
            "--dist-x",
            "zipf:0,1",
        ],
        &["exp", "min-prob", "--n", "3", "--dist", "gauss:0,1"],
    ] {
        let out = bench(args);
        assert!(!out.status.success(), "{args:?} accepted");
        assert!(!out.stderr.is_empty());
    }
}
