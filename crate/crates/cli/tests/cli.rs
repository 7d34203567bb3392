//! End-to-end behavior of the command-line interface: exit codes, output
//! shapes, reproducibility, and input immutability.

use std::path::Path;
use std::process::Command;

use rsl_cli::run;

fn rsl(args: &[&str]) -> i32 {
    let argv: Vec<String> =
        std::iter::once("rsl".to_string()).chain(args.iter().map(|s| s.to_string())).collect();
    run(&argv)
}

fn write_toy_dataset(path: &Path, n: usize, sites: &[(&str, f64, f64)]) {
    let mut csv = String::from("site_id,lat,lon,age,age_2sd,rsl,rsl_2sd,kind,core_id\n");
    for i in 0..n {
        let (id, lat, lon) = sites[i % sites.len()];
        let t = 100.0 * i as f64;
        csv.push_str(&format!(
            "{id},{lat},{lon},{t},20,{},0.1,CoreSample,\n",
            -1.0 + 0.001 * t + 0.01 * (i as f64).sin()
        ));
    }
    std::fs::write(path, csv).unwrap();
}

#[test]
fn fit_gp_smoke_on_toy_file() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("toy.csv");
    write_toy_dataset(&input, 3, &[("a", 40.0, -70.0)]);
    let out = dir.path().join("out");
    let code = rsl(&[
        "fit-gp",
        "--input",
        input.to_str().unwrap(),
        "--grid",
        "0:200:20",
        "--seed",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let level = std::fs::read_to_string(out.join("level.csv")).unwrap();
    assert_eq!(level.lines().count(), 12, "header plus the 11 requested grid rows");
    assert!(out.join("rate.csv").exists());
    assert!(out.join("run-manifest.txt").exists());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(rsl(&["no-such-subcommand"]), 2);
    assert_eq!(rsl(&["fit-gp", "--no-such-flag"]), 2);
    // stochastic subcommand without a seed
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("toy.csv");
    write_toy_dataset(&input, 5, &[("a", 40.0, -70.0)]);
    assert_eq!(
        rsl(&["fit-gp", "--input", input.to_str().unwrap(), "--grid", "0:100:10"]),
        2
    );
    // malformed grid
    assert_eq!(
        rsl(&[
            "fit-gp",
            "--input",
            input.to_str().unwrap(),
            "--grid",
            "0:100:0",
            "--seed",
            "1"
        ]),
        2
    );
    assert_eq!(rsl(&["fit-linear"]), 2, "missing --input");
}

#[test]
fn computation_errors_exit_1() {
    // the temporal GP refuses multi-site input
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("multi.csv");
    write_toy_dataset(&input, 10, &[("a", 40.0, -70.0), ("b", 42.0, -71.0)]);
    let out = dir.path().join("out");
    let code = rsl(&[
        "fit-gp",
        "--input",
        input.to_str().unwrap(),
        "--grid",
        "0:900:100",
        "--seed",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
}

#[test]
fn same_seed_reproduces_outputs_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.cfg");
    std::fs::write(
        &cfg,
        "rates = 0.001\nsites = 39:-74\nt_end = 2000\nn = 40\nrsl_sd = 0.05\n\
         kernel = matern(s2=0.04, l=800, nu=1.5)\n",
    )
    .unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let code = rsl(&[
            "synth",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
    }
    for name in ["dataset.csv", "truth.csv"] {
        let x = std::fs::read(a.join(name)).unwrap();
        let y = std::fs::read(b.join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between identical runs");
    }
}

#[test]
fn inputs_are_never_mutated() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("toy.csv");
    write_toy_dataset(&input, 20, &[("a", 40.0, -70.0)]);
    let before = std::fs::read(&input).unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        rsl(&[
            "diagnose",
            "--input",
            input.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    assert_eq!(std::fs::read(&input).unwrap(), before);
}

#[test]
fn ingest_writes_canonical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("toy.csv");
    write_toy_dataset(&input, 6, &[("a", 40.0, -70.0)]);
    let out = dir.path().join("out");
    assert_eq!(
        rsl(&["ingest", "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap()]),
        0
    );
    let text = std::fs::read_to_string(out.join("dataset.csv")).unwrap();
    assert!(text.contains("site_id,lat,lon,age"));
    assert_eq!(text.lines().count(), 8, "unit comment, header, six rows");
}

#[test]
fn binary_reports_help_and_usage_codes() {
    let bin = env!("CARGO_BIN_EXE_rsl");
    let ok = Command::new(bin).arg("--help").output().unwrap();
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).contains("fit-gp"));
    let bad = Command::new(bin).arg("--definitely-not-a-flag").output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
