use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn nmix(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmix"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("failed to launch nmix")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn data_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_owned).collect()
}

#[test]
fn simulate_writes_default_dataset() {
    let tmp = TempDir::new().unwrap();
    let out = nmix(tmp.path(), &["simulate", "--output-dir", "out"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let avg = data_lines(&tmp.path().join("out/sim_avg.csv"));
    assert_eq!(avg[0], "site,year,y1,y2,y3,x1,x2,x3,x1.p,x4.m");
    assert_eq!(avg.len() - 1, 72 * 9);
    let full = data_lines(&tmp.path().join("out/sim_full.csv"));
    assert_eq!(full[0], "site,year,y1,y2,y3,x1,x2,x3,x1.p,x4.m,x4_1,x4_2,x4_3");
    assert_eq!(full.len(), avg.len());
    let truth = data_lines(&tmp.path().join("out/sim_truth.csv"));
    assert_eq!(truth[0], "site,year,lambda,N");
    assert_eq!(truth.len(), avg.len());
}

#[test]
fn single_year_simulation_has_one_row_per_site() {
    let tmp = TempDir::new().unwrap();
    let out = nmix(tmp.path(), &["simulate", "--n-years", "1", "--output-dir", "."]);
    assert!(out.status.success(), "{}", stderr(&out));
    let lines = data_lines(&tmp.path().join("sim_avg.csv"));
    assert_eq!(lines.len() - 1, 72);
    assert!(lines[1..].iter().all(|l| l.split(',').nth(1) == Some("1")));
}

#[test]
fn same_seed_gives_identical_files() {
    let tmp = TempDir::new().unwrap();
    for dir in ["a", "b", "c"] {
        let seed = if dir == "c" { "99" } else { "7" };
        let out = nmix(tmp.path(), &["simulate", "--seed", seed, "--output-dir", dir]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let read = |d: &str| fs::read(tmp.path().join(d).join("sim_avg.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn fit_round_trips_through_the_written_dataset() {
    let tmp = TempDir::new().unwrap();
    let sim = nmix(tmp.path(), &["simulate", "--n-years", "2", "--output-dir", "."]);
    assert!(sim.status.success(), "{}", stderr(&sim));
    let fit = nmix(tmp.path(), &["fit", "--dataset", "sim_avg.csv", "--engine", "ml", "--output-dir", "."]);
    assert!(fit.status.success(), "{}", stderr(&fit));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("fit.json")).unwrap()).unwrap();
    assert_eq!(report["engine"], "ml");
    assert_eq!(report["n_rows"], 144);
    assert_eq!(report["converged"], true);
    assert_eq!(report["parameters"].as_array().unwrap().len(), 8);
}

#[test]
fn empty_dataset_is_rejected() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("empty.csv"), "site,year,y1,y2,y3\n").unwrap();
    let out = nmix(tmp.path(), &["fit", "--dataset", "empty.csv", "--abundance", "", "--detection", ""]);
    assert!(!out.status.success());
    assert!(!stderr(&out).is_empty());
    assert!(!tmp.path().join("fit.json").exists());
}

#[test]
fn missing_dataset_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let out = nmix(tmp.path(), &["fit", "--dataset", "nowhere.csv"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn malformed_count_reports_its_line() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("bad.csv"), "site,year,y1,y2,x1\n1,1,3,2,0.5\n2,1,4,two,0.1\n").unwrap();
    let out = nmix(tmp.path(), &["fit", "--dataset", "bad.csv", "--abundance", "x1", "--detection", "x1"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
}

#[test]
fn config_errors_are_usage_errors() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("run.cfg"), "# experiment\nfamily = nb\nsamples = many\n").unwrap();
    let out = nmix(tmp.path(), &["fit", "--config", "run.cfg"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));

    let out = nmix(tmp.path(), &["fit", "--set", "family=gaussian"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let out = nmix(tmp.path(), &["fit", "--set", "no_equals_sign"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let out = nmix(tmp.path(), &["fit", "--not-a-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn posterior_summaries_require_the_laplace_engine() {
    let tmp = TempDir::new().unwrap();
    let out = nmix(tmp.path(), &["lambda-fitted", "--engine", "ml", "--set", "n_years=1"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("laplace"), "{}", stderr(&out));
    assert!(!tmp.path().join("lambda_fitted.csv").exists());
}

#[test]
fn lambda_fitted_writes_one_row_per_site_year() {
    let tmp = TempDir::new().unwrap();
    let out = nmix(tmp.path(), &["lambda-fitted", "--set", "n_years=2", "--samples", "200"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let lines = data_lines(&tmp.path().join("lambda_fitted.csv"));
    assert_eq!(lines[0], "index,mean,sd,q025,median,q975");
    assert_eq!(lines.len() - 1, 144);
}

#[test]
fn posterior_n_rows_are_validated_and_normalised() {
    let tmp = TempDir::new().unwrap();
    let out = nmix(tmp.path(), &["posterior-n", "--set", "n_years=2", "--rows", "145"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("145"), "{}", stderr(&out));

    let out = nmix(tmp.path(), &["posterior-n", "--set", "n_years=2", "--rows", "1,5", "--samples", "100"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let lines = data_lines(&tmp.path().join("posterior_n.csv"));
    assert_eq!(lines[0], "row,site,year,N,probability");
    for row in ["1", "5"] {
        let total: f64 = lines[1..]
            .iter()
            .filter(|l| l.split(',').next() == Some(row))
            .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-9, "row {row}: {total}");
    }
}

#[test]
fn bias_experiment_writes_every_record() {
    let tmp = TempDir::new().unwrap();
    let out = nmix(
        tmp.path(),
        &["bias-experiment", "--runs", "2", "--set", "n_years=2", "--a4-min", "-2", "--a4-max", "2"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let lines = data_lines(&tmp.path().join("bias.csv"));
    assert_eq!(lines.len() - 1, 2 * 2 * 8);
    assert!(lines[0].starts_with("run,alpha4,model,parameter"));
}
