use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vcboot::core::{simulate_dataset, LinearPredictor, Model, Theta};
use vcboot::io::write_dataset;

fn vcboot(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vcboot"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn value(report: &str, key: &str) -> String {
    report
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(" = ")))
        .unwrap_or_else(|| panic!("no `{key}` in report:\n{report}"))
        .to_string()
}

fn number(report: &str, key: &str) -> f64 {
    value(report, key).parse().expect("numeric value")
}

/// Straight-line data with random intercepts and slopes, `x = 1..5`.
fn line_data(dir: &Path, n: usize, lambda: [f64; 2], seed: u64) -> PathBuf {
    let model = Model::new(LinearPredictor::polynomial(1));
    let theta = Theta::diagonal(vec![1.0, 0.5], &lambda, 1.0).unwrap();
    let design: Vec<Vec<Vec<f64>>> = (0..n).map(|_| (1..=5).map(|x| vec![x as f64]).collect()).collect();
    let data = simulate_dataset(&model, &theta, &design, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let path = dir.join("data.csv");
    write_dataset(fs::File::create(&path).unwrap(), &data).unwrap();
    path
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

const LINE_MODEL: &str = "mean = polynomial\ndegree = 1\n";

#[test]
fn fit_single_individual() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "one.csv", "id,y,x1\na,1.0,1\na,2.1,2\na,2.9,3\na,4.2,4\n");
    write(dir.path(), "m.cfg", LINE_MODEL);
    let o = vcboot(&["fit", "--data", "one.csv", "--model", "m.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(number(&out, "full.loglik").is_finite());
    assert_eq!(value(&out, "N"), "1");
    assert!(out.contains("manifest.seed"));
}

#[test]
fn fit_nested_reports_both_fits() {
    let dir = tempfile::tempdir().unwrap();
    line_data(dir.path(), 15, [1.0, 0.3], 4);
    write(dir.path(), "m.cfg", LINE_MODEL);
    let o = vcboot(
        &[
            "fit",
            "--data",
            "data.csv",
            "--model",
            "m.cfg",
            "--tested-rows",
            "2",
            "--out",
            "fit.txt",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("fit.txt")).unwrap();
    assert!(number(&report, "full.loglik") >= number(&report, "null.loglik") - 1e-9);
    assert!(value(&report, "null.theta.lambda_diag").ends_with(", 0"));
    let manifest = fs::read_to_string(dir.path().join("fit.txt.manifest")).unwrap();
    assert!(manifest.contains("data.csv"));
}

#[test]
fn missing_column_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.csv", "id,response,x1\na,1,1\n");
    write(dir.path(), "m.cfg", LINE_MODEL);
    let o = vcboot(&["fit", "--data", "bad.csv", "--model", "m.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`y`"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    line_data(dir.path(), 3, [1.0, 0.3], 1);
    write(dir.path(), "m.cfg", "mean = polynomial\ndegre = 1\n");
    let o = vcboot(&["fit", "--data", "data.csv", "--model", "m.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("degre"), "{}", stderr(&o));
}

#[test]
fn non_finite_covariate_is_a_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("id,y,x1\n");
    for i in 0..6 {
        for t in [2, 6, 10, 14] {
            let x = if i == 3 && t == 10 {
                "NaN".to_string()
            } else {
                t.to_string()
            };
            csv.push_str(&format!(
                "{i},{},{x}\n",
                100.0 / (1.0 + (-(t as f64 - 8.0) / 3.0).exp())
            ));
        }
    }
    write(dir.path(), "nan.csv", &csv);
    write(dir.path(), "m.cfg", "mean = logistic\n");
    let o = vcboot(&["fit", "--data", "nan.csv", "--model", "m.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn large_effects_give_zero_pvalue() {
    let dir = tempfile::tempdir().unwrap();
    line_data(dir.path(), 20, [5.0, 5.0], 2);
    write(dir.path(), "m.cfg", LINE_MODEL);
    let o = vcboot(
        &[
            "test",
            "--data",
            "data.csv",
            "--model",
            "m.cfg",
            "--tested-rows",
            "1,2",
            "--B",
            "200",
            "--seed",
            "5",
            "--lrt-star",
            "star.csv",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let lrt_obs = number(&out, "lrt_obs");
    let star: Vec<f64> = fs::read_to_string(dir.path().join("star.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.parse().unwrap())
        .collect();
    assert_eq!(star.len(), 200);
    let max = star.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(max < lrt_obs, "max lrt* {max} vs lrt {lrt_obs}");
    assert_eq!(number(&out, "p_boot"), 0.0);
    assert_eq!(value(&out, "reject"), "true");
    assert!(dir.path().join("star.csv.manifest").exists());
}

#[test]
fn one_replicate_gives_zero_or_one() {
    let dir = tempfile::tempdir().unwrap();
    line_data(dir.path(), 10, [1.0, 0.0], 3);
    write(dir.path(), "m.cfg", LINE_MODEL);
    let o = vcboot(
        &[
            "test",
            "--data",
            "data.csv",
            "--model",
            "m.cfg",
            "--tested-rows",
            "2",
            "--B",
            "1",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let p = number(&stdout(&o), "p_boot");
    assert!(p == 0.0 || p == 1.0, "p_boot = {p}");
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    line_data(dir.path(), 12, [1.0, 0.2], 6);
    write(dir.path(), "m.cfg", LINE_MODEL);
    let run = |workers: &str, out: &str| {
        let o = vcboot(
            &[
                "test",
                "--data",
                "data.csv",
                "--model",
                "m.cfg",
                "--tested-rows",
                "2",
                "--B",
                "40",
                "--workers",
                workers,
                "--lrt-star",
                out,
            ],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        (value(&stdout(&o), "p_boot"), fs::read(dir.path().join(out)).unwrap())
    };
    let a = run("1", "a.csv");
    let b = run("2", "b.csv");
    let c = run("3", "c.csv");
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn sequential_plan_reports_three_tests() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(LinearPredictor::polynomial(2));
    let theta = Theta::diagonal(vec![1.0, 0.5, -0.1], &[1.0, 0.3, 0.0], 0.5).unwrap();
    let design: Vec<Vec<Vec<f64>>> = (0..15).map(|_| (1..=6).map(|x| vec![x as f64]).collect()).collect();
    let data = simulate_dataset(&model, &theta, &design, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    write_dataset(fs::File::create(dir.path().join("d.csv")).unwrap(), &data).unwrap();
    write(dir.path(), "m.cfg", "mean = polynomial\ndegree = 2\n");
    let o = vcboot(
        &[
            "test",
            "--data",
            "d.csv",
            "--model",
            "m.cfg",
            "--tested-rows",
            "2,3",
            "--B",
            "10",
            "--plan",
            "sequential",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    for key in [
        "T1.no_shrink.p_boot",
        "T2.shrink.p_boot",
        "T2.no_shrink.p_boot",
        "T3.shrink.p_boot",
        "T3.no_shrink.p_boot",
    ] {
        let p = number(&out, key);
        assert!((0.0..=1.0).contains(&p));
    }
    assert_eq!(value(&out, "T2.no_shrink.c_N"), "0");
}

#[test]
fn sequential_plan_needs_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    line_data(dir.path(), 5, [1.0, 0.3], 1);
    write(dir.path(), "m.cfg", LINE_MODEL);
    let o = vcboot(
        &[
            "test",
            "--data",
            "data.csv",
            "--model",
            "m.cfg",
            "--tested-rows",
            "2",
            "--plan",
            "sequential",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn simulate_m1_small() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "simulate", "m1", "--N", "20", "--K", "50", "--B", "100", "--out", "m1.csv",
    ];
    let o = vcboot(&args, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let first = fs::read(dir.path().join("m1.csv")).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().unwrap().clone();
    let k_col = headers.iter().position(|h| h == "k_effective").unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    // bootstrap and asymptotic at three levels
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| &r[k_col] == "50"));
    assert!(dir.path().join("m1.csv.manifest").exists());

    let o = vcboot(&args, dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read(dir.path().join("m1.csv")).unwrap(), first);
}

#[test]
fn simulate_m3_sweep_shape() {
    let dir = tempfile::tempdir().unwrap();
    let o = vcboot(
        &[
            "simulate",
            "m3",
            "--s",
            "0,2,4",
            "--c",
            "0,0.24,0.9",
            "--K",
            "2",
            "--B",
            "5",
            "--out",
            "m3.csv",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("m3.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 9, "{text}");
}

#[test]
fn simulate_from_scenario_file() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "s.cfg",
        "scenario = m1\nN = 10\nK = 4\nB = 5\nalpha = 0.05\nc = auto\n",
    );
    let o = vcboot(&["simulate", "--config", "s.cfg", "--out", "s.csv"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest = fs::read_to_string(dir.path().join("s.csv.manifest")).unwrap();
    assert!(manifest.contains("s.cfg"));
}

#[test]
fn unknown_scenario_lists_known_ids() {
    let dir = tempfile::tempdir().unwrap();
    let o = vcboot(&["simulate", "m9"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    for id in ["m1", "m2", "m3", "m4"] {
        assert!(err.contains(id), "{err}");
    }
}
