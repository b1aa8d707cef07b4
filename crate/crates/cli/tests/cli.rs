use std::fmt::Write as _;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn spj(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spj"))
        .args(args)
        .current_dir(dir)
        .env_remove("SPJ_WORKERS")
        .output()
        .expect("spawn spj")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Deterministic pseudo-normal values (Box-Muller on splitmix64).
struct SplitMix(u64);

impl SplitMix {
    fn uniform(&mut self) -> f64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
        ((z >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }
    fn normal(&mut self) -> f64 {
        let (u, v) = (self.uniform(), self.uniform());
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    }
}

/// Writes `rows` CSV lines `y,x0..x{p-1}` with `y = Σ beta_k x_k + ε`;
/// predictor `k` is scaled by `k + 1` so that standardization matters.
fn write_csv(path: &Path, n: usize, beta: &[f64], seed: u64) -> Vec<String> {
    let p = beta.len();
    let mut rng = SplitMix(seed);
    let mut lines = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..p).map(|_| rng.normal()).collect();
        let y: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>() + rng.normal();
        let mut line = format!("{y}");
        for (k, v) in x.iter().enumerate() {
            write!(line, ",{}", v * (k + 1) as f64).unwrap();
        }
        lines.push(line);
    }
    let header: Vec<String> = std::iter::once("y".to_owned()).chain((0..p).map(|k| format!("x{k}"))).collect();
    std::fs::write(path, format!("{}\n{}\n", header.join(","), lines.join("\n"))).unwrap();
    lines
}

fn write_rows(path: &Path, header: &str, rows: &[String]) {
    std::fs::write(path, format!("{header}\n{}\n", rows.join("\n"))).unwrap();
}

fn max_rel(a: &Value, b: &Value) -> f64 {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            (x - y).abs() / x.abs().max(y.abs()).max(1e-300)
        }
        (Value::Array(x), Value::Array(y)) => {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(u, v)| max_rel(u, v)).fold(0.0, f64::max)
        }
        (Value::Object(x), Value::Object(y)) => x
            .iter()
            .filter(|(k, _)| y.contains_key(*k))
            .map(|(k, v)| max_rel(v, &y[k]))
            .fold(0.0, f64::max),
        _ => {
            assert_eq!(a, b);
            0.0
        }
    }
}

#[test]
fn sharded_statistics_reproduce_the_csv_fit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let beta = [1.5, 0.0, -1.0, 0.0, 0.0, 0.0, 0.8, 0.0];
    let rows = write_csv(&d.join("full.csv"), 240, &beta, 7);
    let header = std::fs::read_to_string(d.join("full.csv")).unwrap().lines().next().unwrap().to_owned();
    write_rows(&d.join("a.csv"), &header, &rows[..70]);
    write_rows(&d.join("b.csv"), &header, &rows[70..150]);
    write_rows(&d.join("c.csv"), &header, &rows[150..]);

    ok(&spj(&["fit", "--in", "full.csv", "--draws", "400", "--out-dir", "mono"], d));
    let mono = read_json(&d.join("mono/report.json"));
    let lambda = mono["lambda"]["lambda"].as_f64().unwrap().to_string();
    let lambda_sigma = mono["lambda"]["lambda_sigma"].as_f64().unwrap().to_string();

    for s in ["a", "b", "c"] {
        ok(&spj(&["shard-stats", "--in", &format!("{s}.csv"), "--out", &format!("{s}.spstats")], d));
    }
    ok(&spj(&["merge-stats", "--out", "ab.spstats", "a.spstats", "b.spstats"], d));
    ok(&spj(&["merge-stats", "--out", "all.spstats", "ab.spstats", "c.spstats"], d));
    ok(&spj(
        &[
            "fit", "--stats", "all.spstats", "--lambda", &lambda, "--lambda-sigma", &lambda_sigma, "--draws", "400",
            "--out-dir", "dist",
        ],
        d,
    ));
    let dist = read_json(&d.join("dist/report.json"));
    assert_eq!(dist["shard_count"], 3);
    assert_eq!(dist["selection"]["selected"], mono["selection"]["selected"]);
    for key in ["selection", "coordinates", "intervals", "ellipsoid", "variance"] {
        let r = max_rel(&mono[key], &dist[key]);
        assert!(r < 1e-9, "{key}: relative difference {r:e}");
    }
    for f in ["selection.csv", "posterior_summary.csv", "intervals.csv", "ellipsoid.json"] {
        assert!(d.join("dist").join(f).exists(), "missing {f}");
    }
}

#[test]
fn mismatched_shard_schema_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_csv(&d.join("a.csv"), 30, &[1.0, 0.0], 1);
    std::fs::write(d.join("b.csv"), "y,u,v\n1,2,3\n2,1,0\n0,1,1\n").unwrap();
    ok(&spj(&["shard-stats", "--in", "a.csv", "--out", "a.spstats"], d));
    ok(&spj(&["shard-stats", "--in", "b.csv", "--out", "b.spstats"], d));
    let out = spj(&["merge-stats", "--out", "m.spstats", "a.spstats", "b.spstats"], d);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("b.spstats") && err.contains("schema"), "{err}");
}

#[test]
fn single_predictor_fit_selects_it_and_covers_the_slope() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut rng = SplitMix(99);
    let mut text = String::from("y,x\n");
    for _ in 0..200 {
        let x = rng.normal();
        writeln!(text, "{},{}", 2.0 * x + rng.normal(), x).unwrap();
    }
    std::fs::write(d.join("toy.csv"), text).unwrap();
    ok(&spj(&["fit", "--in", "toy.csv", "--draws", "2000", "--out-dir", "out"], d));
    let rep = read_json(&d.join("out/report.json"));
    assert_eq!(rep["selection"]["selected"], serde_json::json!([0]));
    // the slope on the standardized column is 2 times the column scale
    let summary = std::fs::read_to_string(d.join("out/intervals.csv")).unwrap();
    let row: Vec<&str> = summary.lines().nth(1).unwrap().split(',').collect();
    let (lo, hi): (f64, f64) = (row[2].parse().unwrap(), row[3].parse().unwrap());
    let pairs: Vec<(f64, f64)> = std::fs::read_to_string(d.join("toy.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let mut it = l.split(',').map(|v| v.parse::<f64>().unwrap());
            (it.next().unwrap(), it.next().unwrap())
        })
        .collect();
    // closed-form no-intercept regression on the standardized column
    let n = pairs.len() as f64;
    let sxx: f64 = pairs.iter().map(|(_, x)| x * x).sum();
    let sxy: f64 = pairs.iter().map(|(y, x)| x * y).sum();
    let scale = (sxx / n).sqrt();
    let slope = sxy / sxx * scale;
    let rss: f64 = pairs.iter().map(|(y, x)| (y - sxy / sxx * x).powi(2)).sum();
    let half = 1.959964 * (rss / (n - 1.0) / n).sqrt();
    assert!(((lo + hi) / 2.0 - slope).abs() < 0.15 * half, "centre {} vs {slope}", (lo + hi) / 2.0);
    assert!(((hi - lo) / 2.0 / half - 1.0).abs() < 0.15, "half-width {} vs {half}", (hi - lo) / 2.0);
    let target = 2.0 * scale;
    assert!(lo <= target && target <= hi, "[{lo}, {hi}] misses {target}");
}

#[test]
fn simulate_is_byte_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let base = ["simulate", "--n", "120", "--p", "15", "--s0", "3", "--reps", "2", "--draws", "200", "--seed", "5"];
    let mut a: Vec<&str> = base.to_vec();
    a.extend(["--out-dir", "a", "--workers", "1"]);
    let mut b: Vec<&str> = base.to_vec();
    b.extend(["--out-dir", "b", "--workers", "3"]);
    ok(&spj(&a, d));
    ok(&spj(&b, d));
    for f in ["summary.csv", "replications.csv"] {
        assert_eq!(
            std::fs::read(d.join("a").join(f)).unwrap(),
            std::fs::read(d.join("b").join(f)).unwrap(),
            "{f} differs"
        );
    }
    let mut sa = read_json(&d.join("a/simulation.json"));
    let mut sb = read_json(&d.join("b/simulation.json"));
    sa["config"]["workers"] = Value::Null;
    sb["config"]["workers"] = Value::Null;
    assert_eq!(sa, sb);
}

#[test]
fn config_file_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_csv(&d.join("data.csv"), 80, &[1.0, 0.0, 0.0], 3);
    std::fs::write(
        d.join("run.json"),
        r#"{"mode": "fit", "draws": 150, "lambda": 0.2, "paths": {"out_dir": "from_file"}}"#,
    )
    .unwrap();
    ok(&spj(
        &["--config", "run.json", "fit", "--in", "data.csv", "--draws", "900", "--out-dir", "from_flag"],
        d,
    ));
    let rep = read_json(&d.join("from_file/report.json"));
    assert_eq!(rep["config"]["draws"], 150);
    assert_eq!(rep["config"]["lambda"], 0.2);
    assert!(!d.join("from_flag").exists());
}

#[test]
fn exit_codes_distinguish_config_and_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_csv(&d.join("data.csv"), 40, &[1.0, 0.0], 2);
    let code = |args: &[&str]| spj(args, d).status.code();

    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["frobnicate"]), Some(1));
    assert_eq!(code(&["fit", "--in", "data.csv", "--alpha", "1.5"]), Some(1));
    assert_eq!(code(&["fit", "--in", "data.csv", "--lambda", "abc"]), Some(1));
    assert_eq!(code(&["fit"]), Some(1));
    std::fs::write(d.join("typo.json"), r#"{"drawz": 3}"#).unwrap();
    assert_eq!(code(&["--config", "typo.json", "fit", "--in", "data.csv"]), Some(1));
    std::fs::write(d.join("other.json"), r#"{"mode": "simulate"}"#).unwrap();
    assert_eq!(code(&["--config", "other.json", "fit", "--in", "data.csv"]), Some(1));

    assert_eq!(code(&["fit", "--in", "missing.csv", "--lambda", "0.1"]), Some(2));
    std::fs::write(d.join("junk.spstats"), b"not a stats file at all, sorry").unwrap();
    assert_eq!(code(&["fit", "--stats", "junk.spstats", "--lambda", "0.1"]), Some(2));
    std::fs::write(d.join("bad.csv"), "y,x\n1,2\n3,oops\n").unwrap();
    assert_eq!(code(&["fit", "--in", "bad.csv", "--lambda", "0.1"]), Some(2));
}

#[test]
fn workers_env_var_is_read() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_csv(&d.join("data.csv"), 40, &[1.0, 0.0], 2);
    let out = Command::new(env!("CARGO_BIN_EXE_spj"))
        .args(["fit", "--in", "data.csv", "--lambda", "0.2", "--draws", "50", "--no-debias"])
        .current_dir(d)
        .env("SPJ_WORKERS", "2")
        .output()
        .unwrap();
    ok(&out);
    let rep: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rep["config"]["workers"], 2);
}

#[test]
fn debias_writes_and_reuses_the_nodewise_cache() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_csv(&d.join("data.csv"), 150, &[1.0, 0.0, -1.0, 0.0, 0.0], 4);
    let args = [
        "debias", "--in", "data.csv", "--lambda", "0.3", "--coords", "0,2", "--draws", "300", "--cache",
        "nw.spnode",
    ];
    let mut first: Vec<&str> = args.to_vec();
    first.extend(["--out-dir", "one", "--export-draws"]);
    ok(&spj(&first, d));
    assert!(d.join("nw.spnode").exists());
    let stamp = std::fs::metadata(d.join("nw.spnode")).unwrap().modified().unwrap();
    let mut second: Vec<&str> = args.to_vec();
    second.extend(["--out-dir", "two"]);
    ok(&spj(&second, d));
    assert_eq!(std::fs::metadata(d.join("nw.spnode")).unwrap().modified().unwrap(), stamp);
    assert_eq!(
        std::fs::read(d.join("one/intervals.csv")).unwrap(),
        std::fs::read(d.join("two/intervals.csv")).unwrap()
    );
    let draws = std::fs::read_to_string(d.join("one/debiased_draws.csv")).unwrap();
    assert_eq!(draws.lines().next().unwrap(), "draw,theta_0,theta_2");
    assert_eq!(draws.lines().count(), 301);

    // a cache from another schema is rejected
    write_csv(&d.join("other.csv"), 150, &[1.0, 0.0, -1.0, 0.0], 4);
    let out = spj(
        &["debias", "--in", "other.csv", "--lambda", "0.3", "--coords", "0", "--cache", "nw.spnode"],
        d,
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_command_reads_every_report_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&spj(
        &["simulate", "--n", "100", "--p", "10", "--s0", "2", "--reps", "2", "--draws", "150", "--out-dir", "sim"],
        d,
    ));
    let out = spj(&["report", "--in", "sim/simulation.json"], d);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("MCC"));

    ok(&spj(
        &["simulate", "--n", "200", "--p", "10", "--s0", "2", "--shards", "4", "--draws", "150", "--out-dir", "dist"],
        d,
    ));
    let dist = read_json(&d.join("dist/distributed.json"));
    assert!(dist["diffs"]["projected_mean"].as_f64().unwrap() < 1e-9);
    assert!(d.join("dist/shard_0003.spstats").exists());
    ok(&spj(&["report", "--in", "dist/distributed.json"], d));
    ok(&spj(&["report", "--in", "dist/report.json"], d));

    std::fs::write(d.join("x.json"), "{}").unwrap();
    assert_eq!(spj(&["report", "--in", "x.json"], d).status.code(), Some(2));
}

#[test]
fn exported_draws_have_one_row_per_draw() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_csv(&d.join("data.csv"), 60, &[1.0, 0.0, 0.0], 8);
    ok(&spj(
        &["fit", "--in", "data.csv", "--lambda", "0.2", "--draws", "25", "--export-draws", "--out-dir", "o"],
        d,
    ));
    let text = std::fs::read_to_string(d.join("o/draws.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "draw,sigma_star,theta_0,theta_1,theta_2");
    assert_eq!(lines.count(), 25);
    let sel = std::fs::read_to_string(d.join("o/selection.csv")).unwrap();
    assert!(sel.lines().nth(1).unwrap().starts_with("0,x0,"));
}
