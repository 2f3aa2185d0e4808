use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output};
use std::time::{Duration, Instant};

use dcrr::estimators::{fit_crr_centralized, fit_dcrr, FitConfig};
use dcrr::rank_loss::DataBlock;
use dcrr::simlab::{make_scenario, ExperimentConfig};
use dcrr::transport::{Cluster, MasterPolicy};
use serde_json::Value;

fn dcrr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcrr")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn beta_of(v: &Value) -> Vec<f64> {
    v["beta"].as_array().unwrap().iter().map(|b| b.as_f64().unwrap()).collect()
}

fn smoke_config() -> ExperimentConfig {
    serde_json::from_str(include_str!("../presets/smoke.json")).unwrap()
}

fn export(dir: &Path, config: &Path) {
    let out = dcrr(&["export", "--config", path(config), "--out", path(dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string(cfg).unwrap()).unwrap();
    p
}

/// In-memory version of `dcrr fit`: center through the cluster, then fit.
fn in_memory_fit(shards: &[DataBlock]) -> Vec<f64> {
    let cfg = FitConfig::default();
    let mut c = Cluster::in_process(shards, cfg.kernel, MasterPolicy::Largest).unwrap();
    c.center().unwrap();
    fit_dcrr(&mut c, &cfg).unwrap().beta.to_vec()
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn simulate_smoke_is_fast_and_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = dcrr(&["simulate", "--preset", "smoke", "--replicates", "1", "--out", path(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(start.elapsed() < Duration::from_secs(5));
    let csv = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("method,metric,mean,se,replicates"));
    assert!(header.contains("seed") && header.contains("config_hash"));
    let report = read_json(&dir.path().join("report.json"));
    assert_eq!(report["seed"], 7);
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
    // one row per method and metric
    assert_eq!(csv.lines().count(), 1 + 10 * 6);
}

#[test]
fn simulate_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = dcrr(&["simulate", "--preset", "smoke", "--out", path(d.path())]);
        assert!(out.status.success());
    }
    for f in ["summary.csv", "report.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_field_exits_2_with_the_field_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"scenario": {"m": 2, "p": 5, "error": "Normal"}}"#).unwrap();
    let out = dcrr(&["simulate", "--config", path(&cfg), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`n`"), "{err}");
}

#[test]
fn unknown_preset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dcrr(&["simulate", "--preset", "table9", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fit_matches_in_memory_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let cfg_path = write_config(dir.path(), "exp.json", &cfg);
    let data = dir.path().join("sites");
    export(&data, &cfg_path);
    let out_dir = dir.path().join("out");
    let out = dcrr(&["fit", "--data", path(&data), "--out", path(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fit = read_json(&out_dir.join("fit.json"));

    let sc = make_scenario(&cfg.scenario, 0).unwrap();
    let expected = in_memory_fit(&sc.shards);
    assert!(max_gap(&beta_of(&fit), &expected) <= 1e-12);
    assert_eq!(fit["sites"].as_array().unwrap().len(), 3);
    assert_eq!(fit["comm_total"]["other_rounds"], 2, "sums and centering rounds");
    assert!(fit["config_hash"].is_string() && fit["seed"].is_u64());
}

#[test]
fn one_site_fit_matches_centralized() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config();
    cfg.scenario.m = 1;
    cfg.scenario.n = 90;
    let cfg_path = write_config(dir.path(), "exp.json", &cfg);
    let data = dir.path().join("sites");
    export(&data, &cfg_path);
    let out_dir = dir.path().join("out");
    let out = dcrr(&["fit", "--data", path(&data), "--out", path(&out_dir)]);
    assert!(out.status.success());
    let got = beta_of(&read_json(&out_dir.join("fit.json")));

    let sc = make_scenario(&cfg.scenario, 0).unwrap();
    let pooled = &sc.pooled;
    let (sx, sy) = pooled.sums();
    let n = pooled.n() as f64;
    let centered = pooled.centered((sx / n).view(), sy / n).unwrap();
    let expected = fit_crr_centralized(&centered, &FitConfig::default()).unwrap().beta.to_vec();
    assert!(max_gap(&got, &expected) <= 1e-12);
}

#[test]
fn single_row_site_is_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "exp.json", &smoke_config());
    let data = dir.path().join("sites");
    export(&data, &cfg_path);
    let site0 = fs::read_to_string(data.join("site_000.csv")).unwrap();
    let mut lines = site0.lines();
    fs::write(data.join("site_zzz.csv"), format!("{}\n{}\n", lines.next().unwrap(), lines.next().unwrap())).unwrap();
    let out_dir = dir.path().join("out");
    let out = dcrr(&["fit", "--data", path(&data), "--out", path(&out_dir)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dropping site"));
    let fit = read_json(&out_dir.join("fit.json"));
    assert_eq!(fit["dropped_sites"].as_array().unwrap().len(), 1);
    assert_eq!(fit["sites"].as_array().unwrap().len(), 3);
}

#[test]
fn bad_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("a");
    fs::create_dir(&data).unwrap();
    fs::write(data.join("s1.csv"), "x1,x2,y\n1,2,3\n4,5,6\n").unwrap();
    fs::write(data.join("s2.csv"), "x1,x3,y\n1,2,3\n4,5,6\n").unwrap();
    let out = dcrr(&["fit", "--data", path(&data), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("header"));

    fs::write(data.join("s2.csv"), "x1,x2,y\n1,2,3\n4,abc,6\n").unwrap();
    let out = dcrr(&["fit", "--data", path(&data), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("column 2"), "{err}");

    fs::write(data.join("s2.csv"), "x1,x2,target\n1,2,3\n4,5,6\n").unwrap();
    let out = dcrr(&["fit", "--data", path(&data), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn socket_fit_without_addresses_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dcrr(&["fit", "--data", path(dir.path()), "--backend", "socket", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

fn bench(cfg: &ExperimentConfig, dir: &Path, name: &str) -> Value {
    let cfg_path = write_config(dir, &format!("{name}.json"), cfg);
    let out_dir = dir.join(name);
    let out = dcrr(&["bench", "--config", path(&cfg_path), "--out", path(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    read_json(&out_dir.join("bench.json"))
}

/// Bytes sent per round, from the totals of the in-process run.
fn per_round(v: &Value) -> u64 {
    let total = &v["runs"][0]["total"];
    total["bytes_down"].as_u64().unwrap() / total["rounds"].as_u64().unwrap()
}

#[test]
fn bench_backends_agree_and_bytes_scale() {
    let dir = tempfile::tempdir().unwrap();
    let base = smoke_config();
    let v = bench(&base, dir.path(), "base");
    assert_eq!(v["identical_beta"], true);
    assert_eq!(v["identical_comm"], true);
    let total = &v["runs"][0]["total"];
    let rounds = total["rounds"].as_u64().unwrap();
    assert_eq!(total["bytes_down"].as_u64().unwrap(), rounds * 3 * (14 + 8 * 10));

    let mut wide = base.clone();
    wide.scenario.p = 20;
    let w = bench(&wide, dir.path(), "wide");
    assert_eq!(per_round(&w) - 3 * 14, 2 * (per_round(&v) - 3 * 14));

    let mut more = base.clone();
    more.scenario.m = 6;
    let m = bench(&more, dir.path(), "more");
    assert_eq!(per_round(&m), 2 * per_round(&v));
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn remote_sites_match_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "exp.json", &smoke_config());
    let data = dir.path().join("sites");
    export(&data, &cfg_path);

    let mut servers = Vec::new();
    let mut addresses = Vec::new();
    for k in 0..3 {
        let addr = format!("127.0.0.1:{}", free_port());
        let child = Command::new(env!("CARGO_BIN_EXE_dcrr"))
            .args(["serve", "--data", path(&data.join(format!("site_{k:03}.csv"))), "--listen", &addr])
            .args(["--site-id", &k.to_string()])
            .spawn()
            .unwrap();
        servers.push(Server(child));
        addresses.push(addr);
    }
    // wait for the listeners
    for a in &addresses {
        let start = Instant::now();
        while std::net::TcpStream::connect(a).is_err() {
            assert!(start.elapsed() < Duration::from_secs(10), "server {a} did not start");
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    let remote_out = dir.path().join("remote");
    let out = dcrr(&[
        "fit",
        "--backend",
        "socket",
        "--addresses",
        &addresses.join(","),
        "--data",
        path(&data.join("site_000.csv")),
        "--out",
        path(&remote_out),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let local_out = dir.path().join("local");
    assert!(dcrr(&["fit", "--data", path(&data), "--out", path(&local_out)]).status.success());

    let remote = read_json(&remote_out.join("fit.json"));
    let local = read_json(&local_out.join("fit.json"));
    assert_eq!(beta_of(&remote), beta_of(&local));
    assert_eq!(remote["comm_total"], local["comm_total"]);
}
