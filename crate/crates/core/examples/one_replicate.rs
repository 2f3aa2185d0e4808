//! Runs a single desk-scale replicate and prints per-method metrics.
//!
//! `cargo run --release -p dcrr --example one_replicate -- [normal|t4|cauchy] [M] [replicate]`

use dcrr::simlab::{run_replicate, ErrorLaw, ExperimentConfig, Method, ScenarioConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let error = match args.get(1).map(String::as_str) {
        Some("t4") => ErrorLaw::ScaledT4,
        Some("cauchy") => ErrorLaw::Cauchy,
        _ => ErrorLaw::Normal,
    };
    let m = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let rep = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = ExperimentConfig {
        scenario: ScenarioConfig {
            n: 100,
            m,
            p: 200,
            rho: 0.5,
            beta_star: vec![3f64.sqrt(); 3],
            error,
            replicates: 1,
            seed: 2024,
        },
        methods: Method::table_menu(),
        fit: Default::default(),
        backend: dcrr::transport::Backend::InProcess,
    };
    let start = std::time::Instant::now();
    let rows = run_replicate(&cfg, rep).expect("replicate runs");
    for r in rows {
        match r.row {
            Some(m) => println!(
                "{:<18} l2 {:.4}  fp {}  fn {}  rounds {}  {:.2}s",
                r.method.to_string(),
                m.metrics.l2_err,
                m.metrics.fp,
                m.metrics.fn_,
                m.comm_rounds,
                m.wall_time
            ),
            None => println!("{:<18} failed: {}", r.method.to_string(), r.error.unwrap_or_default()),
        }
    }
    println!("total {:.2}s", start.elapsed().as_secs_f64());
}
