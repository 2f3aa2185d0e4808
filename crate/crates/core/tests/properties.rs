use dcrr::estimators::{fit_dcrr, oracle_step, FitConfig};
use dcrr::rank_loss::DataBlock;
use dcrr::simlab::{make_scenario, ErrorLaw, ScenarioConfig};
use dcrr::transport::{Cluster, MasterPolicy};
use ndarray::{s, Array1};

fn scenario(error: ErrorLaw) -> Vec<DataBlock> {
    let cfg = ScenarioConfig {
        n: 60,
        m: 3,
        p: 12,
        rho: 0.5,
        beta_star: vec![3f64.sqrt(); 3],
        error,
        replicates: 1,
        seed: 99,
    };
    make_scenario(&cfg, 0).unwrap().shards
}

fn fit(shards: &[DataBlock], cfg: &FitConfig) -> Array1<f64> {
    let mut c = Cluster::in_process(shards, cfg.kernel, MasterPolicy::Largest).unwrap();
    fit_dcrr(&mut c, cfg).unwrap().beta
}

fn max_gap(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    (a - b).iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Drop the last `k` rows so the sites have distinct sizes and the master is fixed.
fn shrink(b: &DataBlock, k: usize) -> DataBlock {
    let n = b.n() - k;
    DataBlock::new(b.x().slice(s![..n, ..]).to_owned(), b.y().slice(s![..n]).to_owned()).unwrap()
}

#[test]
fn site_order_does_not_matter() {
    let raw = scenario(ErrorLaw::Normal);
    let shards: Vec<DataBlock> = raw.iter().enumerate().map(|(k, b)| shrink(b, 2 * k)).collect();
    let cfg = FitConfig { stages: 3, ..FitConfig::default() };
    let a = fit(&shards, &cfg);
    let permuted = vec![shards[2].clone(), shards[0].clone(), shards[1].clone()];
    let b = fit(&permuted, &cfg);
    assert!(max_gap(&a, &b) <= 1e-10, "{}", max_gap(&a, &b));
}

#[test]
fn shifting_y_does_not_matter() {
    let shards = scenario(ErrorLaw::ScaledT4);
    let shifted: Vec<DataBlock> = shards.iter().map(|b| DataBlock::new(b.x().clone(), b.y() + 5.0).unwrap()).collect();
    let cfg = FitConfig::default();
    let gap = max_gap(&fit(&shards, &cfg), &fit(&shifted, &cfg));
    assert!(gap <= 1e-10, "{gap}");
}

#[test]
fn scad_stage_equals_anchored_oracle() {
    let shards = scenario(ErrorLaw::Normal);
    let cfg = FitConfig { stages: 4, ..FitConfig::default() };
    let mut c = Cluster::in_process(&shards, cfg.kernel, MasterPolicy::Largest).unwrap();
    let f = fit_dcrr(&mut c, &cfg).unwrap();
    assert_eq!(f.support, vec![0, 1, 2]);
    let mut c = Cluster::in_process(&shards, cfg.kernel, MasterPolicy::Largest).unwrap();
    let ora = oracle_step(&mut c, f.stage_betas[2].view(), &[0, 1, 2], &cfg).unwrap();
    assert!(max_gap(&ora, &f.beta) <= 1e-5, "{}", max_gap(&ora, &f.beta));
    assert_eq!(c.stats().gradient_rounds, 1);
}

#[test]
fn oracle_step_rejects_bad_support() {
    let shards = scenario(ErrorLaw::Normal);
    let cfg = FitConfig::default();
    let mut c = Cluster::in_process(&shards, cfg.kernel, MasterPolicy::Largest).unwrap();
    let zero = Array1::zeros(12);
    assert!(oracle_step(&mut c, zero.view(), &[], &cfg).is_err());
    assert!(oracle_step(&mut c, zero.view(), &[12], &cfg).is_err());
}
