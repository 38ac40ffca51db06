//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use morlaif_core::config::ExperimentConfig;
use morlaif_core::experiment::{fit, simulate, Fitted, Simulated};
use morlaif_core::rng;
use morlaif_core::scalarization::RewardVector;

/// A simulated and fitted default-config run.
pub struct Fixture {
    pub cfg: ExperimentConfig,
    pub sim: Simulated,
    pub fitted: Fitted,
}

pub fn fixture(seed: u64) -> Fixture {
    let cfg = ExperimentConfig {
        seed,
        ..Default::default()
    };
    let sim = simulate(&cfg).expect("default config simulates");
    let fitted = fit(&cfg, &sim).expect("default config fits");
    Fixture { cfg, sim, fitted }
}

/// Standard-normal-ish reward rows sharing one principle list.
pub fn reward_rows(n_rows: usize, n_principles: usize, seed: u64) -> Vec<RewardVector> {
    use rand::Rng;
    let ids: Arc<[String]> = (0..n_principles).map(|i| format!("p{i}")).collect();
    let mut r = rng::stream(seed, "bench-rows", 0);
    (0..n_rows)
        .map(|_| {
            let v = (0..n_principles).map(|_| r.random_range(-3.0..3.0)).collect();
            RewardVector::new(ids.clone(), v).expect("finite rows")
        })
        .collect()
}
