mod common;

use std::collections::BTreeMap;

use common::ks::{ks_p_value, ks_uniform, marginals};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use setcomp_core::search::{sample_hypers, SamplerConfig, SearchConfig};

#[test]
fn ks_helper_accepts_uniform_and_rejects_skewed() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let u: Vec<f64> = (0..20_000).map(|_| rng.random::<f64>()).collect();
    assert!(ks_uniform(u.clone()).1 > 0.001);
    let skewed: Vec<f64> = u.iter().map(|x| x * x).collect();
    assert!(ks_uniform(skewed).1 < 1e-6);
    assert!((ks_p_value(0.0, 100) - 1.0).abs() < 1e-12);
}

#[test]
fn marginals_match_their_distributions() {
    let cfg = SamplerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(7);
    let mut jitter = || jitter_rng.random::<f64>();
    let mut by_name: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for _ in 0..20_000 {
        for (name, u) in marginals(&sample_hypers(&cfg, &mut rng), &mut jitter) {
            by_name.entry(name).or_default().push(u);
        }
    }
    for (name, u) in by_name {
        let (d, p) = ks_uniform(u);
        assert!(p > 0.001, "{name}: D = {d}, p = {p}");
    }
}

#[test]
fn ensemble_members_share_the_architecture() {
    let cfg = SearchConfig { global_seed: 5, ..Default::default() };
    let a = cfg.hypers(3, 0);
    let b = cfg.hypers(3, 1);
    assert_eq!(a.arch, b.arch);
    assert_ne!(a.member, b.member);
    assert_ne!(a.seed, b.seed);
    assert_eq!(cfg.hypers(3, 1), b);
}
