use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tiltflow::diagnostics::{autocorrelation, gelman_rubin, gelman_rubin_scalar, ChainEnsemble};

fn iid_chains(m: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..m).map(|_| (0..n).map(|_| StandardNormal.sample(&mut r)).collect()).collect()
}

#[test]
fn iid_chains_have_r_hat_near_one() {
    let chains = iid_chains(8, 10_000, 1);
    let g = gelman_rubin_scalar(&chains).unwrap();
    assert!(g.r_hat <= 1.01 && g.r_hat > 0.99, "{}", g.r_hat);
}

#[test]
fn thinning_scales_lags_by_stride() {
    let chains: Vec<Vec<Vec<f64>>> = iid_chains(3, 400, 2)
        .into_iter()
        .map(|c| c.into_iter().map(|v| vec![v]).collect())
        .collect();
    let e = ChainEnsemble::from_positions(chains, 0).unwrap();
    let thin = e.thin(4).unwrap();
    assert_eq!(thin.stride(), 4 * e.stride());
    let a = autocorrelation(&thin, 5).unwrap();
    assert_eq!(a.lags, vec![0, 4, 8, 12, 16, 20]);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn r_hat_is_invariant_to_chain_order(m in 2usize..6, n in 2usize..50, seed in any::<u64>(), rot in 0usize..6) {
        let mut chains = iid_chains(m, n, seed);
        let a = gelman_rubin_scalar(&chains).unwrap().r_hat;
        chains.rotate_left(rot % m);
        chains.reverse();
        let b = gelman_rubin_scalar(&chains).unwrap().r_hat;
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn r_hat_lower_bound(m in 2usize..6, n in 2usize..50, seed in any::<u64>()) {
        // Identical chains have zero between-chain variance, so R-hat = sqrt((n-1)/n) exactly,
        // and that is the smallest value any input can produce.
        let base = iid_chains(1, n, seed).remove(0);
        let same = vec![base; m];
        let g = gelman_rubin_scalar(&same).unwrap();
        let floor = ((n as f64 - 1.0) / n as f64).sqrt();
        prop_assert!((g.r_hat - floor).abs() <= 1e-12);
        let varied = gelman_rubin_scalar(&iid_chains(m, n, seed ^ 5)).unwrap();
        prop_assert!(varied.r_hat >= floor - 1e-12);
    }

    #[test]
    fn ensemble_r_hat_matches_scalar(seed in any::<u64>()) {
        let raw = iid_chains(4, 60, seed);
        let positions = raw.iter().map(|c| c.iter().map(|&v| vec![v, 2.0 * v + 1.0]).collect()).collect();
        let e = ChainEnsemble::from_positions(positions, 10).unwrap();
        let trimmed: Vec<Vec<f64>> = raw.iter().map(|c| c[10..].to_vec()).collect();
        let scalar = gelman_rubin_scalar(&trimmed).unwrap().r_hat;
        let report = gelman_rubin(&e).unwrap();
        for c in &report.coordinates {
            prop_assert!((c.r_hat - scalar).abs() <= 1e-12);
        }
    }
}
