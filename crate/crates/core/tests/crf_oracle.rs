//! CRF inference against exhaustive enumeration of labellings.

mod oracles;

use evmfunc::model::crf;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_enumeration_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc4f);
    for i in 0..300 {
        let n = rng.gen_range(1..=10);
        let scale = if i % 3 == 0 { 6.0 } else { 2.0 };
        let em: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(-scale..scale), rng.gen_range(-scale..scale)]).collect();
        let tr = [[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)], [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]];
        let b = oracles::crf_brute(&em, &tr);
        let y: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let want_nll = b.log_z - oracles::crf_path_score(&em, &tr, &y);
        assert!((crf::nll(&em, &tr, &y) - want_nll).abs() < 1e-8, "case {i}");
        assert!((crf::lattice(&em, &tr).log_z - b.log_z).abs() < 1e-8);
        for (m, w) in crf::marginals(&em, &tr).iter().zip(&b.marginals) {
            assert!((m - w).abs() < 1e-8, "case {i}");
        }
        assert_eq!(crf::viterbi(&em, &tr), b.best, "case {i}");
    }
}

#[test]
fn nll_gradient_is_marginal_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let n = rng.gen_range(1..=8);
        let em: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
        let tr = [[0.3, -0.7], [1.1, 0.2]];
        let y: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let (_, d_em, _) = crf::nll_grad(&em, &tr, &y);
        let b = oracles::crf_brute(&em, &tr);
        for k in 0..n {
            let gold = if y[k] == 1 { 1.0 } else { 0.0 };
            assert!((d_em[k][1] - (b.marginals[k] - gold)).abs() < 1e-9);
            assert!((d_em[k][0] + d_em[k][1]).abs() < 1e-9);
        }
    }
}
