// The loss formulas are checked against the brute-force reference
// implementations in `common` on large batches of random grids.

mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trap_lab::attack::{
    aggregate, magnitude_gate_loss, regularizers, sign_gate_loss, tail_mask, tail_score,
    AggregatorMode, PatchMode, PatchSpec,
};
use trap_lab::diffmath::Array;

const GRIDS: usize = 1000;
const TOL: f64 = 1e-12;

fn random_grid(rng: &mut ChaCha8Rng) -> Array {
    let b = rng.gen_range(1..=8);
    let k = rng.gen_range(1..=8);
    let data = (0..b * k).map(|_| rng.gen_range(-5.0..5.0)).collect();
    Array::from_vec(vec![b, k], data).unwrap()
}

#[test]
fn tail_mask_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..GRIDS {
        let grid = random_grid(&mut rng);
        // occasionally inject ties so the tie rule is exercised
        let grid = if rng.gen_bool(0.3) {
            let mut d = grid.data().to_vec();
            let j = rng.gen_range(0..d.len());
            let i = rng.gen_range(0..d.len());
            d[j] = d[i];
            Array::from_vec(grid.shape().to_vec(), d).unwrap()
        } else {
            grid
        };
        let q = rng.gen_range(0.01..=1.0);
        let got = tail_mask(&grid, q);
        let want = oracle_tail_mask(&grid, q);
        for bi in 0..grid.shape()[0] {
            for ki in 0..grid.shape()[1] {
                assert_eq!(got.at2(bi, ki), want[bi][ki], "b={bi} k={ki} q={q}");
            }
        }
    }
}

#[test]
fn tail_score_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..GRIDS {
        let k = rng.gen_range(1..=8);
        let dj: Vec<f64> = (0..k).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mask: Vec<f64> = (0..k)
            .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        let got = tail_score(&dj, &mask, 1e-8);
        let want = oracle_tail_score(&dj, &mask, 1e-8);
        assert!((got - want).abs() <= TOL, "{got} vs {want}");
    }
}

#[test]
fn aggregate_matches_oracle_in_every_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let modes = [
        AggregatorMode::SoftHardest,
        AggregatorMode::SoftminLiteral,
        AggregatorMode::Mean,
        AggregatorMode::Max,
    ];
    for _ in 0..GRIDS {
        let n = rng.gen_range(1..=8);
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let tau = 10f64.powf(rng.gen_range(-2.0..2.0));
        for mode in modes {
            let got = aggregate(&s, tau, mode);
            let want = oracle_aggregate(&s, tau, mode);
            assert!(
                (got - want).abs() <= TOL,
                "{mode:?} tau={tau}: {got} vs {want}"
            );
        }
    }
}

#[test]
fn gate_losses_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..GRIDS {
        let dj = random_grid(&mut rng);
        let beta = rng.gen_range(0.0..2.0);
        let got_s = sign_gate_loss(&dj);
        let want_s = oracle_sign_gate(&dj);
        assert!((got_s - want_s).abs() <= TOL);
        let got_m = magnitude_gate_loss(&dj, beta);
        let want_m = oracle_magnitude_gate(&dj, beta);
        assert!((got_m - want_m).abs() <= TOL);
    }
}

#[test]
fn regularizers_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..GRIDS {
        let h = rng.gen_range(1..=8);
        let w = rng.gen_range(1..=8);
        let mut patch = PatchSpec::new((0, 0), (h, w), rng.gen_range(0.01..1.0), PatchMode::Replace)
            .unwrap();
        let rho: Vec<f64> = (0..h * w * 3).map(|_| rng.gen_range(-30.0..30.0)).collect();
        patch.rho = Array::from_vec(vec![h, w, 3], rho).unwrap();
        let (got_tv, got_l2) = regularizers(&patch);
        let (want_tv, want_l2) = oracle_regularizers(&patch);
        assert!((got_tv - want_tv).abs() <= TOL, "{got_tv} vs {want_tv}");
        assert!((got_l2 - want_l2).abs() <= TOL, "{got_l2} vs {want_l2}");
    }
}
