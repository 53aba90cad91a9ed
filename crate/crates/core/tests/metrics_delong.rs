//! Monte Carlo validation of the DeLong variance and confidence interval on
//! binormal data with a known AUC of 0.75.

use pfoa_core::metrics::{auc, delong_ci, delong_variance, ScoredSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Mean shift giving `AUC = Phi(delta / sqrt 2) = 0.75`.
fn binormal_shift() -> f64 {
    // Phi^{-1}(0.75)
    std::f64::consts::SQRT_2 * 0.674_489_750_196_081_7
}

fn simulate(rng: &mut ChaCha8Rng, n_per_class: usize) -> ScoredSet {
    let d = binormal_shift();
    let mut scores = Vec::with_capacity(2 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for _ in 0..n_per_class {
        let z: f64 = StandardNormal.sample(rng);
        scores.push(z + d);
        labels.push(1);
    }
    for _ in 0..n_per_class {
        let z: f64 = StandardNormal.sample(rng);
        scores.push(z);
        labels.push(0);
    }
    ScoredSet::new(scores, labels).unwrap()
}

#[test]
fn delong_variance_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let sims = 2000;
    let mut aucs = Vec::with_capacity(sims);
    let mut vars = Vec::with_capacity(sims);
    for _ in 0..sims {
        let s = simulate(&mut rng, 100);
        let (a, v) = delong_variance(&s).unwrap();
        assert_eq!(a, auc(&s).unwrap());
        aucs.push(a);
        vars.push(v);
    }
    let mean = aucs.iter().sum::<f64>() / sims as f64;
    let mc_var = aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (sims - 1) as f64;
    let delong_mean = vars.iter().sum::<f64>() / sims as f64;
    assert!((mean - 0.75).abs() < 0.005, "mean AUC {mean}");
    let ratio = delong_mean / mc_var;
    assert!((ratio - 1.0).abs() < 0.10, "DeLong {delong_mean:.3e} vs MC {mc_var:.3e}");
}

#[test]
fn ci_coverage_is_nominal() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let trials = 1000;
    let covered = (0..trials)
        .filter(|_| {
            let (lo, hi) = delong_ci(&simulate(&mut rng, 100), 0.95).unwrap();
            lo <= 0.75 && 0.75 <= hi
        })
        .count();
    let rate = covered as f64 / trials as f64;
    assert!((0.93..=0.97).contains(&rate), "coverage {rate}");
}

#[test]
fn doubling_n_shrinks_width_by_sqrt_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let width = |rng: &mut ChaCha8Rng, n: usize| -> f64 {
        (0..200)
            .map(|_| {
                let (lo, hi) = delong_ci(&simulate(rng, n), 0.95).unwrap();
                hi - lo
            })
            .sum::<f64>()
            / 200.0
    };
    let w1 = width(&mut rng, 100);
    let w2 = width(&mut rng, 200);
    let ratio = w1 / w2;
    assert!((ratio / std::f64::consts::SQRT_2 - 1.0).abs() < 0.15, "ratio {ratio}");
}

#[test]
fn random_scores_give_chance_auc_and_prevalence_ap() {
    use pfoa_core::metrics::{average_precision, roc_points, trapezoid_auc};
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let scores: Vec<f64> = (0..1000).map(|_| rng.random()).collect();
    let labels: Vec<u8> = (0..1000).map(|_| u8::from(rng.random_bool(0.5))).collect();
    let s = ScoredSet::new(scores, labels).unwrap();
    let a = trapezoid_auc(&roc_points(&s).unwrap());
    assert!((0.45..=0.55).contains(&a), "{a}");

    let scores: Vec<f64> = (0..20_000).map(|_| rng.random()).collect();
    let labels: Vec<u8> = (0..20_000).map(|_| u8::from(rng.random_bool(0.12))).collect();
    let ap = average_precision(&ScoredSet::new(scores, labels).unwrap()).unwrap();
    assert!((ap - 0.12).abs() < 0.015, "{ap}");
}
