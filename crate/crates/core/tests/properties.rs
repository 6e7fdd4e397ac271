mod common;

use common::safety_moments;
use mlmf_core::experiments::{
    control_model, control_problem, reference_safety_levels, safety_ladder, CONTROL_DT, CONTROL_HORIZON, CONTROL_K,
    CONTROL_X0, SAFETY_HORIZON, SAFETY_X0,
};
use mlmf_core::{
    mlmf_estimate, path_integral_level, pilot_statistics, safety_config, safety_levels, scalar_riccati, Coupling,
    SafetySpec,
};

#[test]
fn one_dimensional_safety_matches_brute_force() {
    let n = 200_000;
    let oracle = safety_moments(&[(1, 0.1)], SAFETY_HORIZON, n, 3);
    let spec = SafetySpec::new(SAFETY_HORIZON);
    let cfg = safety_config(
        &spec,
        &safety_ladder(&[(1, 0.1)]),
        vec![1.0],
        vec![n],
        Coupling::Coupled,
        4,
    );
    let r = mlmf_estimate(&cfg, &SAFETY_X0).unwrap();
    let se = (oracle.variance[0] / n as f64 + r.levels[0].variance / n as f64).sqrt();
    assert!(
        (r.value - oracle.mean[0]).abs() <= 3.0 * se,
        "library {} vs oracle {} (se {se})",
        r.value,
        oracle.mean[0]
    );
}

#[test]
fn pilot_correlations_increase_and_match_brute_force() {
    let n = 20_000;
    let spec = SafetySpec::new(SAFETY_HORIZON);
    let levels = reference_safety_levels();
    let stats = pilot_statistics(&safety_levels(&spec, &levels), &SAFETY_X0, SAFETY_HORIZON, n, 8).unwrap();
    assert!(stats.rho.windows(2).all(|w| w[0] < w[1]), "{:?}", stats.rho);
    assert_eq!(stats.rho[4], 1.0);

    let rungs: Vec<(usize, f64)> = levels.iter().map(|l| (l.dim, l.dt)).collect();
    let oracle = safety_moments(&rungs, SAFETY_HORIZON, n, 9);
    for (i, (&lib, &brute)) in stats.rho.iter().zip(&oracle.rho).enumerate() {
        // Large-sample standard error of a correlation estimate.
        let se = (1.0 - brute * brute) / (n as f64).sqrt();
        assert!(
            (lib - brute).abs() <= 5.0 * se * 2f64.sqrt() + 1e-12,
            "level {}: {lib} vs {brute}",
            i + 1
        );
    }
}

#[test]
fn identical_levels_are_perfectly_correlated() {
    let spec = SafetySpec::new(SAFETY_HORIZON);
    let mut levels = safety_ladder(&[(3, 0.1), (3, 0.1)]);
    levels[1].cost = 2.0 * levels[0].cost;
    let stats = pilot_statistics(&safety_levels(&spec, &levels), &SAFETY_X0, SAFETY_HORIZON, 5_000, 2).unwrap();
    assert!((stats.rho[0] - 1.0).abs() < 1e-12, "{}", stats.rho[0]);
    assert_eq!(stats.sigma[0], stats.sigma[1]);
}

#[test]
fn control_error_shrinks_with_more_rollouts() {
    let problem = control_problem();
    let model = control_model(2);
    let exact = scalar_riccati(CONTROL_K[2], CONTROL_DT, CONTROL_HORIZON, 1.0, 1.0, 0.0).unwrap();
    let u_star = exact.control(0, &[CONTROL_X0])[0];
    let mse = |n: usize| {
        let seeds = 0..16u64;
        let count = seeds.end as f64;
        seeds
            .map(|s| {
                let u = path_integral_level(&problem, &model, &[0.0], &[CONTROL_X0], n, 0.0, 500 + s).unwrap()[0];
                (u - u_star).powi(2)
            })
            .sum::<f64>()
            / count
    };
    let errors: Vec<f64> = [100, 1_000, 10_000].into_iter().map(mse).collect();
    assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
}
