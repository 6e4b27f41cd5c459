use ncp_core::convergence::{
    cross_scheme_mse, fit_rate, moment_diagnostics, run_mse_experiment, ExperimentConfig,
};
use ncp_core::{split, Error, IncrementGrid, InteractionMatrix, ParticleSystem, ScalarField, SchemeKind, SolverOptions};

fn additive_single() -> ParticleSystem<f64> {
    ParticleSystem::homogeneous(
        InteractionMatrix::zeros(1),
        ScalarField::Zero,
        ScalarField::Constant(0.5),
        vec![0.3],
        1.0,
    )
    .unwrap()
}

#[test]
fn increment_statistics() {
    // 100 channels x 2^10 steps = 102400 draws of N(0, 2^-10).
    let g = IncrementGrid::<f64>::generate(12345, 100, 10, 1.0);
    let all: Vec<f64> = (0..100).flat_map(|i| g.channel(i).to_vec()).collect();
    let n = all.len() as f64;
    let var_true = 2f64.powi(-10);
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    assert!(mean.abs() <= 4.0 * var_true.sqrt() / n.sqrt(), "mean {mean}");
    assert!((var / var_true - 1.0).abs() <= 0.05, "variance ratio {}", var / var_true);

    let corr = |a: &[f64], b: &[f64]| {
        let m = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / m, b.iter().sum::<f64>() / m);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        cov / (va * vb).sqrt()
    };
    // across channels and across consecutive steps, 10^5 pairs each
    let wide = IncrementGrid::<f64>::generate(777, 2, 17, 1.0);
    let rho_channels = corr(wide.channel(0), wide.channel(1));
    let c0 = wide.channel(0);
    let rho_steps = corr(&c0[..c0.len() - 1], &c0[1..]);
    assert!(rho_channels.abs() < 0.02, "{rho_channels}");
    assert!(rho_steps.abs() < 0.02, "{rho_steps}");
}

#[test]
fn additive_noise_gives_zero_mse_and_degenerate_fit() {
    let cfg = ExperimentConfig::new(additive_single(), 1, 4, 50, 9);
    let table = run_mse_experiment(&cfg).unwrap();
    assert!(table.rows.iter().all(|r| r.mse == 0.0 && r.discards == 0));
    let report = fit_rate(&table);
    for s in SchemeKind::ALL {
        assert!(matches!(report.get(s), Some(Err(Error::DegenerateFit { usable: 0 }))));
    }
}

#[test]
fn smoke_run_with_two_paths() {
    let sys = ParticleSystem::repulsion_benchmark((1..=10).map(f64::from).collect());
    let cfg = ExperimentConfig::new(sys, 1, 2, 2, 3);
    let table = run_mse_experiment(&cfg).unwrap();
    for s in SchemeKind::ALL {
        let ks: Vec<u32> = table.for_scheme(s).map(|r| r.k).collect();
        assert_eq!(ks, vec![1, 2]);
    }
    assert!(table.rows.iter().all(|r| r.mse > 0.0 && r.stderr.is_finite()));
}

#[test]
fn result_does_not_depend_on_worker_count() {
    let sys = ParticleSystem::repulsion_benchmark((1..=6).map(|i| f64::from(i) * 0.5).collect());
    let mut cfg = ExperimentConfig::new(sys, 1, 4, 40, 11);
    cfg.workers = Some(1);
    let one = run_mse_experiment(&cfg).unwrap();
    cfg.workers = Some(4);
    let four = run_mse_experiment(&cfg).unwrap();
    assert_eq!(one, four);
}

#[test]
fn mse_decreases_with_refinement() {
    let sys = ParticleSystem::repulsion_benchmark((1..=10).map(f64::from).collect());
    let cfg = ExperimentConfig::new(sys, 1, 5, 200, 5);
    let table = run_mse_experiment(&cfg).unwrap();
    for s in SchemeKind::ALL {
        let mse: Vec<f64> = table.for_scheme(s).map(|r| r.mse).collect();
        assert!(mse.windows(2).all(|w| w[1] < w[0]), "{s}: {mse:?}");
    }
}

#[test]
fn schemes_agree_on_shared_grids_for_constant_sigma() {
    let sys = ParticleSystem::homogeneous(
        InteractionMatrix::nearest_neighbor(5, 1.0),
        ScalarField::Sin,
        ScalarField::Constant(0.5),
        (1..=5).map(f64::from).collect(),
        1.0,
    )
    .unwrap();
    assert_eq!(cross_scheme_mse(&sys, 5, 20, 1, &SolverOptions::default()).unwrap(), 0.0);
}

#[test]
fn experiment_grids_are_nested() {
    // Path p of an experiment with k_max = 3 draws its level-4 grid from split(seed, p).
    let fine = IncrementGrid::<f64>::generate(split(8, 2), 3, 4, 1.0);
    let ladder = fine.ladder(1).unwrap();
    assert_eq!(ladder.len(), 4);
    for w in ladder.windows(2) {
        assert_eq!(w[0].coarsen().unwrap(), w[1]);
    }
}

#[test]
fn discard_budget_aborts_experiment() {
    let sys = ParticleSystem::repulsion_benchmark((1..=4).map(f64::from).collect());
    let mut cfg = ExperimentConfig::new(sys, 1, 2, 10, 0);
    cfg.solver = SolverOptions {
        max_iter: 1,
        residual_tol: 1e-15,
        ..SolverOptions::default()
    };
    assert!(matches!(run_mse_experiment(&cfg), Err(Error::DiscardBudgetExceeded { .. })));
}

#[test]
fn moment_diagnostics_on_benchmark() {
    let sys = ParticleSystem::repulsion_benchmark((1..=10).map(f64::from).collect());
    for kind in SchemeKind::ALL {
        let d = moment_diagnostics(&sys, kind, 6, 100, 4, 6.0, &SolverOptions::default()).unwrap();
        assert_eq!(d.paths_used, 100);
        assert!(d.max_mean_norm_pow.is_finite() && d.max_mean_norm_pow > 0.0);
        assert!(d.max_mean_inverse_gap_pow.unwrap().is_finite());
        assert!(d.holder_quotient.is_finite());
        assert!(d.min_gap.unwrap() > 0.0);
    }
}

#[test]
fn single_precision_pipeline() {
    let sys = ParticleSystem::<f32>::repulsion_benchmark((1..=5).map(|i| i as f32).collect());
    let cfg = ExperimentConfig::new(sys, 1, 3, 20, 2);
    let table = run_mse_experiment(&cfg).unwrap();
    assert!(table.rows.iter().all(|r| r.mse.is_finite() && r.discards == 0));
}
