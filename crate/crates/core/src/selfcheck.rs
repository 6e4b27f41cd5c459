//! Built-in verification suite run by `ncp validate`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::brownian::{split, IncrementGrid};
use crate::convergence::{par_map_indexed, strong_error_vs_exact, GeometricParams};
use crate::error::Result;
use crate::model::{InteractionMatrix, ParticleSystem, ScalarField};
use crate::scalar::is_strictly_increasing;
use crate::schemes::{simulate_path, SchemeKind};
use crate::solver::{solve_pair_closed_form, ImplicitProblem, SolverOptions};

#[derive(Debug, Clone)]
pub struct SelfCheckOptions {
    pub quick: bool,
    pub seed: u64,
    pub solver: SolverOptions<f64>,
    pub workers: Option<usize>,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        Self {
            quick: false,
            seed: 2021,
            solver: SolverOptions::default(),
            workers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }

    fn from_result(name: &'static str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(name, passed, detail),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }
}

/// Random two-particle problems against the quadratic closed form, `1e-10` componentwise.
pub fn pair_oracle_sweep(problems: usize, seed: u64, opts: &SolverOptions<f64>) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst = 0.0f64;
    for _ in 0..problems {
        let a = [rng.random_range(-5.0..=5.0), rng.random_range(-5.0..=5.0)];
        let h: f64 = rng.random_range(1e-4..=1.0);
        let g: f64 = rng.random_range(0.1..=10.0);
        let gamma = InteractionMatrix::nearest_neighbor(2, g);
        let (e1, e2) = solve_pair_closed_form(a[0], a[1], h, g);
        match ImplicitProblem::new(&a, h, &gamma).solve(opts) {
            Ok(sol) => {
                let err = (sol.x[0] - e1).abs().max((sol.x[1] - e2).abs());
                worst = worst.max(err);
                if !(err <= 1e-10) {
                    failures += 1;
                }
            }
            Err(_) => failures += 1,
        }
    }
    (failures, worst)
}

/// Runs every check; `quick` shrinks sample sizes but keeps all four checks.
pub fn run_self_checks(opts: &SelfCheckOptions) -> Vec<CheckResult> {
    let quick = opts.quick;
    let mut out = Vec::new();

    let problems = if quick { 2_000 } else { 10_000 };
    let (failures, worst) = pair_oracle_sweep(problems, split(opts.seed, 0), &opts.solver);
    out.push(CheckResult::new(
        "solver oracle (d=2 closed form)",
        failures == 0,
        format!("{failures}/{problems} mismatches, worst {worst:.2e} (tol 1e-10)"),
    ));

    out.push(CheckResult::from_result(
        "SIM == SIEM for constant sigma",
        scheme_coincidence(if quick { 20 } else { 100 }, if quick { 5 } else { 7 }, opts),
    ));

    out.push(CheckResult::from_result("exact-solution strong order", exact_order(quick, opts)));

    out.push(CheckResult::from_result(
        "non-colliding sweep",
        non_colliding_sweep(if quick { 5 } else { 7 }, if quick { 50 } else { 1000 }, opts),
    ));
    out
}

fn scheme_coincidence(paths: usize, level: u32, opts: &SelfCheckOptions) -> Result<(bool, String)> {
    let sys = ParticleSystem::homogeneous(
        InteractionMatrix::nearest_neighbor(10, 1.0),
        ScalarField::Sin,
        ScalarField::Constant(0.5),
        (1..=10).map(f64::from).collect(),
        1.0,
    )?;
    let seed = split(opts.seed, 1);
    let diffs = par_map_indexed(opts.workers, paths, |p| -> Result<f64> {
        let grid = IncrementGrid::generate(split(seed, p as u64), 10, level, 1.0);
        let a = simulate_path(&sys, SchemeKind::Milstein, &grid, &opts.solver)?;
        let b = simulate_path(&sys, SchemeKind::EulerMaruyama, &grid, &opts.solver)?;
        Ok(a.rows()
            .zip(b.rows())
            .flat_map(|(r, s)| r.iter().zip(s).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max))
    })?;
    let worst = diffs.into_iter().collect::<Result<Vec<_>>>()?.into_iter().fold(0.0, f64::max);
    Ok((worst <= 1e-15, format!("{paths} paths at level {level}, max difference {worst:.1e}")))
}

fn exact_order(quick: bool, opts: &SelfCheckOptions) -> Result<(bool, String)> {
    let params = GeometricParams {
        mu: 0.5,
        sigma: 0.5,
        x0: 1.0,
        horizon: 1.0,
    };
    let paths = if quick { 2_000 } else { 10_000 };
    let report = strong_error_vs_exact(&params, 2, 7, paths, split(opts.seed, 2), &opts.solver)?;
    let sim = report.rates.beta(SchemeKind::Milstein).unwrap_or(f64::NAN);
    let siem = report.rates.beta(SchemeKind::EulerMaruyama).unwrap_or(f64::NAN);
    let ok = (0.85..=1.15).contains(&sim) && (0.35..=0.65).contains(&siem);
    Ok((
        ok,
        format!("SIM {sim:.3} in [0.85, 1.15], SIEM {siem:.3} in [0.35, 0.65], M = {paths}"),
    ))
}

fn non_colliding_sweep(level: u32, paths: usize, opts: &SelfCheckOptions) -> Result<(bool, String)> {
    let mut violations = 0usize;
    let mut aborted = 0usize;
    let mut steps = 0usize;
    let seed = split(opts.seed, 3);
    for scale in [0.5, 1.0, 2.0] {
        let sys = ParticleSystem::repulsion_benchmark((1..=10).map(|i| scale * f64::from(i)).collect());
        for kind in SchemeKind::ALL {
            let per_path = par_map_indexed(opts.workers, paths, |p| {
                let grid = IncrementGrid::generate(split(seed, p as u64), 10, level, 1.0);
                simulate_path(&sys, kind, &grid, &opts.solver)
                    .map(|t| t.rows().skip(1).filter(|r| !is_strictly_increasing(r)).count())
            })?;
            for r in per_path {
                match r {
                    Ok(v) => {
                        violations += v;
                        steps += 1 << level;
                    }
                    Err(_) => aborted += 1,
                }
            }
        }
    }
    Ok((
        violations == 0 && aborted == 0,
        format!("{violations} ordering violations in {steps} steps, {aborted} aborted paths"),
    ))
}
