//! Coupled-refinement Monte Carlo estimates of strong convergence order.
//!
//! For every Monte Carlo path one increment grid is drawn at the finest level
//! and all coarser grids are obtained by pairwise summation, so the two
//! approximations compared at levels `k` and `k + 1` are driven by the same
//! Brownian path. Per-path results land in slots indexed by path number and
//! are reduced in that order, which makes every estimate independent of the
//! worker count.

use std::io::Write;

use rayon::prelude::*;

use crate::brownian::{split, IncrementGrid};
use crate::error::{Error, Result};
use crate::model::{InteractionMatrix, ParticleSystem, ScalarField};
use crate::scalar::{min_adjacent_gap, Real};
use crate::schemes::{simulate_path, SchemeKind};
use crate::solver::SolverOptions;

/// Largest tolerated fraction of discarded paths per level, as `1 / DISCARD_BUDGET_DENOM`.
const DISCARD_BUDGET_DENOM: usize = 10;

#[derive(Debug, Clone)]
pub struct ExperimentConfig<T: Real> {
    pub system: ParticleSystem<T>,
    pub schemes: Vec<SchemeKind>,
    pub k_min: u32,
    pub k_max: u32,
    pub paths: usize,
    pub master_seed: u64,
    pub solver: SolverOptions<T>,
    /// Worker threads; `None` uses the global rayon pool.
    pub workers: Option<usize>,
    /// Number of leading paths whose grid ladder is re-checked for exact coupling.
    pub audit_paths: usize,
}

impl<T: Real> ExperimentConfig<T> {
    pub fn new(system: ParticleSystem<T>, k_min: u32, k_max: u32, paths: usize, master_seed: u64) -> Self {
        Self {
            system,
            schemes: SchemeKind::ALL.to_vec(),
            k_min,
            k_max,
            paths,
            master_seed,
            solver: SolverOptions::default(),
            workers: None,
            audit_paths: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_max < self.k_min + 1 {
            return Err(Error::param("k_max", "must be at least k_min + 1"));
        }
        if self.k_max >= 30 {
            return Err(Error::param("k_max", "must be below 30"));
        }
        if self.paths < 2 {
            return Err(Error::param("paths", "need at least 2 Monte Carlo paths"));
        }
        if self.schemes.is_empty() {
            return Err(Error::param("schemes", "no scheme selected"));
        }
        if self.workers == Some(0) {
            return Err(Error::param("workers", "must be >= 1"));
        }
        let report = self.system.validate();
        if let Some(v) = report.violations.first() {
            return Err(Error::param("system", v.to_string()));
        }
        self.solver.validate()
    }
}

/// Maps `f` over `0..n` on a pool of `workers` threads, keeping index order.
pub(crate) fn par_map_indexed<R, F>(workers: Option<usize>, n: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match workers {
        None => Ok((0..n).into_par_iter().map(&f).collect()),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| Error::param("workers", e.to_string()))?;
            Ok(pool.install(|| (0..n).into_par_iter().map(&f).collect()))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MseRow<T> {
    pub scheme: SchemeKind,
    pub k: u32,
    /// Mean of `|X^{2^k}(T) - X^{2^{k+1}}(T)|^2` over retained paths.
    pub mse: T,
    /// Jackknife standard error of `mse` (for a sample mean this is `s / sqrt(m)`).
    pub stderr: T,
    pub discards: usize,
    pub used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CouplingAudit {
    pub paths_checked: usize,
    pub mismatches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MseTable<T> {
    pub rows: Vec<MseRow<T>>,
    pub paths: usize,
    pub audit: CouplingAudit,
}

impl<T: Real> MseTable<T> {
    pub fn for_scheme(&self, scheme: SchemeKind) -> impl Iterator<Item = &MseRow<T>> {
        self.rows.iter().filter(move |r| r.scheme == scheme)
    }

    pub fn schemes(&self) -> Vec<SchemeKind> {
        let mut out: Vec<SchemeKind> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.scheme) {
                out.push(r.scheme);
            }
        }
        out
    }

    /// Columns `scheme,k,mse,stderr,discards`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "scheme,k,mse,stderr,discards")?;
        for r in &self.rows {
            writeln!(w, "{},{},{:e},{:e},{}", r.scheme, r.k, r.mse, r.stderr, r.discards)?;
        }
        Ok(())
    }

    /// Fails with [`Error::DiscardBudgetExceeded`] when more than 10% of
    /// paths were dropped at some level.
    pub fn check_discard_budget(&self) -> Result<()> {
        for r in &self.rows {
            if r.discards * DISCARD_BUDGET_DENOM > self.paths {
                return Err(Error::DiscardBudgetExceeded {
                    scheme: r.scheme,
                    k: r.k,
                    discarded: r.discards,
                    paths: self.paths,
                });
            }
        }
        Ok(())
    }
}

/// Mean and jackknife standard error of a sample in the given order.
fn mean_and_stderr<T: Real>(values: &[T]) -> (T, T) {
    let m = values.len();
    if m == 0 {
        return (T::nan(), T::nan());
    }
    let mf = T::lit(m as f64);
    let mean = values.iter().copied().sum::<T>() / mf;
    if m < 2 {
        return (mean, T::nan());
    }
    let ss: T = values.iter().map(|&v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (mf * (mf - T::one()))).sqrt())
}

/// `|coarse - fine|^2`, or exactly zero when every coordinate agrees to
/// within the rounding accumulated over `fine_steps` steps.
fn coupled_difference<T: Real>(coarse: &[T], fine: &[T], fine_steps: usize) -> T {
    let scale = coarse.iter().chain(fine).fold(T::one(), |m, v| m.max(v.abs()));
    let floor = T::lit(8.0 * fine_steps as f64) * T::epsilon() * scale;
    if coarse.iter().zip(fine).all(|(&c, &f)| (c - f).abs() <= floor) {
        T::zero()
    } else {
        squared_distance(coarse, fine)
    }
}

fn squared_distance<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Re-derives each coarse grid from its finer neighbour by pairwise sums and
/// compares bit patterns.
fn ladder_is_exact<T: Real>(ladder: &[IncrementGrid<T>]) -> bool {
    ladder.windows(2).all(|pair| {
        let (fine, coarse) = (&pair[0], &pair[1]);
        coarse.level() + 1 == fine.level()
            && (0..fine.dim()).all(|i| {
                let f = fine.channel(i);
                coarse
                    .channel(i)
                    .iter()
                    .enumerate()
                    .all(|(k, &c)| (f[2 * k] + f[2 * k + 1]).to_f64().map(f64::to_bits) == c.to_f64().map(f64::to_bits))
            })
    })
}

struct PathOutcome<T> {
    // [scheme][k - k_min]
    diffs: Vec<Vec<Option<T>>>,
    audit: Option<bool>,
}

/// Estimates `mse(k)` for `k = k_min..=k_max` and every configured scheme.
pub fn run_mse_experiment<T: Real>(cfg: &ExperimentConfig<T>) -> Result<MseTable<T>> {
    cfg.validate()?;
    let sys = &cfg.system;
    let d = sys.dim();
    let finest = cfg.k_max + 1;
    let levels = (cfg.k_max - cfg.k_min + 1) as usize;

    let outcomes = par_map_indexed(cfg.workers, cfg.paths, |path| -> Result<PathOutcome<T>> {
        let grid = IncrementGrid::generate(split(cfg.master_seed, path as u64), d, finest, sys.horizon());
        // ladder[j] has level finest - j
        let ladder = grid.ladder(cfg.k_min)?;
        let audit = (path < cfg.audit_paths).then(|| ladder_is_exact(&ladder));
        let diffs = cfg
            .schemes
            .iter()
            .map(|&kind| {
                let endpoints: Vec<Option<Vec<T>>> = ladder
                    .iter()
                    .map(|g| {
                        simulate_path(sys, kind, g, &cfg.solver)
                            .map_err(|e| log::debug!("path {path} {kind} level {}: {e}", g.level()))
                            .ok()
                            .map(|t| t.final_state().to_vec())
                    })
                    .collect();
                (0..levels)
                    .map(|j| {
                        // k = k_min + j compares ladder levels k and k + 1
                        let coarse = &endpoints[levels - j];
                        let fine = &endpoints[levels - j - 1];
                        let fine_steps = 1usize << (cfg.k_min as usize + j + 1);
                        match (coarse, fine) {
                            (Some(c), Some(f)) => Some(coupled_difference(c, f, fine_steps)),
                            _ => None,
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(PathOutcome { diffs, audit })
    })?
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(cfg.schemes.len() * levels);
    for (s, &scheme) in cfg.schemes.iter().enumerate() {
        for j in 0..levels {
            let kept: Vec<T> = outcomes.iter().filter_map(|o| o.diffs[s][j]).collect();
            let (mse, stderr) = mean_and_stderr(&kept);
            rows.push(MseRow {
                scheme,
                k: cfg.k_min + j as u32,
                mse,
                stderr,
                discards: cfg.paths - kept.len(),
                used: kept.len(),
            });
        }
    }
    let audit = outcomes.iter().filter_map(|o| o.audit).fold(CouplingAudit::default(), |mut a, ok| {
        a.paths_checked += 1;
        a.mismatches += usize::from(!ok);
        a
    });
    let table = MseTable {
        rows,
        paths: cfg.paths,
        audit,
    };
    table.check_discard_budget()?;
    Ok(table)
}

/// Mean of `|SIM(T) - SIEM(T)|^2` over `paths` shared grids at `level`.
pub fn cross_scheme_mse<T: Real>(
    sys: &ParticleSystem<T>,
    level: u32,
    paths: usize,
    master_seed: u64,
    opts: &SolverOptions<T>,
) -> Result<T> {
    let diffs = par_map_indexed(None, paths, |path| -> Result<T> {
        let grid = IncrementGrid::generate(split(master_seed, path as u64), sys.dim(), level, sys.horizon());
        let sim = simulate_path(sys, SchemeKind::Milstein, &grid, opts)?;
        let siem = simulate_path(sys, SchemeKind::EulerMaruyama, &grid, opts)?;
        Ok(squared_distance(sim.final_state(), siem.final_state()))
    })?
    .into_iter()
    .collect::<Result<Vec<T>>>()?;
    Ok(mean_and_stderr(&diffs).0)
}

/// Least-squares line through `(k, log2 mse(k))`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFit<T> {
    /// Empirical strong order, `-slope / 2`.
    pub beta: T,
    pub slope: T,
    pub intercept: T,
    pub r2: T,
    pub points: usize,
    /// Levels left out because their mse was zero or not finite.
    pub excluded: Vec<u32>,
}

impl<T: Real> RateFit<T> {
    pub fn line(&self, k: u32) -> T {
        self.intercept + self.slope * T::lit(k as f64)
    }
}

/// Ordinary least squares of `log2(mse)` on `k`; non-positive and
/// non-finite entries are skipped and listed in `excluded`.
pub fn fit_log2_order<T: Real>(points: &[(u32, T)]) -> Result<RateFit<T>> {
    let mut excluded = Vec::new();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &(k, mse) in points {
        if mse > T::zero() && mse.is_finite() {
            xs.push(T::lit(k as f64));
            ys.push(mse.log2());
        } else {
            excluded.push(k);
        }
    }
    let m = xs.len();
    if m < 2 {
        return Err(Error::DegenerateFit { usable: m });
    }
    let mf = T::lit(m as f64);
    let x_mean = xs.iter().copied().sum::<T>() / mf;
    let y_mean = ys.iter().copied().sum::<T>() / mf;
    let mut sxx = T::zero();
    let mut sxy = T::zero();
    let mut syy = T::zero();
    for (&x, &y) in xs.iter().zip(&ys) {
        sxx += (x - x_mean) * (x - x_mean);
        sxy += (x - x_mean) * (y - y_mean);
        syy += (y - y_mean) * (y - y_mean);
    }
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let ss_res: T = xs
        .iter()
        .zip(&ys)
        .map(|(&x, &y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let r2 = if syy > T::zero() { T::one() - ss_res / syy } else { T::one() };
    Ok(RateFit {
        beta: -slope / T::lit(2.0),
        slope,
        intercept,
        r2,
        points: m,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport<T> {
    pub fits: Vec<(SchemeKind, Result<RateFit<T>>)>,
}

impl<T: Real> RateReport<T> {
    pub fn get(&self, scheme: SchemeKind) -> Option<&Result<RateFit<T>>> {
        self.fits.iter().find(|(s, _)| *s == scheme).map(|(_, f)| f)
    }

    /// Fitted order for `scheme`, if the fit succeeded.
    pub fn beta(&self, scheme: SchemeKind) -> Option<T> {
        self.get(scheme).and_then(|f| f.as_ref().ok()).map(|f| f.beta)
    }

    /// Columns `scheme,beta,intercept,r2,status`; degenerate fits leave the
    /// numeric columns empty and set `status` to `degenerate_fit`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "scheme,beta,intercept,r2,status")?;
        for (scheme, fit) in &self.fits {
            match fit {
                Ok(f) => writeln!(w, "{scheme},{},{},{},ok", f.beta, f.intercept, f.r2)?,
                Err(_) => writeln!(w, "{scheme},,,,degenerate_fit")?,
            }
        }
        Ok(())
    }
}

pub fn fit_rate<T: Real>(table: &MseTable<T>) -> RateReport<T> {
    let fits = table
        .schemes()
        .into_iter()
        .map(|s| {
            let pts: Vec<(u32, T)> = table.for_scheme(s).map(|r| (r.k, r.mse)).collect();
            (s, fit_log2_order(&pts))
        })
        .collect();
    RateReport { fits }
}

/// Columns `scheme,k,log2_mse,fitted_line`; enough to redraw the log-scale
/// mse plot with its regression lines.
pub fn write_plot_data<T: Real, W: Write>(table: &MseTable<T>, report: &RateReport<T>, mut w: W) -> Result<()> {
    writeln!(w, "scheme,k,log2_mse,fitted_line")?;
    for r in &table.rows {
        let log2 = if r.mse > T::zero() { r.mse.log2().to_string() } else { String::new() };
        let fitted = match report.get(r.scheme) {
            Some(Ok(f)) => f.line(r.k).to_string(),
            _ => String::new(),
        };
        writeln!(w, "{},{},{},{}", r.scheme, r.k, log2, fitted)?;
    }
    Ok(())
}

/// Geometric Brownian motion `dX = mu X dt + sigma X dW`, whose endpoint is
/// known in closed form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricParams<T> {
    pub mu: T,
    pub sigma: T,
    pub x0: T,
    pub horizon: T,
}

impl<T: Real> GeometricParams<T> {
    pub fn system(&self) -> ParticleSystem<T> {
        ParticleSystem::homogeneous(
            InteractionMatrix::zeros(1),
            ScalarField::Linear(self.mu),
            ScalarField::Linear(self.sigma),
            vec![self.x0],
            self.horizon,
        )
        .expect("single particle")
    }

    /// `x0 exp((mu - sigma^2/2) T + sigma W(T))`.
    pub fn exact_endpoint(&self, w_end: T) -> T {
        let half = T::lit(0.5);
        self.x0 * ((self.mu - half * self.sigma * self.sigma) * self.horizon + self.sigma * w_end).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactErrorReport<T> {
    /// Mean squared endpoint error against the exact solution, per level.
    pub table: MseTable<T>,
    pub rates: RateReport<T>,
}

/// Strong endpoint error of each scheme against the exact geometric solution
/// on levels `k_min..=k_max`, with the order fitted as in [`fit_rate`].
pub fn strong_error_vs_exact<T: Real>(
    params: &GeometricParams<T>,
    k_min: u32,
    k_max: u32,
    paths: usize,
    master_seed: u64,
    opts: &SolverOptions<T>,
) -> Result<ExactErrorReport<T>> {
    if k_max < k_min + 1 {
        return Err(Error::param("k_max", "must be at least k_min + 1"));
    }
    if paths < 2 {
        return Err(Error::param("paths", "need at least 2 Monte Carlo paths"));
    }
    let sys = params.system();
    let levels = (k_max - k_min + 1) as usize;
    let outcomes = par_map_indexed(None, paths, |path| -> Result<Vec<Vec<Option<T>>>> {
        let grid = IncrementGrid::generate(split(master_seed, path as u64), 1, k_max, params.horizon);
        let exact = params.exact_endpoint(grid.endpoint()[0]);
        let ladder = grid.ladder(k_min)?;
        Ok(SchemeKind::ALL
            .iter()
            .map(|&kind| {
                (0..levels)
                    .map(|j| {
                        let g = &ladder[levels - 1 - j];
                        simulate_path(&sys, kind, g, opts).ok().map(|t| {
                            let e = t.final_state()[0] - exact;
                            e * e
                        })
                    })
                    .collect()
            })
            .collect())
    })?
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (s, &scheme) in SchemeKind::ALL.iter().enumerate() {
        for j in 0..levels {
            let kept: Vec<T> = outcomes.iter().filter_map(|o| o[s][j]).collect();
            let (mse, stderr) = mean_and_stderr(&kept);
            rows.push(MseRow {
                scheme,
                k: k_min + j as u32,
                mse,
                stderr,
                discards: paths - kept.len(),
                used: kept.len(),
            });
        }
    }
    let table = MseTable {
        rows,
        paths,
        audit: CouplingAudit::default(),
    };
    let rates = fit_rate(&table);
    Ok(ExactErrorReport { table, rates })
}

/// Heuristic finiteness indicators for the moment and gap bounds the
/// convergence theory assumes. Large or growing values flag trouble; small
/// ones prove nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentDiagnostics<T> {
    /// `max_k mean_paths |X(t_k)|^p`
    pub max_mean_norm_pow: T,
    /// `max_{k,i} mean_paths (X_{i+1}(t_k) - X_i(t_k))^{-p}`; `None` for one particle.
    pub max_mean_inverse_gap_pow: Option<T>,
    /// `max |X(t_{k+1}) - X(t_k)| / sqrt(t_{k+1} - t_k)` over paths and steps.
    pub holder_quotient: T,
    /// Smallest adjacent gap seen on any retained path.
    pub min_gap: Option<T>,
    pub paths_used: usize,
    pub discarded: usize,
}

struct PathMoments<T> {
    norm_pow: Vec<T>,
    inv_gap_pow: Vec<T>,
    holder: T,
    min_gap: Option<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn moment_diagnostics<T: Real>(
    sys: &ParticleSystem<T>,
    kind: SchemeKind,
    level: u32,
    paths: usize,
    master_seed: u64,
    exponent: T,
    opts: &SolverOptions<T>,
) -> Result<MomentDiagnostics<T>> {
    if !(exponent > T::zero()) {
        return Err(Error::param("exponent", "must be > 0"));
    }
    if paths == 0 {
        return Err(Error::param("paths", "must be >= 1"));
    }
    let d = sys.dim();
    let pairs = d.saturating_sub(1);
    let per_path = par_map_indexed(None, paths, |path| {
        let grid = IncrementGrid::generate(split(master_seed, path as u64), d, level, sys.horizon());
        let traj = simulate_path(sys, kind, &grid, opts).ok()?;
        let sqrt_dt = grid.dt().sqrt();
        let mut norm_pow = Vec::with_capacity(traj.steps() + 1);
        let mut inv_gap_pow = Vec::with_capacity((traj.steps() + 1) * pairs);
        let mut holder = T::zero();
        let mut prev: Option<&[T]> = None;
        for row in traj.rows() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norm_pow.push(norm.powf(exponent));
            inv_gap_pow.extend(row.windows(2).map(|w| (w[1] - w[0]).powf(-exponent)));
            if let Some(p) = prev {
                holder = holder.max(squared_distance(row, p).sqrt() / sqrt_dt);
            }
            prev = Some(row);
        }
        Some(PathMoments {
            norm_pow,
            inv_gap_pow,
            holder,
            min_gap: traj.rows().filter_map(min_adjacent_gap).reduce(T::min),
        })
    })?;

    let kept: Vec<&PathMoments<T>> = per_path.iter().flatten().collect();
    let used = kept.len();
    let nodes = (1usize << level) + 1;
    let m = T::lit(used.max(1) as f64);
    let column_max = |len: usize, get: &dyn Fn(&PathMoments<T>, usize) -> T| -> T {
        (0..len)
            .map(|c| kept.iter().map(|pm| get(pm, c)).sum::<T>() / m)
            .fold(T::zero(), T::max)
    };
    let max_mean_norm_pow = column_max(nodes, &|pm, c| pm.norm_pow[c]);
    let max_mean_inverse_gap_pow = (pairs > 0).then(|| column_max(nodes * pairs, &|pm, c| pm.inv_gap_pow[c]));
    Ok(MomentDiagnostics {
        max_mean_norm_pow,
        max_mean_inverse_gap_pow,
        holder_quotient: kept.iter().map(|pm| pm.holder).fold(T::zero(), T::max),
        min_gap: kept.iter().filter_map(|pm| pm.min_gap).reduce(T::min),
        paths_used: used,
        discarded: paths - used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn table(points: &[(u32, f64)]) -> MseTable<f64> {
        MseTable {
            rows: points
                .iter()
                .map(|&(k, mse)| MseRow {
                    scheme: SchemeKind::Milstein,
                    k,
                    mse,
                    stderr: 0.0,
                    discards: 0,
                    used: 10,
                })
                .collect(),
            paths: 10,
            audit: CouplingAudit::default(),
        }
    }

    #[test]
    fn fit_on_exact_second_order_table() {
        let t = table(&(1..=5).map(|k| (k, 2f64.powi(-2 * k as i32))).collect::<Vec<_>>());
        let fit = fit_rate(&t).beta(SchemeKind::Milstein).unwrap();
        assert_eq!(fit, 1.0);
        let r = fit_rate(&t);
        let f = r.get(SchemeKind::Milstein).unwrap().as_ref().unwrap();
        assert_eq!(f.r2, 1.0);
    }

    #[test]
    fn fit_on_half_order_table() {
        let t = table(&(1..=5).map(|k| (k, 3.0 * 2f64.powi(-(k as i32)))).collect::<Vec<_>>());
        assert_abs_diff_eq!(fit_rate(&t).beta(SchemeKind::Milstein).unwrap(), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn fit_three_points_by_hand() {
        // xbar = 2, ybar = -5; Sxy = (-1)(2) + 0 + (1)(-1.8) = -3.8, Sxx = 2.
        let t = table(&[(1, 2f64.powf(-3.0)), (2, 2f64.powf(-5.2)), (3, 2f64.powf(-6.8))]);
        let r = fit_rate(&t);
        let f = r.get(SchemeKind::Milstein).unwrap().as_ref().unwrap();
        assert_abs_diff_eq!(f.slope, -1.9, epsilon = 1e-12);
        assert_abs_diff_eq!(f.beta, 0.95, epsilon = 1e-12);
        assert_abs_diff_eq!(f.intercept, -1.2, epsilon = 1e-12);
    }

    #[test]
    fn zeros_are_excluded_then_degenerate() {
        let t = table(&[(1, 0.0), (2, 0.25), (3, 0.0625)]);
        let r = fit_rate(&t);
        let f = r.get(SchemeKind::Milstein).unwrap().as_ref().unwrap();
        assert_eq!(f.excluded, vec![1]);
        assert_eq!(f.points, 2);

        let zeros = table(&[(1, 0.0), (2, 0.0), (3, 0.0)]);
        assert_eq!(
            fit_rate(&zeros).get(SchemeKind::Milstein).unwrap(),
            &Err(Error::DegenerateFit { usable: 0 })
        );
    }

    #[test]
    fn roundoff_differences_count_as_zero() {
        assert_eq!(coupled_difference(&[1.0, 2.0], &[1.0 + 1e-15, 2.0], 4), 0.0);
        assert_eq!(coupled_difference(&[1.0, 2.0], &[1.0 + 0.25f64.powi(10), 2.0], 4), 0.25f64.powi(20));
    }

    #[test]
    fn stderr_matches_sample_formula() {
        let (m, s) = mean_and_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        // sample variance 5/3, divided by 4
        assert_abs_diff_eq!(s, (5.0f64 / 12.0).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn discard_budget() {
        let mut t = table(&[(1, 0.5), (2, 0.25)]);
        assert!(t.check_discard_budget().is_ok());
        t.rows[1].discards = 1;
        assert!(t.check_discard_budget().is_ok());
        t.rows[1].discards = 2;
        assert!(matches!(t.check_discard_budget(), Err(Error::DiscardBudgetExceeded { k: 2, .. })));
    }

    #[test]
    fn csv_writers() {
        let t = table(&[(1, 0.25), (2, 0.0625)]);
        let r = fit_rate(&t);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "scheme,k,mse,stderr,discards\nSIM,1,2.5e-1,0e0,0\nSIM,2,6.25e-2,0e0,0\n"
        );
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "scheme,beta,intercept,r2,status\nSIM,1,0,1,ok\n");
        let mut buf = Vec::new();
        write_plot_data(&t, &r, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "scheme,k,log2_mse,fitted_line\nSIM,1,-2,-2\nSIM,2,-4,-4\n"
        );
        let degenerate = RateReport::<f64> {
            fits: vec![(SchemeKind::EulerMaruyama, Err(Error::DegenerateFit { usable: 0 }))],
        };
        let mut buf = Vec::new();
        degenerate.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().ends_with("SIEM,,,,degenerate_fit\n"));
    }

    #[test]
    fn config_validation() {
        let sys = ParticleSystem::repulsion_benchmark(vec![1.0, 2.0]);
        let mut cfg = ExperimentConfig::new(sys, 2, 2, 10, 0);
        assert!(cfg.validate().is_err());
        cfg.k_max = 3;
        assert!(cfg.validate().is_ok());
        cfg.paths = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn deterministic_ode_error_is_first_order() {
        // sigma = 0: both schemes are explicit Euler for x' = mu x.
        let p = GeometricParams {
            mu: 0.5,
            sigma: 0.0,
            x0: 1.0,
            horizon: 1.0,
        };
        let r = strong_error_vs_exact(&p, 4, 8, 2, 0, &SolverOptions::default()).unwrap();
        let rows: Vec<&MseRow<f64>> = r.table.for_scheme(SchemeKind::Milstein).collect();
        for row in &rows {
            let h = 1.0 / f64::from(1u32 << row.k);
            let euler = (1.0 + 0.5 * h).powf(1.0 / h);
            assert_abs_diff_eq!(row.mse.sqrt(), 0.5f64.exp() - euler, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(r.rates.beta(SchemeKind::Milstein).unwrap(), 1.0, epsilon = 0.02);
    }

    #[test]
    fn diagnostics_single_particle_has_no_gap_statistic() {
        let sys = ParticleSystem::homogeneous(
            InteractionMatrix::zeros(1),
            ScalarField::Zero,
            ScalarField::Constant(1.0),
            vec![0.0],
            1.0,
        )
        .unwrap();
        let d = moment_diagnostics(&sys, SchemeKind::Milstein, 4, 8, 1, 2.0, &SolverOptions::default()).unwrap();
        assert!(d.max_mean_inverse_gap_pow.is_none());
        assert!(d.min_gap.is_none());
        assert!(d.holder_quotient > 0.0);
    }

    #[test]
    fn diagnostics_constant_path() {
        let sys = ParticleSystem::homogeneous(
            InteractionMatrix::zeros(1),
            ScalarField::Zero,
            ScalarField::Zero,
            vec![2.0],
            1.0,
        )
        .unwrap();
        let d = moment_diagnostics(&sys, SchemeKind::EulerMaruyama, 3, 4, 1, 3.0, &SolverOptions::default()).unwrap();
        assert_eq!(d.holder_quotient, 0.0);
        assert_eq!(d.max_mean_norm_pow, 8.0);
    }
}
