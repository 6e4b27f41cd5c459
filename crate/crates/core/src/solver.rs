//! Implicit step of the semi-implicit schemes.
//!
//! Each step solves `x = A + h F(x)` with `F` the singular drift. The system is
//! the stationarity condition of the strictly convex barrier objective
//!
//! ```text
//! phi(x) = 1/2 |x - A|^2 - h * sum_{i<j} gamma_ij * ln(x_j - x_i)
//! ```
//!
//! on the open chamber, so it has exactly one root there. We find it with a
//! damped Newton iteration whose Jacobian `I + h L(x)` is the identity plus a
//! weighted graph Laplacian and hence symmetric positive definite.

use crate::error::{Error, Result};
use crate::model::{check_chamber, InteractionMatrix};
use crate::scalar::Real;

/// Backtracking halvings allowed per Newton step.
pub const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions<T> {
    /// Absolute sup-norm tolerance on `x - A - h F(x)`.
    pub residual_tol: T,
    pub max_iter: usize,
    /// Adjacent gaps at or below this count as a collision for trial iterates.
    pub min_gap_floor: T,
}

impl<T: Real> Default for SolverOptions<T> {
    fn default() -> Self {
        Self {
            residual_tol: T::lit(1e-12).max(T::lit(256.0) * T::epsilon()),
            max_iter: 100,
            min_gap_floor: T::lit(1e-300).max(T::min_positive_value()),
        }
    }
}

impl<T: Real> SolverOptions<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.residual_tol > T::zero()) {
            return Err(Error::param("residual_tol", "must be > 0"));
        }
        if self.max_iter == 0 {
            return Err(Error::param("max_iter", "must be >= 1"));
        }
        if !(self.min_gap_floor >= T::zero()) {
            return Err(Error::param("min_gap_floor", "must be >= 0"));
        }
        Ok(())
    }
}

/// `x = explicit + step * F(x)`, solved on the open chamber.
#[derive(Debug, Clone, Copy)]
pub struct ImplicitProblem<'a, T> {
    pub explicit: &'a [T],
    pub step: T,
    pub gamma: &'a InteractionMatrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution<T> {
    pub x: Vec<T>,
    pub iterations: usize,
    pub residual: T,
    /// Tolerance the residual was held to: `residual_tol`, or the
    /// working-precision floor when that is larger.
    pub tolerance: T,
}

impl<'a, T: Real> ImplicitProblem<'a, T> {
    pub fn new(explicit: &'a [T], step: T, gamma: &'a InteractionMatrix<T>) -> Self {
        Self { explicit, step, gamma }
    }

    fn check(&self) -> Result<()> {
        let d = self.gamma.dim();
        if self.explicit.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: self.explicit.len(),
            });
        }
        if !(self.step > T::zero()) || !self.step.is_finite() {
            return Err(Error::param("step", "must be finite and > 0"));
        }
        if let Some(i) = self.explicit.iter().position(|a| !a.is_finite()) {
            return Err(Error::param("explicit", format!("entry {i} is not finite")));
        }
        if let Some(g) = self.gamma.min_adjacent() {
            if !(g > T::zero()) {
                return Err(Error::param("gamma", "adjacent interactions must be > 0"));
            }
        }
        Ok(())
    }

    /// `|x - A - h F(x)|_inf`; `x` must lie in the chamber.
    pub fn residual(&self, x: &[T]) -> Result<T> {
        if x.len() != self.explicit.len() {
            return Err(Error::DimensionMismatch {
                expected: self.explicit.len(),
                actual: x.len(),
            });
        }
        check_chamber(x)?;
        let mut g = vec![T::zero(); x.len()];
        Ok(self.gradient_into(x, &mut g))
    }

    /// Writes `G(x) = x - A - h F(x)` (the gradient of the barrier objective)
    /// into `out` and returns its sup norm.
    fn gradient_into(&self, x: &[T], out: &mut [T]) -> T {
        self.gamma.drift_into(x, out);
        let mut norm = T::zero();
        for ((o, &xi), &ai) in out.iter_mut().zip(x).zip(self.explicit) {
            *o = xi - ai - self.step * *o;
            norm = norm.max(o.abs());
        }
        norm
    }

    fn objective(&self, x: &[T]) -> T {
        let d = x.len();
        let quad: T = x
            .iter()
            .zip(self.explicit)
            .map(|(&xi, &ai)| (xi - ai) * (xi - ai))
            .sum::<T>()
            * T::lit(0.5);
        let mut barrier = T::zero();
        for i in 0..d {
            for j in i + 1..d {
                let g = self.gamma.get(i, j);
                if !g.is_zero() {
                    barrier += g * (x[j] - x[i]).ln();
                }
            }
        }
        quad - self.step * barrier
    }

    /// Row-major `I + h L(x)` with `L` the Laplacian of weights `gamma_ij / (x_i - x_j)^2`.
    fn jacobian_into(&self, x: &[T], out: &mut [T]) {
        let d = x.len();
        out.iter_mut().for_each(|v| *v = T::zero());
        for i in 0..d {
            out[i * d + i] = T::one();
        }
        for i in 0..d {
            for j in i + 1..d {
                let g = self.gamma.get(i, j);
                if g.is_zero() {
                    continue;
                }
                let gap = x[i] - x[j];
                let w = self.step * g / (gap * gap);
                out[i * d + i] += w;
                out[j * d + j] += w;
                out[i * d + j] -= w;
                out[j * d + i] -= w;
            }
        }
    }

    /// Smallest residual resolvable at `x` in working precision, about
    /// `4 eps (|A| + |x| |J|)` in the sup norm. Moving any coordinate by one
    /// ulp shifts the residual by roughly `eps |x| |J|`.
    fn precision_floor(&self, x: &[T]) -> T {
        let d = x.len();
        let mut jac_norm = T::one();
        for i in 0..d {
            let mut row = T::one();
            for j in 0..d {
                if i != j {
                    let g = self.gamma.get(i, j);
                    if !g.is_zero() {
                        let gap = x[i] - x[j];
                        row += T::lit(2.0) * self.step * g / (gap * gap);
                    }
                }
            }
            jac_norm = jac_norm.max(row);
        }
        let sup = |v: &[T]| v.iter().fold(T::zero(), |m, a| m.max(a.abs()));
        T::lit(4.0) * T::epsilon() * (sup(self.explicit) + sup(x) * jac_norm)
    }

    /// Sorted `A` with adjacent gaps of at least `sqrt(h * min gamma_{i,i+1})`,
    /// re-centred on the mean of `A`.
    fn initial_iterate(&self, floor: T) -> Vec<T> {
        let mut y = self.explicit.to_vec();
        y.sort_by(|a, b| a.partial_cmp(b).expect("finite entries"));
        let d = y.len();
        if d < 2 {
            return y;
        }
        let min_gamma = self.gamma.min_adjacent().unwrap_or_else(T::zero);
        let gap = (self.step * min_gamma).sqrt().max(floor);
        let mean_before = y.iter().copied().sum::<T>() / T::lit(d as f64);
        for i in 1..d {
            let lower = y[i - 1] + gap;
            if y[i] < lower {
                y[i] = lower;
            }
        }
        let shift = mean_before - y.iter().copied().sum::<T>() / T::lit(d as f64);
        for v in &mut y {
            *v += shift;
        }
        // The gap may vanish in rounding when it is tiny next to |y|.
        for i in 1..d {
            if !(y[i] - y[i - 1] > floor) {
                let bump = (y[i - 1].abs() * T::epsilon() * T::lit(4.0)).max(floor + floor);
                y[i] = y[i - 1] + bump;
            }
        }
        y
    }

    pub fn solve(&self, opts: &SolverOptions<T>) -> Result<Solution<T>> {
        self.check()?;
        opts.validate()?;
        let d = self.explicit.len();
        let mut x = self.initial_iterate(opts.min_gap_floor);
        let mut g = vec![T::zero(); d];
        let mut residual = self.gradient_into(&x, &mut g);
        let mut phi = self.objective(&x);

        let mut jac = vec![T::zero(); d * d];
        let mut delta = vec![T::zero(); d];
        let mut trial = vec![T::zero(); d];
        let mut g_trial = vec![T::zero(); d];

        let mut iterations = 0;
        let mut tolerance = opts.residual_tol.max(self.precision_floor(&x));
        while residual > tolerance {
            if iterations == opts.max_iter {
                return Err(Error::NonConvergence {
                    iterations,
                    residual: residual.as_f64(),
                });
            }
            iterations += 1;

            self.jacobian_into(&x, &mut jac);
            for (dl, &gi) in delta.iter_mut().zip(&g) {
                *dl = -gi;
            }
            if !cholesky_solve(&mut jac, &mut delta, d) {
                return Err(Error::NonConvergence {
                    iterations,
                    residual: residual.as_f64(),
                });
            }

            let mut t = T::one();
            let mut accepted = false;
            for _ in 0..=MAX_HALVINGS {
                for ((tr, &xi), &dl) in trial.iter_mut().zip(&x).zip(&delta) {
                    *tr = xi + t * dl;
                }
                if trial.windows(2).all(|w| w[1] - w[0] > opts.min_gap_floor) {
                    let r = self.gradient_into(&trial, &mut g_trial);
                    let p = self.objective(&trial);
                    // Near the root phi stops resolving in floating point; a
                    // smaller residual is then the deciding signal.
                    if p < phi || r < residual {
                        std::mem::swap(&mut x, &mut trial);
                        std::mem::swap(&mut g, &mut g_trial);
                        residual = r;
                        phi = p;
                        tolerance = opts.residual_tol.max(self.precision_floor(&x));
                        accepted = true;
                        break;
                    }
                }
                t = t * T::lit(0.5);
            }
            if !accepted {
                return Err(Error::NonConvergence {
                    iterations,
                    residual: residual.as_f64(),
                });
            }
        }
        Ok(Solution {
            x,
            iterations,
            residual,
            tolerance,
        })
    }
}

/// Solves `M z = rhs` in place for symmetric positive definite `M` (row-major,
/// `d x d`); `rhs` becomes `z`. Returns false if a pivot is not positive.
fn cholesky_solve<T: Real>(m: &mut [T], rhs: &mut [T], d: usize) -> bool {
    // Lower factor overwrites the lower triangle.
    for j in 0..d {
        let mut diag = m[j * d + j];
        for k in 0..j {
            diag -= m[j * d + k] * m[j * d + k];
        }
        if !(diag > T::zero()) {
            return false;
        }
        let ljj = diag.sqrt();
        m[j * d + j] = ljj;
        for i in j + 1..d {
            let mut s = m[i * d + j];
            for k in 0..j {
                s -= m[i * d + k] * m[j * d + k];
            }
            m[i * d + j] = s / ljj;
        }
    }
    for i in 0..d {
        let mut s = rhs[i];
        for k in 0..i {
            s -= m[i * d + k] * rhs[k];
        }
        rhs[i] = s / m[i * d + i];
    }
    for i in (0..d).rev() {
        let mut s = rhs[i];
        for k in i + 1..d {
            s -= m[k * d + i] * rhs[k];
        }
        rhs[i] = s / m[i * d + i];
    }
    true
}

/// Closed-form root of the two-particle step: the gap `D` solves
/// `D^2 - (A2 - A1) D - 2 h gamma = 0` and the midpoint stays at `(A1 + A2)/2`.
pub fn solve_pair_closed_form<T: Real>(a1: T, a2: T, step: T, gamma12: T) -> (T, T) {
    let diff = a2 - a1;
    let c = T::lit(8.0) * step * gamma12;
    let s = (diff * diff + c).sqrt();
    // Pick the form without cancellation.
    let gap = if diff >= T::zero() {
        (diff + s) * T::lit(0.5)
    } else {
        T::lit(4.0) * step * gamma12 / (s - diff)
    };
    let mid = (a1 + a2) * T::lit(0.5);
    let half = gap * T::lit(0.5);
    (mid - half, mid + half)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn opts() -> SolverOptions<f64> {
        SolverOptions::default()
    }

    #[test]
    fn pair_matches_closed_form_value() {
        // D = (1 + sqrt(1.8)) / 2.
        let g = InteractionMatrix::nearest_neighbor(2, 1.0);
        let sol = ImplicitProblem::new(&[0.0, 1.0], 0.1, &g).solve(&opts()).unwrap();
        assert_abs_diff_eq!(sol.x[0], -0.0854101966249685, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.x[1], 1.0854101966249685, epsilon = 1e-12);
        assert!(sol.residual <= 1e-12);
    }

    #[test]
    fn closed_form_pair_values() {
        let (x1, x2) = solve_pair_closed_form(0.0, 1.0, 0.1, 1.0);
        assert_abs_diff_eq!(x2 - x1, 1.1708203932499370, epsilon = 1e-14);
        // Coincident explicit parts: D = sqrt(8 h gamma) / 2 = 0.5 for h = 1/8.
        let (x1, x2) = solve_pair_closed_form(0.0, 0.0, 0.125, 1.0);
        assert_eq!((x1, x2), (-0.25, 0.25));
        assert_abs_diff_eq!(x1, 0.0 + 0.125 / (x1 - x2), epsilon = 1e-15);
    }

    #[test]
    fn closed_form_tends_to_explicit_part_as_gamma_vanishes() {
        let (x1, x2) = solve_pair_closed_form(0.3, 0.9, 0.5, 1e-14);
        assert_abs_diff_eq!(x1, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(x2, 0.9, epsilon = 1e-12);
    }

    #[test]
    fn closed_form_is_stable_for_reversed_inputs() {
        let (x1, x2) = solve_pair_closed_form(5.0, -5.0, 1e-4, 0.1);
        let gap = x2 - x1;
        assert!(gap > 0.0);
        // Fixed-point equation for the first particle.
        assert_abs_diff_eq!(x1, 5.0 - 1e-4 * 0.1 / gap, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_triple() {
        // Outer position a solves a^2 - a - 0.15 = 0 (middle particle stays at 0).
        let g = InteractionMatrix::all_pairs(3, 1.0);
        let sol = ImplicitProblem::new(&[-1.0, 0.0, 1.0], 0.1, &g).solve(&opts()).unwrap();
        let a = (1.0 + 1.6f64.sqrt()) / 2.0;
        assert_abs_diff_eq!(sol.x[0], -a, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.x[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.x[2], a, epsilon = 1e-12);
    }

    #[test]
    fn vanishing_step_returns_explicit_part() {
        let g = InteractionMatrix::nearest_neighbor(4, 1.0);
        let a = [-1.0, 0.5, 0.7, 3.0];
        let sol = ImplicitProblem::new(&a, 1e-15, &g).solve(&opts()).unwrap();
        for (x, a) in sol.x.iter().zip(&a) {
            assert_abs_diff_eq!(x, a, epsilon = 1e-10);
        }
    }

    #[test]
    fn residual_zero_step_identity() {
        let g = InteractionMatrix::nearest_neighbor(3, 1.0);
        let a = [0.0, 1.0, 2.0];
        assert_eq!(ImplicitProblem::new(&a, 0.0, &g).residual(&a).unwrap(), 0.0);
    }

    #[test]
    fn residual_of_closed_form_solution() {
        let g = InteractionMatrix::nearest_neighbor(2, 1.0);
        let (x1, x2) = solve_pair_closed_form(0.0, 1.0, 0.1, 1.0);
        let r = ImplicitProblem::new(&[0.0, 1.0], 0.1, &g).residual(&[x1, x2]).unwrap();
        assert!(r <= 1e-12);
    }

    #[test]
    fn residual_grows_with_perturbation() {
        // dG_1/dx_1 = 1 + h gamma / D^2, so a shift of delta moves G_1 by about
        // delta * (1 + 0.1 / 1.3708) and G_2 by about -delta * 0.073.
        let g = InteractionMatrix::nearest_neighbor(2, 1.0);
        let p = ImplicitProblem::new(&[0.0, 1.0], 0.1, &g);
        let (x1, x2) = solve_pair_closed_form(0.0, 1.0, 0.1, 1.0);
        for delta in [1e-6, 1e-4, 1e-2] {
            let r = p.residual(&[x1 + delta, x2]).unwrap();
            assert!(r >= delta * 0.99, "delta {delta}: residual {r}");
        }
    }

    #[test]
    fn residual_rejects_unordered_point() {
        let g = InteractionMatrix::nearest_neighbor(2, 1.0);
        let p = ImplicitProblem::new(&[0.0, 1.0], 0.1, &g);
        assert_eq!(p.residual(&[1.0, 0.0]), Err(Error::DomainViolation { index: 0 }));
    }

    #[test]
    fn explicit_part_outside_chamber() {
        let g = InteractionMatrix::nearest_neighbor(3, 0.5);
        let a = [2.0, 2.0, -1.0];
        let sol = ImplicitProblem::new(&a, 0.05, &g).solve(&opts()).unwrap();
        assert!(crate::scalar::is_strictly_increasing(&sol.x));
        assert!(ImplicitProblem::new(&a, 0.05, &g).residual(&sol.x).unwrap() <= 1e-12);
    }

    #[test]
    fn single_particle_is_explicit() {
        let g = InteractionMatrix::zeros(1);
        let sol = ImplicitProblem::new(&[1.25], 0.3, &g).solve(&opts()).unwrap();
        assert_eq!(sol.x, vec![1.25]);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let g = InteractionMatrix::nearest_neighbor(2, 1.0);
        assert!(ImplicitProblem::new(&[0.0, 1.0], 0.0, &g).solve(&opts()).is_err());
        assert!(ImplicitProblem::new(&[0.0], 0.1, &g).solve(&opts()).is_err());
        let broken = InteractionMatrix::zeros(2);
        assert!(ImplicitProblem::new(&[0.0, 1.0], 0.1, &broken).solve(&opts()).is_err());
        let bad = SolverOptions { max_iter: 0, ..opts() };
        assert!(ImplicitProblem::new(&[0.0, 1.0], 0.1, &g).solve(&bad).is_err());
    }

    #[test]
    fn iteration_budget_is_enforced() {
        let g = InteractionMatrix::nearest_neighbor(2, 1.0);
        let tight = SolverOptions { max_iter: 1, ..opts() };
        let err = ImplicitProblem::new(&[5.0, -5.0], 1.0, &g).solve(&tight).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { iterations: 1, .. }));
    }

    #[test]
    fn ill_conditioned_pair_stops_at_precision_floor() {
        // Gap ~5.5e-5 against explicit parts 6 apart: |J| ~ 1e5, so one ulp of
        // x moves the residual by ~6e-12 and 1e-12 is not representable.
        let a = [3.639358621068574, -2.682951792903354];
        let (h, g) = (0.00027435613040850817, 0.6395508507697883);
        let gamma = InteractionMatrix::nearest_neighbor(2, g);
        let sol = ImplicitProblem::new(&a, h, &gamma).solve(&opts()).unwrap();
        assert!(sol.tolerance > 1e-12 && sol.residual <= sol.tolerance);
        let (e1, e2) = solve_pair_closed_form(a[0], a[1], h, g);
        assert_abs_diff_eq!(sol.x[0], e1, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.x[1], e2, epsilon = 1e-12);
    }

    #[test]
    fn well_conditioned_problems_use_requested_tolerance() {
        let g = InteractionMatrix::nearest_neighbor(3, 1.0);
        let sol = ImplicitProblem::new(&[0.0, 1.0, 2.0], 0.1, &g).solve(&opts()).unwrap();
        assert_eq!(sol.tolerance, 1e-12);
    }

    #[test]
    fn cholesky_solves_small_system() {
        let mut m = vec![4.0, 2.0, 2.0, 3.0];
        let mut rhs = vec![2.0, 1.0];
        assert!(cholesky_solve(&mut m, &mut rhs, 2));
        assert_abs_diff_eq!(rhs[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(rhs[1], 0.0, epsilon = 1e-15);
        let mut indefinite = vec![1.0, 2.0, 2.0, 1.0];
        assert!(!cholesky_solve(&mut indefinite, &mut [1.0, 1.0], 2));
    }

    #[test]
    fn solves_in_single_precision() {
        let g = InteractionMatrix::<f32>::nearest_neighbor(2, 1.0);
        let sol = ImplicitProblem::new(&[0.0f32, 1.0], 0.1, &g)
            .solve(&SolverOptions::default())
            .unwrap();
        assert!((sol.x[0] + 0.085_410_2).abs() < 1e-5);
    }
}
