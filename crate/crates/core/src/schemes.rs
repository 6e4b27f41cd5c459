//! Semi-implicit Milstein (SIM) and semi-implicit Euler-Maruyama (SIEM) steps.
//!
//! Both schemes treat the singular drift implicitly and everything else
//! explicitly:
//!
//! ```text
//! x_new = A + h F(x_new)
//! A_i   = x_i + h b_i(x_i) + sigma_i(x_i) dW_i [+ 1/2 sigma_i(x_i) sigma_i'(x_i) (dW_i^2 - h)]
//! ```
//!
//! where the bracketed Milstein correction is present only for SIM. The
//! implicit part is handed to [`ImplicitProblem::solve`], so every state stays
//! inside the chamber. Only grid nodes are materialised.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::brownian::IncrementGrid;
use crate::error::{Error, Result};
use crate::model::{check_chamber, ParticleSystem};
use crate::scalar::{min_adjacent_gap, Real};
use crate::solver::{ImplicitProblem, Solution, SolverOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SchemeKind {
    #[serde(rename = "SIM")]
    Milstein,
    #[serde(rename = "SIEM")]
    EulerMaruyama,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 2] = [SchemeKind::Milstein, SchemeKind::EulerMaruyama];

    pub fn label(self) -> &'static str {
        match self {
            SchemeKind::Milstein => "SIM",
            SchemeKind::EulerMaruyama => "SIEM",
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "SIM" => Ok(SchemeKind::Milstein),
            "SIEM" => Ok(SchemeKind::EulerMaruyama),
            other => Err(Error::param("scheme", format!("unknown scheme `{other}` (expected SIM or SIEM)"))),
        }
    }
}

/// Writes the explicit part `A` of one step into `out`.
pub fn explicit_part_into<T: Real>(
    sys: &ParticleSystem<T>,
    kind: SchemeKind,
    x: &[T],
    dw: &[T],
    h: T,
    out: &mut [T],
) {
    let half = T::lit(0.5);
    for i in 0..x.len() {
        let xi = x[i];
        let s = sys.sigma()[i].value(xi);
        let mut a = xi + h * sys.b()[i].value(xi) + s * dw[i];
        if kind == SchemeKind::Milstein {
            a += half * s * sys.sigma()[i].derivative(xi) * (dw[i] * dw[i] - h);
        }
        out[i] = a;
    }
}

/// Advances `x` by one step of length `h` driven by increments `dw`.
pub fn step<T: Real>(
    sys: &ParticleSystem<T>,
    kind: SchemeKind,
    x: &[T],
    dw: &[T],
    h: T,
    opts: &SolverOptions<T>,
) -> Result<Solution<T>> {
    let d = sys.dim();
    for len in [x.len(), dw.len()] {
        if len != d {
            return Err(Error::DimensionMismatch { expected: d, actual: len });
        }
    }
    check_chamber(x)?;
    let mut a = vec![T::zero(); d];
    explicit_part_into(sys, kind, x, dw, h, &mut a);
    ImplicitProblem::new(&a, h, sys.gamma()).solve(opts)
}

pub fn sim_step<T: Real>(
    sys: &ParticleSystem<T>,
    x: &[T],
    dw: &[T],
    h: T,
    opts: &SolverOptions<T>,
) -> Result<Solution<T>> {
    step(sys, SchemeKind::Milstein, x, dw, h, opts)
}

pub fn siem_step<T: Real>(
    sys: &ParticleSystem<T>,
    x: &[T],
    dw: &[T],
    h: T,
    opts: &SolverOptions<T>,
) -> Result<Solution<T>> {
    step(sys, SchemeKind::EulerMaruyama, x, dw, h, opts)
}

/// Scheme output at the `n + 1` grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    kind: SchemeKind,
    level: u32,
    horizon: T,
    d: usize,
    values: Vec<T>,
    /// Newton iterations summed over all steps.
    pub newton_iterations: usize,
    /// Largest final residual over all steps.
    pub max_residual: T,
}

impl<T: Real> Trajectory<T> {
    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn steps(&self) -> usize {
        1 << self.level
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn time(&self, k: usize) -> T {
        self.horizon * T::lit(k as f64) / T::lit(self.steps() as f64)
    }

    pub fn row(&self, k: usize) -> &[T] {
        &self.values[k * self.d..(k + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.values.chunks_exact(self.d.max(1))
    }

    pub fn final_state(&self) -> &[T] {
        self.row(self.steps())
    }

    /// Smallest adjacent gap over every node; `None` for one particle.
    pub fn min_gap(&self) -> Option<T> {
        self.rows().filter_map(min_adjacent_gap).reduce(T::min)
    }

    /// Header `t,x1,...,xd`, one row per grid node.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((1..=self.d).map(|i| format!("x{i}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (k, row) in self.rows().enumerate() {
            write!(w, "{}", self.time(k))?;
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Runs `kind` over every step of `grid`, starting from the system's `x0`.
pub fn simulate_path<T: Real>(
    sys: &ParticleSystem<T>,
    kind: SchemeKind,
    grid: &IncrementGrid<T>,
    opts: &SolverOptions<T>,
) -> Result<Trajectory<T>> {
    let d = sys.dim();
    if grid.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: grid.dim(),
        });
    }
    if grid.horizon() != sys.horizon() {
        return Err(Error::param(
            "grid.horizon",
            format!("grid covers [0, {}] but the system horizon is {}", grid.horizon(), sys.horizon()),
        ));
    }
    check_chamber(sys.x0())?;
    let n = grid.steps();
    let h = grid.dt();
    let mut values = Vec::with_capacity((n + 1) * d);
    values.extend_from_slice(sys.x0());
    let mut dw = vec![T::zero(); d];
    let mut a = vec![T::zero(); d];
    let mut newton_iterations = 0;
    let mut max_residual = T::zero();
    for k in 0..n {
        grid.step_into(k, &mut dw);
        let x = &values[k * d..(k + 1) * d];
        explicit_part_into(sys, kind, x, &dw, h, &mut a);
        let sol = ImplicitProblem::new(&a, h, sys.gamma())
            .solve(opts)
            .map_err(|e| Error::PathAborted {
                step: k,
                reason: Box::new(e),
            })?;
        newton_iterations += sol.iterations;
        max_residual = max_residual.max(sol.residual);
        values.extend_from_slice(&sol.x);
    }
    Ok(Trajectory {
        kind,
        level: grid.level(),
        horizon: grid.horizon(),
        d,
        values,
        newton_iterations,
        max_residual,
    })
}
