//! Particle systems with singular nearest-pair repulsion.
//!
//! Particle `i` follows
//!
//! ```text
//! dX_i = ( sum_{j != i} gamma_ij / (X_i - X_j) + b_i(X_i) ) dt + sigma_i(X_i) dW_i
//! ```
//!
//! on the open chamber `x_1 < x_2 < ... < x_d`. Coefficients come from a small
//! catalog with closed-form derivatives; [`ScalarField::custom`] is the
//! in-process extension point.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Real;

type Func<T> = Arc<dyn Fn(T) -> T + Send + Sync>;

/// A coefficient function `R -> R` together with its first derivative.
#[derive(Clone)]
pub enum ScalarField<T: Real> {
    Zero,
    Constant(T),
    /// `x -> a*x + c`
    Affine { a: T, c: T },
    Sin,
    /// `x -> sin(2x)/2`
    HalfSin2,
    /// `x -> mu*x`
    Linear(T),
    Custom {
        name: String,
        value: Func<T>,
        derivative: Func<T>,
        bounded: bool,
    },
}

impl<T: Real> ScalarField<T> {
    pub fn custom<F, G>(name: impl Into<String>, value: F, derivative: G, bounded: bool) -> Self
    where
        F: Fn(T) -> T + Send + Sync + 'static,
        G: Fn(T) -> T + Send + Sync + 'static,
    {
        ScalarField::Custom {
            name: name.into(),
            value: Arc::new(value),
            derivative: Arc::new(derivative),
            bounded,
        }
    }

    #[inline]
    pub fn value(&self, x: T) -> T {
        match self {
            ScalarField::Zero => T::zero(),
            ScalarField::Constant(c) => *c,
            ScalarField::Affine { a, c } => *a * x + *c,
            ScalarField::Sin => x.sin(),
            ScalarField::HalfSin2 => (x + x).sin() * T::lit(0.5),
            ScalarField::Linear(mu) => *mu * x,
            ScalarField::Custom { value, .. } => value(x),
        }
    }

    #[inline]
    pub fn derivative(&self, x: T) -> T {
        match self {
            ScalarField::Zero | ScalarField::Constant(_) => T::zero(),
            ScalarField::Affine { a, .. } => *a,
            ScalarField::Sin => x.cos(),
            ScalarField::HalfSin2 => (x + x).cos(),
            ScalarField::Linear(mu) => *mu,
            ScalarField::Custom { derivative, .. } => derivative(x),
        }
    }

    /// Whether the function is bounded on the whole real line.
    pub fn is_bounded(&self) -> bool {
        match self {
            ScalarField::Zero | ScalarField::Constant(_) | ScalarField::Sin | ScalarField::HalfSin2 => true,
            ScalarField::Affine { a, .. } => a.is_zero(),
            ScalarField::Linear(mu) => mu.is_zero(),
            ScalarField::Custom { bounded, .. } => *bounded,
        }
    }

    /// True when the derivative vanishes identically.
    pub fn is_constant(&self) -> bool {
        match self {
            ScalarField::Zero | ScalarField::Constant(_) => true,
            ScalarField::Affine { a, .. } => a.is_zero(),
            ScalarField::Linear(mu) => mu.is_zero(),
            _ => false,
        }
    }

    /// Catalog name, in the same syntax [`ScalarField::parse`] accepts.
    pub fn name(&self) -> String {
        match self {
            ScalarField::Zero => "zero".into(),
            ScalarField::Constant(c) => format!("constant({c})"),
            ScalarField::Affine { a, c } => format!("affine({a},{c})"),
            ScalarField::Sin => "sin".into(),
            ScalarField::HalfSin2 => "halfsin2".into(),
            ScalarField::Linear(mu) => format!("linear({mu})"),
            ScalarField::Custom { name, .. } => name.clone(),
        }
    }

    /// Looks up a catalog entry such as `"sin"` or `"constant(0.5)"`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (head, args) = parse_call(spec)?;
        let arity = |n: usize| -> Result<()> {
            if args.len() == n {
                Ok(())
            } else {
                Err(Error::param(
                    spec,
                    format!("`{head}` takes {n} argument(s), got {}", args.len()),
                ))
            }
        };
        let field = match head.as_str() {
            "zero" => {
                arity(0)?;
                ScalarField::Zero
            }
            "sin" => {
                arity(0)?;
                ScalarField::Sin
            }
            "halfsin2" => {
                arity(0)?;
                ScalarField::HalfSin2
            }
            "constant" => {
                arity(1)?;
                ScalarField::Constant(T::lit(args[0]))
            }
            "linear" => {
                arity(1)?;
                ScalarField::Linear(T::lit(args[0]))
            }
            "affine" => {
                arity(2)?;
                ScalarField::Affine {
                    a: T::lit(args[0]),
                    c: T::lit(args[1]),
                }
            }
            other => return Err(Error::param(spec, format!("unknown coefficient `{other}`"))),
        };
        Ok(field)
    }

    /// Largest central-difference mismatch of the derivative over `points`.
    pub fn derivative_mismatch(&self, points: &[T], step: T) -> T {
        let two = T::lit(2.0);
        points
            .iter()
            .map(|&x| {
                let fd = (self.value(x + step) - self.value(x - step)) / (two * step);
                (self.derivative(x) - fd).abs()
            })
            .fold(T::zero(), T::max)
    }
}

impl<T: Real> fmt::Debug for ScalarField<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ScalarField({})", self.name())
    }
}

/// Splits `name(a, b, ...)` into the name and numeric arguments; a bare `name`
/// has no arguments.
pub(crate) fn parse_call(spec: &str) -> Result<(String, Vec<f64>)> {
    let spec = spec.trim();
    let Some(open) = spec.find('(') else {
        return Ok((spec.to_string(), Vec::new()));
    };
    if !spec.ends_with(')') {
        return Err(Error::param(spec, "missing closing parenthesis"));
    }
    let head = spec[..open].trim().to_string();
    let inner = spec[open + 1..spec.len() - 1].trim();
    if inner.is_empty() {
        return Ok((head, Vec::new()));
    }
    let args = inner
        .split(',')
        .map(|a| {
            a.trim()
                .parse::<f64>()
                .map_err(|_| Error::param(spec, format!("`{}` is not a number", a.trim())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((head, args))
}

/// Dense symmetric matrix of interaction strengths `gamma_ij`. The diagonal is ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMatrix<T> {
    d: usize,
    entries: Vec<T>,
}

impl<T: Real> InteractionMatrix<T> {
    pub fn zeros(d: usize) -> Self {
        Self {
            d,
            entries: vec![T::zero(); d * d],
        }
    }

    /// `gamma_{i,i+1} = gamma_{i+1,i} = strength`, all other pairs zero.
    pub fn nearest_neighbor(d: usize, strength: T) -> Self {
        let mut m = Self::zeros(d);
        for i in 0..d.saturating_sub(1) {
            m.set_pair(i, i + 1, strength);
        }
        m
    }

    /// Every pair interacts with the same strength.
    pub fn all_pairs(d: usize, strength: T) -> Self {
        let mut m = Self::zeros(d);
        for i in 0..d {
            for j in i + 1..d {
                m.set_pair(i, j, strength);
            }
        }
        m
    }

    /// Builds the matrix from rows as given. Symmetry and sign are checked by
    /// [`ParticleSystem::validate`], not here.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let d = rows.len();
        let mut entries = Vec::with_capacity(d * d);
        for row in rows {
            if row.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: row.len(),
                });
            }
            entries.extend_from_slice(row);
        }
        Ok(Self { d, entries })
    }

    pub fn set_pair(&mut self, i: usize, j: usize, value: T) {
        self.entries[i * self.d + j] = value;
        self.entries[j * self.d + i] = value;
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.entries[i * self.d + j]
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn rows(&self) -> Vec<Vec<T>> {
        self.entries.chunks(self.d.max(1)).map(<[T]>::to_vec).collect()
    }

    /// Smallest `gamma_{i,i+1}`; `None` for `d < 2`.
    pub fn min_adjacent(&self) -> Option<T> {
        (0..self.d.saturating_sub(1)).map(|i| self.get(i, i + 1)).reduce(T::min)
    }

    /// True when every off-diagonal entry is zero.
    pub fn is_zero(&self) -> bool {
        (0..self.d).all(|i| (0..self.d).all(|j| i == j || self.get(i, j).is_zero()))
    }

    /// Nonzero only on the first off-diagonals.
    pub fn is_nearest_neighbor(&self) -> bool {
        (0..self.d).all(|i| (0..self.d).all(|j| i.abs_diff(j) <= 1 || self.get(i, j).is_zero()))
    }

    /// `F_i = sum_{j != i} gamma_ij / (x_i - x_j)`, rejecting points outside the chamber.
    pub fn drift(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                actual: x.len(),
            });
        }
        check_chamber(x)?;
        let mut out = vec![T::zero(); self.d];
        self.drift_into(x, &mut out);
        Ok(out)
    }

    /// Unchecked drift evaluation into `out`; pairs are visited once each.
    pub(crate) fn drift_into(&self, x: &[T], out: &mut [T]) {
        out.iter_mut().for_each(|v| *v = T::zero());
        for i in 0..self.d {
            for j in i + 1..self.d {
                let g = self.get(i, j);
                if g.is_zero() {
                    continue;
                }
                let f = g / (x[i] - x[j]);
                out[i] += f;
                out[j] -= f;
            }
        }
    }
}

/// Errors with the first index where `x` fails to increase strictly.
pub fn check_chamber<T: Real>(x: &[T]) -> Result<()> {
    match x.windows(2).position(|w| !(w[0] < w[1])) {
        Some(index) => Err(Error::DomainViolation { index }),
        None => Ok(()),
    }
}

/// One violated well-posedness condition. Indices are 1-based in messages.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptySystem,
    GammaNegative { i: usize, j: usize },
    GammaAsymmetric { i: usize, j: usize },
    GammaNotFinite { i: usize, j: usize },
    AdjacentGammaNotPositive { i: usize },
    X0NotIncreasing { i: usize },
    X0NotFinite { i: usize },
    HorizonNotPositive,
    DerivativeInconsistent { coefficient: &'static str, particle: usize, error: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptySystem => write!(f, "system must have at least one particle"),
            Violation::GammaNegative { i, j } => write!(f, "gamma[{}][{}] must be >= 0", i + 1, j + 1),
            Violation::GammaAsymmetric { i, j } => write!(
                f,
                "gamma[{}][{}] must equal gamma[{}][{}]",
                i + 1,
                j + 1,
                j + 1,
                i + 1
            ),
            Violation::GammaNotFinite { i, j } => write!(f, "gamma[{}][{}] is not finite", i + 1, j + 1),
            Violation::AdjacentGammaNotPositive { i } => {
                write!(f, "gamma[{}][{}] must be > 0", i + 1, i + 2)
            }
            Violation::X0NotIncreasing { i } => write!(f, "x0 not strictly increasing at index {}", i + 1),
            Violation::X0NotFinite { i } => write!(f, "x0[{}] is not finite", i + 1),
            Violation::HorizonNotPositive => write!(f, "horizon must be > 0"),
            Violation::DerivativeInconsistent {
                coefficient,
                particle,
                error,
            } => write!(
                f,
                "{coefficient}[{}] derivative disagrees with central difference by {error:e}",
                particle + 1
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// A non-colliding particle system on `[0, horizon]`.
#[derive(Debug, Clone)]
pub struct ParticleSystem<T: Real> {
    gamma: InteractionMatrix<T>,
    b: Vec<ScalarField<T>>,
    sigma: Vec<ScalarField<T>>,
    x0: Vec<T>,
    horizon: T,
}

impl<T: Real> ParticleSystem<T> {
    /// Assembles a system; only lengths are checked here, everything else by
    /// [`ParticleSystem::validate`].
    pub fn new(
        gamma: InteractionMatrix<T>,
        b: Vec<ScalarField<T>>,
        sigma: Vec<ScalarField<T>>,
        x0: Vec<T>,
        horizon: T,
    ) -> Result<Self> {
        let d = gamma.dim();
        for len in [b.len(), sigma.len(), x0.len()] {
            if len != d {
                return Err(Error::DimensionMismatch { expected: d, actual: len });
            }
        }
        Ok(Self {
            gamma,
            b,
            sigma,
            x0,
            horizon,
        })
    }

    /// Same drift and diffusion coefficient for every particle.
    pub fn homogeneous(
        gamma: InteractionMatrix<T>,
        b: ScalarField<T>,
        sigma: ScalarField<T>,
        x0: Vec<T>,
        horizon: T,
    ) -> Result<Self> {
        let d = gamma.dim();
        Self::new(gamma, vec![b; d], vec![sigma; d], x0, horizon)
    }

    /// Brownian particles with nearest-neighbour repulsion `gamma = 1`,
    /// `b = sin`, `sigma = sin(2x)/2` on `[0, 1]`.
    pub fn repulsion_benchmark(x0: Vec<T>) -> Self {
        let d = x0.len();
        Self::homogeneous(
            InteractionMatrix::nearest_neighbor(d, T::one()),
            ScalarField::Sin,
            ScalarField::HalfSin2,
            x0,
            T::one(),
        )
        .expect("lengths agree by construction")
    }

    pub fn dim(&self) -> usize {
        self.gamma.dim()
    }

    pub fn gamma(&self) -> &InteractionMatrix<T> {
        &self.gamma
    }

    pub fn b(&self) -> &[ScalarField<T>] {
        &self.b
    }

    pub fn sigma(&self) -> &[ScalarField<T>] {
        &self.sigma
    }

    pub fn x0(&self) -> &[T] {
        &self.x0
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    /// A copy of the system with different initial positions.
    pub fn with_x0(&self, x0: Vec<T>) -> Result<Self> {
        Self::new(self.gamma.clone(), self.b.clone(), self.sigma.clone(), x0, self.horizon)
    }

    /// True when every diffusion coefficient has zero derivative, in which
    /// case the Milstein correction vanishes.
    pub fn has_additive_noise(&self) -> bool {
        self.sigma.iter().all(ScalarField::is_constant)
    }

    pub fn singular_drift(&self, x: &[T]) -> Result<Vec<T>> {
        self.gamma.drift(x)
    }

    /// Reports every violated condition; never fails.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let d = self.dim();
        if d == 0 {
            report.violations.push(Violation::EmptySystem);
            return report;
        }
        for i in 0..d {
            for j in i + 1..d {
                let (gij, gji) = (self.gamma.get(i, j), self.gamma.get(j, i));
                if !gij.is_finite() || !gji.is_finite() {
                    report.violations.push(Violation::GammaNotFinite { i, j });
                    continue;
                }
                if gij < T::zero() {
                    report.violations.push(Violation::GammaNegative { i, j });
                }
                if gji < T::zero() {
                    report.violations.push(Violation::GammaNegative { i: j, j: i });
                }
                if gij != gji {
                    report.violations.push(Violation::GammaAsymmetric { i, j });
                }
            }
        }
        for i in 0..d - 1 {
            if !(self.gamma.get(i, i + 1) > T::zero()) {
                report.violations.push(Violation::AdjacentGammaNotPositive { i });
            }
        }
        for (i, x) in self.x0.iter().enumerate() {
            if !x.is_finite() {
                report.violations.push(Violation::X0NotFinite { i });
            }
        }
        for i in 0..d - 1 {
            if !(self.x0[i] < self.x0[i + 1]) {
                report.violations.push(Violation::X0NotIncreasing { i });
            }
        }
        if !(self.horizon > T::zero()) {
            report.violations.push(Violation::HorizonNotPositive);
        }

        let (step, tol) = derivative_check_tolerances::<T>();
        let points = derivative_sample_points::<T>(&self.x0);
        for (coefficient, fields) in [("b", &self.b), ("sigma", &self.sigma)] {
            for (particle, field) in fields.iter().enumerate() {
                let error = field.derivative_mismatch(&points, step);
                if !(error <= tol) {
                    report.violations.push(Violation::DerivativeInconsistent {
                        coefficient,
                        particle,
                        error: error.as_f64(),
                    });
                }
            }
        }

        if !self.gamma.is_zero() {
            for (coefficient, fields) in [("b", &self.b), ("sigma", &self.sigma)] {
                for (particle, field) in fields.iter().enumerate() {
                    if !field.is_bounded() {
                        let msg = format!(
                            "{coefficient}[{}] = {} is unbounded; convergence guarantees assume bounded coefficients",
                            particle + 1,
                            field.name()
                        );
                        log::warn!("{msg}");
                        report.warnings.push(msg);
                    }
                }
            }
        }
        report
    }
}

/// Step and tolerance for the derivative consistency check: `1e-5` / `1e-6`
/// in double precision, widened for coarser types.
fn derivative_check_tolerances<T: Real>() -> (T, T) {
    let eps = T::epsilon();
    let step = T::lit(1e-5).max(eps.cbrt());
    let tol = T::lit(1e-6).max(T::lit(10.0) * (eps / step + step * step));
    (step, tol)
}

fn derivative_sample_points<T: Real>(x0: &[T]) -> Vec<T> {
    let mut pts: Vec<T> = (-8..=8).map(|k| T::lit(0.5 * k as f64 + 0.123)).collect();
    pts.extend(x0.iter().copied().filter(|x| x.is_finite()));
    pts
}
