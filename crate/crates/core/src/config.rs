//! Run configuration: a TOML document with `[system]`, `[experiment]`,
//! `[simulate]`, `[solver]` and `[output]` sections.
//!
//! ```toml
//! [system]
//! d = 10
//! gamma = "nearest_neighbor(1)"   # or "all_pairs(g)", "none", or a d x d array
//! b = "sin"                       # catalog name, or one name per particle
//! sigma = "halfsin2"
//! x0 = "arithmetic(1, 1)"         # x0_i = start + (i - 1) * step, or an explicit list
//! horizon = 1.0
//!
//! [experiment]
//! schemes = ["SIM", "SIEM"]
//! k_min = 1
//! k_max = 5
//! paths = 1000
//! seed = 2021
//! ```
//!
//! Every section except `[system]` may be omitted. Values can be replaced
//! from the command line with `section.key=value` overrides, where `value` is
//! read as a TOML value (falling back to a bare string).

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::convergence::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{parse_call, InteractionMatrix, ParticleSystem, ScalarField, Violation};
use crate::schemes::SchemeKind;
use crate::solver::SolverOptions;

const PRESETS: [(&str, &str); 3] = [
    ("case1", include_str!("../presets/case1.toml")),
    ("case2", include_str!("../presets/case2.toml")),
    ("case3", include_str!("../presets/case3.toml")),
];

/// Names of the bundled configurations.
pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

/// Source text of a bundled configuration.
pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub d: usize,
    pub gamma: GammaSpec,
    pub b: CoefficientSpec,
    pub sigma: CoefficientSpec,
    pub x0: PositionSpec,
    #[serde(default = "one")]
    pub horizon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GammaSpec {
    Rule(String),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CoefficientSpec {
    Uniform(String),
    PerParticle(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PositionSpec {
    Rule(String),
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub schemes: Vec<SchemeKind>,
    pub k_min: u32,
    pub k_max: u32,
    pub paths: usize,
    pub seed: u64,
    /// Leading paths whose coupling is re-verified bit for bit.
    pub audit_paths: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            schemes: SchemeKind::ALL.to_vec(),
            k_min: 1,
            k_max: 5,
            paths: 1000,
            seed: 1,
            audit_paths: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub level: u32,
    pub paths: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { level: 5, paths: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = SolverOptions::<f64>::default();
        Self {
            tol: d.residual_tol,
            max_iter: d.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub formats: Vec<String>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            formats: vec!["csv".into()],
        }
    }
}

fn one() -> f64 {
    1.0
}

/// A `section.key=value` command-line override.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: toml::Value,
}

impl std::str::FromStr for Override {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::config(s, "override must look like section.key=value"))?;
        let path: Vec<String> = key.trim().split('.').map(|p| p.trim().to_string()).collect();
        if path.iter().any(String::is_empty) {
            return Err(Error::config(key, "empty key segment"));
        }
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        Ok(Self { path, value })
    }
}

fn apply_override(table: &mut toml::Table, ov: &Override) -> Result<()> {
    let (last, parents) = ov.path.split_last().expect("non-empty path");
    let mut cursor = table;
    for (depth, seg) in parents.iter().enumerate() {
        let entry = cursor
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(ov.path[..=depth].join("."), "is not a section"))?;
    }
    cursor.insert(last.clone(), ov.value.clone());
    Ok(())
}

fn violation_key(v: &Violation) -> &'static str {
    match v {
        Violation::EmptySystem => "system.d",
        Violation::GammaNegative { .. }
        | Violation::GammaAsymmetric { .. }
        | Violation::GammaNotFinite { .. }
        | Violation::AdjacentGammaNotPositive { .. } => "system.gamma",
        Violation::X0NotIncreasing { .. } | Violation::X0NotFinite { .. } => "system.x0",
        Violation::HorizonNotPositive => "system.horizon",
        Violation::DerivativeInconsistent { coefficient: "b", .. } => "system.b",
        Violation::DerivativeInconsistent { .. } => "system.sigma",
    }
}

impl RunConfig {
    /// Parses TOML text, applies overrides and validates the result.
    pub fn parse(text: &str, overrides: &[Override]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            Error::config("<document>", e.message().to_string())
        })?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let normalized = toml::to_string(&table).map_err(|e| Error::config("<document>", e.to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(toml::Deserializer::new(&normalized)).map_err(|e| {
            let key = e.path().to_string();
            let reason = e.inner().message().to_string();
            Error::config(if key == "." { "<document>".into() } else { key }, reason)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path, overrides: &[Override]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::parse(&text, overrides)
    }

    pub fn from_preset(name: &str, overrides: &[Override]) -> Result<Self> {
        let text = preset(name).ok_or_else(|| {
            let known: Vec<&str> = preset_names().collect();
            Error::config("preset", format!("unknown preset `{name}` (known: {})", known.join(", ")))
        })?;
        Self::parse(text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<document>", e.to_string()))
    }

    /// Checks every constraint, reporting the first failure with its key.
    pub fn validate(&self) -> Result<()> {
        let sys = self.build_system()?;
        if let Some(v) = sys.validate().violations.first() {
            return Err(Error::config(violation_key(v), v.to_string()));
        }
        let e = &self.experiment;
        if e.schemes.is_empty() {
            return Err(Error::config("experiment.schemes", "select at least one scheme"));
        }
        if e.k_max < e.k_min + 1 {
            return Err(Error::config("experiment.k_max", "must be at least k_min + 1"));
        }
        if e.k_max >= 30 {
            return Err(Error::config("experiment.k_max", "must be below 30"));
        }
        if e.paths < 2 {
            return Err(Error::config("experiment.paths", "need at least 2 paths"));
        }
        if self.simulate.paths == 0 {
            return Err(Error::config("simulate.paths", "must be >= 1"));
        }
        if self.simulate.level >= 30 {
            return Err(Error::config("simulate.level", "must be below 30"));
        }
        if !(self.solver.tol > 0.0) {
            return Err(Error::config("solver.tol", "must be > 0"));
        }
        if self.solver.max_iter == 0 {
            return Err(Error::config("solver.max_iter", "must be >= 1"));
        }
        if let Some(f) = self.output.formats.iter().find(|f| f.as_str() != "csv") {
            return Err(Error::config("output.formats", format!("unsupported format `{f}`")));
        }
        Ok(())
    }

    fn gamma(&self) -> Result<InteractionMatrix<f64>> {
        let d = self.system.d;
        match &self.system.gamma {
            GammaSpec::Matrix(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::config("system.gamma", format!("matrix must be {d} x {d}")));
                }
                for (i, row) in rows.iter().enumerate() {
                    for (j, &g) in row.iter().enumerate() {
                        if i != j && g < 0.0 {
                            return Err(Error::config(
                                format!("system.gamma[{}][{}]", i + 1, j + 1),
                                "must be >= 0",
                            ));
                        }
                    }
                }
                InteractionMatrix::from_rows(rows)
            }
            GammaSpec::Rule(rule) => {
                let (head, args) = parse_call(rule).map_err(|e| Error::config("system.gamma", e.to_string()))?;
                let strength = || -> Result<f64> {
                    match args.as_slice() {
                        [g] if *g >= 0.0 => Ok(*g),
                        [_] => Err(Error::config("system.gamma", "interaction strength must be >= 0")),
                        _ => Err(Error::config("system.gamma", format!("`{head}` takes one argument"))),
                    }
                };
                match head.as_str() {
                    "nearest_neighbor" => Ok(InteractionMatrix::nearest_neighbor(d, strength()?)),
                    "all_pairs" => Ok(InteractionMatrix::all_pairs(d, strength()?)),
                    "none" if args.is_empty() => Ok(InteractionMatrix::zeros(d)),
                    _ => Err(Error::config("system.gamma", format!("unknown rule `{rule}`"))),
                }
            }
        }
    }

    fn coefficients(&self, key: &str, spec: &CoefficientSpec) -> Result<Vec<ScalarField<f64>>> {
        let d = self.system.d;
        let parse = |s: &str| ScalarField::parse(s).map_err(|e| Error::config(key, e.to_string()));
        match spec {
            CoefficientSpec::Uniform(name) => Ok(vec![parse(name)?; d]),
            CoefficientSpec::PerParticle(names) => {
                if names.len() != d {
                    return Err(Error::config(key, format!("expected {d} entries, got {}", names.len())));
                }
                names.iter().map(|n| parse(n)).collect()
            }
        }
    }

    fn x0(&self) -> Result<Vec<f64>> {
        let d = self.system.d;
        match &self.system.x0 {
            PositionSpec::Explicit(v) if v.len() == d => Ok(v.clone()),
            PositionSpec::Explicit(v) => Err(Error::config(
                "system.x0",
                format!("expected {d} entries, got {}", v.len()),
            )),
            PositionSpec::Rule(rule) => {
                let (head, args) = parse_call(rule).map_err(|e| Error::config("system.x0", e.to_string()))?;
                match (head.as_str(), args.as_slice()) {
                    ("arithmetic", [start, step]) => Ok((0..d).map(|i| start + step * i as f64).collect()),
                    _ => Err(Error::config("system.x0", format!("unknown rule `{rule}`"))),
                }
            }
        }
    }

    /// The particle system described by `[system]` (structure only; see [`RunConfig::validate`]).
    pub fn build_system(&self) -> Result<ParticleSystem<f64>> {
        if self.system.d == 0 {
            return Err(Error::config("system.d", "must be >= 1"));
        }
        let gamma = self.gamma()?;
        let b = self.coefficients("system.b", &self.system.b)?;
        let sigma = self.coefficients("system.sigma", &self.system.sigma)?;
        ParticleSystem::new(gamma, b, sigma, self.x0()?, self.system.horizon)
    }

    pub fn solver_options(&self) -> SolverOptions<f64> {
        SolverOptions {
            residual_tol: self.solver.tol,
            max_iter: self.solver.max_iter,
            ..SolverOptions::default()
        }
    }

    pub fn experiment(&self, workers: Option<usize>) -> Result<ExperimentConfig<f64>> {
        let e = &self.experiment;
        let mut schemes = e.schemes.clone();
        schemes.dedup();
        Ok(ExperimentConfig {
            system: self.build_system()?,
            schemes,
            k_min: e.k_min,
            k_max: e.k_max,
            paths: e.paths,
            master_seed: e.seed,
            solver: self.solver_options(),
            workers,
            audit_paths: e.audit_paths,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(s: &str) -> Override {
        s.parse().unwrap()
    }

    #[test]
    fn presets_parse_and_describe_benchmark() {
        for (name, start) in [("case1", 0.5), ("case2", 1.0), ("case3", 2.0)] {
            let cfg = RunConfig::from_preset(name, &[]).unwrap();
            let sys = cfg.build_system().unwrap();
            assert_eq!(sys.dim(), 10);
            let expected: Vec<f64> = (1..=10).map(|i| start * i as f64).collect();
            assert_eq!(sys.x0(), expected.as_slice());
            assert_eq!(sys.gamma(), &InteractionMatrix::nearest_neighbor(10, 1.0));
            assert_eq!(cfg.experiment.paths, 1000);
            assert_eq!((cfg.experiment.k_min, cfg.experiment.k_max), (1, 5));
        }
        assert!(RunConfig::from_preset("case9", &[]).is_err());
    }

    #[test]
    fn overrides_are_typed() {
        let cfg = RunConfig::from_preset(
            "case2",
            &[ov("experiment.paths=200"), ov("solver.tol=1e-2"), ov("system.sigma=constant(0.5)")],
        )
        .unwrap();
        assert_eq!(cfg.experiment.paths, 200);
        assert_eq!(cfg.solver.tol, 1e-2);
        assert_eq!(cfg.system.sigma, CoefficientSpec::Uniform("constant(0.5)".into()));
    }

    #[test]
    fn dump_roundtrips() {
        let cfg = RunConfig::from_preset("case3", &[ov("system.x0=[1,2,3,4,5,6,7,8,9,10.5]")]).unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::parse(&text, &[]).unwrap(), cfg);
    }

    #[test]
    fn negative_matrix_entry_names_key() {
        let text = r#"
            [system]
            d = 2
            gamma = [[0.0, -1.0], [-1.0, 0.0]]
            b = "zero"
            sigma = "constant(1)"
            x0 = [0.0, 1.0]
        "#;
        let err = RunConfig::parse(text, &[]).unwrap_err();
        assert_eq!(err, Error::config("system.gamma[1][2]", "must be >= 0"));
    }

    #[test]
    fn type_errors_carry_path() {
        let err = RunConfig::from_preset("case1", &[ov("experiment.k_min=\"one\"")]).unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "experiment.k_min"),
            other => panic!("unexpected {other:?}"),
        }
        let err = RunConfig::from_preset("case1", &[ov("system.colour=1")]).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn semantic_errors_carry_key() {
        let key = |o: &str| match RunConfig::from_preset("case2", &[ov(o)]).unwrap_err() {
            Error::Config { key, .. } => key,
            other => panic!("unexpected {other:?}"),
        };
        assert_eq!(key("experiment.k_max=1"), "experiment.k_max");
        assert_eq!(key("experiment.paths=1"), "experiment.paths");
        assert_eq!(key("system.gamma=nearest_neighbor(0)"), "system.gamma");
        assert_eq!(key("system.x0=arithmetic(1,-1)"), "system.x0");
        assert_eq!(key("system.b=cosh"), "system.b");
        assert_eq!(key("solver.tol=0"), "solver.tol");
        assert_eq!(key("output.formats=[\"png\"]"), "output.formats");
        assert_eq!(key("system.horizon=0"), "system.horizon");
    }

    #[test]
    fn single_particle_without_interaction() {
        let text = r#"
            [system]
            d = 1
            gamma = "none"
            b = "zero"
            sigma = "constant(0.5)"
            x0 = [0.0]
        "#;
        let cfg = RunConfig::parse(text, &[]).unwrap();
        assert_eq!(cfg.experiment, ExperimentSection::default());
        assert!(cfg.build_system().unwrap().gamma().is_zero());
    }

    #[test]
    fn per_particle_coefficients() {
        let text = r#"
            [system]
            d = 2
            gamma = "all_pairs(0.5)"
            b = ["sin", "zero"]
            sigma = ["constant(1)", "halfsin2"]
            x0 = "arithmetic(0, 1)"
        "#;
        let sys = RunConfig::parse(text, &[]).unwrap().build_system().unwrap();
        assert_eq!(sys.b()[0].name(), "sin");
        assert_eq!(sys.sigma()[1].name(), "halfsin2");
        let err = RunConfig::parse(&text.replace("[\"sin\", \"zero\"]", "[\"sin\"]"), &[]).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "system.b"));
    }

    #[test]
    fn malformed_override() {
        assert!("experiment.paths".parse::<Override>().is_err());
        assert!("a..b=1".parse::<Override>().is_err());
        assert_eq!(ov("output.dir=results/x").value, toml::Value::String("results/x".into()));
    }
}
