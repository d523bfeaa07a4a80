//! Run configuration, read from a TOML file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{Atom, AtomList, EnergyError, EnergyFlags, HartreeMode, Problem};
use crate::grid::Grid;
use crate::optimizer::OptimizerParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {}: {source}", path.display())]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}:{column}: {message}", path = path.display())]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.into(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; the rayon default when absent.
    #[serde(default)]
    pub threads: Option<usize>,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub optimizer: OptimizerParams,
    #[serde(default)]
    pub io: IoConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub dimension: usize,
    /// Box lengths in bohr, one per axis.
    pub extents: Vec<f64>,
    /// Interior points per axis.
    pub points_per_axis: Vec<usize>,
    pub orbitals: usize,
    #[serde(default)]
    pub atoms: Vec<Atom>,
    #[serde(default = "yes", alias = "hartree_enabled")]
    pub hartree: bool,
    #[serde(default = "yes", alias = "xc_enabled")]
    pub xc: bool,
    /// Defaults to `poisson` in 3D and `kernel` otherwise.
    #[serde(default)]
    pub hartree_mode: Option<HartreeMode>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Iteration log. Relative paths are taken from the config file's directory.
    pub log: PathBuf,
    pub summary: PathBuf,
    /// Two-column energy reduction file written with `--emit-reduction`.
    pub reduction: PathBuf,
    pub log_every: usize,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            log: PathBuf::from("iterations.csv"),
            summary: PathBuf::from("summary.json"),
            reduction: PathBuf::from("reduction.csv"),
            log_every: 1,
        }
    }
}

impl ProblemConfig {
    pub fn flags(&self) -> EnergyFlags {
        EnergyFlags {
            hartree: self.hartree,
            xc: self.xc,
            hartree_mode: self.hartree_mode.unwrap_or_else(|| HartreeMode::default_for(self.dimension)),
        }
    }

    pub fn build(&self) -> Result<Problem, ConfigError> {
        let grid = Grid::new(self.dimension, &self.extents, &self.points_per_axis)
            .map_err(|e| invalid("problem.points_per_axis", e.to_string()))?;
        let atoms = AtomList::new(self.atoms.clone()).map_err(|e| match e {
            EnergyError::InvalidAtom { index, reason } => invalid(format!("problem.atoms[{index}]"), reason),
            e => invalid("problem.atoms", e.to_string()),
        })?;
        Problem::new(Arc::new(grid), atoms, self.flags()).map_err(|e| match e {
            EnergyError::AtomOutsideBox { index } => {
                invalid(format!("problem.atoms[{index}].position"), "atom lies outside the box")
            }
            e => invalid("problem.hartree_mode", e.to_string()),
        })
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<RunConfig, ConfigError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| {
            let (line, column) = match e.span() {
                Some(span) => line_column(text, span.start),
                None => (1, 1),
            };
            ConfigError::Parse { path: path.to_path_buf(), line, column, message: e.message().to_string() }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.problem;
        if !(1..=3).contains(&p.dimension) {
            return Err(invalid("problem.dimension", format!("must be 1, 2 or 3, got {}", p.dimension)));
        }
        if p.extents.len() != p.dimension {
            return Err(invalid("problem.extents", format!("expected {} entries, got {}", p.dimension, p.extents.len())));
        }
        if let Some(l) = p.extents.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(invalid("problem.extents", format!("lengths must be positive, got {l}")));
        }
        if p.points_per_axis.len() != p.dimension {
            return Err(invalid(
                "problem.points_per_axis",
                format!("expected {} entries, got {}", p.dimension, p.points_per_axis.len()),
            ));
        }
        if p.points_per_axis.contains(&0) {
            return Err(invalid("problem.points_per_axis", "every axis needs at least one point"));
        }
        let points: usize = p.points_per_axis.iter().product();
        if p.orbitals == 0 || p.orbitals > points {
            return Err(invalid("problem.orbitals", format!("must lie in [1, {points}], got {}", p.orbitals)));
        }
        for (i, a) in p.atoms.iter().enumerate() {
            if a.position.len() != p.dimension {
                return Err(invalid(
                    format!("problem.atoms[{i}].position"),
                    format!("expected {} coordinates, got {}", p.dimension, a.position.len()),
                ));
            }
        }
        if p.hartree_mode == Some(HartreeMode::Poisson) && p.dimension != 3 {
            return Err(invalid("problem.hartree_mode", "poisson mode needs a 3D grid"));
        }
        self.optimizer.validate().map_err(|e| invalid(format!("optimizer.{}", e.key), e.message))?;
        if self.threads == Some(0) {
            return Err(invalid("threads", "must be at least 1"));
        }
        if self.io.log_every == 0 {
            return Err(invalid("io.log_every", "must be at least 1"));
        }
        Ok(())
    }

    /// Optimizer parameters with the run seed filled in.
    pub fn params(&self) -> OptimizerParams {
        OptimizerParams { seed: self.seed, ..self.optimizer.clone() }
    }
}

/// Reads, parses and validates a config file. Relative `io` paths are
/// resolved against the file's directory.
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text =
        std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
    let mut config = RunConfig::from_toml(&text, path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for p in [&mut config.io.log, &mut config.io.summary, &mut config.io.reduction] {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(config)
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |s| s.chars().count()) + 1;
    (line, column)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::{Algorithm, Period};

    const MINIMAL: &str = "
[problem]
dimension = 1
extents = [20.0]
points_per_axis = [400]
orbitals = 4
";

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::from_toml(text, Path::new("test.toml"))
    }

    fn invalid_key(text: &str) -> String {
        match parse(text) {
            Err(ConfigError::Invalid { key, .. }) => key,
            other => panic!("expected a validation error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.optimizer, OptimizerParams::default());
        assert_eq!(c.optimizer.algorithm, Algorithm::OptParMod);
        assert_eq!(c.io, IoConfig::default());
        assert_eq!((c.seed, c.threads), (0, None));
        assert!(c.problem.hartree && c.problem.xc);
        assert_eq!(c.problem.flags().hartree_mode, HartreeMode::Kernel);
        assert_eq!(c.problem.build().unwrap().grid().len(), 400);
    }

    #[test]
    fn delta_out_of_range() {
        assert_eq!(invalid_key(&format!("{MINIMAL}[optimizer]\ndelta = 1.5\n")), "optimizer.delta");
    }

    #[test]
    fn mixed_periods_accepted() {
        let c = parse(&format!("{MINIMAL}[optimizer]\nn_diag = 50\nn_org = 2\n")).unwrap();
        assert_eq!((c.optimizer.n_diag, c.optimizer.n_org), (Period::every(50), 2));
    }

    #[test]
    fn unknown_keys_rejected_with_position() {
        let err = parse(&format!("{MINIMAL}[optimizer]\nrho = 0.1\n")).unwrap_err();
        match err {
            ConfigError::Parse { line, message, .. } => {
                assert_eq!(line, 8);
                assert!(message.contains("rho"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse(&format!("colour = 1\n{MINIMAL}")), Err(ConfigError::Parse { line: 1, .. })));
        assert!(matches!(parse(&format!("{MINIMAL}[io]\nlogs = \"x\"\n")), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn validation_names_keys() {
        assert_eq!(invalid_key(&MINIMAL.replace("dimension = 1", "dimension = 4")), "problem.dimension");
        assert_eq!(invalid_key(&MINIMAL.replace("[20.0]", "[20.0, 1.0]")), "problem.extents");
        assert_eq!(invalid_key(&MINIMAL.replace("[400]", "[0]")), "problem.points_per_axis");
        assert_eq!(invalid_key(&MINIMAL.replace("orbitals = 4", "orbitals = 401")), "problem.orbitals");
        assert_eq!(invalid_key(&format!("threads = 0\n{MINIMAL}")), "threads");
        assert_eq!(invalid_key(&format!("{MINIMAL}[io]\nlog_every = 0\n")), "io.log_every");
        assert_eq!(invalid_key(&format!("{MINIMAL}hartree_mode = \"poisson\"\n")), "problem.hartree_mode");
        let atom = "[[problem.atoms]]\nposition = [10.0, 1.0]\ncharge = 1.0\nsoftening = 1.0\n";
        assert_eq!(invalid_key(&format!("{MINIMAL}{atom}")), "problem.atoms[0].position");
    }

    #[test]
    fn build_reports_bad_atoms() {
        let outside = "[[problem.atoms]]\nposition = [30.0]\ncharge = 1.0\nsoftening = 1.0\n";
        let c = parse(&format!("{MINIMAL}{outside}")).unwrap();
        assert!(matches!(c.problem.build(), Err(ConfigError::Invalid { key, .. }) if key == "problem.atoms[0].position"));
        let negative = "[[problem.atoms]]\nposition = [3.0]\ncharge = -1.0\nsoftening = 1.0\n";
        let c = parse(&format!("{MINIMAL}{negative}")).unwrap();
        assert!(matches!(c.problem.build(), Err(ConfigError::Invalid { key, .. }) if key == "problem.atoms[0]"));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, format!("{MINIMAL}[io]\nlog = \"out/log.csv\"\nsummary = \"/tmp/s.json\"\n")).unwrap();
        let c = parse_config(&path).unwrap();
        assert_eq!(c.io.log, dir.path().join("out/log.csv"));
        assert_eq!(c.io.summary, PathBuf::from("/tmp/s.json"));
        assert!(matches!(parse_config(&dir.path().join("missing.toml")), Err(ConfigError::Read { .. })));
    }

    #[test]
    fn seed_flows_into_params() {
        let c = parse(&format!("seed = 9\n{MINIMAL}")).unwrap();
        assert_eq!(c.params().seed, 9);
    }
}
