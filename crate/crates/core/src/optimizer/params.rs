use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Full-Σ gradient, orthonormalize every step.
    OptmQr,
    /// Per-orbital diagonal-Σ directions, orthonormalize every step.
    OptPar,
    /// Diagonal-Σ directions, orthonormalize every `n_org` steps.
    #[default]
    OptParMod,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::OptmQr => "optm_qr",
            Algorithm::OptPar => "opt_par",
            Algorithm::OptParMod => "opt_par_mod",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BbVariant {
    #[default]
    Bb1,
    Bb2,
    /// `bb1` on even iterations, `bb2` on odd ones.
    Alternate,
}

impl BbVariant {
    /// Resolves `Alternate` for inner iteration `iter`.
    pub fn at(self, iter: usize) -> BbVariant {
        match self {
            BbVariant::Alternate if iter.is_multiple_of(2) => BbVariant::Bb1,
            BbVariant::Alternate => BbVariant::Bb2,
            v => v,
        }
    }
}

/// How the curvature product `tr|<SᵀY>|` is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureTrace {
    /// `Σ_i |<s_i, y_i>|`.
    #[default]
    Entrywise,
    /// `|Σ_i <s_i, y_i>|`.
    AbsOfTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceMode {
    /// `||∇E||_F < grad_tol`.
    #[default]
    GradNorm,
    /// Mean absolute entry of `∇E` below `mean_abs_tol`.
    MeanAbs,
    /// Mean of the last three relative energy changes below `energy_tol`.
    EnergyChange,
}

impl fmt::Display for ConvergenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConvergenceMode::GradNorm => "grad_norm",
            ConvergenceMode::MeanAbs => "mean_abs",
            ConvergenceMode::EnergyChange => "energy_change",
        })
    }
}

/// Iteration period that may be switched off. Written as a positive integer
/// or the string `"never"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Period(Option<usize>);

impl Period {
    pub const NEVER: Period = Period(None);

    pub fn every(n: usize) -> Period {
        Period(Some(n))
    }

    pub fn get(self) -> Option<usize> {
        self.0
    }

    /// True when step count `count` (1-based) lands on the period.
    pub fn hits(self, count: usize) -> bool {
        matches!(self.0, Some(n) if n > 0 && count.is_multiple_of(n))
    }

    /// True when a multiple of the period lies in `(after, upto]`.
    pub fn crossed(self, after: usize, upto: usize) -> bool {
        matches!(self.0, Some(n) if n > 0 && upto / n > after / n)
    }
}

impl Serialize for Period {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.0 {
            Some(n) => s.serialize_u64(n as u64),
            None => s.serialize_str("never"),
        }
    }
}

impl<'de> Deserialize<'de> for Period {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(n) if n > 0 => Ok(Period(Some(n as usize))),
            Raw::Int(n) => Err(serde::de::Error::custom(format!("period must be positive, got {n}"))),
            Raw::Str(s) if s == "never" => Ok(Period(None)),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("expected a positive integer or \"never\", got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerParams {
    pub algorithm: Algorithm,
    pub bb_variant: BbVariant,
    pub curvature_trace: CurvatureTrace,
    pub rho1: f64,
    pub delta: f64,
    pub eta: f64,
    /// Subspace rotation period (ignored by `optm_qr`).
    pub n_diag: Period,
    /// Orthonormalization period (only `opt_par_mod` reads it).
    #[serde(alias = "n_orthg")]
    pub n_org: usize,
    pub max_inner: usize,
    pub max_backtracks: usize,
    pub tau_clamp: [f64; 2],
    pub grad_tol: f64,
    pub mean_abs_tol: f64,
    pub energy_tol: f64,
    pub convergence_mode: ConvergenceMode,
    pub outer_levels: usize,
    /// Filled from the run configuration's top-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        OptimizerParams {
            algorithm: Algorithm::OptParMod,
            bb_variant: BbVariant::Bb1,
            curvature_trace: CurvatureTrace::Entrywise,
            rho1: 1e-4,
            delta: 0.1,
            eta: 0.85,
            n_diag: Period::every(100),
            n_org: 1,
            max_inner: 5000,
            max_backtracks: 20,
            tau_clamp: [1e-10, 1e3],
            grad_tol: 1e-6,
            mean_abs_tol: 5e-9,
            energy_tol: 1e-13,
            convergence_mode: ConvergenceMode::GradNorm,
            outer_levels: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid value for `{key}`: {message}")]
pub struct ParamError {
    pub key: &'static str,
    pub message: String,
}

fn fail(key: &'static str, message: impl Into<String>) -> Result<(), ParamError> {
    Err(ParamError { key, message: message.into() })
}

impl OptimizerParams {
    pub fn tau_min(&self) -> f64 {
        self.tau_clamp[0]
    }

    pub fn tau_max(&self) -> f64 {
        self.tau_clamp[1]
    }

    /// Threshold used by the selected convergence mode.
    pub fn threshold(&self) -> f64 {
        match self.convergence_mode {
            ConvergenceMode::GradNorm => self.grad_tol,
            ConvergenceMode::MeanAbs => self.mean_abs_tol,
            ConvergenceMode::EnergyChange => self.energy_tol,
        }
    }

    /// Orthonormalization period actually used by the algorithm.
    pub fn orth_period(&self) -> usize {
        match self.algorithm {
            Algorithm::OptParMod => self.n_org,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            fail("delta", format!("must lie in (0, 1), got {}", self.delta))?;
        }
        if !(self.eta >= 0.0 && self.eta < 1.0) {
            fail("eta", format!("must lie in [0, 1), got {}", self.eta))?;
        }
        if !(self.rho1 > 0.0 && self.rho1.is_finite()) {
            fail("rho1", format!("must be positive, got {}", self.rho1))?;
        }
        let [lo, hi] = self.tau_clamp;
        if !(lo > 0.0 && lo.is_finite()) {
            fail("tau_clamp", format!("lower bound must be positive, got {lo}"))?;
        }
        if !(hi >= lo && hi.is_finite()) {
            fail("tau_clamp", format!("upper bound {hi} must be finite and at least {lo}"))?;
        }
        if self.n_org == 0 {
            fail("n_org", "must be a positive integer")?;
        }
        for (key, v) in [("grad_tol", self.grad_tol), ("mean_abs_tol", self.mean_abs_tol), ("energy_tol", self.energy_tol)] {
            if !(v > 0.0 && v.is_finite()) {
                fail(key, format!("must be positive, got {v}"))?;
            }
        }
        if self.outer_levels == 0 {
            fail("outer_levels", "must be at least 1")?;
        }
        Ok(())
    }
}
