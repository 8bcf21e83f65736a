//! JSON experiment configuration.
//!
//! ```json
//! {
//!   "experiment": "scheme",
//!   "model": { "preset": "gamma", "theta": 1.0, "beta": 1.0 },
//!   "driver": { "preset": "canonical", "delta": 1.0 },
//!   "terminal": { "kind": "affine", "scale": 0.5, "shift": 3.0 },
//!   "grid": { "horizon": 1.0, "steps": 50 },
//!   "ensemble": { "n_paths": 100000, "seed": 7 },
//!   "schedule": [[2, 2, 2], [4, 4, 4], [8, 8, 8]]
//! }
//! ```

use std::path::PathBuf;

use qbsdej::bsdej::{Dynamics, SolverConfig};
use qbsdej::driver::{Driver, MarkPart, StructureParams, TimeFn, YPart, ZPart};
use qbsdej::scheme::{Schedule, Triple};
use qbsdej::semimartingale::JForm;
use qbsdej::LevyModel;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Solve,
    Scheme,
    Audit,
    Risk,
    Oracle,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelPreset {
    #[default]
    Null,
    Gamma { theta: f64, beta: f64 },
    SymmetricStable { theta: f64, alpha: f64 },
    /// Finite measure with `rate` mass at each `mark`.
    Atoms { marks: Vec<f64>, rates: Vec<f64> },
}

impl ModelPreset {
    pub fn build(&self) -> LevyModel {
        match self {
            ModelPreset::Null => LevyModel::null(),
            ModelPreset::Gamma { theta, beta } => LevyModel::gamma(*theta, *beta),
            ModelPreset::SymmetricStable { theta, alpha } => LevyModel::symmetric_stable(*theta, *alpha),
            ModelPreset::Atoms { marks, rates } => LevyModel::atoms(marks.iter().copied().zip(rates.iter().copied()).collect()),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriverPreset {
    #[default]
    Zero,
    /// `(delta/2)|z|^2 + (1/delta) j(delta u)`.
    Canonical { delta: f64 },
    /// Canonical plus `-beta |y|`.
    Morlais { delta: f64, beta: f64 },
    /// `a y + b.z + c int u dnu`.
    Linear {
        a: f64,
        b: Vec<f64>,
        c: f64,
        #[serde(default = "one")]
        delta: f64,
    },
    /// `a + beta y`, constant in `z` and `u`.
    Affine { a: f64, beta: f64 },
}

fn one() -> f64 {
    1.0
}

impl DriverPreset {
    /// `nu_mass` is the total mass of the truncated measure, needed by the linear preset's structure bound.
    pub fn build(&self, nu_mass: f64) -> qbsdej::Result<Driver> {
        match self {
            DriverPreset::Zero => Ok(Driver::zero()),
            DriverPreset::Canonical { delta } => Driver::canonical(*delta),
            DriverPreset::Morlais { delta, beta } => Driver::morlais(*delta, *beta),
            DriverPreset::Linear { a, b, c, delta } => Driver::linear(*a, b.clone(), *c, *delta, nu_mass),
            DriverPreset::Affine { a, beta } => {
                let params = StructureParams::new(1.0, TimeFn::Constant(beta.abs()), TimeFn::Constant(a.abs()))?;
                Driver::separable("affine", YPart { a: *a, beta: *beta }, ZPart::Zero, MarkPart::Zero, params)
            }
        }
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self, DriverPreset::Canonical { .. } | DriverPreset::Morlais { .. })
    }
}

/// Terminal payoff `xi = phi(X_T)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Terminal {
    Constant { value: f64 },
    Affine { scale: f64, shift: f64 },
    /// `scale * max(x - strike, 0)`.
    Call { strike: f64, scale: f64 },
}

impl Terminal {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Terminal::Constant { value } => *value,
            Terminal::Affine { scale, shift } => scale * x + shift,
            Terminal::Call { strike, scale } => scale * (x - strike).max(0.0),
        }
    }
}

impl Default for Terminal {
    fn default() -> Self {
        Terminal::Affine { scale: 1.0, shift: 0.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub dynamics: Dynamics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationConfig {
    pub kappa: f64,
    pub cells_per_band: usize,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        Self {
            kappa: 8.0,
            cells_per_band: 2,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructureOverride {
    pub delta: Option<f64>,
    pub l: Option<TimeFn>,
    pub c: Option<TimeFn>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskConfig {
    /// Grid indices at which conditional entropic values are tabulated.
    pub times: Vec<usize>,
    pub gammas: Vec<f64>,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self {
            times: vec![0],
            gammas: vec![0.5, 1.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleSpec {
    /// `ln E[exp(sigma W_1)] = sigma^2 / 2`.
    GaussianEntropic { sigma: f64 },
    /// Grid minimization of `(q/2) x^2 + n |y - x|` against the Huber closed form.
    Huber {
        n: f64,
        y: f64,
        #[serde(default = "two")]
        q: f64,
    },
    /// `j` of any field under the null measure.
    NullMeasure,
    /// `E[W_T exp(b W_T - b^2 T / 2)] = b T`.
    Girsanov { b: f64 },
    /// `E[exp(u N_T - rate T (e^u - 1))] = 1`.
    CompoundPoisson { rate: f64, u: f64 },
    /// `ln E[exp(xi)]` for the configured model and terminal payoff.
    TerminalEntropic,
}

fn two() -> f64 {
    2.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub model: ModelPreset,
    #[serde(default)]
    pub driver: DriverPreset,
    #[serde(default)]
    pub structure: StructureOverride,
    #[serde(default)]
    pub terminal: Terminal,
    pub grid: GridConfig,
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub truncation: TruncationConfig,
    /// Regularization indices for a single solve; required for quadratic drivers.
    #[serde(default)]
    pub triple: Option<[f64; 3]>,
    #[serde(default)]
    pub schedule: Option<Vec<[f64; 3]>>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub j_form: JForm,
    #[serde(default)]
    pub risk: RiskConfig,
    #[serde(default)]
    pub oracles: Vec<OracleSpec>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

/// Parses `text`, reporting the failing field path with line and column.
pub fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        CliError::Config(format!("line {} column {}: at `{path}`: {inner}", inner.line(), inner.column()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(self.grid.horizon > 0.0 && self.grid.horizon.is_finite()) {
            return bad(format!("grid.horizon must be positive, got {}", self.grid.horizon));
        }
        if self.grid.steps < 2 {
            return bad(format!("grid.steps must be at least 2, got {}", self.grid.steps));
        }
        if self.ensemble.n_paths < 100 {
            return bad(format!("ensemble.n_paths must be at least 100, got {}", self.ensemble.n_paths));
        }
        if !(self.truncation.kappa >= 1.0 && self.truncation.kappa.is_finite()) {
            return bad(format!("truncation.kappa must be at least 1, got {}", self.truncation.kappa));
        }
        if self.truncation.cells_per_band == 0 {
            return bad("truncation.cells_per_band must be positive".into());
        }
        self.model.build().validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
        self.driver.build(1.0).map_err(|e| CliError::Config(format!("driver: {e}")))?;
        if let Some(t) = &self.triple {
            Schedule::new(vec![triple(t)], self.ensemble.seed).map_err(|e| CliError::Config(format!("triple: {e}")))?;
        }
        if let Some(s) = &self.schedule {
            Schedule::new(s.iter().map(triple).collect(), self.ensemble.seed)
                .map_err(|e| CliError::Config(format!("schedule: {e}")))?;
        }
        if matches!(self.experiment, Experiment::Solve | Experiment::Audit) && self.driver.is_quadratic() && self.triple.is_none() {
            return bad("quadratic drivers need `triple` for a single solve".into());
        }
        if self.experiment == Experiment::Oracle && self.oracles.is_empty() {
            return bad("oracle experiment lists no oracles".into());
        }
        if let Some(k) = self.risk.times.iter().find(|&&k| k > self.grid.steps) {
            return bad(format!("risk.times entry {k} exceeds grid.steps"));
        }
        self.structure_params(1.0)?;
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        match &self.schedule {
            Some(s) => Schedule {
                triples: s.iter().map(triple).collect(),
                shared_seed: self.ensemble.seed,
            },
            None => Schedule::canonical(self.ensemble.seed),
        }
    }

    /// Driver structure parameters with any configured overrides applied.
    pub fn structure_params(&self, nu_mass: f64) -> Result<StructureParams, CliError> {
        let base = self.driver.build(nu_mass).map_err(|e| CliError::Config(format!("driver: {e}")))?.params;
        let o = &self.structure;
        StructureParams::new(
            o.delta.unwrap_or(base.delta),
            o.l.clone().unwrap_or(base.l),
            o.c.clone().unwrap_or(base.c),
        )
        .map_err(|e| CliError::Config(format!("structure: {e}")))
    }
}

pub fn triple(t: &[f64; 3]) -> Triple {
    Triple::new(t[0], t[1], t[2])
}
