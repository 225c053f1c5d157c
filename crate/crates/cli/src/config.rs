//! Experiment configuration: a flat TOML table, one key per setting.
//!
//! ```toml
//! family = "cat"
//! window = 100
//! defect_recipe = "constant"
//! defect_size = 1e-3
//! perturbation = "shift"
//! perturbation_size = 1e-3
//! p = "inf"
//! seed = 7
//! ```

use std::path::{Path, PathBuf};

use bishadow::charts::PNorm;
use bishadow::hyperbolicity::SplittingMethod;
use bishadow::pseudoorbit::DefectDirections;
use bishadow::systems::IndexProfile;
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    /// The cat map on the 2-torus.
    Cat,
    /// Cat map plus `family_eps * sin(2 pi x)` per coordinate.
    CatSin,
    /// Block-triangular linear map with rates and couplings from the
    /// `lambda_*`/`mu_*` keys.
    Coupled,
    /// `x -> scalar_factor * x` on a line segment.
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplittingName {
    Coordinate,
    Eigen,
    Power,
}

impl From<SplittingName> for SplittingMethod {
    fn from(s: SplittingName) -> Self {
        match s {
            SplittingName::Coordinate => SplittingMethod::Coordinate,
            SplittingName::Eigen => SplittingMethod::Eigen,
            SplittingName::Power => SplittingMethod::PowerIteration,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    #[default]
    Zero,
    Constant,
    Harmonic,
    Geometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    #[default]
    None,
    /// Spatially constant shift along `perturbation_direction`.
    Shift,
    /// `perturbation_size * sin(2 pi x)` per coordinate (torus only).
    Sin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Finite,
    Infinite,
    Limit,
    Asymptotic,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Finite => "finite",
            Mode::Infinite => "infinite",
            Mode::Limit => "limit",
            Mode::Asymptotic => "asymptotic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub family: FamilyName,
    #[serde(default = "default_family_eps")]
    pub family_eps: f64,
    pub lambda_u: Option<f64>,
    pub lambda_s: Option<f64>,
    #[serde(default)]
    pub mu_u: f64,
    #[serde(default)]
    pub mu_s: f64,
    #[serde(default = "default_scalar_factor")]
    pub scalar_factor: f64,
    pub splitting: Option<SplittingName>,

    /// Half-width `k` of the window `[-k, k]`; the largest window in
    /// infinite mode.
    pub window: usize,
    /// Infinite mode: first window of the doubling schedule.
    pub start_window: Option<usize>,
    /// Chart coordinates of `x_{-k}`.
    pub start: Option<Vec<f64>>,
    #[serde(default)]
    pub defect_recipe: Recipe,
    #[serde(default)]
    pub defect_size: f64,
    pub defect_rate: Option<f64>,
    #[serde(default)]
    pub defect_directions: DefectDirections,

    #[serde(default)]
    pub perturbation: Perturbation,
    #[serde(default)]
    pub perturbation_size: f64,
    #[serde(default = "default_perturbation_profile")]
    pub perturbation_profile: Recipe,
    pub perturbation_rate: Option<f64>,
    pub perturbation_direction: Option<Vec<f64>>,

    pub mode: Option<Mode>,
    #[serde(default = "default_p")]
    pub p: PNorm,
    pub v: Option<f64>,
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Cap on `delta`; the constants use `min(delta, rho / L)`.
    pub delta: Option<f64>,
    /// Fraction of the hyperbolicity slack the modulus budget may use.
    #[serde(default = "default_safety")]
    pub safety: f64,

    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_newton_tol")]
    pub newton_tol: f64,
    #[serde(default = "default_agreement_tol")]
    pub agreement_tol: f64,
    /// Tail start for measured root rates; defaults to `max(1, k/4)`.
    pub rate_n0: Option<usize>,
    #[serde(default = "default_modulus_radius")]
    pub modulus_radius: f64,
    #[serde(default = "default_modulus_samples")]
    pub modulus_samples: usize,
    /// Residual accepted by the verification report.
    #[serde(default = "default_residual_tol")]
    pub residual_tol: f64,

    pub output_dir: Option<PathBuf>,

    /// Bench grid; the coupled family sweeps every pair.
    #[serde(default)]
    pub bench_lambda_u: Vec<f64>,
    #[serde(default)]
    pub bench_lambda_s: Vec<f64>,
}

fn default_family_eps() -> f64 {
    0.01
}
fn default_scalar_factor() -> f64 {
    2.0
}
fn default_perturbation_profile() -> Recipe {
    Recipe::Constant
}
fn default_p() -> PNorm {
    PNorm::Infinity
}
fn default_safety() -> f64 {
    0.5
}
fn default_tol() -> f64 {
    1e-12
}
fn default_max_iterations() -> usize {
    10_000
}
fn default_newton_tol() -> f64 {
    1e-13
}
fn default_agreement_tol() -> f64 {
    1e-8
}
fn default_modulus_radius() -> f64 {
    0.01
}
fn default_modulus_samples() -> usize {
    2000
}
fn default_residual_tol() -> f64 {
    1e-10
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError(msg));
        if self.window == 0 {
            return bad("window must be at least 1".into());
        }
        if self.family == FamilyName::Coupled && (self.lambda_u.is_none() || self.lambda_s.is_none()) {
            return bad("coupled family needs lambda_u and lambda_s".into());
        }
        if !(self.defect_size >= 0.0 && self.perturbation_size >= 0.0) {
            return bad("defect_size and perturbation_size must be nonnegative".into());
        }
        for (name, recipe, rate) in [
            ("defect", self.defect_recipe, self.defect_rate),
            ("perturbation", self.perturbation_profile, self.perturbation_rate),
        ] {
            if recipe == Recipe::Geometric && !rate.is_some_and(|r| r > 0.0 && r < 1.0) {
                return bad(format!("geometric {name} profile needs {name}_rate in (0, 1)"));
            }
        }
        if self.mode == Some(Mode::Asymptotic) && (self.v.is_none() || self.epsilon.is_none()) {
            return bad("asymptotic mode needs v and epsilon".into());
        }
        let positive = [
            ("tol", self.tol),
            ("newton_tol", self.newton_tol),
            ("agreement_tol", self.agreement_tol),
            ("modulus_radius", self.modulus_radius),
            ("residual_tol", self.residual_tol),
        ];
        for (name, value) in positive {
            if !(value > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive".into());
        }
        Ok(())
    }

    pub fn defect_profile(&self) -> IndexProfile {
        profile(self.defect_recipe, self.defect_size, self.defect_rate)
    }

    pub fn perturbation_profile(&self) -> IndexProfile {
        match self.perturbation {
            Perturbation::None => IndexProfile::zero(),
            _ => profile(self.perturbation_profile, self.perturbation_size, self.perturbation_rate),
        }
    }

    /// The configured mode, or `fallback` when unset.
    pub fn mode_or(&self, fallback: Mode) -> Mode {
        self.mode.unwrap_or(fallback)
    }
}

fn profile(recipe: Recipe, size: f64, rate: Option<f64>) -> IndexProfile {
    match recipe {
        Recipe::Zero => IndexProfile::zero(),
        Recipe::Constant => IndexProfile::Constant { magnitude: size },
        Recipe::Harmonic => IndexProfile::Harmonic { magnitude: size },
        Recipe::Geometric => IndexProfile::Geometric {
            magnitude: size,
            rate: rate.unwrap_or(0.5),
        },
    }
}
