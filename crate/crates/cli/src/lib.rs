//! Config-driven pipelines behind the `bishadow` binary.
//!
//! Every command maps its outcome to an exit code:
//! 0 success, 1 certification or constants failure, 2 convergence
//! failure, 3 bound or envelope violation, 64 bad config, 65 failed
//! precondition, 74 I/O error.

pub mod bench;
pub mod config;
mod output;

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use bishadow::engine::{solve_infinite, EngineError, ShadowProblem, ShadowingResult, SolveOptions};
use bishadow::hyperbolicity::{
    build_splitting, compute_certificate, shadowing_constants, tilde_constants, Certificate, HyperbolicityError, ModeSpec,
    ShadowingConstants, Splitting, SplittingMethod, TildeConstants,
};
use bishadow::pseudoorbit::{generate, PseudoOrbit};
use bishadow::systems::{
    continuity_modulus, make_cat_family, make_coupled_linear_family, make_perturbed_family, make_scalar_family, MapFamily,
    PerturbedFamily, ShiftDisplacement, SinDisplacement, Window,
};
use bishadow::verify::{verify_result, VerificationReport};
use log::info;
use nalgebra::DVector;

pub use config::{ExperimentConfig, FamilyName, Mode, Perturbation};

pub mod exit {
    pub const OK: i32 = 0;
    pub const CERTIFICATION: i32 = 1;
    pub const CONVERGENCE: i32 = 2;
    pub const VIOLATION: i32 = 3;
    pub const CONFIG: i32 = 64;
    pub const PRECONDITION: i32 = 65;
    pub const IO: i32 = 74;
}

/// Half-width of the line segment used by the scalar family.
const SCALAR_HALF_WIDTH: f64 = 1e3;
const SCALAR_TUBE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (exit {})", self.message, self.code)
    }
}

impl std::error::Error for Failure {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Certify,
    Shadow,
    Limit,
    Asym,
    Bench,
}

/// What a command did: its exit code, a one-line summary and the files
/// it wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub code: i32,
    pub summary: String,
    pub files: Vec<PathBuf>,
}

/// Runs `command`; failures become outcomes with their exit code.
pub fn run(command: Command, config: &ExperimentConfig, out: &Path) -> Outcome {
    let mut files = Vec::new();
    let result = match command {
        Command::Certify => cmd_certify(config, out, &mut files),
        Command::Shadow | Command::Limit | Command::Asym => cmd_solve(command, config, out, &mut files),
        Command::Bench => bench::cmd_bench(config, out, &mut files),
    };
    match result {
        Ok(summary) => Outcome {
            code: exit::OK,
            summary,
            files,
        },
        Err(f) => Outcome {
            code: f.code,
            summary: f.message,
            files,
        },
    }
}

/// Everything up to (not including) the certificate check.
pub struct Prepared {
    pub window: Window,
    pub f: Arc<dyn MapFamily>,
    pub g: PerturbedFamily,
    pub orbit: PseudoOrbit,
    pub splitting: Splitting,
    pub certificate: Certificate,
}

pub fn build_family(config: &ExperimentConfig, window: Window) -> Result<Arc<dyn MapFamily>, Failure> {
    let bad = |e: &dyn fmt::Display| Failure::new(exit::CONFIG, e.to_string());
    Ok(match config.family {
        FamilyName::Cat => Arc::new(make_cat_family(window)),
        FamilyName::CatSin => Arc::new(bishadow::systems::make_cat_sin_family(config.family_eps, window).map_err(|e| bad(&e))?),
        FamilyName::Coupled => {
            let lu = config.lambda_u.expect("validated");
            let ls = config.lambda_s.expect("validated");
            Arc::new(make_coupled_linear_family(lu, ls, config.mu_u, config.mu_s, window).map_err(|e| bad(&e))?)
        }
        FamilyName::Scalar => Arc::new(make_scalar_family(config.scalar_factor, SCALAR_HALF_WIDTH, SCALAR_TUBE, window)),
    })
}

pub fn build_perturbed(config: &ExperimentConfig, f: Arc<dyn MapFamily>, window: Window) -> Result<PerturbedFamily, Failure> {
    let bad = |e: &dyn fmt::Display| Failure::new(exit::CONFIG, e.to_string());
    let d = f.chart().dim();
    let gap = config.perturbation_profile();
    match config.perturbation {
        Perturbation::None => Ok(PerturbedFamily::unperturbed(f)),
        _ if gap.peak() == 0.0 => Ok(PerturbedFamily::unperturbed(f)),
        Perturbation::Shift => {
            let dir = match &config.perturbation_direction {
                Some(v) if v.len() == d => DVector::from_column_slice(v),
                Some(v) => return Err(bad(&format!("perturbation_direction has {} entries, the chart has {d}", v.len()))),
                None if d == 2 => DVector::from_column_slice(&[0.6, 0.8]),
                None => DVector::from_fn(d, |r, _| if r == 0 { 1.0 } else { 0.0 }),
            };
            let disp = ShiftDisplacement::new(dir, gap).map_err(|e| bad(&e))?;
            make_perturbed_family(f, Arc::new(disp), gap, window, 4, config.seed).map_err(|e| bad(&e))
        }
        Perturbation::Sin => {
            if config.family == FamilyName::Scalar {
                return Err(bad(&"sin perturbation needs a torus family"));
            }
            let disp = SinDisplacement {
                eps: config.perturbation_size,
                dim: d,
            };
            let bound = disp.bound();
            let gap = bishadow::systems::IndexProfile::Constant { magnitude: bound };
            make_perturbed_family(f, Arc::new(disp), gap, window, 16, config.seed).map_err(|e| bad(&e))
        }
    }
}

fn start_point(config: &ExperimentConfig, f: &dyn MapFamily) -> Result<bishadow::charts::Point, Failure> {
    let chart = f.chart();
    let d = chart.dim();
    let coords = match &config.start {
        Some(v) => v.clone(),
        None if config.family == FamilyName::Scalar => vec![0.0; d],
        None => (0..d).map(|r| 0.1 * (r + 1) as f64).collect(),
    };
    chart
        .point_from_slice(&coords)
        .map_err(|e| Failure::new(exit::CONFIG, format!("start point: {e}")))
}

/// Builds the families, pseudo-orbit and splitting and computes the
/// certificate (which may record a violation).
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared, Failure> {
    let window = Window::new(config.window);
    let f = build_family(config, window)?;
    let start = start_point(config, f.as_ref())?;
    let orbit = generate(f.as_ref(), &start, window, config.defect_profile(), config.defect_directions, config.seed)
        .map_err(|e| Failure::new(exit::PRECONDITION, format!("pseudo-orbit: {e}")))?;
    let g = build_perturbed(config, f.clone(), window)?;
    // the coupled family is specified by its coordinate blocks
    let method = match (config.splitting, config.family) {
        (Some(s), _) => s.into(),
        (None, FamilyName::Coupled) => SplittingMethod::Coordinate,
        (None, _) => SplittingMethod::default_for(f.as_ref(), window),
    };
    let splitting = build_splitting(f.as_ref(), window, &orbit.points, method).map_err(constants_failure)?;
    let eta = continuity_modulus(f.as_ref(), window, config.modulus_radius, config.modulus_samples, config.seed);
    let certificate = compute_certificate(f.as_ref(), &splitting, &orbit.points, eta, eta > 0.0).map_err(constants_failure)?;
    info!(
        "{}: window {}, max defect {:e}, certificate {}",
        f.label(),
        config.window,
        orbit.defects.iter().copied().fold(0.0, f64::max),
        if certificate.passed() { "passed" } else { "failed" }
    );
    Ok(Prepared {
        window,
        f,
        g,
        orbit,
        splitting,
        certificate,
    })
}

fn constants_failure(e: HyperbolicityError) -> Failure {
    Failure::new(exit::CERTIFICATION, e.to_string())
}

pub fn mode_spec(config: &ExperimentConfig, mode: Mode) -> Result<ModeSpec, Failure> {
    Ok(match mode {
        Mode::Finite | Mode::Infinite => ModeSpec::Finite,
        Mode::Limit => ModeSpec::Limit,
        Mode::Asymptotic => match (config.v, config.epsilon) {
            (Some(v), Some(epsilon)) => ModeSpec::Asymptotic { v, epsilon },
            _ => return Err(Failure::new(exit::CONFIG, "asymptotic mode needs v and epsilon")),
        },
    })
}

/// `tilde` constants and `L`, `delta` for `mode`; needs a passing
/// certificate.
pub fn constants(prepared: &Prepared, config: &ExperimentConfig, mode: Mode) -> Result<(TildeConstants, ShadowingConstants), Failure> {
    prepared.certificate.check().map_err(constants_failure)?;
    let tilde = tilde_constants(&prepared.certificate, config.safety).map_err(constants_failure)?;
    let rho = prepared.f.chart().injectivity_radius();
    let constants = shadowing_constants(&tilde, rho, mode_spec(config, mode)?, config.delta).map_err(constants_failure)?;
    Ok((tilde, constants))
}

pub fn solve_options(config: &ExperimentConfig) -> SolveOptions {
    SolveOptions {
        p: config.p,
        tol: config.tol,
        max_iterations: config.max_iterations,
        newton_tol: config.newton_tol,
        agreement_tol: config.agreement_tol,
        max_window: config.window,
        ..SolveOptions::default()
    }
}

/// Runs the solve for `mode`.
pub fn solve(
    prepared: &Prepared,
    config: &ExperimentConfig,
    mode: Mode,
    tilde: TildeConstants,
    constants: ShadowingConstants,
) -> Result<ShadowingResult, EngineError> {
    let opts = solve_options(config);
    if mode == Mode::Infinite {
        let start = config.start_window.unwrap_or((config.window / 8).max(2));
        return solve_infinite(
            prepared.f.as_ref(),
            &prepared.g,
            &prepared.orbit,
            &prepared.splitting,
            tilde,
            constants,
            start,
            opts,
        );
    }
    let problem = ShadowProblem::new(
        prepared.f.as_ref(),
        &prepared.g,
        &prepared.orbit,
        &prepared.splitting,
        tilde,
        constants,
        opts,
    )?;
    match mode {
        Mode::Limit => problem.solve_limit(),
        Mode::Asymptotic => problem.solve_asymptotic(config.rate_n0),
        _ => problem.solve_finite(),
    }
}

/// Exit code for an engine error.
pub fn engine_exit_code(e: &EngineError) -> i32 {
    match e {
        EngineError::NonConvergence { .. }
        | EngineError::NotAnOrbit { .. }
        | EngineError::NewtonDivergence { .. }
        | EngineError::ScheduleExhausted { .. }
        | EngineError::System(_) => exit::CONVERGENCE,
        EngineError::BoundViolation(_) | EngineError::EnvelopeViolation { .. } | EngineError::RateViolation { .. } => exit::VIOLATION,
        EngineError::Precondition(_) | EngineError::WindowTooSmall { .. } | EngineError::PseudoOrbit(_) => exit::PRECONDITION,
        EngineError::Constants(_) | EngineError::TargetOutOfRange { .. } => exit::CERTIFICATION,
        EngineError::Parameter(_) => exit::CONFIG,
    }
}

fn cmd_certify(config: &ExperimentConfig, out: &Path, files: &mut Vec<PathBuf>) -> Result<String, Failure> {
    let prepared = prepare(config)?;
    let mode = config.mode_or(Mode::Finite);
    let constants = if prepared.certificate.passed() {
        Some(constants(&prepared, config, mode))
    } else {
        None
    };
    let (tilde, shadow) = match &constants {
        Some(Ok((t, c))) => (Some(t), Some(c)),
        _ => (None, None),
    };
    output::write_certificate(out, &prepared.certificate, tilde, shadow, files)?;
    if let Some(v) = &prepared.certificate.violation {
        return Err(Failure::new(
            exit::CERTIFICATION,
            format!("certification failed: {} violated at index {}", v.inequality, v.index),
        ));
    }
    if let Some(Err(f)) = constants {
        return Err(f);
    }
    Ok(format!(
        "certificate passed: lambda_u = {:.7}, lambda_s = {:.7}, h = {:.7}",
        prepared.certificate.lambda_u_min, prepared.certificate.lambda_s_max, prepared.certificate.h
    ))
}

fn command_mode(command: Command, config: &ExperimentConfig) -> Result<Mode, Failure> {
    let (fallback, allowed): (Mode, &[Mode]) = match command {
        Command::Shadow => (Mode::Finite, &[Mode::Finite, Mode::Infinite]),
        Command::Limit => (Mode::Limit, &[Mode::Limit]),
        _ => (Mode::Asymptotic, &[Mode::Asymptotic]),
    };
    let mode = config.mode_or(fallback);
    if !allowed.contains(&mode) {
        return Err(Failure::new(exit::CONFIG, format!("mode '{}' does not fit this subcommand", mode.as_str())));
    }
    Ok(mode)
}

fn cmd_solve(command: Command, config: &ExperimentConfig, out: &Path, files: &mut Vec<PathBuf>) -> Result<String, Failure> {
    let mode = command_mode(command, config)?;
    mode_spec(config, mode)?;
    let prepared = prepare(config)?;
    let cons = constants(&prepared, config, mode);
    let (tilde, shadow) = match &cons {
        Ok((t, c)) => (Some(t), Some(c)),
        Err(_) => (None, None),
    };
    output::write_certificate(out, &prepared.certificate, tilde, shadow, files)?;
    let (tilde, shadow) = cons?;
    let result = match solve(&prepared, config, mode, tilde, shadow) {
        Ok(r) => r,
        Err(EngineError::BoundViolation(r)) => {
            output::write_result(out, &r, files)?;
            return Err(Failure::new(
                exit::VIOLATION,
                format!("bound violated: |d|_p = {:e} > {:e}", r.achieved_norm, r.combined_bound),
            ));
        }
        Err(e) => return Err(Failure::new(engine_exit_code(&e), e.to_string())),
    };
    output::write_result(out, &result, files)?;
    let report: VerificationReport =
        verify_result(&result, &prepared.g, config.residual_tol).map_err(|e| Failure::new(exit::VIOLATION, e.to_string()))?;
    output::write_json(&out.join("verification.json"), &report, files)?;
    if !report.pass {
        let failed: Vec<&str> = report.checks.iter().filter(|c| c.required && !c.pass).map(|c| c.name.as_str()).collect();
        return Err(Failure::new(exit::VIOLATION, format!("verification failed: {}", failed.join(", "))));
    }
    Ok(format!(
        "{} solve converged in {} iterations: |d|_{} = {:e} <= {:e}",
        result.mode, result.iterations, result.p, result.achieved_norm, result.combined_bound
    ))
}
