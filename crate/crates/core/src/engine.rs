//! The shadowing engine: the tube map `F_z`, its inverse `Q_z`, the
//! sequence-space operator `H` and the finite, infinite, limit and
//! asymptotic solves.
//!
//! `H` maps a tangent sequence `z` to `w` by
//!
//! ```text
//! Pi^s w_{-k}    = 0
//! Pi^s w_{i+1}   = Pi^s G_i(z_i)
//! Pi^u w_k       = 0
//! Pi^u w_i       = Q_{z_i}( Pi^u_{i+1}( -G_i(z_i) + F_i(z_i) - F_i(Pi^s z_i) + z_{i+1} ) )
//! ```
//!
//! Its fixed points are exactly the `g`-orbits `y_i = exp_{x_i}(z_i)`.
//! Fixed points are found by plain iteration from `z = 0`.

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::charts::{seq_pnorm, PNorm, Point, Tangent};
use crate::hyperbolicity::{HyperbolicityError, ShadowingConstants, Splitting, TildeConstants};
use crate::pseudoorbit::{classify, root_rate, tail_sup, PseudoOrbit, PseudoOrbitError};
use crate::systems::{lift_step, LiftedStep, MapFamily, PerturbedFamily, SystemError, Window};

/// Relative slack used when comparing against envelopes and radii.
const ENVELOPE_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    PseudoOrbit(#[from] PseudoOrbitError),
    #[error(transparent)]
    Constants(#[from] HyperbolicityError),
    #[error("unstable target at index {index} has norm {norm:e}, above the admissible {limit:e}")]
    TargetOutOfRange { index: i64, norm: f64, limit: f64 },
    #[error("newton solve for Q_z diverged at index {index} (residual {residual:e})")]
    NewtonDivergence { index: i64, residual: f64 },
    #[error("fixed-point iteration did not converge after {iterations} iterations (last change {last_change:e})")]
    NonConvergence {
        iterations: usize,
        last_change: f64,
        contraction_log: Vec<f64>,
    },
    #[error("converged sequence is not a g-orbit: max |z_(i+1) - G_i(z_i)| = {residual:e}")]
    NotAnOrbit { residual: f64 },
    #[error("shadowing bound violated: |d|_p = {:e} > L |max(delta_i, gamma_i)|_p = {:e}", .0.achieved_norm, .0.combined_bound)]
    BoundViolation(Box<ShadowingResult>),
    #[error("envelope violated at index {index}{}: |z| = {value:e} > {cap:e}", band_suffix(.band))]
    EnvelopeViolation {
        index: i64,
        band: Option<usize>,
        value: f64,
        cap: f64,
    },
    #[error("rate violated: root rate of distances {rate} exceeds v + epsilon = {limit}")]
    RateViolation { rate: f64, limit: f64 },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("window |i| <= {k} is too small: asymptotic mode needs k > k1 = {k1}")]
    WindowTooSmall { k: usize, k1: usize },
    #[error("window schedule exhausted at |i| <= {max_window} without central agreement (last change {last_change:e})")]
    ScheduleExhausted { max_window: usize, last_change: f64 },
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

fn band_suffix(band: &Option<usize>) -> String {
    band.map(|n| format!(" (band {n})")).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub p: PNorm,
    /// Stop when `sup_i |w_i - z_i| <= tol`.
    pub tol: f64,
    pub max_iterations: usize,
    pub newton_tol: f64,
    pub newton_max_steps: usize,
    /// Abort after this many consecutive iterations with contraction
    /// factor above 1.
    pub divergence_patience: usize,
    pub doubling_factor: usize,
    pub agreement_tol: f64,
    pub max_window: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            p: PNorm::Infinity,
            tol: 1e-12,
            max_iterations: 10_000,
            newton_tol: 1e-13,
            newton_max_steps: 50,
            divergence_patience: 10,
            doubling_factor: 2,
            agreement_tol: 1e-8,
            max_window: 4096,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<(), EngineError> {
        let positive = [self.tol, self.newton_tol, self.agreement_tol];
        if positive.iter().any(|t| !(*t > 0.0)) {
            return Err(EngineError::Parameter("tolerances must be positive".into()));
        }
        if self.max_iterations == 0 || self.newton_max_steps == 0 || self.divergence_patience == 0 {
            return Err(EngineError::Parameter("iteration limits must be positive".into()));
        }
        if self.doubling_factor < 2 {
            return Err(EngineError::Parameter("doubling factor must be at least 2".into()));
        }
        Ok(())
    }
}

/// Tangent vectors `z_i` at `x_i` with their splitting components.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentSequence {
    pub window: Window,
    pub z: Vec<Tangent>,
    pub stable: Vec<Tangent>,
    pub unstable: Vec<Tangent>,
}

impl TangentSequence {
    pub fn zeros(window: Window, dim: usize) -> Self {
        let zero = vec![Tangent::zeros(dim); window.len()];
        Self {
            window,
            z: zero.clone(),
            stable: zero.clone(),
            unstable: zero,
        }
    }

    pub fn new(splitting: &Splitting, z: Vec<Tangent>) -> Self {
        let window = splitting.window();
        assert_eq!(z.len(), window.len());
        let stable = window.indices().zip(&z).map(|(i, v)| splitting.proj_s(i) * v).collect();
        let unstable = window.indices().zip(&z).map(|(i, v)| splitting.proj_u(i) * v).collect();
        Self {
            window,
            z,
            stable,
            unstable,
        }
    }

    fn from_components(window: Window, stable: Vec<Tangent>, unstable: Vec<Tangent>) -> Self {
        let z = stable.iter().zip(&unstable).map(|(s, u)| s + u).collect();
        Self {
            window,
            z,
            stable,
            unstable,
        }
    }

    pub fn at(&self, i: i64) -> &Tangent {
        &self.z[self.window.position(i)]
    }

    pub fn norms(&self) -> Vec<f64> {
        self.z.iter().map(|v| v.norm()).collect()
    }

    pub fn stable_norms(&self) -> Vec<f64> {
        self.stable.iter().map(|v| v.norm()).collect()
    }

    pub fn unstable_norms(&self) -> Vec<f64> {
        self.unstable.iter().map(|v| v.norm()).collect()
    }

    /// `max_i |Pi^s z_i| <= r` and `max_i |Pi^u z_i| <= r`.
    pub fn in_phi(&self, r: f64) -> bool {
        self.in_phi_p(r, PNorm::Infinity)
    }

    /// `|{Pi^s z_i}|_p <= r` and `|{Pi^u z_i}|_p <= r`.
    pub fn in_phi_p(&self, r: f64, p: PNorm) -> bool {
        seq_pnorm(&self.stable_norms(), p) <= r && seq_pnorm(&self.unstable_norms(), p) <= r
    }

    /// `|z_i| <= cap(i)` for every index.
    pub fn within(&self, cap: impl Fn(i64) -> f64) -> bool {
        self.window.indices().zip(&self.z).all(|(i, v)| v.norm() <= cap(i))
    }

    pub fn sup_distance(&self, other: &TangentSequence) -> f64 {
        self.z.iter().zip(&other.z).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }
}

/// Everything a solve needs: the lifted `F_i` and `G_i`, the splitting and
/// the constants.
pub struct ShadowProblem<'a> {
    f: &'a dyn MapFamily,
    orbit: &'a PseudoOrbit,
    splitting: &'a Splitting,
    tilde: TildeConstants,
    constants: ShadowingConstants,
    gaps: Vec<f64>,
    f_steps: Vec<LiftedStep<'a>>,
    g_steps: Vec<LiftedStep<'a>>,
    q_limit: f64,
    opts: SolveOptions,
}

impl<'a> ShadowProblem<'a> {
    pub fn new(
        f: &'a dyn MapFamily,
        g: &'a PerturbedFamily,
        orbit: &'a PseudoOrbit,
        splitting: &'a Splitting,
        tilde: TildeConstants,
        constants: ShadowingConstants,
        opts: SolveOptions,
    ) -> Result<Self, EngineError> {
        opts.validate()?;
        let window = orbit.window;
        if splitting.window() != window {
            return Err(EngineError::Parameter(format!(
                "splitting window |i| <= {} does not match orbit window |i| <= {}",
                splitting.window().k,
                window.k
            )));
        }
        let mut f_steps = Vec::with_capacity(2 * window.k);
        let mut g_steps = Vec::with_capacity(2 * window.k);
        for i in window.transitions() {
            let (x, y) = (orbit.point(i), orbit.point(i + 1));
            f_steps.push(lift_step(f, i, x, y)?);
            g_steps.push(lift_step(g, i, x, y)?);
        }
        let gaps = g.gaps(window);
        let scale = constants
            .delta
            .max(seq_pnorm(&orbit.defects, PNorm::Infinity))
            .max(seq_pnorm(&gaps, PNorm::Infinity));
        let q_limit = tilde.lambda_u * constants.l * scale * (1.0 + ENVELOPE_SLACK);
        Ok(Self {
            f,
            orbit,
            splitting,
            tilde,
            constants,
            gaps,
            f_steps,
            g_steps,
            q_limit,
            opts,
        })
    }

    pub fn window(&self) -> Window {
        self.orbit.window
    }

    pub fn dim(&self) -> usize {
        self.f.chart().dim()
    }

    pub fn constants(&self) -> &ShadowingConstants {
        &self.constants
    }

    pub fn tilde(&self) -> &TildeConstants {
        &self.tilde
    }

    pub fn splitting(&self) -> &Splitting {
        self.splitting
    }

    pub fn gaps(&self) -> &[f64] {
        &self.gaps
    }

    /// `L * delta`, the radius of the tube the operator acts on.
    pub fn tube_radius(&self) -> f64 {
        self.constants.l * self.constants.delta
    }

    fn step(&self, i: i64) -> usize {
        self.window().position(i)
    }

    /// `F_i(z)`.
    pub fn lift_f(&self, i: i64, z: &Tangent) -> Result<Tangent, EngineError> {
        Ok(self.f_steps[self.step(i)].apply(z)?)
    }

    /// `G_i(z)`.
    pub fn lift_g(&self, i: i64, z: &Tangent) -> Result<Tangent, EngineError> {
        Ok(self.g_steps[self.step(i)].apply(z)?)
    }

    /// `F_z(omega) = Pi^u_{i+1}(F_i(Pi^s z + omega) - F_i(Pi^s z))`.
    pub fn tube_map(&self, i: i64, z: &Tangent, omega: &Tangent) -> Result<Tangent, EngineError> {
        let zs = self.splitting.proj_s(i) * z;
        let a = self.lift_f(i, &(&zs + omega))?;
        let b = self.lift_f(i, &zs)?;
        Ok(self.splitting.proj_u(i + 1) * (a - b))
    }

    /// Largest admissible `|target|` for [`Self::invert_unstable`].
    pub fn target_limit(&self) -> f64 {
        self.q_limit
    }

    /// `Q_z(target)`: the `omega` in `E^u_i` with `F_z(omega) = target`.
    pub fn invert_unstable(&self, i: i64, z: &Tangent, target: &Tangent) -> Result<Tangent, EngineError> {
        let du = self.splitting.unstable_dim();
        if du == 0 {
            return Ok(Tangent::zeros(self.dim()));
        }
        let norm = target.norm();
        if norm > self.q_limit {
            return Err(EngineError::TargetOutOfRange {
                index: i,
                norm,
                limit: self.q_limit,
            });
        }
        let basis = self.splitting.basis_u(i);
        let coords_next = self.splitting.basis_inverse(i + 1).rows(0, du).into_owned();
        let tau = &coords_next * target;
        let step = &self.f_steps[self.step(i)];
        if let Some(b) = step.linear_part() {
            let b11 = &coords_next * b * &basis;
            let a = solve_square(b11, &tau).ok_or(EngineError::NewtonDivergence { index: i, residual: f64::INFINITY })?;
            return Ok(&basis * a);
        }
        let zs = self.splitting.proj_s(i) * z;
        let base = self.lift_f(i, &zs)?;
        let phi = |a: &DVector<f64>| -> Result<DVector<f64>, EngineError> {
            let image = self.lift_f(i, &(&zs + &basis * a))?;
            Ok(&coords_next * (image - &base))
        };
        let jac = |a: &DVector<f64>| -> Result<DMatrix<f64>, EngineError> {
            let d = step.derivative(&(&zs + &basis * a))?;
            Ok(&coords_next * d * &basis)
        };
        let mut a = solve_square(jac(&DVector::zeros(du))?, &tau).ok_or(EngineError::NewtonDivergence {
            index: i,
            residual: f64::INFINITY,
        })?;
        let mut residual = f64::INFINITY;
        for _ in 0..self.opts.newton_max_steps {
            let r = phi(&a)? - &tau;
            residual = r.norm();
            if residual <= self.opts.newton_tol {
                return Ok(&basis * a);
            }
            let delta = solve_square(jac(&a)?, &r).ok_or(EngineError::NewtonDivergence { index: i, residual })?;
            a -= delta;
        }
        Err(EngineError::NewtonDivergence { index: i, residual })
    }

    /// One application of `H`.
    pub fn apply(&self, z: &TangentSequence) -> Result<TangentSequence, EngineError> {
        let window = self.window();
        let d = self.dim();
        let n = window.len();
        let mut stable = vec![Tangent::zeros(d); n];
        let mut unstable = vec![Tangent::zeros(d); n];
        let mut g_values = Vec::with_capacity(n - 1);
        for i in window.transitions() {
            let p = self.step(i);
            let gz = self.lift_g(i, &z.z[p])?;
            stable[p + 1] = self.splitting.proj_s(i + 1) * &gz;
            g_values.push(gz);
        }
        for i in window.transitions().rev() {
            let p = self.step(i);
            let zi = &z.z[p];
            let fz = self.lift_f(i, zi)?;
            let fzs = self.lift_f(i, &z.stable[p])?;
            let inner = -&g_values[p] + fz - fzs + &z.z[p + 1];
            let target = self.splitting.proj_u(i + 1) * inner;
            unstable[p] = self.invert_unstable(i, zi, &target)?;
        }
        Ok(TangentSequence::from_components(window, stable, unstable))
    }

    /// `max_i |z_{i+1} - G_i(z_i)|`.
    pub fn orbit_defect(&self, z: &TangentSequence) -> Result<f64, EngineError> {
        let mut worst = 0.0_f64;
        for i in self.window().transitions() {
            let p = self.step(i);
            let gz = self.lift_g(i, &z.z[p])?;
            worst = worst.max((&z.z[p + 1] - gz).norm());
        }
        Ok(worst)
    }

    /// Iterates `H` from zero; `envelope` is checked on every iterate.
    fn iterate(&self, mut envelope: impl FnMut(&TangentSequence) -> Result<(), EngineError>) -> Result<Iterated, EngineError> {
        let mut z = TangentSequence::zeros(self.window(), self.dim());
        let mut factors = Vec::new();
        let mut prev_change: Option<f64> = None;
        let mut growing = 0;
        let mut last_change = f64::INFINITY;
        for it in 1..=self.opts.max_iterations {
            let w = self.apply(&z)?;
            envelope(&w)?;
            let change = w.sup_distance(&z);
            if let Some(prev) = prev_change {
                let factor = if prev > 0.0 { change / prev } else { 0.0 };
                factors.push(factor);
                growing = if factor > 1.0 { growing + 1 } else { 0 };
                if growing >= self.opts.divergence_patience {
                    return Err(EngineError::NonConvergence {
                        iterations: it,
                        last_change: change,
                        contraction_log: factors,
                    });
                }
            }
            z = w;
            last_change = change;
            prev_change = Some(change);
            if change <= self.opts.tol {
                debug!("H converged after {it} iterations (change {change:e})");
                return Ok(Iterated {
                    z,
                    iterations: it,
                    last_change: change,
                    factors,
                });
            }
        }
        Err(EngineError::NonConvergence {
            iterations: self.opts.max_iterations,
            last_change,
            contraction_log: factors,
        })
    }

    fn finish(&self, mode: &str, it: Iterated) -> Result<ShadowingResult, EngineError> {
        let orbit_residual = self.orbit_defect(&it.z)?;
        if !(orbit_residual <= 10.0 * self.opts.tol) {
            return Err(EngineError::NotAnOrbit { residual: orbit_residual });
        }
        let chart = self.f.chart();
        let mut ys = Vec::with_capacity(self.window().len());
        for (i, z) in self.window().indices().zip(&it.z.z) {
            let y = chart
                .exp(self.orbit.point(i), z)
                .map_err(|source| SystemError::TubeEscape { index: i, source })?;
            ys.push(y);
        }
        let distances = it.z.norms();
        let p = self.opts.p;
        let combined: Vec<f64> = self.orbit.defects.iter().zip(&self.gaps).map(|(a, b)| a.max(*b)).collect();
        let defect_norm = seq_pnorm(&self.orbit.defects, p);
        let gap_norm = seq_pnorm(&self.gaps, p);
        let delta = self.constants.delta;
        let l = self.constants.l;
        Ok(ShadowingResult {
            mode: mode.to_owned(),
            window: self.window(),
            p,
            l,
            delta,
            base: self.orbit.points.clone(),
            orbit: ys,
            achieved_norm: seq_pnorm(&distances, p),
            distances,
            defect_norm,
            gap_norm,
            bound: l * defect_norm,
            combined_bound: l * seq_pnorm(&combined, p),
            hypotheses_hold: defect_norm <= delta * (1.0 + ENVELOPE_SLACK) && gap_norm <= delta * (1.0 + ENVELOPE_SLACK),
            defects: self.orbit.defects.clone(),
            gaps: self.gaps.clone(),
            iterations: it.iterations,
            fixed_point_residual: it.last_change,
            orbit_residual,
            contraction_log: it.factors,
            limit: None,
            rate: None,
            schedule: None,
        })
    }

    /// Fixed point of `H` on the window, with the `l^p` bound asserted
    /// against `max(delta_i, gamma_i)` (which is `Delta` when `g` is no
    /// farther from `f` than the defects).
    pub fn solve_finite(&self) -> Result<ShadowingResult, EngineError> {
        let it = self.iterate(|_| Ok(()))?;
        let result = self.finish("finite", it)?;
        if !(result.achieved_norm <= result.combined_bound + 1e-12) {
            return Err(EngineError::BoundViolation(Box::new(result)));
        }
        Ok(result)
    }

    /// The fixed point with the limit-mode envelopes asserted at every
    /// iteration and per band on the result.
    pub fn solve_limit(&self) -> Result<ShadowingResult, EngineError> {
        let window = self.window();
        let n0 = (window.k / 4).max(1);
        let defect_profile = classify(&self.orbit.defects, window, self.opts.p, n0)?;
        let gap_profile = classify(&self.gaps, window, self.opts.p, n0)?;
        if !defect_profile.vanishing {
            return Err(EngineError::Precondition("defects are not vanishing on the window".into()));
        }
        if !gap_profile.vanishing {
            return Err(EngineError::Precondition("the f-g gap is not vanishing on the window".into()));
        }
        let combined: Vec<f64> = self.orbit.defects.iter().zip(&self.gaps).map(|(a, b)| a.max(*b)).collect();
        let l = self.constants.l;
        let ld = self.tube_radius();
        let ladder = limit_ladder(&combined, window, l * self.constants.delta);
        let caps: Vec<(usize, f64)> = (0..=window.k)
            .map(|a| {
                let band = ladder.iter().rposition(|b| b.start <= a).expect("ladder starts at 0");
                (band, l * ladder[band].epsilon)
            })
            .collect();
        let it = self.iterate(|w| {
            for (i, v) in window.indices().zip(&w.z) {
                let (band, cap) = caps[i.unsigned_abs() as usize];
                let p = window.position(i);
                let comp = w.stable[p].norm().max(w.unstable[p].norm());
                if comp > ld * (1.0 + ENVELOPE_SLACK) {
                    return Err(EngineError::EnvelopeViolation {
                        index: i,
                        band: None,
                        value: comp,
                        cap: ld,
                    });
                }
                let norm = v.norm();
                if norm > cap * (1.0 + ENVELOPE_SLACK) {
                    return Err(EngineError::EnvelopeViolation {
                        index: i,
                        band: Some(band),
                        value: norm,
                        cap,
                    });
                }
            }
            Ok(())
        })?;
        let mut result = self.finish("limit", it)?;
        let report = limit_report(&result.distances, window, &ladder, l);
        if let Some(bad) = report.bands.iter().find(|b| !b.pass) {
            let worst = window
                .indices()
                .zip(&result.distances)
                .filter(|(i, _)| {
                    let a = i.unsigned_abs() as usize;
                    a >= bad.start && a < bad.end
                })
                .max_by(|a, b| a.1.total_cmp(b.1))
                .expect("nonempty band");
            return Err(EngineError::EnvelopeViolation {
                index: worst.0,
                band: Some(bad.n),
                value: *worst.1,
                cap: bad.cap,
            });
        }
        result.limit = Some(report);
        Ok(result)
    }

    /// The fixed point with the geometric envelope asserted; the root rate
    /// of the distances past `k1` must not exceed `v + epsilon`.
    pub fn solve_asymptotic(&self, n0: Option<usize>) -> Result<ShadowingResult, EngineError> {
        let window = self.window();
        let (v, epsilon) = match self.constants.mode {
            crate::hyperbolicity::ModeSpec::Asymptotic { v, epsilon } => (v, epsilon),
            other => {
                return Err(EngineError::Parameter(format!("asymptotic solve needs asymptotic constants, got {other}")));
            }
        };
        let q = v + epsilon;
        let m = self.constants.rate_steps.expect("asymptotic constants carry rate_steps");
        let n0 = n0.unwrap_or((window.k / 4).max(1));
        let defect_rate = root_rate(&self.orbit.defects, window.first(), n0)?;
        let gap_rate = root_rate(&self.gaps, window.first(), n0)?;
        if defect_rate > v {
            return Err(EngineError::Precondition(format!(
                "defect root rate {defect_rate} over |i| >= {n0} exceeds v = {v}"
            )));
        }
        if gap_rate > v {
            return Err(EngineError::Precondition(format!("gap root rate {gap_rate} over |i| >= {n0} exceeds v = {v}")));
        }
        let combined: Vec<f64> = self.orbit.defects.iter().zip(&self.gaps).map(|(a, b)| a.max(*b)).collect();
        let k0 = geometric_threshold(&combined, window, q);
        let k1 = k0 + m;
        if window.k <= k1 {
            return Err(EngineError::WindowTooSmall { k: window.k, k1 });
        }
        let ld = self.tube_radius();
        let cap = |i: i64| {
            let a = i.unsigned_abs() as usize;
            if a <= k1 {
                ld
            } else {
                ld * q.powi((a - k1) as i32)
            }
        };
        let it = self.iterate(|w| {
            for (p, i) in window.indices().enumerate() {
                let c = cap(i);
                let comp = w.stable[p].norm().max(w.unstable[p].norm());
                if comp > c * (1.0 + ENVELOPE_SLACK) {
                    return Err(EngineError::EnvelopeViolation {
                        index: i,
                        band: None,
                        value: comp,
                        cap: c,
                    });
                }
            }
            Ok(())
        })?;
        let mut result = self.finish("asymptotic", it)?;
        let mut worst_ratio = 0.0_f64;
        for (i, &d) in window.indices().zip(&result.distances) {
            let a = i.unsigned_abs() as usize;
            if a >= k1 {
                let c = 2.0 * ld * q.powi((a - k1) as i32);
                worst_ratio = worst_ratio.max(d / c);
                if d > c * (1.0 + ENVELOPE_SLACK) {
                    return Err(EngineError::EnvelopeViolation {
                        index: i,
                        band: None,
                        value: d,
                        cap: c,
                    });
                }
            }
        }
        let distance_rate = root_rate(&result.distances, window.first(), k1.max(1))?;
        let report = RateReport {
            v,
            epsilon,
            k0,
            k1,
            n0,
            defect_rate,
            gap_rate,
            distance_rate,
            envelope_ratio: worst_ratio,
            pass: distance_rate <= q + 1e-9,
        };
        if !report.pass {
            return Err(EngineError::RateViolation {
                rate: distance_rate,
                limit: q,
            });
        }
        result.rate = Some(report);
        Ok(result)
    }
}

fn solve_square(m: DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let out = m.lu().solve(rhs)?;
    out.iter().all(|v| v.is_finite()).then_some(out)
}

struct Iterated {
    z: TangentSequence,
    iterations: usize,
    last_change: f64,
    factors: Vec<f64>,
}

/// One band `|i| in [start, end)` of the limit-mode schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub n: usize,
    pub epsilon: f64,
    pub start: usize,
    pub end: usize,
    /// `L * epsilon_n`.
    pub cap: f64,
    pub max_distance: f64,
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitReport {
    pub bands: Vec<Band>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub v: f64,
    pub epsilon: f64,
    pub k0: usize,
    pub k1: usize,
    pub n0: usize,
    pub defect_rate: f64,
    pub gap_rate: f64,
    /// Root rate of the distances over `|i| >= k1`.
    pub distance_rate: f64,
    /// `max d_i / (2 L delta (v+eps)^(|i|-k1))` over `|i| >= k1`.
    pub envelope_ratio: f64,
    pub pass: bool,
}

/// Thresholds `k_n` (smallest `N` with `max_{|i| >= N} s_i < eps_n`,
/// `eps_n = eps_0 / 2^n`) turned into the nonempty bands
/// `[k_n, k_{n+1})`, the last one clipped to the window.
pub fn limit_ladder(sizes: &[f64], window: Window, epsilon0: f64) -> Vec<Band> {
    let k = window.k;
    let tail = tail_sup(sizes, window.first(), k);
    let threshold = |eps: f64| (0..=k).find(|&n| tail[n] < eps).unwrap_or(k + 1);
    let mut bands: Vec<Band> = Vec::new();
    let mut eps = epsilon0;
    let mut start = threshold(eps);
    let mut n = 0;
    // an oversized first band still needs an entry so every index has a cap
    if start > 0 {
        bands.push(Band {
            n: 0,
            epsilon: eps,
            start: 0,
            end: start.min(k + 1),
            cap: 0.0,
            max_distance: 0.0,
            margin: 0.0,
            pass: true,
        });
    }
    while start <= k && eps > 0.0 {
        let next_eps = eps / 2.0;
        let next = threshold(next_eps);
        if next > start {
            bands.push(Band {
                n,
                epsilon: eps,
                start,
                end: next.min(k + 1),
                cap: 0.0,
                max_distance: 0.0,
                margin: 0.0,
                pass: true,
            });
        }
        eps = next_eps;
        start = next;
        n += 1;
    }
    bands
}

/// Fills in caps `L * eps_n` and per-band maxima of `distances`.
pub fn limit_report(distances: &[f64], window: Window, ladder: &[Band], l: f64) -> LimitReport {
    let mut bands = ladder.to_vec();
    for band in &mut bands {
        band.cap = l * band.epsilon;
        band.max_distance = window
            .indices()
            .zip(distances)
            .filter(|(i, _)| {
                let a = i.unsigned_abs() as usize;
                a >= band.start && a < band.end
            })
            .map(|(_, d)| *d)
            .fold(0.0, f64::max);
        band.margin = band.cap - band.max_distance;
        band.pass = band.max_distance <= band.cap * (1.0 + ENVELOPE_SLACK);
    }
    let pass = bands.iter().all(|b| b.pass);
    LimitReport { bands, pass }
}

/// Smallest `N` with `s_i < q^|i|` for every transition with `|i| >= N`.
pub fn geometric_threshold(sizes: &[f64], window: Window, q: f64) -> usize {
    let mut k0 = 0;
    for (j, &s) in sizes.iter().enumerate() {
        let a = (window.first() + j as i64).unsigned_abs() as usize;
        if !(s < q.powi(a as i32)) {
            k0 = k0.max(a + 1);
        }
    }
    k0
}

/// One step of the window-doubling schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStep {
    pub k: usize,
    pub iterations: usize,
    /// Max distance between this and the previous solution on the
    /// previous window's central half; absent for the first window.
    pub central_change: Option<f64>,
}

/// Solves on `|i| <= k, 2k, 4k, ...` (sub-windows of `orbit`) until two
/// consecutive solutions agree on the central half of the smaller window,
/// and returns that central segment.
#[allow(clippy::too_many_arguments)]
pub fn solve_infinite(
    f: &dyn MapFamily,
    g: &PerturbedFamily,
    orbit: &PseudoOrbit,
    splitting: &Splitting,
    tilde: TildeConstants,
    constants: ShadowingConstants,
    start_k: usize,
    opts: SolveOptions,
) -> Result<ShadowingResult, EngineError> {
    opts.validate()?;
    if start_k < 2 {
        return Err(EngineError::Parameter("window schedule needs a starting k >= 2".into()));
    }
    let cap = opts.max_window.min(orbit.window.k);
    let chart = f.chart();
    let mut schedule = Vec::new();
    let mut previous: Option<ShadowingResult> = None;
    let mut last_change = f64::INFINITY;
    let mut k = start_k;
    while k <= cap {
        let window = Window::new(k);
        let sub_orbit = orbit.restrict(window)?;
        let sub_split = splitting.restrict(window)?;
        let problem = ShadowProblem::new(f, g, &sub_orbit, &sub_split, tilde, constants, opts)?;
        let result = problem.solve_finite()?;
        let mut step = ScheduleStep {
            k,
            iterations: result.iterations,
            central_change: None,
        };
        if let Some(prev) = &previous {
            let half = prev.window.k / 2;
            let mut change = 0.0_f64;
            for i in -(half as i64)..=(half as i64) {
                let a = &result.orbit[window.position(i)];
                let b = &prev.orbit[prev.window.position(i)];
                change = change.max(chart.distance(a, b).expect("same chart"));
            }
            step.central_change = Some(change);
            schedule.push(step);
            last_change = change;
            if change <= opts.agreement_tol {
                let central = Window::new(half);
                let mut out = result.restrict(central);
                out.mode = "infinite".into();
                // norms over the central segment are bounded by the
                // largest window's norms
                let defects = &orbit.restrict(window)?.defects;
                let gaps = g.gaps(window);
                let combined: Vec<f64> = defects.iter().zip(&gaps).map(|(a, b)| a.max(*b)).collect();
                out.defect_norm = seq_pnorm(defects, opts.p);
                out.gap_norm = seq_pnorm(&gaps, opts.p);
                out.bound = out.l * out.defect_norm;
                out.combined_bound = out.l * seq_pnorm(&combined, opts.p);
                out.schedule = Some(schedule);
                if !(out.achieved_norm <= out.combined_bound + 1e-12) {
                    return Err(EngineError::BoundViolation(Box::new(out)));
                }
                return Ok(out);
            }
        } else {
            schedule.push(step);
        }
        previous = Some(result);
        k *= opts.doubling_factor;
    }
    Err(EngineError::ScheduleExhausted {
        max_window: cap,
        last_change,
    })
}

/// Output of a solve. Every float vector is indexed like its sequence:
/// points by `-k ..= k`, defects and gaps by transitions `-k .. k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowingResult {
    pub mode: String,
    pub window: Window,
    pub p: PNorm,
    #[serde(rename = "L")]
    pub l: f64,
    pub delta: f64,
    /// Pseudo-orbit `x_i`.
    pub base: Vec<Point>,
    /// Shadow orbit `y_i`.
    pub orbit: Vec<Point>,
    pub distances: Vec<f64>,
    pub defects: Vec<f64>,
    pub gaps: Vec<f64>,
    pub achieved_norm: f64,
    pub defect_norm: f64,
    pub gap_norm: f64,
    /// `L * |Delta|_p`.
    pub bound: f64,
    /// `L * |max(delta_i, gamma_i)|_p`.
    pub combined_bound: f64,
    /// `|Delta|_p <= delta` and `|f - g|_p <= delta`.
    pub hypotheses_hold: bool,
    pub iterations: usize,
    pub fixed_point_residual: f64,
    pub orbit_residual: f64,
    #[serde(with = "crate::serde_float::vec")]
    pub contraction_log: Vec<f64>,
    pub limit: Option<LimitReport>,
    pub rate: Option<RateReport>,
    pub schedule: Option<Vec<ScheduleStep>>,
}

impl ShadowingResult {
    /// The central segment on a smaller window; norms are recomputed.
    pub fn restrict(&self, window: Window) -> ShadowingResult {
        assert!(window.k <= self.window.k);
        let off = self.window.k - window.k;
        let pts = off..off + window.len();
        let trs = off..off + 2 * window.k;
        let distances = self.distances[pts.clone()].to_vec();
        let defects = self.defects[trs.clone()].to_vec();
        let gaps = self.gaps[trs].to_vec();
        let combined: Vec<f64> = defects.iter().zip(&gaps).map(|(a, b)| a.max(*b)).collect();
        let defect_norm = seq_pnorm(&defects, self.p);
        let gap_norm = seq_pnorm(&gaps, self.p);
        ShadowingResult {
            mode: self.mode.clone(),
            window,
            p: self.p,
            l: self.l,
            delta: self.delta,
            base: self.base[pts.clone()].to_vec(),
            orbit: self.orbit[pts].to_vec(),
            achieved_norm: seq_pnorm(&distances, self.p),
            distances,
            defect_norm,
            gap_norm,
            bound: self.l * defect_norm,
            combined_bound: self.l * seq_pnorm(&combined, self.p),
            hypotheses_hold: self.hypotheses_hold,
            defects,
            gaps,
            iterations: self.iterations,
            fixed_point_residual: self.fixed_point_residual,
            orbit_residual: self.orbit_residual,
            contraction_log: self.contraction_log.clone(),
            limit: None,
            rate: None,
            schedule: None,
        }
    }

    pub fn point_index(&self, p: usize) -> i64 {
        self.window.first() + p as i64
    }
}
