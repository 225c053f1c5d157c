//! Splittings `E^s + E^u`, derivative blocks, semi-hyperbolicity
//! certificates and the constants (`eta`, tilde constants, `L`, `delta`)
//! consumed by the engine.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::charts::{Point, Tangent};
use crate::linalg::{condition_number, conorm, leading_left_singular_vectors, orthonormalize, spectral_norm};
use crate::systems::{MapFamily, Window};

/// Combined bases with a larger condition number are rejected.
pub const MAX_BASIS_CONDITION: f64 = 1e12;

/// Number of times the end jacobians are re-applied before the power
/// sweeps start.
const POWER_BURN_IN: usize = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HyperbolicityError {
    #[error("degenerate splitting at index {index}: condition number {condition:e} exceeds {MAX_BASIS_CONDITION:e}")]
    DegenerateSplitting { index: i64, condition: f64 },
    #[error("eigen splitting at index {index}: found {found} unstable eigenvalues, family declares {expected}")]
    UnstableCount { index: i64, expected: usize, found: usize },
    #[error("eigen splitting at index {index}: eigenvalue of modulus {modulus} on the unit circle")]
    NeutralEigenvalue { index: i64, modulus: f64 },
    #[error("jacobian at index {index} is singular")]
    SingularJacobian { index: i64 },
    #[error("certification failed at index {}: {} ({} vs {})", .0.index, .0.inequality, .0.lhs, .0.rhs)]
    CertificationFailure(Violation),
    #[error("infeasible constants: denominator `{denominator}` = {value} is not positive{}", feasible_suffix(.feasible_v))]
    Infeasible {
        denominator: String,
        value: f64,
        /// For asymptotic mode: the open interval of rates `v` for which
        /// every denominator is positive at the requested `epsilon`.
        feasible_v: Option<(f64, f64)>,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

fn feasible_suffix(range: &Option<(f64, f64)>) -> String {
    match range {
        Some((lo, hi)) if lo < hi => format!("; feasible v range ({lo}, {hi})"),
        Some(_) => "; no feasible v for this epsilon".to_owned(),
        None => String::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplittingMethod {
    Coordinate,
    Eigen,
    PowerIteration,
}

impl SplittingMethod {
    /// Eigen splitting for autonomous affine families, power iteration
    /// otherwise.
    pub fn default_for(family: &dyn MapFamily, window: Window) -> Self {
        let affine = window.indices().all(|i| family.constant_jacobian(i).is_some());
        if affine && family.is_autonomous() {
            SplittingMethod::Eigen
        } else {
            SplittingMethod::PowerIteration
        }
    }
}

/// Per-index bases of `E^u` and `E^s` with their oblique projections.
///
/// Columns of `[U | S]` give the splitting coordinates: the first `d_u`
/// coordinates are unstable.
#[derive(Debug, Clone)]
pub struct Splitting {
    window: Window,
    unstable_dim: usize,
    bases: Vec<DMatrix<f64>>,
    inverses: Vec<DMatrix<f64>>,
    proj_u: Vec<DMatrix<f64>>,
    proj_s: Vec<DMatrix<f64>>,
    h: f64,
}

impl Splitting {
    /// Builds a splitting from raw (not necessarily orthonormal) bases, one
    /// pair per window index.
    pub fn from_bases(window: Window, unstable: Vec<DMatrix<f64>>, stable: Vec<DMatrix<f64>>) -> Result<Self, HyperbolicityError> {
        if unstable.len() != window.len() || stable.len() != window.len() {
            return Err(HyperbolicityError::Parameter(format!(
                "expected {} bases per bundle, got {} unstable and {} stable",
                window.len(),
                unstable.len(),
                stable.len()
            )));
        }
        let d = unstable[0].nrows();
        let du = unstable[0].ncols();
        let mut out = Splitting {
            window,
            unstable_dim: du,
            bases: Vec::with_capacity(window.len()),
            inverses: Vec::with_capacity(window.len()),
            proj_u: Vec::with_capacity(window.len()),
            proj_s: Vec::with_capacity(window.len()),
            h: 1.0,
        };
        for ((i, u), s) in window.indices().zip(unstable).zip(stable) {
            if u.nrows() != d || s.nrows() != d || u.ncols() != du || u.ncols() + s.ncols() != d {
                return Err(HyperbolicityError::Parameter(format!(
                    "basis shapes at index {i} do not split R^{d} into {du} + {}",
                    d - du
                )));
            }
            let u = orthonormalize(&u);
            let s = orthonormalize(&s);
            let mut p = DMatrix::zeros(d, d);
            p.columns_mut(0, du).copy_from(&u);
            p.columns_mut(du, d - du).copy_from(&s);
            let condition = condition_number(&p);
            if !(condition <= MAX_BASIS_CONDITION) {
                return Err(HyperbolicityError::DegenerateSplitting { index: i, condition });
            }
            let inv = p.clone().try_inverse().ok_or(HyperbolicityError::DegenerateSplitting {
                index: i,
                condition: f64::INFINITY,
            })?;
            let pu = &u * inv.rows(0, du);
            let ps = &s * inv.rows(du, d - du);
            out.h = out.h.max(spectral_norm(&pu)).max(spectral_norm(&ps));
            out.bases.push(p);
            out.inverses.push(inv);
            out.proj_u.push(pu);
            out.proj_s.push(ps);
        }
        Ok(out)
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn dim(&self) -> usize {
        self.bases[0].nrows()
    }

    pub fn unstable_dim(&self) -> usize {
        self.unstable_dim
    }

    pub fn stable_dim(&self) -> usize {
        self.dim() - self.unstable_dim
    }

    /// `h >= max(|Pi^s_i|, |Pi^u_i|)` over the window, and `h >= 1`.
    pub fn h(&self) -> f64 {
        self.h
    }

    fn pos(&self, i: i64) -> usize {
        assert!(i >= self.window.first() && i <= self.window.last(), "index {i} outside splitting window");
        self.window.position(i)
    }

    /// `[U | S]` at index `i`.
    pub fn basis(&self, i: i64) -> &DMatrix<f64> {
        &self.bases[self.pos(i)]
    }

    pub fn basis_inverse(&self, i: i64) -> &DMatrix<f64> {
        &self.inverses[self.pos(i)]
    }

    pub fn basis_u(&self, i: i64) -> DMatrix<f64> {
        self.basis(i).columns(0, self.unstable_dim).into_owned()
    }

    pub fn basis_s(&self, i: i64) -> DMatrix<f64> {
        self.basis(i).columns(self.unstable_dim, self.stable_dim()).into_owned()
    }

    pub fn proj_u(&self, i: i64) -> &DMatrix<f64> {
        &self.proj_u[self.pos(i)]
    }

    pub fn proj_s(&self, i: i64) -> &DMatrix<f64> {
        &self.proj_s[self.pos(i)]
    }

    /// Coordinates of `Pi^u v` in the unstable basis.
    pub fn coords_u(&self, i: i64, v: &Tangent) -> DVector<f64> {
        self.basis_inverse(i).rows(0, self.unstable_dim) * v
    }

    /// Coordinates of `Pi^s v` in the stable basis.
    pub fn coords_s(&self, i: i64, v: &Tangent) -> DVector<f64> {
        self.basis_inverse(i).rows(self.unstable_dim, self.stable_dim()) * v
    }

    /// The same splitting on a sub-window.
    pub fn restrict(&self, window: Window) -> Result<Self, HyperbolicityError> {
        if window.k > self.window.k {
            return Err(HyperbolicityError::Parameter(format!(
                "cannot restrict a splitting on |i| <= {} to |i| <= {}",
                self.window.k, window.k
            )));
        }
        let unstable = window.indices().map(|i| self.basis_u(i)).collect();
        let stable = window.indices().map(|i| self.basis_s(i)).collect();
        Splitting::from_bases(window, unstable, stable)
    }
}

fn check_points(window: Window, points: &[Point]) -> Result<(), HyperbolicityError> {
    if points.len() != window.len() {
        return Err(HyperbolicityError::Parameter(format!(
            "window |i| <= {} needs {} points, got {}",
            window.k,
            window.len(),
            points.len()
        )));
    }
    Ok(())
}

/// Splitting along `points` (indexed by `window`).
pub fn build_splitting(
    family: &dyn MapFamily,
    window: Window,
    points: &[Point],
    method: SplittingMethod,
) -> Result<Splitting, HyperbolicityError> {
    check_points(window, points)?;
    let d = family.chart().dim();
    let du = family.unstable_dim();
    let (unstable, stable) = match method {
        SplittingMethod::Coordinate => {
            let id = DMatrix::<f64>::identity(d, d);
            let u = id.columns(0, du).into_owned();
            let s = id.columns(du, d - du).into_owned();
            (vec![u; window.len()], vec![s; window.len()])
        }
        SplittingMethod::Eigen => {
            let mut us = Vec::with_capacity(window.len());
            let mut ss = Vec::with_capacity(window.len());
            let mut cached: Option<(DMatrix<f64>, DMatrix<f64>)> = None;
            let reuse = family.is_autonomous() && family.constant_jacobian(0).is_some();
            for (i, x) in window.indices().zip(points) {
                let pair = match (&cached, reuse) {
                    (Some(pair), true) => pair.clone(),
                    _ => {
                        let pair = eigen_bases(&family.jacobian(i, x), du, i)?;
                        cached = Some(pair.clone());
                        pair
                    }
                };
                us.push(pair.0);
                ss.push(pair.1);
            }
            (us, ss)
        }
        SplittingMethod::PowerIteration => power_bases(family, window, points)?,
    };
    Splitting::from_bases(window, unstable, stable)
}

/// Unstable and stable invariant subspaces of `j`: the range of the
/// product of `(J - lambda)` over the eigenvalues of the opposite kind
/// (real quadratic factors for complex pairs).
fn eigen_bases(j: &DMatrix<f64>, du: usize, index: i64) -> Result<(DMatrix<f64>, DMatrix<f64>), HyperbolicityError> {
    let d = j.nrows();
    let eig = j.clone().complex_eigenvalues();
    let scale = j.amax().max(1.0);
    let mut to_kill_for_u = DMatrix::<f64>::identity(d, d);
    let mut to_kill_for_s = DMatrix::<f64>::identity(d, d);
    let mut found_unstable = 0;
    let id = DMatrix::<f64>::identity(d, d);
    for ev in eig.iter() {
        let modulus = ev.norm();
        if (modulus - 1.0).abs() < 1e-12 {
            return Err(HyperbolicityError::NeutralEigenvalue { index, modulus });
        }
        let unstable = modulus > 1.0;
        if unstable {
            found_unstable += 1;
        }
        let factor = if ev.im.abs() <= 1e-12 * scale {
            Some(j - &id * ev.re)
        } else if ev.im > 0.0 {
            Some(j * j - j * (2.0 * ev.re) + &id * (ev.re * ev.re + ev.im * ev.im))
        } else {
            None
        };
        if let Some(factor) = factor {
            if unstable {
                to_kill_for_s = factor * to_kill_for_s;
            } else {
                to_kill_for_u = factor * to_kill_for_u;
            }
        }
    }
    if found_unstable != du {
        return Err(HyperbolicityError::UnstableCount {
            index,
            expected: du,
            found: found_unstable,
        });
    }
    Ok((
        leading_left_singular_vectors(&to_kill_for_u, du),
        leading_left_singular_vectors(&to_kill_for_s, d - du),
    ))
}

/// Forward QR sweep for `E^u`, backward sweep with inverse jacobians for
/// `E^s`.
fn power_bases(family: &dyn MapFamily, window: Window, points: &[Point]) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>), HyperbolicityError> {
    let d = family.chart().dim();
    let du = family.unstable_dim();
    let n = window.len();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut generic = |cols: usize| DMatrix::<f64>::from_fn(d, cols, |_, _| StandardNormal.sample(&mut rng));

    let jac: Vec<DMatrix<f64>> = window.indices().zip(points).map(|(i, x)| family.jacobian(i, x)).collect();

    let mut unstable = Vec::with_capacity(n);
    let mut q = orthonormalize(&generic(du));
    for _ in 0..POWER_BURN_IN {
        q = orthonormalize(&(&jac[0] * &q));
    }
    unstable.push(q.clone());
    for j in jac.iter().take(n - 1) {
        q = orthonormalize(&(j * &q));
        unstable.push(q.clone());
    }

    let mut inverses = Vec::with_capacity(n);
    for (i, j) in window.indices().zip(&jac) {
        inverses.push(j.clone().try_inverse().ok_or(HyperbolicityError::SingularJacobian { index: i })?);
    }
    let mut stable = vec![DMatrix::zeros(d, d - du); n];
    let mut s = orthonormalize(&generic(d - du));
    for _ in 0..POWER_BURN_IN {
        s = orthonormalize(&(&inverses[n - 1] * &s));
    }
    stable[n - 1] = s.clone();
    for p in (0..n - 1).rev() {
        s = orthonormalize(&(&inverses[p] * &s));
        stable[p] = s.clone();
    }
    Ok((unstable, stable))
}

/// `Df_i` in splitting coordinates, from the splitting at `i` to the
/// splitting at `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockData {
    pub b11: DMatrix<f64>,
    pub b12: DMatrix<f64>,
    pub b21: DMatrix<f64>,
    pub b22: DMatrix<f64>,
    pub conorm_b11: f64,
    pub norm_b12: f64,
    pub norm_b21: f64,
    pub norm_b22: f64,
}

impl BlockData {
    /// Rebuilds `Df_i` from the blocks.
    pub fn reassemble(&self, splitting: &Splitting, i: i64) -> DMatrix<f64> {
        let du = self.b11.nrows();
        let d = splitting.dim();
        let mut m = DMatrix::zeros(d, d);
        m.view_mut((0, 0), (du, du)).copy_from(&self.b11);
        m.view_mut((0, du), (du, d - du)).copy_from(&self.b12);
        m.view_mut((du, 0), (d - du, du)).copy_from(&self.b21);
        m.view_mut((du, du), (d - du, d - du)).copy_from(&self.b22);
        splitting.basis(i + 1) * m * splitting.basis_inverse(i)
    }
}

/// Blocks of the matrix `jacobian` (the derivative of the transition
/// `i -> i+1`).
pub fn blocks_of(splitting: &Splitting, i: i64, jacobian: &DMatrix<f64>) -> BlockData {
    let d = splitting.dim();
    let du = splitting.unstable_dim();
    let ds = d - du;
    let m = splitting.basis_inverse(i + 1) * jacobian * splitting.basis(i);
    let b11 = m.view((0, 0), (du, du)).into_owned();
    let b12 = m.view((0, du), (du, ds)).into_owned();
    let b21 = m.view((du, 0), (ds, du)).into_owned();
    let b22 = m.view((du, du), (ds, ds)).into_owned();
    BlockData {
        conorm_b11: conorm(&b11),
        norm_b12: spectral_norm(&b12),
        norm_b21: spectral_norm(&b21),
        norm_b22: spectral_norm(&b22),
        b11,
        b12,
        b21,
        b22,
    }
}

pub fn extract_blocks(family: &dyn MapFamily, splitting: &Splitting, i: i64, x_i: &Point) -> BlockData {
    blocks_of(splitting, i, &family.jacobian(i, x_i))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Inequality {
    StableContraction,
    UnstableExpansion,
    Product,
}

impl fmt::Display for Inequality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Inequality::StableContraction => "lambda_s < 1",
            Inequality::UnstableExpansion => "lambda_u > 1",
            Inequality::Product => "(1 - lambda_s)(lambda_u - 1) > mu_s * mu_u",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub inequality: Inequality,
    pub index: i64,
    #[serde(with = "crate::serde_float")]
    pub lhs: f64,
    #[serde(with = "crate::serde_float")]
    pub rhs: f64,
}

/// Per-index semi-hyperbolicity constants over the transitions of a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub window: Window,
    pub unstable_dim: usize,
    /// Transition indices `-k .. k-1`.
    pub indices: Vec<i64>,
    #[serde(with = "crate::serde_float::vec")]
    pub lambda_s: Vec<f64>,
    #[serde(with = "crate::serde_float::vec")]
    pub lambda_u: Vec<f64>,
    #[serde(with = "crate::serde_float::vec")]
    pub mu_u: Vec<f64>,
    #[serde(with = "crate::serde_float::vec")]
    pub mu_s: Vec<f64>,
    #[serde(with = "crate::serde_float")]
    pub lambda_s_max: f64,
    #[serde(with = "crate::serde_float")]
    pub lambda_u_min: f64,
    #[serde(with = "crate::serde_float")]
    pub mu_u_max: f64,
    #[serde(with = "crate::serde_float")]
    pub mu_s_max: f64,
    pub h: f64,
    /// Modulus of continuity of the jacobians at the tube radius.
    pub eta_hat: f64,
    /// True when `eta_hat` was sampled rather than known exactly.
    pub eta_is_estimate: bool,
    /// First violated inequality, scanning indices in increasing order.
    pub violation: Option<Violation>,
}

impl Certificate {
    pub fn passed(&self) -> bool {
        self.violation.is_none()
    }

    pub fn check(&self) -> Result<(), HyperbolicityError> {
        match self.violation {
            None => Ok(()),
            Some(v) => Err(HyperbolicityError::CertificationFailure(v)),
        }
    }

    /// Plain-text report: aggregates, then one row per transition.
    pub fn report(&self, tilde: Option<&TildeConstants>, constants: Option<&ShadowingConstants>) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "window: |i| <= {}", self.window.k);
        let _ = writeln!(s, "unstable_dim: {}", self.unstable_dim);
        let _ = writeln!(s, "status: {}", if self.passed() { "PASS" } else { "FAIL" });
        if let Some(v) = &self.violation {
            let _ = writeln!(s, "violated: {} at index {} ({:.16e} vs {:.16e})", v.inequality, v.index, v.lhs, v.rhs);
        }
        let _ = writeln!(s, "lambda_u: {:.16e}", self.lambda_u_min);
        let _ = writeln!(s, "lambda_s: {:.16e}", self.lambda_s_max);
        let _ = writeln!(s, "mu_u: {:.16e}", self.mu_u_max);
        let _ = writeln!(s, "mu_s: {:.16e}", self.mu_s_max);
        let _ = writeln!(s, "h: {:.16e}", self.h);
        let _ = writeln!(
            s,
            "eta_hat: {:.16e} ({})",
            self.eta_hat,
            if self.eta_is_estimate { "sampled" } else { "exact" }
        );
        if let Some(t) = tilde {
            let _ = writeln!(s, "eta: {:.16e}", t.eta);
            let _ = writeln!(s, "tilde_lambda_u: {:.16e}", t.lambda_u);
            let _ = writeln!(s, "tilde_lambda_s_inv: {:.16e}", t.lambda_s_inv);
            let _ = writeln!(s, "tilde_mu_u: {:.16e}", t.mu_u);
            let _ = writeln!(s, "tilde_mu_s: {:.16e}", t.mu_s);
        }
        if let Some(c) = constants {
            let _ = writeln!(s, "mode: {}", c.mode);
            let _ = writeln!(s, "L: {:.16e}", c.l);
            let _ = writeln!(s, "delta: {:.16e}", c.delta);
        }
        let _ = writeln!(s, "i lambda_s lambda_u mu_u mu_s");
        for (p, i) in self.indices.iter().enumerate() {
            let _ = writeln!(
                s,
                "{} {:.16e} {:.16e} {:.16e} {:.16e}",
                i, self.lambda_s[p], self.lambda_u[p], self.mu_u[p], self.mu_s[p]
            );
        }
        s
    }
}

/// Computes per-index constants along `points` and records the first
/// violated inequality, if any. Only a degenerate splitting is an error.
pub fn compute_certificate(
    family: &dyn MapFamily,
    splitting: &Splitting,
    points: &[Point],
    eta_hat: f64,
    eta_is_estimate: bool,
) -> Result<Certificate, HyperbolicityError> {
    let window = splitting.window();
    check_points(window, points)?;
    if window.k == 0 {
        return Err(HyperbolicityError::Parameter("certification needs a window with k >= 1".into()));
    }
    let mut cert = Certificate {
        window,
        unstable_dim: splitting.unstable_dim(),
        indices: Vec::with_capacity(2 * window.k),
        lambda_s: Vec::with_capacity(2 * window.k),
        lambda_u: Vec::with_capacity(2 * window.k),
        mu_u: Vec::with_capacity(2 * window.k),
        mu_s: Vec::with_capacity(2 * window.k),
        lambda_s_max: f64::NEG_INFINITY,
        lambda_u_min: f64::INFINITY,
        mu_u_max: f64::NEG_INFINITY,
        mu_s_max: f64::NEG_INFINITY,
        h: splitting.h(),
        eta_hat,
        eta_is_estimate,
        violation: None,
    };
    for i in window.transitions() {
        let b = extract_blocks(family, splitting, i, &points[window.position(i)]);
        let (ls, lu, mu, ms) = (b.norm_b22, b.conorm_b11, b.norm_b12, b.norm_b21);
        cert.indices.push(i);
        cert.lambda_s.push(ls);
        cert.lambda_u.push(lu);
        cert.mu_u.push(mu);
        cert.mu_s.push(ms);
        cert.lambda_s_max = cert.lambda_s_max.max(ls);
        cert.lambda_u_min = cert.lambda_u_min.min(lu);
        cert.mu_u_max = cert.mu_u_max.max(mu);
        cert.mu_s_max = cert.mu_s_max.max(ms);
        if cert.violation.is_none() {
            cert.violation = first_violation(i, ls, lu, mu, ms);
        }
    }
    Ok(cert)
}

fn first_violation(index: i64, ls: f64, lu: f64, mu: f64, ms: f64) -> Option<Violation> {
    if !(ls < 1.0) {
        return Some(Violation {
            inequality: Inequality::StableContraction,
            index,
            lhs: ls,
            rhs: 1.0,
        });
    }
    if !(lu > 1.0) {
        return Some(Violation {
            inequality: Inequality::UnstableExpansion,
            index,
            lhs: lu,
            rhs: 1.0,
        });
    }
    // an infinite lambda_u (no unstable directions) only meets zero couplings
    let coupling = if ms == 0.0 || mu == 0.0 { 0.0 } else { ms * mu };
    let product = (1.0 - ls) * (lu - 1.0);
    if !(product > coupling) {
        return Some(Violation {
            inequality: Inequality::Product,
            index,
            lhs: product,
            rhs: coupling,
        });
    }
    None
}

/// `compute_certificate` followed by `Certificate::check`.
pub fn certify(
    family: &dyn MapFamily,
    splitting: &Splitting,
    points: &[Point],
    eta_hat: f64,
    eta_is_estimate: bool,
) -> Result<Certificate, HyperbolicityError> {
    let cert = compute_certificate(family, splitting, points, eta_hat, eta_is_estimate)?;
    cert.check()?;
    Ok(cert)
}

/// Constants inflated by the modulus budget `h^2 eta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TildeConstants {
    #[serde(with = "crate::serde_float")]
    pub lambda_u: f64,
    pub lambda_s_inv: f64,
    pub mu_u: f64,
    pub mu_s: f64,
    pub eta: f64,
    pub h: f64,
}

impl TildeConstants {
    pub fn from_budget(cert: &Certificate, eta: f64) -> Result<Self, HyperbolicityError> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(HyperbolicityError::Parameter(format!("eta must be finite and nonnegative, got {eta}")));
        }
        let inflation = cert.h * cert.h * eta;
        let t = TildeConstants {
            lambda_u: cert.lambda_u_min - inflation,
            lambda_s_inv: cert.lambda_s_max + inflation,
            mu_u: cert.mu_u_max + inflation,
            mu_s: cert.mu_s_max + inflation,
            eta,
            h: cert.h,
        };
        if !(t.lambda_u > 1.0) {
            return Err(HyperbolicityError::Infeasible {
                denominator: "lambda_u - 1".into(),
                value: t.lambda_u - 1.0,
                feasible_v: None,
            });
        }
        if !(t.lambda_s_inv + t.mu_s < 1.0) {
            return Err(HyperbolicityError::Infeasible {
                denominator: "1 - lambda_s - mu_s".into(),
                value: 1.0 - t.lambda_s_inv - t.mu_s,
                feasible_v: None,
            });
        }
        Ok(t)
    }
}

/// `eta = min(eta_hat, safety * min(lambda_u - 1, 1 - lambda_s) / h^2)`.
pub fn tilde_constants(cert: &Certificate, safety: f64) -> Result<TildeConstants, HyperbolicityError> {
    cert.check()?;
    if !(safety > 0.0 && safety < 1.0) {
        return Err(HyperbolicityError::Parameter(format!("safety must lie in (0, 1), got {safety}")));
    }
    let slack = (cert.lambda_u_min - 1.0).min(1.0 - cert.lambda_s_max);
    let eta = cert.eta_hat.min(safety * slack / (cert.h * cert.h));
    TildeConstants::from_budget(cert, eta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum ModeSpec {
    Finite,
    Limit,
    Asymptotic { v: f64, epsilon: f64 },
}

impl fmt::Display for ModeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModeSpec::Finite => f.write_str("finite"),
            ModeSpec::Limit => f.write_str("limit"),
            ModeSpec::Asymptotic { v, epsilon } => write!(f, "asymptotic(v={v}, epsilon={epsilon})"),
        }
    }
}

/// Default cap on `delta` when none is configured.
pub const DEFAULT_DELTA_CAP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShadowingConstants {
    pub mode: ModeSpec,
    #[serde(rename = "L")]
    pub l: f64,
    pub delta: f64,
    pub rho: f64,
    pub h: f64,
    /// Asymptotic mode: minimal `m` with `(v + epsilon)^m <= delta`; the
    /// engine uses `k1 = k0 + m`.
    pub rate_steps: Option<usize>,
}

impl ShadowingConstants {
    /// `v + epsilon` in asymptotic mode.
    pub fn rate(&self) -> Option<f64> {
        match self.mode {
            ModeSpec::Asymptotic { v, epsilon } => Some(v + epsilon),
            _ => None,
        }
    }
}

fn positive(name: &str, value: f64, feasible_v: Option<(f64, f64)>) -> Result<f64, HyperbolicityError> {
    if value > 0.0 {
        Ok(value)
    } else {
        Err(HyperbolicityError::Infeasible {
            denominator: name.to_owned(),
            value,
            feasible_v,
        })
    }
}

/// `L` from the mode's formula (taken with equality) and
/// `delta = min(delta_cap, rho / L)`.
pub fn shadowing_constants(
    tc: &TildeConstants,
    rho: f64,
    mode: ModeSpec,
    delta_cap: Option<f64>,
) -> Result<ShadowingConstants, HyperbolicityError> {
    let h = tc.h;
    let (lu, ls, mu, ms) = (tc.lambda_u, tc.lambda_s_inv, tc.mu_u, tc.mu_s);
    let mut rate_steps = None;
    let l = match mode {
        ModeSpec::Finite => {
            let a = positive("lambda_u - 1 - mu_u", lu - 1.0 - mu, None)?;
            let b = positive("1 - lambda_s - mu_s", 1.0 - ls - ms, None)?;
            (2.0 * h / a).max(2.0 * h / b)
        }
        ModeSpec::Limit => {
            let a = positive("lambda_u - 2 - mu_u", lu - 2.0 - mu, None)?;
            let b = positive("1 - 2(lambda_s + mu_s)", 1.0 - 2.0 * (ls + ms), None)?;
            (3.0 * h / a).max(3.0 * h / b)
        }
        ModeSpec::Asymptotic { v, epsilon } => {
            if !(v > 0.0 && epsilon > 0.0) {
                return Err(HyperbolicityError::Parameter(format!(
                    "asymptotic mode needs v > 0 and epsilon > 0, got v = {v}, epsilon = {epsilon}"
                )));
            }
            let lower = (1.0 / (lu - mu)).max(ls + ms) - epsilon;
            let range = Some((lower.max(0.0), 1.0 - epsilon));
            let q = v + epsilon;
            positive("1 - (v + epsilon)", 1.0 - q, range)?;
            let qi = 1.0 / q;
            let a = positive("lambda_u - mu_u - (v + epsilon)^-1", lu - mu - qi, range)?;
            let b = positive("1 - (v + epsilon)^-1 (lambda_s + mu_s)", 1.0 - qi * (ls + ms), range)?;
            let numerator = h * (1.0 + qi);
            (numerator / a).max(numerator / b)
        }
    };
    let cap = delta_cap.unwrap_or(DEFAULT_DELTA_CAP);
    if !(cap > 0.0) {
        return Err(HyperbolicityError::Parameter(format!("delta must be positive, got {cap}")));
    }
    let delta = cap.min(rho / l);
    if let ModeSpec::Asymptotic { v, epsilon } = mode {
        rate_steps = Some(steps_to_reach(v + epsilon, delta));
    }
    Ok(ShadowingConstants {
        mode,
        l,
        delta,
        rho,
        h,
        rate_steps,
    })
}

/// Minimal `m >= 0` with `q^m <= target`, for `0 < q < 1`.
pub fn steps_to_reach(q: f64, target: f64) -> usize {
    let mut m = (target.ln() / q.ln()).ceil().max(0.0) as usize;
    while m > 0 && q.powi(m as i32 - 1) <= target {
        m -= 1;
    }
    while q.powi(m as i32) > target {
        m += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{make_cat_family, make_coupled_linear_family, make_scalar_family};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const GOLDEN: f64 = 2.618_033_988_749_895;

    fn orbit(family: &dyn MapFamily, window: Window, start: &[f64]) -> Vec<Point> {
        let mut x = family.chart().point_from_slice(start).unwrap();
        let mut out = vec![x.clone()];
        for i in window.transitions() {
            x = family.evaluate(i, &x);
            out.push(x.clone());
        }
        out
    }

    fn tc(lu: f64, ls: f64, mu: f64, ms: f64) -> TildeConstants {
        TildeConstants {
            lambda_u: lu,
            lambda_s_inv: ls,
            mu_u: mu,
            mu_s: ms,
            eta: 0.0,
            h: 1.0,
        }
    }

    #[test]
    fn cat_eigen_splitting_is_orthogonal() {
        let w = Window::new(5);
        let cat = make_cat_family(w);
        let pts = orbit(&cat, w, &[0.1, 0.2]);
        let sp = build_splitting(&cat, w, &pts, SplittingMethod::Eigen).unwrap();
        assert_abs_diff_eq!(sp.h(), 1.0, epsilon = 1e-12);
        let b = extract_blocks(&cat, &sp, 0, &pts[5]);
        assert_abs_diff_eq!(b.b11[(0, 0)].abs(), GOLDEN, epsilon = 1e-12);
        assert_abs_diff_eq!(b.b22[(0, 0)].abs(), 1.0 / GOLDEN, epsilon = 1e-12);
        assert!(b.norm_b12 < 1e-12 && b.norm_b21 < 1e-12);
    }

    #[test]
    fn power_iteration_matches_eigen_on_cat() {
        let w = Window::new(10);
        let cat = make_cat_family(w);
        let pts = orbit(&cat, w, &[0.3, 0.7]);
        let a = build_splitting(&cat, w, &pts, SplittingMethod::Eigen).unwrap();
        let b = build_splitting(&cat, w, &pts, SplittingMethod::PowerIteration).unwrap();
        for i in w.indices() {
            assert_abs_diff_eq!(a.proj_u(i), b.proj_u(i), epsilon = 1e-12);
            assert_abs_diff_eq!(a.proj_s(i), b.proj_s(i), epsilon = 1e-12);
        }
    }

    #[test]
    fn coupled_coordinate_blocks_are_exact() {
        let w = Window::new(3);
        let fam = make_coupled_linear_family(2.0, 0.5, 0.1, 0.1, w).unwrap();
        let pts = orbit(&fam, w, &[0.1, 0.1]);
        let sp = build_splitting(&fam, w, &pts, SplittingMethod::Coordinate).unwrap();
        assert_eq!(sp.h(), 1.0);
        let b = extract_blocks(&fam, &sp, -1, &pts[2]);
        assert_eq!((b.b11[(0, 0)], b.b12[(0, 0)], b.b21[(0, 0)], b.b22[(0, 0)]), (2.0, 0.1, 0.1, 0.5));
        let cert = certify(&fam, &sp, &pts, 0.0, false).unwrap();
        let margin = (1.0 - cert.lambda_s_max) * (cert.lambda_u_min - 1.0) - cert.mu_s_max * cert.mu_u_max;
        assert_abs_diff_eq!(margin, 0.49, epsilon = 1e-15);
    }

    #[test]
    fn coupled_product_failure_is_named() {
        let w = Window::new(3);
        let fam = make_coupled_linear_family(1.2, 0.9, 0.5, 0.5, w).unwrap();
        let pts = orbit(&fam, w, &[0.1, 0.1]);
        let sp = build_splitting(&fam, w, &pts, SplittingMethod::Coordinate).unwrap();
        let err = certify(&fam, &sp, &pts, 0.0, false).unwrap_err();
        match err {
            HyperbolicityError::CertificationFailure(v) => {
                assert_eq!(v.inequality, Inequality::Product);
                assert_eq!(v.index, -3);
                assert_abs_diff_eq!(v.lhs, 0.02, epsilon = 1e-15);
                assert_abs_diff_eq!(v.rhs, 0.25, epsilon = 1e-15);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn identity_blocks() {
        let w = Window::new(1);
        let fam = make_scalar_family(1.0, 10.0, 1.0, w);
        let sp = Splitting::from_bases(w, vec![DMatrix::zeros(1, 0); 3], vec![DMatrix::identity(1, 1); 3]).unwrap();
        let x = fam.chart().point_from_slice(&[0.0]).unwrap();
        let b = extract_blocks(&fam, &sp, 0, &x);
        assert_eq!(b.b22[(0, 0)], 1.0);
        assert_eq!(b.conorm_b11, f64::INFINITY);
        assert_eq!(b.norm_b12, 0.0);
    }

    #[test]
    fn oblique_projection_norm_is_inverse_sine() {
        for &theta in &[0.3_f64, 0.7, 1.2] {
            let u = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
            let s = DMatrix::from_column_slice(2, 1, &[theta.cos(), theta.sin()]);
            let sp = Splitting::from_bases(Window::new(0), vec![u], vec![s]).unwrap();
            // brute force over the unit circle
            let mut best = 0.0_f64;
            for k in 0..200_000 {
                let t = k as f64 * std::f64::consts::TAU / 200_000.0;
                let v = Tangent::from_vec(vec![t.cos(), t.sin()]);
                best = best.max((sp.proj_u(0) * v).norm());
            }
            assert_abs_diff_eq!(best, 1.0 / theta.sin(), epsilon = 1e-6);
            assert_abs_diff_eq!(sp.h(), 1.0 / theta.sin(), epsilon = 1e-12);
        }
    }

    #[test]
    fn nearly_parallel_bases_are_degenerate() {
        let u = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let s = DMatrix::from_column_slice(2, 1, &[1.0, 1e-14]);
        let err = Splitting::from_bases(Window::new(0), vec![u], vec![s]).unwrap_err();
        assert!(matches!(err, HyperbolicityError::DegenerateSplitting { index: 0, .. }));
    }

    #[test]
    fn eigen_rejects_wrong_unstable_count() {
        let w = Window::new(1);
        let fam = make_scalar_family(0.5, 10.0, 1.0, w);
        let j = DMatrix::from_row_slice(1, 1, &[0.5]);
        assert!(matches!(eigen_bases(&j, 1, 0), Err(HyperbolicityError::UnstableCount { .. })));
        let pts = vec![fam.chart().point_from_slice(&[0.0]).unwrap(); 3];
        let sp = build_splitting(&fam, w, &pts, SplittingMethod::Eigen).unwrap();
        assert_eq!(sp.unstable_dim(), 0);
    }

    #[test]
    fn eigen_handles_complex_stable_pairs() {
        // rotation-scaled stable block plus one expanding direction
        let c = 0.5 * 0.6_f64.cos();
        let s = 0.5 * 0.6_f64.sin();
        let j = DMatrix::from_row_slice(3, 3, &[3.0, 0.2, 0.1, 0.0, c, -s, 0.0, s, c]);
        let (u, st) = eigen_bases(&j, 1, 0).unwrap();
        // E^u and E^s are invariant
        let ju = &j * &u;
        assert_abs_diff_eq!(&u * (u.transpose() * &ju), ju, epsilon = 1e-12);
        let js = &j * &st;
        assert_abs_diff_eq!(&st * (st.transpose() * &js), js, epsilon = 1e-12);
    }

    #[test]
    fn cat_tilde_constants_with_zero_modulus_are_exact() {
        let w = Window::new(100);
        let cat = make_cat_family(w);
        let pts = orbit(&cat, w, &[0.1, 0.2]);
        let sp = build_splitting(&cat, w, &pts, SplittingMethod::Eigen).unwrap();
        let cert = certify(&cat, &sp, &pts, 0.0, false).unwrap();
        let t = tilde_constants(&cert, 0.5).unwrap();
        assert_abs_diff_eq!(t.lambda_u, GOLDEN, epsilon = 1e-9);
        assert_abs_diff_eq!(t.lambda_s_inv, 1.0 / GOLDEN, epsilon = 1e-9);
        assert!(t.mu_u < 1e-12 && t.mu_s < 1e-12);
        assert_eq!(t.eta, 0.0);
    }

    fn synthetic_cert(lu: f64, ls: f64, mu: f64, ms: f64, h: f64, eta_hat: f64) -> Certificate {
        Certificate {
            window: Window::new(1),
            unstable_dim: 1,
            indices: vec![-1, 0],
            lambda_s: vec![ls; 2],
            lambda_u: vec![lu; 2],
            mu_u: vec![mu; 2],
            mu_s: vec![ms; 2],
            lambda_s_max: ls,
            lambda_u_min: lu,
            mu_u_max: mu,
            mu_s_max: ms,
            h,
            eta_hat,
            eta_is_estimate: true,
            violation: None,
        }
    }

    #[test]
    fn budget_substitution() {
        let cert = synthetic_cert(2.618, 0.382, 0.0, 0.0, 1.0, 0.05);
        let t = TildeConstants::from_budget(&cert, 0.05).unwrap();
        assert_abs_diff_eq!(t.lambda_u, 2.568, epsilon = 1e-12);
        assert_abs_diff_eq!(t.lambda_s_inv, 0.432, epsilon = 1e-12);
        assert_abs_diff_eq!(t.mu_u, 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(t.mu_s, 0.05, epsilon = 1e-15);
        // the safety cap binds when eta_hat is large
        let t = tilde_constants(&synthetic_cert(2.618, 0.382, 0.0, 0.0, 1.0, 10.0), 0.25).unwrap();
        assert_abs_diff_eq!(t.eta, 0.25 * 0.618, epsilon = 1e-12);
    }

    #[test]
    fn budget_infeasible_when_expansion_is_consumed() {
        let cert = synthetic_cert(1.01, 0.5, 0.0, 0.0, 2.0, 0.1);
        let err = TildeConstants::from_budget(&cert, 0.1).unwrap_err();
        assert!(matches!(err, HyperbolicityError::Infeasible { .. }));
    }

    #[test]
    fn shadowing_constant_formulas() {
        let t = tc(2.5, 0.4, 0.01, 0.01);
        let f = shadowing_constants(&t, 0.5, ModeSpec::Finite, None).unwrap();
        assert_abs_diff_eq!(f.l, 2.0 / 0.59, epsilon = 1e-12);
        assert_abs_diff_eq!(f.l, 3.3898, epsilon = 1e-4);
        assert_eq!(f.delta, 1e-3);
        let l = shadowing_constants(&t, 0.5, ModeSpec::Limit, None).unwrap();
        assert_abs_diff_eq!(l.l, 16.667, epsilon = 1e-3);
        let a = shadowing_constants(&t, 0.5, ModeSpec::Asymptotic { v: 0.5, epsilon: 0.1 }, None).unwrap();
        // 8/3 over 1 - 0.41/0.6 = 19/60
        assert_abs_diff_eq!(a.l, 160.0 / 19.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a.l, 8.424, epsilon = 5e-3);
        // (0.6)^m <= 1e-3 first at m = 14
        assert_eq!(a.rate_steps, Some(14));
        // delta is capped by rho / L
        let c = shadowing_constants(&t, 0.5, ModeSpec::Limit, Some(1.0)).unwrap();
        assert_abs_diff_eq!(c.delta, 0.5 / c.l, epsilon = 1e-15);
    }

    #[test]
    fn limit_mode_names_its_denominator() {
        let err = shadowing_constants(&tc(GOLDEN, 1.0 / GOLDEN, 0.7, 0.0), 0.5, ModeSpec::Limit, None).unwrap_err();
        assert!(err.to_string().contains("lambda_u - 2 - mu_u"), "{err}");
    }

    #[test]
    fn asymptotic_mode_reports_feasible_range() {
        let err = shadowing_constants(&tc(GOLDEN, 1.0 / GOLDEN, 0.0, 0.0), 0.5, ModeSpec::Asymptotic { v: 0.2, epsilon: 0.1 }, None)
            .unwrap_err();
        match &err {
            HyperbolicityError::Infeasible {
                denominator,
                feasible_v: Some((lo, hi)),
                ..
            } => {
                assert_eq!(denominator, "lambda_u - mu_u - (v + epsilon)^-1");
                assert_abs_diff_eq!(*lo, 1.0 / GOLDEN - 0.1, epsilon = 1e-12);
                assert_abs_diff_eq!(*hi, 0.9, epsilon = 1e-15);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("feasible v range"));
    }

    #[test]
    fn steps_to_reach_is_minimal() {
        assert_eq!(steps_to_reach(0.6, 0.01), 10);
        assert_eq!(steps_to_reach(0.5, 0.25), 2);
        assert_eq!(steps_to_reach(0.5, 1.0), 0);
        assert_eq!(steps_to_reach(0.6, 1e-3), 14);
    }

    fn random_basis_pair() -> impl Strategy<Value = (DMatrix<f64>, DMatrix<f64>)> {
        (prop::collection::vec(-1.0..1.0f64, 9), 1usize..3).prop_filter_map("well conditioned", |(v, du)| {
            let m = DMatrix::from_column_slice(3, 3, &v);
            let (u, s) = (m.columns(0, du).into_owned(), m.columns(du, 3 - du).into_owned());
            // keep the angle between the bundles moderate: projection
            // round-off grows like h^2
            let mut p = orthonormalize(&u).resize_horizontally(3, 0.0);
            p.columns_mut(du, 3 - du).copy_from(&orthonormalize(&s));
            if condition_number(&p) > 20.0 {
                return None;
            }
            Some((u, s))
        })
    }

    proptest! {
        #[test]
        fn projections_are_complementary_idempotents((u, s) in random_basis_pair()) {
            let sp = Splitting::from_bases(Window::new(0), vec![u.clone()], vec![s.clone()]).unwrap();
            let (pu, ps) = (sp.proj_u(0), sp.proj_s(0));
            let id = DMatrix::<f64>::identity(3, 3);
            prop_assert!((pu + ps - &id).amax() < 1e-12);
            prop_assert!((pu * pu - pu).amax() < 1e-12);
            prop_assert!((ps * ps - ps).amax() < 1e-12);
            // ranges are the given spans
            prop_assert!((pu * &u - &u).amax() < 1e-12);
            prop_assert!((ps * &s - &s).amax() < 1e-12);
            prop_assert!((pu * &s).amax() < 1e-12);
        }

        #[test]
        fn h_bounds_every_projection((u, s) in random_basis_pair(), seed in any::<u64>()) {
            let sp = Splitting::from_bases(Window::new(0), vec![u], vec![s]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..500 {
                let v = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
                prop_assert!((sp.proj_s(0) * &v).norm() <= sp.h() * v.norm() * (1.0 + 1e-12));
                prop_assert!((sp.proj_u(0) * &v).norm() <= sp.h() * v.norm() * (1.0 + 1e-12));
            }
        }

        #[test]
        fn blocks_reassemble((u0, s0) in random_basis_pair(), (u1, s1) in random_basis_pair(),
                             j in prop::collection::vec(-3.0..3.0f64, 9)) {
            if u0.ncols() != u1.ncols() {
                return Ok(());
            }
            let sp = Splitting::from_bases(Window::new(0), vec![u0], vec![s0]).unwrap();
            let sp1 = Splitting::from_bases(Window::new(0), vec![u1], vec![s1]).unwrap();
            // stitch two one-point splittings into a two-index one
            let w = Window::new(1);
            let both = Splitting::from_bases(
                w,
                vec![sp.basis_u(0), sp1.basis_u(0), sp1.basis_u(0)],
                vec![sp.basis_s(0), sp1.basis_s(0), sp1.basis_s(0)],
            ).unwrap();
            let jac = DMatrix::from_column_slice(3, 3, &j);
            let b = blocks_of(&both, -1, &jac);
            prop_assert!((b.reassemble(&both, -1) - &jac).amax() < 1e-12 * jac.amax().max(1.0) * 10.0);
        }

        #[test]
        fn conorm_times_inverse_norm_is_one(v in prop::collection::vec(-1.0..1.0f64, 9)) {
            let m = DMatrix::from_column_slice(3, 3, &v) + DMatrix::<f64>::identity(3, 3) * 2.0;
            prop_assume!(condition_number(&m) < 1e4);
            let inv = m.clone().try_inverse().unwrap();
            prop_assert!((conorm(&m) * spectral_norm(&inv) - 1.0).abs() < 1e-10);
        }

        #[test]
        fn l_is_monotone_in_constants(lu in 2.3..4.0f64, ls in 0.05..0.2f64, mu in 0.0..0.1f64, ms in 0.0..0.1f64,
                                      which in 0usize..4) {
            let bump = 1e-3;
            let modes = [ModeSpec::Finite, ModeSpec::Limit, ModeSpec::Asymptotic { v: 0.6, epsilon: 0.1 }];
            for mode in modes {
                let base = shadowing_constants(&tc(lu, ls, mu, ms), 0.5, mode, None).unwrap().l;
                let moved = match which {
                    0 => tc(lu + bump, ls, mu, ms),
                    1 => tc(lu, ls + bump, mu, ms),
                    2 => tc(lu, ls, mu + bump, ms),
                    _ => tc(lu, ls, mu, ms + bump),
                };
                let l = shadowing_constants(&moved, 0.5, mode, None).unwrap().l;
                if which == 0 {
                    prop_assert!(l <= base);
                } else {
                    prop_assert!(l >= base);
                }
            }
        }
    }
}
