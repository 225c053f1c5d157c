//! Indexed map families `f_i: M_i -> M_{i+1}`, their perturbations `g_i`,
//! and the tangent-space lifts `F_i`, `G_i` used by the shadowing engine.

use std::f64::consts::TAU;
use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::charts::{Chart, ChartError, ChartKind, Point, Tangent};
use crate::linalg::spectral_norm;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SystemError {
    #[error("tube escape at index {index}: {source}")]
    TubeEscape {
        index: i64,
        #[source]
        source: ChartError,
    },
    #[error("displacement at index {index} has sampled magnitude {sampled} above declared gap {declared}")]
    MagnitudeViolation {
        index: i64,
        sampled: f64,
        declared: f64,
    },
    #[error("invalid family parameters: {0}")]
    Parameter(String),
}

/// The symmetric index window `[-k, k]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub k: usize,
}

impl Window {
    pub fn new(k: usize) -> Self {
        Self { k }
    }

    pub fn first(&self) -> i64 {
        -(self.k as i64)
    }

    pub fn last(&self) -> i64 {
        self.k as i64
    }

    /// Number of points `2k + 1`.
    pub fn len(&self) -> usize {
        2 * self.k + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn indices(&self) -> impl DoubleEndedIterator<Item = i64> + Clone {
        self.first()..=self.last()
    }

    /// Transition indices `i = -k .. k-1` (steps `i -> i+1`).
    pub fn transitions(&self) -> impl DoubleEndedIterator<Item = i64> + Clone {
        self.first()..self.last()
    }

    pub fn position(&self, i: i64) -> usize {
        (i - self.first()) as usize
    }
}

/// A magnitude profile over indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case")]
pub enum IndexProfile {
    /// `m`
    Constant { magnitude: f64 },
    /// `m / (1 + |i|)`
    Harmonic { magnitude: f64 },
    /// `m * v^|i|`
    Geometric { magnitude: f64, rate: f64 },
}

impl IndexProfile {
    pub fn at(&self, i: i64) -> f64 {
        let n = i.unsigned_abs() as f64;
        match *self {
            IndexProfile::Constant { magnitude } => magnitude,
            IndexProfile::Harmonic { magnitude } => magnitude / (1.0 + n),
            IndexProfile::Geometric { magnitude, rate } => magnitude * rate.powi(i.unsigned_abs() as i32),
        }
    }

    pub fn peak(&self) -> f64 {
        match *self {
            IndexProfile::Constant { magnitude }
            | IndexProfile::Harmonic { magnitude }
            | IndexProfile::Geometric { magnitude, .. } => magnitude,
        }
    }

    pub fn zero() -> Self {
        IndexProfile::Constant { magnitude: 0.0 }
    }
}

/// A non-autonomous family of maps on a flat chart.
pub trait MapFamily: Send + Sync + Debug {
    fn chart(&self) -> &Chart;

    /// Dimension of the unstable bundle used when splitting this family.
    fn unstable_dim(&self) -> usize;

    /// `f_i` evaluated at `exp_base(offset)`, computed in the coordinate
    /// frame of `base`. For maps that are continuous on the chart this is
    /// `f_i(exp_base(offset))`.
    fn evaluate_near(&self, i: i64, base: &Point, offset: &Tangent) -> Point;

    fn evaluate(&self, i: i64, x: &Point) -> Point {
        self.evaluate_near(i, x, &self.chart().zero_tangent())
    }

    fn jacobian(&self, i: i64, x: &Point) -> DMatrix<f64>;

    /// The jacobian when it does not depend on the point (affine `f_i`).
    fn constant_jacobian(&self, _i: i64) -> Option<DMatrix<f64>> {
        None
    }

    /// True when every `f_i` is the same map.
    fn is_autonomous(&self) -> bool {
        false
    }

    fn label(&self) -> String;
}

/// `x -> B x` in chart coordinates, reduced mod 1 on the torus.
///
/// For non-integer `B` on the torus the map is evaluated on the lift of the
/// point's frame, so it is affine inside every tube but jumps across the
/// fundamental-domain seam.
#[derive(Debug, Clone)]
pub struct LinearFamily {
    chart: Chart,
    matrix: DMatrix<f64>,
    unstable_dim: usize,
    window: Window,
    label: String,
}

impl LinearFamily {
    pub fn new(chart: Chart, matrix: DMatrix<f64>, unstable_dim: usize, window: Window, label: &str) -> Self {
        assert_eq!(matrix.nrows(), chart.dim());
        assert_eq!(matrix.ncols(), chart.dim());
        assert!(unstable_dim <= chart.dim());
        Self {
            chart,
            matrix,
            unstable_dim,
            window,
            label: label.to_owned(),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn window(&self) -> Window {
        self.window
    }
}

impl MapFamily for LinearFamily {
    fn chart(&self) -> &Chart {
        &self.chart
    }

    fn unstable_dim(&self) -> usize {
        self.unstable_dim
    }

    fn evaluate_near(&self, _i: i64, base: &Point, offset: &Tangent) -> Point {
        self.chart.project(&self.matrix * (base.coords() + offset))
    }

    fn jacobian(&self, _i: i64, _x: &Point) -> DMatrix<f64> {
        self.matrix.clone()
    }

    fn constant_jacobian(&self, _i: i64) -> Option<DMatrix<f64>> {
        Some(self.matrix.clone())
    }

    fn is_autonomous(&self) -> bool {
        true
    }

    fn label(&self) -> String {
        self.label.clone()
    }
}

/// The Arnold cat map `x -> [[2,1],[1,1]] x mod 1` at every index.
pub fn make_cat_family(window: Window) -> LinearFamily {
    LinearFamily::new(
        Chart::torus(2),
        DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]),
        1,
        window,
        "cat",
    )
}

/// `x -> B x mod 1` with `B = [[lambda_u, mu_u], [mu_s, lambda_s]]`, so the
/// coordinate splitting has blocks exactly `(lambda_u, mu_u, mu_s, lambda_s)`.
pub fn make_coupled_linear_family(
    lambda_u: f64,
    lambda_s: f64,
    mu_u: f64,
    mu_s: f64,
    window: Window,
) -> Result<LinearFamily, SystemError> {
    let finite = [lambda_u, lambda_s, mu_u, mu_s].iter().all(|v| v.is_finite());
    if !finite || lambda_u <= 0.0 || lambda_s <= 0.0 || mu_u < 0.0 || mu_s < 0.0 {
        return Err(SystemError::Parameter(format!(
            "coupled family needs positive lambdas and nonnegative mus, got ({lambda_u}, {lambda_s}, {mu_u}, {mu_s})"
        )));
    }
    if !(lambda_s < 1.0 && 1.0 < lambda_u) {
        return Err(SystemError::Parameter(format!(
            "coupled family needs lambda_s < 1 < lambda_u, got lambda_s = {lambda_s}, lambda_u = {lambda_u}"
        )));
    }
    Ok(LinearFamily::new(
        Chart::torus(2),
        DMatrix::from_row_slice(2, 2, &[lambda_u, mu_u, mu_s, lambda_s]),
        1,
        window,
        "coupled",
    ))
}

/// `x -> a x` on a euclidean interval.
pub fn make_scalar_family(factor: f64, half_width: f64, tube_radius: f64, window: Window) -> LinearFamily {
    let unstable_dim = usize::from(factor.abs() > 1.0);
    LinearFamily::new(
        Chart::euclidean_box(1, -half_width, half_width, tube_radius),
        DMatrix::from_row_slice(1, 1, &[factor]),
        unstable_dim,
        window,
        "scalar",
    )
}

/// A displacement field `(i, x) -> T_{f_i(x)}` used to build `g` from `f`.
pub trait Displacement: Send + Sync + Debug {
    fn value(&self, i: i64, x: &Point) -> Tangent;

    fn jacobian(&self, i: i64, x: &Point) -> DMatrix<f64>;

    fn is_constant_in_space(&self) -> bool;
}

#[derive(Debug, Clone)]
pub struct ZeroDisplacement {
    pub dim: usize,
}

impl Displacement for ZeroDisplacement {
    fn value(&self, _i: i64, _x: &Point) -> Tangent {
        Tangent::zeros(self.dim)
    }

    fn jacobian(&self, _i: i64, _x: &Point) -> DMatrix<f64> {
        DMatrix::zeros(self.dim, self.dim)
    }

    fn is_constant_in_space(&self) -> bool {
        true
    }
}

/// A spatially constant shift `profile(i) * direction`.
#[derive(Debug, Clone)]
pub struct ShiftDisplacement {
    direction: Tangent,
    profile: IndexProfile,
}

impl ShiftDisplacement {
    /// `direction` is normalized; it must be nonzero.
    pub fn new(direction: Tangent, profile: IndexProfile) -> Result<Self, SystemError> {
        let n = direction.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(SystemError::Parameter("shift direction must be a nonzero finite vector".into()));
        }
        Ok(Self {
            direction: direction / n,
            profile,
        })
    }

    pub fn profile(&self) -> IndexProfile {
        self.profile
    }
}

impl Displacement for ShiftDisplacement {
    fn value(&self, i: i64, _x: &Point) -> Tangent {
        &self.direction * self.profile.at(i)
    }

    fn jacobian(&self, _i: i64, _x: &Point) -> DMatrix<f64> {
        DMatrix::zeros(self.direction.len(), self.direction.len())
    }

    fn is_constant_in_space(&self) -> bool {
        true
    }
}

/// `eps * (sin 2 pi x_1, ..., sin 2 pi x_d)`; periodic, so well defined on
/// the torus. `sup |value| = eps * sqrt(d)`.
#[derive(Debug, Clone)]
pub struct SinDisplacement {
    pub eps: f64,
    pub dim: usize,
}

impl SinDisplacement {
    pub fn bound(&self) -> f64 {
        self.eps.abs() * (self.dim as f64).sqrt()
    }
}

impl Displacement for SinDisplacement {
    fn value(&self, _i: i64, x: &Point) -> Tangent {
        x.coords().map(|c| self.eps * (TAU * c).sin())
    }

    fn jacobian(&self, _i: i64, x: &Point) -> DMatrix<f64> {
        DMatrix::from_diagonal(&x.coords().map(|c| self.eps * TAU * (TAU * c).cos()))
    }

    fn is_constant_in_space(&self) -> bool {
        false
    }
}

/// `g_i(x) = exp_{f_i(x)}(displacement(i, x))` with a declared gap profile
/// `gamma_i >= sup_x d(f_i(x), g_i(x))`.
#[derive(Debug, Clone)]
pub struct PerturbedFamily {
    base: Arc<dyn MapFamily>,
    displacement: Arc<dyn Displacement>,
    gap: IndexProfile,
    label: String,
}

impl PerturbedFamily {
    /// `g = f`, with zero gap.
    pub fn unperturbed(base: Arc<dyn MapFamily>) -> Self {
        let dim = base.chart().dim();
        let label = base.label();
        Self {
            base,
            displacement: Arc::new(ZeroDisplacement { dim }),
            gap: IndexProfile::zero(),
            label,
        }
    }

    pub fn base(&self) -> &Arc<dyn MapFamily> {
        &self.base
    }

    pub fn gap_profile(&self) -> IndexProfile {
        self.gap
    }

    /// `gamma_i`.
    pub fn gap(&self, i: i64) -> f64 {
        self.gap.at(i)
    }

    pub fn gaps(&self, window: Window) -> Vec<f64> {
        window.transitions().map(|i| self.gap(i)).collect()
    }
}

/// Builds `g` from `f` and a displacement, checking the declared gap
/// profile on `samples` random points per sampled index.
pub fn make_perturbed_family(
    base: Arc<dyn MapFamily>,
    displacement: Arc<dyn Displacement>,
    gap: IndexProfile,
    window: Window,
    samples: usize,
    seed: u64,
) -> Result<PerturbedFamily, SystemError> {
    let chart = base.chart().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in window.indices() {
        let declared = gap.at(i);
        for _ in 0..samples {
            let x = random_point(&chart, &mut rng);
            let sampled = displacement.value(i, &x).norm();
            if sampled > declared * (1.0 + 1e-12) + 1e-300 {
                return Err(SystemError::MagnitudeViolation {
                    index: i,
                    sampled,
                    declared,
                });
            }
        }
    }
    let label = format!("{}+perturbation", base.label());
    Ok(PerturbedFamily {
        base,
        displacement,
        gap,
        label,
    })
}

impl MapFamily for PerturbedFamily {
    fn chart(&self) -> &Chart {
        self.base.chart()
    }

    fn unstable_dim(&self) -> usize {
        self.base.unstable_dim()
    }

    fn evaluate_near(&self, i: i64, base: &Point, offset: &Tangent) -> Point {
        let image = self.base.evaluate_near(i, base, offset);
        let at = self.chart().project(base.coords() + offset);
        let shift = self.displacement.value(i, &at);
        self.chart().project(image.coords() + shift)
    }

    fn jacobian(&self, i: i64, x: &Point) -> DMatrix<f64> {
        self.base.jacobian(i, x) + self.displacement.jacobian(i, x)
    }

    fn constant_jacobian(&self, i: i64) -> Option<DMatrix<f64>> {
        if self.displacement.is_constant_in_space() {
            self.base.constant_jacobian(i)
        } else {
            None
        }
    }

    fn is_autonomous(&self) -> bool {
        self.base.is_autonomous()
            && matches!(self.gap, IndexProfile::Constant { .. })
            && self.displacement.is_constant_in_space()
    }

    fn label(&self) -> String {
        self.label.clone()
    }
}

/// The cat map with an `eps * sin` displacement: a genuinely nonlinear
/// Anosov family with point-dependent jacobian.
pub fn make_cat_sin_family(eps: f64, window: Window) -> Result<PerturbedFamily, SystemError> {
    let disp = SinDisplacement { eps, dim: 2 };
    let bound = disp.bound();
    let mut family = make_perturbed_family(
        Arc::new(make_cat_family(window)),
        Arc::new(disp),
        IndexProfile::Constant { magnitude: bound },
        window,
        16,
        0,
    )?;
    family.label = format!("cat+{eps}sin");
    Ok(family)
}

/// Uniform random point of the chart (box charts: uniform in the box).
pub fn random_point<R: Rng + ?Sized>(chart: &Chart, rng: &mut R) -> Point {
    let coords = match chart.kind() {
        ChartKind::FlatTorus => DVector::from_fn(chart.dim(), |_, _| rng.random::<f64>()),
        ChartKind::EuclideanBox { lower, upper } => {
            DVector::from_fn(chart.dim(), |_, _| lower + (upper - lower) * rng.random::<f64>())
        }
    };
    chart.project(coords)
}

/// Uniform random unit vector (normalized gaussian sample).
pub fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Tangent {
    use rand_distr::StandardNormal;
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Empirical modulus of continuity of the jacobians:
/// `max ||Df_i(x) - Df_i(y)||` over `samples` random pairs with `d(x, y) <= r`.
/// Families with constant jacobians return exactly 0.
pub fn continuity_modulus(family: &dyn MapFamily, window: Window, radius: f64, samples: usize, seed: u64) -> f64 {
    if window.indices().all(|i| family.constant_jacobian(i).is_some()) {
        return 0.0;
    }
    let chart = family.chart();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..samples {
        let i = rng.random_range(window.first()..=window.last());
        let x = random_point(chart, &mut rng);
        let step = random_unit(chart.dim(), &mut rng) * (radius * rng.random::<f64>());
        let y = chart.project(x.coords() + step);
        let deviation = spectral_norm(&(family.jacobian(i, &x) - family.jacobian(i, &y)));
        worst = worst.max(deviation);
    }
    worst
}

/// Central finite-difference jacobian of `f_i` at `x`.
pub fn finite_difference_jacobian(family: &dyn MapFamily, i: i64, x: &Point, step: f64) -> DMatrix<f64> {
    let chart = family.chart();
    let d = chart.dim();
    let center = family.evaluate(i, x);
    let mut jac = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut e = Tangent::zeros(d);
        e[j] = step;
        let plus = family.evaluate_near(i, x, &e);
        let minus = family.evaluate_near(i, x, &(-&e));
        let dp = chart.log(&center, &plus).expect("finite-difference step inside log domain");
        let dm = chart.log(&center, &minus).expect("finite-difference step inside log domain");
        jac.set_column(j, &((dp - dm) / (2.0 * step)));
    }
    jac
}

#[derive(Debug, Clone)]
enum LiftKind<'a> {
    Affine { offset: Tangent, matrix: DMatrix<f64> },
    General(&'a dyn MapFamily),
}

/// `F_i(z) = log_{x_{i+1}}(f_i(exp_{x_i}(z)))` for one transition.
#[derive(Debug, Clone)]
pub struct LiftedStep<'a> {
    index: i64,
    base: Point,
    next: Point,
    chart: Chart,
    kind: LiftKind<'a>,
}

/// Lifts `f_i` to the tangent spaces at `x_i` and `x_next`.
pub fn lift_step<'a>(family: &'a dyn MapFamily, i: i64, x_i: &Point, x_next: &Point) -> Result<LiftedStep<'a>, SystemError> {
    let chart = family.chart().clone();
    let image = family.evaluate(i, x_i);
    let offset = chart
        .log(x_next, &image)
        .map_err(|source| SystemError::TubeEscape { index: i, source })?;
    let kind = match family.constant_jacobian(i) {
        Some(matrix) => LiftKind::Affine { offset, matrix },
        None => LiftKind::General(family),
    };
    Ok(LiftedStep {
        index: i,
        base: x_i.clone(),
        next: x_next.clone(),
        chart,
        kind,
    })
}

impl LiftedStep<'_> {
    pub fn index(&self) -> i64 {
        self.index
    }

    pub fn base(&self) -> &Point {
        &self.base
    }

    pub fn next_base(&self) -> &Point {
        &self.next
    }

    pub fn is_affine(&self) -> bool {
        matches!(self.kind, LiftKind::Affine { .. })
    }

    /// The linear part of an affine lift.
    pub fn linear_part(&self) -> Option<&DMatrix<f64>> {
        match &self.kind {
            LiftKind::Affine { matrix, .. } => Some(matrix),
            LiftKind::General(_) => None,
        }
    }

    pub fn apply(&self, z: &Tangent) -> Result<Tangent, SystemError> {
        let escape = |source| SystemError::TubeEscape {
            index: self.index,
            source,
        };
        match &self.kind {
            LiftKind::Affine { offset, matrix } => {
                let out = offset + matrix * z;
                let radius = self.chart.injectivity_radius();
                if out.norm() >= radius {
                    return Err(escape(ChartError::RadiusExceeded {
                        distance: out.norm(),
                        radius,
                    }));
                }
                Ok(out)
            }
            LiftKind::General(family) => {
                let image = family.evaluate_near(self.index, &self.base, z);
                self.chart.log(&self.next, &image).map_err(escape)
            }
        }
    }

    /// `DF_i(z)`; on flat charts this is `Df_i(exp_{x_i}(z))`.
    pub fn derivative(&self, z: &Tangent) -> Result<DMatrix<f64>, SystemError> {
        match &self.kind {
            LiftKind::Affine { matrix, .. } => Ok(matrix.clone()),
            LiftKind::General(family) => {
                let at = self.chart.project(self.base.coords() + z);
                Ok(family.jacobian(self.index, &at))
            }
        }
    }
}
