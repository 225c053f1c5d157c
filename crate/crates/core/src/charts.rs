//! Flat charted spaces: points, tangent vectors, exponential and logarithm
//! maps, distances and sequence norms.
//!
//! Every component of the total space is modelled by the same [`Chart`].
//! Charts are flat, so `exp` and `log` are translations in chart
//! coordinates and the tangent space at every point is plain `R^d`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tangent vectors are plain coordinate vectors in a flat chart.
pub type Tangent = DVector<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChartError {
    #[error("point leaves the euclidean box: coordinate {coordinate} = {value} outside [{lower}, {upper}]")]
    OutOfBox {
        coordinate: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("log radius exceeded: distance {distance} >= injectivity radius {radius}")]
    RadiusExceeded { distance: f64, radius: f64 },
    #[error("points live on different components ({left} vs {right})")]
    ComponentMismatch { left: i64, right: i64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite coordinate")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ChartKind {
    /// `R^d / Z^d`, coordinates normalized to `[0, 1)`.
    FlatTorus,
    /// The box `[lower, upper]^d` in `R^d`.
    EuclideanBox { lower: f64, upper: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chart {
    kind: ChartKind,
    dim: usize,
    injectivity_radius: f64,
}

/// A point of a chart. Torus coordinates are always normalized to `[0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<f64>", into = "Vec<f64>")]
pub struct Point(DVector<f64>);

impl From<Vec<f64>> for Point {
    fn from(v: Vec<f64>) -> Self {
        Point(DVector::from_vec(v))
    }
}

impl From<Point> for Vec<f64> {
    fn from(p: Point) -> Self {
        p.0.as_slice().to_vec()
    }
}

impl Point {
    pub fn coords(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

fn wrap_unit(value: f64) -> f64 {
    let r = value.rem_euclid(1.0);
    // rem_euclid rounds tiny negatives up to exactly 1.0
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

impl Chart {
    /// Flat torus `R^d / Z^d` with injectivity radius 1/2.
    pub fn torus(dim: usize) -> Self {
        assert!(dim > 0, "chart dimension must be positive");
        Self {
            kind: ChartKind::FlatTorus,
            dim,
            injectivity_radius: 0.5,
        }
    }

    /// Euclidean box `[lower, upper]^d`; the exponential map is a global
    /// diffeomorphism, so the usable radius is the configured tube radius.
    pub fn euclidean_box(dim: usize, lower: f64, upper: f64, tube_radius: f64) -> Self {
        assert!(dim > 0, "chart dimension must be positive");
        assert!(lower < upper, "empty box");
        assert!(tube_radius > 0.0, "tube radius must be positive");
        Self {
            kind: ChartKind::EuclideanBox { lower, upper },
            dim,
            injectivity_radius: tube_radius,
        }
    }

    pub fn kind(&self) -> ChartKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn injectivity_radius(&self) -> f64 {
        self.injectivity_radius
    }

    fn check_dim(&self, got: usize) -> Result<(), ChartError> {
        if got != self.dim {
            return Err(ChartError::DimensionMismatch {
                expected: self.dim,
                got,
            });
        }
        Ok(())
    }

    /// Builds a point from raw coordinates, wrapping on the torus and
    /// checking the box bounds otherwise.
    pub fn point(&self, coords: DVector<f64>) -> Result<Point, ChartError> {
        self.check_dim(coords.len())?;
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(ChartError::NonFinite);
        }
        match self.kind {
            ChartKind::FlatTorus => Ok(Point(coords.map(wrap_unit))),
            ChartKind::EuclideanBox { lower, upper } => {
                if let Some((coordinate, &value)) = coords
                    .iter()
                    .enumerate()
                    .find(|(_, &c)| c < lower || c > upper)
                {
                    return Err(ChartError::OutOfBox {
                        coordinate,
                        value,
                        lower,
                        upper,
                    });
                }
                Ok(Point(coords))
            }
        }
    }

    pub fn point_from_slice(&self, coords: &[f64]) -> Result<Point, ChartError> {
        self.point(DVector::from_column_slice(coords))
    }

    /// Projects raw coordinates onto the chart without any box check.
    ///
    /// Map families use this for their images: a box chart only polices
    /// points reached through [`Chart::exp`].
    pub fn project(&self, coords: DVector<f64>) -> Point {
        match self.kind {
            ChartKind::FlatTorus => Point(coords.map(wrap_unit)),
            ChartKind::EuclideanBox { .. } => Point(coords),
        }
    }

    /// `exp_x(v)`: translation by `v` in chart coordinates.
    pub fn exp(&self, x: &Point, v: &Tangent) -> Result<Point, ChartError> {
        self.check_dim(x.dim())?;
        self.check_dim(v.len())?;
        self.point(&x.0 + v)
    }

    /// Shortest coordinate displacement from `x` to `y`.
    ///
    /// On the torus each component is reduced to `[-1/2, 1/2]`; an exact
    /// half-period tie resolves to `+1/2`.
    fn displacement(&self, x: &Point, y: &Point) -> Tangent {
        let raw = &y.0 - &x.0;
        match self.kind {
            ChartKind::FlatTorus => raw.map(|w| {
                let r = w - w.round();
                if r == -0.5 {
                    0.5
                } else {
                    r
                }
            }),
            ChartKind::EuclideanBox { .. } => raw,
        }
    }

    /// `log_x(y)`: the tangent vector at `x` pointing to `y`, defined while
    /// `distance(x, y) < rho`.
    pub fn log(&self, x: &Point, y: &Point) -> Result<Tangent, ChartError> {
        self.check_dim(x.dim())?;
        self.check_dim(y.dim())?;
        let v = self.displacement(x, y);
        let distance = v.norm();
        if distance >= self.injectivity_radius {
            return Err(ChartError::RadiusExceeded {
                distance,
                radius: self.injectivity_radius,
            });
        }
        Ok(v)
    }

    /// Chart distance; wrap-around euclidean distance on the torus.
    pub fn distance(&self, x: &Point, y: &Point) -> Result<f64, ChartError> {
        self.check_dim(x.dim())?;
        self.check_dim(y.dim())?;
        Ok(self.displacement(x, y).norm())
    }

    /// Distance on the total space. Points on different components are
    /// never compared by this crate, so that case is an error.
    pub fn distance_on(
        &self,
        (i, x): (i64, &Point),
        (j, y): (i64, &Point),
    ) -> Result<f64, ChartError> {
        if i != j {
            return Err(ChartError::ComponentMismatch { left: i, right: j });
        }
        self.distance(x, y)
    }

    pub fn zero_tangent(&self) -> Tangent {
        Tangent::zeros(self.dim)
    }
}

/// Exponent of a sequence norm: a real `p >= 1` or infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PNorm {
    Finite(f64),
    Infinity,
}

impl PNorm {
    pub fn new(p: f64) -> Option<Self> {
        if p.is_infinite() && p > 0.0 {
            Some(PNorm::Infinity)
        } else if p >= 1.0 {
            Some(PNorm::Finite(p))
        } else {
            None
        }
    }

    pub fn value(self) -> f64 {
        match self {
            PNorm::Finite(p) => p,
            PNorm::Infinity => f64::INFINITY,
        }
    }
}

impl std::fmt::Display for PNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PNorm::Finite(p) => write!(f, "{p}"),
            PNorm::Infinity => write!(f, "inf"),
        }
    }
}

impl Serialize for PNorm {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            PNorm::Finite(p) => serializer.serialize_f64(*p),
            PNorm::Infinity => serializer.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for PNorm {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        let p = match Raw::deserialize(deserializer)? {
            Raw::Num(p) => p,
            Raw::Text(s) => match s.trim().to_ascii_lowercase().as_str() {
                "inf" | "infinity" | "∞" => f64::INFINITY,
                other => other
                    .parse::<f64>()
                    .map_err(|_| serde::de::Error::custom(format!("invalid p-norm exponent '{s}'")))?,
            },
        };
        PNorm::new(p).ok_or_else(|| serde::de::Error::custom(format!("p must be >= 1, got {p}")))
    }
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut carry = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

/// `(sum s_i^p)^(1/p)`, or `max s_i` for `p = inf`. Entries must be
/// nonnegative; the empty sequence has norm 0.
pub fn seq_pnorm(s: &[f64], p: PNorm) -> f64 {
    let max = s.iter().copied().fold(0.0_f64, f64::max);
    match p {
        PNorm::Infinity => max,
        PNorm::Finite(_) if max == 0.0 || !max.is_finite() => max,
        PNorm::Finite(p) => {
            // scaled by the max entry so large windows cannot overflow
            let total = compensated_sum(s.iter().map(|&v| (v / max).powf(p)));
            max * total.powf(1.0 / p)
        }
    }
}
