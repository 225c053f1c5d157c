//! Pseudo-orbits: generation from a defect recipe, defect measurement,
//! profile classification and CSV round trips.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::charts::{seq_pnorm, ChartError, PNorm, Point};
use crate::linalg::leading_left_singular_vectors;
use crate::systems::{random_unit, IndexProfile, MapFamily, Window};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PseudoOrbitError {
    #[error("defect magnitude {magnitude} at index {index} is not below the injectivity radius {radius}")]
    MagnitudeTooLarge { index: i64, magnitude: f64, radius: f64 },
    #[error("tube escape at index {index}: {source}")]
    TubeEscape {
        index: i64,
        #[source]
        source: ChartError,
    },
    #[error("no index with |i| >= {n0} in the window")]
    EmptyTail { n0: usize },
    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

/// How defect directions are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefectDirections {
    /// Uniform on the unit sphere.
    #[default]
    Isotropic,
    /// The most expanded direction of the jacobian (random sign).
    Unstable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoOrbit {
    pub window: Window,
    /// `x_{-k} .. x_k`.
    pub points: Vec<Point>,
    /// `delta_i = d(f_i(x_i), x_{i+1})` for `i = -k .. k-1`.
    pub defects: Vec<f64>,
    /// RNG seed used to generate; 0 for measured inputs.
    pub seed: u64,
}

impl PseudoOrbit {
    /// Measures the defects of `points` under `family`.
    pub fn from_points(family: &dyn MapFamily, window: Window, points: Vec<Point>) -> Result<Self, PseudoOrbitError> {
        let defects = measure_defects(family, window, &points)?;
        Ok(Self {
            window,
            points,
            defects,
            seed: 0,
        })
    }

    pub fn point(&self, i: i64) -> &Point {
        &self.points[self.window.position(i)]
    }

    pub fn defect(&self, i: i64) -> f64 {
        self.defects[self.window.position(i)]
    }

    /// The central sub-orbit on `|i| <= k`.
    pub fn restrict(&self, window: Window) -> Result<Self, PseudoOrbitError> {
        if window.k > self.window.k {
            return Err(PseudoOrbitError::Parameter(format!(
                "cannot restrict |i| <= {} to |i| <= {}",
                self.window.k, window.k
            )));
        }
        let off = self.window.k - window.k;
        Ok(Self {
            window,
            points: self.points[off..off + window.len()].to_vec(),
            defects: self.defects[off..off + 2 * window.k].to_vec(),
            seed: self.seed,
        })
    }
}

/// Forward sweep from `x_{-k} = start`: `x_{i+1} = exp_{f_i(x_i)}(eta_i)`
/// with `|eta_i| = recipe(i)`.
pub fn generate(
    family: &dyn MapFamily,
    start: &Point,
    window: Window,
    recipe: IndexProfile,
    directions: DefectDirections,
    seed: u64,
) -> Result<PseudoOrbit, PseudoOrbitError> {
    let chart = family.chart();
    let radius = chart.injectivity_radius();
    for i in window.transitions() {
        let magnitude = recipe.at(i);
        if !(magnitude >= 0.0 && magnitude < radius) {
            return Err(PseudoOrbitError::MagnitudeTooLarge { index: i, magnitude, radius });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(window.len());
    let mut x = start.clone();
    points.push(x.clone());
    for i in window.transitions() {
        let image = family.evaluate(i, &x);
        let magnitude = recipe.at(i);
        let dir = match directions {
            DefectDirections::Isotropic => random_unit(chart.dim(), &mut rng),
            DefectDirections::Unstable => {
                let top = leading_left_singular_vectors(&family.jacobian(i, &x), 1).column(0).into_owned();
                if rng.random::<bool>() {
                    top
                } else {
                    -top
                }
            }
        };
        x = chart
            .exp(&image, &(dir * magnitude))
            .map_err(|source| PseudoOrbitError::TubeEscape { index: i, source })?;
        points.push(x.clone());
    }
    let defects = measure_defects(family, window, &points)?;
    Ok(PseudoOrbit {
        window,
        points,
        defects,
        seed,
    })
}

/// `delta_i = |log_{f_i(x_i)}(x_{i+1})|`.
pub fn measure_defects(family: &dyn MapFamily, window: Window, points: &[Point]) -> Result<Vec<f64>, PseudoOrbitError> {
    if points.len() != window.len() {
        return Err(PseudoOrbitError::Parameter(format!(
            "window |i| <= {} needs {} points, got {}",
            window.k,
            window.len(),
            points.len()
        )));
    }
    window
        .transitions()
        .map(|i| {
            let p = window.position(i);
            let image = family.evaluate(i, &points[p]);
            family
                .chart()
                .log(&image, &points[p + 1])
                .map(|v| v.norm())
                .map_err(|source| PseudoOrbitError::TubeEscape { index: i, source })
        })
        .collect()
}

/// Classification of a defect sequence indexed by transitions `-k .. k-1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectProfile {
    pub p: PNorm,
    pub pnorm: f64,
    /// `T(N) = max_{|i| >= N} delta_i` for `N = 0 ..= k`.
    pub tail_sup: Vec<f64>,
    pub vanishing: bool,
    pub n0: usize,
    /// `max_{|i| >= n0} delta_i^(1/|i|)`.
    pub rate: f64,
    pub geometric: bool,
    /// `exp(slope)` of a least-squares fit of `ln delta_i` against `|i|`.
    pub regression_rate: Option<f64>,
    pub r_squared: Option<f64>,
}

/// `T(N)` for `N = 0 ..= k`.
pub fn tail_sup(defects: &[f64], first_index: i64, k: usize) -> Vec<f64> {
    let mut by_abs = vec![0.0_f64; k + 1];
    for (j, &d) in defects.iter().enumerate() {
        let a = (first_index + j as i64).unsigned_abs() as usize;
        if a <= k {
            by_abs[a] = by_abs[a].max(d);
        }
    }
    let mut out = vec![0.0; k + 1];
    let mut running = 0.0_f64;
    for n in (0..=k).rev() {
        running = running.max(by_abs[n]);
        out[n] = running;
    }
    out
}

/// `max_{|i| >= n0} d_i^(1/|i|)`, with zero entries contributing 0.
pub fn root_rate(values: &[f64], first_index: i64, n0: usize) -> Result<f64, PseudoOrbitError> {
    if n0 == 0 {
        return Err(PseudoOrbitError::Parameter("root_rate needs n0 >= 1".into()));
    }
    let mut any = false;
    let mut best = 0.0_f64;
    for (j, &d) in values.iter().enumerate() {
        let a = (first_index + j as i64).unsigned_abs();
        if a as usize >= n0 {
            any = true;
            if d > 0.0 {
                best = best.max(d.powf(1.0 / a as f64));
            }
        }
    }
    if any {
        Ok(best)
    } else {
        Err(PseudoOrbitError::EmptyTail { n0 })
    }
}

/// Vanishing when `T(ceil(3k/4)) <= T(floor(k/4)) / 2` (or all zero);
/// geometric when vanishing and `ln delta_i` is linear in `|i|` over the
/// tail (`r^2 >= 0.99`).
pub fn classify(defects: &[f64], window: Window, p: PNorm, n0: usize) -> Result<DefectProfile, PseudoOrbitError> {
    let first = window.first();
    let k = window.k;
    let tail = tail_sup(defects, first, k);
    let all_zero = defects.iter().all(|&d| d == 0.0);
    let vanishing = all_zero || tail[(3 * k).div_ceil(4)] <= 0.5 * tail[k / 4];
    let rate = root_rate(defects, first, n0)?;

    let samples: Vec<(f64, f64)> = defects
        .iter()
        .enumerate()
        .filter_map(|(j, &d)| {
            let a = (first + j as i64).unsigned_abs() as usize;
            (a >= n0 && d > 0.0).then(|| (a as f64, d.ln()))
        })
        .collect();
    let fit = linear_fit(&samples);
    let geometric = vanishing && (all_zero || fit.is_some_and(|(_, r2)| r2 >= 0.99));
    Ok(DefectProfile {
        p,
        pnorm: seq_pnorm(defects, p),
        tail_sup: tail,
        vanishing,
        n0,
        rate,
        geometric,
        regression_rate: fit.map(|(slope, _)| slope.exp()),
        r_squared: fit.map(|(_, r2)| r2),
    })
}

/// Least-squares slope and `r^2`; `None` without spread in both axes.
fn linear_fit(samples: &[(f64, f64)]) -> Option<(f64, f64)> {
    if samples.len() < 3 {
        return None;
    }
    let n = samples.len() as f64;
    let mx = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let my = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let sxx: f64 = samples.iter().map(|s| (s.0 - mx).powi(2)).sum();
    let syy: f64 = samples.iter().map(|s| (s.1 - my).powi(2)).sum();
    let sxy: f64 = samples.iter().map(|s| (s.0 - mx) * (s.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 0.0 } else { sxy * sxy / (sxx * syy) };
    Some((slope, r2))
}

/// CSV with columns `i, x1 .. xd, delta_i`; `delta_k` is written as 0.
pub fn to_csv(orbit: &PseudoOrbit) -> String {
    let d = orbit.points.first().map_or(0, Point::dim);
    let mut s = String::from("i");
    for j in 1..=d {
        let _ = write!(s, ",x{j}");
    }
    s.push_str(",delta_i\n");
    for (p, i) in orbit.window.indices().enumerate() {
        let _ = write!(s, "{i}");
        for c in orbit.points[p].as_slice() {
            let _ = write!(s, ",{c:.16e}");
        }
        let delta = orbit.defects.get(p).copied().unwrap_or(0.0);
        let _ = writeln!(s, ",{delta:.16e}");
    }
    s
}

/// Reads points from [`to_csv`] output; the defect column is ignored and
/// re-measured.
pub fn from_csv(family: &dyn MapFamily, text: &str) -> Result<PseudoOrbit, PseudoOrbitError> {
    let chart = family.chart();
    let d = chart.dim();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(PseudoOrbitError::Csv {
        line: 1,
        message: "empty file".into(),
    })?;
    let columns = header.split(',').count();
    if columns != d + 2 {
        return Err(PseudoOrbitError::Csv {
            line: 1,
            message: format!("expected {} columns for a {d}-dimensional chart, got {columns}", d + 2),
        });
    }
    let mut indices = Vec::new();
    let mut points = Vec::new();
    for (n, line) in lines {
        let bad = |message: String| PseudoOrbitError::Csv { line: n + 1, message };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 2 {
            return Err(bad(format!("expected {} fields, got {}", d + 2, fields.len())));
        }
        let i: i64 = fields[0].parse().map_err(|e| bad(format!("index: {e}")))?;
        let coords = fields[1..=d]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| bad(format!("coordinate {f:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let point = chart.point_from_slice(&coords).map_err(|e| bad(e.to_string()))?;
        indices.push(i);
        points.push(point);
    }
    if points.len() % 2 == 0 {
        return Err(PseudoOrbitError::Csv {
            line: 0,
            message: format!("expected an odd number of rows, got {}", points.len()),
        });
    }
    let window = Window::new(points.len() / 2);
    if !indices.iter().copied().eq(window.indices()) {
        return Err(PseudoOrbitError::Csv {
            line: 0,
            message: format!("indices must run from {} to {} in order", window.first(), window.last()),
        });
    }
    PseudoOrbit::from_points(family, window, points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{make_cat_family, make_scalar_family};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cat_start() -> Point {
        crate::charts::Chart::torus(2).point_from_slice(&[0.1, 0.2]).unwrap()
    }

    #[test]
    fn zero_recipe_gives_true_orbit() {
        let w = Window::new(20);
        let cat = make_cat_family(w);
        let o = generate(&cat, &cat_start(), w, IndexProfile::zero(), DefectDirections::Isotropic, 1).unwrap();
        assert!(o.defects.iter().all(|&d| d == 0.0));
        let prof = classify(&o.defects, w, PNorm::Infinity, 5).unwrap();
        assert_eq!(prof.pnorm, 0.0);
        assert!(prof.vanishing && prof.geometric);
        assert!(prof.tail_sup.iter().all(|&t| t == 0.0));
        assert_eq!(prof.rate, 0.0);
    }

    #[test]
    fn constant_recipe_is_measured_back() {
        let w = Window::new(100);
        let cat = make_cat_family(w);
        let o = generate(&cat, &cat_start(), w, IndexProfile::Constant { magnitude: 1e-3 }, DefectDirections::Isotropic, 7).unwrap();
        for &d in &o.defects {
            assert_abs_diff_eq!(d, 1e-3, epsilon = 1e-14);
        }
        let prof = classify(&o.defects, w, PNorm::Infinity, 25).unwrap();
        assert_abs_diff_eq!(prof.pnorm, 1e-3, epsilon = 1e-14);
        assert!(!prof.vanishing);
    }

    #[test]
    fn geometric_recipe_at_window_edge() {
        let w = Window::new(40);
        let cat = make_cat_family(w);
        let recipe = IndexProfile::Geometric { magnitude: 1e-2, rate: 0.5 };
        let o = generate(&cat, &cat_start(), w, recipe, DefectDirections::Isotropic, 3).unwrap();
        let d40 = o.defect(-40);
        assert_abs_diff_eq!(d40, 1e-2 * 0.5_f64.powi(40), epsilon = 1e-14);
        // relative accuracy is limited by the torus coordinate spacing
        assert!((d40 / (1e-2 * 0.5_f64.powi(40)) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn unstable_directions_follow_the_expanding_axis() {
        let w = Window::new(5);
        let cat = make_cat_family(w);
        let o = generate(&cat, &cat_start(), w, IndexProfile::Constant { magnitude: 1e-3 }, DefectDirections::Unstable, 3).unwrap();
        let chart = cat.chart();
        let golden = (1.0 + 5.0_f64.sqrt()) / 2.0;
        let axis = nalgebra::DVector::from_vec(vec![golden, 1.0]).normalize();
        for i in w.transitions() {
            let v = chart.log(&cat.evaluate(i, o.point(i)), o.point(i + 1)).unwrap();
            assert_abs_diff_eq!(v.dot(&axis).abs(), 1e-3, epsilon = 1e-12);
        }
    }

    #[test]
    fn oversized_recipe_is_rejected() {
        let w = Window::new(3);
        let cat = make_cat_family(w);
        let err = generate(&cat, &cat_start(), w, IndexProfile::Constant { magnitude: 0.5 }, DefectDirections::Isotropic, 0).unwrap_err();
        assert!(matches!(err, PseudoOrbitError::MagnitudeTooLarge { .. }));
    }

    #[test]
    fn scalar_defects_by_hand() {
        let w = Window::new(1);
        let f = make_scalar_family(2.0, 10.0, 1.0, w);
        let pts: Vec<Point> = [0.0, 0.1, 0.2].iter().map(|&c| f.chart().point_from_slice(&[c]).unwrap()).collect();
        let d = measure_defects(&f, w, &pts).unwrap();
        assert_abs_diff_eq!(d[0], 0.1, epsilon = 1e-16);
        assert_abs_diff_eq!(d[1], 0.0, epsilon = 1e-16);
    }

    #[test]
    fn corrupting_one_point_changes_one_defect() {
        let w = Window::new(10);
        let cat = make_cat_family(w);
        let mut o = generate(&cat, &cat_start(), w, IndexProfile::zero(), DefectDirections::Isotropic, 0).unwrap();
        let p = w.position(3);
        let c = o.points[p].coords() + nalgebra::DVector::from_vec(vec![0.0, 1e-3]);
        o.points[p] = cat.chart().project(c);
        // the next transition moves by A*(0, 1e-3), still inside the tube,
        // so corrupt the tail too
        let mut x = o.points[p].clone();
        for i in 3..10 {
            x = cat.evaluate(i, &x);
            o.points[w.position(i + 1)] = x.clone();
        }
        let d = measure_defects(&cat, w, &o.points).unwrap();
        for (j, i) in w.transitions().enumerate() {
            if i == 2 {
                assert_abs_diff_eq!(d[j], 1e-3, epsilon = 1e-15);
            } else {
                assert!(d[j] < 1e-15, "index {i}: {}", d[j]);
            }
        }
    }

    #[test]
    fn harmonic_profile_tail() {
        let w = Window::new(100);
        let defects: Vec<f64> = w.transitions().map(|i| 1e-3 / (1.0 + i.unsigned_abs() as f64)).collect();
        let prof = classify(&defects, w, PNorm::Infinity, 25).unwrap();
        assert!(prof.vanishing);
        for n in 0..=100 {
            assert_abs_diff_eq!(prof.tail_sup[n], 1e-3 / (1.0 + n as f64), epsilon = 1e-18);
        }
    }

    #[test]
    fn geometric_rate_by_direct_evaluation() {
        let w = Window::new(60);
        let defects: Vec<f64> = w.transitions().map(|i| 1e-2 * 0.5_f64.powi(i.unsigned_abs() as i32)).collect();
        let prof = classify(&defects, w, PNorm::Infinity, 10).unwrap();
        let direct = (10..=60).map(|a| 0.5 * 1e-2_f64.powf(1.0 / a as f64)).fold(0.0_f64, f64::max);
        assert_abs_diff_eq!(prof.rate, direct, epsilon = 1e-14);
        assert!(prof.rate <= 0.5);
        assert!(prof.geometric);
        assert_abs_diff_eq!(prof.regression_rate.unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn root_rate_examples() {
        let w = Window::new(50);
        let geo: Vec<f64> = w.indices().map(|i| 0.5_f64.powi(i.unsigned_abs() as i32)).collect();
        assert_abs_diff_eq!(root_rate(&geo, -50, 1).unwrap(), 0.5, epsilon = 1e-15);
        assert_eq!(root_rate(&vec![0.0; 101], -50, 1).unwrap(), 0.0);
        let scaled: Vec<f64> = geo.iter().map(|g| 3.0 * g).collect();
        assert_abs_diff_eq!(root_rate(&scaled, -50, 10).unwrap(), 0.5 * 3.0_f64.powf(0.1), epsilon = 1e-15);
        assert_abs_diff_eq!(0.5 * 3.0_f64.powf(0.1), 0.5581, epsilon = 1e-4);
        assert!(matches!(root_rate(&geo, -50, 51), Err(PseudoOrbitError::EmptyTail { n0: 51 })));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let w = Window::new(15);
        let cat = make_cat_family(w);
        let o = generate(&cat, &cat_start(), w, IndexProfile::Harmonic { magnitude: 1e-3 }, DefectDirections::Isotropic, 9).unwrap();
        let text = to_csv(&o);
        let back = from_csv(&cat, &text).unwrap();
        assert_eq!(back.points, o.points);
        assert_eq!(back.defects, o.defects);
        assert_eq!(back.seed, 0);
        assert_eq!(to_csv(&back), text);
    }

    #[test]
    fn csv_rejects_malformed_rows() {
        let cat = make_cat_family(Window::new(1));
        assert!(from_csv(&cat, "i,x1,x2,delta_i\n0,0.1\n").is_err());
        assert!(from_csv(&cat, "i,x1,delta_i\n").is_err());
        assert!(from_csv(&cat, "i,x1,x2,delta_i\n-1,0.1,0.1,0\n0,0.1,0.1,0\n").is_err());
        assert!(from_csv(&cat, "i,x1,x2,delta_i\n1,0.1,0.1,0\n").is_err());
    }

    proptest! {
        #[test]
        fn measurement_reproduces_recipe(seed in any::<u64>(), m in 1e-6..0.1f64, shape in 0usize..3) {
            let w = Window::new(12);
            let cat = make_cat_family(w);
            let recipe = match shape {
                0 => IndexProfile::Constant { magnitude: m },
                1 => IndexProfile::Harmonic { magnitude: m },
                _ => IndexProfile::Geometric { magnitude: m, rate: 0.7 },
            };
            let o = generate(&cat, &cat_start(), w, recipe, DefectDirections::Isotropic, seed).unwrap();
            for (j, i) in w.transitions().enumerate() {
                prop_assert!((o.defects[j] - recipe.at(i)).abs() <= 1e-14);
            }
        }

        #[test]
        fn root_rate_approaches_v_monotonically(c in 0.01..100.0f64, v in 0.1..0.9f64) {
            prop_assume!((c - 1.0).abs() > 1e-3);
            let w = Window::new(80);
            let d: Vec<f64> = w.indices().map(|i| c * v.powi(i.unsigned_abs() as i32)).collect();
            let rates: Vec<f64> = (1..=80).map(|n0| root_rate(&d, -80, n0).unwrap()).collect();
            for pair in rates.windows(2) {
                if c > 1.0 {
                    prop_assert!(pair[1] <= pair[0] * (1.0 + 1e-14));
                    prop_assert!(pair[1] >= v * (1.0 - 1e-14));
                } else {
                    prop_assert!(pair[1] >= pair[0] * (1.0 - 1e-14));
                    prop_assert!(pair[1] <= v * (1.0 + 1e-14));
                }
            }
        }
    }
}
