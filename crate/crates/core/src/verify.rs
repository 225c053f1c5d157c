//! Independent checks on solve outputs: a dense linear oracle for affine
//! families and checkers that work on deserialized results.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::charts::{seq_pnorm, PNorm, Point, Tangent};
use crate::engine::{limit_ladder, limit_report, LimitReport, ShadowingResult};
use crate::hyperbolicity::Splitting;
use crate::pseudoorbit::{root_rate, PseudoOrbit};
use crate::systems::{MapFamily, Window};

/// Slack on `l^p` bound comparisons.
pub const BOUND_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("oracle needs an affine family; index {0} has a point-dependent jacobian")]
    NotAffine(i64),
    #[error("oracle system is singular")]
    Singular,
    #[error("oracle residual {0:e} above 1e-12")]
    Residual(f64),
    #[error("{0}")]
    Chart(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub window: Window,
    pub z: Vec<Tangent>,
    pub distances: Vec<f64>,
    /// `max |A z - b|` of the stacked system.
    pub residual: f64,
}

/// Solves `z_{i+1} = B_i z_i + c_i` with `c_i = log_{x_{i+1}} g_i(x_i)`,
/// `Pi^s z_{-k} = 0` and `Pi^u z_k = 0` as one dense linear system.
///
/// `g` must have constant jacobians `B_i`.
pub fn linear_shadow_oracle(g: &dyn MapFamily, orbit: &PseudoOrbit, splitting: &Splitting) -> Result<OracleSolution, VerifyError> {
    let window = orbit.window;
    let d = g.chart().dim();
    let du = splitting.unstable_dim();
    let n = window.len() * d;
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    let mut row = 0;
    for i in window.transitions() {
        let jac = g.constant_jacobian(i).ok_or(VerifyError::NotAffine(i))?;
        let image = g.evaluate(i, orbit.point(i));
        let c = g
            .chart()
            .log(orbit.point(i + 1), &image)
            .map_err(|e| VerifyError::Chart(e.to_string()))?;
        let col = window.position(i) * d;
        for r in 0..d {
            for s in 0..d {
                a[(row + r, col + s)] = -jac[(r, s)];
            }
            a[(row + r, col + d + r)] = 1.0;
            b[row + r] = c[r];
        }
        row += d;
    }
    let first = splitting.basis_inverse(window.first());
    for r in du..d {
        for s in 0..d {
            a[(row, s)] = first[(r, s)];
        }
        row += 1;
    }
    let last = splitting.basis_inverse(window.last());
    let col = window.position(window.last()) * d;
    for r in 0..du {
        for s in 0..d {
            a[(row, col + s)] = last[(r, s)];
        }
        row += 1;
    }
    debug_assert_eq!(row, n);
    let x = a.clone().lu().solve(&b).ok_or(VerifyError::Singular)?;
    let residual = (&a * &x - &b).amax();
    if !(residual <= 1e-12) {
        return Err(VerifyError::Residual(residual));
    }
    let z: Vec<Tangent> = (0..window.len()).map(|p| x.rows(p * d, d).into_owned()).collect();
    let distances = z.iter().map(|v| v.norm()).collect();
    Ok(OracleSolution {
        window,
        z,
        distances,
        residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub pass: bool,
    pub achieved: f64,
    pub bound: f64,
    /// `bound - achieved`; negative means violated.
    pub margin: f64,
}

/// `|d|_p <= L |Delta|_p` up to [`BOUND_SLACK`].
pub fn check_lp_bound(distances: &[f64], defects: &[f64], l: f64, p: PNorm) -> BoundCheck {
    let achieved = seq_pnorm(distances, p);
    let bound = l * seq_pnorm(defects, p);
    let margin = bound - achieved;
    BoundCheck {
        pass: margin >= -BOUND_SLACK,
        achieved,
        bound,
        margin,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualCheck {
    pub pass: bool,
    /// `max_i d(g_i(y_i), y_{i+1})`.
    pub residual: f64,
    pub worst_index: i64,
}

pub fn check_orbit_residual(g: &dyn MapFamily, orbit: &[Point], first_index: i64, tol: f64) -> Result<ResidualCheck, VerifyError> {
    let mut residual = 0.0_f64;
    let mut worst_index = first_index;
    for (j, pair) in orbit.windows(2).enumerate() {
        let i = first_index + j as i64;
        let image = g.evaluate(i, &pair[0]);
        let r = g.chart().distance(&image, &pair[1]).map_err(|e| VerifyError::Chart(e.to_string()))?;
        if r > residual {
            residual = r;
            worst_index = i;
        }
    }
    Ok(ResidualCheck {
        pass: residual <= tol,
        residual,
        worst_index,
    })
}

/// Band-by-band check `d_i <= L eps_n` on the schedule built from
/// `max(delta_i, gamma_i)` with `eps_0 = L delta`.
pub fn check_limit_decay(distances: &[f64], defects: &[f64], gaps: &[f64], window: Window, l: f64, delta: f64) -> LimitReport {
    let combined: Vec<f64> = defects.iter().zip(gaps).map(|(a, b)| a.max(*b)).collect();
    let ladder = limit_ladder(&combined, window, l * delta);
    limit_report(distances, window, &ladder, l)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCheck {
    pub pass: bool,
    /// Root rate of `d` over `|i| >= k1`.
    pub rate: f64,
    pub limit: f64,
}

/// `root_rate(d, k1) <= v + epsilon + 1e-9`.
pub fn check_asymptotic_rate(distances: &[f64], first_index: i64, v: f64, epsilon: f64, k1: usize) -> Result<RateCheck, VerifyError> {
    let rate = root_rate(distances, first_index, k1.max(1)).map_err(|e| VerifyError::Chart(e.to_string()))?;
    Ok(RateCheck {
        pass: rate <= v + epsilon + 1e-9,
        rate,
        limit: v + epsilon,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckEntry {
    pub name: String,
    pub pass: bool,
    /// Whether the overall verdict depends on this check.
    pub required: bool,
    pub value: f64,
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub mode: String,
    pub pass: bool,
    pub checks: Vec<CheckEntry>,
    pub limit: Option<LimitReport>,
    pub rate: Option<RateCheck>,
}

/// Re-checks a result: orbit residual, stored distances against the
/// points, the `l^p` bounds and the mode-specific decay.
pub fn verify_result(result: &ShadowingResult, g: &dyn MapFamily, residual_tol: f64) -> Result<VerificationReport, VerifyError> {
    let mut checks = Vec::new();
    let window = result.window;
    let residual = check_orbit_residual(g, &result.orbit, window.first(), residual_tol)?;
    checks.push(CheckEntry {
        name: "orbit_residual".into(),
        pass: residual.pass,
        required: true,
        value: residual.residual,
        limit: residual_tol,
    });

    let chart = g.chart();
    let mut mismatch = 0.0_f64;
    for ((x, y), d) in result.base.iter().zip(&result.orbit).zip(&result.distances) {
        let measured = chart.distance(x, y).map_err(|e| VerifyError::Chart(e.to_string()))?;
        mismatch = mismatch.max((measured - d).abs());
    }
    checks.push(CheckEntry {
        name: "distances_match_points".into(),
        pass: mismatch <= 1e-12,
        required: true,
        value: mismatch,
        limit: 1e-12,
    });

    // the infinite schedule bounds the central segment by the norms over
    // its largest window, which the result stores
    let (defect_norm, combined_norm) = if result.mode == "infinite" {
        (result.defect_norm, result.combined_bound / result.l)
    } else {
        let combined: Vec<f64> = result.defects.iter().zip(&result.gaps).map(|(a, b)| a.max(*b)).collect();
        (seq_pnorm(&result.defects, result.p), seq_pnorm(&combined, result.p))
    };
    let achieved = seq_pnorm(&result.distances, result.p);
    let gapless = result.gaps.iter().zip(&result.defects).all(|(g, d)| g <= d);
    let bound = result.l * defect_norm;
    checks.push(CheckEntry {
        name: "lp_bound".into(),
        pass: achieved <= bound + BOUND_SLACK,
        required: gapless,
        value: achieved,
        limit: bound,
    });
    let combined_bound = result.l * combined_norm;
    checks.push(CheckEntry {
        name: "lp_bound_with_gap".into(),
        pass: achieved <= combined_bound + BOUND_SLACK,
        required: true,
        value: achieved,
        limit: combined_bound,
    });

    let mut limit = None;
    let mut rate = None;
    match result.mode.as_str() {
        "limit" => {
            let report = check_limit_decay(&result.distances, &result.defects, &result.gaps, window, result.l, result.delta);
            let worst = report.bands.iter().map(|b| b.margin).fold(f64::INFINITY, f64::min);
            checks.push(CheckEntry {
                name: "limit_decay".into(),
                pass: report.pass,
                required: true,
                value: worst,
                limit: 0.0,
            });
            limit = Some(report);
        }
        "asymptotic" => {
            if let Some(r) = &result.rate {
                let check = check_asymptotic_rate(&result.distances, window.first(), r.v, r.epsilon, r.k1)?;
                checks.push(CheckEntry {
                    name: "asymptotic_rate".into(),
                    pass: check.pass,
                    required: true,
                    value: check.rate,
                    limit: check.limit,
                });
                rate = Some(check);
            }
        }
        _ => {}
    }
    let pass = checks.iter().all(|c| c.pass || !c.required);
    Ok(VerificationReport {
        mode: result.mode.clone(),
        pass,
        checks,
        limit,
        rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::make_scalar_family;
    use approx::assert_abs_diff_eq;

    #[test]
    fn lp_bound_examples() {
        let c = check_lp_bound(&[0.1, 0.1], &[0.05, 0.05], 3.0, PNorm::Finite(2.0));
        assert!(c.pass);
        assert_abs_diff_eq!(c.margin, 3.0 * 0.05 * 2.0_f64.sqrt() - 0.1 * 2.0_f64.sqrt(), epsilon = 1e-15);
        let c = check_lp_bound(&[0.2], &[0.05], 3.0, PNorm::Infinity);
        assert!(!c.pass);
        assert_abs_diff_eq!(c.margin, -0.05, epsilon = 1e-15);
        // slack is absolute
        assert!(check_lp_bound(&[0.15 + 5e-13], &[0.05], 3.0, PNorm::Infinity).pass);
        assert!(!check_lp_bound(&[0.15 + 5e-12], &[0.05], 3.0, PNorm::Infinity).pass);
    }

    #[test]
    fn contracting_scalar_residual_and_distances() {
        let w = Window::new(1);
        let f = make_scalar_family(0.5, 1e3, 1.0, w);
        let c = f.chart().clone();
        let pt = |v: f64| c.point_from_slice(&[v]).unwrap();
        let shadow = [pt(0.2), pt(0.1), pt(0.05)];
        let r = check_orbit_residual(&f, &shadow, -1, 1e-12).unwrap();
        assert!(r.pass);
        assert_eq!(r.residual, 0.0);
        let pseudo = [pt(0.2), pt(0.15), pt(0.075)];
        let r = check_orbit_residual(&f, &pseudo, -1, 1e-12).unwrap();
        assert!(!r.pass);
        assert_eq!(r.worst_index, -1);
        assert_abs_diff_eq!(r.residual, 0.05, epsilon = 1e-15);
        let d: Vec<f64> = pseudo.iter().zip(&shadow).map(|(a, b)| c.distance(a, b).unwrap()).collect();
        assert_abs_diff_eq!(d.as_slice(), [0.0, 0.05, 0.025].as_slice(), epsilon = 1e-15);
    }

    #[test]
    fn rate_check_example() {
        let w = Window::new(60);
        let d: Vec<f64> = w.indices().map(|i| 0.5_f64.powi(i.unsigned_abs() as i32)).collect();
        let c = check_asymptotic_rate(&d, w.first(), 0.5, 0.1, 10).unwrap();
        assert!(c.pass);
        assert_abs_diff_eq!(c.rate, 0.5, epsilon = 1e-12);
        let c = check_asymptotic_rate(&d, w.first(), 0.3, 0.1, 10).unwrap();
        assert!(!c.pass);
    }
}
