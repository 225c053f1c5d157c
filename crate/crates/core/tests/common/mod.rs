#![allow(dead_code)]

use std::sync::Arc;

use bishadow::charts::{Chart, PNorm, Point};
use bishadow::engine::{ShadowProblem, SolveOptions};
use bishadow::hyperbolicity::{
    build_splitting, certify, shadowing_constants, tilde_constants, ModeSpec, ShadowingConstants, Splitting, SplittingMethod,
    TildeConstants,
};
use bishadow::pseudoorbit::{generate, DefectDirections, PseudoOrbit};
use bishadow::systems::{continuity_modulus, make_cat_family, make_perturbed_family, IndexProfile, MapFamily, PerturbedFamily, ShiftDisplacement, Window};
use nalgebra::DVector;

pub struct Case {
    pub f: Arc<dyn MapFamily>,
    pub g: PerturbedFamily,
    pub orbit: PseudoOrbit,
    pub splitting: Splitting,
    pub tilde: TildeConstants,
    pub constants: ShadowingConstants,
}

impl Case {
    pub fn new(f: Arc<dyn MapFamily>, g: PerturbedFamily, orbit: PseudoOrbit, mode: ModeSpec, delta: Option<f64>) -> Self {
        let method = SplittingMethod::default_for(f.as_ref(), orbit.window);
        let splitting = build_splitting(f.as_ref(), orbit.window, &orbit.points, method).unwrap();
        let eta = continuity_modulus(f.as_ref(), orbit.window, 0.01, 2000, 0);
        let cert = certify(f.as_ref(), &splitting, &orbit.points, eta, eta > 0.0).unwrap();
        let tilde = tilde_constants(&cert, 0.5).unwrap();
        let constants = shadowing_constants(&tilde, f.chart().injectivity_radius(), mode, delta).unwrap();
        Self {
            f,
            g,
            orbit,
            splitting,
            tilde,
            constants,
        }
    }

    pub fn problem(&self, p: PNorm) -> ShadowProblem<'_> {
        let opts = SolveOptions {
            p,
            ..SolveOptions::default()
        };
        ShadowProblem::new(self.f.as_ref(), &self.g, &self.orbit, &self.splitting, self.tilde, self.constants, opts).unwrap()
    }
}

pub fn cat_orbit(f: &dyn MapFamily, k: usize, recipe: IndexProfile, seed: u64) -> PseudoOrbit {
    let start = Chart::torus(2).point_from_slice(&[0.1, 0.2]).unwrap();
    generate(f, &start, Window::new(k), recipe, DefectDirections::Isotropic, seed).unwrap()
}

/// Cat family with `recipe` defects; `g = f + shift * (0.6, 0.8)`.
pub fn cat_case(k: usize, recipe: IndexProfile, shift: IndexProfile, mode: ModeSpec, delta: Option<f64>, seed: u64) -> Case {
    let w = Window::new(k);
    let f: Arc<dyn MapFamily> = Arc::new(make_cat_family(w));
    let orbit = cat_orbit(f.as_ref(), k, recipe, seed);
    let g = shifted(f.clone(), shift, w);
    Case::new(f, g, orbit, mode, delta)
}

pub fn shifted(f: Arc<dyn MapFamily>, shift: IndexProfile, w: Window) -> PerturbedFamily {
    if shift.peak() == 0.0 {
        return PerturbedFamily::unperturbed(f);
    }
    let d = f.chart().dim();
    let mut dir = DVector::zeros(d);
    dir[0] = 0.6;
    dir[1 % d] += 0.8;
    let disp = ShiftDisplacement::new(dir, shift).unwrap();
    make_perturbed_family(f, Arc::new(disp), shift, w, 4, 1).unwrap()
}

pub fn coords(points: &[Point]) -> Vec<Vec<f64>> {
    points.iter().map(|p| p.as_slice().to_vec()).collect()
}
