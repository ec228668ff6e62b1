//! Minimum coverage over the nuisance parameters `(||gamma||, psi)` for a
//! fixed scenario, and the minimum-coverage curve in `||b||`.
//!
//! The search is a rectangular grid over `[0, gamma_max] x [-1, 1]`
//! followed by a bounded Nelder-Mead refinement started from the best grid
//! cell. Grid cells are screened with a coarsened [`QuadratureSpec`]
//! (see [`screening_spec`]); the best cell and every refinement vertex are
//! evaluated with the caller's spec.

use std::cell::RefCell;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coverage::{coverage_probability, CoverageResult};
use crate::error::{invalid, Error, Result};
use crate::kernel::{ParamPoint, Scenario};
use crate::quadrature::QuadratureSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinimizeConfig {
    pub gamma_max: f64,
    pub grid_gamma: usize,
    pub grid_psi: usize,
    /// Refinement stops once every simplex edge is shorter than this.
    pub refine_tol: f64,
    pub refine_max_evals: usize,
    /// Screen grid cells with [`screening_spec`] instead of the full spec.
    pub screen_grid: bool,
}

impl Default for MinimizeConfig {
    fn default() -> Self {
        Self {
            gamma_max: 20.0,
            grid_gamma: 41,
            grid_psi: 21,
            refine_tol: 1e-4,
            refine_max_evals: 400,
            screen_grid: true,
        }
    }
}

impl MinimizeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_max > 0.0 && self.gamma_max.is_finite()) {
            return Err(invalid("gamma_max", format!("must be positive and finite, got {}", self.gamma_max)));
        }
        if self.grid_gamma < 2 || self.grid_psi < 2 {
            return Err(invalid("grid", "both grid sizes must be at least 2"));
        }
        if !(self.refine_tol > 0.0) {
            return Err(invalid("refine_tol", "must be positive"));
        }
        if self.refine_max_evals == 0 {
            return Err(invalid("refine_max_evals", "must be positive"));
        }
        Ok(())
    }

    /// Same config with both grid resolutions doubled (cell size halved).
    pub fn refined_grid(&self) -> Self {
        Self { grid_gamma: 2 * self.grid_gamma - 1, grid_psi: 2 * self.grid_psi - 1, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinResult {
    pub min_coverage: f64,
    pub argmin: ParamPoint,
    /// Coverage evaluations spent, grid included.
    pub evaluations: usize,
    /// Coverage at the best grid cell, evaluated with the full spec.
    pub grid_min: f64,
    /// Quadrature error proxy at the argmin.
    pub error_estimate: f64,
    /// False when refinement hit `refine_max_evals` first.
    pub converged: bool,
    /// The best grid cell or the refined argmin lies on the `||gamma|| = gamma_max` edge.
    pub boundary_warning: bool,
}

/// Looser spec used to rank grid cells: tolerances at least `1e-4` relative
/// and `1e-6` absolute, and at most 16 inner panels.
pub fn screening_spec(spec: &QuadratureSpec) -> QuadratureSpec {
    QuadratureSpec {
        rel_tol: spec.rel_tol.max(1e-4),
        abs_tol: spec.abs_tol.max(1e-6),
        simpson_panels: spec.simpson_panels.min(16),
        ..*spec
    }
}

fn grid_axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Grid cells in row-major `(gamma, psi)` order; the `gamma = 0` row
/// collapses to the single point `(0, 1)`.
fn grid_points(config: &MinimizeConfig) -> Vec<(usize, ParamPoint)> {
    let gammas = grid_axis(0.0, config.gamma_max, config.grid_gamma);
    let psis = grid_axis(-1.0, 1.0, config.grid_psi);
    let mut out = vec![(0, ParamPoint::null())];
    for (gi, &g) in gammas.iter().enumerate().skip(1) {
        for &psi in &psis {
            // the grid is built inside the valid box
            out.push((gi, ParamPoint::new(g, psi).expect("grid point in box")));
        }
    }
    out
}

struct Objective<'a> {
    scenario: &'a Scenario,
    spec: &'a QuadratureSpec,
    gamma_max: f64,
    cache: RefCell<HashMap<(u64, u64), CoverageResult>>,
    evaluations: RefCell<usize>,
}

impl<'a> Objective<'a> {
    fn clamp(&self, v: [f64; 2]) -> [f64; 2] {
        let g = v[0].clamp(0.0, self.gamma_max);
        let psi = if g == 0.0 { 1.0 } else { v[1].clamp(-1.0, 1.0) };
        [g, psi]
    }

    fn eval(&self, v: [f64; 2]) -> Result<CoverageResult> {
        let [g, psi] = self.clamp(v);
        let key = (g.to_bits(), psi.to_bits());
        if let Some(hit) = self.cache.borrow().get(&key) {
            return Ok(*hit);
        }
        let res = coverage_probability(self.scenario, &ParamPoint::new(g, psi)?, self.spec)?;
        *self.evaluations.borrow_mut() += 1;
        self.cache.borrow_mut().insert(key, res);
        Ok(res)
    }
}

struct RefineOutcome {
    best: [f64; 2],
    value: CoverageResult,
    converged: bool,
}

/// Nelder-Mead on the clamped box with the standard coefficients
/// (reflection 1, expansion 2, contraction 1/2, shrink 1/2).
fn nelder_mead(obj: &Objective, start: [f64; 2], step: [f64; 2], tol: f64, max_evals: usize) -> Result<RefineOutcome> {
    let budget_left = |obj: &Objective| *obj.evaluations.borrow() < max_evals;
    let start = obj.clamp(start);
    // step away from the box edges so the initial simplex is not degenerate
    let toward = |x: f64, lo: f64, hi: f64, h: f64| {
        if x + h <= hi {
            x + h
        } else if x - h >= lo {
            x - h
        } else {
            0.5 * (lo + hi)
        }
    };
    let v1 = obj.clamp([toward(start[0], 0.0, obj.gamma_max, step[0]), start[1]]);
    // on the gamma = 0 line psi is inert, so the second vertex also moves in gamma
    let g2 = if start[0] == 0.0 { step[0].min(obj.gamma_max) } else { start[0] };
    let v2 = obj.clamp([g2, toward(start[1], -1.0, 1.0, step[1])]);
    let mut simplex: Vec<([f64; 2], f64)> = Vec::with_capacity(3);
    for v in [start, v1, v2] {
        simplex.push((v, obj.eval(v)?.total));
    }
    let spread = |s: &[([f64; 2], f64)]| {
        let mut d: f64 = 0.0;
        for i in 0..3 {
            for j in i + 1..3 {
                d = d.max((s[i].0[0] - s[j].0[0]).abs()).max((s[i].0[1] - s[j].0[1]).abs());
            }
        }
        d
    };
    let mut converged = false;
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if spread(&simplex) <= tol {
            converged = true;
            break;
        }
        if !budget_left(obj) {
            break;
        }
        let centroid = [0.5 * (simplex[0].0[0] + simplex[1].0[0]), 0.5 * (simplex[0].0[1] + simplex[1].0[1])];
        let worst = simplex[2];
        let along = |t: f64| {
            obj.clamp([centroid[0] + t * (worst.0[0] - centroid[0]), centroid[1] + t * (worst.0[1] - centroid[1])])
        };
        let xr = along(-1.0);
        let fr = obj.eval(xr)?.total;
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = obj.eval(xe)?.total;
            simplex[2] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[1].1 {
            simplex[2] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < worst.1 {
            let x = along(-0.5);
            (x, obj.eval(x)?.total)
        } else {
            let x = along(0.5);
            (x, obj.eval(x)?.total)
        };
        if fc < worst.1.min(fr) {
            simplex[2] = (xc, fc);
            continue;
        }
        let best = simplex[0].0;
        for vertex in simplex.iter_mut().skip(1) {
            let x = obj.clamp([0.5 * (best[0] + vertex.0[0]), 0.5 * (best[1] + vertex.0[1])]);
            *vertex = (x, obj.eval(x)?.total);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let best = simplex[0].0;
    Ok(RefineOutcome { best, value: obj.eval(best)?, converged })
}

/// Minimum coverage of the naive interval over `(||gamma||, psi)`.
pub fn min_coverage(scenario: &Scenario, config: &MinimizeConfig, spec: &QuadratureSpec) -> Result<MinResult> {
    config.validate()?;
    spec.validate()?;
    let grid_spec = if config.screen_grid { screening_spec(spec) } else { *spec };
    let cells = grid_points(config);
    let values: Vec<f64> = cells
        .par_iter()
        .map(|(_, p)| coverage_probability(scenario, p, &grid_spec).map(|r| r.total))
        .collect::<Result<_>>()?;
    let (best_idx, _) = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .ok_or_else(|| Error::Invariant { kind: "grid", detail: "empty grid".into() })?;
    let (gi, start) = cells[best_idx];

    let obj = Objective {
        scenario,
        spec,
        gamma_max: config.gamma_max,
        cache: RefCell::new(HashMap::new()),
        evaluations: RefCell::new(0),
    };
    let start = [start.gamma_norm(), start.psi()];
    let grid_min = obj.eval(start)?.total;
    let step = [config.gamma_max / (config.grid_gamma - 1) as f64, 2.0 / (config.grid_psi - 1) as f64];
    let outcome = nelder_mead(&obj, start, step, config.refine_tol, config.refine_max_evals)?;
    let evaluations = cells.len() + *obj.evaluations.borrow();
    let boundary_warning = gi == config.grid_gamma - 1 || outcome.best[0] >= config.gamma_max;
    Ok(MinResult {
        min_coverage: outcome.value.total.min(grid_min),
        argmin: ParamPoint::new(outcome.best[0], outcome.best[1])?,
        evaluations,
        grid_min,
        error_estimate: outcome.value.error_estimate,
        converged: outcome.converged,
        boundary_warning,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub b_norm: f64,
    pub result: std::result::Result<MinResult, String>,
}

/// `min_coverage` at each `||b||` in `b_grid`, rows in input order. A
/// failing row records its error and does not stop the others.
pub fn min_coverage_curve(
    m: u32,
    s: u32,
    ell: f64,
    alpha: f64,
    b_grid: &[f64],
    config: &MinimizeConfig,
    spec: &QuadratureSpec,
) -> Vec<CurveRow> {
    b_grid
        .par_iter()
        .map(|&b| {
            let result = Scenario::new(m, s, ell, alpha, b)
                .and_then(|sc| min_coverage(&sc, config, spec))
                .map_err(|e| e.to_string());
            CurveRow { b_norm: b, result }
        })
        .collect()
}
