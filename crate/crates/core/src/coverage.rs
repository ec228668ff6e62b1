//! Coverage probability of the naive interval after a preliminary F test,
//! `P(theta in I, F > ell) + P(theta in J, F <= ell)`, as a function of
//! `(||gamma||, psi)` for a fixed [`Scenario`].
//!
//! Every term is a low-dimensional integral over `W` (scaled residual
//! standard deviation), `R` (radius of `H - gamma`) and up to two sphere
//! coordinates `T1`, `T2`. Unbounded axes are truncated at the radii of
//! [`pick_truncation`]; the remaining region is mapped onto a rectangle so
//! the integrands are smooth.
//!
//! For `s >= 3` and `||gamma|| = 0` two forms of the first term are
//! available through [`term_i_gamma_zero`]: the sphere-coordinate form
//! (`cos(pi t1)` weighted by `f_T1`, the default) and the literal uniform
//! `cos(2 pi t1)` form. Only the sphere form agrees with the Monte Carlo
//! simulators; see `GammaZeroForm`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::distributions::{cdf_w, density_q, density_r, density_t1, density_t2, density_w, Noncentrality};
use crate::error::Result;
use crate::kernel::{i_fn, j_fn, k_general, k_s2, ParamPoint, Scenario};
use crate::quadrature::{
    integrate_nested, pick_truncation, simpson_with_error, Estimate, QuadratureSpec, TruncationRadii,
};

/// `|psi|` this close to 1 is treated as exactly `±1`.
pub const PSI_SNAP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// `s = 2`: triple integral over `(t1, r, w)`.
    S2,
    /// `s >= 3`, `||gamma|| > 0`, `|psi| < 1`: quadruple integral.
    S3plusGeneral,
    /// `s >= 3`, `||gamma|| > 0`, `psi = ±1`.
    S3plusPsiPm1,
    /// `s >= 3`, `||gamma|| = 0`.
    S3plusGamma0,
}

impl Branch {
    pub fn select(s: u32, point: &ParamPoint) -> Branch {
        if s == 2 {
            Branch::S2
        } else if point.gamma_norm() == 0.0 {
            Branch::S3plusGamma0
        } else if 1.0 - point.psi().abs() <= PSI_SNAP {
            Branch::S3plusPsiPm1
        } else {
            Branch::S3plusGeneral
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::S2 => "s2",
            Branch::S3plusGeneral => "s3plus_general",
            Branch::S3plusPsiPm1 => "s3plus_psi_pm1",
            Branch::S3plusGamma0 => "s3plus_gamma0",
        }
    }
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The two readings of the `s >= 3`, `||gamma|| = 0` first term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaZeroForm {
    /// First sphere coordinate `cos(pi t1)` with `t1 ~ f_T1`.
    Sphere,
    /// `cos(2 pi t1)` with `t1` uniform, as in the two-dimensional case.
    UniformAngle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageResult {
    /// `P(theta in I, F > ell)`.
    pub term_i: f64,
    /// `P(theta in J, F <= ell)`.
    pub term_j: f64,
    pub total: f64,
    pub branch: Branch,
    /// Sum of the quadrature error proxies of both terms.
    pub error_estimate: f64,
    /// Upper bound on the mass dropped by the truncated axes.
    pub truncation_bound: f64,
}

fn radii(scenario: &Scenario, spec: &QuadratureSpec) -> Result<TruncationRadii> {
    spec.validate()?;
    pick_truncation(scenario.m(), scenario.s(), spec.tail_bound)
}

/// `P(theta in J, F <= ell)`.
///
/// Integrates `j(||b|| ||gamma|| psi, q, w) f_Q(q) f_W(w)` over
/// `0 <= q <= s ell w^2`, `0 <= w <= c1`. The `q` axis is mapped to
/// `[0, 1]` by `q = s ell w^2 v^2`; the square keeps the `q^{s/2-1}`
/// behaviour of `f_Q` at the origin smooth for the Simpson rule.
pub fn term_j(scenario: &Scenario, point: &ParamPoint, spec: &QuadratureSpec) -> Result<Estimate> {
    let radii = radii(scenario, spec)?;
    let s = scenario.s();
    let m = scenario.m();
    let lambda = Noncentrality::from_gamma_norm(point.gamma_norm())?;
    let x = scenario.b_norm() * point.gamma_norm() * point.psi();
    let sl = s.as_f64() * scenario.ell();
    let panels = spec.simpson_panels;

    let inner = |outer: &[f64]| -> Result<Estimate> {
        let w = outer[0];
        let fw = density_w(w, m);
        if fw == 0.0 {
            return Ok(Estimate::default());
        }
        let qmax = sl * w * w;
        let est = simpson_with_error(
            |v| {
                let q = qmax * v * v;
                j_fn(x, q, w, scenario) * density_q(q, s, lambda) * 2.0 * qmax * v
            },
            0.0,
            1.0,
            panels,
        )?;
        Ok(Estimate::new(est.value * fw, est.error * fw))
    };
    integrate_nested(&inner, &[(0.0, radii.c1)], spec)
}

/// Shared pieces of the first-term integrands.
struct IntervalTerm<'a> {
    scenario: &'a Scenario,
    c1: f64,
    sl: f64,
    panels: usize,
}

impl<'a> IntervalTerm<'a> {
    /// Upper `w` limit `u = sqrt(d / (s ell))`, capped at `c1`.
    #[inline]
    fn w_limit(&self, d: f64) -> f64 {
        (d / self.sl).sqrt().min(self.c1)
    }

    /// `int_0^{u} i(x, w) f_W(w) dw` via `w = u w*`.
    fn w_block(&self, x: f64, u: f64) -> Result<Estimate> {
        if u <= 0.0 {
            return Ok(Estimate::default());
        }
        let sc = self.scenario;
        let m = sc.m();
        if sc.sigma_z() == 0.0 {
            // ||b|| = 1: i is the indicator of w >= |x| / t(m)
            let lo = (x.abs() / sc.t_m()).min(u);
            return Ok(Estimate::new((cdf_w(u, m) - cdf_w(lo, m)).max(0.0), 0.0));
        }
        simpson_with_error(
            |ws| {
                let w = u * ws;
                i_fn(x, w, sc) * density_w(w, m) * u
            },
            0.0,
            1.0,
            self.panels,
        )
    }

    /// Tensor Simpson block over `(w*, t2)` for the quadruple integral.
    fn w_t2_block(&self, r: f64, t1: f64, psi: f64, u: f64, t2_weights: &[f64], t2_nodes: &[f64]) -> Result<Estimate> {
        if u <= 0.0 {
            return Ok(Estimate::default());
        }
        let sc = self.scenario;
        let s = sc.s().get();
        let b = sc.b_norm();
        let n = self.panels;
        let m = sc.m();
        let h = 1.0 / n as f64;
        let ratio = if sc.sigma_z() == 0.0 { 0.0 } else { 1.0 };
        let fw: Vec<f64> = (0..=n).map(|k| density_w(u * k as f64 * h, m) * u).collect();
        let mut fine = 0.0;
        let mut coarse = 0.0;
        for (j, &t2) in t2_nodes.iter().enumerate() {
            let x = -b * r * k_general(t1, t2, s, psi);
            let wt = t2_weights[j];
            let (mut row_f, mut row_c) = (0.0, 0.0);
            if ratio == 0.0 {
                let lo = (x.abs() / sc.t_m()).min(u);
                let v = (cdf_w(u, m) - cdf_w(lo, m)).max(0.0);
                row_f = v;
                row_c = v;
            } else {
                for (k, &fwk) in fw.iter().enumerate() {
                    if fwk == 0.0 {
                        continue;
                    }
                    let v = i_fn(x, u * k as f64 * h, sc) * fwk;
                    row_f += simpson_weight(k, n) * v;
                    if k % 2 == 0 {
                        row_c += simpson_weight(k / 2, n / 2) * v;
                    }
                }
                row_f *= h / 3.0;
                row_c *= 2.0 * h / 3.0;
            }
            fine += simpson_weight(j, n) * wt * row_f;
            if j % 2 == 0 {
                coarse += simpson_weight(j / 2, n / 2) * wt * row_c;
            }
        }
        let fine = fine * h / 3.0;
        let coarse = coarse * 2.0 * h / 3.0;
        let error = if n.is_multiple_of(4) { (fine - coarse).abs() / 15.0 } else { 0.0 };
        Ok(Estimate::new(fine, error))
    }
}

#[inline]
fn simpson_weight(i: usize, n: usize) -> f64 {
    if i == 0 || i == n {
        1.0
    } else if i % 2 == 1 {
        4.0
    } else {
        2.0
    }
}

fn interval_term<'a>(scenario: &'a Scenario, spec: &QuadratureSpec) -> Result<(IntervalTerm<'a>, TruncationRadii)> {
    let radii = radii(scenario, spec)?;
    Ok((
        IntervalTerm {
            scenario,
            c1: radii.c1,
            sl: scenario.s().as_f64() * scenario.ell(),
            panels: spec.simpson_panels,
        },
        radii,
    ))
}

/// `P(theta in I, F > ell)`, dispatched on the branch for `(s, ||gamma||, psi)`.
pub fn term_i(scenario: &Scenario, point: &ParamPoint, spec: &QuadratureSpec) -> Result<Estimate> {
    let s = scenario.s().get();
    match Branch::select(s, point) {
        Branch::S2 => term_i_s2(scenario, point, spec),
        Branch::S3plusGamma0 => term_i_gamma_zero(scenario, spec, GammaZeroForm::Sphere),
        Branch::S3plusPsiPm1 => term_i_psi_pm1(scenario, point.gamma_norm(), point.psi().signum(), spec),
        Branch::S3plusGeneral => term_i_general(scenario, point, spec),
    }
}

fn term_i_s2(scenario: &Scenario, point: &ParamPoint, spec: &QuadratureSpec) -> Result<Estimate> {
    let (term, radii) = interval_term(scenario, spec)?;
    let s = scenario.s();
    let b = scenario.b_norm();
    let g = point.gamma_norm();
    let psi = point.psi();
    let inner = |outer: &[f64]| -> Result<Estimate> {
        let (r, t1) = (outer[0], outer[1]);
        let fr = density_r(r, s);
        if fr == 0.0 {
            return Ok(Estimate::default());
        }
        let d = g * g + 2.0 * g * r * (2.0 * PI * t1).cos() + r * r;
        let u = term.w_limit(d.max(0.0));
        let est = term.w_block(-b * r * k_s2(t1, psi), u)?;
        Ok(Estimate::new(est.value * fr, est.error * fr))
    };
    integrate_nested(&inner, &[(0.0, radii.c2), (0.0, 1.0)], spec)
}

/// `s >= 3`, `||gamma|| > 0`, `psi = sign` (`±1`).
pub fn term_i_psi_pm1(scenario: &Scenario, gamma_norm: f64, sign: f64, spec: &QuadratureSpec) -> Result<Estimate> {
    let (term, radii) = interval_term(scenario, spec)?;
    let s = scenario.s();
    let b = scenario.b_norm();
    let g = gamma_norm;
    let inner = |outer: &[f64]| -> Result<Estimate> {
        let (r, t1) = (outer[0], outer[1]);
        let weight = density_r(r, s) * density_t1(t1, s);
        if weight == 0.0 {
            return Ok(Estimate::default());
        }
        let c = (PI * t1).cos();
        let d = g * g + 2.0 * g * r * c + r * r;
        let u = term.w_limit(d.max(0.0));
        let est = term.w_block(-b * r * sign * c, u)?;
        Ok(Estimate::new(est.value * weight, est.error * weight))
    };
    integrate_nested(&inner, &[(0.0, radii.c2), (0.0, 1.0)], spec)
}

/// `s >= 3`, `||gamma|| = 0`, in either reading of the angular law.
pub fn term_i_gamma_zero(scenario: &Scenario, spec: &QuadratureSpec, form: GammaZeroForm) -> Result<Estimate> {
    let (term, radii) = interval_term(scenario, spec)?;
    let s = scenario.s();
    let b = scenario.b_norm();
    let inner = |outer: &[f64]| -> Result<Estimate> {
        let (r, t1) = (outer[0], outer[1]);
        let (weight, c) = match form {
            GammaZeroForm::Sphere => (density_r(r, s) * density_t1(t1, s), (PI * t1).cos()),
            GammaZeroForm::UniformAngle => (density_r(r, s), (2.0 * PI * t1).cos()),
        };
        if weight == 0.0 {
            return Ok(Estimate::default());
        }
        let u = term.w_limit(r * r);
        let est = term.w_block(-b * r * c, u)?;
        Ok(Estimate::new(est.value * weight, est.error * weight))
    };
    integrate_nested(&inner, &[(0.0, radii.c2), (0.0, 1.0)], spec)
}

/// `s >= 3`, `||gamma|| > 0`, `|psi| < 1`: the quadruple integral, with the
/// `(w*, t2)` block done by a tensor Simpson rule.
pub fn term_i_general(scenario: &Scenario, point: &ParamPoint, spec: &QuadratureSpec) -> Result<Estimate> {
    let (term, radii) = interval_term(scenario, spec)?;
    let s = scenario.s();
    let g = point.gamma_norm();
    let psi = point.psi();
    let n = spec.simpson_panels;
    let t2_nodes: Vec<f64> = (0..=n).map(|j| j as f64 / n as f64).collect();
    let t2_weights: Vec<f64> = t2_nodes.iter().map(|&t| density_t2(t, s)).collect::<Result<_>>()?;
    let inner = |outer: &[f64]| -> Result<Estimate> {
        let (r, t1) = (outer[0], outer[1]);
        let weight = density_r(r, s) * density_t1(t1, s);
        if weight == 0.0 {
            return Ok(Estimate::default());
        }
        let d = g * g + 2.0 * g * r * (PI * t1).cos() + r * r;
        let u = term.w_limit(d.max(0.0));
        let est = term.w_t2_block(r, t1, psi, u, &t2_weights, &t2_nodes)?;
        Ok(Estimate::new(est.value * weight, est.error * weight))
    };
    integrate_nested(&inner, &[(0.0, radii.c2), (0.0, 1.0)], spec)
}

/// Coverage probability at `point` for `scenario`.
pub fn coverage_probability(scenario: &Scenario, point: &ParamPoint, spec: &QuadratureSpec) -> Result<CoverageResult> {
    let point = snap_psi(point);
    let branch = Branch::select(scenario.s().get(), &point);
    let ti = term_i(scenario, &point, spec)?;
    let tj = term_j(scenario, &point, spec)?;
    let total = (ti.value + tj.value).clamp(0.0, 1.0);
    Ok(CoverageResult {
        term_i: ti.value,
        term_j: tj.value,
        total,
        branch,
        error_estimate: ti.error + tj.error,
        // term_i truncates both the W and R axes, term_j only W
        truncation_bound: 3.0 * spec.tail_bound,
    })
}

fn snap_psi(point: &ParamPoint) -> ParamPoint {
    let psi = point.psi();
    if psi.abs() != 1.0 && 1.0 - psi.abs() <= PSI_SNAP {
        ParamPoint::new(point.gamma_norm(), psi.signum()).unwrap_or(*point)
    } else {
        *point
    }
}
