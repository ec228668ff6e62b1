//! Scalar building blocks of the coverage formula (`i`, `j`, `d`, `k`) and
//! the reduction of a concrete regression design to `||b||`, `u_b` and the
//! nuisance point `(||gamma||, psi)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::distributions::{normal_interval, t_two_sided_quantile, DegreesOfFreedom};
use crate::error::{invalid, Error, Result};

/// Round-off allowance when clamping `||b||` into `[0, 1]`.
pub const B_NORM_CLAMP: f64 = 1e-12;

/// `||gamma||` at or below this is treated as the null point `(0, 1)`.
pub const GAMMA_ZERO: f64 = 1e-12;

/// Linear model `Y = X beta + eps` together with the contrast `a` and the
/// tested restriction `C^T beta = t`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionDesign {
    x: DMatrix<f64>,
    a: DVector<f64>,
    c: DMatrix<f64>,
    t: DVector<f64>,
}

impl RegressionDesign {
    pub fn new(x: DMatrix<f64>, a: DVector<f64>, c: DMatrix<f64>, t: DVector<f64>) -> Result<Self> {
        let (n, p) = x.shape();
        if n <= p {
            return Err(invalid("x", format!("need n > p, got n = {n}, p = {p}")));
        }
        if a.len() != p {
            return Err(invalid("a", format!("length {} does not match p = {p}", a.len())));
        }
        if c.nrows() != p {
            return Err(invalid("c", format!("C has {} rows, expected p = {p}", c.nrows())));
        }
        let s = c.ncols();
        if s == 0 || s >= p {
            return Err(invalid("c", format!("need 1 <= s < p, got s = {s}, p = {p}")));
        }
        if t.len() != s {
            return Err(invalid("t", format!("length {} does not match s = {s}", t.len())));
        }
        if a.iter().all(|&v| v == 0.0) {
            return Err(invalid("a", "contrast vector must be nonzero"));
        }
        if (x.transpose() * &x).cholesky().is_none() {
            return Err(Error::Singular { matrix: "X^T X" });
        }
        if (c.transpose() * &c).cholesky().is_none() {
            return Err(Error::Singular { matrix: "C^T C" });
        }
        Ok(Self { x, a, c, t })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn a(&self) -> &DVector<f64> {
        &self.a
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn t(&self) -> &DVector<f64> {
        &self.t
    }
    pub fn n(&self) -> usize {
        self.x.nrows()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
    pub fn s(&self) -> usize {
        self.c.ncols()
    }
    /// Residual degrees of freedom `m = n - p`.
    pub fn m(&self) -> usize {
        self.n() - self.p()
    }

    /// Replaces the contrast vector, keeping `X`, `C` and `t`.
    pub fn with_contrast(&self, a: DVector<f64>) -> Result<Self> {
        Self::new(self.x.clone(), a, self.c.clone(), self.t.clone())
    }
}

/// Second-moment blocks of `(Theta_hat - theta, tau_hat - tau) / sigma` and
/// the derived coupling vector `b`.
#[derive(Debug, Clone)]
pub struct MomentStructure {
    pub xtx_inv: DMatrix<f64>,
    pub v11: f64,
    pub v21: DVector<f64>,
    pub v22: DMatrix<f64>,
    /// Symmetric square root of `V22`.
    pub v22_sqrt: DMatrix<f64>,
    /// Symmetric inverse square root of `V22`.
    pub v22_inv_sqrt: DMatrix<f64>,
    pub b: DVector<f64>,
    /// `b / ||b||`; the first coordinate axis when `b = 0`.
    pub u_b: DVector<f64>,
}

impl MomentStructure {
    pub fn b_norm(&self) -> f64 {
        self.b.norm()
    }
}

fn spd_inverse(m: &DMatrix<f64>, name: &'static str) -> Result<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.inverse()).ok_or(Error::Singular { matrix: name })
}

/// Symmetric square root and inverse square root of an SPD matrix.
fn spd_sqrt_pair(m: &DMatrix<f64>, name: &'static str) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    if eig.eigenvalues.iter().any(|&l| !(l > max * 1e-14)) {
        return Err(Error::Singular { matrix: name });
    }
    let q = &eig.eigenvectors;
    let root = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| l.sqrt()));
    let inv_root = root.map(|r| 1.0 / r);
    let sqrt = q * DMatrix::from_diagonal(&root) * q.transpose();
    let inv_sqrt = q * DMatrix::from_diagonal(&inv_root) * q.transpose();
    Ok((sqrt, inv_sqrt))
}

fn clamp_unit(value: f64) -> Result<f64> {
    if !(-B_NORM_CLAMP..=1.0 + B_NORM_CLAMP).contains(&value) {
        return Err(Error::BNormOutOfRange { value });
    }
    Ok(value.clamp(0.0, 1.0))
}

pub fn moment_structure(design: &RegressionDesign) -> Result<MomentStructure> {
    let xtx = design.x.transpose() * &design.x;
    let xtx_inv = spd_inverse(&xtx, "X^T X")?;
    let a = &design.a;
    let c = &design.c;
    let v11 = (a.transpose() * &xtx_inv * a)[(0, 0)];
    let v21 = c.transpose() * &xtx_inv * a;
    let v22 = c.transpose() * &xtx_inv * c;
    let (v22_sqrt, v22_inv_sqrt) = spd_sqrt_pair(&v22, "V22")?;
    let mut b = &v22_inv_sqrt * &v21 / v11.sqrt();
    let norm = b.norm();
    let clamped = clamp_unit(norm)?;
    if norm > 1.0 {
        b *= clamped / norm;
    }
    let u_b = if clamped > 0.0 {
        &b / clamped
    } else {
        let mut e = DVector::zeros(b.len());
        e[0] = 1.0;
        e
    };
    Ok(MomentStructure { xtx_inv, v11, v21, v22, v22_sqrt, v22_inv_sqrt, b, u_b })
}

/// `||b||` from the closed-form ratio
/// `a^T A C (C^T A C)^{-1} C^T A a / a^T A a`, `A = (X^T X)^{-1}`.
pub fn b_norm(design: &RegressionDesign) -> Result<f64> {
    let xtx = design.x.transpose() * &design.x;
    let chol = xtx.cholesky().ok_or(Error::Singular { matrix: "X^T X" })?;
    let aa = chol.solve(&design.a);
    let ac = chol.solve(&design.c);
    let ctac = design.c.transpose() * &ac;
    let ctac_chol = ctac.cholesky().ok_or(Error::Singular { matrix: "V22" })?;
    let cta = design.c.transpose() * &aa;
    let num = cta.dot(&ctac_chol.solve(&cta));
    let den = design.a.dot(&aa);
    clamp_unit((num / den).max(0.0).sqrt())
}

/// The reduced problem: the coverage is a function of `(||gamma||, psi)`
/// once these five numbers are fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    m: DegreesOfFreedom,
    s: DegreesOfFreedom,
    ell: f64,
    alpha: f64,
    b_norm: f64,
    #[serde(skip)]
    t_m: f64,
    #[serde(skip)]
    t_ms: f64,
    #[serde(skip)]
    sigma_z: f64,
}

impl Scenario {
    pub fn new(m: u32, s: u32, ell: f64, alpha: f64, b_norm: f64) -> Result<Self> {
        let m = DegreesOfFreedom::new(m)?;
        if s < 2 {
            return Err(invalid("s", format!("need s >= 2, got {s}")));
        }
        let s = DegreesOfFreedom::new(s)?;
        if !(ell > 0.0) || !ell.is_finite() {
            return Err(invalid("ell", format!("F-test cutoff must be positive and finite, got {ell}")));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(invalid("alpha", format!("must lie in (0, 1), got {alpha}")));
        }
        if !(b_norm > 0.0 && b_norm <= 1.0) {
            return Err(invalid("b_norm", format!("must lie in (0, 1], got {b_norm}")));
        }
        let t_m = t_two_sided_quantile(m, alpha)?;
        let t_ms = t_two_sided_quantile(DegreesOfFreedom::new(m.get() + s.get())?, alpha)?;
        let sigma_z = (1.0 - b_norm * b_norm).max(0.0).sqrt();
        Ok(Self { m, s, ell, alpha, b_norm, t_m, t_ms, sigma_z })
    }

    pub fn m(&self) -> DegreesOfFreedom {
        self.m
    }
    pub fn s(&self) -> DegreesOfFreedom {
        self.s
    }
    pub fn ell(&self) -> f64 {
        self.ell
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn b_norm(&self) -> f64 {
        self.b_norm
    }
    /// `t(m)`, the full-model two-sided quantile.
    pub fn t_m(&self) -> f64 {
        self.t_m
    }
    /// `t(m + s)`, the restricted-model two-sided quantile.
    pub fn t_ms(&self) -> f64 {
        self.t_ms
    }
    /// Standard deviation of `Z`, `sqrt(1 - ||b||^2)`.
    pub fn sigma_z(&self) -> f64 {
        self.sigma_z
    }

    pub fn with_ell(&self, ell: f64) -> Result<Self> {
        Self::new(self.m.get(), self.s.get(), ell, self.alpha, self.b_norm)
    }
    pub fn with_b_norm(&self, b_norm: f64) -> Result<Self> {
        Self::new(self.m.get(), self.s.get(), self.ell, self.alpha, b_norm)
    }
}

/// Nuisance parameter `(||gamma||, psi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamPoint {
    gamma_norm: f64,
    psi: f64,
}

impl ParamPoint {
    /// `psi` is replaced by 1 when `gamma_norm` is 0.
    pub fn new(gamma_norm: f64, psi: f64) -> Result<Self> {
        if !(gamma_norm >= 0.0) || !gamma_norm.is_finite() {
            return Err(invalid("gamma", format!("||gamma|| must be finite and >= 0, got {gamma_norm}")));
        }
        if !(psi.abs() <= 1.0) {
            return Err(invalid("psi", format!("psi must lie in [-1, 1], got {psi}")));
        }
        let psi = if gamma_norm == 0.0 { 1.0 } else { psi };
        Ok(Self { gamma_norm, psi })
    }

    pub fn null() -> Self {
        Self { gamma_norm: 0.0, psi: 1.0 }
    }

    pub fn gamma_norm(&self) -> f64 {
        self.gamma_norm
    }
    pub fn psi(&self) -> f64 {
        self.psi
    }
}

/// `P(x - t w <= sigma_z N <= x + t w)`; the `sigma_z = 0` limit is the
/// indicator `|x| <= t w`.
#[inline]
pub fn interval_prob(x: f64, half_width: f64, sigma_z: f64) -> f64 {
    if sigma_z == 0.0 {
        return if x.abs() <= half_width { 1.0 } else { 0.0 };
    }
    normal_interval((x - half_width) / sigma_z, (x + half_width) / sigma_z)
}

/// `i(x, w; ||b||) = P(-t(m) w + x <= Z <= t(m) w + x)`, `Z ~ N(0, 1 - ||b||^2)`.
#[inline]
pub fn i_fn(x: f64, w: f64, scenario: &Scenario) -> f64 {
    interval_prob(x, scenario.t_m * w, scenario.sigma_z)
}

/// `j(x, y, w; ||b||)`: probability that `Z` falls within the restricted-model
/// half-width `t(m+s) sqrt((m w^2 + y)/(m+s)) sqrt(1 - ||b||^2)` of `x`.
#[inline]
pub fn j_fn(x: f64, y: f64, w: f64, scenario: &Scenario) -> f64 {
    let m = scenario.m.as_f64();
    let ms = m + scenario.s.as_f64();
    let sigma = scenario.sigma_z;
    if sigma == 0.0 {
        return if x == 0.0 { 1.0 } else { 0.0 };
    }
    let scaled = scenario.t_ms * ((m * w * w + y) / ms).sqrt();
    normal_interval(x / sigma - scaled, x / sigma + scaled)
}

/// `d(t1, r; s, ||gamma||) = ||gamma||^2 + 2 ||gamma|| r cos(.) + r^2`,
/// with angle `2 pi t1` for `s = 2` and `pi t1` for `s >= 3`.
#[inline]
pub fn d_fn(t1: f64, r: f64, s: DegreesOfFreedom, gamma_norm: f64) -> f64 {
    let angle = if s.get() == 2 { 2.0 * PI * t1 } else { PI * t1 };
    let d = gamma_norm * gamma_norm + 2.0 * gamma_norm * r * angle.cos() + r * r;
    d.max(0.0)
}

/// `k(t1; psi)` for `s = 2`, `k(t1, t2; s, psi)` for `s >= 3`.
pub fn k_fn(t1: f64, t2: Option<f64>, s: DegreesOfFreedom, psi: f64) -> Result<f64> {
    if !(psi.abs() <= 1.0) {
        return Err(invalid("psi", format!("psi must lie in [-1, 1], got {psi}")));
    }
    match (s.get(), t2) {
        (2, None) => Ok(k_s2(t1, psi)),
        (2, Some(_)) => Err(invalid("t2", "t2 must be absent when s = 2")),
        (_, None) => Err(invalid("t2", "t2 is required when s >= 3")),
        (_, Some(t2)) => Ok(k_general(t1, t2, s.get(), psi)),
    }
}

#[inline]
pub(crate) fn k_s2(t1: f64, psi: f64) -> f64 {
    let (sin, cos) = (2.0 * PI * t1).sin_cos();
    psi * cos + (1.0 - psi * psi).max(0.0).sqrt() * sin
}

#[inline]
pub(crate) fn k_general(t1: f64, t2: f64, s: u32, psi: f64) -> f64 {
    let (sin1, cos1) = (PI * t1).sin_cos();
    let angle2 = if s == 3 { 2.0 * PI * t2 } else { PI * t2 };
    psi * cos1 + (1.0 - psi * psi).max(0.0).sqrt() * sin1 * angle2.cos()
}

/// Maps `(beta, sigma)` to `(||gamma||, psi)` with
/// `gamma = V22^{-1/2} (C^T beta - t) / sigma`.
pub fn param_point_from_design(design: &RegressionDesign, beta: &DVector<f64>, sigma: f64) -> Result<ParamPoint> {
    let moments = moment_structure(design)?;
    param_point_with_moments(design, &moments, beta, sigma)
}

pub(crate) fn param_point_with_moments(
    design: &RegressionDesign,
    moments: &MomentStructure,
    beta: &DVector<f64>,
    sigma: f64,
) -> Result<ParamPoint> {
    if !(sigma > 0.0) {
        return Err(invalid("sigma", format!("must be positive, got {sigma}")));
    }
    if beta.len() != design.p() {
        return Err(invalid("beta", format!("length {} does not match p = {}", beta.len(), design.p())));
    }
    let tau = design.c.transpose() * beta - &design.t;
    let gamma = &moments.v22_inv_sqrt * tau / sigma;
    let g = gamma.norm();
    if g <= GAMMA_ZERO {
        return Ok(ParamPoint::null());
    }
    let psi = (moments.u_b.dot(&gamma) / g).clamp(-1.0, 1.0);
    ParamPoint::new(g, psi)
}
