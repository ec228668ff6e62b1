//! Numerical integration for the coverage formula: truncation radii with
//! certified tail bounds, composite Simpson, and nested integration over a
//! rectangle (innermost axis by a fixed Simpson rule, outer axes adaptive or
//! by panel doubling).

use serde::{Deserialize, Serialize};

use crate::distributions::{chi2_upper_quantile, DegreesOfFreedom};
use crate::error::{invalid, Error, Result};

/// How axes outside the innermost one are integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OuterRule {
    /// Globally adaptive Simpson with Richardson correction.
    #[default]
    Adaptive,
    /// Composite Simpson, doubling the panel count until two successive
    /// estimates agree.
    FixedTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    /// Upper bound on the probability mass dropped by truncating each
    /// unbounded axis.
    pub tail_bound: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Panel count of the innermost Simpson rule (even).
    pub simpson_panels: usize,
    pub outer_rule: OuterRule,
    /// Maximum number of panels per outer axis.
    pub panel_budget: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            tail_bound: 1e-5,
            rel_tol: 1e-6,
            abs_tol: 1e-8,
            simpson_panels: 64,
            outer_rule: OuterRule::Adaptive,
            panel_budget: 1 << 14,
        }
    }
}

impl QuadratureSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.tail_bound > 0.0 && self.tail_bound < 1.0) {
            return Err(invalid("tail_bound", format!("must lie in (0, 1), got {}", self.tail_bound)));
        }
        if !(self.rel_tol > 0.0) || !(self.abs_tol > 0.0) {
            return Err(invalid("tolerance", "rel_tol and abs_tol must be positive"));
        }
        if self.simpson_panels == 0 || !self.simpson_panels.is_multiple_of(2) {
            return Err(invalid(
                "simpson_panels",
                format!("must be a positive even integer, got {}", self.simpson_panels),
            ));
        }
        if self.panel_budget < 2 {
            return Err(invalid("panel_budget", "must be at least 2"));
        }
        Ok(())
    }
}

/// Finite cut-offs on the `W` axis (`c1`) and the `R` axis (`c2`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationRadii {
    pub c1: f64,
    pub c2: f64,
}

/// Smallest radii with `P(chi2_m > m c1^2) <= tail_bound` and
/// `P(chi2_s > c2^2) <= tail_bound`.
pub fn pick_truncation(m: DegreesOfFreedom, s: DegreesOfFreedom, tail_bound: f64) -> Result<TruncationRadii> {
    let qm = chi2_upper_quantile(m, tail_bound)?;
    let qs = chi2_upper_quantile(s, tail_bound)?;
    // nudge outward by a relative 1e-9 so round-off never lands on the wrong side
    let c1 = (qm / m.as_f64()).sqrt() * (1.0 + 1e-9);
    let c2 = qs.sqrt() * (1.0 + 1e-9);
    Ok(TruncationRadii { c1, c2 })
}

/// Integral value with an error proxy.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
}

impl Estimate {
    pub fn new(value: f64, error: f64) -> Self {
        Self { value, error }
    }
}

impl std::ops::Add for Estimate {
    type Output = Estimate;
    fn add(self, rhs: Estimate) -> Estimate {
        Estimate::new(self.value + rhs.value, self.error + rhs.error)
    }
}

#[inline]
fn finite(v: f64, x: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteIntegrand { abscissa: x })
    }
}

/// Composite Simpson's rule with `panels` (even) subintervals.
pub fn simpson_1d(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, panels: usize) -> Result<f64> {
    if panels == 0 || !panels.is_multiple_of(2) {
        return Err(invalid("panels", format!("must be a positive even integer, got {panels}")));
    }
    let h = (b - a) / panels as f64;
    let mut acc = finite(f(a), a)? + finite(f(b), b)?;
    for i in 1..panels {
        let x = a + i as f64 * h;
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * finite(f(x), x)?;
    }
    Ok(acc * h / 3.0)
}

/// Composite Simpson with an error proxy taken from the half-resolution
/// rule on the same nodes (available when `panels` is a multiple of 4).
pub fn simpson_with_error(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, panels: usize) -> Result<Estimate> {
    if panels == 0 || !panels.is_multiple_of(2) {
        return Err(invalid("panels", format!("must be a positive even integer, got {panels}")));
    }
    let h = (b - a) / panels as f64;
    let mut fine = 0.0;
    let mut coarse = 0.0;
    for i in 0..=panels {
        let x = a + i as f64 * h;
        let v = finite(f(x), x)?;
        let wf = if i == 0 || i == panels {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        fine += wf * v;
        if i % 2 == 0 {
            let j = i / 2;
            let wc = if j == 0 || j == panels / 2 {
                1.0
            } else if j % 2 == 1 {
                4.0
            } else {
                2.0
            };
            coarse += wc * v;
        }
    }
    let fine = fine * h / 3.0;
    if panels.is_multiple_of(4) {
        let coarse = coarse * 2.0 * h / 3.0;
        Ok(Estimate::new(fine, (fine - coarse).abs() / 15.0))
    } else {
        Ok(Estimate::new(fine, 0.0))
    }
}

/// One-dimensional integral of a function that itself returns an
/// estimate; inner errors are integrated alongside the values.
fn integrate_axis<F>(f: &F, a: f64, b: f64, spec: &QuadratureSpec) -> Result<Estimate>
where
    F: Fn(f64) -> Result<Estimate>,
{
    match spec.outer_rule {
        OuterRule::Adaptive => adaptive_simpson(f, a, b, spec),
        OuterRule::FixedTensor => doubling_simpson(f, a, b, spec),
    }
}

#[derive(Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    fa: Estimate,
    fm: Estimate,
    fb: Estimate,
    fl: Estimate,
    fr: Estimate,
    /// Richardson-corrected value on the segment.
    value: f64,
    /// `|two halves - whole| / 15`.
    error: f64,
    depth: u32,
}

impl Segment {
    #[allow(clippy::too_many_arguments)]
    fn new(a: f64, b: f64, fa: Estimate, fl: Estimate, fm: Estimate, fr: Estimate, fb: Estimate, depth: u32) -> Self {
        let h = b - a;
        let whole = h / 6.0 * (fa.value + 4.0 * fm.value + fb.value);
        let halves = h / 12.0 * (fa.value + 4.0 * fl.value + 2.0 * fm.value + 4.0 * fr.value + fb.value);
        let delta = halves - whole;
        Segment { a, b, fa, fm, fb, fl, fr, value: halves + delta / 15.0, error: delta.abs() / 15.0, depth }
    }

    fn inner_error(&self) -> f64 {
        (self.b - self.a) / 12.0
            * (self.fa.error + 4.0 * self.fl.error + 2.0 * self.fm.error + 4.0 * self.fr.error + self.fb.error)
    }
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.error.total_cmp(&other.error)
    }
}

const INITIAL_SEGMENTS: usize = 4;
const MAX_DEPTH: u32 = 48;

/// Globally adaptive Simpson: the segment with the largest error estimate
/// is bisected until the summed estimate meets the tolerance.
fn adaptive_simpson<F>(f: &F, a: f64, b: f64, spec: &QuadratureSpec) -> Result<Estimate>
where
    F: Fn(f64) -> Result<Estimate>,
{
    use std::collections::BinaryHeap;

    if a == b {
        return Ok(Estimate::default());
    }
    let n0 = INITIAL_SEGMENTS;
    let h = (b - a) / n0 as f64;
    let mut nodes = Vec::with_capacity(4 * n0 + 1);
    for i in 0..=4 * n0 {
        nodes.push(f(a + i as f64 * 0.25 * h)?);
    }
    let mut heap = BinaryHeap::with_capacity(64);
    for k in 0..n0 {
        let n = &nodes[4 * k..4 * k + 5];
        let lo = a + k as f64 * h;
        heap.push(Segment::new(lo, lo + h, n[0], n[1], n[2], n[3], n[4], 0));
    }
    // leaves at MAX_DEPTH are retired so the heap only holds splittable segments
    let mut retired = Estimate::default();
    let mut panels = n0;
    loop {
        let (value, error) = heap.iter().fold((retired.value, retired.error), |(v, e), s| (v + s.value, e + s.error));
        let tol = spec.abs_tol.max(spec.rel_tol * value.abs());
        let worst = match heap.peek() {
            Some(s) if error > tol => *s,
            _ => {
                let inner: f64 = heap.iter().map(Segment::inner_error).sum::<f64>();
                return Ok(Estimate::new(value, error + inner));
            }
        };
        if panels >= spec.panel_budget {
            return Err(Error::QuadratureBudget { budget: spec.panel_budget, achieved: error });
        }
        heap.pop();
        let mid = worst.fm;
        let xm = 0.5 * (worst.a + worst.b);
        let left_q = [f(0.25 * (3.0 * worst.a + xm))?, f(0.25 * (worst.a + 3.0 * xm))?];
        let right_q = [f(0.25 * (3.0 * xm + worst.b))?, f(0.25 * (xm + 3.0 * worst.b))?];
        let depth = worst.depth + 1;
        let left = Segment::new(worst.a, xm, worst.fa, left_q[0], worst.fl, left_q[1], mid, depth);
        let right = Segment::new(xm, worst.b, mid, right_q[0], worst.fr, right_q[1], worst.fb, depth);
        panels += 1;
        for seg in [left, right] {
            if seg.depth >= MAX_DEPTH {
                retired = retired + Estimate::new(seg.value, seg.error + seg.inner_error());
            } else {
                heap.push(seg);
            }
        }
    }
}

fn doubling_simpson<F>(f: &F, a: f64, b: f64, spec: &QuadratureSpec) -> Result<Estimate>
where
    F: Fn(f64) -> Result<Estimate>,
{
    // values at the nodes of the current grid, reused after each doubling
    let mut n = spec.simpson_panels.max(2);
    let mut vals: Vec<Estimate> = (0..=n).map(|i| f(a + (b - a) * i as f64 / n as f64)).collect::<Result<_>>()?;
    let simpson = |vals: &[Estimate], n: usize| -> (f64, f64) {
        let h = (b - a) / n as f64;
        let mut v = 0.0;
        let mut e = 0.0;
        for (i, x) in vals.iter().enumerate() {
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            v += w * x.value;
            e += w * x.error;
        }
        (v * h / 3.0, e * h / 3.0)
    };
    let (mut prev, _) = simpson(&vals, n);
    loop {
        let n2 = 2 * n;
        let mut next = Vec::with_capacity(n2 + 1);
        for (i, &v) in vals.iter().enumerate().take(n) {
            next.push(v);
            next.push(f(a + (b - a) * (2 * i + 1) as f64 / n2 as f64)?);
        }
        next.push(vals[n]);
        let (cur, inner) = simpson(&next, n2);
        let diff = (cur - prev).abs();
        let tol = spec.abs_tol.max(spec.rel_tol * cur.abs());
        if diff <= tol {
            return Ok(Estimate::new(cur, diff / 15.0 + inner));
        }
        if n2 >= spec.panel_budget {
            return Err(Error::QuadratureBudget { budget: spec.panel_budget, achieved: diff });
        }
        vals = next;
        n = n2;
        prev = cur;
    }
}

/// Nested integration over the rectangle `outer x [inner block]`.
///
/// `outer` lists the outer axes, outermost first. `inner` receives the
/// outer coordinates and returns the estimate of the remaining (inner)
/// integral.
pub fn integrate_nested<F>(inner: &F, outer: &[(f64, f64)], spec: &QuadratureSpec) -> Result<Estimate>
where
    F: Fn(&[f64]) -> Result<Estimate>,
{
    spec.validate()?;
    let mut point = vec![0.0; outer.len()];
    nested_level(inner, outer, spec, 0, &mut point)
}

fn nested_level<F>(
    inner: &F,
    outer: &[(f64, f64)],
    spec: &QuadratureSpec,
    level: usize,
    point: &mut [f64],
) -> Result<Estimate>
where
    F: Fn(&[f64]) -> Result<Estimate>,
{
    if level == outer.len() {
        return inner(point);
    }
    let (a, b) = outer[level];
    let base = point.to_vec();
    let g = |x: f64| -> Result<Estimate> {
        let mut p = base.clone();
        p[level] = x;
        nested_level(inner, outer, spec, level + 1, &mut p)
    };
    integrate_axis(&g, a, b, spec)
}

/// Integral of `f` over the rectangle `bounds` (2 to 4 axes, outermost
/// first). The last axis is integrated by composite Simpson with
/// `spec.simpson_panels` panels, the others by `spec.outer_rule`.
pub fn integrate_rect<F>(f: &F, bounds: &[(f64, f64)], spec: &QuadratureSpec) -> Result<Estimate>
where
    F: Fn(&[f64]) -> f64,
{
    let d = bounds.len();
    if !(2..=4).contains(&d) {
        return Err(invalid("dims", format!("integrate_rect handles 2 to 4 axes, got {d}")));
    }
    let (a, b) = bounds[d - 1];
    let inner = |outer: &[f64]| -> Result<Estimate> {
        let mut p = outer.to_vec();
        p.push(0.0);
        simpson_with_error(
            |x| {
                p[d - 1] = x;
                f(&p)
            },
            a,
            b,
            spec.simpson_panels,
        )
    };
    integrate_nested(&inner, &bounds[..d - 1], spec)
}
