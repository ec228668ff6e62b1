//! Univariate probability functions: normal, Student t, F and chi-squared
//! CDFs and quantiles, plus the densities that appear in the coverage
//! integrals (`W`, `R`, `Q`, `T1`, `T2`).
//!
//! Special functions come from crates: `erfc` from `libm`, log-gamma and the
//! regularized incomplete beta and gamma functions from `statrs`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use serde::{Deserialize, Serialize};
use statrs::function::{
    beta::{beta_reg, ln_beta},
    gamma::{gamma_lr, gamma_ur, ln_gamma},
};

use libm::erfc;

use crate::error::{invalid, Result};

/// A positive integer number of degrees of freedom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DegreesOfFreedom(u32);

impl DegreesOfFreedom {
    pub fn new(value: u32) -> Result<Self> {
        if value == 0 {
            return Err(invalid("df", "degrees of freedom must be at least 1"));
        }
        Ok(Self(value))
    }

    #[inline]
    pub fn get(self) -> u32 {
        self.0
    }

    #[inline]
    pub fn as_f64(self) -> f64 {
        f64::from(self.0)
    }
}

impl std::fmt::Display for DegreesOfFreedom {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// Noncentrality parameter of a noncentral chi-squared law (`||gamma||^2`).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Noncentrality(f64);

impl Noncentrality {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(invalid("lambda", format!("noncentrality must be finite and >= 0, got {lambda}")));
        }
        Ok(Self(lambda))
    }

    pub fn from_gamma_norm(gamma_norm: f64) -> Result<Self> {
        Self::new(gamma_norm * gamma_norm)
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

fn check_probability(name: &'static str, p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(invalid(name, format!("must lie strictly inside (0, 1), got {p}")))
    }
}

// ---------------------------------------------------------------------------
// Normal

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// `P(lo <= Z <= hi)` for a standard normal `Z`, computed on the tail that
/// avoids cancellation.
pub fn normal_interval(lo: f64, hi: f64) -> f64 {
    // beyond this point each tail is below 1e-40
    const SATURATE: f64 = 13.5;
    if hi <= lo || lo >= SATURATE || hi <= -SATURATE {
        return 0.0;
    }
    if lo <= -SATURATE && hi >= SATURATE {
        return 1.0;
    }
    let p = if lo > 0.0 {
        0.5 * (erfc(lo * FRAC_1_SQRT_2) - erfc(hi * FRAC_1_SQRT_2))
    } else if hi < 0.0 {
        0.5 * (erfc(-hi * FRAC_1_SQRT_2) - erfc(-lo * FRAC_1_SQRT_2))
    } else {
        1.0 - 0.5 * (erfc(-lo * FRAC_1_SQRT_2) + erfc(hi * FRAC_1_SQRT_2))
    };
    p.clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// Root finding shared by the quantiles

/// Solves `f(x) = 0` for `f` monotone on `[lo, hi]` with a sign change.
/// Newton steps are taken when they stay inside the current bracket,
/// bisection otherwise.
fn solve_monotone(f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, rel_tol: f64) -> f64 {
    let f_lo = f(lo);
    let increasing = f_lo < 0.0;
    let mut x = 0.5 * (lo + hi);
    for _ in 0..400 {
        let fx = f(x);
        if fx == 0.0 {
            return x;
        }
        if (fx < 0.0) == increasing {
            lo = x;
        } else {
            hi = x;
        }
        let slope = df(x);
        let newton = x - fx / slope;
        let next =
            if slope != 0.0 && newton.is_finite() && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        let step = (next - x).abs();
        x = next;
        if step <= rel_tol * x.abs().max(f64::MIN_POSITIVE) || hi - lo <= rel_tol * x.abs() {
            // one more Newton polish from the converged point
            let fx = f(x);
            let slope = df(x);
            if slope != 0.0 {
                let polished = x - fx / slope;
                if polished.is_finite() && polished >= lo && polished <= hi {
                    return polished;
                }
            }
            return x;
        }
    }
    x
}

/// Doubles `hi` until `f(hi)` crosses zero.
fn bracket_above(f: &impl Fn(f64) -> f64, start: f64, increasing: bool) -> f64 {
    let mut hi = start;
    for _ in 0..2000 {
        let v = f(hi);
        if (increasing && v >= 0.0) || (!increasing && v <= 0.0) {
            return hi;
        }
        hi *= 2.0;
    }
    hi
}

// ---------------------------------------------------------------------------
// Student t

pub fn t_pdf(x: f64, df: DegreesOfFreedom) -> f64 {
    let nu = df.as_f64();
    let ln_c = ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * PI).ln();
    (ln_c - 0.5 * (nu + 1.0) * (x * x / nu).ln_1p()).exp()
}

/// `P(|T| <= x)` for `T ~ t(df)`, `x >= 0`.
pub fn t_two_sided_prob(x: f64, df: DegreesOfFreedom) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    let nu = df.as_f64();
    1.0 - beta_reg(0.5 * nu, 0.5, nu / (nu + x * x))
}

pub fn t_cdf(x: f64, df: DegreesOfFreedom) -> f64 {
    let nu = df.as_f64();
    let tail = 0.5 * beta_reg(0.5 * nu, 0.5, nu / (nu + x * x));
    if x > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// The `t(df)` with `P(-t(df) <= T <= t(df)) = 1 - alpha`.
pub fn t_two_sided_quantile(df: DegreesOfFreedom, alpha: f64) -> Result<f64> {
    check_probability("alpha", alpha)?;
    let target = 1.0 - alpha;
    let g = |t: f64| t_two_sided_prob(t, df) - target;
    let dg = |t: f64| 2.0 * t_pdf(t, df);
    let hi = bracket_above(&g, 1.0, true);
    Ok(solve_monotone(g, dg, 0.0, hi, 1e-14))
}

// ---------------------------------------------------------------------------
// F

pub fn f_pdf(x: f64, df1: DegreesOfFreedom, df2: DegreesOfFreedom) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let (d1, d2) = (df1.as_f64(), df2.as_f64());
    let ln = 0.5 * d1 * (d1 / d2).ln() + (0.5 * d1 - 1.0) * x.ln()
        - 0.5 * (d1 + d2) * (d1 * x / d2).ln_1p()
        - ln_beta(0.5 * d1, 0.5 * d2);
    ln.exp()
}

pub fn f_cdf(x: f64, df1: DegreesOfFreedom, df2: DegreesOfFreedom) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let (d1, d2) = (df1.as_f64(), df2.as_f64());
    beta_reg(0.5 * d1, 0.5 * d2, d1 * x / (d1 * x + d2))
}

/// `P(F > x)` for `F ~ F(df1, df2)`.
pub fn f_sf(x: f64, df1: DegreesOfFreedom, df2: DegreesOfFreedom) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let (d1, d2) = (df1.as_f64(), df2.as_f64());
    beta_reg(0.5 * d2, 0.5 * d1, d2 / (d2 + d1 * x))
}

/// The cutoff `ell` with `P(F(df1, df2) > ell) = level`.
pub fn f_upper_quantile(df1: DegreesOfFreedom, df2: DegreesOfFreedom, level: f64) -> Result<f64> {
    check_probability("level", level)?;
    let g = |x: f64| f_sf(x, df1, df2) - level;
    let dg = |x: f64| -f_pdf(x, df1, df2);
    let hi = bracket_above(&g, 1.0, false);
    Ok(solve_monotone(g, dg, 0.0, hi, 1e-14))
}

/// Upper tail of the noncentral F law,
/// `P((chi2_df1(lambda)/df1) / (chi2_df2/df2) > x)`, as a Poisson mixture of
/// central incomplete-beta tails.
pub fn noncentral_f_sf(x: f64, df1: DegreesOfFreedom, df2: DegreesOfFreedom, lambda: Noncentrality) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let (d1, d2) = (df1.as_f64(), df2.as_f64());
    let z = d2 / (d2 + d1 * x);
    poisson_mixture(lambda.get(), |k| beta_reg(0.5 * d2, 0.5 * d1 + k as f64, z))
}

// ---------------------------------------------------------------------------
// Chi-squared

pub fn chi2_pdf(q: f64, df: DegreesOfFreedom) -> f64 {
    chi2_pdf_real(q, df.as_f64())
}

fn chi2_pdf_real(q: f64, k: f64) -> f64 {
    if q < 0.0 {
        return 0.0;
    }
    if q == 0.0 {
        return if k < 2.0 {
            f64::INFINITY
        } else if k == 2.0 {
            0.5
        } else {
            0.0
        };
    }
    let half = 0.5 * k;
    ((half - 1.0) * q.ln() - 0.5 * q - half * std::f64::consts::LN_2 - ln_gamma(half)).exp()
}

pub fn chi2_cdf(q: f64, df: DegreesOfFreedom) -> f64 {
    if q <= 0.0 {
        return 0.0;
    }
    gamma_lr(0.5 * df.as_f64(), 0.5 * q)
}

pub fn chi2_sf(q: f64, df: DegreesOfFreedom) -> f64 {
    if q <= 0.0 {
        return 1.0;
    }
    gamma_ur(0.5 * df.as_f64(), 0.5 * q)
}

/// The `q` with `P(chi2_df > q) = tail`.
pub fn chi2_upper_quantile(df: DegreesOfFreedom, tail: f64) -> Result<f64> {
    check_probability("tail", tail)?;
    // work on log scale so tiny tails keep relative precision
    let ln_tail = tail.ln();
    let g = |q: f64| chi2_sf(q, df).ln() - ln_tail;
    let dg = |q: f64| -chi2_pdf(q, df) / chi2_sf(q, df);
    let hi = bracket_above(&g, df.as_f64().max(1.0), false);
    Ok(solve_monotone(g, dg, 0.0, hi, 1e-14))
}

// ---------------------------------------------------------------------------
// Densities of the coverage integrals

/// Log of the normalising constant `2 (m/2)^{m/2} / Gamma(m/2)` of `f_W`.
fn ln_w_const(m: f64) -> f64 {
    std::f64::consts::LN_2 + 0.5 * m * (0.5 * m).ln() - ln_gamma(0.5 * m)
}

/// Density of `W = sqrt(chi2_m / m)`.
pub fn density_w(w: f64, m: DegreesOfFreedom) -> f64 {
    if w <= 0.0 {
        return if w == 0.0 && m.get() == 1 { ln_w_const(1.0).exp() } else { 0.0 };
    }
    let mf = m.as_f64();
    (ln_w_const(mf) + (mf - 1.0) * w.ln() - 0.5 * mf * w * w).exp()
}

/// `P(W <= w)`.
pub fn cdf_w(w: f64, m: DegreesOfFreedom) -> f64 {
    if w <= 0.0 {
        return 0.0;
    }
    let mf = m.as_f64();
    gamma_lr(0.5 * mf, 0.5 * mf * w * w)
}

/// Chi density with `s` degrees of freedom (law of `R` with `R^2 ~ chi2_s`).
pub fn density_r(r: f64, s: DegreesOfFreedom) -> f64 {
    if r <= 0.0 {
        return if r == 0.0 && s.get() == 1 { (2.0 / PI).sqrt() } else { 0.0 };
    }
    let sf = s.as_f64();
    let half = 0.5 * sf;
    ((sf - 1.0) * r.ln() - 0.5 * r * r - (half - 1.0) * std::f64::consts::LN_2 - ln_gamma(half)).exp()
}

/// Sums `w_k * term(k)` over Poisson(`lambda/2`) weights `w_k`, scanning
/// outward from the mode until the unvisited weight mass drops below 1e-12.
fn poisson_mixture(lambda: f64, mut term: impl FnMut(u64) -> f64) -> f64 {
    const TAIL: f64 = 1e-12;
    if lambda == 0.0 {
        return term(0);
    }
    let mu = 0.5 * lambda;
    let mode = mu.floor() as u64;
    let weight_at = |k: u64| (-mu + k as f64 * mu.ln() - ln_gamma(k as f64 + 1.0)).exp();

    let w_mode = weight_at(mode);
    let mut total = w_mode * term(mode);
    let mut mass = w_mode;

    let (mut lo, mut w_lo) = (mode, w_mode);
    let (mut hi, mut w_hi) = (mode, w_mode);
    while 1.0 - mass > TAIL {
        // next weights by recurrence: w_{k+1} = w_k mu/(k+1), w_{k-1} = w_k k/mu
        let next_hi = w_hi * mu / (hi + 1) as f64;
        let next_lo = if lo > 0 { w_lo * lo as f64 / mu } else { 0.0 };
        if lo > 0 && next_lo >= next_hi {
            lo -= 1;
            w_lo = next_lo;
            total += w_lo * term(lo);
            mass += w_lo;
        } else {
            hi += 1;
            w_hi = next_hi;
            total += w_hi * term(hi);
            mass += w_hi;
            if w_hi < f64::MIN_POSITIVE && lo == 0 {
                break;
            }
        }
    }
    total
}

/// Noncentral chi-squared density with `s` degrees of freedom and
/// noncentrality `lambda`, as a Poisson mixture of central densities.
pub fn density_q(q: f64, s: DegreesOfFreedom, lambda: Noncentrality) -> f64 {
    if q < 0.0 {
        return 0.0;
    }
    let sf = s.as_f64();
    if q == 0.0 || lambda.get() == 0.0 {
        return poisson_mixture(lambda.get(), |k| chi2_pdf_real(q, sf + 2.0 * k as f64));
    }
    // central densities along the scan obey f_{k+1} = f_k q / (s + 2k),
    // so only the mode term needs a log-gamma
    let mu = 0.5 * lambda.get();
    let mode = mu.floor() as u64;
    let f_mode = chi2_pdf_real(q, sf + 2.0 * mode as f64);
    if f_mode == 0.0 {
        return poisson_mixture(lambda.get(), |k| chi2_pdf_real(q, sf + 2.0 * k as f64));
    }
    let mut lo = (mode, f_mode);
    let mut hi = (mode, f_mode);
    poisson_mixture(lambda.get(), |k| {
        if k == mode {
            f_mode
        } else if k == hi.0 + 1 {
            let f = hi.1 * q / (sf + 2.0 * hi.0 as f64);
            hi = (k, f);
            f
        } else if k + 1 == lo.0 {
            let f = lo.1 * (sf + 2.0 * k as f64) / q;
            lo = (k, f);
            f
        } else {
            chi2_pdf_real(q, sf + 2.0 * k as f64)
        }
    })
}

/// Noncentral chi-squared CDF (`P(Q <= q)`).
pub fn noncentral_chi2_cdf(q: f64, s: DegreesOfFreedom, lambda: Noncentrality) -> f64 {
    if q <= 0.0 {
        return 0.0;
    }
    let sf = s.as_f64();
    poisson_mixture(lambda.get(), |k| gamma_lr(0.5 * sf + k as f64, 0.5 * q))
}

fn sine_power_density(t: f64, power: f64, beta_b: f64) -> f64 {
    if !(0.0..=1.0).contains(&t) {
        return 0.0;
    }
    let norm = PI * (-ln_beta(0.5, beta_b)).exp();
    if power == 0.0 {
        norm
    } else {
        norm * (PI * t).sin().abs().powf(power)
    }
}

/// Density of `T1`: `pi / B(1/2, (s-1)/2) sin^{s-2}(pi t1)` on `[0, 1]`.
pub fn density_t1(t1: f64, s: DegreesOfFreedom) -> f64 {
    let sf = s.as_f64();
    if s.get() < 2 {
        return 0.0;
    }
    sine_power_density(t1, sf - 2.0, 0.5 * (sf - 1.0))
}

/// Density of `T2`: `pi / B(1/2, (s-2)/2) sin^{s-3}(pi t2)` on `[0, 1]`;
/// only defined for `s >= 3`.
pub fn density_t2(t2: f64, s: DegreesOfFreedom) -> Result<f64> {
    if s.get() < 3 {
        return Err(invalid("s", format!("f_T2 requires s >= 3, got {s}")));
    }
    let sf = s.as_f64();
    Ok(sine_power_density(t2, sf - 3.0, 0.5 * (sf - 2.0)))
}
