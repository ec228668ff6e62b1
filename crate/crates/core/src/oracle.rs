//! Monte Carlo verifiers for the coverage formula.
//!
//! [`simulate_full`] runs the two-stage procedure on simulated regression
//! data. [`simulate_reduced`] samples the low-dimensional law of
//! `(G, H, W, Z)` that the coverage depends on. Both share the same
//! deterministic block-substream RNG scheme: replication block `k` draws
//! from ChaCha8 seeded with `seed` on stream `k`, so the per-replication
//! draws do not depend on how blocks are spread over threads.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{t_two_sided_quantile, DegreesOfFreedom};
use crate::error::{invalid, Error, Result};
use crate::kernel::{moment_structure, ParamPoint, RegressionDesign, Scenario};

/// Replications per RNG substream.
pub const BLOCK_REPS: u64 = 4096;

/// Largest df drawn as an explicit sum of squared normals.
const CHI2_SUM_MAX_DF: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    pub reps: u64,
    pub covered: u64,
    pub coverage_hat: f64,
    pub std_error: f64,
    pub seed: u64,
    /// Replications with `F > ell` (interval `I` used).
    pub rejected: u64,
    /// Replications with `F <= ell` (interval `J` used).
    pub accepted: u64,
}

impl OracleEstimate {
    fn from_counts(counts: Counts, seed: u64) -> Self {
        let reps = counts.reps;
        let p = counts.covered as f64 / reps as f64;
        Self {
            reps,
            covered: counts.covered,
            coverage_hat: p,
            std_error: (p * (1.0 - p) / reps as f64).sqrt(),
            seed,
            rejected: counts.rejected,
            accepted: reps - counts.rejected,
        }
    }

    /// Fraction of replications that used `I`.
    pub fn rejection_rate(&self) -> f64 {
        self.rejected as f64 / self.reps as f64
    }

    /// `|coverage_hat - value| / std_error`; infinite when the standard
    /// error is zero and the values differ.
    pub fn z_score(&self, value: f64) -> f64 {
        let diff = (self.coverage_hat - value).abs();
        if self.std_error > 0.0 {
            diff / self.std_error
        } else if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts {
    reps: u64,
    covered: u64,
    rejected: u64,
}

impl std::ops::Add for Counts {
    type Output = Counts;
    fn add(self, o: Counts) -> Counts {
        Counts { reps: self.reps + o.reps, covered: self.covered + o.covered, rejected: self.rejected + o.rejected }
    }
}

/// Runs `body` once per replication, block by block in parallel. `body`
/// returns `(covered, rejected)`.
fn run_blocks<S, I, B>(reps: u64, seed: u64, init: I, body: B) -> Counts
where
    S: Send,
    I: Fn() -> S + Sync,
    B: Fn(&mut S, &mut ChaCha8Rng) -> (bool, bool) + Sync,
{
    let blocks = reps.div_ceil(BLOCK_REPS);
    (0..blocks)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            let mut state = init();
            let n = BLOCK_REPS.min(reps - k * BLOCK_REPS);
            let mut c = Counts { reps: n, ..Counts::default() };
            for _ in 0..n {
                let (covered, rejected) = body(&mut state, &mut rng);
                c.covered += covered as u64;
                c.rejected += rejected as u64;
            }
            c
        })
        .reduce(Counts::default, |a, b| a + b)
}

#[inline]
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Sampler for `chi^2_df`: sum of squares for small df, gamma-based above.
struct Chi2 {
    df: u32,
    large: Option<ChiSquared<f64>>,
}

impl Chi2 {
    fn new(df: u32) -> Result<Self> {
        let large = if df > CHI2_SUM_MAX_DF {
            Some(ChiSquared::new(df as f64).map_err(|e| invalid("df", e.to_string()))?)
        } else {
            None
        };
        Ok(Self { df, large })
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match &self.large {
            Some(d) => d.sample(rng),
            None => (0..self.df).map(|_| normal(rng).powi(2)).sum(),
        }
    }
}

fn check_reps(reps: u64) -> Result<()> {
    if reps == 0 {
        return Err(invalid("reps", "must be at least 1"));
    }
    Ok(())
}

/// The reduced model in the frame where `b` is the first axis; `gamma`
/// lies in the span of the first two.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedModel {
    pub m: DegreesOfFreedom,
    pub s: DegreesOfFreedom,
    pub b_norm: f64,
    pub gamma_norm: f64,
    pub psi: f64,
}

impl ReducedModel {
    pub fn new(scenario: &Scenario, point: &ParamPoint) -> Self {
        Self {
            m: scenario.m(),
            s: scenario.s(),
            b_norm: scenario.b_norm(),
            gamma_norm: point.gamma_norm(),
            psi: point.psi(),
        }
    }
}

/// Reduced-law simulator: `H ~ N(gamma, I_s)`, `Z ~ N(0, 1 - ||b||^2)`,
/// `G = b^T (H - gamma) + Z`, `W = sqrt(chi^2_m / m)`, `F = H^T H / (s W^2)`.
/// `I` covers iff `|G| <= t(m) W`; `J` covers iff
/// `|Z - b^T gamma| <= t(m+s) sqrt((m W^2 + H^T H) / (m+s)) sqrt(1 - ||b||^2)`.
pub fn simulate_reduced(model: &ReducedModel, scenario: &Scenario, reps: u64, seed: u64) -> Result<OracleEstimate> {
    check_reps(reps)?;
    if model.m != scenario.m() || model.s != scenario.s() || model.b_norm != scenario.b_norm() {
        return Err(invalid("model", "m, s and ||b|| must match the scenario"));
    }
    // validates gamma_norm and psi
    ParamPoint::new(model.gamma_norm, model.psi)?;
    let m = model.m.get();
    let s = model.s.get() as usize;
    let mf = m as f64;
    let sf = s as f64;
    let b = model.b_norm;
    let sigma_z = scenario.sigma_z();
    let g1 = model.gamma_norm * model.psi;
    let g2 = model.gamma_norm * (1.0 - model.psi * model.psi).max(0.0).sqrt();
    let bg = b * g1;
    let (t_m, t_ms, ell) = (scenario.t_m(), scenario.t_ms(), scenario.ell());
    let chi = Chi2::new(m)?;

    let counts = run_blocks(
        reps,
        seed,
        || (),
        |_, rng| {
            let e1 = normal(rng);
            let h1 = g1 + e1;
            let mut hh = h1 * h1;
            if s >= 2 {
                let h2 = g2 + normal(rng);
                hh += h2 * h2;
                for _ in 2..s {
                    hh += normal(rng).powi(2);
                }
            }
            let z = sigma_z * normal(rng);
            let w2 = chi.sample(rng) / mf;
            let f = hh / (sf * w2);
            if f > ell {
                let g = b * e1 + z;
                (g.abs() <= t_m * w2.sqrt(), true)
            } else {
                let half = t_ms * ((mf * w2 + hh) / (mf + sf)).sqrt() * sigma_z;
                ((z - bg).abs() <= half, false)
            }
        },
    );
    Ok(OracleEstimate::from_counts(counts, seed))
}

/// First unit vector of the Gram-Schmidt complement of `u` against the
/// standard basis.
fn orthogonal_unit(u: &DVector<f64>) -> Option<DVector<f64>> {
    (0..u.len()).find_map(|i| {
        let mut v = -u * u[i];
        v[i] += 1.0;
        let n = v.norm();
        (n > 1e-8).then(|| v / n)
    })
}

/// A coefficient vector `beta` whose design parameters are `target`:
/// the minimum-norm solution of `C^T beta - t = sigma V22^{1/2} gamma` with
/// `gamma = ||gamma|| (psi u_b + sqrt(1 - psi^2) u_perp)`.
pub fn invert_param_point(design: &RegressionDesign, target: &ParamPoint, sigma: f64) -> Result<DVector<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid("sigma", format!("must be positive, got {sigma}")));
    }
    let moments = moment_structure(design)?;
    let (g, psi) = (target.gamma_norm(), target.psi());
    let perp_weight = (1.0 - psi * psi).max(0.0).sqrt();
    let mut gamma = &moments.u_b * (g * psi);
    if g > 0.0 && perp_weight > 0.0 {
        let perp = orthogonal_unit(&moments.u_b).ok_or_else(|| invalid("target", "|psi| < 1 needs s >= 2"))?;
        gamma += perp * (g * perp_weight);
    }
    let tau = &moments.v22_sqrt * gamma * sigma;
    let c = design.c();
    let ctc = c.transpose() * c;
    let rhs = design.t() + tau;
    let coef = ctc.cholesky().ok_or(Error::Singular { matrix: "C^T C" })?.solve(&rhs);
    Ok(c * coef)
}

/// Buffers reused across the replications of one block.
struct FullState {
    eps: DVector<f64>,
    beta_dev: DVector<f64>,
    resid: DVector<f64>,
    tau: DVector<f64>,
    v22_inv_tau: DVector<f64>,
}

/// Full simulator: fit, test, pick `I` or `J`, check coverage of
/// `theta = a^T beta`. `ell` may be `0` (always reject) or `+inf` (never).
pub fn simulate_full(
    design: &RegressionDesign,
    beta: &DVector<f64>,
    sigma: f64,
    alpha: f64,
    ell: f64,
    reps: u64,
    seed: u64,
) -> Result<OracleEstimate> {
    check_reps(reps)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid("sigma", format!("must be positive, got {sigma}")));
    }
    if !(ell >= 0.0) {
        return Err(invalid("ell", format!("must be nonnegative, got {ell}")));
    }
    if beta.len() != design.p() {
        return Err(invalid("beta", format!("length {} does not match p = {}", beta.len(), design.p())));
    }
    let (n, p, s, m) = (design.n(), design.p(), design.s(), design.m());
    let m_df = DegreesOfFreedom::new(m as u32)?;
    let ms_df = DegreesOfFreedom::new((m + s) as u32)?;
    let t_m = t_two_sided_quantile(m_df, alpha)?;
    let t_ms = t_two_sided_quantile(ms_df, alpha)?;
    let moments = moment_structure(design)?;
    let x = design.x();
    let a = design.a();
    let c = design.c();
    let v22_inv = moments.v22.clone().cholesky().ok_or(Error::Singular { matrix: "V22" })?.inverse();
    // beta_hat - beta = P eps, restricted correction beta_hat - beta* = K tau_hat
    let pmat: DMatrix<f64> = &moments.xtx_inv * x.transpose();
    let restrict: DMatrix<f64> = &moments.xtx_inv * c * &v22_inv;
    let a_restrict: DVector<f64> = restrict.transpose() * a;
    // tau_hat = C^T beta_hat - t = tau + C^T P eps
    let tau_true: DVector<f64> = c.transpose() * beta - design.t();
    let ctp: DMatrix<f64> = c.transpose() * &pmat;
    let ap: DVector<f64> = pmat.transpose() * a;
    let half_i = t_m * moments.v11.sqrt();
    let v_restricted = (moments.v11 - moments.v21.dot(&(&v22_inv * &moments.v21))).max(0.0);
    let half_j = t_ms * v_restricted.sqrt();
    let (mf, sf) = (m as f64, s as f64);

    let init = || FullState {
        eps: DVector::zeros(n),
        beta_dev: DVector::zeros(p),
        resid: DVector::zeros(n),
        tau: DVector::zeros(s),
        v22_inv_tau: DVector::zeros(s),
    };
    let counts = run_blocks(reps, seed, init, |st, rng| {
        for e in st.eps.iter_mut() {
            *e = sigma * normal(rng);
        }
        // residual Y - X beta_hat = eps - X P eps
        st.beta_dev.gemv(1.0, &pmat, &st.eps, 0.0);
        st.resid.copy_from(&st.eps);
        st.resid.gemv(-1.0, x, &st.beta_dev, 1.0);
        let rss = st.resid.norm_squared();
        st.tau.copy_from(&tau_true);
        st.tau.gemv(1.0, &ctp, &st.eps, 1.0);
        st.v22_inv_tau.gemv(1.0, &v22_inv, &st.tau, 0.0);
        let quad = st.tau.dot(&st.v22_inv_tau);
        let sigma2_hat = rss / mf;
        let f = quad / (sf * sigma2_hat);
        // Theta_hat - theta
        let dev = ap.dot(&st.eps);
        if f > ell {
            (dev.abs() <= half_i * sigma2_hat.sqrt(), true)
        } else {
            let dev_star = dev - a_restrict.dot(&st.tau);
            let r_star = rss + quad;
            (dev_star.abs() <= half_j * (r_star / (mf + sf)).sqrt(), false)
        }
    });
    Ok(OracleEstimate::from_counts(counts, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{f_upper_quantile, noncentral_f_sf, Noncentrality};
    use crate::kernel::param_point_from_design;

    fn design() -> RegressionDesign {
        // two groups with a covariate, slopes contrasted
        let xs = [1.0, 2.5, 3.1, 4.0, 5.2, 0.7, 1.9, 3.3, 4.4, 6.0, 2.2, 3.7];
        let n = xs.len();
        let mut x = DMatrix::zeros(n, 6);
        for (i, &xi) in xs.iter().enumerate() {
            let g = i % 3;
            x[(i, g)] = 1.0;
            x[(i, 3 + g)] = xi - 3.0;
        }
        let a = DVector::from_vec(vec![1.0, -1.0, 0.0, 0.8, -0.8, 0.0]);
        let c = DMatrix::from_row_slice(6, 2, &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0, -1.0, 1.0, 0.0, 0.0, 1.0]);
        RegressionDesign::new(x, a, c, DVector::zeros(2)).unwrap()
    }

    #[test]
    fn reduced_is_deterministic() {
        let sc = Scenario::new(4, 3, 6.5914, 0.05, 0.9).unwrap();
        let model = ReducedModel::new(&sc, &ParamPoint::new(1.0, 0.5).unwrap());
        let a = simulate_reduced(&model, &sc, 20_000, 7).unwrap();
        let b = simulate_reduced(&model, &sc, 20_000, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.covered as f64 / a.reps as f64, a.coverage_hat);
        assert_eq!(a.accepted + a.rejected, a.reps);
    }

    #[test]
    fn reduced_independent_of_thread_count() {
        let sc = Scenario::new(4, 2, 6.9443, 0.05, 0.7).unwrap();
        let model = ReducedModel::new(&sc, &ParamPoint::new(2.0, -0.3).unwrap());
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = one.install(|| simulate_reduced(&model, &sc, 30_000, 11).unwrap());
        let b = three.install(|| simulate_reduced(&model, &sc, 30_000, 11).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn reduced_rejection_matches_noncentral_f() {
        let sc = Scenario::new(4, 3, 6.5914, 0.05, 0.9).unwrap();
        let model = ReducedModel::new(&sc, &ParamPoint::new(2.5, 0.2).unwrap());
        let est = simulate_reduced(&model, &sc, 200_000, 3).unwrap();
        let p = noncentral_f_sf(6.5914, sc.s(), sc.m(), Noncentrality::from_gamma_norm(2.5).unwrap());
        let se = (p * (1.0 - p) / est.reps as f64).sqrt();
        assert!((est.rejection_rate() - p).abs() < 4.0 * se, "{} vs {p}", est.rejection_rate());
    }

    #[test]
    fn weak_coupling_stays_near_nominal_and_matches_formula() {
        // conditioning on F <= ell still shrinks the pooled variance, so the
        // coverage is close to, not at, 1 - alpha
        let sc = Scenario::new(4, 4, 6.5914, 0.05, 0.01).unwrap();
        let point = ParamPoint::new(1.0, 1.0).unwrap();
        let est = simulate_reduced(&ReducedModel::new(&sc, &point), &sc, 200_000, 5).unwrap();
        let exact = crate::coverage::coverage_probability(&sc, &point, &Default::default()).unwrap();
        assert!(est.z_score(exact.total) < 4.0, "{est:?} vs {}", exact.total);
        assert!((est.coverage_hat - 0.95).abs() < 0.02);
    }

    #[test]
    fn model_must_match_scenario() {
        let sc = Scenario::new(4, 3, 6.5914, 0.05, 0.9).unwrap();
        let other = Scenario::new(4, 3, 6.5914, 0.05, 0.5).unwrap();
        let model = ReducedModel::new(&other, &ParamPoint::null());
        assert!(simulate_reduced(&model, &sc, 10, 1).is_err());
        assert!(simulate_reduced(&ReducedModel::new(&sc, &ParamPoint::null()), &sc, 0, 1).is_err());
    }

    #[test]
    fn inversion_round_trips() {
        let d = design();
        for (g, psi) in [(0.0, 1.0), (2.0, 0.0), (1.5, 0.9), (0.7, -1.0), (3.0, -0.4)] {
            let target = ParamPoint::new(g, psi).unwrap();
            let beta = invert_param_point(&d, &target, 1.7).unwrap();
            let back = param_point_from_design(&d, &beta, 1.7).unwrap();
            assert!((back.gamma_norm() - g).abs() < 1e-10);
            assert!((back.psi() - psi).abs() < 1e-10, "{psi} -> {}", back.psi());
        }
    }

    #[test]
    fn full_exact_when_test_is_bypassed() {
        let d = design();
        let beta = invert_param_point(&d, &ParamPoint::new(2.0, 0.4).unwrap(), 1.0).unwrap();
        let always = simulate_full(&d, &beta, 1.0, 0.05, 0.0, 100_000, 9).unwrap();
        assert_eq!(always.rejected, always.reps);
        assert!(always.z_score(0.95) < 4.0);
        let null = invert_param_point(&d, &ParamPoint::null(), 1.0).unwrap();
        let never = simulate_full(&d, &null, 1.0, 0.05, f64::INFINITY, 100_000, 9).unwrap();
        assert_eq!(never.accepted, never.reps);
        assert!(never.z_score(0.95) < 4.0);
    }

    #[test]
    fn full_null_rejection_rate_is_level() {
        let d = design();
        let s = DegreesOfFreedom::new(d.s() as u32).unwrap();
        let m = DegreesOfFreedom::new(d.m() as u32).unwrap();
        let ell = f_upper_quantile(s, m, 0.05).unwrap();
        let null = invert_param_point(&d, &ParamPoint::null(), 2.0).unwrap();
        let est = simulate_full(&d, &null, 2.0, 0.05, ell, 100_000, 13).unwrap();
        let se = (0.05 * 0.95 / est.reps as f64).sqrt();
        assert!((est.rejection_rate() - 0.05).abs() < 4.0 * se);
    }

    #[test]
    fn full_and_reduced_agree() {
        let d = design();
        let b = crate::kernel::b_norm(&d).unwrap();
        let sc = Scenario::new(d.m() as u32, d.s() as u32, 5.0, 0.05, b).unwrap();
        let point = ParamPoint::new(1.2, 0.6).unwrap();
        let beta = invert_param_point(&d, &point, 1.0).unwrap();
        let full = simulate_full(&d, &beta, 1.0, 0.05, 5.0, 200_000, 21).unwrap();
        let red = simulate_reduced(&ReducedModel::new(&sc, &point), &sc, 200_000, 22).unwrap();
        let se = (full.std_error.powi(2) + red.std_error.powi(2)).sqrt();
        assert!((full.coverage_hat - red.coverage_hat).abs() < 4.0 * se, "{full:?} {red:?}");
    }
}
