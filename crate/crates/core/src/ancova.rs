//! One-covariate analysis of covariance with a separate slope per
//! treatment: parameters `(mu_1..mu_g, beta_1..beta_g)`, the covariate
//! centred at its grand mean, and a preliminary test that all slopes equal
//! the first.

use std::collections::BTreeMap;
use std::io::Read;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::distributions::{f_upper_quantile, DegreesOfFreedom};
use crate::error::{invalid, Error, Result};
use crate::kernel::{b_norm, RegressionDesign, Scenario};
use crate::minimize::{min_coverage, MinResult, MinimizeConfig};
use crate::quadrature::QuadratureSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub treatment: i64,
    pub response: f64,
    pub covariate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AncovaDataset {
    rows: Vec<Observation>,
    /// Distinct treatment ids, ascending.
    treatments: Vec<i64>,
}

impl AncovaDataset {
    pub fn new(rows: Vec<Observation>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::NoRows);
        }
        let mut groups: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
        for r in &rows {
            if !(r.response.is_finite() && r.covariate.is_finite()) {
                return Err(invalid("rows", format!("non-finite value for treatment {}", r.treatment)));
            }
            groups.entry(r.treatment).or_default().push(r.covariate);
        }
        if groups.len() < 2 {
            return Err(Error::Invariant {
                kind: "dataset",
                detail: format!("at least 2 treatments are required, found {}", groups.len()),
            });
        }
        for (id, xs) in &groups {
            if xs.len() < 2 {
                return Err(Error::Invariant {
                    kind: "dataset",
                    detail: format!("treatment {id} has {} row(s); at least 2 are required", xs.len()),
                });
            }
            if xs.iter().all(|&x| x == xs[0]) {
                return Err(Error::Invariant {
                    kind: "dataset",
                    detail: format!("covariate is constant within treatment {id}"),
                });
            }
        }
        Ok(Self { treatments: groups.into_keys().collect(), rows })
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn treatments(&self) -> &[i64] {
        &self.treatments
    }
}

fn parse_field<T: std::str::FromStr>(field: &str, line: usize, what: &str) -> Result<T> {
    field.parse().map_err(|_| Error::Parse { line, detail: format!("cannot parse {what} `{field}`") })
}

/// Order of the two numeric columns after the treatment id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnOrder {
    #[default]
    ResponseCovariate,
    CovariateResponse,
}

/// Reads `treatment, response, covariate` rows separated by commas or
/// whitespace. Blank lines and `#` comments are skipped; a first line whose
/// treatment field is not an integer is taken as a header.
pub fn load_dataset(source: impl Read) -> Result<AncovaDataset> {
    load_dataset_with(source, ColumnOrder::ResponseCovariate)
}

/// [`load_dataset`] with an explicit order of the numeric columns.
pub fn load_dataset_with(mut source: impl Read, order: ColumnOrder) -> Result<AncovaDataset> {
    let mut text = String::new();
    source.read_to_string(&mut text).map_err(|e| Error::Parse { line: 0, detail: e.to_string() })?;
    let mut rows = Vec::new();
    let mut seen_content = false;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> =
            content.split(|c: char| c == ',' || c.is_whitespace()).filter(|f| !f.is_empty()).collect();
        let first_content = !seen_content;
        seen_content = true;
        if first_content && fields.first().is_some_and(|f| f.parse::<i64>().is_err()) {
            continue;
        }
        if fields.len() != 3 {
            return Err(Error::Parse {
                line,
                detail: format!("expected 3 fields (treatment, response, covariate), found {}", fields.len()),
            });
        }
        let (ri, ci) = match order {
            ColumnOrder::ResponseCovariate => (1, 2),
            ColumnOrder::CovariateResponse => (2, 1),
        };
        rows.push(Observation {
            treatment: parse_field(fields[0], line, "treatment")?,
            response: parse_field(fields[ri], line, "response")?,
            covariate: parse_field(fields[ci], line, "covariate")?,
        });
    }
    AncovaDataset::new(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AncovaModel {
    design: RegressionDesign,
    treatments: Vec<i64>,
    x_bar: f64,
    response: DVector<f64>,
}

impl AncovaModel {
    pub fn design(&self) -> &RegressionDesign {
        &self.design
    }
    pub fn treatments(&self) -> &[i64] {
        &self.treatments
    }
    /// Grand mean of the covariate.
    pub fn x_bar(&self) -> f64 {
        self.x_bar
    }
    /// Number of slope contrasts tested.
    pub fn s(&self) -> usize {
        self.design.s()
    }
    pub fn response(&self) -> &DVector<f64> {
        &self.response
    }

    fn slot(&self, id: i64) -> Result<usize> {
        self.treatments.binary_search(&id).map_err(|_| Error::UnknownTreatment(id))
    }
}

/// Design matrix, slope-equality hypothesis and a placeholder contrast (the
/// mean difference of the first two treatments).
pub fn build_model(data: &AncovaDataset) -> Result<AncovaModel> {
    let g = data.treatments.len();
    let n = data.rows.len();
    let p = 2 * g;
    let x_bar = data.rows.iter().map(|r| r.covariate).sum::<f64>() / n as f64;
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    for (i, r) in data.rows.iter().enumerate() {
        let k = data.treatments.binary_search(&r.treatment).map_err(|_| Error::UnknownTreatment(r.treatment))?;
        x[(i, k)] = 1.0;
        x[(i, g + k)] = r.covariate - x_bar;
        y[i] = r.response;
    }
    let mut c = DMatrix::zeros(p, g - 1);
    for j in 1..g {
        c[(g, j - 1)] = -1.0;
        c[(g + j, j - 1)] = 1.0;
    }
    let mut a = DVector::zeros(p);
    a[0] = 1.0;
    a[1] = -1.0;
    let design = RegressionDesign::new(x, a, c, DVector::zeros(g - 1))?;
    Ok(AncovaModel { design, treatments: data.treatments.clone(), x_bar, response: y })
}

/// `theta` = difference of the expected responses of `treat_a` and `treat_b`
/// at covariate value `x_bar + xstar_offset`.
pub fn contrast_vector(model: &AncovaModel, treat_a: i64, treat_b: i64, xstar_offset: f64) -> Result<DVector<f64>> {
    if treat_a == treat_b {
        return Err(invalid("treatments", "treat_a and treat_b must differ"));
    }
    if !xstar_offset.is_finite() {
        return Err(invalid("xstar_offset", "must be finite"));
    }
    let (ia, ib) = (model.slot(treat_a)?, model.slot(treat_b)?);
    let g = model.treatments.len();
    let mut a = DVector::zeros(2 * g);
    a[ia] = 1.0;
    a[ib] = -1.0;
    a[g + ia] = xstar_offset;
    a[g + ib] = -xstar_offset;
    Ok(a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AncovaReport {
    pub n: usize,
    pub p: usize,
    pub m: usize,
    pub s: usize,
    pub treat_a: i64,
    pub treat_b: i64,
    pub xstar_offset: f64,
    pub sig_level: f64,
    pub alpha: f64,
    /// `F_{s,m}` upper `sig_level` quantile, the cutoff used.
    pub ell: f64,
    /// `F_{s+1,m}` upper `sig_level` quantile, for comparison.
    pub ell_s_plus_1: f64,
    pub b_norm: f64,
    pub min_coverage: f64,
    pub argmin_gamma: f64,
    pub argmin_psi: f64,
    pub minimization: MinResult,
}

impl AncovaReport {
    /// Flat `(key, value)` pairs in a fixed order.
    pub fn key_values(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n", self.n.to_string()),
            ("p", self.p.to_string()),
            ("m", self.m.to_string()),
            ("s", self.s.to_string()),
            ("treat_a", self.treat_a.to_string()),
            ("treat_b", self.treat_b.to_string()),
            ("xstar_offset", format!("{}", self.xstar_offset)),
            ("sig_level", format!("{}", self.sig_level)),
            ("alpha", format!("{}", self.alpha)),
            ("ell", format!("{:.10}", self.ell)),
            ("ell_s_plus_1", format!("{:.10}", self.ell_s_plus_1)),
            ("b_norm", format!("{:.10}", self.b_norm)),
            ("min_coverage", format!("{:.10}", self.min_coverage)),
            ("argmin_gamma", format!("{:.10}", self.argmin_gamma)),
            ("argmin_psi", format!("{:.10}", self.argmin_psi)),
            ("converged", self.minimization.converged.to_string()),
            ("boundary_warning", self.minimization.boundary_warning.to_string()),
        ]
    }
}

/// `||b||` and the minimum coverage of the naive interval for the contrast
/// `(treat_a, treat_b, xstar_offset)`, with `ell` the `sig_level` F cutoff.
#[allow(clippy::too_many_arguments)]
pub fn analyze(
    model: &AncovaModel,
    treat_a: i64,
    treat_b: i64,
    xstar_offset: f64,
    sig_level: f64,
    alpha: f64,
    config: &MinimizeConfig,
    spec: &QuadratureSpec,
) -> Result<AncovaReport> {
    let a = contrast_vector(model, treat_a, treat_b, xstar_offset)?;
    let design = model.design.with_contrast(a)?;
    let (m, s) = (design.m(), design.s());
    let m_df = DegreesOfFreedom::new(m as u32)?;
    let ell = f_upper_quantile(DegreesOfFreedom::new(s as u32)?, m_df, sig_level)?;
    let ell_s_plus_1 = f_upper_quantile(DegreesOfFreedom::new(s as u32 + 1)?, m_df, sig_level)?;
    let bn = b_norm(&design)?;
    if s < 2 {
        return Err(invalid("s", format!("the coverage formula needs at least 2 slope contrasts, found {s}")));
    }
    let scenario = Scenario::new(m as u32, s as u32, ell, alpha, bn)?;
    let res = min_coverage(&scenario, config, spec)?;
    Ok(AncovaReport {
        n: design.n(),
        p: design.p(),
        m,
        s,
        treat_a,
        treat_b,
        xstar_offset,
        sig_level,
        alpha,
        ell,
        ell_s_plus_1,
        b_norm: bn,
        min_coverage: res.min_coverage,
        argmin_gamma: res.argmin.gamma_norm(),
        argmin_psi: res.argmin.psi(),
        minimization: res,
    })
}
