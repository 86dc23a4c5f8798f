//! Data model: variance components, regression coefficients, per-unit
//! records grouped by domain, aggregated covariate-pattern counts and the
//! separable response transformation.
//!
//! The unit-level model for the transformed response pair `y_dj` is
//!
//! ```text
//! y_dj = X_dj * beta + u_d + e_dj,
//! u_d  ~ N2(0, V_u),   e_dj ~ N2(0, V_e),
//! ```
//!
//! with `X_dj = diag(x_dj1, x_dj2)` block-diagonal in the two responses.

use nalgebra::DMatrix;

use crate::cov::{build_cov2, Mat2, Vec2};
use crate::error::{Error, Result};

/// The six covariance parameters
/// `(sigma2_u1, sigma2_u2, rho_u, sigma2_e1, sigma2_e2, rho_e)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceComponents {
    pub sigma2_u1: f64,
    pub sigma2_u2: f64,
    pub rho_u: f64,
    pub sigma2_e1: f64,
    pub sigma2_e2: f64,
    pub rho_e: f64,
}

impl VarianceComponents {
    pub fn new(
        sigma2_u1: f64,
        sigma2_u2: f64,
        rho_u: f64,
        sigma2_e1: f64,
        sigma2_e2: f64,
        rho_e: f64,
    ) -> Result<Self> {
        let vc = VarianceComponents {
            sigma2_u1,
            sigma2_u2,
            rho_u,
            sigma2_e1,
            sigma2_e2,
            rho_e,
        };
        vc.validate()?;
        Ok(vc)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma2_u1", self.sigma2_u1),
            ("sigma2_u2", self.sigma2_u2),
            ("sigma2_e1", self.sigma2_e1),
            ("sigma2_e2", self.sigma2_e2),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        for (name, r) in [("rho_u", self.rho_u), ("rho_e", self.rho_e)] {
            if !(r.abs() < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must satisfy |rho| < 1, got {r}"
                )));
            }
        }
        Ok(())
    }

    /// Random-effect covariance matrix V_u.
    pub fn v_u(&self) -> Mat2 {
        build_cov2(self.sigma2_u1, self.sigma2_u2, self.rho_u)
            .expect("validated variance components")
    }

    /// Unit-error covariance matrix V_e (homoscedastic across units).
    pub fn v_e(&self) -> Mat2 {
        build_cov2(self.sigma2_e1, self.sigma2_e2, self.rho_e)
            .expect("validated variance components")
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.sigma2_u1,
            self.sigma2_u2,
            self.rho_u,
            self.sigma2_e1,
            self.sigma2_e2,
            self.rho_e,
        ]
    }

    pub fn from_array(theta: [f64; 6]) -> Result<Self> {
        Self::new(theta[0], theta[1], theta[2], theta[3], theta[4], theta[5])
    }

    /// Derivative of V_u with respect to component `k` of (sigma2_u1, sigma2_u2, rho_u).
    pub(crate) fn d_v_u(&self, k: usize) -> Mat2 {
        let (s1, s2, rho) = (self.sigma2_u1, self.sigma2_u2, self.rho_u);
        d_cov2(s1, s2, rho, k)
    }

    /// Derivative of V_e with respect to component `k` of (sigma2_e1, sigma2_e2, rho_e).
    pub(crate) fn d_v_e(&self, k: usize) -> Mat2 {
        let (s1, s2, rho) = (self.sigma2_e1, self.sigma2_e2, self.rho_e);
        d_cov2(s1, s2, rho, k)
    }
}

fn d_cov2(v1: f64, v2: f64, rho: f64, k: usize) -> Mat2 {
    match k {
        0 => {
            let off = rho * (v2 / v1).sqrt() / 2.0;
            Mat2::new(1.0, off, off, 0.0)
        }
        1 => {
            let off = rho * (v1 / v2).sqrt() / 2.0;
            Mat2::new(0.0, off, off, 1.0)
        }
        2 => {
            let off = (v1 * v2).sqrt();
            Mat2::new(0.0, off, off, 0.0)
        }
        _ => unreachable!("2x2 covariance has three parameters"),
    }
}

/// Regression coefficients for the two responses, stacked as
/// `beta = (beta1', beta2')'`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionCoefficients {
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
}

impl RegressionCoefficients {
    pub fn new(beta1: Vec<f64>, beta2: Vec<f64>) -> Result<Self> {
        if beta1.iter().chain(beta2.iter()).any(|b| !b.is_finite()) {
            return Err(Error::InvalidParameter(
                "regression coefficients must be finite".to_string(),
            ));
        }
        Ok(RegressionCoefficients { beta1, beta2 })
    }

    pub fn p(&self) -> usize {
        self.beta1.len() + self.beta2.len()
    }

    pub fn from_stacked(stacked: &[f64], p1: usize) -> Result<Self> {
        if stacked.len() < p1 {
            return Err(Error::InvalidParameter(
                "stacked coefficient vector shorter than p1".to_string(),
            ));
        }
        Self::new(stacked[..p1].to_vec(), stacked[p1..].to_vec())
    }

    /// Mean pair `X_dj * beta` for covariate rows (x1, x2).
    pub fn mean(&self, x1: &[f64], x2: &[f64]) -> Vec2 {
        let m1: f64 = x1.iter().zip(&self.beta1).map(|(a, b)| a * b).sum();
        let m2: f64 = x2.iter().zip(&self.beta2).map(|(a, b)| a * b).sum();
        Vec2::new(m1, m2)
    }
}

/// Full parameter vector `psi = (beta', theta')'`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub beta: RegressionCoefficients,
    pub theta: VarianceComponents,
}

impl ModelParams {
    pub fn new(beta: RegressionCoefficients, theta: VarianceComponents) -> Result<Self> {
        theta.validate()?;
        Ok(ModelParams { beta, theta })
    }
}

/// One observed unit: covariate rows for both responses plus the
/// transformed response pair.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub domain_id: String,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub y1: f64,
    pub y2: f64,
}

/// A unit stored inside a domain (the domain id lives on [`DomainData`]).
#[derive(Debug, Clone, PartialEq)]
pub struct UnitData {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub y: Vec2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub id: String,
    pub units: Vec<UnitData>,
}

impl DomainData {
    pub fn n(&self) -> usize {
        self.units.len()
    }
}

/// Sample data grouped by domain. Domains with no sampled units are kept in
/// the registry so that out-of-sample domains remain addressable.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleData {
    p1: usize,
    p2: usize,
    domains: Vec<DomainData>,
}

impl SampleData {
    pub fn new(p1: usize, p2: usize) -> Self {
        SampleData {
            p1,
            p2,
            domains: Vec::new(),
        }
    }

    /// Groups records by domain id in order of first appearance.
    pub fn from_records(p1: usize, p2: usize, records: Vec<UnitRecord>) -> Result<Self> {
        let mut sample = SampleData::new(p1, p2);
        for rec in records {
            sample.push_record(rec)?;
        }
        Ok(sample)
    }

    pub fn push_record(&mut self, rec: UnitRecord) -> Result<()> {
        if rec.x1.len() != self.p1 || rec.x2.len() != self.p2 {
            return Err(Error::InvalidParameter(format!(
                "covariate rows of unit in domain {} have lengths ({}, {}), expected ({}, {})",
                rec.domain_id,
                rec.x1.len(),
                rec.x2.len(),
                self.p1,
                self.p2
            )));
        }
        if !rec.y1.is_finite() || !rec.y2.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "non-finite response in domain {}",
                rec.domain_id
            )));
        }
        let unit = UnitData {
            x1: rec.x1,
            x2: rec.x2,
            y: Vec2::new(rec.y1, rec.y2),
        };
        match self.domains.iter_mut().find(|d| d.id == rec.domain_id) {
            Some(dom) => dom.units.push(unit),
            None => self.domains.push(DomainData {
                id: rec.domain_id,
                units: vec![unit],
            }),
        }
        Ok(())
    }

    /// Registers a domain with no sampled units (n_d = 0). No-op if present.
    pub fn register_domain(&mut self, id: &str) {
        if !self.domains.iter().any(|d| d.id == id) {
            self.domains.push(DomainData {
                id: id.to_string(),
                units: Vec::new(),
            });
        }
    }

    pub fn push_domain(&mut self, domain: DomainData) -> Result<()> {
        for u in &domain.units {
            if u.x1.len() != self.p1 || u.x2.len() != self.p2 {
                return Err(Error::InvalidParameter(format!(
                    "covariate rows in domain {} do not match (p1, p2) = ({}, {})",
                    domain.id, self.p1, self.p2
                )));
            }
        }
        if self.domains.iter().any(|d| d.id == domain.id) {
            return Err(Error::InvalidParameter(format!(
                "duplicate domain id {}",
                domain.id
            )));
        }
        self.domains.push(domain);
        Ok(())
    }

    pub fn p1(&self) -> usize {
        self.p1
    }

    pub fn p2(&self) -> usize {
        self.p2
    }

    pub fn p(&self) -> usize {
        self.p1 + self.p2
    }

    pub fn domains(&self) -> &[DomainData] {
        &self.domains
    }

    pub fn domain_index(&self, id: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.id == id)
    }

    /// Total number of sampled units over all domains.
    pub fn n_units(&self) -> usize {
        self.domains.iter().map(|d| d.n()).sum()
    }

    pub fn n_sampled_domains(&self) -> usize {
        self.domains.iter().filter(|d| d.n() > 0).count()
    }
}

/// One registered covariate pattern `X_0t`, a pair of covariate rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariatePattern {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
}

/// Aggregated auxiliary information: for every domain the population count
/// `N_dt` of each registered covariate pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxCounts {
    pattern_ids: Vec<String>,
    patterns: Vec<CovariatePattern>,
    domain_ids: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl AuxCounts {
    pub fn new(
        pattern_ids: Vec<String>,
        patterns: Vec<CovariatePattern>,
        domain_ids: Vec<String>,
        counts: Vec<Vec<u64>>,
    ) -> Result<Self> {
        if pattern_ids.len() != patterns.len() {
            return Err(Error::InvalidParameter(
                "pattern id and pattern row counts differ".to_string(),
            ));
        }
        if domain_ids.len() != counts.len() {
            return Err(Error::InvalidParameter(
                "domain id and count row lengths differ".to_string(),
            ));
        }
        for row in &counts {
            if row.len() != patterns.len() {
                return Err(Error::InvalidParameter(
                    "count row length differs from number of patterns".to_string(),
                ));
            }
        }
        for window in 0..domain_ids.len() {
            if domain_ids[window + 1..].contains(&domain_ids[window]) {
                return Err(Error::InvalidParameter(format!(
                    "duplicate domain id {} in aggregated counts",
                    domain_ids[window]
                )));
            }
        }
        Ok(AuxCounts {
            pattern_ids,
            patterns,
            domain_ids,
            counts,
        })
    }

    pub fn patterns(&self) -> &[CovariatePattern] {
        &self.patterns
    }

    pub fn pattern_ids(&self) -> &[String] {
        &self.pattern_ids
    }

    pub fn n_patterns(&self) -> usize {
        self.patterns.len()
    }

    pub fn domain_ids(&self) -> &[String] {
        &self.domain_ids
    }

    pub fn domain_index(&self, id: &str) -> Option<usize> {
        self.domain_ids.iter().position(|d| d == id)
    }

    /// Population counts `N_dt` for the domain at index `d`.
    pub fn counts(&self, d: usize) -> &[u64] {
        &self.counts[d]
    }

    /// Population size `N_d = sum_t N_dt`.
    pub fn domain_size(&self, d: usize) -> u64 {
        self.counts[d].iter().sum()
    }

    /// Index of the pattern exactly matching the covariate rows, if any.
    /// Patterns are matched by exact equality of the rows.
    pub fn match_pattern(&self, x1: &[f64], x2: &[f64]) -> Option<usize> {
        self.patterns
            .iter()
            .position(|pat| pat.x1 == x1 && pat.x2 == x2)
    }

    /// Tabulates the sample counts `n_dt` against the registered patterns and
    /// validates consistency: every sampled unit must match exactly one
    /// pattern, every sampled domain must appear here, and `N_dt >= n_dt`.
    ///
    /// The result is aligned with this table's domain order.
    pub fn tabulate_sample(&self, sample: &SampleData) -> Result<Vec<Vec<u64>>> {
        let mut n_dt = vec![vec![0u64; self.patterns.len()]; self.domain_ids.len()];
        for dom in sample.domains() {
            if dom.n() == 0 {
                continue;
            }
            let d = self.domain_index(&dom.id).ok_or_else(|| {
                Error::CountInconsistency(format!(
                    "sampled domain {} missing from aggregated counts",
                    dom.id
                ))
            })?;
            for (j, unit) in dom.units.iter().enumerate() {
                let t = self.match_pattern(&unit.x1, &unit.x2).ok_or_else(|| {
                    Error::PatternMismatch(format!(
                        "unit {} of domain {} matches no registered covariate pattern",
                        j, dom.id
                    ))
                })?;
                n_dt[d][t] += 1;
            }
            for t in 0..self.patterns.len() {
                if n_dt[d][t] > self.counts[d][t] {
                    return Err(Error::CountInconsistency(format!(
                        "domain {} pattern {}: N_dt = {} < n_dt = {}",
                        dom.id, self.pattern_ids[t], self.counts[d][t], n_dt[d][t]
                    )));
                }
            }
        }
        Ok(n_dt)
    }
}

/// Separable response transformation `y = g(z)`, applied coordinatewise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    Log,
}

impl Transform {
    /// Forward transformation `g`.
    pub fn apply(&self, z: Vec2) -> Result<Vec2> {
        match self {
            Transform::Identity => Ok(z),
            Transform::Log => {
                if z.x <= 0.0 || z.y <= 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "log transform requires positive values, got ({}, {})",
                        z.x, z.y
                    )));
                }
                Ok(Vec2::new(z.x.ln(), z.y.ln()))
            }
        }
    }

    /// Inverse transformation `g^{-1}`; reports overflow of `exp`.
    pub fn inverse(&self, y: Vec2) -> Result<Vec2> {
        match self {
            Transform::Identity => Ok(y),
            Transform::Log => {
                // exp overflows above ~709.78
                if y.x > 709.0 || y.y > 709.0 {
                    return Err(Error::Overflow(format!(
                        "exp argument out of range: ({}, {})",
                        y.x, y.y
                    )));
                }
                Ok(Vec2::new(y.x.exp(), y.y.exp()))
            }
        }
    }

    /// Inverse transformation without the overflow check, for tight loops.
    /// Callers validate finiteness of the aggregate they compute.
    #[inline]
    pub(crate) fn inverse_unchecked(&self, y: Vec2) -> Vec2 {
        match self {
            Transform::Identity => y,
            Transform::Log => Vec2::new(y.x.exp(), y.y.exp()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Transform::Identity => "identity",
            Transform::Log => "log",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Transform::Identity),
            "log" => Ok(Transform::Log),
            other => Err(Error::InvalidParameter(format!(
                "unknown transform {other:?}, expected \"identity\" or \"log\""
            ))),
        }
    }
}

/// Dense marginal covariance matrix of the stacked domain response vector,
/// `Z_d V_u Z_d' + I_{n_d} (x) V_e`.
///
/// This assembles the full `2 n_d x 2 n_d` matrix by definition and serves as
/// the testing oracle for the closed-form paths used everywhere else.
pub fn marginal_cov_domain(theta: &VarianceComponents, n_d: usize) -> DMatrix<f64> {
    assert!(n_d >= 1, "marginal covariance needs at least one unit");
    let v_u = theta.v_u();
    let v_e = theta.v_e();
    let mut m = DMatrix::zeros(2 * n_d, 2 * n_d);
    for j in 0..n_d {
        for k in 0..n_d {
            for a in 0..2 {
                for b in 0..2 {
                    let mut v = v_u[(a, b)];
                    if j == k {
                        v += v_e[(a, b)];
                    }
                    m[(2 * j + a, 2 * k + b)] = v;
                }
            }
        }
    }
    m
}
