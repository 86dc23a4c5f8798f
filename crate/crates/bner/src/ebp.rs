//! Empirical best prediction of domain parameters.
//!
//! For every domain the non-sampled responses share one conditional
//! covariance matrix and one conditional mean per covariate pattern, both in
//! closed form. EBPs of additive parameters (marginal means, means of unit
//! ratios) and of the ratio of domain means are Monte Carlo averages over
//! replicated draws from that conditional law; units sharing a pattern are
//! exchangeable, so draws are generated per (domain, pattern, replicate)
//! rather than per unit id.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::cov::{chol2, det2, inv2, Mat2, Vec2};
use crate::error::{Error, Result};
use crate::model::{AuxCounts, ModelParams, SampleData, Transform};
use crate::rng::{substream, STAGE_EBP_DRAWS};

pub type UnitFn = dyn Fn(Vec2) -> f64 + Send + Sync;
pub type DomainFn = dyn Fn(&[Vec2]) -> f64 + Send + Sync;

/// A domain parameter to predict.
#[derive(Clone)]
pub enum TargetSpec {
    /// Mean of the first back-transformed response.
    Mean1,
    /// Mean of the second back-transformed response.
    Mean2,
    /// Mean of the unit-level ratios z1 / (z1 + z2).
    MeanOfRatios,
    /// Ratio of domain sums, sum z1 / sum (z1 + z2).
    RatioOfMeans,
    /// Additive parameter with a custom per-unit function.
    CustomAdditive(Arc<UnitFn>),
    /// Non-additive parameter: a function of the whole domain vector.
    CustomDomain(Arc<DomainFn>),
}

impl TargetSpec {
    pub fn label(&self) -> &'static str {
        match self {
            TargetSpec::Mean1 => "Z1",
            TargetSpec::Mean2 => "Z2",
            TargetSpec::MeanOfRatios => "A",
            TargetSpec::RatioOfMeans => "R",
            TargetSpec::CustomAdditive(_) => "custom_additive",
            TargetSpec::CustomDomain(_) => "custom_domain",
        }
    }

    pub fn is_additive(&self) -> bool {
        matches!(
            self,
            TargetSpec::Mean1
                | TargetSpec::Mean2
                | TargetSpec::MeanOfRatios
                | TargetSpec::CustomAdditive(_)
        )
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "Z1" | "z1" => Ok(TargetSpec::Mean1),
            "Z2" | "z2" => Ok(TargetSpec::Mean2),
            "A" | "a" => Ok(TargetSpec::MeanOfRatios),
            "R" | "r" => Ok(TargetSpec::RatioOfMeans),
            other => Err(Error::InvalidParameter(format!(
                "unknown target {other:?}, expected one of Z1, Z2, A, R"
            ))),
        }
    }
}

impl fmt::Debug for TargetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Monte Carlo controls for the EBP draws.
#[derive(Debug, Clone)]
pub struct McOptions {
    /// Number of Monte Carlo copies L.
    pub copies: usize,
    pub seed: u64,
    pub antithetic: bool,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions {
            copies: 200,
            seed: 0,
            antithetic: false,
        }
    }
}

/// Conditional law of the non-sampled responses given the sample: one 2x2
/// covariance per domain and one mean vector per (domain, pattern).
#[derive(Debug, Clone)]
pub struct ConditionalLaw {
    domain_ids: Vec<String>,
    cond_cov: Vec<Mat2>,
    cond_chol: Vec<Mat2>,
    cond_means: Vec<Vec<Vec2>>,
}

impl ConditionalLaw {
    pub fn domain_ids(&self) -> &[String] {
        &self.domain_ids
    }

    pub fn cond_cov(&self, d: usize) -> &Mat2 {
        &self.cond_cov[d]
    }

    pub fn cond_mean(&self, d: usize, t: usize) -> Vec2 {
        self.cond_means[d][t]
    }
}

/// Closed-form conditional moments of the non-sampled responses.
///
/// For a domain with `n_d > 0` sampled units,
///
/// ```text
/// V_{d|s}   = V_u + V_e - n_d V_u V_e^{-1} V_u
///             + n_d^2 V_u V_e^{-1} (V_u^{-1} + n_d V_e^{-1})^{-1} V_e^{-1} V_u
/// mu_{dt|s} = X_0t beta + V_u {I - n_d V_e^{-1} (V_u^{-1} + n_d V_e^{-1})^{-1}}
///             sum_j V_e^{-1} (y_dj - X_dj beta)
/// ```
///
/// and for `n_d = 0` the prior moments `X_0t beta` and `V_u + V_e`.
/// Domains are the ones registered in `aux`, in that order.
pub fn conditional_moments(
    params: &ModelParams,
    sample: &SampleData,
    aux: &AuxCounts,
) -> Result<ConditionalLaw> {
    params.theta.validate()?;
    let v_u = params.theta.v_u();
    let v_e = params.theta.v_e();
    let w = inv2(&v_e)?;
    let v_u_inv = inv2(&v_u)?;

    let mut law = ConditionalLaw {
        domain_ids: aux.domain_ids().to_vec(),
        cond_cov: Vec::with_capacity(aux.domain_ids().len()),
        cond_chol: Vec::with_capacity(aux.domain_ids().len()),
        cond_means: Vec::with_capacity(aux.domain_ids().len()),
    };
    for id in aux.domain_ids() {
        let dom = sample.domain_index(id).map(|i| &sample.domains()[i]);
        let n = dom.map_or(0, |d| d.n());
        let (cov, base) = if n > 0 {
            let nf = n as f64;
            let m = inv2(&(v_u_inv + w * nf))?;
            let q = w - w * m * w * nf;
            let cov = v_u + v_e - v_u * q * v_u * nf;
            let mut s_eps = Vec2::zeros();
            for u in &dom.expect("n > 0").units {
                s_eps += u.y - params.beta.mean(&u.x1, &u.x2);
            }
            (cov, v_u * (q * s_eps))
        } else {
            (v_u + v_e, Vec2::zeros())
        };
        if !(cov[(0, 0)] > 0.0 && det2(&cov) > 0.0) {
            return Err(Error::domain(
                id,
                format!("conditional covariance not positive definite: {cov:?}"),
            ));
        }
        let chol = chol2(&cov).map_err(|e| Error::domain(id, e.to_string()))?;
        let means = aux
            .patterns()
            .iter()
            .map(|pat| params.beta.mean(&pat.x1, &pat.x2) + base)
            .collect();
        law.cond_cov.push(cov);
        law.cond_chol.push(chol);
        law.cond_means.push(means);
    }
    Ok(law)
}

/// Draws `m` response pairs for pattern `t` of domain `d` from the
/// conditional law: `mu_{dt|s} + chol(V_{d|s}) z` with independent standard
/// normal pairs `z` taken from the stream.
pub fn draw_nonsample<R: Rng>(
    law: &ConditionalLaw,
    d: usize,
    t: usize,
    m: usize,
    rng: &mut R,
) -> Vec<Vec2> {
    let mu = law.cond_means[d][t];
    let lc = law.cond_chol[d];
    (0..m)
        .map(|_| {
            let z = Vec2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            mu + lc * z
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Direct (sample-only) estimators
// ---------------------------------------------------------------------------

/// Sample analogues of the four built-in targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectEstimates {
    pub mean1: f64,
    pub mean2: f64,
    pub mean_of_ratios: f64,
    pub ratio_of_means: f64,
}

#[inline]
fn h_mean1(z: Vec2) -> f64 {
    z.x
}

#[inline]
fn h_mean2(z: Vec2) -> f64 {
    z.y
}

#[inline]
fn h_unit_ratio(z: Vec2) -> f64 {
    z.x / (z.x + z.y)
}

impl DirectEstimates {
    /// Computes the sample means and ratios from back-transformed unit pairs.
    pub fn from_units(z: &[Vec2]) -> Result<Self> {
        if z.is_empty() {
            return Err(Error::InvalidParameter(
                "direct estimates undefined for a domain with no sampled units".to_string(),
            ));
        }
        let n = z.len() as f64;
        let (mut s1, mut s2, mut sr, mut sden) = (0.0, 0.0, 0.0, 0.0);
        for &zj in z {
            s1 += h_mean1(zj);
            s2 += h_mean2(zj);
            sr += h_unit_ratio(zj);
            sden += zj.x + zj.y;
        }
        Ok(DirectEstimates {
            mean1: s1 / n,
            mean2: s2 / n,
            mean_of_ratios: sr / n,
            ratio_of_means: s1 / sden,
        })
    }
}

/// Direct estimates per sample domain; `None` for domains without units.
pub fn direct_estimates(
    sample: &SampleData,
    transform: Transform,
) -> Result<Vec<Option<DirectEstimates>>> {
    sample
        .domains()
        .iter()
        .map(|dom| {
            if dom.n() == 0 {
                return Ok(None);
            }
            let z = invert_units(&dom.id, dom.units.iter().map(|u| u.y), transform)?;
            DirectEstimates::from_units(&z).map(Some)
        })
        .collect()
}

fn invert_units(
    domain_id: &str,
    ys: impl Iterator<Item = Vec2>,
    transform: Transform,
) -> Result<Vec<Vec2>> {
    ys.map(|y| {
        transform
            .inverse(y)
            .map_err(|e| Error::domain(domain_id, e.to_string()))
    })
    .collect()
}

// ---------------------------------------------------------------------------
// Monte Carlo EBP engine
// ---------------------------------------------------------------------------

enum Kind<'a> {
    Mean1,
    Mean2,
    MeanOfRatios,
    Ratio,
    CustomAdd(&'a UnitFn),
    CustomDom(&'a DomainFn),
}

impl<'a> Kind<'a> {
    fn of(spec: &'a TargetSpec) -> Kind<'a> {
        match spec {
            TargetSpec::Mean1 => Kind::Mean1,
            TargetSpec::Mean2 => Kind::Mean2,
            TargetSpec::MeanOfRatios => Kind::MeanOfRatios,
            TargetSpec::RatioOfMeans => Kind::Ratio,
            TargetSpec::CustomAdditive(h) => Kind::CustomAdd(h.as_ref()),
            TargetSpec::CustomDomain(h) => Kind::CustomDom(h.as_ref()),
        }
    }

    fn unit_h(&self) -> Option<&dyn Fn(Vec2) -> f64> {
        match self {
            Kind::Mean1 => Some(&h_mean1),
            Kind::Mean2 => Some(&h_mean2),
            Kind::MeanOfRatios => Some(&h_unit_ratio),
            Kind::CustomAdd(h) => Some(h),
            _ => None,
        }
    }
}

/// Monte Carlo EBPs of several targets in one pass over shared draws.
///
/// Returns one value per target per domain, aligned with the domain order of
/// `aux`. Draws depend only on `(mc.seed, domain, pattern, replicate)`, so
/// results are bitwise reproducible and independent of the target list and of
/// the rayon worker count.
pub fn ebp_estimates(
    params: &ModelParams,
    sample: &SampleData,
    aux: &AuxCounts,
    transform: Transform,
    targets: &[TargetSpec],
    mc: &McOptions,
) -> Result<Vec<Vec<f64>>> {
    if mc.copies == 0 {
        return Err(Error::InvalidParameter(
            "Monte Carlo copy count L must be at least 1".to_string(),
        ));
    }
    let law = conditional_moments(params, sample, aux)?;
    let n_dt = aux.tabulate_sample(sample)?;

    // back-transform sampled responses once per domain
    let mut sample_z: Vec<Vec<Vec2>> = Vec::with_capacity(aux.domain_ids().len());
    for id in aux.domain_ids() {
        match sample.domain_index(id) {
            Some(i) => {
                let dom = &sample.domains()[i];
                sample_z.push(invert_units(id, dom.units.iter().map(|u| u.y), transform)?);
            }
            None => sample_z.push(Vec::new()),
        }
    }

    let per_domain: Vec<Result<Vec<f64>>> = (0..aux.domain_ids().len())
        .into_par_iter()
        .map(|d| domain_ebp(d, &law, aux, &n_dt[d], &sample_z[d], transform, targets, mc))
        .collect();

    let mut out = vec![vec![0.0; aux.domain_ids().len()]; targets.len()];
    for (d, res) in per_domain.into_iter().enumerate() {
        let vals = res?;
        for (ti, v) in vals.into_iter().enumerate() {
            out[ti][d] = v;
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn domain_ebp(
    d: usize,
    law: &ConditionalLaw,
    aux: &AuxCounts,
    n_dt: &[u64],
    sample_z: &[Vec2],
    transform: Transform,
    targets: &[TargetSpec],
    mc: &McOptions,
) -> Result<Vec<f64>> {
    let id = &law.domain_ids()[d];
    let counts = aux.counts(d);
    let n_pop = aux.domain_size(d);
    if n_pop == 0 {
        return Err(Error::domain(id, "domain has zero population size"));
    }
    let m_t: Vec<usize> = counts
        .iter()
        .zip(n_dt)
        .map(|(big_n, little_n)| (big_n - little_n) as usize)
        .collect();
    let total_out: usize = m_t.iter().sum();
    let n_pop_f = n_pop as f64;

    let kinds: Vec<Kind> = targets.iter().map(Kind::of).collect();

    // sample terms, computed once and reused across replicates
    let mut sample_add = vec![0.0f64; targets.len()];
    let (mut num_s, mut den_s) = (0.0f64, 0.0f64);
    for (ti, kind) in kinds.iter().enumerate() {
        if let Some(h) = kind.unit_h() {
            sample_add[ti] = sample_z.iter().map(|&z| h(z)).sum();
        }
    }
    for &z in sample_z {
        num_s += z.x;
        den_s += z.x + z.y;
    }

    if total_out == 0 {
        // fully sampled domain: the EBP is the direct functional, exactly
        let values = kinds
            .iter()
            .zip(&sample_add)
            .map(|(kind, &s_add)| match kind {
                Kind::Ratio => num_s / den_s,
                Kind::CustomDom(h) => h(sample_z),
                _ => s_add / n_pop_f,
            })
            .collect::<Vec<f64>>();
        return validate_values(id, targets, &values);
    }

    let needs_vector = kinds.iter().any(|k| matches!(k, Kind::CustomDom(_)));
    let mut totals = vec![0.0f64; targets.len()];
    let mut scratch: Vec<Vec2> = Vec::new();
    let mut full: Vec<Vec2> = Vec::new();
    let lc = law.cond_chol[d];

    for ell in 0..mc.copies {
        let (stream_ell, sign) = if mc.antithetic && ell % 2 == 1 {
            (ell - 1, -1.0)
        } else {
            (ell, 1.0)
        };
        // start every accumulator from the fixed sample term so the
        // summation order matches a single pass over the full domain vector
        let mut add_acc = sample_add.clone();
        let (mut num, mut den) = (num_s, den_s);
        if needs_vector {
            full.clear();
            full.extend_from_slice(sample_z);
        }
        for (t, &m) in m_t.iter().enumerate() {
            if m == 0 {
                continue;
            }
            let mut rng = substream(
                mc.seed,
                &[STAGE_EBP_DRAWS, d as u64, t as u64, stream_ell as u64],
            );
            let mu = law.cond_means[d][t];
            scratch.clear();
            for _ in 0..m {
                let z = Vec2::new(
                    sign * rng.sample::<f64, _>(StandardNormal),
                    sign * rng.sample::<f64, _>(StandardNormal),
                );
                scratch.push(transform.inverse_unchecked(mu + lc * z));
            }
            for (ti, kind) in kinds.iter().enumerate() {
                match kind {
                    Kind::Mean1 => {
                        for z in &scratch {
                            add_acc[ti] += h_mean1(*z);
                        }
                    }
                    Kind::Mean2 => {
                        for z in &scratch {
                            add_acc[ti] += h_mean2(*z);
                        }
                    }
                    Kind::MeanOfRatios => {
                        for z in &scratch {
                            add_acc[ti] += h_unit_ratio(*z);
                        }
                    }
                    Kind::CustomAdd(h) => {
                        for z in &scratch {
                            add_acc[ti] += h(*z);
                        }
                    }
                    Kind::Ratio | Kind::CustomDom(_) => {}
                }
            }
            for z in &scratch {
                num += z.x;
                den += z.x + z.y;
            }
            if needs_vector {
                full.extend_from_slice(&scratch);
            }
        }
        for (ti, kind) in kinds.iter().enumerate() {
            match kind {
                Kind::Ratio => {
                    if !(den > 0.0) {
                        return Err(Error::domain(
                            id,
                            format!("non-positive ratio denominator {den} in replicate {ell}"),
                        ));
                    }
                    totals[ti] += num / den;
                }
                Kind::CustomDom(h) => totals[ti] += h(&full),
                _ => totals[ti] += add_acc[ti] / n_pop_f,
            }
        }
    }

    let copies = mc.copies as f64;
    let values: Vec<f64> = totals.into_iter().map(|t| t / copies).collect();
    validate_values(id, targets, &values)
}

fn validate_values(id: &str, targets: &[TargetSpec], values: &[f64]) -> Result<Vec<f64>> {
    for (spec, &v) in targets.iter().zip(values) {
        if !v.is_finite() {
            return Err(Error::domain(
                id,
                format!("non-finite EBP for target {}", spec.label()),
            ));
        }
        if matches!(spec, TargetSpec::MeanOfRatios | TargetSpec::RatioOfMeans)
            && !(v > 0.0 && v < 1.0)
        {
            return Err(Error::domain(
                id,
                format!("target {} outside (0, 1): {v}", spec.label()),
            ));
        }
    }
    Ok(values.to_vec())
}

/// EBP of an additive target.
pub fn ebp_additive(
    target: &TargetSpec,
    transform: Transform,
    params: &ModelParams,
    sample: &SampleData,
    aux: &AuxCounts,
    mc: &McOptions,
) -> Result<Vec<f64>> {
    if !target.is_additive() {
        return Err(Error::InvalidParameter(format!(
            "target {} is not additive",
            target.label()
        )));
    }
    ebp_estimates(params, sample, aux, transform, std::slice::from_ref(target), mc)
        .map(|mut v| v.remove(0))
}

/// EBP of the ratio of domain means, `R_d`.
pub fn ebp_ratio(
    params: &ModelParams,
    transform: Transform,
    sample: &SampleData,
    aux: &AuxCounts,
    mc: &McOptions,
) -> Result<Vec<f64>> {
    ebp_estimates(
        params,
        sample,
        aux,
        transform,
        &[TargetSpec::RatioOfMeans],
        mc,
    )
    .map(|mut v| v.remove(0))
}

/// EBP of a non-additive parameter given as a function of the whole domain
/// vector of back-transformed unit pairs (sampled units first, then draws in
/// pattern order).
pub fn ebp_nonadditive(
    h: Arc<DomainFn>,
    params: &ModelParams,
    transform: Transform,
    sample: &SampleData,
    aux: &AuxCounts,
    mc: &McOptions,
) -> Result<Vec<f64>> {
    ebp_estimates(
        params,
        sample,
        aux,
        transform,
        &[TargetSpec::CustomDomain(h)],
        mc,
    )
    .map(|mut v| v.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CovariatePattern, DomainData, UnitData, VarianceComponents};
    use crate::model::RegressionCoefficients;

    fn unit(x1: Vec<f64>, x2: Vec<f64>, y1: f64, y2: f64) -> UnitData {
        UnitData {
            x1,
            x2,
            y: Vec2::new(y1, y2),
        }
    }

    #[test]
    fn direct_estimates_single_unit() {
        let d = DirectEstimates::from_units(&[Vec2::new(2.0, 8.0)]).unwrap();
        assert_eq!(d.mean_of_ratios, 0.2);
        assert_eq!(d.ratio_of_means, 0.2);
        assert_eq!(d.mean1, 2.0);
        assert_eq!(d.mean2, 8.0);
    }

    #[test]
    fn direct_estimates_two_units() {
        let d = DirectEstimates::from_units(&[Vec2::new(1.0, 1.0), Vec2::new(3.0, 1.0)]).unwrap();
        assert_eq!(d.mean1, 2.0);
        assert!((d.ratio_of_means - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn direct_estimates_reject_empty() {
        assert!(DirectEstimates::from_units(&[]).is_err());
    }

    #[test]
    fn n_zero_domain_gets_prior_moments() {
        let theta = VarianceComponents::new(0.4, 0.6, 0.3, 0.5, 0.7, -0.2).unwrap();
        let beta = RegressionCoefficients::new(vec![1.0, 2.0], vec![0.5, -1.0]).unwrap();
        let params = ModelParams::new(beta.clone(), theta).unwrap();
        let sample = SampleData::new(2, 2);
        let aux = AuxCounts::new(
            vec!["t1".into(), "t2".into()],
            vec![
                CovariatePattern {
                    x1: vec![1.0, 0.0],
                    x2: vec![1.0, 0.0],
                },
                CovariatePattern {
                    x1: vec![1.0, 1.0],
                    x2: vec![1.0, 1.0],
                },
            ],
            vec!["empty".into()],
            vec![vec![4, 6]],
        )
        .unwrap();
        let law = conditional_moments(&params, &sample, &aux).unwrap();
        let want_cov = theta.v_u() + theta.v_e();
        assert_eq!(*law.cond_cov(0), want_cov);
        assert_eq!(law.cond_mean(0, 0), beta.mean(&[1.0, 0.0], &[1.0, 0.0]));
        assert_eq!(law.cond_mean(0, 1), beta.mean(&[1.0, 1.0], &[1.0, 1.0]));
    }

    #[test]
    fn uncorrelated_components_decouple() {
        // with rho_u = rho_e = 0 the two coordinates follow independent
        // univariate nested error models with known conditional moments
        let (su, se) = (0.8, 0.5);
        let theta = VarianceComponents::new(su, 0.3, 0.0, se, 0.9, 0.0).unwrap();
        let beta = RegressionCoefficients::new(vec![2.0], vec![1.0]).unwrap();
        let params = ModelParams::new(beta, theta).unwrap();
        let n = 4usize;
        let mut sample = SampleData::new(1, 1);
        let units: Vec<UnitData> = (0..n)
            .map(|j| unit(vec![1.0], vec![1.0], 2.0 + 0.3 * j as f64, 1.0 - 0.1 * j as f64))
            .collect();
        sample
            .push_domain(DomainData {
                id: "d0".into(),
                units: units.clone(),
            })
            .unwrap();
        let aux = AuxCounts::new(
            vec!["t".into()],
            vec![CovariatePattern {
                x1: vec![1.0],
                x2: vec![1.0],
            }],
            vec!["d0".into()],
            vec![vec![10]],
        )
        .unwrap();
        let law = conditional_moments(&params, &sample, &aux).unwrap();

        let nf = n as f64;
        // univariate: var(u|y) = su*se/(se + n su), conditional var = that + se
        let cvar1 = su * se / (se + nf * su) + se;
        let gamma = nf * su / (se + nf * su);
        let mean_res1: f64 = units.iter().map(|u| u.y.x - 2.0).sum::<f64>() / nf;
        let cmean1 = 2.0 + gamma * mean_res1;
        assert!((law.cond_cov(0)[(0, 0)] - cvar1).abs() < 1e-12);
        assert!(law.cond_cov(0)[(0, 1)].abs() < 1e-14);
        assert!((law.cond_mean(0, 0).x - cmean1).abs() < 1e-12);

        let (su2, se2) = (0.3, 0.9);
        let cvar2 = su2 * se2 / (se2 + nf * su2) + se2;
        let gamma2 = nf * su2 / (se2 + nf * su2);
        let mean_res2: f64 = units.iter().map(|u| u.y.y - 1.0).sum::<f64>() / nf;
        assert!((law.cond_cov(0)[(1, 1)] - cvar2).abs() < 1e-12);
        assert!((law.cond_mean(0, 0).y - (1.0 + gamma2 * mean_res2)).abs() < 1e-12);
    }

    fn toy_instance() -> (ModelParams, SampleData, AuxCounts) {
        let theta = VarianceComponents::new(0.3, 0.4, 0.5, 0.6, 0.5, -0.3).unwrap();
        let beta = RegressionCoefficients::new(vec![1.0, 0.5], vec![1.2, -0.4]).unwrap();
        let params = ModelParams::new(beta, theta).unwrap();
        let pats = vec![
            CovariatePattern {
                x1: vec![1.0, 0.0],
                x2: vec![1.0, 0.0],
            },
            CovariatePattern {
                x1: vec![1.0, 1.0],
                x2: vec![1.0, 1.0],
            },
        ];
        let mut sample = SampleData::new(2, 2);
        sample
            .push_domain(DomainData {
                id: "a".into(),
                units: vec![
                    unit(vec![1.0, 0.0], vec![1.0, 0.0], 0.9, 1.3),
                    unit(vec![1.0, 1.0], vec![1.0, 1.0], 1.8, 0.6),
                    unit(vec![1.0, 0.0], vec![1.0, 0.0], 1.1, 1.0),
                ],
            })
            .unwrap();
        sample
            .push_domain(DomainData {
                id: "b".into(),
                units: vec![unit(vec![1.0, 1.0], vec![1.0, 1.0], 1.4, 0.8)],
            })
            .unwrap();
        let aux = AuxCounts::new(
            vec!["t1".into(), "t2".into()],
            pats,
            vec!["a".into(), "b".into()],
            vec![vec![5, 3], vec![2, 4]],
        )
        .unwrap();
        (params, sample, aux)
    }

    #[test]
    fn seed_determinism() {
        let (params, sample, aux) = toy_instance();
        let mc = McOptions {
            copies: 40,
            seed: 99,
            antithetic: false,
        };
        let targets = [
            TargetSpec::Mean1,
            TargetSpec::Mean2,
            TargetSpec::MeanOfRatios,
            TargetSpec::RatioOfMeans,
        ];
        let a = ebp_estimates(&params, &sample, &aux, Transform::Log, &targets, &mc).unwrap();
        let b = ebp_estimates(&params, &sample, &aux, Transform::Log, &targets, &mc).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for (va, vb) in ra.iter().zip(rb) {
                assert_eq!(va.to_bits(), vb.to_bits());
            }
        }
    }

    #[test]
    fn draws_are_shared_across_target_lists() {
        let (params, sample, aux) = toy_instance();
        let mc = McOptions {
            copies: 25,
            seed: 7,
            antithetic: false,
        };
        let all = ebp_estimates(
            &params,
            &sample,
            &aux,
            Transform::Log,
            &[TargetSpec::MeanOfRatios, TargetSpec::RatioOfMeans],
            &mc,
        )
        .unwrap();
        let a_only =
            ebp_additive(&TargetSpec::MeanOfRatios, Transform::Log, &params, &sample, &aux, &mc)
                .unwrap();
        let r_only = ebp_ratio(&params, Transform::Log, &sample, &aux, &mc).unwrap();
        for d in 0..2 {
            assert_eq!(all[0][d].to_bits(), a_only[d].to_bits());
            assert_eq!(all[1][d].to_bits(), r_only[d].to_bits());
        }
    }

    #[test]
    fn nonadditive_path_matches_specialized_paths_bitwise() {
        let (params, sample, aux) = toy_instance();
        let mc = McOptions {
            copies: 30,
            seed: 13,
            antithetic: false,
        };
        let mean_h: Arc<DomainFn> = Arc::new(|z: &[Vec2]| {
            let mut acc = 0.0;
            for zj in z {
                acc += zj.x / (zj.x + zj.y);
            }
            acc / z.len() as f64
        });
        let ratio_h: Arc<DomainFn> = Arc::new(|z: &[Vec2]| {
            let (mut num, mut den) = (0.0, 0.0);
            for zj in z {
                num += zj.x;
                den += zj.x + zj.y;
            }
            num / den
        });
        let via_add =
            ebp_additive(&TargetSpec::MeanOfRatios, Transform::Log, &params, &sample, &aux, &mc)
                .unwrap();
        let via_dom =
            ebp_nonadditive(mean_h, &params, Transform::Log, &sample, &aux, &mc).unwrap();
        let via_ratio = ebp_ratio(&params, Transform::Log, &sample, &aux, &mc).unwrap();
        let via_dom_ratio =
            ebp_nonadditive(ratio_h, &params, Transform::Log, &sample, &aux, &mc).unwrap();
        for d in 0..2 {
            assert_eq!(via_add[d].to_bits(), via_dom[d].to_bits());
            assert_eq!(via_ratio[d].to_bits(), via_dom_ratio[d].to_bits());
        }
    }

    #[test]
    fn domain_max_is_bounded_by_sample_max() {
        let (params, sample, aux) = toy_instance();
        let mc = McOptions {
            copies: 20,
            seed: 3,
            antithetic: false,
        };
        let max_h: Arc<DomainFn> = Arc::new(|z: &[Vec2]| {
            z.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max)
        });
        let vals = ebp_nonadditive(max_h, &params, Transform::Log, &sample, &aux, &mc).unwrap();
        let sample_max: f64 = sample.domains()[0]
            .units
            .iter()
            .map(|u| u.y.x.exp())
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(vals[0].is_finite());
        assert!(vals[0] >= sample_max);
    }

    #[test]
    fn degenerate_law_returns_the_mean() {
        let theta = VarianceComponents::new(1e-16, 1e-16, 0.0, 1e-16, 1e-16, 0.0).unwrap();
        let beta = RegressionCoefficients::new(vec![0.7], vec![0.4]).unwrap();
        let params = ModelParams::new(beta, theta).unwrap();
        let sample = SampleData::new(1, 1);
        let aux = AuxCounts::new(
            vec!["t".into()],
            vec![CovariatePattern {
                x1: vec![1.0],
                x2: vec![1.0],
            }],
            vec!["d".into()],
            vec![vec![6]],
        )
        .unwrap();
        let law = conditional_moments(&params, &sample, &aux).unwrap();
        let mut rng = substream(5, &[1]);
        for y in draw_nonsample(&law, 0, 0, 200, &mut rng) {
            assert!((y.x - 0.7).abs() < 1e-6);
            assert!((y.y - 0.4).abs() < 1e-6);
        }
    }

    #[test]
    fn ratio_dominance_when_second_component_vanishes() {
        // z2 is ~1e-8 of z1, so R should be 1 within ~1e-6
        let theta = VarianceComponents::new(0.01, 0.01, 0.0, 0.01, 0.01, 0.0).unwrap();
        let beta = RegressionCoefficients::new(vec![1.0], vec![1.0 - 8.0 * std::f64::consts::LN_10])
            .unwrap();
        let params = ModelParams::new(beta, theta).unwrap();
        let mut sample = SampleData::new(1, 1);
        sample
            .push_domain(DomainData {
                id: "d".into(),
                units: vec![unit(vec![1.0], vec![1.0], 1.0, 1.0 - 8.0 * std::f64::consts::LN_10)],
            })
            .unwrap();
        let aux = AuxCounts::new(
            vec!["t".into()],
            vec![CovariatePattern {
                x1: vec![1.0],
                x2: vec![1.0],
            }],
            vec!["d".into()],
            vec![vec![8]],
        )
        .unwrap();
        let r = ebp_ratio(
            &params,
            Transform::Log,
            &sample,
            &aux,
            &McOptions {
                copies: 100,
                seed: 11,
                antithetic: false,
            },
        )
        .unwrap();
        assert!((r[0] - 1.0).abs() < 1e-6, "R = {}", r[0]);
    }

    #[test]
    fn additive_rejects_nonadditive_target() {
        let (params, sample, aux) = toy_instance();
        assert!(ebp_additive(
            &TargetSpec::RatioOfMeans,
            Transform::Log,
            &params,
            &sample,
            &aux,
            &McOptions::default()
        )
        .is_err());
    }
}
