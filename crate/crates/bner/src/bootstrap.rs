//! Parametric bootstrap MSE estimation.
//!
//! Each replicate rebuilds a synthetic population from the fitted model,
//! takes the sample with the same per-pattern counts as the original one,
//! re-estimates the model (optionally) and recomputes the EBPs; squared
//! deviations from the replicate's true domain parameters average into the
//! MSE estimate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::cov::{chol2, Vec2};
use crate::ebp::{ebp_estimates, McOptions, TargetSpec};
use crate::error::{Error, Result};
use crate::model::{AuxCounts, DomainData, ModelParams, SampleData, Transform, UnitData};
use crate::reml::{fit_reml, FitOptions, FittedModel};
use crate::rng::{fold_seed, substream, STAGE_BOOT_EBP, STAGE_BOOT_POINT, STAGE_BOOT_POP};

/// Controls for the bootstrap MSE estimator.
#[derive(Debug, Clone)]
pub struct BootstrapOptions {
    /// Number of bootstrap replicates B.
    pub replicates: usize,
    /// Monte Carlo copies L used inside each replicate's EBPs.
    pub copies: usize,
    pub seed: u64,
    /// Re-estimate the model on every bootstrap sample.
    pub refit: bool,
    pub fit: FitOptions,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            replicates: 400,
            copies: 200,
            seed: 0,
            refit: true,
            fit: FitOptions::default(),
        }
    }
}

/// Bootstrap MSE estimates per domain and target.
#[derive(Debug, Clone)]
pub struct MseReport {
    pub domain_ids: Vec<String>,
    pub target_labels: Vec<String>,
    /// EBPs on the original sample, `[target][domain]`.
    pub point_estimates: Vec<Vec<f64>>,
    pub mse: Vec<Vec<f64>>,
    /// `100 * sqrt(mse) / point_estimate`; `None` where the estimate is zero.
    pub rrmse_pct: Vec<Vec<Option<f64>>>,
    pub attempted_replicates: usize,
    pub failed_replicates: usize,
    /// Set when more than 10% of the replicates failed.
    pub unreliable: bool,
    pub warnings: Vec<String>,
}

/// Pattern-level description of the sampling design, fixed across replicates.
#[derive(Debug, Clone)]
pub(crate) struct SampleTemplate {
    pub aux: AuxCounts,
    /// Sample counts per (domain, pattern), aligned with `aux`.
    pub n_dt: Vec<Vec<u64>>,
    pub p1: usize,
    pub p2: usize,
}

impl SampleTemplate {
    pub(crate) fn new(sample: &SampleData, aux: &AuxCounts) -> Result<Self> {
        let n_dt = aux.tabulate_sample(sample)?;
        Ok(SampleTemplate {
            aux: aux.clone(),
            n_dt,
            p1: sample.p1(),
            p2: sample.p2(),
        })
    }
}

/// A synthetic population grouped by (domain, pattern), on the transformed
/// (y) scale, together with the domain random effects that generated it.
#[derive(Debug, Clone)]
pub struct SyntheticPopulation {
    pub domain_ids: Vec<String>,
    /// `y[d][t]` holds the N_dt generated response pairs of pattern t.
    pub y: Vec<Vec<Vec<Vec2>>>,
    pub u: Vec<Vec2>,
}

/// Generates one bootstrap population `y*_dj = X_0t beta + u*_d + e*_dj`
/// with `u*_d ~ N2(0, V_u)` and `e*_dj ~ N2(0, V_e)`.
///
/// The first `n_dt` units of each pattern are the ones identified with the
/// sampled slots when a bootstrap sample is extracted.
pub fn generate_bootstrap_population(
    params: &ModelParams,
    aux: &AuxCounts,
    sample: &SampleData,
    rng: &mut ChaCha8Rng,
) -> Result<SyntheticPopulation> {
    // consistency of the design this population will be sampled under
    aux.tabulate_sample(sample)?;
    Ok(generate_population(params, aux, rng))
}

fn generate_population(
    params: &ModelParams,
    aux: &AuxCounts,
    rng: &mut ChaCha8Rng,
) -> SyntheticPopulation {
    let lu = chol2(&params.theta.v_u()).expect("validated variance components");
    let le = chol2(&params.theta.v_e()).expect("validated variance components");
    let pattern_means: Vec<Vec2> = aux
        .patterns()
        .iter()
        .map(|pat| params.beta.mean(&pat.x1, &pat.x2))
        .collect();
    let mut pop = SyntheticPopulation {
        domain_ids: aux.domain_ids().to_vec(),
        y: Vec::with_capacity(aux.domain_ids().len()),
        u: Vec::with_capacity(aux.domain_ids().len()),
    };
    for d in 0..aux.domain_ids().len() {
        let z = Vec2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        let u = lu * z;
        let mut rows = Vec::with_capacity(aux.n_patterns());
        for (t, &n_dt) in aux.counts(d).iter().enumerate() {
            let mut units = Vec::with_capacity(n_dt as usize);
            for _ in 0..n_dt {
                let z = Vec2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
                units.push(pattern_means[t] + u + le * z);
            }
            rows.push(units);
        }
        pop.y.push(rows);
        pop.u.push(u);
    }
    pop
}

impl SyntheticPopulation {
    /// Domain parameter values of the population, `[target][domain]`.
    pub fn truths(&self, transform: Transform, targets: &[TargetSpec]) -> Result<Vec<Vec<f64>>> {
        let mut out = vec![vec![0.0; self.domain_ids.len()]; targets.len()];
        let mut z_buf: Vec<Vec2> = Vec::new();
        for (d, rows) in self.y.iter().enumerate() {
            z_buf.clear();
            for row in rows {
                for &y in row {
                    z_buf.push(transform.inverse_unchecked(y));
                }
            }
            let n = z_buf.len() as f64;
            if z_buf.is_empty() {
                return Err(Error::domain(&self.domain_ids[d], "empty population"));
            }
            for (ti, target) in targets.iter().enumerate() {
                let v = match target {
                    TargetSpec::Mean1 => z_buf.iter().map(|z| z.x).sum::<f64>() / n,
                    TargetSpec::Mean2 => z_buf.iter().map(|z| z.y).sum::<f64>() / n,
                    TargetSpec::MeanOfRatios => {
                        z_buf.iter().map(|z| z.x / (z.x + z.y)).sum::<f64>() / n
                    }
                    TargetSpec::RatioOfMeans => {
                        let num: f64 = z_buf.iter().map(|z| z.x).sum();
                        let den: f64 = z_buf.iter().map(|z| z.x + z.y).sum();
                        num / den
                    }
                    TargetSpec::CustomAdditive(h) => {
                        z_buf.iter().map(|&z| h(z)).sum::<f64>() / n
                    }
                    TargetSpec::CustomDomain(h) => h(&z_buf),
                };
                if !v.is_finite() {
                    return Err(Error::domain(
                        &self.domain_ids[d],
                        format!("non-finite population parameter for {}", target.label()),
                    ));
                }
                out[ti][d] = v;
            }
        }
        Ok(out)
    }

    /// Takes the fixed-index sample: the first `n_dt` units of every pattern.
    pub(crate) fn extract_sample(&self, template: &SampleTemplate) -> SampleData {
        let mut sample = SampleData::new(template.p1, template.p2);
        for (d, rows) in self.y.iter().enumerate() {
            let mut units = Vec::new();
            for (t, row) in rows.iter().enumerate() {
                let take = template.n_dt[d][t] as usize;
                let pat = &template.aux.patterns()[t];
                for &y in row.iter().take(take) {
                    units.push(UnitData {
                        x1: pat.x1.clone(),
                        x2: pat.x2.clone(),
                        y,
                    });
                }
            }
            let dom = DomainData {
                id: self.domain_ids[d].clone(),
                units,
            };
            sample.push_domain(dom).expect("template-consistent domain");
        }
        sample
    }
}

pub(crate) struct ReplicateOutcome {
    /// `[target][domain]` EBPs on the bootstrap sample.
    pub estimates: Vec<Vec<f64>>,
    /// `[target][domain]` true parameters of the bootstrap population.
    pub truths: Vec<Vec<f64>>,
}

/// Runs one bootstrap replicate. `Ok(None)` marks a skipped replicate
/// (failed or non-converged refit, or a failed prediction).
pub(crate) fn bootstrap_replicate(
    gen_params: &ModelParams,
    template: &SampleTemplate,
    targets: &[TargetSpec],
    transform: Transform,
    copies: usize,
    refit: Option<&FitOptions>,
    rep_seed: u64,
) -> Result<Option<ReplicateOutcome>> {
    let mut rng = substream(rep_seed, &[STAGE_BOOT_POP]);
    let pop = generate_population(gen_params, &template.aux, &mut rng);
    let truths = pop.truths(transform, targets)?;
    let boot_sample = pop.extract_sample(template);

    let fitted_params;
    let params = match refit {
        Some(opts) => match fit_reml(&boot_sample, opts) {
            Ok(f) if f.converged => {
                fitted_params = f.params;
                &fitted_params
            }
            _ => return Ok(None),
        },
        None => gen_params,
    };
    let mc = McOptions {
        copies,
        seed: fold_seed(rep_seed, &[STAGE_BOOT_EBP]),
        antithetic: false,
    };
    match ebp_estimates(params, &boot_sample, &template.aux, transform, targets, &mc) {
        Ok(estimates) => Ok(Some(ReplicateOutcome { estimates, truths })),
        Err(_) => Ok(None),
    }
}

/// Parametric bootstrap MSE of the EBPs of `targets`, with relative
/// root-MSEs against the point estimates on the original sample.
pub fn bootstrap_mse(
    fitted: &FittedModel,
    sample: &SampleData,
    aux: &AuxCounts,
    targets: &[TargetSpec],
    transform: Transform,
    opts: &BootstrapOptions,
) -> Result<MseReport> {
    if opts.replicates == 0 || opts.copies == 0 {
        return Err(Error::InvalidParameter(
            "bootstrap needs B >= 1 and L >= 1".to_string(),
        ));
    }
    let mut warnings = Vec::new();
    if !fitted.converged {
        warnings.push("bootstrap run from a non-converged fit".to_string());
    }
    let template = SampleTemplate::new(sample, aux)?;
    let point_mc = McOptions {
        copies: opts.copies,
        seed: fold_seed(opts.seed, &[STAGE_BOOT_POINT]),
        antithetic: false,
    };
    let point_estimates =
        ebp_estimates(&fitted.params, sample, aux, transform, targets, &point_mc)?;

    let refit = opts.refit.then_some(&opts.fit);
    let outcomes: Vec<Result<Option<ReplicateOutcome>>> = (0..opts.replicates)
        .into_par_iter()
        .map(|b| {
            let rep_seed = fold_seed(opts.seed, &[STAGE_BOOT_POP, b as u64]);
            bootstrap_replicate(
                &fitted.params,
                &template,
                targets,
                transform,
                opts.copies,
                refit,
                rep_seed,
            )
        })
        .collect();

    let n_domains = aux.domain_ids().len();
    let mut sq = vec![vec![0.0f64; n_domains]; targets.len()];
    let mut successes = 0usize;
    for outcome in outcomes {
        match outcome? {
            Some(rep) => {
                successes += 1;
                for ti in 0..targets.len() {
                    for d in 0..n_domains {
                        let dev = rep.estimates[ti][d] - rep.truths[ti][d];
                        sq[ti][d] += dev * dev;
                    }
                }
            }
            None => {}
        }
    }
    let failed = opts.replicates - successes;
    if successes == 0 {
        return Err(Error::InvalidParameter(
            "every bootstrap replicate failed".to_string(),
        ));
    }
    let mse: Vec<Vec<f64>> = sq
        .into_iter()
        .map(|row| row.into_iter().map(|s| s / successes as f64).collect())
        .collect();
    let rrmse_pct = mse
        .iter()
        .zip(&point_estimates)
        .map(|(ms, pts)| {
            ms.iter()
                .zip(pts)
                .map(|(&m, &p)| (p != 0.0).then(|| 100.0 * m.sqrt() / p.abs()))
                .collect()
        })
        .collect();
    Ok(MseReport {
        domain_ids: aux.domain_ids().to_vec(),
        target_labels: targets.iter().map(|t| t.label().to_string()).collect(),
        point_estimates,
        mse,
        rrmse_pct,
        attempted_replicates: opts.replicates,
        failed_replicates: failed,
        unreliable: failed * 10 > opts.replicates,
        warnings,
    })
}
