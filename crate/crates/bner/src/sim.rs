//! Monte Carlo simulation harness.
//!
//! Two experiments: the first measures the error of the EBPs of the domain
//! mean-of-ratios A_d and ratio-of-means R_d against the generating model;
//! the second measures the error of the parametric bootstrap MSE estimator
//! against reference MSEs taken from a first-experiment run with the same
//! covariate design.
//!
//! Covariate patterns are the four diag(x1, x2) matrices produced by an
//! intercept plus one fair Bernoulli indicator per response; covariates are
//! generated once per configuration and held fixed across iterations, while
//! responses are regenerated every iteration.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::bootstrap::{bootstrap_replicate, SampleTemplate};
use crate::cov::{chol2, Vec2};
use crate::ebp::{ebp_estimates, McOptions, TargetSpec};
use crate::error::{Error, Result};
use crate::model::{
    AuxCounts, CovariatePattern, DomainData, ModelParams, RegressionCoefficients, SampleData,
    Transform, UnitData, VarianceComponents,
};
use crate::reml::{fit_reml, FitOptions};
use crate::rng::{fold_seed, substream, STAGE_SIM_BOOT, STAGE_SIM_COV, STAGE_SIM_EBP, STAGE_SIM_POP};

const RUN_SIM1: u64 = 1;
const RUN_SIM2: u64 = 2;

/// Configuration of the EBP error experiment.
#[derive(Debug, Clone)]
pub struct Sim1Config {
    pub domains: usize,
    pub units_per_domain: usize,
    pub sample_size: usize,
    /// Outer Monte Carlo iterations I.
    pub iterations: usize,
    /// Inner EBP copies L.
    pub copies: usize,
    pub beta: RegressionCoefficients,
    pub theta: VarianceComponents,
    pub seed: u64,
    pub fit: FitOptions,
}

impl Sim1Config {
    /// The published design: N_d = 200, I = 200, L = 200,
    /// beta = (10, 10, 10, 10), theta = (0.75, 1.00, -0.8, 0.50, 0.75, 0.8).
    pub fn paper(domains: usize, sample_size: usize, seed: u64) -> Self {
        Sim1Config {
            domains,
            units_per_domain: 200,
            sample_size,
            iterations: 200,
            copies: 200,
            beta: RegressionCoefficients::new(vec![10.0, 10.0], vec![10.0, 10.0])
                .expect("finite coefficients"),
            theta: VarianceComponents::new(0.75, 1.00, -0.8, 0.50, 0.75, 0.8)
                .expect("valid variance components"),
            seed,
            fit: FitOptions::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.domains == 0
            || self.units_per_domain == 0
            || self.sample_size == 0
            || self.iterations == 0
            || self.copies == 0
        {
            return Err(Error::InvalidParameter(
                "simulation counts must all be at least 1".to_string(),
            ));
        }
        if self.sample_size > self.units_per_domain {
            return Err(Error::InvalidParameter(format!(
                "sample size {} exceeds population size {}",
                self.sample_size, self.units_per_domain
            )));
        }
        if self.beta.beta1.len() != 2 || self.beta.beta2.len() != 2 {
            return Err(Error::InvalidParameter(
                "the simulation design uses intercept + one indicator per response".to_string(),
            ));
        }
        self.theta.validate()
    }
}

/// Configuration of the bootstrap MSE experiment.
#[derive(Debug, Clone)]
pub struct Sim2Config {
    pub base: Sim1Config,
    /// Bootstrap sizes at which the running MSE estimate is reported.
    pub b_grid: Vec<usize>,
    /// Reference MSE per target and domain (`RE_d^2` from a first-experiment
    /// run with the same seed, hence the same covariate design).
    pub reference_mse: Vec<Vec<f64>>,
}

impl Sim2Config {
    fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.b_grid.is_empty() || self.b_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(
                "bootstrap grid must be non-empty and strictly increasing".to_string(),
            ));
        }
        if self.b_grid[0] == 0 {
            return Err(Error::InvalidParameter("bootstrap sizes must be >= 1".to_string()));
        }
        if self.reference_mse.len() != 2
            || self.reference_mse.iter().any(|r| r.len() != self.base.domains)
        {
            return Err(Error::InvalidParameter(
                "reference MSE table must cover both targets and all domains".to_string(),
            ));
        }
        Ok(())
    }
}

/// Per-domain and aggregate error metrics of an estimator against per-
/// iteration truths.
#[derive(Debug, Clone)]
pub struct MetricsTable {
    pub iterations: usize,
    pub re_d: Vec<f64>,
    pub bias_d: Vec<f64>,
    pub rre_d_pct: Vec<f64>,
    pub rb_d_pct: Vec<f64>,
    /// Mean over domains of RE_d.
    pub re: f64,
    /// Sum over domains of |B_d| (the displayed definition) and its mean
    /// variant; the published tables are consistent with the mean.
    pub ab_sum: f64,
    pub ab_mean: f64,
    pub rre_pct: f64,
    pub rab_pct: f64,
}

/// Exactly the displayed error metrics:
/// `RE_d = sqrt(mean_i (est - truth)^2)`, `B_d = mean_i (est - truth)`,
/// relative versions against the mean truth, and their aggregates.
pub fn compute_metrics(estimates: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<MetricsTable> {
    let iterations = estimates.len();
    if iterations == 0 || truths.len() != iterations {
        return Err(Error::InvalidParameter(
            "estimates and truths must hold the same positive number of iterations".to_string(),
        ));
    }
    let d_count = estimates[0].len();
    if estimates.iter().chain(truths.iter()).any(|r| r.len() != d_count) {
        return Err(Error::InvalidParameter(
            "ragged estimate/truth matrices".to_string(),
        ));
    }
    let inv_i = 1.0 / iterations as f64;
    let mut re_d = vec![0.0; d_count];
    let mut bias_d = vec![0.0; d_count];
    let mut eta_bar = vec![0.0; d_count];
    for i in 0..iterations {
        for d in 0..d_count {
            let dev = estimates[i][d] - truths[i][d];
            re_d[d] += dev * dev;
            bias_d[d] += dev;
            eta_bar[d] += truths[i][d];
        }
    }
    for d in 0..d_count {
        re_d[d] = (re_d[d] * inv_i).sqrt();
        bias_d[d] *= inv_i;
        eta_bar[d] *= inv_i;
        if eta_bar[d] == 0.0 {
            return Err(Error::InvalidParameter(format!(
                "mean truth of domain index {d} is zero; relative metrics undefined"
            )));
        }
    }
    let rre_d_pct: Vec<f64> = re_d
        .iter()
        .zip(&eta_bar)
        .map(|(re, eta)| 100.0 * re / eta)
        .collect();
    let rb_d_pct: Vec<f64> = bias_d
        .iter()
        .zip(&eta_bar)
        .map(|(b, eta)| 100.0 * b / eta)
        .collect();
    let inv_d = 1.0 / d_count as f64;
    Ok(MetricsTable {
        iterations,
        re: re_d.iter().sum::<f64>() * inv_d,
        ab_sum: bias_d.iter().map(|b| b.abs()).sum::<f64>(),
        ab_mean: bias_d.iter().map(|b| b.abs()).sum::<f64>() * inv_d,
        rre_pct: rre_d_pct.iter().sum::<f64>() * inv_d,
        rab_pct: rb_d_pct.iter().map(|b| b.abs()).sum::<f64>() * inv_d,
        re_d,
        bias_d,
        rre_d_pct,
        rb_d_pct,
    })
}

/// Fixed covariate design of a simulation run: per-unit pattern assignment
/// plus the aggregated pattern counts.
#[derive(Debug, Clone)]
pub struct CovariateDesign {
    /// Pattern index of every population unit, `[domain][unit]`.
    pub pattern_of_unit: Vec<Vec<usize>>,
    pub aux: AuxCounts,
}

fn sim_patterns() -> Vec<CovariatePattern> {
    let mut pats = Vec::with_capacity(4);
    for x12 in [0.0, 1.0] {
        for x22 in [0.0, 1.0] {
            pats.push(CovariatePattern {
                x1: vec![1.0, x12],
                x2: vec![1.0, x22],
            });
        }
    }
    pats
}

/// Draws the unit-level indicator covariates (two fair Bernoullis per unit),
/// tabulates the pattern counts `N_dt` and fixes the design for the rest of
/// the run.
pub fn generate_sim1_covariates(config: &Sim1Config, rng: &mut ChaCha8Rng) -> CovariateDesign {
    let patterns = sim_patterns();
    let mut pattern_of_unit = Vec::with_capacity(config.domains);
    let mut counts = Vec::with_capacity(config.domains);
    for _ in 0..config.domains {
        let mut assignment = Vec::with_capacity(config.units_per_domain);
        let mut n_dt = vec![0u64; 4];
        for _ in 0..config.units_per_domain {
            let x12 = rng.random::<bool>() as usize;
            let x22 = rng.random::<bool>() as usize;
            let t = 2 * x12 + x22;
            assignment.push(t);
            n_dt[t] += 1;
        }
        pattern_of_unit.push(assignment);
        counts.push(n_dt);
    }
    let aux = AuxCounts::new(
        (1..=4).map(|t| format!("t{t}")).collect(),
        patterns,
        (0..config.domains).map(|d| format!("d{d:03}")).collect(),
        counts,
    )
    .expect("consistent by construction");
    CovariateDesign {
        pattern_of_unit,
        aux,
    }
}

struct SimPopulation {
    /// Transformed responses per domain and unit, in unit order.
    y: Vec<Vec<Vec2>>,
}

fn generate_sim_population(
    config: &Sim1Config,
    design: &CovariateDesign,
    rng: &mut ChaCha8Rng,
) -> SimPopulation {
    let lu = chol2(&config.theta.v_u()).expect("valid theta");
    let le = chol2(&config.theta.v_e()).expect("valid theta");
    let means: Vec<Vec2> = design
        .aux
        .patterns()
        .iter()
        .map(|p| config.beta.mean(&p.x1, &p.x2))
        .collect();
    let y = design
        .pattern_of_unit
        .iter()
        .map(|assignment| {
            let z = Vec2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            let u = lu * z;
            assignment
                .iter()
                .map(|&t| {
                    let z = Vec2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
                    means[t] + u + le * z
                })
                .collect()
        })
        .collect();
    SimPopulation { y }
}

fn population_truths(pop: &SimPopulation, transform: Transform) -> (Vec<f64>, Vec<f64>) {
    let mut a = Vec::with_capacity(pop.y.len());
    let mut r = Vec::with_capacity(pop.y.len());
    for dom in &pop.y {
        let (mut sa, mut num, mut den) = (0.0, 0.0, 0.0);
        for &y in dom {
            let z = transform.inverse_unchecked(y);
            sa += z.x / (z.x + z.y);
            num += z.x;
            den += z.x + z.y;
        }
        a.push(sa / dom.len() as f64);
        r.push(num / den);
    }
    (a, r)
}

fn extract_sim_sample(
    config: &Sim1Config,
    design: &CovariateDesign,
    pop: &SimPopulation,
) -> SampleData {
    let mut sample = SampleData::new(2, 2);
    for (d, dom) in pop.y.iter().enumerate() {
        let units = dom
            .iter()
            .take(config.sample_size)
            .enumerate()
            .map(|(j, &y)| {
                let pat = &design.aux.patterns()[design.pattern_of_unit[d][j]];
                UnitData {
                    x1: pat.x1.clone(),
                    x2: pat.x2.clone(),
                    y,
                }
            })
            .collect();
        sample
            .push_domain(DomainData {
                id: design.aux.domain_ids()[d].clone(),
                units,
            })
            .expect("unique domain ids");
    }
    sample
}

/// Output of one simulation experiment: per-target metric tables.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub domain_ids: Vec<String>,
    pub target_labels: Vec<String>,
    pub tables: Vec<MetricsTable>,
    pub skipped_iterations: usize,
}

fn sim_targets() -> [TargetSpec; 2] {
    [TargetSpec::MeanOfRatios, TargetSpec::RatioOfMeans]
}

/// Runs the EBP error experiment: per iteration a fresh population, REML
/// fit, EBPs of A_d and R_d, and finally the error metrics against the
/// per-iteration true values.
pub fn run_sim1(config: &Sim1Config) -> Result<SimOutput> {
    config.validate()?;
    let design = generate_sim1_covariates(config, &mut substream(config.seed, &[STAGE_SIM_COV]));
    let transform = Transform::Log;
    let targets = sim_targets();

    let iterations: Vec<Option<([Vec<f64>; 2], [Vec<f64>; 2])>> = (0..config.iterations)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(config.seed, &[STAGE_SIM_POP, RUN_SIM1, i as u64]);
            let pop = generate_sim_population(config, &design, &mut rng);
            let (truth_a, truth_r) = population_truths(&pop, transform);
            let sample = extract_sim_sample(config, &design, &pop);
            let fitted = match fit_reml(&sample, &config.fit) {
                Ok(f) if f.converged => f,
                _ => return None,
            };
            let mc = McOptions {
                copies: config.copies,
                seed: fold_seed(config.seed, &[STAGE_SIM_EBP, RUN_SIM1, i as u64]),
                antithetic: false,
            };
            match ebp_estimates(&fitted.params, &sample, &design.aux, transform, &targets, &mc) {
                Ok(mut ests) => {
                    let est_r = ests.pop().expect("two targets");
                    let est_a = ests.pop().expect("two targets");
                    Some(([est_a, est_r], [truth_a, truth_r]))
                }
                Err(_) => None,
            }
        })
        .collect();

    let mut est_rows: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    let mut truth_rows: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    let mut skipped = 0;
    for item in iterations {
        match item {
            Some((ests, truths)) => {
                for ti in 0..2 {
                    est_rows[ti].push(ests[ti].clone());
                    truth_rows[ti].push(truths[ti].clone());
                }
            }
            None => skipped += 1,
        }
    }
    if est_rows[0].is_empty() {
        return Err(Error::InvalidParameter(
            "every simulation iteration failed".to_string(),
        ));
    }
    let tables = (0..2)
        .map(|ti| compute_metrics(&est_rows[ti], &truth_rows[ti]))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimOutput {
        domain_ids: design.aux.domain_ids().to_vec(),
        target_labels: targets.iter().map(|t| t.label().to_string()).collect(),
        tables,
        skipped_iterations: skipped,
    })
}

/// Output of the bootstrap MSE experiment: metric tables per bootstrap size.
#[derive(Debug, Clone)]
pub struct Sim2Output {
    pub domain_ids: Vec<String>,
    pub target_labels: Vec<String>,
    /// `(B, per-target tables)` for every grid point.
    pub per_b: Vec<(usize, Vec<MetricsTable>)>,
    pub skipped_iterations: usize,
}

/// Runs the bootstrap MSE experiment: per iteration a fresh population and
/// fit, then a nested bootstrap whose running MSE estimate is snapshotted at
/// every grid size; the snapshots are scored against the reference MSEs.
pub fn run_sim2(config: &Sim2Config) -> Result<Sim2Output> {
    config.validate()?;
    let base = &config.base;
    let design = generate_sim1_covariates(base, &mut substream(base.seed, &[STAGE_SIM_COV]));
    let transform = Transform::Log;
    let targets = sim_targets();
    let b_max = *config.b_grid.last().expect("validated non-empty");

    // the bootstrap resamples under the fixed original design: the sample
    // counts per pattern come from the first n_d units of every domain
    let template = {
        let n_dt = design
            .pattern_of_unit
            .iter()
            .map(|assignment| {
                let mut row = vec![0u64; design.aux.n_patterns()];
                for &t in assignment.iter().take(base.sample_size) {
                    row[t] += 1;
                }
                row
            })
            .collect();
        SampleTemplate {
            aux: design.aux.clone(),
            n_dt,
            p1: 2,
            p2: 2,
        }
    };

    // phase 1: fit the model on each iteration's fresh sample
    let fits: Vec<Option<ModelParams>> = (0..base.iterations)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(base.seed, &[STAGE_SIM_POP, RUN_SIM2, i as u64]);
            let pop = generate_sim_population(base, &design, &mut rng);
            let sample = extract_sim_sample(base, &design, &pop);
            match fit_reml(&sample, &base.fit) {
                Ok(f) if f.converged => Some(f.params),
                _ => None,
            }
        })
        .collect();
    let good: Vec<(usize, &ModelParams)> = fits
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.as_ref().map(|p| (i, p)))
        .collect();
    let skipped = base.iterations - good.len();
    if good.is_empty() {
        return Err(Error::InvalidParameter(
            "every simulation iteration failed to fit".to_string(),
        ));
    }

    // phase 2: nested bootstrap replicates, flattened for parallelism
    let jobs: Vec<(usize, usize)> = good
        .iter()
        .enumerate()
        .flat_map(|(gi, _)| (0..b_max).map(move |b| (gi, b)))
        .collect();
    let replicates: Vec<Result<Option<crate::bootstrap::ReplicateOutcome>>> = jobs
        .par_iter()
        .map(|&(gi, b)| {
            let (i, params) = good[gi];
            let rep_seed = fold_seed(base.seed, &[STAGE_SIM_BOOT, i as u64, b as u64]);
            bootstrap_replicate(
                params,
                &template,
                &targets,
                transform,
                base.copies,
                Some(&base.fit),
                rep_seed,
            )
        })
        .collect();

    // accumulate running MSEs per iteration, snapshotting at each grid point
    let d_count = base.domains;
    let n_grid = config.b_grid.len();
    let mut mse_rows: Vec<Vec<Vec<Vec<f64>>>> =
        vec![vec![Vec::new(); 2]; n_grid]; // [grid][target][iteration][domain]
    let mut job_iter = replicates.into_iter();
    for _ in 0..good.len() {
        let mut sq = [vec![0.0f64; d_count], vec![0.0f64; d_count]];
        let mut successes = 0usize;
        let mut grid_pos = 0usize;
        for b in 0..b_max {
            let outcome = job_iter.next().expect("one outcome per job")?;
            if let Some(rep) = outcome {
                successes += 1;
                for ti in 0..2 {
                    for d in 0..d_count {
                        let dev = rep.estimates[ti][d] - rep.truths[ti][d];
                        sq[ti][d] += dev * dev;
                    }
                }
            }
            while grid_pos < n_grid && b + 1 == config.b_grid[grid_pos] {
                if successes > 0 {
                    for ti in 0..2 {
                        let row: Vec<f64> =
                            sq[ti].iter().map(|s| s / successes as f64).collect();
                        mse_rows[grid_pos][ti].push(row);
                    }
                }
                grid_pos += 1;
            }
        }
    }

    let mut per_b = Vec::with_capacity(n_grid);
    for (g, &b) in config.b_grid.iter().enumerate() {
        let tables = (0..2)
            .map(|ti| {
                let rows = &mse_rows[g][ti];
                let truths = vec![config.reference_mse[ti].clone(); rows.len()];
                compute_metrics(rows, &truths)
            })
            .collect::<Result<Vec<_>>>()?;
        per_b.push((b, tables));
    }
    Ok(Sim2Output {
        domain_ids: design.aux.domain_ids().to_vec(),
        target_labels: targets.iter().map(|t| t.label().to_string()).collect(),
        per_b,
        skipped_iterations: skipped,
    })
}
