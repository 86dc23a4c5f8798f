//! Regenerates the bundled synthetic dataset under `data/`.
//!
//! The files mimic a household expenditure survey: positive expenditure
//! pairs (z columns, log transform), a categorical family-composition
//! covariate encoded as four patterns, per-province pattern counts, and one
//! province without sampled households.
//!
//! Run from the workspace root: `cargo run -p bner-cli --example make_synthetic`

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use bner::io::{write_aux_csv, write_patterns_csv, write_unit_csv, UnitValueMode};
use bner::model::{
    AuxCounts, CovariatePattern, DomainData, ModelParams, RegressionCoefficients, SampleData,
    Transform, UnitData, VarianceComponents,
};
use bner::rng::substream;
use bner::Vec2;

fn main() {
    let out = Path::new("data");
    std::fs::create_dir_all(out).expect("create data directory");

    let theta = VarianceComponents::new(0.12, 0.10, 0.55, 0.42, 0.30, 0.38).unwrap();
    let beta = RegressionCoefficients::new(vec![8.2, -0.45], vec![9.1, -0.25]).unwrap();
    let params = ModelParams::new(beta, theta).unwrap();

    let pattern_ids: Vec<String> = (1..=4).map(|t| format!("fc{t}")).collect();
    let patterns: Vec<CovariatePattern> = (0..4)
        .map(|t| CovariatePattern {
            x1: vec![1.0, (t % 2) as f64],
            x2: vec![1.0, (t / 2) as f64],
        })
        .collect();

    let n_domains = 16usize;
    let mut rng = substream(20_160_104, &[]);
    let lu = bner::chol2(&params.theta.v_u()).unwrap();
    let le = bner::chol2(&params.theta.v_e()).unwrap();

    let mut sample = SampleData::new(2, 2);
    let mut domain_ids = Vec::new();
    let mut counts = Vec::new();
    for d in 0..n_domains {
        let id = format!("prov{:02}", d + 1);
        let n_dt: Vec<u64> = (0..4).map(|_| rng.random_range(6..16u64)).collect();
        let z = Vec2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        let u = lu * z;
        let mut units = Vec::new();
        // sampled units per pattern: a small share of N_dt
        for (t, pat) in patterns.iter().enumerate() {
            let n_samp = (n_dt[t] / 3).max(1).min(n_dt[t]);
            for _ in 0..n_samp {
                let z = Vec2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
                let y = params.beta.mean(&pat.x1, &pat.x2) + u + le * z;
                units.push(UnitData {
                    x1: pat.x1.clone(),
                    x2: pat.x2.clone(),
                    y,
                });
            }
        }
        sample.push_domain(DomainData { id: id.clone(), units }).unwrap();
        domain_ids.push(id);
        counts.push(n_dt);
    }
    // one province known only through its aggregated counts
    domain_ids.push("prov99".to_string());
    counts.push(vec![9, 11, 7, 13]);

    let aux = AuxCounts::new(pattern_ids.clone(), patterns.clone(), domain_ids, counts).unwrap();
    write_unit_csv(&out.join("units.csv"), &sample, UnitValueMode::Original, Transform::Log)
        .unwrap();
    write_patterns_csv(&out.join("patterns.csv"), &pattern_ids, &patterns).unwrap();
    write_aux_csv(&out.join("aux.csv"), &aux).unwrap();
    println!(
        "wrote data/units.csv ({} units), data/patterns.csv, data/aux.csv",
        sample.n_units()
    );
}
