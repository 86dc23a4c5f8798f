//! Command-line front end: `fit`, `predict`, `mse`, `sim1`, `sim2`.
//!
//! Every flag can also come from a `key=value` config file passed with
//! `--config`; explicit flags override file entries. All outputs are CSV
//! files under `--out` and are byte-identical across reruns with the same
//! inputs, seed and any thread count.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bner::bootstrap::{bootstrap_mse, BootstrapOptions};
use bner::ebp::{direct_estimates, ebp_estimates, McOptions, TargetSpec};
use bner::io;
use bner::model::{SampleData, Transform};
use bner::reml::{fit_reml, FitOptions};
use bner::sim::{run_sim1, run_sim2, Sim1Config, Sim2Config};

#[derive(Parser)]
#[command(name = "bner", version)]
#[command(about = "Small-area estimation of bivariate means and ratios under a nested error regression model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model by REML and write parameter and random-effect tables
    Fit(CommonArgs),
    /// Direct and EBP estimates of domain means and ratios
    Predict(CommonArgs),
    /// Parametric bootstrap MSEs of the EBPs
    Mse(CommonArgs),
    /// EBP error experiment on synthetic populations
    Sim1(CommonArgs),
    /// Bootstrap MSE error experiment on synthetic populations
    Sim2(CommonArgs),
}

#[derive(Args, Clone, Default)]
struct CommonArgs {
    /// key=value file supplying defaults for any flag
    #[arg(long)]
    config: Option<PathBuf>,
    /// unit-level CSV (domain_id, x1_*, x2_*, z1,z2 or y1,y2)
    #[arg(long)]
    data: Option<PathBuf>,
    /// aggregated counts CSV (domain_id, pattern_id, N_dt)
    #[arg(long)]
    aux: Option<PathBuf>,
    /// covariate pattern CSV (pattern_id, x1_*, x2_*)
    #[arg(long)]
    patterns: Option<PathBuf>,
    /// response transformation: identity | log
    #[arg(long)]
    transform: Option<String>,
    /// comma list of targets among Z1,Z2,A,R
    #[arg(long)]
    targets: Option<String>,
    /// Monte Carlo copies per EBP
    #[arg(long = "L")]
    copies: Option<usize>,
    /// bootstrap replicates
    #[arg(long = "B")]
    replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// worker threads (0 = all cores); results do not depend on this
    #[arg(long)]
    threads: Option<usize>,
    /// output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// number of domains (simulations)
    #[arg(long = "D")]
    domains: Option<usize>,
    /// per-domain sample size (simulations)
    #[arg(long = "nd")]
    sample_size: Option<usize>,
    /// per-domain population size (simulations)
    #[arg(long = "Nd")]
    population_size: Option<usize>,
    /// outer iterations (simulations)
    #[arg(long = "I")]
    iterations: Option<usize>,
    /// iterations of the reference run feeding the sim2 MSE table
    #[arg(long = "ref-I")]
    ref_iterations: Option<usize>,
    /// comma list of bootstrap sizes for sim2
    #[arg(long = "B-grid")]
    b_grid: Option<String>,
    /// keep the fitted model fixed inside bootstrap replicates
    #[arg(long)]
    no_refit: bool,
}

impl CommonArgs {
    /// Fills unset flags from the `key=value` config file, if any.
    fn merge_config(&mut self) -> Result<()> {
        let Some(path) = self.config.clone() else {
            return Ok(());
        };
        let text = fs::read_to_string(&path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut kv = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("{}: line {}: expected key=value", path.display(), lineno + 1);
            };
            kv.insert(key.trim().to_string(), value.trim().to_string());
        }
        let parse_usize = |v: &str, key: &str| -> Result<usize> {
            v.parse().with_context(|| format!("config key {key} must be an integer"))
        };
        for (key, value) in kv {
            match key.as_str() {
                "data" => self.data.get_or_insert(PathBuf::from(value)),
                "aux" => self.aux.get_or_insert(PathBuf::from(value)),
                "patterns" => self.patterns.get_or_insert(PathBuf::from(value)),
                "out" => self.out.get_or_insert(PathBuf::from(value)),
                "transform" => {
                    self.transform.get_or_insert(value);
                    continue;
                }
                "targets" => {
                    self.targets.get_or_insert(value);
                    continue;
                }
                "B-grid" => {
                    self.b_grid.get_or_insert(value);
                    continue;
                }
                "L" => {
                    self.copies.get_or_insert(parse_usize(&value, "L")?);
                    continue;
                }
                "B" => {
                    self.replicates.get_or_insert(parse_usize(&value, "B")?);
                    continue;
                }
                "seed" => {
                    self.seed
                        .get_or_insert(value.parse().context("config key seed must be an integer")?);
                    continue;
                }
                "threads" => {
                    self.threads.get_or_insert(parse_usize(&value, "threads")?);
                    continue;
                }
                "D" => {
                    self.domains.get_or_insert(parse_usize(&value, "D")?);
                    continue;
                }
                "nd" => {
                    self.sample_size.get_or_insert(parse_usize(&value, "nd")?);
                    continue;
                }
                "Nd" => {
                    self.population_size.get_or_insert(parse_usize(&value, "Nd")?);
                    continue;
                }
                "I" => {
                    self.iterations.get_or_insert(parse_usize(&value, "I")?);
                    continue;
                }
                "ref-I" => {
                    self.ref_iterations.get_or_insert(parse_usize(&value, "ref-I")?);
                    continue;
                }
                "no-refit" => {
                    if value == "true" {
                        self.no_refit = true;
                    }
                    continue;
                }
                other => bail!("unknown config key {other:?}"),
            };
        }
        Ok(())
    }

    fn transform(&self) -> Result<Transform> {
        match &self.transform {
            Some(name) => Ok(Transform::parse(name)?),
            None => Ok(Transform::Log),
        }
    }

    fn targets(&self) -> Result<Vec<TargetSpec>> {
        match &self.targets {
            None => Ok(vec![
                TargetSpec::Mean1,
                TargetSpec::Mean2,
                TargetSpec::MeanOfRatios,
                TargetSpec::RatioOfMeans,
            ]),
            Some(list) => list
                .split(',')
                .map(|s| Ok(TargetSpec::parse(s.trim())?))
                .collect(),
        }
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        Ok(dir)
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(1)
    }

    fn data_path(&self) -> Result<&Path> {
        self.data.as_deref().context("--data is required")
    }

    fn init_threads(&self) -> Result<()> {
        if let Some(t) = self.threads {
            if t > 0 {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(t)
                    .build_global()
                    .context("thread pool already initialized")?;
            }
        }
        Ok(())
    }
}

/// Loads sample, patterns and counts; registers count-only domains as
/// out-of-sample (n_d = 0) domains.
fn load_inputs(args: &CommonArgs) -> Result<(SampleData, bner::model::AuxCounts, Transform)> {
    let transform = args.transform()?;
    let mut sample = io::load_unit_csv(args.data_path()?, transform)?;
    let patterns_path = args.patterns.as_deref().context("--patterns is required")?;
    let aux_path = args.aux.as_deref().context("--aux is required")?;
    let (ids, patterns) = io::load_patterns_csv(patterns_path)?;
    if !patterns.is_empty()
        && (patterns[0].x1.len() != sample.p1() || patterns[0].x2.len() != sample.p2())
    {
        bail!(
            "pattern file covariate layout ({}, {}) does not match the unit file ({}, {})",
            patterns[0].x1.len(),
            patterns[0].x2.len(),
            sample.p1(),
            sample.p2()
        );
    }
    let aux = io::load_aux_csv(aux_path, &ids, &patterns, &sample)?;
    for id in aux.domain_ids() {
        sample.register_domain(id);
    }
    Ok((sample, aux, transform))
}

fn cmd_fit(args: &CommonArgs) -> Result<()> {
    let transform = args.transform()?;
    let sample = io::load_unit_csv(args.data_path()?, transform)?;
    let out = args.out_dir()?;
    let fitted = fit_reml(&sample, &FitOptions::default())?;
    for w in &fitted.warnings {
        eprintln!("warning: {w}");
    }
    io::write_fit_csv(&out.join("fit.csv"), &fitted)?;
    io::write_blups_csv(&out.join("blups.csv"), &sample, &fitted.blups)?;
    println!(
        "fit: converged={} iterations={} projections={} reml_loglik={:.6}",
        fitted.converged, fitted.iterations, fitted.projections, fitted.reml_loglik
    );
    println!("wrote {} and {}", out.join("fit.csv").display(), out.join("blups.csv").display());
    Ok(())
}

fn cmd_predict(args: &CommonArgs) -> Result<()> {
    let (sample, aux, transform) = load_inputs(args)?;
    let out = args.out_dir()?;
    let fitted = fit_reml(&sample, &FitOptions::default())?;
    for w in &fitted.warnings {
        eprintln!("warning: {w}");
    }
    if !fitted.converged {
        eprintln!("warning: REML did not converge; predictions use the best iterate");
    }
    let mc = McOptions {
        copies: args.copies.unwrap_or(200),
        seed: args.seed(),
        antithetic: false,
    };
    let targets = [
        TargetSpec::Mean1,
        TargetSpec::Mean2,
        TargetSpec::MeanOfRatios,
        TargetSpec::RatioOfMeans,
    ];
    let ebp = ebp_estimates(&fitted.params, &sample, &aux, transform, &targets, &mc)?;
    let direct = direct_estimates(&sample, transform)?;
    let rows: Vec<io::PredictRow> = aux
        .domain_ids()
        .iter()
        .enumerate()
        .map(|(d, id)| {
            let sample_idx = sample.domain_index(id).expect("registered above");
            io::PredictRow {
                domain_id: id.clone(),
                n_d: sample.domains()[sample_idx].n(),
                n_pop: aux.domain_size(d),
                direct: direct[sample_idx],
                ebp_mean1: ebp[0][d],
                ebp_mean2: ebp[1][d],
                ebp_ratio: ebp[3][d],
                ebp_mean_of_ratios: ebp[2][d],
            }
        })
        .collect();
    io::write_predict_csv(&out.join("predict.csv"), &rows)?;
    println!("wrote {}", out.join("predict.csv").display());
    Ok(())
}

fn cmd_mse(args: &CommonArgs) -> Result<()> {
    let (sample, aux, transform) = load_inputs(args)?;
    let out = args.out_dir()?;
    let targets = args.targets()?;
    let fitted = fit_reml(&sample, &FitOptions::default())?;
    for w in &fitted.warnings {
        eprintln!("warning: {w}");
    }
    let opts = BootstrapOptions {
        replicates: args.replicates.unwrap_or(400),
        copies: args.copies.unwrap_or(200),
        seed: args.seed(),
        refit: !args.no_refit,
        fit: FitOptions::default(),
    };
    let report = bootstrap_mse(&fitted, &sample, &aux, &targets, transform, &opts)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    io::write_mse_csv(&out.join("mse.csv"), &report)?;
    io::write_mse_diagnostics_csv(&out.join("mse_diagnostics.csv"), &report)?;
    println!(
        "bootstrap: B={} failed={} unreliable={}",
        report.attempted_replicates, report.failed_replicates, report.unreliable
    );
    println!("wrote {} and {}", out.join("mse.csv").display(), out.join("mse_diagnostics.csv").display());
    Ok(())
}

fn sim1_config(args: &CommonArgs) -> Sim1Config {
    let mut config = Sim1Config::paper(
        args.domains.unwrap_or(50),
        args.sample_size.unwrap_or(10),
        args.seed(),
    );
    if let Some(n) = args.population_size {
        config.units_per_domain = n;
    }
    if let Some(i) = args.iterations {
        config.iterations = i;
    }
    if let Some(l) = args.copies {
        config.copies = l;
    }
    config
}

fn cmd_sim1(args: &CommonArgs) -> Result<()> {
    let out = args.out_dir()?;
    let config = sim1_config(args);
    let result = run_sim1(&config)?;
    let mut rows = Vec::new();
    for (label, table) in result.target_labels.iter().zip(&result.tables) {
        rows.extend(io::metric_rows(label, "", table));
    }
    io::write_sim_metrics_csv(
        &out.join("sim1_metrics.csv"),
        config.domains,
        config.sample_size,
        &rows,
    )?;
    println!(
        "sim1: D={} n_d={} I={} skipped={}",
        config.domains, config.sample_size, config.iterations, result.skipped_iterations
    );
    for (label, table) in result.target_labels.iter().zip(&result.tables) {
        println!(
            "  {label}: RE={:.6} RRE%={:.4} RAB%={:.4}",
            table.re, table.rre_pct, table.rab_pct
        );
    }
    println!("wrote {}", out.join("sim1_metrics.csv").display());
    Ok(())
}

fn cmd_sim2(args: &CommonArgs) -> Result<()> {
    let out = args.out_dir()?;
    let base = sim1_config(args);
    let b_grid: Vec<usize> = match &args.b_grid {
        None => vec![50, 100, 200, 400],
        Some(list) => list
            .split(',')
            .map(|s| s.trim().parse().context("B-grid entries must be integers"))
            .collect::<Result<_>>()?,
    };
    let mut reference_config = base.clone();
    reference_config.iterations = args.ref_iterations.unwrap_or(200);
    println!(
        "sim2: reference run at I={} ...",
        reference_config.iterations
    );
    let reference = run_sim1(&reference_config)?;
    let config = Sim2Config {
        base,
        b_grid,
        reference_mse: reference
            .tables
            .iter()
            .map(|t| t.re_d.iter().map(|r| r * r).collect())
            .collect(),
    };
    let result = run_sim2(&config)?;

    let mut rows = Vec::new();
    for (b, tables) in &result.per_b {
        for (label, table) in result.target_labels.iter().zip(tables) {
            rows.extend(io::metric_rows(label, &format!("[B={b}]"), table));
        }
    }
    io::write_sim_metrics_csv(
        &out.join("sim2_metrics.csv"),
        config.base.domains,
        config.base.sample_size,
        &rows,
    )?;
    for (ti, label) in result.target_labels.iter().enumerate() {
        let series: Vec<(usize, &bner::sim::MetricsTable)> = result
            .per_b
            .iter()
            .map(|(b, tables)| (*b, &tables[ti]))
            .collect();
        io::write_boxplot_csv(
            &out.join(format!("sim2_boxplot_{label}.csv")),
            &result.domain_ids,
            &series,
        )?;
    }
    println!(
        "sim2: D={} n_d={} I={} skipped={}",
        config.base.domains, config.base.sample_size, config.base.iterations,
        result.skipped_iterations
    );
    for (b, tables) in &result.per_b {
        for (label, table) in result.target_labels.iter().zip(tables) {
            println!("  B={b} {label}: RRE%={:.4} RAB%={:.4}", table.rre_pct, table.rab_pct);
        }
    }
    println!("wrote {}", out.join("sim2_metrics.csv").display());
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let (Command::Fit(args)
    | Command::Predict(args)
    | Command::Mse(args)
    | Command::Sim1(args)
    | Command::Sim2(args)) = &cli.command;
    let mut args = args.clone();
    args.merge_config()?;
    args.init_threads()?;
    match &cli.command {
        Command::Fit(_) => cmd_fit(&args),
        Command::Predict(_) => cmd_predict(&args),
        Command::Mse(_) => cmd_mse(&args),
        Command::Sim1(_) => cmd_sim1(&args),
        Command::Sim2(_) => cmd_sim2(&args),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let payload = serde_json::json!({
                "error": err.to_string(),
                "chain": err.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
            });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}
