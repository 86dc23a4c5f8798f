//! CSV data interchange.
//!
//! Three input schemas:
//!
//! * unit file: `domain_id, x1_1..x1_p1, x2_1..x2_p2, z1, z2` (original
//!   scale; the configured transform is applied on load) or the same with
//!   `y1, y2` (already transformed),
//! * pattern file: `pattern_id, x1_1..x1_p1, x2_1..x2_p2`,
//! * aggregated counts: `domain_id, pattern_id, N_dt`.
//!
//! All numbers are written with 17 significant digits so that written files
//! parse back to identical values.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::cov::Vec2;
use crate::bootstrap::MseReport;
use crate::ebp::DirectEstimates;
use crate::error::{Error, Result};
use crate::model::{AuxCounts, CovariatePattern, SampleData, Transform, UnitRecord};
use crate::reml::FittedModel;
use crate::sim::MetricsTable;

fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

fn data_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Data {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Collects per-row diagnostics and reports them all at once.
struct RowErrors {
    lines: Vec<String>,
}

const MAX_ROW_ERRORS: usize = 20;

impl RowErrors {
    fn new() -> Self {
        RowErrors { lines: Vec::new() }
    }

    fn push(&mut self, line: u64, msg: impl Into<String>) {
        if self.lines.len() < MAX_ROW_ERRORS {
            self.lines.push(format!("line {line}: {}", msg.into()));
        }
    }

    fn check(self, path: &Path) -> Result<()> {
        if self.lines.is_empty() {
            Ok(())
        } else {
            Err(data_err(path, self.lines.join("; ")))
        }
    }
}

fn parse_f64(field: &str) -> std::result::Result<f64, String> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| format!("non-numeric field {field:?}"))
}

/// Parsed layout of a covariate header block: count of `x1_*` and `x2_*`
/// columns starting at `offset`.
fn parse_covariate_header(
    headers: &[&str],
    offset: usize,
    path: &Path,
) -> Result<(usize, usize)> {
    let mut p1 = 0;
    while offset + p1 < headers.len() && headers[offset + p1] == format!("x1_{}", p1 + 1) {
        p1 += 1;
    }
    let mut p2 = 0;
    while offset + p1 + p2 < headers.len() && headers[offset + p1 + p2] == format!("x2_{}", p2 + 1)
    {
        p2 += 1;
    }
    if p1 == 0 || p2 == 0 {
        return Err(data_err(
            path,
            "header must list x1_1..x1_p1 followed by x2_1..x2_p2",
        ));
    }
    Ok((p1, p2))
}

/// Loads a unit file. `z` columns are positive originals to which the
/// transform is applied; `y` columns are taken as already transformed.
pub fn load_unit_csv(path: &Path, transform: Transform) -> Result<SampleData> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let header_refs: Vec<&str> = headers.iter().map(|s| s.as_str()).collect();
    if header_refs.first() != Some(&"domain_id") {
        return Err(data_err(path, "first column must be domain_id"));
    }
    let (p1, p2) = parse_covariate_header(&header_refs, 1, path)?;
    let value_cols = &header_refs[1 + p1 + p2..];
    let original_scale = match value_cols {
        ["z1", "z2"] => true,
        ["y1", "y2"] => false,
        other => {
            return Err(data_err(
                path,
                format!("expected trailing z1,z2 or y1,y2 columns, found {other:?}"),
            ))
        }
    };

    let mut errors = RowErrors::new();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != 3 + p1 + p2 {
            errors.push(line, format!("expected {} fields, found {}", 3 + p1 + p2, row.len()));
            continue;
        }
        let mut fields = row.iter();
        let domain_id = fields.next().expect("length checked").trim().to_string();
        let mut xs = Vec::with_capacity(p1 + p2);
        let mut bad = false;
        for field in fields.by_ref().take(p1 + p2) {
            match parse_f64(field) {
                Ok(v) if v.is_finite() => xs.push(v),
                Ok(v) => {
                    errors.push(line, format!("non-finite covariate {v}"));
                    bad = true;
                    break;
                }
                Err(e) => {
                    errors.push(line, e);
                    bad = true;
                    break;
                }
            }
        }
        if bad {
            continue;
        }
        let v1 = fields.next().map(parse_f64).expect("length checked");
        let v2 = fields.next().map(parse_f64).expect("length checked");
        let (v1, v2) = match (v1, v2) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                errors.push(line, e);
                continue;
            }
        };
        let y = if original_scale {
            match transform.apply(Vec2::new(v1, v2)) {
                Ok(y) => y,
                Err(e) => {
                    errors.push(line, e.to_string());
                    continue;
                }
            }
        } else {
            Vec2::new(v1, v2)
        };
        if !y.x.is_finite() || !y.y.is_finite() {
            errors.push(line, "non-finite response");
            continue;
        }
        records.push(UnitRecord {
            domain_id,
            x1: xs[..p1].to_vec(),
            x2: xs[p1..].to_vec(),
            y1: y.x,
            y2: y.y,
        });
    }
    errors.check(path)?;
    SampleData::from_records(p1, p2, records)
}

/// Which value columns a unit file carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitValueMode {
    /// `z1, z2`: original scale, back-transformed from the stored responses.
    Original,
    /// `y1, y2`: transformed scale, written as stored.
    Transformed,
}

pub fn write_unit_csv(
    path: &Path,
    sample: &SampleData,
    mode: UnitValueMode,
    transform: Transform,
) -> Result<()> {
    let mut out = String::new();
    out.push_str("domain_id");
    for i in 1..=sample.p1() {
        let _ = write!(out, ",x1_{i}");
    }
    for i in 1..=sample.p2() {
        let _ = write!(out, ",x2_{i}");
    }
    match mode {
        UnitValueMode::Original => out.push_str(",z1,z2\n"),
        UnitValueMode::Transformed => out.push_str(",y1,y2\n"),
    }
    for dom in sample.domains() {
        for unit in &dom.units {
            out.push_str(&dom.id);
            for v in unit.x1.iter().chain(unit.x2.iter()) {
                let _ = write!(out, ",{}", fmt_f(*v));
            }
            let vals = match mode {
                UnitValueMode::Original => transform.inverse(unit.y)?,
                UnitValueMode::Transformed => unit.y,
            };
            let _ = writeln!(out, ",{},{}", fmt_f(vals.x), fmt_f(vals.y));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads the pattern dictionary.
pub fn load_patterns_csv(path: &Path) -> Result<(Vec<String>, Vec<CovariatePattern>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let header_refs: Vec<&str> = headers.iter().map(|s| s.as_str()).collect();
    if header_refs.first() != Some(&"pattern_id") {
        return Err(data_err(path, "first column must be pattern_id"));
    }
    let (p1, p2) = parse_covariate_header(&header_refs, 1, path)?;
    if header_refs.len() != 1 + p1 + p2 {
        return Err(data_err(path, "unexpected trailing columns in pattern file"));
    }
    let mut errors = RowErrors::new();
    let mut ids = Vec::new();
    let mut patterns = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != 1 + p1 + p2 {
            errors.push(line, format!("expected {} fields, found {}", 1 + p1 + p2, row.len()));
            continue;
        }
        let id = row.get(0).expect("length checked").trim().to_string();
        if ids.contains(&id) {
            errors.push(line, format!("duplicate pattern id {id:?}"));
            continue;
        }
        let mut xs = Vec::with_capacity(p1 + p2);
        let mut bad = false;
        for field in row.iter().skip(1) {
            match parse_f64(field) {
                Ok(v) if v.is_finite() => xs.push(v),
                _ => {
                    errors.push(line, format!("bad covariate field {field:?}"));
                    bad = true;
                    break;
                }
            }
        }
        if bad {
            continue;
        }
        ids.push(id);
        patterns.push(CovariatePattern {
            x1: xs[..p1].to_vec(),
            x2: xs[p1..].to_vec(),
        });
    }
    errors.check(path)?;
    if patterns.is_empty() {
        return Err(data_err(path, "pattern file holds no patterns"));
    }
    Ok((ids, patterns))
}

pub fn write_patterns_csv(path: &Path, ids: &[String], patterns: &[CovariatePattern]) -> Result<()> {
    let (p1, p2) = (patterns[0].x1.len(), patterns[0].x2.len());
    let mut out = String::from("pattern_id");
    for i in 1..=p1 {
        let _ = write!(out, ",x1_{i}");
    }
    for i in 1..=p2 {
        let _ = write!(out, ",x2_{i}");
    }
    out.push('\n');
    for (id, pat) in ids.iter().zip(patterns) {
        out.push_str(id);
        for v in pat.x1.iter().chain(pat.x2.iter()) {
            let _ = write!(out, ",{}", fmt_f(*v));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads aggregated counts and validates them against the sample: sampled
/// domains must be covered, every sampled unit must match a pattern, and
/// `N_dt >= n_dt` throughout. Domains present here but absent from the
/// sample are legitimate out-of-sample (n_d = 0) domains.
pub fn load_aux_csv(
    path: &Path,
    pattern_ids: &[String],
    patterns: &[CovariatePattern],
    sample: &SampleData,
) -> Result<AuxCounts> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if headers != ["domain_id", "pattern_id", "N_dt"] {
        return Err(data_err(path, "header must be domain_id,pattern_id,N_dt"));
    }
    let mut errors = RowErrors::new();
    let mut domain_ids: Vec<String> = Vec::new();
    let mut counts: Vec<Vec<Option<u64>>> = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != 3 {
            errors.push(line, format!("expected 3 fields, found {}", row.len()));
            continue;
        }
        let domain = row.get(0).expect("checked").trim().to_string();
        let pattern = row.get(1).expect("checked").trim();
        let count = match row.get(2).expect("checked").trim().parse::<u64>() {
            Ok(c) => c,
            Err(_) => {
                errors.push(line, format!("N_dt must be a non-negative integer, got {:?}", row.get(2).unwrap()));
                continue;
            }
        };
        let t = match pattern_ids.iter().position(|p| p == pattern) {
            Some(t) => t,
            None => {
                errors.push(line, format!("unknown pattern id {pattern:?}"));
                continue;
            }
        };
        let d = match domain_ids.iter().position(|x| *x == domain) {
            Some(d) => d,
            None => {
                domain_ids.push(domain);
                counts.push(vec![None; pattern_ids.len()]);
                domain_ids.len() - 1
            }
        };
        if counts[d][t].is_some() {
            errors.push(line, format!("duplicate count for domain {:?} pattern {pattern:?}", domain_ids[d]));
            continue;
        }
        counts[d][t] = Some(count);
    }
    errors.check(path)?;
    if domain_ids.is_empty() {
        return Err(data_err(path, "aggregated count file holds no rows"));
    }
    let counts: Vec<Vec<u64>> = counts
        .into_iter()
        .map(|row| row.into_iter().map(|c| c.unwrap_or(0)).collect())
        .collect();
    let aux = AuxCounts::new(
        pattern_ids.to_vec(),
        patterns.to_vec(),
        domain_ids,
        counts,
    )?;
    aux.tabulate_sample(sample)?;
    Ok(aux)
}

pub fn write_aux_csv(path: &Path, aux: &AuxCounts) -> Result<()> {
    let mut out = String::from("domain_id,pattern_id,N_dt\n");
    for (d, id) in aux.domain_ids().iter().enumerate() {
        for (t, pid) in aux.pattern_ids().iter().enumerate() {
            let _ = writeln!(out, "{id},{pid},{}", aux.counts(d)[t]);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Result writers
// ---------------------------------------------------------------------------

/// Parameter table with Wald standard errors: the coefficient rows use the
/// GLS covariance, the variance-component rows the inverse Fisher
/// information, and the intervals are estimate +- 1.96 se.
pub fn write_fit_csv(path: &Path, fitted: &FittedModel) -> Result<()> {
    let mut out = String::from("parameter,estimate,std_error,ci_lower,ci_upper\n");
    let beta = &fitted.params.beta;
    let p1 = beta.beta1.len();
    let mut push_row = |name: &str, est: f64, se: f64| {
        let _ = writeln!(
            out,
            "{name},{},{},{},{}",
            fmt_f(est),
            fmt_f(se),
            fmt_f(est - 1.96 * se),
            fmt_f(est + 1.96 * se)
        );
    };
    for (i, b) in beta.beta1.iter().enumerate() {
        push_row(&format!("beta1_{}", i + 1), *b, fitted.beta_cov[(i, i)].max(0.0).sqrt());
    }
    for (i, b) in beta.beta2.iter().enumerate() {
        let j = p1 + i;
        push_row(&format!("beta2_{}", i + 1), *b, fitted.beta_cov[(j, j)].max(0.0).sqrt());
    }
    let theta = fitted.params.theta.as_array();
    let names = ["sigma2_u1", "sigma2_u2", "rho_u", "sigma2_e1", "sigma2_e2", "rho_e"];
    let info_inv = fitted.theta_fisher_info.clone().lu().try_inverse();
    for (k, name) in names.iter().enumerate() {
        let se = info_inv
            .as_ref()
            .map_or(f64::NAN, |inv| inv[(k, k)].max(0.0).sqrt());
        push_row(name, theta[k], se);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_blups_csv(path: &Path, sample: &SampleData, blups: &[Vec2]) -> Result<()> {
    let mut out = String::from("domain_id,n_d,u1,u2\n");
    for (dom, u) in sample.domains().iter().zip(blups) {
        let _ = writeln!(out, "{},{},{},{}", dom.id, dom.n(), fmt_f(u.x), fmt_f(u.y));
    }
    fs::write(path, out)?;
    Ok(())
}

/// One output row of the prediction pipeline.
#[derive(Debug, Clone)]
pub struct PredictRow {
    pub domain_id: String,
    pub n_d: usize,
    pub n_pop: u64,
    pub direct: Option<DirectEstimates>,
    /// EBPs in column order (Z1, Z2, R, A).
    pub ebp_mean1: f64,
    pub ebp_mean2: f64,
    pub ebp_ratio: f64,
    pub ebp_mean_of_ratios: f64,
}

pub fn write_predict_csv(path: &Path, rows: &[PredictRow]) -> Result<()> {
    let mut out =
        String::from("domain_id,n_d,N_d,dir1,ebp1,dir2,ebp2,Rdir,Rebp,Addir,Adebp\n");
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), fmt_f);
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.domain_id,
            r.n_d,
            r.n_pop,
            opt(r.direct.map(|d| d.mean1)),
            fmt_f(r.ebp_mean1),
            opt(r.direct.map(|d| d.mean2)),
            fmt_f(r.ebp_mean2),
            opt(r.direct.map(|d| d.ratio_of_means)),
            fmt_f(r.ebp_ratio),
            opt(r.direct.map(|d| d.mean_of_ratios)),
            fmt_f(r.ebp_mean_of_ratios),
        );
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_mse_csv(path: &Path, report: &MseReport) -> Result<()> {
    let mut out = String::from("domain_id,target,estimate,mse,rrmse_pct\n");
    for (ti, label) in report.target_labels.iter().enumerate() {
        for (d, id) in report.domain_ids.iter().enumerate() {
            let rr = report.rrmse_pct[ti][d].map_or_else(|| "NA".to_string(), fmt_f);
            let _ = writeln!(
                out,
                "{id},{label},{},{},{rr}",
                fmt_f(report.point_estimates[ti][d]),
                fmt_f(report.mse[ti][d]),
            );
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_mse_diagnostics_csv(path: &Path, report: &MseReport) -> Result<()> {
    let mut out = String::from("attempted_replicates,failed_replicates,unreliable\n");
    let _ = writeln!(
        out,
        "{},{},{}",
        report.attempted_replicates, report.failed_replicates, report.unreliable
    );
    fs::write(path, out)?;
    Ok(())
}

/// Long-format metric table: `D, n_d, target, metric, value`.
pub fn write_sim_metrics_csv(
    path: &Path,
    domains: usize,
    sample_size: usize,
    rows: &[(String, String, f64)],
) -> Result<()> {
    let mut out = String::from("D,n_d,target,metric,value\n");
    for (target, metric, value) in rows {
        let _ = writeln!(out, "{domains},{sample_size},{target},{metric},{}", fmt_f(*value));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Aggregate metric rows of one experiment table.
pub fn metric_rows(target: &str, suffix: &str, table: &MetricsTable) -> Vec<(String, String, f64)> {
    [
        ("RE", table.re),
        ("AB_sum", table.ab_sum),
        ("AB_mean", table.ab_mean),
        ("RRE_pct", table.rre_pct),
        ("RAB_pct", table.rab_pct),
    ]
    .into_iter()
    .map(|(name, value)| (target.to_string(), format!("{name}{suffix}"), value))
    .collect()
}

/// Per-domain boxplot series: `domain, B, RB_pct, RRE_pct`.
pub fn write_boxplot_csv(
    path: &Path,
    domain_ids: &[String],
    series: &[(usize, &MetricsTable)],
) -> Result<()> {
    let mut out = String::from("domain,B,RB_pct,RRE_pct\n");
    for (b, table) in series {
        for (d, id) in domain_ids.iter().enumerate() {
            let _ = writeln!(
                out,
                "{id},{b},{},{}",
                fmt_f(table.rb_d_pct[d]),
                fmt_f(table.rre_d_pct[d])
            );
        }
    }
    fs::write(path, out)?;
    Ok(())
}
