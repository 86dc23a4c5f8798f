//! Residual maximum likelihood estimation by Fisher scoring, the GLS
//! estimator of the regression coefficients (BLUE) and the predictors of the
//! domain random effects (BLUP).
//!
//! All per-domain algebra goes through the Woodbury identity
//!
//! ```text
//! V_ds^{-1} = V_es^{-1} - V_es^{-1} Z_ds (V_u^{-1} + n_d V_e^{-1})^{-1} Z_ds' V_es^{-1}
//! ```
//!
//! so only 2x2 inverses are ever formed, and through per-domain sufficient
//! statistics (covariate cross-products and response moments), so one scoring
//! iteration costs O(D p^2) regardless of the domain sample sizes.

use nalgebra::{DMatrix, DVector};

use crate::cov::{inv2, Mat2, Vec2};
use crate::error::{Error, Result};
use crate::model::{ModelParams, RegressionCoefficients, SampleData, VarianceComponents};

const VAR_FLOOR: f64 = 1e-10;
const RHO_BOUND: f64 = 1.0 - 1e-6;

/// Controls for the Fisher-scoring iteration.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Relative tolerance applied to both the parameter change and the
    /// score norm; both must pass for convergence.
    pub rel_tolerance: f64,
    pub step_halving_max: usize,
    pub init: InitStrategy,
}

#[derive(Debug, Clone)]
pub enum InitStrategy {
    /// One-way random-effects ANOVA moment estimators on OLS residuals.
    Moment,
    Fixed(VarianceComponents),
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iterations: 200,
            rel_tolerance: 1e-8,
            step_halving_max: 10,
            init: InitStrategy::Moment,
        }
    }
}

/// Result of a REML fit.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub params: ModelParams,
    /// GLS covariance of the stacked coefficient vector, (X' V^{-1} X)^{-1}.
    pub beta_cov: DMatrix<f64>,
    /// Expected (REML) information of the six covariance parameters.
    pub theta_fisher_info: DMatrix<f64>,
    pub reml_loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Number of feasibility projections applied during scoring.
    pub projections: usize,
    /// Predicted random effects, aligned with the sample's domain order.
    pub blups: Vec<Vec2>,
    pub warnings: Vec<String>,
}

impl FittedModel {
    /// Wraps externally known parameters in a `FittedModel`, evaluating the
    /// likelihood, information and BLUPs at those parameters without
    /// iterating. Used for known-parameter workflows and oracle tests.
    pub fn from_params(params: ModelParams, sample: &SampleData) -> Result<Self> {
        let stats = SuffStats::new(sample);
        let (ll, gls) = loglik_gls(&params.theta, &stats)?;
        let (_, info) = score_info(&params.theta, &stats, &gls);
        let blups = blup_random_effects(&params, sample);
        Ok(FittedModel {
            params,
            beta_cov: gls.beta_cov,
            theta_fisher_info: info,
            reml_loglik: ll,
            converged: true,
            iterations: 0,
            projections: 0,
            blups,
            warnings: Vec::new(),
        })
    }
}

// ---------------------------------------------------------------------------
// Sufficient statistics
// ---------------------------------------------------------------------------

struct DomainStats {
    n: usize,
    /// Column sums of the covariate rows.
    sx1: DVector<f64>,
    sx2: DVector<f64>,
    /// Cross products sum_j x1' x1, x1' x2, x2' x2.
    s11: DMatrix<f64>,
    s12: DMatrix<f64>,
    s22: DMatrix<f64>,
    /// Outer products of the column sums.
    o11: DMatrix<f64>,
    o12: DMatrix<f64>,
    o22: DMatrix<f64>,
    /// Response sums and second moments.
    sy: Vec2,
    syy: [f64; 3],
    sx1y1: DVector<f64>,
    sx1y2: DVector<f64>,
    sx2y1: DVector<f64>,
    sx2y2: DVector<f64>,
}

struct SuffStats {
    p1: usize,
    p2: usize,
    n_units: usize,
    domains: Vec<DomainStats>,
}

impl SuffStats {
    fn new(sample: &SampleData) -> Self {
        let (p1, p2) = (sample.p1(), sample.p2());
        let domains = sample
            .domains()
            .iter()
            .map(|dom| {
                let mut st = DomainStats {
                    n: dom.n(),
                    sx1: DVector::zeros(p1),
                    sx2: DVector::zeros(p2),
                    s11: DMatrix::zeros(p1, p1),
                    s12: DMatrix::zeros(p1, p2),
                    s22: DMatrix::zeros(p2, p2),
                    o11: DMatrix::zeros(p1, p1),
                    o12: DMatrix::zeros(p1, p2),
                    o22: DMatrix::zeros(p2, p2),
                    sy: Vec2::zeros(),
                    syy: [0.0; 3],
                    sx1y1: DVector::zeros(p1),
                    sx1y2: DVector::zeros(p1),
                    sx2y1: DVector::zeros(p2),
                    sx2y2: DVector::zeros(p2),
                };
                for u in &dom.units {
                    for i in 0..p1 {
                        st.sx1[i] += u.x1[i];
                        st.sx1y1[i] += u.x1[i] * u.y.x;
                        st.sx1y2[i] += u.x1[i] * u.y.y;
                        for j in 0..p1 {
                            st.s11[(i, j)] += u.x1[i] * u.x1[j];
                        }
                        for j in 0..p2 {
                            st.s12[(i, j)] += u.x1[i] * u.x2[j];
                        }
                    }
                    for i in 0..p2 {
                        st.sx2[i] += u.x2[i];
                        st.sx2y1[i] += u.x2[i] * u.y.x;
                        st.sx2y2[i] += u.x2[i] * u.y.y;
                        for j in 0..p2 {
                            st.s22[(i, j)] += u.x2[i] * u.x2[j];
                        }
                    }
                    st.sy += u.y;
                    st.syy[0] += u.y.x * u.y.x;
                    st.syy[1] += u.y.x * u.y.y;
                    st.syy[2] += u.y.y * u.y.y;
                }
                st.o11 = &st.sx1 * st.sx1.transpose();
                st.o12 = &st.sx1 * st.sx2.transpose();
                st.o22 = &st.sx2 * st.sx2.transpose();
                st
            })
            .collect::<Vec<_>>();
        let n_units = domains.iter().map(|d| d.n).sum();
        SuffStats {
            p1,
            p2,
            n_units,
            domains,
        }
    }

    fn residual_moments(&self, d: &DomainStats, b1: &DVector<f64>, b2: &DVector<f64>) -> ResidualMoments {
        let e1_sq = d.syy[0] - 2.0 * b1.dot(&d.sx1y1) + (b1.transpose() * &d.s11 * b1)[(0, 0)];
        let e12 = d.syy[1] - b1.dot(&d.sx1y2) - b2.dot(&d.sx2y1)
            + (b1.transpose() * &d.s12 * b2)[(0, 0)];
        let e2_sq = d.syy[2] - 2.0 * b2.dot(&d.sx2y2) + (b2.transpose() * &d.s22 * b2)[(0, 0)];
        let s_eps = Vec2::new(d.sy.x - b1.dot(&d.sx1), d.sy.y - b2.dot(&d.sx2));
        ResidualMoments {
            e1_sq,
            e12,
            e2_sq,
            s_eps,
        }
    }
}

/// Per-domain residual second moments at a given coefficient vector.
struct ResidualMoments {
    e1_sq: f64,
    e12: f64,
    e2_sq: f64,
    s_eps: Vec2,
}

impl ResidualMoments {
    /// sum_j eps_j' A eps_j for a 2x2 matrix A.
    fn quad(&self, a: &Mat2) -> f64 {
        a[(0, 0)] * self.e1_sq + (a[(0, 1)] + a[(1, 0)]) * self.e12 + a[(1, 1)] * self.e2_sq
    }
}

// ---------------------------------------------------------------------------
// Per-theta context
// ---------------------------------------------------------------------------

struct ThetaCtx {
    w: Mat2,
    log_det_ve: f64,
    /// Derivatives of V_u and V_e in theta order.
    d_u: [Mat2; 3],
    d_e: [Mat2; 3],
    /// (n, per-domain 2x2 pieces), cached by distinct sample size.
    dom: Vec<(usize, DomCtx)>,
}

#[derive(Clone, Copy)]
struct DomCtx {
    /// W M W with M = (V_u^{-1} + n V_e^{-1})^{-1}
    h: Mat2,
    /// W - n W M W = Z' V_ds^{-1} Z / n-free factor
    q: Mat2,
    /// log det(I_2 + n W V_u)
    log_det_cap: f64,
}

impl ThetaCtx {
    fn new(theta: &VarianceComponents, stats: &SuffStats) -> Result<Self> {
        let v_u = theta.v_u();
        let v_e = theta.v_e();
        let w = inv2(&v_e)?;
        let v_u_inv = inv2(&v_u)?;
        let log_det_ve = crate::cov::det2(&v_e).ln();
        let mut ctx = ThetaCtx {
            w,
            log_det_ve,
            d_u: [theta.d_v_u(0), theta.d_v_u(1), theta.d_v_u(2)],
            d_e: [theta.d_v_e(0), theta.d_v_e(1), theta.d_v_e(2)],
            dom: Vec::new(),
        };
        for d in &stats.domains {
            if d.n == 0 || ctx.dom.iter().any(|(n, _)| *n == d.n) {
                continue;
            }
            let nf = d.n as f64;
            let m = inv2(&(v_u_inv + w * nf))?;
            let h = w * m * w;
            let q = w - h * nf;
            let cap = Mat2::identity() + w * v_u * nf;
            let det_cap = crate::cov::det2(&cap);
            if det_cap <= 0.0 {
                return Err(Error::NotPositiveDefinite(format!(
                    "capacitance determinant {det_cap} for n_d = {}",
                    d.n
                )));
            }
            ctx.dom.push((
                d.n,
                DomCtx {
                    h,
                    q,
                    log_det_cap: det_cap.ln(),
                },
            ));
        }
        Ok(ctx)
    }

    fn dom(&self, n: usize) -> &DomCtx {
        &self
            .dom
            .iter()
            .find(|(k, _)| *k == n)
            .expect("domain context prepared for every sample size")
            .1
    }
}

// ---------------------------------------------------------------------------
// GLS
// ---------------------------------------------------------------------------

struct Gls {
    beta: DVector<f64>,
    beta_cov: DMatrix<f64>,
    log_det_a: f64,
}

/// Adds `factor * [a11*C11, a12*C12; a21*C12', a22*C22]` to `out`.
fn add_block(
    out: &mut DMatrix<f64>,
    p1: usize,
    a: &Mat2,
    c11: &DMatrix<f64>,
    c12: &DMatrix<f64>,
    c22: &DMatrix<f64>,
    factor: f64,
) {
    let p2 = out.nrows() - p1;
    for i in 0..p1 {
        for j in 0..p1 {
            out[(i, j)] += factor * a[(0, 0)] * c11[(i, j)];
        }
        for j in 0..p2 {
            out[(i, p1 + j)] += factor * a[(0, 1)] * c12[(i, j)];
        }
    }
    for i in 0..p2 {
        for j in 0..p1 {
            out[(p1 + i, j)] += factor * a[(1, 0)] * c12[(j, i)];
        }
        for j in 0..p2 {
            out[(p1 + i, p1 + j)] += factor * a[(1, 1)] * c22[(i, j)];
        }
    }
}

fn gls_normal_equations(ctx: &ThetaCtx, stats: &SuffStats) -> (DMatrix<f64>, DVector<f64>) {
    let p1 = stats.p1;
    let p = stats.p1 + stats.p2;
    let mut a = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    for d in &stats.domains {
        if d.n == 0 {
            continue;
        }
        let dc = ctx.dom(d.n);
        let w = &ctx.w;
        add_block(&mut a, p1, w, &d.s11, &d.s12, &d.s22, 1.0);
        add_block(&mut a, p1, &dc.h, &d.o11, &d.o12, &d.o22, -1.0);
        // X' W y part
        for i in 0..p1 {
            b[i] += w[(0, 0)] * d.sx1y1[i] + w[(0, 1)] * d.sx1y2[i];
        }
        for i in 0..stats.p2 {
            b[p1 + i] += w[(1, 0)] * d.sx2y1[i] + w[(1, 1)] * d.sx2y2[i];
        }
        // - S_X' H S_y part
        let hy = dc.h * d.sy;
        for i in 0..p1 {
            b[i] -= d.sx1[i] * hy.x;
        }
        for i in 0..stats.p2 {
            b[p1 + i] -= d.sx2[i] * hy.y;
        }
    }
    (a, b)
}

fn solve_gls(ctx: &ThetaCtx, stats: &SuffStats) -> Result<Gls> {
    let p = stats.p1 + stats.p2;
    if stats.n_units * 2 < p || stats.n_units == 0 {
        return Err(Error::RankDeficient(format!(
            "{} sampled units cannot identify {p} coefficients",
            stats.n_units
        )));
    }
    let (a, b) = gls_normal_equations(ctx, stats);
    let eig = a.clone().symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max_eig > 0.0) || min_eig <= 1e-10 * max_eig {
        return Err(Error::RankDeficient(format!(
            "normal matrix singular within tolerance: eigenvalue range [{min_eig:e}, {max_eig:e}]"
        )));
    }
    let mut log_det_a = 0.0;
    let mut inv_diag = DVector::zeros(p);
    for i in 0..p {
        log_det_a += eig.eigenvalues[i].ln();
        inv_diag[i] = 1.0 / eig.eigenvalues[i];
    }
    let beta_cov = &eig.eigenvectors * DMatrix::from_diagonal(&inv_diag) * eig.eigenvectors.transpose();
    let beta = &beta_cov * b;
    Ok(Gls {
        beta,
        beta_cov,
        log_det_a,
    })
}

/// GLS estimator of the regression coefficients with its covariance matrix,
/// `beta = (X' V^{-1} X)^{-1} X' V^{-1} y`.
pub fn gls_beta(
    theta: &VarianceComponents,
    sample: &SampleData,
) -> Result<(RegressionCoefficients, DMatrix<f64>)> {
    theta.validate()?;
    let stats = SuffStats::new(sample);
    let ctx = ThetaCtx::new(theta, &stats)?;
    let gls = solve_gls(&ctx, &stats)?;
    let beta = RegressionCoefficients::from_stacked(gls.beta.as_slice(), sample.p1())?;
    Ok((beta, gls.beta_cov))
}

// ---------------------------------------------------------------------------
// REML log-likelihood, score and expected information
// ---------------------------------------------------------------------------

fn loglik_at(ctx: &ThetaCtx, stats: &SuffStats, gls: &Gls) -> f64 {
    let b1 = DVector::from_column_slice(&gls.beta.as_slice()[..stats.p1]);
    let b2 = DVector::from_column_slice(&gls.beta.as_slice()[stats.p1..]);
    let mut log_det_v = 0.0;
    let mut quad = 0.0;
    for d in &stats.domains {
        if d.n == 0 {
            continue;
        }
        let dc = ctx.dom(d.n);
        log_det_v += d.n as f64 * ctx.log_det_ve + dc.log_det_cap;
        let res = stats.residual_moments(d, &b1, &b2);
        quad += res.quad(&ctx.w) - (dc.h * res.s_eps).dot(&res.s_eps);
    }
    let n_obs = 2.0 * stats.n_units as f64;
    let p = (stats.p1 + stats.p2) as f64;
    -0.5 * (log_det_v + gls.log_det_a + quad + (n_obs - p) * (2.0 * std::f64::consts::PI).ln())
}

fn loglik_gls(theta: &VarianceComponents, stats: &SuffStats) -> Result<(f64, Gls)> {
    let ctx = ThetaCtx::new(theta, stats)?;
    let gls = solve_gls(&ctx, stats)?;
    Ok((loglik_at(&ctx, stats, &gls), gls))
}

/// Residual log-likelihood
/// `-0.5 [log|V| + log|X'V^{-1}X| + y'Py + (n - p) log 2 pi]`,
/// with `log|V|` accumulated per domain through the determinant identity
/// `|V_ds| = |V_e|^{n_d} |I_2 + n_d V_e^{-1} V_u|`.
pub fn reml_loglik(theta: &VarianceComponents, sample: &SampleData) -> Result<f64> {
    theta.validate()?;
    let stats = SuffStats::new(sample);
    loglik_gls(theta, &stats).map(|(ll, _)| ll)
}

fn tr_prod(a: &Mat2, b: &Mat2) -> f64 {
    a[(0, 0)] * b[(0, 0)] + a[(0, 1)] * b[(1, 0)] + a[(1, 0)] * b[(0, 1)] + a[(1, 1)] * b[(1, 1)]
}

fn quad_form(a: &Mat2, v: &Vec2) -> f64 {
    (a * v).dot(v)
}

fn pair_index(k: usize, l: usize) -> usize {
    // upper-triangle index for k <= l over 6 parameters
    k * 6 - k * (k + 1) / 2 + l
}

/// Analytic REML score and expected information at `theta`.
///
/// The score is `s_k = -1/2 [tr(P dV_k) - y'P dV_k P y]` and the information
/// `F_kl = 1/2 tr(P dV_k P dV_l)`, with `P` the REML projection.
fn score_info(theta: &VarianceComponents, stats: &SuffStats, gls: &Gls) -> (DVector<f64>, DMatrix<f64>) {
    let ctx = ThetaCtx::new(theta, stats).expect("context exists at evaluated theta");
    let p1 = stats.p1;
    let p = stats.p1 + stats.p2;
    let b1 = DVector::from_column_slice(&gls.beta.as_slice()[..p1]);
    let b2 = DVector::from_column_slice(&gls.beta.as_slice()[p1..]);

    let mut tr_vinv = [0.0f64; 6];
    let mut quad_k = [0.0f64; 6];
    let mut t_kl = [0.0f64; 21];
    let mut c_mats: Vec<DMatrix<f64>> = (0..6).map(|_| DMatrix::zeros(p, p)).collect();
    let mut n_mats: Vec<DMatrix<f64>> = (0..21).map(|_| DMatrix::zeros(p, p)).collect();

    for d in &stats.domains {
        if d.n == 0 {
            continue;
        }
        let nf = d.n as f64;
        let dc = ctx.dom(d.n);
        let (w, h, q) = (ctx.w, dc.h, dc.q);
        let wmh = w - h;
        let res = stats.residual_moments(d, &b1, &b2);
        let qe = q * res.s_eps;

        // per-parameter 2x2 pieces; u-side k in 0..3, e-side k in 3..6
        for k in 0..3 {
            let du = &ctx.d_u[k];
            let qdq = q * du * q;
            tr_vinv[k] += nf * tr_prod(du, &q);
            quad_k[k] += quad_form(du, &qe);
            add_block(&mut c_mats[k], p1, &qdq, &d.o11, &d.o12, &d.o22, 1.0);
        }
        for k in 0..3 {
            let de = &ctx.d_e[k];
            let wdw = w * de * w;
            tr_vinv[3 + k] += nf * tr_prod(&wmh, de);
            let hdw = h * de * w;
            let hdh = h * de * h;
            quad_k[3 + k] += res.quad(&wdw) - 2.0 * quad_form(&hdw, &res.s_eps)
                + nf * quad_form(&hdh, &res.s_eps);
            // C_k = sum_j (V^-1 X)_j' D_k (V^-1 X)_j compressed
            add_block(&mut c_mats[3 + k], p1, &wdw, &d.s11, &d.s12, &d.s22, 1.0);
            add_block(&mut c_mats[3 + k], p1, &hdw, &d.o11, &d.o12, &d.o22, -1.0);
            let wdh = w * de * h;
            add_block(&mut c_mats[3 + k], p1, &wdh, &d.o11, &d.o12, &d.o22, -1.0);
            add_block(&mut c_mats[3 + k], p1, &hdh, &d.o11, &d.o12, &d.o22, nf);
        }

        for k in 0..6 {
            for l in k..6 {
                let idx = pair_index(k, l);
                if k < 3 && l < 3 {
                    let (du_k, du_l) = (&ctx.d_u[k], &ctx.d_u[l]);
                    t_kl[idx] += nf * nf * tr_prod(&(du_k * q), &(du_l * q));
                    let mid = q * du_k * q * du_l * q;
                    add_block(&mut n_mats[idx], p1, &mid, &d.o11, &d.o12, &d.o22, nf);
                } else if k < 3 {
                    let (du, de) = (&ctx.d_u[k], &ctx.d_e[l - 3]);
                    t_kl[idx] += nf * tr_prod(&(q * de), &(q * du));
                    let mid = q * du * q * de * q;
                    add_block(&mut n_mats[idx], p1, &mid, &d.o11, &d.o12, &d.o22, 1.0);
                } else {
                    let (de_k, de_l) = (&ctx.d_e[k - 3], &ctx.d_e[l - 3]);
                    t_kl[idx] += nf * tr_prod(&(wmh * de_k), &(wmh * de_l))
                        + nf * (nf - 1.0) * tr_prod(&(h * de_k), &(h * de_l));
                    // N_kl = SandXX(D_k W D_l) - (Q S_X)' D_k H D_l (Q S_X)
                    let a = de_k * w * de_l;
                    let waw = w * a * w;
                    let haw = h * a * w;
                    let wah = w * a * h;
                    let hah = h * a * h;
                    add_block(&mut n_mats[idx], p1, &waw, &d.s11, &d.s12, &d.s22, 1.0);
                    add_block(&mut n_mats[idx], p1, &haw, &d.o11, &d.o12, &d.o22, -1.0);
                    add_block(&mut n_mats[idx], p1, &wah, &d.o11, &d.o12, &d.o22, -1.0);
                    add_block(&mut n_mats[idx], p1, &hah, &d.o11, &d.o12, &d.o22, nf);
                    let qdhq = q * de_k * h * de_l * q;
                    add_block(&mut n_mats[idx], p1, &qdhq, &d.o11, &d.o12, &d.o22, -1.0);
                }
            }
        }
    }

    let a_inv = &gls.beta_cov;
    let mut score = DVector::zeros(6);
    let mut info = DMatrix::zeros(6, 6);
    let tr_ainv = |m: &DMatrix<f64>| -> f64 {
        let mut s = 0.0;
        for i in 0..p {
            for j in 0..p {
                s += a_inv[(i, j)] * m[(j, i)];
            }
        }
        s
    };
    let ainv_c: Vec<DMatrix<f64>> = c_mats.iter().map(|c| a_inv * c).collect();
    for k in 0..6 {
        let tr_p_dv = tr_vinv[k] - ainv_c[k].trace();
        score[k] = -0.5 * (tr_p_dv - quad_k[k]);
        for l in k..6 {
            let t = t_kl[pair_index(k, l)] - 2.0 * tr_ainv(&n_mats[pair_index(k, l)])
                + (&ainv_c[k] * &ainv_c[l]).trace();
            info[(k, l)] = 0.5 * t;
            info[(l, k)] = 0.5 * t;
        }
    }
    (score, info)
}

/// Analytic REML score and expected information at `theta` for the given
/// sample, in the order
/// (sigma2_u1, sigma2_u2, rho_u, sigma2_e1, sigma2_e2, rho_e).
pub fn reml_score_info(
    theta: &VarianceComponents,
    sample: &SampleData,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    theta.validate()?;
    let stats = SuffStats::new(sample);
    let ctx = ThetaCtx::new(theta, &stats)?;
    let gls = solve_gls(&ctx, &stats)?;
    Ok(score_info(theta, &stats, &gls))
}

// ---------------------------------------------------------------------------
// Moment initialization
// ---------------------------------------------------------------------------

fn ols_coeffs(stats: &SuffStats) -> (DVector<f64>, DVector<f64>) {
    let (p1, p2) = (stats.p1, stats.p2);
    let mut a1 = DMatrix::zeros(p1, p1);
    let mut a2 = DMatrix::zeros(p2, p2);
    let mut r1 = DVector::zeros(p1);
    let mut r2 = DVector::zeros(p2);
    for d in &stats.domains {
        a1 += &d.s11;
        a2 += &d.s22;
        r1 += &d.sx1y1;
        r2 += &d.sx2y2;
    }
    let solve = |a: DMatrix<f64>, r: &DVector<f64>| -> DVector<f64> {
        let n = a.nrows();
        let ridge = 1e-10 * (1.0 + a.trace().abs() / n as f64);
        let reg = a + DMatrix::from_diagonal_element(n, n, ridge);
        reg.lu().solve(r).unwrap_or_else(|| DVector::zeros(n))
    };
    (solve(a1, &r1), solve(a2, &r2))
}

fn moment_init(stats: &SuffStats) -> VarianceComponents {
    let (b1, b2) = ols_coeffs(stats);
    let n = stats.n_units as f64;
    let d_plus = stats.domains.iter().filter(|d| d.n > 0).count() as f64;

    let mut ssw = [0.0f64; 3];
    let mut ssb = [0.0f64; 3];
    let mut sum_means = Vec2::zeros();
    let mut sum_n_sq = 0.0;
    for d in &stats.domains {
        if d.n == 0 {
            continue;
        }
        let nd = d.n as f64;
        let res = stats.residual_moments(d, &b1, &b2);
        let mean = res.s_eps / nd;
        ssw[0] += res.e1_sq - nd * mean.x * mean.x;
        ssw[1] += res.e12 - nd * mean.x * mean.y;
        ssw[2] += res.e2_sq - nd * mean.y * mean.y;
        ssb[0] += nd * mean.x * mean.x;
        ssb[1] += nd * mean.x * mean.y;
        ssb[2] += nd * mean.y * mean.y;
        sum_means += res.s_eps;
        sum_n_sq += nd * nd;
    }
    let gmean = sum_means / n;
    ssb[0] -= n * gmean.x * gmean.x;
    ssb[1] -= n * gmean.x * gmean.y;
    ssb[2] -= n * gmean.y * gmean.y;

    let within_dof = (n - d_plus).max(1.0);
    let mut sig_e = [ssw[0] / within_dof, ssw[2] / within_dof];
    for (k, s) in sig_e.iter_mut().enumerate() {
        if !(*s > 0.0 && s.is_finite()) {
            let total = if k == 0 { ssw[0] + ssb[0] } else { ssw[2] + ssb[2] };
            *s = (total / n).abs().max(1e-4);
        }
    }
    let c = (n - sum_n_sq / n).max(1.0);
    let mut sig_u = [
        (ssb[0] - (d_plus - 1.0).max(0.0) * sig_e[0]) / c,
        (ssb[2] - (d_plus - 1.0).max(0.0) * sig_e[1]) / c,
    ];
    for (k, s) in sig_u.iter_mut().enumerate() {
        let floor = (1e-3 * sig_e[k]).max(VAR_FLOOR);
        if !(*s > floor && s.is_finite()) {
            *s = floor;
        }
    }
    let corr = |cross: f64, v1: f64, v2: f64| -> f64 {
        let denom = (v1 * v2).sqrt();
        if denom > 0.0 && denom.is_finite() {
            (cross / denom).clamp(-0.9, 0.9)
        } else {
            0.0
        }
    };
    let rho_e = corr(ssw[1], ssw[0], ssw[2]);
    let rho_u = corr(ssb[1], ssb[0], ssb[2]);
    VarianceComponents {
        sigma2_u1: sig_u[0],
        sigma2_u2: sig_u[1],
        rho_u,
        sigma2_e1: sig_e[0],
        sigma2_e2: sig_e[1],
        rho_e,
    }
}

// ---------------------------------------------------------------------------
// Fisher scoring
// ---------------------------------------------------------------------------

fn project(theta: &mut [f64; 6]) -> usize {
    let mut events = 0;
    for k in [0usize, 1, 3, 4] {
        if !(theta[k] >= VAR_FLOOR) {
            theta[k] = VAR_FLOOR;
            events += 1;
        }
    }
    for k in [2usize, 5] {
        if !(theta[k].abs() <= RHO_BOUND) {
            theta[k] = theta[k].clamp(-RHO_BOUND, RHO_BOUND);
            if theta[k].is_nan() {
                theta[k] = 0.0;
            }
            events += 1;
        }
    }
    events
}

fn solve_scoring_step(info: &DMatrix<f64>, score: &DVector<f64>) -> DVector<f64> {
    let n = score.len();
    let scale = 1.0 + info.diagonal().amax();
    let mut ridge = 0.0;
    loop {
        let reg = if ridge > 0.0 {
            info + DMatrix::from_diagonal_element(n, n, ridge)
        } else {
            info.clone()
        };
        if let Some(chol) = reg.cholesky() {
            return chol.solve(score);
        }
        ridge = if ridge == 0.0 { 1e-12 * scale } else { ridge * 100.0 };
        if ridge > 1e3 * scale {
            // information is hopeless; fall back to a conservative gradient step
            let norm = score.norm().max(1e-300);
            return score * (0.1 / norm);
        }
    }
}

/// Coordinates pinned at a feasibility bound with the score pushing outward.
/// Steps restricted to the remaining coordinates keep the iterate feasible
/// while the free part of the problem is still optimized.
fn pinned_coords(theta: &[f64; 6], score: &DVector<f64>) -> [bool; 6] {
    let mut pinned = [false; 6];
    for k in [0usize, 1, 3, 4] {
        pinned[k] = theta[k] <= VAR_FLOOR && score[k] < 0.0;
    }
    for k in [2usize, 5] {
        pinned[k] = (theta[k] >= RHO_BOUND && score[k] > 0.0)
            || (theta[k] <= -RHO_BOUND && score[k] < 0.0);
    }
    pinned
}

fn reduced_scoring_step(
    info: &DMatrix<f64>,
    score: &DVector<f64>,
    pinned: &[bool; 6],
) -> Option<DVector<f64>> {
    let free: Vec<usize> = (0..6).filter(|&k| !pinned[k]).collect();
    if free.is_empty() || free.len() == 6 {
        return None;
    }
    let m = free.len();
    let mut info_r = DMatrix::zeros(m, m);
    let mut score_r = DVector::zeros(m);
    for (a, &k) in free.iter().enumerate() {
        score_r[a] = score[k];
        for (b, &l) in free.iter().enumerate() {
            info_r[(a, b)] = info[(k, l)];
        }
    }
    let step_r = solve_scoring_step(&info_r, &score_r);
    let mut step = DVector::zeros(6);
    for (a, &k) in free.iter().enumerate() {
        step[k] = step_r[a];
    }
    Some(step)
}

struct StepResult {
    theta: VarianceComponents,
    loglik: f64,
    gls: Gls,
    rel_change: f64,
    projections: usize,
}

/// Tries a scoring step with halving until the projected candidate does not
/// decrease the log-likelihood.
fn attempt_step(
    cur: &[f64; 6],
    step: &DVector<f64>,
    ll: f64,
    stats: &SuffStats,
    halvings: usize,
) -> Option<StepResult> {
    let mut alpha = 1.0;
    for _ in 0..=halvings {
        let mut cand = *cur;
        for k in 0..6 {
            cand[k] += alpha * step[k];
        }
        let cand_proj = project(&mut cand);
        if let Ok(cand_theta) = VarianceComponents::from_array(cand) {
            if let Ok((cand_ll, cand_gls)) = loglik_gls(&cand_theta, stats) {
                if cand_ll.is_finite() && cand_ll >= ll - 1e-10 * (1.0 + ll.abs()) {
                    let rel_change = (0..6)
                        .map(|k| (cand[k] - cur[k]).abs() / (1.0 + cur[k].abs()))
                        .fold(0.0f64, f64::max);
                    return Some(StepResult {
                        theta: cand_theta,
                        loglik: cand_ll,
                        gls: cand_gls,
                        rel_change,
                        projections: cand_proj,
                    });
                }
            }
        }
        alpha *= 0.5;
    }
    None
}

/// Fits the model by REML Fisher scoring and returns the empirical BLUE,
/// BLUPs, likelihood and information at the estimate.
///
/// Non-convergence is not fatal: the best iterate is returned with
/// `converged = false`.
pub fn fit_reml(sample: &SampleData, opts: &FitOptions) -> Result<FittedModel> {
    let stats = SuffStats::new(sample);
    let mut warnings = Vec::new();
    if stats.domains.iter().filter(|d| d.n > 0).count() < 2 {
        warnings.push("fewer than 2 sampled domains; variance components are weakly identified".to_string());
    }

    let mut theta_arr = match &opts.init {
        InitStrategy::Moment => moment_init(&stats).as_array(),
        InitStrategy::Fixed(t) => t.as_array(),
    };
    let mut projections = project(&mut theta_arr);
    let mut theta = VarianceComponents::from_array(theta_arr)
        .map_err(|e| Error::InvalidParameter(format!("infeasible starting point: {e}")))?;
    let (mut ll, mut gls) = loglik_gls(&theta, &stats)?;

    let tol = opts.rel_tolerance;
    let mut last_change = f64::INFINITY;
    let mut stall_count = 0usize;
    let mut iterations = 0;
    let mut converged = false;
    let info = loop {
        let (score, info) = score_info(&theta, &stats, &gls);
        let snorm = score.norm();
        if last_change <= tol && snorm <= tol * (1.0 + ll.abs()) {
            converged = true;
            break info;
        }
        if stall_count >= 2 || iterations >= opts.max_iterations {
            // no further movement: typically pinned at a feasibility bound,
            // where the raw score cannot vanish
            break info;
        }
        iterations += 1;

        let cur = theta.as_array();
        let step = solve_scoring_step(&info, &score);
        let mut outcome = attempt_step(&cur, &step, ll, &stats, opts.step_halving_max);
        if outcome.is_none() {
            // full step blocked by the feasible region: freeze the pinned
            // coordinates and optimize the remaining ones
            let pinned = pinned_coords(&cur, &score);
            if let Some(reduced) = reduced_scoring_step(&info, &score, &pinned) {
                outcome = attempt_step(&cur, &reduced, ll, &stats, opts.step_halving_max);
            }
        }
        match outcome {
            Some(step_result) => {
                theta = step_result.theta;
                ll = step_result.loglik;
                gls = step_result.gls;
                last_change = step_result.rel_change;
                projections += step_result.projections;
                stall_count = if last_change <= tol { stall_count + 1 } else { 0 };
            }
            None => break info,
        }
    };

    let beta = RegressionCoefficients::from_stacked(gls.beta.as_slice(), stats.p1)?;
    let params = ModelParams::new(beta, theta)?;
    let blups = blup_random_effects(&params, sample);
    Ok(FittedModel {
        params,
        beta_cov: gls.beta_cov,
        theta_fisher_info: info,
        reml_loglik: ll,
        converged,
        iterations,
        projections,
        blups,
        warnings,
    })
}

/// Predicted random effects `u_d = V_u Z_ds' V_ds^{-1} (y_ds - X_ds beta)`
/// per domain; zero for domains without sampled units.
pub fn blup_random_effects(params: &ModelParams, sample: &SampleData) -> Vec<Vec2> {
    let v_u = params.theta.v_u();
    let v_e = params.theta.v_e();
    let w = inv2(&v_e).expect("validated variance components");
    let v_u_inv = inv2(&v_u).expect("validated variance components");
    sample
        .domains()
        .iter()
        .map(|dom| {
            let n = dom.n();
            if n == 0 {
                return Vec2::zeros();
            }
            let nf = n as f64;
            let m = inv2(&(v_u_inv + w * nf)).expect("SPD by construction");
            let q = w - w * m * w * nf;
            let mut s_eps = Vec2::zeros();
            for u in &dom.units {
                s_eps += u.y - params.beta.mean(&u.x1, &u.x2);
            }
            v_u * (q * s_eps)
        })
        .collect()
}
