//! Binomial-logit mixed model fit by a Laplace approximation.
//!
//! The integrated likelihood over the random effects has no closed form for
//! a Bernoulli response, so it is approximated at the random-effect mode:
//! penalized iteratively-reweighted least squares (PIRLS) finds the mode,
//! and the Gaussian curvature there supplies the log-determinant correction.
//! The covariance parameters are searched by the same derivative-free
//! simplex as the Gaussian models; the fixed effects are then polished
//! against the exact Laplace objective (the jointly reweighted solution the
//! search uses is a close but not identical optimum), alternating once more
//! with the covariance search so both settle together.

use super::lmm::{BlupTable, VarComponents};
use super::solver::Workspace;
use super::CovParams;
use crate::design::{binomial_design, DesignError, DesignMatrices, ModelSpec};
use crate::linalg::{Cholesky, DMat};
use crate::num::{normal_sf, z_critical};
use crate::optim::{minimize, Options};
use crate::preprocess::{FallData, ScalingParams};
use crate::scalar::Scalar;

/// Fixed-effect magnitude on the logit scale beyond which the data are
/// treated as completely separated.
const SEPARATION_LIMIT: f64 = 15.0;
/// Floor for the variance weights mu(1-mu).
const WEIGHT_FLOOR: f64 = 1e-10;
/// Floor/ceiling applied to probabilities inside logarithms.
const PROB_EPS: f64 = 1e-12;
/// Relative change of the linear predictor that ends the inner loop.
const PIRLS_TOL: f64 = 1e-9;
const PIRLS_MAX_ITER: usize = 80;
/// Diagonal threshold for flagging a collapsed covariance factor.
const BOUNDARY_TOL: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum GlmmError<S: Scalar> {
    /// The penalized system could not be factored.
    #[error("singular model system: {0}")]
    SingularSystem(String),
    /// A search stage stopped at its evaluation budget; the best fit found
    /// is attached.
    #[error("the fit did not converge within the evaluation budget")]
    ConvergenceFailure { fit: Box<FittedGlmm<S>> },
    /// A fixed effect diverged on the logit scale: the outcome is perfectly
    /// predicted and the coefficient has no finite estimate.
    #[error("complete separation: fixed effect {effect} diverged to {estimate} on the logit scale")]
    CompleteSeparation { effect: String, estimate: S },
    /// The reweighted least-squares loop failed to find the mode.
    #[error("penalized reweighted least squares failed: {0}")]
    InnerLoopFailed(String),
    #[error("model has no fixed effect named {0:?}")]
    UnknownEffect(String),
    #[error("building the design failed: {0}")]
    Design(#[from] DesignError),
}

/// A fitted binomial-logit mixed model.
#[derive(Debug, Clone)]
pub struct FittedGlmm<S> {
    pub spec: ModelSpec,
    /// Fixed effects on the logit scale.
    pub gamma: Vec<S>,
    pub se: Vec<S>,
    pub fixed_names: Vec<String>,
    /// Covariance matrix of the fixed-effect estimates.
    pub vcov: DMat<S>,
    /// Random-term covariance matrices on the logit scale.
    pub var_components: Vec<VarComponents<S>>,
    pub blups: Vec<BlupTable<S>>,
    /// Laplace-approximated log likelihood.
    pub approx_loglik: S,
    /// -2 approx_loglik.
    pub deviance: S,
    pub n_obs: usize,
    /// Fixed effects plus variance/covariance parameters (dispersion is 1).
    pub n_params: usize,
    pub theta: Vec<S>,
    pub converged: bool,
    pub boundary: bool,
    pub n_evals: usize,
    pub scaling: Option<ScalingParams>,
}

impl<S: Scalar> FittedGlmm<S> {
    pub fn bic(&self) -> S {
        S::of_usize(self.n_params) * S::of_usize(self.n_obs).ln()
            - S::of(2.0) * self.approx_loglik
    }

    pub fn fixed_index(&self, name: &str) -> Result<usize, GlmmError<S>> {
        self.fixed_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| GlmmError::UnknownEffect(name.to_string()))
    }

    pub fn fixed_effect(&self, name: &str) -> Result<(S, S), GlmmError<S>> {
        let i = self.fixed_index(name)?;
        Ok((self.gamma[i], self.se[i]))
    }

    /// Wald confidence interval on the logit scale.
    pub fn wald_ci(&self, name: &str, level: S) -> Result<(S, S), GlmmError<S>> {
        let (est, se) = self.fixed_effect(name)?;
        let z = z_critical(level);
        Ok((est - z * se, est + z * se))
    }

    pub fn wald_cis(&self, level: S) -> Vec<(S, S)> {
        let z = z_critical(level);
        self.gamma
            .iter()
            .zip(&self.se)
            .map(|(&est, &se)| (est - z * se, est + z * se))
            .collect()
    }
}

/// Two-sided Wald test of one fixed effect against zero.
#[derive(Debug, Clone, Copy)]
pub struct WaldTest<S> {
    pub estimate: S,
    pub se: S,
    pub z: S,
    pub p_value: S,
}

/// Wald z test for a fixed effect of a fitted binomial model.
pub fn wald_test<S: Scalar>(fit: &FittedGlmm<S>, term: &str) -> Result<WaldTest<S>, GlmmError<S>> {
    let (estimate, se) = fit.fixed_effect(term)?;
    let z = estimate / se;
    let p_value = (S::of(2.0) * normal_sf(z.abs())).min(S::one());
    Ok(WaldTest { estimate, se, z, p_value })
}

fn inv_logit<S: Scalar>(eta: S) -> S {
    S::one() / (S::one() + (-eta).exp())
}

/// Bernoulli deviance: -2 sum of log likelihood contributions.
fn binom_deviance<S: Scalar>(y: &[S], mu: &[S]) -> S {
    let eps = S::of(PROB_EPS);
    let mut dev = S::zero();
    for (&yi, &mi) in y.iter().zip(mu) {
        let m = mi.max(eps).min(S::one() - eps);
        dev = dev - S::of(2.0) * (yi * m.ln() + (S::one() - yi) * (S::one() - m).ln());
    }
    dev
}

/// Last accepted step of the inner reweighted loop, kept so a failed step
/// can interpolate back toward it.
struct Accepted<S> {
    beta: Vec<S>,
    /// Spherical random-effect coordinates per term.
    u: Vec<Vec<S>>,
    /// Natural random effects per term.
    b: Vec<Vec<S>>,
    penalized_deviance: S,
}

/// Converged state of the inner reweighted loop.
struct Pirls<S> {
    beta: Vec<S>,
    /// Level-major natural random effects per term.
    b: Vec<Vec<S>>,
    eta: Vec<S>,
    /// Laplace -2 log likelihood: deviance + penalty + log-determinant.
    laplace: S,
}

/// Why the inner loop stopped without a mode.
enum InnerError<S> {
    /// A fixed effect ran past the separation limit: the penalized deviance
    /// has no stationary point in that direction.
    Separated { col: usize, value: S },
    Other(String),
}

impl<S> From<String> for InnerError<S> {
    fn from(msg: String) -> Self {
        InnerError::Other(msg)
    }
}

/// Penalized iteratively-reweighted least squares.
///
/// With `offset = None` the fixed effects are solved jointly with the
/// random-effect mode (the design must carry the fixed columns). With
/// `offset = Some(X beta)` only the mode is solved and the design must have
/// zero fixed columns.
fn pirls<S: Scalar>(
    design: &DesignMatrices<S>,
    offset: Option<&[S]>,
    y: &[S],
    cov: &CovParams<S>,
) -> Result<Pirls<S>, InnerError<S>> {
    let n = y.len();
    let mut eta: Vec<S> = match offset {
        Some(off) => off.to_vec(),
        None => y
            .iter()
            .map(|&yi| {
                let mu0 = (yi + S::of(0.5)) / S::of(2.0);
                (mu0 / (S::one() - mu0)).ln()
            })
            .collect(),
    };
    // Previously accepted coefficients and penalized deviance.
    let mut prev: Option<Accepted<S>> = None;

    for _ in 0..PIRLS_MAX_ITER {
        let mut w = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        for i in 0..n {
            let mu = inv_logit(eta[i]);
            let wi = (mu * (S::one() - mu)).max(S::of(WEIGHT_FLOOR));
            let mut zi = eta[i] + (y[i] - mu) / wi;
            if let Some(off) = offset {
                zi = zi - off[i];
            }
            w.push(wi);
            z.push(zi);
        }
        let ws = Workspace::build(design, &w, &z);
        let sol = ws.solve(cov).map_err(|e| e.0)?;
        // A coefficient running past the separation limit cannot come back:
        // the objective is monotone in that direction.
        for (col, bj) in sol.beta.iter().enumerate() {
            if bj.abs() > S::of(SEPARATION_LIMIT) {
                return Err(InnerError::Separated { col, value: *bj });
            }
        }

        // Accept the full step, or interpolate back toward the previous
        // coefficients until the penalized deviance stops increasing.
        let mut step = S::one();
        loop {
            let (beta_s, u_s, b_s) = match (&prev, step == S::one()) {
                (None, _) | (_, true) => (sol.beta.clone(), sol.u.clone(), sol.b.clone()),
                (Some(p), false) => {
                    let mix = |old: &[S], new: &[S]| -> Vec<S> {
                        old.iter()
                            .zip(new)
                            .map(|(&o, &nw)| o + step * (nw - o))
                            .collect()
                    };
                    let beta = mix(&p.beta, &sol.beta);
                    let u: Vec<Vec<S>> =
                        p.u.iter().zip(&sol.u).map(|(o, nw)| mix(o, nw)).collect();
                    let b: Vec<Vec<S>> =
                        p.b.iter().zip(&sol.b).map(|(o, nw)| mix(o, nw)).collect();
                    (beta, u, b)
                }
            };
            let mut eta_s = ws.predictor(&beta_s, &b_s);
            if let Some(off) = offset {
                for (e, &o) in eta_s.iter_mut().zip(off) {
                    *e = *e + o;
                }
            }
            let mu_s: Vec<S> = eta_s.iter().map(|&e| inv_logit(e)).collect();
            let usqr_s: S = u_s.iter().flatten().map(|&v| v * v).sum();
            let pd_s = binom_deviance(y, &mu_s) + usqr_s;

            let improved = match &prev {
                None => true,
                Some((_, _, _, pd_prev)) => pd_s <= *pd_prev + S::of(1e-8),
            };
            if improved {
                let mut delta = S::zero();
                let mut scale = S::one();
                for (a, bb) in eta_s.iter().zip(&eta) {
                    delta = delta.max((*a - *bb).abs());
                    scale = scale.max(a.abs());
                }
                eta = eta_s;
                if delta < S::of(PIRLS_TOL) * scale {
                    return Ok(Pirls {
                        beta: beta_s,
                        b: b_s,
                        eta,
                        laplace: pd_s + sol.log_det_lz,
                    });
                }
                prev = Some((beta_s, u_s, b_s, pd_s));
                break;
            }
            step = step / S::of(2.0);
            if step < S::of(1e-4) {
                return Err(InnerError::Other(
                    "step halving failed to reduce the penalized deviance".to_string(),
                ));
            }
        }
    }
    Err(InnerError::Other(format!(
        "mode search did not settle in {PIRLS_MAX_ITER} iterations"
    )))
}

/// Newton polish of the fixed effects against the Laplace objective, with
/// numeric derivatives (the objective is cheap and low-dimensional).
///
/// Returns the refined coefficients and whether the polish settled.
fn refine_beta<S: Scalar>(
    udesign: &DesignMatrices<S>,
    x: &DMat<S>,
    y: &[S],
    cov: &CovParams<S>,
    beta0: &[S],
    evals: &mut usize,
) -> Result<(Vec<S>, bool), InnerError<S>> {
    let p = beta0.len();
    if p == 0 {
        return Ok((vec![], true));
    }
    let g = |beta: &[S], evals: &mut usize| -> Result<S, InnerError<S>> {
        *evals += 1;
        let off = x.matvec(beta);
        Ok(pirls(udesign, Some(&off), y, cov)?.laplace)
    };

    let mut beta = beta0.to_vec();
    let mut fcur = g(&beta, evals)?;
    for _ in 0..10 {
        let h: Vec<S> = beta.iter().map(|b| S::of(1e-5) * (S::one() + b.abs())).collect();
        let mut grad = vec![S::zero(); p];
        for j in 0..p {
            let mut bp = beta.clone();
            bp[j] = bp[j] + h[j];
            let mut bm = beta.clone();
            bm[j] = bm[j] - h[j];
            grad[j] = (g(&bp, evals)? - g(&bm, evals)?) / (S::of(2.0) * h[j]);
        }
        if grad.iter().map(|v| v.abs()).fold(S::zero(), S::max)
            < S::of(1e-7) * (S::one() + fcur.abs())
        {
            return Ok((beta, true));
        }

        let mut hess = DMat::zeros(p, p);
        for i in 0..p {
            for j in 0..=i {
                let mut bpp = beta.clone();
                bpp[i] = bpp[i] + h[i];
                bpp[j] = bpp[j] + h[j];
                let mut bpm = beta.clone();
                bpm[i] = bpm[i] + h[i];
                bpm[j] = bpm[j] - h[j];
                let mut bmp = beta.clone();
                bmp[i] = bmp[i] - h[i];
                bmp[j] = bmp[j] + h[j];
                let mut bmm = beta.clone();
                bmm[i] = bmm[i] - h[i];
                bmm[j] = bmm[j] - h[j];
                let v = (g(&bpp, evals)? - g(&bpm, evals)? - g(&bmp, evals)? + g(&bmm, evals)?)
                    / (S::of(4.0) * h[i] * h[j]);
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
        // Ridge the Hessian if curvature is indefinite where we stand.
        let mut ridge = S::zero();
        let step = loop {
            let mut hr = hess.clone();
            for d in 0..p {
                hr[(d, d)] = hr[(d, d)] + ridge;
            }
            match Cholesky::factor(&hr) {
                Ok(ch) => break ch.solve(&grad),
                Err(_) => {
                    ridge = if ridge == S::zero() { S::of(1e-4) } else { ridge * S::of(10.0) };
                    if ridge > S::of(1e8) {
                        return Ok((beta, false));
                    }
                }
            }
        };

        let mut scale = S::one();
        let mut accepted = false;
        for _ in 0..25 {
            let cand: Vec<S> =
                beta.iter().zip(&step).map(|(b, s)| *b - scale * *s).collect();
            match g(&cand, evals) {
                Ok(f) if f <= fcur + S::of(1e-12) => {
                    let moved = cand
                        .iter()
                        .zip(&beta)
                        .map(|(a, b)| (*a - *b).abs())
                        .fold(S::zero(), S::max);
                    let gain = fcur - f;
                    beta = cand;
                    fcur = f;
                    accepted = true;
                    if moved < S::of(1e-9) || gain < S::of(1e-11) {
                        return Ok((beta, true));
                    }
                    break;
                }
                _ => scale = scale / S::of(2.0),
            }
        }
        if !accepted {
            // No descent direction left at numeric precision: converged.
            return Ok((beta, true));
        }
    }
    Ok((beta, false))
}

/// Fit a binomial-logit mixed model to a prepared design.
pub fn fit_binomial_design<S: Scalar>(
    design: &DesignMatrices<S>,
) -> Result<FittedGlmm<S>, GlmmError<S>> {
    let n = design.n_rows();
    let p = design.n_fixed();
    let y = &design.y;
    debug_assert!(
        y.iter().all(|&v| v == S::zero() || v == S::one()),
        "binomial response must be 0/1"
    );
    let dims: Vec<usize> = design.terms.iter().map(|t| t.n_coords()).collect();
    // Fixed-effect-free copy of the design for mode-only solves (the fixed
    // part enters as an offset).
    let udesign = DesignMatrices {
        spec: design.spec.clone(),
        y: design.y.clone(),
        x: DMat::zeros(n, 0),
        fixed_names: Vec::new(),
        terms: design.terms.clone(),
    };

    let mut evals = 0usize;
    let mut settled = true;
    let inner = |e: InnerError<S>| match e {
        InnerError::Separated { col, value } => GlmmError::CompleteSeparation {
            effect: design
                .fixed_names
                .get(col)
                .cloned()
                .unwrap_or_else(|| format!("column {col}")),
            estimate: value,
        },
        InnerError::Other(msg) => GlmmError::InnerLoopFailed(msg),
    };

    // Covariance search over the jointly reweighted objective.
    let mut theta: Vec<S> = if dims.is_empty() {
        Vec::new()
    } else {
        let start = CovParams::identity(&dims);
        pirls(design, None, y, &start).map_err(inner)?;
        let objective = |t: &[S]| -> S {
            let cov = CovParams::from_theta(&dims, t);
            match pirls(design, None, y, &cov) {
                Ok(fit) => fit.laplace,
                Err(_) => S::infinity(),
            }
        };
        let opts = Options {
            max_evals: 600,
            ftol: S::of(1e-8),
            xtol: S::of(1e-7),
            init_step: S::of(0.2),
        };
        let out = minimize(objective, &start.to_theta(), &CovParams::bounds(&dims), &opts);
        settled &= out.converged;
        evals += out.evals;
        out.x
    };

    let cov1 = CovParams::from_theta(&dims, &theta);
    let joint = pirls(design, None, y, &cov1).map_err(inner)?;

    // Polish the fixed effects against the exact Laplace objective, then let
    // the covariance parameters adjust to the polished coefficients, and
    // polish once more.
    let (beta1, ok) =
        refine_beta(&udesign, &design.x, y, &cov1, &joint.beta, &mut evals).map_err(inner)?;
    settled &= ok;
    if !dims.is_empty() {
        let off = design.x.matvec(&beta1);
        let objective = |t: &[S]| -> S {
            let cov = CovParams::from_theta(&dims, t);
            match pirls(&udesign, Some(&off), y, &cov) {
                Ok(fit) => fit.laplace,
                Err(_) => S::infinity(),
            }
        };
        let opts = Options {
            max_evals: 400,
            ftol: S::of(1e-9),
            xtol: S::of(1e-8),
            init_step: S::of(0.05),
        };
        let out = minimize(objective, &theta, &CovParams::bounds(&dims), &opts);
        settled &= out.converged;
        evals += out.evals;
        theta = out.x;
    }
    let cov = CovParams::from_theta(&dims, &theta);
    let (beta, ok) =
        refine_beta(&udesign, &design.x, y, &cov, &beta1, &mut evals).map_err(inner)?;
    settled &= ok;

    // Final mode and Laplace value at the polished coefficients.
    let off = design.x.matvec(&beta);
    let fin = pirls(&udesign, Some(&off), y, &cov).map_err(inner)?;
    evals += 1;

    for (j, bj) in beta.iter().enumerate() {
        if bj.abs() > S::of(SEPARATION_LIMIT) {
            return Err(GlmmError::CompleteSeparation {
                effect: design.fixed_names[j].clone(),
                estimate: *bj,
            });
        }
    }

    // Curvature of the penalized system at the final state gives the
    // fixed-effect covariance (dispersion fixed at 1).
    let mut w = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    for i in 0..n {
        let mu = inv_logit(fin.eta[i]);
        let wi = (mu * (S::one() - mu)).max(S::of(WEIGHT_FLOOR));
        w.push(wi);
        z.push(fin.eta[i] + (y[i] - mu) / wi);
    }
    let ws = Workspace::build(design, &w, &z);
    let solj = ws.solve(&cov).map_err(|e| GlmmError::SingularSystem(e.0))?;
    let vcov = solj.rx.inverse();
    let se: Vec<S> = (0..p).map(|i| vcov[(i, i)].sqrt()).collect();

    let var_components = design
        .terms
        .iter()
        .zip(&cov.terms)
        .map(|(term, lt)| VarComponents {
            factor: term.factor.clone(),
            coord_names: term.coord_names.clone(),
            cov: lt.outer(),
        })
        .collect();
    let blups = design
        .terms
        .iter()
        .enumerate()
        .map(|(t, term)| BlupTable {
            factor: term.factor.clone(),
            coord_names: term.coord_names.clone(),
            levels: term.level_names.clone(),
            values: fin.b[t].clone(),
        })
        .collect();

    let fit = FittedGlmm {
        spec: design.spec.clone(),
        gamma: beta,
        se,
        fixed_names: design.fixed_names.clone(),
        vcov,
        var_components,
        blups,
        approx_loglik: -fin.laplace / S::of(2.0),
        deviance: fin.laplace,
        n_obs: n,
        n_params: p + design.spec.n_cov_params(),
        theta: cov.to_theta(),
        converged: settled,
        boundary: cov.on_boundary(S::of(BOUNDARY_TOL)),
        n_evals: evals,
        scaling: None,
    };
    if settled {
        Ok(fit)
    } else {
        Err(GlmmError::ConvergenceFailure { fit: Box::new(fit) })
    }
}

/// Fit a binomial-logit model to preprocessed fall outcomes, recording the
/// covariate standardization constants on the result.
pub fn fit_binomial<S: Scalar>(
    spec: &ModelSpec,
    data: &FallData,
) -> Result<FittedGlmm<S>, GlmmError<S>> {
    let design = binomial_design::<S>(&data.rows, spec)?;
    match fit_binomial_design(&design) {
        Ok(mut fit) => {
            fit.scaling = Some(data.scaling);
            Ok(fit)
        }
        Err(GlmmError::ConvergenceFailure { mut fit }) => {
            fit.scaling = Some(data.scaling);
            Err(GlmmError::ConvergenceFailure { fit })
        }
        Err(e) => Err(e),
    }
}
