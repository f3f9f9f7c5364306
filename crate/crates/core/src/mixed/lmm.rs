//! Linear mixed models with crossed random effects.
//!
//! The covariance parameters are profiled out of the Gaussian likelihood:
//! for fixed relative covariance factors the fixed effects, random-effect
//! modes and residual variance all have closed forms from one penalized
//! least-squares solve, leaving a low-dimensional deviance surface that a
//! derivative-free simplex search minimizes. Both maximum likelihood and
//! REML criteria are supported; model comparison (BIC, likelihood-ratio
//! tests, the fitting ladder) requires ML.

use serde::Serialize;

use super::solver::{Solution, Workspace};
use super::CovParams;
use crate::design::{gaussian_design, DesignError, DesignMatrices, ModelSpec};
use crate::linalg::DMat;
use crate::num::{chi2_sf, z_critical};
use crate::optim::{minimize, Options};
use crate::preprocess::{ModelData, ScalingParams};
use crate::scalar::Scalar;

/// Objective used when fitting: full maximum likelihood or REML.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Criterion {
    Ml,
    Reml,
}

impl Criterion {
    pub fn label(self) -> &'static str {
        match self {
            Criterion::Ml => "ML",
            Criterion::Reml => "REML",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LmmError<S: Scalar> {
    /// The penalized system could not be factored at the requested
    /// covariance parameters (collinear fixed effects, degenerate design).
    #[error("singular model system: {0}")]
    SingularSystem(String),
    /// The simplex search exhausted its evaluation budget. The best fit
    /// found so far is attached so callers can inspect or still use it.
    #[error("covariance-parameter search did not converge within the evaluation budget")]
    ConvergenceFailure { fit: Box<FittedLmm<S>> },
    /// Likelihood-ratio tests require one model to contain the other.
    #[error("models are not nested: {0}")]
    NotNested(String),
    /// Likelihood-ratio tests are only meaningful between ML fits sharing
    /// one criterion.
    #[error("model comparison requires two maximum-likelihood fits on the same data")]
    CriterionMismatch,
    /// A climber or event asked of the fit was not in the training data.
    #[error("unknown {factor} level {level:?}")]
    UnknownLevel { factor: String, level: String },
    /// A fixed effect name not present in the fitted model.
    #[error("model has no fixed effect named {0:?}")]
    UnknownEffect(String),
    #[error("building the design failed: {0}")]
    Design(#[from] DesignError),
    /// A ladder fit failed for one particular model. The cause is flattened
    /// to text: a boxed `Self` here would make the derived `Display` and
    /// `Error` impls self-referential, which the trait solver rejects for
    /// generic types.
    #[error("fitting model {model} failed: {cause}")]
    ModelFit { model: String, cause: String },
}

/// Estimated covariance matrix of one random term, on the variance scale.
#[derive(Debug, Clone)]
pub struct VarComponents<S> {
    pub factor: String,
    pub coord_names: Vec<String>,
    /// k x k covariance matrix (sigma^2 Lambda Lambda').
    pub cov: DMat<S>,
}

impl<S: Scalar> VarComponents<S> {
    pub fn variance(&self, i: usize) -> S {
        self.cov[(i, i)]
    }

    pub fn covariance(&self, i: usize, j: usize) -> S {
        self.cov[(i, j)]
    }

    /// Correlation between coordinates, `None` when a variance vanishes.
    pub fn correlation(&self, i: usize, j: usize) -> Option<S> {
        let d = (self.cov[(i, i)] * self.cov[(j, j)]).sqrt();
        if d > S::zero() {
            Some(self.cov[(i, j)] / d)
        } else {
            None
        }
    }

    pub fn n_coords(&self) -> usize {
        self.coord_names.len()
    }
}

/// Conditional modes (BLUPs) of one random term, by level.
#[derive(Debug, Clone)]
pub struct BlupTable<S> {
    pub factor: String,
    pub coord_names: Vec<String>,
    /// Sorted level names, aligned with `values` rows.
    pub levels: Vec<String>,
    /// Level-major values, `levels.len() x coord_names.len()`.
    pub values: Vec<S>,
}

impl<S: Scalar> BlupTable<S> {
    pub fn n_coords(&self) -> usize {
        self.coord_names.len()
    }

    /// All coordinates for one level, if present.
    pub fn level(&self, name: &str) -> Option<&[S]> {
        let k = self.n_coords();
        self.levels
            .binary_search_by(|l| l.as_str().cmp(name))
            .ok()
            .map(|i| &self.values[i * k..(i + 1) * k])
    }

    /// Position of a coordinate by name (for picking intercept vs slope).
    pub fn coord_index(&self, name: &str) -> Option<usize> {
        self.coord_names.iter().position(|c| c == name)
    }
}

/// A fitted Gaussian mixed model.
#[derive(Debug, Clone)]
pub struct FittedLmm<S> {
    pub spec: ModelSpec,
    pub criterion: Criterion,
    /// Fixed-effect estimates, aligned with `fixed_names`.
    pub gamma: Vec<S>,
    /// Standard errors of the fixed effects.
    pub se: Vec<S>,
    pub fixed_names: Vec<String>,
    /// Covariance matrix of the fixed-effect estimates.
    pub vcov: DMat<S>,
    /// Residual variance estimate.
    pub sigma2: S,
    pub var_components: Vec<VarComponents<S>>,
    pub blups: Vec<BlupTable<S>>,
    pub log_likelihood: S,
    /// Value of the optimized criterion (-2 log likelihood).
    pub deviance: S,
    pub n_obs: usize,
    /// Count of estimated parameters: fixed effects, variance/covariance
    /// entries of the random terms, and the residual variance.
    pub n_params: usize,
    /// Optimized relative covariance parameters (column-packed per term).
    pub theta: Vec<S>,
    pub converged: bool,
    /// True when a relative covariance factor collapsed onto the boundary
    /// (some random-effect variance is estimated as zero).
    pub boundary: bool,
    pub n_evals: usize,
    /// Standardization constants of the age and progression covariates,
    /// when the model was fit from a preprocessed dataset.
    pub scaling: Option<ScalingParams>,
}

impl<S: Scalar> FittedLmm<S> {
    /// Schwarz criterion: `k ln(n) - 2 log L`.
    pub fn bic(&self) -> S {
        S::of_usize(self.n_params) * S::of_usize(self.n_obs).ln()
            - S::of(2.0) * self.log_likelihood
    }

    /// Index of a fixed effect by display name.
    pub fn fixed_index(&self, name: &str) -> Result<usize, LmmError<S>> {
        self.fixed_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| LmmError::UnknownEffect(name.to_string()))
    }

    /// Estimate and standard error of a fixed effect.
    pub fn fixed_effect(&self, name: &str) -> Result<(S, S), LmmError<S>> {
        let i = self.fixed_index(name)?;
        Ok((self.gamma[i], self.se[i]))
    }

    /// Wald confidence interval for one fixed effect.
    pub fn wald_ci(&self, name: &str, level: S) -> Result<(S, S), LmmError<S>> {
        let (est, se) = self.fixed_effect(name)?;
        let z = z_critical(level);
        Ok((est - z * se, est + z * se))
    }

    /// Wald confidence intervals for every fixed effect, in order.
    pub fn wald_cis(&self, level: S) -> Vec<(S, S)> {
        let z = z_critical(level);
        self.gamma
            .iter()
            .zip(&self.se)
            .map(|(&est, &se)| (est - z * se, est + z * se))
            .collect()
    }
}

/// A fixed effect of log time re-expressed as a multiplicative factor on
/// the time scale, with a transformed Wald interval.
#[derive(Debug, Clone)]
pub struct EffectMultiplier<S> {
    pub name: String,
    /// Estimate on the log scale.
    pub estimate: S,
    /// exp(estimate): the factor a time is multiplied by.
    pub multiplier: S,
    pub lower: S,
    pub upper: S,
    pub confidence: S,
}

impl<S: Scalar> EffectMultiplier<S> {
    /// What a reference time becomes under the estimated effect.
    pub fn applied_to(&self, seconds: S) -> S {
        seconds * self.multiplier
    }
}

/// Re-express a fixed effect of a log-scale model as a time multiplier.
pub fn effect_multiplier<S: Scalar>(
    fit: &FittedLmm<S>,
    name: &str,
    confidence: S,
) -> Result<EffectMultiplier<S>, LmmError<S>> {
    let (est, _) = fit.fixed_effect(name)?;
    let (lo, hi) = fit.wald_ci(name, confidence)?;
    Ok(EffectMultiplier {
        name: name.to_string(),
        estimate: est,
        multiplier: est.exp(),
        lower: lo.exp(),
        upper: hi.exp(),
        confidence,
    })
}

/// Intercept and skip effect for one climber at one event: the fixed parts
/// plus both factors' conditional modes.
pub fn compose_coefficients<S: Scalar>(
    fit: &FittedLmm<S>,
    climber: &str,
    event: &str,
) -> Result<(S, S), LmmError<S>> {
    let pick = |name: &str| -> S {
        fit.fixed_names
            .iter()
            .position(|n| n == name)
            .map_or(S::zero(), |i| fit.gamma[i])
    };
    let mut beta0 = pick("(Intercept)");
    let mut beta1 = pick("x1");
    for table in &fit.blups {
        let level = match table.factor.as_str() {
            "climber" => climber,
            _ => event,
        };
        let coords = table.level(level).ok_or_else(|| LmmError::UnknownLevel {
            factor: table.factor.clone(),
            level: level.to_string(),
        })?;
        if let Some(i) = table.coord_index("(Intercept)") {
            beta0 = beta0 + coords[i];
        }
        if let Some(i) = table.coord_index("x1") {
            beta1 = beta1 + coords[i];
        }
    }
    Ok((beta0, beta1))
}

fn deviance_of<S: Scalar>(sol: &Solution<S>, n: usize, p: usize, criterion: Criterion) -> S {
    let tau = S::of(std::f64::consts::TAU);
    let pwrss = sol.pwrss.max(S::min_positive_value());
    match criterion {
        Criterion::Ml => {
            let nn = S::of_usize(n);
            sol.log_det_lz + nn * (S::one() + (tau * pwrss / nn).ln())
        }
        Criterion::Reml => {
            let df = S::of_usize(n - p);
            sol.log_det_lz + sol.log_det_rx + df * (S::one() + (tau * pwrss / df).ln())
        }
    }
}

/// Profiled deviance (-2 log likelihood with beta, u, sigma^2 profiled out)
/// at fixed covariance parameters.
pub fn profiled_deviance<S: Scalar>(
    design: &DesignMatrices<S>,
    cov: &CovParams<S>,
    criterion: Criterion,
) -> Result<S, LmmError<S>> {
    let ws = Workspace::unweighted(design);
    let sol = ws.solve(cov).map_err(|e| LmmError::SingularSystem(e.0))?;
    Ok(deviance_of(&sol, ws.n, ws.p, criterion))
}

/// Threshold below which a relative-covariance diagonal counts as collapsed.
const BOUNDARY_TOL: f64 = 1e-3;

fn assemble_fit<S: Scalar>(
    design: &DesignMatrices<S>,
    ws: &Workspace<S>,
    cov: &CovParams<S>,
    sol: &Solution<S>,
    criterion: Criterion,
    converged: bool,
    n_evals: usize,
) -> FittedLmm<S> {
    let n = ws.n;
    let p = ws.p;
    let deviance = deviance_of(sol, n, p, criterion);
    let denom = match criterion {
        Criterion::Ml => S::of_usize(n),
        Criterion::Reml => S::of_usize(n - p),
    };
    let sigma2 = sol.pwrss / denom;

    let mut vcov = sol.rx.inverse();
    for i in 0..p {
        for j in 0..p {
            vcov[(i, j)] = vcov[(i, j)] * sigma2;
        }
    }
    let se = (0..p).map(|i| vcov[(i, i)].sqrt()).collect();

    let var_components = design
        .terms
        .iter()
        .zip(&cov.terms)
        .map(|(term, lt)| {
            let mut cov_mat = lt.outer();
            for i in 0..lt.k() {
                for j in 0..lt.k() {
                    cov_mat[(i, j)] = cov_mat[(i, j)] * sigma2;
                }
            }
            VarComponents {
                factor: term.factor.clone(),
                coord_names: term.coord_names.clone(),
                cov: cov_mat,
            }
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
            values: sol.b[t].clone(),
        })
        .collect();

    FittedLmm {
        spec: design.spec.clone(),
        criterion,
        gamma: sol.beta.clone(),
        se,
        fixed_names: design.fixed_names.clone(),
        vcov,
        sigma2,
        var_components,
        blups,
        log_likelihood: -deviance / S::of(2.0),
        deviance,
        n_obs: n,
        n_params: p + design.spec.n_cov_params() + 1,
        theta: cov.to_theta(),
        converged,
        boundary: cov.on_boundary(S::of(BOUNDARY_TOL)),
        n_evals,
        scaling: None,
    }
}

/// Fit a Gaussian mixed model by minimizing the profiled deviance over the
/// relative covariance parameters.
pub fn fit_lmm<S: Scalar>(
    design: &DesignMatrices<S>,
    criterion: Criterion,
) -> Result<FittedLmm<S>, LmmError<S>> {
    let ws = Workspace::unweighted(design);
    let dims: Vec<usize> = design.terms.iter().map(|t| t.n_coords()).collect();

    if dims.is_empty() {
        // No random terms: the criterion needs no search.
        let cov = CovParams { terms: vec![] };
        let sol = ws.solve(&cov).map_err(|e| LmmError::SingularSystem(e.0))?;
        return Ok(assemble_fit(design, &ws, &cov, &sol, criterion, true, 1));
    }

    // Probe the starting point so structural problems surface as errors
    // rather than as a silently flat objective.
    let start = CovParams::identity(&dims);
    ws.solve(&start).map_err(|e| LmmError::SingularSystem(e.0))?;

    let objective = |theta: &[S]| -> S {
        let cov = CovParams::from_theta(&dims, theta);
        match ws.solve(&cov) {
            Ok(sol) => deviance_of(&sol, ws.n, ws.p, criterion),
            Err(_) => S::infinity(),
        }
    };
    let opts = Options {
        max_evals: 2000,
        ftol: S::of(1e-10),
        xtol: S::of(1e-8),
        init_step: S::of(0.2),
    };
    let outcome = minimize(objective, &start.to_theta(), &CovParams::bounds(&dims), &opts);

    let cov = CovParams::from_theta(&dims, &outcome.x);
    let sol = ws.solve(&cov).map_err(|e| LmmError::SingularSystem(e.0))?;
    let fit = assemble_fit(design, &ws, &cov, &sol, criterion, outcome.converged, outcome.evals + 2);
    if outcome.converged {
        Ok(fit)
    } else {
        Err(LmmError::ConvergenceFailure { fit: Box::new(fit) })
    }
}

/// Fit a model specification against preprocessed rows, recording the
/// covariate standardization constants on the result.
pub fn fit_model_rows<S: Scalar>(
    spec: &ModelSpec,
    data: &ModelData,
    criterion: Criterion,
) -> Result<FittedLmm<S>, LmmError<S>> {
    let design = gaussian_design::<S>(&data.rows, spec)?;
    match fit_lmm(&design, criterion) {
        Ok(mut fit) => {
            fit.scaling = Some(data.scaling);
            Ok(fit)
        }
        Err(LmmError::ConvergenceFailure { mut fit }) => {
            fit.scaling = Some(data.scaling);
            Err(LmmError::ConvergenceFailure { fit })
        }
        Err(e) => Err(e),
    }
}

/// Result of a likelihood-ratio test between two nested ML fits.
#[derive(Debug, Clone, Copy)]
pub struct LrtResult<S> {
    pub statistic: S,
    pub df: usize,
    pub p_value: S,
}

fn check_nested<S: Scalar>(
    simpler: &FittedLmm<S>,
    complex: &FittedLmm<S>,
) -> Result<usize, LmmError<S>> {
    if simpler.spec.family != complex.spec.family {
        return Err(LmmError::NotNested("the models have different families".into()));
    }
    if simpler.n_obs != complex.n_obs {
        return Err(LmmError::NotNested("the models were fit to different numbers of observations".into()));
    }
    for f in &simpler.spec.fixed {
        if !complex.spec.fixed.contains(f) {
            return Err(LmmError::NotNested(format!(
                "fixed effect {} of the simpler model is missing from the larger one",
                f.name()
            )));
        }
    }
    for term in &simpler.spec.random {
        let Some(other) = complex.spec.random.iter().find(|t| t.factor == term.factor) else {
            return Err(LmmError::NotNested(format!(
                "random term for {} is missing from the larger model",
                term.factor.name()
            )));
        };
        if (term.intercept && !other.intercept)
            || term.slope.is_some_and(|s| other.slope != Some(s))
        {
            return Err(LmmError::NotNested(format!(
                "random term for {} is not contained in the larger model's",
                term.factor.name()
            )));
        }
    }
    if complex.n_params <= simpler.n_params {
        return Err(LmmError::NotNested(
            "the larger model adds no parameters over the simpler one".into(),
        ));
    }
    Ok(complex.n_params - simpler.n_params)
}

/// Likelihood-ratio test of a simpler model against a larger nested one.
pub fn lrt<S: Scalar>(
    simpler: &FittedLmm<S>,
    complex: &FittedLmm<S>,
) -> Result<LrtResult<S>, LmmError<S>> {
    if simpler.criterion != Criterion::Ml || complex.criterion != Criterion::Ml {
        return Err(LmmError::CriterionMismatch);
    }
    let df = check_nested(simpler, complex)?;
    let statistic =
        (S::of(2.0) * (complex.log_likelihood - simpler.log_likelihood)).max(S::zero());
    Ok(LrtResult { statistic, df, p_value: chi2_sf(statistic, df) })
}

/// One line of the model-ladder comparison table.
#[derive(Debug, Clone)]
pub struct ComparisonRow<S> {
    pub model: String,
    pub n_params: usize,
    pub bic: S,
    /// Likelihood-ratio statistic against the previous model (absent for
    /// the first).
    pub statistic: Option<S>,
    pub df: Option<usize>,
    pub p_value: Option<S>,
}

/// The fitted ladder with its comparison table and the selected model.
#[derive(Debug)]
pub struct LadderComparison<S> {
    pub alpha: S,
    pub rows: Vec<ComparisonRow<S>>,
    /// Name of the model chosen by the sequential tests.
    pub selected: String,
    pub fits: Vec<FittedLmm<S>>,
    /// Convergence complaints collected along the way (fits are still
    /// reported; callers decide how strictly to treat these).
    pub warnings: Vec<String>,
}

impl<S: Scalar> LadderComparison<S> {
    pub fn selected_fit(&self) -> &FittedLmm<S> {
        self.fits
            .iter()
            .find(|f| f.spec.name == self.selected)
            .expect("the selected model is one of the fits")
    }

    /// True when the selected model's search converged.
    pub fn selected_converged(&self) -> bool {
        self.selected_fit().converged
    }
}

/// Fit the model ladder by ML, comparing each model to its predecessor
/// with likelihood-ratio tests and walking forward while the additions are
/// significant at `alpha`.
pub fn compare_ladder<S: Scalar>(
    data: &ModelData,
    alpha: S,
) -> Result<LadderComparison<S>, LmmError<S>> {
    let specs = ModelSpec::ladder();
    let mut fits: Vec<FittedLmm<S>> = Vec::with_capacity(specs.len());
    let mut warnings = Vec::new();
    for spec in &specs {
        match fit_model_rows(spec, data, Criterion::Ml) {
            Ok(fit) => fits.push(fit),
            Err(LmmError::ConvergenceFailure { fit }) => {
                warnings.push(format!(
                    "model {}: covariance search stopped at the evaluation budget; using the best point found",
                    spec.name
                ));
                fits.push(*fit);
            }
            Err(e) => {
                return Err(LmmError::ModelFit { model: spec.name.clone(), cause: e.to_string() })
            }
        }
    }

    let mut rows: Vec<ComparisonRow<S>> = Vec::with_capacity(fits.len());
    for (i, fit) in fits.iter().enumerate() {
        let test = if i == 0 { None } else { Some(lrt(&fits[i - 1], fit)?) };
        rows.push(ComparisonRow {
            model: fit.spec.name.clone(),
            n_params: fit.n_params,
            bic: fit.bic(),
            statistic: test.map(|t| t.statistic),
            df: test.map(|t| t.df),
            p_value: test.map(|t| t.p_value),
        });
    }

    let mut selected = rows[0].model.clone();
    for row in rows.iter().skip(1) {
        match row.p_value {
            Some(p) if p < alpha => selected = row.model.clone(),
            _ => break,
        }
    }

    Ok(LadderComparison { alpha, rows, selected, fits, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClimberId, EventId};
    use crate::preprocess::ModelRow;
    use approx::assert_relative_eq;

    fn model_row(climber: usize, event: usize, log_y: f64, x1: f64, x2: f64) -> ModelRow {
        ModelRow {
            climber_id: ClimberId::new(format!("c{climber:02}")),
            event_id: EventId::new(format!("e{event:02}")),
            y: log_y.exp(),
            log_y,
            x1,
            x2,
            x3_raw: 20.0,
            x4_raw: 0,
            // Deterministic covariate spread, centered by construction.
            x3: ((climber % 5) as f64 - 2.0) / 1.5,
            x4: ((event % 4) as f64 - 1.5) / 1.2,
            age_imputed: false,
        }
    }

    /// Deterministic pseudo-noise so tests need no random generator.
    fn wiggle(i: usize) -> f64 {
        ((i as f64) * 12.9898).sin() * 0.11
    }

    fn crossed_rows() -> Vec<ModelRow> {
        let mut rows = Vec::new();
        let mut i = 0;
        for c in 0..8 {
            for e in 0..6 {
                let x1 = if e >= 3 && c % 2 == 0 { 1.0 } else { 0.0 };
                let x2 = if c < 4 { 1.0 } else { 0.0 };
                let climber_eff = ((c as f64) - 3.5) * 0.08;
                let event_eff = ((e as f64) - 2.5) * 0.05;
                let log_y =
                    2.0 - 0.15 * x1 + 0.25 * x2 + climber_eff + event_eff + wiggle(i);
                rows.push(model_row(c, e, log_y, x1, x2));
                i += 1;
            }
        }
        rows
    }

    fn one_way_design(g: usize, n_per: usize) -> (DesignMatrices<f64>, Vec<f64>) {
        let spec = ModelSpec::new(
            "oneway",
            crate::design::Family::Gaussian,
            vec![crate::design::FixedEffect::Intercept],
            vec![crate::design::RandomEffect::intercept_only(crate::design::Factor::Climber)],
        );
        let mut rows = Vec::new();
        let mut i = 0;
        for group in 0..g {
            let a = ((group as f64) - (g as f64 - 1.0) / 2.0) * 0.3;
            for rep in 0..n_per {
                let y = 5.0 + a + wiggle(i) * 3.0;
                let mut r = model_row(group, rep, y, 0.0, 0.0);
                // Use the event id purely as a replicate label.
                r.event_id = EventId::new(format!("rep{rep:02}g{group:02}"));
                rows.push(r);
                i += 1;
            }
        }
        let y: Vec<f64> = rows.iter().map(|r| r.log_y).collect();
        (gaussian_design(&rows, &spec).unwrap(), y)
    }

    /// Closed-form variance components for the balanced one-way layout.
    fn one_way_anova(y: &[f64], g: usize, n_per: usize) -> (f64, f64, f64, f64) {
        let grand: f64 = y.iter().sum::<f64>() / y.len() as f64;
        let mut ssb = 0.0;
        let mut ssw = 0.0;
        for group in 0..g {
            let slice = &y[group * n_per..(group + 1) * n_per];
            let mean = slice.iter().sum::<f64>() / n_per as f64;
            ssb += n_per as f64 * (mean - grand).powi(2);
            for v in slice {
                ssw += (v - mean).powi(2);
            }
        }
        let msw = ssw / (g as f64 * (n_per as f64 - 1.0));
        let msb = ssb / (g as f64 - 1.0);
        // ML: residual = MSW, group variance from SSB/G; REML: from MSB.
        let tau_ml = (ssb / g as f64 - msw) / n_per as f64;
        let tau_reml = (msb - msw) / n_per as f64;
        (msw, tau_ml, msw, tau_reml)
    }

    #[test]
    fn balanced_one_way_matches_anova_closed_forms() {
        let (g, n_per) = (6, 5);
        let (design, _) = one_way_design(g, n_per);
        // The design sorts rows; recover y in group order from the design.
        let mut y_by_group = vec![Vec::new(); g];
        for (i, &lev) in design.terms[0].level_of_row.iter().enumerate() {
            y_by_group[lev].push(design.y[i]);
        }
        let y: Vec<f64> = y_by_group.into_iter().flatten().collect();
        let (sig_ml, tau_ml, sig_reml, tau_reml) = one_way_anova(&y, g, n_per);

        let ml = fit_lmm(&design, Criterion::Ml).unwrap();
        assert_relative_eq!(ml.sigma2, sig_ml, max_relative = 1e-6);
        assert_relative_eq!(ml.var_components[0].variance(0), tau_ml, max_relative = 1e-5);

        let reml = fit_lmm(&design, Criterion::Reml).unwrap();
        assert_relative_eq!(reml.sigma2, sig_reml, max_relative = 1e-6);
        assert_relative_eq!(reml.var_components[0].variance(0), tau_reml, max_relative = 1e-5);

        // The grand mean is the fixed estimate in a balanced layout.
        let grand: f64 = y.iter().sum::<f64>() / y.len() as f64;
        assert_relative_eq!(ml.gamma[0], grand, epsilon = 1e-8);
    }

    #[test]
    fn deviance_identities_hold_at_the_optimum() {
        let rows = crossed_rows();
        let spec = ModelSpec::ladder_spec("M0").unwrap();
        let design = gaussian_design::<f64>(&rows, &spec).unwrap();
        let fit = fit_lmm(&design, Criterion::Ml).unwrap();

        let cov = CovParams::from_theta(&[1, 1], &fit.theta);
        let dev = profiled_deviance(&design, &cov, Criterion::Ml).unwrap();
        assert_relative_eq!(dev, fit.deviance, epsilon = 1e-10);
        assert_relative_eq!(fit.log_likelihood, -fit.deviance / 2.0, epsilon = 1e-12);
        let k = fit.n_params as f64;
        assert_relative_eq!(
            fit.bic(),
            k * (fit.n_obs as f64).ln() + fit.deviance,
            epsilon = 1e-9
        );
        // Perturbing the covariance parameters cannot improve the deviance.
        for delta in [[0.05, 0.0], [0.0, 0.05], [-0.05, 0.02]] {
            let mut theta = fit.theta.clone();
            theta[0] = (theta[0] + delta[0]).max(0.0);
            theta[1] = (theta[1] + delta[1]).max(0.0);
            let cov = CovParams::from_theta(&[1, 1], &theta);
            let other = profiled_deviance(&design, &cov, Criterion::Ml).unwrap();
            assert!(other >= fit.deviance - 1e-7, "{other} < {}", fit.deviance);
        }
    }

    #[test]
    fn group_free_response_collapses_to_ordinary_regression() {
        // No group structure at all: variances go to the boundary and the
        // fixed effects match the plain least-squares line.
        let mut rows = Vec::new();
        let mut i = 0;
        for c in 0..6 {
            for e in 0..5 {
                let x2 = if c < 3 { 1.0 } else { 0.0 };
                let log_y = 1.4 + 0.3 * x2 + wiggle(i);
                rows.push(model_row(c, e, log_y, 0.0, x2));
                i += 1;
            }
        }
        let spec = ModelSpec::new(
            "flat",
            crate::design::Family::Gaussian,
            vec![crate::design::FixedEffect::Intercept, crate::design::FixedEffect::GenderFemale],
            vec![
                crate::design::RandomEffect::intercept_only(crate::design::Factor::Climber),
                crate::design::RandomEffect::intercept_only(crate::design::Factor::Event),
            ],
        );
        let design = gaussian_design::<f64>(&rows, &spec).unwrap();
        let fit = fit_lmm(&design, Criterion::Ml).unwrap();

        // Plain least squares on (intercept, x2): group means.
        let mean = |pred: fn(&ModelRow) -> bool| {
            let vals: Vec<f64> =
                rows.iter().filter(|r| pred(r)).map(|r| r.log_y).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let m0 = mean(|r| r.x2 == 0.0);
        let m1 = mean(|r| r.x2 == 1.0);
        // Noise is shared within rows of equal index parity across groups,
        // so group variance is small but not exactly zero; allow slack.
        assert_relative_eq!(fit.gamma[0], m0, epsilon = 2e-2);
        assert_relative_eq!(fit.gamma[1], m1 - m0, epsilon = 2e-2);
        assert!(fit.converged);
    }

    #[test]
    fn exactly_balanced_groups_hit_the_boundary() {
        // Identical response pattern in every group: the group variance is
        // estimated as zero and flagged.
        let mut rows = Vec::new();
        for c in 0..6 {
            for e in 0..4 {
                let log_y = 2.0 + [0.1, -0.1, 0.05, -0.05][e];
                rows.push(model_row(c, e, log_y, 0.0, 0.0));
            }
        }
        let spec = ModelSpec::new(
            "collapsed",
            crate::design::Family::Gaussian,
            vec![crate::design::FixedEffect::Intercept],
            vec![crate::design::RandomEffect::intercept_only(crate::design::Factor::Climber)],
        );
        let design = gaussian_design::<f64>(&rows, &spec).unwrap();
        let fit = fit_lmm(&design, Criterion::Ml).unwrap();
        assert!(fit.boundary, "theta = {:?}", fit.theta);
        assert!(fit.var_components[0].variance(0) < 1e-4);
        assert_relative_eq!(fit.gamma[0], 2.0, epsilon = 1e-8);
    }

    #[test]
    fn lrt_rejects_mismatched_criteria_and_non_nested_models() {
        let rows = crossed_rows();
        let m0 = ModelSpec::ladder_spec("M0").unwrap();
        let m1 = ModelSpec::ladder_spec("M1").unwrap();
        let d0 = gaussian_design::<f64>(&rows, &m0).unwrap();
        let d1 = gaussian_design::<f64>(&rows, &m1).unwrap();
        let f0_ml = fit_lmm(&d0, Criterion::Ml).unwrap();
        let f1_ml = fit_lmm(&d1, Criterion::Ml).unwrap();
        let f0_reml = fit_lmm(&d0, Criterion::Reml).unwrap();

        assert!(matches!(lrt(&f0_reml, &f1_ml), Err(LmmError::CriterionMismatch)));

        let test = lrt(&f0_ml, &f1_ml).unwrap();
        assert_eq!(test.df, 4);
        assert!(test.statistic >= 0.0);
        assert!(test.p_value > 0.0 && test.p_value <= 1.0);

        // Swapped order is not nested (no parameters added).
        assert!(matches!(lrt(&f1_ml, &f0_ml), Err(LmmError::NotNested(_))));

        // Disjoint fixed effects are not nested either.
        let a = ModelSpec::new(
            "a",
            crate::design::Family::Gaussian,
            vec![crate::design::FixedEffect::Intercept, crate::design::FixedEffect::Age],
            vec![crate::design::RandomEffect::intercept_only(crate::design::Factor::Climber)],
        );
        let b = ModelSpec::new(
            "b",
            crate::design::Family::Gaussian,
            vec![
                crate::design::FixedEffect::Intercept,
                crate::design::FixedEffect::GenderFemale,
            ],
            vec![
                crate::design::RandomEffect::intercept_only(crate::design::Factor::Climber),
                crate::design::RandomEffect::intercept_only(crate::design::Factor::Event),
            ],
        );
        let fa = fit_lmm(&gaussian_design::<f64>(&rows, &a).unwrap(), Criterion::Ml).unwrap();
        let fb = fit_lmm(&gaussian_design::<f64>(&rows, &b).unwrap(), Criterion::Ml).unwrap();
        assert!(matches!(lrt(&fa, &fb), Err(LmmError::NotNested(_))));
    }

    #[test]
    fn ladder_comparison_walks_sequential_tests() {
        let data = ModelData { rows: crossed_rows(), scaling: ScalingParams::default() };
        let cmp = compare_ladder::<f64>(&data, 0.01).unwrap();
        assert_eq!(cmp.rows.len(), 5);
        let names: Vec<&str> = cmp.rows.iter().map(|r| r.model.as_str()).collect();
        assert_eq!(names, ["M0", "M1", "M2", "M3", "M4"]);
        assert!(cmp.rows[0].statistic.is_none());
        for row in &cmp.rows[1..] {
            assert!(row.statistic.unwrap() >= 0.0);
            let p = row.p_value.unwrap();
            assert!((0.0..=1.0).contains(&p));
        }
        assert_eq!(cmp.rows[1].df, Some(4));
        assert_eq!(cmp.rows[2].df, Some(1));
        assert_eq!(cmp.rows[3].df, Some(3));
        assert_eq!(cmp.rows[4].df, Some(1));
        assert!(names.contains(&cmp.selected.as_str()));
        assert_eq!(cmp.selected_fit().spec.name, cmp.selected);
        // Models were fit to preprocessed rows, so scaling must ride along.
        assert!(cmp.fits.iter().all(|f| f.scaling.is_some()));
        // Parameter counts along the ladder.
        let ks: Vec<usize> = cmp.rows.iter().map(|r| r.n_params).collect();
        assert_eq!(ks, [4, 8, 9, 12, 13]);
    }

    #[test]
    fn multiplier_re_expresses_log_effects() {
        let rows = crossed_rows();
        let spec = ModelSpec::ladder_spec("M3").unwrap();
        let design = gaussian_design::<f64>(&rows, &spec).unwrap();
        let fit = fit_lmm(&design, Criterion::Ml).unwrap();
        let m = effect_multiplier(&fit, "x1", 0.95).unwrap();
        let (est, se) = fit.fixed_effect("x1").unwrap();
        assert_relative_eq!(m.multiplier, est.exp(), epsilon = 1e-12);
        let z = 1.959963984540054;
        assert_relative_eq!(m.lower, (est - z * se).exp(), epsilon = 1e-9);
        assert_relative_eq!(m.upper, (est + z * se).exp(), epsilon = 1e-9);
        assert_relative_eq!(m.applied_to(7.0), 7.0 * est.exp(), epsilon = 1e-12);
        assert!(matches!(
            effect_multiplier(&fit, "x9", 0.95),
            Err(LmmError::UnknownEffect(_))
        ));
    }

    #[test]
    fn composed_coefficients_sum_fixed_and_random_parts() {
        let rows = crossed_rows();
        let spec = ModelSpec::ladder_spec("M1").unwrap();
        let design = gaussian_design::<f64>(&rows, &spec).unwrap();
        let fit = fit_lmm(&design, Criterion::Ml).unwrap();

        let (b0, b1) = compose_coefficients(&fit, "c00", "e03").unwrap();
        let climb = &fit.blups[0];
        let event = &fit.blups[1];
        // The ladder's slope stage keeps the fixed part intercept-only, so
        // the skip effect is purely the sum of the two conditional slopes.
        assert_eq!(fit.fixed_names, ["(Intercept)"]);
        let exp0 = fit.gamma[0] + climb.level("c00").unwrap()[0] + event.level("e03").unwrap()[0];
        let exp1 = climb.level("c00").unwrap()[1] + event.level("e03").unwrap()[1];
        assert_relative_eq!(b0, exp0, epsilon = 1e-12);
        assert_relative_eq!(b1, exp1, epsilon = 1e-12);

        assert!(matches!(
            compose_coefficients(&fit, "nobody", "e03"),
            Err(LmmError::UnknownLevel { .. })
        ));
    }

    #[test]
    fn reml_residual_variance_exceeds_ml() {
        let rows = crossed_rows();
        let spec = ModelSpec::ladder_spec("M2").unwrap();
        let design = gaussian_design::<f64>(&rows, &spec).unwrap();
        let ml = fit_lmm(&design, Criterion::Ml).unwrap();
        let reml = fit_lmm(&design, Criterion::Reml).unwrap();
        assert!(reml.sigma2 > ml.sigma2);
        // Same data, same structure: estimates stay in the same ballpark.
        for (a, b) in ml.gamma.iter().zip(&reml.gamma) {
            assert_relative_eq!(a, b, epsilon = 0.05);
        }
    }
}
