//! Synthetic competition data with known parameters.
//!
//! The generator runs the fitted model's equations forward: each climber and
//! each event gets an (intercept, skip-slope) coefficient pair drawn from its
//! 2x2 covariance block, covariates come from an explicit attendance and
//! technique-adoption model, and responses are the linear predictor plus
//! Gaussian noise (log times) or a Bernoulli draw (fall outcomes). Estimator
//! accuracy, interval coverage, and model selection can then be judged
//! against the parameters that generated the data.
//!
//! Determinism: every output is a pure function of [`SimulationParams`].
//! Replicates read independent streams of one counter-based generator, so
//! they may run concurrently and still reproduce bit for bit. Draws happen
//! in fixed passes — climber attributes, climber coefficients, event
//! coefficients, attendance, responses — so adding rows never reshuffles
//! earlier draws. The generator identity is recorded in [`RNG_ALGORITHM`]
//! and echoed by reports so archived outputs stay checkable.

use crate::data::{
    AttemptRecord, ClimberId, ClimberProfile, Dataset, Dob, Event, EventId, Gender, Outcome,
    RoundKind,
};
use crate::design::{Factor, Family, FixedEffect, ModelSpec};
use crate::mixed::{
    fit_binomial, fit_model_rows, Criterion, FittedGlmm, FittedLmm, GlmmError, LmmError,
};
use crate::preprocess::{
    compute_age, standardize, time_progression, FallData, FallRow, ModelData, ModelRow,
    ScalingParams,
};
use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Identity of the random generator, for report metadata: golden outputs can
/// be re-verified as long as this string matches.
pub const RNG_ALGORITHM: &str = "ChaCha12, 64-bit seed, one stream per replicate";

/// Days between consecutive simulated events.
const EVENT_SPACING_DAYS: i64 = 14;

/// Age range (years) at the first event.
const MIN_AGE: f64 = 16.0;
const MAX_AGE: f64 = 35.0;

/// Confidence level of the intervals scored by recovery reports.
const COVERAGE_LEVEL: f64 = 0.95;

/// Date of the first simulated event; the schedule runs biweekly from here.
fn schedule_epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(2018, 1, 6).expect("fixed calendar anchor")
}

#[derive(Debug, Error, PartialEq)]
pub enum SimulateError {
    #[error("the {factor} covariance block is not positive semidefinite")]
    DegenerateCovariance { factor: &'static str },
    #[error("invalid simulation parameters: {0}")]
    InvalidParams(String),
}

/// Symmetric 2x2 covariance block for one grouping factor's intercept and
/// skip-slope coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovBlock {
    pub var_intercept: f64,
    pub covariance: f64,
    pub var_slope: f64,
}

impl CovBlock {
    pub fn new(var_intercept: f64, covariance: f64, var_slope: f64) -> Self {
        Self { var_intercept, covariance, var_slope }
    }

    /// Independent intercepts and slopes.
    pub fn diagonal(var_intercept: f64, var_slope: f64) -> Self {
        Self::new(var_intercept, 0.0, var_slope)
    }

    /// Intercept variation only.
    pub fn intercept_only(var_intercept: f64) -> Self {
        Self::new(var_intercept, 0.0, 0.0)
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    /// Build the block from a correlation instead of a covariance.
    pub fn with_correlation(var_intercept: f64, correlation: f64, var_slope: f64) -> Self {
        let covariance = correlation * (var_intercept * var_slope).sqrt();
        Self::new(var_intercept, covariance, var_slope)
    }

    /// Intercept–slope correlation; `None` when a variance vanishes.
    pub fn correlation(&self) -> Option<f64> {
        let d = (self.var_intercept * self.var_slope).sqrt();
        if d > 0.0 {
            Some(self.covariance / d)
        } else {
            None
        }
    }

    /// Lower Cholesky factor `[l00, l10, l11]`; `None` when the block is not
    /// positive semidefinite. Zero variances are legitimate (degenerate in
    /// the geometric sense but valid noise-free settings), so the factor is
    /// computed with explicit zero handling rather than strict pivots.
    fn cholesky(&self) -> Option<[f64; 3]> {
        let (a, b, c) = (self.var_intercept, self.covariance, self.var_slope);
        if !(a.is_finite() && b.is_finite() && c.is_finite()) || a < 0.0 || c < 0.0 {
            return None;
        }
        let l00 = a.sqrt();
        let l10 = if l00 > 0.0 {
            b / l00
        } else if b == 0.0 {
            0.0
        } else {
            return None;
        };
        let rem = c - l10 * l10;
        // Rounding slack for blocks built from a correlation of +-1.
        if rem < -1e-12 * c.max(1.0) {
            return None;
        }
        Some([l00, l10, rem.max(0.0).sqrt()])
    }
}

/// How climbers pick up the skip technique over the season.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SkipAdoption {
    /// Nobody ever uses the technique.
    Never,
    /// Each climber adopts with probability `adoption_rate`, starting at an
    /// event drawn uniformly over the schedule and keeping the technique
    /// from then on.
    UniformOnset { adoption_rate: f64 },
    /// Like `UniformOnset`, but adopters abandon the technique again at a
    /// later uniformly drawn point (which may fall past the last event, in
    /// which case they keep it). Exercises the observation forward-fill's
    /// switch-back path.
    UniformOnsetWithSwitchBack { adoption_rate: f64 },
}

impl SkipAdoption {
    fn rate(self) -> f64 {
        match self {
            SkipAdoption::Never => 0.0,
            SkipAdoption::UniformOnset { adoption_rate }
            | SkipAdoption::UniformOnsetWithSwitchBack { adoption_rate } => adoption_rate,
        }
    }
}

/// Ground truth for one synthetic competition series.
///
/// The fixed effects apply to the same covariate coding the estimator sees:
/// skip and female are 0/1 indicators, age and progression are z-scored
/// within the realized rows. Recovered estimates are therefore directly
/// comparable to `gamma` without rescaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationParams {
    /// Intercept, skip, female, age, progression coefficients.
    pub gamma: [f64; 5],
    /// Residual variance of log time; zero gives noise-free responses.
    pub sigma2: f64,
    /// Climber coefficient covariance block.
    pub eta: CovBlock,
    /// Event coefficient covariance block.
    pub tau: CovBlock,
    pub n_climbers: usize,
    pub n_events: usize,
    /// Probability a climber enters any given event.
    pub attendance_prob: f64,
    pub skip_adoption: SkipAdoption,
    /// Proportion of female climbers.
    pub gender_split: f64,
    pub seed: u64,
}

impl SimulationParams {
    /// Defaults for recovery studies: the skip-effect estimates from the
    /// world-cup analysis, at a comparable scale (400 climbers, 120 events,
    /// 30% attendance).
    pub fn recovery_defaults() -> Self {
        Self {
            gamma: [2.0087, -0.1568, 0.2830, -0.0931, 0.0057],
            sigma2: 0.0055,
            eta: CovBlock::with_correlation(0.0736, -0.9808, 0.0286),
            tau: CovBlock::with_correlation(0.0092, -0.9895, 0.0048),
            n_climbers: 400,
            n_events: 120,
            attendance_prob: 0.3,
            skip_adoption: SkipAdoption::UniformOnset { adoption_rate: 0.5 },
            gender_split: 0.5,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<(), SimulateError> {
        let prob = |p: f64, what: &str| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(SimulateError::InvalidParams(format!("{what} must lie in [0, 1], got {p}")))
            }
        };
        if self.gamma.iter().any(|g| !g.is_finite()) {
            return Err(SimulateError::InvalidParams("fixed effects must be finite".into()));
        }
        if !self.sigma2.is_finite() || self.sigma2 < 0.0 {
            return Err(SimulateError::InvalidParams(format!(
                "residual variance must be finite and non-negative, got {}",
                self.sigma2
            )));
        }
        let count = |n: usize, what: &str| {
            if (1..=9999).contains(&n) {
                Ok(())
            } else {
                Err(SimulateError::InvalidParams(format!("{what} must lie in 1..=9999, got {n}")))
            }
        };
        count(self.n_climbers, "n_climbers")?;
        count(self.n_events, "n_events")?;
        prob(self.attendance_prob, "attendance_prob")?;
        prob(self.gender_split, "gender_split")?;
        prob(self.skip_adoption.rate(), "adoption rate")?;
        self.eta
            .cholesky()
            .ok_or(SimulateError::DegenerateCovariance { factor: "climber" })?;
        self.tau
            .cholesky()
            .ok_or(SimulateError::DegenerateCovariance { factor: "event" })?;
        Ok(())
    }
}

fn rng_for(seed: u64, replicate: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

struct SimClimber {
    profile: ClimberProfile,
    /// Event index at which the skip technique is first used.
    onset: Option<usize>,
    /// Event index at which it is abandoned again.
    drop: Option<usize>,
    /// (intercept, skip-slope) deviation.
    effect: [f64; 2],
}

/// A realized series: registries, coefficient draws, and who attended what.
struct Series {
    climbers: Vec<SimClimber>,
    events: Vec<Event>,
    event_effects: Vec<[f64; 2]>,
    /// Per climber, ascending indices of attended events.
    attendance: Vec<Vec<usize>>,
}

fn draw_pair(chol: &[f64; 3], rng: &mut ChaCha12Rng) -> [f64; 2] {
    let z0: f64 = rng.sample(StandardNormal);
    let z1: f64 = rng.sample(StandardNormal);
    [chol[0] * z0, chol[1] * z0 + chol[2] * z1]
}

fn build_series(params: &SimulationParams, rng: &mut ChaCha12Rng) -> Result<Series, SimulateError> {
    let chol_eta = params
        .eta
        .cholesky()
        .ok_or(SimulateError::DegenerateCovariance { factor: "climber" })?;
    let chol_tau = params
        .tau
        .cholesky()
        .ok_or(SimulateError::DegenerateCovariance { factor: "event" })?;

    let epoch = schedule_epoch();
    let events: Vec<Event> = (0..params.n_events)
        .map(|j| {
            let start = epoch + Duration::days(EVENT_SPACING_DAYS * j as i64);
            Event {
                id: EventId::new(format!("e{:04}", j + 1)),
                name: format!("Simulated event {}", j + 1),
                start_date: start,
                end_date: start + Duration::days(1),
            }
        })
        .collect();

    // Pass 1: climber attributes.
    let mut climbers = Vec::with_capacity(params.n_climbers);
    for i in 0..params.n_climbers {
        let gender = if rng.gen_bool(params.gender_split) { Gender::Female } else { Gender::Male };
        let age_at_epoch = rng.gen_range(MIN_AGE..MAX_AGE);
        let dob = epoch - Duration::days((age_at_epoch * 365.25).round() as i64);
        let (onset, drop) = match params.skip_adoption {
            SkipAdoption::Never => (None, None),
            SkipAdoption::UniformOnset { adoption_rate } => {
                if rng.gen_bool(adoption_rate) {
                    (Some(rng.gen_range(0..params.n_events)), None)
                } else {
                    (None, None)
                }
            }
            SkipAdoption::UniformOnsetWithSwitchBack { adoption_rate } => {
                if rng.gen_bool(adoption_rate) {
                    let onset = rng.gen_range(0..params.n_events);
                    let drop = rng.gen_range(onset + 1..=params.n_events);
                    (Some(onset), (drop < params.n_events).then_some(drop))
                } else {
                    (None, None)
                }
            }
        };
        climbers.push(SimClimber {
            profile: ClimberProfile {
                id: ClimberId::new(format!("c{:04}", i + 1)),
                name: format!("Simulated climber {}", i + 1),
                gender,
                dob: Dob::Date(dob),
                dob_source: "simulated".into(),
                dob_accessed: None,
            },
            onset,
            drop,
            effect: [0.0; 2],
        });
    }

    // Pass 2: climber coefficient draws.
    for climber in &mut climbers {
        climber.effect = draw_pair(&chol_eta, rng);
    }

    // Pass 3: event coefficient draws.
    let event_effects: Vec<[f64; 2]> = (0..params.n_events).map(|_| draw_pair(&chol_tau, rng)).collect();

    // Pass 4: attendance.
    let mut attendance = vec![Vec::new(); params.n_climbers];
    let mut attended = vec![false; params.n_events];
    for (i, list) in attendance.iter_mut().enumerate() {
        let _ = i;
        for (j, seen) in attended.iter_mut().enumerate() {
            if rng.gen_bool(params.attendance_prob) {
                list.push(j);
                *seen = true;
            }
        }
    }
    // An event nobody entered would vanish from the emitted files and shift
    // the progression origin, so assign one deterministic attendee.
    for (j, seen) in attended.iter().enumerate() {
        if !*seen {
            let i = j % params.n_climbers;
            let pos = attendance[i].binary_search(&j).unwrap_err();
            attendance[i].insert(pos, j);
        }
    }

    Ok(Series { climbers, events, event_effects, attendance })
}

/// Covariates of the realized rows, in (climber, event) order.
struct Frame {
    keys: Vec<(usize, usize)>,
    x1: Vec<f64>,
    x2: Vec<f64>,
    x3_raw: Vec<f64>,
    x4_raw: Vec<i64>,
    x3: Vec<f64>,
    x4: Vec<f64>,
    scaling: ScalingParams,
}

fn assemble_frame(series: &Series) -> Frame {
    let first_date = series.events[0].start_date;
    let mut keys = Vec::new();
    let mut x1 = Vec::new();
    let mut x2 = Vec::new();
    let mut x3_raw = Vec::new();
    let mut x4_raw = Vec::new();
    for (i, climber) in series.climbers.iter().enumerate() {
        for &j in &series.attendance[i] {
            let event = &series.events[j];
            let uses = climber.onset.is_some_and(|o| j >= o)
                && climber.drop.map_or(true, |d| j < d);
            let age = compute_age(&climber.profile, event)
                .expect("simulated dates of birth precede every event")
                .expect("simulated profiles carry a date of birth");
            keys.push((i, j));
            x1.push(if uses { 1.0 } else { 0.0 });
            x2.push(climber.profile.gender.indicator());
            x3_raw.push(age);
            x4_raw.push(time_progression(event, first_date));
        }
    }
    let (x3, age_mean, age_sd) = standardize(&x3_raw);
    let progression_values: Vec<f64> = x4_raw.iter().map(|&d| d as f64).collect();
    let (x4, progression_mean, progression_sd) = standardize(&progression_values);
    Frame {
        keys,
        x1,
        x2,
        x3_raw,
        x4_raw,
        x3,
        x4,
        scaling: ScalingParams { age_mean, age_sd, progression_mean, progression_sd },
    }
}

fn predictor(params: &SimulationParams, series: &Series, frame: &Frame, r: usize) -> f64 {
    let g = &params.gamma;
    let (i, j) = frame.keys[r];
    let mu = series.climbers[i].effect;
    let nu = series.event_effects[j];
    g[0] + g[1] * frame.x1[r] + g[2] * frame.x2[r] + g[3] * frame.x3[r] + g[4] * frame.x4[r]
        + mu[0]
        + mu[1] * frame.x1[r]
        + nu[0]
        + nu[1] * frame.x1[r]
}

fn realize_gaussian(
    params: &SimulationParams,
    replicate: u64,
) -> Result<(Series, ModelData), SimulateError> {
    params.validate()?;
    let mut rng = rng_for(params.seed, replicate);
    let series = build_series(params, &mut rng)?;
    let frame = assemble_frame(&series);
    let sd = params.sigma2.sqrt();

    // Pass 5: responses.
    let mut rows = Vec::with_capacity(frame.keys.len());
    for r in 0..frame.keys.len() {
        let z: f64 = rng.sample(StandardNormal);
        let log_y = predictor(params, &series, &frame, r) + sd * z;
        let (i, j) = frame.keys[r];
        rows.push(ModelRow {
            climber_id: series.climbers[i].profile.id.clone(),
            event_id: series.events[j].id.clone(),
            y: log_y.exp(),
            log_y,
            x1: frame.x1[r],
            x2: frame.x2[r],
            x3_raw: frame.x3_raw[r],
            x4_raw: frame.x4_raw[r],
            x3: frame.x3[r],
            x4: frame.x4[r],
            age_imputed: false,
        });
    }
    Ok((series, ModelData { rows, scaling: frame.scaling }))
}

fn inv_logit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn realize_binary(
    params: &SimulationParams,
    replicate: u64,
) -> Result<(Series, FallData), SimulateError> {
    params.validate()?;
    let mut rng = rng_for(params.seed, replicate);
    let series = build_series(params, &mut rng)?;
    let frame = assemble_frame(&series);

    // Pass 5: outcomes.
    let mut rows = Vec::with_capacity(frame.keys.len());
    for r in 0..frame.keys.len() {
        let p = inv_logit(predictor(params, &series, &frame, r));
        let fall = rng.gen_bool(p);
        let (i, j) = frame.keys[r];
        rows.push(FallRow {
            climber_id: series.climbers[i].profile.id.clone(),
            event_id: series.events[j].id.clone(),
            fall,
            x1: frame.x1[r],
            x2: frame.x2[r],
            x3_raw: frame.x3_raw[r],
            x4_raw: frame.x4_raw[r],
            x3: frame.x3[r],
            x4: frame.x4[r],
            age_imputed: false,
        });
    }
    Ok((series, FallData { rows, scaling: frame.scaling }))
}

/// Simulate log-time rows from the generative equations; the returned truth
/// echoes the parameters the data came from.
pub fn simulate_dataset(
    params: &SimulationParams,
) -> Result<(ModelData, SimulationParams), SimulateError> {
    Ok((simulate_replicate(params, 0)?, *params))
}

/// One replicate of [`simulate_dataset`] on its own generator stream.
pub fn simulate_replicate(
    params: &SimulationParams,
    replicate: u64,
) -> Result<ModelData, SimulateError> {
    realize_gaussian(params, replicate).map(|(_, data)| data)
}

/// Simulate binary fall outcomes: Bernoulli draws at the inverse-logit of
/// the same linear predictor the Gaussian series uses.
pub fn simulate_binary(
    params: &SimulationParams,
) -> Result<(FallData, SimulationParams), SimulateError> {
    Ok((simulate_binary_replicate(params, 0)?, *params))
}

/// One replicate of [`simulate_binary`] on its own generator stream.
pub fn simulate_binary_replicate(
    params: &SimulationParams,
    replicate: u64,
) -> Result<FallData, SimulateError> {
    realize_binary(params, replicate).map(|(_, data)| data)
}

/// A simulated series in the same shape as ingested competition data.
#[derive(Debug, Clone)]
pub struct SimulatedCompetition {
    pub dataset: Dataset,
    pub model: ModelData,
    pub truth: SimulationParams,
}

/// Realize a series as a full [`Dataset`]: one qualification attempt per
/// attended (climber, event) carrying the simulated time, a climber registry
/// with dates of birth, and sparse skip observations marking each adoption
/// (and any switch-back) so the forward-fill has real work to do.
///
/// Routing the dataset through ingestion and preprocessing reproduces
/// `model` exactly, except that the log response is recomputed from the
/// stored seconds and may differ in the last floating-point digit.
pub fn simulate_competition(
    params: &SimulationParams,
) -> Result<SimulatedCompetition, SimulateError> {
    let (series, model) = realize_gaussian(params, 0)?;
    let attempts = model
        .rows
        .iter()
        .map(|row| AttemptRecord {
            event_id: row.event_id.clone(),
            climber_id: row.climber_id.clone(),
            round: RoundKind::Qualification,
            outcome: Outcome::Time(row.y),
        })
        .collect();
    let mut skips = BTreeMap::new();
    for climber in &series.climbers {
        if let Some(onset) = climber.onset {
            skips.insert((climber.profile.id.clone(), series.events[onset].id.clone()), true);
            if let Some(drop) = climber.drop {
                skips.insert((climber.profile.id.clone(), series.events[drop].id.clone()), false);
            }
        }
    }
    let dataset = Dataset::new(
        series.climbers.iter().map(|c| c.profile.clone()).collect(),
        series.events.clone(),
        attempts,
        skips,
    );
    Ok(SimulatedCompetition { dataset, model, truth: *params })
}

/// Accuracy of one estimated parameter across replicates.
#[derive(Debug, Clone, Serialize)]
pub struct ParameterSummary {
    pub name: String,
    pub truth: f64,
    /// Mean of the replicate estimates.
    pub mean: f64,
    /// `mean - truth`.
    pub bias: f64,
    /// Monte-Carlo standard error of `mean`.
    pub mc_se: f64,
    pub rmse: f64,
    /// Share of replicates whose 95% Wald interval covers the truth;
    /// intervals exist only for fixed effects.
    pub coverage: Option<f64>,
}

/// Aggregate of refitting many simulated replicates against their truth.
#[derive(Debug, Clone, Serialize)]
pub struct RecoveryReport {
    pub truth: SimulationParams,
    pub model: String,
    pub n_replicates: usize,
    /// Replicates that produced estimates (converged or best point found).
    pub n_used: usize,
    pub n_converged: usize,
    /// Per-replicate failures that produced no estimates.
    pub failures: Vec<String>,
    pub fixed: Vec<ParameterSummary>,
    pub variances: Vec<ParameterSummary>,
    pub rng_algorithm: String,
}

/// Estimates extracted from one replicate's fit, aligned with the canonical
/// parameter order of the fitted [`ModelSpec`].
struct ReplicateEstimates {
    converged: bool,
    /// (estimate, interval) per fixed effect.
    fixed: Vec<(f64, (f64, f64))>,
    /// Residual variance first (Gaussian only), then per random term:
    /// variances in coordinate order, then covariances.
    variances: Vec<f64>,
}

fn lmm_estimates(fit: &FittedLmm<f64>, converged: bool) -> ReplicateEstimates {
    let cis = fit.wald_cis(COVERAGE_LEVEL);
    let fixed = fit.gamma.iter().copied().zip(cis).collect();
    let mut variances = vec![fit.sigma2];
    variances.extend(component_values(&fit.var_components));
    ReplicateEstimates { converged, fixed, variances }
}

fn glmm_estimates(fit: &FittedGlmm<f64>, converged: bool) -> ReplicateEstimates {
    let cis = fit.wald_cis(COVERAGE_LEVEL);
    let fixed = fit.gamma.iter().copied().zip(cis).collect();
    let variances = component_values(&fit.var_components);
    ReplicateEstimates { converged, fixed, variances }
}

fn component_values(components: &[crate::mixed::VarComponents<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for vc in components {
        for i in 0..vc.n_coords() {
            out.push(vc.variance(i));
        }
        for i in 0..vc.n_coords() {
            for j in 0..i {
                out.push(vc.covariance(j, i));
            }
        }
    }
    out
}

fn fixed_truth(params: &SimulationParams, effect: FixedEffect) -> f64 {
    match effect {
        FixedEffect::Intercept => params.gamma[0],
        FixedEffect::Skip => params.gamma[1],
        FixedEffect::GenderFemale => params.gamma[2],
        FixedEffect::Age => params.gamma[3],
        FixedEffect::Progression => params.gamma[4],
        // The generator has no interaction term; its true weight is zero.
        FixedEffect::SkipByAge => 0.0,
    }
}

/// Canonical (name, truth) list for the variance parameters of a spec,
/// matching the order produced by [`component_values`].
fn variance_truths(params: &SimulationParams, spec: &ModelSpec) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    if spec.family == Family::Gaussian {
        out.push(("sigma2".to_string(), params.sigma2));
    }
    for term in &spec.random {
        let block = match term.factor {
            Factor::Climber => params.eta,
            Factor::Event => params.tau,
        };
        let coords = term.coord_names();
        let factor = term.factor.name();
        // Variances in coordinate order (intercept first), then covariances.
        let mut vars = Vec::new();
        if term.intercept {
            vars.push(block.var_intercept);
        }
        if term.slope.is_some() {
            vars.push(block.var_slope);
        }
        for (coord, v) in coords.iter().zip(&vars) {
            out.push((format!("{factor} var({coord})"), *v));
        }
        if coords.len() == 2 {
            out.push((format!("{factor} cov({},{})", coords[0], coords[1]), block.covariance));
        }
    }
    out
}

fn summarize(
    name: &str,
    truth: f64,
    estimates: &[f64],
    covered: Option<&[bool]>,
) -> ParameterSummary {
    let n = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let bias = mean - truth;
    let var = if estimates.len() > 1 {
        estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let mc_se = (var / n).sqrt();
    let rmse = (estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / n).sqrt();
    let coverage = covered.map(|c| c.iter().filter(|&&b| b).count() as f64 / c.len() as f64);
    ParameterSummary { name: name.to_string(), truth, mean, bias, mc_se, rmse, coverage }
}

fn run_replicate(
    params: &SimulationParams,
    replicate: u64,
    spec: &ModelSpec,
) -> Result<ReplicateEstimates, String> {
    match spec.family {
        Family::Gaussian => {
            let data = simulate_replicate(params, replicate).map_err(|e| e.to_string())?;
            match fit_model_rows::<f64>(spec, &data, Criterion::Ml) {
                Ok(fit) => Ok(lmm_estimates(&fit, true)),
                Err(LmmError::ConvergenceFailure { fit }) => Ok(lmm_estimates(&fit, false)),
                Err(e) => Err(format!("replicate {replicate}: {e}")),
            }
        }
        Family::BinomialLogit => {
            let data = simulate_binary_replicate(params, replicate).map_err(|e| e.to_string())?;
            match fit_binomial::<f64>(spec, &data) {
                Ok(fit) => Ok(glmm_estimates(&fit, true)),
                Err(GlmmError::ConvergenceFailure { fit }) => Ok(glmm_estimates(&fit, false)),
                Err(e) => Err(format!("replicate {replicate}: {e}")),
            }
        }
    }
}

/// Simulate `n_replicates` datasets, refit each with `spec` (by ML for the
/// Gaussian family), and score every parameter's bias, spread, and interval
/// coverage against the truth. Replicates run concurrently on independent
/// generator streams; fit failures are collected, not fatal.
pub fn recovery_report_for(
    params: &SimulationParams,
    n_replicates: usize,
    spec: &ModelSpec,
) -> Result<RecoveryReport, SimulateError> {
    params.validate()?;
    if n_replicates < 2 {
        return Err(SimulateError::InvalidParams(format!(
            "recovery needs at least two replicates, got {n_replicates}"
        )));
    }

    let outcomes: Vec<Result<ReplicateEstimates, String>> = (0..n_replicates)
        .into_par_iter()
        .map(|r| run_replicate(params, r as u64, spec))
        .collect();

    let mut used = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(est) => used.push(est),
            Err(message) => failures.push(message),
        }
    }
    let n_converged = used.iter().filter(|e| e.converged).count();

    let mut fixed = Vec::new();
    let mut variances = Vec::new();
    if !used.is_empty() {
        for (idx, (name, effect)) in
            spec.fixed_names().iter().zip(spec.fixed.iter()).enumerate()
        {
            let truth = fixed_truth(params, *effect);
            let estimates: Vec<f64> = used.iter().map(|e| e.fixed[idx].0).collect();
            let covered: Vec<bool> = used
                .iter()
                .map(|e| {
                    let (lo, hi) = e.fixed[idx].1;
                    lo <= truth && truth <= hi
                })
                .collect();
            fixed.push(summarize(name, truth, &estimates, Some(&covered)));
        }
        for (idx, (name, truth)) in variance_truths(params, spec).iter().enumerate() {
            let estimates: Vec<f64> = used.iter().map(|e| e.variances[idx]).collect();
            variances.push(summarize(name, *truth, &estimates, None));
        }
    }

    Ok(RecoveryReport {
        truth: *params,
        model: spec.name.clone(),
        n_replicates,
        n_used: used.len(),
        n_converged,
        failures,
        fixed,
        variances,
        rng_algorithm: RNG_ALGORITHM.to_string(),
    })
}

/// Recovery against the full Gaussian model (intercept, skip, gender, age,
/// progression, with correlated random intercepts and skip slopes).
pub fn recovery_report(
    params: &SimulationParams,
    n_replicates: usize,
) -> Result<RecoveryReport, SimulateError> {
    let spec = ModelSpec::ladder_spec("M3").expect("known model name");
    recovery_report_for(params, n_replicates, &spec)
}
