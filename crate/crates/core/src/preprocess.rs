//! From validated records to model-ready rows.
//!
//! This module owns every preprocessing rule: forward-filling the sparse
//! skip-technique observations, age computation and event-mean imputation,
//! the time-progression covariate, best times per (climber, event),
//! descriptive statistics, per-event time ranges, and the standardization
//! applied to the continuous covariates.

use crate::data::{
    AttemptRecord, ClimberId, Dataset, Dob, Event, EventId, Gender, SkipObservation,
};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

/// Days per year used for age arithmetic.
const DAYS_PER_YEAR: f64 = 365.25;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("climber {climber} would be younger than zero at event {event}")]
    NegativeAge { climber: ClimberId, event: EventId },
    #[error("event {event} has no known ages to average")]
    NoAgesAtEvent { event: EventId },
    #[error("no events with final-stage attempts for {category}")]
    ZeroEvents { category: &'static str },
    #[error("attempt references unknown climber {climber}")]
    UnknownClimber { climber: ClimberId },
    #[error("attempt references unknown event {event}")]
    UnknownEvent { event: EventId },
    #[error("dataset contains no events")]
    NoEvents,
}

/// Mean/SD pairs used to z-score the continuous covariates; persisted next
/// to every export and every fit so new data can be scored identically.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScalingParams {
    pub age_mean: f64,
    pub age_sd: f64,
    pub progression_mean: f64,
    pub progression_sd: f64,
}

/// One modeling observation: a climber's best valid time at one event, with
/// raw and standardized covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRow {
    pub climber_id: ClimberId,
    pub event_id: EventId,
    /// Best valid time in seconds.
    pub y: f64,
    /// Natural log of `y`: the model response.
    pub log_y: f64,
    /// Skip-technique indicator (0/1) from the forward-filled observations.
    pub x1: f64,
    /// Gender coding: female = 1, male = 0.
    pub x2: f64,
    /// Age in years at the event start.
    pub x3_raw: f64,
    /// Days since the earliest event in the dataset.
    pub x4_raw: i64,
    /// Standardized age.
    pub x3: f64,
    /// Standardized time progression.
    pub x4: f64,
    /// True when the age came from the event mean rather than a date of birth.
    pub age_imputed: bool,
}

/// Model rows together with the scaling that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelData {
    pub rows: Vec<ModelRow>,
    pub scaling: ScalingParams,
}

/// One binomial observation: did the climber fall at this event?
#[derive(Debug, Clone, PartialEq)]
pub struct FallRow {
    pub climber_id: ClimberId,
    pub event_id: EventId,
    pub fall: bool,
    pub x1: f64,
    pub x2: f64,
    pub x3_raw: f64,
    pub x4_raw: i64,
    pub x3: f64,
    pub x4: f64,
    pub age_imputed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FallData {
    pub rows: Vec<FallRow>,
    pub scaling: ScalingParams,
}

/// Final-stage descriptive counts for one category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DisciplineStats {
    pub gender: Gender,
    pub events: usize,
    pub falls: usize,
    pub false_starts: usize,
}

impl DisciplineStats {
    pub fn fall_rate(&self) -> f64 {
        self.falls as f64 / self.events as f64
    }

    pub fn false_start_rate(&self) -> f64 {
        self.false_starts as f64 / self.events as f64
    }
}

/// Spread between a climber's worst and best valid time at one event.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRange {
    pub climber_id: ClimberId,
    pub event_id: EventId,
    pub range: f64,
}

/// Forward-fill sparse skip observations over the event timeline.
///
/// For every climber in the registry and every event (chronological order,
/// ties broken by event id): events before the climber's first observation
/// map to `false`; from each observation onward the observed value carries
/// forward until a later observation changes it.
pub fn propagate_skip(
    observations: &[SkipObservation],
    dataset: &Dataset,
) -> BTreeMap<(ClimberId, EventId), bool> {
    let timeline = dataset.events_chronological();
    let position: BTreeMap<&EventId, usize> =
        timeline.iter().enumerate().map(|(i, e)| (&e.id, i)).collect();

    let mut per_climber: BTreeMap<&ClimberId, BTreeMap<usize, bool>> = BTreeMap::new();
    for obs in observations {
        if let Some(&pos) = position.get(&obs.event_id) {
            per_climber
                .entry(&obs.climber_id)
                .or_default()
                .insert(pos, obs.uses_skip);
        }
    }

    let mut filled = BTreeMap::new();
    for climber in dataset.climbers() {
        let marks = per_climber.get(&climber.id);
        let mut state = false;
        for (pos, event) in timeline.iter().enumerate() {
            if let Some(&value) = marks.and_then(|m| m.get(&pos)) {
                state = value;
            }
            filled.insert((climber.id.clone(), event.id.clone()), state);
        }
    }
    filled
}

/// Age in years at the event start. A year-only date of birth counts from
/// January 1 of that year; a missing one defers to [`fill_missing_ages`].
pub fn compute_age(
    profile: &crate::data::ClimberProfile,
    event: &Event,
) -> Result<Option<f64>, PreprocessError> {
    let dob = match profile.dob {
        Dob::Date(d) => d,
        Dob::YearOnly(y) => NaiveDate::from_ymd_opt(y, 1, 1).ok_or_else(|| {
            PreprocessError::NegativeAge { climber: profile.id.clone(), event: event.id.clone() }
        })?,
        Dob::Missing => return Ok(None),
    };
    let days = (event.start_date - dob).num_days();
    if days < 0 {
        return Err(PreprocessError::NegativeAge {
            climber: profile.id.clone(),
            event: event.id.clone(),
        });
    }
    Ok(Some(days as f64 / DAYS_PER_YEAR))
}

/// A partially-built age column: used by [`fill_missing_ages`].
#[derive(Debug, Clone, PartialEq)]
pub struct AgeDraft {
    pub event_id: EventId,
    pub age: Option<f64>,
    pub imputed: bool,
}

/// Replace missing ages by the mean of the known ages at the same event and
/// flag them as imputed.
pub fn fill_missing_ages(drafts: &mut [AgeDraft]) -> Result<(), PreprocessError> {
    let mut sums: BTreeMap<&EventId, (f64, usize)> = BTreeMap::new();
    for draft in drafts.iter() {
        if let Some(age) = draft.age {
            let entry = sums.entry(&draft.event_id).or_insert((0.0, 0));
            entry.0 += age;
            entry.1 += 1;
        }
    }
    let means: BTreeMap<EventId, f64> = sums
        .into_iter()
        .map(|(id, (sum, n))| (id.clone(), sum / n as f64))
        .collect();

    for draft in drafts.iter_mut() {
        if draft.age.is_none() {
            let mean = means.get(&draft.event_id).ok_or_else(|| {
                PreprocessError::NoAgesAtEvent { event: draft.event_id.clone() }
            })?;
            draft.age = Some(*mean);
            draft.imputed = true;
        }
    }
    Ok(())
}

/// Days between the dataset's first event and this one.
pub fn time_progression(event: &Event, first_event_date: NaiveDate) -> i64 {
    (event.start_date - first_event_date).num_days()
}

/// Fastest valid time among the attempts, if any. Falls, false starts and
/// no-shows carry no time and never contribute.
pub fn best_time<'a>(attempts: impl IntoIterator<Item = &'a AttemptRecord>) -> Option<f64> {
    attempts
        .into_iter()
        .filter_map(|a| a.outcome.time())
        .fold(None, |best, t| Some(best.map_or(t, |b: f64| b.min(t))))
}

/// True when any attempt at the event ended in a fall.
pub fn fall_indicator<'a>(attempts: impl IntoIterator<Item = &'a AttemptRecord>) -> bool {
    attempts.into_iter().any(|a| a.outcome.is_fall())
}

/// Final-stage event/fall/false-start counts for one category. Events count
/// when the category has at least one non-DNS final-stage attempt there.
pub fn discipline_stats(
    dataset: &Dataset,
    gender: Gender,
) -> Result<DisciplineStats, PreprocessError> {
    let mut events: BTreeMap<&EventId, ()> = BTreeMap::new();
    let mut falls = 0usize;
    let mut false_starts = 0usize;
    for attempt in dataset.attempts() {
        if !attempt.round.is_final_stage() || attempt.outcome.is_did_not_start() {
            continue;
        }
        let Some(profile) = dataset.climber(&attempt.climber_id) else { continue };
        if profile.gender != gender {
            continue;
        }
        events.insert(&attempt.event_id, ());
        if attempt.outcome.is_fall() {
            falls += 1;
        }
        if attempt.outcome.is_false_start() {
            false_starts += 1;
        }
    }
    if events.is_empty() {
        return Err(PreprocessError::ZeroEvents { category: gender.category_label() });
    }
    Ok(DisciplineStats { gender, events: events.len(), falls, false_starts })
}

/// Worst-minus-best valid time per (climber, event); pairs with fewer than
/// two valid times have no range.
pub fn event_ranges(dataset: &Dataset) -> Vec<EventRange> {
    let mut ranges = Vec::new();
    for ((climber_id, event_id), attempts) in group_attempts(dataset) {
        let times: Vec<f64> = attempts.iter().filter_map(|a| a.outcome.time()).collect();
        if times.len() >= 2 {
            let best = times.iter().copied().fold(f64::INFINITY, f64::min);
            let worst = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            ranges.push(EventRange {
                climber_id: climber_id.clone(),
                event_id: event_id.clone(),
                range: worst - best,
            });
        }
    }
    ranges
}

fn group_attempts(dataset: &Dataset) -> BTreeMap<(&ClimberId, &EventId), Vec<&AttemptRecord>> {
    let mut groups: BTreeMap<(&ClimberId, &EventId), Vec<&AttemptRecord>> = BTreeMap::new();
    for attempt in dataset.attempts() {
        groups
            .entry((&attempt.climber_id, &attempt.event_id))
            .or_default()
            .push(attempt);
    }
    groups
}

/// z-scores with the sample standard deviation. Degenerate columns (fewer
/// than two values, or zero variance) standardize to zero.
pub(crate) fn standardize(values: &[f64]) -> (Vec<f64>, f64, f64) {
    let n = values.len();
    if n == 0 {
        return (Vec::new(), 0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (vec![0.0; n], mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if sd == 0.0 {
        return (vec![0.0; n], mean, 0.0);
    }
    (values.iter().map(|v| (v - mean) / sd).collect(), mean, sd)
}

struct CovariateDraft {
    climber_id: ClimberId,
    event_id: EventId,
    x1: f64,
    x2: f64,
    x4_raw: i64,
}

/// Covariates shared by both row universes; the standardized columns `x3`
/// and `x4` are aligned index-wise with `drafts`.
struct CovariateBundle {
    drafts: Vec<CovariateDraft>,
    ages: Vec<AgeDraft>,
    scaling: ScalingParams,
    x3: Vec<f64>,
    x4: Vec<f64>,
}

/// Shared covariate construction for both row universes. `keep` decides which
/// (climber, event) groups become rows.
fn build_covariates(
    dataset: &Dataset,
    keep: impl Fn(&[&AttemptRecord]) -> bool,
) -> Result<CovariateBundle, PreprocessError> {
    let first_event_date = dataset
        .events_chronological()
        .first()
        .map(|e| e.start_date)
        .ok_or(PreprocessError::NoEvents)?;
    let filled_skip = propagate_skip(&dataset.skip_observations(), dataset);

    let mut drafts = Vec::new();
    let mut ages = Vec::new();
    for ((climber_id, event_id), attempts) in group_attempts(dataset) {
        if !keep(&attempts) {
            continue;
        }
        let profile = dataset
            .climber(climber_id)
            .ok_or_else(|| PreprocessError::UnknownClimber { climber: climber_id.clone() })?;
        let event = dataset
            .event(event_id)
            .ok_or_else(|| PreprocessError::UnknownEvent { event: event_id.clone() })?;
        let age = compute_age(profile, event)?;
        let x1 = filled_skip
            .get(&(climber_id.clone(), event_id.clone()))
            .copied()
            .unwrap_or(false);
        drafts.push(CovariateDraft {
            climber_id: climber_id.clone(),
            event_id: event_id.clone(),
            x1: if x1 { 1.0 } else { 0.0 },
            x2: profile.gender.indicator(),
            x4_raw: time_progression(event, first_event_date),
        });
        ages.push(AgeDraft { event_id: event_id.clone(), age, imputed: false });
    }

    fill_missing_ages(&mut ages)?;
    let age_values: Vec<f64> = ages.iter().map(|a| a.age.expect("filled")).collect();
    let progression_values: Vec<f64> = drafts.iter().map(|d| d.x4_raw as f64).collect();
    let (x3, age_mean, age_sd) = standardize(&age_values);
    let (x4, progression_mean, progression_sd) = standardize(&progression_values);
    let scaling = ScalingParams { age_mean, age_sd, progression_mean, progression_sd };
    Ok(CovariateBundle { drafts, ages, scaling, x3, x4 })
}

/// Build the Gaussian model rows: one per (climber, event) with a valid best
/// time. Returns the rows and the scaling parameters used for x3/x4.
pub fn build_model_rows(dataset: &Dataset) -> Result<ModelData, PreprocessError> {
    // Collect best times first so the row universe is fixed before scaling.
    let mut best: BTreeMap<(ClimberId, EventId), f64> = BTreeMap::new();
    for ((climber_id, event_id), attempts) in group_attempts(dataset) {
        if let Some(t) = best_time(attempts.iter().copied()) {
            best.insert((climber_id.clone(), event_id.clone()), t);
        }
    }
    let CovariateBundle { drafts, ages, scaling, x3, x4 } = build_covariates(dataset, |attempts| {
        best_time(attempts.iter().copied()).is_some()
    })?;

    let rows = drafts
        .into_iter()
        .zip(ages)
        .zip(x3)
        .zip(x4)
        .map(|(((draft, age), x3), x4)| {
            let y = best[&(draft.climber_id.clone(), draft.event_id.clone())];
            ModelRow {
                climber_id: draft.climber_id,
                event_id: draft.event_id,
                y,
                log_y: y.ln(),
                x1: draft.x1,
                x2: draft.x2,
                x3_raw: age.age.expect("filled"),
                x4_raw: draft.x4_raw,
                x3,
                x4,
                age_imputed: age.imputed,
            }
        })
        .collect();
    Ok(ModelData { rows, scaling })
}

/// Build the binomial rows: one per (climber, event) with at least one
/// attempt that was actually started (everything but DNS). The outcome is
/// whether any attempt there ended in a fall. x3/x4 are re-standardized
/// within this row universe; the scaling is returned alongside.
pub fn build_fall_rows(dataset: &Dataset) -> Result<FallData, PreprocessError> {
    let mut fell: BTreeMap<(ClimberId, EventId), bool> = BTreeMap::new();
    for ((climber_id, event_id), attempts) in group_attempts(dataset) {
        if attempts.iter().any(|a| !a.outcome.is_did_not_start()) {
            fell.insert(
                (climber_id.clone(), event_id.clone()),
                fall_indicator(attempts.iter().copied()),
            );
        }
    }
    let CovariateBundle { drafts, ages, scaling, x3, x4 } = build_covariates(dataset, |attempts| {
        attempts.iter().any(|a| !a.outcome.is_did_not_start())
    })?;

    let rows = drafts
        .into_iter()
        .zip(ages)
        .zip(x3)
        .zip(x4)
        .map(|(((draft, age), x3), x4)| FallRow {
            fall: fell[&(draft.climber_id.clone(), draft.event_id.clone())],
            climber_id: draft.climber_id,
            event_id: draft.event_id,
            x1: draft.x1,
            x2: draft.x2,
            x3_raw: age.age.expect("filled"),
            x4_raw: draft.x4_raw,
            x3,
            x4,
            age_imputed: age.imputed,
        })
        .collect();
    Ok(FallData { rows, scaling })
}

pub const MODEL_ROWS_HEADER: [&str; 11] = [
    "climber_id", "event_id", "y", "log_y", "x1", "x2", "x3_raw", "x4_raw", "x3", "x4",
    "age_imputed",
];

/// Write model rows as CSV (full precision; rounding is a presentation
/// concern).
pub fn write_model_rows(data: &ModelData, path: &Path) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", MODEL_ROWS_HEADER.join(","))?;
    for r in &data.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.climber_id, r.event_id, r.y, r.log_y, r.x1, r.x2, r.x3_raw, r.x4_raw, r.x3, r.x4,
            r.age_imputed
        )?;
    }
    out.flush()
}

/// Write the scaling sidecar next to a model-row export.
pub fn write_scaling(scaling: &ScalingParams, path: &Path) -> std::io::Result<()> {
    let json = serde_json::to_string_pretty(scaling).expect("scaling serializes");
    std::fs::write(path, json + "\n")
}
