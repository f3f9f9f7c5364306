//! CSV ingestion and emission for the three input files: results, the
//! climber registry, and skip-technique observations.
//!
//! Readers never silently drop rows: every malformed row is collected with
//! its line number and reason, and the whole batch is reported in one error.
//! `load_dataset` additionally checks cross-row consistency (event metadata,
//! per-climber name/gender) while assembling a [`Dataset`].

use crate::data::{
    AttemptRecord, ClimberId, ClimberProfile, Dataset, Dob, Event, EventId, Gender, Outcome,
    RoundKind, SkipObservation,
};
use chrono::NaiveDate;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use thiserror::Error;

pub const RESULTS_HEADER: [&str; 9] = [
    "event_id", "event_name", "start_date", "end_date", "climber_id", "climber_name", "gender",
    "round", "result",
];
pub const CLIMBERS_HEADER: [&str; 6] =
    ["climber_id", "name", "gender", "dob", "dob_source", "dob_accessed"];
pub const SKIPS_HEADER: [&str; 3] = ["climber_id", "event_id", "uses_skip"];

/// One malformed or inconsistent row: which file, which line, what is wrong.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub file: String,
    pub line: u64,
    pub reason: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.file, self.line, self.reason)
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: expected header `{expected}`, found `{found}`")]
    HeaderMismatch { path: String, expected: String, found: String },
    #[error("{} malformed row(s):\n{}", .0.len(), format_rows(.0))]
    Malformed(Vec<RowError>),
    #[error("dataset is internally inconsistent: {0}")]
    InconsistentDataset(String),
}

fn format_rows(rows: &[RowError]) -> String {
    rows.iter().map(|r| format!("  {r}")).collect::<Vec<_>>().join("\n")
}

struct FileReader {
    path: String,
    records: Vec<(u64, csv::StringRecord)>,
    errors: Vec<RowError>,
}

/// Read a CSV file, check its header, and split records from per-row CSV
/// errors (for example rows with the wrong number of fields).
fn open_csv(path: &Path, expected_header: &[&str]) -> Result<FileReader, IngestError> {
    let path_str = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => IngestError::Io { path: path_str.clone(), source },
            other => IngestError::Io {
                path: path_str.clone(),
                source: std::io::Error::other(format!("{other:?}")),
            },
        })?;

    let headers = reader
        .headers()
        .map_err(|e| IngestError::Io {
            path: path_str.clone(),
            source: std::io::Error::other(e.to_string()),
        })?
        .clone();
    let found: Vec<&str> = headers.iter().map(str::trim).collect();
    if found != expected_header {
        return Err(IngestError::HeaderMismatch {
            path: path_str,
            expected: expected_header.join(","),
            found: found.join(","),
        });
    }

    let mut records = Vec::new();
    let mut errors = Vec::new();
    for item in reader.records() {
        match item {
            Ok(record) => {
                let line = record.position().map_or(0, |p| p.line());
                records.push((line, record));
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                errors.push(RowError {
                    file: path_str.clone(),
                    line,
                    reason: format!("unparseable row: {e}"),
                });
            }
        }
    }
    Ok(FileReader { path: path_str, records, errors })
}

fn parse_date(s: &str) -> Result<NaiveDate, String> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| format!("invalid date `{s}`"))
}

fn nonempty(s: &str, what: &str) -> Result<String, String> {
    if s.is_empty() {
        Err(format!("empty {what}"))
    } else {
        Ok(s.to_string())
    }
}

/// One parsed line of the results file, keeping its source line for
/// cross-row consistency reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsRow {
    pub line: u64,
    pub event: Event,
    pub climber_id: ClimberId,
    pub climber_name: String,
    pub gender: Gender,
    pub round: RoundKind,
    pub outcome: Outcome,
}

impl ResultsRow {
    pub fn attempt(&self) -> AttemptRecord {
        AttemptRecord {
            event_id: self.event.id.clone(),
            climber_id: self.climber_id.clone(),
            round: self.round,
            outcome: self.outcome,
        }
    }
}

fn parse_results_record(record: &csv::StringRecord) -> Result<ResultsRow, String> {
    let event_id = nonempty(&record[0], "event_id")?;
    let event_name = record[1].to_string();
    let start_date = parse_date(&record[2])?;
    let end_date = parse_date(&record[3])?;
    let climber_id = nonempty(&record[4], "climber_id")?;
    let climber_name = record[5].to_string();
    let gender = Gender::from_token(&record[6])
        .ok_or_else(|| format!("unknown gender token `{}`", &record[6]))?;
    let round = RoundKind::from_token(&record[7])
        .ok_or_else(|| format!("unknown round token `{}`", &record[7]))?;
    let outcome = match &record[8] {
        "FALL" => Outcome::Fall,
        "FS" => Outcome::FalseStart,
        "DNS" => Outcome::DidNotStart,
        other => {
            let t: f64 = other
                .parse()
                .map_err(|_| format!("result `{other}` is neither a status token nor a time"))?;
            if !(t.is_finite() && t > 0.0) {
                return Err(format!("time must be strictly positive, got `{other}`"));
            }
            Outcome::Time(t)
        }
    };
    Ok(ResultsRow {
        line: 0,
        event: Event { id: EventId::new(event_id), name: event_name, start_date, end_date },
        climber_id: ClimberId::new(climber_id),
        climber_name,
        gender,
        round,
        outcome,
    })
}

/// Lenient read: parsed rows plus every row error, so callers can account
/// for all input lines (`rows in = rows out + errors`).
pub fn read_results_lenient(path: &Path) -> Result<(Vec<ResultsRow>, Vec<RowError>), IngestError> {
    let FileReader { path, records, mut errors } = open_csv(path, &RESULTS_HEADER)?;
    let mut rows = Vec::new();
    for (line, record) in records {
        match parse_results_record(&record) {
            Ok(mut row) => {
                row.line = line;
                rows.push(row);
            }
            Err(reason) => errors.push(RowError { file: path.clone(), line, reason }),
        }
    }
    Ok((rows, errors))
}

/// Strict read: all rows parse or the error lists every malformed row.
pub fn read_results(path: &Path) -> Result<Vec<ResultsRow>, IngestError> {
    let (rows, errors) = read_results_lenient(path)?;
    if errors.is_empty() {
        Ok(rows)
    } else {
        Err(IngestError::Malformed(errors))
    }
}

fn parse_climber_record(record: &csv::StringRecord) -> Result<ClimberProfile, String> {
    let id = nonempty(&record[0], "climber_id")?;
    let name = record[1].to_string();
    let gender = Gender::from_token(&record[2])
        .ok_or_else(|| format!("unknown gender token `{}`", &record[2]))?;
    let dob_field = &record[3];
    let dob = if dob_field.is_empty() {
        Dob::Missing
    } else if dob_field.len() == 4 && dob_field.chars().all(|c| c.is_ascii_digit()) {
        Dob::YearOnly(dob_field.parse().map_err(|_| format!("invalid year `{dob_field}`"))?)
    } else {
        Dob::Date(parse_date(dob_field)?)
    };
    let dob_accessed =
        if record[5].is_empty() { None } else { Some(parse_date(&record[5])?) };
    Ok(ClimberProfile {
        id: ClimberId::new(id),
        name,
        gender,
        dob,
        dob_source: record[4].to_string(),
        dob_accessed,
    })
}

pub fn read_climbers_lenient(
    path: &Path,
) -> Result<(Vec<ClimberProfile>, Vec<RowError>), IngestError> {
    let FileReader { path, records, mut errors } = open_csv(path, &CLIMBERS_HEADER)?;
    let mut rows: Vec<ClimberProfile> = Vec::new();
    let mut seen: BTreeMap<ClimberId, u64> = BTreeMap::new();
    for (line, record) in records {
        match parse_climber_record(&record) {
            Ok(profile) => {
                if let Some(first) = seen.get(&profile.id) {
                    errors.push(RowError {
                        file: path.clone(),
                        line,
                        reason: format!(
                            "duplicate climber_id `{}` (first seen at line {first})",
                            profile.id
                        ),
                    });
                } else {
                    seen.insert(profile.id.clone(), line);
                    rows.push(profile);
                }
            }
            Err(reason) => errors.push(RowError { file: path.clone(), line, reason }),
        }
    }
    Ok((rows, errors))
}

pub fn read_climbers(path: &Path) -> Result<Vec<ClimberProfile>, IngestError> {
    let (rows, errors) = read_climbers_lenient(path)?;
    if errors.is_empty() {
        Ok(rows)
    } else {
        Err(IngestError::Malformed(errors))
    }
}

pub fn read_skip_observations_lenient(
    path: &Path,
) -> Result<(Vec<SkipObservation>, Vec<RowError>), IngestError> {
    let FileReader { path, records, mut errors } = open_csv(path, &SKIPS_HEADER)?;
    let mut seen: BTreeMap<(ClimberId, EventId), (bool, u64)> = BTreeMap::new();
    let mut rows = Vec::new();
    for (line, record) in records {
        let climber = match nonempty(&record[0], "climber_id") {
            Ok(c) => ClimberId::new(c),
            Err(reason) => {
                errors.push(RowError { file: path.clone(), line, reason });
                continue;
            }
        };
        let event = match nonempty(&record[1], "event_id") {
            Ok(e) => EventId::new(e),
            Err(reason) => {
                errors.push(RowError { file: path.clone(), line, reason });
                continue;
            }
        };
        // Booleans are case-sensitive by contract: only `true` / `false`.
        let uses_skip = match &record[2] {
            "true" => true,
            "false" => false,
            other => {
                errors.push(RowError {
                    file: path.clone(),
                    line,
                    reason: format!("uses_skip must be `true` or `false`, got `{other}`"),
                });
                continue;
            }
        };
        match seen.get(&(climber.clone(), event.clone())) {
            Some(&(earlier, first_line)) if earlier != uses_skip => {
                errors.push(RowError {
                    file: path.clone(),
                    line,
                    reason: format!(
                        "conflicting observation for climber {climber} at event {event} \
                         (line {first_line} says {earlier})"
                    ),
                });
            }
            Some(_) => {} // identical duplicate: idempotent
            None => {
                seen.insert((climber.clone(), event.clone()), (uses_skip, line));
                rows.push(SkipObservation { climber_id: climber, event_id: event, uses_skip });
            }
        }
    }
    Ok((rows, errors))
}

pub fn read_skip_observations(path: &Path) -> Result<Vec<SkipObservation>, IngestError> {
    let (rows, errors) = read_skip_observations_lenient(path)?;
    if errors.is_empty() {
        Ok(rows)
    } else {
        Err(IngestError::Malformed(errors))
    }
}

/// Read all three files and assemble a [`Dataset`].
///
/// Climbers that appear in results but not in the registry get a synthesized
/// profile (name and gender from the results rows, date of birth missing).
/// Cross-row conflicts — differing metadata for one event, differing
/// name/gender for one climber, duplicate (event, climber, round) records —
/// are collected and reported together with any malformed rows.
pub fn load_dataset(
    results_path: &Path,
    climbers_path: &Path,
    skips_path: &Path,
) -> Result<Dataset, IngestError> {
    let (results, mut errors) = read_results_lenient(results_path)?;
    let (registry, climber_errors) = read_climbers_lenient(climbers_path)?;
    let (skips, skip_errors) = read_skip_observations_lenient(skips_path)?;
    errors.extend(climber_errors);
    errors.extend(skip_errors);

    let results_file = results_path.display().to_string();
    let mut events: BTreeMap<EventId, (Event, u64)> = BTreeMap::new();
    let mut climber_meta: BTreeMap<ClimberId, (String, Gender, u64)> = BTreeMap::new();
    let mut attempt_keys: BTreeMap<(EventId, ClimberId, RoundKind), u64> = BTreeMap::new();

    for row in &results {
        match events.get(&row.event.id) {
            Some((event, first_line)) if *event != row.event => {
                errors.push(RowError {
                    file: results_file.clone(),
                    line: row.line,
                    reason: format!(
                        "event {} metadata disagrees with line {first_line}",
                        row.event.id
                    ),
                });
            }
            Some(_) => {}
            None => {
                events.insert(row.event.id.clone(), (row.event.clone(), row.line));
            }
        }

        match climber_meta.get(&row.climber_id) {
            Some((name, gender, first_line))
                if *name != row.climber_name || *gender != row.gender =>
            {
                errors.push(RowError {
                    file: results_file.clone(),
                    line: row.line,
                    reason: format!(
                        "climber {} name/gender disagrees with line {first_line}",
                        row.climber_id
                    ),
                });
            }
            Some(_) => {}
            None => {
                climber_meta.insert(
                    row.climber_id.clone(),
                    (row.climber_name.clone(), row.gender, row.line),
                );
            }
        }

        let key = (row.event.id.clone(), row.climber_id.clone(), row.round);
        if let Some(first_line) = attempt_keys.get(&key) {
            errors.push(RowError {
                file: results_file.clone(),
                line: row.line,
                reason: format!(
                    "duplicate record for climber {} in round {} of event {} \
                     (first seen at line {first_line})",
                    row.climber_id, row.round, row.event.id
                ),
            });
        } else {
            attempt_keys.insert(key, row.line);
        }
    }

    // Registry gender must agree with the results rows.
    for profile in &registry {
        if let Some((_, gender, line)) = climber_meta.get(&profile.id) {
            if *gender != profile.gender {
                errors.push(RowError {
                    file: results_file.clone(),
                    line: *line,
                    reason: format!(
                        "climber {} gender disagrees with the registry",
                        profile.id
                    ),
                });
            }
        }
    }

    if !errors.is_empty() {
        return Err(IngestError::Malformed(errors));
    }

    let mut climbers = registry;
    for (id, (name, gender, _)) in &climber_meta {
        if !climbers.iter().any(|c| &c.id == id) {
            climbers.push(ClimberProfile {
                id: id.clone(),
                name: name.clone(),
                gender: *gender,
                dob: Dob::Missing,
                dob_source: "synthesized-from-results".into(),
                dob_accessed: None,
            });
        }
    }

    let attempts = results.iter().map(ResultsRow::attempt).collect();
    let skip_annotations = skips
        .into_iter()
        .map(|o| ((o.climber_id, o.event_id), o.uses_skip))
        .collect();

    Ok(Dataset::new(
        climbers,
        events.into_values().map(|(e, _)| e).collect(),
        attempts,
        skip_annotations,
    ))
}

fn io_err(path: &Path, e: csv::Error) -> IngestError {
    IngestError::Io {
        path: path.display().to_string(),
        source: match e.into_kind() {
            csv::ErrorKind::Io(source) => source,
            other => std::io::Error::other(format!("{other:?}")),
        },
    }
}

/// Format an outcome as its results-file token.
fn outcome_token(outcome: Outcome) -> String {
    match outcome {
        Outcome::Time(t) => format!("{t}"),
        Outcome::Fall => "FALL".into(),
        Outcome::FalseStart => "FS".into(),
        Outcome::DidNotStart => "DNS".into(),
    }
}

/// Write the results file. Every attempt needs its event and climber in the
/// registries; writing an inconsistent dataset is an error.
pub fn write_results(dataset: &Dataset, path: &Path) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(RESULTS_HEADER).map_err(|e| io_err(path, e))?;
    for attempt in dataset.attempts() {
        let event = dataset.event(&attempt.event_id).ok_or_else(|| {
            IngestError::InconsistentDataset(format!(
                "attempt references unknown event {}",
                attempt.event_id
            ))
        })?;
        let climber = dataset.climber(&attempt.climber_id).ok_or_else(|| {
            IngestError::InconsistentDataset(format!(
                "attempt references unknown climber {}",
                attempt.climber_id
            ))
        })?;
        w.write_record([
            event.id.as_str(),
            &event.name,
            &event.start_date.to_string(),
            &event.end_date.to_string(),
            climber.id.as_str(),
            &climber.name,
            climber.gender.as_token(),
            attempt.round.as_token(),
            &outcome_token(attempt.outcome),
        ])
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| IngestError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn write_climbers(dataset: &Dataset, path: &Path) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(CLIMBERS_HEADER).map_err(|e| io_err(path, e))?;
    for c in dataset.climbers() {
        let dob = match c.dob {
            Dob::Date(d) => d.to_string(),
            Dob::YearOnly(y) => format!("{y:04}"),
            Dob::Missing => String::new(),
        };
        let accessed = c.dob_accessed.map(|d| d.to_string()).unwrap_or_default();
        w.write_record([
            c.id.as_str(),
            &c.name,
            c.gender.as_token(),
            &dob,
            &c.dob_source,
            &accessed,
        ])
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| IngestError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn write_skip_observations(dataset: &Dataset, path: &Path) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(SKIPS_HEADER).map_err(|e| io_err(path, e))?;
    for ((climber, event), uses) in dataset.skip_annotations() {
        w.write_record([climber.as_str(), event.as_str(), if *uses { "true" } else { "false" }])
            .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| IngestError::Io {
        path: path.display().to_string(),
        source: e,
    })
}
