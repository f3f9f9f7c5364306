//! Typed competition records and whole-dataset validation.
//!
//! A [`Dataset`] bundles the climber registry, the event registry, attempt
//! records, and raw skip-technique observations. Construction sorts every
//! container into a canonical order, so two datasets built from the same
//! records in any order compare equal. [`Dataset::validate`] reports every
//! violation it can find, never just the first.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// Opaque climber identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClimberId(String);

impl ClimberId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClimberId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Opaque event identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EventId(String);

impl EventId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EventId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    pub fn as_token(self) -> &'static str {
        match self {
            Gender::Female => "female",
            Gender::Male => "male",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        match s {
            "female" => Some(Gender::Female),
            "male" => Some(Gender::Male),
            _ => None,
        }
    }

    /// Model coding: female = 1, male = 0.
    pub fn indicator(self) -> f64 {
        match self {
            Gender::Female => 1.0,
            Gender::Male => 0.0,
        }
    }

    /// Row label used in descriptive tables.
    pub fn category_label(self) -> &'static str {
        match self {
            Gender::Female => "Women",
            Gender::Male => "Men",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_token())
    }
}

/// Date of birth as recorded: a full date, a bare year, or absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Dob {
    Date(NaiveDate),
    YearOnly(i32),
    Missing,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ClimberProfile {
    pub id: ClimberId,
    pub name: String,
    pub gender: Gender,
    pub dob: Dob,
    /// Where the date of birth was found (free text).
    pub dob_source: String,
    /// When the source was consulted, if recorded.
    pub dob_accessed: Option<NaiveDate>,
}

/// Competition round. `stage` orders rounds within an event; the two finals
/// share the last stage (a climber reaches one or the other).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RoundKind {
    Qualification,
    Final16,
    Final8,
    Semifinal,
    SmallFinal,
    BigFinal,
}

impl RoundKind {
    pub const ALL: [RoundKind; 6] = [
        RoundKind::Qualification,
        RoundKind::Final16,
        RoundKind::Final8,
        RoundKind::Semifinal,
        RoundKind::SmallFinal,
        RoundKind::BigFinal,
    ];

    pub fn as_token(self) -> &'static str {
        match self {
            RoundKind::Qualification => "qualification",
            RoundKind::Final16 => "final_16",
            RoundKind::Final8 => "final_8",
            RoundKind::Semifinal => "semifinal",
            RoundKind::SmallFinal => "small_final",
            RoundKind::BigFinal => "big_final",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|r| r.as_token() == s)
    }

    /// Position in the event: 0 = qualification, 4 = the two finals.
    pub fn stage(self) -> u8 {
        match self {
            RoundKind::Qualification => 0,
            RoundKind::Final16 => 1,
            RoundKind::Final8 => 2,
            RoundKind::Semifinal => 3,
            RoundKind::SmallFinal | RoundKind::BigFinal => 4,
        }
    }

    /// Everything after qualification counts as the final stage of an event.
    pub fn is_final_stage(self) -> bool {
        self.stage() > 0
    }
}

impl fmt::Display for RoundKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_token())
    }
}

/// What happened in one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    /// Wall time in seconds; strictly positive for a valid run.
    Time(f64),
    Fall,
    FalseStart,
    DidNotStart,
}

impl Outcome {
    pub fn time(self) -> Option<f64> {
        match self {
            Outcome::Time(t) => Some(t),
            _ => None,
        }
    }

    pub fn is_fall(self) -> bool {
        matches!(self, Outcome::Fall)
    }

    pub fn is_false_start(self) -> bool {
        matches!(self, Outcome::FalseStart)
    }

    pub fn is_did_not_start(self) -> bool {
        matches!(self, Outcome::DidNotStart)
    }

    fn sort_key(self) -> (u8, u64) {
        match self {
            Outcome::Time(t) => (0, t.to_bits()),
            Outcome::Fall => (1, 0),
            Outcome::FalseStart => (2, 0),
            Outcome::DidNotStart => (3, 0),
        }
    }
}

/// One climber's result in one round of one event.
#[derive(Debug, Clone, PartialEq)]
pub struct AttemptRecord {
    pub event_id: EventId,
    pub climber_id: ClimberId,
    pub round: RoundKind,
    pub outcome: Outcome,
}

impl AttemptRecord {
    fn sort_key(&self) -> (&EventId, &ClimberId, RoundKind, (u8, u64)) {
        (&self.event_id, &self.climber_id, self.round, self.outcome.sort_key())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub id: EventId,
    pub name: String,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
}

/// A raw skip-technique observation: the climber was seen using (or not
/// using) the technique at this event.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SkipObservation {
    pub climber_id: ClimberId,
    pub event_id: EventId,
    pub uses_skip: bool,
}

/// Complete dataset with canonical internal ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    climbers: Vec<ClimberProfile>,
    events: Vec<Event>,
    attempts: Vec<AttemptRecord>,
    skip_annotations: BTreeMap<(ClimberId, EventId), bool>,
}

impl Dataset {
    pub fn new(
        mut climbers: Vec<ClimberProfile>,
        mut events: Vec<Event>,
        mut attempts: Vec<AttemptRecord>,
        skip_annotations: BTreeMap<(ClimberId, EventId), bool>,
    ) -> Self {
        climbers.sort();
        events.sort_by(|a, b| a.id.cmp(&b.id).then_with(|| a.start_date.cmp(&b.start_date)));
        attempts.sort_by(|a, b| a.sort_key().partial_cmp(&b.sort_key()).unwrap());
        Self { climbers, events, attempts, skip_annotations }
    }

    pub fn climbers(&self) -> &[ClimberProfile] {
        &self.climbers
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn attempts(&self) -> &[AttemptRecord] {
        &self.attempts
    }

    pub fn skip_annotations(&self) -> &BTreeMap<(ClimberId, EventId), bool> {
        &self.skip_annotations
    }

    pub fn skip_observations(&self) -> Vec<SkipObservation> {
        self.skip_annotations
            .iter()
            .map(|((c, e), &u)| SkipObservation {
                climber_id: c.clone(),
                event_id: e.clone(),
                uses_skip: u,
            })
            .collect()
    }

    pub fn climber(&self, id: &ClimberId) -> Option<&ClimberProfile> {
        self.climbers
            .binary_search_by(|p| p.id.cmp(id))
            .ok()
            .map(|i| &self.climbers[i])
    }

    pub fn event(&self, id: &EventId) -> Option<&Event> {
        self.events
            .binary_search_by(|e| e.id.cmp(id))
            .ok()
            .map(|i| &self.events[i])
    }

    /// Events ordered by start date, ties broken by id: the timeline used for
    /// forward-filling and time-progression covariates.
    pub fn events_chronological(&self) -> Vec<&Event> {
        let mut evs: Vec<&Event> = self.events.iter().collect();
        evs.sort_by(|a, b| a.start_date.cmp(&b.start_date).then_with(|| a.id.cmp(&b.id)));
        evs
    }

    /// (female, male) climber counts.
    pub fn gender_counts(&self) -> (usize, usize) {
        let female = self.climbers.iter().filter(|c| c.gender == Gender::Female).count();
        (female, self.climbers.len() - female)
    }

    /// Check every structural invariant and report all violations found.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();

        for pair in self.climbers.windows(2) {
            if pair[0].id == pair[1].id {
                violations.push(Violation::DuplicateClimberId { climber: pair[0].id.clone() });
            }
        }
        for pair in self.events.windows(2) {
            if pair[0].id == pair[1].id {
                violations.push(Violation::DuplicateEventId { event: pair[0].id.clone() });
            }
        }
        for event in &self.events {
            if event.start_date > event.end_date {
                violations.push(Violation::EventDatesReversed { event: event.id.clone() });
            }
        }

        let mut seen: BTreeSet<(&EventId, &ClimberId, RoundKind)> = BTreeSet::new();
        for attempt in &self.attempts {
            let key = (&attempt.event_id, &attempt.climber_id, attempt.round);
            if !seen.insert(key) {
                violations.push(Violation::DuplicateAttempt {
                    event: attempt.event_id.clone(),
                    climber: attempt.climber_id.clone(),
                    round: attempt.round,
                });
            }
            if self.climber(&attempt.climber_id).is_none() {
                violations.push(Violation::UnknownClimber {
                    climber: attempt.climber_id.clone(),
                    event: attempt.event_id.clone(),
                    round: attempt.round,
                });
            }
            if self.event(&attempt.event_id).is_none() {
                violations.push(Violation::UnknownEvent {
                    event: attempt.event_id.clone(),
                    climber: attempt.climber_id.clone(),
                    round: attempt.round,
                });
            }
            if let Outcome::Time(t) = attempt.outcome {
                if !(t.is_finite() && t > 0.0) {
                    violations.push(Violation::NonPositiveTime {
                        event: attempt.event_id.clone(),
                        climber: attempt.climber_id.clone(),
                        round: attempt.round,
                        time: t,
                    });
                }
            }
        }

        // A full date of birth must lie strictly before every event the
        // climber appears in.
        let mut attended: BTreeMap<&ClimberId, BTreeSet<&EventId>> = BTreeMap::new();
        for attempt in &self.attempts {
            attended.entry(&attempt.climber_id).or_default().insert(&attempt.event_id);
        }
        for climber in &self.climbers {
            if let Dob::Date(dob) = climber.dob {
                if let Some(events) = attended.get(&climber.id) {
                    for event_id in events {
                        if let Some(event) = self.event(event_id) {
                            if dob >= event.start_date {
                                violations.push(Violation::DobNotBeforeEvent {
                                    climber: climber.id.clone(),
                                    event: (*event_id).clone(),
                                    dob,
                                    event_start: event.start_date,
                                });
                            }
                        }
                    }
                }
            }
        }

        for (climber_id, event_id) in self.skip_annotations.keys() {
            if self.climber(climber_id).is_none() {
                violations.push(Violation::SkipUnknownClimber {
                    climber: climber_id.clone(),
                    event: event_id.clone(),
                });
            }
            if self.event(event_id).is_none() {
                violations.push(Violation::SkipUnknownEvent {
                    climber: climber_id.clone(),
                    event: event_id.clone(),
                });
            }
        }

        let (female, male) = self.gender_counts();
        if female + male != self.climbers.len() {
            violations.push(Violation::GenderPartitionMismatch {
                female,
                male,
                total: self.climbers.len(),
            });
        }

        ValidationReport { violations }
    }
}

/// A single invariant violation, with enough coordinates to find the record.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DuplicateClimberId { climber: ClimberId },
    DuplicateEventId { event: EventId },
    DuplicateAttempt { event: EventId, climber: ClimberId, round: RoundKind },
    UnknownClimber { climber: ClimberId, event: EventId, round: RoundKind },
    UnknownEvent { event: EventId, climber: ClimberId, round: RoundKind },
    NonPositiveTime { event: EventId, climber: ClimberId, round: RoundKind, time: f64 },
    DobNotBeforeEvent { climber: ClimberId, event: EventId, dob: NaiveDate, event_start: NaiveDate },
    EventDatesReversed { event: EventId },
    SkipUnknownClimber { climber: ClimberId, event: EventId },
    SkipUnknownEvent { climber: ClimberId, event: EventId },
    GenderPartitionMismatch { female: usize, male: usize, total: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateClimberId { climber } => {
                write!(f, "duplicate climber id {climber}")
            }
            Violation::DuplicateEventId { event } => write!(f, "duplicate event id {event}"),
            Violation::DuplicateAttempt { event, climber, round } => write!(
                f,
                "more than one record for climber {climber} in round {round} of event {event}"
            ),
            Violation::UnknownClimber { climber, event, round } => write!(
                f,
                "attempt references unknown climber {climber} (event {event}, round {round})"
            ),
            Violation::UnknownEvent { event, climber, round } => write!(
                f,
                "attempt references unknown event {event} (climber {climber}, round {round})"
            ),
            Violation::NonPositiveTime { event, climber, round, time } => write!(
                f,
                "non-positive time {time} for climber {climber} in round {round} of event {event}"
            ),
            Violation::DobNotBeforeEvent { climber, event, dob, event_start } => write!(
                f,
                "climber {climber} date of birth {dob} is not before event {event} starting {event_start}"
            ),
            Violation::EventDatesReversed { event } => {
                write!(f, "event {event} starts after it ends")
            }
            Violation::SkipUnknownClimber { climber, event } => write!(
                f,
                "skip observation references unknown climber {climber} (event {event})"
            ),
            Violation::SkipUnknownEvent { climber, event } => write!(
                f,
                "skip observation references unknown event {event} (climber {climber})"
            ),
            Violation::GenderPartitionMismatch { female, male, total } => write!(
                f,
                "gender partition inconsistent: {female} + {male} != {total}"
            ),
        }
    }
}

/// Every violation found in one validation pass, in deterministic order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return writeln!(f, "no violations");
        }
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}
