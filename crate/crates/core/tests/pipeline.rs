//! End-to-end pipeline properties: the skip forward-fill against an
//! independent reference over randomized observation sets, and CSV
//! round-trips over datasets with hostile names.

use chrono::NaiveDate;
use proptest::prelude::*;
use speedclimb::data::{
    AttemptRecord, ClimberId, ClimberProfile, Dataset, Dob, Event, EventId, Gender, Outcome,
    RoundKind,
};
use speedclimb::ingest;
use speedclimb::preprocess::propagate_skip;
use std::collections::BTreeMap;

fn climber(i: usize) -> ClimberProfile {
    ClimberProfile {
        id: ClimberId::new(&format!("c{i:02}")),
        name: format!("Climber {i}"),
        gender: if i % 2 == 0 { Gender::Female } else { Gender::Male },
        dob: Dob::Date(NaiveDate::from_ymd_opt(1996, 5, 17).unwrap()),
        dob_source: "registry".into(),
        dob_accessed: None,
    }
}

fn event(j: usize) -> Event {
    let start = NaiveDate::from_ymd_opt(2019, 1, 5).unwrap() + chrono::Days::new(14 * j as u64);
    Event {
        id: EventId::new(&format!("e{j:02}")),
        name: format!("Event {j}"),
        start_date: start,
        end_date: start + chrono::Days::new(1),
    }
}

/// Independent forward-fill: walk the timeline per climber carrying the
/// last observed value, starting from `false`.
fn reference_fill(
    n_climbers: usize,
    n_events: usize,
    observed: &BTreeMap<(usize, usize), bool>,
) -> BTreeMap<(usize, usize), bool> {
    let mut out = BTreeMap::new();
    for c in 0..n_climbers {
        let mut current = false;
        for e in 0..n_events {
            if let Some(&v) = observed.get(&(c, e)) {
                current = v;
            }
            out.insert((c, e), current);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn forward_fill_matches_the_reference_walk(
        n_climbers in 1usize..4,
        n_events in 2usize..8,
        raw in prop::collection::vec((0usize..4, 0usize..8, any::<bool>()), 0..12),
    ) {
        let observed: BTreeMap<(usize, usize), bool> = raw
            .into_iter()
            .filter(|&(c, e, _)| c < n_climbers && e < n_events)
            .map(|(c, e, v)| ((c, e), v))
            .collect();

        let annotations: BTreeMap<(ClimberId, EventId), bool> = observed
            .iter()
            .map(|(&(c, e), &v)| ((climber(c).id, event(e).id), v))
            .collect();
        let dataset = Dataset::new(
            (0..n_climbers).map(climber).collect(),
            (0..n_events).map(event).collect(),
            vec![],
            annotations,
        );

        let filled = propagate_skip(&dataset.skip_observations(), &dataset);
        let expected = reference_fill(n_climbers, n_events, &observed);

        for ((c, e), want) in &expected {
            let got = filled.get(&(climber(*c).id, event(*e).id)).copied();
            prop_assert_eq!(got, Some(*want), "climber {} event {}", c, e);
        }
        prop_assert_eq!(filled.len(), expected.len(), "exactly one value per pair");

        // Values change only at observed events.
        for c in 0..n_climbers {
            let mut prev = false;
            for e in 0..n_events {
                let now = filled[&(climber(c).id, event(e).id)];
                if now != prev {
                    prop_assert!(
                        observed.contains_key(&(c, e)),
                        "climber {} changed at unobserved event {}", c, e
                    );
                }
                prev = now;
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn datasets_round_trip_through_the_csv_files(
        names in prop::collection::vec("[A-Za-z ,\"']{1,12}", 3),
        times in prop::collection::vec(5.0f64..12.0, 6),
        outcomes in prop::collection::vec(0u8..4, 6),
    ) {
        let climbers: Vec<ClimberProfile> = (0..3)
            .map(|i| ClimberProfile { name: names[i].clone(), ..climber(i) })
            .collect();
        let events: Vec<Event> = (0..2).map(event).collect();
        let mut attempts = Vec::new();
        for (k, (&t, &o)) in times.iter().zip(&outcomes).enumerate() {
            let outcome = match o {
                0 => Outcome::Time(t),
                1 => Outcome::Fall,
                2 => Outcome::FalseStart,
                _ => Outcome::DidNotStart,
            };
            attempts.push(AttemptRecord {
                event_id: events[k % 2].id.clone(),
                climber_id: climbers[k % 3].id.clone(),
                round: if k < 2 { RoundKind::Qualification } else { RoundKind::Final16 },
                outcome,
            });
        }
        let annotations =
            BTreeMap::from([((climbers[0].id.clone(), events[1].id.clone()), true)]);
        let dataset = Dataset::new(climbers, events, attempts, annotations);

        let dir = tempfile::tempdir().unwrap();
        let (r, c, s) =
            (dir.path().join("r.csv"), dir.path().join("c.csv"), dir.path().join("s.csv"));
        ingest::write_results(&dataset, &r).unwrap();
        ingest::write_climbers(&dataset, &c).unwrap();
        ingest::write_skip_observations(&dataset, &s).unwrap();
        let reloaded = ingest::load_dataset(&r, &c, &s).unwrap();
        prop_assert_eq!(reloaded, dataset);
    }
}
