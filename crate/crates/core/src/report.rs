//! Presentation layer: render datasets and fitted models as CSV tables,
//! text summaries, and JSON documents.
//!
//! All numeric formatting happens here, at the serialization boundary;
//! upstream values stay at full precision. Rates print at two decimals and
//! model estimates at four, matching the published tables; JSON carries the
//! exact values. Every renderer is a pure function of its inputs, so
//! identical data produces byte-identical documents.

use crate::data::{Dataset, Gender};
use crate::mixed::{
    effect_multiplier, wald_test, FittedGlmm, FittedLmm, LadderComparison, WaldTest,
};
use crate::preprocess::{
    discipline_stats, event_ranges, propagate_skip, DisciplineStats, PreprocessError,
    ScalingParams,
};
use crate::simulate::{RecoveryReport, SimulatedCompetition, RNG_ALGORITHM};
use chrono::Datelike;
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Confidence level used by all reported intervals.
const CONFIDENCE: f64 = 0.95;

/// Reference climb length (seconds) used to illustrate the skip multiplier.
const EXAMPLE_SECONDS: f64 = 7.0;

fn csv_from_records<I, R, F>(header: &[&str], items: I, mut record: F) -> String
where
    I: IntoIterator<Item = R>,
    F: FnMut(R) -> Vec<String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for item in items {
        w.write_record(record(item)).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

/// Final-stage fall and false-start counts and per-event rates by category,
/// women first. Rates print at two decimals.
pub fn fall_false_start_csv(dataset: &Dataset) -> Result<String, PreprocessError> {
    let rows = [
        discipline_stats(dataset, Gender::Female)?,
        discipline_stats(dataset, Gender::Male)?,
    ];
    Ok(csv_from_records(
        &["Category", "Events", "Falls", "FalseStarts", "FallRate", "FalseStartRate"],
        rows,
        |s: DisciplineStats| {
            vec![
                s.gender.category_label().to_string(),
                s.events.to_string(),
                s.falls.to_string(),
                s.false_starts.to_string(),
                format!("{:.2}", s.fall_rate()),
                format!("{:.2}", s.false_start_rate()),
            ]
        },
    ))
}

/// Event counts per calendar year (years with no events are omitted).
pub fn events_per_year_csv(dataset: &Dataset) -> String {
    let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
    for event in dataset.events() {
        *counts.entry(event.start_date.year()).or_default() += 1;
    }
    csv_from_records(&["Year", "Events"], counts, |(year, n)| {
        vec![year.to_string(), n.to_string()]
    })
}

/// Per event and gender: how many climbers in attendance used the skip
/// technique (attendance meaning at least one attempt record there).
pub fn skip_usage_by_event_csv(dataset: &Dataset) -> String {
    let filled = propagate_skip(&dataset.skip_observations(), dataset);
    let mut attendees: BTreeMap<(&crate::data::EventId, Gender), BTreeMap<&crate::data::ClimberId, ()>> =
        BTreeMap::new();
    for attempt in dataset.attempts() {
        if let Some(profile) = dataset.climber(&attempt.climber_id) {
            attendees
                .entry((&attempt.event_id, profile.gender))
                .or_default()
                .insert(&attempt.climber_id, ());
        }
    }

    let mut rows = Vec::new();
    for event in dataset.events_chronological() {
        for gender in [Gender::Female, Gender::Male] {
            let Some(present) = attendees.get(&(&event.id, gender)) else { continue };
            let users = present
                .keys()
                .filter(|climber| {
                    filled
                        .get(&((**climber).clone(), event.id.clone()))
                        .copied()
                        .unwrap_or(false)
                })
                .count();
            rows.push((event.id.as_str(), event.start_date, gender, users));
        }
    }
    csv_from_records(
        &["EventId", "Date", "Gender", "SkipUsers"],
        rows,
        |(id, date, gender, users)| {
            vec![
                id.to_string(),
                date.to_string(),
                gender.category_label().to_string(),
                users.to_string(),
            ]
        },
    )
}

/// Tidy per-(climber, event) time ranges with year and skip status: the
/// plot data behind range-consistency comparisons. Ranges print at three
/// decimals (times are recorded to hundredths).
pub fn ranges_by_year_csv(dataset: &Dataset) -> String {
    let filled = propagate_skip(&dataset.skip_observations(), dataset);
    let ranges = event_ranges(dataset);
    csv_from_records(
        &["ClimberId", "EventId", "Year", "UsesSkip", "Range"],
        ranges,
        |r| {
            let year = dataset
                .event(&r.event_id)
                .map(|e| e.start_date.year().to_string())
                .unwrap_or_default();
            let uses = filled
                .get(&(r.climber_id.clone(), r.event_id.clone()))
                .copied()
                .unwrap_or(false);
            vec![
                r.climber_id.to_string(),
                r.event_id.to_string(),
                year,
                uses.to_string(),
                format!("{:.3}", r.range),
            ]
        },
    )
}

fn fmt_opt<T: std::fmt::Display>(value: Option<T>, f: impl Fn(T) -> String) -> String {
    value.map(f).unwrap_or_default()
}

/// Model-comparison table: BIC per model and the sequential likelihood-ratio
/// tests against each predecessor. Estimates print at four decimals.
pub fn ladder_csv(comparison: &LadderComparison<f64>) -> String {
    csv_from_records(
        &["Model", "BIC", "Statistic", "df", "p_value"],
        &comparison.rows,
        |row| {
            vec![
                row.model.clone(),
                format!("{:.4}", row.bic),
                fmt_opt(row.statistic, |s| format!("{s:.4}")),
                fmt_opt(row.df, |d| d.to_string()),
                fmt_opt(row.p_value, |p| format!("{p:.4}")),
            ]
        },
    )
}

/// Human-readable ladder table with the selection line and any convergence
/// warnings.
pub fn ladder_text(comparison: &LadderComparison<f64>) -> String {
    let mut out = String::new();
    writeln!(out, "Model comparison (ML fits, sequential tests at alpha = {})", comparison.alpha)
        .unwrap();
    writeln!(out, "{:<6} {:>12} {:>12} {:>4} {:>9}", "Model", "BIC", "Statistic", "df", "p").unwrap();
    for row in &comparison.rows {
        writeln!(
            out,
            "{:<6} {:>12.4} {:>12} {:>4} {:>9}",
            row.model,
            row.bic,
            fmt_opt(row.statistic, |s| format!("{s:.4}")),
            fmt_opt(row.df, |d| d.to_string()),
            fmt_opt(row.p_value, |p| format!("{p:.4}")),
        )
        .unwrap();
    }
    out.push_str(&ladder_selection_text(comparison));
    for warning in &comparison.warnings {
        writeln!(out, "warning: {warning}").unwrap();
    }
    out
}

/// One line naming the model the sequential tests chose.
pub fn ladder_selection_text(comparison: &LadderComparison<f64>) -> String {
    format!("Selected model: {} (alpha = {})\n", comparison.selected, comparison.alpha)
}

fn scaling_json(scaling: &Option<ScalingParams>) -> Value {
    match scaling {
        Some(s) => json!({
            "age_mean": s.age_mean,
            "age_sd": s.age_sd,
            "progression_mean": s.progression_mean,
            "progression_sd": s.progression_sd,
        }),
        None => Value::Null,
    }
}

fn scaling_text(out: &mut String, scaling: &Option<ScalingParams>) {
    if let Some(s) = scaling {
        writeln!(
            out,
            "Covariate scaling: age mean {:.4}, sd {:.4}; progression mean {:.4}, sd {:.4}",
            s.age_mean, s.age_sd, s.progression_mean, s.progression_sd
        )
        .unwrap();
    }
}

fn fixed_effects_json(names: &[String], gamma: &[f64], se: &[f64], cis: &[(f64, f64)]) -> Value {
    Value::Array(
        names
            .iter()
            .zip(gamma)
            .zip(se)
            .zip(cis)
            .map(|(((name, est), se), (lo, hi))| {
                json!({
                    "name": name,
                    "estimate": est,
                    "se": se,
                    "ci_lower": lo,
                    "ci_upper": hi,
                    "confidence": CONFIDENCE,
                })
            })
            .collect(),
    )
}

fn fixed_effects_text(
    out: &mut String,
    names: &[String],
    gamma: &[f64],
    se: &[f64],
    cis: &[(f64, f64)],
) {
    writeln!(out, "Fixed effects ({:.0}% CI):", CONFIDENCE * 100.0).unwrap();
    let width = names.iter().map(|n| n.len()).max().unwrap_or(0);
    for (((name, est), s), (lo, hi)) in names.iter().zip(gamma).zip(se).zip(cis) {
        writeln!(
            out,
            "  {name:<width$}  {est:>9.4}  (SE {s:.4})  [{lo:>9.4}, {hi:>9.4}]"
        )
        .unwrap();
    }
}

fn components_json(components: &[crate::mixed::VarComponents<f64>]) -> Value {
    Value::Array(
        components
            .iter()
            .map(|vc| {
                let variances: Vec<Value> = (0..vc.n_coords())
                    .map(|i| json!({ "coord": vc.coord_names[i], "variance": vc.variance(i) }))
                    .collect();
                let mut correlations = Vec::new();
                for i in 0..vc.n_coords() {
                    for j in 0..i {
                        correlations.push(json!({
                            "a": vc.coord_names[j],
                            "b": vc.coord_names[i],
                            "covariance": vc.covariance(j, i),
                            "correlation": vc.correlation(j, i),
                        }));
                    }
                }
                json!({
                    "factor": vc.factor,
                    "variances": variances,
                    "correlations": correlations,
                })
            })
            .collect(),
    )
}

fn components_text(out: &mut String, components: &[crate::mixed::VarComponents<f64>]) {
    writeln!(out, "Random effects:").unwrap();
    for vc in components {
        let mut parts: Vec<String> = (0..vc.n_coords())
            .map(|i| format!("var({}) = {:.4}", vc.coord_names[i], vc.variance(i)))
            .collect();
        for i in 0..vc.n_coords() {
            for j in 0..i {
                let corr = vc
                    .correlation(j, i)
                    .map(|c| format!("{c:.4}"))
                    .unwrap_or_else(|| "undefined".to_string());
                parts.push(format!("corr({},{}) = {}", vc.coord_names[j], vc.coord_names[i], corr));
            }
        }
        writeln!(out, "  {}: {}", vc.factor, parts.join(", ")).unwrap();
    }
}

fn convergence_text(out: &mut String, converged: bool, boundary: bool, n_evals: usize) {
    writeln!(
        out,
        "Convergence: {} after {} objective evaluations; boundary estimate: {}",
        if converged { "converged" } else { "stopped at the evaluation budget" },
        n_evals,
        if boundary { "yes (some variance is zero)" } else { "no" },
    )
    .unwrap();
}

/// The skip fixed effect re-expressed as a time multiplier, with a worked
/// example, when the model carries that effect.
fn multiplier_json(fit: &FittedLmm<f64>) -> Value {
    match effect_multiplier(fit, "x1", CONFIDENCE) {
        Ok(m) => json!({
            "effect": m.name,
            "log_estimate": m.estimate,
            "multiplier": m.multiplier,
            "ci_lower": m.lower,
            "ci_upper": m.upper,
            "confidence": m.confidence,
            "example_seconds": EXAMPLE_SECONDS,
            "example_result": m.applied_to(EXAMPLE_SECONDS),
        }),
        Err(_) => Value::Null,
    }
}

fn multiplier_text(out: &mut String, fit: &FittedLmm<f64>) {
    if let Ok(m) = effect_multiplier(fit, "x1", CONFIDENCE) {
        writeln!(
            out,
            "Skip effect as a time multiplier: {:.4}  ({:.0}% CI {:.4} to {:.4})",
            m.multiplier,
            m.confidence * 100.0,
            m.lower,
            m.upper
        )
        .unwrap();
        writeln!(
            out,
            "  A {EXAMPLE_SECONDS:.1} s climb maps to {:.4} s.",
            m.applied_to(EXAMPLE_SECONDS)
        )
        .unwrap();
    }
}

/// JSON summary of a Gaussian fit: formula, estimates with intervals,
/// variance components, criterion values, convergence, and scaling.
pub fn lmm_summary_json(fit: &FittedLmm<f64>) -> String {
    let doc = json!({
        "model": fit.spec.name,
        "family": fit.spec.family.label(),
        "criterion": fit.criterion.label(),
        "formula": fit.spec.formula(),
        "n_obs": fit.n_obs,
        "n_params": fit.n_params,
        "fixed_effects": fixed_effects_json(&fit.fixed_names, &fit.gamma, &fit.se, &fit.wald_cis(CONFIDENCE)),
        "random_effects": components_json(&fit.var_components),
        "sigma2": fit.sigma2,
        "log_likelihood": fit.log_likelihood,
        "deviance": fit.deviance,
        "bic": fit.bic(),
        "converged": fit.converged,
        "boundary": fit.boundary,
        "n_evals": fit.n_evals,
        "scaling": scaling_json(&fit.scaling),
        "skip_multiplier": multiplier_json(fit),
    });
    serde_json::to_string_pretty(&doc).expect("json document") + "\n"
}

/// Text summary of a Gaussian fit, mirroring [`lmm_summary_json`].
pub fn lmm_summary_text(fit: &FittedLmm<f64>) -> String {
    let mut out = String::new();
    writeln!(out, "Model {} ({})", fit.spec.name, fit.criterion.label()).unwrap();
    writeln!(out, "Formula: {}", fit.spec.formula()).unwrap();
    writeln!(out, "Observations: {}   Parameters: {}", fit.n_obs, fit.n_params).unwrap();
    writeln!(out).unwrap();
    fixed_effects_text(&mut out, &fit.fixed_names, &fit.gamma, &fit.se, &fit.wald_cis(CONFIDENCE));
    writeln!(out).unwrap();
    components_text(&mut out, &fit.var_components);
    writeln!(out, "  residual: var = {:.4}", fit.sigma2).unwrap();
    writeln!(out).unwrap();
    writeln!(
        out,
        "Log-likelihood: {:.4}   Deviance: {:.4}   BIC: {:.4}",
        fit.log_likelihood, fit.deviance, fit.bic()
    )
    .unwrap();
    multiplier_text(&mut out, fit);
    convergence_text(&mut out, fit.converged, fit.boundary, fit.n_evals);
    scaling_text(&mut out, &fit.scaling);
    out
}

/// JSON summary of a binomial fit, including the Wald test of the skip
/// effect when the model carries it.
pub fn glmm_summary_json(fit: &FittedGlmm<f64>) -> String {
    let wald = wald_test(fit, "x1").ok();
    let doc = json!({
        "model": fit.spec.name,
        "family": fit.spec.family.label(),
        "formula": fit.spec.formula(),
        "n_obs": fit.n_obs,
        "n_params": fit.n_params,
        "fixed_effects": fixed_effects_json(&fit.fixed_names, &fit.gamma, &fit.se, &fit.wald_cis(CONFIDENCE)),
        "random_effects": components_json(&fit.var_components),
        "approx_log_likelihood": fit.approx_loglik,
        "deviance": fit.deviance,
        "bic": fit.bic(),
        "skip_wald_test": wald.map_or(Value::Null, |w: WaldTest<f64>| json!({
            "estimate": w.estimate,
            "se": w.se,
            "z": w.z,
            "p_value": w.p_value,
        })),
        "converged": fit.converged,
        "boundary": fit.boundary,
        "n_evals": fit.n_evals,
        "scaling": scaling_json(&fit.scaling),
    });
    serde_json::to_string_pretty(&doc).expect("json document") + "\n"
}

/// Text summary of a binomial fit, mirroring [`glmm_summary_json`].
pub fn glmm_summary_text(fit: &FittedGlmm<f64>) -> String {
    let mut out = String::new();
    writeln!(out, "Model {} ({})", fit.spec.name, fit.spec.family.label()).unwrap();
    writeln!(out, "Formula: {}", fit.spec.formula()).unwrap();
    writeln!(out, "Observations: {}   Parameters: {}", fit.n_obs, fit.n_params).unwrap();
    writeln!(out).unwrap();
    fixed_effects_text(&mut out, &fit.fixed_names, &fit.gamma, &fit.se, &fit.wald_cis(CONFIDENCE));
    writeln!(out).unwrap();
    components_text(&mut out, &fit.var_components);
    writeln!(out).unwrap();
    writeln!(
        out,
        "Laplace log-likelihood: {:.4}   Deviance: {:.4}   BIC: {:.4}",
        fit.approx_loglik, fit.deviance, fit.bic()
    )
    .unwrap();
    if let Ok(w) = wald_test(fit, "x1") {
        writeln!(
            out,
            "Skip effect Wald test: estimate {:.4} (SE {:.4}), z = {:.4}, p = {:.4}",
            w.estimate, w.se, w.z, w.p_value
        )
        .unwrap();
    }
    convergence_text(&mut out, fit.converged, fit.boundary, fit.n_evals);
    scaling_text(&mut out, &fit.scaling);
    out
}

/// JSON recovery report (biases, spreads, interval coverage per parameter).
pub fn recovery_json(report: &RecoveryReport) -> String {
    serde_json::to_string_pretty(report).expect("json document") + "\n"
}

/// Text recovery report, mirroring [`recovery_json`].
pub fn recovery_text(report: &RecoveryReport) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "Parameter recovery for model {} over {} replicates ({} usable, {} converged)",
        report.model, report.n_replicates, report.n_used, report.n_converged
    )
    .unwrap();
    writeln!(out, "Generator: {}", report.rng_algorithm).unwrap();
    writeln!(
        out,
        "{:<28} {:>10} {:>10} {:>10} {:>9} {:>9} {:>9}",
        "Parameter", "Truth", "Mean", "Bias", "MC SE", "RMSE", "Coverage"
    )
    .unwrap();
    for summary in report.fixed.iter().chain(&report.variances) {
        writeln!(
            out,
            "{:<28} {:>10.5} {:>10.5} {:>10.5} {:>9.5} {:>9.5} {:>9}",
            summary.name,
            summary.truth,
            summary.mean,
            summary.bias,
            summary.mc_se,
            summary.rmse,
            fmt_opt(summary.coverage, |c| format!("{c:.3}")),
        )
        .unwrap();
    }
    for failure in &report.failures {
        writeln!(out, "failure: {failure}").unwrap();
    }
    out
}

/// Manifest describing one emitted simulation: the truth parameters, the
/// generator identity, and the realized sizes.
pub fn simulation_manifest_json(sim: &SimulatedCompetition) -> String {
    let doc = json!({
        "truth": sim.truth,
        "rng_algorithm": RNG_ALGORITHM,
        "n_climbers": sim.dataset.climbers().len(),
        "n_events": sim.dataset.events().len(),
        "n_rows": sim.model.rows.len(),
    });
    serde_json::to_string_pretty(&doc).expect("json document") + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        AttemptRecord, ClimberId, ClimberProfile, Dob, Event, EventId, Outcome, RoundKind,
    };
    use crate::mixed::compare_ladder;
    use crate::preprocess::build_model_rows;
    use crate::simulate::{
        recovery_report, simulate_competition, CovBlock, SimulationParams, SkipAdoption,
    };
    use chrono::NaiveDate;
    use std::collections::BTreeMap;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    fn profile(id: &str, gender: Gender) -> ClimberProfile {
        ClimberProfile {
            id: ClimberId::new(id),
            name: id.to_string(),
            gender,
            dob: Dob::Date(date(1998, 3, 14)),
            dob_source: "test".into(),
            dob_accessed: None,
        }
    }

    fn event(id: &str, y: i32, m: u32, d: u32) -> Event {
        Event {
            id: EventId::new(id),
            name: id.to_string(),
            start_date: date(y, m, d),
            end_date: date(y, m, d),
        }
    }

    fn attempt(e: &str, c: &str, round: RoundKind, outcome: Outcome) -> AttemptRecord {
        AttemptRecord {
            event_id: EventId::new(e),
            climber_id: ClimberId::new(c),
            round,
            outcome,
        }
    }

    fn descriptive_dataset() -> Dataset {
        Dataset::new(
            vec![profile("f1", Gender::Female), profile("m1", Gender::Male)],
            vec![
                event("e1", 2019, 4, 5),
                event("e2", 2019, 9, 20),
                event("e3", 2020, 6, 1),
            ],
            vec![
                attempt("e1", "f1", RoundKind::Final16, Outcome::Fall),
                attempt("e1", "f1", RoundKind::Qualification, Outcome::Time(8.0)),
                attempt("e1", "f1", RoundKind::Final8, Outcome::Time(7.4)),
                attempt("e1", "m1", RoundKind::Final16, Outcome::FalseStart),
                attempt("e2", "f1", RoundKind::Final16, Outcome::Time(7.9)),
                attempt("e2", "m1", RoundKind::Final16, Outcome::Time(6.4)),
                attempt("e2", "m1", RoundKind::Qualification, Outcome::Time(6.6)),
                attempt("e3", "m1", RoundKind::Final16, Outcome::Fall),
            ],
            BTreeMap::from([((ClimberId::new("m1"), EventId::new("e2")), true)]),
        )
    }

    #[test]
    fn fall_false_start_table_formats_rates_at_two_decimals() {
        let csv = fall_false_start_csv(&descriptive_dataset()).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "Category,Events,Falls,FalseStarts,FallRate,FalseStartRate");
        // Women: e1 (fall) and e2; men: e1 (false start), e2, e3 (fall).
        assert_eq!(lines[1], "Women,2,1,0,0.50,0.00");
        assert_eq!(lines[2], "Men,3,1,1,0.33,0.33");
    }

    #[test]
    fn events_per_year_counts_by_start_year() {
        let csv = events_per_year_csv(&descriptive_dataset());
        assert_eq!(csv, "Year,Events\n2019,2\n2020,1\n");
    }

    #[test]
    fn skip_usage_counts_attending_users_by_gender() {
        let csv = skip_usage_by_event_csv(&descriptive_dataset());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "EventId,Date,Gender,SkipUsers");
        // m1 is observed using the technique at e2 and keeps it at e3;
        // nobody uses it at e1.
        assert!(lines.contains(&"e1,2019-04-05,Men,0"));
        assert!(lines.contains(&"e2,2019-09-20,Men,1"));
        assert!(lines.contains(&"e3,2020-06-01,Men,1"));
        assert!(lines.contains(&"e1,2019-04-05,Women,0"));
        // f1 has no attempts at e3, so no Women row for it.
        assert!(!lines.iter().any(|l| l.starts_with("e3") && l.contains("Women")));
    }

    #[test]
    fn ranges_pair_with_year_and_skip_status() {
        let csv = ranges_by_year_csv(&descriptive_dataset());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "ClimberId,EventId,Year,UsesSkip,Range");
        // f1 at e1: 8.0 - 7.4; m1 at e2: 6.6 - 6.4 while using the skip.
        assert!(lines.contains(&"f1,e1,2019,false,0.600"));
        assert!(lines.contains(&"m1,e2,2019,true,0.200"));
        assert_eq!(lines.len(), 3);
    }

    fn fitted_ladder() -> LadderComparison<f64> {
        let params = SimulationParams {
            gamma: [2.0, -0.2, 0.3, -0.05, 0.01],
            sigma2: 0.02,
            eta: CovBlock::diagonal(0.03, 0.01),
            tau: CovBlock::diagonal(0.01, 0.004),
            n_climbers: 14,
            n_events: 8,
            attendance_prob: 0.8,
            skip_adoption: SkipAdoption::UniformOnset { adoption_rate: 0.6 },
            gender_split: 0.5,
            seed: 31,
        };
        let sim = simulate_competition(&params).unwrap();
        let data = build_model_rows(&sim.dataset).unwrap();
        compare_ladder(&data, 0.01).unwrap()
    }

    #[test]
    fn ladder_outputs_carry_all_models_and_a_selection() {
        let comparison = fitted_ladder();
        let csv = ladder_csv(&comparison);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "Model,BIC,Statistic,df,p_value");
        assert_eq!(lines.len(), 6);
        assert!(lines[1].starts_with("M0,"));
        // The first row has no test against a predecessor.
        assert_eq!(lines[1].matches(',').count(), 4);
        assert!(lines[1].ends_with(",,,"));

        let text = ladder_text(&comparison);
        assert!(text.contains("Selected model: "));
        assert!(text.contains("alpha = 0.01"));
    }

    #[test]
    fn fit_summaries_are_deterministic_and_complete() {
        let comparison = fitted_ladder();
        let fit = comparison.selected_fit();

        let json = lmm_summary_json(fit);
        assert_eq!(json, lmm_summary_json(fit), "rendering is pure");
        let doc: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(doc["criterion"], "ML");
        assert_eq!(doc["family"], "gaussian");
        assert_eq!(doc["n_obs"].as_u64().unwrap() as usize, fit.n_obs);
        assert_eq!(doc["fixed_effects"].as_array().unwrap().len(), fit.gamma.len());
        let re = doc["random_effects"].as_array().unwrap();
        assert_eq!(re.len(), 2);
        assert_eq!(re[0]["factor"], "climber");

        let text = lmm_summary_text(fit);
        assert!(text.contains("Formula: "));
        assert!(text.contains("Fixed effects (95% CI):"));
        assert!(text.contains("BIC:"));
        assert!(text.contains("Convergence:"));
        // The ladder is fit from preprocessed rows, so scaling is present.
        assert!(text.contains("Covariate scaling:"));
    }

    #[test]
    fn multiplier_block_appears_only_with_the_skip_effect() {
        let comparison = fitted_ladder();
        let with_skip = comparison.fits.iter().find(|f| f.spec.name == "M3").unwrap();
        let without = comparison.fits.iter().find(|f| f.spec.name == "M0").unwrap();

        let with_doc: serde_json::Value =
            serde_json::from_str(&lmm_summary_json(with_skip)).unwrap();
        assert!(with_doc["skip_multiplier"].is_object());
        let block = &with_doc["skip_multiplier"];
        let est = with_skip.fixed_effect("x1").unwrap().0;
        assert!((block["multiplier"].as_f64().unwrap() - est.exp()).abs() < 1e-12);
        assert!((block["example_result"].as_f64().unwrap() - 7.0 * est.exp()).abs() < 1e-12);
        assert!(lmm_summary_text(with_skip).contains("time multiplier"));

        let without_doc: serde_json::Value =
            serde_json::from_str(&lmm_summary_json(without)).unwrap();
        assert!(without_doc["skip_multiplier"].is_null());
        assert!(!lmm_summary_text(without).contains("time multiplier"));
    }

    #[test]
    fn binomial_summary_reports_the_skip_wald_test() {
        use crate::design::ModelSpec;
        use crate::mixed::fit_binomial;
        use crate::simulate::simulate_binary;

        let params = SimulationParams {
            gamma: [-1.0, 0.3, 0.2, 0.0, 0.0],
            sigma2: 0.01,
            eta: CovBlock::intercept_only(0.2),
            tau: CovBlock::intercept_only(0.1),
            n_climbers: 30,
            n_events: 12,
            attendance_prob: 0.9,
            skip_adoption: SkipAdoption::UniformOnset { adoption_rate: 0.6 },
            gender_split: 0.5,
            seed: 17,
        };
        let (falls, _) = simulate_binary(&params).unwrap();
        let fit = fit_binomial::<f64>(&ModelSpec::fall_model(), &falls).unwrap();

        let json = glmm_summary_json(&fit);
        let doc: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(doc["family"], "binomial (logit)");
        assert!(doc["skip_wald_test"]["p_value"].as_f64().unwrap() <= 1.0);
        let text = glmm_summary_text(&fit);
        assert!(text.contains("Skip effect Wald test:"));
        assert!(text.contains("Laplace log-likelihood:"));
    }

    #[test]
    fn recovery_rendering_includes_every_parameter_row() {
        let params = SimulationParams {
            gamma: [2.0, -0.15, 0.28, -0.09, 0.01],
            sigma2: 0.0,
            eta: CovBlock::zero(),
            tau: CovBlock::zero(),
            n_climbers: 25,
            n_events: 8,
            attendance_prob: 1.0,
            skip_adoption: SkipAdoption::UniformOnset { adoption_rate: 0.5 },
            gender_split: 0.5,
            seed: 23,
        };
        let report = recovery_report(&params, 2).unwrap();
        let text = recovery_text(&report);
        assert!(text.contains("Parameter"));
        assert!(text.contains("(Intercept)"));
        assert!(text.contains("sigma2"));
        assert!(text.contains("Coverage"));

        let json = recovery_json(&report);
        let doc: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(doc["fixed"].as_array().unwrap().len(), 5);
        assert_eq!(doc["rng_algorithm"], RNG_ALGORITHM);
    }

    #[test]
    fn simulation_manifest_names_the_generator_and_sizes() {
        let params = SimulationParams {
            gamma: [2.0, -0.1, 0.2, 0.0, 0.0],
            sigma2: 0.01,
            eta: CovBlock::zero(),
            tau: CovBlock::zero(),
            n_climbers: 6,
            n_events: 4,
            attendance_prob: 1.0,
            skip_adoption: SkipAdoption::Never,
            gender_split: 0.5,
            seed: 2,
        };
        let sim = simulate_competition(&params).unwrap();
        let doc: serde_json::Value =
            serde_json::from_str(&simulation_manifest_json(&sim)).unwrap();
        assert_eq!(doc["n_climbers"], 6);
        assert_eq!(doc["n_events"], 4);
        assert_eq!(doc["n_rows"], 24);
        assert_eq!(doc["rng_algorithm"], RNG_ALGORITHM);
        assert!((doc["truth"]["sigma2"].as_f64().unwrap() - 0.01).abs() < 1e-15);
    }
}
