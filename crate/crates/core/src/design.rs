//! Model specifications and design-matrix construction.
//!
//! A [`ModelSpec`] names the response family, the fixed effects, and the
//! random-effects structure per grouping factor (climber / event), each with
//! a random intercept and optionally a random slope on the skip indicator.
//! [`gaussian_design`] / [`binomial_design`] turn preprocessed rows into the
//! dense fixed-effects matrix and per-factor random-effects structures the
//! estimators consume.

use crate::linalg::DMat;
use crate::preprocess::{FallRow, ModelRow};
use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DesignError {
    #[error("no rows to build a design from")]
    EmptyData,
    #[error("unknown model name {0:?} (expected M0..M4)")]
    UnknownModelName(String),
}

/// One fixed-effect column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixedEffect {
    Intercept,
    /// Skip-technique indicator (x1).
    Skip,
    /// Gender indicator (x2).
    GenderFemale,
    /// Standardized age (x3).
    Age,
    /// Standardized time progression (x4).
    Progression,
    /// Skip-by-age interaction (x1:x3).
    SkipByAge,
}

impl FixedEffect {
    pub fn name(self) -> &'static str {
        match self {
            FixedEffect::Intercept => "(Intercept)",
            FixedEffect::Skip => "x1",
            FixedEffect::GenderFemale => "x2",
            FixedEffect::Age => "x3",
            FixedEffect::Progression => "x4",
            FixedEffect::SkipByAge => "x1:x3",
        }
    }
}

/// Response distribution and link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Gaussian,
    BinomialLogit,
}

impl Family {
    pub fn label(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::BinomialLogit => "binomial (logit)",
        }
    }
}

/// Grouping factor of a random term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    Climber,
    Event,
}

impl Factor {
    pub fn name(self) -> &'static str {
        match self {
            Factor::Climber => "climber",
            Factor::Event => "event",
        }
    }
}

/// Random-effects structure for one grouping factor: an intercept and/or a
/// slope on one covariate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomEffect {
    pub factor: Factor,
    pub intercept: bool,
    pub slope: Option<FixedEffect>,
}

impl RandomEffect {
    pub fn intercept_only(factor: Factor) -> Self {
        RandomEffect { factor, intercept: true, slope: None }
    }

    pub fn intercept_and_slope(factor: Factor, slope: FixedEffect) -> Self {
        RandomEffect { factor, intercept: true, slope: Some(slope) }
    }

    /// Coefficients per level.
    pub fn n_coords(&self) -> usize {
        usize::from(self.intercept) + usize::from(self.slope.is_some())
    }

    pub fn coord_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.intercept {
            names.push("(Intercept)".to_string());
        }
        if let Some(s) = self.slope {
            names.push(s.name().to_string());
        }
        names
    }

    fn formula_fragment(&self) -> String {
        let inner = match (self.intercept, self.slope) {
            (true, Some(s)) => format!("1 + {}", s.name()),
            (true, None) => "1".to_string(),
            (false, Some(s)) => format!("0 + {}", s.name()),
            (false, None) => unreachable!("random term with no coefficients"),
        };
        format!("({} | {})", inner, self.factor.name())
    }
}

/// Response family, fixed-effect layout, and random-effects structure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub name: String,
    pub family: Family,
    pub fixed: Vec<FixedEffect>,
    pub random: Vec<RandomEffect>,
}

impl ModelSpec {
    pub fn new(
        name: &str,
        family: Family,
        fixed: Vec<FixedEffect>,
        random: Vec<RandomEffect>,
    ) -> Self {
        Self { name: name.to_string(), family, fixed, random }
    }

    /// The nested model sequence M0..M4 compared by the ladder report.
    pub fn ladder() -> Vec<ModelSpec> {
        ["M0", "M1", "M2", "M3", "M4"]
            .iter()
            .map(|n| Self::ladder_spec(n).expect("ladder names are valid"))
            .collect()
    }

    /// Look up one rung of the ladder by name.
    pub fn ladder_spec(name: &str) -> Result<ModelSpec, DesignError> {
        use FixedEffect::*;
        let intercepts = vec![
            RandomEffect::intercept_only(Factor::Climber),
            RandomEffect::intercept_only(Factor::Event),
        ];
        let slopes = vec![
            RandomEffect::intercept_and_slope(Factor::Climber, Skip),
            RandomEffect::intercept_and_slope(Factor::Event, Skip),
        ];
        let spec = match name {
            "M0" => ModelSpec::new("M0", Family::Gaussian, vec![Intercept], intercepts),
            "M1" => ModelSpec::new("M1", Family::Gaussian, vec![Intercept], slopes),
            "M2" => ModelSpec::new(
                "M2",
                Family::Gaussian,
                vec![Intercept, GenderFemale],
                slopes,
            ),
            "M3" => ModelSpec::new(
                "M3",
                Family::Gaussian,
                vec![Intercept, Skip, GenderFemale, Age, Progression],
                slopes,
            ),
            "M4" => ModelSpec::new(
                "M4",
                Family::Gaussian,
                vec![Intercept, Skip, GenderFemale, Age, Progression, SkipByAge],
                slopes,
            ),
            other => return Err(DesignError::UnknownModelName(other.to_string())),
        };
        Ok(spec)
    }

    /// The binomial fall model: M3's covariates over random intercepts.
    pub fn fall_model() -> ModelSpec {
        use FixedEffect::*;
        ModelSpec::new(
            "falls",
            Family::BinomialLogit,
            vec![Intercept, Skip, GenderFemale, Age, Progression],
            vec![
                RandomEffect::intercept_only(Factor::Climber),
                RandomEffect::intercept_only(Factor::Event),
            ],
        )
    }

    /// Fall model with random skip slopes, for sensitivity runs.
    pub fn fall_model_with_slopes() -> ModelSpec {
        let mut spec = Self::fall_model();
        spec.name = "falls+slopes".to_string();
        spec.random = vec![
            RandomEffect::intercept_and_slope(Factor::Climber, FixedEffect::Skip),
            RandomEffect::intercept_and_slope(Factor::Event, FixedEffect::Skip),
        ];
        spec
    }

    pub fn n_fixed(&self) -> usize {
        self.fixed.len()
    }

    /// Free covariance parameters: k(k+1)/2 per random term.
    pub fn n_cov_params(&self) -> usize {
        self.random.iter().map(|t| t.n_coords() * (t.n_coords() + 1) / 2).sum()
    }

    pub fn fixed_names(&self) -> Vec<String> {
        self.fixed.iter().map(|f| f.name().to_string()).collect()
    }

    /// Human-readable formula, e.g.
    /// `log_y ~ x1 + x2 + x3 + x4 + (1 + x1 | climber) + (1 + x1 | event)`.
    pub fn formula(&self) -> String {
        let response = match self.family {
            Family::Gaussian => "log_y",
            Family::BinomialLogit => "fall",
        };
        let mut terms: Vec<String> = self
            .fixed
            .iter()
            .filter(|f| !matches!(f, FixedEffect::Intercept))
            .map(|f| f.name().to_string())
            .collect();
        if terms.is_empty() {
            terms.push("1".to_string());
        }
        for t in &self.random {
            terms.push(t.formula_fragment());
        }
        format!("{response} ~ {}", terms.join(" + "))
    }
}

/// Realized random-effects structure for one grouping factor: which level
/// each row belongs to and the per-row covariate values multiplying that
/// level's coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomTerm<S> {
    pub factor: String,
    pub coord_names: Vec<String>,
    pub level_names: Vec<String>,
    /// Per row: index into `level_names`.
    pub level_of_row: Vec<usize>,
    /// Row-major n x k covariate values (all ones for pure intercepts).
    pub z: Vec<S>,
}

impl<S: Scalar> RandomTerm<S> {
    pub fn n_levels(&self) -> usize {
        self.level_names.len()
    }

    pub fn n_coords(&self) -> usize {
        self.coord_names.len()
    }
}

/// Everything the estimators need: response, fixed matrix, random terms.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices<S> {
    pub spec: ModelSpec,
    pub y: Vec<S>,
    pub x: DMat<S>,
    pub fixed_names: Vec<String>,
    pub terms: Vec<RandomTerm<S>>,
}

impl<S: Scalar> DesignMatrices<S> {
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_fixed(&self) -> usize {
        self.x.cols()
    }

    /// Total random coefficients across factors (levels x coordinates).
    pub fn n_random(&self) -> usize {
        self.terms.iter().map(|t| t.n_levels() * t.n_coords()).sum()
    }
}

/// The covariate values the design needs from a preprocessed row.
struct Covariates<'a> {
    climber: &'a str,
    event: &'a str,
    x1: f64,
    x2: f64,
    x3: f64,
    x4: f64,
}

impl<'a> From<&'a ModelRow> for Covariates<'a> {
    fn from(r: &'a ModelRow) -> Self {
        Covariates {
            climber: r.climber_id.as_str(),
            event: r.event_id.as_str(),
            x1: r.x1,
            x2: r.x2,
            x3: r.x3,
            x4: r.x4,
        }
    }
}

impl<'a> From<&'a FallRow> for Covariates<'a> {
    fn from(r: &'a FallRow) -> Self {
        Covariates {
            climber: r.climber_id.as_str(),
            event: r.event_id.as_str(),
            x1: r.x1,
            x2: r.x2,
            x3: r.x3,
            x4: r.x4,
        }
    }
}

impl Covariates<'_> {
    fn fixed_value(&self, effect: FixedEffect) -> f64 {
        match effect {
            FixedEffect::Intercept => 1.0,
            FixedEffect::Skip => self.x1,
            FixedEffect::GenderFemale => self.x2,
            FixedEffect::Age => self.x3,
            FixedEffect::Progression => self.x4,
            FixedEffect::SkipByAge => self.x1 * self.x3,
        }
    }

    fn factor_level(&self, factor: Factor) -> &str {
        match factor {
            Factor::Climber => self.climber,
            Factor::Event => self.event,
        }
    }
}

fn build_design<S: Scalar>(
    spec: &ModelSpec,
    rows: Vec<(Covariates<'_>, f64)>,
) -> Result<DesignMatrices<S>, DesignError> {
    if rows.is_empty() {
        return Err(DesignError::EmptyData);
    }
    // Canonical row order: results must not depend on input permutation.
    let mut rows = rows;
    rows.sort_by(|a, b| (a.0.climber, a.0.event).cmp(&(b.0.climber, b.0.event)));

    let n = rows.len();
    let p = spec.n_fixed();
    let mut y = Vec::with_capacity(n);
    let mut x = DMat::zeros(n, p);
    for (i, (cov, resp)) in rows.iter().enumerate() {
        y.push(S::of(*resp));
        for (j, effect) in spec.fixed.iter().enumerate() {
            x[(i, j)] = S::of(cov.fixed_value(*effect));
        }
    }

    let terms = spec
        .random
        .iter()
        .map(|term| {
            let mut level_names: Vec<String> =
                rows.iter().map(|(c, _)| c.factor_level(term.factor).to_string()).collect();
            level_names.sort();
            level_names.dedup();
            let level_of_row = rows
                .iter()
                .map(|(c, _)| {
                    level_names
                        .binary_search_by(|l| l.as_str().cmp(c.factor_level(term.factor)))
                        .expect("level present")
                })
                .collect();
            let k = term.n_coords();
            let mut z = Vec::with_capacity(k * n);
            for (c, _) in &rows {
                if term.intercept {
                    z.push(S::one());
                }
                if let Some(slope) = term.slope {
                    z.push(S::of(c.fixed_value(slope)));
                }
            }
            RandomTerm {
                factor: term.factor.name().to_string(),
                coord_names: term.coord_names(),
                level_names,
                level_of_row,
                z,
            }
        })
        .collect();

    Ok(DesignMatrices { spec: spec.clone(), y, x, fixed_names: spec.fixed_names(), terms })
}

/// Design for the Gaussian model of log best times.
pub fn gaussian_design<S: Scalar>(
    rows: &[ModelRow],
    spec: &ModelSpec,
) -> Result<DesignMatrices<S>, DesignError> {
    build_design(spec, rows.iter().map(|r| (Covariates::from(r), r.log_y)).collect())
}

/// Design for the binomial fall model (response 0/1).
pub fn binomial_design<S: Scalar>(
    rows: &[FallRow],
    spec: &ModelSpec,
) -> Result<DesignMatrices<S>, DesignError> {
    build_design(
        spec,
        rows.iter()
            .map(|r| (Covariates::from(r), if r.fall { 1.0 } else { 0.0 }))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClimberId, EventId};

    fn row(climber: &str, event: &str, log_y: f64, x1: f64, x4: f64) -> ModelRow {
        ModelRow {
            climber_id: ClimberId::new(climber),
            event_id: EventId::new(event),
            y: log_y.exp(),
            log_y,
            x1,
            x2: 0.0,
            x3_raw: 20.0,
            x4_raw: 0,
            x3: 0.5,
            x4,
            age_imputed: false,
        }
    }

    #[test]
    fn ladder_has_expected_dimensions() {
        let ladder = ModelSpec::ladder();
        let dims: Vec<(usize, usize)> =
            ladder.iter().map(|m| (m.n_fixed(), m.n_cov_params())).collect();
        assert_eq!(dims, vec![(1, 2), (1, 6), (2, 6), (5, 6), (6, 6)]);
        // Gaussian parameter count for information criteria: p + cov + 1.
        let k: Vec<usize> = ladder.iter().map(|m| m.n_fixed() + m.n_cov_params() + 1).collect();
        assert_eq!(k, vec![4, 8, 9, 12, 13]);
        let names: Vec<&str> = ladder.iter().map(|m| m.name.as_str()).collect();
        assert_eq!(names, vec!["M0", "M1", "M2", "M3", "M4"]);
        assert!(ladder.iter().all(|m| m.family == Family::Gaussian));
    }

    #[test]
    fn unknown_ladder_name_is_an_error() {
        assert_eq!(
            ModelSpec::ladder_spec("M7"),
            Err(DesignError::UnknownModelName("M7".to_string()))
        );
    }

    #[test]
    fn formula_text_names_fixed_and_random_parts() {
        let m3 = ModelSpec::ladder_spec("M3").unwrap();
        assert_eq!(m3.formula(), "log_y ~ x1 + x2 + x3 + x4 + (1 + x1 | climber) + (1 + x1 | event)");
        let m0 = ModelSpec::ladder_spec("M0").unwrap();
        assert_eq!(m0.formula(), "log_y ~ 1 + (1 | climber) + (1 | event)");
        let falls = ModelSpec::fall_model();
        assert_eq!(falls.formula(), "fall ~ x1 + x2 + x3 + x4 + (1 | climber) + (1 | event)");
    }

    #[test]
    fn full_model_columns_in_contract_order() {
        let spec = ModelSpec::ladder_spec("M4").unwrap();
        assert_eq!(spec.fixed_names(), vec!["(Intercept)", "x1", "x2", "x3", "x4", "x1:x3"]);
    }

    #[test]
    fn design_places_rows_levels_and_slope_covariates() {
        let rows = vec![
            row("c2", "e1", 1.9, 1.0, 0.3),
            row("c1", "e2", 2.0, 0.0, -0.3),
            row("c1", "e1", 2.1, 1.0, 0.1),
        ];
        let spec = ModelSpec::ladder_spec("M4").unwrap();
        let d: DesignMatrices<f64> = gaussian_design(&rows, &spec).unwrap();
        assert_eq!(d.n_rows(), 3);
        assert_eq!(d.n_fixed(), 6);
        // Canonical order sorts by (climber, event): (c1,e1), (c1,e2), (c2,e1).
        assert_eq!(d.y, vec![2.1, 2.0, 1.9]);
        // Interaction column = x1 * x3.
        assert_eq!(d.x[(0, 5)], 1.0 * 0.5);
        assert_eq!(d.x[(1, 5)], 0.0);

        let climber = &d.terms[0];
        assert_eq!(climber.level_names, vec!["c1", "c2"]);
        assert_eq!(climber.level_of_row, vec![0, 0, 1]);
        assert_eq!(climber.n_coords(), 2);
        assert_eq!(climber.coord_names, vec!["(Intercept)", "x1"]);
        // The slope covariate is the skip indicator.
        assert_eq!(climber.z, vec![1.0, 1.0, 1.0, 0.0, 1.0, 1.0]);

        let event = &d.terms[1];
        assert_eq!(event.factor, "event");
        assert_eq!(event.level_names, vec!["e1", "e2"]);
        assert_eq!(event.level_of_row, vec![0, 1, 0]);
        // Two climbers and two events with intercept+slope each: q = 8.
        assert_eq!(d.n_random(), 8);
    }

    #[test]
    fn design_is_permutation_invariant() {
        let rows = vec![
            row("c1", "e1", 2.1, 0.0, 0.1),
            row("c1", "e2", 2.0, 0.0, -0.3),
            row("c2", "e1", 1.9, 1.0, 0.3),
        ];
        let mut shuffled = rows.clone();
        shuffled.rotate_left(2);
        let spec = ModelSpec::ladder_spec("M3").unwrap();
        let a: DesignMatrices<f64> = gaussian_design(&rows, &spec).unwrap();
        let b: DesignMatrices<f64> = gaussian_design(&shuffled, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_rows_are_rejected_and_no_random_terms_mean_q_zero() {
        let spec = ModelSpec::ladder_spec("M2").unwrap();
        assert_eq!(gaussian_design::<f64>(&[], &spec), Err(DesignError::EmptyData));

        let fixed_only =
            ModelSpec::new("ols", Family::Gaussian, vec![FixedEffect::Intercept], vec![]);
        let d: DesignMatrices<f64> =
            gaussian_design(&[row("c1", "e1", 2.0, 0.0, 0.0)], &fixed_only).unwrap();
        assert_eq!(d.n_random(), 0);
        assert!(d.terms.is_empty());
        // M2 has two fixed columns: intercept and gender.
        assert_eq!(spec.n_fixed(), 2);
    }

    #[test]
    fn binomial_design_encodes_outcome_as_indicator() {
        let fall = FallRow {
            climber_id: ClimberId::new("c1"),
            event_id: EventId::new("e1"),
            fall: true,
            x1: 0.0,
            x2: 1.0,
            x3_raw: 20.0,
            x4_raw: 10,
            x3: 0.0,
            x4: 0.0,
            age_imputed: false,
        };
        let ok = FallRow { fall: false, event_id: EventId::new("e2"), ..fall.clone() };
        let spec = ModelSpec::fall_model();
        let d: DesignMatrices<f64> = binomial_design(&[fall, ok], &spec).unwrap();
        assert_eq!(d.y, vec![1.0, 0.0]);
        assert_eq!(d.terms[0].n_coords(), 1);
        assert_eq!(spec.fixed_names(), vec!["(Intercept)", "x1", "x2", "x3", "x4"]);
        assert_eq!(spec.family.label(), "binomial (logit)");
    }
}
