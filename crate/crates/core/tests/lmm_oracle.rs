//! Dense-algebra reference checks for the Gaussian mixed-model solver.
//!
//! Everything here recomputes the target quantities from first principles —
//! the marginal covariance `V = Z (I ⊗ ΛΛ') Z' + I` assembled as a full
//! matrix, generalized least squares through a textbook Cholesky, and the
//! closed-form ANOVA estimators for balanced one-way data — and compares the
//! solver's block-sparse results against them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use speedclimb::data::{ClimberId, EventId};
use speedclimb::design::{
    gaussian_design, DesignMatrices, Factor, Family, FixedEffect, ModelSpec, RandomEffect,
};
use speedclimb::mixed::{
    fit_lmm, fit_model_rows, profiled_deviance, CovParams, Criterion, FittedLmm,
};
use speedclimb::preprocess::{ModelData, ModelRow, ScalingParams};

// ---------------------------------------------------------------------------
// Plain dense linear algebra, independent of the crate's kernels.
// ---------------------------------------------------------------------------

fn identity(n: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; n]; n];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
fn cholesky(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                assert!(sum > 0.0, "matrix is not positive definite at {i}");
                l[i][i] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    l
}

/// Solve (L L') x = b given the lower factor.
fn chol_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = l.len();
    let mut x = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            x[i] -= l[i][k] * x[k];
        }
        x[i] /= l[i][i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            x[i] -= l[k][i] * x[k];
        }
        x[i] /= l[i][i];
    }
    x
}

fn logdet_from_chol(l: &[Vec<f64>]) -> f64 {
    2.0 * l.iter().enumerate().map(|(i, row)| row[i].ln()).sum::<f64>()
}

fn solve_spd(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    chol_solve(&cholesky(a), b)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unpack a column-packed lower-triangular factor and form ΛΛ'.
fn relative_cov(k: usize, packed: &[f64]) -> Vec<Vec<f64>> {
    let mut lam = vec![vec![0.0; k]; k];
    let mut at = 0;
    for j in 0..k {
        for i in j..k {
            lam[i][j] = packed[at];
            at += 1;
        }
    }
    let mut g = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            g[i][j] = dot(&lam[i], &lam[j]);
        }
    }
    g
}

/// Marginal covariance V = I + Σ_terms Z (I ⊗ ΛΛ') Z', assembled densely.
fn dense_v(design: &DesignMatrices<f64>, cov: &CovParams<f64>) -> Vec<Vec<f64>> {
    let n = design.n_rows();
    let mut v = identity(n);
    for (term, lt) in design.terms.iter().zip(&cov.terms) {
        let k = term.n_coords();
        let g = relative_cov(k, lt.packed());
        for r in 0..n {
            for s in 0..n {
                if term.level_of_row[r] != term.level_of_row[s] {
                    continue;
                }
                let zr = &term.z[r * k..(r + 1) * k];
                let zs = &term.z[s * k..(s + 1) * k];
                let mut acc = 0.0;
                for a in 0..k {
                    for b in 0..k {
                        acc += zr[a] * g[a][b] * zs[b];
                    }
                }
                v[r][s] += acc;
            }
        }
    }
    v
}

/// Generalized least squares against the dense V, plus every piece the
/// profiled deviance needs.
struct GlsReference {
    beta: Vec<f64>,
    /// X' V^-1 X.
    xtvix: Vec<Vec<f64>>,
    /// Weighted residual sum of squares r' V^-1 r.
    r2: f64,
    logdet_v: f64,
    /// V^-1 (y - X beta).
    weighted_resid: Vec<f64>,
}

fn gls_reference(design: &DesignMatrices<f64>, cov: &CovParams<f64>) -> GlsReference {
    let n = design.n_rows();
    let p = design.n_fixed();
    let v = dense_v(design, cov);
    let l = cholesky(&v);
    let logdet_v = logdet_from_chol(&l);

    let x_col = |j: usize| (0..n).map(|i| design.x[(i, j)]).collect::<Vec<f64>>();
    let vi_cols: Vec<Vec<f64>> = (0..p).map(|j| chol_solve(&l, &x_col(j))).collect();
    let vi_y = chol_solve(&l, &design.y);

    let mut xtvix = vec![vec![0.0; p]; p];
    let mut xtviy = vec![0.0; p];
    for i in 0..p {
        for j in 0..p {
            xtvix[i][j] = dot(&x_col(i), &vi_cols[j]);
        }
        xtviy[i] = dot(&x_col(i), &vi_y);
    }
    let beta = solve_spd(&xtvix, &xtviy);

    let resid: Vec<f64> =
        (0..n).map(|i| design.y[i] - (0..p).map(|j| design.x[(i, j)] * beta[j]).sum::<f64>()).collect();
    let weighted_resid = chol_solve(&l, &resid);
    let r2 = dot(&resid, &weighted_resid);
    GlsReference { beta, xtvix, r2, logdet_v, weighted_resid }
}

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

fn reference_deviance(design: &DesignMatrices<f64>, cov: &CovParams<f64>, criterion: Criterion) -> f64 {
    let gls = gls_reference(design, cov);
    let n = design.n_rows() as f64;
    let p = design.n_fixed() as f64;
    match criterion {
        Criterion::Ml => gls.logdet_v + n * (1.0 + (TWO_PI * gls.r2 / n).ln()),
        Criterion::Reml => {
            gls.logdet_v
                + logdet_from_chol(&cholesky(&gls.xtvix))
                + (n - p) * (1.0 + (TWO_PI * gls.r2 / (n - p)).ln())
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic model rows.
// ---------------------------------------------------------------------------

fn row(climber: usize, event: usize, response: f64, x1: f64, x2: f64, x3: f64, x4: f64) -> ModelRow {
    ModelRow {
        climber_id: ClimberId::new(&format!("c{climber:03}")),
        event_id: EventId::new(&format!("e{event:03}")),
        y: response.exp(),
        log_y: response,
        x1,
        x2,
        x3_raw: x3,
        x4_raw: event as i64,
        x3,
        x4,
        age_imputed: false,
    }
}

/// Fully crossed rows with random covariates and a mixed-model response.
fn crossed_rows(n_climbers: usize, n_events: usize, seed: u64) -> Vec<ModelRow> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let climber_icpt: Vec<f64> =
        (0..n_climbers).map(|_| 0.18 * rng.sample::<f64, _>(StandardNormal)).collect();
    let climber_slope: Vec<f64> =
        (0..n_climbers).map(|_| 0.12 * rng.sample::<f64, _>(StandardNormal)).collect();
    let event_icpt: Vec<f64> =
        (0..n_events).map(|_| 0.08 * rng.sample::<f64, _>(StandardNormal)).collect();
    let event_slope: Vec<f64> =
        (0..n_events).map(|_| 0.05 * rng.sample::<f64, _>(StandardNormal)).collect();

    let mut rows = Vec::new();
    for i in 0..n_climbers {
        let x2 = f64::from(i % 2 == 0);
        for j in 0..n_events {
            let x1 = f64::from(rng.gen_bool(0.5));
            let x3: f64 = rng.sample(StandardNormal);
            let x4 = (j as f64 - n_events as f64 / 2.0) / (n_events as f64);
            let mean = 2.0 - 0.15 * x1 + 0.3 * x2 - 0.08 * x3 + 0.02 * x4
                + climber_icpt[i]
                + climber_slope[i] * x1
                + event_icpt[j]
                + event_slope[j] * x1;
            let response = mean + 0.07 * rng.sample::<f64, _>(StandardNormal);
            rows.push(row(i, j, response, x1, x2, x3, x4));
        }
    }
    rows
}

fn slopes_spec() -> ModelSpec {
    ModelSpec::new(
        "oracle-slopes",
        Family::Gaussian,
        vec![
            FixedEffect::Intercept,
            FixedEffect::Skip,
            FixedEffect::GenderFemale,
            FixedEffect::Age,
            FixedEffect::Progression,
        ],
        vec![
            RandomEffect::intercept_and_slope(Factor::Climber, FixedEffect::Skip),
            RandomEffect::intercept_and_slope(Factor::Event, FixedEffect::Skip),
        ],
    )
}

fn model_data(rows: Vec<ModelRow>) -> ModelData {
    ModelData { rows, scaling: ScalingParams::default() }
}

// ---------------------------------------------------------------------------
// Deviance agreement.
// ---------------------------------------------------------------------------

#[test]
fn profiled_deviance_matches_the_dense_reference_at_fixed_parameters() {
    let rows = crossed_rows(8, 5, 41);
    let spec = slopes_spec();
    let design = gaussian_design::<f64>(&rows, &spec).unwrap();

    let thetas: Vec<Vec<f64>> = vec![
        vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0],
        vec![0.9, -0.3, 0.4, 0.5, 0.1, 0.2],
        vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        vec![1.3, 0.0, 0.0, 0.2, -0.05, 0.6],
    ];
    for theta in thetas {
        let cov = CovParams::from_theta(&[2, 2], &theta);
        for criterion in [Criterion::Ml, Criterion::Reml] {
            let fast = profiled_deviance(&design, &cov, criterion).unwrap();
            let dense = reference_deviance(&design, &cov, criterion);
            assert!(
                (fast - dense).abs() <= 1e-8 * dense.abs().max(1.0),
                "theta {theta:?} {criterion:?}: block-sparse {fast} vs dense {dense}"
            );
        }
    }
}

#[test]
fn single_term_and_no_term_designs_also_match_the_dense_reference() {
    let rows = crossed_rows(9, 4, 57);

    let one_term = ModelSpec::new(
        "oracle-one-term",
        Family::Gaussian,
        vec![FixedEffect::Intercept, FixedEffect::Age],
        vec![RandomEffect::intercept_only(Factor::Climber)],
    );
    let design = gaussian_design::<f64>(&rows, &one_term).unwrap();
    for theta in [vec![1.0], vec![0.35], vec![0.0]] {
        let cov = CovParams::from_theta(&[1], &theta);
        for criterion in [Criterion::Ml, Criterion::Reml] {
            let fast = profiled_deviance(&design, &cov, criterion).unwrap();
            let dense = reference_deviance(&design, &cov, criterion);
            assert!((fast - dense).abs() <= 1e-8 * dense.abs().max(1.0));
        }
    }

    let no_term = ModelSpec::new(
        "oracle-no-term",
        Family::Gaussian,
        vec![FixedEffect::Intercept, FixedEffect::Age],
        vec![],
    );
    let design = gaussian_design::<f64>(&rows, &no_term).unwrap();
    let cov = CovParams::from_theta(&[], &[]);
    for criterion in [Criterion::Ml, Criterion::Reml] {
        let fast = profiled_deviance(&design, &cov, criterion).unwrap();
        let dense = reference_deviance(&design, &cov, criterion);
        assert!((fast - dense).abs() <= 1e-8 * dense.abs().max(1.0));
    }
}

// ---------------------------------------------------------------------------
// Full-fit agreement at the optimized covariance parameters.
// ---------------------------------------------------------------------------

fn assert_fit_matches_reference(fit: &FittedLmm<f64>, design: &DesignMatrices<f64>) {
    let cov = CovParams::from_theta(&CovParams::<f64>::dims_of(design), &fit.theta);
    let gls = gls_reference(design, &cov);
    let n = design.n_rows() as f64;
    let p = design.n_fixed() as f64;

    for (a, b) in fit.gamma.iter().zip(&gls.beta) {
        assert!((a - b).abs() < 1e-8, "beta: {a} vs {b}");
    }

    let denom = match fit.criterion {
        Criterion::Ml => n,
        Criterion::Reml => n - p,
    };
    let sigma2 = gls.r2 / denom;
    assert!((fit.sigma2 - sigma2).abs() < 1e-8 * sigma2.max(1e-12));

    // Standard errors from sigma^2 (X' V^-1 X)^-1.
    let pp = design.n_fixed();
    let xtvix_chol = cholesky(&gls.xtvix);
    for i in 0..pp {
        let mut e = vec![0.0; pp];
        e[i] = 1.0;
        let col = chol_solve(&xtvix_chol, &e);
        let se = (sigma2 * col[i]).sqrt();
        assert!(
            (fit.se[i] - se).abs() < 1e-7 * se.max(1e-12),
            "se[{i}]: {} vs {se}",
            fit.se[i]
        );
    }

    let dev = reference_deviance(design, &cov, fit.criterion);
    assert!((fit.deviance - dev).abs() < 1e-7 * dev.abs().max(1.0));

    // Conditional modes: b-hat = ΛΛ' Z' V^-1 (y - X beta) per term and level.
    for (t, term) in design.terms.iter().enumerate() {
        let k = term.n_coords();
        let g = relative_cov(k, cov.terms[t].packed());
        let table = &fit.blups[t];
        assert_eq!(table.levels, term.level_names);
        for (lvl, _) in term.level_names.iter().enumerate() {
            let mut s = vec![0.0; k];
            for (r, &level) in term.level_of_row.iter().enumerate() {
                if level == lvl {
                    for c in 0..k {
                        s[c] += term.z[r * k + c] * gls.weighted_resid[r];
                    }
                }
            }
            for c in 0..k {
                let expected = dot(&g[c], &s);
                let got = table.values[lvl * k + c];
                assert!(
                    (got - expected).abs() < 1e-7,
                    "blup term {t} level {lvl} coord {c}: {got} vs {expected}"
                );
            }
        }
    }
}

#[test]
fn fitted_estimates_match_dense_gls_at_the_fitted_covariance() {
    let rows = crossed_rows(10, 6, 7);
    let spec = slopes_spec();
    let design = gaussian_design::<f64>(&rows, &spec).unwrap();
    for criterion in [Criterion::Ml, Criterion::Reml] {
        let fit = fit_lmm(&design, criterion).unwrap();
        assert_fit_matches_reference(&fit, &design);
    }
}

// ---------------------------------------------------------------------------
// Balanced one-way ANOVA closed forms.
// ---------------------------------------------------------------------------

struct OneWay {
    rows: Vec<ModelRow>,
    /// Within-group mean square SSW / (G (n-1)).
    msw: f64,
    /// Between-group sum of squares n Σ (ȳ_i - ȳ)².
    ssb: f64,
    groups: usize,
    per_group: usize,
    grand_mean: f64,
}

fn one_way(groups: usize, per_group: usize, tau: f64, sigma2: f64, seed: u64) -> OneWay {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut values = vec![vec![0.0; per_group]; groups];
    for (i, group) in values.iter_mut().enumerate() {
        let a: f64 = tau.sqrt() * rng.sample::<f64, _>(StandardNormal);
        for (j, slot) in group.iter_mut().enumerate() {
            *slot = 3.0 + a + sigma2.sqrt() * rng.sample::<f64, _>(StandardNormal);
            rows.push(row(i, i * per_group + j, *slot, 0.0, 0.0, 0.0, 0.0));
        }
    }

    let n = (groups * per_group) as f64;
    let grand_mean = values.iter().flatten().sum::<f64>() / n;
    let group_means: Vec<f64> =
        values.iter().map(|g| g.iter().sum::<f64>() / per_group as f64).collect();
    let ssw: f64 = values
        .iter()
        .zip(&group_means)
        .map(|(g, m)| g.iter().map(|v| (v - m).powi(2)).sum::<f64>())
        .sum();
    let ssb: f64 =
        per_group as f64 * group_means.iter().map(|m| (m - grand_mean).powi(2)).sum::<f64>();
    OneWay {
        rows,
        msw: ssw / (groups * (per_group - 1)) as f64,
        ssb,
        groups,
        per_group,
        grand_mean,
    }
}

fn one_way_spec() -> ModelSpec {
    ModelSpec::new(
        "oracle-one-way",
        Family::Gaussian,
        vec![FixedEffect::Intercept],
        vec![RandomEffect::intercept_only(Factor::Climber)],
    )
}

#[test]
fn balanced_one_way_estimates_match_the_anova_closed_forms() {
    let data = one_way(50, 10, 0.49, 0.25, 3);
    let n_per = data.per_group as f64;

    let ml = fit_model_rows::<f64>(&one_way_spec(), &model_data(data.rows.clone()), Criterion::Ml)
        .unwrap();
    let tau_ml = (data.ssb / data.groups as f64 - data.msw) / n_per;
    assert!((ml.sigma2 - data.msw).abs() < 1e-6, "ML sigma2 {} vs MSW {}", ml.sigma2, data.msw);
    let got_tau = ml.var_components[0].variance(0);
    assert!((got_tau - tau_ml).abs() < 1e-6, "ML tau {got_tau} vs {tau_ml}");
    assert!((ml.gamma[0] - data.grand_mean).abs() < 1e-8);

    let reml =
        fit_model_rows::<f64>(&one_way_spec(), &model_data(data.rows), Criterion::Reml).unwrap();
    let msb = data.ssb / (data.groups - 1) as f64;
    let tau_reml = (msb - data.msw) / n_per;
    assert!((reml.sigma2 - data.msw).abs() < 1e-6);
    let got_tau = reml.var_components[0].variance(0);
    assert!((got_tau - tau_reml).abs() < 1e-6, "REML tau {got_tau} vs {tau_reml}");
    assert!((reml.gamma[0] - data.grand_mean).abs() < 1e-8);

    // Balanced-design REML standard error of the mean: sqrt(MSB / N).
    let se = (msb / (data.groups * data.per_group) as f64).sqrt();
    assert!((reml.se[0] - se).abs() < 1e-6, "REML se {} vs {se}", reml.se[0]);
}

// ---------------------------------------------------------------------------
// Degenerate structure: no grouping signal collapses to ordinary least squares.
// ---------------------------------------------------------------------------

#[test]
fn zero_variance_fit_reduces_to_ordinary_least_squares() {
    // Independent noise with no group structure: the covariance search lands
    // exactly on the zero boundary and the solution is plain least squares.
    let mut rng = ChaCha12Rng::seed_from_u64(12);
    let n_climbers = 25;
    let n_events = 20;
    let mut rows = Vec::new();
    for i in 0..n_climbers {
        let x2 = f64::from(i % 2 == 0);
        for j in 0..n_events {
            let x1 = f64::from(rng.gen_bool(0.5));
            let x3: f64 = rng.sample(StandardNormal);
            let response =
                2.0 - 0.15 * x1 + 0.3 * x2 + 0.05 * x3 + 0.1 * rng.sample::<f64, _>(StandardNormal);
            rows.push(row(i, j, response, x1, x2, x3, 0.0));
        }
    }

    let spec = ModelSpec::new(
        "oracle-null-groups",
        Family::Gaussian,
        vec![FixedEffect::Intercept, FixedEffect::Skip, FixedEffect::GenderFemale, FixedEffect::Age],
        vec![
            RandomEffect::intercept_only(Factor::Climber),
            RandomEffect::intercept_only(Factor::Event),
        ],
    );
    let design = gaussian_design::<f64>(&rows, &spec).unwrap();
    let fit = fit_lmm(&design, Criterion::Ml).unwrap();
    assert!(fit.boundary, "theta should collapse onto the zero boundary: {:?}", fit.theta);

    // Textbook OLS on the same design matrix.
    let n = design.n_rows();
    let p = design.n_fixed();
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![0.0; p];
    for i in 0..p {
        for j in 0..p {
            xtx[i][j] = (0..n).map(|r| design.x[(r, i)] * design.x[(r, j)]).sum();
        }
        xty[i] = (0..n).map(|r| design.x[(r, i)] * design.y[r]).sum();
    }
    let beta = solve_spd(&xtx, &xty);
    for (got, want) in fit.gamma.iter().zip(&beta) {
        assert!((got - want).abs() < 1e-8, "OLS reduction: {got} vs {want}");
    }
}

// ---------------------------------------------------------------------------
// Property: the block-sparse deviance agrees with the dense reference over
// randomized designs and covariance parameters.
// ---------------------------------------------------------------------------

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
    #[test]
    fn deviance_agrees_with_the_dense_reference_on_random_designs(
        n_climbers in 4usize..8,
        n_events in 3usize..6,
        seed in 0u64..10_000,
        d1 in 0.0f64..1.2, o1 in -0.8f64..0.8, d2 in 0.0f64..1.2,
        d3 in 0.0f64..1.2, o2 in -0.8f64..0.8, d4 in 0.0f64..1.2,
        use_reml in proptest::bool::ANY,
    ) {
        let rows = crossed_rows(n_climbers, n_events, seed);
        let design = gaussian_design::<f64>(&rows, &slopes_spec()).unwrap();
        let cov = CovParams::from_theta(&[2, 2], &[d1, o1, d2, d3, o2, d4]);
        let criterion = if use_reml { Criterion::Reml } else { Criterion::Ml };
        // A randomly constant covariate can make the system singular; such
        // draws carry no information about agreement.
        let Ok(fast) = profiled_deviance(&design, &cov, criterion) else {
            return Err(proptest::test_runner::TestCaseError::reject("singular design"));
        };
        let dense = reference_deviance(&design, &cov, criterion);
        proptest::prop_assert!(
            (fast - dense).abs() <= 1e-7 * dense.abs().max(1.0),
            "block-sparse {} vs dense {}", fast, dense,
        );
    }
}

// ---------------------------------------------------------------------------
// Row-order invariance is exact, not approximate.
// ---------------------------------------------------------------------------

#[test]
fn row_permutation_leaves_the_fit_bit_identical() {
    let rows = crossed_rows(7, 5, 99);
    let mut shuffled = rows.clone();
    // Deterministic Fisher-Yates.
    let mut rng = ChaCha12Rng::seed_from_u64(1000);
    for i in (1..shuffled.len()).rev() {
        shuffled.swap(i, rng.gen_range(0..=i));
    }
    assert_ne!(
        rows.iter().map(|r| (&r.climber_id, &r.event_id)).collect::<Vec<_>>(),
        shuffled.iter().map(|r| (&r.climber_id, &r.event_id)).collect::<Vec<_>>(),
    );

    let spec = slopes_spec();
    let a = fit_model_rows::<f64>(&spec, &model_data(rows), Criterion::Reml).unwrap();
    let b = fit_model_rows::<f64>(&spec, &model_data(shuffled), Criterion::Reml).unwrap();
    assert_eq!(a.deviance.to_bits(), b.deviance.to_bits());
    for (x, y) in a.gamma.iter().zip(&b.gamma) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    for (x, y) in a.theta.iter().zip(&b.theta) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}
