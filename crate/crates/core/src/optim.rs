//! Bounded Nelder-Mead simplex minimization.
//!
//! The mixed-model deviance is cheap but derivative-free (the covariance
//! factor enters through a Cholesky factorization), so a simplex search with
//! box projection is the whole optimizer. Everything is deterministic: same
//! start, same path.

use crate::scalar::Scalar;

/// Box constraint for one coordinate; use infinities for unbounded sides.
#[derive(Debug, Clone, Copy)]
pub struct Bound<S> {
    pub lower: S,
    pub upper: S,
}

impl<S: Scalar> Bound<S> {
    pub fn free() -> Self {
        Self { lower: S::neg_infinity(), upper: S::infinity() }
    }

    pub fn at_least(lower: S) -> Self {
        Self { lower, upper: S::infinity() }
    }

    fn clamp(&self, x: S) -> S {
        x.max(self.lower).min(self.upper)
    }
}

#[derive(Debug, Clone)]
pub struct Options<S> {
    /// Hard cap on objective evaluations.
    pub max_evals: usize,
    /// Absolute tolerance on the spread of objective values over the simplex.
    pub ftol: S,
    /// Absolute tolerance on the coordinate spread of the simplex.
    pub xtol: S,
    /// Relative step used to seed the initial simplex.
    pub init_step: S,
}

impl<S: Scalar> Default for Options<S> {
    fn default() -> Self {
        Self {
            max_evals: 2000,
            ftol: S::of(1e-8),
            xtol: S::of(1e-7),
            init_step: S::of(0.2),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome<S> {
    pub x: Vec<S>,
    pub fx: S,
    pub evals: usize,
    pub converged: bool,
}

/// Order objective values with NaN treated as worse than everything.
fn cmp<S: Scalar>(a: S, b: S) -> std::cmp::Ordering {
    match (a.is_nan(), b.is_nan()) {
        (true, true) => std::cmp::Ordering::Equal,
        (true, false) => std::cmp::Ordering::Greater,
        (false, true) => std::cmp::Ordering::Less,
        (false, false) => a.partial_cmp(&b).unwrap(),
    }
}

/// Minimize `f` over the box given by `bounds`, starting from `x0`.
pub fn minimize<S: Scalar>(
    mut f: impl FnMut(&[S]) -> S,
    x0: &[S],
    bounds: &[Bound<S>],
    opts: &Options<S>,
) -> Outcome<S> {
    let n = x0.len();
    assert_eq!(bounds.len(), n, "one bound per coordinate");
    assert!(n > 0, "cannot optimize over zero dimensions");

    let project = |x: &mut [S]| {
        for (xi, b) in x.iter_mut().zip(bounds) {
            *xi = b.clamp(*xi);
        }
    };

    // Initial simplex: the start point plus one step along each axis. Steps
    // flip direction rather than collapse when they would leave the box.
    let mut start = x0.to_vec();
    project(&mut start);
    let mut simplex: Vec<Vec<S>> = Vec::with_capacity(n + 1);
    simplex.push(start.clone());
    for i in 0..n {
        let mut v = start.clone();
        let step = opts.init_step * v[i].abs().max(S::one());
        let up = v[i] + step;
        v[i] = if up <= bounds[i].upper { up } else { v[i] - step };
        project(&mut v);
        simplex.push(v);
    }

    let mut evals = 0usize;
    let mut fvals: Vec<S> = simplex
        .iter()
        .map(|v| {
            evals += 1;
            f(v)
        })
        .collect();

    let (alpha, gamma, rho, sigma) = (S::one(), S::of(2.0), S::of(0.5), S::of(0.5));
    let mut order: Vec<usize> = (0..=n).collect();

    loop {
        order.sort_by(|&a, &b| cmp(fvals[a], fvals[b]).then(a.cmp(&b)));
        let best = order[0];
        let worst = order[n];
        let second_worst = order[n - 1];

        let f_spread = fvals[worst] - fvals[best];
        let x_spread = simplex
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[best]).map(|(&a, &b)| (a - b).abs()))
            .fold(S::zero(), S::max);
        if (f_spread <= opts.ftol && x_spread <= opts.xtol) || f_spread.is_nan() {
            return Outcome {
                x: simplex[best].clone(),
                fx: fvals[best],
                evals,
                converged: !f_spread.is_nan(),
            };
        }
        if evals >= opts.max_evals {
            return Outcome { x: simplex[best].clone(), fx: fvals[best], evals, converged: false };
        }

        // Centroid of all vertices but the worst.
        let mut centroid = vec![S::zero(); n];
        for &idx in order.iter().take(n) {
            for (c, &xi) in centroid.iter_mut().zip(&simplex[idx]) {
                *c = *c + xi;
            }
        }
        let inv = S::one() / S::of_usize(n);
        centroid.iter_mut().for_each(|c| *c = *c * inv);

        let blend = |from: &[S], towards: &[S], t: S| -> Vec<S> {
            let mut v: Vec<S> = from
                .iter()
                .zip(towards)
                .map(|(&c, &w)| c + t * (c - w))
                .collect();
            project(&mut v);
            v
        };

        let reflected = blend(&centroid, &simplex[worst], alpha);
        let f_reflected = f(&reflected);
        evals += 1;

        if cmp(f_reflected, fvals[best]).is_lt() {
            // Try to go further in the same direction.
            let expanded = blend(&centroid, &simplex[worst], gamma);
            let f_expanded = f(&expanded);
            evals += 1;
            if cmp(f_expanded, f_reflected).is_lt() {
                simplex[worst] = expanded;
                fvals[worst] = f_expanded;
            } else {
                simplex[worst] = reflected;
                fvals[worst] = f_reflected;
            }
            continue;
        }
        if cmp(f_reflected, fvals[second_worst]).is_lt() {
            simplex[worst] = reflected;
            fvals[worst] = f_reflected;
            continue;
        }

        // Contract, either outside (towards the reflection) or inside.
        let contracted = if cmp(f_reflected, fvals[worst]).is_lt() {
            blend(&centroid, &simplex[worst], rho)
        } else {
            blend(&centroid, &simplex[worst], -rho)
        };
        let f_contracted = f(&contracted);
        evals += 1;
        if cmp(f_contracted, f_reflected.min(fvals[worst])).is_lt()
            || (f_reflected.is_nan() && !f_contracted.is_nan())
        {
            simplex[worst] = contracted;
            fvals[worst] = f_contracted;
            continue;
        }

        // Shrink everything towards the best vertex.
        let best_point = simplex[best].clone();
        for &idx in order.iter().skip(1) {
            let mut v: Vec<S> = simplex[idx]
                .iter()
                .zip(&best_point)
                .map(|(&xi, &bi)| bi + sigma * (xi - bi))
                .collect();
            project(&mut v);
            fvals[idx] = f(&v);
            evals += 1;
            simplex[idx] = v;
        }
    }
}
