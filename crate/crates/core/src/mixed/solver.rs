//! Penalized least-squares solver for crossed random effects.
//!
//! For spherical coordinates `u` (random effects are `b = Lambda u`) and
//! fixed effects `beta`, each objective evaluation solves the normal
//! equations of the penalized weighted least-squares problem
//!
//! ```text
//! [ Lambda'Z'WZ Lambda + I   Lambda'Z'WX ] [u]      [Lambda'Z'Wy]
//! [      X'WZ Lambda            X'WX     ] [beta] = [   X'Wy    ]
//! ```
//!
//! exploiting the structure of at most two crossed grouping factors: the
//! first factor's block of the system is block-diagonal (one small block per
//! level), the second factor's block becomes a dense Schur complement after
//! absorbing the first, and the fixed effects are absorbed last. The
//! factorization also yields the two log-determinants the profiled deviance
//! and the Laplace approximation need.
//!
//! Cross-products with the data are computed once per weighting; solving for
//! new covariance parameters only rescales them, which keeps optimizer
//! iterations cheap.

use super::CovParams;
use crate::design::DesignMatrices;
use crate::linalg::{Cholesky, DMat};
use crate::scalar::Scalar;

/// Largest supported coefficients-per-level (intercept + one slope).
const MAX_K: usize = 2;
/// Small dense block, row-major with explicit dimensions at call sites.
type Blk<S> = [S; MAX_K * MAX_K];

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SolveError(pub String);

fn bz<S: Scalar>() -> Blk<S> {
    [S::zero(); MAX_K * MAX_K]
}

/// acc(r x c) += w * a b'
fn add_scaled_outer<S: Scalar>(acc: &mut Blk<S>, w: S, a: &[S], r: usize, b: &[S], c: usize) {
    for i in 0..r {
        for j in 0..c {
            acc[i * c + j] = acc[i * c + j] + w * a[i] * b[j];
        }
    }
}

/// lambda' m lambda for k x k blocks (lambda lower triangular, dense storage).
fn sandwich<S: Scalar>(lam: &Blk<S>, m: &Blk<S>, k: usize) -> Blk<S> {
    // t = lambda' m  (k x k)
    let mut t = bz();
    for i in 0..k {
        for j in 0..k {
            let mut s = S::zero();
            for c in 0..k {
                s = s + lam[c * k + i] * m[c * k + j];
            }
            t[i * k + j] = s;
        }
    }
    // t lambda
    let mut out = bz();
    for i in 0..k {
        for j in 0..k {
            let mut s = S::zero();
            for c in 0..k {
                s = s + t[i * k + c] * lam[c * k + j];
            }
            out[i * k + j] = s;
        }
    }
    out
}

/// lambda0' c lambda1 where c is k0 x k1.
fn scale_cross<S: Scalar>(
    lam0: &Blk<S>,
    k0: usize,
    c: &Blk<S>,
    lam1: &Blk<S>,
    k1: usize,
) -> Blk<S> {
    // t = lambda0' c  (k0 x k1)
    let mut t = bz();
    for i in 0..k0 {
        for j in 0..k1 {
            let mut s = S::zero();
            for r in 0..k0 {
                s = s + lam0[r * k0 + i] * c[r * k1 + j];
            }
            t[i * k1 + j] = s;
        }
    }
    // t lambda1
    let mut out = bz();
    for i in 0..k0 {
        for j in 0..k1 {
            let mut s = S::zero();
            for r in 0..k1 {
                s = s + t[i * k1 + r] * lam1[r * k1 + j];
            }
            out[i * k1 + j] = s;
        }
    }
    out
}

/// out = lambda' v (k-vector).
fn lam_t_vec<S: Scalar>(lam: &Blk<S>, k: usize, v: &[S], out: &mut [S]) {
    for i in 0..k {
        let mut s = S::zero();
        for r in 0..k {
            s = s + lam[r * k + i] * v[r];
        }
        out[i] = s;
    }
}

/// out(k x p) = lambda' m where m is k x p row-major.
fn lam_t_mat<S: Scalar>(lam: &Blk<S>, k: usize, m: &[S], p: usize, out: &mut [S]) {
    for i in 0..k {
        for j in 0..p {
            let mut s = S::zero();
            for r in 0..k {
                s = s + lam[r * k + i] * m[r * p + j];
            }
            out[i * p + j] = s;
        }
    }
}

/// out = lambda v.
fn lam_vec<S: Scalar>(lam: &Blk<S>, k: usize, v: &[S], out: &mut [S]) {
    for i in 0..k {
        let mut s = S::zero();
        for c in 0..=i.min(k - 1) {
            s = s + lam[i * k + c] * v[c];
        }
        out[i] = s;
    }
}

/// Cholesky of a small SPD block; `None` when a pivot is not strictly positive.
fn chol_small<S: Scalar>(a: &Blk<S>, k: usize) -> Option<Blk<S>> {
    let mut l = bz();
    for i in 0..k {
        for j in 0..=i {
            let mut s = a[i * k + j];
            for c in 0..j {
                s = s - l[i * k + c] * l[j * k + c];
            }
            if i == j {
                if !(s.is_finite() && s > S::zero()) {
                    return None;
                }
                l[i * k + i] = s.sqrt();
            } else {
                l[i * k + j] = s / l[j * k + j];
            }
        }
    }
    Some(l)
}

/// v <- L^-1 v for a small lower factor.
fn lower_solve_vec<S: Scalar>(l: &Blk<S>, k: usize, v: &mut [S]) {
    for i in 0..k {
        let mut s = v[i];
        for c in 0..i {
            s = s - l[i * k + c] * v[c];
        }
        v[i] = s / l[i * k + i];
    }
}

/// m(k x cols) <- L^-1 m.
fn lower_solve_mat<S: Scalar>(l: &Blk<S>, k: usize, m: &mut [S], cols: usize) {
    for i in 0..k {
        for j in 0..cols {
            let mut s = m[i * cols + j];
            for c in 0..i {
                s = s - l[i * k + c] * m[c * cols + j];
            }
            m[i * cols + j] = s / l[i * k + i];
        }
    }
}

/// v <- L^-T v.
fn upper_solve_vec<S: Scalar>(l: &Blk<S>, k: usize, v: &mut [S]) {
    for i in (0..k).rev() {
        let mut s = v[i];
        for c in i + 1..k {
            s = s - l[c * k + i] * v[c];
        }
        v[i] = s / l[i * k + i];
    }
}

/// out(ra x rb) = a b' where a is ra x c and b is rb x c.
fn mul_abt<S: Scalar>(a: &Blk<S>, ra: usize, b: &Blk<S>, rb: usize, c: usize) -> Blk<S> {
    let mut out = bz();
    for i in 0..ra {
        for j in 0..rb {
            let mut s = S::zero();
            for t in 0..c {
                s = s + a[i * c + t] * b[j * c + t];
            }
            out[i * rb + j] = s;
        }
    }
    out
}

/// Per-term data and cross-products, fixed for a given weighting.
pub(crate) struct TermData<S> {
    pub k: usize,
    pub n_levels: usize,
    pub level_of_row: Vec<usize>,
    /// n x k per-row covariate values.
    pub z: Vec<S>,
    /// Per level: k x k weighted cross-product block of Z with itself.
    ztz: Vec<Blk<S>>,
    /// Per level: k x p weighted cross-product with the fixed matrix (flat).
    ztx: Vec<S>,
    /// Per level: k weighted cross-product with the response (flat).
    zty: Vec<S>,
}

/// All cross-products needed to solve the penalized system for any
/// covariance parameters under one fixed weighting.
pub(crate) struct Workspace<S> {
    pub n: usize,
    pub p: usize,
    pub terms: Vec<TermData<S>>,
    /// For each level of term 0: sorted (level of term 1, k0 x k1 block).
    cross: Vec<Vec<(usize, Blk<S>)>>,
    xtx: DMat<S>,
    xty: Vec<S>,
    pub x: DMat<S>,
    pub y: Vec<S>,
    pub w: Vec<S>,
}

/// Everything a solve produces: factor log-determinants, coefficient
/// estimates, spherical and natural random effects, and the penalized
/// weighted residual sum of squares.
pub(crate) struct Solution<S> {
    pub log_det_lz: S,
    pub log_det_rx: S,
    pub beta: Vec<S>,
    /// Per term, level-major spherical coordinates.
    pub u: Vec<Vec<S>>,
    /// Per term, level-major random effects (Lambda u).
    pub b: Vec<Vec<S>>,
    pub pwrss: S,
    pub rx: Cholesky<S>,
}

impl<S: Scalar> Workspace<S> {
    /// Build cross-products for `design` under observation weights `w` and
    /// working response `y`.
    pub fn build(design: &DesignMatrices<S>, w: &[S], y: &[S]) -> Self {
        let n = design.n_rows();
        let p = design.n_fixed();
        assert!(design.terms.len() <= 2, "at most two crossed random terms are supported");
        assert_eq!(w.len(), n);
        assert_eq!(y.len(), n);
        for t in &design.terms {
            assert!(t.n_coords() <= MAX_K, "at most {MAX_K} coefficients per level");
        }

        let mut xtx = DMat::zeros(p, p);
        let mut xty = vec![S::zero(); p];
        for i in 0..n {
            let xi = design.x.row(i);
            let wi = w[i];
            for a in 0..p {
                let wxa = wi * xi[a];
                xty[a] = xty[a] + wxa * y[i];
                for b in 0..p {
                    xtx[(a, b)] = xtx[(a, b)] + wxa * xi[b];
                }
            }
        }

        let mut terms: Vec<TermData<S>> = design
            .terms
            .iter()
            .map(|t| {
                let k = t.n_coords();
                let n_levels = t.n_levels();
                TermData {
                    k,
                    n_levels,
                    level_of_row: t.level_of_row.clone(),
                    z: t.z.clone(),
                    ztz: vec![bz(); n_levels],
                    ztx: vec![S::zero(); n_levels * k * p],
                    zty: vec![S::zero(); n_levels * k],
                }
            })
            .collect();

        for td in terms.iter_mut() {
            let k = td.k;
            for i in 0..n {
                let l = td.level_of_row[i];
                let zi = &td.z[i * k..(i + 1) * k];
                let wi = w[i];
                add_scaled_outer(&mut td.ztz[l], wi, zi, k, zi, k);
                for a in 0..k {
                    let wza = wi * zi[a];
                    td.zty[l * k + a] = td.zty[l * k + a] + wza * y[i];
                    let xi = design.x.row(i);
                    for j in 0..p {
                        td.ztx[(l * k + a) * p + j] = td.ztx[(l * k + a) * p + j] + wza * xi[j];
                    }
                }
            }
        }

        let cross = if terms.len() == 2 {
            let (k0, k1) = (terms[0].k, terms[1].k);
            let mut map: std::collections::BTreeMap<(usize, usize), Blk<S>> =
                std::collections::BTreeMap::new();
            for i in 0..n {
                let l0 = terms[0].level_of_row[i];
                let l1 = terms[1].level_of_row[i];
                let z0 = &terms[0].z[i * k0..(i + 1) * k0];
                let z1 = &terms[1].z[i * k1..(i + 1) * k1];
                add_scaled_outer(map.entry((l0, l1)).or_insert_with(bz), w[i], z0, k0, z1, k1);
            }
            let mut by_l0: Vec<Vec<(usize, Blk<S>)>> = vec![Vec::new(); terms[0].n_levels];
            for ((l0, l1), blk) in map {
                by_l0[l0].push((l1, blk));
            }
            by_l0
        } else {
            Vec::new()
        };

        Workspace {
            n,
            p,
            terms,
            cross,
            xtx,
            xty,
            x: design.x.clone(),
            y: y.to_vec(),
            w: w.to_vec(),
        }
    }

    /// Build with unit weights and the design's own response.
    pub fn unweighted(design: &DesignMatrices<S>) -> Self {
        Self::build(design, &vec![S::one(); design.n_rows()], &design.y)
    }

    /// Solve the penalized system at the given covariance parameters.
    pub fn solve(&self, cov: &CovParams<S>) -> Result<Solution<S>, SolveError> {
        assert_eq!(cov.terms.len(), self.terms.len(), "one factor per random term");
        let p = self.p;
        let lam: Vec<Blk<S>> = cov
            .terms
            .iter()
            .map(|lt| {
                let k = lt.k();
                let mut m = bz();
                for i in 0..k {
                    for j in 0..=i {
                        m[i * k + j] = lt.get(i, j);
                    }
                }
                m
            })
            .collect();

        let mut log_det_lz = S::zero();

        // Leading factor: per-level Cholesky of lambda0' Z0'WZ0 lambda0 + I.
        let mut l11: Vec<Blk<S>> = Vec::new();
        if let Some(t0) = self.terms.first() {
            let k0 = t0.k;
            l11.reserve(t0.n_levels);
            for l in 0..t0.n_levels {
                let mut a = sandwich(&lam[0], &t0.ztz[l], k0);
                for d in 0..k0 {
                    a[d * k0 + d] = a[d * k0 + d] + S::one();
                }
                let ch = chol_small(&a, k0).ok_or_else(|| {
                    SolveError(format!("random-effects block for level {l} of the first factor is not positive definite"))
                })?;
                for d in 0..k0 {
                    log_det_lz = log_det_lz + S::of(2.0) * ch[d * k0 + d].ln();
                }
                l11.push(ch);
            }
        }

        // Trailing factor: dense Schur complement after absorbing the first.
        let mut l21: Vec<Vec<(usize, Blk<S>)>> = Vec::new();
        let mut l22: Option<Cholesky<S>> = None;
        let mut q2 = 0;
        if self.terms.len() == 2 {
            let (t0, t1) = (&self.terms[0], &self.terms[1]);
            let (k0, k1) = (t0.k, t1.k);
            q2 = t1.n_levels * k1;
            let mut s = DMat::zeros(q2, q2);
            for l in 0..t1.n_levels {
                let a = {
                    let mut a = sandwich(&lam[1], &t1.ztz[l], k1);
                    for d in 0..k1 {
                        a[d * k1 + d] = a[d * k1 + d] + S::one();
                    }
                    a
                };
                for r in 0..k1 {
                    for c in 0..k1 {
                        s[(l * k1 + r, l * k1 + c)] = a[r * k1 + c];
                    }
                }
            }

            l21 = Vec::with_capacity(t0.n_levels);
            for (l0, blocks) in self.cross.iter().enumerate() {
                let mut row: Vec<(usize, Blk<S>)> = Vec::with_capacity(blocks.len());
                for (l1, c) in blocks {
                    let a12 = scale_cross(&lam[0], k0, c, &lam[1], k1);
                    // B = A12' L11^-T, one forward solve per row of A12'.
                    let mut b = bz();
                    for r in 0..k1 {
                        for cc in 0..k0 {
                            b[r * k0 + cc] = a12[cc * k1 + r];
                        }
                    }
                    for r in 0..k1 {
                        lower_solve_vec(&l11[l0], k0, &mut b[r * k0..(r + 1) * k0]);
                    }
                    row.push((*l1, b));
                }
                // Schur update: S -= B_a B_b' over level pairs sharing l0.
                // Entries land in the lower triangle because l1 is ascending.
                for ia in 0..row.len() {
                    let (l1a, ba) = (row[ia].0, row[ia].1);
                    for (l1b, bb) in row.iter().take(ia + 1) {
                        let prod = mul_abt(&ba, k1, bb, k1, k0);
                        for r in 0..k1 {
                            for c in 0..k1 {
                                let (i, j) = (l1a * k1 + r, l1b * k1 + c);
                                s[(i, j)] = s[(i, j)] - prod[r * k1 + c];
                            }
                        }
                    }
                }
                l21.push(row);
            }

            let ch = Cholesky::factor(&s).map_err(|e| {
                SolveError(format!("Schur complement of the second factor failed: {e}"))
            })?;
            log_det_lz = log_det_lz + ch.log_det();
            l22 = Some(ch);
        }

        // Scaled right-hand sides and forward solves through L.
        let mut cu0: Vec<S> = Vec::new();
        let mut r0: Vec<S> = Vec::new();
        if let Some(t0) = self.terms.first() {
            let k0 = t0.k;
            cu0 = vec![S::zero(); t0.n_levels * k0];
            r0 = vec![S::zero(); t0.n_levels * k0 * p];
            for l in 0..t0.n_levels {
                lam_t_vec(&lam[0], k0, &t0.zty[l * k0..(l + 1) * k0], &mut cu0[l * k0..(l + 1) * k0]);
                lower_solve_vec(&l11[l], k0, &mut cu0[l * k0..(l + 1) * k0]);
                lam_t_mat(
                    &lam[0],
                    k0,
                    &t0.ztx[l * k0 * p..(l + 1) * k0 * p],
                    p,
                    &mut r0[l * k0 * p..(l + 1) * k0 * p],
                );
                lower_solve_mat(&l11[l], k0, &mut r0[l * k0 * p..(l + 1) * k0 * p], p);
            }
        }

        let mut cu2: Vec<S> = Vec::new();
        let mut r2 = DMat::zeros(q2, p);
        if let Some(l22) = &l22 {
            let t1 = &self.terms[1];
            let (k0, k1) = (self.terms[0].k, t1.k);
            cu2 = vec![S::zero(); q2];
            for l in 0..t1.n_levels {
                lam_t_vec(&lam[1], k1, &t1.zty[l * k1..(l + 1) * k1], &mut cu2[l * k1..(l + 1) * k1]);
                let mut scaled = vec![S::zero(); k1 * p];
                lam_t_mat(&lam[1], k1, &t1.ztx[l * k1 * p..(l + 1) * k1 * p], p, &mut scaled);
                for r in 0..k1 {
                    for j in 0..p {
                        r2[(l * k1 + r, j)] = scaled[r * p + j];
                    }
                }
            }
            // Subtract L21 * (solved first-factor parts).
            for (l0, row) in l21.iter().enumerate() {
                for (l1, b) in row {
                    for r in 0..k1 {
                        for c in 0..k0 {
                            let w = b[r * k0 + c];
                            cu2[l1 * k1 + r] = cu2[l1 * k1 + r] - w * cu0[l0 * k0 + c];
                            for j in 0..p {
                                r2[(l1 * k1 + r, j)] =
                                    r2[(l1 * k1 + r, j)] - w * r0[(l0 * k0 + c) * p + j];
                            }
                        }
                    }
                }
            }
            l22.forward(&mut cu2);
            let mut col = vec![S::zero(); q2];
            for j in 0..p {
                for i in 0..q2 {
                    col[i] = r2[(i, j)];
                }
                l22.forward(&mut col);
                for i in 0..q2 {
                    r2[(i, j)] = col[i];
                }
            }
        }

        // Fixed-effects block: RX'RX = X'WX - R0'R0 - R2'R2.
        let mut rxtrx = self.xtx.clone();
        if let Some(t0) = self.terms.first() {
            let k0 = t0.k;
            for lr in 0..t0.n_levels * k0 {
                for a in 0..p {
                    let va = r0[lr * p + a];
                    for bcol in 0..p {
                        rxtrx[(a, bcol)] = rxtrx[(a, bcol)] - va * r0[lr * p + bcol];
                    }
                }
            }
        }
        for i in 0..q2 {
            for a in 0..p {
                let va = r2[(i, a)];
                for bcol in 0..p {
                    rxtrx[(a, bcol)] = rxtrx[(a, bcol)] - va * r2[(i, bcol)];
                }
            }
        }
        let rx = Cholesky::factor(&rxtrx).map_err(|e| {
            SolveError(format!("fixed-effects system is singular (collinear columns?): {e}"))
        })?;
        let log_det_rx = rx.log_det();

        // beta from the reduced system.
        let mut rhs = self.xty.clone();
        if let Some(t0) = self.terms.first() {
            let k0 = t0.k;
            for lr in 0..t0.n_levels * k0 {
                for a in 0..p {
                    rhs[a] = rhs[a] - r0[lr * p + a] * cu0[lr];
                }
            }
        }
        for i in 0..q2 {
            for a in 0..p {
                rhs[a] = rhs[a] - r2[(i, a)] * cu2[i];
            }
        }
        let beta = rx.solve(&rhs);

        // Backward pass for the spherical coordinates.
        let mut u: Vec<Vec<S>> = Vec::with_capacity(self.terms.len());
        let mut u1 = Vec::new();
        if let Some(l22) = &l22 {
            let k1 = self.terms[1].k;
            u1 = cu2.clone();
            for i in 0..q2 {
                for j in 0..p {
                    u1[i] = u1[i] - r2[(i, j)] * beta[j];
                }
            }
            l22.backward(&mut u1);
            let _ = k1;
        }
        if let Some(t0) = self.terms.first() {
            let k0 = t0.k;
            let mut u0 = cu0.clone();
            for l in 0..t0.n_levels {
                for r in 0..k0 {
                    let mut s = u0[l * k0 + r];
                    for j in 0..p {
                        s = s - r0[(l * k0 + r) * p + j] * beta[j];
                    }
                    u0[l * k0 + r] = s;
                }
            }
            if !u1.is_empty() {
                let k1 = self.terms[1].k;
                for (l0, row) in l21.iter().enumerate() {
                    for (l1, bblk) in row {
                        // subtract B' u1[l1 block]
                        for c in 0..k0 {
                            let mut s = S::zero();
                            for r in 0..k1 {
                                s = s + bblk[r * k0 + c] * u1[l1 * k1 + r];
                            }
                            u0[l0 * k0 + c] = u0[l0 * k0 + c] - s;
                        }
                    }
                }
            }
            for l in 0..t0.n_levels {
                upper_solve_vec(&l11[l], k0, &mut u0[l * k0..(l + 1) * k0]);
            }
            u.push(u0);
        }
        if !cu2.is_empty() || self.terms.len() == 2 {
            u.push(u1);
        }

        // Natural random effects b = Lambda u, per term.
        let mut b: Vec<Vec<S>> = Vec::with_capacity(self.terms.len());
        for (t, td) in self.terms.iter().enumerate() {
            let k = td.k;
            let mut bt = vec![S::zero(); td.n_levels * k];
            for l in 0..td.n_levels {
                lam_vec(&lam[t], k, &u[t][l * k..(l + 1) * k], &mut bt[l * k..(l + 1) * k]);
            }
            b.push(bt);
        }

        // Penalized weighted residual sum of squares.
        let mut rss = S::zero();
        for i in 0..self.n {
            let xi = self.x.row(i);
            let mut fit = S::zero();
            for j in 0..p {
                fit = fit + xi[j] * beta[j];
            }
            for (t, td) in self.terms.iter().enumerate() {
                let k = td.k;
                let l = td.level_of_row[i];
                let zi = &td.z[i * k..(i + 1) * k];
                for a in 0..k {
                    fit = fit + zi[a] * b[t][l * k + a];
                }
            }
            let r = self.y[i] - fit;
            rss = rss + self.w[i] * r * r;
        }
        let mut usqr = S::zero();
        for ut in &u {
            for &v in ut {
                usqr = usqr + v * v;
            }
        }

        Ok(Solution { log_det_lz, log_det_rx, beta, u, b, pwrss: rss + usqr, rx })
    }

    /// Linear predictor for arbitrary coefficient values (level-major
    /// natural random effects per term).
    pub fn predictor(&self, beta: &[S], b: &[Vec<S>]) -> Vec<S> {
        let mut eta = vec![S::zero(); self.n];
        for i in 0..self.n {
            let xi = self.x.row(i);
            let mut fit = S::zero();
            for j in 0..self.p {
                fit = fit + xi[j] * beta[j];
            }
            for (t, td) in self.terms.iter().enumerate() {
                let k = td.k;
                let l = td.level_of_row[i];
                let zi = &td.z[i * k..(i + 1) * k];
                for a in 0..k {
                    fit = fit + zi[a] * b[t][l * k + a];
                }
            }
            eta[i] = fit;
        }
        eta
    }
}
