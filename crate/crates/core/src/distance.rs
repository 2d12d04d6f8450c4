//! Generalized Cramér-von Mises distance between two Dirac mixtures.
//!
//! For an approximating mixture `(w_i, x_i), i = 1..L` and a reference
//! `(w~_j, x~_j), j = 1..M`,
//!
//! ```text
//! D = D_rr - 2 D_xr + D_xx + K1 * |sum w_i x_i - sum w~_j x~_j|^2
//! ```
//!
//! where each `D_ab` is a weighted double sum of `xlog(|a - b|^2)`. The
//! gradient and Hessian are taken with respect to the stacked approximating
//! locations. The kernel `r^2 log r^2` is only conditionally positive
//! definite, which is why the mean penalty is needed.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::dirac::{plog_into, xlog_unchecked, ParticleSet};
use crate::error::{Error, Result};

/// Pairs closer than this (Euclidean) are treated as coincident.
pub const COINCIDENCE_TOL: f64 = 1e-14;

/// Added to the squared distance of a coincident pair when jitter is enabled.
pub const HESSIAN_JITTER: f64 = 1e-12;

/// Pair count above which row evaluations are spread over the thread pool.
const PARALLEL_WORK: usize = 1 << 14;

/// Penalty constants of the distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceParams {
    k1: f64,
    k2: f64,
    /// Regularize coincident approximating pairs in the Hessian instead of
    /// failing.
    pub jitter: bool,
}

impl Default for DistanceParams {
    fn default() -> Self {
        DistanceParams::new(100.0).expect("default K1 is valid")
    }
}

impl DistanceParams {
    /// `K2 = 2 (K1 - 2)`; requires `K1 > 2`.
    pub fn new(k1: f64) -> Result<Self> {
        if !(k1 > 2.0) || !k1.is_finite() {
            return Err(Error::Domain(format!("K1 must be finite and > 2, got {k1}")));
        }
        Ok(DistanceParams {
            k1,
            k2: 2.0 * (k1 - 2.0),
            jitter: false,
        })
    }

    /// Overrides the gradient/Hessian mean-penalty constant.
    pub fn with_k2(mut self, k2: f64) -> Result<Self> {
        if !(k2 > 0.0) || !k2.is_finite() {
            return Err(Error::Domain(format!("K2 must be finite and > 0, got {k2}")));
        }
        self.k2 = k2;
        Ok(self)
    }

    pub fn with_jitter(mut self, jitter: bool) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn k1(&self) -> f64 {
        self.k1
    }

    pub fn k2(&self) -> f64 {
        self.k2
    }
}

/// The distance and its four constituent terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceReport {
    pub total: f64,
    /// `D_rr`, reference against itself.
    pub term_ref_ref: f64,
    /// `D_xr`, approximation against reference.
    pub term_cross: f64,
    /// `D_xx`, approximation against itself.
    pub term_approx: f64,
    /// Squared difference of the means.
    pub term_mean: f64,
}

/// Neumaier-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Compensated {
    sum: f64,
    comp: f64,
}

impl Compensated {
    #[inline]
    pub(crate) fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub(crate) fn check_dims(a: &ParticleSet, b: &ParticleSet) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// Evaluates `f(i)` for `i in 0..n`, in parallel when `work` is large.
/// Results come back in index order, so reductions over them are
/// independent of the thread count.
pub(crate) fn map_rows<T, F>(n: usize, work: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if work >= PARALLEL_WORK {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// `sum_i sum_j wa_i wb_j xlog(|a_i - b_j|^2)`
fn pair_sum(a: &ParticleSet, b: &ParticleSet) -> f64 {
    let rows = map_rows(a.len(), a.len() * b.len(), |i| {
        let xi = a.location(i);
        let mut acc = Compensated::default();
        for (j, xj) in b.rows().enumerate() {
            acc.add(b.weights()[j] * xlog_unchecked(sq_dist(xi, xj)));
        }
        a.weights()[i] * acc.value()
    });
    let mut acc = Compensated::default();
    rows.into_iter().for_each(|v| acc.add(v));
    acc.value()
}

fn mean_gap(approx: &ParticleSet, reference: &ParticleSet) -> Vec<f64> {
    let ma = approx.mean();
    let mr = reference.mean();
    (0..approx.dim()).map(|d| ma[d] - mr[d]).collect()
}

/// Full distance with its decomposition.
pub fn distance(
    approx: &ParticleSet,
    reference: &ParticleSet,
    params: &DistanceParams,
) -> Result<DistanceReport> {
    check_dims(approx, reference)?;
    Ok(distance_given_rr(approx, reference, params, pair_sum(reference, reference)))
}

/// Distance with the reference self-term supplied by the caller, for
/// repeated evaluation against a fixed reference.
pub(crate) fn distance_given_rr(
    approx: &ParticleSet,
    reference: &ParticleSet,
    params: &DistanceParams,
    term_ref_ref: f64,
) -> DistanceReport {
    let term_cross = pair_sum(approx, reference);
    let term_approx = pair_sum(approx, approx);
    let term_mean: f64 = mean_gap(approx, reference).iter().map(|v| v * v).sum();
    let mut acc = Compensated::default();
    acc.add(term_ref_ref);
    acc.add(-2.0 * term_cross);
    acc.add(term_approx);
    acc.add(params.k1 * term_mean);
    DistanceReport {
        total: acc.value(),
        term_ref_ref,
        term_cross,
        term_approx,
        term_mean,
    }
}

pub(crate) fn reference_self_term(reference: &ParticleSet) -> f64 {
    pair_sum(reference, reference)
}

/// Writes `sum_j c_j plog(x - y_j)` into `out`, skipping coincident pairs
/// and the index `skip`.
pub(crate) fn plog_sum(
    x: &[f64],
    ys: &ParticleSet,
    coeffs: &[f64],
    skip: Option<usize>,
    out: &mut [f64],
) {
    let n = x.len();
    let mut z = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut acc = vec![Compensated::default(); n];
    for (j, y) in ys.rows().enumerate() {
        if Some(j) == skip || coeffs[j] == 0.0 {
            continue;
        }
        for d in 0..n {
            z[d] = x[d] - y[d];
        }
        if z.iter().map(|v| v * v).sum::<f64>().sqrt() < COINCIDENCE_TOL {
            continue;
        }
        plog_into(&z, &mut p);
        for d in 0..n {
            acc[d].add(coeffs[j] * p[d]);
        }
    }
    for d in 0..n {
        out[d] = acc[d].value();
    }
}

/// Stacked gradient `G = dD/d(eta)` of length `L * N`.
pub fn gradient(
    approx: &ParticleSet,
    reference: &ParticleSet,
    params: &DistanceParams,
) -> Result<Vec<f64>> {
    check_dims(approx, reference)?;
    let n = approx.dim();
    let gap = mean_gap(approx, reference);
    let blocks = map_rows(
        approx.len(),
        approx.len() * (approx.len() + reference.len()),
        |k| {
            let xk = approx.location(k);
            let wk = approx.weights()[k];
            let mut own = vec![0.0; n];
            let mut cross = vec![0.0; n];
            plog_sum(xk, approx, approx.weights(), Some(k), &mut own);
            plog_sum(xk, reference, reference.weights(), None, &mut cross);
            (0..n)
                .map(|d| 4.0 * wk * (own[d] - cross[d]) + params.k2 * wk * gap[d])
                .collect::<Vec<_>>()
        },
    );
    Ok(blocks.concat())
}

/// Adds `scale * (I log r^2 + 2 z z' / r^2)` to the `n x n` block at
/// `(row, col)`; only the upper triangle of a diagonal block is written.
#[inline]
fn add_kernel_upper(h: &mut DMatrix<f64>, row: usize, col: usize, z: &[f64], r2: f64, scale: f64) {
    let n = z.len();
    let lg = r2.ln();
    for a in 0..n {
        let first = if row == col { a } else { 0 };
        for b in first..n {
            let mut v = 2.0 * z[a] * z[b] / r2;
            if a == b {
                v += lg;
            }
            h[(row + a, col + b)] += scale * v;
        }
    }
}

fn mirror_upper(h: &mut DMatrix<f64>) {
    let dim = h.nrows();
    for a in 0..dim {
        for b in (a + 1)..dim {
            h[(b, a)] = h[(a, b)];
        }
    }
}

/// Off-diagonal blocks shared by both Hessians, plus the mean-penalty part
/// `K2 w_k w_l I` of every block including the diagonal.
fn hessian_common(approx: &ParticleSet, params: &DistanceParams) -> Result<DMatrix<f64>> {
    let (l, n) = (approx.len(), approx.dim());
    let w = approx.weights();
    let mut h = DMatrix::zeros(l * n, l * n);
    for k in 0..l {
        for m in k..l {
            let c = params.k2 * w[k] * w[m];
            for d in 0..n {
                h[(k * n + d, m * n + d)] += c;
            }
        }
    }
    for k in 0..l {
        let xk = approx.location(k);
        for m in (k + 1)..l {
            let z: Vec<f64> = xk.iter().zip(approx.location(m)).map(|(a, b)| a - b).collect();
            let mut r2: f64 = z.iter().map(|v| v * v).sum();
            if r2.sqrt() < COINCIDENCE_TOL {
                if !params.jitter {
                    return Err(Error::Coincidence { first: k, second: m });
                }
                r2 += HESSIAN_JITTER;
            }
            add_kernel_upper(&mut h, k * n, m * n, &z, r2, -4.0 * w[k] * w[m]);
        }
    }
    Ok(h)
}

/// Full symmetric Hessian `d^2 D / d(eta) d(eta)'` of size `LN x LN`.
///
/// Coincident approximating pairs are an error unless `params.jitter` is
/// set. Coincident approximation/reference pairs, whose log kernel diverges,
/// are dropped from the diagonal blocks, or regularized when jitter is set.
pub fn hessian(
    approx: &ParticleSet,
    reference: &ParticleSet,
    params: &DistanceParams,
) -> Result<DMatrix<f64>> {
    check_dims(approx, reference)?;
    let (l, n) = (approx.len(), approx.dim());
    let w = approx.weights();
    let mut h = hessian_common(approx, params)?;

    let diag = map_rows(l, l * (l + reference.len()) * n * n, |k| {
        let xk = approx.location(k);
        let mut block = DMatrix::zeros(n, n);
        let mut z = vec![0.0; n];
        let mut accumulate = |ys: &ParticleSet, coeffs: &[f64], skip: Option<usize>, sign: f64| {
            for (j, y) in ys.rows().enumerate() {
                if Some(j) == skip {
                    continue;
                }
                for d in 0..n {
                    z[d] = xk[d] - y[d];
                }
                let mut r2: f64 = z.iter().map(|v| v * v).sum();
                if r2.sqrt() < COINCIDENCE_TOL {
                    if params.jitter {
                        r2 += HESSIAN_JITTER;
                    } else {
                        continue;
                    }
                }
                add_kernel_upper(&mut block, 0, 0, &z, r2, sign * 4.0 * w[k] * coeffs[j]);
            }
        };
        accumulate(approx, w, Some(k), 1.0);
        accumulate(reference, reference.weights(), None, -1.0);
        block
    });
    for (k, block) in diag.into_iter().enumerate() {
        for a in 0..n {
            for b in a..n {
                h[(k * n + a, k * n + b)] += block[(a, b)];
            }
        }
    }
    mirror_upper(&mut h);
    Ok(h)
}

/// Hessian of the recursive flow, where the reference is the approximating
/// set itself: diagonal blocks reduce to `K2 w_k^2 I`.
pub fn hessian_recursive(approx: &ParticleSet, params: &DistanceParams) -> Result<DMatrix<f64>> {
    let mut h = hessian_common(approx, params)?;
    mirror_upper(&mut h);
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(locs: &[f64], dim: usize, w: &[f64]) -> ParticleSet {
        ParticleSet::normalized(locs.to_vec(), dim, w.to_vec()).unwrap()
    }

    #[test]
    fn default_constants() {
        let p = DistanceParams::default();
        assert_eq!(p.k1(), 100.0);
        assert_eq!(p.k2(), 196.0);
        assert!(DistanceParams::new(2.0).is_err());
        assert_eq!(p.with_k2(50.0).unwrap().k2(), 50.0);
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let s = set(&[0.0, 1.0, 2.5, -0.3, 4.0, 1.0], 2, &[0.2, 0.3, 0.5]);
        let r = distance(&s, &s, &DistanceParams::default()).unwrap();
        assert!(r.total.abs() < 1e-14, "{}", r.total);
    }

    #[test]
    fn hessian_cross_blocks_are_full_in_2d() {
        let p = DistanceParams::default();
        let a = set(&[0.1, 0.9, -0.7, 0.3], 2, &[0.2, 0.8]);
        let r = set(&[0.4, -1.2, 0.5, 0.5], 2, &[0.6, 0.4]);
        let h = hessian(&a, &r, &p).unwrap();
        let s = 1e-5;
        for i in 0..4 {
            let mut e = a.locations().to_vec();
            e[i] += s;
            let gp = gradient(&a.with_locations(e.clone()).unwrap(), &r, &p).unwrap();
            e[i] -= 2.0 * s;
            let gm = gradient(&a.with_locations(e).unwrap(), &r, &p).unwrap();
            for k in 0..4 {
                let fd = (gp[k] - gm[k]) / (2.0 * s);
                assert!((h[(k, i)] - fd).abs() < 1e-6, "({k},{i}): {} vs {fd}", h[(k, i)]);
            }
        }
    }

    #[test]
    fn two_singletons() {
        let a = set(&[0.0], 1, &[1.0]);
        let b = set(&[1.0], 1, &[1.0]);
        let r = distance(&a, &b, &DistanceParams::default()).unwrap();
        assert_eq!(r.total, 100.0);
        assert_eq!(r.term_cross, 0.0);
        assert_eq!(r.term_mean, 1.0);
    }

    #[test]
    fn singleton_gradient() {
        let a = set(&[0.0, 0.0], 2, &[1.0]);
        let b = set(&[-1.0, 0.0], 2, &[1.0]);
        let g = gradient(&a, &b, &DistanceParams::default()).unwrap();
        assert_eq!(g, vec![196.0, 0.0]);
    }

    #[test]
    fn perfect_fit_gradient_is_exactly_zero() {
        let s = ParticleSet::equal_weights(vec![0.1, 0.7, -1.2, 3.3, 0.0, 2.0, 5.0, -4.0], 2).unwrap();
        let g = gradient(&s, &s, &DistanceParams::default()).unwrap();
        assert!(g.iter().all(|v| *v == 0.0), "{g:?}");
    }

    #[test]
    fn dimension_mismatch() {
        let a = set(&[0.0], 1, &[1.0]);
        let b = set(&[0.0, 1.0], 2, &[1.0]);
        assert!(matches!(
            distance(&a, &b, &DistanceParams::default()),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(gradient(&a, &b, &DistanceParams::default()).is_err());
        assert!(hessian(&a, &b, &DistanceParams::default()).is_err());
    }

    #[test]
    fn recursive_hessian_two_particles() {
        let s = ParticleSet::equal_weights(vec![0.0, 0.0, 1.0, 2.0], 2).unwrap();
        let h = hessian_recursive(&s, &DistanceParams::default()).unwrap();
        for k in 0..2 {
            assert_eq!(h[(2 * k, 2 * k)], 49.0);
            assert_eq!(h[(2 * k + 1, 2 * k + 1)], 49.0);
            assert_eq!(h[(2 * k, 2 * k + 1)], 0.0);
        }
        assert_eq!(h, h.transpose());
    }

    #[test]
    fn single_particle_hessian_block() {
        let a = set(&[0.3, -0.2], 2, &[1.0]);
        let b = set(&[1.0, 0.0, -0.5, 0.5], 2, &[0.4, 0.6]);
        let p = DistanceParams::default();
        let h = hessian(&a, &b, &p).unwrap();
        let mut expected = DMatrix::<f64>::identity(2, 2) * p.k2();
        for (j, y) in b.rows().enumerate() {
            let z = [0.3 - y[0], -0.2 - y[1]];
            let r2 = z[0] * z[0] + z[1] * z[1];
            let zz = DMatrix::from_row_slice(2, 2, &[z[0] * z[0], z[0] * z[1], z[1] * z[0], z[1] * z[1]]);
            expected -= (DMatrix::identity(2, 2) * r2.ln() + zz * (2.0 / r2)) * (4.0 * b.weights()[j]);
        }
        assert!((h - expected).amax() < 1e-12);
    }

    #[test]
    fn coincident_approximating_pair() {
        let a = ParticleSet::equal_weights(vec![0.5, 0.5, 2.0], 1).unwrap();
        let r = ParticleSet::equal_weights(vec![0.0, 1.0], 1).unwrap();
        let p = DistanceParams::default();
        assert!(matches!(hessian(&a, &r, &p), Err(Error::Coincidence { first: 0, second: 1 })));
        assert!(matches!(hessian_recursive(&a, &p), Err(Error::Coincidence { .. })));
        let h = hessian(&a, &r, &p.with_jitter(true)).unwrap();
        assert!(h.iter().all(|v| v.is_finite()));
        // the gradient treats the coincident pair as contributing zero
        assert!(gradient(&a, &r, &p).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn compensated_sum_recovers_cancellation() {
        let mut acc = Compensated::default();
        for v in [1e16, 1.0, -1e16, 1.0] {
            acc.add(v);
        }
        assert_eq!(acc.value(), 2.0);
    }
}
