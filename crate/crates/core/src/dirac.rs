//! Dirac mixtures: weighted particle sets, the `xlog`/`plog` kernels, and
//! naive Bayesian reweighting.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::homotopy::LikelihoodModel;

/// Tolerance on the total mass of a particle set.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Smallest weight kept after normalization.
pub const MIN_WEIGHT: f64 = 1e-300;

/// `z * ln(z)` with the continuous extension `xlog(0) = 0`.
pub fn xlog(z: f64) -> Result<f64> {
    if z < 0.0 || z.is_nan() {
        return Err(Error::Domain(format!("xlog of negative argument {z}")));
    }
    Ok(xlog_unchecked(z))
}

#[inline]
pub(crate) fn xlog_unchecked(z: f64) -> f64 {
    if z == 0.0 {
        0.0
    } else {
        z * z.ln()
    }
}

/// `z * ln(z'z)`, zero at the origin.
pub fn plog(z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    plog_into(z, &mut out);
    out
}

#[inline]
pub(crate) fn plog_into(z: &[f64], out: &mut [f64]) {
    let r2: f64 = z.iter().map(|v| v * v).sum();
    if r2 == 0.0 {
        out.iter_mut().for_each(|o| *o = 0.0);
    } else {
        let lg = r2.ln();
        for (o, v) in out.iter_mut().zip(z) {
            *o = v * lg;
        }
    }
}

/// A weighted Dirac mixture with `L` components in `R^N`.
///
/// Locations are stored row-major, so the flat slice is the stacked parameter
/// vector `[x_1; x_2; ...; x_L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    locations: Vec<f64>,
    weights: Vec<f64>,
    dim: usize,
}

impl ParticleSet {
    /// Builds a set from row-major locations and normalized weights.
    pub fn new(locations: Vec<f64>, dim: usize, weights: Vec<f64>) -> Result<Self> {
        let set = ParticleSet {
            locations,
            weights,
            dim,
        };
        set.validate()?;
        Ok(set)
    }

    /// Builds a set after normalizing positive weights to unit mass.
    pub fn normalized(locations: Vec<f64>, dim: usize, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidParticleSet(format!(
                "weights must have a positive finite sum, got {total}"
            )));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Self::new(locations, dim, weights)
    }

    /// Equal-weight set over the given row-major locations.
    pub fn equal_weights(locations: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || locations.is_empty() || locations.len() % dim != 0 {
            return Err(Error::InvalidParticleSet(format!(
                "{} coordinates do not form rows of dimension {dim}",
                locations.len()
            )));
        }
        let count = locations.len() / dim;
        Self::new(locations, dim, vec![1.0 / count as f64; count])
    }

    /// Equal-weight set from a list of rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidParticleSet("ragged rows".into()));
        }
        Self::equal_weights(rows.concat(), dim)
    }

    fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::InvalidParticleSet(msg));
        if self.dim == 0 {
            return invalid("dimension must be at least 1".into());
        }
        if self.weights.is_empty() {
            return invalid("at least one particle is required".into());
        }
        if self.locations.len() != self.weights.len() * self.dim {
            return invalid(format!(
                "{} coordinates for {} particles of dimension {}",
                self.locations.len(),
                self.weights.len(),
                self.dim
            ));
        }
        if let Some(i) = self.weights.iter().position(|w| !(*w > 0.0) || !w.is_finite()) {
            return invalid(format!("weight {i} is not strictly positive"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return invalid(format!("weights sum to {total}, not 1"));
        }
        if self.locations.iter().any(|v| !v.is_finite()) {
            return invalid("non-finite location".into());
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Stacked row-major locations.
    pub fn locations(&self) -> &[f64] {
        &self.locations
    }

    pub fn location(&self, i: usize) -> &[f64] {
        &self.locations[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.locations.chunks_exact(self.dim)
    }

    /// Same weights, new stacked locations.
    pub fn with_locations(&self, locations: Vec<f64>) -> Result<Self> {
        Self::new(locations, self.dim, self.weights.clone())
    }

    /// Same locations, new normalized weights.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Self::new(self.locations.clone(), self.dim, weights)
    }

    /// Adds `shift` to every location.
    pub fn translated(&self, shift: &[f64]) -> Result<Self> {
        if shift.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: shift.len(),
            });
        }
        let locations = self
            .locations
            .chunks_exact(self.dim)
            .flat_map(|row| row.iter().zip(shift).map(|(a, b)| a + b))
            .collect();
        self.with_locations(locations)
    }

    /// True when every weight equals `1/L` within `tol`.
    pub fn is_equally_weighted(&self, tol: f64) -> bool {
        let target = 1.0 / self.len() as f64;
        self.weights.iter().all(|w| (w - target).abs() <= tol)
    }

    /// Effective sample size `1 / sum(w^2)`; exactly the particle count for
    /// bit-identical weights.
    pub fn ess(&self) -> f64 {
        if self.weights.iter().all(|w| *w == self.weights[0]) {
            return self.len() as f64;
        }
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim);
        for (row, w) in self.rows().zip(&self.weights) {
            for (d, v) in row.iter().enumerate() {
                m[d] += w * v;
            }
        }
        m
    }

    /// Weighted covariance with the `1/sum(w)` (biased) normalization.
    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.mean();
        let mut c = DMatrix::zeros(self.dim, self.dim);
        for (row, w) in self.rows().zip(&self.weights) {
            for a in 0..self.dim {
                let da = row[a] - m[a];
                for b in 0..self.dim {
                    c[(a, b)] += w * da * (row[b] - m[b]);
                }
            }
        }
        c
    }

    /// Number of bit-distinct locations.
    pub fn distinct_locations(&self) -> usize {
        let mut rows: Vec<Vec<u64>> = self
            .rows()
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort_unstable();
        rows.dedup();
        rows.len()
    }

    /// Writes the set as CSV with header `weight,x1,...,xN`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header = vec!["weight".to_string()];
        header.extend((1..=self.dim).map(|d| format!("x{d}")));
        out.write_record(&header)?;
        for (row, w) in self.rows().zip(&self.weights) {
            let mut rec = vec![format_f64(*w)];
            rec.extend(row.iter().map(|v| format_f64(*v)));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a set written by [`ParticleSet::write_csv`]. Weights that already
    /// sum to one are kept bit-for-bit; others are renormalized.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut input = csv::Reader::from_reader(reader);
        let header = input.headers()?.clone();
        if header.get(0) != Some("weight") || header.len() < 2 {
            return Err(Error::InvalidParticleSet(
                "expected header `weight,x1,...,xN`".into(),
            ));
        }
        let dim = header.len() - 1;
        let mut weights = Vec::new();
        let mut locations = Vec::new();
        for (line, record) in input.records().enumerate() {
            let record = record?;
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|e| {
                    Error::InvalidParticleSet(format!("row {}: {s:?}: {e}", line + 1))
                })
            };
            weights.push(parse(&record[0])?);
            for field in record.iter().skip(1) {
                locations.push(parse(field)?);
            }
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() <= WEIGHT_SUM_TOL {
            Self::new(locations, dim, weights)
        } else {
            Self::normalized(locations, dim, weights)
        }
    }
}

/// Formats with 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Posterior of a one-shot Bayesian update on a Dirac mixture.
#[derive(Debug, Clone)]
pub struct ReweightResult {
    pub posterior: ParticleSet,
    pub effective_sample_size: f64,
}

/// Multiplies prior weights by the likelihood and renormalizes.
///
/// Locations are left untouched; only the weights change.
pub fn bayes_reweight(prior: &ParticleSet, lik: &LikelihoodModel) -> Result<ReweightResult> {
    let log_lik = prior
        .rows()
        .map(|x| lik.log_lik(x))
        .collect::<Result<Vec<_>>>()?;
    reweight_log(prior, &log_lik)
}

/// Reweighting from precomputed log-likelihood values at the prior locations.
pub fn reweight_log(prior: &ParticleSet, log_lik: &[f64]) -> Result<ReweightResult> {
    if log_lik.len() != prior.len() {
        return Err(Error::DimensionMismatch {
            expected: prior.len(),
            got: log_lik.len(),
        });
    }
    let log_w: Vec<f64> = prior
        .weights()
        .iter()
        .zip(log_lik)
        .map(|(w, l)| w.ln() + l)
        .collect();
    let weights = normalize_log_weights(&log_w)?;
    let posterior = prior.with_weights(weights)?;
    Ok(ReweightResult {
        effective_sample_size: posterior.ess(),
        posterior,
    })
}

/// Shifted softmax with the [`MIN_WEIGHT`] floor.
pub(crate) fn normalize_log_weights(log_w: &[f64]) -> Result<Vec<f64>> {
    if log_w.iter().any(|v| v.is_nan()) {
        return Err(Error::Domain("NaN log-likelihood".into()));
    }
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::UpdateImpossible);
    }
    let mut w: Vec<f64> = log_w.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    if w.iter().any(|v| *v < MIN_WEIGHT) {
        w.iter_mut().for_each(|v| *v = v.max(MIN_WEIGHT));
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::homotopy::LikelihoodModel;
    use std::f64::consts::E;

    fn two_point() -> ParticleSet {
        ParticleSet::equal_weights(vec![0.0, 1.0], 1).unwrap()
    }

    #[test]
    fn xlog_values() {
        assert_eq!(xlog(1.0).unwrap(), 0.0);
        assert_eq!(xlog(0.0).unwrap(), 0.0);
        assert!((xlog(E).unwrap() - E).abs() < 1e-15);
        assert!(matches!(xlog(-1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn plog_values() {
        assert_eq!(plog(&[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(plog(&[1.0, 0.0]), vec![0.0, 0.0]);
        let v = plog(&[E, 0.0]);
        assert!((v[0] - 2.0 * E).abs() < 1e-14);
        assert_eq!(v[1], 0.0);
    }

    #[test]
    fn kernels_continuous_at_zero() {
        for eps in [1e-300, 1e-30, 1e-8] {
            assert!(xlog(eps).unwrap().abs() < 1e-6);
            let u = [0.6, -0.8];
            let z: Vec<f64> = u.iter().map(|v| v * eps).collect();
            let p = plog(&z);
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm < 1e-6, "eps {eps}: {norm}");
        }
    }

    #[test]
    fn invariants_enforced() {
        assert!(ParticleSet::new(vec![0.0, 1.0], 1, vec![0.5, 0.6]).is_err());
        assert!(ParticleSet::new(vec![0.0, 1.0], 1, vec![1.0, 0.0]).is_err());
        assert!(ParticleSet::new(vec![0.0, f64::NAN], 1, vec![0.5, 0.5]).is_err());
        assert!(ParticleSet::new(vec![], 1, vec![]).is_err());
        assert!(ParticleSet::new(vec![0.0], 0, vec![1.0]).is_err());
    }

    #[test]
    fn reweight_hand_normalized() {
        let r = reweight_log(&two_point(), &[0.0, 3f64.ln()]).unwrap();
        assert!((r.posterior.weights()[0] - 0.25).abs() < 1e-15);
        assert!((r.posterior.weights()[1] - 0.75).abs() < 1e-15);
        assert_eq!(r.posterior.locations(), two_point().locations());
    }

    #[test]
    fn reweight_flat_keeps_weights() {
        let prior = ParticleSet::normalized(vec![0.0, 1.0, 2.0], 1, vec![1.0, 2.0, 3.0]).unwrap();
        let r = bayes_reweight(&prior, &LikelihoodModel::flat()).unwrap();
        for (a, b) in r.posterior.weights().iter().zip(prior.weights()) {
            assert!((a - b).abs() < 1e-15);
        }
        let eq = ParticleSet::equal_weights(vec![0.0, 1.0, 2.0, 3.0], 1).unwrap();
        let r = bayes_reweight(&eq, &LikelihoodModel::flat()).unwrap();
        assert_eq!(r.effective_sample_size, 4.0);
    }

    #[test]
    fn reweight_full_degeneration() {
        let r = reweight_log(&two_point(), &[0.0, f64::NEG_INFINITY]).unwrap();
        assert!((r.posterior.weights()[0] - 1.0).abs() < 1e-15);
        assert!(r.posterior.weights()[1] > 0.0);
        assert_eq!(r.effective_sample_size, 1.0);
    }

    #[test]
    fn reweight_impossible() {
        let r = reweight_log(&two_point(), &[f64::NEG_INFINITY; 2]);
        assert!(matches!(r, Err(Error::UpdateImpossible)));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let set = ParticleSet::normalized(
            vec![0.1, -2.5e-7, 1.0 / 3.0, 12345.678901234567, -0.0, 7.0],
            2,
            vec![0.2, 0.3, 0.5],
        )
        .unwrap();
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("weight,x1,x2\n"));
        let back = ParticleSet::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.locations(), set.locations());
        for (a, b) in back.weights().iter().zip(set.weights()) {
            assert!((a - b).abs() <= 1e-16);
        }
    }

    #[test]
    fn moments() {
        let set = ParticleSet::equal_weights(vec![0.0, 0.0, 2.0, 4.0], 2).unwrap();
        assert_eq!(set.mean().as_slice(), &[1.0, 2.0]);
        let c = set.covariance();
        assert_eq!(c[(0, 0)], 1.0);
        assert_eq!(c[(1, 1)], 4.0);
        assert_eq!(c[(0, 1)], 2.0);
        assert_eq!(set.distinct_locations(), 2);
    }
}
