//! Likelihoods parametrized by artificial time `gamma`.
//!
//! The progressive likelihood is `f_L(x, gamma) = f_L(x)^g(gamma)` for a
//! schedule `g` with `g(0) = 0` and `g(1) = 1`. Everything is kept in log
//! space: a model only ever hands out `log f_L` values and log-derivative
//! ratios, never `f_L` itself unless explicitly asked for.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// Progression schedule `g(gamma)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Schedule {
    /// `g(gamma) = gamma`
    #[default]
    Linear,
    /// `g(gamma) = gamma^p` with `p >= 1`.
    Power(f64),
}

impl Schedule {
    pub fn power2() -> Self {
        Schedule::Power(2.0)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Schedule::Linear => Ok(()),
            Schedule::Power(p) if p >= 1.0 && p.is_finite() => Ok(()),
            Schedule::Power(p) => Err(Error::Domain(format!(
                "schedule exponent must be finite and >= 1, got {p}"
            ))),
        }
    }

    pub fn g(&self, gamma: f64) -> f64 {
        match *self {
            Schedule::Linear => gamma,
            Schedule::Power(p) => {
                if gamma <= 0.0 {
                    0.0
                } else if gamma >= 1.0 {
                    1.0
                } else {
                    gamma.powf(p)
                }
            }
        }
    }

    /// `dg/dgamma`
    pub fn g_dot(&self, gamma: f64) -> f64 {
        match *self {
            Schedule::Linear => 1.0,
            Schedule::Power(p) => {
                if p == 1.0 {
                    1.0
                } else if gamma <= 0.0 {
                    0.0
                } else {
                    p * gamma.powf(p - 1.0)
                }
            }
        }
    }
}

/// Measurement functions `h: R^N -> R^P` available to Gaussian likelihoods.
#[derive(Debug, Clone, PartialEq)]
pub enum MeasurementFn {
    Identity,
    /// `h(x) = H x` with `H` of shape `P x N`.
    Linear(DMatrix<f64>),
    /// Euclidean distance to the origin.
    RangeToOrigin,
    /// `[range, bearing]` of the first two coordinates; bearing residuals
    /// are wrapped to `(-pi, pi]`.
    RangeBearing,
    /// Componentwise cube.
    Cubic,
}

impl MeasurementFn {
    /// Output dimension for a state of dimension `n`.
    pub fn output_dim(&self, n: usize) -> Result<usize> {
        match self {
            MeasurementFn::Identity | MeasurementFn::Cubic => Ok(n),
            MeasurementFn::Linear(h) => {
                if h.ncols() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: h.ncols(),
                    });
                }
                Ok(h.nrows())
            }
            MeasurementFn::RangeToOrigin => Ok(1),
            MeasurementFn::RangeBearing => {
                if n < 2 {
                    return Err(Error::DimensionMismatch { expected: 2, got: n });
                }
                Ok(2)
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<DVector<f64>> {
        let y = match self {
            MeasurementFn::Identity => DVector::from_column_slice(x),
            MeasurementFn::Linear(h) => {
                if h.ncols() != x.len() {
                    return Err(Error::DimensionMismatch {
                        expected: h.ncols(),
                        got: x.len(),
                    });
                }
                h * DVector::from_column_slice(x)
            }
            MeasurementFn::RangeToOrigin => {
                DVector::from_element(1, x.iter().map(|v| v * v).sum::<f64>().sqrt())
            }
            MeasurementFn::RangeBearing => {
                if x.len() < 2 {
                    return Err(Error::MeasurementUndefined);
                }
                DVector::from_vec(vec![x[0].hypot(x[1]), x[1].atan2(x[0])])
            }
            MeasurementFn::Cubic => DVector::from_iterator(x.len(), x.iter().map(|v| v * v * v)),
        };
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::MeasurementUndefined);
        }
        Ok(y)
    }

    fn residual(&self, measured: &DVector<f64>, predicted: DVector<f64>) -> DVector<f64> {
        let mut r = measured - predicted;
        if matches!(self, MeasurementFn::RangeBearing) {
            r[1] = wrap_angle(r[1]);
        }
        r
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Additive zero-mean Gaussian measurement noise.
#[derive(Debug, Clone)]
pub struct GaussianLikelihood {
    measurement: DVector<f64>,
    function: MeasurementFn,
    noise_cov: DMatrix<f64>,
    chol_lower: DMatrix<f64>,
}

impl GaussianLikelihood {
    pub fn new(
        measurement: Vec<f64>,
        function: MeasurementFn,
        noise_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let p = measurement.len();
        if noise_cov.nrows() != p || noise_cov.ncols() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: noise_cov.nrows(),
            });
        }
        let asym = (&noise_cov - noise_cov.transpose()).amax();
        if asym > 1e-12 * noise_cov.amax().max(1.0) {
            return Err(Error::Domain("noise covariance is not symmetric".into()));
        }
        let chol_lower = Cholesky::new(noise_cov.clone())
            .ok_or_else(|| Error::Domain("noise covariance is not positive definite".into()))?
            .l();
        Ok(GaussianLikelihood {
            measurement: DVector::from_vec(measurement),
            function,
            noise_cov,
            chol_lower,
        })
    }

    pub fn measurement(&self) -> &DVector<f64> {
        &self.measurement
    }

    pub fn function(&self) -> &MeasurementFn {
        &self.function
    }

    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    /// `-1/2 r' C^-1 r` with `r = y - h(x)`.
    pub fn log_lik(&self, x: &[f64]) -> Result<f64> {
        let predicted = self.function.eval(x)?;
        if predicted.len() != self.measurement.len() {
            return Err(Error::DimensionMismatch {
                expected: self.measurement.len(),
                got: predicted.len(),
            });
        }
        let r = self.function.residual(&self.measurement, predicted);
        let z = self
            .chol_lower
            .solve_lower_triangular(&r)
            .ok_or(Error::MeasurementUndefined)?;
        Ok(-0.5 * z.norm_squared())
    }
}

type LogLikFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// Source of the base log-likelihood `log f_L(x)`.
#[derive(Clone)]
pub enum LikelihoodKind {
    Gaussian(GaussianLikelihood),
    /// User-supplied log-likelihood; `-inf` marks zero likelihood.
    Custom(Arc<LogLikFn>),
    /// Several independent factors multiplied together (log-sum).
    Product(Vec<LikelihoodModel>),
}

impl fmt::Debug for LikelihoodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LikelihoodKind::Gaussian(g) => f.debug_tuple("Gaussian").field(g).finish(),
            LikelihoodKind::Custom(_) => f.write_str("Custom(..)"),
            LikelihoodKind::Product(p) => f.debug_tuple("Product").field(p).finish(),
        }
    }
}

/// A likelihood with its homotopy schedule.
///
/// `consumed` is `g(gamma_star)` for an effective likelihood whose first
/// `gamma_star` of artificial time has already been absorbed; the log of the
/// progressive likelihood is `(g(gamma) - consumed) * log f_L(x)`.
#[derive(Debug, Clone)]
pub struct LikelihoodModel {
    kind: LikelihoodKind,
    schedule: Schedule,
    consumed: f64,
}

impl LikelihoodModel {
    pub fn new(kind: LikelihoodKind, schedule: Schedule) -> Result<Self> {
        schedule.validate()?;
        Ok(LikelihoodModel {
            kind,
            schedule,
            consumed: 0.0,
        })
    }

    pub fn gaussian(lik: GaussianLikelihood, schedule: Schedule) -> Result<Self> {
        Self::new(LikelihoodKind::Gaussian(lik), schedule)
    }

    pub fn custom<F>(log_lik: F, schedule: Schedule) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self::new(LikelihoodKind::Custom(Arc::new(log_lik)), schedule)
    }

    /// Constant likelihood, `log f_L = 0`.
    pub fn flat() -> Self {
        LikelihoodModel {
            kind: LikelihoodKind::Custom(Arc::new(|_| 0.0)),
            schedule: Schedule::Linear,
            consumed: 0.0,
        }
    }

    /// Product of independent likelihoods sharing one schedule.
    pub fn product(factors: Vec<LikelihoodModel>, schedule: Schedule) -> Result<Self> {
        Self::new(LikelihoodKind::Product(factors), schedule)
    }

    pub fn kind(&self) -> &LikelihoodKind {
        &self.kind
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Result<Self> {
        schedule.validate()?;
        self.schedule = schedule;
        Ok(self)
    }

    /// `g(gamma_star)` absorbed so far.
    pub fn consumed(&self) -> f64 {
        self.consumed
    }

    /// Base log-likelihood `log f_L(x)`, unnormalized.
    pub fn log_lik(&self, x: &[f64]) -> Result<f64> {
        let v = match &self.kind {
            LikelihoodKind::Gaussian(g) => g.log_lik(x)?,
            LikelihoodKind::Custom(f) => f(x),
            LikelihoodKind::Product(parts) => {
                let mut total = 0.0;
                for p in parts {
                    total += p.log_lik(x)?;
                }
                total
            }
        };
        if v.is_nan() || v == f64::INFINITY {
            return Err(Error::Domain(format!("log-likelihood evaluated to {v}")));
        }
        Ok(v)
    }

    /// Exponent applied to the base likelihood at `gamma`.
    pub fn exponent(&self, gamma: f64) -> f64 {
        self.schedule.g(gamma) - self.consumed
    }

    /// `log f_L(x, gamma)`
    pub fn log_lik_gamma(&self, x: &[f64], gamma: f64) -> Result<f64> {
        let e = self.exponent(gamma);
        if e == 0.0 {
            return Ok(0.0);
        }
        Ok(e * self.log_lik(x)?)
    }

    /// `f_L(x, gamma) = exp(g(gamma) log f_L(x))`
    pub fn lik_gamma(&self, x: &[f64], gamma: f64) -> Result<f64> {
        Ok(self.log_lik_gamma(x, gamma)?.exp())
    }

    /// `d f_L(x, gamma) / d gamma = log f_L(x) g'(gamma) f_L(x, gamma)`
    pub fn dlik_dgamma(&self, x: &[f64], gamma: f64) -> Result<f64> {
        let ratio = self.dlog_lik_dgamma(x, gamma)?;
        if ratio == 0.0 {
            return Ok(0.0);
        }
        Ok(ratio * self.lik_gamma(x, gamma)?)
    }

    /// The ratio `f_L' / f_L = log f_L(x) g'(gamma)`, formed without
    /// exponentiating.
    pub fn dlog_lik_dgamma(&self, x: &[f64], gamma: f64) -> Result<f64> {
        let gd = self.schedule.g_dot(gamma);
        if gd == 0.0 {
            return Ok(0.0);
        }
        Ok(self.log_lik(x)? * gd)
    }

    /// `f_L(x, gamma) / f_L(x, gamma_star)`: the likelihood left to absorb
    /// after `gamma_star`.
    pub fn effective(&self, gamma_star: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma_star) {
            return Err(Error::Domain(format!(
                "gamma_star must lie in [0, 1], got {gamma_star}"
            )));
        }
        Ok(LikelihoodModel {
            kind: self.kind.clone(),
            schedule: self.schedule,
            consumed: self.schedule.g(gamma_star),
        })
    }
}

/// Free-function form of [`LikelihoodModel::effective`].
pub fn effective_likelihood(base: &LikelihoodModel, gamma_star: f64) -> Result<LikelihoodModel> {
    base.effective(gamma_star)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(y: f64, var: f64, schedule: Schedule) -> LikelihoodModel {
        let g = GaussianLikelihood::new(
            vec![y],
            MeasurementFn::Identity,
            DMatrix::from_element(1, 1, var),
        )
        .unwrap();
        LikelihoodModel::gaussian(g, schedule).unwrap()
    }

    fn constant(value: f64, schedule: Schedule) -> LikelihoodModel {
        LikelihoodModel::custom(move |_| value, schedule).unwrap()
    }

    #[test]
    fn gaussian_quadratic_form() {
        assert_eq!(scalar(1.0, 1.0, Schedule::Linear).log_lik(&[1.0]).unwrap(), 0.0);
        assert_eq!(scalar(1.0, 1.0, Schedule::Linear).log_lik(&[0.0]).unwrap(), -0.5);
        assert!((scalar(1.0, 4.0, Schedule::Linear).log_lik(&[0.0]).unwrap() + 0.125).abs() < 1e-15);
    }

    #[test]
    fn gamma_endpoints() {
        let m = constant(-2.0, Schedule::Linear);
        assert_eq!(m.lik_gamma(&[3.0], 0.0).unwrap(), 1.0);
        assert!((m.lik_gamma(&[3.0], 1.0).unwrap() - (-2f64).exp()).abs() < 1e-15);
        assert!((m.lik_gamma(&[3.0], 0.5).unwrap() - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn gamma_derivative_ratio() {
        assert_eq!(LikelihoodModel::flat().dlik_dgamma(&[1.0], 0.3).unwrap(), 0.0);
        let sq = constant(-3.0, Schedule::power2());
        assert_eq!(sq.dlog_lik_dgamma(&[0.0], 0.0).unwrap(), 0.0);
        let lin = constant(-3.0, Schedule::Linear);
        assert_eq!(lin.dlog_lik_dgamma(&[0.0], 0.0).unwrap(), -3.0);
        assert_eq!(lin.dlik_dgamma(&[0.0], 0.0).unwrap(), -3.0);
    }

    #[test]
    fn effective_likelihood_values() {
        let base = constant(-2.0, Schedule::Linear);
        let same = base.effective(0.0).unwrap();
        assert_eq!(same.log_lik_gamma(&[0.0], 0.7).unwrap(), base.log_lik_gamma(&[0.0], 0.7).unwrap());
        assert_eq!(base.effective(1.0).unwrap().lik_gamma(&[0.0], 1.0).unwrap(), 1.0);
        let eff = base.effective(0.5).unwrap();
        assert!((eff.lik_gamma(&[0.0], 0.75).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        assert!(effective_likelihood(&base, 1.5).is_err());
    }

    #[test]
    fn schedules() {
        for s in [Schedule::Linear, Schedule::power2(), Schedule::Power(3.5)] {
            assert_eq!(s.g(0.0), 0.0);
            assert_eq!(s.g(1.0), 1.0);
            let mut prev = 0.0;
            for i in 0..=100 {
                let v = s.g(i as f64 / 100.0);
                assert!(v >= prev);
                prev = v;
                assert!(s.g_dot(i as f64 / 100.0).is_finite());
            }
        }
        assert!(Schedule::Power(0.5).validate().is_err());
    }

    #[test]
    fn covariance_checks() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GaussianLikelihood::new(vec![0.0, 0.0], MeasurementFn::Identity, bad).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(GaussianLikelihood::new(vec![0.0, 0.0], MeasurementFn::Identity, asym).is_err());
    }

    #[test]
    fn measurement_registry() {
        assert_eq!(MeasurementFn::RangeToOrigin.eval(&[3.0, 4.0]).unwrap()[0], 5.0);
        let rb = MeasurementFn::RangeBearing.eval(&[0.0, 2.0]).unwrap();
        assert_eq!(rb[0], 2.0);
        assert!((rb[1] - PI / 2.0).abs() < 1e-15);
        assert_eq!(MeasurementFn::Cubic.eval(&[2.0]).unwrap()[0], 8.0);
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert_eq!(MeasurementFn::Linear(h).eval(&[3.0, 9.0]).unwrap()[0], 3.0);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert_eq!(wrap_angle(PI), PI);
    }

    #[test]
    fn bearing_residual_wraps() {
        let g = GaussianLikelihood::new(
            vec![1.0, PI - 0.01],
            MeasurementFn::RangeBearing,
            DMatrix::identity(2, 2),
        )
        .unwrap();
        // true bearing -pi + 0.01: residual is 0.02 after wrapping, not ~2pi
        let x = [-(0.01f64.cos()), -(0.01f64.sin())];
        let v = g.log_lik(&x).unwrap();
        assert!(v > -1e-3, "{v}");
    }
}
