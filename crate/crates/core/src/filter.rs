//! Recursive estimation: prediction through a system model, measurement
//! updates by the Newton flow, particle reduction and baseline updates.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dirac::{bayes_reweight, ParticleSet};
use crate::distance::{sq_dist, DistanceParams};
use crate::error::{Error, Result};
use crate::flow::{integrate_flow, minimize_distance, FlowConfig, FlowTrace, FlowVariant, Minimization};
use crate::homotopy::{GaussianLikelihood, LikelihoodModel, MeasurementFn, Schedule};

pub const REDUCTION_TOL: f64 = 1e-8;
pub const REDUCTION_MAX_ITERS: usize = 200;

/// Deterministic part `f(x, u)` of the transition `a(x, u, w) = f(x, u) + w`.
#[derive(Debug, Clone, PartialEq)]
pub enum Dynamics {
    Identity,
    /// `A x + u`
    Linear(DMatrix<f64>),
    /// `x + u`
    RandomWalk,
    /// Constant-turn-rate motion of the state `[px, py, vx, vy]`.
    CoordinatedTurn2D { turn_rate: f64, dt: f64 },
    /// `x + dt (x - x^3) + u`, componentwise.
    CubicDrift { dt: f64 },
}

impl Dynamics {
    pub fn apply(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let n = x.len();
        let add_u = |mut y: Vec<f64>| -> Result<Vec<f64>> {
            if !u.is_empty() {
                if u.len() != n {
                    return Err(Error::DimensionMismatch { expected: n, got: u.len() });
                }
                y.iter_mut().zip(u).for_each(|(a, b)| *a += b);
            }
            Ok(y)
        };
        let y = match self {
            Dynamics::Identity => x.to_vec(),
            Dynamics::Linear(a) => {
                if a.ncols() != n || a.nrows() != n {
                    return Err(Error::DimensionMismatch { expected: n, got: a.ncols() });
                }
                add_u((a * DVector::from_column_slice(x)).as_slice().to_vec())?
            }
            Dynamics::RandomWalk => add_u(x.to_vec())?,
            Dynamics::CoordinatedTurn2D { turn_rate, dt } => {
                if n != 4 {
                    return Err(Error::DimensionMismatch { expected: 4, got: n });
                }
                let (w, t) = (*turn_rate, *dt);
                let (s, c) = (w * t).sin_cos();
                let (a, b) = if w.abs() < 1e-12 { (t, 0.0) } else { (s / w, (1.0 - c) / w) };
                let (px, py, vx, vy) = (x[0], x[1], x[2], x[3]);
                add_u(vec![
                    px + a * vx - b * vy,
                    py + b * vx + a * vy,
                    c * vx - s * vy,
                    s * vx + c * vy,
                ])?
            }
            Dynamics::CubicDrift { dt } => {
                add_u(x.iter().map(|v| v + dt * (v - v * v * v)).collect())?
            }
        };
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("transition produced a non-finite state".into()));
        }
        Ok(y)
    }

    /// The matrix `A` when the dynamics are linear in `x`.
    pub fn linear_part(&self, n: usize) -> Option<DMatrix<f64>> {
        match self {
            Dynamics::Identity | Dynamics::RandomWalk => Some(DMatrix::identity(n, n)),
            Dynamics::Linear(a) => Some(a.clone()),
            _ => None,
        }
    }

    fn uses_input(&self) -> bool {
        !matches!(self, Dynamics::Identity)
    }
}

#[derive(Debug, Clone)]
pub enum SystemNoise {
    None,
    /// Zero-mean Gaussian with the given covariance, one draw per particle.
    Gaussian { cov: DMatrix<f64>, chol_lower: DMatrix<f64> },
    /// Fixed weighted noise particles; prediction forms the product set and
    /// reduces it back.
    Deterministic(ParticleSet),
}

impl SystemNoise {
    pub fn gaussian(cov: DMatrix<f64>) -> Result<Self> {
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Domain("system noise covariance is not positive definite".into()))?;
        Ok(SystemNoise::Gaussian { chol_lower: chol.l(), cov })
    }

    fn moments(&self, n: usize) -> (DVector<f64>, DMatrix<f64>) {
        match self {
            SystemNoise::None => (DVector::zeros(n), DMatrix::zeros(n, n)),
            SystemNoise::Gaussian { cov, .. } => (DVector::zeros(n), cov.clone()),
            SystemNoise::Deterministic(set) => (set.mean(), set.covariance()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SystemModel {
    pub dynamics: Dynamics,
    pub noise: SystemNoise,
}

impl SystemModel {
    pub fn new(dynamics: Dynamics, noise: SystemNoise) -> Self {
        SystemModel { dynamics, noise }
    }

    /// Identity dynamics without noise.
    pub fn identity() -> Self {
        SystemModel::new(Dynamics::Identity, SystemNoise::None)
    }
}

/// Propagates a particle set through the system model.
pub fn predict<R: Rng>(
    current: &ParticleSet,
    system: &SystemModel,
    u: &[f64],
    params: &DistanceParams,
    rng: &mut R,
) -> Result<ParticleSet> {
    let n = current.dim();
    let mut moved = Vec::with_capacity(current.len() * n);
    for x in current.rows() {
        moved.extend(system.dynamics.apply(x, u)?);
    }
    match &system.noise {
        SystemNoise::None => current.with_locations(moved),
        SystemNoise::Gaussian { chol_lower, .. } => {
            if chol_lower.nrows() != n {
                return Err(Error::DimensionMismatch { expected: n, got: chol_lower.nrows() });
            }
            for row in moved.chunks_exact_mut(n) {
                let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
                let w = chol_lower * z;
                row.iter_mut().zip(w.iter()).for_each(|(a, b)| *a += b);
            }
            current.with_locations(moved)
        }
        SystemNoise::Deterministic(noise) => {
            if noise.dim() != n {
                return Err(Error::DimensionMismatch { expected: n, got: noise.dim() });
            }
            let mut locs = Vec::with_capacity(current.len() * noise.len() * n);
            let mut weights = Vec::with_capacity(current.len() * noise.len());
            for (x, wx) in moved.chunks_exact(n).zip(current.weights()) {
                for (v, wv) in noise.rows().zip(noise.weights()) {
                    locs.extend(x.iter().zip(v).map(|(a, b)| a + b));
                    weights.push(wx * wv);
                }
            }
            let product = ParticleSet::normalized(locs, n, weights)?;
            Ok(reduce_particles(&product, current.len(), params, ReductionInit::Subset)?.set)
        }
    }
}

/// Measurement update by the Newton flow. The result is equally weighted
/// and does not depend on any system model.
pub fn update(current: &ParticleSet, lik: &LikelihoodModel, cfg: &FlowConfig) -> Result<ParticleSet> {
    Ok(integrate_flow(current, lik, cfg)?.0)
}

#[derive(Debug, Clone)]
pub enum ReductionInit {
    /// Largest weights first, ties broken by farthest-point selection.
    Subset,
    Given(ParticleSet),
}

/// Replaces a weighted set by `count` equally weighted particles locally
/// minimizing the distance to it. `converged == false` flags a result that
/// hit the iteration limit before the gradient tolerance.
pub fn reduce_particles(
    reference: &ParticleSet,
    count: usize,
    params: &DistanceParams,
    init: ReductionInit,
) -> Result<Minimization> {
    if count == 0 || count > reference.len() {
        return Err(Error::Domain(format!(
            "reduction target must lie in 1..={}, got {count}",
            reference.len()
        )));
    }
    let start = match init {
        ReductionInit::Subset => subset_init(reference, count)?,
        ReductionInit::Given(set) => {
            if set.len() != count {
                return Err(Error::DimensionMismatch { expected: count, got: set.len() });
            }
            ParticleSet::equal_weights(set.locations().to_vec(), set.dim())?
        }
    };
    let result = minimize_distance(&start, reference, params, REDUCTION_MAX_ITERS, REDUCTION_TOL)?;
    debug_assert!(result.history.windows(2).all(|w| w[1] <= w[0]));
    Ok(result)
}

fn subset_init(reference: &ParticleSet, count: usize) -> Result<ParticleSet> {
    let n = reference.dim();
    let m = reference.len();
    let w = reference.weights();
    let mut used = vec![false; m];
    let mut min_d = vec![f64::INFINITY; m];
    let mut flat = Vec::with_capacity(count * n);
    for _ in 0..count {
        let mut best: Option<usize> = None;
        for i in (0..m).filter(|i| !used[*i]) {
            best = match best {
                Some(b) if w[b] > w[i] || (w[b] == w[i] && min_d[b] >= min_d[i]) => Some(b),
                _ => Some(i),
            };
        }
        let b = best.expect("count does not exceed the reference size");
        used[b] = true;
        let x = reference.location(b);
        for i in 0..m {
            min_d[i] = min_d[i].min(sq_dist(reference.location(i), x));
        }
        flat.extend_from_slice(x);
    }
    ParticleSet::equal_weights(flat, n)
}

/// Bootstrap update: Bayes reweighting followed by multinomial resampling.
pub fn baseline_sir(current: &ParticleSet, lik: &LikelihoodModel, seed: u64) -> Result<ParticleSet> {
    let posterior = bayes_reweight(current, lik)?.posterior;
    let index = WeightedIndex::new(posterior.weights())
        .map_err(|e| Error::Domain(format!("resampling weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = current.dim();
    let mut flat = Vec::with_capacity(current.len() * n);
    for _ in 0..current.len() {
        flat.extend_from_slice(posterior.location(index.sample(&mut rng)));
    }
    ParticleSet::equal_weights(flat, n)
}

/// Gaussian likelihood family instantiated once per measurement.
#[derive(Debug, Clone)]
pub struct LikelihoodTemplate {
    pub function: MeasurementFn,
    pub noise_cov: DMatrix<f64>,
    pub schedule: Schedule,
}

impl LikelihoodTemplate {
    pub fn instantiate(&self, measurement: &[f64]) -> Result<LikelihoodModel> {
        let g = GaussianLikelihood::new(measurement.to_vec(), self.function.clone(), self.noise_cov.clone())?;
        LikelihoodModel::gaussian(g, self.schedule)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    FlowRecursive,
    FlowIterative,
    Reweight,
    Sir,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::FlowRecursive, Method::FlowIterative, Method::Reweight, Method::Sir];

    pub fn name(&self) -> &'static str {
        match self {
            Method::FlowRecursive => "flow-recursive",
            Method::FlowIterative => "flow-iterative",
            Method::Reweight => "reweight",
            Method::Sir => "sir",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub system: SystemModel,
    pub likelihood: LikelihoodTemplate,
    pub prior: ParticleSet,
    pub measurements: Vec<Vec<f64>>,
    /// Per-step inputs; missing entries mean no input.
    pub inputs: Vec<Vec<f64>>,
    pub flow: FlowConfig,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let n = self.prior.dim();
        let p = self.likelihood.function.output_dim(n)?;
        for (k, y) in self.measurements.iter().enumerate() {
            if y.len() != p {
                return Err(Error::Domain(format!(
                    "measurement {k} has dimension {}, expected {p}",
                    y.len()
                )));
            }
        }
        if self.likelihood.noise_cov.nrows() != p {
            return Err(Error::DimensionMismatch { expected: p, got: self.likelihood.noise_cov.nrows() });
        }
        for (k, u) in self.inputs.iter().enumerate() {
            if !u.is_empty() && u.len() != n {
                return Err(Error::Domain(format!("input {k} has dimension {}, expected {n}", u.len())));
            }
        }
        self.flow.validate()
    }

    fn input(&self, k: usize) -> &[f64] {
        if !self.system.dynamics.uses_input() {
            return &[];
        }
        self.inputs.get(k).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Estimate after one measurement; step 0 is the prior.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub set: ParticleSet,
    pub mean: Vec<f64>,
    /// Row-major `N x N`.
    pub covariance: Vec<f64>,
    pub ess: f64,
    pub runtime_ms: f64,
    pub trace: Option<FlowTrace>,
}

impl StepRecord {
    fn new(step: usize, set: ParticleSet, runtime_ms: f64, trace: Option<FlowTrace>) -> Self {
        let cov = set.covariance();
        StepRecord {
            step,
            mean: set.mean().as_slice().to_vec(),
            covariance: cov.transpose().as_slice().to_vec(),
            ess: set.ess(),
            set,
            runtime_ms,
            trace,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub method: Method,
    /// `records[0]` is the prior, `records[k]` follows measurement `k`.
    pub records: Vec<StepRecord>,
}

/// Alternates prediction and update for every measurement.
pub fn run_scenario(s: &Scenario, method: Method) -> Result<ScenarioRun> {
    s.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut current = s.prior.clone();
    let mut records = vec![StepRecord::new(0, current.clone(), 0.0, None)];
    let cfg = match method {
        Method::FlowRecursive => FlowConfig { variant: FlowVariant::Recursive, ..s.flow.clone() },
        Method::FlowIterative => FlowConfig { variant: FlowVariant::Iterative, ..s.flow.clone() },
        _ => s.flow.clone(),
    };
    for (k, y) in s.measurements.iter().enumerate() {
        let step = k + 1;
        let at = |e: Error| Error::AtStep { step, source: Box::new(e) };
        let started = Instant::now();
        current = predict(&current, &s.system, s.input(k), &cfg.params, &mut rng).map_err(at)?;
        let lik = s.likelihood.instantiate(y).map_err(at)?;
        let (next, trace) = match method {
            Method::FlowRecursive | Method::FlowIterative => {
                let (set, trace) = integrate_flow(&current, &lik, &cfg).map_err(at)?;
                (set, cfg.trace.then_some(trace))
            }
            Method::Reweight => (bayes_reweight(&current, &lik).map_err(at)?.posterior, None),
            Method::Sir => {
                let seed = s.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                (baseline_sir(&current, &lik, seed).map_err(at)?, None)
            }
        };
        current = next;
        let ms = started.elapsed().as_secs_f64() * 1e3;
        records.push(StepRecord::new(step, current.clone(), ms, trace));
    }
    Ok(ScenarioRun { method, records })
}

/// Kalman filter moments for linear-Gaussian scenarios, started from the
/// sample moments of the prior set. `None` when the scenario is not
/// linear-Gaussian.
pub fn kalman_reference(s: &Scenario) -> Option<Vec<(DVector<f64>, DMatrix<f64>)>> {
    let n = s.prior.dim();
    let a = s.system.dynamics.linear_part(n)?;
    let h = match &s.likelihood.function {
        MeasurementFn::Identity => DMatrix::identity(n, n),
        MeasurementFn::Linear(h) => h.clone(),
        _ => return None,
    };
    let (q_mean, q) = s.system.noise.moments(n);
    let r = &s.likelihood.noise_cov;
    let mut m = s.prior.mean();
    let mut p = s.prior.covariance();
    let mut out = vec![(m.clone(), p.clone())];
    for (k, y) in s.measurements.iter().enumerate() {
        m = &a * &m + &q_mean;
        let u = s.input(k);
        if !u.is_empty() {
            m += DVector::from_column_slice(u);
        }
        p = &a * &p * a.transpose() + &q;
        let sm = &h * &p * h.transpose() + r;
        let gain = &p * h.transpose() * sm.clone().try_inverse()?;
        m = &m + &gain * (DVector::from_column_slice(y) - &h * &m);
        p = (DMatrix::identity(n, n) - &gain * &h) * &p;
        p = 0.5 * (&p + p.transpose());
        out.push((m.clone(), p.clone()));
    }
    Some(out)
}

/// Standard-normal draws shaped by `mean` and `cov`, reduced to `count`
/// equally weighted particles.
pub fn gaussian_prior(
    mean: &[f64],
    cov: &DMatrix<f64>,
    count: usize,
    draws: usize,
    params: &DistanceParams,
    seed: u64,
) -> Result<ParticleSet> {
    let n = mean.len();
    if cov.nrows() != n || cov.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: cov.nrows() });
    }
    let l = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Domain("prior covariance is not positive definite".into()))?
        .l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat = Vec::with_capacity(draws * n);
    for _ in 0..draws {
        let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x = &l * z;
        flat.extend(x.iter().zip(mean).map(|(a, b)| a + b));
    }
    let cloud = ParticleSet::equal_weights(flat, n)?;
    if count == draws {
        return Ok(cloud);
    }
    Ok(reduce_particles(&cloud, count, params, ReductionInit::Subset)?.set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subset_prefers_heavy_then_far() {
        let r = ParticleSet::normalized(vec![0.0, 0.1, 5.0, 2.0], 1, vec![1.0, 1.0, 1.0, 3.0]).unwrap();
        let s = subset_init(&r, 2).unwrap();
        assert_eq!(s.locations(), &[2.0, 5.0]);
    }

    #[test]
    fn reduce_to_midpoint() {
        let r = ParticleSet::equal_weights(vec![0.0, 1.0], 1).unwrap();
        let m = reduce_particles(&r, 1, &DistanceParams::default(), ReductionInit::Subset).unwrap();
        assert!((m.set.locations()[0] - 0.5).abs() < 1e-6);
        assert!(m.converged);
    }

    #[test]
    fn reduce_equal_set_is_fixed() {
        let r = ParticleSet::equal_weights(vec![0.0, 1.0, 3.0, -2.0], 2).unwrap();
        let m = reduce_particles(&r, 2, &DistanceParams::default(), ReductionInit::Given(r.clone())).unwrap();
        assert_eq!(m.iterations, 0);
        assert_eq!(m.set, r);
        assert!(reduce_particles(&r, 3, &DistanceParams::default(), ReductionInit::Subset).is_err());
    }

    #[test]
    fn sir_collapses() {
        let set = ParticleSet::equal_weights(vec![0.0, 1.0], 1).unwrap();
        let lik = LikelihoodModel::custom(
            |x| if x[0] == 0.0 { 0.0 } else { f64::NEG_INFINITY },
            Schedule::Linear,
        )
        .unwrap();
        let out = baseline_sir(&set, &lik, 3).unwrap();
        assert_eq!(out.locations(), &[0.0, 0.0]);
    }

    #[test]
    fn dynamics_registry() {
        assert_eq!(Dynamics::RandomWalk.apply(&[1.0, 2.0], &[1.0, 1.0]).unwrap(), vec![2.0, 3.0]);
        assert_eq!(Dynamics::Identity.apply(&[1.0], &[]).unwrap(), vec![1.0]);
        let ct = Dynamics::CoordinatedTurn2D { turn_rate: std::f64::consts::FRAC_PI_2, dt: 1.0 };
        let y = ct.apply(&[0.0, 0.0, 1.0, 0.0], &[]).unwrap();
        let expect = [2.0 / std::f64::consts::PI, 2.0 / std::f64::consts::PI, 0.0, 1.0];
        assert!(y.iter().zip(expect).all(|(a, b)| (a - b).abs() < 1e-12));
        let straight = Dynamics::CoordinatedTurn2D { turn_rate: 0.0, dt: 2.0 };
        assert_eq!(straight.apply(&[0.0, 0.0, 1.0, 0.5], &[]).unwrap(), vec![2.0, 1.0, 1.0, 0.5]);
        assert_eq!(Dynamics::CubicDrift { dt: 0.1 }.apply(&[1.0], &[]).unwrap(), vec![1.0]);
    }
}
