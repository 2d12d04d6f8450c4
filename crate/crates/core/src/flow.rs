//! Newton flow of equally weighted particles over artificial time.
//!
//! The tracked condition is `G(eta(gamma), gamma) = 0`; differentiating it
//! gives the implicit ODE `H eta' + J = 0`, which is solved for `eta'` at
//! every stage point and integrated from `gamma = 0` to `gamma = 1`.
//!
//! Two variants are provided:
//!
//! * iterative: the reference is the prior set, reweighted by the
//!   progressive likelihood;
//! * recursive: the reference is replaced by the current particle set
//!   together with the effective likelihood of the remaining interval
//!   whenever its reweighted effective sample size would drop too far (see
//!   [`ReferenceReset`]). With [`ReferenceReset::Continuous`] it is replaced
//!   at every stage point, the diagonal Hessian blocks collapse to
//!   `K2 w_k^2 I` and no corrector is applied.
//!
//! A particle sitting exactly on a reference particle has a diverging
//! diagonal Hessian block and therefore zero velocity; right after a reset
//! all particles are in that state and the step is carried by the Newton
//! corrector, which pulls the particles back onto `G = 0` after each step.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dirac::{format_f64, normalize_log_weights, ParticleSet};
use crate::distance::{
    check_dims, distance_given_rr, gradient, reference_self_term, COINCIDENCE_TOL, hessian, hessian_recursive, plog_sum, sq_dist,
    Compensated, DistanceParams,
};
use crate::error::{Error, Result};
use crate::homotopy::LikelihoodModel;

/// Equal-weight check used by the recursive formulas.
pub const EQUAL_WEIGHT_TOL: f64 = 1e-12;

/// Particles closer than this during integration trigger a step retry.
pub const GUARD_DISTANCE: f64 = 1e-10;

const MAX_DAMPING_RETRIES: usize = 8;
const MAX_GUARD_HALVINGS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowVariant {
    Iterative,
    Recursive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Integrator {
    /// Classical fourth-order Runge-Kutta on a uniform grid in `gamma`.
    FixedRk4 { steps: usize },
    /// Embedded Euler/Heun pair with relative error control.
    AdaptiveHeun { tolerance: f64, max_steps: usize },
}

/// Newton iterations applied after each step against a fixed reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corrector {
    /// Zero disables the corrector.
    pub max_iters: usize,
    /// Stop once the gradient norm falls below this.
    pub tolerance: f64,
}

impl Default for Corrector {
    fn default() -> Self {
        Corrector {
            max_iters: 5,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceReset {
    /// Only when the ESS check of [`FlowConfig::min_ess_fraction`] fails.
    OnDemand,
    /// Every given number of steps, and whenever the ESS check fails.
    Every(usize),
    /// At every stage point, using the self-referenced Hessian.
    Continuous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub variant: FlowVariant,
    pub integrator: Integrator,
    /// Initial Levenberg damping added to the Hessian.
    pub damping: f64,
    pub params: DistanceParams,
    /// Record particle snapshots after every accepted step.
    pub trace: bool,
    pub corrector: Corrector,
    /// Recursive variant only: when the reference is replaced.
    pub reset: ReferenceReset,
    /// Recursive variant only: a step is shortened, after a reference
    /// reset if needed, until the reference keeps at least this fraction of
    /// its effective sample size. Zero disables the check.
    pub min_ess_fraction: f64,
    /// Number of flow particles; `None` keeps the size of the prior.
    pub particles: Option<usize>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            variant: FlowVariant::Recursive,
            integrator: Integrator::FixedRk4 { steps: 64 },
            damping: 0.0,
            params: DistanceParams::default(),
            trace: false,
            corrector: Corrector::default(),
            reset: ReferenceReset::OnDemand,
            min_ess_fraction: 0.5,
            particles: None,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        match self.integrator {
            Integrator::FixedRk4 { steps } if steps < 1 => {
                return Err(Error::Domain("step count must be at least 1".into()))
            }
            Integrator::AdaptiveHeun { tolerance, max_steps } if !(tolerance > 0.0) || max_steps < 1 => {
                return Err(Error::Domain(
                    "adaptive tolerance must be positive with at least one step".into(),
                ))
            }
            _ => {}
        }
        if !(self.damping >= 0.0) || !self.damping.is_finite() {
            return Err(Error::Domain("damping must be finite and nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.min_ess_fraction) {
            return Err(Error::Domain("minimum ESS fraction must lie in [0, 1)".into()));
        }
        if self.reset == ReferenceReset::Every(0) {
            return Err(Error::Domain("reset interval must be at least one step".into()));
        }
        if self.particles == Some(0) {
            return Err(Error::Domain("particle count must be positive".into()));
        }
        if !(self.corrector.tolerance > 0.0) {
            return Err(Error::Domain("corrector tolerance must be positive".into()));
        }
        Ok(())
    }

    pub fn iterative() -> Self {
        FlowConfig {
            variant: FlowVariant::Iterative,
            ..Default::default()
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.integrator = Integrator::FixedRk4 { steps };
        self
    }
}

/// Stacked locations at a given artificial time.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub eta: Vec<f64>,
    pub gamma: f64,
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub gamma: f64,
    pub step_size: f64,
    /// Norm of the tracked distance gradient after the step.
    pub gradient_norm: f64,
    /// Largest damping used by any stage solve of the step.
    pub damping: f64,
    /// Largest condition estimate over the stage solves.
    pub condition_estimate: f64,
    pub corrector_iters: usize,
    pub reference_reset: bool,
}

#[derive(Debug, Clone, Default)]
pub struct FlowTrace {
    /// `(gamma, snapshot)` pairs, first at `gamma = 0`, last at `gamma = 1`.
    pub snapshots: Vec<(f64, ParticleSet)>,
    pub steps: Vec<StepDiagnostics>,
    /// Largest `|sum_i w'_i|` seen over all stage evaluations.
    pub max_weight_dot_sum: f64,
    pub stage_evaluations: usize,
    pub rejected_steps: usize,
    pub elapsed_ms: f64,
}

impl FlowTrace {
    /// CSV rows `gamma,particle_index,x1..xN`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let dim = self.snapshots.first().map(|(_, s)| s.dim()).unwrap_or(0);
        let mut header = vec!["gamma".to_string(), "particle_index".to_string()];
        header.extend((1..=dim).map(|d| format!("x{d}")));
        out.write_record(&header)?;
        for (gamma, set) in &self.snapshots {
            for (i, row) in set.rows().enumerate() {
                let mut rec = vec![format_f64(*gamma), i.to_string()];
                rec.extend(row.iter().map(|v| format_f64(*v)));
                out.write_record(&rec)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// JSON sidecar with the per-step diagnostics.
    pub fn diagnostics_json(&self) -> serde_json::Value {
        serde_json::json!({
            "steps": self.steps,
            "max_weight_dot_sum": self.max_weight_dot_sum,
            "stage_evaluations": self.stage_evaluations,
            "rejected_steps": self.rejected_steps,
            "elapsed_ms": self.elapsed_ms,
        })
    }
}

// ---------------------------------------------------------------------------
// Weights and their gamma-derivatives
// ---------------------------------------------------------------------------

/// Reference weights `w~_i(gamma)`: the reference's own weights times the
/// progressive likelihood, normalized in log space.
pub fn weights_gamma(
    reference: &ParticleSet,
    lik: &LikelihoodModel,
    gamma: f64,
) -> Result<Vec<f64>> {
    let log_lik = log_lik_at(reference, lik)?;
    weights_from_log_lik(reference, &log_lik, lik, gamma)
}

fn log_lik_at(set: &ParticleSet, lik: &LikelihoodModel) -> Result<Vec<f64>> {
    set.rows().map(|x| lik.log_lik(x)).collect()
}

fn weights_from_log_lik(
    reference: &ParticleSet,
    log_lik: &[f64],
    lik: &LikelihoodModel,
    gamma: f64,
) -> Result<Vec<f64>> {
    let e = lik.exponent(gamma);
    let log_w: Vec<f64> = reference
        .weights()
        .iter()
        .zip(log_lik)
        .map(|(w, l)| w.ln() + if e == 0.0 { 0.0 } else { e * l })
        .collect();
    normalize_log_weights(&log_w)
}

fn weighted_mean(weights: &[f64], values: &[f64]) -> f64 {
    let mut acc = Compensated::default();
    for (w, v) in weights.iter().zip(values) {
        acc.add(w * v);
    }
    acc.value()
}

fn dot_from_ratios(weights: &[f64], ratios: &[f64]) -> Vec<f64> {
    let mean = weighted_mean(weights, ratios);
    weights
        .iter()
        .zip(ratios)
        .map(|(w, r)| w * (r - mean))
        .collect()
}

/// `dw~_i/dgamma = w~_i (r_i - sum_j w~_j r_j)` with `r_i = log f_L(x~_i) g'(gamma)`.
pub fn weight_dot_iterative(
    reference: &ParticleSet,
    lik: &LikelihoodModel,
    gamma: f64,
) -> Result<Vec<f64>> {
    let log_lik = log_lik_at(reference, lik)?;
    let weights = weights_from_log_lik(reference, &log_lik, lik, gamma)?;
    let gd = lik.schedule().g_dot(gamma);
    let ratios: Vec<f64> = log_lik.iter().map(|l| if gd == 0.0 { 0.0 } else { l * gd }).collect();
    Ok(dot_from_ratios(&weights, &ratios))
}

/// `dw_i/dgamma = (1/L) (r_i - (1/L) sum_j r_j)` for an equal-weight set.
pub fn weight_dot_recursive(
    current: &ParticleSet,
    lik_eff: &LikelihoodModel,
    gamma: f64,
) -> Result<Vec<f64>> {
    if !current.is_equally_weighted(EQUAL_WEIGHT_TOL) {
        return Err(Error::Contract(
            "recursive weight derivatives need equal weights".into(),
        ));
    }
    let ratios = current
        .rows()
        .map(|x| lik_eff.dlog_lik_dgamma(x, gamma))
        .collect::<Result<Vec<_>>>()?;
    Ok(weight_dot_recursive_from_ratios(&ratios))
}

pub(crate) fn weight_dot_recursive_from_ratios(ratios: &[f64]) -> Vec<f64> {
    let l = ratios.len() as f64;
    let mut acc = Compensated::default();
    ratios.iter().for_each(|r| acc.add(*r));
    let mean = acc.value() / l;
    ratios.iter().map(|r| (r - mean) / l).collect()
}

// ---------------------------------------------------------------------------
// J-vectors
// ---------------------------------------------------------------------------

/// `J_k = -w_k sum_i { 4 w~'_i plog(x_k - x~_i) + K2 w~'_i x~_i }`
pub fn j_vector_iterative(
    approx: &ParticleSet,
    reference: &ParticleSet,
    weight_dots: &[f64],
    params: &DistanceParams,
) -> Result<Vec<f64>> {
    check_dims(approx, reference)?;
    if weight_dots.len() != reference.len() {
        return Err(Error::DimensionMismatch {
            expected: reference.len(),
            got: weight_dots.len(),
        });
    }
    let n = approx.dim();
    let mut mean_dot = vec![Compensated::default(); n];
    for (wd, x) in weight_dots.iter().zip(reference.rows()) {
        for d in 0..n {
            mean_dot[d].add(wd * x[d]);
        }
    }
    let mean_dot: Vec<f64> = mean_dot.iter().map(Compensated::value).collect();
    let mut out = vec![0.0; approx.len() * n];
    let mut p = vec![0.0; n];
    for (k, xk) in approx.rows().enumerate() {
        plog_sum(xk, reference, weight_dots, None, &mut p);
        let wk = approx.weights()[k];
        for d in 0..n {
            out[k * n + d] = -wk * (4.0 * p[d] + params.k2() * mean_dot[d]);
        }
    }
    Ok(out)
}

/// Recursive J-vector: the current set is its own reference.
pub fn j_vector_recursive(
    current: &ParticleSet,
    weight_dots: &[f64],
    params: &DistanceParams,
) -> Result<Vec<f64>> {
    if !current.is_equally_weighted(EQUAL_WEIGHT_TOL) {
        return Err(Error::Contract("recursive J-vector needs equal weights".into()));
    }
    j_vector_iterative(current, current, weight_dots, params)
}

// ---------------------------------------------------------------------------
// Linear solve
// ---------------------------------------------------------------------------

/// Result of one damped Newton solve.
#[derive(Debug, Clone)]
pub struct NewtonStep {
    pub rate: Vec<f64>,
    /// Damping actually used.
    pub damping: f64,
    /// Rough condition estimate from the factor's pivots.
    pub condition_estimate: f64,
}

/// Solves `(H + damping I) x = -J` without forming an inverse.
///
/// Cholesky is tried first; indefinite systems fall back to pivoted LU. A
/// failed factorization or a solution longer than `1e6 (1 + |eta|)` raises
/// the damping to `max(10 damping, 1e-8 |tr H| / dim)` up to eight times.
pub fn newton_step(h: &DMatrix<f64>, j: &[f64], damping: f64, eta_norm: f64) -> Result<NewtonStep> {
    let dim = h.nrows();
    if h.ncols() != dim || j.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: j.len(),
        });
    }
    let rhs = -DVector::from_column_slice(j);
    let guard = 1e6 * (1.0 + eta_norm);
    let trace_scale = (h.trace().abs() / dim.max(1) as f64).max(f64::MIN_POSITIVE);
    let mut lambda = damping;
    for attempt in 0..=MAX_DAMPING_RETRIES {
        if let Some((x, cond)) = solve_damped(h, &rhs, lambda) {
            let norm = x.norm();
            if norm.is_finite() && norm <= guard {
                return Ok(NewtonStep {
                    rate: x.as_slice().to_vec(),
                    damping: lambda,
                    condition_estimate: cond,
                });
            }
        }
        if attempt == MAX_DAMPING_RETRIES {
            break;
        }
        lambda = (10.0 * lambda).max(1e-8 * trace_scale);
    }
    Err(Error::FlowStalled {
        gamma: f64::NAN,
        damping: lambda,
        reason: "Hessian solve failed after damping retries".into(),
    })
}

fn solve_damped(h: &DMatrix<f64>, rhs: &DVector<f64>, lambda: f64) -> Option<(DVector<f64>, f64)> {
    let mut a = h.clone();
    if lambda > 0.0 {
        for i in 0..a.nrows() {
            a[(i, i)] += lambda;
        }
    }
    if let Some(chol) = a.clone().cholesky() {
        let d = chol.l().diagonal();
        let (lo, hi) = extreme_abs(d.as_slice());
        let x = chol.solve(rhs);
        return Some((x, (hi / lo).powi(2)));
    }
    let lu = a.lu();
    let x = lu.solve(rhs)?;
    let u = lu.u();
    let (lo, hi) = extreme_abs(u.diagonal().as_slice());
    if lo == 0.0 {
        return None;
    }
    Some((x, hi / lo))
}

fn extreme_abs(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), x| {
        (lo.min(x.abs()), hi.max(x.abs()))
    })
}

// ---------------------------------------------------------------------------
// Distance minimization (corrector and reduction)
// ---------------------------------------------------------------------------

/// Outcome of a damped Newton minimization of the distance.
#[derive(Debug, Clone)]
pub struct Minimization {
    pub set: ParticleSet,
    pub distance: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Distance after every accepted iterate, starting with the initial one.
    pub history: Vec<f64>,
}

/// Damped Newton descent of `distance(approx, reference)` over the
/// approximating locations. Every accepted iterate lowers the distance.
pub fn minimize_distance(
    start: &ParticleSet,
    reference: &ParticleSet,
    params: &DistanceParams,
    max_iters: usize,
    tolerance: f64,
) -> Result<Minimization> {
    check_dims(start, reference)?;
    let params = params.with_jitter(true);
    let mut set = split_duplicates(start)?;
    let rr = reference_self_term(reference);
    let mut dist = distance_given_rr(&set, reference, &params, rr).total;
    let mut grad = gradient(&set, reference, &params)?;
    let mut gnorm = norm(&grad);
    let mut history = vec![dist];
    let mut iterations = 0;
    while iterations < max_iters && gnorm > tolerance {
        let h = hessian(&set, reference, &params)?;
        let scale = (h.trace().abs() / h.nrows() as f64).max(1e-300);
        let mut lambda = 0.0;
        let mut accepted = None;
        for _ in 0..24 {
            if let Some(dir) = solve_spd(&h, &grad, lambda) {
                let dir = dir.as_slice();
                let slope: f64 = dir.iter().zip(&grad).map(|(a, b)| a * b).sum();
                if slope < 0.0 && dir.iter().all(|v| v.is_finite()) {
                    if let Some(found) = line_search(&set, reference, &params, rr, dir, dist) {
                        accepted = Some(found);
                        break;
                    }
                }
            }
            lambda = (10.0 * lambda).max(1e-6 * scale);
        }
        let Some((next, next_dist)) = accepted else { break };
        set = next;
        dist = next_dist;
        grad = gradient(&set, reference, &params)?;
        gnorm = norm(&grad);
        history.push(dist);
        iterations += 1;
    }
    Ok(Minimization {
        converged: gnorm <= tolerance,
        set,
        distance: dist,
        gradient_norm: gnorm,
        iterations,
        history,
    })
}

/// Newton direction restricted to positive definite damped systems, so the
/// minimizer is repelled from saddles.
fn solve_spd(h: &DMatrix<f64>, grad: &[f64], lambda: f64) -> Option<DVector<f64>> {
    let mut a = h.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    let chol = a.cholesky()?;
    Some(chol.solve(&-DVector::from_column_slice(grad)))
}

/// Moves bit-identical particles apart; the distance gradient between two
/// coincident particles vanishes, so Newton iterations never separate them.
fn split_duplicates(set: &ParticleSet) -> Result<ParticleSet> {
    let n = set.dim();
    let mut eta = set.locations().to_vec();
    let mut moved = false;
    for k in 1..set.len() {
        let mut bump = 0usize;
        while (0..k).any(|m| eta[m * n..(m + 1) * n] == eta[k * n..(k + 1) * n]) {
            bump += 1;
            let x = eta[k * n];
            eta[k * n] = x + 1e-6 * bump as f64 * (1.0 + x.abs());
            moved = true;
        }
    }
    if moved {
        set.with_locations(eta)
    } else {
        Ok(set.clone())
    }
}

fn line_search(
    set: &ParticleSet,
    reference: &ParticleSet,
    params: &DistanceParams,
    rr: f64,
    dir: &[f64],
    dist: f64,
) -> Option<(ParticleSet, f64)> {
    let mut alpha = 1.0;
    for _ in 0..30 {
        let eta: Vec<f64> = set
            .locations()
            .iter()
            .zip(dir)
            .map(|(x, d)| x + alpha * d)
            .collect();
        if let Ok(candidate) = set.with_locations(eta) {
            let d = distance_given_rr(&candidate, reference, params, rr).total;
            if d < dist {
                return Some((candidate, d));
            }
        }
        alpha *= 0.5;
    }
    None
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// Integration
// ---------------------------------------------------------------------------

/// Reference density held fixed over an interval of artificial time.
struct Reference {
    set: ParticleSet,
    log_lik: Vec<f64>,
    lik: LikelihoodModel,
    base_ess: f64,
}

impl Reference {
    fn new(set: ParticleSet, lik: LikelihoodModel) -> Result<Self> {
        let log_lik = log_lik_at(&set, &lik)?;
        if log_lik.iter().all(|l| *l == f64::NEG_INFINITY) {
            return Err(Error::UpdateImpossible);
        }
        let base_ess = set.ess();
        Ok(Reference {
            set,
            log_lik,
            lik,
            base_ess,
        })
    }

    fn weighted(&self, gamma: f64) -> Result<ParticleSet> {
        let w = weights_from_log_lik(&self.set, &self.log_lik, &self.lik, gamma)?;
        self.set.with_weights(w)
    }

    fn ess_ratio(&self, gamma: f64) -> Result<f64> {
        Ok(self.weighted(gamma)?.ess() / self.base_ess)
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct StageInfo {
    damping: f64,
    condition: f64,
    weight_dot_sum: f64,
}

struct Flow<'a> {
    lik: &'a LikelihoodModel,
    cfg: &'a FlowConfig,
    params: DistanceParams,
    template: ParticleSet,
    reference: Option<Reference>,
}

impl Flow<'_> {
    fn set_at(&self, eta: &[f64]) -> Result<ParticleSet> {
        self.template.with_locations(eta.to_vec())
    }

    fn velocity(&self, eta: &[f64], gamma: f64) -> Result<(Vec<f64>, StageInfo)> {
        let current = self.set_at(eta)?;
        let n = current.dim();
        let (h, j, wd_sum, pinned) = match &self.reference {
            Some(r) => {
                let gd = r.lik.schedule().g_dot(gamma);
                let ratios: Vec<f64> =
                    r.log_lik.iter().map(|l| if gd == 0.0 { 0.0 } else { l * gd }).collect();
                let weighted = r.weighted(gamma)?;
                let wd = dot_from_ratios(weighted.weights(), &ratios);
                let pinned = pinned_particles(&current, &weighted);
                if pinned.iter().all(|p| *p) {
                    let info = StageInfo {
                        weight_dot_sum: wd.iter().sum::<f64>().abs(),
                        ..StageInfo::default()
                    };
                    return Ok((vec![0.0; eta.len()], info));
                }
                let j = j_vector_iterative(&current, &r.set, &wd, &self.params)?;
                let h = hessian(&current, &weighted, &self.params)?;
                (h, j, wd.iter().sum::<f64>(), pinned)
            }
            None => {
                let ratios = current
                    .rows()
                    .map(|x| self.lik.dlog_lik_dgamma(x, gamma))
                    .collect::<Result<Vec<_>>>()?;
                let wd = weight_dot_recursive_from_ratios(&ratios);
                let j = j_vector_recursive(&current, &wd, &self.params)?;
                let h = hessian_recursive(&current, &self.params)?;
                (h, j, wd.iter().sum::<f64>(), vec![false; current.len()])
            }
        };
        let free: Vec<usize> = (0..eta.len()).filter(|i| !pinned[i / n]).collect();
        let (h, j) = if free.len() == eta.len() {
            (h, j)
        } else {
            (h.select_rows(&free).select_columns(&free), free.iter().map(|i| j[*i]).collect())
        };
        let step = newton_step(&h, &j, self.cfg.damping, norm(eta)).map_err(|e| match e {
            Error::FlowStalled { damping, reason, .. } => Error::FlowStalled {
                gamma,
                damping,
                reason,
            },
            other => other,
        })?;
        let mut rate = vec![0.0; eta.len()];
        for (i, v) in free.iter().zip(&step.rate) {
            rate[*i] = *v;
        }
        Ok((
            rate,
            StageInfo {
                damping: step.damping,
                condition: step.condition_estimate,
                weight_dot_sum: wd_sum.abs(),
            },
        ))
    }

    fn min_pair_distance(&self, eta: &[f64]) -> f64 {
        let n = self.template.dim();
        let rows: Vec<&[f64]> = eta.chunks_exact(n).collect();
        let mut best = f64::INFINITY;
        for a in 0..rows.len() {
            for b in (a + 1)..rows.len() {
                best = best.min(sq_dist(rows[a], rows[b]));
            }
        }
        best.sqrt()
    }
}

/// Particles sitting on a reference particle of positive weight. The
/// diagonal Hessian block of such a particle diverges logarithmically, so
/// its velocity is zero.
fn pinned_particles(current: &ParticleSet, reference: &ParticleSet) -> Vec<bool> {
    current
        .rows()
        .map(|x| {
            reference
                .rows()
                .zip(reference.weights())
                .any(|(y, w)| *w > 0.0 && sq_dist(x, y).sqrt() < COINCIDENCE_TOL)
        })
        .collect()
}

fn axpy(eta: &[f64], h: f64, k: &[f64]) -> Vec<f64> {
    eta.iter().zip(k).map(|(e, v)| e + h * v).collect()
}

fn merge(acc: &mut StageInfo, s: StageInfo, trace: &mut FlowTrace) {
    acc.damping = acc.damping.max(s.damping);
    acc.condition = acc.condition.max(s.condition);
    trace.max_weight_dot_sum = trace.max_weight_dot_sum.max(s.weight_dot_sum);
    trace.stage_evaluations += 1;
}

const MIN_STEP: f64 = 1e-12;

/// Integrates the flow from the prior (`gamma = 0`) to the posterior
/// (`gamma = 1`). The posterior always has equal weights.
///
/// The flow particles start at the prior itself when it is equally weighted
/// and `cfg.particles` does not ask for a different count; otherwise they
/// start at the reduction of the prior to that count. The first reference
/// is always the prior.
pub fn integrate_flow(
    prior: &ParticleSet,
    lik: &LikelihoodModel,
    cfg: &FlowConfig,
) -> Result<(ParticleSet, FlowTrace)> {
    cfg.validate()?;
    let started = Instant::now();
    let count = cfg.particles.unwrap_or(prior.len());
    let start = if count == prior.len() && prior.is_equally_weighted(EQUAL_WEIGHT_TOL) {
        ParticleSet::equal_weights(prior.locations().to_vec(), prior.dim())?
    } else {
        crate::filter::reduce_particles(prior, count, &cfg.params, crate::filter::ReductionInit::Subset)?
            .set
    };
    let base = lik.effective(0.0)?;
    let continuous = cfg.variant == FlowVariant::Recursive && cfg.reset == ReferenceReset::Continuous;
    let first_reference = Reference::new(prior.clone(), base.clone())?;
    let mut flow = Flow {
        lik: &base,
        cfg,
        params: cfg.params,
        template: start.clone(),
        reference: if continuous { None } else { Some(first_reference) },
    };

    let mut trace = FlowTrace::default();
    if cfg.trace {
        trace.snapshots.push((0.0, start.clone()));
    }
    let mut state = FlowState {
        eta: start.locations().to_vec(),
        gamma: 0.0,
    };
    let mut taken_steps = 0usize;
    let mut since_reset = 0usize;
    let mut grid_index = 0usize;
    let mut adaptive_h: f64 = 1.0 / 64.0;

    while state.gamma < 1.0 {
        let (grid_end, max_steps) = match cfg.integrator {
            Integrator::FixedRk4 { steps } => ((grid_index + 1) as f64 / steps as f64, usize::MAX),
            Integrator::AdaptiveHeun { max_steps, .. } => (1.0, max_steps),
        };
        if taken_steps >= max_steps {
            return Err(stalled(state.gamma, cfg, format!("step budget of {max_steps} exhausted")));
        }
        let mut h = match cfg.integrator {
            Integrator::FixedRk4 { .. } => grid_end - state.gamma,
            Integrator::AdaptiveHeun { .. } => adaptive_h.min(1.0 - state.gamma),
        };
        let mut reset = false;
        let due = matches!(cfg.reset, ReferenceReset::Every(n) if since_reset >= n);
        if cfg.variant == FlowVariant::Recursive && due {
            reset_reference(&mut flow, &state, &base)?;
            since_reset = 0;
            reset = true;
        }
        if cfg.variant == FlowVariant::Recursive && !continuous && cfg.min_ess_fraction > 0.0 {
            loop {
                let r = flow.reference.as_ref().expect("reference present");
                if r.ess_ratio(state.gamma + h)? >= cfg.min_ess_fraction {
                    break;
                }
                if since_reset > 0 {
                    reset_reference(&mut flow, &state, &base)?;
                    since_reset = 0;
                    reset = true;
                    continue;
                }
                h /= 2.0;
                if h < MIN_STEP {
                    return Err(stalled(state.gamma, cfg, "reference weights degenerate".into()));
                }
            }
        }
        let (eta, info, taken) = match cfg.integrator {
            Integrator::FixedRk4 { .. } => {
                let (eta, info) = guarded_rk4(&mut flow, &state, h, &mut trace)?;
                (eta, info, h)
            }
            Integrator::AdaptiveHeun { tolerance, .. } => {
                let (eta, info, taken, next_h) =
                    adaptive_heun(&flow, &state, h, tolerance, &mut trace)?;
                adaptive_h = next_h;
                (eta, info, taken)
            }
        };
        let gamma = if state.gamma + taken >= grid_end || taken == grid_end - state.gamma {
            grid_end
        } else {
            state.gamma + taken
        };
        if gamma == grid_end {
            grid_index += 1;
        }
        let mut set = flow.set_at(&eta)?;
        let mut gradient_norm = 0.0;
        let mut corrector_iters = 0;
        if let Some(reference) = &flow.reference {
            let weighted = reference.weighted(gamma)?;
            if cfg.corrector.max_iters > 0 {
                let m = minimize_distance(
                    &set,
                    &weighted,
                    &cfg.params,
                    cfg.corrector.max_iters,
                    cfg.corrector.tolerance,
                )?;
                set = m.set;
                gradient_norm = m.gradient_norm;
                corrector_iters = m.iterations;
            } else {
                gradient_norm = norm(&gradient(&set, &weighted, &cfg.params.with_jitter(true))?);
            }
        }
        state = FlowState {
            eta: set.locations().to_vec(),
            gamma,
        };
        trace.steps.push(StepDiagnostics {
            gamma,
            step_size: taken,
            gradient_norm,
            damping: info.damping,
            condition_estimate: info.condition,
            corrector_iters,
            reference_reset: reset,
        });
        if cfg.trace {
            trace.snapshots.push((gamma, set));
        }
        taken_steps += 1;
        since_reset += 1;
    }
    trace.elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok((flow.set_at(&state.eta)?, trace))
}

fn stalled(gamma: f64, cfg: &FlowConfig, reason: String) -> Error {
    Error::FlowStalled {
        gamma,
        damping: cfg.damping,
        reason,
    }
}

fn reset_reference(flow: &mut Flow<'_>, state: &FlowState, base: &LikelihoodModel) -> Result<()> {
    let current = flow.set_at(&state.eta)?;
    flow.reference = Some(Reference::new(current, base.effective(state.gamma)?)?);
    Ok(())
}

/// One RK4 step; if particles come within [`GUARD_DISTANCE`] of each other
/// the step is redone as two half steps with Hessian jitter enabled.
fn guarded_rk4(
    flow: &mut Flow<'_>,
    state: &FlowState,
    h: f64,
    trace: &mut FlowTrace,
) -> Result<(Vec<f64>, StageInfo)> {
    let mut pieces = 1usize;
    for _ in 0..=MAX_GUARD_HALVINGS {
        let sub = h / pieces as f64;
        let mut eta = state.eta.clone();
        let mut info = StageInfo::default();
        let mut ok = true;
        for p in 0..pieces {
            let gamma = state.gamma + p as f64 * sub;
            match rk4_step(flow, &eta, gamma, sub, trace) {
                Ok((next, i)) if flow.min_pair_distance(&next) >= GUARD_DISTANCE => {
                    info.damping = info.damping.max(i.damping);
                    info.condition = info.condition.max(i.condition);
                    eta = next;
                }
                Ok(_) | Err(Error::Coincidence { .. }) => {
                    ok = false;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if ok {
            return Ok((eta, info));
        }
        trace.rejected_steps += 1;
        pieces *= 2;
        flow.params = flow.params.with_jitter(true);
    }
    Err(stalled(state.gamma, flow.cfg, "particles collided repeatedly".into()))
}

fn rk4_step(
    flow: &Flow<'_>,
    eta: &[f64],
    gamma: f64,
    h: f64,
    trace: &mut FlowTrace,
) -> Result<(Vec<f64>, StageInfo)> {
    let mut info = StageInfo::default();
    let (k1, s) = flow.velocity(eta, gamma)?;
    merge(&mut info, s, trace);
    let (k2, s) = flow.velocity(&axpy(eta, h / 2.0, &k1), gamma + h / 2.0)?;
    merge(&mut info, s, trace);
    let (k3, s) = flow.velocity(&axpy(eta, h / 2.0, &k2), gamma + h / 2.0)?;
    merge(&mut info, s, trace);
    let (k4, s) = flow.velocity(&axpy(eta, h, &k3), gamma + h)?;
    merge(&mut info, s, trace);
    let next = (0..eta.len())
        .map(|i| eta[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    Ok((next, info))
}

/// Returns `(eta, info, step taken, suggested next step)`.
fn adaptive_heun(
    flow: &Flow<'_>,
    state: &FlowState,
    h0: f64,
    tolerance: f64,
    trace: &mut FlowTrace,
) -> Result<(Vec<f64>, StageInfo, f64, f64)> {
    let mut h = h0;
    let (k1, s1) = flow.velocity(&state.eta, state.gamma)?;
    loop {
        if h < MIN_STEP {
            return Err(stalled(state.gamma, flow.cfg, "adaptive step size underflow".into()));
        }
        let mut info = StageInfo::default();
        merge(&mut info, s1, trace);
        let euler = axpy(&state.eta, h, &k1);
        let (k2, s2) = match flow.velocity(&euler, state.gamma + h) {
            Ok(v) => v,
            Err(Error::FlowStalled { .. }) | Err(Error::Coincidence { .. }) => {
                trace.rejected_steps += 1;
                h /= 2.0;
                continue;
            }
            Err(e) => return Err(e),
        };
        merge(&mut info, s2, trace);
        let heun: Vec<f64> = (0..k1.len())
            .map(|i| state.eta[i] + h / 2.0 * (k1[i] + k2[i]))
            .collect();
        let scale = 1.0 + norm(&heun);
        let diff: Vec<f64> = k2.iter().zip(&k1).map(|(a, b)| a - b).collect();
        let ratio = (h / 2.0) * norm(&diff) / (tolerance * scale);
        if ratio <= 1.0 && flow.min_pair_distance(&heun) >= GUARD_DISTANCE {
            let grow = if ratio == 0.0 { 4.0 } else { (0.9 / ratio.sqrt()).clamp(0.2, 4.0) };
            return Ok((heun, info, h, (h * grow).max(MIN_STEP)));
        }
        trace.rejected_steps += 1;
        h *= if ratio.is_finite() { (0.9 / ratio.sqrt()).clamp(0.1, 0.5) } else { 0.5 };
    }
}
