//! Oracle- and property-based acceptance checks.

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dirac::{bayes_reweight, ParticleSet};
use crate::distance::{distance, gradient, DistanceParams};
use crate::error::Result;
use crate::filter::{baseline_sir, reduce_particles, ReductionInit};
use crate::flow::{integrate_flow, Corrector, FlowConfig, FlowTrace, FlowVariant, Integrator};
use crate::homotopy::{GaussianLikelihood, LikelihoodModel, MeasurementFn, Schedule};

use super::gradcheck::{self, GradcheckOptions};

#[derive(Debug, Clone, Copy, Default)]
pub struct SuiteOptions {
    /// Overrides the RK4 step count of every flow update in the suite.
    pub flow_steps: Option<usize>,
}

impl SuiteOptions {
    fn flow(&self, cfg: FlowConfig) -> FlowConfig {
        match self.flow_steps {
            Some(steps) => cfg.with_steps(steps),
            None => cfg,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

pub struct Check {
    pub id: u32,
    pub name: &'static str,
    pub run: fn(&SuiteOptions) -> Result<Outcome>,
}

pub fn suite() -> Vec<Check> {
    vec![
        Check { id: 1, name: "derivative correctness", run: derivatives },
        Check { id: 2, name: "linear-Gaussian oracle", run: kalman_oracle },
        Check { id: 3, name: "degeneracy-free update", run: degeneracy },
        Check { id: 4, name: "conservation and fixed points", run: conservation },
        Check { id: 5, name: "chained updates", run: chained },
        Check { id: 6, name: "integrator order", run: integrator_order },
        Check { id: 7, name: "reduction quality", run: reduction_quality },
        Check { id: 8, name: "determinism", run: determinism },
        Check { id: 9, name: "performance envelope", run: performance },
    ]
}

/// Runs one check, turning library errors into failures.
pub fn evaluate(check: &Check, opts: &SuiteOptions) -> Outcome {
    match (check.run)(opts) {
        Ok(o) => o,
        Err(e) => Outcome {
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn outcome(passed: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { passed, detail })
}

// ---------------------------------------------------------------------------
// Fixtures
// ---------------------------------------------------------------------------

fn grid_1d(points: usize, half_width: f64) -> (Vec<f64>, Vec<f64>) {
    let z: Vec<f64> = (0..points)
        .map(|i| -half_width + 2.0 * half_width * i as f64 / (points - 1) as f64)
        .collect();
    let w = z.iter().map(|v| (-0.5 * v * v).exp()).collect();
    (z, w)
}

/// Points of a weighted 1D grid at the cumulative-weight levels `(i + 1/2) / k`.
fn grid_quantiles(z: &[f64], w: &[f64], k: usize) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    let mut out = Vec::with_capacity(k);
    let mut acc = 0.0;
    let mut j = 0;
    for i in 0..k {
        let level = (i as f64 + 0.5) / k as f64 * total;
        while j + 1 < z.len() && acc + w[j] < level {
            acc += w[j];
            j += 1;
        }
        out.push(z[j]);
    }
    out
}

/// Standard-normal prior in `n <= 2` dimensions as a reduced set of
/// `count` equal-weight particles (`count` must be a square for `n = 2`).
pub fn standard_normal_prior(n: usize, count: usize) -> Result<ParticleSet> {
    let params = DistanceParams::default();
    let (reference, init) = if n == 1 {
        let (z, w) = grid_1d(4001, 7.0);
        let init = grid_quantiles(&z, &w, count);
        (ParticleSet::normalized(z, 1, w)?, ParticleSet::equal_weights(init, 1)?)
    } else {
        let (z, w) = grid_1d(81, 6.0);
        let side = (count as f64).sqrt().round() as usize;
        let q = grid_quantiles(&z, &w, side);
        let mut locs = Vec::new();
        let mut weights = Vec::new();
        for (a, wa) in z.iter().zip(&w) {
            for (b, wb) in z.iter().zip(&w) {
                locs.extend([*a, *b]);
                weights.push(wa * wb);
            }
        }
        let init: Vec<f64> = q.iter().flat_map(|a| q.iter().flat_map(move |b| [*a, *b])).collect();
        (ParticleSet::normalized(locs, 2, weights)?, ParticleSet::equal_weights(init, 2)?)
    };
    Ok(reduce_particles(&reference, count, &params, ReductionInit::Given(init))?.set)
}

fn gaussian_lik(y: Vec<f64>, cov: DMatrix<f64>) -> Result<LikelihoodModel> {
    LikelihoodModel::gaussian(GaussianLikelihood::new(y, MeasurementFn::Identity, cov)?, Schedule::Linear)
}

fn scalar_lik(y: f64, var: f64) -> Result<LikelihoodModel> {
    gaussian_lik(vec![y], DMatrix::from_element(1, 1, var))
}

fn var_1d(set: &ParticleSet) -> f64 {
    set.covariance()[(0, 0)]
}

// ---------------------------------------------------------------------------
// Checks
// ---------------------------------------------------------------------------

fn derivatives(_: &SuiteOptions) -> Result<Outcome> {
    let started = Instant::now();
    let r = gradcheck::run(&GradcheckOptions { trials: 100, seed: 2024, inject_sign_flip: false })?;
    let secs = started.elapsed().as_secs_f64();
    outcome(
        r.passed() && secs < 30.0,
        format!(
            "{} trials, worst rel. errors gradient {:.2e} hessian {:.2e} J {:.2e}, {secs:.2} s",
            r.trials, r.worst_gradient, r.worst_hessian, r.worst_j
        ),
    )
}

fn kalman_oracle(opts: &SuiteOptions) -> Result<Outcome> {
    let cfg = opts.flow(FlowConfig::default());

    let prior = standard_normal_prior(1, 100)?;
    let started = Instant::now();
    let (post, _) = integrate_flow(&prior, &scalar_lik(1.0, 1.0)?, &cfg)?;
    let t1 = started.elapsed().as_secs_f64();
    let (m1, v1) = (post.mean()[0], var_1d(&post));
    let ok1 = (m1 - 0.5).abs() <= 0.02 && (v1 - 0.5).abs() <= 0.05 && t1 < 5.0;

    let prior2 = standard_normal_prior(2, 100)?;
    let y = DVector::from_vec(vec![1.0, -0.5]);
    let r = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
    let p0 = DMatrix::<f64>::identity(2, 2);
    let gain = &p0 * (&p0 + &r).try_inverse().expect("invertible");
    let m_exact = &gain * &y;
    let p_exact = (DMatrix::identity(2, 2) - &gain) * &p0;
    let started = Instant::now();
    let (post2, _) = integrate_flow(&prior2, &gaussian_lik(y.as_slice().to_vec(), r)?, &cfg)?;
    let t2 = started.elapsed().as_secs_f64();
    let mean_err = (post2.mean() - &m_exact).norm() / m_exact.norm();
    let cov_err = (post2.covariance() - &p_exact).norm() / p_exact.norm();
    let ok2 = mean_err <= 0.03 && cov_err <= 0.08 && t2 < 5.0;
    outcome(
        ok1 && ok2,
        format!(
            "1D mean {m1:.4} var {v1:.4} ({t1:.2} s); 2D rel. mean err {mean_err:.4} cov err {cov_err:.4} ({t2:.2} s)"
        ),
    )
}

fn degeneracy(opts: &SuiteOptions) -> Result<Outcome> {
    let prior = standard_normal_prior(1, 100)?;
    let lik = scalar_lik(0.5, 1e-4)?;
    let (post, _) = integrate_flow(&prior, &lik, &opts.flow(FlowConfig::default()))?;
    let flow_ess = post.ess();
    let flow_distinct = post.distinct_locations();
    let rw_ess = bayes_reweight(&prior, &lik)?.effective_sample_size;
    let sir_distinct = baseline_sir(&prior, &lik, 7)?.distinct_locations();
    outcome(
        flow_ess == 100.0 && flow_distinct == 100 && rw_ess < 5.0 && sir_distinct < 10,
        format!(
            "flow ESS {flow_ess} distinct {flow_distinct}; reweight ESS {rw_ess:.3}; SIR distinct {sir_distinct}"
        ),
    )
}

fn conservation(opts: &SuiteOptions) -> Result<Outcome> {
    let prior = standard_normal_prior(1, 100)?;
    let mut worst_sum: f64 = 0.0;
    let mut traces: Vec<FlowTrace> = Vec::new();
    for cfg in [FlowConfig::default(), FlowConfig::iterative()] {
        let (_, t) = integrate_flow(&prior, &scalar_lik(1.0, 1.0)?, &opts.flow(cfg))?;
        traces.push(t);
    }
    for t in &traces {
        worst_sum = worst_sum.max(t.max_weight_dot_sum);
    }
    let mut worst_move: f64 = 0.0;
    for cfg in [FlowConfig::default(), FlowConfig::iterative()] {
        let (post, _) = integrate_flow(&prior, &LikelihoodModel::flat(), &opts.flow(cfg))?;
        for (a, b) in post.locations().iter().zip(prior.locations()) {
            worst_move = worst_move.max((a - b).abs());
        }
    }
    let g = gradient(&prior, &prior, &DistanceParams::default())?;
    let zero = g.iter().all(|v| *v == 0.0);
    outcome(
        worst_sum <= 1e-12 && worst_move <= 1e-9 && zero,
        format!("max |sum w'| {worst_sum:.2e}; flat-likelihood max move {worst_move:.2e}; perfect-fit gradient zero: {zero}"),
    )
}

/// Posterior mean and variance on a dense grid for a standard-normal prior.
fn grid_posterior(log_lik: impl Fn(f64) -> f64) -> (f64, f64) {
    let points = 100_000;
    let (lo, hi) = (-10.0, 10.0);
    let mut logs = Vec::with_capacity(points);
    let mut xs = Vec::with_capacity(points);
    for i in 0..points {
        let x = lo + (hi - lo) * i as f64 / (points - 1) as f64;
        xs.push(x);
        logs.push(-0.5 * x * x + log_lik(x));
    }
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mean = xs.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() / total;
    let var = xs.iter().zip(&w).map(|(x, w)| (x - mean).powi(2) * w).sum::<f64>() / total;
    (mean, var)
}

fn chained(opts: &SuiteOptions) -> Result<Outcome> {
    let prior = standard_normal_prior(1, 200)?;
    let cfg = opts.flow(FlowConfig::default());
    let (y1, r1, y2, r2) = (0.8, 1.0, -0.3, 2.0);
    let l1 = scalar_lik(y1, r1)?;
    let l2 = scalar_lik(y2, r2)?;
    let (mid, _) = integrate_flow(&prior, &l1, &cfg)?;
    let (two, _) = integrate_flow(&mid, &l2, &cfg)?;
    let (one, _) = integrate_flow(&prior, &LikelihoodModel::product(vec![l1, l2], Schedule::Linear)?, &cfg)?;
    let (om, ov) = grid_posterior(|x| -0.5 * (x - y1).powi(2) / r1 - 0.5 * (x - y2).powi(2) / r2);
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let (tm, tv, sm, sv) = (two.mean()[0], var_1d(&two), one.mean()[0], var_1d(&one));
    let worst = [rel(tm, om), rel(tv, ov), rel(sm, om), rel(sv, ov), rel(tm, sm), rel(tv, sv)]
        .into_iter()
        .fold(0.0, f64::max);
    outcome(
        worst <= 0.05,
        format!(
            "grid mean {om:.4} var {ov:.4}; chained {tm:.4}/{tv:.4}; single {sm:.4}/{sv:.4}; worst rel. dev {worst:.4}"
        ),
    )
}

/// Terminal locations of an iterative flow tracking two particles against
/// a sparse weighted reference; no particle comes near a reference point,
/// so the flow field is smooth.
fn smooth_flow(steps: usize) -> Result<Vec<f64>> {
    let locs: Vec<f64> = vec![-2.0, -1.0, 0.0, 1.0, 2.0];
    let w = locs.iter().map(|x: &f64| (-0.5 * x * x).exp()).collect();
    let prior = ParticleSet::normalized(locs, 1, w)?;
    let cfg = FlowConfig {
        variant: FlowVariant::Iterative,
        integrator: Integrator::FixedRk4 { steps },
        corrector: Corrector { max_iters: 0, ..Corrector::default() },
        particles: Some(2),
        ..FlowConfig::default()
    };
    Ok(integrate_flow(&prior, &scalar_lik(0.2, 1.0)?, &cfg)?.0.locations().to_vec())
}

fn integrator_order(_: &SuiteOptions) -> Result<Outcome> {
    let reference = smooth_flow(4096)?;
    let err = |steps| -> Result<f64> {
        let x = smooth_flow(steps)?;
        Ok(x.iter().zip(&reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
    };
    let errors = [err(8)?, err(16)?, err(32)?];
    let ratios = [errors[0] / errors[1], errors[1] / errors[2]];
    let orders: Vec<f64> = ratios.iter().map(|r| r.log2()).collect();
    outcome(
        ratios.iter().all(|r| *r >= 8.0),
        format!(
            "errors at 8/16/32 steps {:.2e}/{:.2e}/{:.2e}; observed orders {:.2}, {:.2}",
            errors[0], errors[1], errors[2], orders[0], orders[1]
        ),
    )
}

fn reduction_quality(_: &SuiteOptions) -> Result<Outcome> {
    let params = DistanceParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws: Vec<f64> = (0..2000).map(|_| rng.sample(StandardNormal)).collect();
    let cloud = ParticleSet::equal_weights(draws, 2)?;
    let reduced = reduce_particles(&cloud, 20, &params, ReductionInit::Subset)?;
    let monotone = reduced.history.windows(2).all(|w| w[1] <= w[0]);
    let mut best_subset = f64::INFINITY;
    for _ in 0..100 {
        let idx = sample(&mut rng, cloud.len(), 20);
        let locs: Vec<f64> = idx.iter().flat_map(|i| cloud.location(i).to_vec()).collect();
        let subset = ParticleSet::equal_weights(locs, 2)?;
        best_subset = best_subset.min(distance(&subset, &cloud, &params)?.total);
    }
    outcome(
        reduced.distance < best_subset && monotone,
        format!(
            "reduced distance {:.4e} vs best random subset {:.4e}; {} iterations, monotone: {monotone}",
            reduced.distance, best_subset, reduced.iterations
        ),
    )
}

const DETERMINISM_CONFIG: &str = r#"
[scenario]
name = "determinism"
seed = 42
particles = 30

[system]
model = "random-walk"
dim = 1
noise = { kind = "gaussian", cov = [[0.2]] }

[likelihood]
function = "identity"
noise_cov = [[0.5]]
measurements = [[0.3], [0.1], [0.6]]

[prior]
kind = "gaussian"
mean = [0.0]
cov = [[1.0]]
draws = 300

[flow]
steps = 16

[output]
methods = ["flow-recursive", "flow-iterative", "reweight", "sir"]
"#;

fn scratch_dir(tag: &str) -> PathBuf {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    std::env::temp_dir().join(format!("flowfilt-{tag}-{}-{nanos}", std::process::id()))
}

fn determinism(opts: &SuiteOptions) -> Result<Outcome> {
    let dir = scratch_dir("determinism");
    std::fs::create_dir_all(&dir)?;
    let text = match opts.flow_steps {
        Some(s) => DETERMINISM_CONFIG.replace("steps = 16", &format!("steps = {s}")),
        None => DETERMINISM_CONFIG.to_string(),
    };
    let cfg_path = dir.join("scenario.toml");
    std::fs::write(&cfg_path, text)?;
    let mut outputs = Vec::new();
    for run in 0..2 {
        let loaded = super::config::load(&cfg_path).map_err(|e| crate::Error::Domain(e.to_string()))?;
        let out = dir.join(format!("out{run}"));
        super::run::execute(loaded, &super::run::RunOptions { out: Some(out.clone()), ..Default::default() })?;
        outputs.push(std::fs::read(out.join("estimates.csv"))?);
    }
    let same = outputs[0] == outputs[1];
    let _ = std::fs::remove_dir_all(&dir);
    outcome(same, format!("estimates.csv identical across two runs: {same} ({} bytes)", outputs[0].len()))
}

fn performance(opts: &SuiteOptions) -> Result<Outcome> {
    let prior = standard_normal_prior(2, 100)?;
    let lik = gaussian_lik(vec![0.8, -0.4], DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.5]))?;
    let cfg = opts.flow(FlowConfig::default());
    let started = Instant::now();
    let (_, trace) = integrate_flow(&prior, &lik, &cfg)?;
    let secs = started.elapsed().as_secs_f64();
    outcome(
        secs < 3.0,
        format!("L=100, N=2, {} steps: {secs:.3} s", trace.steps.len()),
    )
}
