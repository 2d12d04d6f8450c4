//! Randomized finite-difference checks of the gradient, the Hessian and the
//! J-vectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dirac::ParticleSet;
use crate::distance::{distance, gradient, hessian, sq_dist, DistanceParams};
use crate::error::Result;
use crate::flow::{j_vector_iterative, weight_dot_iterative, weights_gamma};
use crate::homotopy::{LikelihoodModel, Schedule};

pub const GRADIENT_TOL: f64 = 1e-5;
pub const HESSIAN_TOL: f64 = 1e-4;
pub const J_TOL: f64 = 1e-5;

const STEP: f64 = 1e-5;
const MIN_SEPARATION: f64 = 0.05;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub trials: usize,
    pub seed: u64,
    /// Flips the sign of the analytic gradient; the check must then fail.
    pub inject_sign_flip: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            trials: 100,
            seed: 0,
            inject_sign_flip: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub trials: usize,
    pub worst_gradient: f64,
    pub worst_hessian: f64,
    pub worst_j: f64,
    /// Seed of the first failing trial; rerun with `--seed S --trials 1`.
    pub first_failure: Option<u64>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.first_failure.is_none()
    }
}

/// `|a - b| / max(|b|, 1)` in the Euclidean norm.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1.0);
    diff / scale
}

struct Instance {
    approx: ParticleSet,
    reference: ParticleSet,
    lik: LikelihoodModel,
    gamma: f64,
}

fn random_weights(rng: &mut ChaCha8Rng, count: usize) -> Vec<f64> {
    (0..count).map(|_| rng.random_range(0.05..1.0)).collect()
}

fn instance(seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=3usize);
    let l = rng.random_range(1..=8usize);
    let m = rng.random_range(1..=8usize);
    let points = loop {
        let pts: Vec<Vec<f64>> = (0..l + m)
            .map(|_| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let separated = (0..pts.len())
            .all(|a| ((a + 1)..pts.len()).all(|b| sq_dist(&pts[a], &pts[b]).sqrt() >= MIN_SEPARATION));
        if separated {
            break pts;
        }
    };
    let approx = ParticleSet::normalized(points[..l].concat(), n, random_weights(&mut rng, l))?;
    let reference = ParticleSet::normalized(points[l..].concat(), n, random_weights(&mut rng, m))?;
    let center: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let spread: f64 = rng.random_range(0.5..2.0);
    let schedule = if rng.random_bool(0.5) { Schedule::Linear } else { Schedule::power2() };
    let lik = LikelihoodModel::custom(
        move |x| -0.5 * sq_dist(x, &center) / (spread * spread),
        schedule,
    )?;
    Ok(Instance {
        approx,
        reference,
        lik,
        gamma: rng.random_range(0.1..0.9),
    })
}

fn check_one(inst: &Instance, params: &DistanceParams, flip: bool) -> Result<(f64, f64, f64)> {
    let (a, r) = (&inst.approx, &inst.reference);
    let dim = a.locations().len();
    let shifted = |i: usize, h: f64| {
        let mut eta = a.locations().to_vec();
        eta[i] += h;
        a.with_locations(eta)
    };

    let mut g = gradient(a, r, params)?;
    if flip {
        g.iter_mut().for_each(|v| *v = -*v);
    }
    let mut g_fd = Vec::with_capacity(dim);
    for i in 0..dim {
        let dp = distance(&shifted(i, STEP)?, r, params)?.total;
        let dm = distance(&shifted(i, -STEP)?, r, params)?.total;
        g_fd.push((dp - dm) / (2.0 * STEP));
    }

    let h = hessian(a, r, params)?;
    let mut h_fd = Vec::with_capacity(dim * dim);
    for i in 0..dim {
        let gp = gradient(&shifted(i, STEP)?, r, params)?;
        let gm = gradient(&shifted(i, -STEP)?, r, params)?;
        h_fd.extend(gp.iter().zip(&gm).map(|(p, m)| (p - m) / (2.0 * STEP)));
    }
    let h_cols: Vec<f64> = h.as_slice().to_vec();

    let wd = weight_dot_iterative(r, &inst.lik, inst.gamma)?;
    let j = j_vector_iterative(a, r, &wd, params)?;
    let grad_at = |gamma: f64| -> Result<Vec<f64>> {
        let w = weights_gamma(r, &inst.lik, gamma)?;
        gradient(a, &r.with_weights(w)?, params)
    };
    let gp = grad_at(inst.gamma + STEP)?;
    let gm = grad_at(inst.gamma - STEP)?;
    let j_fd: Vec<f64> = gp.iter().zip(&gm).map(|(p, m)| (p - m) / (2.0 * STEP)).collect();

    Ok((rel_err(&g, &g_fd), rel_err(&h_cols, &h_fd), rel_err(&j, &j_fd)))
}

/// Runs `trials` instances; trial `t` uses seed `seed + t`.
pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let params = DistanceParams::default();
    let mut report = GradcheckReport {
        trials: opts.trials,
        ..Default::default()
    };
    for t in 0..opts.trials {
        let seed = opts.seed.wrapping_add(t as u64);
        let inst = instance(seed)?;
        let (eg, eh, ej) = check_one(&inst, &params, opts.inject_sign_flip)?;
        report.worst_gradient = report.worst_gradient.max(eg);
        report.worst_hessian = report.worst_hessian.max(eh);
        report.worst_j = report.worst_j.max(ej);
        let ok = eg <= GRADIENT_TOL && eh <= HESSIAN_TOL && ej <= J_TOL;
        if !ok && report.first_failure.is_none() {
            report.first_failure = Some(seed);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_passes_and_canary_fails() {
        let ok = run(&GradcheckOptions { trials: 10, seed: 5, inject_sign_flip: false }).unwrap();
        assert!(ok.passed(), "{ok:?}");
        let bad = run(&GradcheckOptions { trials: 3, seed: 5, inject_sign_flip: true }).unwrap();
        assert_eq!(bad.first_failure, Some(5));
        let none = run(&GradcheckOptions { trials: 0, seed: 5, inject_sign_flip: false }).unwrap();
        assert!(none.passed() && none.trials == 0);
    }
}
