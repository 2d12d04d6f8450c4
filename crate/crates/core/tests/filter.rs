use flowfilt::cli::selftest::standard_normal_prior;
use flowfilt::filter::*;
use flowfilt::flow::FlowConfig;
use flowfilt::homotopy::{GaussianLikelihood, MeasurementFn};
use flowfilt::*;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scalar_lik(y: f64, var: f64) -> LikelihoodModel {
    let g = GaussianLikelihood::new(vec![y], MeasurementFn::Identity, DMatrix::from_element(1, 1, var)).unwrap();
    LikelihoodModel::gaussian(g, Schedule::Linear).unwrap()
}

fn scalar_template(var: f64) -> LikelihoodTemplate {
    LikelihoodTemplate {
        function: MeasurementFn::Identity,
        noise_cov: DMatrix::from_element(1, 1, var),
        schedule: Schedule::Linear,
    }
}

/// Three-point set matching the first four moments of `N(0, var)`.
fn three_point_noise(var: f64) -> SystemNoise {
    let s = (3.0 * var).sqrt();
    SystemNoise::Deterministic(ParticleSet::new(vec![-s, 0.0, s], 1, vec![1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0]).unwrap())
}

#[test]
fn predict_identity_and_translation() {
    let set = ParticleSet::equal_weights(vec![0.0, 1.5, -2.0], 1).unwrap();
    let p = DistanceParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let same = predict(&set, &SystemModel::identity(), &[], &p, &mut rng).unwrap();
    assert_eq!(same, set);
    let walk = SystemModel::new(Dynamics::RandomWalk, SystemNoise::None);
    let moved = predict(&set, &walk, &[1.0], &p, &mut rng).unwrap();
    assert_eq!(moved.locations(), &[1.0, 2.5, -1.0]);
}

#[test]
fn predict_propagates_moments() {
    let p = DistanceParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = gaussian_prior(&[0.0], &DMatrix::from_element(1, 1, 1.0), 1000, 1000, &p, 1).unwrap();
    let system = SystemModel::new(
        Dynamics::Linear(DMatrix::from_element(1, 1, 0.9)),
        SystemNoise::gaussian(DMatrix::from_element(1, 1, 0.01)).unwrap(),
    );
    let out = predict(&input, &system, &[], &p, &mut rng).unwrap();
    let expected = 0.81 * input.covariance()[(0, 0)] + 0.01;
    let got = out.covariance()[(0, 0)];
    assert!((got - expected).abs() <= 0.1 * expected, "{got} vs {expected}");
}

#[test]
fn deterministic_noise_prediction_is_reduced_back() {
    let set = ParticleSet::equal_weights(vec![-1.0, 0.0, 1.0, 2.0], 1).unwrap();
    let system = SystemModel::new(Dynamics::RandomWalk, three_point_noise(0.2));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = predict(&set, &system, &[], &DistanceParams::default(), &mut rng).unwrap();
    assert_eq!(out.len(), 4);
    assert!(out.is_equally_weighted(0.0));
    assert!((out.mean()[0] - set.mean()[0]).abs() < 1e-6);
}

#[test]
fn update_is_self_contained_and_deterministic() {
    let prior = standard_normal_prior(1, 40).unwrap();
    let cfg = FlowConfig::default().with_steps(16);
    let a = update(&prior, &scalar_lik(0.7, 0.5), &cfg).unwrap();
    let b = update(&prior, &scalar_lik(0.7, 0.5), &cfg).unwrap();
    assert_eq!(a, b);
    let flat = update(&prior, &LikelihoodModel::flat(), &cfg).unwrap();
    for (x, y) in flat.locations().iter().zip(prior.locations()) {
        assert!((x - y).abs() <= 1e-9);
    }
}

#[test]
fn flow_mean_tracks_reweighted_mean() {
    let prior = standard_normal_prior(1, 100).unwrap();
    let lik = scalar_lik(1.3, 0.8);
    let flow = update(&prior, &lik, &FlowConfig::default()).unwrap();
    let rw = bayes_reweight(&prior, &lik).unwrap().posterior;
    let bound = 3.0 / (prior.len() as f64).sqrt() * prior.covariance()[(0, 0)].sqrt();
    assert!((flow.mean()[0] - rw.mean()[0]).abs() <= bound);
}

#[test]
fn variants_agree_at_first_order() {
    let prior = standard_normal_prior(1, 30).unwrap();
    let g = GaussianLikelihood::new(vec![1.0], MeasurementFn::Identity, DMatrix::from_element(1, 1, 1.0)).unwrap();
    let tempered = LikelihoodModel::custom(move |x| 0.01 * g.log_lik(x).unwrap(), Schedule::Linear).unwrap();
    let rec = update(&prior, &tempered, &FlowConfig::default().with_steps(4)).unwrap();
    let it = update(&prior, &tempered, &FlowConfig::iterative().with_steps(4)).unwrap();
    for (a, b) in rec.locations().iter().zip(it.locations()) {
        assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()), "{a} vs {b}");
    }
}

#[test]
fn repeated_measurements_shrink_a_static_state() {
    let scenario = Scenario {
        system: SystemModel::identity(),
        likelihood: scalar_template(1.0),
        prior: standard_normal_prior(1, 50).unwrap(),
        measurements: vec![vec![0.4]; 5],
        inputs: vec![],
        flow: FlowConfig::default().with_steps(32),
        seed: 0,
    };
    let run = run_scenario(&scenario, Method::FlowRecursive).unwrap();
    let vars: Vec<f64> = run.records.iter().map(|r| r.covariance[0]).collect();
    assert!(vars.windows(2).all(|w| w[1] <= w[0]), "{vars:?}");
    assert!(run.records.iter().all(|r| r.ess == 50.0));
}

#[test]
fn zero_measurements_yield_prior_only() {
    let scenario = Scenario {
        system: SystemModel::identity(),
        likelihood: scalar_template(1.0),
        prior: standard_normal_prior(1, 10).unwrap(),
        measurements: vec![],
        inputs: vec![],
        flow: FlowConfig::default(),
        seed: 0,
    };
    for m in Method::ALL {
        let run = run_scenario(&scenario, m).unwrap();
        assert_eq!(run.records.len(), 1);
        assert_eq!(run.records[0].set, scenario.prior);
    }
}

/// Scalar random walk with a deterministic noise set, so the only
/// difference from the Kalman filter is the particle approximation.
#[test]
fn random_walk_tracks_kalman_filter() {
    let measurements = [0.3, 0.8, 0.5, 1.2, 1.0, 1.6, 1.4, 2.1, 1.9, 2.4];
    let scenario = Scenario {
        system: SystemModel::new(Dynamics::RandomWalk, three_point_noise(0.1)),
        likelihood: scalar_template(0.5),
        prior: standard_normal_prior(1, 200).unwrap(),
        measurements: measurements.iter().map(|y| vec![*y]).collect(),
        inputs: vec![],
        flow: FlowConfig::default(),
        seed: 4,
    };
    let kalman = kalman_reference(&scenario).unwrap();
    let run = run_scenario(&scenario, Method::FlowRecursive).unwrap();
    for (rec, (m, p)) in run.records.iter().zip(&kalman).skip(1) {
        let dev = (rec.mean[0] - m[0]).abs() / p[(0, 0)].sqrt();
        assert!(dev <= 0.1, "step {}: {dev} posterior std", rec.step);
    }
}

#[test]
fn sir_replicates_locations() {
    let set = ParticleSet::equal_weights(vec![0.0, 1.0, 2.0, 3.0], 1).unwrap();
    let out = baseline_sir(&set, &LikelihoodModel::flat(), 3).unwrap();
    assert!(out.locations().iter().all(|x| set.locations().contains(x)));
    let pair = ParticleSet::equal_weights(vec![0.0, 1.0], 1).unwrap();
    let lik = LikelihoodModel::custom(|x| if x[0] > 0.5 { 0.0 } else { f64::NEG_INFINITY }, Schedule::Linear).unwrap();
    assert_eq!(baseline_sir(&pair, &lik, 1).unwrap().locations(), &[1.0, 1.0]);
}

#[test]
fn reduction_beats_random_subsets_in_1d() {
    let p = DistanceParams::default();
    let reference = gaussian_prior(&[0.0], &DMatrix::from_element(1, 1, 1.0), 300, 300, &p, 9).unwrap();
    let reduced = reduce_particles(&reference, 10, &p, ReductionInit::Subset).unwrap();
    assert!(reduced.history.windows(2).all(|w| w[1] <= w[0]));
    let every_third: Vec<f64> = reference.locations().iter().step_by(30).copied().collect();
    let naive = ParticleSet::equal_weights(every_third, 1).unwrap();
    assert!(reduced.distance < distance(&naive, &reference, &p).unwrap().total);
}
