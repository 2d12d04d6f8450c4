use std::path::Path;

use flowfilt::cli::config;
use flowfilt::dirac::format_f64;
use flowfilt::flow::{weight_dot_iterative, FlowConfig};
use flowfilt::homotopy::{GaussianLikelihood, MeasurementFn};
use flowfilt::*;
use nalgebra::DMatrix;
use proptest::prelude::*;

/// Sets whose particles are pairwise at least `0.05` apart.
fn separated_set(max_len: usize, dim: usize) -> impl Strategy<Value = ParticleSet> {
    (1..=max_len).prop_flat_map(move |len| {
        (
            prop::collection::vec(-3.0f64..3.0, len * dim),
            prop::collection::vec(0.05f64..1.0, len),
        )
            .prop_filter("particles too close", move |(locs, _)| {
                (0..len).all(|a| {
                    ((a + 1)..len).all(|b| {
                        let d2: f64 = (0..dim).map(|d| (locs[a * dim + d] - locs[b * dim + d]).powi(2)).sum();
                        d2.sqrt() >= 0.05
                    })
                })
            })
            .prop_map(move |(locs, w)| ParticleSet::normalized(locs, dim, w).unwrap())
    })
}

fn pair(max_len: usize) -> impl Strategy<Value = (ParticleSet, ParticleSet)> {
    (1..=3usize).prop_flat_map(move |dim| (separated_set(max_len, dim), separated_set(max_len, dim)))
}

fn scalar_lik(y: f64, var: f64) -> LikelihoodModel {
    let g = GaussianLikelihood::new(vec![y], MeasurementFn::Identity, DMatrix::from_element(1, 1, var)).unwrap();
    LikelihoodModel::gaussian(g, Schedule::Linear).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distance_to_itself_is_zero(set in separated_set(8, 2)) {
        let d = distance(&set, &set, &DistanceParams::default()).unwrap().total;
        prop_assert!(d.abs() <= 1e-12, "{}", d);
    }

    #[test]
    fn distance_is_nonnegative((a, r) in pair(8)) {
        let d = distance(&a, &r, &DistanceParams::default()).unwrap().total;
        prop_assert!(d >= -1e-10, "{}", d);
    }

    #[test]
    fn distance_is_translation_invariant((a, r) in pair(6), shift in -2.0f64..2.0) {
        let p = DistanceParams::default();
        let s = vec![shift; a.dim()];
        let d0 = distance(&a, &r, &p).unwrap().total;
        let d1 = distance(&a.translated(&s).unwrap(), &r.translated(&s).unwrap(), &p).unwrap().total;
        prop_assert!((d0 - d1).abs() <= 1e-9 * (1.0 + d0.abs()), "{} vs {}", d0, d1);
    }

    #[test]
    fn distance_ignores_particle_order((a, r) in pair(6)) {
        let p = DistanceParams::default();
        let n = a.dim();
        let order: Vec<usize> = (0..a.len()).rev().collect();
        let locs: Vec<f64> = order.iter().flat_map(|i| a.location(*i).to_vec()).collect();
        let w: Vec<f64> = order.iter().map(|i| a.weights()[*i]).collect();
        let b = ParticleSet::new(locs, n, w).unwrap();
        let d0 = distance(&a, &r, &p).unwrap().total;
        let d1 = distance(&b, &r, &p).unwrap().total;
        prop_assert!((d0 - d1).abs() <= 1e-12 * (1.0 + d0.abs()));
    }

    #[test]
    fn hessian_is_symmetric((a, r) in pair(6)) {
        let h = hessian(&a, &r, &DistanceParams::default()).unwrap();
        prop_assert_eq!(h.clone(), h.transpose());
    }

    #[test]
    fn weight_derivatives_sum_to_zero(r in separated_set(12, 1), y in -2.0f64..2.0, gamma in 0.0f64..1.0) {
        let wd = weight_dot_iterative(&r, &scalar_lik(y, 0.5), gamma).unwrap();
        let sum: f64 = wd.iter().sum();
        prop_assert!(sum.abs() <= 1e-12, "{}", sum);
    }

    #[test]
    fn reweight_ess_is_bounded(r in separated_set(12, 1), y in -2.0f64..2.0) {
        let res = bayes_reweight(&r, &scalar_lik(y, 0.3)).unwrap();
        prop_assert!(res.effective_sample_size >= 1.0 - 1e-12);
        prop_assert!(res.effective_sample_size <= r.len() as f64 + 1e-9);
    }

    #[test]
    fn particle_csv_round_trips(set in separated_set(10, 3)) {
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let back = ParticleSet::read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back, set);
    }

    #[test]
    fn float_formatting_round_trips(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(format_f64(v).parse::<f64>().unwrap(), v);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn flow_output_is_equally_weighted_and_distinct(
        locs in prop::collection::vec(-2.0f64..2.0, 3..8),
        y in -1.5f64..1.5,
    ) {
        let mut sorted = locs.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 0.05));
        let prior = ParticleSet::equal_weights(locs.clone(), 1).unwrap();
        let (post, trace) = integrate_flow(&prior, &scalar_lik(y, 1.0), &FlowConfig::default().with_steps(16)).unwrap();
        prop_assert_eq!(post.len(), locs.len());
        prop_assert_eq!(post.ess(), locs.len() as f64);
        prop_assert_eq!(post.distinct_locations(), locs.len());
        prop_assert!(trace.max_weight_dot_sum <= 1e-12);
    }

    #[test]
    fn flat_likelihood_is_a_fixed_point(locs in prop::collection::vec(-2.0f64..2.0, 2..8)) {
        let mut sorted = locs.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 0.05));
        let prior = ParticleSet::equal_weights(locs, 1).unwrap();
        for cfg in [FlowConfig::default(), FlowConfig::iterative()] {
            let (post, _) = integrate_flow(&prior, &LikelihoodModel::flat(), &cfg.with_steps(8)).unwrap();
            for (a, b) in post.locations().iter().zip(prior.locations()) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn config_hash_ignores_layout_but_not_content(seed in 0u64..1000, pad in 0usize..4) {
        let text = format!(
            "[scenario]\nname = \"p\"\nseed = {seed}\nparticles = 5\n\n[system]\nmodel = \"identity\"\ndim = 1\n\n[likelihood]\nfunction = \"identity\"\nnoise_cov = [[1.0]]\nmeasurements = [[0.5]]\n\n[prior]\nkind = \"gaussian\"\nmean = [0.0]\ncov = [[1.0]]\ndraws = 50\n"
        );
        let spaced = text.replace(" = ", &format!("{}={}", " ".repeat(pad + 1), " ".repeat(pad))) + "# trailing comment\n";
        let base = Path::new(".");
        let a = config::parse(&text, base).unwrap();
        let b = config::parse(&spaced, base).unwrap();
        prop_assert_eq!(&a.hash, &b.hash);
        let other = config::parse(&text.replace(&format!("seed = {seed}"), &format!("seed = {}", seed + 1)), base).unwrap();
        prop_assert_ne!(&a.hash, &other.hash);
    }
}
