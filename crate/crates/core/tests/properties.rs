//! Property tests across modules.

use coverlab::chenstein::{self, ChenSteinInput, PairMoment, TinyProcessSpec};
use coverlab::cli::{ExperimentConfig, ExperimentKind};
use coverlab::excursion::{self, AnnulusSpec, ExcursionCount};
use coverlab::gff::{self, GffSpec};
use coverlab::hitting::{self, GreenConstants};
use coverlab::lattice::{self, LatticeConfig, Point, PointSet};
use coverlab::oracle;
use coverlab::rng;
use coverlab::stats::{self, Statistic};
use coverlab::uncovered::{self, BernoulliFieldSpec, BernoulliProb, SurrogateInputs};
use coverlab::walk::WalkState;
use proptest::prelude::*;

fn constants() -> GreenConstants {
    serde_json::from_value(serde_json::json!({
        "d": 3, "G0": 1.5163860592, "p_d": 0.3405373296, "c_d": 0.4774648, "C_d": 0.31487,
        "meta": {
            "method": "fixture", "box_sides": [], "center_values": [],
            "g0_extrapolation_error": 0.0, "fit_range": [5, 8], "log_log_slope": -1.0,
            "c_d_fit_residual": 0.0, "mc_box": 0, "mc_walks": 0, "mc_return_prob": 0.0,
            "mc_return_se": 0.0, "mc_box_g0": 0.0
        }
    }))
    .unwrap()
}

fn sites(n: usize, max: usize) -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::vec(0..n * n * n, 0..max)
}

fn tiny_process(k: usize) -> impl Strategy<Value = TinyProcessSpec> {
    proptest::collection::vec(0.01f64..1.0, 1 << k).prop_map(move |w| {
        let s: f64 = w.iter().sum();
        TinyProcessSpec::new(k, w.iter().map(|x| x / s).collect()).unwrap()
    })
}

fn product(p: &[f64]) -> BernoulliFieldSpec {
    BernoulliFieldSpec::new(p.len(), BernoulliProb::PerSite(p.to_vec())).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn walk_is_reproducible(seed in any::<u64>(), replica in 0u64..1000, steps in 1u64..400) {
        let cfg = LatticeConfig::torus(3, 10).unwrap();
        let mut a = WalkState::start_stationary(&cfg, seed, replica).unwrap();
        let mut b = WalkState::start_stationary(&cfg, seed, replica).unwrap();
        for i in 1..=steps {
            a.step();
            b.step();
            prop_assert_eq!(a.time(), i);
            prop_assert_eq!(a.position(), b.position());
        }
    }

    #[test]
    fn first_visit_matches_cover(seed in any::<u64>(), horizon in 0u64..3000) {
        let cfg = LatticeConfig::torus(3, 8).unwrap();
        let mut w = WalkState::start_stationary(&cfg, seed, 0).unwrap();
        let tr = w.run_and_track(horizon, true);
        let mut visited = 0;
        for s in 0..cfg.volume() {
            let covered = tr.first_visit(s).is_some_and(|t| t <= horizon);
            prop_assert_eq!(covered, tr.is_covered(s));
            visited += covered as usize;
        }
        prop_assert_eq!(tr.uncovered_count(), cfg.volume() - visited);
    }

    #[test]
    fn excursion_log_agrees_with_replay(
        seed in any::<u64>(),
        (r, big_r) in prop_oneof![Just((1.0, 2.0)), Just((1.0, 2.5)), Just((1.5, 2.9)), Just((1.2, 2.8))],
    ) {
        let cfg = LatticeConfig::torus(3, 12).unwrap();
        let center = Point::new(vec![3, 7, 11]);
        let a = AnnulusSpec::new(&cfg, center.clone(), r, big_r).unwrap();
        let horizon = 3000;
        let mut w1 = WalkState::start_stationary(&cfg, seed, 1).unwrap();
        let mut w2 = w1.clone();
        let log = excursion::record_excursions(&mut w1, &a, horizon).unwrap();
        let traj = oracle::record_trajectory(&mut w2, horizon);
        let (rho, rho_tilde) = oracle::replay_stopping_times(&traj, &center, r, big_r);
        prop_assert_eq!(&log.rho, &rho);
        prop_assert_eq!(&log.rho_tilde, &rho_tilde);
        for i in 0..rho_tilde.len() {
            prop_assert!(rho[i] <= rho_tilde[i]);
            if i + 1 < rho.len() {
                prop_assert!(rho_tilde[i] < rho[i + 1]);
            }
            let exit = cfg.point(traj.positions[rho_tilde[i] as usize]);
            prop_assert!(!lattice::within_radius(cfg.dist2(&exit, &center), big_r));
            prop_assert_eq!(&log.exit_points[i], &exit);
        }
        for t in [0, horizon / 4, horizon / 2, horizon] {
            prop_assert_eq!(
                excursion::count_excursions(&log, t),
                ExcursionCount::Determined(oracle::replay_count(&traj, &center, r, big_r, t))
            );
        }
    }

    #[test]
    fn hit_field_is_harmonic_and_monotone(target in sites(6, 4), avoid in sites(6, 6), extra in 0usize..216) {
        let cfg = LatticeConfig::torus(3, 6).unwrap();
        let vol = cfg.volume();
        let avoid: Vec<usize> = avoid.into_iter().filter(|s| !target.contains(s)).collect();
        prop_assume!(!target.is_empty());
        let t = PointSet::sparse(vol, target.clone());
        let a = PointSet::sparse(vol, avoid.clone());
        let h = hitting::hit_prob_field(&cfg, &t, &a).unwrap();
        for s in 0..vol {
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&h[s]));
            if !t.contains(s) && !a.contains(s) {
                let avg: f64 = cfg.neighbors(s).iter().map(|&v| h[v]).sum::<f64>() / 6.0;
                prop_assert!((avg - h[s]).abs() < 1e-9);
            }
        }
        prop_assume!(!a.contains(extra));
        let mut bigger = target;
        bigger.push(extra);
        let h2 = hitting::hit_prob_field(&cfg, &PointSet::sparse(vol, bigger), &a).unwrap();
        for s in 0..vol {
            prop_assert!(h2[s] >= h[s] - 1e-9);
        }
    }

    #[test]
    fn surrogate_parameter_algebra(alpha in 0.5f64..0.99, t_hat in 10.0f64..1e4, m_hat in 0.001f64..0.5) {
        let cfg = LatticeConfig::torus(3, 64).unwrap();
        let inputs = SurrogateInputs { alpha, epsilon: 0.05, psi: 0.05, radii: Some((3.0, 12.0)) };
        let Ok(p) = uncovered::compute_params(&cfg, &inputs, &constants(), t_hat, m_hat) else {
            return Ok(());
        };
        let log_vol = 3.0 * 64f64.ln();
        prop_assert!((p.m * p.t_star - log_vol * p.t).abs() <= 1e-9 * log_vol * p.t);
        let a = p.budget as f64;
        prop_assert!(a >= 1.0);
        prop_assert!((1.0 + p.delta) * a * p.t <= alpha * p.t_star * (1.0 + 1e-12));
        prop_assert!(alpha * p.t_star < (1.0 + p.delta) * (a + 1.0) * p.t);
    }

    #[test]
    fn chen_stein_bound_holds_and_is_monotone(spec in (2usize..6).prop_flat_map(tiny_process), seed in any::<u64>(), bump in 0.0f64..0.2) {
        let k = spec.k;
        let mut rng = rng::stream(seed, 0);
        let nb = chenstein::random_neighborhoods(k, &mut rng);
        let input = spec.exact_input(nb);
        let b = chenstein::bounds(&input).unwrap();
        let tv = chenstein::exact_tv(&spec, &product(&input.marginals)).unwrap();
        prop_assert!(tv <= b.tv_bound + 1e-12);

        let mut more: ChenSteinInput = input.clone();
        for pm in &mut more.pair_moments {
            let cap = input.marginals[pm.s].min(input.marginals[pm.t]);
            pm.value = (pm.value + bump).min(cap);
        }
        for b3 in &mut more.b3_terms {
            *b3 += bump;
        }
        prop_assert!(chenstein::bounds(&more).unwrap().tv_bound >= b.tv_bound);
    }

    #[test]
    fn exact_tv_is_a_metric(p in proptest::collection::vec(0.0f64..1.0, 3), q in proptest::collection::vec(0.0f64..1.0, 3), spec in tiny_process(3)) {
        let (a, b) = (product(&p), product(&q));
        let tv_sa = chenstein::exact_tv(&spec, &a).unwrap();
        let tv_sb = chenstein::exact_tv(&spec, &b).unwrap();
        // Distance between two product laws, through a table of one of them.
        let table_a = oracle::JointTable::independent(&p);
        let spec_a = TinyProcessSpec::new(3, table_a.weights).unwrap();
        let tv_ab = chenstein::exact_tv(&spec_a, &b).unwrap();
        let table_b = oracle::JointTable::independent(&q);
        let tv_ba = chenstein::exact_tv(&TinyProcessSpec::new(3, table_b.weights).unwrap(), &a).unwrap();
        prop_assert!((tv_ab - tv_ba).abs() < 1e-12);
        prop_assert!(tv_sb <= tv_sa + tv_ab + 1e-12);
        prop_assert!(chenstein::exact_tv(&spec_a, &a).unwrap() < 1e-12);
    }

    #[test]
    fn pair_moments_are_bounded(spec in (2usize..6).prop_flat_map(tiny_process)) {
        let nb: Vec<Vec<usize>> = (0..spec.k).map(|_| (0..spec.k).collect()).collect();
        let input = spec.exact_input(nb);
        for PairMoment { s, t, value } in &input.pair_moments {
            prop_assert!(*value <= input.marginals[*s].min(input.marginals[*t]) + 1e-12);
        }
        prop_assert!(input.validate().is_ok());
    }

    #[test]
    fn adjacent_pairs_translation_invariant(set in sites(8, 60), v in proptest::collection::vec(-10i64..10, 3)) {
        let cfg = LatticeConfig::torus(3, 8).unwrap();
        let shifted: Vec<usize> = set
            .iter()
            .map(|&s| cfg.translate(&cfg.point(s), &v).unwrap())
            .map(|p| cfg.index(&p))
            .collect();
        let a = PointSet::sparse(cfg.volume(), set);
        let b = PointSet::sparse(cfg.volume(), shifted);
        prop_assert_eq!(stats::adjacent_pairs(&a, &cfg), stats::adjacent_pairs(&b, &cfg));
    }

    #[test]
    fn discrimination_is_symmetric(a in proptest::collection::vec(0u32..50, 30..60), b in proptest::collection::vec(0u32..50, 30..60)) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let ab = stats::discriminate_values(Statistic::AdjacentPairs, &a, &b).unwrap();
        let ba = stats::discriminate_values(Statistic::AdjacentPairs, &b, &a).unwrap();
        prop_assert!((ab.rank_test.p_value - ba.rank_test.p_value).abs() < 1e-12);
        prop_assert!((ab.rank_test.z + ba.rank_test.z).abs() < 1e-9);
        prop_assert!((ab.ks_distance - ba.ks_distance).abs() < 1e-12);
        prop_assert!((ab.tv_lower_bound - ba.tv_lower_bound).abs() < 1e-12);
    }

    #[test]
    fn config_hash_ignores_output_dir(seed in any::<u64>(), replicas in 0u64..1000, alpha in 0.5f64..0.99, dir in "[a-z]{1,8}") {
        let mut c = ExperimentConfig::new(ExperimentKind::Surrogate, 3, 16);
        c.seed = seed;
        c.replicas = replicas;
        c.alpha = Some(alpha);
        let h = c.hash();
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        prop_assert_eq!(&back, &c);
        c.output_dir = Some(dir.into());
        prop_assert_eq!(c.hash(), h.clone());
        c.seed = seed.wrapping_add(1);
        prop_assert_ne!(c.hash(), h);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn markov_decomposition_identities(x in proptest::collection::vec(4i64..7, 3), radius in 1.0f64..2.5) {
        let spec = GffSpec::new(3, 10).unwrap();
        let dec = gff::markov_decompose(&spec, &Point::new(x), radius).unwrap();
        prop_assert!(dec.harmonic.iter().all(|&p| p >= 0.0));
        prop_assert!((dec.harmonic.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        prop_assert!((dec.v_phi2 - dec.v_h2 - dec.v_xi2).abs() < 1e-8);
        prop_assert!(dec.v_h2 > 0.0 && dec.v_xi2 >= 0.0);
    }

    #[test]
    fn covariance_symmetric(a in proptest::collection::vec(1i64..6, 3), b in proptest::collection::vec(1i64..6, 3)) {
        let spec = GffSpec::new(3, 6).unwrap();
        let (x, y) = (Point::new(a), Point::new(b));
        let cxy = spec.covariance(&x, &y).unwrap();
        let cyx = spec.covariance(&y, &x).unwrap();
        prop_assert!((cxy - cyx).abs() < 1e-12);
        prop_assert!(cxy > 0.0);
        prop_assert!(cxy * cxy <= spec.variance(&x).unwrap() * spec.variance(&y).unwrap() + 1e-12);
    }
}
