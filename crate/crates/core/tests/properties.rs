use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sipcond::bdchain::{self, BDSpec, Variant};
use sipcond::cbm::{self, CBMParams, CBMState};
use sipcond::condensate::{classify, label_update, neighbors, project, Classification, CondensedView, LabeledState};
use sipcond::engine::{self, step, EventCounter, NoObserver};
use sipcond::exact::state_index::StateIndex;
use sipcond::exact::{build_generator, reversibility_defect, stationary_distribution, stationarity_residual_of};
use sipcond::model::{jump_rate, log_mu, Configuration, Direction, ModelParams};
use sipcond::{par, stats};

fn occupancy() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0u32..6, 3..12).prop_filter("non-empty", |v| v.iter().sum::<u32>() > 0)
}

fn params_for(eta: &Configuration, d: f64, k: usize) -> ModelParams {
    ModelParams::new(eta.total(), eta.len(), d, k).unwrap()
}

/// A condensed configuration: `ℓ` condensates separated by gaps of at least 2.
fn condensed() -> impl Strategy<Value = (ModelParams, CondensedView)> {
    (1usize..=3)
        .prop_flat_map(|ell| {
            (
                prop::collection::vec(2usize..6, ell),
                prop::collection::vec(1u32..6, ell),
                0usize..20,
            )
        })
        .prop_map(|(mut gaps, masses, offset)| {
            if gaps.len() == 1 {
                gaps[0] += 2;
            }
            let len: usize = gaps.iter().sum();
            let mut x = offset % len;
            let mut condensates = Vec::new();
            for (g, m) in gaps.iter().zip(&masses) {
                condensates.push((x, *m));
                x = (x + g) % len;
            }
            let n = masses.iter().sum();
            let params = ModelParams::new(n, len, 1e-3, masses.len()).unwrap();
            let view = CondensedView::from_condensates(&params, &condensates).unwrap();
            (params, view)
        })
}

proptest! {
    #[test]
    fn detailed_balance_per_jump(occ in occupancy(), site in 0usize..12, forward in any::<bool>(), log_d in -8.0f64..0.0) {
        let eta = Configuration::new(occ).unwrap();
        let site = site % eta.len();
        prop_assume!(eta.get(site) > 0);
        let params = params_for(&eta, 10f64.powf(log_d), 1);
        let dir = if forward { Direction::Plus } else { Direction::Minus };
        let next = eta.apply_jump(site, dir).unwrap();
        let to = dir.step(site, eta.len());
        let lhs = log_mu(&params, &eta) + jump_rate(&params, &eta, site, dir).ln();
        let rhs = log_mu(&params, &next) + jump_rate(&params, &next, to, dir.reverse()).ln();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn step_conserves_mass_and_moves_one_particle(occ in occupancy(), seed in any::<u64>()) {
        let eta = Configuration::new(occ).unwrap();
        let params = params_for(&eta, 1e-2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = step(&params, &eta, &mut rng).unwrap();
        prop_assert!(out.dt > 0.0 && out.dt.is_finite());
        prop_assert_eq!(out.next.total(), eta.total());
        prop_assert_eq!(out.next.len(), eta.len());
        let len = eta.len();
        prop_assert!((out.from + 1) % len == out.to || (out.to + 1) % len == out.from);
        prop_assert!(eta.get(out.from) > 0);
        prop_assert_eq!(out.next.get(out.from) + 1, eta.get(out.from));
        prop_assert_eq!(out.next.get(out.to), eta.get(out.to) + 1);

        let mut again = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(step(&params, &eta, &mut again).unwrap(), out);
    }

    #[test]
    fn replicas_match_direct_runs(occ in occupancy(), seed in any::<u64>()) {
        let eta = Configuration::new(occ).unwrap();
        let params = params_for(&eta, 1e-1, 1);
        let plans = engine::plans(seed, 4, 0.05);
        let outputs = engine::run_replicas(&params, &eta, &plans, |_| EventCounter::default(), |o| o.events);
        for (plan, output) in plans.iter().zip(outputs) {
            prop_assert_eq!(output.replica_index, plan.replica_index);
            let (got, counted) = output.result.unwrap();
            prop_assert_eq!(counted, got.events);
            let mut rng = plan.rng();
            let direct = engine::run(&params, &eta, plan.t_end, &mut rng, &mut NoObserver).unwrap();
            prop_assert_eq!(got.events, direct.events);
            prop_assert_eq!(got.final_state, direct.final_state);
        }
    }

    #[test]
    fn classify_matches_the_constraints(occ in occupancy(), k in 1usize..4) {
        let eta = Configuration::new(occ).unwrap();
        let params = params_for(&eta, 1e-3, k);
        let sites: Vec<usize> = eta.occupied_sites().collect();
        let len = eta.len();
        let isolated = sites.len() == 1 || sites.iter().enumerate().all(|(i, &x)| {
            let y = sites[(i + 1) % sites.len()];
            let g = (y + len - x) % len;
            g.min(len - g) >= 2
        });
        match classify(&params, &eta) {
            Classification::Condensed(view) => {
                prop_assert!(sites.len() <= k && isolated);
                prop_assert_eq!(view.to_configuration(), eta);
            }
            Classification::NotCondensed => prop_assert!(sites.len() > k || !isolated),
        }
    }

    #[test]
    fn label_walk_keeps_invariants((params, view) in condensed(), choices in prop::collection::vec(any::<u32>(), 1..12)) {
        let start = LabeledState::from_view(&view);
        let len = params.l();
        let mut labeled = start.clone();
        let mut travelled = vec![0i64; labeled.labels()];
        for c in choices {
            let current = labeled.view();
            let options = neighbors(&params, &current);
            prop_assert!(!options.is_empty());
            let next = &options[c as usize % options.len()];
            let Classification::Condensed(next_view) = classify(&params, next) else {
                return Err(TestCaseError::fail("neighbour outside E_N"));
            };
            let update = label_update(&labeled, &next_view).unwrap();
            prop_assert_eq!(&project(&update.state), next);
            prop_assert_eq!(update.state.total_mass(), params.n());
            prop_assert_eq!(update.state.labels(), labeled.labels());
            prop_assert!(update.state.cluster_count() <= labeled.cluster_count());
            prop_assert!(update.shifts.iter().all(|s| s.abs() <= 2));
            let revalidated = LabeledState::new(len, update.state.positions().to_vec(), update.state.masses().to_vec());
            prop_assert_eq!(revalidated.as_ref(), Ok(&update.state));
            for (t, s) in travelled.iter_mut().zip(&update.shifts) {
                *t += s;
            }
            labeled = update.state;
        }
        for ((p0, p1), t) in start.positions().iter().zip(labeled.positions()).zip(&travelled) {
            prop_assert_eq!((*p0 as i64 + t).rem_euclid(len as i64) as usize, *p1);
        }
    }

    #[test]
    fn cbm_steps_keep_points_on_the_circle(u0 in prop::collection::vec(0.0f64..1.0, 1..6), seed in any::<u64>()) {
        let params = CBMParams::new(u0.len(), 1.0, 1e-3, true).unwrap();
        let mut state = CBMState::new(&u0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut merges = 0;
        for _ in 0..200 {
            let before = state.cluster_count();
            let events = cbm::step_in_place(&params, &mut state, &mut rng);
            merges += events.len();
            prop_assert_eq!(state.cluster_count() + events.len(), before);
            prop_assert_eq!(state.points(), u0.len());
            let positions = state.positions();
            prop_assert!(positions.iter().all(|x| (0.0..1.0).contains(x)));
            for members in state.clusters() {
                let p = positions[members[0]];
                prop_assert!(members.iter().all(|&m| positions[m] == p));
            }
            for (x, (u, disp)) in positions.iter().zip(u0.iter().zip(state.displacements())) {
                prop_assert!(((u + disp).rem_euclid(1.0) - x).abs() < 1e-9 || ((u + disp).rem_euclid(1.0) - x).abs() > 1.0 - 1e-9);
            }
        }
        prop_assert_eq!(merges + state.cluster_count(), u0.len());
    }

    #[test]
    fn bd_absorption_is_monotone(m in 2u64..60, log_d in -8.0f64..-0.5, edge in any::<bool>()) {
        let variant = if edge { Variant::Edge } else { Variant::Inner };
        let spec = BDSpec::new(m, 1.0, 10f64.powf(log_d), variant).unwrap();
        let mut last = 0.0;
        for i in 0..=m {
            let p = bdchain::absorb_prob(&spec, i).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!(p >= last - 1e-15);
            last = p;
            let h = bdchain::expected_hitting(&spec, i).unwrap();
            let naive = bdchain::expected_hitting_naive(&spec, i).unwrap();
            prop_assert!(h >= 0.0);
            prop_assert!((h - naive).abs() <= 1e-8 * naive.max(1e-12), "i={i}: {h} vs {naive}");
        }
        prop_assert_eq!(last, 1.0);
    }

    #[test]
    fn ks_is_a_distance(a in prop::collection::vec(-5.0f64..5.0, 1..40), b in prop::collection::vec(-5.0f64..5.0, 1..40)) {
        let ab = stats::ks_two_sample(&a, &b).unwrap();
        let ba = stats::ks_two_sample(&b, &a).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(stats::ks_two_sample(&a, &a).unwrap(), 0.0);
        let kuiper = stats::kuiper_two_sample(&a, &b).unwrap();
        prop_assert!(kuiper >= ab - 1e-12 && kuiper <= 1.0 + 1e-12);
    }

    #[test]
    fn parallel_map_preserves_order(n in 0usize..200, salt in any::<u64>()) {
        let indices = par::range(n);
        let f = |i: u64| sipcond::rng::replica_seed(salt, i);
        prop_assert_eq!(par::map_indices(&indices, f), par::map_indices_sequential(&indices, f));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn state_index_is_a_bijection(n in 1u32..6, len in 3usize..6) {
        let index = StateIndex::new(n, len).unwrap();
        for rank in 0..index.size() {
            let eta = index.decode(rank);
            prop_assert_eq!(eta.total(), n);
            prop_assert_eq!(index.encode(&eta), Some(rank));
        }
    }

    #[test]
    fn small_generators_are_reversible(n in 1u32..6, len in 3usize..6, log_d in -7.0f64..0.0) {
        let params = ModelParams::new(n, len, 10f64.powf(log_d), 1).unwrap();
        let gen = build_generator(&params).unwrap();
        let mu = stationary_distribution(&params, &gen.index);
        prop_assert!((mu.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(reversibility_defect(&gen, &mu) < 1e-10);
        prop_assert!(stationarity_residual_of(&gen, &mu) < 1e-10);
    }
}
