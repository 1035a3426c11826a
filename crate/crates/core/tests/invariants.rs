use proptest::prelude::*;

use vtwin_privacy::allocator::{
    equal_allocation, optimize_exact, optimize_ga, AllocationProblem, GaConfig, UtilityParams, VmuDemand,
};
use vtwin_privacy::config::{ChangeMode, ScenarioConfig, Solver};
use vtwin_privacy::demand::DemandModel;
use vtwin_privacy::entropy::EntropyParams;
use vtwin_privacy::protocol::{EntityKind, ProtocolConfig, PseudonymStatus, PseudonymSystem, RsuId};
use vtwin_privacy::sim::simulate;

fn entropy_params() -> impl Strategy<Value = EntropyParams> {
    (0.5f64..4.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..2.0, 0.01f64..1.0).prop_map(
        |(h_max, h0_frac, floor_frac, alpha, p)| {
            let h_0 = h0_frac * h_max;
            let reset = h_max - p * h_0;
            EntropyParams::new(h_max, h_0, floor_frac * reset, alpha, p).unwrap()
        },
    )
}

fn problem() -> impl Strategy<Value = AllocationProblem> {
    (
        proptest::collection::vec((0.05f64..3.0, 0.5f64..3.0, 0.0f64..0.5, 0.0f64..1.0, 0.1f64..1.5), 1..5),
        0u64..120,
    )
        .prop_map(|(vmus, budget)| {
            let vmus = vmus
                .into_iter()
                .map(|(f, beta, h, r, hbar)| VmuDemand {
                    model: DemandModel::new(f, 20.0).unwrap(),
                    params: UtilityParams::new(beta, h, r, hbar).unwrap(),
                })
                .collect();
            AllocationProblem::new(vmus, budget).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn average_entropy_is_bounded_and_non_increasing(params in entropy_params(), tau in 1e-3f64..20.0, extra in 0.0f64..5.0) {
        let a = params.average_entropy(tau).unwrap();
        let b = params.average_entropy(tau + extra).unwrap();
        prop_assert!(a >= params.h_min() - 1e-12 && a <= params.reset_level() + 1e-12);
        prop_assert!(b <= a + 1e-12);
    }

    #[test]
    fn exact_plan_is_feasible_and_beats_baselines(p in problem(), seed in any::<u64>()) {
        let exact = optimize_exact(&p);
        prop_assert!(exact.is_feasible(&p));
        let best = p.objective(&exact);
        let tol = 1e-9 * best.abs().max(1.0);
        prop_assert!(best >= p.objective(&equal_allocation(&p)) - tol);
        let ga = GaConfig { generations: 30, ..GaConfig::default() };
        let plan = optimize_ga(&p, &ga, seed).unwrap();
        prop_assert!(plan.is_feasible(&p));
        prop_assert!(p.objective(&plan) <= best + tol);
    }

    #[test]
    fn shuffle_returns_the_same_pseudonyms(n in 1usize..30, seed in any::<u64>()) {
        let mut s = PseudonymSystem::new(ProtocolConfig::default(), 1, seed);
        let pair = s.add_pair(RsuId(0), 0.0, 1.0);
        let vmu = s.pair(pair).vmu;
        s.mint(RsuId(0), EntityKind::Vmu, n).unwrap();
        s.request_pseudonym_set(vmu, n, RsuId(0), 0.0).unwrap();
        for k in 0..n {
            s.activate_next(vmu, k as f64).unwrap();
        }
        let before: Vec<_> = s.entity(vmu).unwrap().set.ids().collect();
        let mut used = s.take_used(vmu).unwrap();
        prop_assert_eq!(used.len(), n - 1);
        s.return_and_shuffle(RsuId(0), EntityKind::Vmu, &mut used, n as f64, seed).unwrap();
        prop_assert!(used.is_empty());
        let pool = s.rsu(RsuId(0)).unwrap().pool(EntityKind::Vmu);
        prop_assert!(pool.iter().all(|p| p.status == PseudonymStatus::Pooled));
        let mut pooled: Vec<_> = pool.iter().map(|p| p.id).collect();
        pooled.push(s.entity(vmu).unwrap().active.unwrap());
        pooled.sort();
        let mut expected = before;
        expected.sort();
        prop_assert_eq!(pooled, expected);
        prop_assert_eq!(s.audit().unwrap().total() as u64, s.minted());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn small_runs_keep_every_invariant(
        seed in any::<u64>(),
        freqs in proptest::collection::vec(0.2f64..2.5, 2..6),
        rsus in 1u32..4,
        sync in any::<bool>(),
    ) {
        let mut c = ScenarioConfig::new(6.0, 20.0, &freqs);
        c.seed = seed;
        c.rsu_count = rsus;
        c.solver = Solver::Exact;
        c.mode = if sync { ChangeMode::Sync } else { ChangeMode::Async };
        c.fill_defaults();
        let out = simulate(&c).unwrap();
        let inv = &out.report.invariants;
        prop_assert!(inv.served_matches_min);
        prop_assert_eq!(inv.final_counts.total() as u64, inv.minted);
        prop_assert_eq!(inv.migration_mismatches, 0);
        prop_assert!(out.report.vmus.iter().map(|v| v.allocation).sum::<u64>() <= out.report.budget);
        for e in out.system.entities() {
            prop_assert!(out.system.check_one_active(e.id).is_ok());
        }
        if sync {
            prop_assert!(out.system.pairs().iter().all(|p| p.vmu_epochs == p.vt_epochs));
        }
    }
}
