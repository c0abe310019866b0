use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rht::env::{best_at, oracle_best, ContextDistribution, RewardFamily};
use rht::harness::{
    baseline, run_experiment, run_replica, EnvSpec, ExperimentSpec, Layout, NamedPolicy, PolicySpec, Simulation,
    SliceSpec, TreeSpec,
};
use rht::items::{CourseItem, ItemStore};
use rht::partition::PartitionConfig;

fn two_item_env() -> EnvSpec {
    let mut env = EnvSpec {
        family: RewardFamily::ContextFree,
        sigma: 0.0,
        d_c: 1,
        l_x: 0.0,
        sharpness: 1.0,
        ..EnvSpec::default()
    };
    let g = env.model().unwrap().offset()[0];
    let worse = if g >= 0.5 { g - 0.5 } else { g + 0.5 };
    env.item_list = Some(vec![
        CourseItem::new(1, vec![g + 0.1], 1).unwrap(),
        CourseItem::new(2, vec![worse], 1).unwrap(),
    ]);
    env
}

#[test]
fn single_item_has_no_regret() {
    let env = EnvSpec {
        items: 1,
        ..EnvSpec::default()
    };
    for p in ["rht-full", "uniform-random", "dsrht-z0"] {
        let out = run_experiment(&baseline(p).unwrap(), &env, &ExperimentSpec::new(500, vec![1, 2])).unwrap();
        assert!(out.summary.checkpoints.iter().all(|r| r.cum_regret == 0.0), "{p}");
    }
}

#[test]
fn exploit_only_pays_for_the_worse_item_once() {
    let env = two_item_env();
    let greedy = NamedPolicy::new(
        "greedy",
        PolicySpec::Tree(TreeSpec {
            k1: 0.0,
            k2: 0.0,
            ..TreeSpec::default()
        }),
    );
    let mut exact = 0;
    for seed in 0..20 {
        let mut sim = Simulation::new(&greedy, &env, &ExperimentSpec::new(60, vec![seed]), seed).unwrap();
        let mut worse = 0;
        let mut after_exploration = 0.0;
        for t in 1..=60 {
            let rec = sim.step().unwrap();
            worse += (rec.item == 2) as u32;
            if t == 3 {
                after_exploration = rec.cum_regret;
            }
        }
        // Round one draws from the root region, rounds two and three visit
        // each child once; from then on the better child always wins.
        assert!((1..=2).contains(&worse));
        assert!((sim.cum_regret() - 0.4 * worse as f64).abs() < 1e-12);
        assert_eq!(sim.cum_regret(), after_exploration);
        if worse == 1 {
            exact += 1;
        }
    }
    assert!(exact > 0);
}

#[test]
fn uniform_policy_regret_is_half_the_gap() {
    let env = two_item_env();
    let out = run_experiment(&baseline("uniform-random").unwrap(), &env, &ExperimentSpec::new(40_000, vec![3])).unwrap();
    let last = out.summary.checkpoints.last().unwrap();
    assert!((last.avg_regret - 0.2).abs() < 0.005, "{}", last.avg_regret);
}

#[test]
fn accuracy_plus_average_regret_is_average_oracle() {
    let env = EnvSpec {
        sigma: 0.0,
        ..EnvSpec::default()
    };
    let exp = ExperimentSpec::new(3000, vec![5]);
    for p in ["rht-full", "rht-nocontext", "uniform-random"] {
        let mut sim = Simulation::new(&baseline(p).unwrap(), &env, &exp, 5).unwrap();
        let mut last = 0.0;
        for _ in 0..3000 {
            let rec = sim.step().unwrap();
            assert!(rec.regret >= -1e-12 && rec.cum_regret >= last);
            last = rec.cum_regret;
        }
        let t = sim.round() as f64;
        assert!((sim.accuracy() + sim.cum_regret() / t - sim.average_oracle()).abs() < 1e-9, "{p}");
        assert!((0.0..=1.0).contains(&sim.accuracy()));
    }
}

#[test]
fn oracle_matches_an_independent_scan() {
    let env = EnvSpec {
        items: 10_000,
        ..EnvSpec::default()
    };
    let model = env.model().unwrap();
    let mut store = ItemStore::new(env.d_c).unwrap();
    let items = env.universe();
    for it in items.iter().cloned() {
        store.insert(it, None).unwrap();
    }
    let part = PartitionConfig::new(2, 3, 1.0, 1.0).unwrap();
    let (a, sigma) = (model.sharpness(), model.sigma());
    for cell in part.cells() {
        let x = part.cell_center(&cell);
        let g: Vec<f64> = (0..env.d_c)
            .map(|j| {
                let mut v = model.offset()[j];
                for k in 0..env.d_x {
                    v += model.slope()[j * env.d_x + k] * (x.coords()[k] - 0.5);
                }
                v.clamp(0.0, 1.0)
            })
            .collect();
        let mut best = (0u64, f64::NEG_INFINITY);
        for it in &items {
            let d = it.features.iter().zip(&g).map(|(c, q)| (c - q).powi(2)).sum::<f64>().sqrt();
            let f = (1.0 - 2.0 * sigma) * (1.0 - (a * d).min(1.0)) + sigma;
            if f > best.1 {
                best = (it.id, f);
            }
        }
        let (key, v) = oracle_best(&model, &part, &cell, &store).unwrap();
        assert_eq!(store.get(key).id, best.0);
        assert!((v - best.1).abs() < 1e-12);
    }
}

#[test]
fn regret_is_measured_at_the_reference_center() {
    let env = EnvSpec::default();
    let exp = ExperimentSpec::new(400, vec![2]);
    let mut sim = Simulation::new(&baseline("rht-full").unwrap(), &env, &exp, 2).unwrap();
    for _ in 0..400 {
        let rec = sim.step().unwrap();
        let part = sim.reference();
        let center = part.cell_center(&rec.cell);
        let key = sim.store().key_of(rec.item).unwrap();
        let f = sim.model().mean_reward_raw(center.coords(), &sim.store().get(key).features);
        let (_, o) = best_at(sim.model(), center.coords(), sim.store()).unwrap();
        assert_eq!(rec.oracle, o);
        assert!((rec.regret - (o - f)).abs() < 1e-15);
        assert!((0.0..=1.0).contains(&rec.reward));
    }
}

#[test]
fn runs_are_deterministic_across_thread_counts() {
    let env = EnvSpec {
        arrival_rate: 5.0,
        ..EnvSpec::default()
    };
    let mut exp = ExperimentSpec::new(2000, vec![1, 2, 3]);
    exp.keep_records = true;
    let p = baseline("dsrht-opt").unwrap();
    let a = run_experiment(&p, &env, &exp).unwrap();
    exp.jobs = 3;
    let b = run_experiment(&p, &env, &exp).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resumed_simulation_is_bit_identical() {
    let env = EnvSpec {
        arrival_rate: 10.0,
        context: ContextDistribution::MixtureOfCells { grid: 4, components: 3 },
        ..EnvSpec::default()
    };
    let exp = ExperimentSpec::new(3000, vec![4]);
    for name in ["rht-full", "dsrht-opt", "uniform-random"] {
        let p = baseline(name).unwrap();
        let mut straight = Simulation::new(&p, &env, &exp, 4).unwrap();
        let mut first = Simulation::new(&p, &env, &exp, 4).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        for _ in 0..3000 {
            a.push(straight.step().unwrap());
        }
        for _ in 0..1234 {
            b.push(first.step().unwrap());
        }
        let bytes = first.to_checkpoint().unwrap();
        drop(first);
        let mut resumed = Simulation::from_checkpoint(&bytes).unwrap();
        for _ in 1234..3000 {
            b.push(resumed.step().unwrap());
        }
        assert_eq!(a, b, "{name}");
        if let (Some(x), Some(y)) = (straight.engine(), resumed.engine()) {
            assert_eq!(x.statistics_digest(), y.statistics_digest());
            assert!(y.check_invariants().is_ok());
        }
    }
}

#[test]
fn engine_checkpoint_round_trip() {
    let env = EnvSpec::default();
    let exp = ExperimentSpec::new(1500, vec![8]);
    let mut sim = Simulation::new(&baseline("rht-full").unwrap(), &env, &exp, 8).unwrap();
    for _ in 0..1500 {
        sim.step().unwrap();
    }
    let e = sim.engine().unwrap();
    let bytes = rht::checkpoint::save_engine(e).unwrap();
    let back = rht::checkpoint::load_engine(&bytes).unwrap();
    assert_eq!(back.statistics_digest(), e.statistics_digest());
    assert_eq!(back.storage(), e.storage());
    assert_eq!(back.store().key_of(17), e.store().key_of(17));
}

#[test]
fn arrivals_update_the_oracle() {
    let env = EnvSpec {
        sigma: 0.0,
        ..EnvSpec::default()
    };
    let exp = ExperimentSpec::new(1000, vec![1]);
    let mut sim = Simulation::new(&baseline("rht-full").unwrap(), &env, &exp, 1).unwrap();
    let before = sim.step().unwrap().oracle;
    // The exact ideal point of every cell center is unbeatable.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let x: Vec<f64> = (0..2).map(|_| rng.gen()).collect();
        sim.add_item(sim.model().ideal_point(&x)).unwrap();
    }
    let part = sim.reference().clone();
    for cell in part.cells() {
        sim.add_item(sim.model().ideal_point(part.cell_center(&cell).coords())).unwrap();
    }
    let mut seen_better = false;
    for _ in 0..200 {
        let rec = sim.step().unwrap();
        assert!((rec.oracle - (1.0 - 0.0)).abs() < 1e-12);
        seen_better |= rec.oracle > before;
    }
    assert!(seen_better);
}

#[test]
fn reference_partition_is_shared_by_policies() {
    let env = EnvSpec::default();
    let mut exp = ExperimentSpec::new(20_000, vec![1]);
    exp.reference_n_t = SliceSpec::Fixed(2);
    for p in ["rht-full", "rht-nocontext"] {
        let sim = Simulation::new(&baseline(p).unwrap(), &env, &exp, 1).unwrap();
        assert_eq!(sim.reference().n_t(), 2);
    }
    let r = run_replica(
        &NamedPolicy::new(
            "fine",
            PolicySpec::Tree(TreeSpec {
                n_t: SliceSpec::Fixed(5),
                layout: Layout::Tree,
                ..TreeSpec::default()
            }),
        ),
        &env,
        &ExperimentSpec::new(50, vec![1]),
        1,
    )
    .unwrap();
    assert_eq!(r.rows.last().unwrap().t, 50);
}
