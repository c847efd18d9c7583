use std::collections::BTreeMap;

use agmarl_core::agent::{actor_forward, critic_forward, soft_update, ActionScores, ActorNet, CriticNet};
use agmarl_core::analysis::analyze_frame;
use agmarl_core::autodiff::{forward_dense, Activation, DenseLayer, ParamStore, Tensor};
use agmarl_core::gnn::{Observation, OBSERVATION};
use agmarl_core::lexico::SelectionConfig;
use agmarl_core::model::Model;
use agmarl_core::scenario::{run_policy, scenario_one, scenario_two, Controller, MetricsFrame, SAMPLE_INTERVAL};
use agmarl_core::sim::{AdmissionCap, EnvConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn observation() -> impl Strategy<Value = Observation> {
    proptest::collection::vec(-50.0f64..50.0, OBSERVATION).prop_map(|v| Observation(v.try_into().unwrap()))
}

fn action() -> impl Strategy<Value = ActionScores> {
    (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0).prop_map(|(a, b, c)| ActionScores([a, b, c]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn actor_scores_stay_open_unit(seed in 0u64..1000, o in observation()) {
        let actor = ActorNet::new(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = actor_forward(&actor, &o).unwrap();
        prop_assert!(a.0.iter().all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn critic_ignores_order_of_others(
        seed in 0u64..1000,
        own in (observation(), action()),
        others in proptest::collection::vec((observation(), action()), 1..6),
        rot in 0usize..6,
    ) {
        let critic = CriticNet::new(&mut ChaCha8Rng::seed_from_u64(seed));
        let q = critic_forward(&critic, (&own.0, &own.1), &others).unwrap();
        let mut perm = others.clone();
        perm.rotate_left(rot % others.len());
        perm.reverse();
        let qp = critic_forward(&critic, (&own.0, &own.1), &perm).unwrap();
        prop_assert!((q - qp).abs() < 1e-9, "{q} vs {qp}");
    }

    #[test]
    fn soft_update_contracts_by_one_minus_tau(
        online in proptest::collection::vec(-10.0f64..10.0, 12),
        target in proptest::collection::vec(-10.0f64..10.0, 12),
        tau in 0.001f64..=1.0,
    ) {
        let store = |v: &[f64]| {
            let mut s = ParamStore::new();
            s.add("w", Tensor::matrix(3, 4, v.to_vec()).unwrap());
            s
        };
        let on = store(&online);
        let mut tg = store(&target);
        soft_update(&on, &mut tg, tau).unwrap();
        let id = on.id("w").unwrap();
        for ((o, t0), t1) in online.iter().zip(&target).zip(tg.value(id).data()) {
            let expected = (1.0 - tau) * (t0 - o).abs();
            prop_assert!(((t1 - o).abs() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_layer_stays_open_unit(seed in 0u64..1000, x in proptest::collection::vec(-20.0f64..20.0, 7)) {
        let mut store = ParamStore::new();
        let layer = DenseLayer::init(&mut store, "l", 7, 5, Activation::Sigmoid, &mut ChaCha8Rng::seed_from_u64(seed));
        let y = forward_dense(&layer, &store, &Tensor::row(x)).unwrap();
        prop_assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

fn frames() -> Vec<MetricsFrame> {
    let env = EnvConfig::default();
    let model = Model::new(env.cluster.max_nodes(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let selection = SelectionConfig::default();
    let cap = AdmissionCap::default();
    let mut out = Vec::new();
    for script in [scenario_one(), scenario_two()] {
        out.push(run_policy(&script, &Controller::Baseline, &env, 1).unwrap());
        out.push(run_policy(&script, &Controller::Agmarl { model: &model, selection: &selection, cap: &cap }, &env, 1).unwrap());
    }
    out
}

#[test]
fn scenario_runs_keep_their_bookkeeping() {
    let env = EnvConfig::default();
    let (lo, hi) = (env.cluster.baseline_pool.count + env.cluster.stress_pool.min, env.cluster.max_nodes());
    for f in frames() {
        let tag = format!("{}/{}", f.scenario, f.policy.name());
        let mut cost = 0.0;
        for (k, s) in f.samples.iter().enumerate() {
            assert_eq!(s.time, k as f64 * SAMPLE_INTERVAL, "{tag}: sample times");
            assert!((lo..=hi).contains(&s.nodes.len()), "{tag}: {} nodes at {}", s.nodes.len(), s.time);
            if k > 0 {
                cost += SAMPLE_INTERVAL / 3600.0 * s.nodes.iter().map(|n| n.cost).sum::<f64>();
            }
            assert!((s.cost_accrued - cost).abs() < 1e-9, "{tag}: cost at {}", s.time);
            for n in &s.nodes {
                assert!(n.cpu_requested <= n.cpu_capacity && n.mem_requested <= n.mem_capacity, "{tag}: overcommit");
            }
            assert_eq!(s.running, s.nodes.iter().map(|n| n.pod_count() as usize).sum::<usize>());
        }

        let b = analyze_frame(&f).unwrap();
        let last = f.samples.last().unwrap();
        let mut per_app: BTreeMap<String, u32> = BTreeMap::new();
        for n in &last.nodes {
            for (app, c) in &n.pods {
                *per_app.entry(app.clone()).or_default() += c;
            }
        }
        for (app, row) in &b.distribution {
            assert_eq!(row.values().sum::<u32>(), per_app.get(app).copied().unwrap_or(0), "{tag}: {app} row sum");
        }
        let m = &b.correlation;
        for i in 0..m.columns.len() {
            for j in 0..m.columns.len() {
                assert_eq!(m.values[i][j], m.values[j][i]);
            }
            assert!(m.values[i][i].is_none_or(|v| v == 1.0));
        }
    }
}
