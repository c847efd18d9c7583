use std::sync::Arc;

use agmarl_core::cluster::{ClusterGraph, CostClass, NodeState, StressWeights};
use agmarl_core::model::Model;
use agmarl_extender::wire::{Container, ObjectMeta, Pod, PodSpecWire, Resources};
use agmarl_extender::*;
use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");

fn model() -> Model {
    Model::new(8, &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
}

fn registry(nodes: Vec<NodeState>) -> Registry {
    Registry::new(ClusterGraph::new(nodes), &StressWeights::default()).unwrap()
}

fn four_nodes() -> Vec<NodeState> {
    let mut v: Vec<NodeState> = (0..3).map(|i| NodeState::new(i, 4000, 16384, CostClass::Standard)).collect();
    v.push(NodeState::new(3, 4000, 32768, CostClass::HighMem));
    v[1].cpu_allocated = 1500;
    v[1].mem_allocated = 3000;
    v[2].cpu_allocated = 3800;
    v
}

fn pod(cpu: &str, mem: &str) -> Pod {
    Pod {
        metadata: ObjectMeta { name: "web-0".into() },
        spec: PodSpecWire {
            containers: vec![Container {
                resources: Resources {
                    requests: [("cpu".to_string(), cpu.to_string()), ("memory".to_string(), mem.to_string())].into(),
                },
            }],
            tolerations: vec![],
        },
    }
}

fn args(p: Pod, names: &[&str]) -> ExtenderArgs {
    ExtenderArgs {
        pod: p,
        nodes: None,
        node_names: Some(names.iter().map(|s| s.to_string()).collect()),
    }
}

fn fixture(name: &str) -> String {
    std::fs::read_to_string(format!("{FIXTURES}/{name}")).unwrap().trim_end().to_string()
}

#[test]
fn golden_filter_round_trip() {
    let req = fixture("filter_request.json");
    let parsed: ExtenderArgs = serde_json::from_str(&req).unwrap();
    assert_eq!(serde_json::to_string(&parsed).unwrap(), req);
    let out = handle_filter(&parsed, &model(), &registry(four_nodes()), &ExtenderConfig::default()).unwrap();
    assert_eq!(serde_json::to_string(&out).unwrap(), fixture("filter_response.json"));
    let back: FilterResult = serde_json::from_str(&fixture("filter_response.json")).unwrap();
    assert_eq!(back, out);
}

#[test]
fn golden_prioritize_round_trip() {
    let req = fixture("prioritize_request.json");
    let parsed: ExtenderArgs = serde_json::from_str(&req).unwrap();
    assert_eq!(serde_json::to_string(&parsed).unwrap(), req);
    let out = handle_prioritize(&parsed, &model(), &registry(four_nodes()), &ExtenderConfig::default()).unwrap();
    assert_eq!(serde_json::to_string(&out).unwrap(), fixture("prioritize_response.json"));
}

#[test]
fn lowercase_upstream_keys_accepted() {
    let body = r#"{"pod":{"metadata":{"name":"p"},"spec":{"containers":[]}},"nodenames":["node-0"]}"#;
    let a: ExtenderArgs = serde_json::from_str(body).unwrap();
    assert_eq!(a.candidate_names().unwrap(), vec!["node-0"]);
}

#[test]
fn healthy_low_stress_all_survive() {
    let reg = registry((0..3).map(|i| NodeState::new(i, 4000, 16384, CostClass::Standard)).collect());
    let r = handle_filter(&args(pod("100m", "128Mi"), &["node-0", "node-1", "node-2"]), &model(), &reg, &ExtenderConfig::default()).unwrap();
    assert_eq!(r.node_names.unwrap().len(), 3);
    assert!(r.failed_nodes.is_empty());
}

#[test]
fn oversized_pod_fails_everywhere() {
    let r = handle_filter(&args(pod("64", "1Ti"), &["node-0", "node-1", "node-3"]), &model(), &registry(four_nodes()), &ExtenderConfig::default()).unwrap();
    assert!(r.node_names.unwrap().is_empty());
    assert_eq!(r.failed_nodes.len(), 3);
    assert!(r.failed_nodes.values().all(|v| v == REASON_RESOURCES));
}

#[test]
fn unknown_names_and_taints() {
    let mut nodes = four_nodes();
    nodes[0].taints.insert("failure-sim".into());
    let r = handle_filter(&args(pod("100m", "128Mi"), &["node-0", "ghost", "node-3"]), &model(), &registry(nodes), &ExtenderConfig::default()).unwrap();
    assert_eq!(r.failed_nodes["ghost"], REASON_UNKNOWN);
    assert_eq!(r.failed_nodes["node-0"], REASON_TAINT);
    assert_eq!(r.node_names.unwrap(), vec!["node-3"]);
}

#[test]
fn ft_floor_applies_only_under_high_stress() {
    let cfg = ExtenderConfig { ft_floor: 1.0, ..Default::default() };
    let names = ["node-0", "node-1", "node-2", "node-3"];
    let low = handle_filter(&args(pod("10m", "16Mi"), &names), &model(), &registry(four_nodes()), &cfg).unwrap();
    assert!(low.failed_nodes.values().all(|r| r != REASON_FT_FLOOR));
    let mut hot = four_nodes();
    for n in &mut hot {
        n.memory_pressure = true;
        n.restarts_window = 50;
        n.cpu_allocated = n.cpu_allocated.max(2500);
    }
    let reg = registry(hot);
    assert!(reg.stress() >= 0.5);
    let high = handle_filter(&args(pod("10m", "16Mi"), &names), &model(), &reg, &cfg).unwrap();
    assert!(high.failed_nodes.values().any(|r| r == REASON_FT_FLOOR));
}

#[test]
fn nodes_form_is_echoed() {
    let body = r#"{"Pod":{"metadata":{"name":"p"},"spec":{"containers":[]}},"Nodes":{"items":[{"metadata":{"name":"node-0"}},{"metadata":{"name":"zzz"}}]}}"#;
    let a: ExtenderArgs = serde_json::from_str(body).unwrap();
    let r = handle_filter(&a, &model(), &registry(four_nodes()), &ExtenderConfig::default()).unwrap();
    assert!(r.node_names.is_none());
    let kept: Vec<_> = r.nodes.unwrap().items.into_iter().map(|n| n.metadata.name).collect();
    assert_eq!(kept, vec!["node-0"]);
}

#[test]
fn prioritize_band_and_single_node() {
    let reg = registry(four_nodes());
    let one = handle_prioritize(&args(pod("1", "1Gi"), &["node-2"]), &model(), &reg, &ExtenderConfig::default()).unwrap();
    assert_eq!(one, vec![HostPriority { host: "node-2".into(), score: 10 }]);
    let all = handle_prioritize(&args(pod("1", "1Gi"), &["node-0", "node-1", "node-2", "node-3", "ghost"]), &model(), &reg, &ExtenderConfig::default()).unwrap();
    assert_eq!(all.len(), 5);
    assert!(all.iter().all(|h| [1, 4, 7, 10].contains(&h.score)));
    assert_eq!(all.iter().filter(|h| h.score == 10).count(), 1);
    assert_eq!(all[4].score, 1);
}

fn app(ext: Arc<Extender>) -> axum::Router {
    router(ext)
}

async fn call(router: axum::Router, method: &str, uri: &str, body: &str) -> (StatusCode, String) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json").body(Body::from(body.to_string())).unwrap();
    let resp = router.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), 1 << 20).await.unwrap();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

#[tokio::test]
async fn http_verbs() {
    let ext = Arc::new(Extender::new(model(), registry(four_nodes()), ExtenderConfig::default(), None));
    let (s, b) = call(app(ext.clone()), "GET", "/healthz", "").await;
    assert_eq!(s, StatusCode::OK);
    assert!(b.contains("\"status\":\"ok\""));
    let (s, b) = call(app(ext.clone()), "POST", "/filter", &fixture("filter_request.json")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b, fixture("filter_response.json"));
    let (s, b) = call(app(ext.clone()), "POST", "/prioritize", &fixture("prioritize_request.json")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b, fixture("prioritize_response.json"));
    for bad in ["{", "{\"Pod\":{}}", "{\"Pod\":{\"metadata\":{\"name\":\"p\"}}}", "[]"] {
        let (s, b) = call(app(ext.clone()), "POST", "/filter", bad).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{bad}");
        assert!(b.contains("\"Error\""));
    }
    let bad_qty = r#"{"Pod":{"metadata":{"name":"p"},"spec":{"containers":[{"resources":{"requests":{"cpu":"lots"}}}]}},"NodeNames":["node-0"]}"#;
    assert_eq!(call(app(ext.clone()), "POST", "/prioritize", bad_qty).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn reload_is_atomic_and_keeps_old_on_error() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("w.agmw");
    let other = Model::new(8, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    other.save(&good).unwrap();
    let bytes = std::fs::read(&good).unwrap();
    let truncated = dir.path().join("t.agmw");
    std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();

    let ext = Arc::new(Extender::new(model(), registry(four_nodes()), ExtenderConfig::default(), Some(good.clone())));
    let body = format!("{{\"path\":{:?}}}", truncated.to_str().unwrap());
    let (s, _) = call(app(ext.clone()), "POST", "/reload", &body).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(ext.snapshot().version, 1);
    assert_eq!(ext.snapshot().model, model());

    let (s, b) = call(app(ext.clone()), "POST", "/reload", "").await;
    assert_eq!(s, StatusCode::OK, "{b}");
    assert_eq!(ext.snapshot().version, 2);
    assert_eq!(ext.snapshot().model, other);
}

#[test]
fn refresh_swaps_registry() {
    let ext = Extender::new(model(), registry(four_nodes()), ExtenderConfig::default(), None);
    let v = ext.refresh(&StaticSource(registry(vec![NodeState::new(0, 1000, 1024, CostClass::Spot)]))).unwrap();
    assert_eq!(v, 2);
    assert_eq!(ext.snapshot().registry.graph().len(), 1);
}

#[test]
fn dominant_node_takes_the_top_band() {
    use agmarl_core::agent::ActionScores;
    use agmarl_core::lexico::SelectionConfig;
    let sel = SelectionConfig { delta_lex: 0.0, ..Default::default() };
    let cands = [(0, [0.9, 0.9, 0.9]), (1, [0.5, 0.8, 0.2]), (2, [0.1, 0.2, 0.3])].into_iter().map(|(i, a)| (i, ActionScores(a))).collect();
    for stress in [0.1, 0.4, 0.6, 0.9] {
        let band = score_band(&cands, stress, &sel).unwrap();
        assert_eq!(band[&0], 10);
        assert!(band[&1] <= 4 && band[&2] <= 4);
    }
    let ties = [(0, [0.5, 0.5, 0.5]), (1, [0.5, 0.5, 0.5]), (2, [0.5, 0.5, 0.1])].into_iter().map(|(i, a)| (i, ActionScores(a))).collect();
    let band = score_band(&ties, 0.1, &sel).unwrap();
    assert_eq!((band[&0], band[&1], band[&2]), (10, 7, 4));
}

fn random_nodes() -> impl proptest::strategy::Strategy<Value = Vec<NodeState>> {
    use proptest::prelude::*;
    proptest::collection::vec((0u64..4000, 0u64..16000, any::<bool>(), any::<bool>(), any::<bool>(), 0u32..20), 1..8).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (cpu, mem, ready, taint, pressure, restarts))| {
                let mut n = NodeState::new(i, 4000, 16384, if i % 3 == 2 { CostClass::HighMem } else { CostClass::Standard });
                n.cpu_allocated = cpu;
                n.mem_allocated = mem;
                n.ready = ready;
                n.memory_pressure = pressure;
                n.restarts_window = restarts;
                if taint {
                    n.taints.insert("failure-sim".into());
                }
                n
            })
            .collect()
    })
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(128))]

    #[test]
    fn filter_partitions_the_request(nodes in random_nodes(), picks in proptest::collection::vec(0usize..10, 0..10), floor in 0.0f64..1.0) {
        let n = nodes.len();
        let reg = registry(nodes);
        let mut names: Vec<String> = picks.iter().map(|&i| if i < n { format!("node-{i}") } else { format!("ghost-{i}") }).collect();
        names.sort();
        names.dedup();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let cfg = ExtenderConfig { ft_floor: floor, ..Default::default() };
        let a = args(pod("200m", "256Mi"), &refs);
        let r = handle_filter(&a, &model(), &reg, &cfg).unwrap();
        let kept = r.node_names.clone().unwrap();
        proptest::prop_assert!(kept.iter().all(|k| names.contains(k) && !r.failed_nodes.contains_key(k)));
        proptest::prop_assert!(r.failed_nodes.keys().all(|k| names.contains(k)));
        proptest::prop_assert_eq!(kept.len() + r.failed_nodes.len(), names.len());
        proptest::prop_assert_eq!(handle_filter(&a, &model(), &reg, &cfg).unwrap(), r);
    }

    #[test]
    fn prioritize_is_replayable_and_ordered(nodes in random_nodes(), rev in proptest::prelude::any::<bool>()) {
        let mut names: Vec<String> = (0..nodes.len()).map(|i| format!("node-{i}")).collect();
        if rev {
            names.reverse();
        }
        let reg = registry(nodes);
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let a = args(pod("200m", "256Mi"), &refs);
        let cfg = ExtenderConfig::default();
        let out = handle_prioritize(&a, &model(), &reg, &cfg).unwrap();
        let hosts: Vec<&String> = out.iter().map(|h| &h.host).collect();
        proptest::prop_assert_eq!(hosts, names.iter().collect::<Vec<_>>());
        proptest::prop_assert!(out.iter().all(|h| [1, 4, 7, 10].contains(&h.score)));
        proptest::prop_assert_eq!(handle_prioritize(&a, &model(), &reg, &cfg).unwrap(), out);
    }
}
