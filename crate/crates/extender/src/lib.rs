//! Scheduler-extender service: `filter` and `prioritize` verbs answered from
//! GNN + actor inference and the lexicographic selector.

pub mod quantity;
pub mod wire;

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use agmarl_core::agent::ActionScores;
use agmarl_core::cluster::{compute_stress, ClusterGraph, PodSpec, StressWeights};
use agmarl_core::lexico::{lex_select_traced, regime_of, SelectionConfig};
use agmarl_core::model::Model;
use agmarl_core::sim::feasible_candidates;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use wire::{ExtenderArgs, FilterResult, HostPriority};

pub const DEFAULT_PORT: u16 = 8888;

pub const SCORE_WINNER: i64 = 10;
pub const SCORE_STAGE2: i64 = 7;
pub const SCORE_STAGE1: i64 = 4;
pub const SCORE_OTHER: i64 = 1;

pub const REASON_UNKNOWN: &str = "unknown-node";
pub const REASON_RESOURCES: &str = "insufficient-resources";
pub const REASON_TAINT: &str = "taint-not-tolerated";
pub const REASON_NOT_READY: &str = "node-not-ready";
pub const REASON_FT_FLOOR: &str = "fault-tolerance-below-floor";

#[derive(Debug, thiserror::Error)]
pub enum ExtenderError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Core(#[from] agmarl_core::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtenderConfig {
    pub selection: SelectionConfig,
    pub stress_weights: StressWeights,
    /// Minimum FT score a node needs to pass `filter` once the regime is High or worse.
    pub ft_floor: f64,
}

impl Default for ExtenderConfig {
    fn default() -> Self {
        ExtenderConfig {
            selection: SelectionConfig::default(),
            stress_weights: StressWeights::default(),
            ft_floor: 0.05,
        }
    }
}

/// Node states keyed by name, with stress recomputed over the whole set.
#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    graph: ClusterGraph,
    by_name: BTreeMap<String, usize>,
}

impl Registry {
    pub fn new(mut graph: ClusterGraph, weights: &StressWeights) -> Result<Self, ExtenderError> {
        let mut by_name = BTreeMap::new();
        for n in &graph.nodes {
            if by_name.insert(n.name.clone(), n.node_id).is_some() {
                return Err(ExtenderError::BadRequest(format!("duplicate node name {}", n.name)));
            }
        }
        graph.stress = compute_stress(&graph, weights)?;
        Ok(Registry { graph, by_name })
    }

    pub fn graph(&self) -> &ClusterGraph {
        &self.graph
    }

    pub fn stress(&self) -> f64 {
        self.graph.stress
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }
}

/// Where registry snapshots come from. Tests and `serve` use a fixed snapshot.
pub trait StateSource: Send + Sync {
    fn snapshot(&self) -> Result<Registry, ExtenderError>;
}

pub struct StaticSource(pub Registry);

impl StateSource for StaticSource {
    fn snapshot(&self) -> Result<Registry, ExtenderError> {
        Ok(self.0.clone())
    }
}

fn pod_spec(pod: &wire::Pod) -> Result<PodSpec, ExtenderError> {
    let (mut cpu, mut mem) = (0u64, 0u64);
    for c in &pod.spec.containers {
        if let Some(q) = c.resources.requests.get("cpu") {
            cpu += quantity::cpu_millis(q)?;
        }
        if let Some(q) = c.resources.requests.get("memory") {
            mem += quantity::mem_mib(q)?;
        }
    }
    let mut spec = PodSpec::new(pod.metadata.name.clone(), pod.metadata.name.clone(), cpu, mem);
    spec.tolerations = pod.spec.tolerations.iter().filter_map(|t| t.key.clone()).collect();
    Ok(spec)
}

fn names(args: &ExtenderArgs) -> Result<Vec<String>, ExtenderError> {
    args.candidate_names().ok_or_else(|| ExtenderError::BadRequest("request carries neither Nodes nor NodeNames".into()))
}

pub fn handle_filter(args: &ExtenderArgs, model: &Model, registry: &Registry, cfg: &ExtenderConfig) -> Result<FilterResult, ExtenderError> {
    let requested = names(args)?;
    let pod = pod_spec(&args.pod)?;
    let g = registry.graph();
    let feasible: BTreeSet<usize> = feasible_candidates(g, &pod).into_iter().collect();
    let scores = if regime_of(g.stress)?.is_high() { Some(model.score(g)?) } else { None };
    let mut failed = BTreeMap::new();
    let mut passed = BTreeSet::new();
    for name in &requested {
        let Some(id) = registry.id_of(name) else {
            failed.insert(name.clone(), REASON_UNKNOWN.to_string());
            continue;
        };
        let node = g.node(id)?;
        let reason = if !node.ready {
            Some(REASON_NOT_READY)
        } else if !pod.tolerates(node) {
            Some(REASON_TAINT)
        } else if !feasible.contains(&id) {
            Some(REASON_RESOURCES)
        } else if scores.as_ref().is_some_and(|s| s[&id].ft() < cfg.ft_floor) {
            Some(REASON_FT_FLOOR)
        } else {
            None
        };
        match reason {
            Some(r) => {
                failed.insert(name.clone(), r.to_string());
            }
            None => {
                passed.insert(name.clone());
            }
        }
    }
    let keep = |n: &String| passed.contains(n);
    Ok(FilterResult {
        nodes: args.nodes.as_ref().filter(|_| args.node_names.is_none()).map(|l| wire::NodeList {
            items: l.items.iter().filter(|n| keep(&n.metadata.name)).cloned().collect(),
        }),
        node_names: args.node_names.as_ref().map(|v| v.iter().filter(|n| keep(n)).cloned().collect()),
        failed_nodes: failed,
        error: String::new(),
    })
}

/// Map each candidate to {10, 7, 4, 1} by how far it got through the lexicographic stages.
pub fn score_band(cands: &BTreeMap<usize, ActionScores>, stress: f64, selection: &SelectionConfig) -> Result<BTreeMap<usize, i64>, ExtenderError> {
    let sel = lex_select_traced(cands, stress, selection)?;
    Ok(cands
        .keys()
        .map(|id| {
            let s = if *id == sel.winner {
                SCORE_WINNER
            } else if sel.stages[1].contains(id) {
                SCORE_STAGE2
            } else if sel.stages[0].contains(id) {
                SCORE_STAGE1
            } else {
                SCORE_OTHER
            };
            (*id, s)
        })
        .collect())
}

/// One entry per requested name, in request order. Unknown names score the floor of the band.
pub fn handle_prioritize(args: &ExtenderArgs, model: &Model, registry: &Registry, cfg: &ExtenderConfig) -> Result<Vec<HostPriority>, ExtenderError> {
    let requested = names(args)?;
    pod_spec(&args.pod)?;
    let g = registry.graph();
    let known: BTreeSet<usize> = requested.iter().filter_map(|n| registry.id_of(n)).collect();
    let score_of = if known.is_empty() {
        BTreeMap::new()
    } else {
        let all = model.score(g)?;
        score_band(&known.iter().map(|id| (*id, all[id])).collect(), g.stress, &cfg.selection)?
    };
    Ok(requested
        .into_iter()
        .map(|name| {
            let score = registry.id_of(&name).and_then(|id| score_of.get(&id).copied()).unwrap_or(SCORE_OTHER);
            HostPriority { host: name, score }
        })
        .collect())
}

/// Model and registry always swapped together.
pub struct Snapshot {
    pub model: Model,
    pub registry: Registry,
    pub version: u64,
}

pub struct Extender {
    cfg: ExtenderConfig,
    weights_path: Option<PathBuf>,
    state: RwLock<Arc<Snapshot>>,
}

impl Extender {
    pub fn new(model: Model, registry: Registry, cfg: ExtenderConfig, weights_path: Option<PathBuf>) -> Self {
        Extender {
            cfg,
            weights_path,
            state: RwLock::new(Arc::new(Snapshot { model, registry, version: 1 })),
        }
    }

    pub fn config(&self) -> &ExtenderConfig {
        &self.cfg
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.state.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn swap(&self, f: impl FnOnce(&Snapshot) -> Snapshot) -> u64 {
        let mut guard = self.state.write().unwrap_or_else(|e| e.into_inner());
        let next = f(&guard);
        let v = next.version;
        *guard = Arc::new(next);
        v
    }

    /// Load weights from `path` (or the startup path). On failure the current model stays.
    pub fn reload(&self, path: Option<PathBuf>) -> Result<u64, ExtenderError> {
        let path = path.or_else(|| self.weights_path.clone()).ok_or_else(|| ExtenderError::BadRequest("no weights path to reload from".into()))?;
        let model = Model::load(&path)?;
        Ok(self.swap(|cur| Snapshot {
            model,
            registry: cur.registry.clone(),
            version: cur.version + 1,
        }))
    }

    pub fn refresh(&self, source: &dyn StateSource) -> Result<u64, ExtenderError> {
        let registry = source.snapshot()?;
        Ok(self.swap(|cur| Snapshot {
            model: cur.model.clone(),
            registry,
            version: cur.version + 1,
        }))
    }

    pub fn filter(&self, args: &ExtenderArgs) -> Result<FilterResult, ExtenderError> {
        let s = self.snapshot();
        handle_filter(args, &s.model, &s.registry, &self.cfg)
    }

    pub fn prioritize(&self, args: &ExtenderArgs) -> Result<Vec<HostPriority>, ExtenderError> {
        let s = self.snapshot();
        handle_prioritize(args, &s.model, &s.registry, &self.cfg)
    }
}

fn error_response(status: StatusCode, msg: String) -> Response {
    (status, Json(json!({ "Error": msg }))).into_response()
}

fn failure(e: ExtenderError) -> Response {
    match e {
        ExtenderError::BadRequest(m) => error_response(StatusCode::BAD_REQUEST, m),
        ExtenderError::Core(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

fn parse_args(body: &[u8]) -> Result<ExtenderArgs, Response> {
    serde_json::from_slice(body).map_err(|e| error_response(StatusCode::BAD_REQUEST, e.to_string()))
}

async fn filter_route(State(ext): State<Arc<Extender>>, body: Bytes) -> Response {
    let args = match parse_args(&body) {
        Ok(a) => a,
        Err(r) => return r,
    };
    match ext.filter(&args) {
        Ok(r) => Json(r).into_response(),
        Err(e) => failure(e),
    }
}

async fn prioritize_route(State(ext): State<Arc<Extender>>, body: Bytes) -> Response {
    let args = match parse_args(&body) {
        Ok(a) => a,
        Err(r) => return r,
    };
    match ext.prioritize(&args) {
        Ok(r) => Json(r).into_response(),
        Err(e) => failure(e),
    }
}

async fn reload_route(State(ext): State<Arc<Extender>>, body: Bytes) -> Response {
    let req: wire::ReloadRequest = if body.iter().all(u8::is_ascii_whitespace) {
        wire::ReloadRequest::default()
    } else {
        match serde_json::from_slice(&body) {
            Ok(r) => r,
            Err(e) => return error_response(StatusCode::BAD_REQUEST, e.to_string()),
        }
    };
    match ext.reload(req.path.map(PathBuf::from)) {
        Ok(v) => {
            log::info!("model reloaded, version {v}");
            Json(json!({ "version": v })).into_response()
        }
        Err(e) => {
            log::warn!("reload failed, keeping version {}: {e}", ext.snapshot().version);
            match e {
                ExtenderError::BadRequest(m) => error_response(StatusCode::BAD_REQUEST, m),
                ExtenderError::Core(e) => error_response(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
            }
        }
    }
}

async fn healthz(State(ext): State<Arc<Extender>>) -> Response {
    let s = ext.snapshot();
    Json(json!({ "status": "ok", "version": s.version, "nodes": s.registry.graph().len() })).into_response()
}

pub fn router(ext: Arc<Extender>) -> Router {
    Router::new()
        .route("/filter", post(filter_route))
        .route("/prioritize", post(prioritize_route))
        .route("/reload", post(reload_route))
        .route("/healthz", get(healthz))
        .with_state(ext)
}

/// Bind first so the caller can tell an occupied port from later failures.
pub async fn bind(port: u16) -> std::io::Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(SocketAddr::from(([0, 0, 0, 0], port))).await
}

pub async fn serve(listener: tokio::net::TcpListener, ext: Arc<Extender>, shutdown: impl std::future::Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    log::info!("extender listening on {}", listener.local_addr()?);
    axum::serve(listener, router(ext)).with_graceful_shutdown(shutdown).await
}
