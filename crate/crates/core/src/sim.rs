//! Discrete-event cluster simulator.
//!
//! Accounting is request-based: a node's allocated fields are always the sum
//! of its pods' requests. Memory spikes are tracked separately as extra
//! usage; they never block scheduling but can OOM-kill pods and raise
//! memory pressure.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::cluster::{metric_util, ClusterGraph, CostClass, CostTable, FaultMode, Lifetime, NodeState, PodSpec, StressWeights, RESTART_WINDOW_SECS};
use crate::error::{Error, Result};
use crate::lexico::regime_of;

pub const RETRY_INTERVAL: f64 = 10.0;
pub const OOM_PRESSURE_SECS: f64 = 120.0;
/// Fraction of memory capacity below which a node reports memory pressure.
pub const PRESSURE_FREE_FRACTION: f64 = 0.1;
const APP_RATE_WINDOW: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselinePool {
    pub count: usize,
    pub cpu: u64,
    pub mem: u64,
    pub cost_class: CostClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StressPool {
    pub min: usize,
    pub max: usize,
    pub cpu: u64,
    pub mem: u64,
    pub cost_class: CostClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoscaleConfig {
    pub check_interval: f64,
    pub up_util: f64,
    pub up_after: f64,
    pub down_util: f64,
    pub down_after: f64,
}

impl Default for AutoscaleConfig {
    fn default() -> Self {
        AutoscaleConfig {
            check_interval: 10.0,
            up_util: 0.8,
            up_after: 60.0,
            down_util: 0.3,
            down_after: 300.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub baseline_pool: BaselinePool,
    pub stress_pool: StressPool,
    pub autoscale: AutoscaleConfig,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            baseline_pool: BaselinePool {
                count: 3,
                cpu: 4000,
                mem: 16384,
                cost_class: CostClass::Standard,
            },
            stress_pool: StressPool {
                min: 1,
                max: 5,
                cpu: 4000,
                mem: 32768,
                cost_class: CostClass::HighMem,
            },
            autoscale: AutoscaleConfig::default(),
        }
    }
}

impl ClusterConfig {
    /// Fixed-size cluster of `n` baseline nodes and no stress pool.
    pub fn fixed(n: usize) -> Self {
        let mut c = ClusterConfig::default();
        c.baseline_pool.count = n;
        c.stress_pool.min = 0;
        c.stress_pool.max = 0;
        c
    }

    pub fn max_nodes(&self) -> usize {
        self.baseline_pool.count + self.stress_pool.max
    }

    pub fn validate(&self) -> Result<()> {
        let (b, s) = (&self.baseline_pool, &self.stress_pool);
        if s.min > s.max {
            return Err(Error::Config(format!("stress pool min {} > max {}", s.min, s.max)));
        }
        if b.count + s.min == 0 {
            return Err(Error::Config("cluster starts with no nodes".into()));
        }
        if b.cpu == 0 || b.mem == 0 || (s.max > 0 && (s.cpu == 0 || s.mem == 0)) {
            return Err(Error::Config("node capacities must be positive".into()));
        }
        let a = &self.autoscale;
        if !(a.check_interval > 0.0) || a.up_after < 0.0 || a.down_after < 0.0 {
            return Err(Error::Config("autoscale intervals must be positive".into()));
        }
        Ok(())
    }
}

/// Admission control applied by the learned controller under high stress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmissionCap {
    pub enabled: bool,
    /// Share of a family's submitted pods that may be admitted while capped.
    pub fraction: f64,
    /// Family restart rate (per minute) above which the cap applies.
    pub restart_rate_per_min: f64,
}

impl Default for AdmissionCap {
    fn default() -> Self {
        AdmissionCap {
            enabled: true,
            fraction: 0.7,
            restart_rate_per_min: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub cluster: ClusterConfig,
    pub cost_table: CostTable,
    pub stress_weights: StressWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NodeTarget {
    Id(usize),
    /// Highest utilisation at event time, lowest id on ties.
    MostUtilised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EventKind {
    PodArrival(PodSpec),
    PodExit {
        pod_id: String,
        #[serde(default)]
        epoch: u32,
    },
    LivenessRestart {
        pod_id: String,
        #[serde(default)]
        epoch: u32,
    },
    OomSpike {
        pod_id: String,
        #[serde(default)]
        epoch: u32,
    },
    TaintNode {
        node: NodeTarget,
        key: String,
    },
    UntaintNode {
        node: NodeTarget,
        key: String,
    },
    AutoscaleCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: f64,
    pub kind: EventKind,
}

struct Queued {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // BinaryHeap is a max-heap; invert so the earliest (time, seq) pops first
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PodRecord {
    pub spec: PodSpec,
    pub arrival: f64,
    pub node: Option<usize>,
    pub bound_at: Option<f64>,
    pub finished_at: Option<f64>,
    pub restarts: u32,
    /// Memory in use above the request after a spike, MiB.
    pub spike_extra: u64,
    bind_epoch: u32,
    run_epoch: u32,
    next_attempt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeferReason {
    NoFeasibleNode,
    AdmissionCap,
}

/// Cumulative counters for the metrics collector.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SimCounters {
    /// (app, node_id) → restarts.
    pub restarts: BTreeMap<(String, usize), u32>,
    /// (app, node_id) → OOM and liveness kills.
    pub failures: BTreeMap<(String, usize), u32>,
    pub binds: u64,
    pub deferred_infeasible: u64,
    pub deferred_admission: u64,
    pub scale_ups: u32,
    pub scale_downs: u32,
}

pub struct Env {
    cfg: EnvConfig,
    g: ClusterGraph,
    queue: BinaryHeap<Queued>,
    seq: u64,
    pods: BTreeMap<String, PodRecord>,
    pending: Vec<String>,
    node_restarts: BTreeMap<usize, VecDeque<f64>>,
    pressure_until: BTreeMap<usize, f64>,
    app_restarts: BTreeMap<String, VecDeque<f64>>,
    app_submitted: BTreeMap<String, usize>,
    app_admitted: BTreeMap<String, usize>,
    above_since: Option<f64>,
    below_since: Option<f64>,
    counters: SimCounters,
}

impl Env {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.cluster.validate()?;
        cfg.cost_table.validate()?;
        let c = &cfg.cluster;
        let mut nodes: Vec<NodeState> = (0..c.baseline_pool.count)
            .map(|i| NodeState::new(i, c.baseline_pool.cpu, c.baseline_pool.mem, c.baseline_pool.cost_class))
            .collect();
        for k in 0..c.stress_pool.min {
            nodes.push(NodeState::new(c.baseline_pool.count + k, c.stress_pool.cpu, c.stress_pool.mem, c.stress_pool.cost_class));
        }
        let mut env = Env {
            g: ClusterGraph::new(nodes),
            queue: BinaryHeap::new(),
            seq: 0,
            pods: BTreeMap::new(),
            pending: Vec::new(),
            node_restarts: BTreeMap::new(),
            pressure_until: BTreeMap::new(),
            app_restarts: BTreeMap::new(),
            app_submitted: BTreeMap::new(),
            app_admitted: BTreeMap::new(),
            above_since: None,
            below_since: None,
            counters: SimCounters::default(),
            cfg,
        };
        if env.cfg.cluster.stress_pool.max > env.cfg.cluster.stress_pool.min {
            env.push(0.0, EventKind::AutoscaleCheck);
        }
        env.refresh()?;
        Ok(env)
    }

    pub fn graph(&self) -> &ClusterGraph {
        &self.g
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn now(&self) -> f64 {
        self.g.sim_time
    }

    pub fn pod(&self, pod_id: &str) -> Option<&PodRecord> {
        self.pods.get(pod_id)
    }

    pub fn pods(&self) -> impl Iterator<Item = &PodRecord> {
        self.pods.values()
    }

    pub fn pending(&self) -> &[String] {
        &self.pending
    }

    pub fn counters(&self) -> &SimCounters {
        &self.counters
    }

    pub fn stress_pool_size(&self) -> usize {
        let base = self.cfg.cluster.baseline_pool.count;
        self.g.nodes.iter().filter(|n| n.node_id >= base).count()
    }

    /// Times of still-queued events, earliest first.
    pub fn scheduled(&self) -> Vec<(f64, EventKind)> {
        let mut v: Vec<&Queued> = self.queue.iter().collect();
        v.sort_by(|a, b| b.cmp(a));
        v.into_iter().map(|q| (q.time, q.kind.clone())).collect()
    }

    pub fn schedule(&mut self, ev: SimEvent) -> Result<()> {
        if !(ev.time >= self.now()) {
            return Err(Error::OutOfRange(format!("event at {} before now {}", ev.time, self.now())));
        }
        if let EventKind::PodArrival(p) = &ev.kind {
            p.validate()?;
        }
        self.push(ev.time, ev.kind);
        Ok(())
    }

    fn push(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Queued { time, seq: self.seq, kind });
    }

    /// Memory used above requests on `node_id`.
    pub fn spike_usage(&self, node_id: usize) -> u64 {
        self.g
            .node(node_id)
            .map(|n| n.pod_ids.iter().filter_map(|p| self.pods.get(p)).map(|r| r.spike_extra).sum())
            .unwrap_or(0)
    }

    fn actual_mem_free(&self, node: &NodeState) -> u64 {
        node.mem_free().saturating_sub(self.spike_usage(node.node_id))
    }

    /// Restarts of pods of `app` per minute over the last minute.
    pub fn app_restart_rate(&self, app: &str) -> f64 {
        self.app_restarts.get(app).map_or(0.0, |q| q.len() as f64 * 60.0 / APP_RATE_WINDOW)
    }

    pub fn app_submitted(&self, app: &str) -> usize {
        self.app_submitted.get(app).copied().unwrap_or(0)
    }

    pub fn app_admitted(&self, app: &str) -> usize {
        self.app_admitted.get(app).copied().unwrap_or(0)
    }

    /// Advances to the next pod awaiting a placement decision, processing
    /// events on the way. Returns `None` once nothing is left before
    /// `horizon`; the clock then rests at `horizon` (when finite).
    pub fn next_decision(&mut self, horizon: f64) -> Result<Option<String>> {
        loop {
            while self.queue.peek().is_some_and(|q| q.time <= self.now()) {
                let q = self.queue.pop().expect("peeked");
                self.handle(q.time, q.kind)?;
            }
            self.refresh()?;
            let now = self.now();
            if let Some(p) = self.pending.iter().find(|p| self.pods[*p].next_attempt <= now) {
                return Ok(Some(p.clone()));
            }
            let next_event = self.queue.peek().map(|q| q.time);
            let next_retry = self.pending.iter().map(|p| self.pods[p].next_attempt).min_by(f64::total_cmp);
            let t = match (next_event, next_retry) {
                (Some(a), Some(b)) => a.min(b),
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => f64::INFINITY,
            };
            if t > horizon {
                if horizon.is_finite() && horizon > now {
                    self.g.sim_time = horizon;
                    self.refresh()?;
                }
                return Ok(None);
            }
            self.g.sim_time = t;
        }
    }

    /// Moves the clock to `t`, handling every event up to and including it.
    /// Pending pods are left untouched.
    pub fn advance_to(&mut self, t: f64) -> Result<()> {
        if t < self.now() {
            return Err(Error::OutOfRange(format!("cannot rewind to {t}")));
        }
        while let Some(q) = self.queue.peek() {
            if q.time > t {
                break;
            }
            let q = self.queue.pop().expect("peeked");
            self.g.sim_time = q.time.max(self.now());
            self.handle(q.time, q.kind)?;
        }
        self.g.sim_time = t;
        self.refresh()
    }

    pub fn feasible(&self, pod_id: &str) -> Result<Vec<usize>> {
        let rec = self.pods.get(pod_id).ok_or_else(|| Error::Config(format!("unknown pod {pod_id}")))?;
        Ok(feasible_candidates(&self.g, &rec.spec))
    }

    pub fn bind(&mut self, pod_id: &str, node_id: usize) -> Result<()> {
        let idx = self.pending.iter().position(|p| p == pod_id);
        let spec = match (idx, self.pods.get(pod_id)) {
            (Some(_), Some(r)) => r.spec.clone(),
            _ => return Err(Error::InfeasibleBind { pod: pod_id.into(), node: node_id }),
        };
        if !feasible_candidates(&self.g, &spec).contains(&node_id) {
            return Err(Error::InfeasibleBind { pod: pod_id.into(), node: node_id });
        }
        self.pending.remove(idx.expect("checked"));
        let now = self.now();
        let node = self.g.node_mut(node_id)?;
        node.cpu_allocated += spec.cpu_request;
        node.mem_allocated += spec.mem_request;
        node.pod_ids.push(spec.pod_id.clone());
        let rec = self.pods.get_mut(pod_id).expect("checked");
        rec.node = Some(node_id);
        rec.bound_at = Some(now);
        rec.bind_epoch += 1;
        let bind_epoch = rec.bind_epoch;
        *self.app_admitted.entry(spec.app_label.clone()).or_default() += 1;
        self.counters.binds += 1;
        if let Lifetime::Seconds(s) = spec.lifetime {
            self.push(now + s, EventKind::PodExit { pod_id: spec.pod_id.clone(), epoch: bind_epoch });
        }
        self.start_container(pod_id);
        self.refresh()
    }

    pub fn defer(&mut self, pod_id: &str, reason: DeferReason) -> Result<()> {
        if !self.pending.iter().any(|p| p == pod_id) {
            return Err(Error::Config(format!("pod {pod_id} is not pending")));
        }
        let now = self.now();
        self.pods.get_mut(pod_id).expect("pending pods are registered").next_attempt = now + RETRY_INTERVAL;
        match reason {
            DeferReason::NoFeasibleNode => self.counters.deferred_infeasible += 1,
            DeferReason::AdmissionCap => self.counters.deferred_admission += 1,
        }
        Ok(())
    }

    /// Removes a bound pod from its node, releasing its requests.
    pub fn unbind(&mut self, pod_id: &str) -> Result<()> {
        let rec = self.pods.get_mut(pod_id).ok_or_else(|| Error::Config(format!("unknown pod {pod_id}")))?;
        let Some(node_id) = rec.node.take() else {
            return Err(Error::Config(format!("pod {pod_id} is not bound")));
        };
        rec.spike_extra = 0;
        rec.finished_at = Some(self.g.sim_time);
        let (cpu, mem) = (rec.spec.cpu_request, rec.spec.mem_request);
        if let Ok(node) = self.g.node_mut(node_id) {
            node.cpu_allocated -= cpu;
            node.mem_allocated -= mem;
            node.pod_ids.retain(|p| p != pod_id);
        }
        self.refresh()
    }

    fn start_container(&mut self, pod_id: &str) {
        let now = self.now();
        let rec = self.pods.get_mut(pod_id).expect("caller checked");
        rec.run_epoch += 1;
        rec.spike_extra = 0;
        let epoch = rec.run_epoch;
        let pod_id = pod_id.to_string();
        match rec.spec.fault_mode {
            FaultMode::None => {}
            FaultMode::LivenessFail { after } => self.push(now + after, EventKind::LivenessRestart { pod_id, epoch }),
            FaultMode::OomKill { after, .. } => self.push(now + after, EventKind::OomSpike { pod_id, epoch }),
        }
    }

    fn live(&self, pod_id: &str, run_epoch: u32) -> Option<usize> {
        self.pods.get(pod_id).filter(|r| r.run_epoch == run_epoch).and_then(|r| r.node)
    }

    fn restart(&mut self, pod_id: &str, node_id: usize, oom: bool) {
        let now = self.now();
        let app = self.pods[pod_id].spec.app_label.clone();
        self.pods.get_mut(pod_id).expect("live").restarts += 1;
        self.node_restarts.entry(node_id).or_default().push_back(now);
        self.app_restarts.entry(app.clone()).or_default().push_back(now);
        *self.counters.restarts.entry((app.clone(), node_id)).or_default() += 1;
        *self.counters.failures.entry((app, node_id)).or_default() += 1;
        if oom {
            let until = self.pressure_until.entry(node_id).or_insert(0.0);
            *until = until.max(now + OOM_PRESSURE_SECS);
        }
        self.start_container(pod_id);
    }

    fn resolve(&self, target: &NodeTarget) -> Option<usize> {
        match target {
            NodeTarget::Id(i) => self.g.index_of(*i).map(|_| *i),
            NodeTarget::MostUtilised => {
                let mut best: Option<(f64, usize)> = None;
                for n in &self.g.nodes {
                    let u = metric_util(n).unwrap_or(0.0);
                    if best.is_none_or(|(b, _)| u > b) {
                        best = Some((u, n.node_id));
                    }
                }
                best.map(|(_, id)| id)
            }
        }
    }

    fn handle(&mut self, time: f64, kind: EventKind) -> Result<()> {
        match kind {
            EventKind::PodArrival(spec) => {
                if self.pods.contains_key(&spec.pod_id) {
                    return Err(Error::Config(format!("duplicate pod id {}", spec.pod_id)));
                }
                *self.app_submitted.entry(spec.app_label.clone()).or_default() += 1;
                self.pending.push(spec.pod_id.clone());
                self.pods.insert(
                    spec.pod_id.clone(),
                    PodRecord {
                        spec,
                        arrival: time,
                        node: None,
                        bound_at: None,
                        finished_at: None,
                        restarts: 0,
                        spike_extra: 0,
                        bind_epoch: 0,
                        run_epoch: 0,
                        next_attempt: time,
                    },
                );
            }
            EventKind::PodExit { pod_id, epoch } => {
                if self.pods.get(&pod_id).is_some_and(|r| r.bind_epoch == epoch && r.node.is_some()) {
                    self.unbind(&pod_id)?;
                }
            }
            EventKind::LivenessRestart { pod_id, epoch } => {
                if let Some(node) = self.live(&pod_id, epoch) {
                    self.restart(&pod_id, node, false);
                }
            }
            EventKind::OomSpike { pod_id, epoch } => {
                if let Some(node_id) = self.live(&pod_id, epoch) {
                    let rec = &self.pods[&pod_id];
                    let FaultMode::OomKill { spike_to, .. } = rec.spec.fault_mode else {
                        return Ok(());
                    };
                    let extra = spike_to.saturating_sub(rec.spec.mem_request);
                    let free = self.actual_mem_free(self.g.node(node_id)?);
                    if extra > free {
                        self.restart(&pod_id, node_id, true);
                    } else {
                        self.pods.get_mut(&pod_id).expect("live").spike_extra = extra;
                    }
                }
            }
            EventKind::TaintNode { node, key } => {
                if let Some(id) = self.resolve(&node) {
                    self.g.node_mut(id)?.taints.insert(key);
                }
            }
            EventKind::UntaintNode { node, key } => {
                if let Some(id) = self.resolve(&node) {
                    self.g.node_mut(id)?.taints.remove(&key);
                }
            }
            EventKind::AutoscaleCheck => {
                self.autoscale(time)?;
                let next = time + self.cfg.cluster.autoscale.check_interval;
                self.push(next, EventKind::AutoscaleCheck);
            }
        }
        Ok(())
    }

    fn autoscale(&mut self, now: f64) -> Result<()> {
        let a = self.cfg.cluster.autoscale.clone();
        let pool = self.cfg.cluster.stress_pool.clone();
        let base = self.cfg.cluster.baseline_pool.count;
        // dominant-resource share, so a CPU-saturated node counts as full
        let total: f64 = self.g.nodes.iter().map(|n| (n.cpu_allocated as f64 / n.cpu_capacity as f64).max(n.mem_allocated as f64 / n.mem_capacity as f64)).sum();
        let mean = total / self.g.len() as f64;
        self.above_since = if mean > a.up_util { self.above_since.or(Some(now)) } else { None };
        self.below_since = if mean < a.down_util { self.below_since.or(Some(now)) } else { None };
        let size = self.stress_pool_size();
        if self.above_since.is_some_and(|s| now - s >= a.up_after) && size < pool.max {
            let id = (base..base + pool.max).find(|i| self.g.index_of(*i).is_none()).expect("pool below max");
            self.g.nodes.push(NodeState::new(id, pool.cpu, pool.mem, pool.cost_class));
            self.g.nodes.sort_by_key(|n| n.node_id);
            self.above_since = None;
            self.counters.scale_ups += 1;
            log::debug!("t={now}: stress pool up to {}", size + 1);
        } else if self.below_since.is_some_and(|s| now - s >= a.down_after) && size > pool.min {
            let victim = self.g.nodes.iter().rev().find(|n| n.node_id >= base && n.pod_ids.is_empty()).map(|n| n.node_id);
            if let Some(id) = victim {
                self.g.nodes.retain(|n| n.node_id != id);
                self.node_restarts.remove(&id);
                self.pressure_until.remove(&id);
                self.below_since = None;
                self.counters.scale_downs += 1;
                log::debug!("t={now}: stress pool down to {}", size - 1);
            }
        }
        Ok(())
    }

    /// Re-derives restart windows, memory pressure and stress at the current time.
    fn refresh(&mut self) -> Result<()> {
        let now = self.now();
        for q in self.node_restarts.values_mut() {
            while q.front().is_some_and(|&t| t <= now - RESTART_WINDOW_SECS) {
                q.pop_front();
            }
        }
        for q in self.app_restarts.values_mut() {
            while q.front().is_some_and(|&t| t <= now - APP_RATE_WINDOW) {
                q.pop_front();
            }
        }
        let extras: Vec<u64> = self.g.nodes.iter().map(|n| self.spike_usage(n.node_id)).collect();
        for (node, extra) in self.g.nodes.iter_mut().zip(extras) {
            let id = node.node_id;
            node.restarts_window = self.node_restarts.get(&id).map_or(0, |q| q.len() as u32);
            let free = node.mem_free().saturating_sub(extra) as f64;
            node.memory_pressure = self.pressure_until.get(&id).is_some_and(|&t| t > now) || free < PRESSURE_FREE_FRACTION * node.mem_capacity as f64;
        }
        self.g.refresh_stress(&self.cfg.stress_weights)?;
        Ok(())
    }

    /// Whether the admission cap holds `pod_id` back right now.
    pub fn admission_capped(&self, pod_id: &str, cap: &AdmissionCap) -> Result<bool> {
        if !cap.enabled {
            return Ok(false);
        }
        let rec = self.pods.get(pod_id).ok_or_else(|| Error::Config(format!("unknown pod {pod_id}")))?;
        if !regime_of(self.g.stress)?.is_high() {
            return Ok(false);
        }
        let app = &rec.spec.app_label;
        if self.app_restart_rate(app) <= cap.restart_rate_per_min {
            return Ok(false);
        }
        let allowed = (cap.fraction * self.app_submitted(app) as f64).ceil() as usize;
        Ok(self.app_admitted(app) >= allowed)
    }
}

/// Nodes that can host `pod`: enough free requests, ready, and every taint tolerated.
pub fn feasible_candidates(g: &ClusterGraph, pod: &PodSpec) -> Vec<usize> {
    g.nodes
        .iter()
        .filter(|n| n.ready && n.cpu_free() >= pod.cpu_request && n.mem_free() >= pod.mem_request && pod.tolerates(n))
        .map(|n| n.node_id)
        .collect()
}

fn free_fraction(n: &NodeState) -> f64 {
    0.5 * (n.cpu_free() as f64 / n.cpu_capacity as f64 + n.mem_free() as f64 / n.mem_capacity as f64)
}

/// Least-requested spreading: the feasible node with the most free
/// capacity, lowest id on ties.
pub fn baseline_policy(g: &ClusterGraph, pod: &PodSpec) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    for id in feasible_candidates(g, pod) {
        let f = free_fraction(g.node(id)?);
        if best.is_none_or(|(b, _)| f > b) {
            best = Some((f, id));
        }
    }
    best.map(|(_, id)| id).ok_or(Error::NoFeasibleNode)
}
