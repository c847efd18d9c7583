//! Cluster domain types and the closed-form objective metrics.
//!
//! Every node carries the quantities the three placement objectives are
//! computed from: allocations against capacity (utilisation), the pressure
//! flag and recent restart count (fault tolerance), and the instance cost
//! class (cost efficiency). The cluster graph is fully connected, so edges
//! are implicit.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of raw per-node features fed to the encoder.
pub const RAW_FEATURES: usize = 10;
/// Restart count at which the log-normalised restart feature saturates.
pub const RESTARTS_CAP: f64 = 100.0;
/// Taint count at which the taint feature saturates.
pub const TAINTS_CAP: f64 = 5.0;
/// Trailing window over which restarts are counted, in sim-seconds.
pub const RESTART_WINDOW_SECS: f64 = 3600.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CostClass {
    Standard,
    HighMem,
    Spot,
}

/// Normalised hourly cost per instance class, relative to `Standard`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CostTable(pub BTreeMap<CostClass, f64>);

impl Default for CostTable {
    fn default() -> Self {
        CostTable(BTreeMap::from([
            (CostClass::Standard, 1.0),
            (CostClass::HighMem, 1.35),
            (CostClass::Spot, 0.35),
        ]))
    }
}

impl CostTable {
    pub fn get(&self, class: CostClass) -> Result<f64> {
        match self.0.get(&class) {
            Some(&c) if c > 0.0 && c.is_finite() => Ok(c),
            Some(&c) => Err(Error::Config(format!("cost for {class:?} must be positive, got {c}"))),
            None => Err(Error::Config(format!("no cost configured for {class:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for &class in self.0.keys() {
            self.get(class)?;
        }
        Ok(())
    }
}

/// Weights of the three stress components. The result is clamped to [0,1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StressWeights {
    pub utilisation: f64,
    pub pressure: f64,
    pub restarts: f64,
}

impl Default for StressWeights {
    fn default() -> Self {
        StressWeights {
            utilisation: 0.5,
            pressure: 0.3,
            restarts: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub node_id: usize,
    pub name: String,
    /// milli-cores
    pub cpu_capacity: u64,
    /// MiB
    pub mem_capacity: u64,
    pub cpu_allocated: u64,
    pub mem_allocated: u64,
    pub memory_pressure: bool,
    pub disk_pressure: bool,
    pub ready: bool,
    /// Keys of `NoSchedule` taints on the node.
    pub taints: BTreeSet<String>,
    pub restarts_window: u32,
    pub cost_class: CostClass,
    pub pod_ids: Vec<String>,
}

impl NodeState {
    pub fn new(node_id: usize, cpu_capacity: u64, mem_capacity: u64, cost_class: CostClass) -> Self {
        NodeState {
            node_id,
            name: format!("node-{node_id}"),
            cpu_capacity,
            mem_capacity,
            cpu_allocated: 0,
            mem_allocated: 0,
            memory_pressure: false,
            disk_pressure: false,
            ready: true,
            taints: BTreeSet::new(),
            restarts_window: 0,
            cost_class,
            pod_ids: Vec::new(),
        }
    }

    pub fn taint_count(&self) -> usize {
        self.taints.len()
    }

    pub fn cpu_free(&self) -> u64 {
        self.cpu_capacity.saturating_sub(self.cpu_allocated)
    }

    pub fn mem_free(&self) -> u64 {
        self.mem_capacity.saturating_sub(self.mem_allocated)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cpu_capacity == 0 || self.mem_capacity == 0 {
            return Err(Error::Config(format!("node {} has zero capacity", self.node_id)));
        }
        if self.cpu_allocated > self.cpu_capacity || self.mem_allocated > self.mem_capacity {
            return Err(Error::Config(format!("node {} is overcommitted", self.node_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Lifetime {
    Infinite,
    Seconds(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FaultMode {
    None,
    /// Liveness probe fails `after` seconds past every (re)start.
    LivenessFail { after: f64 },
    /// Memory usage jumps to `spike_to` MiB `after` seconds past every (re)start.
    OomKill { spike_to: u64, after: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PriorityClass {
    Normal,
    Batch,
    Burst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PodSpec {
    pub pod_id: String,
    pub app_label: String,
    /// milli-cores
    pub cpu_request: u64,
    /// MiB
    pub mem_request: u64,
    pub lifetime: Lifetime,
    pub fault_mode: FaultMode,
    pub priority_class: PriorityClass,
    pub tolerations: BTreeSet<String>,
}

impl PodSpec {
    pub fn new(pod_id: impl Into<String>, app_label: impl Into<String>, cpu: u64, mem: u64) -> Self {
        PodSpec {
            pod_id: pod_id.into(),
            app_label: app_label.into(),
            cpu_request: cpu,
            mem_request: mem,
            lifetime: Lifetime::Infinite,
            fault_mode: FaultMode::None,
            priority_class: PriorityClass::Normal,
            tolerations: BTreeSet::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cpu_request == 0 || self.mem_request == 0 {
            return Err(Error::Config(format!("pod {} has a zero request", self.pod_id)));
        }
        Ok(())
    }

    pub fn tolerates(&self, node: &NodeState) -> bool {
        node.taints.iter().all(|t| self.tolerations.contains(t))
    }
}

/// Global state: all nodes of a fully connected cluster graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterGraph {
    /// Sorted by `node_id`.
    pub nodes: Vec<NodeState>,
    pub sim_time: f64,
    pub stress: f64,
}

impl ClusterGraph {
    pub fn new(mut nodes: Vec<NodeState>) -> Self {
        nodes.sort_by_key(|n| n.node_id);
        ClusterGraph {
            nodes,
            sim_time: 0.0,
            stress: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, node_id: usize) -> Option<usize> {
        self.nodes.binary_search_by_key(&node_id, |n| n.node_id).ok()
    }

    pub fn node(&self, node_id: usize) -> Result<&NodeState> {
        self.index_of(node_id)
            .map(|i| &self.nodes[i])
            .ok_or(Error::UnknownNode(node_id))
    }

    pub fn node_mut(&mut self, node_id: usize) -> Result<&mut NodeState> {
        match self.index_of(node_id) {
            Some(i) => Ok(&mut self.nodes[i]),
            None => Err(Error::UnknownNode(node_id)),
        }
    }

    /// Neighbours of `node_id`: every other node.
    pub fn neighbours(&self, node_id: usize) -> impl Iterator<Item = &NodeState> {
        self.nodes.iter().filter(move |n| n.node_id != node_id)
    }

    /// Recompute and store `stress`.
    pub fn refresh_stress(&mut self, weights: &StressWeights) -> Result<f64> {
        self.stress = compute_stress(self, weights)?;
        Ok(self.stress)
    }
}

/// Fault-tolerance metric: `(1 - H) / (1 + ln(1 + R))`.
pub fn metric_ft(node: &NodeState) -> f64 {
    if node.memory_pressure {
        return 0.0;
    }
    1.0 / (1.0 + (node.restarts_window as f64).ln_1p())
}

/// Mean of CPU and memory allocation fractions.
pub fn metric_util(node: &NodeState) -> Result<f64> {
    if node.cpu_capacity == 0 || node.mem_capacity == 0 {
        return Err(Error::Config(format!("node {} has zero capacity", node.node_id)));
    }
    let cpu = node.cpu_allocated as f64 / node.cpu_capacity as f64;
    let mem = node.mem_allocated as f64 / node.mem_capacity as f64;
    Ok(0.5 * (cpu + mem))
}

/// Reciprocal of the node's normalised hourly cost.
pub fn metric_cost(node: &NodeState, costs: &CostTable) -> Result<f64> {
    Ok(1.0 / costs.get(node.cost_class)?)
}

/// Global stress level L_t in [0,1].
pub fn compute_stress(g: &ClusterGraph, weights: &StressWeights) -> Result<f64> {
    if g.is_empty() {
        return Err(Error::EmptyCluster);
    }
    let n = g.len() as f64;
    let mut util = 0.0;
    let mut pressured = 0usize;
    let mut restarts = 0u64;
    for node in &g.nodes {
        util += metric_util(node)?;
        if node.memory_pressure || node.disk_pressure {
            pressured += 1;
        }
        restarts += node.restarts_window as u64;
    }
    let l = weights.utilisation * (util / n)
        + weights.pressure * (pressured as f64 / n)
        + weights.restarts * (restarts as f64 / (10.0 * n)).min(1.0);
    Ok(l.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawFeatures(pub [f64; RAW_FEATURES]);

impl RawFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Ten-entry raw feature vector for `node` within `g`.
///
/// Order: cpu alloc fraction, mem alloc fraction, cpu capacity / cluster max,
/// mem capacity / cluster max, memory pressure, disk pressure, ready, taint
/// count / 5 (capped), ln(1+R)/ln(101) (capped), global stress.
pub fn raw_features(node: &NodeState, g: &ClusterGraph) -> RawFeatures {
    let max_cpu = g.nodes.iter().map(|n| n.cpu_capacity).max().unwrap_or(0).max(node.cpu_capacity);
    let max_mem = g.nodes.iter().map(|n| n.mem_capacity).max().unwrap_or(0).max(node.mem_capacity);
    let frac = |a: u64, b: u64| if b == 0 { 0.0 } else { (a as f64 / b as f64).clamp(0.0, 1.0) };
    RawFeatures([
        frac(node.cpu_allocated, node.cpu_capacity),
        frac(node.mem_allocated, node.mem_capacity),
        frac(node.cpu_capacity, max_cpu),
        frac(node.mem_capacity, max_mem),
        flag(node.memory_pressure),
        flag(node.disk_pressure),
        flag(node.ready),
        (node.taint_count() as f64 / TAINTS_CAP).min(1.0),
        ((node.restarts_window as f64).ln_1p() / RESTARTS_CAP.ln_1p()).min(1.0),
        g.stress.clamp(0.0, 1.0),
    ])
}
