//! The two evaluation scenarios, the placement controllers, and A/B runs
//! that sample cluster metrics every 10 simulated seconds.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{FaultMode, PriorityClass};
use crate::error::{Error, Result};
use crate::lexico::{lex_select, SelectionConfig};
use crate::model::Model;
use crate::seed::{rng_stream, Stream};
use crate::sim::{baseline_policy, AdmissionCap, DeferReason, Env, EnvConfig, EventKind, NodeTarget, SimEvent};
use crate::workload::PodTemplate;

pub const SAMPLE_INTERVAL: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseWorkload {
    pub count: usize,
    pub template: PodTemplate,
    pub stress_label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaintAction {
    pub target: NodeTarget,
    pub key: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    /// Minutes from scenario start.
    pub start: f64,
    pub end: f64,
    #[serde(default)]
    pub workloads: Vec<PhaseWorkload>,
    /// Applied at the phase start.
    #[serde(default)]
    pub taints: Vec<TaintAction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub name: String,
    pub phases: Vec<Phase>,
}

impl ScenarioScript {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Config(format!("scenario {} has no phases", self.name)));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if !(p.start >= 0.0 && p.end > p.start) {
                return Err(Error::Config(format!("phase {i} of {} has an empty time range", self.name)));
            }
            if i > 0 && p.start < self.phases[i - 1].start {
                return Err(Error::Config(format!("phases of {} are not time-ordered", self.name)));
            }
            for w in &p.workloads {
                if w.count == 0 {
                    return Err(Error::Config(format!("phase {i} of {} has a zero-count workload", self.name)));
                }
                w.template.validate()?;
            }
        }
        Ok(())
    }

    /// End of the last phase, seconds.
    pub fn duration_secs(&self) -> f64 {
        self.phases.iter().map(|p| p.end).fold(0.0, f64::max) * 60.0
    }

    pub fn total_pods(&self) -> usize {
        self.phases.iter().flat_map(|p| &p.workloads).map(|w| w.count).sum()
    }

    /// Phase windows in seconds.
    pub fn windows(&self) -> Vec<(f64, f64)> {
        self.phases.iter().map(|p| (p.start * 60.0, p.end * 60.0)).collect()
    }

    /// Event schedule: arrivals drawn uniformly inside each phase window,
    /// taints at phase starts. Sorted by time.
    pub fn events<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<SimEvent> {
        let mut out = Vec::with_capacity(self.total_pods());
        for (pi, p) in self.phases.iter().enumerate() {
            let (t0, t1) = (p.start * 60.0, p.end * 60.0);
            for t in &p.taints {
                out.push(SimEvent {
                    time: t0,
                    kind: EventKind::TaintNode {
                        node: t.target.clone(),
                        key: t.key.clone(),
                    },
                });
            }
            for (wi, w) in p.workloads.iter().enumerate() {
                for k in 0..w.count {
                    let time = rng.random_range(t0..t1);
                    let pod = w.template.instantiate(format!("{}-p{}w{}-{k}", w.template.app_label, pi + 1, wi), rng);
                    out.push(SimEvent { time, kind: EventKind::PodArrival(pod) });
                }
            }
        }
        out.sort_by(|a, b| a.time.total_cmp(&b.time));
        out
    }
}

/// Cascading resource pressure: light long-lived pods, then memory-spiking
/// pods, then a heterogeneous heavy wave, then oversized batch jobs.
pub fn scenario_one() -> ScenarioScript {
    let phase = |start, end, count, template, label: &str| Phase {
        start,
        end,
        workloads: vec![PhaseWorkload {
            count,
            template,
            stress_label: label.into(),
        }],
        taints: Vec::new(),
    };
    ScenarioScript {
        name: "scenario1".into(),
        phases: vec![
            phase(0.0, 10.0, 100, PodTemplate::new("nginx", 100, 128), "Low"),
            phase(
                10.0,
                20.0,
                75,
                PodTemplate::new("stress-ng", 250, 512)
                    .with_fault(FaultMode::OomKill { spike_to: 1024, after: 300.0 })
                    .with_lifetime(600.0),
                "Medium",
            ),
            phase(20.0, 30.0, 150, PodTemplate::new("nginx-heavy", 500, 800).with_jitter(0.5).with_lifetime(120.0), "High"),
            phase(
                30.0,
                40.0,
                20,
                PodTemplate::new("batch", 1500, 2048).with_lifetime(1200.0).with_priority(PriorityClass::Batch),
                "Extreme",
            ),
        ],
    }
}

/// Volatile churn: crash-looping and OOM-killed pods, a burst of short
/// high-priority jobs, then a node taken out of the schedulable pool.
pub fn scenario_two() -> ScenarioScript {
    ScenarioScript {
        name: "scenario2".into(),
        phases: vec![
            Phase {
                start: 0.0,
                end: 30.0,
                workloads: vec![
                    PhaseWorkload {
                        count: 150,
                        template: PodTemplate::new("busybox", 50, 64).with_fault(FaultMode::LivenessFail { after: 60.0 }),
                        stress_label: "High".into(),
                    },
                    PhaseWorkload {
                        count: 120,
                        template: PodTemplate::new("stress-ng", 100, 256).with_fault(FaultMode::OomKill { spike_to: 65_536, after: 60.0 }),
                        stress_label: "High".into(),
                    },
                ],
                taints: Vec::new(),
            },
            Phase {
                start: 15.0,
                end: 30.0,
                workloads: vec![PhaseWorkload {
                    count: 50,
                    template: PodTemplate::new("burst", 1000, 1024).with_lifetime(90.0).with_priority(PriorityClass::Burst),
                    stress_label: "Extreme".into(),
                }],
                taints: Vec::new(),
            },
            Phase {
                start: 30.0,
                end: 45.0,
                workloads: Vec::new(),
                taints: vec![TaintAction {
                    target: NodeTarget::MostUtilised,
                    key: "failure-sim".into(),
                }],
            },
        ],
    }
}

pub fn scenario_by_number(n: u32) -> Result<ScenarioScript> {
    match n {
        1 => Ok(scenario_one()),
        2 => Ok(scenario_two()),
        _ => Err(Error::Config(format!("unknown scenario {n}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Agmarl,
    Baseline,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Agmarl => "agmarl",
            PolicyKind::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    Bind(usize),
    Defer(DeferReason),
}

pub enum Controller<'m> {
    Agmarl {
        model: &'m Model,
        selection: &'m SelectionConfig,
        cap: &'m AdmissionCap,
    },
    Baseline,
}

impl Controller<'_> {
    pub fn kind(&self) -> PolicyKind {
        match self {
            Controller::Agmarl { .. } => PolicyKind::Agmarl,
            Controller::Baseline => PolicyKind::Baseline,
        }
    }

    pub fn decide(&self, env: &Env, pod_id: &str) -> Result<Decision> {
        let cands = env.feasible(pod_id)?;
        if cands.is_empty() {
            return Ok(Decision::Defer(DeferReason::NoFeasibleNode));
        }
        match self {
            Controller::Baseline => {
                let pod = &env.pod(pod_id).ok_or_else(|| Error::Config(format!("unknown pod {pod_id}")))?.spec;
                Ok(Decision::Bind(baseline_policy(env.graph(), pod)?))
            }
            Controller::Agmarl { model, selection, cap } => {
                if env.admission_capped(pod_id, cap)? {
                    return Ok(Decision::Defer(DeferReason::AdmissionCap));
                }
                let scores = model.score(env.graph())?;
                let feasible = cands.iter().map(|id| (*id, scores[id])).collect();
                Ok(Decision::Bind(lex_select(&feasible, env.graph().stress, selection)?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSample {
    pub node_id: usize,
    pub cpu_capacity: u64,
    pub mem_capacity: u64,
    pub cpu_requested: u64,
    pub mem_requested: u64,
    pub util: f64,
    pub memory_pressure: bool,
    pub tainted: bool,
    /// Hourly cost rate of the node.
    pub cost: f64,
    pub pods: BTreeMap<String, u32>,
    pub cpu_by_app: BTreeMap<String, u64>,
    /// Cumulative container restarts per app on this node.
    pub restarts: BTreeMap<String, u32>,
    /// Cumulative OOM and liveness kills on this node.
    pub failures: u32,
}

impl NodeSample {
    pub fn total_restarts(&self) -> u32 {
        self.restarts.values().sum()
    }

    pub fn pod_count(&self) -> u32 {
        self.pods.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub time: f64,
    pub stress: f64,
    pub pending: usize,
    pub running: usize,
    /// Σ over elapsed intervals of interval-hours × Σ node cost rates.
    pub cost_accrued: f64,
    pub nodes: Vec<NodeSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PodOutcome {
    pub pod_id: String,
    pub app_label: String,
    pub priority_class: PriorityClass,
    pub arrival: f64,
    pub bound_at: Option<f64>,
    pub node: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFrame {
    pub scenario: String,
    pub policy: PolicyKind,
    pub seed: u64,
    pub interval: f64,
    pub duration: f64,
    /// Phase windows in seconds.
    pub phases: Vec<(f64, f64)>,
    pub samples: Vec<Sample>,
    pub pods: Vec<PodOutcome>,
    pub deferred_admission: u64,
    pub deferred_infeasible: u64,
    pub scale_ups: u32,
    pub scale_downs: u32,
}

fn sample(env: &Env, time: f64, cost_accrued: &mut f64, first: bool) -> Result<Sample> {
    let g = env.graph();
    let c = env.counters();
    let mut nodes = Vec::with_capacity(g.len());
    for n in &g.nodes {
        let mut pods = BTreeMap::new();
        let mut cpu_by_app = BTreeMap::new();
        for id in &n.pod_ids {
            let spec = &env.pod(id).expect("bound pods are registered").spec;
            *pods.entry(spec.app_label.clone()).or_insert(0) += 1;
            *cpu_by_app.entry(spec.app_label.clone()).or_insert(0) += spec.cpu_request;
        }
        let restarts = c.restarts.iter().filter(|((_, node), _)| *node == n.node_id).map(|((app, _), v)| (app.clone(), *v)).collect();
        let failures = c.failures.iter().filter(|((_, node), _)| *node == n.node_id).map(|(_, v)| *v).sum();
        nodes.push(NodeSample {
            node_id: n.node_id,
            cpu_capacity: n.cpu_capacity,
            mem_capacity: n.mem_capacity,
            cpu_requested: n.cpu_allocated,
            mem_requested: n.mem_allocated,
            util: crate::cluster::metric_util(n)?,
            memory_pressure: n.memory_pressure,
            tainted: !n.taints.is_empty(),
            cost: env.config().cost_table.get(n.cost_class)?,
            pods,
            cpu_by_app,
            restarts,
            failures,
        });
    }
    if !first {
        *cost_accrued += SAMPLE_INTERVAL / 3600.0 * nodes.iter().map(|n| n.cost).sum::<f64>();
    }
    Ok(Sample {
        time,
        stress: g.stress,
        pending: env.pending().len(),
        running: nodes.iter().map(|n| n.pod_count() as usize).sum(),
        cost_accrued: *cost_accrued,
        nodes,
    })
}

/// One complete simulation of `script` under `controller`.
pub fn run_policy(script: &ScenarioScript, controller: &Controller, env_cfg: &EnvConfig, seed: u64) -> Result<MetricsFrame> {
    run_policy_paced(script, controller, env_cfg, seed, &mut |_| {})
}

/// As [`run_policy`], calling `pace` with the simulated time before each sample.
/// Pacing only delays the caller; it never changes event order.
pub fn run_policy_paced(script: &ScenarioScript, controller: &Controller, env_cfg: &EnvConfig, seed: u64, pace: &mut dyn FnMut(f64)) -> Result<MetricsFrame> {
    script.validate()?;
    let mut env = Env::new(env_cfg.clone())?;
    for ev in script.events(&mut rng_stream(seed, Stream::Scenario)) {
        env.schedule(ev)?;
    }
    let duration = script.duration_secs();
    let steps = (duration / SAMPLE_INTERVAL).round() as usize;
    let mut samples = Vec::with_capacity(steps + 1);
    let mut cost = 0.0;
    for k in 0..=steps {
        let t = k as f64 * SAMPLE_INTERVAL;
        pace(t);
        while let Some(pod_id) = env.next_decision(t)? {
            match controller.decide(&env, &pod_id)? {
                Decision::Bind(node) => env.bind(&pod_id, node)?,
                Decision::Defer(reason) => env.defer(&pod_id, reason)?,
            }
        }
        samples.push(sample(&env, t, &mut cost, k == 0)?);
    }
    let c = env.counters();
    Ok(MetricsFrame {
        scenario: script.name.clone(),
        policy: controller.kind(),
        seed,
        interval: SAMPLE_INTERVAL,
        duration,
        phases: script.windows(),
        pods: env
            .pods()
            .map(|p| PodOutcome {
                pod_id: p.spec.pod_id.clone(),
                app_label: p.spec.app_label.clone(),
                priority_class: p.spec.priority_class,
                arrival: p.arrival,
                bound_at: p.bound_at,
                node: p.node,
            })
            .collect(),
        deferred_admission: c.deferred_admission,
        deferred_infeasible: c.deferred_infeasible,
        scale_ups: c.scale_ups,
        scale_downs: c.scale_downs,
        samples,
    })
}

/// AGMARL and baseline runs over the same event schedule.
pub fn run_ab(script: &ScenarioScript, model: &Model, selection: &SelectionConfig, cap: &AdmissionCap, env_cfg: &EnvConfig, seed: u64) -> Result<(MetricsFrame, MetricsFrame)> {
    run_ab_paced(script, model, selection, cap, env_cfg, seed, &mut |_| {})
}

pub fn run_ab_paced(
    script: &ScenarioScript,
    model: &Model,
    selection: &SelectionConfig,
    cap: &AdmissionCap,
    env_cfg: &EnvConfig,
    seed: u64,
    pace: &mut dyn FnMut(f64),
) -> Result<(MetricsFrame, MetricsFrame)> {
    if model.gnn.input_dim() != crate::cluster::RAW_FEATURES {
        return Err(Error::Shape(format!("model expects {} raw features", model.gnn.input_dim())));
    }
    let agmarl = run_policy_paced(script, &Controller::Agmarl { model, selection, cap }, env_cfg, seed, pace)?;
    let baseline = run_policy_paced(script, &Controller::Baseline, env_cfg, seed, pace)?;
    Ok((agmarl, baseline))
}
