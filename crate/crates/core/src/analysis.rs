//! Comparison artefacts computed from metric frames: distribution and
//! restart matrices, per-phase utilisation, correlations, summary scalars.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::PriorityClass;
use crate::error::{Error, Result};
use crate::scenario::{MetricsFrame, PolicyKind, Sample};
use crate::svg;

pub const CORRELATION_COLUMNS: [&str; 5] = ["cpu_requested", "mem_requested_gb", "failures", "restarts", "cost"];

/// Pearson correlation, `None` when either column has zero variance or
/// fewer than two points. Accumulates co-moments in one pass.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (mut mx, mut my, mut cxx, mut cyy, mut cxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (k, (&a, &b)) in x.iter().zip(y).enumerate() {
        let n = (k + 1) as f64;
        let dx = a - mx;
        let dy = b - my;
        mx += dx / n;
        my += dy / n;
        cxx += dx * (a - mx);
        cyy += dy * (b - my);
        cxy += dx * (b - my);
    }
    if cxx <= 0.0 || cyy <= 0.0 {
        return None;
    }
    Some((cxy / (cxx * cyy).sqrt()).clamp(-1.0, 1.0))
}

pub fn population_std(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub columns: Vec<String>,
    /// `None` marks an undefined entry.
    pub values: Vec<Vec<Option<f64>>>,
}

impl CorrelationMatrix {
    pub fn from_rows(columns: &[&str], rows: &[Vec<f64>]) -> Self {
        let cols: Vec<Vec<f64>> = (0..columns.len()).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
        let mut values = vec![vec![None; columns.len()]; columns.len()];
        for i in 0..columns.len() {
            for j in i..columns.len() {
                let r = if i == j { pearson(&cols[i], &cols[i]).map(|_| 1.0) } else { pearson(&cols[i], &cols[j]) };
                values[i][j] = r;
                values[j][i] = r;
            }
        }
        CorrelationMatrix {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            values,
        }
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.columns.iter().position(|c| c == a)?;
        let j = self.columns.iter().position(|c| c == b)?;
        self.values[i][j]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSnapshot {
    pub phase: usize,
    pub time: f64,
    pub util: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Mean over last-phase samples of the node-utilisation standard deviation.
    pub packing_index: f64,
    pub max_restarts_per_node: u32,
    pub max_restarts_by_app: BTreeMap<String, u32>,
    /// First Burst arrival until no Burst pod is pending; unbound pods count
    /// until the end of the run.
    pub burst_clearance_secs: Option<f64>,
    pub burst_mean_wait_secs: Option<f64>,
    pub total_cost: f64,
    pub deferred_admission: u64,
    pub pods_bound: usize,
    pub pods_never_bound: usize,
}

impl Summary {
    /// Flat scalar view used for multi-seed aggregation.
    pub fn scalars(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::from([
            ("packing_index".to_string(), self.packing_index),
            ("max_restarts_per_node".to_string(), self.max_restarts_per_node as f64),
            ("total_cost".to_string(), self.total_cost),
            ("deferred_admission".to_string(), self.deferred_admission as f64),
            ("pods_bound".to_string(), self.pods_bound as f64),
            ("pods_never_bound".to_string(), self.pods_never_bound as f64),
        ]);
        if let Some(v) = self.burst_clearance_secs {
            m.insert("burst_clearance_secs".into(), v);
        }
        if let Some(v) = self.burst_mean_wait_secs {
            m.insert("burst_mean_wait_secs".into(), v);
        }
        for (app, v) in &self.max_restarts_by_app {
            m.insert(format!("max_restarts_per_node.{app}"), *v as f64);
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisBundle {
    pub scenario: String,
    pub policy: PolicyKind,
    pub seed: u64,
    /// app → node → running pods at the end of the run.
    pub distribution: BTreeMap<String, BTreeMap<usize, u32>>,
    /// node → app → requested mCPU at the end of the run.
    pub cpu_by_app: BTreeMap<usize, BTreeMap<String, u64>>,
    pub phase_util: Vec<PhaseSnapshot>,
    /// app → node → cumulative restarts.
    pub restart_heatmap: BTreeMap<String, BTreeMap<usize, u32>>,
    pub correlation: CorrelationMatrix,
    /// One row per (sample, node), columns as `CORRELATION_COLUMNS`.
    pub scatter: Vec<Vec<f64>>,
    pub summary: Summary,
}

fn last_sample_at_or_before(samples: &[Sample], t: f64) -> Option<&Sample> {
    samples.iter().rev().find(|s| s.time <= t)
}

fn correlation_rows(frame: &MetricsFrame) -> Vec<Vec<f64>> {
    frame
        .samples
        .iter()
        .skip(1)
        .flat_map(|s| {
            s.nodes.iter().map(|n| {
                vec![
                    n.cpu_requested as f64,
                    n.mem_requested as f64 / 1024.0,
                    n.failures as f64,
                    n.total_restarts() as f64,
                    n.cost,
                ]
            })
        })
        .collect()
}

fn summarize(frame: &MetricsFrame, restarts: &BTreeMap<String, BTreeMap<usize, u32>>) -> Summary {
    let (p0, p1) = frame.phases.last().copied().unwrap_or((0.0, frame.duration));
    let stds: Vec<f64> = frame
        .samples
        .iter()
        .filter(|s| s.time >= p0 && s.time <= p1)
        .map(|s| population_std(&s.nodes.iter().map(|n| n.util).collect::<Vec<_>>()))
        .collect();
    let packing_index = if stds.is_empty() { 0.0 } else { stds.iter().sum::<f64>() / stds.len() as f64 };

    let mut per_node: BTreeMap<usize, u32> = BTreeMap::new();
    for by_node in restarts.values() {
        for (node, v) in by_node {
            *per_node.entry(*node).or_default() += v;
        }
    }
    let max_restarts_by_app = restarts.iter().map(|(app, m)| (app.clone(), m.values().copied().max().unwrap_or(0))).collect();

    let burst: Vec<_> = frame.pods.iter().filter(|p| p.priority_class == PriorityClass::Burst).collect();
    let (burst_clearance_secs, burst_mean_wait_secs) = if burst.is_empty() {
        (None, None)
    } else {
        let first = burst.iter().map(|p| p.arrival).fold(f64::INFINITY, f64::min);
        let done = burst.iter().map(|p| p.bound_at.unwrap_or(frame.duration)).fold(f64::NEG_INFINITY, f64::max);
        let wait = burst.iter().map(|p| p.bound_at.unwrap_or(frame.duration) - p.arrival).sum::<f64>() / burst.len() as f64;
        (Some(done - first), Some(wait))
    };

    Summary {
        packing_index,
        max_restarts_per_node: per_node.values().copied().max().unwrap_or(0),
        max_restarts_by_app,
        burst_clearance_secs,
        burst_mean_wait_secs,
        total_cost: frame.samples.last().map_or(0.0, |s| s.cost_accrued),
        deferred_admission: frame.deferred_admission,
        pods_bound: frame.pods.iter().filter(|p| p.bound_at.is_some()).count(),
        pods_never_bound: frame.pods.iter().filter(|p| p.bound_at.is_none()).count(),
    }
}

pub fn analyze_frame(frame: &MetricsFrame) -> Result<AnalysisBundle> {
    let end = frame.samples.last().ok_or_else(|| Error::Config(format!("frame {} has no samples", frame.scenario)))?;
    let mut distribution: BTreeMap<String, BTreeMap<usize, u32>> = BTreeMap::new();
    let mut cpu_by_app = BTreeMap::new();
    let mut restart_heatmap: BTreeMap<String, BTreeMap<usize, u32>> = BTreeMap::new();
    for n in &end.nodes {
        for (app, c) in &n.pods {
            distribution.entry(app.clone()).or_default().insert(n.node_id, *c);
        }
        for (app, r) in &n.restarts {
            restart_heatmap.entry(app.clone()).or_default().insert(n.node_id, *r);
        }
        cpu_by_app.insert(n.node_id, n.cpu_by_app.clone());
    }
    let phase_util = frame
        .phases
        .iter()
        .enumerate()
        .filter_map(|(i, &(_, t1))| {
            last_sample_at_or_before(&frame.samples, t1).map(|s| PhaseSnapshot {
                phase: i + 1,
                time: s.time,
                util: s.nodes.iter().map(|n| (n.node_id, n.util)).collect(),
            })
        })
        .collect();
    let scatter = correlation_rows(frame);
    Ok(AnalysisBundle {
        scenario: frame.scenario.clone(),
        policy: frame.policy,
        seed: frame.seed,
        correlation: CorrelationMatrix::from_rows(&CORRELATION_COLUMNS, &scatter),
        summary: summarize(frame, &restart_heatmap),
        distribution,
        cpu_by_app,
        phase_util,
        restart_heatmap,
        scatter,
    })
}

pub fn analyze(frames: &[MetricsFrame]) -> Result<Vec<AnalysisBundle>> {
    if frames.is_empty() {
        return Err(Error::Config("nothing to analyze".into()));
    }
    frames.iter().map(analyze_frame).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub stdev: f64,
    pub n: usize,
}

/// Mean and sample standard deviation of every scalar present in the
/// summaries (stdev 0 for a single run).
pub fn aggregate(summaries: &[Summary]) -> BTreeMap<String, MeanStd> {
    let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in summaries {
        for (k, v) in s.scalars() {
            cols.entry(k).or_default().push(v);
        }
    }
    cols.into_iter()
        .map(|(k, v)| {
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let stdev = if n < 2 { 0.0 } else { (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt() };
            (k, MeanStd { mean, stdev, n })
        })
        .collect()
}

pub fn artefact_stem(frame_scenario: &str, policy: PolicyKind, seed: u64) -> String {
    format!("{frame_scenario}_{}_{seed}", policy.name())
}

fn matrix_csv(path: &Path, row_label: &str, m: &BTreeMap<String, BTreeMap<usize, u32>>, nodes: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![row_label.to_string()];
    header.extend(nodes.iter().map(|n| format!("node{n}")));
    w.write_record(&header)?;
    for (app, row) in m {
        let mut rec = vec![app.clone()];
        rec.extend(nodes.iter().map(|n| row.get(n).copied().unwrap_or(0).to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One CSV row per sample per node.
pub fn write_frame_csv(frame: &MetricsFrame, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "time",
        "node_id",
        "cpu_requested",
        "mem_requested",
        "util",
        "pods",
        "restarts",
        "failures",
        "memory_pressure",
        "tainted",
        "stress",
        "pending",
        "running",
        "cost_accrued",
    ])?;
    for s in &frame.samples {
        for n in &s.nodes {
            w.write_record([
                s.time.to_string(),
                n.node_id.to_string(),
                n.cpu_requested.to_string(),
                n.mem_requested.to_string(),
                n.util.to_string(),
                n.pod_count().to_string(),
                n.total_restarts().to_string(),
                n.failures.to_string(),
                n.memory_pressure.to_string(),
                n.tainted.to_string(),
                s.stress.to_string(),
                s.pending.to_string(),
                s.running.to_string(),
                s.cost_accrued.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_frame_json(frame: &MetricsFrame, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_vec(frame)?)?;
    Ok(())
}

pub fn load_frame_json(path: &Path) -> Result<MetricsFrame> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Writes the frame and every artefact of its bundle under `dir`; returns
/// the paths written.
pub fn write_artefacts(dir: &Path, frame: &MetricsFrame, b: &AnalysisBundle) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let stem = artefact_stem(&frame.scenario, frame.policy, frame.seed);
    let p = |suffix: &str| dir.join(format!("{stem}_{suffix}"));
    let mut written = Vec::new();
    let nodes: Vec<usize> = b.cpu_by_app.keys().copied().collect();

    write_frame_csv(frame, &p("frame.csv"))?;
    written.push(p("frame.csv"));
    save_frame_json(frame, &p("frame.json"))?;
    written.push(p("frame.json"));
    matrix_csv(&p("distribution.csv"), "app", &b.distribution, &nodes)?;
    written.push(p("distribution.csv"));
    matrix_csv(&p("restarts.csv"), "app", &b.restart_heatmap, &nodes)?;
    written.push(p("restarts.csv"));

    let cpu: BTreeMap<String, BTreeMap<usize, u32>> = {
        let mut m: BTreeMap<String, BTreeMap<usize, u32>> = BTreeMap::new();
        for (node, apps) in &b.cpu_by_app {
            for (app, v) in apps {
                m.entry(app.clone()).or_default().insert(*node, *v as u32);
            }
        }
        m
    };
    matrix_csv(&p("cpu_by_app.csv"), "app", &cpu, &nodes)?;
    written.push(p("cpu_by_app.csv"));

    {
        let mut w = csv::Writer::from_path(p("phase_util.csv"))?;
        w.write_record(["phase", "time", "node_id", "util"])?;
        for s in &b.phase_util {
            for (node, u) in &s.util {
                w.write_record([s.phase.to_string(), s.time.to_string(), node.to_string(), u.to_string()])?;
            }
        }
        w.flush()?;
        written.push(p("phase_util.csv"));
    }
    {
        let mut w = csv::Writer::from_path(p("correlation.csv"))?;
        let mut header = vec![String::new()];
        header.extend(b.correlation.columns.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in b.correlation.columns.iter().zip(&b.correlation.values) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| v.map_or_else(|| "undefined".to_string(), |x| x.to_string())));
            w.write_record(&rec)?;
        }
        w.flush()?;
        written.push(p("correlation.csv"));
    }
    {
        let mut w = csv::Writer::from_path(p("scatter.csv"))?;
        w.write_record(CORRELATION_COLUMNS)?;
        for r in &b.scatter {
            w.write_record(r.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        written.push(p("scatter.csv"));
    }

    let title = format!("{} {}", frame.scenario, frame.policy.name());
    std::fs::write(p("distribution.svg"), svg::heatmap(&format!("{title}: pods per node"), &b.distribution, &nodes))?;
    written.push(p("distribution.svg"));
    std::fs::write(p("restarts.svg"), svg::heatmap(&format!("{title}: restarts per node"), &b.restart_heatmap, &nodes))?;
    written.push(p("restarts.svg"));
    std::fs::write(p("cpu_by_app.svg"), svg::stacked_bars(&format!("{title}: requested mCPU"), &b.cpu_by_app))?;
    written.push(p("cpu_by_app.svg"));
    std::fs::write(p("scatter.svg"), svg::scatter_grid(&title, &CORRELATION_COLUMNS, &b.scatter))?;
    written.push(p("scatter.svg"));
    Ok(written)
}
