//! Command implementations behind the `agmarl` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use agmarl_core::analysis::{aggregate, analyze_frame, load_frame_json, write_artefacts, MeanStd, Summary};
use agmarl_core::cluster::{CostTable, StressWeights};
use agmarl_core::lexico::SelectionConfig;
use agmarl_core::model::Model;
use agmarl_core::scenario::{run_ab_paced, scenario_by_number, MetricsFrame};
use agmarl_core::sim::{AdmissionCap, ClusterConfig, Env, EnvConfig};
use agmarl_core::training::{init_model, save_log_csv, train, EpisodeLog, Hyperparams};
use agmarl_core::workload::TrainingWorkload;
use agmarl_extender::{Extender, ExtenderConfig, Registry};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("cannot load weights: {0}")]
    Weights(String),
    #[error("no metric frames found in {0}")]
    EmptyMetrics(PathBuf),
    #[error("{0}")]
    Divergence(String),
    #[error("port {0} is already in use")]
    PortBusy(u16),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Weights(_) | CliError::EmptyMetrics(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::PortBusy(_) => 4,
            CliError::Usage(_) => 64,
            CliError::Other(_) => 1,
        }
    }
}

fn other(e: impl std::fmt::Display) -> CliError {
    CliError::Other(e.to_string())
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalConfig {
    pub hyperparams: Hyperparams,
    pub selection: SelectionConfig,
    pub cluster: ClusterConfig,
    pub cost_table: CostTable,
    pub stress_weights: StressWeights,
    pub admission_cap: AdmissionCap,
    pub workload: TrainingWorkload,
    /// FT floor used by the extender's filter verb under High stress.
    pub ft_floor: f64,
    pub output_dir: PathBuf,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        GlobalConfig {
            hyperparams: Hyperparams::default(),
            selection: SelectionConfig::default(),
            cluster: ClusterConfig::default(),
            cost_table: CostTable::default(),
            stress_weights: StressWeights::default(),
            admission_cap: AdmissionCap::default(),
            workload: TrainingWorkload::default(),
            ft_floor: ExtenderConfig::default().ft_floor,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl GlobalConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg: GlobalConfig = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.hyperparams.validate().map_err(config_err)?;
        self.selection.validate().map_err(config_err)?;
        self.cluster.validate().map_err(config_err)?;
        self.cost_table.validate().map_err(config_err)?;
        self.workload.validate().map_err(config_err)?;
        let w = &self.stress_weights;
        if [w.utilisation, w.pressure, w.restarts].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(CliError::Config("stress weights must be finite and non-negative".into()));
        }
        let c = &self.admission_cap;
        if !(c.fraction > 0.0 && c.fraction <= 1.0) || !(c.restart_rate_per_min >= 0.0) {
            return Err(CliError::Config("admission cap fraction must be in (0,1] and the rate non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.ft_floor) {
            return Err(CliError::Config(format!("ft_floor {} outside [0,1]", self.ft_floor)));
        }
        Ok(())
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            cluster: self.cluster.clone(),
            cost_table: self.cost_table.clone(),
            stress_weights: self.stress_weights,
        }
    }

    pub fn extender_config(&self) -> ExtenderConfig {
        ExtenderConfig {
            selection: self.selection.clone(),
            stress_weights: self.stress_weights,
            ft_floor: self.ft_floor,
        }
    }
}

pub fn load_weights(path: &Path) -> Result<Model, CliError> {
    Model::load(path).map_err(|e| CliError::Weights(format!("{}: {e}", path.display())))
}

/// Training log written next to the weights: `w.agmw` → `w.log.csv`.
pub fn log_path(weights: &Path) -> PathBuf {
    weights.with_extension("log.csv")
}

pub fn cmd_train(cfg: &GlobalConfig, seed: u64, out: &Path) -> Result<Vec<EpisodeLog>, CliError> {
    let env_cfg = cfg.env_config();
    let model = init_model(&env_cfg, seed).map_err(config_err)?;
    let (model, log) = train(model, &env_cfg, &cfg.workload, &cfg.hyperparams, &cfg.selection, seed).map_err(|e| match e {
        agmarl_core::Error::Divergence(m) => CliError::Divergence(format!("training diverged: {m}")),
        agmarl_core::Error::Config(m) => CliError::Config(m),
        e => other(e),
    })?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(other)?;
    }
    model.save(out).map_err(other)?;
    save_log_csv(&log, log_path(out)).map_err(other)?;
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbSummary {
    pub scenario: String,
    pub seed: u64,
    pub agmarl: Summary,
    pub baseline: Summary,
}

pub fn summary_path(outdir: &Path, scenario: u32, seed: u64) -> PathBuf {
    outdir.join(format!("scenario{scenario}_{seed}_summary.json"))
}

pub struct EvaluateArgs<'a> {
    pub scenario: u32,
    pub weights: &'a Path,
    pub seed: u64,
    pub seeds: usize,
    pub outdir: &'a Path,
    /// Simulated seconds per wall-clock second; `None` runs unpaced.
    pub time_scale: Option<f64>,
}

pub fn cmd_evaluate(cfg: &GlobalConfig, a: &EvaluateArgs) -> Result<Vec<AbSummary>, CliError> {
    let script = scenario_by_number(a.scenario).map_err(|_| CliError::Usage(format!("scenario must be 1 or 2, got {}", a.scenario)))?;
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    if let Some(s) = a.time_scale {
        if !(s > 0.0 && s.is_finite()) {
            return Err(CliError::Usage(format!("--time-scale must be positive, got {s}")));
        }
    }
    let model = load_weights(a.weights)?;
    let env_cfg = cfg.env_config();
    std::fs::create_dir_all(a.outdir).map_err(other)?;
    let mut out = Vec::new();
    for seed in a.seed..a.seed + a.seeds as u64 {
        let start = Instant::now();
        let mut pace = |t: f64| {
            if let Some(scale) = a.time_scale {
                let due = Duration::from_secs_f64(t / scale);
                if let Some(wait) = due.checked_sub(start.elapsed()) {
                    std::thread::sleep(wait);
                }
            }
        };
        let (x, y) = run_ab_paced(&script, &model, &cfg.selection, &cfg.admission_cap, &env_cfg, seed, &mut pace).map_err(|e| match e {
            agmarl_core::Error::Shape(m) => CliError::Weights(m),
            e => other(e),
        })?;
        let mut sums = Vec::with_capacity(2);
        for frame in [&x, &y] {
            let b = analyze_frame(frame).map_err(other)?;
            write_artefacts(a.outdir, frame, &b).map_err(other)?;
            sums.push(b.summary);
        }
        let baseline = sums.pop().expect("two frames");
        let agmarl = sums.pop().expect("two frames");
        let s = AbSummary { scenario: script.name.clone(), seed, agmarl, baseline };
        let path = summary_path(a.outdir, a.scenario, seed);
        std::fs::write(&path, serde_json::to_string_pretty(&s).map_err(other)? + "\n").map_err(other)?;
        log::info!("wrote {}", path.display());
        out.push(s);
    }
    Ok(out)
}

/// Aggregated scalars keyed by `"{scenario}/{policy}"`.
pub type Report = BTreeMap<String, BTreeMap<String, MeanStd>>;

pub fn frame_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let rd = std::fs::read_dir(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
    let mut v: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("_frame.json")))
        .collect();
    v.sort();
    Ok(v)
}

pub fn cmd_report(dir: &Path) -> Result<Report, CliError> {
    let files = frame_files(dir)?;
    if files.is_empty() {
        return Err(CliError::EmptyMetrics(dir.to_path_buf()));
    }
    let mut groups: BTreeMap<String, Vec<Summary>> = BTreeMap::new();
    for f in &files {
        let frame: MetricsFrame = load_frame_json(f).map_err(|e| CliError::Config(format!("{}: {e}", f.display())))?;
        let b = analyze_frame(&frame).map_err(other)?;
        groups.entry(format!("{}/{}", frame.scenario, frame.policy.name())).or_default().push(b.summary);
    }
    let report: Report = groups.iter().map(|(k, v)| (k.clone(), aggregate(v))).collect();
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report).map_err(other)? + "\n").map_err(other)?;
    Ok(report)
}

pub fn format_report(r: &Report) -> String {
    let mut s = String::new();
    for (group, scalars) in r {
        s.push_str(group);
        s.push('\n');
        for (name, m) in scalars {
            s.push_str(&format!("  {name}: {:.4} ± {:.4} (n={})\n", m.mean, m.stdev, m.n));
        }
    }
    s
}

/// Extender over the configured cluster's initial node set.
pub fn build_extender(cfg: &GlobalConfig, weights: &Path) -> Result<Extender, CliError> {
    let model = load_weights(weights)?;
    let env = Env::new(cfg.env_config()).map_err(config_err)?;
    let registry = Registry::new(env.graph().clone(), &cfg.stress_weights).map_err(config_err)?;
    Ok(Extender::new(model, registry, cfg.extender_config(), Some(weights.to_path_buf())))
}

pub fn cmd_serve(cfg: &GlobalConfig, weights: &Path, port: u16) -> Result<(), CliError> {
    let ext = Arc::new(build_extender(cfg, weights)?);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(other)?;
    rt.block_on(async move {
        let listener = agmarl_extender::bind(port).await.map_err(|e| match e.kind() {
            std::io::ErrorKind::AddrInUse => CliError::PortBusy(port),
            _ => other(e),
        })?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        agmarl_extender::serve(listener, ext, shutdown).await.map_err(other)
    })
}
