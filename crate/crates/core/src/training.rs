//! Experience replay, the shared reward, and the MADDPG training loop.
//!
//! Stored transitions keep raw graph snapshots. Embeddings are recomputed
//! inside every update with the current encoder; the encoder learns only
//! through the actor objective, the critics see embeddings as constants.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::agent::{ActionScores, CriticBatch, ACTIONS, OBS_ACT};
use crate::autodiff::{Adam, Gradients, Mlp, NodeId, ParamStore, Tape, Tensor};
use crate::cluster::{metric_cost, metric_ft, metric_util, raw_features, ClusterGraph, CostTable, PodSpec, RAW_FEATURES};
use crate::error::{Error, Result};
use crate::gnn::{GnnEncoder, OBSERVATION};
use crate::lexico::{lex_select, regime_of, SelectionConfig, StressRegime};
use crate::model::Model;
use crate::seed::{rng_stream, Stream};
use crate::sim::{DeferReason, Env, EnvConfig};
use crate::workload::TrainingWorkload;

pub const SCORE_FLOOR: f64 = 0.001;
pub const SCORE_CEIL: f64 = 0.999;
const LR_WINDOW: usize = 20;
const LR_MIN_GAIN: f64 = 1e-3;
const LR_MAX_HALVINGS: i32 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: ClusterGraph,
    pub joint_scores: BTreeMap<usize, ActionScores>,
    pub winner: usize,
    pub pod: PodSpec,
    pub reward: f64,
    pub next_state: ClusterGraph,
    pub stress: f64,
}

/// Copy of `g` without the per-node pod lists, which learning never reads.
pub fn snapshot(g: &ClusterGraph) -> ClusterGraph {
    let mut s = g.clone();
    s.nodes.iter_mut().for_each(|n| n.pod_ids = Vec::new());
    s
}

pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    head: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, rng: ChaCha8Rng) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            items: Vec::new(),
            head: 0,
            rng,
        })
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
        }
        self.head = (self.head + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// `k` distinct indices, uniformly.
    pub fn sample_indices(&mut self, k: usize) -> Result<Vec<usize>> {
        if k > self.items.len() {
            return Err(Error::OutOfRange(format!("sample of {k} from {}", self.items.len())));
        }
        Ok(index::sample(&mut self.rng, self.items.len(), k).into_vec())
    }
}

/// `(1/3)·Σ (a − m*)²`, the accuracy penalty inside the reward.
pub fn mse_term(a: &ActionScores, realized: &[f64; 3]) -> f64 {
    a.0.iter().zip(realized).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 3.0
}

pub fn compute_reward(a: &ActionScores, realized: &[f64; 3], bonus: f64) -> f64 {
    -mse_term(a, realized) + bonus
}

/// `[ft, util, cost / max cost over the cluster]` at `winner`.
pub fn realized_metrics(g: &ClusterGraph, winner: usize, costs: &CostTable) -> Result<[f64; 3]> {
    let node = g.node(winner)?;
    let mut max_cost = 0.0f64;
    for n in &g.nodes {
        max_cost = max_cost.max(metric_cost(n, costs)?);
    }
    Ok([metric_ft(node), metric_util(node)?, metric_cost(node, costs)? / max_cost])
}

/// Independent Gaussian noise per score, clamped to [0.001, 0.999].
pub fn explore_scores<R: Rng + ?Sized>(a: &ActionScores, sigma: f64, rng: &mut R) -> Result<ActionScores> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::OutOfRange(format!("noise sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(*a);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::OutOfRange(e.to_string()))?;
    let mut out = a.0;
    for v in &mut out {
        *v = (*v + normal.sample(rng)).clamp(SCORE_FLOOR, SCORE_CEIL);
    }
    Ok(ActionScores(out))
}

/// Learning rate after reward stagnation: halved once per complete
/// 20-episode window whose mean reward fails to beat the previous window's
/// by 1e-3, never below `base/16`.
pub fn adaptive_lr(base_lr: f64, reward_history: &[f64]) -> f64 {
    let means: Vec<f64> = reward_history.chunks_exact(LR_WINDOW).map(|w| w.iter().sum::<f64>() / LR_WINDOW as f64).collect();
    let halvings = means.windows(2).filter(|w| w[1] - w[0] < LR_MIN_GAIN).count() as i32;
    base_lr * 0.5f64.powi(halvings.min(LR_MAX_HALVINGS))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardMode {
    /// Negative prediction error plus the placement bonus.
    NegMse,
    /// Stress-weighted sum of realized metrics, for ablations.
    Composite { weights: BTreeMap<StressRegime, [f64; 3]> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub gamma: f64,
    pub tau: f64,
    pub bonus: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gnn_lr: f64,
    pub noise_sigma: f64,
    pub noise_decay: f64,
    pub episodes: usize,
    pub steps: usize,
    /// Run one update every this many stored transitions.
    pub train_every: usize,
    pub reward: RewardMode,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            gamma: 0.99,
            tau: 0.01,
            bonus: 0.1,
            batch_size: 64,
            buffer_capacity: 50_000,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            gnn_lr: 1e-4,
            noise_sigma: 0.1,
            noise_decay: 0.999,
            episodes: 500,
            steps: 200,
            train_every: 1,
            reward: RewardMode::NegMse,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must be in [0,1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must be in (0,1]");
        }
        if !(self.bonus >= 0.0) {
            return bad("bonus must be non-negative");
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.steps == 0 || self.train_every == 0 {
            return bad("batch_size, buffer_capacity, steps and train_every must be positive");
        }
        if [self.actor_lr, self.critic_lr, self.gnn_lr].iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return bad("learning rates must be positive");
        }
        if !(self.noise_sigma >= 0.0) || !(self.noise_decay > 0.0 && self.noise_decay <= 1.0) {
            return bad("noise_sigma must be >= 0 and noise_decay in (0,1]");
        }
        if let RewardMode::Composite { weights } = &self.reward {
            if StressRegime::ALL.iter().any(|r| !weights.contains_key(r)) {
                return bad("composite reward needs weights for every regime");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub mean_reward: f64,
    pub mse_term: f64,
    pub critic_loss: f64,
    pub stress_mean: f64,
    pub lr: f64,
}

pub fn write_log_csv<W: Write>(log: &[EpisodeLog], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for row in log {
        wr.serialize(row)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn save_log_csv(log: &[EpisodeLog], path: impl AsRef<Path>) -> Result<()> {
    write_log_csv(log, std::fs::File::create(path)?)
}

/// Node rows of several graphs stacked for one encoder pass.
#[derive(Debug, Clone)]
struct Stacked {
    x: Tensor,
    segs: Vec<usize>,
    node_ids: Vec<usize>,
    /// First row of each graph, plus a final end marker.
    starts: Vec<usize>,
}

impl Stacked {
    fn new<'g>(graphs: impl Iterator<Item = &'g ClusterGraph>) -> Self {
        let (mut data, mut segs, mut node_ids, mut starts) = (Vec::new(), Vec::new(), Vec::new(), vec![0]);
        for (b, g) in graphs.enumerate() {
            for n in &g.nodes {
                data.extend_from_slice(&raw_features(n, g).0);
                segs.push(b);
                node_ids.push(n.node_id);
            }
            starts.push(node_ids.len());
        }
        Stacked {
            x: Tensor::from_parts(vec![node_ids.len(), RAW_FEATURES], data),
            segs,
            node_ids,
            starts,
        }
    }

    fn rows_of(&self, b: usize) -> std::ops::Range<usize> {
        self.starts[b]..self.starts[b + 1]
    }

    fn row_of(&self, b: usize, node_id: usize) -> Option<usize> {
        self.rows_of(b).find(|&r| self.node_ids[r] == node_id)
    }
}

fn observations(gnn: &GnnEncoder, s: &Stacked) -> Result<Vec<[f64; OBSERVATION]>> {
    let e = gnn.embed(&s.x, &s.segs)?;
    Ok((0..s.node_ids.len())
        .map(|r| {
            let mut o = [0.0; OBSERVATION];
            o[..RAW_FEATURES].copy_from_slice(s.x.row_slice(r));
            o[RAW_FEATURES..].copy_from_slice(e.row_slice(r));
            o
        })
        .collect())
}

fn join_raw(o: &[f64; OBSERVATION], a: &ActionScores) -> [f64; OBS_ACT] {
    let mut r = [0.0; OBS_ACT];
    r[..OBSERVATION].copy_from_slice(o);
    r[OBSERVATION..].copy_from_slice(&a.0);
    r
}

/// A sampled minibatch with observations and target actions precomputed.
pub struct PreparedBatch {
    s: Stacked,
    n: Stacked,
    obs_s: Vec<[f64; OBSERVATION]>,
    obs_n: Vec<[f64; OBSERVATION]>,
    act_s: Vec<ActionScores>,
    act_n: Vec<ActionScores>,
    rewards: Vec<f64>,
}

impl PreparedBatch {
    pub fn new(model: &Model, batch: &[&Transition]) -> Result<Self> {
        let s = Stacked::new(batch.iter().map(|t| &t.state));
        let n = Stacked::new(batch.iter().map(|t| &t.next_state));
        let obs_s = observations(&model.gnn, &s)?;
        let obs_n = observations(&model.gnn, &n)?;
        let mut act_s = Vec::with_capacity(obs_s.len());
        for (b, t) in batch.iter().enumerate() {
            for r in s.rows_of(b) {
                let id = s.node_ids[r];
                act_s.push(*t.joint_scores.get(&id).ok_or_else(|| Error::Config(format!("transition lacks scores for node {id}")))?);
            }
        }
        // target actions, grouped by agent slot for batched inference
        let mut act_n = vec![ActionScores([0.0; ACTIONS]); obs_n.len()];
        let mut by_slot: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (r, &id) in n.node_ids.iter().enumerate() {
            by_slot.entry(model.agent_index(id)).or_default().push(r);
        }
        for (slot, rows) in by_slot {
            let x = Tensor::from_parts(vec![rows.len(), OBSERVATION], rows.iter().flat_map(|&r| obs_n[r]).collect());
            let y = model.agents[slot].target_actor.infer(&x)?;
            for (i, &r) in rows.iter().enumerate() {
                act_n[r] = ActionScores::from_slice(y.row_slice(i))?;
            }
        }
        Ok(PreparedBatch {
            rewards: batch.iter().map(|t| t.reward).collect(),
            s,
            n,
            obs_s,
            obs_n,
            act_s,
            act_n,
        })
    }

    /// Rows of the current states owned by agent `slot`, as (graph, row).
    fn own_rows(&self, model: &Model, slot: usize) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for b in 0..self.rewards.len() {
            for r in self.s.rows_of(b) {
                if model.agent_index(self.s.node_ids[r]) == slot {
                    v.push((b, r));
                }
            }
        }
        v
    }

    fn others(st: &Stacked, obs: &[[f64; OBSERVATION]], act: &[ActionScores], samples: &[(usize, usize)]) -> Vec<(usize, [f64; OBS_ACT])> {
        let mut v = Vec::new();
        for (q, &(b, r)) in samples.iter().enumerate() {
            for r2 in st.rows_of(b) {
                if r2 != r {
                    v.push((q, join_raw(&obs[r2], &act[r2])));
                }
            }
        }
        v
    }

    fn critic_input(&self, samples: &[(usize, usize)]) -> CriticBatch {
        CriticBatch::new(
            samples.iter().map(|&(_, r)| join_raw(&self.obs_s[r], &self.act_s[r])).collect(),
            Self::others(&self.s, &self.obs_s, &self.act_s, samples),
        )
    }

    /// TD targets `r + γ·Q′(s′, μ′(o′))` for the samples of `slot`. A node
    /// missing from the next state contributes no bootstrap term.
    pub fn targets(&self, model: &Model, slot: usize, gamma: f64) -> Result<Vec<f64>> {
        let samples = self.own_rows(model, slot);
        let mut y: Vec<f64> = samples.iter().map(|&(b, _)| self.rewards[b]).collect();
        let next: Vec<(usize, (usize, usize))> = samples
            .iter()
            .enumerate()
            .filter_map(|(q, &(b, r))| self.n.row_of(b, self.s.node_ids[r]).map(|r2| (q, (b, r2))))
            .collect();
        if gamma > 0.0 && !next.is_empty() {
            let pairs: Vec<(usize, usize)> = next.iter().map(|&(_, p)| p).collect();
            let batch = CriticBatch::new(
                pairs.iter().map(|&(_, r)| join_raw(&self.obs_n[r], &self.act_n[r])).collect(),
                Self::others(&self.n, &self.obs_n, &self.act_n, &pairs),
            );
            let q = model.agents[slot].target_critic.q_values(&batch)?;
            for ((i, _), qv) in next.iter().zip(q) {
                y[*i] += gamma * qv;
            }
        }
        Ok(y)
    }

    /// Mean squared TD error of agent `slot`'s critic.
    pub fn critic_loss(&self, model: &Model, slot: usize, gamma: f64) -> Result<f64> {
        let samples = self.own_rows(model, slot);
        if samples.is_empty() {
            return Ok(0.0);
        }
        let y = self.targets(model, slot, gamma)?;
        let q = model.agents[slot].critic.q_values(&self.critic_input(&samples))?;
        Ok(q.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
    }

    fn critic_gradients(&self, model: &Model, slot: usize, gamma: f64) -> Result<Option<(f64, Gradients)>> {
        let samples = self.own_rows(model, slot);
        if samples.is_empty() {
            return Ok(None);
        }
        let y = self.targets(model, slot, gamma)?;
        let input = self.critic_input(&samples);
        let critic = &model.agents[slot].critic;
        let mut tape = Tape::new();
        let own = tape.input(input.own);
        let others = tape.input(input.others);
        let q = critic.forward_nodes(&mut tape, own, others, &input.segs, false)?;
        let t = tape.input(Tensor::from_parts(vec![y.len(), 1], y));
        let loss = tape.mse(q, t)?;
        let v = tape.value(loss).item()?;
        if !v.is_finite() {
            return Err(Error::Divergence(format!("critic {slot} loss is {v}")));
        }
        Ok(Some((v, tape.backward(loss)?)))
    }

    /// `−mean Q_i(o, μ_i(o_i), a_others)` on a tape, with the encoder live and
    /// the critic frozen.
    pub fn actor_loss_on_tape<'a>(&self, tape: &mut Tape<'a>, gnn: &'a GnnEncoder, actor_store: &'a ParamStore, actor_mlp: &Mlp, model: &'a Model, slot: usize) -> Result<Option<NodeId>> {
        let samples = self.own_rows(model, slot);
        if samples.is_empty() {
            return Ok(None);
        }
        let rows: Vec<usize> = samples.iter().map(|&(_, r)| r).collect();
        let x = tape.input(self.s.x.clone());
        let e = gnn.embed_on_tape(tape, x, &self.s.segs)?;
        let emb = tape.gather_rows(e, rows.clone())?;
        let raw = tape.input(Tensor::from_parts(vec![rows.len(), RAW_FEATURES], rows.iter().flat_map(|&r| self.s.x.row_slice(r).to_vec()).collect()));
        let obs = tape.concat(&[raw, emb])?;
        let a = actor_mlp.forward(tape, actor_store, obs)?;
        let own_obs = tape.input(Tensor::from_parts(vec![rows.len(), OBSERVATION], rows.iter().flat_map(|&r| self.obs_s[r]).collect()));
        let own = tape.concat(&[own_obs, a])?;
        let others = Self::others(&self.s, &self.obs_s, &self.act_s, &samples);
        let segs: Vec<usize> = others.iter().map(|(q, _)| *q).collect();
        let others = tape.input(Tensor::from_parts(vec![others.len(), OBS_ACT], others.into_iter().flat_map(|(_, r)| r).collect()));
        let q = model.agents[slot].critic.forward_nodes(tape, own, others, &segs, true)?;
        let m = tape.mean_all(q);
        Ok(Some(tape.scale(m, -1.0)))
    }
}

struct Optimizers {
    actor: Vec<Adam>,
    critic: Vec<Adam>,
    gnn: Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub actor: f64,
    pub critic: f64,
    pub gnn: f64,
}

fn update(model: &mut Model, opt: &mut Optimizers, batch: &[&Transition], hp: &Hyperparams, lr: LearningRates) -> Result<f64> {
    let mut losses = Vec::new();
    // encoder and target networks stay fixed until the end of the update
    let prepared = PreparedBatch::new(model, batch)?;
    for slot in 0..model.agents.len() {
        if let Some((loss, grads)) = prepared.critic_gradients(model, slot, hp.gamma)? {
            losses.push(loss);
            let critic = &mut model.agents[slot].critic.store;
            grads.accumulate_into(critic);
            opt.critic[slot].step(critic, lr.critic);
        }
        let grads = {
            let mut tape = Tape::new();
            let agent = &model.agents[slot];
            match prepared.actor_loss_on_tape(&mut tape, &model.gnn, &agent.actor.store, &agent.actor.mlp, model, slot)? {
                Some(loss) => {
                    let v = tape.value(loss).item()?;
                    if !v.is_finite() {
                        return Err(Error::Divergence(format!("actor {slot} objective is {v}")));
                    }
                    Some(tape.backward(loss)?)
                }
                None => None,
            }
        };
        if let Some(g) = grads {
            g.accumulate_into(&mut model.gnn.store);
            let actor = &mut model.agents[slot].actor.store;
            g.accumulate_into(actor);
            opt.actor[slot].step(actor, lr.actor);
        }
    }
    opt.gnn.step(&mut model.gnn.store, lr.gnn);
    for a in &mut model.agents {
        a.soft_update_targets(hp.tau)?;
    }
    Ok(if losses.is_empty() { f64::NAN } else { losses.iter().sum::<f64>() / losses.len() as f64 })
}

pub struct Trainer {
    pub model: Model,
    pub hp: Hyperparams,
    pub selection: SelectionConfig,
    pub buffer: ReplayBuffer,
    opt: Optimizers,
    env_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    sigma: f64,
    rewards: Vec<f64>,
    pub log: Vec<EpisodeLog>,
    pub updates: u64,
}

impl Trainer {
    pub fn new(model: Model, hp: Hyperparams, selection: SelectionConfig, seed: u64) -> Result<Self> {
        hp.validate()?;
        selection.validate()?;
        let opt = Optimizers {
            actor: model.agents.iter().map(|a| Adam::new(&a.actor.store)).collect(),
            critic: model.agents.iter().map(|a| Adam::new(&a.critic.store)).collect(),
            gnn: Adam::new(&model.gnn.store),
        };
        Ok(Trainer {
            buffer: ReplayBuffer::new(hp.buffer_capacity, rng_stream(seed, Stream::Sampling))?,
            env_rng: rng_stream(seed, Stream::Env),
            noise_rng: rng_stream(seed, Stream::Noise),
            sigma: hp.noise_sigma,
            rewards: Vec::new(),
            log: Vec::new(),
            updates: 0,
            model,
            hp,
            selection,
            opt,
        })
    }

    pub fn learning_rates(&self) -> LearningRates {
        let f = adaptive_lr(1.0, &self.rewards);
        LearningRates {
            actor: self.hp.actor_lr * f,
            critic: self.hp.critic_lr * f,
            gnn: self.hp.gnn_lr * f,
        }
    }

    fn reward(&self, a: &ActionScores, m: &[f64; 3], stress: f64) -> Result<f64> {
        Ok(match &self.hp.reward {
            RewardMode::NegMse => compute_reward(a, m, self.hp.bonus),
            RewardMode::Composite { weights } => {
                let w = weights[&regime_of(stress)?];
                w.iter().zip(m).map(|(a, b)| a * b).sum()
            }
        })
    }

    /// One sampled update if the buffer holds a full batch; returns the mean critic loss.
    pub fn train_step(&mut self) -> Result<Option<f64>> {
        if self.buffer.len() < self.hp.batch_size {
            return Ok(None);
        }
        let idx = self.buffer.sample_indices(self.hp.batch_size)?;
        let batch: Vec<&Transition> = idx.iter().map(|&i| &self.buffer.items[i]).collect();
        let lr = self.learning_rates();
        let loss = update(&mut self.model, &mut self.opt, &batch, &self.hp, lr)?;
        self.updates += 1;
        Ok(Some(loss))
    }

    pub fn run_episode(&mut self, env_cfg: &EnvConfig, workload: &TrainingWorkload) -> Result<EpisodeLog> {
        let mut env = Env::new(env_cfg.clone())?;
        let arrivals = workload.generate(self.hp.steps, &mut self.env_rng);
        let horizon = arrivals.last().map_or(0.0, |e| e.time) + workload.drain_secs;
        for ev in arrivals {
            env.schedule(ev)?;
        }
        let (mut rewards, mut mses, mut losses, mut stresses) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        while rewards.len() < self.hp.steps {
            let Some(pod_id) = env.next_decision(horizon)? else {
                break;
            };
            let cands = env.feasible(&pod_id)?;
            if cands.is_empty() {
                env.defer(&pod_id, DeferReason::NoFeasibleNode)?;
                continue;
            }
            let state = snapshot(env.graph());
            let scores = self.model.score(&state)?;
            let mut joint = BTreeMap::new();
            for (id, a) in scores {
                joint.insert(id, explore_scores(&a, self.sigma, &mut self.noise_rng)?);
            }
            let feasible: BTreeMap<usize, ActionScores> = cands.iter().map(|id| (*id, joint[id])).collect();
            let winner = lex_select(&feasible, state.stress, &self.selection)?;
            let pod = env.pod(&pod_id).expect("offered pods exist").spec.clone();
            env.bind(&pod_id, winner)?;
            let next_state = snapshot(env.graph());
            let m = realized_metrics(&next_state, winner, &env_cfg.cost_table)?;
            let r = self.reward(&joint[&winner], &m, state.stress)?;
            rewards.push(r);
            mses.push(mse_term(&joint[&winner], &m));
            stresses.push(state.stress);
            self.buffer.push(Transition {
                stress: state.stress,
                state,
                joint_scores: joint,
                winner,
                pod,
                reward: r,
                next_state,
            });
            if rewards.len() % self.hp.train_every == 0 {
                if let Some(l) = self.train_step()? {
                    losses.push(l);
                }
            }
        }
        let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        let entry = EpisodeLog {
            episode: self.log.len(),
            mean_reward: mean(&rewards),
            mse_term: mean(&mses),
            critic_loss: mean(&losses),
            stress_mean: mean(&stresses),
            lr: self.learning_rates().actor,
        };
        if entry.mean_reward.is_finite() {
            self.rewards.push(entry.mean_reward);
        }
        self.sigma *= self.hp.noise_decay;
        log::info!(
            "episode {} reward {:.4} mse {:.4} critic {:.4} stress {:.3}",
            entry.episode,
            entry.mean_reward,
            entry.mse_term,
            entry.critic_loss,
            entry.stress_mean
        );
        self.log.push(entry.clone());
        Ok(entry)
    }
}

/// Full training run: `hp.episodes` episodes of at most `hp.steps` placements.
pub fn train(model: Model, env_cfg: &EnvConfig, workload: &TrainingWorkload, hp: &Hyperparams, selection: &SelectionConfig, seed: u64) -> Result<(Model, Vec<EpisodeLog>)> {
    workload.validate()?;
    let mut t = Trainer::new(model, hp.clone(), selection.clone(), seed)?;
    for _ in 0..hp.episodes {
        t.run_episode(env_cfg, workload)?;
    }
    Ok((t.model, t.log))
}

/// Fresh model with one agent per possible node of the cluster.
pub fn init_model(env_cfg: &EnvConfig, seed: u64) -> Result<Model> {
    Model::new(env_cfg.cluster.max_nodes(), &mut rng_stream(seed, Stream::Init))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{actor_forward, critic_forward};
    use crate::autodiff::grad_check;
    use crate::cluster::{CostClass, NodeState};
    use crate::gnn::observe_all;
    use crate::sim::ClusterConfig;
    use rand::SeedableRng;

    fn toy_env() -> EnvConfig {
        EnvConfig {
            cluster: ClusterConfig::fixed(3),
            ..EnvConfig::default()
        }
    }

    fn filled_trainer(seed: u64) -> Trainer {
        let env = toy_env();
        let hp = Hyperparams {
            batch_size: 1000,
            steps: 40,
            ..Hyperparams::default()
        };
        let model = init_model(&env, seed).unwrap();
        let mut t = Trainer::new(model, hp, SelectionConfig::default(), seed).unwrap();
        t.run_episode(&env, &TrainingWorkload::default()).unwrap();
        t
    }

    #[test]
    fn reward_examples() {
        let b = 0.1;
        let m = [0.3, 0.7, 0.2];
        assert_eq!(compute_reward(&ActionScores(m), &m, b), b);
        assert!((compute_reward(&ActionScores([1.0; 3]), &[0.0; 3], 0.1) - (-0.9)).abs() < 1e-15);
        assert!((compute_reward(&ActionScores([0.5; 3]), &[0.5, 0.0, 1.0], 0.0) + 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn realized_metric_examples() {
        let costs = CostTable::default();
        let mut std_node = NodeState::new(0, 4000, 16384, CostClass::Standard);
        std_node.cpu_allocated = 2000;
        std_node.mem_allocated = 8192;
        let mut g = ClusterGraph::new(vec![std_node, NodeState::new(1, 4000, 32768, CostClass::HighMem)]);
        let m = realized_metrics(&g, 0, &costs).unwrap();
        assert_eq!(m[1], 0.5);
        assert_eq!(m[2], 1.0);
        assert!(realized_metrics(&g, 1, &costs).unwrap()[2] < 1.0);
        g.nodes[0].memory_pressure = true;
        assert_eq!(realized_metrics(&g, 0, &costs).unwrap()[0], 0.0);
        assert!(realized_metrics(&g, 9, &costs).is_err());
    }

    #[test]
    fn exploration_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = ActionScores([0.5, 0.4, 0.6]);
        assert_eq!(explore_scores(&a, 0.0, &mut rng).unwrap(), a);
        assert!(explore_scores(&a, -1.0, &mut rng).is_err());
        let n = 10_000;
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let o = explore_scores(&a, 0.05, &mut rng).unwrap();
            for j in 0..3 {
                sq[j] += (o.0[j] - a.0[j]).powi(2);
            }
        }
        for s in sq {
            assert!(((s / n as f64).sqrt() / 0.05 - 1.0).abs() < 0.05);
        }
        for _ in 0..1000 {
            let o = explore_scores(&ActionScores([0.99, 0.01, 0.5]), 1.0, &mut rng).unwrap();
            assert!(o.0.iter().all(|v| (SCORE_FLOOR..=SCORE_CEIL).contains(v)));
        }
    }

    #[test]
    fn adaptive_lr_rule() {
        assert_eq!(adaptive_lr(0.1, &[]), 0.1);
        let rising: Vec<f64> = (0..100).map(|i| i as f64 * 0.01).collect();
        assert_eq!(adaptive_lr(0.1, &rising), 0.1);
        assert_eq!(adaptive_lr(0.1, &[0.5; 40]), 0.05);
        // an incomplete trailing window is ignored
        assert_eq!(adaptive_lr(0.1, &[0.5; 59]), 0.05);
        assert_eq!(adaptive_lr(0.1, &[0.5; 400]), 0.1 / 16.0);
    }

    #[test]
    fn replay_ring_and_uniformity() {
        let t = filled_trainer(1);
        let proto = t.buffer.get(0).unwrap().clone();
        let mut buf = ReplayBuffer::new(100, ChaCha8Rng::seed_from_u64(9)).unwrap();
        for i in 0..250 {
            let mut tr = proto.clone();
            tr.reward = i as f64;
            buf.push(tr);
        }
        assert_eq!(buf.len(), 100);
        // the oldest 150 were overwritten
        assert!((0..100).all(|i| buf.get(i).unwrap().reward >= 150.0));
        let mut counts = [0u32; 100];
        for _ in 0..100_000 {
            counts[buf.sample_indices(1).unwrap()[0]] += 1;
        }
        assert!(counts.iter().all(|&c| (850..=1150).contains(&c)), "{counts:?}");
        let mut k = buf.sample_indices(64).unwrap();
        k.sort();
        k.dedup();
        assert_eq!(k.len(), 64);
        assert!(buf.sample_indices(101).is_err());
        assert!(ReplayBuffer::new(0, ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn transitions_share_the_reward_and_skip_updates_below_batch() {
        let t = filled_trainer(2);
        let before = init_model(&toy_env(), 2).unwrap();
        assert_eq!(t.updates, 0);
        assert_eq!(t.model, before);
        assert!(t.buffer.len() > 0);
        for i in 0..t.buffer.len() {
            let tr = t.buffer.get(i).unwrap();
            assert!(tr.joint_scores.contains_key(&tr.winner));
            assert!(tr.reward.is_finite());
            let m = realized_metrics(&tr.next_state, tr.winner, &CostTable::default()).unwrap();
            assert_eq!(tr.reward, compute_reward(&tr.joint_scores[&tr.winner], &m, 0.1));
            assert!(tr.state.nodes.iter().all(|n| n.pod_ids.is_empty()));
        }
    }

    /// Per-graph, per-sample evaluation through the single-sample network paths.
    fn straight_line_critic_loss(model: &Model, batch: &[&Transition], slot: usize, gamma: f64) -> f64 {
        let (mut sum, mut count) = (0.0, 0);
        for t in batch {
            let obs = observe_all(&t.state, &model.gnn).unwrap();
            let acts: Vec<ActionScores> = t.state.nodes.iter().map(|n| t.joint_scores[&n.node_id]).collect();
            let nobs = observe_all(&t.next_state, &model.gnn).unwrap();
            let nacts: Vec<ActionScores> = t
                .next_state
                .nodes
                .iter()
                .zip(&nobs)
                .map(|(n, o)| actor_forward(&model.agent(n.node_id).target_actor, o).unwrap())
                .collect();
            for (i, n) in t.state.nodes.iter().enumerate() {
                if model.agent_index(n.node_id) != slot {
                    continue;
                }
                let others: Vec<_> = (0..obs.len()).filter(|&j| j != i).map(|j| (obs[j].clone(), acts[j])).collect();
                let q = critic_forward(&model.agents[slot].critic, (&obs[i], &acts[i]), &others).unwrap();
                let mut y = t.reward;
                if let Some(i2) = t.next_state.index_of(n.node_id) {
                    let nothers: Vec<_> = (0..nobs.len()).filter(|&j| j != i2).map(|j| (nobs[j].clone(), nacts[j])).collect();
                    y += gamma * critic_forward(&model.agents[slot].target_critic, (&nobs[i2], &nacts[i2]), &nothers).unwrap();
                }
                sum += (q - y) * (q - y);
                count += 1;
            }
        }
        sum / count as f64
    }

    #[test]
    fn critic_loss_matches_straight_line() {
        let mut t = filled_trainer(3);
        let idx = t.buffer.sample_indices(16).unwrap();
        let batch: Vec<&Transition> = idx.iter().map(|&i| t.buffer.get(i).unwrap()).collect();
        let p = PreparedBatch::new(&t.model, &batch).unwrap();
        for slot in 0..t.model.agents.len() {
            let a = p.critic_loss(&t.model, slot, 0.99).unwrap();
            let b = straight_line_critic_loss(&t.model, &batch, slot, 0.99);
            assert!((a - b).abs() < 1e-10, "slot {slot}: {a} vs {b}");
        }
    }

    #[test]
    fn actor_gradient_matches_finite_difference() {
        for seed in [5, 6, 7] {
            let mut t = filled_trainer(seed);
            let idx = t.buffer.sample_indices(8).unwrap();
            let batch: Vec<&Transition> = idx.iter().map(|&i| t.buffer.get(i).unwrap()).collect();
            let p = PreparedBatch::new(&t.model, &batch).unwrap();
            let m = &t.model;
            let slot = (0..m.agents.len()).find(|&k| !p.own_rows(m, k).is_empty()).unwrap();
            let mlp = &m.agents[slot].actor.mlp;
            let run = |s: &ParamStore, grad: bool| -> Result<(f64, Option<Gradients>)> {
                let mut tape = Tape::new();
                let l = p.actor_loss_on_tape(&mut tape, &m.gnn, s, mlp, m, slot)?.unwrap();
                let v = tape.value(l).item()?;
                Ok((v, if grad { Some(tape.backward(l)?) } else { None }))
            };
            // the objective averages Q values of order one; smaller steps are roundoff-bound
            let err = grad_check(&m.agents[slot].actor.store, 3e-5, |s| Ok(run(s, false)?.0), |s| Ok(run(s, true)?.1.unwrap())).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
            // the frozen critic receives nothing
            let g = run(&m.agents[slot].actor.store, true).unwrap().1.unwrap();
            let c = &m.agents[slot].critic.store;
            assert!(c.ids().all(|id| g.get(c, id).is_none()));
        }
    }

    #[test]
    fn updates_run_and_are_deterministic() {
        let env = toy_env();
        let hp = Hyperparams {
            batch_size: 8,
            steps: 30,
            episodes: 2,
            ..Hyperparams::default()
        };
        let run = || train(init_model(&env, 11).unwrap(), &env, &TrainingWorkload::default(), &hp, &SelectionConfig::default(), 11).unwrap();
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a.to_weights().to_bytes(), b.to_weights().to_bytes());
        assert_eq!(la, lb);
        assert_ne!(a, init_model(&env, 11).unwrap());
        assert!(la.iter().all(|e| e.critic_loss.is_finite()));
        let mut csv = Vec::new();
        write_log_csv(&la, &mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("episode,mean_reward,mse_term,critic_loss,stress_mean,lr\n"));
    }

    #[test]
    fn hyperparam_validation() {
        assert!(Hyperparams::default().validate().is_ok());
        for bad in [
            Hyperparams { gamma: 1.0, ..Default::default() },
            Hyperparams { tau: 0.0, ..Default::default() },
            Hyperparams { bonus: -0.1, ..Default::default() },
            Hyperparams { batch_size: 0, ..Default::default() },
            Hyperparams {
                reward: RewardMode::Composite { weights: BTreeMap::new() },
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
        let hp: Hyperparams = serde_json::from_str(r#"{"gamma":0.5}"#).unwrap();
        assert_eq!(hp.gamma, 0.5);
        assert!(serde_json::from_str::<Hyperparams>(r#"{"gama":0.5}"#).is_err());
    }
}
