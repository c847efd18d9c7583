//! Trained policy bundle: shared graph encoder plus one agent per node slot.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::agent::{ActionScores, AgentBundle, ACTIONS};
use crate::autodiff::Tensor;
use crate::cluster::ClusterGraph;
use crate::error::{Error, Result};
use crate::gnn::{observe_all, GnnEncoder, Observation, OBSERVATION};
use crate::weights::WeightsFile;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub gnn: GnnEncoder,
    pub agents: Vec<AgentBundle>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(n_agents: usize, rng: &mut R) -> Result<Self> {
        if n_agents == 0 {
            return Err(Error::Config("a model needs at least one agent".into()));
        }
        let gnn = GnnEncoder::new(rng);
        let agents = (0..n_agents).map(|_| AgentBundle::new(rng)).collect();
        Ok(Model { gnn, agents })
    }

    /// Agent slot serving `node_id`. Ids beyond the trained slots wrap around.
    pub fn agent_index(&self, node_id: usize) -> usize {
        node_id % self.agents.len()
    }

    pub fn agent(&self, node_id: usize) -> &AgentBundle {
        &self.agents[self.agent_index(node_id)]
    }

    pub fn to_weights(&self) -> WeightsFile {
        let mut f = WeightsFile::default();
        self.gnn.export(&mut f);
        for (i, a) in self.agents.iter().enumerate() {
            a.export(i, &mut f);
        }
        f
    }

    pub fn from_weights(file: &WeightsFile) -> Result<Self> {
        let gnn = GnnEncoder::import(file)?;
        let mut agents = Vec::new();
        while file.get(&format!("agent{}.actor.l.l0.weight", agents.len())).is_some() {
            agents.push(AgentBundle::import(agents.len(), file)?);
        }
        if agents.is_empty() {
            return Err(Error::Format("no agents in weights file".into()));
        }
        if gnn.output_dim() + crate::cluster::RAW_FEATURES != OBSERVATION {
            return Err(Error::Shape(format!("encoder emits {} features", gnn.output_dim())));
        }
        Ok(Model { gnn, agents })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_weights().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_weights(&WeightsFile::load(path)?)
    }

    /// Observations and actor scores for every node of `g`, in node order.
    pub fn observe_and_score(&self, g: &ClusterGraph) -> Result<(Vec<Observation>, Vec<ActionScores>)> {
        let obs = observe_all(g, &self.gnn)?;
        let mut scores = Vec::with_capacity(obs.len());
        for (node, o) in g.nodes.iter().zip(&obs) {
            let actor = &self.agent(node.node_id).actor;
            let y = actor.infer(&Tensor::row(o.0.to_vec()))?;
            scores.push(ActionScores::from_slice(&y.data()[..ACTIONS])?);
        }
        Ok((obs, scores))
    }

    pub fn score(&self, g: &ClusterGraph) -> Result<BTreeMap<usize, ActionScores>> {
        let (_, scores) = self.observe_and_score(g)?;
        Ok(g.nodes.iter().map(|n| n.node_id).zip(scores).collect())
    }
}
